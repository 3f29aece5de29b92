//! Stacked GRU classifier with an affine softmax head, plus backpropagation
//! through time.
//!
//! Per layer and timestep (no gate biases):
//!
//! ```text
//! z  = σ(W_z x + U_z h_prev)              update gate
//! r  = σ(W_v x + U_v h_prev)              reset gate
//! h~ = tanh(W x + U (r ⊙ h_prev))         candidate
//! h  = z ⊙ h_prev + (1 - z) ⊙ h~
//! ```
//!
//! Layer 0 reads the embedded input stream, layer `k > 0` reads the hidden
//! states of layer `k - 1`. Logits are `W_out h_top + b_out`.
//!
//! All states are batched: a state is a `batch × hidden` matrix and a single
//! sequence is a batch of one.

use crate::error::{Error, Result};
use crate::numerics::{
    add_matmul_tn, derive_seed, glorot_uniform, matmul_nn, matmul_nt, sigmoid_scalar, Matrix,
    Real, Vector,
};

/// Layer count used in the original configuration.
pub const DEFAULT_LAYERS: usize = 4;
/// Hidden units per layer used in the original configuration.
pub const DEFAULT_HIDDEN: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub layers: usize,
    pub hidden_size: usize,
    pub input_size: usize,
    /// Target vocabulary id count (output classes).
    pub vocab_size: usize,
}

impl ModelShape {
    pub fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_size
        } else {
            self.hidden_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_size == 0 || self.input_size == 0 || self.vocab_size == 0
        {
            return Err(Error::Config(format!("degenerate model shape {self:?}")));
        }
        Ok(())
    }
}

/// Weights of one GRU layer. `w_v`/`u_v` drive the reset gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GruLayerParameters<T> {
    pub w: Matrix<T>,
    pub u: Matrix<T>,
    pub w_z: Matrix<T>,
    pub u_z: Matrix<T>,
    pub w_v: Matrix<T>,
    pub u_v: Matrix<T>,
}

impl<T: Real> GruLayerParameters<T> {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let wi = || Matrix::zeros(hidden_size, input_size);
        let uh = || Matrix::zeros(hidden_size, hidden_size);
        GruLayerParameters {
            w: wi(),
            u: uh(),
            w_z: wi(),
            u_z: uh(),
            w_v: wi(),
            u_v: uh(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w.cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w.rows()
    }

    /// The six matrices in storage order: W, U, W_z, U_z, W_v, U_v.
    pub fn matrices(&self) -> [&Matrix<T>; 6] {
        [&self.w, &self.u, &self.w_z, &self.u_z, &self.w_v, &self.u_v]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix<T>; 6] {
        [
            &mut self.w,
            &mut self.u,
            &mut self.w_z,
            &mut self.u_z,
            &mut self.w_v,
            &mut self.u_v,
        ]
    }

    fn check(&self) -> Result<()> {
        let (h, i) = (self.hidden_size(), self.input_size());
        for (k, m) in self.matrices().iter().enumerate() {
            let expect = if k % 2 == 0 { (h, i) } else { (h, h) };
            if m.shape() != expect {
                return Err(Error::dim(
                    "GruLayerParameters",
                    format!("{expect:?}"),
                    format!("{:?}", m.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Every trainable tensor of the model. Also used for gradients and optimizer
/// velocity, which share the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T> {
    pub layers: Vec<GruLayerParameters<T>>,
    pub output_weight: Matrix<T>,
    pub output_bias: Vector<T>,
}

impl<T: Real> ModelParameters<T> {
    pub fn zeros(shape: ModelShape) -> Self {
        ModelParameters {
            layers: (0..shape.layers)
                .map(|l| GruLayerParameters::zeros(shape.layer_input(l), shape.hidden_size))
                .collect(),
            output_weight: Matrix::zeros(shape.vocab_size, shape.hidden_size),
            output_bias: Vector::zeros(shape.vocab_size),
        }
    }

    /// Glorot-uniform weights, zero output bias. Each matrix draws from its
    /// own stream derived from `seed`.
    pub fn glorot(shape: ModelShape, seed: u64) -> Self {
        let mut params = Self::zeros(shape);
        let mut stream = 0u64;
        for layer in &mut params.layers {
            for m in layer.matrices_mut() {
                *m = glorot_uniform(m.rows(), m.cols(), derive_seed(seed, stream));
                stream += 1;
            }
        }
        params.output_weight =
            glorot_uniform(shape.vocab_size, shape.hidden_size, derive_seed(seed, stream));
        params
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            layers: self.layers.len(),
            hidden_size: self.output_weight.cols(),
            input_size: self.layers.first().map_or(0, |l| l.input_size()),
            vocab_size: self.output_weight.rows(),
        }
    }

    /// Checks that every tensor agrees with [`ModelParameters::shape`].
    pub fn validate(&self) -> Result<()> {
        let shape = self.shape();
        shape.validate()?;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.check()?;
            if layer.input_size() != shape.layer_input(l) || layer.hidden_size() != shape.hidden_size
            {
                return Err(Error::dim(
                    "ModelParameters layer",
                    format!("{}x{}", shape.hidden_size, shape.layer_input(l)),
                    format!("{}x{}", layer.hidden_size(), layer.input_size()),
                ));
            }
        }
        if self.output_bias.len() != shape.vocab_size {
            return Err(Error::dim("output_bias", shape.vocab_size, self.output_bias.len()));
        }
        Ok(())
    }

    /// All tensors in storage order: per layer W, U, W_z, U_z, W_v, U_v; then
    /// the output weight and output bias.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::with_capacity(self.layers.len() * 6 + 2);
        for layer in &self.layers {
            out.extend(layer.matrices().into_iter().map(|m| m.as_slice()));
        }
        out.push(self.output_weight.as_slice());
        out.push(&self.output_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::with_capacity(self.layers.len() * 6 + 2);
        for layer in &mut self.layers {
            out.extend(layer.matrices_mut().into_iter().map(|m| m.as_mut_slice()));
        }
        out.push(self.output_weight.as_mut_slice());
        out.push(&mut self.output_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("assign_flat", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            layers: self
                .layers
                .iter()
                .map(|l| GruLayerParameters {
                    w: l.w.cast(),
                    u: l.u.cast(),
                    w_z: l.w_z.cast(),
                    u_z: l.u_z.cast(),
                    w_v: l.w_v.cast(),
                    u_v: l.u_v.cast(),
                })
                .collect(),
            output_weight: self.output_weight.cast(),
            output_bias: self.output_bias.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }
}

/// Per-layer hidden activations, each `batch × hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState<T> {
    pub layers: Vec<Matrix<T>>,
}

impl<T: Real> HiddenState<T> {
    pub fn zeros(shape: ModelShape, batch: usize) -> Self {
        HiddenState {
            layers: vec![Matrix::zeros(batch, shape.hidden_size); shape.layers],
        }
    }

    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, Matrix::rows)
    }

    pub fn top(&self) -> &Matrix<T> {
        self.layers.last().expect("at least one layer")
    }

    /// The state of a single batch member.
    pub fn select(&self, row: usize) -> Self {
        HiddenState {
            layers: self.layers.iter().map(|m| Matrix::from_row(m.row(row))).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Matrix::is_finite)
    }
}

/// Values cached by one cell evaluation for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStep<T> {
    pub x: Matrix<T>,
    pub h_prev: Matrix<T>,
    pub z: Matrix<T>,
    pub r: Matrix<T>,
    /// `r ⊙ h_prev`
    pub rh: Matrix<T>,
    pub candidate: Matrix<T>,
    pub h: Matrix<T>,
}

/// Forward-pass record: `steps[t][layer]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepTape<T> {
    pub steps: Vec<Vec<LayerStep<T>>>,
}

impl<T: Real> StepTape<T> {
    pub fn new() -> Self {
        StepTape { steps: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Top-layer activation after step `t`.
    pub fn top(&self, t: usize) -> &Matrix<T> {
        &self.steps[t].last().expect("at least one layer").h
    }
}

fn check_shape<T: Real>(op: &'static str, m: &Matrix<T>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::dim(
            op,
            format!("{rows}x{cols}"),
            format!("{}x{}", m.rows(), m.cols()),
        ));
    }
    Ok(())
}

/// One GRU step for a batch of inputs `x` (`batch × input`) and previous
/// states `h_prev` (`batch × hidden`).
pub fn gru_cell_forward<T: Real>(
    x: &Matrix<T>,
    h_prev: &Matrix<T>,
    p: &GruLayerParameters<T>,
) -> Result<(Matrix<T>, LayerStep<T>)> {
    let batch = x.rows();
    check_shape("gru_cell_forward x", x, batch, p.input_size())?;
    check_shape("gru_cell_forward h_prev", h_prev, batch, p.hidden_size())?;

    let mut z = matmul_nt(x, &p.w_z)?;
    z.add_assign(&matmul_nt(h_prev, &p.u_z)?)?;
    let z = z.map(sigmoid_scalar);

    let mut r = matmul_nt(x, &p.w_v)?;
    r.add_assign(&matmul_nt(h_prev, &p.u_v)?)?;
    let r = r.map(sigmoid_scalar);

    let rh = r.zip_map(h_prev, |a, b| a * b)?;
    let mut candidate = matmul_nt(x, &p.w)?;
    candidate.add_assign(&matmul_nt(&rh, &p.u)?)?;
    let candidate = candidate.map(T::tanh);

    let mut h = Matrix::zeros(batch, p.hidden_size());
    for (((o, &zi), &hp), &c) in h
        .as_mut_slice()
        .iter_mut()
        .zip(z.as_slice())
        .zip(h_prev.as_slice())
        .zip(candidate.as_slice())
    {
        *o = zi * hp + (T::one() - zi) * c;
    }

    let step = LayerStep {
        x: x.clone(),
        h_prev: h_prev.clone(),
        z,
        r,
        rh,
        candidate,
        h: h.clone(),
    };
    Ok((h, step))
}

/// Switches off part of the backward pass. Only used to demonstrate that the
/// gradient check notices a missing path.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    /// Drop the gradient flowing back through `U (r ⊙ h_prev)`.
    ResetPath,
}

/// Backward through one cell. Accumulates weight gradients into `grad` and
/// returns `(d h_prev, d x)`; `d x` is only formed when `want_dx`.
pub fn gru_cell_backward<T: Real>(
    dh: &Matrix<T>,
    step: &LayerStep<T>,
    p: &GruLayerParameters<T>,
    grad: &mut GruLayerParameters<T>,
    want_dx: bool,
) -> Result<(Matrix<T>, Option<Matrix<T>>)> {
    cell_backward(dh, step, p, grad, want_dx, Ablation::None)
}

fn cell_backward<T: Real>(
    dh: &Matrix<T>,
    step: &LayerStep<T>,
    p: &GruLayerParameters<T>,
    grad: &mut GruLayerParameters<T>,
    want_dx: bool,
    ablation: Ablation,
) -> Result<(Matrix<T>, Option<Matrix<T>>)> {
    check_shape("gru_cell_backward dh", dh, step.h.rows(), step.h.cols())?;
    let one = T::one();

    // h = z ⊙ h_prev + (1 - z) ⊙ h~
    let mut da_z = Matrix::zeros(dh.rows(), dh.cols());
    let mut da_c = Matrix::zeros(dh.rows(), dh.cols());
    for i in 0..dh.as_slice().len() {
        let g = dh.as_slice()[i];
        let z = step.z.as_slice()[i];
        let c = step.candidate.as_slice()[i];
        let hp = step.h_prev.as_slice()[i];
        da_z.as_mut_slice()[i] = g * (hp - c) * z * (one - z);
        da_c.as_mut_slice()[i] = g * (one - z) * (one - c * c);
    }

    add_matmul_tn(&mut grad.w, &da_c, &step.x)?;
    add_matmul_tn(&mut grad.u, &da_c, &step.rh)?;
    add_matmul_tn(&mut grad.w_z, &da_z, &step.x)?;
    add_matmul_tn(&mut grad.u_z, &da_z, &step.h_prev)?;

    let mut drh = matmul_nn(&da_c, &p.u)?;
    if ablation == Ablation::ResetPath {
        drh = Matrix::zeros(drh.rows(), drh.cols());
    }
    let da_r = Matrix::new(
        drh.rows(),
        drh.cols(),
        drh.as_slice()
            .iter()
            .zip(step.h_prev.as_slice())
            .zip(step.r.as_slice())
            .map(|((&g, &hp), &r)| g * hp * r * (one - r))
            .collect(),
    )?;
    add_matmul_tn(&mut grad.w_v, &da_r, &step.x)?;
    add_matmul_tn(&mut grad.u_v, &da_r, &step.h_prev)?;

    let mut dh_prev = Matrix::new(
        dh.rows(),
        dh.cols(),
        dh.as_slice()
            .iter()
            .zip(step.z.as_slice())
            .zip(drh.as_slice().iter().zip(step.r.as_slice()))
            .map(|((&g, &z), (&d, &r))| g * z + d * r)
            .collect(),
    )?;
    dh_prev.add_assign(&matmul_nn(&da_z, &p.u_z)?)?;
    dh_prev.add_assign(&matmul_nn(&da_r, &p.u_v)?)?;

    let dx = if want_dx {
        let mut dx = matmul_nn(&da_c, &p.w)?;
        dx.add_assign(&matmul_nn(&da_z, &p.w_z)?)?;
        dx.add_assign(&matmul_nn(&da_r, &p.w_v)?)?;
        Some(dx)
    } else {
        None
    };
    Ok((dh_prev, dx))
}

/// Advances every layer by one timestep, optionally recording the step.
pub fn step<T: Real>(
    params: &ModelParameters<T>,
    state: &mut HiddenState<T>,
    x: &Matrix<T>,
    tape: Option<&mut StepTape<T>>,
) -> Result<()> {
    if state.layers.len() != params.layers.len() {
        return Err(Error::dim("step (layers)", params.layers.len(), state.layers.len()));
    }
    let mut input = x.clone();
    let mut records = Vec::with_capacity(params.layers.len());
    for (layer, h) in params.layers.iter().zip(state.layers.iter_mut()) {
        let (h_new, rec) = gru_cell_forward(&input, h, layer)?;
        *h = h_new;
        input = h.clone();
        records.push(rec);
    }
    if let Some(tape) = tape {
        tape.steps.push(records);
    }
    Ok(())
}

/// `top · W_outᵀ + b_out` for each batch row.
pub fn output_logits<T: Real>(params: &ModelParameters<T>, top: &Matrix<T>) -> Result<Matrix<T>> {
    let mut logits = matmul_nt(top, &params.output_weight)?;
    for r in 0..logits.rows() {
        for (l, &b) in logits.row_mut(r).iter_mut().zip(params.output_bias.iter()) {
            *l = *l + b;
        }
    }
    Ok(logits)
}

/// Runs a batched input stream (one `batch × input` matrix per timestep).
pub fn forward_batch<T: Real>(
    inputs: &[Matrix<T>],
    params: &ModelParameters<T>,
    initial: &HiddenState<T>,
) -> Result<(HiddenState<T>, StepTape<T>)> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("forward pass needs at least one timestep"));
    }
    let mut state = initial.clone();
    let mut tape = StepTape::new();
    for x in inputs {
        step(params, &mut state, x, Some(&mut tape))?;
    }
    Ok((state, tape))
}

/// Runs a single sequence and returns the final state, the logits read at
/// the last step, and the tape for [`backward_sequence`].
pub fn forward_sequence<T: Real>(
    inputs: &[Vector<T>],
    params: &ModelParameters<T>,
    initial: &HiddenState<T>,
) -> Result<(HiddenState<T>, Vector<T>, StepTape<T>)> {
    let rows: Vec<Matrix<T>> = inputs.iter().map(|v| Matrix::from_row(v)).collect();
    let (state, tape) = forward_batch(&rows, params, initial)?;
    let logits = output_logits(params, state.top())?;
    Ok((state, logits.into_vec().into(), tape))
}

/// Gradients of a loss whose logit gradients at timestep `t` are given by
/// `outputs` (`(t, batch × vocab)` entries; repeated timesteps add up).
pub fn backward<T: Real>(
    tape: &StepTape<T>,
    params: &ModelParameters<T>,
    outputs: &[(usize, Matrix<T>)],
) -> Result<ModelParameters<T>> {
    backward_with(tape, params, outputs, Ablation::None)
}

#[doc(hidden)]
pub fn backward_with<T: Real>(
    tape: &StepTape<T>,
    params: &ModelParameters<T>,
    outputs: &[(usize, Matrix<T>)],
    ablation: Ablation,
) -> Result<ModelParameters<T>> {
    let shape = params.shape();
    let mut grads = ModelParameters::zeros(shape);
    let Some(first) = tape.steps.first() else {
        return Ok(grads);
    };
    if first.len() != shape.layers {
        return Err(Error::dim("backward (tape layers)", shape.layers, first.len()));
    }
    let batch = first[0].h.rows();

    let mut d_top: Vec<Option<Matrix<T>>> = vec![None; tape.len()];
    for (t, dlogits) in outputs {
        if *t >= tape.len() {
            return Err(Error::OutOfRange {
                index: *t,
                len: tape.len(),
            });
        }
        check_shape("backward logits", dlogits, batch, shape.vocab_size)?;
        let top = tape.top(*t);
        add_matmul_tn(&mut grads.output_weight, dlogits, top)?;
        for r in 0..batch {
            for (g, &d) in grads.output_bias.iter_mut().zip(dlogits.row(r)) {
                *g = *g + d;
            }
        }
        let dh = matmul_nn(dlogits, &params.output_weight)?;
        match &mut d_top[*t] {
            Some(acc) => acc.add_assign(&dh)?,
            slot => *slot = Some(dh),
        }
    }

    let mut carry: Vec<Matrix<T>> = vec![Matrix::zeros(batch, shape.hidden_size); shape.layers];
    for t in (0..tape.len()).rev() {
        let mut from_above = d_top[t].take();
        for l in (0..shape.layers).rev() {
            let mut dh = std::mem::take(&mut carry[l]);
            if let Some(extra) = &from_above {
                dh.add_assign(extra)?;
            }
            let (dh_prev, dx) = cell_backward(
                &dh,
                &tape.steps[t][l],
                &params.layers[l],
                &mut grads.layers[l],
                l > 0,
                ablation,
            )?;
            carry[l] = dh_prev;
            from_above = dx;
        }
    }
    Ok(grads)
}

/// Gradients for a loss read at the last step of a single sequence.
pub fn backward_sequence<T: Real>(
    tape: &StepTape<T>,
    logit_gradient: &[T],
    params: &ModelParameters<T>,
) -> Result<ModelParameters<T>> {
    if tape.is_empty() {
        return Err(Error::EmptyInput("backward_sequence needs a non-empty tape"));
    }
    let dlogits = Matrix::from_row(logit_gradient);
    backward(tape, params, &[(tape.len() - 1, dlogits)])
}
