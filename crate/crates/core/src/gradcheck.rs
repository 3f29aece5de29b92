//! Randomised check of the GRU backward pass against numeric derivatives.
//!
//! Two numeric oracles run on every instance. Central differences are the
//! familiar one, but with a relative-error floor of 1e-8 they bottom out
//! near 1e-4 on gradient components of order 1e-8, where the difference
//! quotient is dominated by roundoff. The complex-step derivative
//! `Im f(p + ih e_k) / h` has no subtraction and is accurate to machine
//! precision at any magnitude; it decides PASS/FAIL. It needs its own
//! complex-valued forward pass, kept deliberately plain here.

use std::fmt;

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gru::{
    self, backward_with, forward_sequence, Ablation, HiddenState, ModelParameters, ModelShape,
};
use crate::numerics::{
    cross_entropy, derive_seed, finite_difference_check, seeded_rng, softmax, Matrix, Vector,
    FD_EPSILON,
};

pub const DEFAULT_INSTANCES: usize = 100;
pub const DEFAULT_THRESHOLD: f64 = 1e-5;
const COMPLEX_STEP: f64 = 1e-20;

/// One random problem: a short input stream, a random initial state, and a
/// cross-entropy loss on the logits read after the last step.
#[derive(Clone, Debug)]
pub struct Instance {
    pub params: ModelParameters<f64>,
    pub initial: HiddenState<f64>,
    pub inputs: Vec<Vector<f64>>,
    pub target: usize,
}

impl Instance {
    /// Dimensions are drawn from `T ≤ 4`, `layers ≤ 2`, `hidden ≤ 6`,
    /// `vocab ≤ 8`, `input ≤ 4`.
    pub fn random(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let shape = ModelShape {
            layers: rng.gen_range(1..=2),
            hidden_size: rng.gen_range(1..=6),
            input_size: rng.gen_range(1..=4),
            vocab_size: rng.gen_range(2..=8),
        };
        let steps = rng.gen_range(1..=4);
        let mut params = ModelParameters::glorot(shape, rng.gen());
        for b in params.output_bias.iter_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        let mut initial = HiddenState::zeros(shape, 1);
        for h in &mut initial.layers {
            for v in h.as_mut_slice() {
                *v = rng.gen_range(-0.9..0.9);
            }
        }
        let inputs = (0..steps)
            .map(|_| {
                (0..shape.input_size)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect::<Vec<f64>>()
                    .into()
            })
            .collect();
        let target = rng.gen_range(0..shape.vocab_size);
        Instance {
            params,
            initial,
            inputs,
            target,
        }
    }

    pub fn loss(&self, params: &ModelParameters<f64>) -> Result<f64> {
        let (_, logits, _) = forward_sequence(&self.inputs, params, &self.initial)?;
        Ok(cross_entropy(&softmax(&logits), self.target)?.0)
    }

    /// Analytic gradient of [`Instance::loss`].
    pub fn gradient(&self, ablation: Ablation) -> Result<ModelParameters<f64>> {
        let (_, logits, tape) = forward_sequence(&self.inputs, &self.params, &self.initial)?;
        let (_, dlogits) = cross_entropy(&softmax(&logits), self.target)?;
        if ablation == Ablation::None {
            return gru::backward_sequence(&tape, &dlogits, &self.params);
        }
        backward_with(
            &tape,
            &self.params,
            &[(tape.len() - 1, Matrix::from_row(&dlogits))],
            ablation,
        )
    }

    /// Worst relative error of the analytic gradient against complex-step
    /// derivatives, same metric as [`finite_difference_check`].
    pub fn check(&self, ablation: Ablation) -> Result<f64> {
        let analytic = self.gradient(ablation)?.flatten();
        let flat = self.params.flatten();
        let mut point: Vec<Complex64> = flat.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let mut worst = 0.0f64;
        for (k, &a) in analytic.iter().enumerate() {
            point[k].im = COMPLEX_STEP;
            let numeric = self.complex_loss(&point).im / COMPLEX_STEP;
            point[k].im = 0.0;
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("complex-step derivative {k}")));
            }
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
        Ok(worst)
    }

    /// [`Instance::loss`] over complex parameters laid out as
    /// [`ModelParameters::flatten`].
    pub fn complex_loss(&self, flat: &[Complex64]) -> Complex64 {
        let shape = self.params.shape();
        let n = shape.hidden_size;
        let mut rest = flat;
        let mut take = |len: usize| {
            let (head, tail) = rest.split_at(len);
            rest = tail;
            head
        };
        let one = Complex64::new(1.0, 0.0);
        let sigmoid = |a: Complex64| one / (one + (-a).exp());
        let affine = |m: &[Complex64], v: &[Complex64], rows: usize| -> Vec<Complex64> {
            let cols = v.len();
            (0..rows)
                .map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        };
        let mut layers = Vec::new();
        for l in 0..shape.layers {
            let input = shape.layer_input(l);
            let sizes = [n * input, n * n, n * input, n * n, n * input, n * n];
            layers.push(sizes.map(&mut take));
        }
        let out_w = take(shape.vocab_size * n);
        let out_b = take(shape.vocab_size);

        let mut state: Vec<Vec<Complex64>> = self
            .initial
            .layers
            .iter()
            .map(|h| h.as_slice().iter().map(|&x| Complex64::new(x, 0.0)).collect())
            .collect();
        for x in &self.inputs {
            let mut input: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            for (h, [w, u, w_z, u_z, w_v, u_v]) in state.iter_mut().zip(&layers) {
                let add = |a: Vec<Complex64>, b: Vec<Complex64>| -> Vec<Complex64> {
                    a.into_iter().zip(b).map(|(a, b)| a + b).collect()
                };
                let z: Vec<_> = add(affine(w_z, &input, n), affine(u_z, h, n))
                    .into_iter()
                    .map(sigmoid)
                    .collect();
                let r: Vec<_> = add(affine(w_v, &input, n), affine(u_v, h, n))
                    .into_iter()
                    .map(sigmoid)
                    .collect();
                let rh: Vec<_> = r.iter().zip(h.iter()).map(|(r, h)| r * h).collect();
                let c = add(affine(w, &input, n), affine(u, &rh, n));
                for i in 0..n {
                    h[i] = z[i] * h[i] + (one - z[i]) * c[i].tanh();
                }
                input = h.clone();
            }
        }
        let logits: Vec<Complex64> = affine(out_w, &state[shape.layers - 1], shape.vocab_size)
            .into_iter()
            .zip(out_b)
            .map(|(l, b)| l + b)
            .collect();
        let m = logits.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
        let sum: Complex64 = logits.iter().map(|&l| (l - m).exp()).sum();
        sum.ln() + m - logits[self.target]
    }

    /// Worst relative error against central differences with step
    /// [`FD_EPSILON`].
    pub fn check_central(&self, ablation: Ablation) -> Result<f64> {
        let analytic = self.gradient(ablation)?.flatten();
        let mut probe = self.params.clone();
        let mut failure = None;
        let err = finite_difference_check(
            |flat| {
                let r = probe.assign_flat(flat).and_then(|_| self.loss(&probe));
                r.unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            },
            &self.params.flatten(),
            &analytic,
            FD_EPSILON,
        );
        match failure {
            Some(e) => Err(e),
            None => err,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub instances: usize,
    pub threshold: f64,
    /// Worst complex-step relative error; decides the verdict.
    pub max_error: f64,
    /// Index of the instance that produced `max_error`.
    pub worst: usize,
    /// Worst central-difference relative error, for reference.
    pub central_error: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.max_error < self.threshold
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max relative error {:.3e} over {} instances (worst #{}, central differences {:.3e}); threshold {:.1e}: {}",
            self.max_error,
            self.instances,
            self.worst,
            self.central_error,
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn run(seed: u64, instances: usize, threshold: f64) -> Result<Report> {
    run_with(seed, instances, threshold, Ablation::None)
}

/// Like [`run`], with a deliberately broken backward pass when `ablation`
/// is not [`Ablation::None`].
#[doc(hidden)]
pub fn run_with(seed: u64, instances: usize, threshold: f64, ablation: Ablation) -> Result<Report> {
    if instances == 0 {
        return Err(Error::Config("gradcheck needs at least one instance".into()));
    }
    let mut report = Report {
        instances,
        threshold,
        max_error: 0.0,
        worst: 0,
        central_error: 0.0,
    };
    for i in 0..instances {
        let instance = Instance::random(derive_seed(seed, i as u64));
        report.central_error = report.central_error.max(instance.check_central(ablation)?);
        let err = instance.check(ablation)?;
        if err > report.max_error {
            report.max_error = err;
            report.worst = i;
        }
    }
    Ok(report)
}
