//! Minibatch training: per-position cross-entropy under either prefix
//! regime, element-wise gradient clipping, Nesterov momentum, per-epoch
//! shuffling and checkpoints.

mod checkpoint;
mod config;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

pub use checkpoint::{partial_path, Checkpoint, Cursor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Method, TrainingConfig};

use crate::corpus::{Batch, Side, TokenId};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::gru::{self, HiddenState, ModelParameters, ModelShape, StepTape};
use crate::numerics::{argmax, cross_entropy, derive_seed, seeded_rng, softmax_rows, Matrix, Real};

const INIT_STREAM: u64 = 1;
const SOURCE_EMBEDDING_STREAM: u64 = 2;
const TARGET_EMBEDDING_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 1 << 32;

/// Seed for the fill vectors of one side's embedding table. Training and
/// every later load of the same model use the same value.
pub fn embedding_seed(seed: u64, side: Side) -> u64 {
    derive_seed(
        seed,
        match side {
            Side::Source => SOURCE_EMBEDDING_STREAM,
            Side::Target => TARGET_EMBEDDING_STREAM,
        },
    )
}

/// Mean loss over every `(pair, position)` of a batch plus its gradients.
#[derive(Clone, Debug)]
pub struct BatchLoss<T> {
    pub loss: T,
    pub grads: ModelParameters<T>,
    /// Argmax prediction at each position, `[pair][position]`.
    pub predictions: Vec<Vec<TokenId>>,
}

fn column(batch: &Batch, k: usize, source: bool) -> Vec<TokenId> {
    batch
        .pairs()
        .iter()
        .map(|(s, t)| if source { s.ids[k] } else { t.ids[k] })
        .collect()
}

/// Unrolls one batch. After the source, position `k` predicts target word
/// `k`; the word fed before position `k + 1` is the ground truth when
/// `self_fed` is false and the batch's own argmax prediction otherwise. Fed
/// predictions are plain inputs, so no gradient flows through the argmax.
fn unrolled_loss<T: Real>(
    batch: &Batch,
    params: &ModelParameters<T>,
    source: &EmbeddingTable,
    target: &EmbeddingTable,
    self_fed: bool,
) -> Result<BatchLoss<T>> {
    let shape = params.shape();
    if target.rows() != shape.vocab_size {
        return Err(Error::dim("batch loss (target ids)", shape.vocab_size, target.rows()));
    }
    let n = batch.len();
    let (f, e) = (batch.source_len(), batch.target_len());
    let scale = T::one() / T::lit((n * e) as f64);

    let mut state = HiddenState::zeros(shape, n);
    let mut tape = StepTape::new();
    for k in 0..f {
        let x = source.gather::<T>(&column(batch, k, true))?;
        gru::step(params, &mut state, &x, Some(&mut tape))?;
    }

    let mut total = T::zero();
    let mut outputs: Vec<(usize, Matrix<T>)> = Vec::with_capacity(e);
    let mut predictions = vec![Vec::with_capacity(e); n];
    for k in 0..e {
        let truth = column(batch, k, false);
        let probs = softmax_rows(&gru::output_logits(params, state.top())?);
        let mut dlogits = Matrix::zeros(n, shape.vocab_size);
        let mut fed = Vec::with_capacity(n);
        for (b, &y) in truth.iter().enumerate() {
            let (loss, grad) = cross_entropy(probs.row(b), y as usize)?;
            total = total + loss;
            for (d, &g) in dlogits.row_mut(b).iter_mut().zip(grad.iter()) {
                *d = g * scale;
            }
            let pred = argmax(probs.row(b)) as TokenId;
            predictions[b].push(pred);
            fed.push(if self_fed { pred } else { y });
        }
        outputs.push((tape.len() - 1, dlogits));
        if k + 1 < e {
            let x = target.gather::<T>(&fed)?;
            gru::step(params, &mut state, &x, Some(&mut tape))?;
        }
    }

    let grads = gru::backward(&tape, params, &outputs)?;
    Ok(BatchLoss {
        loss: total * scale,
        grads,
        predictions,
    })
}

/// Teacher forcing: position `k` sees the source and the correct prefix
/// `y_1 … y_k` and is scored against `y_{k+1}`.
pub fn batch_loss_teacher_forced<T: Real>(
    batch: &Batch,
    params: &ModelParameters<T>,
    source: &EmbeddingTable,
    target: &EmbeddingTable,
) -> Result<BatchLoss<T>> {
    unrolled_loss(batch, params, source, target, false)
}

/// Self-fed: position `k` sees the source and the model's own predictions
/// `ŷ_1 … ŷ_k`, scored against the ground truth `y_{k+1}`.
pub fn batch_loss_self_fed<T: Real>(
    batch: &Batch,
    params: &ModelParameters<T>,
    source: &EmbeddingTable,
    target: &EmbeddingTable,
) -> Result<BatchLoss<T>> {
    unrolled_loss(batch, params, source, target, true)
}

/// Clamps every gradient component to `[-limit, limit]`.
pub fn clip_gradients<T: Real>(grads: &mut ModelParameters<T>, limit: T) {
    for t in grads.tensors_mut() {
        for g in t.iter_mut() {
            if *g > limit {
                *g = limit;
            } else if *g < -limit {
                *g = -limit;
            }
        }
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: ModelParameters<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(shape: ModelShape) -> Self {
        OptimizerState {
            velocity: ModelParameters::zeros(shape),
        }
    }
}

/// Nesterov momentum in its usual reformulation:
///
/// ```text
/// v ← μ v − η g
/// p ← p + μ v − η g
/// ```
pub fn nesterov_step<T: Real>(
    params: &mut ModelParameters<T>,
    grads: &ModelParameters<T>,
    state: &mut OptimizerState<T>,
    lr: T,
    mu: T,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.velocity) {
        return Err(Error::dim(
            "nesterov_step",
            params.num_params(),
            format!(
                "{} gradients / {} velocities",
                grads.num_params(),
                state.velocity.num_params()
            ),
        ));
    }
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.velocity.tensors_mut())
    {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = mu * *v - lr * g;
            *p = *p + mu * *v - lr * g;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    /// Position within the epoch's shuffled order.
    pub batch: usize,
    pub loss: f64,
    pub millis: u64,
}

impl BatchRecord {
    /// `epoch,batch,loss,millis`
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.batch, self.loss, self.millis)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub batches: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<BatchRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}", r.csv());
        }
        out
    }
}

/// Progress notifications from [`train_with`].
pub enum TrainEvent<'a, T> {
    Batch(&'a BatchRecord),
    Checkpoint {
        params: &'a ModelParameters<T>,
        optimizer: &'a OptimizerState<T>,
        cursor: Cursor,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ModelParameters<T>,
    pub optimizer: OptimizerState<T>,
    pub log: TrainingLog,
}

/// Model shape implied by a configuration and the embedding tables.
pub fn model_shape(
    config: &TrainingConfig,
    source: &EmbeddingTable,
    target: &EmbeddingTable,
) -> Result<ModelShape> {
    for table in [source, target] {
        if table.dim() != config.embedding_dim {
            return Err(Error::EmbeddingDim {
                expected: config.embedding_dim,
                found: table.dim(),
            });
        }
    }
    let shape = ModelShape {
        layers: config.layers,
        hidden_size: config.hidden_size,
        input_size: config.embedding_dim,
        vocab_size: target.rows(),
    };
    shape.validate()?;
    Ok(shape)
}

/// Batch order for an epoch; depends only on the seed and the epoch.
pub fn epoch_order(seed: u64, epoch: usize, batches: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..batches).collect();
    order.shuffle(&mut seeded_rng(derive_seed(seed, SHUFFLE_STREAM + epoch as u64)));
    order
}

/// Initial parameters for a training run.
pub fn initial_parameters<T: Real>(shape: ModelShape, seed: u64) -> ModelParameters<T> {
    ModelParameters::glorot(shape, derive_seed(seed, INIT_STREAM))
}

pub fn train<T: Real>(
    config: &TrainingConfig,
    batches: &[Batch],
    source: &EmbeddingTable,
    target: &EmbeddingTable,
) -> Result<(ModelParameters<T>, TrainingLog)> {
    let out = train_with(config, batches, source, target, None, |_| Ok(()))?;
    Ok((out.params, out.log))
}

/// Runs `config.max_epochs` epochs. Each epoch visits the batches in a
/// seeded shuffled order; each batch computes the loss for
/// `config.method`, clips, and takes a Nesterov step. `observe` sees every
/// batch record and every checkpoint (each `checkpoint_interval` batches and
/// at every epoch end). Passing `resume` continues from a checkpoint.
pub fn train_with<T, F>(
    config: &TrainingConfig,
    batches: &[Batch],
    source: &EmbeddingTable,
    target: &EmbeddingTable,
    resume: Option<&Checkpoint>,
    mut observe: F,
) -> Result<TrainOutcome<T>>
where
    T: Real,
    F: FnMut(TrainEvent<'_, T>) -> Result<()>,
{
    config.validate()?;
    if batches.is_empty() {
        return Err(Error::EmptyInput("no training batches"));
    }
    let shape = model_shape(config, source, target)?;
    let (mut params, mut optimizer, start) = match resume {
        Some(ck) => {
            if ck.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "checkpoint shape {:?} does not match configuration {shape:?}",
                    ck.shape()
                )));
            }
            let optimizer = OptimizerState {
                velocity: ck.velocity.cast::<T>(),
            };
            (ck.params.cast::<T>(), optimizer, ck.cursor)
        }
        None => (
            initial_parameters(shape, config.seed),
            OptimizerState::new(shape),
            Cursor::default(),
        ),
    };
    let lr = T::lit(config.learning_rate);
    let mu = T::lit(config.momentum);
    let clip = T::lit(config.gradient_clip);
    let mut log = TrainingLog::default();
    let mut since_checkpoint = 0usize;

    for epoch in start.epoch as usize..config.max_epochs {
        let order = epoch_order(config.seed, epoch, batches.len());
        let first = if epoch == start.epoch as usize {
            start.batch as usize
        } else {
            0
        };
        let mut loss_sum = 0.0;
        for (pos, &bi) in order.iter().enumerate().skip(first) {
            let started = Instant::now();
            let batch = &batches[bi];
            let mut out = match config.method {
                Method::TeacherForced => batch_loss_teacher_forced(batch, &params, source, target)?,
                Method::SelfFed => batch_loss_self_fed(batch, &params, source, target)?,
            };
            let loss = out.loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: pos });
            }
            clip_gradients(&mut out.grads, clip);
            nesterov_step(&mut params, &out.grads, &mut optimizer, lr, mu)?;
            loss_sum += loss;

            let record = BatchRecord {
                epoch,
                batch: pos,
                loss,
                millis: if config.log_millis {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            observe(TrainEvent::Batch(&record))?;
            log.records.push(record);

            since_checkpoint += 1;
            let epoch_end = pos + 1 == order.len();
            if epoch_end || (config.checkpoint_interval > 0 && since_checkpoint >= config.checkpoint_interval)
            {
                since_checkpoint = 0;
                if !optimizer.velocity.is_finite() || !params.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "parameters or velocity at epoch {epoch}, batch {pos}"
                    )));
                }
                let cursor = if epoch_end {
                    Cursor {
                        epoch: epoch as u32 + 1,
                        batch: 0,
                    }
                } else {
                    Cursor {
                        epoch: epoch as u32,
                        batch: pos as u32 + 1,
                    }
                };
                observe(TrainEvent::Checkpoint {
                    params: &params,
                    optimizer: &optimizer,
                    cursor,
                })?;
            }
        }
        let ran = order.len() - first;
        log.epochs.push(EpochSummary {
            epoch,
            batches: ran,
            mean_loss: if ran > 0 { loss_sum / ran as f64 } else { 0.0 },
        });
    }
    Ok(TrainOutcome {
        params,
        optimizer,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenSequence;
    use crate::numerics::FD_EPSILON;

    fn batch(pairs: &[(&[u32], &[u32])]) -> Batch {
        Batch::new(
            pairs
                .iter()
                .map(|(s, t)| {
                    (
                        TokenSequence::new(s.to_vec(), Side::Source),
                        TokenSequence::new(t.to_vec(), Side::Target),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn tables(src_ids: usize, tgt_ids: usize, dim: usize) -> (EmbeddingTable, EmbeddingTable) {
        (
            EmbeddingTable::random(src_ids, dim, 11),
            EmbeddingTable::random(tgt_ids, dim, 12),
        )
    }

    fn shape(layers: usize, hidden: usize, dim: usize, vocab: usize) -> ModelShape {
        ModelShape {
            layers,
            hidden_size: hidden,
            input_size: dim,
            vocab_size: vocab,
        }
    }

    #[test]
    fn zero_parameters_give_uniform_loss() {
        let (s, t) = tables(5, 4, 3);
        let p = ModelParameters::<f64>::zeros(shape(1, 2, 3, 4));
        let b = batch(&[(&[0, 1, 4], &[2, 0, 3])]);
        let tf = batch_loss_teacher_forced(&b, &p, &s, &t).unwrap();
        let sf = batch_loss_self_fed(&b, &p, &s, &t).unwrap();
        assert!((tf.loss - 4f64.ln()).abs() < 1e-12);
        assert!((sf.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn teacher_forced_gradients_pass_finite_differences() {
        let (s, t) = tables(6, 5, 3);
        let sh = shape(2, 3, 3, 5);
        let p = ModelParameters::<f64>::glorot(sh, 4);
        let b = batch(&[(&[0, 2, 5], &[1, 3, 4]), (&[3, 3, 5], &[0, 0, 4])]);
        let out = batch_loss_teacher_forced(&b, &p, &s, &t).unwrap();
        let flat = p.flatten();
        let analytic = out.grads.flatten();
        let mut probe = p.clone();
        let mut loss_at = |x: &[f64]| {
            probe.assign_flat(x).unwrap();
            batch_loss_teacher_forced(&b, &probe, &s, &t).unwrap().loss
        };
        // Components below ~1e-7 sit at the roundoff floor of the central
        // difference, so those are held to an absolute bound instead.
        for (i, &a) in analytic.iter().enumerate() {
            let mut x = flat.clone();
            x[i] += FD_EPSILON;
            let up = loss_at(&x);
            x[i] -= 2.0 * FD_EPSILON;
            let numeric = (up - loss_at(&x)) / (2.0 * FD_EPSILON);
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-7 {
                assert!((a - numeric).abs() / scale < 1e-5, "component {i}: {a} vs {numeric}");
            } else {
                assert!((a - numeric).abs() < 1e-11, "component {i}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn clipping_is_element_wise() {
        let mut g = ModelParameters::<f64>::zeros(shape(1, 1, 1, 3));
        g.output_bias = vec![250.0, -7.0, -1e9].into();
        clip_gradients(&mut g, 100.0);
        assert_eq!(&*g.output_bias, &[100.0, -7.0, -100.0]);

        let mut inside = ModelParameters::<f32>::glorot(shape(2, 3, 2, 4), 0);
        let before = inside.clone();
        clip_gradients(&mut inside, 100.0);
        assert_eq!(inside, before);
    }

    #[test]
    fn nesterov_examples() {
        let sh = shape(1, 1, 1, 1);
        let one = |x: f64| {
            let mut p = ModelParameters::<f64>::zeros(sh);
            p.output_bias[0] = x;
            p
        };

        // momentum off is plain gradient descent
        let mut p = one(1.5);
        let mut st = OptimizerState::new(sh);
        st.velocity.output_bias[0] = 3.0;
        nesterov_step(&mut p, &one(2.0), &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p.output_bias[0], 1.5 - 0.1 * 2.0);

        // zero gradient and velocity is a fixed point
        let mut p = ModelParameters::<f64>::glorot(shape(1, 2, 2, 3), 1);
        let before = p.clone();
        let mut st = OptimizerState::new(p.shape());
        let zero = ModelParameters::zeros(p.shape());
        nesterov_step(&mut p, &zero, &mut st, 0.1, 0.9).unwrap();
        assert_eq!(p, before);

        // f(p) = p², p0 = 1, η = 0.1, μ = 0.9:
        //   g = 2,    v = -0.2,   p = 1 + 0.9(-0.2) - 0.2 = 0.62
        //   g = 1.24, v = -0.304, p = 0.62 + 0.9(-0.304) - 0.124 = 0.2224
        let mut p = one(1.0);
        let mut st = OptimizerState::new(sh);
        let mut trajectory = Vec::new();
        for _ in 0..2 {
            let g = one(2.0 * p.output_bias[0]);
            nesterov_step(&mut p, &g, &mut st, 0.1, 0.9).unwrap();
            trajectory.push((st.velocity.output_bias[0], p.output_bias[0]));
        }
        let expect = [(-0.2, 0.62), (-0.304, 0.2224)];
        for ((v, x), (ev, ex)) in trajectory.into_iter().zip(expect) {
            assert!((v - ev).abs() < 1e-12 && (x - ex).abs() < 1e-12);
        }

        let mut p = one(1.0);
        let mut st = OptimizerState::new(shape(1, 2, 1, 1));
        assert!(nesterov_step(&mut p, &one(0.0), &mut st, 0.1, 0.9).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let (s, t) = tables(5, 4, 3);
        let config = TrainingConfig {
            batch_size: 1,
            layers: 1,
            hidden_size: 4,
            embedding_dim: 3,
            learning_rate: 0.0,
            max_epochs: 1,
            seed: 9,
            log_millis: false,
            ..TrainingConfig::default()
        };
        let b = batch(&[(&[0, 4], &[1, 3])]);
        let (p, log) = train::<f32>(&config, &[b], &s, &t).unwrap();
        let init = initial_parameters::<f32>(p.shape(), 9);
        assert!(p
            .flatten()
            .iter()
            .zip(init.flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(log.records.len(), 1);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(3, 0, 20);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(3, 0, 20));
        assert_ne!(a, epoch_order(3, 1, 20));
    }

    #[test]
    fn divergence_names_the_batch() {
        let (s, t) = tables(5, 4, 3);
        let config = TrainingConfig {
            batch_size: 1,
            layers: 1,
            hidden_size: 2,
            embedding_dim: 3,
            max_epochs: 2,
            ..TrainingConfig::default()
        };
        let mut params = initial_parameters::<f32>(shape(1, 2, 3, 4), 0);
        params.output_bias[1] = f32::NAN;
        let ck = Checkpoint {
            velocity: ModelParameters::zeros(params.shape()),
            params,
            seed: 0,
            cursor: Cursor { epoch: 1, batch: 0 },
        };
        let b = batch(&[(&[0, 4], &[1, 3])]);
        let got = train_with::<f32, _>(&config, &[b], &s, &t, Some(&ck), |_| Ok(()));
        assert!(matches!(got, Err(Error::Diverged { epoch: 1, batch: 0 })), "{got:?}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (s, t) = tables(6, 5, 3);
        let config = TrainingConfig {
            batch_size: 1,
            layers: 1,
            hidden_size: 4,
            embedding_dim: 3,
            learning_rate: 0.1,
            max_epochs: 3,
            seed: 5,
            checkpoint_interval: 1,
            log_millis: false,
            ..TrainingConfig::default()
        };
        let batches = vec![
            batch(&[(&[0, 5], &[1, 4])]),
            batch(&[(&[2, 3, 5], &[3, 2, 4])]),
            batch(&[(&[1, 5], &[2, 4])]),
        ];
        let mut saved = Vec::new();
        let full = train_with::<f32, _>(&config, &batches, &s, &t, None, |ev| {
            if let TrainEvent::Checkpoint { params, optimizer, cursor } = ev {
                saved.push(Checkpoint {
                    params: params.clone(),
                    velocity: optimizer.velocity.clone(),
                    seed: config.seed,
                    cursor,
                });
            }
            Ok(())
        })
        .unwrap();
        // resume from the middle of epoch 1
        let mid = saved.iter().find(|c| c.cursor == Cursor { epoch: 1, batch: 2 }).unwrap();
        let rest = train_with::<f32, _>(&config, &batches, &s, &t, Some(mid), |_| Ok(())).unwrap();
        assert_eq!(rest.params, full.params);
        assert_eq!(rest.optimizer, full.optimizer);
        assert_eq!(rest.log.records[..], full.log.records[5..]);
    }

    #[test]
    fn loss_falls_on_a_fixed_batch() {
        let (s, t) = tables(6, 5, 4);
        let sh = shape(1, 8, 4, 5);
        let b = batch(&[(&[0, 1, 5], &[1, 2, 4]), (&[2, 3, 5], &[3, 0, 4])]);
        let mut p = initial_parameters::<f64>(sh, 3);
        let mut st = OptimizerState::new(sh);
        let mut losses = Vec::new();
        for _ in 0..10 {
            let out = batch_loss_teacher_forced(&b, &p, &s, &t).unwrap();
            losses.push(out.loss);
            nesterov_step(&mut p, &out.grads, &mut st, 0.05, 0.5).unwrap();
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

}
