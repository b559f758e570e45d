//! Loss, parameter-shift gradients, Adam, and the per-client local epoch loop.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::circuits::{CircuitError, EncodedInput, ModelParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("label {0} is not a binary class index")]
    LabelOutOfRange(usize),
    #[error("{scores} score pairs for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite class score")]
    NonFiniteScore,
    #[error(
        "dimension mismatch: {params} parameters, {grads} gradients, optimizer sized for {state}"
    )]
    Dimension {
        params: usize,
        grads: usize,
        state: usize,
    },
    #[error("batch size must be positive")]
    ZeroBatchSize,
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

pub type Result<T, E = TrainingError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub input: EncodedInput,
    pub label: usize,
}

/// A nonempty set of samples evaluated together.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    samples: Vec<&'a LabeledSample>,
}

impl<'a> Batch<'a> {
    pub fn new(samples: Vec<&'a LabeledSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(TrainingError::EmptyBatch);
        }
        if let Some(s) = samples.iter().find(|s| s.label > 1) {
            return Err(TrainingError::LabelOutOfRange(s.label));
        }
        Ok(Self { samples })
    }

    pub fn from_slice(samples: &'a [LabeledSample]) -> Result<Self> {
        Self::new(samples.iter().collect())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Mean softmax cross-entropy over the batch, `-(1/N) sum log softmax(E_i)[c_i]`.
pub fn cross_entropy_loss(scores: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(TrainingError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(TrainingError::EmptyBatch);
    }
    let mut total = 0.0;
    for (s, &c) in scores.iter().zip(labels) {
        if c > 1 {
            return Err(TrainingError::LabelOutOfRange(c));
        }
        if !s[0].is_finite() || !s[1].is_finite() {
            return Err(TrainingError::NonFiniteScore);
        }
        total += log_sum_exp(s) - s[c];
    }
    Ok(total / scores.len() as f64)
}

fn log_sum_exp(s: &[f64; 2]) -> f64 {
    let m = s[0].max(s[1]);
    m + ((s[0] - m).exp() + (s[1] - m).exp()).ln()
}

fn softmax(s: &[f64; 2]) -> [f64; 2] {
    let lse = log_sum_exp(s);
    [(s[0] - lse).exp(), (s[1] - lse).exp()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGradient {
    pub loss: f64,
    /// Same order as [`ModelParams::flat`]: base angles, then personalized.
    pub gradient: Vec<f64>,
}

/// Batch loss and its exact gradient with respect to every angle.
pub fn loss_gradient(params: &ModelParams, batch: &Batch<'_>) -> Result<LossAndGradient> {
    let ansatz = params.ansatz();
    let flat = params.flat();
    let n = batch.len() as f64;
    let mut gradient = vec![0.0; flat.len()];
    let mut loss = 0.0;
    for s in &batch.samples {
        let (scores, jac) = ansatz.scores_with_jacobian(&s.input, &flat)?;
        if !scores[0].is_finite() || !scores[1].is_finite() {
            return Err(TrainingError::NonFiniteScore);
        }
        loss += log_sum_exp(&scores) - scores[s.label];
        let p = softmax(&scores);
        let dl = [
            (p[0] - f64::from(u8::from(s.label == 0))) / n,
            (p[1] - f64::from(u8::from(s.label == 1))) / n,
        ];
        for (g, d) in gradient.iter_mut().zip(&jac) {
            *g += dl[0] * d[0] + dl[1] * d[1];
        }
    }
    Ok(LossAndGradient {
        loss: loss / n,
        gradient,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.dim() {
        return Err(TrainingError::Dimension {
            params: params.len(),
            grads: grads.len(),
            state: state.dim(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// The interval `[0, upper]` that base angles are held in so the phase
/// estimator (an arccos) can carry them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleWindow {
    pub upper: f64,
}

impl AngleWindow {
    /// `[0, pi - margin]`.
    pub fn with_margin(margin: f64) -> Self {
        Self {
            upper: std::f64::consts::PI - margin,
        }
    }

    pub fn contains(&self, angle: f64) -> bool {
        (0.0..=self.upper).contains(&angle)
    }

    /// Reduces `angle` mod 2pi (which leaves every expectation unchanged) and,
    /// if it still falls outside the window, moves it to the nearer end on the
    /// circle. The flag reports whether that second step changed the model.
    pub fn project(&self, angle: f64) -> (f64, bool) {
        use std::f64::consts::TAU;
        let a = angle.rem_euclid(TAU);
        if a <= self.upper {
            (a, false)
        } else if a < (self.upper + TAU) / 2.0 {
            (self.upper, true)
        } else {
            (0.0, true)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Applied to base angles after every optimizer step when set.
    pub base_window: Option<AngleWindow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Sample-weighted mean of the batch losses seen during the epoch.
    pub mean_loss: f64,
    pub batches: usize,
    /// Base angles clamped back into the window during the epoch.
    pub projected: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    pub fn projected(&self) -> usize {
        self.epochs.iter().map(|e| e.projected).sum()
    }
}

/// Runs `opts.epochs` passes over `data`: shuffle, split into batches (the
/// last one may be short), and take one Adam step per batch on all angles.
pub fn local_train<R: Rng + ?Sized>(
    data: &[LabeledSample],
    params: &mut ModelParams,
    adam: &mut AdamState,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    if opts.batch_size == 0 {
        return Err(TrainingError::ZeroBatchSize);
    }
    if adam.dim() != params.len() {
        return Err(TrainingError::Dimension {
            params: params.len(),
            grads: params.len(),
            state: adam.dim(),
        });
    }
    let n_base = params.base().len();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    for _ in 0..opts.epochs {
        order.shuffle(rng);
        let mut stats = EpochStats {
            mean_loss: 0.0,
            batches: 0,
            projected: 0,
        };
        let mut flat = params.flat();
        for chunk in order.chunks(opts.batch_size) {
            let batch = Batch::new(chunk.iter().map(|&i| &data[i]).collect())?;
            let lg = loss_gradient(params, &batch)?;
            stats.mean_loss += lg.loss * batch.len() as f64;
            stats.batches += 1;
            adam_step(adam, &mut flat, &lg.gradient)?;
            if let Some(w) = opts.base_window {
                for a in &mut flat[..n_base] {
                    let (p, moved) = w.project(*a);
                    *a = p;
                    stats.projected += usize::from(moved);
                }
            }
            params.set_flat(&flat)?;
        }
        stats.mean_loss /= data.len() as f64;
        report.epochs.push(stats);
    }
    Ok(report)
}
