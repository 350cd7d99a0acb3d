//! MSE loss, Adam with per-group freezing, and the seeded epoch loop.

mod search;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use search::{random_search, SearchResult, SearchSpace, Trial, DEFAULT_BUDGET, DEFAULT_TRIAL_ITERATIONS};

use crate::data::WindowedSample;
use crate::metrics::MetricError;
use crate::model::{FreezeMask, Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training samples")]
    EmptySamples,
    #[error("loss needs equal, non-empty prediction and target lists (got {pred} and {target})")]
    LossShape { pred: usize, target: usize },
    #[error("optimizer state does not match the model: {0}")]
    State(String),
    #[error("training diverged: loss became {0}")]
    Diverged(f64),
    #[error("invalid search space: {0}")]
    Search(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Full passes over the training samples.
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub freeze: FreezeMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            freeze: FreezeMask::none(),
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and leaves every parameter unchanged.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and ≥ 0");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        Ok(())
    }
}

/// Mean of squared differences.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(TrainError::LossShape {
            pred: pred.len(),
            target: target.len(),
        });
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of a single tensor at step `t ≥ 1`.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], config: &TrainConfig, t: u64) {
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
}

/// Applies one Adam step to every tensor outside `config.freeze`. Frozen tensors
/// and their moments are left untouched; a `None` gradient is treated the same way.
pub fn adam_step(
    model: &mut Model,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let groups = model.param_groups();
    let mut tensors = model.tensors_mut();
    if grads.len() != tensors.len() || state.m.len() != tensors.len() {
        return Err(TrainError::State(format!(
            "{} tensors, {} gradients, {} moment slots",
            tensors.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    for (i, tensor) in tensors.iter_mut().enumerate() {
        let Some(grad) = &grads[i] else { continue };
        if config.freeze.contains(groups[i]) {
            continue;
        }
        if grad.dims() != tensor.dims() || state.m[i].len() != tensor.len() {
            return Err(TrainError::State(format!(
                "gradient {i} has shape {:?}, parameter has {:?}",
                grad.dims(),
                tensor.dims()
            )));
        }
        adam_update(
            tensor.values_mut(),
            grad.values(),
            &mut state.m[i],
            &mut state.v[i],
            config,
            state.t,
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample training loss of each iteration, measured before each batch's update.
    pub losses: Vec<f64>,
    pub wall_seconds: f64,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// `iteration,loss` rows followed by a `# wall_seconds=` summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{},{}", i + 1, l);
        }
        let _ = writeln!(out, "# wall_seconds={:.6}", self.wall_seconds);
        out
    }
}

/// Trains `model` in place for `config.iterations` epochs of seeded shuffled mini-batches.
pub fn train(model: &mut Model, samples: &[WindowedSample], config: &TrainConfig) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptySamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut state = AdamState::new(model);
    let mut losses = Vec::with_capacity(config.iterations);
    let started = Instant::now();
    for _ in 0..config.iterations {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&WindowedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let labels: Vec<f64> = batch.iter().map(|s| s.label).collect();
            let (pred, cache) = model.forward_cached(&batch)?;
            let loss = mse_loss(&pred, &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged(loss));
            }
            total += loss * batch.len() as f64;
            let scale = 2.0 / batch.len() as f64;
            let d_pred: Vec<f64> = pred.iter().zip(&labels).map(|(p, y)| scale * (p - y)).collect();
            let grads = model.backward(&cache, &d_pred, &config.freeze)?;
            adam_step(model, &grads, &mut state, config)?;
        }
        losses.push(total / samples.len() as f64);
    }
    Ok(TrainReport {
        losses,
        wall_seconds: started.elapsed().as_secs_f64(),
        config: config.clone(),
    })
}
