//! A small convolutional regression network written from scratch.
//!
//! Maps a 64×64 occupancy map plus the robot's relative heading to the next
//! `(speed, rotation)` command. Generic over [`Scalar`] so the same code
//! trains in `f32` and is gradient-checked in `f64`.

mod arch;
mod gradcheck;
mod io;
mod network;
mod scalar;
mod tensor;
mod train;

use serde::{Deserialize, Serialize};

pub use arch::{Architecture, ConvSpec, LayerParams, NetworkParams};
pub use gradcheck::{grad_check, grad_check_with_fault, GradCheckReport};
pub use io::{decode_params, encode_params, load_params, load_params_for, save_params, PARAMS_MAGIC, PARAMS_VERSION};
pub use network::{BatchInput, GradientFault};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{
    evaluate_mse, train, train_with_batches, write_loss_history, BatchSchedule, ExecutionMode, Samples, StepStats,
    TrainConfig, TrainOutcome,
};

use crate::mapping::{OccupancyMap, TrainingRecord};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error in {layer}: {detail}")]
    Shape { layer: String, detail: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("not a parameter file (bad magic)")]
    BadMagic,
    #[error("unsupported parameter file version {0}")]
    UnsupportedVersion(u32),
    #[error("parameter file truncated")]
    Truncated,
    #[error("{0} unexpected trailing bytes in parameter file")]
    TrailingBytes(usize),
    #[error("parameter file does not match the architecture: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A predicted or recorded command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// cm/s.
    pub speed: f64,
    /// Degrees per decision step.
    pub rotation: f64,
}

impl Prediction {
    pub fn new(speed: f64, rotation: f64) -> Self {
        Self { speed, rotation }
    }

    pub fn of_record(r: &TrainingRecord) -> Self {
        Self::new(f64::from(r.speed), f64::from(r.rotation))
    }
}

/// Raw outputs `[n][outputs]` for a batch.
pub fn forward_batch<T: Scalar>(params: &NetworkParams<T>, input: &BatchInput<'_, T>) -> Result<Vec<T>, NnError> {
    Ok(network::forward_pass(params, input)?.output().to_vec())
}

/// Runs a two-output network on one map with orientation `(sin θ, cos θ)`.
pub fn forward<T: Scalar>(params: &NetworkParams<T>, map: &[T], orient: (T, T)) -> Result<Prediction, NnError> {
    let arch = params.architecture();
    if arch.outputs() != 2 || arch.extra_features != 2 {
        return Err(NnError::Shape {
            layer: arch.layer_name(arch.layer_count() - 1),
            detail: "forward needs two orientation inputs and two outputs".into(),
        });
    }
    let (s, c) = (orient.0.to_f64().unwrap(), orient.1.to_f64().unwrap());
    if !((s * s + c * c - 1.0).abs() < 1e-6) {
        return Err(NnError::InvalidInput(format!("orientation ({s}, {c}) is not on the unit circle")));
    }
    if map.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
        return Err(NnError::InvalidInput("map values must lie in [0, 1]".into()));
    }
    let out = forward_batch(params, &BatchInput { maps: map, extra: &[orient.0, orient.1], n: 1 })?;
    Ok(Prediction::new(out[0].to_f64().unwrap(), out[1].to_f64().unwrap()))
}

/// Convenience wrapper for an occupancy map and relative heading.
pub fn predict(params: &NetworkParams<f32>, map: &OccupancyMap, theta_rel: f64) -> Result<Prediction, NnError> {
    let (s, c) = theta_rel.sin_cos();
    forward(params, &crate::mapping::normalize_map::<f32>(map), (s as f32, c as f32))
}

/// Mean squared error over all scalar residuals (two per pair).
pub fn mse(pred: &[Prediction], target: &[Prediction]) -> Result<f64, NnError> {
    if pred.len() != target.len() {
        return Err(NnError::InvalidInput(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let sse: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p.speed - t.speed).powi(2) + (p.rotation - t.rotation).powi(2))
        .sum();
    Ok(sse / (2 * pred.len()) as f64)
}
