use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::NetworkParams;
use super::network::{backward_pass, forward_pass, squared_error_grad, zero_gradients, BatchInput, Gradients};
use super::scalar::Scalar;
use super::NnError;
use crate::mapping::{normalize_map, TrainingRecord, MAP_CELLS};

/// Samples per gradient work item. Fixed so results do not depend on the
/// thread count; smaller chunks keep im2col buffers cache-sized.
const CHUNK: usize = 16;

/// How one batch's gradient is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Fixed-size chunks in order on the calling thread. Reference mode for
    /// determinism.
    #[default]
    Sequential,
    /// The same chunks on the rayon pool, reduced in chunk order.
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    pub seed: u64,
    pub mode: ExecutionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 128,
            lr0: 1e-4,
            decay: 5e-5,
            seed: 0,
            mode: ExecutionMode::Sequential,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.into()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return bad("decay must be non-negative");
        }
        Ok(())
    }

    /// `lr0 / (1 + decay · step)`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        self.lr0 / (1.0 + self.decay * step as f64)
    }
}

/// Dense training data: inputs and targets for `len` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples<T> {
    maps: Vec<T>,
    extra: Vec<T>,
    targets: Vec<T>,
    map_cells: usize,
    extra_features: usize,
    outputs: usize,
}

impl<T: Scalar> Samples<T> {
    pub fn new(
        map_cells: usize,
        extra_features: usize,
        outputs: usize,
        maps: Vec<T>,
        extra: Vec<T>,
        targets: Vec<T>,
    ) -> Result<Self, NnError> {
        if outputs == 0 || map_cells == 0 || maps.len() % map_cells != 0 {
            return Err(NnError::InvalidInput("map buffer is not a whole number of maps".into()));
        }
        let n = maps.len() / map_cells;
        if extra.len() != n * extra_features || targets.len() != n * outputs {
            return Err(NnError::InvalidInput(format!(
                "{n} maps but {} extra values and {} targets",
                extra.len(),
                targets.len()
            )));
        }
        Ok(Self { maps, extra, targets, map_cells, extra_features, outputs })
    }

    /// Normalized maps, `(sin θ, cos θ)` and `(speed, rotation)` targets.
    pub fn from_records(records: &[TrainingRecord]) -> Self {
        let mut maps = Vec::with_capacity(records.len() * MAP_CELLS);
        let mut extra = Vec::with_capacity(records.len() * 2);
        let mut targets = Vec::with_capacity(records.len() * 2);
        for r in records {
            maps.extend(normalize_map::<T>(&r.map));
            let (s, c) = r.orientation();
            extra.extend([T::lit(s), T::lit(c)]);
            targets.extend([T::lit(f64::from(r.speed)), T::lit(f64::from(r.rotation))]);
        }
        Self { maps, extra, targets, map_cells: MAP_CELLS, extra_features: 2, outputs: 2 }
    }

    pub fn len(&self) -> usize {
        self.maps.len() / self.map_cells
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn targets(&self) -> &[T] {
        &self.targets
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let (mc, ef, o) = (self.map_cells, self.extra_features, self.outputs);
        let mut out = Self {
            maps: Vec::with_capacity(indices.len() * mc),
            extra: Vec::with_capacity(indices.len() * ef),
            targets: Vec::with_capacity(indices.len() * o),
            map_cells: mc,
            extra_features: ef,
            outputs: o,
        };
        for &i in indices {
            out.maps.extend_from_slice(&self.maps[i * mc..(i + 1) * mc]);
            out.extra.extend_from_slice(&self.extra[i * ef..(i + 1) * ef]);
            out.targets.extend_from_slice(&self.targets[i * o..(i + 1) * o]);
        }
        out
    }

    pub fn input(&self) -> BatchInput<'_, T> {
        BatchInput { maps: &self.maps, extra: &self.extra, n: self.len() }
    }

    fn check_against(&self, params: &NetworkParams<T>) -> Result<(), NnError> {
        let arch = params.architecture();
        if self.map_cells != arch.input_cells() || self.extra_features != arch.extra_features || self.outputs != arch.outputs() {
            return Err(NnError::Shape {
                layer: "input".into(),
                detail: format!(
                    "samples are {}+{} → {}, network is {}+{} → {}",
                    self.map_cells,
                    self.extra_features,
                    self.outputs,
                    arch.input_cells(),
                    arch.extra_features,
                    arch.outputs()
                ),
            });
        }
        Ok(())
    }
}

/// Seeded mini-batch order: a shuffled pass over all indices, reshuffled
/// whenever it runs out. Batches may straddle epochs.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSchedule {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.batch_size);
        if self.order.is_empty() {
            return batch;
        }
        while batch.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    /// Mean squared error of the step's batch before the update.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: NetworkParams<T>,
    pub history: Vec<StepStats>,
}

/// Summed squared error and gradients (of `Σe² / normalizer`) for a batch.
pub(crate) fn batch_gradients<T: Scalar>(
    params: &NetworkParams<T>,
    batch: &Samples<T>,
    normalizer: T,
    fault: Option<super::GradientFault>,
) -> Result<(T, Gradients<T>), NnError> {
    let pass = forward_pass(params, &batch.input())?;
    let (sse, d_out) = squared_error_grad(pass.output(), &batch.targets, normalizer);
    Ok((sse, backward_pass(params, &pass, d_out, fault)))
}

fn accumulate<T: Scalar>(into: &mut Gradients<T>, from: &Gradients<T>) {
    for (a, b) in into.iter_mut().zip(from) {
        for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
            *x += *y;
        }
        for (x, y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
            *x += *y;
        }
    }
}

fn step_gradients<T: Scalar>(
    params: &NetworkParams<T>,
    batch: &Samples<T>,
    mode: ExecutionMode,
) -> Result<(T, Gradients<T>), NnError> {
    let normalizer = T::lit((2 * batch.len()) as f64);
    let indices: Vec<usize> = (0..batch.len()).collect();
    let chunk = |c: &[usize]| batch_gradients(params, &batch.select(c), normalizer, None);
    let parts: Vec<Result<(T, Gradients<T>), NnError>> = match mode {
        ExecutionMode::Sequential => indices.chunks(CHUNK).map(chunk).collect(),
        ExecutionMode::Parallel => indices.par_chunks(CHUNK).map(chunk).collect(),
    };
    let mut sse = T::zero();
    let mut total = zero_gradients(params);
    for part in parts {
        let (s, g) = part?;
        sse += s;
        accumulate(&mut total, &g);
    }
    Ok((sse, total))
}

/// Mini-batch SGD with batches from a seeded [`BatchSchedule`].
pub fn train<T: Scalar>(
    params: NetworkParams<T>,
    data: &Samples<T>,
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepStats),
) -> Result<TrainOutcome<T>, NnError> {
    let mut schedule = BatchSchedule::new(data.len(), cfg.batch_size, cfg.seed);
    train_with_batches(params, data, cfg, |_| schedule.next_batch(), on_step)
}

/// Mini-batch SGD where `batches(step)` supplies each step's sample indices.
pub fn train_with_batches<T: Scalar>(
    mut params: NetworkParams<T>,
    data: &Samples<T>,
    cfg: &TrainConfig,
    mut batches: impl FnMut(usize) -> Vec<usize>,
    mut on_step: impl FnMut(&StepStats),
) -> Result<TrainOutcome<T>, NnError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    data.check_against(&params)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let indices = batches(step);
        if indices.is_empty() || indices.iter().any(|&i| i >= data.len()) {
            return Err(NnError::InvalidInput(format!("step {step}: batch indices out of range")));
        }
        let batch = data.select(&indices);
        let (sse, grads) = step_gradients(&params, &batch, cfg.mode)?;
        let loss = sse.to_f64().unwrap() / (2 * batch.len()) as f64;
        if !loss.is_finite() {
            return Err(NnError::Divergence { step, loss });
        }
        let lr = cfg.learning_rate(step);
        let lr_t = T::lit(lr);
        for (layer, g) in params.layers_mut().iter_mut().zip(&grads) {
            for (w, d) in layer.weights.data_mut().iter_mut().zip(g.weights.data()) {
                *w -= lr_t * *d;
            }
            for (b, d) in layer.bias.data_mut().iter_mut().zip(g.bias.data()) {
                *b -= lr_t * *d;
            }
        }
        let stats = StepStats { step, lr, loss };
        on_step(&stats);
        history.push(stats);
    }
    if !params.all_finite() {
        return Err(NnError::Divergence {
            step: cfg.steps - 1,
            loss: f64::NAN,
        });
    }
    Ok(TrainOutcome { params, history })
}

/// Mean squared error over a whole sample set.
pub fn evaluate_mse<T: Scalar>(params: &NetworkParams<T>, data: &Samples<T>) -> Result<f64, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    data.check_against(params)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut sse = 0.0;
    for chunk in indices.chunks(256) {
        let batch = data.select(chunk);
        let pass = forward_pass(params, &batch.input())?;
        sse += pass
            .output()
            .iter()
            .zip(batch.targets())
            .map(|(y, t)| (*y - *t).to_f64().unwrap().powi(2))
            .sum::<f64>();
    }
    Ok(sse / data.targets.len() as f64)
}

/// `step,lr,loss` lines with a header.
pub fn write_loss_history(mut w: impl Write, history: &[StepStats]) -> std::io::Result<()> {
    writeln!(w, "step,lr,loss")?;
    for s in history {
        writeln!(w, "{},{:e},{:e}", s.step, s.lr, s.loss)?;
    }
    Ok(())
}
