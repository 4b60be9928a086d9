//! Minibatch SGD on the point-wise objective.
//!
//! Each step uses the batch-mean risk plus `penalty_weight` times the
//! batch-mean hinge, i.e. both sums of the full-data objective divided by the
//! number of examples they run over. Steps are plain SGD: `θ ← θ - lr · g`.

use std::io::{self, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Dataset, Task};
use crate::loss::{LossError, MonotoneSpec, Terms, Workspace};
use crate::metrics::{self, MetricsError};
use crate::model::{MlpModel, OutputActivation};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
        /// Parameters before the failing step.
        last_finite: Box<MlpModel>,
        log: TrainLog,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Loss-term switching: `empirical_steps` minibatches on the empirical risk
/// alone, then `penalty_steps` minibatches on the penalty alone, repeated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchSchedule {
    pub empirical_steps: usize,
    pub penalty_steps: usize,
}

impl SwitchSchedule {
    /// Equal phase lengths.
    pub fn every(frequency: usize) -> Self {
        SwitchSchedule {
            empirical_steps: frequency,
            penalty_steps: frequency,
        }
    }

    fn penalty_phase(&self, step: usize) -> bool {
        step % (self.empirical_steps + self.penalty_steps) >= self.empirical_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Weighted,
    Switching(SwitchSchedule),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub penalty_weight: f64,
    pub regime: Regime,
    pub seed: u64,
    pub shuffle: bool,
    /// Training points used for the per-epoch `M_k` log.
    pub probe_size: usize,
    pub metric_resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 50,
            penalty_weight: 1.0,
            regime: Regime::Weighted,
            seed: 0,
            shuffle: true,
            probe_size: 500,
            metric_resolution: metrics::DEFAULT_RESOLUTION,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.penalty_weight >= 0.0 && self.penalty_weight.is_finite()) {
            return bad(format!(
                "penalty weight {} must be >= 0",
                self.penalty_weight
            ));
        }
        if let Regime::Switching(s) = self.regime {
            if s.empirical_steps == 0 || s.penalty_steps == 0 {
                return bad("switching phase lengths must be positive".into());
            }
        }
        if self.metric_resolution < 2 {
            return bad("metric resolution must be at least 2".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example risk over the epoch's minibatches.
    pub empirical: f64,
    /// Mean per-example hinge over the epoch's minibatches.
    pub penalty: f64,
    /// `M_k` on the probe set after the epoch, one per monotone feature.
    pub mk: Vec<f64>,
    /// Wall-clock seconds spent on optimization steps in this epoch.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub features: Vec<usize>,
    pub records: Vec<EpochRecord>,
    /// Wall-clock seconds including metric evaluation.
    pub total_seconds: f64,
}

impl TrainLog {
    pub fn training_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.seconds).sum()
    }

    /// CSV with header `epoch,empirical,penalty,mk_<idx>...,seconds`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut header = String::from("epoch,empirical,penalty");
        for k in &self.features {
            header.push_str(&format!(",mk_{k}"));
        }
        header.push_str(",seconds\n");
        out.write_all(header.as_bytes())?;
        for r in &self.records {
            let mut line = format!("{},{},{}", r.epoch, r.empirical, r.penalty);
            for m in &r.mk {
                line.push_str(&format!(",{m}"));
            }
            line.push_str(&format!(",{}\n", r.seconds));
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }
}

/// Per-epoch minibatch partitions of `0..n`.
#[derive(Debug, Clone)]
pub struct Minibatches {
    n: usize,
    batch_size: usize,
    shuffle: bool,
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl Minibatches {
    pub fn new(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if batch_size > n {
            return Err(TrainError::Config(format!(
                "batch size {batch_size} exceeds dataset size {n}"
            )));
        }
        Ok(Minibatches {
            n,
            batch_size,
            shuffle,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::with_capacity(n),
        })
    }

    /// Batches of the next epoch; the last one may be short.
    pub fn next_epoch(&mut self) -> std::slice::Chunks<'_, usize> {
        self.order.clear();
        self.order.extend(0..self.n);
        if self.shuffle {
            self.order.shuffle(&mut self.rng);
        }
        self.order.chunks(self.batch_size)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }
}

/// First epoch's batches, as owned index lists.
pub fn minibatch_iterator(
    n: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>> {
    let mut mb = Minibatches::new(n, batch_size, seed, shuffle)?;
    Ok(mb.next_epoch().map(<[usize]>::to_vec).collect())
}

fn probe_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if size < n {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f9_e0be));
        idx.truncate(size);
        idx.sort_unstable();
    }
    idx
}

fn check_compatible(model: &MlpModel, data: &Dataset, spec: &MonotoneSpec) -> Result<()> {
    if data.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if data.dim() != model.input_dim() {
        return Err(TrainError::Config(format!(
            "dataset has {} features, model expects {}",
            data.dim(),
            model.input_dim()
        )));
    }
    let expected = match data.task() {
        Task::Regression => OutputActivation::Identity,
        Task::Classification => OutputActivation::Sigmoid,
    };
    if model.output_activation() != expected {
        return Err(TrainError::Config(format!(
            "{:?} data needs a {expected} output, model has {}",
            data.task(),
            model.output_activation()
        )));
    }
    if let Some(e) = spec.entries().iter().find(|e| e.index >= data.dim()) {
        return Err(TrainError::Config(format!(
            "monotone feature {} out of range for {} inputs",
            e.index,
            data.dim()
        )));
    }
    Ok(())
}

/// Trains `model`; the result is a deterministic function of the inputs and
/// `config.seed`.
/// An empty `spec` trains on the empirical risk alone.
pub fn train(
    mut model: MlpModel,
    data: &Dataset,
    spec: &MonotoneSpec,
    config: &TrainConfig,
) -> Result<(MlpModel, TrainLog)> {
    config.validate()?;
    check_compatible(&model, data, spec)?;
    if matches!(config.regime, Regime::Switching(_)) && spec.is_empty() {
        return Err(TrainError::Config(
            "the switching regime needs monotone features".into(),
        ));
    }
    let started = Instant::now();
    let mut batches = Minibatches::new(data.len(), config.batch_size, config.seed, config.shuffle)?;
    let probe = probe_indices(data.len(), config.probe_size, config.seed);
    let probe_rows: Vec<&[f64]> = probe.iter().map(|&i| data.row(i)).collect();
    let mut log = TrainLog {
        features: spec.entries().iter().map(|e| e.index).collect(),
        ..TrainLog::default()
    };
    let mut ws = Workspace::default();
    let mut next_params = Vec::with_capacity(model.num_params());
    let mut step = 0usize;
    let lr = config.learning_rate;

    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        let (mut risk_sum, mut hinge_sum) = (0.0, 0.0);
        for idx in batches.next_epoch() {
            let batch = data.batch(idx);
            let per_example = 1.0 / idx.len() as f64;
            let penalty_on = !spec.is_empty();
            let terms = match config.regime {
                Regime::Weighted => Terms {
                    empirical_weight: 1.0,
                    penalty_weight: penalty_on.then_some(config.penalty_weight * per_example),
                },
                Regime::Switching(s) if s.penalty_phase(step) => Terms {
                    empirical_weight: 0.0,
                    penalty_weight: Some(config.penalty_weight * per_example),
                },
                Regime::Switching(_) => Terms {
                    empirical_weight: 1.0,
                    penalty_weight: Some(0.0),
                },
            };
            let diverged =
                |reason: String, model: &MlpModel, log: &TrainLog| TrainError::Diverged {
                    epoch,
                    step,
                    reason,
                    last_finite: Box::new(model.clone()),
                    log: log.clone(),
                };
            let breakdown = match ws.evaluate(&model, &batch, spec, terms) {
                Ok(b) => b,
                Err(e @ (LossError::NonFiniteGradient { .. } | LossError::Autodiff(_))) => {
                    return Err(diverged(e.to_string(), &model, &log));
                }
                Err(e) => return Err(e.into()),
            };
            next_params.clear();
            next_params.extend(
                model
                    .params()
                    .iter()
                    .zip(&ws.gradient)
                    .map(|(p, g)| p - lr * g),
            );
            if next_params.iter().any(|p| !p.is_finite()) {
                return Err(diverged(
                    "parameter update is not finite".into(),
                    &model,
                    &log,
                ));
            }
            model.params_mut().copy_from_slice(&next_params);
            risk_sum += breakdown.empirical * idx.len() as f64;
            hinge_sum += breakdown.penalty;
            step += 1;
        }
        let seconds = epoch_start.elapsed().as_secs_f64();
        let mk = if spec.is_empty() {
            Vec::new()
        } else {
            let report = metrics::monotonicity_metric(
                &model,
                probe_rows.iter().copied(),
                spec,
                config.metric_resolution,
                metrics::DEFAULT_TOLERANCE,
            )?;
            report.features.iter().map(|f| f.mk).collect()
        };
        let n = data.len() as f64;
        let record = EpochRecord {
            epoch,
            empirical: risk_sum / n,
            penalty: hinge_sum / n,
            mk,
            seconds,
        };
        log::debug!(
            "epoch {epoch}: empirical {:.6} penalty {:.6} mk {:?}",
            record.empirical,
            record.penalty,
            record.mk
        );
        log.records.push(record);
        log.total_seconds = started.elapsed().as_secs_f64();
    }
    Ok((model, log))
}
