//! The point-wise monotonicity loss.
//!
//! For a monotone feature set `M` with per-feature directions `s_j`, the
//! signed divergence of the model at `x` is `Σ_{j∈M} s_j ∂f/∂x_j`. Each example
//! contributes the hinge `max(0, -divergence)` to the penalty, and the
//! training objective is
//!
//! ```text
//! total = empirical_risk + penalty_weight * Σ_i max(0, -div_M f(x_i; θ))
//! ```
//!
//! Its parameter gradient needs the derivative of `∂f/∂x` with respect to
//! `θ`; [`parameter_gradient`] gets it by recording the input gradient on the
//! tape ([`Tape::extend_with_gradient`]) and differentiating through it.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::data::{Batch, Dataset, Task};
use crate::model::{MlpModel, ModelError};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` in the
/// cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("classification label {label} at batch position {index} is not 0 or 1")]
    Label { index: usize, label: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {term} term in the objective gradient")]
    NonFiniteGradient { term: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    NonDecreasing,
    NonIncreasing,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::NonDecreasing => 1.0,
            Direction::NonIncreasing => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Direction::NonDecreasing => Direction::NonIncreasing,
            Direction::NonIncreasing => Direction::NonDecreasing,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::NonDecreasing => "+",
            Direction::NonIncreasing => "-",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "+" | "+1" | "1" | "inc" | "increasing" => Ok(Direction::NonDecreasing),
            "-" | "-1" | "dec" | "decreasing" => Ok(Direction::NonIncreasing),
            other => Err(format!("unknown direction `{other}` (use + or -)")),
        }
    }
}

/// One constrained feature and the range `[min, max)` it is swept over when
/// measuring monotonicity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotoneFeature {
    pub index: usize,
    pub direction: Direction,
    pub range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonotoneSpec {
    entries: Vec<MonotoneFeature>,
}

impl MonotoneSpec {
    /// Validates indices against an input width of `dim`.
    pub fn new(entries: Vec<MonotoneFeature>, dim: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if e.index >= dim {
                return Err(LossError::Config(format!(
                    "monotone feature {} out of range for {dim} inputs",
                    e.index
                )));
            }
            if !seen.insert(e.index) {
                return Err(LossError::Config(format!(
                    "monotone feature {} listed twice",
                    e.index
                )));
            }
            let (lo, hi) = e.range;
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(LossError::Config(format!(
                    "sweep range [{lo}, {hi}) of feature {} is empty",
                    e.index
                )));
            }
        }
        Ok(MonotoneSpec { entries })
    }

    /// Sweep ranges taken from the smallest and largest values of each
    /// feature in `data`.
    pub fn from_data(data: &Dataset, features: &[(usize, Direction)]) -> Result<Self> {
        let mut entries = Vec::with_capacity(features.len());
        for &(index, direction) in features {
            if index >= data.dim() {
                return Err(LossError::Config(format!(
                    "monotone feature {index} out of range for {} inputs",
                    data.dim()
                )));
            }
            let range = data.column_range(index).ok_or_else(|| {
                LossError::Config("cannot derive ranges from an empty dataset".into())
            })?;
            entries.push(MonotoneFeature {
                index,
                direction,
                range,
            });
        }
        Self::new(entries, data.dim())
    }

    pub fn entries(&self) -> &[MonotoneFeature] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(LossError::Config("no monotone features given".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Mean per-example risk.
    pub empirical: f64,
    /// Summed hinge penalty.
    pub penalty: f64,
    /// `empirical + penalty_weight * penalty`.
    pub total: f64,
}

/// `Σ_j s_j ∂score/∂x_j` over the spec's features.
pub fn signed_divergence(model: &MlpModel, x: &[f64], spec: &MonotoneSpec) -> Result<f64> {
    spec.require_nonempty()?;
    let g = model.input_gradient(x)?;
    Ok(fold_divergence(&g, spec))
}

fn fold_divergence(gradient: &[f64], spec: &MonotoneSpec) -> f64 {
    let mut div = 0.0;
    for e in spec.entries() {
        div += e.direction.sign() * gradient[e.index];
    }
    div
}

/// `Σ_i max(0, -signed_divergence(x_i))`.
pub fn penalty(model: &MlpModel, inputs: &[&[f64]], spec: &MonotoneSpec) -> Result<f64> {
    if inputs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    spec.require_nonempty()?;
    let mut total = 0.0;
    for x in inputs {
        total += hinge(-signed_divergence(model, x, spec)?);
    }
    Ok(total)
}

fn hinge(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn check_labels(batch: &Batch<'_>) -> Result<()> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if batch.inputs.len() != batch.labels.len() {
        return Err(LossError::Config(format!(
            "{} inputs but {} labels",
            batch.inputs.len(),
            batch.labels.len()
        )));
    }
    if batch.task == Task::Classification {
        if let Some(index) = batch.labels.iter().position(|&y| y != 0.0 && y != 1.0) {
            return Err(LossError::Label {
                index,
                label: batch.labels[index],
            });
        }
    }
    Ok(())
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// Bounds on `-ln p` implied by clamping `p` to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
fn nll_bounds() -> (f64, f64) {
    (-(1.0 - PROB_CLAMP).ln(), -PROB_CLAMP.ln())
}

/// Per-example risk from the pre-activation score.
fn example_risk(task: Task, score: f64, label: f64) -> f64 {
    match task {
        Task::Regression => {
            let d = score - label;
            d * d
        }
        Task::Classification => {
            // -ln p(label) = softplus(-score) for label 1, softplus(score) for 0
            let u = if label == 1.0 { -score } else { score };
            let (lo, hi) = nll_bounds();
            softplus(u).clamp(lo, hi)
        }
    }
}

/// Mean squared error for regression, mean cross-entropy for classification.
pub fn empirical_risk(model: &MlpModel, batch: &Batch<'_>) -> Result<f64> {
    check_labels(batch)?;
    let mut total = 0.0;
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        total += example_risk(batch.task, model.forward(x)?.score, y);
    }
    Ok(total / batch.len() as f64)
}

fn check_weight(w: f64) -> Result<()> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(LossError::Config(format!(
            "penalty weight {w} must be finite and >= 0"
        )));
    }
    Ok(())
}

/// Evaluates the objective. An empty spec contributes no penalty.
pub fn total_loss(
    model: &MlpModel,
    batch: &Batch<'_>,
    spec: &MonotoneSpec,
    penalty_weight: f64,
) -> Result<LossBreakdown> {
    check_weight(penalty_weight)?;
    let empirical = empirical_risk(model, batch)?;
    let penalty = if spec.is_empty() {
        0.0
    } else {
        penalty(model, &batch.inputs, spec)?
    };
    Ok(LossBreakdown {
        empirical,
        penalty,
        total: empirical + penalty_weight * penalty,
    })
}

/// `∇_θ` of [`total_loss`], in the model's flat parameter order.
pub fn parameter_gradient(
    model: &MlpModel,
    batch: &Batch<'_>,
    spec: &MonotoneSpec,
    penalty_weight: f64,
) -> Result<Vec<f64>> {
    check_weight(penalty_weight)?;
    let mut ws = Workspace::default();
    let terms = Terms {
        empirical_weight: 1.0,
        penalty_weight: (!spec.is_empty()).then_some(penalty_weight),
    };
    ws.evaluate(model, batch, spec, terms)?;
    Ok(ws.gradient)
}

/// Which parts of the objective a gradient evaluation includes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terms {
    /// Multiplier of the mean empirical risk.
    pub empirical_weight: f64,
    /// Weight of the summed hinge penalty; `None` leaves it off the tape.
    pub penalty_weight: Option<f64>,
}

/// Reusable buffers for repeated objective/gradient evaluations.
#[derive(Debug, Default)]
pub struct Workspace {
    tape: Tape,
    adjoints: Vec<f64>,
    /// Gradient from the last [`Workspace::evaluate`] call.
    pub gradient: Vec<f64>,
}

impl Workspace {
    /// Records the objective for `batch` on one tape, fills `self.gradient`
    /// and returns the unweighted term values (`penalty` is 0 when the
    /// penalty is off). `total` is the weighted objective that was
    /// differentiated.
    pub fn evaluate(
        &mut self,
        model: &MlpModel,
        batch: &Batch<'_>,
        spec: &MonotoneSpec,
        terms: Terms,
    ) -> Result<LossBreakdown> {
        check_labels(batch)?;
        check_weight(terms.empirical_weight)?;
        if let Some(w) = terms.penalty_weight {
            check_weight(w)?;
            spec.require_nonempty()?;
        }
        let tape = &mut self.tape;
        tape.clear();
        let params = model.record_params(tape);
        let d = model.input_dim();
        let (nll_lo, nll_hi) = nll_bounds();

        let mut risks = Vec::with_capacity(batch.len());
        let mut hinges = Vec::with_capacity(batch.len());
        let mut xs: Vec<Var> = Vec::with_capacity(d);
        let mut wrt: Vec<Var> = Vec::with_capacity(spec.len());
        for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
            if x.len() != d {
                return Err(ModelError::DimensionMismatch {
                    expected: d,
                    found: x.len(),
                }
                .into());
            }
            xs.clear();
            xs.extend(x.iter().map(|&v| tape.input(v)));
            let score = model.record_score(tape, &params, &xs);

            if terms.penalty_weight.is_some() {
                wrt.clear();
                wrt.extend(spec.entries().iter().map(|e| xs[e.index]));
                let grads = tape.extend_with_gradient(score, &wrt)?;
                let mut div_terms = Vec::with_capacity(grads.len());
                for (g, e) in grads.into_iter().zip(spec.entries()) {
                    div_terms.push(match e.direction {
                        Direction::NonDecreasing => g,
                        Direction::NonIncreasing => tape.neg(g),
                    });
                }
                let div = tape.sum(&div_terms);
                let neg = tape.neg(div);
                hinges.push(tape.max0(neg));
            }

            {
                let risk = match batch.task {
                    Task::Regression => {
                        let target = tape.constant(y);
                        let r = tape.sub(score, target);
                        tape.mul(r, r)
                    }
                    Task::Classification => {
                        let u = if y == 1.0 { tape.neg(score) } else { score };
                        let nll = tape.softplus(u);
                        let v = tape.value(nll);
                        if v < nll_lo {
                            tape.constant(nll_lo)
                        } else if v > nll_hi {
                            tape.constant(nll_hi)
                        } else {
                            nll
                        }
                    }
                };
                risks.push(risk);
            }
        }

        let sum = tape.sum(&risks);
        let n = tape.constant(batch.len() as f64);
        let mean_risk = tape.div(sum, n);
        let empirical = if terms.empirical_weight == 1.0 {
            mean_risk
        } else {
            let weight = tape.constant(terms.empirical_weight);
            tape.mul(weight, mean_risk)
        };
        let mut penalty = None;
        if let Some(w) = terms.penalty_weight {
            let sum = tape.sum(&hinges);
            let weight = tape.constant(w);
            penalty = Some((sum, tape.mul(weight, sum)));
        }
        let total = match penalty {
            Some((_, p)) => tape.add(empirical, p),
            None => empirical,
        };

        let breakdown = LossBreakdown {
            empirical: tape.value(mean_risk),
            penalty: penalty.map_or(0.0, |(s, _)| tape.value(s)),
            total: tape.value(total),
        };
        if tape.check_finite().is_err() {
            return Err(self.blame(mean_risk, penalty.map(|p| p.1)));
        }
        let backward = tape.backward_into(total, &mut self.adjoints);
        if backward.is_err() || self.adjoints[..params.len()].iter().any(|g| !g.is_finite()) {
            return Err(self.blame(mean_risk, penalty.map(|p| p.1)));
        }
        self.gradient.clear();
        self.gradient
            .extend(params.iter().map(|p| self.adjoints[p.index()]));
        Ok(breakdown)
    }

    /// Names the term whose value or gradient is non-finite.
    fn blame(&mut self, empirical: Var, penalty: Option<Var>) -> LossError {
        let mut scratch = Vec::new();
        for (term, var) in [("empirical", Some(empirical)), ("penalty", penalty)] {
            let Some(v) = var else { continue };
            let bad = !self.tape.value(v).is_finite()
                || self.tape.backward_into(v, &mut scratch).is_err();
            if bad {
                return LossError::NonFiniteGradient { term };
            }
        }
        LossError::NonFiniteGradient { term: "objective" }
    }
}
