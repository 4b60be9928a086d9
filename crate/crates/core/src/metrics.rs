//! Evaluation: the sweep-based monotonicity measure `M_k`, ROC AUC,
//! conditioned trend curves and Pearson correlation.
//!
//! All model-based metrics read the pre-output-activation score. The
//! sigmoid is strictly increasing, so neither `M_k` nor AUC change.

use std::cmp::Ordering;

use thiserror::Error;

use crate::loss::{MonotoneFeature, MonotoneSpec};
use crate::model::MlpModel;

pub const DEFAULT_RESOLUTION: usize = 20;
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty dataset")]
    Empty,
    #[error("grid resolution {0} must be at least 2")]
    Resolution(usize),
    #[error("invalid sweep range [{0}, {1})")]
    Range(f64, f64),
    #[error("feature {feature} out of range for {dim} inputs")]
    Feature { feature: usize, dim: usize },
    #[error("AUC is undefined: labels contain a single class")]
    SingleClass,
    #[error("label {0} is not 0 or 1")]
    Label(f64),
    #[error("correlation is undefined: zero variance")]
    ZeroVariance,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Evenly spaced points `min + i (max - min) / G`, `i = 0..G`, covering
/// `[min, max)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub feature: usize,
    pub points: Vec<f64>,
}

impl SweepGrid {
    pub fn new(feature: usize, min: f64, max: f64, resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(MetricsError::Resolution(resolution));
        }
        if !min.is_finite() || !max.is_finite() || min >= max {
            return Err(MetricsError::Range(min, max));
        }
        let step = (max - min) / resolution as f64;
        let points = (0..resolution).map(|i| min + i as f64 * step).collect();
        Ok(SweepGrid { feature, points })
    }

    pub fn for_feature(entry: &MonotoneFeature, resolution: usize) -> Result<Self> {
        Self::new(entry.index, entry.range.0, entry.range.1, resolution)
    }

    pub fn resolution(&self) -> usize {
        self.points.len()
    }
}

/// One sample whose sweep decreased between grid points `segment` and
/// `segment + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub sample: usize,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMonotonicity {
    pub feature: usize,
    /// Fraction of samples whose sweep never decreases.
    pub mk: f64,
    pub deltas: Vec<u8>,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub features: Vec<FeatureMonotonicity>,
}

impl MonotonicityReport {
    pub fn mean_mk(&self) -> f64 {
        self.features.iter().map(|f| f.mk).sum::<f64>() / self.features.len() as f64
    }

    pub fn get(&self, feature: usize) -> Option<&FeatureMonotonicity> {
        self.features.iter().find(|f| f.feature == feature)
    }
}

/// For every sample and monotone feature `k`: sweep `x[k]` over the grid with
/// the other coordinates fixed, and count the sample as monotone when every
/// forward difference of the direction-signed score is `>= -tolerance`.
pub fn monotonicity_metric<'a, I>(
    model: &MlpModel,
    samples: I,
    spec: &MonotoneSpec,
    resolution: usize,
    tolerance: f64,
) -> Result<MonotonicityReport>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let samples: Vec<&[f64]> = samples.into_iter().collect();
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let dim = model.input_dim();
    let mut features = Vec::with_capacity(spec.len());
    let mut probe = vec![0.0; dim];
    let mut sweep = Vec::with_capacity(resolution);
    for entry in spec.entries() {
        if entry.index >= dim {
            return Err(MetricsError::Feature {
                feature: entry.index,
                dim,
            });
        }
        let grid = SweepGrid::for_feature(entry, resolution)?;
        let sign = entry.direction.sign();
        let mut deltas = Vec::with_capacity(samples.len());
        let mut violations = Vec::new();
        for (i, x) in samples.iter().enumerate() {
            probe.copy_from_slice(x);
            sweep.clear();
            for &v in &grid.points {
                probe[entry.index] = v;
                sweep.push(sign * model.score(&probe));
            }
            let before = violations.len();
            for (segment, w) in sweep.windows(2).enumerate() {
                if w[1] - w[0] < -tolerance {
                    violations.push(Violation { sample: i, segment });
                }
            }
            deltas.push(u8::from(violations.len() == before));
        }
        let ones = deltas.iter().filter(|&&d| d == 1).count();
        features.push(FeatureMonotonicity {
            feature: entry.index,
            mk: ones as f64 / samples.len() as f64,
            deltas,
            violations,
        });
    }
    Ok(MonotonicityReport { features })
}

/// Area under the ROC curve via the Mann–Whitney statistic with average
/// ranks for ties: the probability that a random positive outscores a random
/// negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length(scores.len(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(MetricsError::Label(bad));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count();
        rank_sum_pos += avg * pos_in_tie as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendCurve {
    /// Position of the anchor in the slice passed to [`conditioned_trends`].
    pub anchor: usize,
    /// `(feature value, score)` along the grid.
    pub points: Vec<(f64, f64)>,
}

/// The model's score along `grid` for each anchor, with every other
/// coordinate frozen at the anchor's values.
pub fn conditioned_trends(
    model: &MlpModel,
    anchors: &[&[f64]],
    grid: &SweepGrid,
) -> Result<Vec<TrendCurve>> {
    if anchors.is_empty() {
        return Err(MetricsError::Empty);
    }
    let dim = model.input_dim();
    if grid.feature >= dim {
        return Err(MetricsError::Feature {
            feature: grid.feature,
            dim,
        });
    }
    Ok(anchors
        .iter()
        .enumerate()
        .map(|(anchor, x)| {
            let mut probe = x.to_vec();
            let points = grid
                .points
                .iter()
                .map(|&v| {
                    probe[grid.feature] = v;
                    (v, model.score(&probe))
                })
                .collect();
            TrendCurve { anchor, points }
        })
        .collect())
}

pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricsError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean squared error of regression predictions.
pub fn mean_squared_error(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(MetricsError::Length(predictions.len(), targets.len()));
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::Direction;
    use crate::model::{HiddenActivation, InitSpec, OutputActivation};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear(w: &[f64]) -> MlpModel {
        let mut p = w.to_vec();
        p.push(0.0);
        MlpModel::from_params(
            &[w.len(), 1],
            HiddenActivation::Tanh,
            OutputActivation::Identity,
            p,
        )
        .unwrap()
    }

    fn spec1(index: usize, direction: Direction, dim: usize) -> MonotoneSpec {
        MonotoneSpec::new(
            vec![MonotoneFeature {
                index,
                direction,
                range: (0.0, 1.0),
            }],
            dim,
        )
        .unwrap()
    }

    #[test]
    fn grid_layout() {
        let g = SweepGrid::new(0, 0.0, 1.0, 4).unwrap();
        assert_eq!(g.points, vec![0.0, 0.25, 0.5, 0.75]);
        assert_eq!(
            SweepGrid::new(0, 0.0, 1.0, 1),
            Err(MetricsError::Resolution(1))
        );
        assert!(SweepGrid::new(0, 1.0, 1.0, 5).is_err());
    }

    #[test]
    fn identity_and_negated_identity() {
        let rows = [[0.2, 0.9], [0.5, 0.1], [0.8, 0.4]];
        let xs: Vec<&[f64]> = rows.iter().map(|r| &r[..]).collect();
        let up = monotonicity_metric(
            &linear(&[0.0, 1.0]),
            xs.iter().copied(),
            &spec1(1, Direction::NonDecreasing, 2),
            20,
            1e-9,
        )
        .unwrap();
        assert_eq!(up.features[0].mk, 1.0);
        assert!(up.features[0].violations.is_empty());
        let down = monotonicity_metric(
            &linear(&[0.0, -1.0]),
            xs.iter().copied(),
            &spec1(1, Direction::NonDecreasing, 2),
            20,
            1e-9,
        )
        .unwrap();
        assert_eq!(down.features[0].mk, 0.0);
        assert_eq!(down.features[0].violations.len(), 3 * 19);
        let folded = monotonicity_metric(
            &linear(&[0.0, -1.0]),
            xs.iter().copied(),
            &spec1(1, Direction::NonIncreasing, 2),
            20,
            1e-9,
        )
        .unwrap();
        assert_eq!(folded.features[0].mk, 1.0);
        assert_eq!(
            monotonicity_metric(
                &linear(&[1.0, 1.0]),
                std::iter::empty(),
                &spec1(0, Direction::NonDecreasing, 2),
                20,
                1e-9
            ),
            Err(MetricsError::Empty)
        );
    }

    fn brute_force_deltas(
        model: &MlpModel,
        xs: &[Vec<f64>],
        k: usize,
        lo: f64,
        hi: f64,
        g: usize,
        sign: f64,
    ) -> Vec<u8> {
        let mut out = Vec::new();
        for x in xs {
            let mut ok = 1u8;
            for s in 0..g - 1 {
                let mut a = x.clone();
                let mut b = x.clone();
                a[k] = lo + s as f64 * ((hi - lo) / g as f64);
                b[k] = lo + (s + 1) as f64 * ((hi - lo) / g as f64);
                if sign * model.score(&b) - sign * model.score(&a) < -1e-9 {
                    ok = 0;
                }
            }
            out.push(ok);
        }
        out
    }

    #[test]
    fn metric_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MlpModel::init(
            &[3, 8, 1],
            HiddenActivation::Tanh,
            OutputActivation::Identity,
            InitSpec::glorot(13),
        )
        .unwrap();
        let xs: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let spec = MonotoneSpec::new(
            vec![
                MonotoneFeature {
                    index: 0,
                    direction: Direction::NonDecreasing,
                    range: (-1.0, 1.0),
                },
                MonotoneFeature {
                    index: 2,
                    direction: Direction::NonIncreasing,
                    range: (-0.5, 2.0),
                },
            ],
            3,
        )
        .unwrap();
        let report =
            monotonicity_metric(&m, xs.iter().map(Vec::as_slice), &spec, 16, 1e-9).unwrap();
        assert_eq!(
            report.features[0].deltas,
            brute_force_deltas(&m, &xs, 0, -1.0, 1.0, 16, 1.0)
        );
        assert_eq!(
            report.features[1].deltas,
            brute_force_deltas(&m, &xs, 2, -0.5, 2.0, 16, -1.0)
        );
    }

    fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1.0 && yj == 0.0 {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.9], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(
            auc(&[0.4; 6], &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap(),
            0.5
        );
        assert_eq!(
            auc(&[0.1, 0.2], &[1.0, 1.0]),
            Err(MetricsError::SingleClass)
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..200)
            .map(|_| (rng.random_range(0.0..1.0f64) * 20.0).round())
            .collect();
        let labels: Vec<f64> = (0..200).map(|_| rng.random_range(0..2) as f64).collect();
        assert!((auc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn trends_examples() {
        let m = linear(&[0.5, 2.0, -1.0]);
        let a = [0.1, 0.2, 0.3];
        let grid = SweepGrid::new(1, 0.0, 1.0, 5).unwrap();
        let curves = conditioned_trends(&m, &[&a, &a], &grid).unwrap();
        assert_eq!(curves[0].points, curves[1].points);
        for w in curves[0].points.windows(2) {
            let slope = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
            assert!((slope - 2.0).abs() < 1e-12);
        }
        let flat = linear(&[0.5, 0.0, -1.0]);
        let curves = conditioned_trends(&flat, &[&a], &grid).unwrap();
        assert!(curves[0]
            .points
            .iter()
            .all(|p| p.1 == curves[0].points[0].1));
        assert_eq!(conditioned_trends(&m, &[], &grid), Err(MetricsError::Empty));
    }

    #[test]
    fn pearson_examples() {
        let y = [0.0, 1.0, 1.0, 0.0, 1.0];
        assert!((pearson_correlation(&y, &y).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((pearson_correlation(&neg, &y).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(
            pearson_correlation(&[1.0; 5], &y),
            Err(MetricsError::ZeroVariance)
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mk_invariant_under_increasing_transform(seed in 0u64..1000) {
            // exp of the score as a one-neuron readout: compare sign patterns
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = MlpModel::init(&[2, 6, 1], HiddenActivation::Tanh, OutputActivation::Identity, InitSpec::glorot(seed)).unwrap();
            let xs: Vec<Vec<f64>> = (0..10).map(|_| (0..2).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let spec = spec1(0, Direction::NonDecreasing, 2);
            let report = monotonicity_metric(&m, xs.iter().map(Vec::as_slice), &spec, 12, 0.0).unwrap();
            let grid = SweepGrid::new(0, 0.0, 1.0, 12).unwrap();
            let anchors: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            let curves = conditioned_trends(&m, &anchors, &grid).unwrap();
            for (c, &delta) in curves.iter().zip(&report.features[0].deltas) {
                let ok = c.points.windows(2).all(|w| w[1].1.exp() - w[0].1.exp() >= 0.0);
                prop_assert_eq!(u8::from(ok), delta);
            }
            prop_assert!((0.0..=1.0).contains(&report.features[0].mk));
        }

        #[test]
        fn auc_invariant_under_increasing_transform(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut labels: Vec<f64> = (0..50).map(|_| rng.random_range(0..2) as f64).collect();
            labels[0] = 0.0;
            labels[1] = 1.0;
            let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&squashed, &labels).unwrap());
        }
    }
}
