//! Point, QoS and calibration metrics, statistical tests, summary tables and
//! plots.
//!
//! All metrics work in scaled space. An observation exactly on its upper
//! bound counts as a success everywhere in this module.

mod plot;
mod report;
pub mod stats;

pub use plot::{calibration_svg, tpr_sr_svg, PlotSeries};
pub use report::{
    aggregate_report, read_metric_records, write_metric_record, write_summary, MetricRecord, ResourceMetrics,
    SummaryRow, SummaryTables,
};
pub use stats::{breusch_pagan, diebold_mariano, normal_quantile, pearson, DmLoss, TestResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{upper_bound_with, ForecastDistribution, IntervalSide};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub mse: f64,
    pub mae: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QosReport {
    /// Percent.
    pub confidence: f64,
    /// Percent of observations at or below their upper bound.
    pub sr: f64,
    pub op: f64,
    pub up: f64,
    pub tpr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub levels: Vec<f64>,
    pub achieved_sr: Vec<f64>,
    /// In squared percentage points.
    pub curve_mse: f64,
    /// In percentage points.
    pub curve_mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub level: f64,
    pub tpr: f64,
    pub sr: f64,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} actuals", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::NoData("no predictions to evaluate".into()));
    }
    Ok(())
}

pub fn point_metrics(pred_mean: &[f64], actual: &[f64]) -> Result<PointMetrics> {
    check_pair(pred_mean, actual)?;
    let n = actual.len() as f64;
    let (se, ae) = pred_mean
        .iter()
        .zip(actual)
        .fold((0.0, 0.0), |(se, ae), (p, a)| (se + (p - a) * (p - a), ae + (p - a).abs()));
    Ok(PointMetrics {
        mse: se / n,
        mae: ae / n,
        n: actual.len(),
    })
}

/// `confidence` in percent.
pub fn qos_metrics(upper_bounds: &[f64], actual: &[f64], confidence: f64) -> Result<QosReport> {
    check_pair(upper_bounds, actual)?;
    let (mut hits, mut op, mut up, mut tpr) = (0usize, 0.0, 0.0, 0.0);
    for (ub, a) in upper_bounds.iter().zip(actual) {
        tpr += ub;
        if a <= ub {
            hits += 1;
            op += ub - a;
        } else {
            up += a - ub;
        }
    }
    Ok(QosReport {
        confidence,
        sr: 100.0 * hits as f64 / actual.len() as f64,
        op,
        up,
        tpr,
        n: actual.len(),
    })
}

/// Confidence grid 90, 90.5, ..., 99.5 (percent).
pub fn default_levels() -> Vec<f64> {
    (0..20).map(|i| 90.0 + 0.5 * i as f64).collect()
}

/// `(TPR, SR)` at each level (percent) for a single-resource distribution.
pub fn tpr_sr_curve(
    dist: &ForecastDistribution,
    actual: &[f64],
    levels: &[f64],
    side: IntervalSide,
) -> Result<Vec<CurvePoint>> {
    check_pair(&dist.mean, actual)?;
    let reports = par::map(levels, |&level| {
        let ub = upper_bound_with(dist, level / 100.0, side)?;
        qos_metrics(&ub, actual, level)
    });
    reports
        .into_iter()
        .map(|r| {
            r.map(|q| CurvePoint {
                level: q.confidence,
                tpr: q.tpr,
                sr: q.sr,
            })
        })
        .collect()
}

/// Achieved coverage at each level of [`default_levels`], with MSE and MAE
/// against the diagonal in percentage points.
///
/// The bound at level `c` is the one-sided quantile `mean + Phi^-1(c) std`,
/// so a perfectly calibrated forecaster lands on the diagonal.
pub fn calibration_curve(dist: &ForecastDistribution, actual: &[f64]) -> Result<CalibrationCurve> {
    calibration_curve_with(dist, actual, &default_levels(), IntervalSide::OneSided)
}

pub fn calibration_curve_with(
    dist: &ForecastDistribution,
    actual: &[f64],
    levels: &[f64],
    side: IntervalSide,
) -> Result<CalibrationCurve> {
    if levels.is_empty() || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("levels must be nonempty and strictly increasing".into()));
    }
    let curve = tpr_sr_curve(dist, actual, levels, side)?;
    let achieved_sr: Vec<f64> = curve.iter().map(|p| p.sr).collect();
    Ok(curve_from_points(levels.to_vec(), achieved_sr))
}

pub fn curve_from_points(levels: Vec<f64>, achieved_sr: Vec<f64>) -> CalibrationCurve {
    let m = levels.len() as f64;
    let (se, ae) = levels
        .iter()
        .zip(&achieved_sr)
        .fold((0.0, 0.0), |(se, ae), (l, s)| (se + (s - l) * (s - l), ae + (s - l).abs()));
    CalibrationCurve {
        levels,
        achieved_sr,
        curve_mse: se / m,
        curve_mae: ae / m,
    }
}

/// Mean pinball (quantile) loss of predicted quantiles at level `tau`.
///
/// An optional asymmetric complement to the interval metrics: under-
/// prediction is charged `tau` per unit and overprediction `1 - tau`.
pub fn pinball_loss(quantiles: &[f64], actual: &[f64], tau: f64) -> Result<f64> {
    check_pair(quantiles, actual)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidParameter(format!("tau must lie in [0, 1], got {tau}")));
    }
    let total: f64 = quantiles
        .iter()
        .zip(actual)
        .map(|(q, a)| {
            let d = a - q;
            if d >= 0.0 {
                tau * d
            } else {
                (tau - 1.0) * d
            }
        })
        .sum();
    Ok(total / actual.len() as f64)
}

/// Pinball loss of the one-sided Gaussian quantile at each level (percent).
pub fn pinball_report(dist: &ForecastDistribution, actual: &[f64], levels: &[f64]) -> Result<Vec<(f64, f64)>> {
    levels
        .iter()
        .map(|&level| {
            let q = upper_bound_with(dist, level / 100.0, IntervalSide::OneSided)?;
            Ok((level, pinball_loss(&q, actual, level / 100.0)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as NormalDist};

    fn gaussian(mean: Vec<f64>, std: Vec<f64>) -> ForecastDistribution {
        ForecastDistribution {
            resources: 1,
            mean,
            std: Some(std),
            threshold: None,
        }
    }

    #[test]
    fn point_metric_examples() {
        let m = point_metrics(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!((m.mse, m.mae), (1.0, 1.0));
        let m = point_metrics(&[0.3, 0.4], &[0.3, 0.4]).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        assert!(point_metrics(&[0.0], &[1.0, 2.0]).is_err());
        assert!(point_metrics(&[], &[]).is_err());
    }

    #[test]
    fn qos_examples() {
        let q = qos_metrics(&[1.0, 2.0, 3.0], &[0.5, 2.5, 3.0], 95.0).unwrap();
        assert!((q.sr - 200.0 / 3.0).abs() < 1e-12);
        assert!((q.op - 0.5).abs() < 1e-12);
        assert!((q.up - 0.5).abs() < 1e-12);
        assert!((q.tpr - 6.0).abs() < 1e-12);
        let q = qos_metrics(&[0.2, 0.7], &[0.2, 0.7], 99.0).unwrap();
        assert_eq!((q.sr, q.op, q.up), (100.0, 0.0, 0.0));
    }

    #[test]
    fn tpr_sr_curve_shape() {
        let d = gaussian(vec![0.5, 0.2, 0.8], vec![0.1, 0.05, 0.2]);
        let actual = [0.6, 0.3, 1.2];
        let c = tpr_sr_curve(&d, &actual, &default_levels(), IntervalSide::TwoSided).unwrap();
        assert_eq!(c.len(), 20);
        assert!(c.windows(2).all(|w| w[1].tpr > w[0].tpr && w[1].sr >= w[0].sr));

        let flat = gaussian(vec![0.5, 0.2], vec![0.0, 0.0]);
        let c = tpr_sr_curve(&flat, &[0.4, 0.3], &default_levels(), IntervalSide::TwoSided).unwrap();
        assert!(c.iter().all(|p| p.tpr == c[0].tpr));
    }

    #[test]
    fn calibration_of_always_covering_model() {
        let d = gaussian(vec![10.0; 4], vec![1.0; 4]);
        let c = calibration_curve(&d, &[0.0; 4]).unwrap();
        let expected = default_levels().iter().map(|l| 100.0 - l).sum::<f64>() / 20.0;
        assert!((c.curve_mae - expected).abs() < 1e-12);
        assert!(c.achieved_sr.iter().all(|&s| s == 100.0));
    }

    #[test]
    fn calibration_of_perfect_gaussians() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean: Vec<f64> = (0..n).map(|i| (i as f64 * 0.01).sin()).collect();
        let std: Vec<f64> = (0..n).map(|i| 0.05 + 0.1 * ((i % 7) as f64 / 7.0)).collect();
        let actual: Vec<f64> = mean
            .iter()
            .zip(&std)
            .map(|(&m, &s)| NormalDist::new(m, s).unwrap().sample(&mut rng))
            .collect();
        let c = calibration_curve(&gaussian(mean.clone(), std.clone()), &actual).unwrap();
        assert!(c.curve_mae < 0.5, "curve_mae {}", c.curve_mae);
        // cross-module consistency with qos_metrics at every level
        let d = gaussian(mean, std);
        for (l, sr) in c.levels.iter().zip(&c.achieved_sr) {
            let ub = upper_bound_with(&d, l / 100.0, IntervalSide::OneSided).unwrap();
            assert_eq!(qos_metrics(&ub, &actual, *l).unwrap().sr, *sr);
        }
        // the central-interval upper end covers (1 + c) / 2
        let two = calibration_curve_with(&d, &actual, &default_levels(), IntervalSide::TwoSided).unwrap();
        for (l, sr) in two.levels.iter().zip(&two.achieved_sr) {
            assert!((sr - (100.0 + l) / 2.0).abs() < 0.5, "{l}: {sr}");
        }
    }

    #[test]
    fn pinball_values() {
        assert_eq!(pinball_loss(&[1.0], &[3.0], 0.9).unwrap(), 0.9 * 2.0);
        assert!((pinball_loss(&[3.0], &[1.0], 0.9).unwrap() - 0.2).abs() < 1e-12);
        assert!(pinball_loss(&[1.0], &[1.0], 1.5).is_err());
    }

    proptest! {
        #[test]
        fn tpr_identity(pairs in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..200)) {
            let (ub, actual): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let q = qos_metrics(&ub, &actual, 95.0).unwrap();
            let rhs = actual.iter().sum::<f64>() + q.op - q.up;
            prop_assert!((q.tpr - rhs).abs() <= 1e-9 * q.tpr.abs().max(1.0));
            prop_assert!((0.0..=100.0).contains(&q.sr) && q.op >= 0.0 && q.up >= 0.0);
        }

        #[test]
        fn metrics_are_permutation_invariant(
            pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..60),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (p1, a1): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (p2, a2): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
            let q1 = qos_metrics(&p1, &a1, 95.0).unwrap();
            let q2 = qos_metrics(&p2, &a2, 95.0).unwrap();
            prop_assert_eq!(q1.sr, q2.sr);
            prop_assert!((q1.op - q2.op).abs() < 1e-9 && (q1.tpr - q2.tpr).abs() < 1e-9);
            let m1 = point_metrics(&p1, &a1).unwrap();
            let m2 = point_metrics(&p2, &a2).unwrap();
            prop_assert!((m1.mse - m2.mse).abs() < 1e-12 && (m1.mae - m2.mae).abs() < 1e-12);
        }
    }
}
