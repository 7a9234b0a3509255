//! Statistical tests used to compare forecasters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Standard-normal quantile `Phi^-1(p)`.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData(format!("pearson needs >= 2 pairs, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateTest("pearson correlation of a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmLoss {
    #[default]
    Squared,
    Absolute,
}

impl DmLoss {
    fn apply(self, e: f64) -> f64 {
        match self {
            DmLoss::Squared => e * e,
            DmLoss::Absolute => e.abs(),
        }
    }
}

/// Diebold-Mariano test of equal predictive accuracy.
///
/// The long-run variance of the loss differential uses Bartlett weights with
/// truncation lag `horizon - 1`; the statistic carries the Harvey-Leybourne-
/// Newbold small-sample correction and is compared against Student's t with
/// `n - 1` degrees of freedom (two-sided). A negative statistic means
/// `errors_a` has the lower loss.
pub fn diebold_mariano(errors_a: &[f64], errors_b: &[f64], loss: DmLoss, horizon: usize) -> Result<TestResult> {
    if errors_a.len() != errors_b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} errors",
            errors_a.len(),
            errors_b.len()
        )));
    }
    let n = errors_a.len();
    if n < 10 {
        return Err(Error::InsufficientData(format!("diebold-mariano needs >= 10 errors, got {n}")));
    }
    if horizon == 0 || horizon >= n {
        return Err(Error::InvalidParameter(format!("horizon must be in 1..{n}, got {horizon}")));
    }
    let d: Vec<f64> = errors_a
        .iter()
        .zip(errors_b)
        .map(|(a, b)| loss.apply(*a) - loss.apply(*b))
        .collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let autocov = |k: usize| (k..n).map(|t| (d[t] - mean) * (d[t - k] - mean)).sum::<f64>() / nf;
    let h = horizon as f64;
    let lrv = autocov(0)
        + 2.0
            * (1..horizon)
                .map(|k| (1.0 - k as f64 / h) * autocov(k))
                .sum::<f64>();
    let scale = mean.abs().max(d.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    if !(lrv > 1e-24 * scale * scale) || !lrv.is_finite() {
        return Err(Error::DegenerateTest(
            "loss differential has zero variance; forecasts are indistinguishable".into(),
        ));
    }
    let dm = mean / (lrv / nf).sqrt();
    let hln = ((nf + 1.0 - 2.0 * h + h * (h - 1.0) / nf) / nf).sqrt();
    let statistic = dm * hln;
    let t = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(TestResult {
        statistic,
        p_value: (2.0 * t.sf(statistic.abs())).min(1.0),
    })
}

/// Studentized (Koenker) Breusch-Pagan test: `LM = n R^2` of the regression
/// of squared residuals on a constant plus `regressors` (one column each),
/// chi-square with `k = regressors.len()` degrees of freedom.
pub fn breusch_pagan(residuals: &[f64], regressors: &[Vec<f64>]) -> Result<TestResult> {
    let n = residuals.len();
    let k = regressors.len();
    if k == 0 {
        return Err(Error::InvalidParameter("breusch-pagan needs at least one regressor".into()));
    }
    if let Some(c) = regressors.iter().find(|c| c.len() != n) {
        return Err(Error::ShapeMismatch(format!("regressor of length {} for {n} residuals", c.len())));
    }
    if n <= k + 1 {
        return Err(Error::InsufficientData(format!("{n} observations for {k} regressors")));
    }
    let x = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { regressors[j - 1][i] });
    let rank = x.rank(1e-10 * x.norm().max(1.0));
    if rank < k + 1 {
        return Err(Error::RankDeficient { rank, columns: k + 1 });
    }
    let u = DVector::from_iterator(n, residuals.iter().map(|r| r * r));
    let mean_u = u.mean();
    let tss: f64 = u.iter().map(|v| (v - mean_u).powi(2)).sum();
    let chi = ChiSquared::new(k as f64).map_err(|e| Error::Domain(e.to_string()))?;
    if tss <= 1e-20 * u.iter().map(|v| v * v).sum::<f64>() {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
        });
    }
    let beta = x
        .clone()
        .svd(true, true)
        .solve(&u, 1e-12)
        .map_err(|e| Error::Domain(e.to_string()))?;
    let fitted = &x * beta;
    let rss: f64 = u.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let r2 = (1.0 - rss / tss).clamp(0.0, 1.0);
    let statistic = n as f64 * r2;
    Ok(TestResult {
        statistic,
        p_value: chi.sf(statistic),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dm_vectors() -> (Vec<f64>, Vec<f64>) {
        let a = (0..40)
            .map(|i| {
                let i = i as f64;
                0.5 * (0.7 * i).sin() + 0.1 * (1.3 * i).cos()
            })
            .collect();
        let b = (0..40)
            .map(|i| {
                let i = i as f64;
                0.6 * (0.7 * i + 0.2).sin() + 0.12 * (1.1 * i).cos() + 0.1
            })
            .collect();
        (a, b)
    }

    #[test]
    fn normal_quantiles() {
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-9);
        assert!((normal_quantile(0.985) - 2.170_090_377_584_560_2).abs() < 1e-9);
        assert!((normal_quantile(0.995) - 2.575_829_303_548_900_4).abs() < 1e-9);
        assert_eq!(normal_quantile(0.5), 0.0);
    }

    #[test]
    fn diebold_mariano_reference_values() {
        let (a, b) = dm_vectors();
        let cases = [
            (DmLoss::Squared, 1, -3.414_627_185_893_343_2, 0.001_503_689_145_654_657),
            (DmLoss::Squared, 2, -2.748_708_013_963_115, 0.009_016_736_100_284_028),
            (DmLoss::Squared, 3, -2.622_744_807_445_624, 0.012_380_025_379_340_106),
            (DmLoss::Absolute, 1, -3.199_937_801_303_685, 0.002_731_334_254_718_058),
            (DmLoss::Absolute, 2, -2.791_800_982_579_750_7, 0.008_076_001_955_069_578),
            (DmLoss::Absolute, 3, -2.754_219_699_721_795_6, 0.008_890_986_155_657_601),
        ];
        for (loss, h, stat, p) in cases {
            let r = diebold_mariano(&a, &b, loss, h).unwrap();
            assert!((r.statistic - stat).abs() < 1e-9, "{loss:?} h={h}: {}", r.statistic);
            assert!((r.p_value - p).abs() < 1e-9, "{loss:?} h={h}: {}", r.p_value);
        }
    }

    #[test]
    fn diebold_mariano_antisymmetric_and_degenerate() {
        let (a, b) = dm_vectors();
        let ab = diebold_mariano(&a, &b, DmLoss::Squared, 2).unwrap();
        let ba = diebold_mariano(&b, &a, DmLoss::Squared, 2).unwrap();
        assert!((ab.statistic + ba.statistic).abs() < 1e-12);
        assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        assert!(matches!(
            diebold_mariano(&a, &a, DmLoss::Squared, 1),
            Err(Error::DegenerateTest(_))
        ));
        assert!(diebold_mariano(&a[..5], &b[..5], DmLoss::Squared, 1).is_err());
    }

    fn bp_data() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let m = 60.0;
        let x1: Vec<f64> = (0..60).map(|j| (0.37 * j as f64).cos() + j as f64 / m).collect();
        let x2: Vec<f64> = (0..60).map(|j| (1.1 * j as f64).sin().powi(2)).collect();
        let res = (0..60)
            .map(|j| {
                let jf = j as f64;
                (0.3 + 0.1 * x1[j] * x1[j]) * (2.3 * jf + 0.4).sin() + 0.05 * (0.9 * jf).cos()
            })
            .collect();
        (x1, x2, res)
    }

    #[test]
    fn breusch_pagan_reference_values() {
        let (x1, x2, res) = bp_data();
        let r = breusch_pagan(&res, &[x1.clone(), x2]).unwrap();
        assert!((r.statistic - 9.548_298_485_590_08).abs() < 1e-8, "{}", r.statistic);
        assert!((r.p_value - 0.008_445_265_902_842_414).abs() < 1e-9);
        let r = breusch_pagan(&res, &[x1]).unwrap();
        assert!((r.statistic - 9.545_772_779_263_462).abs() < 1e-8);
        assert!((r.p_value - 0.002_004_104_316_087_038_5).abs() < 1e-9);
    }

    #[test]
    fn breusch_pagan_edge_cases() {
        let (x1, _, res) = bp_data();
        let r = breusch_pagan(&vec![0.3; 60], &[x1.clone()]).unwrap();
        assert_eq!(r.statistic, 0.0);
        let doubled: Vec<f64> = x1.iter().map(|v| 2.0 * v).collect();
        assert!(matches!(
            breusch_pagan(&res, &[x1.clone(), doubled]),
            Err(Error::RankDeficient { .. })
        ));
        assert!(matches!(
            breusch_pagan(&res, &[vec![1.0; 60]]),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn breusch_pagan_monte_carlo() {
        let n = 10_000;
        let mut accepted = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let e: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            if breusch_pagan(&e, &[x.clone()]).unwrap().p_value > 0.05 {
                accepted += 1;
            }
            if seed < 3 {
                let het: Vec<f64> = x.iter().zip(&e).map(|(x, e)| e * (0.5 + x.abs())).collect();
                let abs_x: Vec<f64> = x.iter().map(|v| v.abs()).collect();
                assert!(breusch_pagan(&het, &[abs_x]).unwrap().p_value < 0.01);
            }
        }
        assert!(accepted >= 18, "accepted {accepted}/20");
    }

    #[test]
    fn pearson_cases() {
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let aff: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &aff).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&x, &[1.0; 10]).is_err());
        assert!(pearson(&[1.0], &[2.0]).is_err());
    }
}
