//! Estimators with error bars: sample variance, jackknife, weighted log-log fits.

use crate::error::{LabError, Result};
use serde::Serialize;

/// Two-sided 97.5% standard normal quantile.
pub const Z975: f64 = 1.959963984540054;

/// Neumaier-compensated sum.
pub fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in values {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

pub fn mean(v: &[f64]) -> f64 {
    sum(v.iter().copied()) / v.len() as f64
}

/// Unbiased sample variance.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    sum(v.iter().map(|x| (x - m) * (x - m))) / (v.len() as f64 - 1.0)
}

/// Unbiased sample covariance.
pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb))) / (a.len() as f64 - 1.0)
}

pub fn std_error_of_mean(v: &[f64]) -> f64 {
    (variance(v) / v.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn ci95(&self) -> (f64, f64) {
        (self.value - Z975 * self.se, self.value + Z975 * self.se)
    }

    /// `(value - target) / se`.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.value - target) / self.se
    }
}

/// Delete-one jackknife for a statistic of paired columns, computed in O(n) from running sums
/// when the statistic depends on the data only through column sums of `features` (sum form).
pub fn jackknife<F>(rows: &[Vec<f64>], stat: F) -> Result<Estimate>
where
    F: Fn(&[f64], f64) -> f64,
{
    let n = rows.len();
    if n < 3 {
        return Err(LabError::InsufficientSamples { needed: 3, got: n });
    }
    let k = rows[0].len();
    let mut totals = vec![0.0; k];
    for r in rows {
        for (t, v) in totals.iter_mut().zip(r) {
            *t += v;
        }
    }
    let full = stat(&totals, n as f64);
    let mut loo = Vec::with_capacity(n);
    let mut buf = vec![0.0; k];
    for r in rows {
        for ((b, t), v) in buf.iter_mut().zip(&totals).zip(r) {
            *b = t - v;
        }
        loo.push(stat(&buf, (n - 1) as f64));
    }
    let lm = mean(&loo);
    let var = (n as f64 - 1.0) / n as f64 * sum(loo.iter().map(|x| (x - lm) * (x - lm)));
    Ok(Estimate { value: full, se: var.sqrt() })
}

/// Feature row `(a, b, a b)` for [`jackknife_covariance`].
pub fn covariance_row(a: f64, b: f64) -> Vec<f64> {
    vec![a, b, a * b]
}

/// Unbiased covariance with its jackknife standard error.
pub fn jackknife_covariance(a: &[f64], b: &[f64]) -> Result<Estimate> {
    let rows: Vec<Vec<f64>> = a.iter().zip(b).map(|(x, y)| covariance_row(*x, *y)).collect();
    jackknife(&rows, cov_from_sums)
}

/// Covariance from the sums `(Σa, Σb, Σab)` of `n` rows.
pub fn cov_from_sums(s: &[f64], n: f64) -> f64 {
    (s[2] - s[0] * s[1] / n) / (n - 1.0)
}

/// Variance with a jackknife standard error.
pub fn jackknife_variance(a: &[f64]) -> Result<Estimate> {
    jackknife_covariance(a, a)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub slope_ci: (f64, f64),
    /// Covariance of `(slope, intercept)`: `[var_slope, cov, var_intercept]`.
    pub covariance: [f64; 3],
}

/// Weighted least squares of `log y` on `log x`. Weights are inverse variances of `log y`;
/// the covariance is scaled by the residual variance when `scale_by_residuals` is set.
pub fn exponent_fit(pairs: &[(f64, f64)], weights: Option<&[f64]>, scale_by_residuals: bool) -> Result<ExponentFit> {
    if pairs.len() < 3 {
        return Err(LabError::InsufficientSamples { needed: 3, got: pairs.len() });
    }
    if pairs.iter().any(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(LabError::Domain("exponent fit needs positive data".into()));
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() == pairs.len() => w.to_vec(),
        Some(_) => return Err(LabError::Domain("one weight per point is required".into())),
        None => vec![1.0; pairs.len()],
    };
    let lx: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let sw = sum(w.iter().copied());
    let mx = sum(w.iter().zip(&lx).map(|(a, b)| a * b)) / sw;
    let my = sum(w.iter().zip(&ly).map(|(a, b)| a * b)) / sw;
    let sxx = sum(w.iter().zip(&lx).map(|(a, x)| a * (x - mx) * (x - mx)));
    if !(sxx > 1e-14 * sw) {
        return Err(LabError::Domain("exponent fit has degenerate abscissae".into()));
    }
    let sxy = sum(w.iter().zip(lx.iter().zip(&ly)).map(|(a, (x, y))| a * (x - mx) * (y - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let scale = if scale_by_residuals {
        let rss = sum(w.iter().zip(lx.iter().zip(&ly)).map(|(a, (x, y))| a * (y - intercept - slope * x).powi(2)));
        rss / (pairs.len() as f64 - 2.0)
    } else {
        1.0
    };
    let var_slope = scale / sxx;
    let var_int = scale * (1.0 / sw + mx * mx / sxx);
    let cov = -scale * mx / sxx;
    let se = var_slope.sqrt();
    let q = if scale_by_residuals { student_t975(pairs.len() - 2) } else { Z975 };
    Ok(ExponentFit {
        slope,
        intercept,
        slope_se: se,
        slope_ci: (slope - q * se, slope + q * se),
        covariance: [var_slope, cov, var_int],
    })
}

/// Two-sided 95% Student t quantile.
pub fn student_t975(dof: usize) -> f64 {
    const TABLE: [f64; 10] = [12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228];
    match dof {
        0 => f64::INFINITY,
        1..=10 => TABLE[dof - 1],
        _ => Z975 + 2.4 / dof as f64,
    }
}

/// Empirical quantile by linear interpolation between order statistics.
pub fn quantile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let h = p * (s.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Pearson correlation with a jackknife standard error.
pub fn jackknife_correlation(a: &[f64], b: &[f64]) -> Result<Estimate> {
    let rows: Vec<Vec<f64>> = a.iter().zip(b).map(|(x, y)| vec![*x, *y, x * x, y * y, x * y]).collect();
    jackknife(&rows, |s, n| {
        let cab = s[4] - s[0] * s[1] / n;
        let caa = s[2] - s[0] * s[0] / n;
        let cbb = s[3] - s[1] * s[1] / n;
        cab / (caa * cbb).sqrt()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn exact_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 5.0, 9.0].iter().map(|&x| (x, 7.0 * x * x)).collect();
        let f = exponent_fit(&pts, None, true).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 7f64.ln()).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = [1.0, 2.0, 4.0].iter().map(|&x| (x, 3.0)).collect();
        assert!(exponent_fit(&flat, None, true).unwrap().slope.abs() < 1e-12);
        assert!(exponent_fit(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)], None, false).is_err());
        assert!(exponent_fit(&[(1.0, 1.0), (2.0, 2.0)], None, false).is_err());
    }

    #[test]
    fn noisy_square_root() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<(f64, f64)> = (1..=12)
            .map(|k| {
                let x = 2f64.powi(k);
                (x, x.sqrt() * (1.0 + rng.random_range(-0.05..0.05)))
            })
            .collect();
        let f = exponent_fit(&pts, None, true).unwrap();
        assert!((0.45..=0.55).contains(&f.slope));
    }

    #[test]
    fn jackknife_matches_classical_errors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let v = jackknife_variance(&a).unwrap();
        assert!((v.value - variance(&a)).abs() < 1e-12);
        assert!((v.value - 1.0 / 12.0).abs() < 4.0 * v.se);
        // se of the variance of U(0,1): sqrt((mu4 - sigma^4)/n)
        let expected = ((1.0 / 80.0 - 1.0 / 144.0) / 4000.0f64).sqrt();
        assert!((v.se / expected - 1.0).abs() < 0.1);
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 1.0).collect();
        let r = jackknife_correlation(&a, &b).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
    }
}
