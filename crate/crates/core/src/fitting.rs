//! Least-squares line and power-law fits with a log-log curvature diagnostic.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Slope of the line, or the exponent for a power law.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// OLS standard error of `slope` (0 with two points).
    pub stderr: f64,
    /// Quadratic coefficient of a second-order fit on the same axes.
    pub loglog_curvature: f64,
}

impl FitResult {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Ordinary least squares `y = slope·x + intercept`.
pub fn fit_linear(xs: &[f64], ys: &[f64]) -> Result<FitResult> {
    if xs.len() != ys.len() {
        return invalid("xs and ys differ in length");
    }
    let n = xs.len();
    if n < 2 {
        return invalid("a line fit needs at least 2 points");
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return invalid("fit inputs must be finite");
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) || sxx <= 1e-28 * xs.iter().map(|x| x * x).sum::<f64>() {
        return invalid("xs have zero variance");
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r2 = if syy > 0.0 { (1.0 - ssr / syy).clamp(0.0, 1.0) } else { 1.0 };
    let stderr = if n > 2 { (ssr / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    let loglog_curvature = if n >= 3 { quadratic_coefficient(xs, ys, mx)? } else { 0.0 };
    Ok(FitResult {
        slope,
        intercept,
        r2,
        stderr,
        loglog_curvature,
    })
}

/// Power law `y = e^{intercept} · x^{slope}` fitted on `(ln x, ln y)`.
/// `r2` is on the log scale.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<FitResult> {
    if xs.len() < 3 {
        return invalid("a power-law fit needs at least 3 points");
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return invalid("power-law fits need strictly positive, finite values");
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    fit_linear(&lx, &ly)
}

/// `c` in `y ≈ a + b·u + c·u²` with `u = x − center`.
fn quadratic_coefficient(xs: &[f64], ys: &[f64], center: f64) -> Result<f64> {
    let mut a = Matrix3::<f64>::zeros();
    let mut b = Vector3::<f64>::zeros();
    for (&x, &y) in xs.iter().zip(ys) {
        let u = x - center;
        let row = Vector3::new(1.0, u, u * u);
        a += row * row.transpose();
        b += row * y;
    }
    // Two distinct x values leave the quadratic term undetermined.
    let distinct = {
        let mut v: Vec<f64> = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    if distinct < 3 {
        return Ok(0.0);
    }
    let sol = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::FitFailure("singular quadratic design".into()))?;
    Ok(sol[2])
}

/// Pearson correlation of two equal-length series; 0 when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return invalid("pearson needs two equal-length series of >= 2 values");
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > 0.0) || n == 0 {
        return invalid("log_space needs positive bounds and n >= 1");
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn exact_power_law() {
        let xs = log_space(1e-3, 1.0, 10).unwrap();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        let f = fit_power_law(&xs, &ys).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-11);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(f.loglog_curvature.abs() < 1e-10);
    }

    #[test]
    fn noisy_power_law() {
        let mut rng = Rng::new(2024);
        let xs = log_space(1e-4, 0.3, 12).unwrap();
        for _ in 0..20 {
            let ys: Vec<f64> = xs.iter().map(|x| x.powf(1.16) * (1.0 + 0.05 * rng.normal())).collect();
            let f = fit_power_law(&xs, &ys).unwrap();
            assert!((1.05..=1.27).contains(&f.slope), "{}", f.slope);
        }
    }

    #[test]
    fn power_law_rejects_non_positive() {
        assert!(matches!(fit_power_law(&[1.0, 2.0, 3.0], &[1.0, 0.0, 2.0]), Err(Error::InvalidInput(_))));
        assert!(fit_power_law(&[-1.0, 2.0, 3.0], &[1.0, 1.0, 2.0]).is_err());
        assert!(fit_power_law(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn scale_equivariance() {
        let mut rng = Rng::new(9);
        let xs = log_space(1e-3, 1.0, 8).unwrap();
        let ys: Vec<f64> = xs.iter().map(|x| x.powf(1.3) * (1.0 + 0.1 * rng.uniform())).collect();
        let base = fit_power_law(&xs, &ys).unwrap();
        for s in [1e-3, 7.0, 1e4] {
            let scaled: Vec<f64> = xs.iter().map(|x| x * s).collect();
            let f = fit_power_law(&scaled, &ys).unwrap();
            assert!((f.slope - base.slope).abs() < 1e-12);
            assert!((f.intercept - (base.intercept - base.slope * s.ln())).abs() < 1e-10);
        }
    }

    #[test]
    fn curvature_grows_with_distortion() {
        let xs = log_space(1e-4, 1.0, 12).unwrap();
        let mut prev = -1.0;
        for k in [0.0, 0.01, 0.05, 0.1, 0.3] {
            let ys: Vec<f64> = xs.iter().map(|x: &f64| (1.2 * x.ln() + k * x.ln().powi(2)).exp()).collect();
            let c = fit_power_law(&xs, &ys).unwrap().loglog_curvature;
            if k == 0.0 {
                assert!(c.abs() < 1e-10);
            }
            assert!(c > prev);
            prev = c;
        }
    }

    #[test]
    fn linear_cases() {
        let xs = [0.0, 1.0, 2.0, 5.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let f = fit_linear(&xs, &ys).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-14);
        assert!((f.intercept - 1.0).abs() < 1e-14);
        assert_eq!(f.r2, 1.0);

        let two = fit_linear(&[1.0, 3.0], &[4.0, -2.0]).unwrap();
        assert!((two.slope + 3.0).abs() < 1e-14);
        assert_eq!(two.r2, 1.0);
        assert_eq!(two.stderr, 0.0);

        assert!(matches!(fit_linear(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn stderr_and_r2_bounds() {
        let mut rng = Rng::new(4);
        let xs: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x + rng.normal()).collect();
        let f = fit_linear(&xs, &ys).unwrap();
        assert!(f.stderr > 0.0 && (0.0..=1.0).contains(&f.r2));
        assert!((f.slope - 0.5).abs() < 4.0 * f.stderr);
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn log_space_endpoints() {
        let g = log_space(1e-4, 0.3, 12).unwrap();
        assert_eq!(g.len(), 12);
        assert_eq!(g[0], 1e-4);
        assert_eq!(g[11], 0.3);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }
}
