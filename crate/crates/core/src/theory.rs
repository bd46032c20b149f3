//! Closed-form predictions for the gradient imbalance sum: the spectral
//! crossover formula, first-principles mode coefficients, the scalar
//! linear-mode oracle, and empirical per-mode coefficients extracted from
//! training runs.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{data_cov_spectrum, DataSpectrum, Dataset};
use crate::error::{invalid, Error, Result};
use crate::fitting::pearson;
use crate::model::{backward, forward, Activation, MlpParams};
use crate::numerics::{sym_eig, Matrix};
use crate::spectral::gauss_newton;
use crate::training::{loss_and_dlogits, train_observed, LossKind, TrainConfig, TrainTrace};

/// Below this `ηλ` the geometric sum is evaluated in its small-argument form.
pub const SMALL_ETA_LAMBDA: f64 = 1e-8;
/// `|2 − ηλ|` below this is treated as the marginal-stability limit.
pub const MARGINAL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralModel {
    pub lambdas: Vec<f64>,
    pub coeffs: Vec<f64>,
    pub eta: f64,
    pub steps: usize,
}

impl SpectralModel {
    pub fn new(lambdas: Vec<f64>, coeffs: Vec<f64>, eta: f64, steps: usize) -> Result<Self> {
        let m = Self {
            lambdas,
            coeffs,
            eta,
            steps,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.len() != self.coeffs.len() {
            return invalid("lambdas and coeffs differ in length");
        }
        if self.lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return invalid("mode eigenvalues must be positive and finite");
        }
        if self.coeffs.iter().any(|c| !c.is_finite()) {
            return invalid("mode coefficients must be finite");
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return invalid("eta must be positive");
        }
        if self.steps == 0 {
            return invalid("steps must be >= 1");
        }
        Ok(())
    }

    pub fn with_eta(&self, eta: f64) -> Self {
        Self { eta, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// `ηλT ≥ 3`: the mode has relaxed within the horizon.
    Converged,
    /// `ηλT ≤ 1/3`: the mode has barely moved.
    Unconverged,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModePrediction {
    pub contribution: f64,
    /// `1 / (λ_k T)`.
    pub eta_star: f64,
    pub regime: Regime,
    /// `ηλ_k ≥ 2`: the mode does not contract and is left out of the total.
    pub unstable: bool,
    /// `ηλ_k` within [`MARGINAL_FLOOR`] of 2.
    pub marginal: bool,
}

/// `Σ_{t=0}^{T−1} (1 − x)^{2t}` for `x = ηλ > 0`, plus a marginal flag.
pub fn geometric_mode_sum(x: f64, steps: usize) -> (f64, bool) {
    let t = steps as f64;
    let u = x * (2.0 - x); // 1 − ρ²
    if (2.0 - x).abs() < MARGINAL_FLOOR {
        return (t, true);
    }
    if x < SMALL_ETA_LAMBDA && t * u < 1e-4 {
        // T − T(T−1)u/2 + T(T−1)(T−2)u²/6 − …, to second order.
        let (t1, t2) = (t - 1.0, t - 2.0);
        return (t * (1.0 - t1 * u / 2.0 * (1.0 - t2 * u / 3.0)), false);
    }
    // (1 − ρ^{2T}) / (1 − ρ²) with ρ² = 1 − u, via expm1/log1p; ρ = 0
    // gives ln(0) = −∞ and the sum collapses to 1.
    (-(t * (-u).ln_1p()).exp_m1() / u, false)
}

/// Evaluates `G(η) = Σ_k c_k (1 − ρ_k^{2T}) / (ηλ_k(2 − ηλ_k))`.
///
/// Modes with `ηλ_k ≥ 2` are flagged and excluded from the total.
pub fn crossover_sum(m: &SpectralModel) -> Result<(f64, Vec<ModePrediction>)> {
    m.validate()?;
    let t = m.steps as f64;
    let mut total = 0.0;
    let modes = m
        .lambdas
        .iter()
        .zip(&m.coeffs)
        .map(|(&lam, &c)| {
            let x = m.eta * lam;
            let unstable = x >= 2.0;
            let (s, marginal) = geometric_mode_sum(x, m.steps);
            let contribution = c * s;
            if !unstable {
                total += contribution;
            }
            let xt = x * t;
            let regime = if xt >= 3.0 {
                Regime::Converged
            } else if xt <= 1.0 / 3.0 {
                Regime::Unconverged
            } else {
                Regime::Mixed
            };
            ModePrediction {
                contribution,
                eta_star: 1.0 / (lam * t),
                regime,
                unstable,
                marginal,
            }
        })
        .collect();
    Ok((total, modes))
}

/// Relative step in `ln η` for the centred difference.
const LOG_STEP: f64 = 1e-4;

/// Local drift exponent `β(η) = 2 + d ln G / d ln η` at each grid point.
pub fn local_exponent(m: &SpectralModel, eta_grid: &[f64]) -> Result<Vec<f64>> {
    if eta_grid.len() < 3 {
        return invalid("local_exponent needs at least 3 grid points");
    }
    if eta_grid.iter().any(|&e| !(e > 0.0)) {
        return invalid("eta grid must be positive");
    }
    eta_grid
        .iter()
        .map(|&eta| {
            let up = crossover_sum(&m.with_eta(eta * LOG_STEP.exp()))?.0;
            let dn = crossover_sum(&m.with_eta(eta * (-LOG_STEP).exp()))?.0;
            if !(up > 0.0 && dn > 0.0) {
                return Err(Error::Degenerate("G(η) is not positive on the grid".into()));
            }
            Ok(2.0 + (up.ln() - dn.ln()) / (2.0 * LOG_STEP))
        })
        .collect()
}

/// `c_k ∝ e_k(0)² λ_{x,k}²`, normalized to unit sum.
pub fn predict_ck(e0: &[f64], lambda_x: &[f64]) -> Result<Vec<f64>> {
    if e0.len() != lambda_x.len() {
        return invalid("e0 and lambda_x differ in length");
    }
    let raw: Vec<f64> = e0.iter().zip(lambda_x).map(|(e, l)| e * e * l * l).collect();
    normalize(&raw)
}

fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = v.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Degenerate("coefficients sum to zero".into()));
    }
    Ok(v.iter().map(|x| x / s).collect())
}

fn require_two_layer(p: &MlpParams) -> Result<()> {
    if p.depth() != 2 {
        return Err(Error::Unsupported(format!(
            "mode decomposition covers 2-layer networks only (depth {})",
            p.depth()
        )));
    }
    if p.has_bias() {
        return Err(Error::Unsupported("mode decomposition needs a bias-free network".into()));
    }
    Ok(())
}

/// Output-space residual correlation `R = (f − Y)ᵀ X / n` (`C × d`).
/// `R = (∂L/∂f)ᵀX`, i.e. `(f − Y)ᵀX/n` for MSE and `(p − Y)ᵀX/n` for CE.
fn residual_correlation(p: &MlpParams, ds: &Dataset, act: Activation, loss: LossKind) -> Result<Matrix> {
    let f = forward(p, &ds.x, act)?.logits;
    let (_, dlogits) = loss_and_dlogits(&f, ds, loss)?;
    dlogits.t_matmul(&ds.x)
}

fn basis_vector(spec: &DataSpectrum, k: usize) -> Vec<f64> {
    spec.basis.col(k)
}

/// Per-mode initial prediction error `e_k(0) = ‖R u_k‖ / λ_{x,k}` (0 for
/// null data directions).
pub fn initial_mode_errors(p: &MlpParams, ds: &Dataset, act: Activation, spec: &DataSpectrum) -> Result<Vec<f64>> {
    initial_mode_errors_for(p, ds, act, LossKind::Mse, spec)
}

/// [`initial_mode_errors`] with the residual taken from `loss`'s logit gradient.
pub fn initial_mode_errors_for(
    p: &MlpParams,
    ds: &Dataset,
    act: Activation,
    loss: LossKind,
    spec: &DataSpectrum,
) -> Result<Vec<f64>> {
    let r = residual_correlation(p, ds, act, loss)?;
    let floor = spec.eigenvalues.first().copied().unwrap_or(0.0) * 1e-12;
    Ok((0..spec.eigenvalues.len())
        .map(|k| {
            let lx = spec.eigenvalues[k];
            if lx <= floor {
                0.0
            } else {
                crate::numerics::norm(&r.matvec(&basis_vector(spec, k)).expect("d columns")) / lx
            }
        })
        .collect())
}

/// Predicted unit-sum `c_k` at the initial parameters.
pub fn predicted_ck(p0: &MlpParams, ds: &Dataset, act: Activation, spec: &DataSpectrum) -> Result<Vec<f64>> {
    predict_ck(&initial_mode_errors(p0, ds, act, spec)?, &spec.eigenvalues)
}

/// Predicted unit-sum `c_k` for either loss.
pub fn predicted_ck_for(p0: &MlpParams, ds: &Dataset, act: Activation, loss: LossKind, spec: &DataSpectrum) -> Result<Vec<f64>> {
    predict_ck(&initial_mode_errors_for(p0, ds, act, loss, spec)?, &spec.eigenvalues)
}

/// Error trajectory of one linear mode under GD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTrajectory {
    pub errors: Vec<f64>,
    pub lambda: f64,
    pub rho: f64,
    /// `|ρ| ≥ 1`.
    pub expanding: bool,
}

/// `e(t) = e(0)ρ^t` with `e(0) = σ0² − σ*`, `ρ = 1 − ηλ`, `λ = 2λ_x σ0²`.
pub fn linear_mode_oracle(sigma0: f64, sigma_star: f64, lambda_x: f64, eta: f64, steps: usize) -> ModeTrajectory {
    let lambda = 2.0 * lambda_x * sigma0 * sigma0;
    let rho = 1.0 - eta * lambda;
    let e0 = sigma0 * sigma0 - sigma_star;
    let mut errors = Vec::with_capacity(steps + 1);
    let mut e = e0;
    for _ in 0..=steps {
        errors.push(e);
        e *= rho;
    }
    ModeTrajectory {
        errors,
        lambda,
        rho,
        expanding: rho.abs() >= 1.0,
    }
}

/// Per-mode Hessian eigenvalues at initialization, ordered like the data
/// modes (descending `λ_x`).
///
/// Linear 2-layer nets use `λ_k = λ_{x,k}(‖W₁u_k‖² + ‖W₂ᵀo_k‖²)`, with
/// `o_k` the output direction of the mode's initial error; for balanced
/// layers this is `2λ_{x,k}σ_{k,0}²`. Other networks use the top-`d`
/// Gauss–Newton eigenvalues.
pub fn effective_spectrum(p0: &MlpParams, ds: &Dataset, act: Activation, loss: LossKind) -> Result<Vec<f64>> {
    let spec = data_cov_spectrum(ds)?;
    if act == Activation::Linear && loss == LossKind::Mse && p0.depth() == 2 && !p0.has_bias() {
        return linear_mode_spectrum(p0, ds, &spec);
    }
    let h = gauss_newton(p0, ds, act, loss)?;
    let mut eig = sym_eig(&h)?.eigenvalues;
    eig.truncate(ds.d);
    Ok(eig)
}

fn linear_mode_spectrum(p0: &MlpParams, ds: &Dataset, spec: &DataSpectrum) -> Result<Vec<f64>> {
    let r = residual_correlation(p0, ds, Activation::Linear, LossKind::Mse)?;
    let (w1, w2) = (&p0.weights[0], &p0.weights[1]);
    let w2w2t = w2.matmul_t(w2)?;
    (0..ds.d)
        .map(|k| {
            let u = basis_vector(spec, k);
            let a = crate::numerics::norm(&w1.matvec(&u)?).powi(2);
            let o = r.matvec(&u)?;
            let on = crate::numerics::norm(&o);
            let b = if on > 0.0 {
                let o: Vec<f64> = o.iter().map(|v| v / on).collect();
                crate::numerics::dot(&o, &w2w2t.matvec(&o)?)
            } else {
                w2w2t.trace() / ds.c as f64
            };
            Ok(spec.eigenvalues[k] * (a + b))
        })
        .collect()
}

/// Per-mode split `δ(t) = Σ_k δ_k(t)` of the gradient imbalance of a
/// 2-layer piecewise-linear network at `p`.
///
/// Layer 1: `‖g₁u_k‖²`. Layer 2: `⟨g₂^{(k)}, g₂⟩`, where `g₂^{(k)}` is the
/// output-layer gradient produced by the hidden pre-activation component
/// `X u_k u_kᵀ W₁ᵀ` passed through the same activation pattern.
pub fn mode_imbalance(p: &MlpParams, ds: &Dataset, act: Activation, loss: LossKind, spec: &DataSpectrum) -> Result<Vec<f64>> {
    require_two_layer(p)?;
    let cache = forward(p, &ds.x, act)?;
    let (_, dlogits) = loss_and_dlogits(&cache.logits, ds, loss)?;
    let g = backward(p, &cache, &dlogits, act)?;
    let (g1, g2) = (&g.weights[0], &g.weights[1]);
    // Q = D ⊙ (dlogits · g₂); ⟨g₂^{(k)}, g₂⟩ = u_kᵀ (Xᵀ Q W₁) u_k.
    let q = dlogits
        .matmul(g2)?
        .zip_with(&cache.preacts[0], |v, z| v * act.derivative(z))?;
    let k2 = ds.x.t_matmul(&q)?.matmul(&p.weights[0])?;
    let k1 = g1.t_matmul(g1)?;
    Ok((0..spec.eigenvalues.len())
        .map(|k| {
            let u = basis_vector(spec, k);
            let quad = |m: &Matrix| crate::numerics::dot(&u, &m.matvec(&u).expect("d × d"));
            quad(&k2) - quad(&k1)
        })
        .collect())
}

/// Empirical per-mode coefficients from a replayed GD run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmpiricalModes {
    /// `Σ_t δ_k(t)`.
    pub mode_sums: Vec<f64>,
    /// `mode_sums[k]` divided by `Σ_{t<T} ρ_k^{2t}`, unit-sum normalized.
    pub ck: Vec<f64>,
}

/// Runs `cfg` from `p0` and extracts `ĉ_k` using the supplied per-mode
/// eigenvalues for the geometric normalization.
pub fn empirical_ck(
    p0: MlpParams,
    cfg: &TrainConfig,
    ds: &Dataset,
    spec: &DataSpectrum,
    lambdas: &[f64],
) -> Result<(EmpiricalModes, TrainTrace)> {
    require_two_layer(&p0)?;
    if lambdas.len() != spec.eigenvalues.len() {
        return invalid("need one eigenvalue per data mode");
    }
    let mut sums = vec![0.0; lambdas.len()];
    let t_max = cfg.steps;
    let trace = train_observed(p0, cfg, ds, &mut |t, p| {
        if t < t_max {
            for (acc, v) in sums.iter_mut().zip(mode_imbalance(p, ds, cfg.activation, cfg.loss, spec)?) {
                *acc += v;
            }
        }
        Ok(())
    })?;
    let steps = trace.steps();
    let raw: Vec<f64> = sums
        .iter()
        .zip(lambdas)
        .map(|(&s, &lam)| {
            let x = cfg.eta * lam;
            let norm = if x < 2.0 { geometric_mode_sum(x, steps).0 } else { f64::NAN };
            if norm.is_finite() && norm > 0.0 {
                (s / norm).max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    let ck = normalize(&raw)?;
    Ok((
        EmpiricalModes {
            mode_sums: sums,
            ck,
        },
        trace,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkComparison {
    pub predicted: Vec<f64>,
    pub empirical: Vec<f64>,
    /// Pearson correlation on unit-sum normalized raw values.
    pub r: f64,
}

pub fn compare_ck(predicted: &[f64], empirical: &[f64]) -> Result<CkComparison> {
    let predicted = normalize(predicted)?;
    let empirical = normalize(empirical)?;
    let r = pearson(&predicted, &empirical)?;
    Ok(CkComparison {
        predicted,
        empirical,
        r,
    })
}

/// Least-squares scalar `s` minimizing `Σ (s·pred − meas)²`.
pub fn fit_scale(predicted: &[f64], measured: &[f64]) -> Result<f64> {
    if predicted.len() != measured.len() || predicted.is_empty() {
        return invalid("fit_scale needs equal, non-empty series");
    }
    let pp: f64 = predicted.iter().map(|p| p * p).sum();
    if !(pp > 0.0) {
        return Err(Error::Degenerate("predicted series is zero".into()));
    }
    Ok(predicted.iter().zip(measured).map(|(p, m)| p * m).sum::<f64>() / pp)
}

/// Writes `mode,lambda,c_pred,c_emp,contribution` rows.
pub fn write_mode_table<W: Write>(
    mut w: W,
    lambdas: &[f64],
    predicted: &[f64],
    empirical: &[f64],
    modes: &[ModePrediction],
) -> Result<()> {
    let n = lambdas.len();
    if predicted.len() != n || empirical.len() != n || modes.len() != n {
        return invalid("mode table columns differ in length");
    }
    writeln!(w, "mode,lambda,c_pred,c_emp,contribution")?;
    for k in 0..n {
        writeln!(
            w,
            "{k},{:.10e},{:.10e},{:.10e},{:.10e}",
            lambdas[k], predicted[k], empirical[k], modes[k].contribution
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_mixture;
    use crate::model::init_kaiming_balanced;
    use crate::numerics::Rng;

    fn brute_force(m: &SpectralModel) -> f64 {
        m.lambdas
            .iter()
            .zip(&m.coeffs)
            .map(|(&l, &c)| {
                let rho2 = (1.0 - m.eta * l).powi(2);
                let mut acc = 0.0;
                let mut term = 1.0;
                for _ in 0..m.steps {
                    acc += term;
                    term *= rho2;
                }
                c * acc
            })
            .sum()
    }

    #[test]
    fn rho_zero_and_single_step() {
        let m = SpectralModel::new(vec![2.0, 0.5], vec![3.0, 1.5], 0.5, 17).unwrap();
        let (_, modes) = crossover_sum(&m).unwrap();
        assert_eq!(modes[0].contribution, 3.0);

        let one = SpectralModel::new(vec![0.3, 4.0, 19.0], vec![1.0, 2.0, 0.25], 0.1, 1).unwrap();
        let (total, _) = crossover_sum(&one).unwrap();
        assert!((total - 3.25).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force_randomized() {
        let mut rng = Rng::new(31);
        for _ in 0..300 {
            let k = 1 + rng.below(6);
            let eta = 10f64.powf(-4.0 + 3.0 * rng.uniform());
            let lambdas: Vec<f64> = (0..k).map(|_| rng.uniform().max(1e-6) * 1.99 / eta).collect();
            let coeffs: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
            let m = SpectralModel::new(lambdas, coeffs, eta, 1 + rng.below(1500)).unwrap();
            let (total, _) = crossover_sum(&m).unwrap();
            let bf = brute_force(&m);
            assert!((total - bf).abs() <= 1e-12 * bf, "{total} vs {bf}");
        }
    }

    #[test]
    fn tiny_eta_lambda_uses_stable_branch() {
        let m = SpectralModel::new(vec![1e-3], vec![1.0], 1e-7, 1000).unwrap();
        let (total, _) = crossover_sum(&m).unwrap();
        assert!((total - brute_force(&m)).abs() <= 1e-12 * total);
        assert!((total - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn unstable_modes_are_flagged_and_excluded() {
        let m = SpectralModel::new(vec![1.0, 30.0], vec![1.0, 1.0], 0.1, 50).unwrap();
        let (total, modes) = crossover_sum(&m).unwrap();
        assert!(modes[1].unstable && !modes[0].unstable);
        assert_eq!(total, modes[0].contribution);
        let edge = SpectralModel::new(vec![20.0], vec![1.0], 0.1, 50).unwrap();
        let (_, modes) = crossover_sum(&edge).unwrap();
        assert!(modes[0].marginal && modes[0].unstable);
        assert_eq!(modes[0].contribution, 50.0);
    }

    #[test]
    fn contribution_monotone_below_one_over_lambda() {
        let lam = 3.0;
        let mut prev = f64::INFINITY;
        for i in 1..=200 {
            let eta = i as f64 / 200.0 / lam;
            let m = SpectralModel::new(vec![lam], vec![1.0], eta, 40).unwrap();
            let c = crossover_sum(&m).unwrap().1[0].contribution;
            assert!(c <= prev + 1e-12);
            prev = c;
        }
    }

    #[test]
    fn local_exponent_asymptotes_and_crossover() {
        let lam = 2.0;
        let t = 100_000;
        let m = SpectralModel::new(vec![lam], vec![1.0], 1.0, t).unwrap();
        let eta_star = 1.0 / (lam * t as f64);

        let deep = local_exponent(&m, &[1e-3, 2e-3, 5e-3]).unwrap();
        assert!(deep.iter().all(|b| (b - 1.0).abs() < 0.05), "{deep:?}");
        let shallow = local_exponent(&m, &[1e-10, 1e-9, 1e-8]).unwrap();
        assert!(shallow.iter().all(|b| (b - 2.0).abs() < 0.05), "{shallow:?}");

        let grid = crate::fitting::log_space(eta_star / 100.0, eta_star * 100.0, 200).unwrap();
        let beta = local_exponent(&m, &grid).unwrap();
        let idx = beta.iter().position(|&b| b < 1.5).unwrap();
        let ratio = grid[idx] / eta_star;
        assert!((1.0 / 3.0..=3.0).contains(&ratio), "crossed at {ratio}·η*");
        assert!(local_exponent(&m, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn predict_ck_cases() {
        let c = predict_ck(&[1.0, 0.0, 2.0], &[1.0, 5.0, 0.5]).unwrap();
        assert_eq!(c[1], 0.0);
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let c3 = predict_ck(&[3.0, 0.0, 6.0], &[1.0, 5.0, 0.5]).unwrap();
        for (a, b) in c.iter().zip(&c3) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(predict_ck(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Degenerate(_))));
        assert!(predict_ck(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn oracle_trivial_cases() {
        let frozen = linear_mode_oracle(1.0, 1.5, 0.7, 0.0, 10);
        assert!(frozen.errors.iter().all(|&e| e == -0.5));
        let one = linear_mode_oracle(0.9, 1.2, 1.3, 0.05, 1);
        assert!((one.errors[1] - one.errors[0] * (1.0 - 0.05 * one.lambda)).abs() < 1e-15);
        assert!(linear_mode_oracle(1.0, 0.0, 1.0, 1.5, 3).expanding);
    }

    #[test]
    fn oracle_tracks_scalar_two_layer_gd() {
        // L(σ₁, σ₂) = ½ λ_x (σ₁σ₂ − σ*)², balanced start σ₁ = σ₂ = σ₀.
        for &(sigma0, sigma_star, lambda_x) in &[(1.0, 1.01, 1.0), (0.8, 0.6, 2.0), (1.2, 1.5, 0.5)] {
            let lam = 2.0 * lambda_x * sigma0 * sigma0;
            let eta = 0.1 / lam;
            let oracle = linear_mode_oracle(sigma0, sigma_star, lambda_x, eta, 100);
            let (mut s1, mut s2) = (sigma0, sigma0);
            let e0 = oracle.errors[0].abs();
            for t in 0..=100 {
                let e = s1 * s2 - sigma_star;
                assert!((e - oracle.errors[t]).abs() <= 0.05 * e0, "t={t}: {e} vs {}", oracle.errors[t]);
                let (g1, g2) = (lambda_x * e * s2, lambda_x * e * s1);
                s1 -= eta * g1;
                s2 -= eta * g2;
            }
        }
    }

    #[test]
    fn effective_spectrum_linear_identity_covariance() {
        // rows ±2e_k give XᵀX/n = I exactly.
        let d = 4;
        let n = 2 * d;
        let x = Matrix::from_fn(n, d, |i, j| {
            if i % d == j {
                if i < d { 1.0 } else { -1.0 }
            } else {
                0.0
            }
        });
        let ds = Dataset::from_parts(x.scale(2.0), (0..n).map(|i| i % 2).collect(), 2).unwrap();
        let spec = data_cov_spectrum(&ds).unwrap();
        assert!(spec.eigenvalues.iter().all(|&l| (l - 1.0).abs() < 1e-14));
        // ‖W₁u‖² = s for every u and W₂W₂ᵀ = s·I, so σ₀² = s in every mode.
        let s = 1.7f64;
        let w1 = Matrix::identity(d).scale(s.sqrt());
        let w2 = Matrix::from_fn(2, d, |r, c| if r == c { s.sqrt() } else { 0.0 });
        let p = MlpParams::new(vec![w1, w2], None).unwrap();
        let lam = effective_spectrum(&p, &ds, Activation::Linear, LossKind::Mse).unwrap();
        assert_eq!(lam.len(), d);
        for l in &lam {
            assert!((l - 2.0 * s).abs() < 1e-12, "{lam:?}");
        }
    }

    #[test]
    fn relu_effective_spectrum_is_descending_and_positive() {
        let ds = gen_gaussian_mixture(40, 5, 3, 2.0, 3).unwrap();
        let p = init_kaiming_balanced(&[5, 12, 3], 1, false).unwrap();
        let lam = effective_spectrum(&p, &ds, Activation::Relu, LossKind::Mse).unwrap();
        assert_eq!(lam.len(), 5);
        assert!(lam.iter().all(|&l| l > 0.0));
        assert!(lam.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn mode_imbalance_sums_to_total() {
        let ds = gen_gaussian_mixture(50, 6, 3, 2.0, 11).unwrap();
        let spec = data_cov_spectrum(&ds).unwrap();
        for act in [Activation::Linear, Activation::Relu, Activation::Leaky(0.2)] {
            let p = init_kaiming_balanced(&[6, 10, 3], 4, false).unwrap();
            let parts = mode_imbalance(&p, &ds, act, LossKind::Mse, &spec).unwrap();
            let (_, g) = crate::training::loss_and_grads(&p, &ds, act, LossKind::Mse).unwrap();
            let gsq = g.frobenius_sq();
            let total = gsq[1] - gsq[0];
            let sum: f64 = parts.iter().sum();
            assert!((sum - total).abs() <= 1e-10 * (gsq[0] + gsq[1]), "{act:?}");
        }
    }

    #[test]
    fn null_data_mode_has_zero_coefficients() {
        let mut ds = gen_gaussian_mixture(30, 4, 3, 2.0, 5).unwrap();
        for i in 0..ds.n {
            ds.x[(i, 3)] = 0.0;
        }
        let spec = data_cov_spectrum(&ds).unwrap();
        let p0 = init_kaiming_balanced(&[4, 8, 3], 2, false).unwrap();
        let e0 = initial_mode_errors(&p0, &ds, Activation::Linear, &spec).unwrap();
        assert_eq!(e0[3], 0.0);
        let lam = effective_spectrum(&p0, &ds, Activation::Linear, LossKind::Mse).unwrap();
        let cfg = TrainConfig::new(vec![4, 8, 3], Activation::Linear, LossKind::Mse, 0.01, 50, 2);
        let (modes, _) = empirical_ck(p0, &cfg, &ds, &spec, &lam).unwrap();
        assert!(modes.ck[3].abs() < 1e-12);
    }

    #[test]
    fn empirical_ck_rejects_deep_nets() {
        let ds = gen_gaussian_mixture(30, 4, 3, 2.0, 5).unwrap();
        let spec = data_cov_spectrum(&ds).unwrap();
        let p0 = init_kaiming_balanced(&[4, 8, 8, 3], 2, false).unwrap();
        let cfg = TrainConfig::new(vec![4, 8, 8, 3], Activation::Relu, LossKind::Mse, 0.01, 5, 2);
        assert!(matches!(empirical_ck(p0, &cfg, &ds, &spec, &[1.0; 4]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn fit_scale_and_comparison() {
        assert!((fit_scale(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 2.0).abs() < 1e-15);
        let c = compare_ck(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.1]).unwrap();
        assert!(c.r > 0.99 && c.r <= 1.0);
        let mut buf = Vec::new();
        let m = SpectralModel::new(vec![1.0, 2.0], vec![0.5, 0.5], 0.1, 10).unwrap();
        let (_, modes) = crossover_sum(&m).unwrap();
        write_mode_table(&mut buf, &m.lambdas, &[0.5, 0.5], &[0.4, 0.6], &modes).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("mode,lambda,c_pred,c_emp,contribution\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
