//! Gauss–Newton curvature for MSE and cross-entropy: logit Jacobians,
//! softmax curvature blocks, dense and matrix-free `λ_max`, the compression
//! bound, compression-timescale fitting and activation switch statistics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::fitting::fit_linear;
use crate::model::{backward, forward, Activation, ForwardCache, MlpParams};
use crate::numerics::{subspace_iteration, sym_eig, Matrix, Rng};
use crate::training::{softmax_rows, train_observed, LossKind, RunStatus, TrainConfig, TrainTrace};

/// Largest `nC × P` Jacobian that will be materialized.
pub const MAX_JACOBIAN_ENTRIES: usize = 50_000_000;
/// Relative tolerance on the matrix-free `λ_max` estimate.
pub const HVP_TOL: f64 = 1e-9;
pub const HVP_MAX_ITER: usize = 5_000;
/// Block size for subspace iteration; covers the `C − 1`-fold clusters the
/// softmax blocks produce for the default class counts.
pub const HVP_BLOCK: usize = 8;
/// Slack allowed in the compression inequality.
pub const BOUND_SLACK: f64 = 1e-8;

/// `S = diag(p) − p pᵀ` for one probability vector.
#[derive(Debug, Clone)]
pub struct SoftmaxBlock {
    pub s: Matrix,
    pub lambda_max: f64,
}

pub fn softmax_block(p: &[f64]) -> Result<SoftmaxBlock> {
    if p.is_empty() {
        return invalid("empty probability vector");
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return invalid("probabilities must be finite and non-negative");
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return invalid(format!("probabilities sum to {total}, not 1"));
    }
    let c = p.len();
    let s = Matrix::from_fn(c, c, |a, b| if a == b { p[a] - p[a] * p[a] } else { -p[a] * p[b] });
    let lambda_max = sym_eig(&s)?.lambda_max().max(0.0);
    Ok(SoftmaxBlock { s, lambda_max })
}

fn require_bias_free(p: &MlpParams) -> Result<()> {
    if p.has_bias() {
        return Err(Error::Unsupported(
            "curvature routines cover bias-free networks only".into(),
        ));
    }
    Ok(())
}

/// Exact logit Jacobian, row `i·C + k` = `∂f_k(x_i)/∂θ` over all weights
/// in [`MlpParams::to_flat`] order.
pub fn logit_jacobian(p: &MlpParams, ds: &Dataset, act: Activation) -> Result<Matrix> {
    require_bias_free(p)?;
    let params = p.num_weight_params();
    let rows = ds.n * ds.c;
    if rows.saturating_mul(params) > MAX_JACOBIAN_ENTRIES {
        return Err(Error::SizeLimit(format!(
            "Jacobian would have {rows}x{params} entries; use the matrix-free path"
        )));
    }
    let mut jac = Matrix::zeros(rows, params);
    for i in 0..ds.n {
        let xi = Matrix::from_vec(1, ds.d, ds.x.row(i).to_vec())?;
        let cache = forward(p, &xi, act)?;
        for k in 0..ds.c {
            let mut e = Matrix::zeros(1, ds.c);
            e[(0, k)] = 1.0;
            let g = backward(p, &cache, &e, act)?;
            jac.row_mut(i * ds.c + k).copy_from_slice(&g.to_flat());
        }
    }
    Ok(jac)
}

/// Per-sample curvature blocks in logit space: softmax blocks for CE,
/// identities for MSE.
fn curvature_blocks(p: &MlpParams, ds: &Dataset, act: Activation, loss: LossKind) -> Result<Vec<Matrix>> {
    match loss {
        LossKind::Mse => Ok(vec![Matrix::identity(ds.c); ds.n]),
        LossKind::CrossEntropy => {
            let probs = softmax_rows(&forward(p, &ds.x, act)?.logits);
            (0..ds.n).map(|i| softmax_block(&renormalize(probs.row(i))).map(|b| b.s)).collect()
        }
    }
}

fn renormalize(p: &[f64]) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    p.iter().map(|v| v / s).collect()
}

/// Dense Gauss–Newton matrix `(1/n) Jᵀ S J` (`P × P`).
pub fn gauss_newton(p: &MlpParams, ds: &Dataset, act: Activation, loss: LossKind) -> Result<Matrix> {
    let jac = logit_jacobian(p, ds, act)?;
    let blocks = curvature_blocks(p, ds, act, loss)?;
    let sj = apply_blocks(&jac, &blocks, ds.c)?;
    let mut h = jac.t_matmul(&sj)?.scale(1.0 / ds.n as f64);
    symmetrize(&mut h);
    Ok(h)
}

fn symmetrize(h: &mut Matrix) {
    let n = h.rows();
    for r in 0..n {
        for c in (r + 1)..n {
            let v = 0.5 * (h[(r, c)] + h[(c, r)]);
            h[(r, c)] = v;
            h[(c, r)] = v;
        }
    }
}

/// Row-block product: block `i` of the result is `blocks[i] · jac[i·C..(i+1)·C]`.
fn apply_blocks(jac: &Matrix, blocks: &[Matrix], c: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros(jac.rows(), jac.cols());
    for (i, s) in blocks.iter().enumerate() {
        for a in 0..c {
            let dst = i * c + a;
            for b in 0..c {
                let w = s[(a, b)];
                if w == 0.0 {
                    continue;
                }
                let src = jac.row(i * c + b).to_vec();
                for (o, v) in out.row_mut(dst).iter_mut().zip(&src) {
                    *o += w * v;
                }
            }
        }
    }
    Ok(out)
}

/// Symmetric PSD square root of a small block.
fn psd_sqrt(s: &Matrix) -> Result<Matrix> {
    let e = sym_eig(s)?;
    let n = s.rows();
    let v = &e.eigenvectors;
    Ok(Matrix::from_fn(n, n, |a, b| {
        (0..n)
            .map(|k| v[(a, k)] * e.eigenvalues[k].max(0.0).sqrt() * v[(b, k)])
            .sum()
    }))
}

/// `λ_max((1/n) Bᵀ B)` via whichever Gram form is smaller.
fn gram_lambda_max(b: &Matrix, n: usize) -> Result<f64> {
    let gram = if b.rows() <= b.cols() {
        b.matmul_t(b)?
    } else {
        b.t_matmul(b)?
    };
    let mut g = gram.scale(1.0 / n as f64);
    symmetrize(&mut g);
    Ok(sym_eig(&g)?.lambda_max().max(0.0))
}

/// Dense `λ_max` of the Gauss–Newton matrix, computed from the
/// `S^{1/2} J Jᵀ S^{1/2} / n` kernel when that is the smaller side.
pub fn gn_lambda_max_dense(p: &MlpParams, ds: &Dataset, act: Activation, loss: LossKind) -> Result<f64> {
    let jac = logit_jacobian(p, ds, act)?;
    let blocks = curvature_blocks(p, ds, act, loss)?;
    let roots = blocks.iter().map(psd_sqrt).collect::<Result<Vec<_>>>()?;
    gram_lambda_max(&apply_blocks(&jac, &roots, ds.c)?, ds.n)
}

/// Forward-mode product `J v`, returned as an `n × C` matrix. `v` holds one
/// tangent matrix per weight layer.
fn jvp(p: &MlpParams, cache: &ForwardCache, tangent: &[Matrix], act: Activation) -> Result<Matrix> {
    let depth = p.depth();
    let mut dz = cache.acts[0].matmul_t(&tangent[0])?;
    for l in 1..depth {
        let da = dz.zip_with(&cache.preacts[l - 1], |g, z| g * act.derivative(z))?;
        dz = da.matmul_t(&p.weights[l])?;
        dz.axpy(1.0, &cache.acts[l].matmul_t(&tangent[l])?)?;
    }
    Ok(dz)
}

/// Matrix-free Gauss–Newton operator `v ↦ (1/n) Jᵀ S J v` at fixed parameters.
pub struct GaussNewtonOperator<'a> {
    params: &'a MlpParams,
    cache: ForwardCache,
    probs: Option<Matrix>,
    act: Activation,
    n: usize,
}

impl<'a> GaussNewtonOperator<'a> {
    pub fn new(p: &'a MlpParams, ds: &Dataset, act: Activation, loss: LossKind) -> Result<Self> {
        require_bias_free(p)?;
        let cache = forward(p, &ds.x, act)?;
        let probs = (loss == LossKind::CrossEntropy).then(|| softmax_rows(&cache.logits));
        Ok(Self {
            params: p,
            cache,
            probs,
            act,
            n: ds.n,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.num_weight_params()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let tangent = self.params.with_flat(v)?.weights;
        let mut u = jvp(self.params, &self.cache, &tangent, self.act)?;
        if let Some(probs) = &self.probs {
            for i in 0..u.rows() {
                let p = probs.row(i);
                let row = u.row_mut(i);
                let pw: f64 = p.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                for (r, &pk) in row.iter_mut().zip(p) {
                    *r = pk * (*r - pw);
                }
            }
        }
        let u = u.scale(1.0 / self.n as f64);
        Ok(backward(self.params, &self.cache, &u, self.act)?.to_flat())
    }
}

/// Matrix-free `λ_max` of the Gauss–Newton matrix by power iteration.
pub fn lambda_max_hvp(p: &MlpParams, ds: &Dataset, act: Activation, loss: LossKind, rng: &mut Rng) -> Result<f64> {
    let op = GaussNewtonOperator::new(p, ds, act, loss)?;
    subspace_iteration(
        |v| op.apply(v).expect("tangent shape matches"),
        op.dim(),
        HVP_BLOCK,
        HVP_TOL,
        HVP_MAX_ITER,
        rng,
        None,
    )
    .map(|r| r.value)
}

/// Warm-started `λ_max` tracking along a trajectory.
#[derive(Debug, Clone)]
pub struct LambdaTracker {
    rng: Rng,
    last: Option<Vec<Vec<f64>>>,
}

impl LambdaTracker {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Rng::split(seed, 7),
            last: None,
        }
    }

    pub fn lambda_max(&mut self, p: &MlpParams, ds: &Dataset, act: Activation, loss: LossKind) -> Result<f64> {
        let op = GaussNewtonOperator::new(p, ds, act, loss)?;
        let res = subspace_iteration(
            |v| op.apply(v).expect("tangent shape matches"),
            op.dim(),
            HVP_BLOCK,
            HVP_TOL,
            HVP_MAX_ITER,
            &mut self.rng,
            self.last.as_deref(),
        )?;
        self.last = Some(res.block);
        Ok(res.value)
    }
}

/// One curvature measurement along a CE trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HessianSnapshot {
    pub step: usize,
    pub lambda_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<Vec<f64>>,
    /// `max_i λ_max(S_i)`.
    pub q_margin: f64,
    /// `λ_max((1/n) JᵀJ)`.
    pub jtj_lambda_max: f64,
    /// `max_i q_i(1 − q_i)` from the correct-class probabilities.
    pub correct_class_margin: f64,
    pub q_min: f64,
}

impl HessianSnapshot {
    pub fn bound_rhs(&self) -> f64 {
        self.jtj_lambda_max * self.q_margin
    }

    pub fn bound_holds(&self) -> bool {
        self.lambda_max <= self.bound_rhs() + BOUND_SLACK
    }
}

/// `(λ_max(H_CE), λ_max(JᵀJ/n) · max_i λ_max(S_i))`, both dense.
pub fn compression_bound(p: &MlpParams, ds: &Dataset, act: Activation) -> Result<(f64, f64)> {
    let snap = snapshot(p, ds, act, 0, SnapshotMode::Dense)?;
    Ok((snap.lambda_max, snap.bound_rhs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotMode {
    /// Exact eigendecompositions of the Jacobian Gram kernels.
    Dense,
    /// Power iteration on matrix-free operators.
    MatrixFree,
}

/// CE curvature snapshot at `p`.
pub fn snapshot(p: &MlpParams, ds: &Dataset, act: Activation, step: usize, mode: SnapshotMode) -> Result<HessianSnapshot> {
    let mut trackers = (LambdaTracker::new(ds.seed ^ step as u64), LambdaTracker::new(ds.seed ^ step as u64 ^ 1));
    snapshot_tracked(p, ds, act, step, mode, &mut trackers)
}

/// [`snapshot`] reusing warm-started trackers for the CE and `JᵀJ` operators.
fn snapshot_tracked(
    p: &MlpParams,
    ds: &Dataset,
    act: Activation,
    step: usize,
    mode: SnapshotMode,
    trackers: &mut (LambdaTracker, LambdaTracker),
) -> Result<HessianSnapshot> {
    let probs = softmax_rows(&forward(p, &ds.x, act)?.logits);
    let mut q_margin = 0.0f64;
    let mut cc_margin = 0.0f64;
    let mut q_min = f64::INFINITY;
    for i in 0..ds.n {
        let block = softmax_block(&renormalize(probs.row(i)))?;
        q_margin = q_margin.max(block.lambda_max);
        let q = probs[(i, ds.labels[i])];
        q_min = q_min.min(q);
        cc_margin = cc_margin.max(q * (1.0 - q));
    }
    let (lambda_max, jtj) = match mode {
        SnapshotMode::Dense => (
            gn_lambda_max_dense(p, ds, act, LossKind::CrossEntropy)?,
            gn_lambda_max_dense(p, ds, act, LossKind::Mse)?,
        ),
        SnapshotMode::MatrixFree => (
            trackers.0.lambda_max(p, ds, act, LossKind::CrossEntropy)?,
            trackers.1.lambda_max(p, ds, act, LossKind::Mse)?,
        ),
    };
    Ok(HessianSnapshot {
        step,
        lambda_max,
        spectrum: None,
        q_margin,
        jtj_lambda_max: jtj,
        correct_class_margin: cc_margin,
        q_min,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionProfile {
    pub snapshots: Vec<HessianSnapshot>,
    pub tau: Option<f64>,
    pub fit_r2: Option<f64>,
    pub status: RunStatus,
}

impl CompressionProfile {
    pub fn lambda_series(&self) -> Vec<(usize, f64)> {
        self.snapshots.iter().map(|s| (s.step, s.lambda_max)).collect()
    }

    /// `λ_max(last) / λ_max(first)`.
    pub fn compression_ratio(&self) -> Option<f64> {
        match (self.snapshots.first(), self.snapshots.last()) {
            (Some(a), Some(b)) if a.lambda_max > 0.0 => Some(b.lambda_max / a.lambda_max),
            _ => None,
        }
    }

    pub fn bound_violations(&self) -> usize {
        self.snapshots.iter().filter(|s| !s.bound_holds()).count()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,lambda_max,q_margin,jtj_lambda_max")?;
        for s in &self.snapshots {
            writeln!(w, "{},{:.10e},{:.10e},{:.10e}", s.step, s.lambda_max, s.q_margin, s.jtj_lambda_max)?;
        }
        Ok(())
    }
}

/// Trains a CE run, snapshotting curvature every `stride` steps (including
/// step 0 and, when it falls on the stride, the final step).
pub fn track_compression(cfg: &TrainConfig, ds: &Dataset, stride: usize, mode: SnapshotMode) -> Result<(CompressionProfile, TrainTrace)> {
    if cfg.loss != LossKind::CrossEntropy {
        return invalid("compression tracking needs cross-entropy loss");
    }
    if stride == 0 {
        return invalid("stride must be >= 1");
    }
    let p0 = crate::model::init_kaiming_balanced(&cfg.widths, cfg.seed, cfg.bias)?;
    let mut snaps = Vec::new();
    let act = cfg.activation;
    let mut trackers = (LambdaTracker::new(cfg.seed), LambdaTracker::new(cfg.seed ^ 1));
    let trace = train_observed(p0, cfg, ds, &mut |t, p| {
        if t % stride == 0 {
            snaps.push(snapshot_tracked(p, ds, act, t, mode, &mut trackers)?);
        }
        Ok(())
    })?;
    let mut profile = CompressionProfile {
        snapshots: snaps,
        tau: None,
        fit_r2: None,
        status: trace.status,
    };
    if let Ok((tau, r2)) = estimate_tau(&profile.lambda_series()) {
        profile.tau = Some(tau);
        profile.fit_r2 = Some(r2);
    }
    Ok((profile, trace))
}

/// Exponential decay timescale (in steps) of a `λ_max` series.
///
/// Fits `ln λ` against step over the window that opens when `λ` first drops
/// below 90% of its running maximum and closes once it falls below 5% of
/// that maximum (or at the end of the series).
pub fn estimate_tau(series: &[(usize, f64)]) -> Result<(f64, f64)> {
    if series.len() < 5 {
        return Err(Error::FitFailure(format!("need >= 5 snapshots, got {}", series.len())));
    }
    let mut running_max = f64::NEG_INFINITY;
    let mut start = None;
    let mut end = series.len();
    for (idx, &(_, lam)) in series.iter().enumerate() {
        if !(lam > 0.0) {
            end = idx;
            break;
        }
        if start.is_none() {
            running_max = running_max.max(lam);
            if lam < 0.9 * running_max {
                start = Some(idx);
            }
        } else if lam < 0.05 * running_max {
            end = idx + 1;
            break;
        }
    }
    let start = start.ok_or_else(|| Error::FitFailure("series never decays below 90% of its maximum".into()))?;
    let window = &series[start..end];
    if window.len() < 3 {
        return Err(Error::FitFailure(format!("decay window has {} points", window.len())));
    }
    let xs: Vec<f64> = window.iter().map(|&(t, _)| t as f64).collect();
    let ys: Vec<f64> = window.iter().map(|&(_, l)| l.ln()).collect();
    let fit = fit_linear(&xs, &ys)?;
    if !(fit.slope < 0.0) {
        return Err(Error::FitFailure("λ_max is not decaying".into()));
    }
    Ok((-1.0 / fit.slope, fit.r2))
}

/// Per-neuron and total activation switch rates of a recorded trace.
///
/// Per-neuron rate is the fraction of (step, sample, hidden unit) triples
/// whose pre-activation sign differs from the previous step; total rate is
/// that fraction times the hidden unit count.
pub fn switch_rate(trace: &TrainTrace) -> Result<(f64, f64)> {
    let sw = trace
        .switches
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("trace has no switch records".into()))?;
    if sw.len() < 2 || trace.hidden_units == 0 {
        return Ok((0.0, 0.0));
    }
    let flips: u64 = sw[1..].iter().sum();
    let triples = (sw.len() - 1) as f64 * trace.samples as f64 * trace.hidden_units as f64;
    let per_neuron = flips as f64 / triples;
    Ok((per_neuron, per_neuron * trace.hidden_units as f64))
}

pub const EOS_BAND: f64 = 0.25;
pub const EOS_DWELL: f64 = 0.2;

/// Fraction of samples with `|η·λ_max − 2| < band`.
pub fn eos_fraction(lambdas: &[(usize, f64)], eta: f64, band: f64) -> f64 {
    if lambdas.is_empty() {
        return 0.0;
    }
    let hits = lambdas.iter().filter(|(_, l)| (l * eta - 2.0).abs() < band).count();
    hits as f64 / lambdas.len() as f64
}

pub fn is_at_eos(lambdas: &[(usize, f64)], eta: f64) -> bool {
    eos_fraction(lambdas, eta, EOS_BAND) >= EOS_DWELL
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_mixture;
    use crate::model::init_kaiming_balanced;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn softmax_block_cases() {
        let b = softmax_block(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(b.s.max_abs(), 0.0);
        assert!(b.lambda_max.abs() < 1e-15);

        let c = 5;
        let u = vec![1.0 / c as f64; c];
        let e = sym_eig(&softmax_block(&u).unwrap().s).unwrap();
        for k in 0..c - 1 {
            assert!((e.eigenvalues[k] - 0.2).abs() < 1e-14);
        }
        assert!(e.eigenvalues[c - 1].abs() < 1e-14);

        let half = softmax_block(&[0.5, 0.5]).unwrap();
        assert!((half.lambda_max - 0.5).abs() < 1e-14);

        let p = [0.1, 0.2, 0.7];
        let s = softmax_block(&p).unwrap().s;
        for r in 0..3 {
            assert!(s.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
        assert!(sym_eig(&s).unwrap().eigenvalues.iter().all(|&l| l >= -1e-12));
        assert!(softmax_block(&[0.5, 0.6]).is_err());
        assert!(softmax_block(&[-0.5, 1.5]).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let ds = gen_gaussian_mixture(6, 3, 2, 2.0, 4).unwrap();
        for act in [Activation::Linear, Activation::Relu] {
            let p = init_kaiming_balanced(&[3, 5, 2], 2, false).unwrap();
            let jac = logit_jacobian(&p, &ds, act).unwrap();
            assert_eq!(jac.shape(), (12, p.num_weight_params()));
            let flat = p.to_flat();
            let h = 1e-6;
            for j in 0..flat.len() {
                let mut up = flat.clone();
                up[j] += h;
                let mut dn = flat.clone();
                dn[j] -= h;
                let fu = forward(&p.with_flat(&up).unwrap(), &ds.x, act).unwrap().logits;
                let fd = forward(&p.with_flat(&dn).unwrap(), &ds.x, act).unwrap().logits;
                for i in 0..ds.n {
                    for k in 0..ds.c {
                        let num = (fu[(i, k)] - fd[(i, k)]) / (2.0 * h);
                        assert!((num - jac[(i * ds.c + k, j)]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_sample_has_zero_first_layer_jacobian() {
        let mut x = gen_gaussian_mixture(4, 3, 2, 2.0, 4).unwrap();
        x.x.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        let p = init_kaiming_balanced(&[3, 5, 2], 2, false).unwrap();
        let jac = logit_jacobian(&p, &x, Activation::Relu).unwrap();
        let first = p.weights[0].len();
        for k in 0..2 {
            assert!(jac.row(k)[..first].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn jacobian_size_guard() {
        let ds = gen_gaussian_mixture(2000, 20, 5, 2.0, 4).unwrap();
        let p = init_kaiming_balanced(&[20, 1024, 5], 2, false).unwrap();
        assert!(matches!(logit_jacobian(&p, &ds, Activation::Relu), Err(Error::SizeLimit(_))));
    }

    #[test]
    fn gauss_newton_symmetric_psd_and_consistent() {
        let ds = gen_gaussian_mixture(20, 4, 3, 2.0, 8).unwrap();
        let p = init_kaiming_balanced(&[4, 8, 3], 3, false).unwrap();
        for loss in [LossKind::Mse, LossKind::CrossEntropy] {
            let h = gauss_newton(&p, &ds, Activation::Relu, loss).unwrap();
            assert!(h.asymmetry() <= 1e-12);
            let e = sym_eig(&h).unwrap();
            assert!(e.eigenvalues.iter().all(|&l| l >= -1e-9));
            let dense = gn_lambda_max_dense(&p, &ds, Activation::Relu, loss).unwrap();
            assert!(rel(dense, e.lambda_max()) < 1e-10);
            let mut rng = Rng::new(1);
            let hvp = lambda_max_hvp(&p, &ds, Activation::Relu, loss, &mut rng).unwrap();
            assert!(rel(hvp, e.lambda_max()) < 1e-4, "{loss:?}: {hvp} vs {}", e.lambda_max());
        }
        // MSE: explicit (1/n) JᵀJ
        let jac = logit_jacobian(&p, &ds, Activation::Relu).unwrap();
        let jtj = jac.t_matmul(&jac).unwrap().scale(1.0 / ds.n as f64);
        let mut jtj_sym = jtj.clone();
        symmetrize(&mut jtj_sym);
        let h = gauss_newton(&p, &ds, Activation::Relu, LossKind::Mse).unwrap();
        assert!(rel(sym_eig(&jtj_sym).unwrap().lambda_max(), sym_eig(&h).unwrap().lambda_max()) < 1e-12);
    }

    #[test]
    fn hvp_matches_dense_product() {
        let ds = gen_gaussian_mixture(15, 4, 3, 2.0, 8).unwrap();
        let p = init_kaiming_balanced(&[4, 6, 5, 3], 5, false).unwrap();
        let mut rng = Rng::new(3);
        let v: Vec<f64> = (0..p.num_weight_params()).map(|_| rng.normal()).collect();
        for loss in [LossKind::Mse, LossKind::CrossEntropy] {
            let h = gauss_newton(&p, &ds, Activation::Leaky(0.1), loss).unwrap();
            let dense = h.matvec(&v).unwrap();
            let op = GaussNewtonOperator::new(&p, &ds, Activation::Leaky(0.1), loss).unwrap();
            let mf = op.apply(&v).unwrap();
            for (a, b) in dense.iter().zip(&mf) {
                assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn zero_output_layer_still_has_curvature() {
        let ds = gen_gaussian_mixture(20, 4, 3, 2.0, 8).unwrap();
        let mut p = init_kaiming_balanced(&[4, 8, 3], 3, false).unwrap();
        p.weights[1] = Matrix::zeros(3, 8);
        let dense = gn_lambda_max_dense(&p, &ds, Activation::Relu, LossKind::Mse).unwrap();
        let hvp = lambda_max_hvp(&p, &ds, Activation::Relu, LossKind::Mse, &mut Rng::new(2)).unwrap();
        assert!(dense > 0.0);
        assert!(rel(dense, hvp) < 1e-4);
    }

    #[test]
    fn saturated_softmax_kills_ce_curvature() {
        let ds = gen_gaussian_mixture(20, 4, 3, 2.0, 8).unwrap();
        let p = init_kaiming_balanced(&[4, 8, 3], 3, false).unwrap();
        let h0 = gauss_newton(&p, &ds, Activation::Relu, LossKind::CrossEntropy).unwrap().frobenius();
        // Output layer chosen so logits are 50·onehot-ish: W2 = 50·(Y⁺ fit) is awkward;
        // instead scale the whole network so every logit gap is huge.
        let mut big = p.clone();
        big.weights[1] = big.weights[1].scale(50.0);
        let labels_from_net: Vec<usize> = {
            let f = forward(&big, &ds.x, Activation::Relu).unwrap().logits;
            (0..ds.n)
                .map(|i| (0..3).max_by(|&a, &b| f[(i, a)].total_cmp(&f[(i, b)])).unwrap())
                .collect()
        };
        let relabeled = Dataset::from_parts(ds.x.clone(), labels_from_net, 3).unwrap();
        let probs = softmax_rows(&forward(&big, &ds.x, Activation::Relu).unwrap().logits);
        let min_top = (0..ds.n).map(|i| probs.row(i).iter().cloned().fold(0.0, f64::max)).fold(1.0, f64::min);
        if min_top > 1.0 - 1e-9 {
            let h = gauss_newton(&big, &relabeled, Activation::Relu, LossKind::CrossEntropy).unwrap();
            assert!(h.frobenius() < 1e-6 * h0);
        }
    }

    #[test]
    fn compression_bound_holds_at_init() {
        let ds = gen_gaussian_mixture(40, 6, 3, 2.0, 42).unwrap();
        for seed in 0..4 {
            let p = init_kaiming_balanced(&[6, 16, 3], seed, false).unwrap();
            let (lhs, rhs) = compression_bound(&p, &ds, Activation::Relu).unwrap();
            assert!(lhs <= rhs + BOUND_SLACK, "{lhs} > {rhs}");
            assert!(lhs > 0.0);
        }
    }

    #[test]
    fn single_sample_uniform_two_class_bound() {
        let x = Matrix::from_vec(1, 3, vec![0.3, -1.2, 0.8]).unwrap();
        let ds = Dataset::from_parts(x, vec![0], 2).unwrap();
        let mut p = init_kaiming_balanced(&[3, 4, 2], 1, false).unwrap();
        // identical output rows give identical logits, so p = (½, ½)
        let r0 = p.weights[1].row(0).to_vec();
        p.weights[1].row_mut(1).copy_from_slice(&r0);
        let snap = snapshot(&p, &ds, Activation::Relu, 0, SnapshotMode::Dense).unwrap();
        assert!((snap.q_margin - 0.5).abs() < 1e-12);
        assert!((snap.correct_class_margin - 0.25).abs() < 1e-12);
        assert!(snap.lambda_max <= snap.bound_rhs() + BOUND_SLACK);
    }

    #[test]
    fn estimate_tau_exact_and_noisy() {
        let series: Vec<(usize, f64)> = (0..100).map(|i| (i * 20, 7.0 * (-(i as f64 * 20.0) / 300.0).exp())).collect();
        let (tau, r2) = estimate_tau(&series).unwrap();
        assert!((tau - 300.0).abs() < 1.0);
        assert!(r2 > 0.999_999);

        let mut rng = Rng::new(77);
        let noisy: Vec<(usize, f64)> = series.iter().map(|&(t, l)| (t, l * (1.0 + 0.02 * rng.normal()))).collect();
        let (tau_n, _) = estimate_tau(&noisy).unwrap();
        assert!((tau_n - 300.0).abs() < 0.05 * 300.0, "{tau_n}");

        let flat: Vec<(usize, f64)> = (0..10).map(|i| (i, 1.0)).collect();
        assert!(estimate_tau(&flat).is_err());
        assert!(estimate_tau(&series[..3]).is_err());
    }

    #[test]
    fn single_snapshot_profile() {
        let ds = gen_gaussian_mixture(20, 4, 3, 2.0, 8).unwrap();
        let cfg = TrainConfig::new(vec![4, 8, 3], Activation::Relu, LossKind::CrossEntropy, 0.1, 10, 1);
        let (profile, _) = track_compression(&cfg, &ds, usize::MAX, SnapshotMode::Dense).unwrap();
        assert_eq!(profile.snapshots.len(), 1);
        assert!(profile.tau.is_none());
        assert!(track_compression(&TrainConfig { loss: LossKind::Mse, ..cfg }, &ds, 1, SnapshotMode::Dense).is_err());
    }

    #[test]
    fn switch_rate_definitions() {
        let ds = gen_gaussian_mixture(20, 4, 3, 2.0, 8).unwrap();
        let mut cfg = TrainConfig::new(vec![4, 8, 3], Activation::Relu, LossKind::Mse, 0.0, 10, 1);
        cfg.record.switches = true;
        let frozen = crate::training::train(&cfg, &ds).unwrap();
        assert_eq!(switch_rate(&frozen).unwrap(), (0.0, 0.0));
        let lin = crate::training::train(&TrainConfig { activation: Activation::Linear, eta: 0.5, ..cfg.clone() }, &ds).unwrap();
        assert_eq!(switch_rate(&lin).unwrap().0, 0.0);
        let moving = crate::training::train(&TrainConfig { eta: 0.5, ..cfg.clone() }, &ds).unwrap();
        let (per, total) = switch_rate(&moving).unwrap();
        assert!(per > 0.0 && (total - 8.0 * per).abs() < 1e-15);
        cfg.record.switches = false;
        assert!(switch_rate(&crate::training::train(&cfg, &ds).unwrap()).is_err());
    }

    #[test]
    fn eos_detector() {
        let at: Vec<(usize, f64)> = (0..10).map(|i| (i, if i < 3 { 19.0 } else { 5.0 })).collect();
        assert!(is_at_eos(&at, 0.1));
        let below: Vec<(usize, f64)> = (0..10).map(|i| (i, 5.0)).collect();
        assert!(!is_at_eos(&below, 0.1));
    }
}
