use nalgebra::DMatrix;

use super::matrix::{dot, norm, Matrix};
use super::rng::Rng;
use crate::error::{invalid, Error, Result};

/// Real symmetric eigendecomposition, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the unit eigenvector for `eigenvalues[k]`.
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// `V Λ Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mut scaled = v.clone();
        for r in 0..n {
            for (c, &lam) in self.eigenvalues.iter().enumerate() {
                scaled[(r, c)] *= lam;
            }
        }
        scaled.matmul_t(v).expect("square factors")
    }
}

const SYMMETRY_TOL: f64 = 1e-10;

/// Full spectrum of a symmetric matrix.
///
/// Backed by nalgebra's Householder tridiagonalization + implicit symmetric QR.
pub fn sym_eig(a: &Matrix) -> Result<EigenDecomposition> {
    if !a.is_square() {
        return invalid(format!("sym_eig needs a square matrix, got {:?}", a.shape()));
    }
    if !a.all_finite() {
        return invalid("sym_eig input has non-finite entries");
    }
    if a.asymmetry() > SYMMETRY_TOL {
        return invalid(format!(
            "sym_eig input is not symmetric (relative asymmetry {:.3e})",
            a.asymmetry()
        ));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(EigenDecomposition {
            eigenvalues: vec![],
            eigenvectors: Matrix::zeros(0, 0),
        });
    }
    // Symmetrize exactly so the solver sees a symmetric operand.
    let dm = DMatrix::from_fn(n, n, |r, c| 0.5 * (a[(r, c)] + a[(c, r)]));
    let eig = dm
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::NumericalFailure {
            message: "symmetric eigensolver did not converge".into(),
            last_estimate: None,
        })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Outcome of a power iteration run.
#[derive(Debug, Clone)]
pub struct PowerResult {
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
}

/// Largest eigenvalue of a symmetric PSD operator given only as a
/// matrix-vector product.
pub fn power_iteration<F>(apply: F, dim: usize, tol: f64, max_iter: usize, rng: &mut Rng) -> Result<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    power_iteration_from(apply, dim, tol, max_iter, rng, None).map(|r| r.value)
}

/// Power iteration with an optional warm-start vector.
///
/// Stops when the residual `‖Av − θv‖` drops below `tol·θ`, or when the
/// geometric extrapolation of the remaining Rayleigh-quotient increase
/// (`Δ_k·q/(1−q)` with `q = Δ_k/Δ_{k−1}`) is below `tol·θ/10`.
pub fn power_iteration_from<F>(
    mut apply: F,
    dim: usize,
    tol: f64,
    max_iter: usize,
    rng: &mut Rng,
    init: Option<&[f64]>,
) -> Result<PowerResult>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if dim == 0 {
        return invalid("power iteration needs dim >= 1");
    }
    let mut v: Vec<f64> = match init {
        Some(v0) if v0.len() == dim && norm(v0) > 0.0 => v0.to_vec(),
        _ => (0..dim).map(|_| rng.normal()).collect(),
    };
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);

    let mut theta_prev = f64::NAN;
    let mut delta_prev = f64::NAN;
    let mut theta = 0.0;
    for it in 1..=max_iter {
        let av = apply(&v);
        if av.len() != dim {
            return invalid("operator returned a vector of the wrong length");
        }
        theta = dot(&v, &av);
        let av_norm = norm(&av);
        if !av_norm.is_finite() {
            return Err(Error::NumericalFailure {
                message: "operator produced non-finite output".into(),
                last_estimate: Some(theta),
            });
        }
        if av_norm == 0.0 {
            // v lies in the null space; a PSD operator with Av = 0 for a
            // random v is the zero operator with overwhelming probability.
            return Ok(PowerResult {
                value: 0.0,
                vector: v,
                iterations: it,
            });
        }
        let resid = av
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - theta * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = theta.abs().max(f64::MIN_POSITIVE);
        let delta = (theta - theta_prev).abs();
        let rq_done = if delta.is_finite() && delta_prev.is_finite() {
            let q = if delta_prev > 0.0 {
                (delta / delta_prev).min(1.0 - 1e-9)
            } else {
                0.0
            };
            delta * q / (1.0 - q) + delta <= 0.1 * tol * scale
        } else {
            false
        };
        if resid <= tol * scale || rq_done {
            return Ok(PowerResult {
                value: theta,
                vector: v,
                iterations: it,
            });
        }
        delta_prev = delta;
        theta_prev = theta;
        v = av.into_iter().map(|x| x / av_norm).collect();
    }
    Err(Error::NumericalFailure {
        message: format!("power iteration did not converge in {max_iter} iterations"),
        last_estimate: Some(theta),
    })
}

/// Outcome of a block (subspace) iteration run.
#[derive(Debug, Clone)]
pub struct SubspaceResult {
    /// Largest Ritz value.
    pub value: f64,
    /// Ritz values, descending.
    pub ritz_values: Vec<f64>,
    /// Orthonormal Ritz vectors, same order; reusable as a warm start.
    pub block: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn orthonormalize(vs: &mut Vec<Vec<f64>>, dim: usize, rng: &mut Rng) {
    for i in 0..vs.len() {
        for _ in 0..4 {
            // Two Gram–Schmidt passes keep the basis orthogonal to rounding.
            for _ in 0..2 {
                for j in 0..i {
                    let (head, tail) = vs.split_at_mut(i);
                    let c = dot(&head[j], &tail[0]);
                    tail[0].iter_mut().zip(&head[j]).for_each(|(x, q)| *x -= c * q);
                }
            }
            let nv = norm(&vs[i]);
            if nv > 1e-300 && nv.is_finite() {
                vs[i].iter_mut().for_each(|x| *x /= nv);
                break;
            }
            vs[i] = (0..dim).map(|_| rng.normal()).collect();
        }
    }
}

/// Top of the spectrum of a symmetric PSD operator by subspace iteration
/// with Rayleigh–Ritz projection.
///
/// Unlike single-vector power iteration, convergence is governed by
/// `λ_{k+1}/λ_1`, so clusters of near-equal leading eigenvalues (common for
/// multi-output curvature) do not stall it. Stops when the top Ritz value
/// changes by at most `tol·θ` between sweeps and its residual is at most
/// `√tol·θ`.
pub fn subspace_iteration<F>(
    mut apply: F,
    dim: usize,
    block: usize,
    tol: f64,
    max_iter: usize,
    rng: &mut Rng,
    init: Option<&[Vec<f64>]>,
) -> Result<SubspaceResult>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if dim == 0 || block == 0 {
        return invalid("subspace iteration needs dim >= 1 and block >= 1");
    }
    let k = block.min(dim);
    let mut v: Vec<Vec<f64>> = init
        .unwrap_or(&[])
        .iter()
        .filter(|x| x.len() == dim)
        .take(k)
        .cloned()
        .collect();
    while v.len() < k {
        v.push((0..dim).map(|_| rng.normal()).collect());
    }
    orthonormalize(&mut v, dim, rng);

    let mut theta_prev = f64::NAN;
    let mut theta = 0.0;
    for it in 1..=max_iter {
        let w: Vec<Vec<f64>> = v.iter().map(|x| apply(x)).collect();
        if w.iter().any(|x| x.len() != dim) {
            return invalid("operator returned a vector of the wrong length");
        }
        if w.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure {
                message: "operator produced non-finite output".into(),
                last_estimate: Some(theta),
            });
        }
        let t = Matrix::from_fn(k, k, |a, b| 0.5 * (dot(&v[a], &w[b]) + dot(&v[b], &w[a])));
        let eig = sym_eig(&t)?;
        let rotate = |basis: &[Vec<f64>], col: usize| -> Vec<f64> {
            let mut out = vec![0.0; dim];
            for (j, bj) in basis.iter().enumerate() {
                let c = eig.eigenvectors[(j, col)];
                out.iter_mut().zip(bj).for_each(|(o, x)| *o += c * x);
            }
            out
        };
        let ritz: Vec<Vec<f64>> = (0..k).map(|c| rotate(&v, c)).collect();
        let aritz: Vec<Vec<f64>> = (0..k).map(|c| rotate(&w, c)).collect();
        theta = eig.eigenvalues[0];
        if aritz.iter().all(|x| x.iter().all(|&y| y == 0.0)) {
            return Ok(SubspaceResult {
                value: 0.0,
                ritz_values: vec![0.0; k],
                block: ritz,
                iterations: it,
            });
        }
        let scale = theta.abs().max(f64::MIN_POSITIVE);
        let resid = aritz[0]
            .iter()
            .zip(&ritz[0])
            .map(|(a, b)| (a - theta * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let settled = (theta - theta_prev).abs() <= tol * scale;
        if (settled && resid <= tol.sqrt() * scale) || k == dim {
            return Ok(SubspaceResult {
                value: theta,
                ritz_values: eig.eigenvalues.clone(),
                block: ritz,
                iterations: it,
            });
        }
        theta_prev = theta;
        v = aritz;
        orthonormalize(&mut v, dim, rng);
    }
    Err(Error::NumericalFailure {
        message: format!("subspace iteration did not converge in {max_iter} sweeps"),
        last_estimate: Some(theta),
    })
}
