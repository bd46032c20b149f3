//! Conservation quantities `C_l = ‖W_{l+1}‖²_F − ‖W_l‖²_F` and the exact
//! per-step drift accounting under gradient descent.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{LayerGrads, MlpParams};
use crate::training::TrainTrace;

/// Denominator floor for relative residuals.
pub const RESIDUAL_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservationState {
    pub c: Vec<f64>,
}

pub fn conservation_quantities(p: &MlpParams) -> Result<ConservationState> {
    if p.depth() < 2 {
        return invalid("conservation quantities need at least 2 layers");
    }
    let norms: Vec<f64> = p.weights.iter().map(|w| w.frobenius_sq()).collect();
    Ok(ConservationState {
        c: norms.windows(2).map(|w| w[1] - w[0]).collect(),
    })
}

/// `‖W'_l‖² − ‖W_l‖²` per layer, accumulated as `Σ (w' − w)(w' + w)` so the
/// result keeps full relative precision when the change is small.
pub fn norm_change(before: &MlpParams, after: &MlpParams) -> Result<Vec<f64>> {
    if before.weights.len() != after.weights.len()
        || before
            .weights
            .iter()
            .zip(&after.weights)
            .any(|(a, b)| a.shape() != b.shape())
    {
        return invalid("parameter shapes differ");
    }
    Ok(before
        .weights
        .iter()
        .zip(&after.weights)
        .map(|(w0, w1)| {
            w0.as_slice()
                .iter()
                .zip(w1.as_slice())
                .map(|(&a, &b)| (b - a) * (b + a))
                .sum()
        })
        .collect())
}

/// Measured and predicted change of each `C_l` over one GD step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDrift {
    pub measured: Vec<f64>,
    pub predicted: Vec<f64>,
}

impl StepDrift {
    pub fn max_relative_residual(&self) -> f64 {
        self.measured
            .iter()
            .zip(&self.predicted)
            .map(|(m, p)| (m - p).abs() / (m.abs() + RESIDUAL_FLOOR))
            .fold(0.0, f64::max)
    }
}

/// Compares `C(after) − C(before)` with `η²(‖g_{l+1}‖² − ‖g_l‖²)`.
pub fn step_drift_check(before: &MlpParams, after: &MlpParams, g: &LayerGrads, eta: f64) -> Result<StepDrift> {
    if g.weights.len() != before.weights.len()
        || g.weights
            .iter()
            .zip(&before.weights)
            .any(|(a, b)| a.shape() != b.shape())
    {
        return invalid("gradient shapes do not match parameters");
    }
    let dn = norm_change(before, after)?;
    let gsq = g.frobenius_sq();
    Ok(StepDrift {
        measured: dn.windows(2).map(|w| w[1] - w[0]).collect(),
        predicted: gsq.windows(2).map(|w| eta * eta * (w[1] - w[0])).collect(),
    })
}

/// `G_l = Σ_t δ_l(t)` over the recorded steps.
pub fn imbalance_sum(trace: &TrainTrace) -> Result<Vec<f64>> {
    if trace.imbalance.len() != trace.steps() {
        return invalid("trace is missing per-step imbalance records");
    }
    let pairs = trace.final_conservation.len();
    let mut g = vec![0.0; pairs];
    for row in &trace.imbalance {
        if row.len() != pairs {
            return invalid("imbalance record has the wrong number of pairs");
        }
        for (acc, v) in g.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReport {
    pub eta: f64,
    pub steps: usize,
    /// `|C_l(T) − C_l(0)|`.
    pub total_drift: Vec<f64>,
    /// `G_l(η)`.
    pub imbalance_sum: Vec<f64>,
    /// `max_t |ΔC_l(t) − η²δ_l(t)| / (|ΔC_l(t)| + 1e-30)`; absent when the
    /// optimizer is not plain GD.
    pub identity_residual: Option<Vec<f64>>,
    /// `|η²|G_l| − drift_l| / drift_l`; absent when not applicable.
    pub total_identity_error: Option<Vec<f64>>,
}

pub fn drift_report(trace: &TrainTrace) -> Result<DriftReport> {
    let g = imbalance_sum(trace)?;
    let total = trace.total_drift();
    let eta2 = trace.eta * trace.eta;
    let (identity_residual, total_identity_error) = if trace.optimizer.is_gd() {
        let pairs = g.len();
        let mut resid = vec![0.0f64; pairs];
        for (dc, delta) in trace.delta_c.iter().zip(&trace.imbalance) {
            for l in 0..pairs {
                let r = (dc[l] - eta2 * delta[l]).abs() / (dc[l].abs() + RESIDUAL_FLOOR);
                resid[l] = resid[l].max(r);
            }
        }
        let tot = total
            .iter()
            .zip(&g)
            .map(|(d, gl)| (eta2 * gl.abs() - d).abs() / (d + RESIDUAL_FLOOR))
            .collect();
        (Some(resid), Some(tot))
    } else {
        (None, None)
    };
    Ok(DriftReport {
        eta: trace.eta,
        steps: trace.steps(),
        total_drift: total,
        imbalance_sum: g,
        identity_residual,
        total_identity_error,
    })
}

/// `C_l(0) + η² Σ_{s<t} δ_l(s)` for `t = 0..=T`.
pub fn reconstruct_conservation(trace: &TrainTrace) -> Vec<Vec<f64>> {
    let eta2 = trace.eta * trace.eta;
    let mut c = trace.initial_conservation();
    let mut out = vec![c.clone()];
    for delta in &trace.imbalance {
        for (cl, d) in c.iter_mut().zip(delta) {
            *cl += eta2 * d;
        }
        out.push(c.clone());
    }
    out
}
