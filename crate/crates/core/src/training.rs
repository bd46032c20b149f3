//! Losses, optimizers, the full-batch training loop and the gradient-flow
//! integrator.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::conservation::{conservation_quantities, norm_change};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::model::{backward, forward, init_kaiming_balanced, Activation, LayerGrads, MlpParams};
use crate::numerics::Matrix;
use crate::spectral::LambdaTracker;

/// Loss values above this (or non-finite) end a run as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    #[serde(rename = "ce")]
    CrossEntropy,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "ce" | "cross-entropy" | "crossentropy" => Ok(LossKind::CrossEntropy),
            _ => invalid(format!("unknown loss {s:?}")),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::CrossEntropy => "ce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Gd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn is_gd(self) -> bool {
        matches!(self, OptimizerKind::Gd)
    }

    pub fn label(self) -> &'static str {
        match self {
            OptimizerKind::Gd => "gd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

/// Adam moment estimates over the flat parameter vector.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOptions {
    /// Count pre-activation sign flips between consecutive steps.
    pub switches: bool,
    /// Sample `λ_max` of the Gauss–Newton matrix every `stride` steps.
    pub lambda_stride: Option<usize>,
    /// Keep the full per-sample correct-class probability matrix (CE).
    pub full_probabilities: bool,
}

impl Default for RecordOptions {
    fn default() -> Self {
        Self {
            switches: false,
            lambda_stride: None,
            full_probabilities: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub eta: f64,
    pub steps: usize,
    pub seed: u64,
    pub bias: bool,
    #[serde(default)]
    pub record: RecordOptions,
}

impl TrainConfig {
    pub fn new(widths: Vec<usize>, activation: Activation, loss: LossKind, eta: f64, steps: usize, seed: u64) -> Self {
        Self {
            widths,
            activation,
            loss,
            optimizer: OptimizerKind::Gd,
            eta,
            steps,
            seed,
            bias: false,
            record: RecordOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return invalid("steps must be >= 1");
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return invalid(format!("learning rate must be finite and >= 0, got {}", self.eta));
        }
        if self.record.lambda_stride == Some(0) {
            return invalid("lambda stride must be >= 1");
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return invalid("adam needs 0 <= beta1, beta2 < 1 and eps > 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize },
}

/// Per-step record of a training run.
///
/// Step-indexed sequences have one entry per completed step `t`, describing
/// the parameters `θ_t` the gradient was taken at; `delta_c[t]` is the
/// measured change `C(θ_{t+1}) − C(θ_t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainTrace {
    pub eta: f64,
    pub optimizer: OptimizerKind,
    pub loss: Vec<f64>,
    /// `‖∂L/∂W_l‖²_F` per layer.
    pub grad_sq: Vec<Vec<f64>>,
    /// `C_l(θ_t)` per adjacent layer pair.
    pub conservation: Vec<Vec<f64>>,
    /// `δ_l(t) = ‖g_{l+1}‖² − ‖g_l‖²`.
    pub imbalance: Vec<Vec<f64>>,
    pub delta_c: Vec<Vec<f64>>,
    /// Sign flips versus the previous step, summed over samples and hidden units.
    pub switches: Option<Vec<u64>>,
    pub hidden_units: usize,
    pub samples: usize,
    pub q_min: Option<Vec<f64>>,
    pub q_mean: Option<Vec<f64>>,
    pub probabilities: Option<Vec<Vec<f64>>>,
    pub lambda_max: Vec<(usize, f64)>,
    pub initial: MlpParams,
    pub final_params: MlpParams,
    pub final_conservation: Vec<f64>,
    pub final_loss: f64,
    pub status: RunStatus,
}

impl TrainTrace {
    pub fn steps(&self) -> usize {
        self.loss.len()
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn initial_conservation(&self) -> Vec<f64> {
        self.conservation
            .first()
            .cloned()
            .unwrap_or_else(|| self.final_conservation.clone())
    }

    /// `|C_l(T) − C_l(0)|` per pair.
    pub fn total_drift(&self) -> Vec<f64> {
        let c0 = self.initial_conservation();
        self.final_conservation
            .iter()
            .zip(&c0)
            .map(|(a, b)| (a - b).abs())
            .collect()
    }

    /// Writes one row per step; optional columns are left empty when not recorded.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let layers = self.grad_sq.first().map_or(0, Vec::len);
        let pairs = layers.saturating_sub(1);
        let mut header = vec!["step".to_string(), "loss".to_string()];
        header.extend((1..=layers).map(|l| format!("grad_sq_{l}")));
        header.extend((1..=pairs).map(|l| format!("c_{l}")));
        header.extend((1..=pairs).map(|l| format!("imbalance_{l}")));
        header.extend((1..=pairs).map(|l| format!("delta_c_{l}")));
        header.extend(["switches", "q_min", "lambda_max"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        let mut lam = self.lambda_max.iter().peekable();
        for t in 0..self.steps() {
            let mut row = vec![t.to_string(), fmt(self.loss[t])];
            row.extend(self.grad_sq[t].iter().map(|&v| fmt(v)));
            row.extend(self.conservation[t].iter().map(|&v| fmt(v)));
            row.extend(self.imbalance[t].iter().map(|&v| fmt(v)));
            row.extend(self.delta_c[t].iter().map(|&v| fmt(v)));
            row.push(self.switches.as_ref().map_or(String::new(), |s| s[t].to_string()));
            row.push(self.q_min.as_ref().map_or(String::new(), |q| fmt(q[t])));
            let l = match lam.peek() {
                Some(&&(s, v)) if s == t => {
                    lam.next();
                    fmt(v)
                }
                _ => String::new(),
            };
            row.push(l);
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn summary(&self) -> TraceSummary {
        let g = crate::conservation::imbalance_sum(self).unwrap_or_default();
        TraceSummary {
            steps: self.steps(),
            status: self.status,
            eta: self.eta,
            initial_loss: self.loss.first().copied().unwrap_or(self.final_loss),
            final_loss: self.final_loss,
            initial_conservation: self.initial_conservation(),
            final_conservation: self.final_conservation.clone(),
            total_drift: self.total_drift(),
            imbalance_sum: g,
            final_q_min: self.q_min.as_ref().and_then(|q| q.last().copied()),
            lambda_max_first: self.lambda_max.first().map(|p| p.1),
            lambda_max_last: self.lambda_max.last().map(|p| p.1),
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.10e}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub status: RunStatus,
    pub eta: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_conservation: Vec<f64>,
    pub final_conservation: Vec<f64>,
    pub total_drift: Vec<f64>,
    pub imbalance_sum: Vec<f64>,
    pub final_q_min: Option<f64>,
    pub lambda_max_first: Option<f64>,
    pub lambda_max_last: Option<f64>,
}

/// Loss value and exact gradient with respect to the logits.
///
/// MSE is `(1/n) Σ ½‖f_i − y_i‖²` against one-hot targets; CE is the mean
/// softmax cross-entropy.
pub fn loss_and_dlogits(logits: &Matrix, ds: &Dataset, kind: LossKind) -> Result<(f64, Matrix)> {
    if logits.shape() != (ds.n, ds.c) {
        return invalid(format!(
            "logits shape {:?} does not match dataset ({}, {})",
            logits.shape(),
            ds.n,
            ds.c
        ));
    }
    let n = ds.n as f64;
    match kind {
        LossKind::Mse => {
            let diff = logits.sub(&ds.onehot)?;
            let loss = 0.5 * diff.frobenius_sq() / n;
            Ok((loss, diff.scale(1.0 / n)))
        }
        LossKind::CrossEntropy => {
            let probs = softmax_rows(logits);
            let mut loss = 0.0;
            for i in 0..ds.n {
                let row = logits.row(i);
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
                loss += lse - row[ds.labels[i]];
            }
            let d = probs.sub(&ds.onehot)?.scale(1.0 / n);
            Ok((loss / n, d))
        }
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    p
}

/// One optimizer update.
pub fn step(p: &MlpParams, g: &LayerGrads, opt: OptimizerKind, eta: f64, state: &mut OptState) -> Result<MlpParams> {
    match opt {
        OptimizerKind::Gd => p.sub_scaled(eta, g),
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let flat = p.to_flat();
            let gf = g.to_flat();
            if gf.len() != flat.len() {
                return invalid("gradient shapes do not match parameters");
            }
            if state.m.len() != flat.len() {
                state.m = vec![0.0; flat.len()];
                state.v = vec![0.0; flat.len()];
                state.t = 0;
            }
            state.t += 1;
            let bc1 = 1.0 - beta1.powi(state.t as i32);
            let bc2 = 1.0 - beta2.powi(state.t as i32);
            let mut out = flat;
            for i in 0..out.len() {
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * gf[i];
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * gf[i] * gf[i];
                let mhat = state.m[i] / bc1;
                let vhat = state.v[i] / bc2;
                out[i] -= eta * mhat / (vhat.sqrt() + eps);
            }
            p.with_flat(&out)
        }
    }
}

/// Loss and parameter gradients at `p`.
pub fn loss_and_grads(p: &MlpParams, ds: &Dataset, act: Activation, loss: LossKind) -> Result<(f64, LayerGrads)> {
    let cache = forward(p, &ds.x, act)?;
    let (value, d) = loss_and_dlogits(&cache.logits, ds, loss)?;
    Ok((value, backward(p, &cache, &d, act)?))
}

fn pair_differences(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|w| w[1] - w[0]).collect()
}

fn sign_bits(preacts: &[Matrix]) -> Vec<bool> {
    preacts
        .iter()
        .flat_map(|z| z.as_slice().iter().map(|&v| v >= 0.0))
        .collect()
}

/// Full-batch training from Kaiming initialization.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainTrace> {
    cfg.validate()?;
    if cfg.widths.first() != Some(&ds.d) || cfg.widths.last() != Some(&ds.c) {
        return invalid(format!(
            "widths {:?} must start at d={} and end at C={}",
            cfg.widths, ds.d, ds.c
        ));
    }
    let p0 = init_kaiming_balanced(&cfg.widths, cfg.seed, cfg.bias)?;
    train_from(p0, cfg, ds)
}

/// Full-batch training from explicit initial parameters.
pub fn train_from(p0: MlpParams, cfg: &TrainConfig, ds: &Dataset) -> Result<TrainTrace> {
    train_observed(p0, cfg, ds, &mut |_, _| Ok(()))
}

/// Callback invoked with `(t, θ_t)` before every step and once more with
/// `(T, θ_T)` when the run completes.
pub type StepObserver<'a> = dyn FnMut(usize, &MlpParams) -> Result<()> + 'a;

/// [`train_from`] with a per-step observer.
pub fn train_observed(p0: MlpParams, cfg: &TrainConfig, ds: &Dataset, observer: &mut StepObserver<'_>) -> Result<TrainTrace> {
    cfg.validate()?;
    p0.validate()?;
    let act = cfg.activation;
    let ce = cfg.loss == LossKind::CrossEntropy;
    let t_max = cfg.steps;
    let hidden_units: usize = p0.widths()[1..p0.depth()].iter().sum();

    let mut trace = TrainTrace {
        eta: cfg.eta,
        optimizer: cfg.optimizer,
        loss: Vec::with_capacity(t_max),
        grad_sq: Vec::with_capacity(t_max),
        conservation: Vec::with_capacity(t_max),
        imbalance: Vec::with_capacity(t_max),
        delta_c: Vec::with_capacity(t_max),
        switches: cfg.record.switches.then(|| Vec::with_capacity(t_max)),
        hidden_units,
        samples: ds.n,
        q_min: ce.then(|| Vec::with_capacity(t_max)),
        q_mean: ce.then(|| Vec::with_capacity(t_max)),
        probabilities: (ce && cfg.record.full_probabilities).then(Vec::new),
        lambda_max: Vec::new(),
        initial: p0.clone(),
        final_params: p0.clone(),
        final_conservation: conservation_quantities(&p0)?.c,
        final_loss: f64::NAN,
        status: RunStatus::Completed,
    };

    let mut tracker = cfg
        .record
        .lambda_stride
        .map(|stride| (stride, LambdaTracker::new(cfg.seed)));
    let mut opt_state = OptState::default();
    let mut prev_signs: Option<Vec<bool>> = None;
    let mut p = p0;

    for t in 0..t_max {
        let cache = forward(&p, &ds.x, act)?;
        let (loss, dlogits) = loss_and_dlogits(&cache.logits, ds, cfg.loss)?;
        if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD || !cache.logits.all_finite() {
            trace.status = RunStatus::Diverged { step: t };
            break;
        }
        observer(t, &p)?;
        let g = backward(&p, &cache, &dlogits, act)?;
        let gsq = g.frobenius_sq();
        let c_now = conservation_quantities(&p)?.c;

        if let Some(sw) = trace.switches.as_mut() {
            let signs = sign_bits(&cache.preacts);
            let flips = match (&prev_signs, act.has_kink()) {
                (Some(prev), true) => prev.iter().zip(&signs).filter(|(a, b)| a != b).count() as u64,
                _ => 0,
            };
            sw.push(flips);
            prev_signs = Some(signs);
        }
        if ce {
            let probs = softmax_rows(&cache.logits);
            let q: Vec<f64> = (0..ds.n).map(|i| probs[(i, ds.labels[i])]).collect();
            trace.q_min.as_mut().unwrap().push(q.iter().copied().fold(f64::INFINITY, f64::min));
            trace.q_mean.as_mut().unwrap().push(q.iter().sum::<f64>() / ds.n as f64);
            if let Some(all) = trace.probabilities.as_mut() {
                all.push(q);
            }
        }
        if let Some((stride, tr)) = tracker.as_mut() {
            if t % *stride == 0 {
                trace.lambda_max.push((t, tr.lambda_max(&p, ds, act, cfg.loss)?));
            }
        }

        let next = step(&p, &g, cfg.optimizer, cfg.eta, &mut opt_state)?;
        let dn_before = norm_change(&p, &next)?;
        trace.loss.push(loss);
        trace.imbalance.push(pair_differences(&gsq));
        trace.grad_sq.push(gsq);
        trace.conservation.push(c_now);
        trace.delta_c.push(pair_differences(&dn_before));
        p = next;
    }

    if matches!(trace.status, RunStatus::Completed) {
        let cache = forward(&p, &ds.x, act)?;
        let (loss, _) = loss_and_dlogits(&cache.logits, ds, cfg.loss)?;
        if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
            trace.status = RunStatus::Diverged { step: t_max };
        } else {
            observer(t_max, &p)?;
        }
        trace.final_loss = loss;
    } else {
        trace.final_loss = trace.loss.last().copied().unwrap_or(f64::NAN);
    }
    // For diverged runs the final point is the last finite state.
    trace.final_conservation = conservation_quantities(&p)?.c;
    trace.final_params = p;
    Ok(trace)
}

/// Gradient flow `dθ/dt = −∇L` by classical RK4 with a fixed step.
///
/// The returned trace uses `eta = step`; `conservation[t]` holds `C(θ(t·step))`
/// and the gradient fields describe the start of each RK4 step.
pub fn integrate_flow(
    p: &MlpParams,
    ds: &Dataset,
    act: Activation,
    loss: LossKind,
    duration: f64,
    step_size: f64,
) -> Result<TrainTrace> {
    if !(step_size > 0.0) || !(duration >= 0.0) {
        return invalid("flow needs step > 0 and duration >= 0");
    }
    let n_steps = (duration / step_size).round() as usize;
    let grad_flat = |theta: &MlpParams| -> Result<(f64, LayerGrads)> { loss_and_grads(theta, ds, act, loss) };

    let mut trace = TrainTrace {
        eta: step_size,
        optimizer: OptimizerKind::Gd,
        loss: Vec::with_capacity(n_steps),
        grad_sq: Vec::with_capacity(n_steps),
        conservation: Vec::with_capacity(n_steps),
        imbalance: Vec::with_capacity(n_steps),
        delta_c: Vec::with_capacity(n_steps),
        switches: None,
        hidden_units: p.widths()[1..p.depth()].iter().sum(),
        samples: ds.n,
        q_min: None,
        q_mean: None,
        probabilities: None,
        lambda_max: Vec::new(),
        initial: p.clone(),
        final_params: p.clone(),
        final_conservation: conservation_quantities(p)?.c,
        final_loss: f64::NAN,
        status: RunStatus::Completed,
    };

    let mut theta = p.clone();
    for t in 0..n_steps {
        let (l0, k1) = grad_flat(&theta)?;
        if !l0.is_finite() || l0 > DIVERGENCE_THRESHOLD {
            trace.status = RunStatus::Diverged { step: t };
            break;
        }
        let h = step_size;
        let (_, k2) = grad_flat(&theta.sub_scaled(0.5 * h, &k1)?)?;
        let (_, k3) = grad_flat(&theta.sub_scaled(0.5 * h, &k2)?)?;
        let (_, k4) = grad_flat(&theta.sub_scaled(h, &k3)?)?;
        let mut next = theta.clone();
        for (l, w) in next.weights.iter_mut().enumerate() {
            w.axpy(-h / 6.0, &k1.weights[l])?;
            w.axpy(-h / 3.0, &k2.weights[l])?;
            w.axpy(-h / 3.0, &k3.weights[l])?;
            w.axpy(-h / 6.0, &k4.weights[l])?;
        }
        if let Some(bs) = next.biases.as_mut() {
            let ks = [&k1, &k2, &k3, &k4];
            let coef = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
            for (k, c) in ks.iter().zip(coef) {
                for (b, gb) in bs.iter_mut().zip(k.biases.as_ref().unwrap()) {
                    for (v, gv) in b.iter_mut().zip(gb) {
                        *v -= c * gv;
                    }
                }
            }
        }
        let gsq = k1.frobenius_sq();
        trace.loss.push(l0);
        trace.imbalance.push(pair_differences(&gsq));
        trace.grad_sq.push(gsq);
        trace.conservation.push(conservation_quantities(&theta)?.c);
        trace.delta_c.push(pair_differences(&norm_change(&theta, &next)?));
        theta = next;
    }
    trace.final_loss = loss_and_grads(&theta, ds, act, loss)?.0;
    trace.final_conservation = conservation_quantities(&theta)?.c;
    trace.final_params = theta;
    Ok(trace)
}
