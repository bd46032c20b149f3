//! Per-experiment procedures. Every procedure builds its cells, runs them on
//! the current rayon pool, and reduces them to named metrics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use rayon::prelude::*;

use super::{Aggregate, CellResult, ExperimentSpec, PlotSeries};
use crate::conservation::{drift_report, imbalance_sum};
use crate::data::{data_cov_spectrum, gen_gaussian_mixture, Dataset};
use crate::error::{Error, Result};
use crate::fitting::{fit_linear, fit_power_law, pearson, FitResult};
use crate::model::{init_kaiming_balanced, Activation, MlpParams};
use crate::spectral::{
    eos_fraction, is_at_eos, switch_rate, track_compression, LambdaTracker, SnapshotMode, EOS_BAND,
};
use crate::theory::{
    compare_ck, crossover_sum, effective_spectrum, empirical_ck, fit_scale, predicted_ck, predicted_ck_for,
    write_mode_table, SpectralModel,
};
use crate::training::{integrate_flow, train, train_observed, LossKind, OptimizerKind, TrainConfig, TrainTrace};

pub(super) struct Ctx {
    pub dir: Option<PathBuf>,
    pub write_traces: bool,
}

impl Ctx {
    fn save_trace(&self, label: &str, trace: &TrainTrace) -> Result<()> {
        if let (Some(dir), true) = (&self.dir, self.write_traces) {
            let f = File::create(dir.join(format!("trace_{}.csv", sanitize(label))))?;
            trace.write_csv(BufWriter::new(f))?;
        }
        Ok(())
    }

    fn save_with<F>(&self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(BufWriter<File>) -> Result<()>,
    {
        if let Some(dir) = &self.dir {
            f(BufWriter::new(File::create(dir.join("plots").join(format!("{}.csv", sanitize(name))))?))?;
        }
        Ok(())
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

#[derive(Default)]
pub(super) struct Output {
    pub cells: Vec<CellResult>,
    pub metrics: BTreeMap<String, f64>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub fits: BTreeMap<String, FitResult>,
    pub plots: Vec<PlotSeries>,
    pub notes: Vec<String>,
    pub partial: bool,
}

impl Output {
    fn put(&mut self, key: impl Into<String>, v: f64) {
        let key = key.into();
        if v.is_finite() {
            self.metrics.insert(key, v);
        } else {
            self.notes.push(format!("{key}: non-finite value {v}"));
            self.partial = true;
        }
    }

    fn put_opt(&mut self, key: impl Into<String>, v: Option<f64>) {
        let key = key.into();
        match v {
            Some(x) => self.put(key, x),
            None => {
                self.notes.push(format!("{key}: unavailable"));
                self.partial = true;
            }
        }
    }

    fn flag(&mut self, key: &str, v: bool) {
        self.metrics.insert(key.into(), if v { 1.0 } else { 0.0 });
    }

    fn aggregate(&mut self, key: impl Into<String>, values: &[f64]) {
        if let Some(a) = Aggregate::of(values) {
            self.aggregates.insert(key.into(), a);
        }
    }

    fn fit(&mut self, key: impl Into<String>, f: &FitResult) {
        self.fits.insert(key.into(), *f);
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }
}

/// Resolved parameters of one training cell.
#[derive(Debug, Clone, PartialEq)]
struct Cell {
    tag: String,
    seed: u64,
    eta: f64,
    width: usize,
    depth: usize,
    n: usize,
    d: usize,
    act: Activation,
    loss: LossKind,
    opt: OptimizerKind,
    steps: usize,
    bias: bool,
}

impl Cell {
    fn base(spec: &ExperimentSpec, seed: u64) -> Self {
        let b = &spec.base;
        Cell {
            tag: String::new(),
            seed,
            eta: b.eta,
            width: b.width,
            depth: b.depth,
            n: spec.data.n,
            d: spec.data.d,
            act: b.activation,
            loss: b.loss,
            opt: b.optimizer,
            steps: b.steps,
            bias: b.bias,
        }
    }

    fn label(&self) -> String {
        let mut s = format!(
            "{}{}w{}_L{}_n{}_d{}_{}_{}_{}_eta{:.3e}_s{}",
            self.tag,
            if self.tag.is_empty() { "" } else { "_" },
            self.width,
            self.depth,
            self.n,
            self.d,
            self.act.label(),
            self.loss.label(),
            self.opt.label(),
            self.eta,
            self.seed
        );
        if self.bias {
            s += "_bias";
        }
        s
    }

    fn dataset(&self, spec: &ExperimentSpec) -> Result<Dataset> {
        gen_gaussian_mixture(self.n, self.d, spec.data.c, spec.data.separation, self.seed)
    }

    fn widths(&self, spec: &ExperimentSpec) -> Vec<usize> {
        let mut w = vec![self.d];
        w.extend(std::iter::repeat_n(self.width, self.depth - 1));
        w.push(spec.data.c);
        w
    }

    fn config(&self, spec: &ExperimentSpec) -> TrainConfig {
        let mut c = TrainConfig::new(self.widths(spec), self.act, self.loss, self.eta, self.steps, self.seed);
        c.optimizer = self.opt;
        c.bias = self.bias;
        c
    }

    fn init(&self, spec: &ExperimentSpec) -> Result<MlpParams> {
        init_kaiming_balanced(&self.widths(spec), self.seed, self.bias)
    }

    fn record(&self, status: String, metrics: BTreeMap<String, f64>) -> CellResult {
        CellResult {
            label: self.label(),
            seed: self.seed,
            eta: self.eta,
            width: self.width,
            depth: self.depth,
            n: self.n,
            d: self.d,
            activation: self.act.label(),
            loss: self.loss.label().into(),
            optimizer: self.opt.label().into(),
            status,
            metrics: metrics.into_iter().filter(|(_, v)| v.is_finite()).collect(),
        }
    }

    fn with(&self, f: impl FnOnce(&mut Cell)) -> Cell {
        let mut c = self.clone();
        f(&mut c);
        c
    }
}

fn status_of(trace: &TrainTrace) -> String {
    match trace.status {
        crate::training::RunStatus::Completed => "completed".into(),
        crate::training::RunStatus::Diverged { step } => format!("diverged@{step}"),
    }
}

/// Runs `f` on every cell in parallel; errors become per-cell records.
fn run_cells<F>(cells: &[Cell], f: F) -> Vec<CellResult>
where
    F: Fn(&Cell) -> Result<CellResult> + Sync,
{
    cells
        .par_iter()
        .map(|c| f(c).unwrap_or_else(|e| c.record(format!("error: {e}"), BTreeMap::new())))
        .collect()
}

/// Plain training cell recording drift, imbalance sums and (optionally)
/// switch rates.
fn drift_cell(spec: &ExperimentSpec, ctx: &Ctx, cell: &Cell, switches: bool) -> Result<CellResult> {
    let ds = cell.dataset(spec)?;
    let mut cfg = cell.config(spec);
    cfg.record.switches = switches;
    let trace = train(&cfg, &ds)?;
    ctx.save_trace(&cell.label(), &trace)?;
    Ok(cell.record(status_of(&trace), drift_metrics(&trace)?))
}

fn drift_metrics(trace: &TrainTrace) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    let drift = trace.total_drift();
    let g = imbalance_sum(trace)?;
    for (l, (d, gl)) in drift.iter().zip(&g).enumerate() {
        m.insert(format!("drift_{}", l + 1), *d);
        m.insert(format!("g_{}", l + 1), gl.abs());
    }
    if !drift.is_empty() {
        m.insert("drift_mean".into(), drift.iter().sum::<f64>() / drift.len() as f64);
    }
    m.insert("final_loss".into(), trace.final_loss);
    if trace.switches.is_some() {
        let (per, total) = switch_rate(trace)?;
        m.insert("switch_rate".into(), per);
        m.insert("switch_rate_total".into(), total);
    }
    Ok(m)
}

/// Seed-mean of `key` per η over the η values where every seed completed
/// with a positive value, in ascending η.
fn seed_means(cells: &[&CellResult], key: &str) -> Vec<(f64, f64)> {
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut etas: Vec<f64> = cells.iter().map(|c| c.eta).collect();
    etas.sort_by(f64::total_cmp);
    etas.dedup();
    etas.into_iter()
        .filter_map(|eta| {
            let vals: Vec<f64> = cells
                .iter()
                .filter(|c| c.eta == eta && c.ok())
                .filter_map(|c| c.metric(key))
                .filter(|v| *v > 0.0)
                .collect();
            (vals.len() == seeds.len()).then(|| (eta, vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect()
}

fn power_fit(points: &[(f64, f64)]) -> Option<FitResult> {
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    fit_power_law(&xs, &ys).ok()
}

/// Drift exponent fit on seed means; records the fit and its plot series.
fn drift_exponent(out: &mut Output, cells: &[&CellResult], key: &str, name: &str) -> Option<FitResult> {
    let pts = seed_means(cells, key);
    let fit = power_fit(&pts);
    match &fit {
        Some(f) => {
            out.fit(name, f);
            out.plots.push(PlotSeries {
                name: name.into(),
                columns: vec!["eta".into(), key.into()],
                rows: pts.iter().map(|&(e, v)| vec![e, v]).collect(),
                loglog: true,
                fit: Some((f.slope, f.intercept)),
            });
        }
        None => {
            out.note(format!("{name}: fewer than 3 learning rates completed on every seed"));
            out.partial = true;
        }
    }
    fit
}

/// Restricts cells to η values that every cell group completed.
fn common_etas(groups: &[Vec<&CellResult>], key: &str) -> Vec<f64> {
    let sets: Vec<Vec<f64>> = groups.iter().map(|g| seed_means(g, key).into_iter().map(|p| p.0).collect()).collect();
    let mut common = sets.first().cloned().unwrap_or_default();
    common.retain(|e| sets.iter().all(|s| s.contains(e)));
    common
}

fn select<'a>(cells: &'a [CellResult], pred: impl Fn(&CellResult) -> bool) -> Vec<&'a CellResult> {
    cells.iter().filter(|c| pred(c)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn grid_cells(spec: &ExperimentSpec, f: impl Fn(&Cell) -> Vec<Cell>) -> Vec<Cell> {
    spec.seeds.iter().flat_map(|&s| f(&Cell::base(spec, s))).collect()
}

fn eta_cells(spec: &ExperimentSpec, base: &Cell) -> Vec<Cell> {
    spec.etas().into_iter().map(|eta| base.with(|c| c.eta = eta)).collect()
}

pub(super) fn run(spec: &ExperimentSpec, ctx: &Ctx) -> Result<Output> {
    let mut out = Output::default();
    match spec.id.as_str() {
        "E1" => e1_flow(spec, ctx, &mut out)?,
        "E2" => e2_bias(spec, ctx, &mut out)?,
        "E3" | "E5" | "E7" => drift_scaling(spec, ctx, &mut out)?,
        "E4" => e4_eos_drift(spec, ctx, &mut out)?,
        "E6" => e6_depth(spec, ctx, &mut out)?,
        "E8" => e8_crossover(spec, ctx, &mut out)?,
        "E9" => e9_linear_relu(spec, ctx, &mut out)?,
        "E10" | "E11" => leaky_path(spec, ctx, &mut out)?,
        "E12" => e12_factorial(spec, ctx, &mut out)?,
        "E13" | "E14" | "E17" | "E19" => width_sweep(spec, ctx, &mut out)?,
        "E15" => e15_switch(spec, ctx, &mut out)?,
        "E16" => e16_time_hessian(spec, ctx, &mut out)?,
        "E18" => e18_compression(spec, ctx, &mut out)?,
        "E20" | "E21" => ck_validation(spec, ctx, &mut out)?,
        "E22" => e22_transition(spec, ctx, &mut out)?,
        "E23" => e23_tau(spec, ctx, &mut out)?,
        other => return Err(Error::InvalidInput(format!("no analysis registered for {other}"))),
    }
    Ok(out)
}

fn e1_flow(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let duration = spec.setting_or("flow_duration", 1.0);
    let h = spec.setting_or("flow_step", 1e-4);
    let cells: Vec<Cell> = spec.seeds.iter().map(|&s| Cell::base(spec, s).with(|c| c.eta = h)).collect();
    let cells = run_cells(&cells, |cell| {
        let ds = cell.dataset(spec)?;
        let trace = integrate_flow(&cell.init(spec)?, &ds, cell.act, cell.loss, duration, h)?;
        ctx.save_trace(&cell.label(), &trace)?;
        let c0 = trace.initial_conservation();
        let rel = trace
            .conservation
            .iter()
            .chain(std::iter::once(&trace.final_conservation))
            .flat_map(|c| c.iter().zip(&c0).map(|(a, b)| (a - b).abs() / (1.0 + b.abs())))
            .fold(0.0f64, f64::max);
        let mut m = BTreeMap::new();
        m.insert("max_relative_drift".into(), rel);
        m.insert("loss_reduction".into(), trace.loss.first().copied().unwrap_or(f64::NAN) - trace.final_loss);
        Ok(cell.record(status_of(&trace), m))
    });
    let rel: Vec<f64> = cells.iter().filter_map(|c| c.metric("max_relative_drift")).collect();
    out.aggregate("max_relative_drift", &rel);
    out.put_opt(
        "max_relative_flow_drift",
        (rel.len() == cells.len()).then(|| rel.iter().copied().fold(0.0, f64::max)),
    );
    out.note(format!("RK4 flow: duration {duration}, step {h}"));
    out.cells.splice(0..0, cells);
    Ok(())
}

fn e2_bias(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let cells = grid_cells(spec, |b| vec![b.with(|c| c.bias = false), b.with(|c| c.bias = true)]);
    let cells = run_cells(&cells, |cell| {
        let ds = cell.dataset(spec)?;
        let trace = train(&cell.config(spec), &ds)?;
        ctx.save_trace(&cell.label(), &trace)?;
        let rep = drift_report(&trace)?;
        let mut m = drift_metrics(&trace)?;
        let resid = rep.identity_residual.unwrap_or_default();
        m.insert("identity_residual".into(), resid.iter().copied().fold(0.0, f64::max));
        Ok(cell.record(status_of(&trace), m))
    });
    for (bias, key, reduce) in [
        (false, "bias_free_identity_residual", f64::max as fn(f64, f64) -> f64),
        (true, "bias_identity_residual", f64::min),
    ] {
        let v: Vec<f64> = select(&cells, |c| c.label.ends_with("_bias") == bias && c.ok())
            .iter()
            .filter_map(|c| c.metric("identity_residual"))
            .collect();
        out.aggregate(key, &v);
        let init = if bias { f64::INFINITY } else { 0.0 };
        out.put_opt(key, (v.len() == spec.seeds.len()).then(|| v.iter().copied().fold(init, reduce)));
    }
    out.cells.splice(0..0, cells);
    Ok(())
}

fn drift_scaling(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let cells = grid_cells(spec, |b| eta_cells(spec, b));
    let cells = run_cells(&cells, |c| drift_cell(spec, ctx, c, false));
    let all = select(&cells, |_| true);
    if let Some(f) = drift_exponent(out, &all, "drift_1", "drift_vs_eta") {
        out.put("beta", f.slope);
        out.put("r2", f.r2);
        out.put("curvature", f.loglog_curvature);
        out.put("beta_stderr", f.stderr);
    }
    if let Some(g) = drift_exponent(out, &all, "g_1", "imbalance_vs_eta") {
        out.put("g_exponent", g.slope);
    }
    per_seed_betas(out, &all, "drift_1");
    out.cells.splice(0..0, cells);
    Ok(())
}

/// Per-seed exponents as aggregates (spread diagnostic).
fn per_seed_betas(out: &mut Output, cells: &[&CellResult], key: &str) {
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let betas: Vec<f64> = seeds
        .iter()
        .filter_map(|&s| {
            let mine: Vec<&CellResult> = cells.iter().copied().filter(|c| c.seed == s).collect();
            power_fit(&seed_means(&mine, key)).map(|f| f.slope)
        })
        .collect();
    out.aggregate("beta_per_seed", &betas);
}

fn run_probe(spec: &ExperimentSpec, cell: &Cell, ds: &Dataset, stride: usize, switches: bool) -> Result<TrainTrace> {
    let mut cfg = cell.config(spec);
    cfg.record.lambda_stride = Some(stride);
    cfg.record.switches = switches;
    train(&cfg, ds)
}

/// Learning rate at which the run sits at the edge of stability, found by
/// geometric bisection on `η·λ_max(0)` between 1 and 4.
///
/// Returns `(η, eos fraction, at_eos, trace of the chosen run)`.
fn find_eos_eta(
    spec: &ExperimentSpec,
    cell: &Cell,
    ds: &Dataset,
    switches: bool,
) -> Result<(f64, f64, bool, TrainTrace)> {
    let stride = spec.setting_or("lambda_stride", 10.0) as usize;
    let iters = spec.setting_or("bisection_steps", 6.0) as usize;
    let lam0 = LambdaTracker::new(cell.seed).lambda_max(&cell.init(spec)?, ds, cell.act, cell.loss)?;
    let (mut lo, mut hi) = (1.0 / lam0, 4.0 / lam0);
    let mut best: Option<(f64, f64, TrainTrace)> = None;
    for _ in 0..iters.max(1) {
        let eta = (lo * hi).sqrt();
        let trace = run_probe(spec, &cell.with(|c| c.eta = eta), ds, stride, switches)?;
        if trace.diverged() {
            hi = eta;
            continue;
        }
        let frac = eos_fraction(&trace.lambda_max, eta, EOS_BAND);
        let at = is_at_eos(&trace.lambda_max, eta);
        let mean_sharp = mean(&trace.lambda_max.iter().map(|p| p.1 * eta).collect::<Vec<_>>());
        let better = best.as_ref().is_none_or(|b| frac > b.1);
        if better {
            best = Some((eta, frac, trace));
        }
        if at {
            break;
        }
        if mean_sharp < 2.0 {
            lo = eta;
        } else {
            hi = eta;
        }
    }
    let (eta, frac, trace) =
        best.ok_or_else(|| Error::NumericalFailure { message: "every bisection probe diverged".into(), last_estimate: Some(lo) })?;
    let at = is_at_eos(&trace.lambda_max, eta);
    Ok((eta, frac, at, trace))
}

fn e4_eos_drift(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let reduction = spec.setting_or("eta_reduction", 100.0);
    let cells: Vec<Cell> = spec.seeds.iter().map(|&s| Cell::base(spec, s).with(|c| c.tag = "eos".into())).collect();
    let per_seed: Vec<Result<(CellResult, CellResult)>> = cells
        .par_iter()
        .map(|cell| {
            let ds = cell.dataset(spec)?;
            let (eta, frac, at, trace) = find_eos_eta(spec, cell, &ds, false)?;
            let hot = cell.with(|c| c.eta = eta);
            ctx.save_trace(&hot.label(), &trace)?;
            let mut m = drift_metrics(&trace)?;
            m.insert("eos_fraction".into(), frac);
            m.insert("at_eos".into(), if at { 1.0 } else { 0.0 });
            let cool = cell.with(|c| {
                c.eta = eta / reduction;
                c.tag = "reduced".into();
            });
            let cold = drift_cell(spec, ctx, &cool, false)?;
            Ok((hot.record(status_of(&trace), m), cold))
        })
        .collect();
    let mut hot_d = Vec::new();
    let mut cold_d = Vec::new();
    for (cell, r) in cells.iter().zip(per_seed) {
        match r {
            Ok((h, c)) => {
                if let (Some(a), Some(b)) = (h.metric("drift_1"), c.metric("drift_1")) {
                    hot_d.push(a);
                    cold_d.push(b);
                }
                out.cells.push(h);
                out.cells.push(c);
            }
            Err(e) => out.cells.push(cell.record(format!("error: {e}"), BTreeMap::new())),
        }
    }
    let ratios: Vec<f64> = hot_d.iter().zip(&cold_d).map(|(a, b)| a / b).collect();
    out.aggregate("drift_ratio_per_seed", &ratios);
    out.put_opt(
        "drift_ratio",
        (hot_d.len() == spec.seeds.len() && !hot_d.is_empty()).then(|| mean(&hot_d) / mean(&cold_d)),
    );
    let at: Vec<f64> = out.cells.iter().filter_map(|c| c.metric("at_eos")).collect();
    out.put("eos_runs", at.iter().sum());
    Ok(())
}

fn e6_depth(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let depths = spec.sweep.depths.clone();
    let cells = grid_cells(spec, |b| {
        depths.iter().flat_map(|&l| eta_cells(spec, &b.with(|c| c.depth = l))).collect()
    });
    let cells = run_cells(&cells, |c| drift_cell(spec, ctx, c, false));
    let mut betas = Vec::new();
    for &l in &depths {
        let mine = select(&cells, |c| c.depth == l);
        let beta = drift_exponent(out, &mine, "drift_mean", &format!("drift_depth{l}")).map(|f| f.slope);
        out.put_opt(format!("beta_depth{l}"), beta);
        for pair in 1..l {
            if let Some(f) = power_fit(&seed_means(&mine, &format!("drift_{pair}"))) {
                out.put(format!("beta_depth{l}_pair{pair}"), f.slope);
            }
        }
        betas.push(beta);
    }
    if let (Some(Some(first)), Some(Some(last))) = (betas.first(), betas.last()) {
        out.put("beta_increase", last - first);
    } else {
        out.put_opt("beta_increase", None);
    }
    out.cells.splice(0..0, cells);
    Ok(())
}

/// Measured `|G|` per η and the crossover-formula prediction from the
/// initialization spectrum, for one seed and activation.
struct GPrediction {
    etas: Vec<f64>,
    measured: Vec<f64>,
    predicted: Vec<f64>,
    scale: f64,
}

fn predict_g(spec: &ExperimentSpec, ctx: &Ctx, base: &Cell) -> Result<(GPrediction, Vec<CellResult>)> {
    let ds = base.dataset(spec)?;
    let p0 = base.init(spec)?;
    let dspec = data_cov_spectrum(&ds)?;
    let lam = effective_spectrum(&p0, &ds, base.act, base.loss)?;
    let ck = predicted_ck_for(&p0, &ds, base.act, base.loss, &dspec)?;
    let cells = eta_cells(spec, base);
    let records = run_cells(&cells, |c| drift_cell(spec, ctx, c, false));
    let mut g = GPrediction {
        etas: Vec::new(),
        measured: Vec::new(),
        predicted: Vec::new(),
        scale: f64::NAN,
    };
    for r in records.iter().filter(|r| r.ok()) {
        if let Some(m) = r.metric("g_1") {
            let (pred, _) = crossover_sum(&SpectralModel::new(lam.clone(), ck.clone(), r.eta, base.steps)?)?;
            g.etas.push(r.eta);
            g.measured.push(m);
            g.predicted.push(pred);
        }
    }
    g.scale = fit_scale(&g.predicted, &g.measured)?;
    Ok((g, records))
}

fn e8_crossover(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    for act in spec.sweep.activations.clone() {
        let name = act.label();
        let bases: Vec<Cell> = spec.seeds.iter().map(|&s| Cell::base(spec, s).with(|c| c.act = act)).collect();
        let mut worst: Option<f64> = Some(0.0);
        let mut rows = Vec::new();
        for b in &bases {
            match predict_g(spec, ctx, b) {
                Ok((g, recs)) => {
                    out.cells.extend(recs);
                    if g.etas.len() < spec.etas().len() {
                        out.note(format!("{name} seed {}: {} of {} rates completed", b.seed, g.etas.len(), spec.etas().len()));
                        out.partial = true;
                    }
                    for i in 0..g.etas.len() {
                        let p = g.scale * g.predicted[i];
                        let err = (p - g.measured[i]).abs() / g.measured[i];
                        worst = worst.map(|w| w.max(err));
                        rows.push(vec![b.seed as f64, g.etas[i], g.measured[i], p, err]);
                    }
                }
                Err(e) => {
                    out.note(format!("{name} seed {}: {e}", b.seed));
                    worst = None;
                }
            }
        }
        let errs: Vec<f64> = rows.iter().map(|r| r[4]).collect();
        out.aggregate(format!("rel_error_{name}"), &errs);
        out.put_opt(format!("max_rel_error_{name}"), worst);
        out.plots.push(PlotSeries {
            name: format!("g_prediction_{name}"),
            columns: ["seed", "eta", "g_measured", "g_predicted", "rel_error"].map(String::from).to_vec(),
            rows,
            loglog: false,
            fit: None,
        });
    }
    Ok(())
}

fn e9_linear_relu(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let acts = spec.sweep.activations.clone();
    let cells = grid_cells(spec, |b| {
        acts.iter().flat_map(|&a| eta_cells(spec, &b.with(|c| c.act = a))).collect()
    });
    let cells = run_cells(&cells, |c| drift_cell(spec, ctx, c, false));
    let groups: Vec<Vec<&CellResult>> = acts.iter().map(|a| select(&cells, |c| c.activation == a.label())).collect();
    let common = common_etas(&groups, "drift_1");
    let mut betas = Vec::new();
    for (a, g) in acts.iter().zip(&groups) {
        let mine: Vec<&CellResult> = g.iter().copied().filter(|c| common.contains(&c.eta)).collect();
        let b = drift_exponent(out, &mine, "drift_1", &format!("drift_{}", a.label())).map(|f| f.slope);
        out.put_opt(format!("beta_{}", a.label()), b);
        betas.push(b);
    }
    match betas.as_slice() {
        [Some(x), Some(y)] => out.put("beta_gap", (x - y).abs()),
        _ => out.put_opt("beta_gap", None),
    }
    out.put("common_rates", common.len() as f64);

    let eta = spec.setting_or("switch_eta", 0.01);
    let sw_cells = grid_cells(spec, |b| {
        [Activation::Relu, Activation::Leaky(0.99)]
            .map(|a| {
                b.with(|c| {
                    c.act = a;
                    c.eta = eta;
                    c.tag = "switch".into();
                })
            })
            .to_vec()
    });
    let sw = run_cells(&sw_cells, |c| drift_cell(spec, ctx, c, true));
    let rate = |label: &str| -> Vec<f64> {
        sw.iter().filter(|c| c.activation == label).filter_map(|c| c.metric("switch_rate")).collect()
    };
    let (relu, leaky) = (rate("relu"), rate("leaky:0.99"));
    if !relu.is_empty() && !leaky.is_empty() {
        out.put("switch_rate_relu", mean(&relu));
        out.put("switch_rate_leaky", mean(&leaky));
        out.put("switch_rate_difference", mean(&relu) - mean(&leaky));
    }
    out.cells.extend(sw);
    out.cells.splice(0..0, cells);
    Ok(())
}

fn leaky_path(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let acts = spec.sweep.activations.clone();
    let cells = grid_cells(spec, |b| {
        acts.iter().flat_map(|&a| eta_cells(spec, &b.with(|c| c.act = a))).collect()
    });
    let cells = run_cells(&cells, |c| drift_cell(spec, ctx, c, true));
    let groups: Vec<Vec<&CellResult>> = acts.iter().map(|a| select(&cells, |c| c.activation == a.label())).collect();
    let common = common_etas(&groups, "drift_1");
    let mut slopes = Vec::new();
    let mut rows = Vec::new();
    for (a, g) in acts.iter().zip(&groups) {
        let mine: Vec<&CellResult> = g.iter().copied().filter(|c| common.contains(&c.eta)).collect();
        let slope = a.negative_slope();
        let beta = power_fit(&seed_means(&mine, "drift_1")).map(|f| f.slope);
        let rates: Vec<f64> = mine.iter().filter_map(|c| c.metric("switch_rate")).collect();
        let rate = if rates.is_empty() { f64::NAN } else { mean(&rates) };
        out.put_opt(format!("beta_a{slope}"), beta);
        if let Some(b) = beta {
            slopes.push((slope, b, rate));
            rows.push(vec![slope, b, rate]);
        }
    }
    if slopes.len() == acts.len() && slopes.len() >= 2 {
        let jumps = slopes.windows(2).map(|w| (w[1].1 - w[0].1).abs()).fold(0.0, f64::max);
        let bs: Vec<f64> = slopes.iter().map(|s| s.1).collect();
        let span = bs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - bs.iter().copied().fold(f64::INFINITY, f64::min);
        out.put("max_adjacent_beta_jump", jumps);
        out.put("beta_span", span);
        let xs: Vec<f64> = slopes.iter().map(|s| s.0).collect();
        out.put("beta_slope_correlation", pearson(&xs, &bs)?);
        let rates: Vec<f64> = slopes.iter().map(|s| s.2).collect();
        if rates.iter().all(|r| r.is_finite()) {
            out.put("beta_switch_correlation", pearson(&rates, &bs)?);
        }
    } else {
        out.put_opt("max_adjacent_beta_jump", None);
        out.put_opt("beta_span", None);
    }
    out.plots.push(PlotSeries {
        name: "beta_vs_slope".into(),
        columns: ["negative_slope", "beta", "switch_rate"].map(String::from).to_vec(),
        rows,
        loglog: false,
        fit: None,
    });
    out.cells.splice(0..0, cells);
    Ok(())
}

fn e12_factorial(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let (losses, widths, depths) = (spec.sweep.losses.clone(), spec.widths(), spec.sweep.depths.clone());
    let mut combos = Vec::new();
    for &l in &losses {
        for &w in &widths {
            for &d in &depths {
                combos.push((l, w, d));
            }
        }
    }
    let cells = grid_cells(spec, |b| {
        combos
            .iter()
            .flat_map(|&(l, w, d)| {
                eta_cells(
                    spec,
                    &b.with(|c| {
                        c.loss = l;
                        c.width = w;
                        c.depth = d;
                    }),
                )
            })
            .collect()
    });
    let cells = run_cells(&cells, |c| drift_cell(spec, ctx, c, false));
    let mut beta = BTreeMap::new();
    let mut rows = Vec::new();
    for (li, &(l, w, d)) in combos.iter().enumerate() {
        let mine = select(&cells, |c| c.loss == l.label() && c.width == w && c.depth == d);
        let key = format!("beta_{}_w{w}_L{d}", l.label());
        match power_fit(&seed_means(&mine, "drift_mean")) {
            Some(f) => {
                out.put(&key, f.slope);
                out.fit(&key, &f);
                beta.insert((l.label(), w, d), f.slope);
                rows.push(vec![li as f64, w as f64, d as f64, f.slope, f.r2]);
            }
            None => out.put_opt(key, None),
        }
    }
    out.plots.push(PlotSeries {
        name: "factorial_betas".into(),
        columns: ["combo", "width", "depth", "beta", "r2"].map(String::from).to_vec(),
        rows,
        loglog: false,
        fit: None,
    });
    if beta.len() != combos.len() {
        out.put_opt("interaction_fraction", None);
        return Ok(());
    }
    // Three-way ANOVA with one observation per cell: everything beyond the
    // main effects is interaction.
    let vals: Vec<f64> = beta.values().copied().collect();
    let grand = mean(&vals);
    let total: f64 = vals.iter().map(|v| (v - grand).powi(2)).sum();
    let main = |f: &dyn Fn(&(&'static str, usize, usize)) -> String| -> f64 {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (k, v) in &beta {
            groups.entry(f(k)).or_default().push(*v);
        }
        groups.values().map(|g| g.len() as f64 * (mean(g) - grand).powi(2)).sum()
    };
    let ss_loss = main(&|k| k.0.to_string());
    let ss_width = main(&|k| k.1.to_string());
    let ss_depth = main(&|k| k.2.to_string());
    let interaction = (total - ss_loss - ss_width - ss_depth).max(0.0);
    if total > 0.0 {
        out.put("main_fraction_loss", ss_loss / total);
        out.put("main_fraction_width", ss_width / total);
        out.put("main_fraction_depth", ss_depth / total);
        out.put("interaction_fraction", interaction / total);
    } else {
        out.put("interaction_fraction", 0.0);
    }
    out.cells.splice(0..0, cells);
    Ok(())
}

fn width_sweep(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let losses = if spec.sweep.losses.is_empty() {
        vec![spec.base.loss]
    } else {
        spec.sweep.losses.clone()
    };
    let widths = spec.widths();
    let cells = grid_cells(spec, |b| {
        losses
            .iter()
            .flat_map(|&l| {
                widths.iter().flat_map(move |&w| {
                    eta_cells(
                        spec,
                        &b.with(|c| {
                            c.loss = l;
                            c.width = w;
                        }),
                    )
                })
            })
            .collect()
    });
    let cells = run_cells(&cells, |c| drift_cell(spec, ctx, c, false));

    let mut table: BTreeMap<(&'static str, usize), FitResult> = BTreeMap::new();
    for &l in &losses {
        for &w in &widths {
            let mine = select(&cells, |c| c.loss == l.label() && c.width == w);
            let name = format!("drift_{}_w{w}", l.label());
            match drift_exponent(out, &mine, "drift_1", &name) {
                Some(f) => {
                    out.put(format!("beta_{}_w{w}", l.label()), f.slope);
                    out.put(format!("r2_{}_w{w}", l.label()), f.r2);
                    table.insert((l.label(), w), f);
                }
                None => out.put_opt(format!("beta_{}_w{w}", l.label()), None),
            }
        }
    }
    let series = |loss: &'static str| -> Option<Vec<(usize, FitResult)>> {
        widths.iter().map(|&w| table.get(&(loss, w)).map(|f| (w, *f))).collect()
    };
    let ce = series("ce");
    let mse = series("mse");
    if losses.contains(&LossKind::CrossEntropy) {
        match &ce {
            Some(v) => {
                out.put("ce_beta_min", v.iter().map(|p| p.1.slope).fold(f64::INFINITY, f64::min));
                out.put("ce_beta_max", v.iter().map(|p| p.1.slope).fold(f64::NEG_INFINITY, f64::max));
            }
            None => out.put_opt("ce_beta_min", None),
        }
    }
    if let Some(m) = &mse {
        let r2: Vec<f64> = m.iter().map(|p| p.1.r2).collect();
        out.flag("mse_r2_decreasing", r2.windows(2).all(|w| w[1] < w[0]));
        out.flag("r2_decreasing", r2.first() > r2.last());
        let excess: Vec<(f64, f64)> = m.iter().map(|(w, f)| (*w as f64, f.slope - 1.0)).collect();
        if excess.iter().all(|e| e.1 > 0.0) {
            if let Some(g) = power_fit(&excess) {
                out.put("growth_exponent", g.slope);
                out.fit("growth", &g);
                out.plots.push(PlotSeries {
                    name: "beta_excess_vs_width".into(),
                    columns: vec!["width".into(), "beta_minus_1".into()],
                    rows: excess.iter().map(|&(w, e)| vec![w, e]).collect(),
                    loglog: true,
                    fit: Some((g.slope, g.intercept)),
                });
            }
        } else {
            out.put_opt("growth_exponent", None);
            out.note("β − 1 is not positive at every width; growth law not fitted");
        }
    } else if losses.contains(&LossKind::Mse) {
        out.put_opt("mse_r2_decreasing", None);
    }
    if let (Some(c), Some(m)) = (&ce, &mse) {
        let gaps: Vec<f64> = c.iter().zip(m).map(|(a, b)| b.1.slope - a.1.slope).collect();
        for (w, g) in widths.iter().zip(&gaps) {
            out.put(format!("gap_w{w}"), *g);
        }
        out.put("mse_minus_ce_at_max_width", *gaps.last().expect("non-empty widths"));
        out.flag("gap_increasing", gaps.windows(2).all(|w| w[1] > w[0]));
    }
    out.cells.splice(0..0, cells);
    Ok(())
}

fn e15_switch(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let widths = spec.widths();
    let sub_eta = spec.setting_or("sub_eos_eta", 0.02);
    let cells = grid_cells(spec, |b| {
        widths
            .iter()
            .map(|&w| {
                b.with(|c| {
                    c.width = w;
                    c.eta = sub_eta;
                    c.tag = "sub".into();
                })
            })
            .collect()
    });
    let sub = run_cells(&cells, |c| drift_cell(spec, ctx, c, true));
    let mut pts = Vec::new();
    for &w in &widths {
        let r: Vec<f64> = sub.iter().filter(|c| c.width == w && c.ok()).filter_map(|c| c.metric("switch_rate")).collect();
        if r.len() == spec.seeds.len() && mean(&r) > 0.0 {
            out.put(format!("sub_eos_rate_w{w}"), mean(&r));
            pts.push((w as f64, mean(&r)));
        }
    }
    out.cells.extend(sub);
    match (pts.len() == widths.len()).then(|| power_fit(&pts)).flatten() {
        Some(f) => {
            out.put("sub_eos_exponent", f.slope);
            out.fit("sub_eos_rate", &f);
            out.plots.push(PlotSeries {
                name: "switch_rate_sub_eos".into(),
                columns: vec!["width".into(), "per_neuron_rate".into()],
                rows: pts.iter().map(|&(w, r)| vec![w, r]).collect(),
                loglog: true,
                fit: Some((f.slope, f.intercept)),
            });
        }
        None => out.put_opt("sub_eos_exponent", None),
    }

    let min_w = spec.setting_or("eos_min_width", 32.0) as usize;
    let eos_widths: Vec<usize> = widths.iter().copied().filter(|&w| w >= min_w).collect();
    let eos_cells = grid_cells(spec, |b| {
        eos_widths
            .iter()
            .map(|&w| {
                b.with(|c| {
                    c.width = w;
                    c.tag = "eos".into();
                })
            })
            .collect()
    });
    let eos = run_cells(&eos_cells, |cell| {
        let ds = cell.dataset(spec)?;
        let (eta, frac, at, trace) = find_eos_eta(spec, cell, &ds, true)?;
        let hot = cell.with(|c| c.eta = eta);
        ctx.save_trace(&hot.label(), &trace)?;
        let mut m = drift_metrics(&trace)?;
        m.insert("eos_fraction".into(), frac);
        m.insert("at_eos".into(), if at { 1.0 } else { 0.0 });
        Ok(hot.record(status_of(&trace), m))
    });
    let mut rates = Vec::new();
    let mut rows = Vec::new();
    for &w in &eos_widths {
        let mine: Vec<&CellResult> = eos.iter().filter(|c| c.width == w && c.ok()).collect();
        let r: Vec<f64> = mine.iter().filter_map(|c| c.metric("switch_rate")).collect();
        let not_at = mine.iter().filter(|c| c.metric("at_eos") != Some(1.0)).count();
        if not_at > 0 {
            out.note(format!("width {w}: {not_at} run(s) never met the EoS dwell criterion"));
        }
        if r.len() == spec.seeds.len() {
            out.put(format!("eos_rate_w{w}"), mean(&r));
            rates.push(mean(&r));
            rows.push(vec![w as f64, mean(&r)]);
        }
    }
    out.cells.extend(eos);
    if rates.len() == eos_widths.len() && !rates.is_empty() {
        let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
        out.put("eos_rate_ratio", hi / lo);
    } else {
        out.put_opt("eos_rate_ratio", None);
    }
    out.plots.push(PlotSeries {
        name: "switch_rate_eos".into(),
        columns: vec!["width".into(), "per_neuron_rate".into()],
        rows,
        loglog: true,
        fit: None,
    });
    Ok(())
}

fn e16_time_hessian(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let t_snap = spec.setting_or("snapshot_step", 250.0) as usize;
    let cells = grid_cells(spec, |b| eta_cells(spec, b));
    let cells = run_cells(&cells, |cell| {
        let ds = cell.dataset(spec)?;
        let p0 = cell.init(spec)?;
        let dspec = data_cov_spectrum(&ds)?;
        let mut at_snap: Option<MlpParams> = None;
        let trace = train_observed(p0.clone(), &cell.config(spec), &ds, &mut |t, p| {
            if t == t_snap {
                at_snap = Some(p.clone());
            }
            Ok(())
        })?;
        ctx.save_trace(&cell.label(), &trace)?;
        let mut m = drift_metrics(&trace)?;
        let predict = |p: &MlpParams| -> Result<f64> {
            let lam = effective_spectrum(p, &ds, cell.act, cell.loss)?;
            let ck = predicted_ck_for(p, &ds, cell.act, cell.loss, &dspec)?;
            Ok(crossover_sum(&SpectralModel::new(lam, ck, cell.eta, cell.steps)?)?.0)
        };
        m.insert("g_pred_init".into(), predict(&p0)?);
        if let Some(p) = &at_snap {
            m.insert("g_pred_snapshot".into(), predict(p)?);
        }
        Ok(cell.record(status_of(&trace), m))
    });
    // Correlation in log space across η, per seed, then averaged.
    for (key, name) in [("g_pred_snapshot", "r_t250"), ("g_pred_init", "r_init")] {
        let mut rs = Vec::new();
        for &s in &spec.seeds {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.seed == s && c.ok()).collect();
            let pairs: Vec<(f64, f64)> = mine
                .iter()
                .filter_map(|c| Some((c.metric(key)?.ln(), c.metric("g_1")?.ln())))
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .collect();
            if pairs.len() >= 3 {
                let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                rs.push(pearson(&a, &b)?);
            }
        }
        out.aggregate(name, &rs);
        out.put_opt(name, (rs.len() == spec.seeds.len()).then(|| mean(&rs)));
    }
    out.note(format!("log-log Pearson correlation across η; snapshot at t = {t_snap}"));
    out.cells.splice(0..0, cells);
    Ok(())
}

fn e18_compression(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let stride = spec.setting_or("lambda_stride", 20.0) as usize;
    let ns = if spec.sweep.ns.is_empty() { vec![spec.data.n] } else { spec.sweep.ns.clone() };
    let cells = grid_cells(spec, |b| ns.iter().map(|&n| b.with(|c| c.n = n)).collect());
    let cells = run_cells(&cells, |cell| {
        let ds = cell.dataset(spec)?;
        let (prof, trace) = track_compression(&cell.config(spec), &ds, stride, SnapshotMode::MatrixFree)?;
        ctx.save_trace(&cell.label(), &trace)?;
        ctx.save_with(&format!("compression_{}", cell.label()), |w| prof.write_csv(w))?;
        let mut m = drift_metrics(&trace)?;
        if let Some(r) = prof.compression_ratio() {
            m.insert("compression_ratio".into(), r);
        }
        if let (Some(t), Some(r2)) = (prof.tau, prof.fit_r2) {
            m.insert("tau".into(), t);
            m.insert("tau_r2".into(), r2);
        }
        m.insert("bound_violations".into(), prof.bound_violations() as f64);
        m.insert("snapshots".into(), prof.snapshots.len() as f64);
        if let (Some(a), Some(b)) = (prof.snapshots.first(), prof.snapshots.last()) {
            m.insert("lambda_init".into(), a.lambda_max);
            m.insert("lambda_final".into(), b.lambda_max);
            m.insert("q_margin_final_fraction".into(), b.q_margin / a.q_margin);
            m.insert("q_min_final".into(), b.q_min);
            m.insert("q_min_initial".into(), a.q_min);
        }
        Ok(cell.record(status_of(&trace), m))
    });
    let at_n = |n: usize, key: &str| -> Option<f64> {
        let v: Vec<f64> = cells.iter().filter(|c| c.n == n && c.ok()).filter_map(|c| c.metric(key)).collect();
        (v.len() == spec.seeds.len()).then(|| mean(&v))
    };
    let base_n = spec.data.n;
    let main_n = if ns.contains(&base_n) { base_n } else { ns[0] };
    for key in ["compression_ratio", "q_margin_final_fraction", "q_min_final", "lambda_init", "lambda_final"] {
        out.put_opt(key, at_n(main_n, key));
    }
    let taus: Vec<Option<f64>> = ns.iter().map(|&n| at_n(n, "tau")).collect();
    let mut rows = Vec::new();
    for (&n, t) in ns.iter().zip(&taus) {
        out.put_opt(format!("tau_n{n}"), *t);
        if let Some(t) = t {
            rows.push(vec![n as f64, *t]);
        }
    }
    match taus.iter().copied().collect::<Option<Vec<f64>>>() {
        Some(t) if !t.is_empty() => {
            let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
            out.put("tau_spread", (hi - lo) / lo);
        }
        _ => out.put_opt("tau_spread", None),
    }
    let violations: f64 = cells.iter().filter_map(|c| c.metric("bound_violations")).sum();
    out.put("bound_violations", violations);
    out.plots.push(PlotSeries {
        name: "tau_vs_n".into(),
        columns: vec!["n".into(), "tau".into()],
        rows,
        loglog: true,
        fit: None,
    });
    out.cells.splice(0..0, cells);
    Ok(())
}

fn ck_validation(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let edge = spec.setting("edge_factor");
    struct Job {
        cell: Cell,
        edge: bool,
    }
    let mut jobs = Vec::new();
    for &s in &spec.seeds {
        let b = Cell::base(spec, s);
        for c in eta_cells(spec, &b) {
            jobs.push(Job { cell: c, edge: false });
        }
        if edge.is_some() {
            jobs.push(Job {
                cell: b.with(|c| c.tag = "edge".into()),
                edge: true,
            });
        }
    }
    let records: Vec<CellResult> = jobs
        .par_iter()
        .map(|job| {
            let run = || -> Result<CellResult> {
                let ds = job.cell.dataset(spec)?;
                let p0 = job.cell.init(spec)?;
                let dspec = data_cov_spectrum(&ds)?;
                let lam = effective_spectrum(&p0, &ds, job.cell.act, job.cell.loss)?;
                let cell = if job.edge {
                    job.cell.with(|c| c.eta = edge.unwrap_or(1.8) / lam[0])
                } else {
                    job.cell.clone()
                };
                let pred = predicted_ck(&p0, &ds, cell.act, &dspec)?;
                let (emp, trace) = empirical_ck(p0, &cell.config(spec), &ds, &dspec, &lam)?;
                ctx.save_trace(&cell.label(), &trace)?;
                let cmp = compare_ck(&pred, &emp.ck)?;
                if cell.seed == spec.seeds[0] {
                    let (_, modes) = crossover_sum(&SpectralModel::new(lam.clone(), cmp.predicted.clone(), cell.eta, cell.steps)?)?;
                    ctx.save_with(&format!("modes_{}", cell.label()), |w| {
                        write_mode_table(w, &lam, &cmp.predicted, &cmp.empirical, &modes)
                    })?;
                }
                let mut m = drift_metrics(&trace)?;
                m.insert("r".into(), cmp.r);
                m.insert("eta_lambda_max".into(), cell.eta * lam[0]);
                Ok(cell.record(status_of(&trace), m))
            };
            run().unwrap_or_else(|e| job.cell.record(format!("error: {e}"), BTreeMap::new()))
        })
        .collect();
    out.cells = records;

    let mut groups: Vec<(String, Vec<f64>)> = spec.etas().iter().map(|e| (format!("{e:.3e}"), Vec::new())).collect();
    if edge.is_some() {
        groups.push(("edge".into(), Vec::new()));
    }
    for c in out.cells.iter().filter(|c| c.ok()) {
        let key = if c.label.starts_with("edge") { "edge".to_string() } else { format!("{:.3e}", c.eta) };
        if let (Some(g), Some(r)) = (groups.iter_mut().find(|g| g.0 == key), c.metric("r")) {
            g.1.push(r);
        }
    }
    let mut r_min: Option<f64> = Some(f64::INFINITY);
    for (key, rs) in &groups {
        out.aggregate(format!("r_eta_{key}"), rs);
        if rs.len() == spec.seeds.len() {
            let m = mean(rs);
            out.put(format!("r_eta_{key}"), m);
            r_min = r_min.map(|x| x.min(m));
        } else {
            out.note(format!("η {key}: {} of {} seeds produced a correlation", rs.len(), spec.seeds.len()));
            r_min = None;
        }
    }
    out.put_opt("r_min", r_min);
    out.note("R per learning rate is the seed mean of per-run Pearson correlations");
    Ok(())
}

fn e22_transition(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let r2_thr = spec.setting_or("r2_threshold", 0.95);
    let curv_thr = spec.setting_or("curvature_threshold", 0.1);
    let (dims, widths) = (spec.sweep.dims.clone(), spec.widths());
    let cells = grid_cells(spec, |b| {
        dims.iter()
            .flat_map(|&d| {
                widths.iter().flat_map(move |&w| {
                    eta_cells(
                        spec,
                        &b.with(|c| {
                            c.d = d;
                            c.width = w;
                        }),
                    )
                })
            })
            .collect()
    });
    let cells = run_cells(&cells, |c| drift_cell(spec, ctx, c, false));
    let mut ratios = Vec::new();
    let mut rows = Vec::new();
    for &d in &dims {
        let mut w_star = None;
        for &w in &widths {
            let mine = select(&cells, |c| c.d == d && c.width == w);
            if let Some(f) = power_fit(&seed_means(&mine, "drift_1")) {
                out.put(format!("r2_d{d}_w{w}"), f.r2);
                out.put(format!("curvature_d{d}_w{w}"), f.loglog_curvature);
                rows.push(vec![d as f64, w as f64, f.slope, f.r2, f.loglog_curvature]);
                if w_star.is_none() && (f.r2 < r2_thr || f.loglog_curvature > curv_thr) {
                    w_star = Some(w);
                }
            }
        }
        match w_star {
            Some(w) => {
                out.put(format!("w_star_d{d}"), w as f64);
                out.put(format!("w_over_d_d{d}"), w as f64 / d as f64);
                ratios.push(Some(w as f64 / d as f64));
            }
            None => {
                out.note(format!("d = {d}: no transition inside the width grid"));
                ratios.push(None);
            }
        }
    }
    match ratios.into_iter().collect::<Option<Vec<f64>>>() {
        Some(r) => out.flag("w_over_d_decreasing", r.windows(2).all(|w| w[1] < w[0])),
        None => out.put_opt("w_over_d_decreasing", None),
    }
    out.plots.push(PlotSeries {
        name: "transition_grid".into(),
        columns: ["d", "width", "beta", "r2", "curvature"].map(String::from).to_vec(),
        rows,
        loglog: false,
        fit: None,
    });
    out.cells.splice(0..0, cells);
    Ok(())
}

fn e23_tau(spec: &ExperimentSpec, ctx: &Ctx, out: &mut Output) -> Result<()> {
    let stride = spec.setting_or("lambda_stride", 10.0) as usize;
    let cells = grid_cells(spec, |b| eta_cells(spec, b));
    let cells = run_cells(&cells, |cell| {
        let ds = cell.dataset(spec)?;
        let (prof, trace) = track_compression(&cell.config(spec), &ds, stride, SnapshotMode::MatrixFree)?;
        ctx.save_trace(&cell.label(), &trace)?;
        ctx.save_with(&format!("compression_{}", cell.label()), |w| prof.write_csv(w))?;
        let mut m = drift_metrics(&trace)?;
        if let (Some(t), Some(r2)) = (prof.tau, prof.fit_r2) {
            m.insert("tau".into(), t);
            m.insert("tau_r2".into(), r2);
        }
        m.insert("bound_violations".into(), prof.bound_violations() as f64);
        Ok(cell.record(status_of(&trace), m))
    });
    let mut pts = Vec::new();
    for eta in spec.etas() {
        let t: Vec<f64> = cells.iter().filter(|c| c.eta == eta && c.ok()).filter_map(|c| c.metric("tau")).collect();
        if t.len() == spec.seeds.len() {
            out.put(format!("tau_eta{eta}"), mean(&t));
            pts.push((1.0 / eta, mean(&t)));
        }
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    match (pts.len() == spec.etas().len()).then(|| fit_linear(&xs, &ys).ok()).flatten() {
        Some(f) => {
            out.put("tau_slope", f.slope);
            out.put("tau_intercept", f.intercept);
            out.put("tau_fit_r2", f.r2);
            out.fit("tau_vs_inverse_eta", &f);
        }
        None => {
            for k in ["tau_slope", "tau_intercept", "tau_fit_r2"] {
                out.put_opt(k, None);
            }
        }
    }
    let tau_eta: Vec<f64> = pts.iter().map(|(x, y)| y / x).collect();
    out.aggregate("tau_times_eta", &tau_eta);
    out.plots.push(PlotSeries {
        name: "tau_vs_inverse_eta".into(),
        columns: vec!["inverse_eta".into(), "tau".into()],
        rows: pts.iter().map(|&(x, y)| vec![x, y]).collect(),
        loglog: false,
        fit: None,
    });
    out.cells.splice(0..0, cells);
    Ok(())
}
