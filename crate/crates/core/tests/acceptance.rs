//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Every tolerance below is pinned here, independently of the registry's
//! declared targets, so a registry edit cannot silently loosen a criterion.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use conslab::data::gen_gaussian_mixture;
use conslab::experiments::{run_experiment, run_spec, spec_for, ExperimentResult, Overrides, RunOptions};
use conslab::model::{init_kaiming_balanced, Activation};
use conslab::spectral::compression_bound;
use conslab::theory::{crossover_sum, SpectralModel};
use conslab::training::{loss_and_grads, LossKind, TrainConfig};

const MIN: u64 = 60;

struct Verdict {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn all(parts: Vec<Verdict>) -> Verdict {
    Verdict {
        pass: parts.iter().all(|v| v.pass),
        detail: parts
            .iter()
            .map(|v| format!("{}{}", if v.pass { "" } else { "✗ " }, v.detail))
            .collect::<Vec<_>>()
            .join("; "),
    }
}

fn within_budget(elapsed: Duration, budget_s: u64) -> Verdict {
    check(
        elapsed.as_secs_f64() < budget_s as f64,
        format!("runtime {:.1}s < {budget_s}s", elapsed.as_secs_f64()),
    )
}

fn opts() -> RunOptions {
    RunOptions {
        write_traces: true,
        ..RunOptions::default()
    }
}

fn run(id: &str, out: &Path) -> Result<ExperimentResult, String> {
    run_experiment(id, &Overrides::default(), out, &opts()).map_err(|e| format!("{id}: {e}"))
}

fn metric(r: &ExperimentResult, key: &str) -> Result<f64, String> {
    r.metric(key).ok_or_else(|| format!("{}: metric {key} missing", r.id))
}

fn c1_flow(out: &Path) -> Result<Verdict, String> {
    let t = Instant::now();
    let r = run("E1", out)?;
    let drift = metric(&r, "max_relative_flow_drift")?;
    Ok(all(vec![
        check(drift < 3e-5, format!("max relative |ΔC| {drift:.3e} < 3e-5")),
        within_budget(t.elapsed(), 2 * MIN),
    ]))
}

fn c2_identity(out: &Path) -> Result<Verdict, String> {
    let t = Instant::now();
    let r = run("E2", out)?;
    let free = metric(&r, "bias_free_identity_residual")?;
    let bias = metric(&r, "bias_identity_residual")?;
    let runs = r.cells.iter().filter(|c| !c.label.ends_with("_bias") && c.ok()).count();
    Ok(all(vec![
        check(runs >= 5, format!("{runs} bias-free runs")),
        check(free <= 1e-8, format!("bias-free residual {free:.2e} <= 1e-8")),
        check(bias > 10.0 * 1e-8, format!("with-bias residual {bias:.2e} > 1e-7")),
        within_budget(t.elapsed(), MIN),
    ]))
}

/// η values at which every seed completed.
fn completed_etas(r: &ExperimentResult) -> Vec<f64> {
    let mut by_eta: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for c in r.cells.iter().filter(|c| c.ok()) {
        by_eta.entry(c.eta.to_bits()).or_insert((c.eta, 0)).1 += 1;
    }
    by_eta
        .values()
        .filter(|(_, k)| *k == r.config.seeds.len())
        .map(|(e, _)| *e)
        .collect()
}

fn c3_drift_law(out: &Path) -> Result<Verdict, String> {
    let t = Instant::now();
    let r = run("E5", out)?;
    let beta = metric(&r, "beta")?;
    let r2 = metric(&r, "r2")?;
    let etas = completed_etas(&r);
    let lo = etas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = etas.iter().copied().fold(0.0, f64::max);
    let decades = (hi / lo).log10();
    Ok(all(vec![
        check((1.0..=1.35).contains(&beta), format!("β {beta:.3} in [1.0, 1.35]")),
        check(r2 > 0.97, format!("R² {r2:.4} > 0.97")),
        check(decades >= 3.0, format!("{decades:.2} decades of η")),
        check(r.config.seeds.len() >= 5, format!("{} seeds", r.config.seeds.len())),
        within_budget(t.elapsed(), 10 * MIN),
    ]))
}

fn c4_linear_relu(out: &Path) -> Result<Verdict, String> {
    let t = Instant::now();
    let r = run("E9", out)?;
    let lin = metric(&r, "beta_linear")?;
    let relu = metric(&r, "beta_relu")?;
    let gap = (lin - relu).abs();
    Ok(all(vec![
        check(gap <= 0.15, format!("|β_lin − β_relu| = |{lin:.3} − {relu:.3}| = {gap:.3} <= 0.15")),
        within_budget(t.elapsed(), 10 * MIN),
    ]))
}

/// Direct summation of `Σ_k c_k Σ_t (1 − ηλ_k)^{2t}`.
fn brute_force(lams: &[f64], cs: &[f64], eta: f64, steps: usize) -> f64 {
    lams.iter()
        .zip(cs)
        .map(|(l, c)| {
            let r2 = (1.0 - eta * l) * (1.0 - eta * l);
            let mut term = 1.0;
            let mut s = 0.0;
            for _ in 0..steps {
                s += term;
                term *= r2;
            }
            c * s
        })
        .sum()
}

fn c5_crossover_exact() -> Result<Verdict, String> {
    let t = Instant::now();
    let model = (1usize..12, 1usize..1000, -4.0f64..-0.5).prop_flat_map(|(k, steps, log_eta)| {
        (
            // ηλ_k log-uniform in [1e-6, 1.99).
            prop::collection::vec(-6.0f64..0.2988, k),
            prop::collection::vec(0.0f64..10.0, k),
            Just(steps),
            Just(10f64.powf(log_eta)),
        )
    });
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let worst = Cell::new(0.0f64);
    let res = runner.run(&model, |(log_x, cs, steps, eta)| {
        let lams: Vec<f64> = log_x.iter().map(|lx| 10f64.powf(*lx) / eta).collect();
        let m = SpectralModel::new(lams.clone(), cs.clone(), eta, steps).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let (g, _) = crossover_sum(&m).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let want = brute_force(&lams, &cs, eta, steps);
        let rel = if want == 0.0 { g.abs() } else { (g - want).abs() / want.abs() };
        worst.set(worst.get().max(rel));
        prop_assert!(rel <= 1e-12, "closed form {g} vs direct {want}");
        Ok(())
    });
    Ok(all(vec![
        check(res.is_ok(), format!("1000 random models, worst relative error {:.2e} <= 1e-12", worst.get())),
        within_budget(t.elapsed(), 10),
    ]))
}

fn c6_crossover_measured(out: &Path) -> Result<Verdict, String> {
    let t = Instant::now();
    let r = run("E8", out)?;
    let lin = metric(&r, "max_rel_error_linear")?;
    let relu = metric(&r, "max_rel_error_relu")?;
    Ok(all(vec![
        check(lin <= 0.40, format!("linear max error {:.1}% <= 40%", 100.0 * lin)),
        check(relu <= 0.45, format!("ReLU max error {:.1}% <= 45%", 100.0 * relu)),
        within_budget(t.elapsed(), 15 * MIN),
    ]))
}

fn c7_mode_coefficients(out: &Path) -> Result<Verdict, String> {
    let t = Instant::now();
    let lin = run("E20", out)?;
    let relu = run("E21", out)?;
    let r_lin = metric(&lin, "r_min")?;
    let r_relu = metric(&relu, "r_min")?;
    let edge = relu
        .cells
        .iter()
        .filter_map(|c| c.metric("eta_lambda_max"))
        .fold(0.0, f64::max);
    Ok(all(vec![
        check(r_lin >= 0.7, format!("linear R {r_lin:.3} >= 0.7")),
        check(r_relu >= 0.6, format!("ReLU min R over η {r_relu:.3} >= 0.6")),
        check(edge >= 1.5, format!("ReLU grid reaches ηλ_max = {edge:.2}")),
        within_budget(t.elapsed(), 15 * MIN),
    ]))
}

fn c8_compression_bound(tracked: &[&ExperimentResult]) -> Result<Verdict, String> {
    let mut violations = 0.0;
    let mut runs = 0;
    for r in tracked {
        for c in &r.cells {
            if let Some(v) = c.metric("bound_violations") {
                violations += v;
                runs += 1;
            }
        }
    }
    // Dense re-check along fresh CE trajectories.
    let mut dense = 0;
    let mut dense_bad = 0;
    for (seed, width, eta) in [(1u64, 8usize, 0.5), (2, 16, 1.0), (3, 12, 2.0)] {
        let ds = gen_gaussian_mixture(40, 6, 3, 2.0, seed).map_err(|e| e.to_string())?;
        let cfg = TrainConfig::new(vec![6, width, 3], Activation::Relu, LossKind::CrossEntropy, eta, 200, seed);
        let mut p = init_kaiming_balanced(&cfg.widths, seed, false).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let (lam, rhs) = compression_bound(&p, &ds, Activation::Relu).map_err(|e| e.to_string())?;
            dense += 1;
            if lam > rhs + 1e-8 {
                dense_bad += 1;
            }
            let mut c = cfg.clone();
            c.steps = 40;
            p = conslab::training::train_from(p, &c, &ds).map_err(|e| e.to_string())?.final_params;
        }
    }
    Ok(all(vec![
        check(
            runs > 0 && violations == 0.0,
            format!("{violations} violations over {runs} tracked CE runs"),
        ),
        check(dense_bad == 0, format!("{dense_bad} of {dense} dense checkpoints violate")),
    ]))
}

fn c9_compression(r: &ExperimentResult, elapsed: Duration) -> Result<Verdict, String> {
    let ratio = metric(r, "compression_ratio")?;
    let spread = metric(r, "tau_spread");
    let taus: Vec<String> = [100, 200, 400]
        .iter()
        .map(|n| format!("{}", r.metric(&format!("tau_n{n}")).map_or("—".into(), |t| format!("{t:.0}"))))
        .collect();
    Ok(all(vec![
        check(ratio <= 0.1, format!("λ_final/λ_init {ratio:.4} <= 0.1")),
        match spread {
            Ok(s) => check(s <= 0.3, format!("τ(n=100/200/400) = {} spread {:.0}% <= 30%", taus.join("/"), 100.0 * s)),
            Err(e) => check(false, e),
        },
        within_budget(elapsed, 20 * MIN),
    ]))
}

fn c10_tau_law(r: &ExperimentResult, elapsed: Duration) -> Result<Verdict, String> {
    let r2 = metric(r, "tau_fit_r2")?;
    let slope = metric(r, "tau_slope")?;
    let intercept = r.metric("tau_intercept").unwrap_or(f64::NAN);
    Ok(all(vec![
        check(r2 >= 0.9, format!("τ vs 1/η R² {r2:.4} >= 0.9")),
        check(
            (1.33 / 2.0..=1.33 * 2.0).contains(&slope),
            format!("slope {slope:.2} within 2× of 1.33 (intercept {intercept:.1})"),
        ),
        within_budget(elapsed, 20 * MIN),
    ]))
}

fn c11_ce_clamping(out: &Path) -> Result<Verdict, String> {
    let t = Instant::now();
    let r = run("E17", out)?;
    let mut parts = Vec::new();
    let mut ce = Vec::new();
    let mut mse_r2 = Vec::new();
    for w in [16, 64, 192] {
        ce.push(metric(&r, &format!("beta_ce_w{w}"))?);
        mse_r2.push(metric(&r, &format!("r2_mse_w{w}"))?);
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    parts.push(check(
        ce.iter().all(|b| (0.85..=1.25).contains(b)),
        format!("CE β (16/64/192) {} in [0.85, 1.25]", fmt(&ce)),
    ));
    let mse192 = metric(&r, "beta_mse_w192")?;
    parts.push(check(
        mse192 - ce[2] >= 0.3,
        format!("MSE β at 192 {mse192:.3} exceeds CE by {:.3} >= 0.3", mse192 - ce[2]),
    ));
    parts.push(check(
        mse_r2.windows(2).all(|w| w[1] < w[0]),
        format!("MSE R² {} decreasing", fmt(&mse_r2)),
    ));
    parts.push(within_budget(t.elapsed(), 30 * MIN));
    Ok(all(parts))
}

fn c12_switch_rates(out: &Path) -> Result<Verdict, String> {
    let t = Instant::now();
    let r = run("E15", out)?;
    let exp = metric(&r, "sub_eos_exponent")?;
    let ratio = metric(&r, "eos_rate_ratio")?;
    Ok(all(vec![
        check((-0.8..=-0.2).contains(&exp), format!("sub-EoS exponent {exp:.3} in [−0.8, −0.2]")),
        check(ratio < 2.0, format!("at-EoS rate max/min over widths 32–256 {ratio:.2} < 2")),
        within_budget(t.elapsed(), 20 * MIN),
    ]))
}

fn finite_difference_check(
    widths: &[usize],
    act: Activation,
    loss: LossKind,
    bias: bool,
    seed: u64,
) -> Result<f64, String> {
    let e = |x: conslab::Error| x.to_string();
    let ds = gen_gaussian_mixture(7, widths[0], *widths.last().unwrap(), 2.0, seed).map_err(e)?;
    let mut p = init_kaiming_balanced(widths, seed, bias).map_err(e)?;
    if let Some(b) = p.biases.as_mut() {
        // Non-zero biases exercise their gradient path.
        for (l, v) in b.iter_mut().enumerate() {
            for (i, x) in v.iter_mut().enumerate() {
                *x = 0.1 * ((l * 7 + i * 3) as f64).sin();
            }
        }
    }
    let (_, g) = loss_and_grads(&p, &ds, act, loss).map_err(e)?;
    let analytic = g.to_flat();
    let theta = p.to_flat();
    let h = 1e-5;
    let mut num = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut tp = theta.clone();
        tp[i] += h;
        let mut tm = theta.clone();
        tm[i] -= h;
        let lp = loss_and_grads(&p.with_flat(&tp).map_err(e)?, &ds, act, loss).map_err(e)?.0;
        let lm = loss_and_grads(&p.with_flat(&tm).map_err(e)?, &ds, act, loss).map_err(e)?.0;
        num.push((lp - lm) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(diff / norm.max(1e-300))
}

fn c13_gradients() -> Result<Verdict, String> {
    let t = Instant::now();
    let cfg = (2usize..=8, prop::collection::vec(2usize..6, 9), 0usize..3, any::<bool>(), any::<bool>(), 0u64..1000);
    let mut runner = TestRunner::new(Config {
        cases: 20,
        failure_persistence: None,
        ..Config::default()
    });
    let worst = Cell::new(0.0f64);
    let depths = RefCell::new(std::collections::BTreeSet::new());
    let res = runner.run(&cfg, |(depth, dims, act, ce, bias, seed)| {
        let widths: Vec<usize> = dims[..=depth].to_vec();
        let act = [Activation::Linear, Activation::Relu, Activation::Leaky(0.1)][act];
        let loss = if ce { LossKind::CrossEntropy } else { LossKind::Mse };
        let rel = finite_difference_check(&widths, act, loss, bias, seed).map_err(TestCaseError::fail)?;
        worst.set(worst.get().max(rel));
        depths.borrow_mut().insert(depth);
        prop_assert!(rel <= 1e-6, "depth {depth} {act:?} {loss:?}: relative error {rel:.2e}");
        Ok(())
    });
    Ok(all(vec![
        check(
            res.is_ok(),
            format!("20 random configs (depths {:?}), worst relative error {:.2e} <= 1e-6", depths.borrow(), worst.get()),
        ),
        within_budget(t.elapsed(), MIN),
    ]))
}

fn strip_timestamps(path: &Path) -> Result<String, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    v.as_object_mut().ok_or("results.json is not an object")?.remove("timestamps");
    Ok(v.to_string())
}

fn c14_determinism() -> Result<Verdict, String> {
    let mut parts = Vec::new();
    let mut tracked = spec_for("E23").map_err(|e| e.to_string())?;
    tracked.base.steps = 300;
    tracked.sweep.etas.truncate(2);
    for spec in [spec_for("E2").map_err(|e| e.to_string())?, tracked] {
        let a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let b = tempfile::tempdir().map_err(|e| e.to_string())?;
        let one = RunOptions { jobs: 1, ..opts() };
        let four = RunOptions { jobs: 4, ..opts() };
        run_spec(&spec, Some(a.path()), &one).map_err(|e| e.to_string())?;
        run_spec(&spec, Some(b.path()), &four).map_err(|e| e.to_string())?;
        let ja = strip_timestamps(&a.path().join(&spec.id).join("results.json"))?;
        let jb = strip_timestamps(&b.path().join(&spec.id).join("results.json"))?;
        parts.push(check(
            ja == jb,
            format!("{} results.json identical across reruns (1 vs 4 workers, {} bytes)", spec.id, ja.len()),
        ));
    }
    Ok(all(parts))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let out = dir.path();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, v: Result<Verdict, String>| {
        let v = v.unwrap_or_else(|e| check(false, format!("error: {e}")));
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} [{}] {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    };

    report(1, "conservation under flow", c1_flow(out));
    report(2, "exact drift identity", c2_identity(out));
    report(3, "drift scaling law", c3_drift_law(out));
    report(4, "linear ≈ ReLU exponent", c4_linear_relu(out));
    report(5, "crossover formula exactness", c5_crossover_exact());
    report(6, "crossover formula vs measurement", c6_crossover_measured(out));
    report(7, "mode coefficients", c7_mode_coefficients(out));

    let t18 = Instant::now();
    let e18 = run("E18", out);
    let d18 = t18.elapsed();
    let t23 = Instant::now();
    let e23 = run("E23", out);
    let d23 = t23.elapsed();
    let tracked: Vec<&ExperimentResult> = [&e18, &e23].into_iter().filter_map(|r| r.as_ref().ok()).collect();
    report(8, "compression bound", c8_compression_bound(&tracked));
    report(9, "CE spectral compression", e18.clone().and_then(|r| c9_compression(&r, d18)));
    report(10, "timescale law", e23.clone().and_then(|r| c10_tau_law(&r, d23)));

    report(11, "CE clamping vs MSE divergence", c11_ce_clamping(out));
    report(12, "switch-rate scaling", c12_switch_rates(out));
    report(13, "gradient correctness", c13_gradients());
    report(14, "determinism", c14_determinism());

    println!("acceptance: {} of 14 criteria pass", 14 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
