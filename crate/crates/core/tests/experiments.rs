use conslab::experiments::{
    load_result, registry, run_spec, spec_for, ExperimentSpec, ResultStatus, RunOptions, SuiteReport, EXPERIMENT_IDS,
};

/// Shrinks a registered spec to a seconds-scale smoke configuration.
fn tiny(id: &str) -> ExperimentSpec {
    let mut s = spec_for(id).unwrap();
    s.seeds.truncate(1);
    s.base.steps = s.base.steps.min(30);
    let keep = |v: &mut Vec<f64>| {
        if v.len() > 3 {
            *v = vec![v[0], v[v.len() / 2], v[v.len() - 1]];
        }
    };
    keep(&mut s.sweep.etas);
    s.sweep.widths.truncate(2);
    s.sweep.depths.truncate(2);
    s.sweep.ns.truncate(2);
    s.sweep.dims.truncate(2);
    s.base.width = s.base.width.min(32);
    for (k, v) in [("flow_duration", 0.005), ("bisection_steps", 2.0), ("snapshot_step", 10.0)] {
        if s.settings.contains_key(k) {
            s.settings.insert(k.into(), v);
        }
    }
    s
}

fn opts() -> RunOptions {
    RunOptions {
        jobs: 2,
        write_traces: true,
        svg: true,
    }
}

#[test]
fn every_experiment_runs_on_a_tiny_spec() {
    for id in EXPERIMENT_IDS {
        let spec = tiny(id);
        let r = run_spec(&spec, None, &opts()).unwrap_or_else(|e| panic!("{id}: {e}"));
        assert_eq!(r.id, id);
        assert!(!r.cells.is_empty(), "{id}: no cells");
        for c in &r.cells {
            assert!(!c.status.starts_with("error"), "{id}: {} {}", c.label, c.status);
        }
        assert_eq!(r.targets.len(), spec.targets.len());
        for t in &r.targets {
            if let Some(v) = t.measured {
                assert!(v.is_finite(), "{id}: {} = {v}", t.target.metric);
            }
        }
    }
}

#[test]
fn output_layout_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny("E5");
    let r = run_spec(&spec, Some(dir.path()), &opts()).unwrap();
    let exp = dir.path().join("E5");
    let config: ExperimentSpec = serde_json::from_str(&std::fs::read_to_string(exp.join("config.json")).unwrap()).unwrap();
    assert_eq!(config, spec);
    let back = load_result(&exp).unwrap();
    assert_eq!(back, r);
    let traces: Vec<_> = std::fs::read_dir(&exp)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("trace_") && n.ends_with(".csv"))
        .collect();
    assert_eq!(traces.len(), spec.sweep.etas.len());
    assert!(exp.join("plots/drift_vs_eta.csv").is_file());
    assert!(exp.join("plots/drift_vs_eta.svg").is_file());

    let report = SuiteReport::scan(dir.path()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].checks.len(), spec.targets.len());
}

#[test]
fn results_record_every_cell_and_target() {
    let spec = tiny("E9");
    let r = run_spec(&spec, None, &opts()).unwrap();
    // activations × rates, plus the two switch-rate runs.
    assert_eq!(r.cells.len(), spec.sweep.activations.len() * spec.sweep.etas.len() + 2);
    assert!(r.metric("switch_rate_difference").is_some());
    let report_only = r.targets.iter().find(|t| t.target.metric == "switch_rate_difference").unwrap();
    assert_eq!(report_only.pass, None);
}

#[test]
fn diverged_cells_are_results_not_errors() {
    let mut spec = tiny("E3");
    spec.sweep.etas = vec![1e-3, 3e-3, 1e-2, 50.0];
    spec.base.steps = 50;
    let r = run_spec(&spec, None, &opts()).unwrap();
    let bad = r.cells.iter().find(|c| c.eta == 50.0).unwrap();
    assert!(bad.status.starts_with("diverged@"), "{}", bad.status);
    // The fit still uses the three finite rates.
    assert!(r.metric("beta").is_some());
}

#[test]
fn missing_metrics_mark_the_result_partial() {
    let mut spec = tiny("E5");
    // A single rate cannot support a power-law fit.
    spec.sweep.etas = vec![1e-3];
    let r = run_spec(&spec, None, &opts()).unwrap();
    assert_eq!(r.status, ResultStatus::Partial);
    let beta = r.targets.iter().find(|t| t.target.metric == "beta").unwrap();
    assert_eq!(beta.measured, None);
    assert_eq!(beta.pass, Some(false));
    assert!(!r.hard_targets_pass());
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = tiny("E3");
    spec.seeds.clear();
    assert!(run_spec(&spec, None, &opts()).is_err());
    let mut spec = tiny("E3");
    spec.sweep.etas = vec![-1.0];
    assert!(run_spec(&spec, None, &opts()).is_err());
}

#[test]
fn registry_configs_are_fully_materialized() {
    for s in registry() {
        let json = serde_json::to_value(&s).unwrap();
        for key in ["schema_version", "id", "data", "base", "sweep", "seeds", "settings", "targets"] {
            assert!(json.get(key).is_some(), "{}: {key}", s.id);
        }
        assert!(!s.targets.is_empty(), "{} has no targets", s.id);
    }
}
