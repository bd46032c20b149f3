use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::analysis::{self, Ctx};
use super::registry::spec_for;
use super::{ExperimentResult, ExperimentSpec, ResultStatus, TargetOutcome, Timestamps, SCHEMA_VERSION};
use crate::error::{invalid, Error, Result};
use crate::plot;

/// Partial overrides applied on top of a registered spec.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub etas: Option<Vec<f64>>,
    pub widths: Option<Vec<usize>>,
    pub steps: Option<usize>,
    pub settings: BTreeMap<String, f64>,
}

impl Overrides {
    pub fn apply(&self, spec: &mut ExperimentSpec) {
        if let Some(s) = &self.seeds {
            spec.seeds = s.clone();
        }
        if let Some(e) = &self.etas {
            spec.sweep.etas = e.clone();
        }
        if let Some(w) = &self.widths {
            spec.sweep.widths = w.clone();
        }
        if let Some(t) = self.steps {
            spec.base.steps = t;
        }
        for (k, v) in &self.settings {
            spec.settings.insert(k.clone(), *v);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Maximum number of concurrently running cells.
    pub jobs: usize,
    pub write_traces: bool,
    /// Also render `plots/*.svg` for log-log series.
    pub svg: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
            write_traces: true,
            svg: false,
        }
    }
}

fn validate(spec: &ExperimentSpec) -> Result<()> {
    if spec.seeds.is_empty() {
        return invalid(format!("{}: no seeds", spec.id));
    }
    if spec.base.steps == 0 || spec.base.depth < 2 || spec.base.width == 0 {
        return invalid(format!("{}: base config needs steps >= 1, depth >= 2, width >= 1", spec.id));
    }
    if spec.sweep.etas.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return invalid(format!("{}: learning rates must be positive", spec.id));
    }
    if spec.sweep.depths.iter().any(|&d| d < 2) || spec.sweep.widths.contains(&0) {
        return invalid(format!("{}: depths must be >= 2 and widths >= 1", spec.id));
    }
    Ok(())
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Runs a registered experiment with overrides, writing under `out_dir/<id>`.
pub fn run_experiment(id: &str, overrides: &Overrides, out_dir: &Path, opts: &RunOptions) -> Result<ExperimentResult> {
    let mut spec = spec_for(id)?;
    overrides.apply(&mut spec);
    run_spec(&spec, Some(out_dir), opts)
}

/// Runs an explicit spec; with `out_dir = None` nothing is written.
pub fn run_spec(spec: &ExperimentSpec, out_dir: Option<&Path>, opts: &RunOptions) -> Result<ExperimentResult> {
    validate(spec)?;
    let dir = out_dir.map(|o| o.join(&spec.id));
    if let Some(d) = &dir {
        fs::create_dir_all(d.join("plots"))?;
        fs::write(d.join("config.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let ctx = Ctx {
        dir: dir.clone(),
        write_traces: opts.write_traces,
    };

    let started = unix_ms();
    let clock = Instant::now();
    let out = pool.install(|| analysis::run(spec, &ctx))?;
    let wall = clock.elapsed().as_secs_f64();

    let mut partial = out.partial || out.cells.iter().any(|c| c.status.starts_with("error"));
    let targets: Vec<TargetOutcome> = spec
        .targets
        .iter()
        .map(|t| {
            let measured = out.metrics.get(&t.metric).copied();
            if measured.is_none() {
                partial = true;
            }
            TargetOutcome {
                target: t.clone(),
                measured,
                pass: match measured {
                    Some(v) => t.comparator.check(v),
                    None => Some(false).filter(|_| !matches!(t.comparator, super::Comparator::Report)),
                },
            }
        })
        .collect();

    let result = ExperimentResult {
        schema_version: SCHEMA_VERSION,
        id: spec.id.clone(),
        status: if partial { ResultStatus::Partial } else { ResultStatus::Complete },
        config: spec.clone(),
        cells: out.cells,
        metrics: out.metrics,
        aggregates: out.aggregates,
        fits: out.fits,
        targets,
        notes: out.notes,
        timestamps: Timestamps {
            started_unix_ms: started,
            finished_unix_ms: unix_ms(),
            wall_time_s: wall,
        },
    };

    if let Some(d) = &dir {
        for p in &out.plots {
            let mut s = p.columns.join(",") + "\n";
            for row in &p.rows {
                s += &row.iter().map(|v| format!("{v:.10e}")).collect::<Vec<_>>().join(",");
                s.push('\n');
            }
            fs::write(d.join("plots").join(format!("{}.csv", p.name)), s)?;
            if opts.svg && p.loglog {
                fs::write(d.join("plots").join(format!("{}.svg", p.name)), plot::loglog_svg(p))?;
            }
        }
        fs::write(d.join("results.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    }
    Ok(result)
}

/// Reads `results.json` from an experiment directory (or the file itself).
pub fn load_result(path: &Path) -> Result<ExperimentResult> {
    let file = if path.is_dir() { path.join("results.json") } else { path.to_path_buf() };
    Ok(serde_json::from_str(&fs::read_to_string(file)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub id: String,
    pub name: String,
    pub reference: String,
    /// `(metric, measured, requirement, pass)` per target.
    pub checks: Vec<(String, Option<f64>, String, Option<bool>)>,
    pub hard_pass: bool,
    pub status: String,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn all_hard_pass(&self) -> bool {
        self.rows.iter().all(|r| r.hard_pass)
    }

    pub fn from_results<'a>(results: impl IntoIterator<Item = &'a ExperimentResult>) -> Self {
        SuiteReport {
            rows: results.into_iter().map(row_for).collect(),
        }
    }

    /// Collects every `<dir>/<EID>/results.json` under `dir`, in id order.
    pub fn scan(dir: &Path) -> Result<Self> {
        let mut found: Vec<ExperimentResult> = Vec::new();
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.join("results.json").is_file() {
                found.push(load_result(&p)?);
            }
        }
        found.sort_by_key(|r| r.id.trim_start_matches('E').parse::<u32>().unwrap_or(u32::MAX));
        Ok(Self::from_results(&found))
    }
}

fn row_for(r: &ExperimentResult) -> SuiteRow {
    SuiteRow {
        id: r.id.clone(),
        name: r.config.name.clone(),
        reference: r.config.reference.clone(),
        checks: r
            .targets
            .iter()
            .map(|t| {
                let req = format!("{}{}", t.target.comparator.describe(), if t.target.hard { "" } else { " (soft)" });
                (t.target.metric.clone(), t.measured, req, t.pass)
            })
            .collect(),
        hard_pass: r.hard_targets_pass(),
        status: format!("{:?}", r.status).to_lowercase(),
        wall_time_s: r.timestamps.wall_time_s,
    }
}

fn error_row(id: &str, e: &Error) -> SuiteRow {
    let (name, reference) = spec_for(id).map_or((String::new(), String::new()), |s| (s.name, s.reference));
    SuiteRow {
        id: id.to_string(),
        name,
        reference,
        checks: Vec::new(),
        hard_pass: false,
        status: format!("error: {e}"),
        wall_time_s: 0.0,
    }
}

/// Runs `ids` one after another, each with at most `parallelism` concurrent
/// cells, and writes `summary.md` / `summary.json` into `out_dir`.
pub fn run_suite(
    ids: &[String],
    overrides: &Overrides,
    parallelism: usize,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<SuiteReport> {
    for id in ids {
        spec_for(id)?;
    }
    fs::create_dir_all(out_dir)?;
    let opts = RunOptions {
        jobs: parallelism.max(1),
        ..opts.clone()
    };
    let mut report = SuiteReport::default();
    for id in ids {
        let row = match run_experiment(id, overrides, out_dir, &opts) {
            Ok(r) => row_for(&r),
            Err(e) => error_row(id, &e),
        };
        report.rows.push(row);
    }
    write_summary(&report, out_dir)?;
    Ok(report)
}

pub(crate) fn write_summary(report: &SuiteReport, out_dir: &Path) -> Result<PathBuf> {
    let md = out_dir.join("summary.md");
    fs::write(&md, summary_markdown(report))?;
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(md)
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        None => "—".into(),
        Some(x) if x == 0.0 || (1e-3..1e4).contains(&x.abs()) => format!("{x:.4}"),
        Some(x) => format!("{x:.3e}"),
    }
}

/// Markdown table: one line per target, grouped by experiment.
pub fn summary_markdown(report: &SuiteReport) -> String {
    let mut s = String::from("| ID | Experiment | Reference | Metric | Measured | Target | Result |\n");
    s += "|----|------------|-----------|--------|----------|--------|--------|\n";
    for r in &report.rows {
        if r.checks.is_empty() {
            s += &format!("| {} | {} | {} | — | — | — | {} |\n", r.id, r.name, r.reference, r.status);
        }
        for (i, (metric, measured, req, pass)) in r.checks.iter().enumerate() {
            let (id, name, refr) = if i == 0 {
                (r.id.as_str(), r.name.as_str(), r.reference.as_str())
            } else {
                ("", "", "")
            };
            let verdict = match pass {
                Some(true) => "pass",
                Some(false) => "FAIL",
                None => "info",
            };
            s += &format!(
                "| {id} | {name} | {refr} | {metric} | {} | {req} | {verdict} |\n",
                fmt_value(*measured)
            );
        }
    }
    let hard = report.rows.iter().filter(|r| r.hard_pass).count();
    s += &format!("\n{hard}/{} experiments meet every hard target.\n", report.rows.len());
    s
}
