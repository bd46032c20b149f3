//! The experiment registry: 23 parameterized procedures with declarative
//! targets, a cell runner, and the on-disk result layout.
//!
//! ```text
//! <out>/<EID>/config.json      fully resolved spec
//! <out>/<EID>/results.json     per-cell metrics, aggregates, fits, targets
//! <out>/<EID>/trace_<cell>.csv per-step trace of every training cell
//! <out>/<EID>/plots/*.csv      plot-ready series
//! ```

mod analysis;
mod registry;
mod runner;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::fitting::FitResult;
use crate::model::Activation;
use crate::training::{LossKind, OptimizerKind};

pub use registry::{registry, spec_for, EXPERIMENT_IDS};
pub use runner::{
    load_result, run_experiment, run_spec, run_suite, summary_markdown, Overrides, RunOptions, SuiteReport, SuiteRow,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Protocol seeds shared by every experiment.
pub const PROTOCOL_SEEDS: [u64; 5] = [42, 137, 256, 512, 1024];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub separation: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 200,
            d: 20,
            c: 5,
            separation: 2.0,
        }
    }
}

/// Base configuration every sweep point starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub width: usize,
    /// Number of weight layers.
    pub depth: usize,
    pub activation: Activation,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub eta: f64,
    pub steps: usize,
    pub bias: bool,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 2,
            activation: Activation::Relu,
            loss: LossKind::Mse,
            optimizer: OptimizerKind::Gd,
            eta: 0.01,
            steps: 1000,
            bias: false,
        }
    }
}

impl BaseConfig {
    pub fn widths(&self, data: &DataConfig, width: usize, depth: usize) -> Vec<usize> {
        let mut w = vec![data.d];
        w.extend(std::iter::repeat_n(width, depth - 1));
        w.push(data.c);
        w
    }
}

/// Sweep axes; an empty axis means "use the base value".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub etas: Vec<f64>,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub ns: Vec<usize>,
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub losses: Vec<LossKind>,
    pub optimizers: Vec<OptimizerKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Comparator {
    Lt { value: f64 },
    Le { value: f64 },
    Gt { value: f64 },
    Ge { value: f64 },
    Between { lo: f64, hi: f64 },
    /// Boolean metric stored as 1.0 / 0.0.
    IsTrue,
    /// Reported only.
    Report,
}

impl Comparator {
    pub fn check(self, v: f64) -> Option<bool> {
        if !v.is_finite() {
            return match self {
                Comparator::Report => None,
                _ => Some(false),
            };
        }
        Some(match self {
            Comparator::Lt { value } => v < value,
            Comparator::Le { value } => v <= value,
            Comparator::Gt { value } => v > value,
            Comparator::Ge { value } => v >= value,
            Comparator::Between { lo, hi } => (lo..=hi).contains(&v),
            Comparator::IsTrue => v == 1.0,
            Comparator::Report => return None,
        })
    }

    pub fn describe(self) -> String {
        match self {
            Comparator::Lt { value } => format!("< {value}"),
            Comparator::Le { value } => format!("<= {value}"),
            Comparator::Gt { value } => format!("> {value}"),
            Comparator::Ge { value } => format!(">= {value}"),
            Comparator::Between { lo, hi } => format!("in [{lo}, {hi}]"),
            Comparator::IsTrue => "holds".into(),
            Comparator::Report => "reported".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub metric: String,
    pub comparator: Comparator,
    /// Hard targets make a suite run exit with the acceptance-failure code.
    pub hard: bool,
}

impl Target {
    pub fn hard(metric: &str, comparator: Comparator) -> Self {
        Self {
            metric: metric.into(),
            comparator,
            hard: true,
        }
    }

    pub fn soft(metric: &str, comparator: Comparator) -> Self {
        Self {
            metric: metric.into(),
            comparator,
            hard: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub id: String,
    pub name: String,
    pub description: String,
    /// Reference outcome this experiment is checked against.
    pub reference: String,
    pub data: DataConfig,
    pub base: BaseConfig,
    pub sweep: Sweep,
    pub seeds: Vec<u64>,
    /// Experiment-specific numeric knobs (strides, durations, thresholds).
    pub settings: BTreeMap<String, f64>,
    pub targets: Vec<Target>,
}

impl ExperimentSpec {
    pub fn setting(&self, key: &str) -> Option<f64> {
        self.settings.get(key).copied()
    }

    pub fn setting_or(&self, key: &str, default: f64) -> f64 {
        self.setting(key).unwrap_or(default)
    }

    pub fn etas(&self) -> Vec<f64> {
        if self.sweep.etas.is_empty() {
            vec![self.base.eta]
        } else {
            self.sweep.etas.clone()
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        if self.sweep.widths.is_empty() {
            vec![self.base.width]
        } else {
            self.sweep.widths.clone()
        }
    }
}

/// One (seed × sweep point) job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub seed: u64,
    pub eta: f64,
    pub width: usize,
    pub depth: usize,
    pub n: usize,
    pub d: usize,
    pub activation: String,
    pub loss: String,
    pub optimizer: String,
    /// `completed`, `diverged@<step>` or `error: <message>`.
    pub status: String,
    pub metrics: BTreeMap<String, f64>,
}

impl CellResult {
    pub fn ok(&self) -> bool {
        self.status == "completed"
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let stderr = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            stderr,
            count: v.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub target: Target,
    pub measured: Option<f64>,
    /// `None` for report-only targets.
    pub pass: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResultStatus {
    Complete,
    /// Some cells failed or a metric the analysis needs is missing.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub id: String,
    pub status: ResultStatus,
    pub config: ExperimentSpec,
    pub cells: Vec<CellResult>,
    pub metrics: BTreeMap<String, f64>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub fits: BTreeMap<String, FitResult>,
    pub targets: Vec<TargetOutcome>,
    pub notes: Vec<String>,
    /// Everything that legitimately differs between identical reruns.
    pub timestamps: Timestamps,
}

impl ExperimentResult {
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    /// True when every hard target passed.
    pub fn hard_targets_pass(&self) -> bool {
        self.targets
            .iter()
            .filter(|t| t.target.hard)
            .all(|t| t.pass != Some(false))
    }

    /// The result serialized without its timestamp field.
    pub fn reproducible_json(&self) -> crate::Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timestamps");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// A plot-ready table written to `plots/<name>.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Render as a log-log scatter when SVG output is requested.
    pub loglog: bool,
    /// Optional `(slope, intercept)` of a fit line in log-log space.
    pub fit: Option<(f64, f64)>,
}
