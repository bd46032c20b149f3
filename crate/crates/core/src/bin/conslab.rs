use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use conslab::data::gen_gaussian_mixture;
use conslab::experiments::{
    run_experiment, run_suite, summary_markdown, ExperimentResult, Overrides, RunOptions, SuiteReport,
    EXPERIMENT_IDS,
};
use conslab::fitting::log_space;
use conslab::model::{init_kaiming_balanced, Activation};
use conslab::theory::{crossover_sum, local_exponent, SpectralModel};
use conslab::training::{integrate_flow, train, LossKind, OptimizerKind, TrainConfig};
use conslab::Error;

const EXIT_RUNTIME: u8 = 1;
const EXIT_TARGETS: u8 = 3;

#[derive(Parser)]
#[command(name = "conslab", version, about = "Conservation-law drift laboratory for bias-free MLPs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Base seed for data and initialization [default: 42]; for
    /// `experiment` and `suite` it replaces the protocol seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: $CONSLAB_OUT or ./runs].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximum number of concurrent cells [default: available cores].
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(42)
    }

    fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("CONSLAB_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    fn run_options(&self, svg: bool) -> RunOptions {
        let mut o = RunOptions {
            svg,
            ..RunOptions::default()
        };
        if let Some(j) = self.jobs {
            o.jobs = j.max(1);
        }
        o
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    d: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 2.0)]
    separation: f64,
}

#[derive(Args, Clone)]
struct NetArgs {
    /// Layer widths including input and output, e.g. 20,64,5.
    #[arg(long, value_delimiter = ',', default_value = "20,64,5")]
    widths: Vec<usize>,
    /// linear, relu or leaky:<slope>.
    #[arg(long, default_value = "relu")]
    activation: String,
    /// mse or ce.
    #[arg(long, default_value = "mse")]
    loss: String,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a Gaussian-mixture dataset and write it as CSV.
    GenData {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Full-batch training run; writes the per-step trace CSV.
    Train {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        /// Use Adam instead of plain gradient descent.
        #[arg(long)]
        adam: bool,
        #[arg(long)]
        bias: bool,
        /// Sample the top Gauss–Newton eigenvalue every N steps.
        #[arg(long)]
        lambda_stride: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Integrate gradient flow with RK4 and report conservation drift.
    Flow {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Run one registered experiment (E1..E23).
    Experiment {
        id: String,
        /// Comma-separated seed override.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        #[arg(long)]
        steps: Option<usize>,
        /// Experiment setting override, KEY=VALUE (repeatable).
        #[arg(long = "set", value_parser = parse_setting)]
        settings: Vec<(String, f64)>,
        /// Also write SVG renderings of log-log plot series.
        #[arg(long)]
        svg: bool,
        /// Skip per-cell trace CSVs.
        #[arg(long)]
        no_traces: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run several experiments (comma-separated ids or `all`) and summarize.
    Suite {
        ids: String,
        /// Step-count override applied to every experiment.
        #[arg(long)]
        steps: Option<usize>,
        /// Setting override, KEY=VALUE (repeatable), applied to every experiment.
        #[arg(long = "set", value_parser = parse_setting)]
        settings: Vec<(String, f64)>,
        #[arg(long)]
        svg: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the crossover formula from a spectrum JSON file.
    Predict {
        /// JSON object with `lambdas`, `coeffs` and optional `steps`.
        #[arg(long)]
        spectrum: PathBuf,
        /// lo:hi:n, log-spaced.
        #[arg(long, default_value = "1e-4:3e-1:12")]
        eta_grid: String,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize every results.json under a directory.
    Report {
        dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_setting(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or("expected KEY=VALUE")?;
    let v: f64 = v.parse().map_err(|e| format!("{v}: {e}"))?;
    Ok((k.to_string(), v))
}

#[derive(Deserialize)]
struct SpectrumFile {
    lambdas: Vec<f64>,
    coeffs: Vec<f64>,
    #[serde(default = "default_steps")]
    steps: usize,
}

fn default_steps() -> usize {
    1000
}

enum Outcome {
    Ok,
    TargetsFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::TargetsFailed) => ExitCode::from(EXIT_TARGETS),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn ensure_dir(p: &Path) -> conslab::Result<()> {
    fs::create_dir_all(p)?;
    Ok(())
}

fn execute(cmd: Cmd) -> conslab::Result<Outcome> {
    match cmd {
        Cmd::GenData { data, common } => {
            let ds = gen_gaussian_mixture(data.n, data.d, data.classes, data.separation, common.seed())?;
            let dir = common.out_dir();
            ensure_dir(&dir)?;
            let path = dir.join(format!("data_n{}_d{}_s{}.csv", data.n, data.d, common.seed()));
            ds.write_csv(BufWriter::new(File::create(&path)?))?;
            println!("wrote {} samples to {}", ds.n, path.display());
        }
        Cmd::Train {
            net,
            data,
            eta,
            steps,
            adam,
            bias,
            lambda_stride,
            common,
        } => {
            let (act, loss) = (Activation::parse(&net.activation)?, LossKind::parse(&net.loss)?);
            check_widths(&net.widths, &data)?;
            let ds = gen_gaussian_mixture(data.n, data.d, data.classes, data.separation, common.seed())?;
            let mut cfg = TrainConfig::new(net.widths.clone(), act, loss, eta, steps, common.seed());
            cfg.bias = bias;
            cfg.record.lambda_stride = lambda_stride;
            if adam {
                cfg.optimizer = OptimizerKind::adam();
            }
            let trace = train(&cfg, &ds)?;
            let dir = common.out_dir();
            ensure_dir(&dir)?;
            let path = dir.join(format!("train_{}_{}_eta{eta}_s{}.csv", act.label().replace(':', ""), loss.label(), common.seed()));
            trace.write_csv(BufWriter::new(File::create(&path)?))?;
            println!("final loss {:.6e}", trace.final_loss);
            for (l, d) in trace.total_drift().iter().enumerate() {
                println!("drift C_{} = {d:.6e}", l + 1);
            }
            if trace.diverged() {
                println!("run diverged");
            }
            println!("trace: {}", path.display());
        }
        Cmd::Flow {
            net,
            data,
            duration,
            step,
            common,
        } => {
            let (act, loss) = (Activation::parse(&net.activation)?, LossKind::parse(&net.loss)?);
            check_widths(&net.widths, &data)?;
            let ds = gen_gaussian_mixture(data.n, data.d, data.classes, data.separation, common.seed())?;
            let p0 = init_kaiming_balanced(&net.widths, common.seed(), false)?;
            let trace = integrate_flow(&p0, &ds, act, loss, duration, step)?;
            let c0 = trace.initial_conservation();
            for (l, d) in trace.total_drift().iter().enumerate() {
                println!("C_{}: initial {:.6e}, |drift| {d:.3e}, relative {:.3e}", l + 1, c0[l], d / (1.0 + c0[l].abs()));
            }
            let dir = common.out_dir();
            ensure_dir(&dir)?;
            let path = dir.join(format!("flow_s{}.csv", common.seed()));
            trace.write_csv(BufWriter::new(File::create(&path)?))?;
            println!("trace: {}", path.display());
        }
        Cmd::Experiment {
            id,
            seeds,
            etas,
            widths,
            steps,
            settings,
            svg,
            no_traces,
            common,
        } => {
            let overrides = Overrides {
                seeds: seeds.or(common.seed.map(|s| vec![s])),
                etas,
                widths,
                steps,
                settings: settings.into_iter().collect(),
            };
            let mut opts = common.run_options(svg);
            opts.write_traces = !no_traces;
            let dir = common.out_dir();
            let r = run_experiment(&id, &overrides, &dir, &opts)?;
            print_result(&r);
            println!("results: {}", dir.join(&r.id).join("results.json").display());
        }
        Cmd::Suite {
            ids,
            steps,
            settings,
            svg,
            common,
        } => {
            let ids: Vec<String> = if ids.eq_ignore_ascii_case("all") {
                EXPERIMENT_IDS.iter().map(|s| s.to_string()).collect()
            } else {
                ids.split(',').map(|s| s.trim().to_uppercase()).filter(|s| !s.is_empty()).collect()
            };
            let opts = common.run_options(svg);
            let dir = common.out_dir();
            let overrides = Overrides {
                seeds: common.seed.map(|s| vec![s]),
                steps,
                settings: settings.into_iter().collect(),
                ..Overrides::default()
            };
            let report = run_suite(&ids, &overrides, opts.jobs, &dir, &opts)?;
            print!("{}", summary_markdown(&report));
            if !report.all_hard_pass() {
                return Ok(Outcome::TargetsFailed);
            }
        }
        Cmd::Predict {
            spectrum,
            eta_grid,
            common,
        } => {
            let spec: SpectrumFile = serde_json::from_str(&fs::read_to_string(&spectrum)?)?;
            let grid = parse_grid(&eta_grid)?;
            let model = SpectralModel::new(spec.lambdas, spec.coeffs, grid[0], spec.steps)?;
            let slopes = local_exponent(&model, &grid)?;
            let mut rows = String::from("eta,g_predicted,local_exponent\n");
            for (eta, s) in grid.iter().zip(&slopes) {
                let (g, _) = crossover_sum(&model.with_eta(*eta))?;
                rows += &format!("{eta:.6e},{g:.10e},{s:.6}\n");
            }
            if let Some(out) = &common.out {
                ensure_dir(out)?;
                let path = out.join("prediction.csv");
                fs::write(&path, &rows)?;
                eprintln!("wrote {}", path.display());
            }
            io::stdout().write_all(rows.as_bytes())?;
        }
        Cmd::Report { dir, common: _ } => {
            let report = SuiteReport::scan(&dir)?;
            if report.rows.is_empty() {
                return Err(Error::InvalidInput(format!("no results.json found under {}", dir.display())));
            }
            print!("{}", summary_markdown(&report));
        }
    }
    Ok(Outcome::Ok)
}

fn check_widths(widths: &[usize], data: &DataArgs) -> conslab::Result<()> {
    if widths.len() < 2 || widths[0] != data.d || *widths.last().unwrap() != data.classes {
        return Err(Error::InvalidInput(format!(
            "widths must start with d = {} and end with classes = {}",
            data.d, data.classes
        )));
    }
    Ok(())
}

fn parse_grid(s: &str) -> conslab::Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::InvalidInput(format!("eta grid {s:?} is not lo:hi:n"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    log_space(lo, hi, n)
}

fn print_result(r: &ExperimentResult) {
    println!("{} — {} [{:?}]", r.id, r.config.name, r.status);
    for t in &r.targets {
        let verdict = match t.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "info",
        };
        let measured = t.measured.map_or("missing".to_string(), |v| format!("{v:.4e}"));
        println!(
            "  {:<32} {measured:>12}  {:<20} {verdict}{}",
            t.target.metric,
            t.target.comparator.describe(),
            if t.target.hard { "" } else { " (soft)" }
        );
    }
    for n in &r.notes {
        println!("  note: {n}");
    }
    println!("  wall time {:.1}s", r.timestamps.wall_time_s);
}
