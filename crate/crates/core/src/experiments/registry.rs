use std::collections::BTreeMap;

use super::{BaseConfig, Comparator, DataConfig, ExperimentSpec, Sweep, Target, PROTOCOL_SEEDS, SCHEMA_VERSION};
use crate::error::{invalid, Result};
use crate::fitting::log_space;
use crate::model::Activation;
use crate::training::{LossKind, OptimizerKind};

pub const EXPERIMENT_IDS: [&str; 23] = [
    "E1", "E2", "E3", "E4", "E5", "E6", "E7", "E8", "E9", "E10", "E11", "E12", "E13", "E14", "E15", "E16", "E17",
    "E18", "E19", "E20", "E21", "E22", "E23",
];

/// All 23 experiment specs in id order.
pub fn registry() -> Vec<ExperimentSpec> {
    EXPERIMENT_IDS.iter().map(|id| spec_for(id).expect("registered id")).collect()
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    log_space(lo, hi, n).expect("static grid")
}

/// The drift-scaling grid: 12 log-spaced rates over 3.5 decades.
fn drift_grid() -> Vec<f64> {
    grid(1e-4, 0.3, 12)
}

struct Builder(ExperimentSpec);

impl Builder {
    fn new(id: &str, name: &str, reference: &str, description: &str) -> Self {
        Builder(ExperimentSpec {
            schema_version: SCHEMA_VERSION,
            id: id.into(),
            name: name.into(),
            description: description.into(),
            reference: reference.into(),
            data: DataConfig::default(),
            base: BaseConfig::default(),
            sweep: Sweep::default(),
            seeds: PROTOCOL_SEEDS.to_vec(),
            settings: BTreeMap::new(),
            targets: Vec::new(),
        })
    }

    fn base(mut self, f: impl FnOnce(&mut BaseConfig)) -> Self {
        f(&mut self.0.base);
        self
    }

    fn sweep(mut self, f: impl FnOnce(&mut Sweep)) -> Self {
        f(&mut self.0.sweep);
        self
    }

    fn seeds(mut self, seeds: &[u64]) -> Self {
        self.0.seeds = seeds.to_vec();
        self
    }

    fn set(mut self, key: &str, v: f64) -> Self {
        self.0.settings.insert(key.into(), v);
        self
    }

    fn target(mut self, t: Target) -> Self {
        self.0.targets.push(t);
        self
    }

    fn done(self) -> ExperimentSpec {
        self.0
    }
}

use Comparator::*;

/// The spec registered under `id` (case-insensitive).
pub fn spec_for(id: &str) -> Result<ExperimentSpec> {
    let id = id.trim().to_ascii_uppercase();
    let three = &PROTOCOL_SEEDS[..3];
    let spec = match id.as_str() {
        "E1" => Builder::new(
            "E1",
            "Conservation verification",
            "Drift < 0.003%",
            "RK4 gradient flow on the 2-layer ReLU MSE network; maximum relative drift of C_1 over the run.",
        )
        .set("flow_duration", 1.0)
        .set("flow_step", 1e-4)
        .target(Target::hard("max_relative_flow_drift", Lt { value: 3e-5 }))
        .done(),
        "E2" => Builder::new(
            "E2",
            "Conservation with bias",
            "Bias breaks conservation",
            "GD with and without biases; the per-step identity ΔC = η²δ holds only bias-free.",
        )
        .base(|b| b.steps = 300)
        .set("identity_tolerance", 1e-8)
        .target(Target::hard("bias_free_identity_residual", Le { value: 1e-8 }))
        .target(Target::hard("bias_identity_residual", Gt { value: 1e-7 }))
        .done(),
        "E3" => Builder::new(
            "E3",
            "Drift vs. learning rate",
            "Drift ~ η scaling",
            "Coarse learning-rate sweep of total drift on the 2-layer ReLU MSE network.",
        )
        .base(|b| b.width = 16)
        .sweep(|s| s.etas = vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1])
        .target(Target::soft("beta", Between { lo: 0.8, hi: 1.5 }))
        .done(),
        "E4" => Builder::new(
            "E4",
            "EoS conservation breaking",
            "5500x drift increase",
            "Drift at an edge-of-stability learning rate (found by bisection) versus at that rate divided by 100.",
        )
        .seeds(three)
        .set("lambda_stride", 10.0)
        .set("bisection_steps", 6.0)
        .set("eta_reduction", 100.0)
        .target(Target::hard("drift_ratio", Gt { value: 100.0 }))
        .done(),
        "E5" => Builder::new(
            "E5",
            "Drift scaling law",
            "β = 1.16, R² > 0.99",
            "Power-law fit of seed-mean total drift against η over 3.5 decades, 2-layer ReLU MSE.",
        )
        .base(|b| b.width = 16)
        .sweep(|s| s.etas = drift_grid())
        .target(Target::hard("beta", Between { lo: 1.0, hi: 1.35 }))
        .target(Target::hard("r2", Gt { value: 0.97 }))
        .target(Target::hard("g_exponent", Between { lo: -1.0, hi: -0.65 }))
        .done(),
        "E6" => Builder::new(
            "E6",
            "Depth dependence",
            "β: 1.07 (2L) to 1.72 (8L)",
            "Drift exponent versus depth 2..8 (mean over conservation pairs, per-pair exponents reported).",
        )
        .base(|b| b.width = 16)
        .seeds(three)
        .sweep(|s| {
            s.depths = (2..=8).collect();
            s.etas = grid(1e-4, 3e-2, 8);
        })
        .target(Target::soft("beta_increase", Gt { value: 0.0 }))
        .done(),
        "E7" => Builder::new(
            "E7",
            "Optimizer dependence",
            "Adam: β = 0.56",
            "Drift exponent of full-batch Adam on the E5 configuration.",
        )
        .base(|b| {
            b.width = 16;
            b.optimizer = OptimizerKind::adam();
        })
        .sweep(|s| s.etas = grid(1e-6, 1e-3, 8))
        .target(Target::hard("beta", Between { lo: 0.3, hi: 0.9 }))
        .done(),
        "E8" => Builder::new(
            "E8",
            "Spectral universality",
            "14-27% prediction error",
            "Crossover-formula prediction of G(η) from the initialization spectrum versus measurement.",
        )
        .sweep(|s| {
            s.activations = vec![Activation::Linear, Activation::Relu];
            s.etas = grid(1e-4, 3e-2, 8);
        })
        .target(Target::hard("max_rel_error_linear", Le { value: 0.40 }))
        .target(Target::hard("max_rel_error_relu", Le { value: 0.45 }))
        .done(),
        "E9" => Builder::new(
            "E9",
            "Linear-ReLU gap",
            "2.2% switch rate difference",
            "Drift exponents of linear and ReLU networks on matched configs, and the ReLU minus Leaky(0.99) switch rate.",
        )
        .base(|b| b.width = 16)
        .sweep(|s| {
            s.activations = vec![Activation::Linear, Activation::Relu];
            s.etas = drift_grid();
        })
        .set("switch_eta", 0.01)
        .target(Target::hard("beta_gap", Le { value: 0.15 }))
        .target(Target::soft("switch_rate_difference", Report))
        .done(),
        "E10" => Builder::new(
            "E10",
            "Activation coupling",
            "Smooth β transition",
            "Drift exponent and switch rate along the Leaky(a) path from ReLU (a=0) to linear (a=1).",
        )
        .base(|b| b.width = 16)
        .seeds(three)
        .sweep(|s| {
            s.activations = [0.0, 0.25, 0.5, 0.75, 1.0].map(Activation::Leaky).to_vec();
            s.etas = grid(1e-4, 0.1, 8);
        })
        .target(Target::soft("max_adjacent_beta_jump", Le { value: 0.15 }))
        .done(),
        "E11" => Builder::new(
            "E11",
            "Interpolated activation",
            "β varies with homogeneity",
            "Fine sweep of the Leaky(a) slope; span and trend of the drift exponent.",
        )
        .base(|b| b.width = 64)
        .seeds(three)
        .sweep(|s| {
            s.activations = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0].map(Activation::Leaky).to_vec();
            s.etas = grid(1e-4, 3e-2, 8);
        })
        .target(Target::soft("beta_span", Ge { value: 0.02 }))
        .done(),
        "E12" => Builder::new(
            "E12",
            "Loss function interaction",
            "Non-additive 3-factor decomp.",
            "Full factorial loss x width x depth; share of β variance carried by interaction terms.",
        )
        .seeds(three)
        .sweep(|s| {
            s.losses = vec![LossKind::Mse, LossKind::CrossEntropy];
            s.widths = vec![16, 64, 192];
            s.depths = vec![2, 4];
            s.etas = grid(1e-4, 3e-2, 8);
        })
        .target(Target::soft("interaction_fraction", Gt { value: 0.05 }))
        .done(),
        "E13" => Builder::new(
            "E13",
            "CE clamping mechanism",
            "CE β ≈ 1.0 at all widths",
            "Cross-entropy drift exponent across widths.",
        )
        .base(|b| b.loss = LossKind::CrossEntropy)
        .sweep(|s| {
            s.widths = vec![16, 64, 192];
            s.etas = width_grid();
        })
        .target(Target::hard("ce_beta_min", Ge { value: 0.85 }))
        .target(Target::hard("ce_beta_max", Le { value: 1.25 }))
        .done(),
        "E14" => Builder::new(
            "E14",
            "Interaction with width",
            "CE regularization grows with width",
            "MSE minus CE drift exponent as a function of width.",
        )
        .seeds(three)
        .sweep(|s| {
            s.losses = vec![LossKind::Mse, LossKind::CrossEntropy];
            s.widths = vec![16, 64, 192];
            s.etas = width_grid();
        })
        .target(Target::soft("gap_increasing", IsTrue))
        .done(),
        "E15" => Builder::new(
            "E15",
            "Width switch rate",
            "Per-neuron rate width-independent at EoS",
            "Per-neuron activation switch rate versus width below and at the edge of stability.",
        )
        .seeds(three)
        .base(|b| b.steps = 500)
        .sweep(|s| s.widths = vec![16, 32, 64, 128, 256])
        .set("sub_eos_eta", 0.02)
        .set("eos_min_width", 32.0)
        .set("lambda_stride", 10.0)
        .set("bisection_steps", 6.0)
        .target(Target::hard("sub_eos_exponent", Between { lo: -0.8, hi: -0.2 }))
        .target(Target::hard("eos_rate_ratio", Lt { value: 2.0 }))
        .done(),
        "E16" => Builder::new(
            "E16",
            "Time-dependent Hessian",
            "CE R = 0.988 at t = 250",
            "CE G(η) predicted from the spectrum at t=250 versus at initialization; correlation with measurement.",
        )
        .base(|b| b.loss = LossKind::CrossEntropy)
        .seeds(three)
        .sweep(|s| s.etas = grid(1e-3, 1e-1, 6))
        .set("snapshot_step", 250.0)
        .target(Target::soft("r_t250", Ge { value: 0.9 }))
        .target(Target::soft("r_init", Report))
        .done(),
        "E17" => Builder::new(
            "E17",
            "CE clamping effect",
            "CE clamps β ≈ 1.0",
            "CE and MSE drift exponents at widths 16, 64, 192.",
        )
        .sweep(|s| {
            s.losses = vec![LossKind::Mse, LossKind::CrossEntropy];
            s.widths = vec![16, 64, 192];
            s.etas = width_grid();
        })
        .target(Target::hard("ce_beta_min", Ge { value: 0.85 }))
        .target(Target::hard("ce_beta_max", Le { value: 1.25 }))
        .target(Target::hard("mse_minus_ce_at_max_width", Ge { value: 0.3 }))
        .target(Target::hard("mse_r2_decreasing", IsTrue))
        .done(),
        "E18" => Builder::new(
            "E18",
            "CE Hessian evolution",
            "24x compression, n-indep.",
            "λ_max of the CE Gauss–Newton matrix along training for n in {100, 200, 400}.",
        )
        .base(|b| {
            b.loss = LossKind::CrossEntropy;
            b.eta = 0.2;
            b.steps = 2000;
        })
        .seeds(&PROTOCOL_SEEDS[..1])
        .sweep(|s| s.ns = vec![100, 200, 400])
        .set("lambda_stride", 20.0)
        .target(Target::hard("compression_ratio", Le { value: 0.1 }))
        .target(Target::hard("tau_spread", Le { value: 0.3 }))
        .target(Target::hard("bound_violations", Le { value: 0.0 }))
        .target(Target::soft("q_margin_final_fraction", Lt { value: 0.25 }))
        .target(Target::soft("q_min_final", Gt { value: 0.9 }))
        .done(),
        "E19" => Builder::new(
            "E19",
            "MSE fine width sweep",
            "β − 1 ~ W^1.18",
            "MSE drift exponent over a fine width grid; growth law of β − 1 and fit quality.",
        )
        .seeds(three)
        .sweep(|s| {
            s.widths = vec![16, 32, 48, 64, 96, 128, 192];
            s.etas = width_grid();
        })
        .target(Target::hard("growth_exponent", Between { lo: 0.7, hi: 1.7 }))
        .target(Target::hard("r2_decreasing", IsTrue))
        .done(),
        "E20" => Builder::new(
            "E20",
            "Linear c_k validation",
            "R = 0.847",
            "Correlation of predicted and empirical mode coefficients, 2-layer linear network.",
        )
        .base(|b| b.activation = Activation::Linear)
        .sweep(|s| s.etas = vec![1e-3, 3e-3, 1e-2, 3e-2])
        .target(Target::hard("r_min", Ge { value: 0.7 }))
        .done(),
        "E21" => Builder::new(
            "E21",
            "ReLU c_k validation",
            "R > 0.80 at all η",
            "Mode-coefficient correlation for ReLU, including a rate near the stability edge (1.8/λ_max at init).",
        )
        .sweep(|s| s.etas = vec![1e-3, 3e-3, 1e-2, 3e-2])
        .set("edge_factor", 1.8)
        .target(Target::hard("r_min", Ge { value: 0.6 }))
        .done(),
        "E22" => Builder::new(
            "E22",
            "Width-dimension transition",
            "w*/d varies: 6.0, 3.0, 1.0",
            "Smallest width whose MSE drift power law breaks down, for d in {10, 20, 40}.",
        )
        .seeds(three)
        .sweep(|s| {
            s.dims = vec![10, 20, 40];
            s.widths = vec![8, 16, 24, 32, 48, 64, 96, 128];
            s.etas = width_grid();
        })
        .set("r2_threshold", 0.95)
        .set("curvature_threshold", 0.1)
        .target(Target::hard("w_over_d_decreasing", IsTrue))
        .done(),
        "E23" => Builder::new(
            "E23",
            "τ vs. learning rate",
            "τ = 1.33/η + 29, R² = 0.988",
            "Compression timescale of the CE spectrum at five learning rates; linear fit of τ against 1/η.",
        )
        .base(|b| {
            b.loss = LossKind::CrossEntropy;
            b.steps = 2000;
        })
        .seeds(&PROTOCOL_SEEDS[..1])
        .sweep(|s| s.etas = vec![0.1, 0.2, 0.4, 0.8, 1.6])
        .set("lambda_stride", 10.0)
        .target(Target::hard("tau_fit_r2", Ge { value: 0.9 }))
        .target(Target::hard("tau_slope", Between { lo: 1.33 / 2.0, hi: 1.33 * 2.0 }))
        .target(Target::soft("tau_intercept", Report))
        .done(),
        other => return invalid(format!("unknown experiment id {other:?}")),
    };
    Ok(spec)
}

/// η grid for the width sweeps, shared by MSE and CE.
fn width_grid() -> Vec<f64> {
    grid(1e-3, 1e-1, 8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_shape() {
        let r = registry();
        assert_eq!(r.len(), 23);
        for (s, id) in r.iter().zip(EXPERIMENT_IDS) {
            assert_eq!(s.id, id);
            assert!(!s.targets.is_empty(), "{id}");
            assert_eq!(s.data, DataConfig::default());
            assert!(!s.seeds.is_empty());
        }
    }

    #[test]
    fn e5_and_e6_axes() {
        let e5 = spec_for("e5").unwrap();
        let etas = e5.etas();
        assert!((etas.last().unwrap() / etas[0]).log10() >= 3.0);
        assert_eq!(e5.base.loss, LossKind::Mse);
        assert_eq!(e5.base.activation, Activation::Relu);
        assert_eq!(e5.base.depth, 2);
        assert!(e5.base.optimizer.is_gd());
        assert_eq!(spec_for("E6").unwrap().sweep.depths, (2..=8).collect::<Vec<_>>());
    }

    #[test]
    fn unknown_id() {
        assert!(spec_for("E24").is_err());
        assert!(spec_for("").is_err());
    }
}
