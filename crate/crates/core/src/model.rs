//! Bias-free fully connected networks with exact reverse-mode gradients.
//!
//! Layout: samples are rows. Layer `l` holds `W_l` with shape
//! `(h_l × h_{l−1})` and computes `Z_l = A_{l−1} W_lᵀ (+ b_l)`, so the
//! logits matrix is `n × C`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{gaussian_matrix, Matrix, Rng};

/// Stream id used for parameter initialization (data uses stream 0).
pub const INIT_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "slope", rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    /// `z` for `z ≥ 0`, `a·z` otherwise.
    Leaky(f64),
}

impl Activation {
    /// Negative-side slope; Linear is 1, ReLU is 0.
    pub fn negative_slope(self) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => 0.0,
            Activation::Leaky(a) => a,
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        if z >= 0.0 {
            z
        } else {
            self.negative_slope() * z
        }
    }

    /// Derivative with the convention `σ'(0) = negative slope` (0 for ReLU).
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        if z > 0.0 {
            1.0
        } else {
            self.negative_slope()
        }
    }

    /// Whether pre-activation sign changes alter the network function.
    pub fn has_kink(self) -> bool {
        self.negative_slope() != 1.0
    }

    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            _ => {
                if let Some(rest) = lower.strip_prefix("leaky") {
                    let a: f64 = rest
                        .trim_start_matches([':', '(', '='])
                        .trim_end_matches(')')
                        .parse()
                        .map_err(|_| Error::InvalidInput(format!("bad leaky slope in {s:?}")))?;
                    if !(0.0..=1.0).contains(&a) {
                        return invalid(format!("leaky slope must be in [0,1], got {a}"));
                    }
                    Ok(Activation::Leaky(a))
                } else {
                    invalid(format!("unknown activation {s:?}"))
                }
            }
        }
    }

    pub fn label(self) -> String {
        match self {
            Activation::Linear => "linear".into(),
            Activation::Relu => "relu".into(),
            Activation::Leaky(a) => format!("leaky:{a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub weights: Vec<Matrix>,
    pub biases: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Hidden-layer pre-activations, `n × h_l` for `l = 1..L−1`.
    pub preacts: Vec<Matrix>,
    /// `acts[0]` is the input; `acts[l] = σ(preacts[l−1])`.
    pub acts: Vec<Matrix>,
    pub logits: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<Matrix>,
    pub biases: Option<Vec<Vec<f64>>>,
}

impl LayerGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            weights: p.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: p
                .biases
                .as_ref()
                .map(|bs| bs.iter().map(|b| vec![0.0; b.len()]).collect()),
        }
    }

    /// `‖g_l‖²_F` per weight layer.
    pub fn frobenius_sq(&self) -> Vec<f64> {
        self.weights.iter().map(Matrix::frobenius_sq).collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, self.biases.as_deref())
    }
}

/// Balanced Kaiming init: `W_l ~ N(0, 2/h_{l−1})`, zero biases.
pub fn init_kaiming_balanced(widths: &[usize], seed: u64, bias: bool) -> Result<MlpParams> {
    if widths.len() < 3 {
        return invalid(format!("need at least 3 widths (input, hidden, output), got {}", widths.len()));
    }
    if widths.contains(&0) {
        return invalid("all widths must be positive");
    }
    let mut rng = Rng::split(seed, INIT_STREAM);
    let weights = widths
        .windows(2)
        .map(|w| gaussian_matrix(&mut rng, w[1], w[0], (2.0 / w[0] as f64).sqrt()))
        .collect::<Result<Vec<_>>>()?;
    let biases = bias.then(|| widths[1..].iter().map(|&h| vec![0.0; h]).collect());
    Ok(MlpParams { weights, biases })
}

impl MlpParams {
    pub fn new(weights: Vec<Matrix>, biases: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let p = Self { weights, biases };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return invalid("network needs at least one layer");
        }
        for (l, pair) in self.weights.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() {
                return invalid(format!(
                    "layer {} output width {} does not feed layer {} input width {}",
                    l + 1,
                    pair[0].rows(),
                    l + 2,
                    pair[1].cols()
                ));
            }
        }
        if let Some(bs) = &self.biases {
            if bs.len() != self.weights.len() {
                return invalid("one bias vector per layer required");
            }
            for (b, w) in bs.iter().zip(&self.weights) {
                if b.len() != w.rows() {
                    return invalid("bias length must match layer output width");
                }
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// `[h_0, h_1, ..., h_L]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.weights[0].cols()];
        w.extend(self.weights.iter().map(Matrix::rows));
        w
    }

    pub fn has_bias(&self) -> bool {
        self.biases.is_some()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Matrix::len).sum::<usize>()
            + self.biases.as_ref().map_or(0, |bs| bs.iter().map(Vec::len).sum())
    }

    pub fn num_weight_params(&self) -> usize {
        self.weights.iter().map(Matrix::len).sum()
    }

    /// Weights (layer order, row-major) followed by biases if present.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, self.biases.as_deref())
    }

    /// Inverse of [`MlpParams::to_flat`] using `self` as the shape template.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return invalid(format!(
                "flat vector has {} entries, expected {}",
                flat.len(),
                self.num_params()
            ));
        }
        let mut off = 0;
        let weights = self
            .weights
            .iter()
            .map(|w| {
                let m = Matrix::from_fn(w.rows(), w.cols(), |r, c| flat[off + r * w.cols() + c]);
                off += w.len();
                m
            })
            .collect();
        let biases = self.biases.as_ref().map(|bs| {
            bs.iter()
                .map(|b| {
                    let v = flat[off..off + b.len()].to_vec();
                    off += b.len();
                    v
                })
                .collect()
        });
        Ok(Self { weights, biases })
    }

    /// `self − η·g` for every parameter.
    pub fn sub_scaled(&self, eta: f64, g: &LayerGrads) -> Result<Self> {
        check_grad_shapes(self, g)?;
        let mut out = self.clone();
        for (w, gw) in out.weights.iter_mut().zip(&g.weights) {
            w.axpy(-eta, gw)?;
        }
        if let (Some(bs), Some(gbs)) = (out.biases.as_mut(), g.biases.as_ref()) {
            for (b, gb) in bs.iter_mut().zip(gbs) {
                for (v, gv) in b.iter_mut().zip(gb) {
                    *v -= eta * gv;
                }
            }
        }
        Ok(out)
    }

    /// Multiplies layer `l` (0-based) by `alpha` and layer `l+1` by `1/alpha`.
    pub fn rescale_pair(&self, l: usize, alpha: f64) -> Result<Self> {
        if l + 1 >= self.depth() {
            return invalid("rescale_pair needs l + 1 < depth");
        }
        let mut out = self.clone();
        out.weights[l] = out.weights[l].scale(alpha);
        out.weights[l + 1] = out.weights[l + 1].scale(1.0 / alpha);
        if let Some(bs) = out.biases.as_mut() {
            bs[l].iter_mut().for_each(|v| *v *= alpha);
        }
        Ok(out)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::from_params(self);
        std::fs::write(path, serde_json::to_vec_pretty(&ckpt)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        ckpt.into_params()
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Version-tagged parameter checkpoint: layer shapes plus row-major values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_params(p: &MlpParams) -> Self {
        let layers = p
            .weights
            .iter()
            .enumerate()
            .map(|(l, w)| CheckpointLayer {
                rows: w.rows(),
                cols: w.cols(),
                weights: w.as_slice().to_vec(),
                bias: p.biases.as_ref().map(|bs| bs[l].clone()),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            layers,
        }
    }

    pub fn into_params(self) -> Result<MlpParams> {
        if self.version != CHECKPOINT_VERSION {
            return invalid(format!("unsupported checkpoint version {}", self.version));
        }
        let has_bias = self.layers.iter().any(|l| l.bias.is_some());
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::new();
        for layer in self.layers {
            weights.push(Matrix::from_vec(layer.rows, layer.cols, layer.weights)?);
            if has_bias {
                biases.push(layer.bias.ok_or_else(|| {
                    Error::InvalidInput("checkpoint mixes biased and bias-free layers".into())
                })?);
            }
        }
        MlpParams::new(weights, has_bias.then_some(biases))
    }
}

fn flatten(weights: &[Matrix], biases: Option<&[Vec<f64>]>) -> Vec<f64> {
    let mut flat: Vec<f64> = weights.iter().flat_map(|w| w.as_slice().iter().copied()).collect();
    if let Some(bs) = biases {
        flat.extend(bs.iter().flatten().copied());
    }
    flat
}

fn check_grad_shapes(p: &MlpParams, g: &LayerGrads) -> Result<()> {
    if p.weights.len() != g.weights.len()
        || p.weights.iter().zip(&g.weights).any(|(w, gw)| w.shape() != gw.shape())
        || p.biases.is_some() != g.biases.is_some()
    {
        return invalid("gradient shapes do not match parameters");
    }
    Ok(())
}

/// Forward pass retaining every intermediate.
pub fn forward(p: &MlpParams, x: &Matrix, act: Activation) -> Result<ForwardCache> {
    if x.cols() != p.weights[0].cols() {
        return invalid(format!(
            "input has {} features, network expects {}",
            x.cols(),
            p.weights[0].cols()
        ));
    }
    let depth = p.depth();
    let mut preacts = Vec::with_capacity(depth - 1);
    let mut acts = Vec::with_capacity(depth);
    acts.push(x.clone());
    for l in 0..depth {
        let mut z = acts[l].matmul_t(&p.weights[l])?;
        if let Some(bs) = &p.biases {
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&bs[l]) {
                    *v += b;
                }
            }
        }
        if l + 1 == depth {
            return Ok(ForwardCache {
                preacts,
                acts,
                logits: z,
            });
        }
        acts.push(z.map(|v| act.apply(v)));
        preacts.push(z);
    }
    unreachable!("depth >= 1")
}

/// Exact gradients of the scalar loss whose logit gradient is `dlogits`.
pub fn backward(p: &MlpParams, cache: &ForwardCache, dlogits: &Matrix, act: Activation) -> Result<LayerGrads> {
    if dlogits.shape() != cache.logits.shape() {
        return invalid(format!(
            "dlogits shape {:?} does not match logits {:?}",
            dlogits.shape(),
            cache.logits.shape()
        ));
    }
    let depth = p.depth();
    let mut gw = vec![Matrix::zeros(0, 0); depth];
    let mut gb: Option<Vec<Vec<f64>>> = p.biases.as_ref().map(|_| vec![Vec::new(); depth]);
    let mut delta = dlogits.clone();
    for l in (0..depth).rev() {
        gw[l] = delta.t_matmul(&cache.acts[l])?;
        if let Some(gb) = gb.as_mut() {
            let mut col_sum = vec![0.0; delta.cols()];
            for r in 0..delta.rows() {
                for (s, v) in col_sum.iter_mut().zip(delta.row(r)) {
                    *s += v;
                }
            }
            gb[l] = col_sum;
        }
        if l > 0 {
            let upstream = delta.matmul(&p.weights[l])?;
            delta = upstream.zip_with(&cache.preacts[l - 1], |g, z| g * act.derivative(z))?;
        }
    }
    Ok(LayerGrads {
        weights: gw,
        biases: gb,
    })
}

/// `tr(W_lᵀ g_l)` for each layer.
pub fn trace_pairing(p: &MlpParams, g: &LayerGrads) -> Result<Vec<f64>> {
    check_grad_shapes(p, g)?;
    p.weights
        .iter()
        .zip(&g.weights)
        .map(|(w, gw)| w.frobenius_dot(gw))
        .collect()
}
