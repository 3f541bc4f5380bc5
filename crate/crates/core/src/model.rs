//! SuperiorGAT and the learned baselines, assembled from tape operations.
//!
//! SuperiorGAT runs a single neighbourhood aggregation per forward pass:
//!
//! ```text
//! h_norm  = LN(H · proj_in)
//! h_attn  = ‖_k σ(Σ_j α^k_ij W^k h_j)
//! h_gated = LN(γ · h_attn + (1 − γ) · h_norm),     γ = sigmoid(gate_logit)
//! h_final = LN(FFN(h_gated) + h_gated)
//! ẑ       = decoder(h_final)
//! ```
//!
//! Parameters live in [`ModelParams`] as an ordered list of named arrays so
//! that the optimizer, the checkpoint format and the Python bindings can
//! treat every architecture uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeFeatures, FEATURE_DIM};
use crate::ingest::SparseFrame;
use crate::tensor::{Tape, Tensor, Var};

pub const ATTENTION_SLOPE: f64 = 0.2;
pub const FFN_SLOPE: f64 = 0.01;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SuperiorGat,
    GatBaseline,
    SimpleGcn,
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::SuperiorGat => "superior_gat",
            Architecture::GatBaseline => "gat_baseline",
            Architecture::SimpleGcn => "simple_gcn",
        }
    }

    pub fn default_layers(&self) -> usize {
        match self {
            Architecture::SuperiorGat => 1,
            Architecture::GatBaseline => 3,
            Architecture::SimpleGcn => 2,
        }
    }
}

/// Node activation σ applied to aggregated messages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Elu { alpha: f64 },
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.2 }
    }
}

impl Activation {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match *self {
            Activation::LeakyRelu { slope } => tape.leaky_relu(x, slope),
            Activation::Elu { alpha } => tape.elu(x, alpha),
        }
    }

    pub fn eval(&self, v: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { slope } => {
                if v > 0.0 {
                    v
                } else {
                    slope * v
                }
            }
            Activation::Elu { alpha } => {
                if v > 0.0 {
                    v
                } else {
                    alpha * v.exp_m1()
                }
            }
        }
    }
}

/// What the gate mixes the attention output with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputResidual {
    /// Layer-normed learned projection of the raw features.
    #[default]
    Projected,
    /// Layer-normed raw features, zero-padded to the residual width.
    ZeroPadded,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub decoder_hidden: usize,
    pub layers: usize,
    pub activation: Activation,
    pub input_residual: InputResidual,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(Architecture::SuperiorGat)
    }
}

impl ModelConfig {
    pub fn new(architecture: Architecture) -> Self {
        Self {
            architecture,
            heads: 4,
            head_dim: 16,
            ffn_hidden: 128,
            decoder_hidden: 32,
            layers: architecture.default_layers(),
            activation: Activation::default(),
            input_residual: InputResidual::default(),
            seed: 0,
        }
    }

    /// Residual width `K · F'`.
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("layers", self.layers),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.architecture == Architecture::SuperiorGat && self.layers != 1 {
            return Err(Error::InvalidConfig("superior_gat has exactly one layer".into()));
        }
        if self.input_residual == InputResidual::ZeroPadded && self.width() < FEATURE_DIM {
            return Err(Error::InvalidConfig(format!(
                "zero-padded residual needs width >= {FEATURE_DIM}"
            )));
        }
        Ok(())
    }
}

/// Fixed per-frame affine normalisation of the inputs and the regressed z.
///
/// Features are mapped to `(f - shift) / scale` before the first layer and
/// the network output `o` is returned as `z_shift + z_scale · o`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub shift: [f64; FEATURE_DIM],
    pub scale: [f64; FEATURE_DIM],
    pub z_shift: f64,
    pub z_scale: f64,
}

impl Default for FeatureScaler {
    fn default() -> Self {
        Self {
            shift: [0.0; FEATURE_DIM],
            scale: [1.0; FEATURE_DIM],
            z_shift: 0.0,
            z_scale: 1.0,
        }
    }
}

impl FeatureScaler {
    /// Statistics of planar coordinates over all points and of z over the
    /// observed points only; dropped z values are never read.
    pub fn fit(frame: &SparseFrame) -> Self {
        fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
            let n = values.clone().count().max(1) as f64;
            let mean = values.clone().sum::<f64>() / n;
            let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            (mean, if std > 1e-6 { std } else { 1.0 })
        }
        let xs = (0..frame.len()).map(|i| frame.xy(i)[0]);
        let ys = (0..frame.len()).map(|i| frame.xy(i)[1]);
        let zs = (0..frame.len())
            .filter(|&i| !frame.dropped_mask[i])
            .map(|i| frame.z_masked[i]);
        let (mx, sx) = mean_std(xs);
        let (my, sy) = mean_std(ys);
        let (mz, sz) = mean_std(zs);
        Self {
            shift: [mx, my, mz, 0.0],
            scale: [sx, sy, sz, 1.0],
            z_shift: mz,
            z_scale: sz,
        }
    }

    pub fn apply(&self, features: &NodeFeatures) -> Tensor {
        let mut t = features.tensor().clone();
        for row in t.data_mut().chunks_mut(FEATURE_DIM) {
            for j in 0..FEATURE_DIM {
                row[j] = (row[j] - self.shift[j]) / self.scale[j];
            }
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.clone()).expect("named array shape")
    }
}

/// All learnable arrays of one configured model, plus its input scaler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub scaler: FeatureScaler,
    pub arrays: Vec<NamedArray>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedArray> {
        self.arrays.iter_mut().find(|a| a.name == name)
    }

    /// Mixing weight γ of the gated residual.
    pub fn gate(&self) -> Option<f64> {
        self.get("gate_logit")
            .map(|a| crate::tensor::sigmoid(a.data[0]))
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    /// Registers every array as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            names: self.arrays.iter().map(|a| a.name.clone()).collect(),
            vars: self.arrays.iter().map(|a| tape.param(a.tensor())).collect(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: ModelParams = toml::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        for a in &p.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Checkpoint(format!("array {} has inconsistent shape", a.name)));
            }
        }
        Ok(p)
    }
}

/// Tape handles for a [`ModelParams`], in the same order as its arrays.
pub struct BoundParams {
    names: Vec<String>,
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w: Var,
    pub a: Var,
}

fn glorot(rng: &mut ChaCha8Rng, name: String, rows: usize, cols: usize) -> NamedArray {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    NamedArray {
        name,
        shape: vec![rows, cols],
        data: (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect(),
    }
}

fn filled(name: impl Into<String>, len: usize, value: f64) -> NamedArray {
    NamedArray {
        name: name.into(),
        shape: vec![len],
        data: vec![value; len],
    }
}

fn push_heads(arrays: &mut Vec<NamedArray>, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig, fan_in: usize) {
    for k in 0..cfg.heads {
        arrays.push(glorot(rng, format!("{prefix}head{k}.w"), fan_in, cfg.head_dim));
        arrays.push(glorot(rng, format!("{prefix}head{k}.a"), 2 * cfg.head_dim, 1));
    }
}

fn push_norm(arrays: &mut Vec<NamedArray>, prefix: &str, width: usize) {
    arrays.push(filled(format!("{prefix}.gain"), width, 1.0));
    arrays.push(filled(format!("{prefix}.bias"), width, 0.0));
}

fn push_decoder(arrays: &mut Vec<NamedArray>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    arrays.push(glorot(rng, "decoder.w1".into(), cfg.width(), cfg.decoder_hidden));
    arrays.push(filled("decoder.b1", cfg.decoder_hidden, 0.0));
    arrays.push(glorot(rng, "decoder.w2".into(), cfg.decoder_hidden, 1));
    arrays.push(filled("decoder.b2", 1, 0.0));
}

/// Glorot-uniform weights, zero biases, unit norm gains and `γ = 0.5`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = config.width();
    let mut arrays = Vec::new();
    match config.architecture {
        Architecture::SuperiorGat => {
            push_heads(&mut arrays, &mut rng, "", config, FEATURE_DIM);
            if config.input_residual == InputResidual::Projected {
                arrays.push(glorot(&mut rng, "proj_in".into(), FEATURE_DIM, width));
            }
            push_norm(&mut arrays, "input_norm", width);
            arrays.push(filled("gate_logit", 1, 0.0));
            push_norm(&mut arrays, "gate_norm", width);
            arrays.push(glorot(&mut rng, "ffn.w1".into(), width, config.ffn_hidden));
            arrays.push(filled("ffn.b1", config.ffn_hidden, 0.0));
            arrays.push(glorot(&mut rng, "ffn.w2".into(), config.ffn_hidden, width));
            arrays.push(filled("ffn.b2", width, 0.0));
            push_norm(&mut arrays, "ffn_norm", width);
        }
        Architecture::GatBaseline => {
            for l in 0..config.layers {
                let fan_in = if l == 0 { FEATURE_DIM } else { width };
                push_heads(&mut arrays, &mut rng, &format!("layer{l}."), config, fan_in);
            }
        }
        Architecture::SimpleGcn => {
            for l in 0..config.layers {
                let fan_in = if l == 0 { FEATURE_DIM } else { width };
                arrays.push(glorot(&mut rng, format!("layer{l}.w"), fan_in, width));
            }
        }
    }
    push_decoder(&mut arrays, &mut rng, config);
    Ok(ModelParams {
        config: *config,
        scaler: FeatureScaler::default(),
        arrays,
    })
}

fn head_vars(bound: &BoundParams, prefix: &str, heads: usize) -> Result<Vec<HeadVars>> {
    (0..heads)
        .map(|k| {
            Ok(HeadVars {
                w: bound.var(&format!("{prefix}head{k}.w"))?,
                a: bound.var(&format!("{prefix}head{k}.a"))?,
            })
        })
        .collect()
}

/// Output of a multi-head attention layer.
pub struct AttentionOutput {
    /// Concatenated head outputs, `[N, K·F']`.
    pub h: Var,
    /// Per-head attention coefficients over the graph's edge list, `[E, 1]`.
    pub alpha: Vec<Var>,
}

/// Multi-head graph attention over the edges of `graph`.
///
/// Per head: `H' = H·W`, `e_ij = LeakyReLU(aᵀ[H'_i ‖ H'_j])` on every edge
/// `j -> i`, softmax over each node's incoming edges, then
/// `σ(Σ_j α_ij H'_j)`. Heads are concatenated column-wise.
pub fn gat_attention_layer(
    tape: &mut Tape,
    graph: &Graph,
    h: Var,
    heads: &[HeadVars],
    activation: Activation,
) -> Result<AttentionOutput> {
    let src = graph.edge_src();
    let dst = graph.edge_dst();
    let mut outs = Vec::with_capacity(heads.len());
    let mut alphas = Vec::with_capacity(heads.len());
    for head in heads {
        let hp = tape.matmul(h, head.w)?;
        let fp = tape.value(hp).cols();
        if tape.value(head.a).numel() != 2 * fp {
            return Err(Error::shape(
                "gat_attention_layer",
                format!("attention vector of {} for head width {fp}", tape.value(head.a).numel()),
            ));
        }
        let a_dst = tape.slice_rows(head.a, 0, fp)?;
        let a_src = tape.slice_rows(head.a, fp, 2 * fp)?;
        let s_dst = tape.matmul(hp, a_dst)?;
        let s_src = tape.matmul(hp, a_src)?;
        let e_dst = tape.gather_rows(s_dst, dst.clone())?;
        let e_src = tape.gather_rows(s_src, src.clone())?;
        let logits = tape.add(e_dst, e_src)?;
        let logits = tape.leaky_relu(logits, ATTENTION_SLOPE)?;
        let alpha = tape.segment_softmax(logits, graph.segments())?;
        let messages = tape.gather_rows(hp, src.clone())?;
        let agg = tape.segment_weighted_sum(messages, alpha, graph.segments())?;
        outs.push(activation.apply(tape, agg)?);
        alphas.push(alpha);
    }
    let h = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    Ok(AttentionOutput { h, alpha: alphas })
}

/// Mean aggregation with fixed weights: `σ((1/deg i) Σ_j H_j W)`.
pub fn gcn_layer(tape: &mut Tape, graph: &Graph, h: Var, w: Var, activation: Activation) -> Result<Var> {
    let hw = tape.matmul(h, w)?;
    let messages = tape.gather_rows(hw, graph.edge_src())?;
    let weights: Vec<f64> = graph
        .edge_dst()
        .iter()
        .map(|&i| 1.0 / graph.degree(i) as f64)
        .collect();
    let weights = tape.constant(Tensor::vector(weights));
    let agg = tape.segment_weighted_sum(messages, weights, graph.segments())?;
    activation.apply(tape, agg)
}

fn layer_norm_named(tape: &mut Tape, bound: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
    let gain = bound.var(&format!("{prefix}.gain"))?;
    let bias = bound.var(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn decoder(tape: &mut Tape, bound: &BoundParams, h: Var) -> Result<Var> {
    let hidden = linear(tape, h, bound.var("decoder.w1")?, bound.var("decoder.b1")?)?;
    let hidden = tape.leaky_relu(hidden, FFN_SLOPE)?;
    linear(tape, hidden, bound.var("decoder.w2")?, bound.var("decoder.b2")?)
}

/// Result of a forward pass.
pub struct ForwardOutput {
    /// Predicted z per node, `[N, 1]`, in metres.
    pub z_hat: Var,
    /// Attention coefficients per attention layer and head.
    pub attention: Vec<Vec<Var>>,
}

pub fn superior_gat_forward(
    tape: &mut Tape,
    graph: &Graph,
    config: &ModelConfig,
    bound: &BoundParams,
    h0: Var,
) -> Result<(Var, Vec<Var>)> {
    let width = config.width();
    let base = match config.input_residual {
        InputResidual::Projected => tape.matmul(h0, bound.var("proj_in")?)?,
        InputResidual::ZeroPadded => {
            let mut pad = Tensor::zeros(vec![FEATURE_DIM, width]);
            for j in 0..FEATURE_DIM {
                pad.data_mut()[j * width + j] = 1.0;
            }
            let pad = tape.constant(pad);
            tape.matmul(h0, pad)?
        }
    };
    let h_norm = layer_norm_named(tape, bound, base, "input_norm")?;

    let heads = head_vars(bound, "", config.heads)?;
    let attn = gat_attention_layer(tape, graph, h0, &heads, config.activation)?;

    let gamma = tape.sigmoid(bound.var("gate_logit")?)?;
    let neg = tape.scale(gamma, -1.0)?;
    let one_minus = tape.add_const(neg, 1.0)?;
    let a = tape.mul_scalar(attn.h, gamma)?;
    let b = tape.mul_scalar(h_norm, one_minus)?;
    let mixed = tape.add(a, b)?;
    let h_gated = layer_norm_named(tape, bound, mixed, "gate_norm")?;

    let ffn = linear(tape, h_gated, bound.var("ffn.w1")?, bound.var("ffn.b1")?)?;
    let ffn = tape.leaky_relu(ffn, FFN_SLOPE)?;
    let ffn = linear(tape, ffn, bound.var("ffn.w2")?, bound.var("ffn.b2")?)?;
    let res = tape.add(ffn, h_gated)?;
    let h_final = layer_norm_named(tape, bound, res, "ffn_norm")?;

    Ok((decoder(tape, bound, h_final)?, attn.alpha))
}

/// Stacked plain attention layers; layers after the first add their input
/// back (same width) before the next layer.
pub fn gat_baseline_forward(
    tape: &mut Tape,
    graph: &Graph,
    config: &ModelConfig,
    bound: &BoundParams,
    h0: Var,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let mut h = h0;
    let mut attention = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let heads = head_vars(bound, &format!("layer{l}."), config.heads)?;
        let out = gat_attention_layer(tape, graph, h, &heads, config.activation)?;
        h = if l == 0 { out.h } else { tape.add(out.h, h)? };
        attention.push(out.alpha);
    }
    Ok((decoder(tape, bound, h)?, attention))
}

pub fn simple_gcn_forward(
    tape: &mut Tape,
    graph: &Graph,
    config: &ModelConfig,
    bound: &BoundParams,
    h0: Var,
) -> Result<Var> {
    let mut h = h0;
    for l in 0..config.layers {
        h = gcn_layer(tape, graph, h, bound.var(&format!("layer{l}.w"))?, config.activation)?;
    }
    decoder(tape, bound, h)
}

/// Full forward for any architecture, including input scaling and output
/// de-scaling, on the graph's own features.
pub fn forward(tape: &mut Tape, graph: &Graph, params: &ModelParams, bound: &BoundParams) -> Result<ForwardOutput> {
    forward_features(tape, graph, &graph.features, params, bound)
}

/// [`forward`] with node features supplied separately from the topology.
pub fn forward_features(
    tape: &mut Tape,
    graph: &Graph,
    features: &NodeFeatures,
    params: &ModelParams,
    bound: &BoundParams,
) -> Result<ForwardOutput> {
    if features.num_nodes() != graph.num_nodes() {
        return Err(Error::shape(
            "forward",
            format!("{} feature rows for {} nodes", features.num_nodes(), graph.num_nodes()),
        ));
    }
    let config = &params.config;
    let scaled = params.scaler.apply(features);
    let h0 = tape.constant(scaled);
    let (out, attention) = match config.architecture {
        Architecture::SuperiorGat => {
            let (z, alpha) = superior_gat_forward(tape, graph, config, bound, h0)?;
            (z, vec![alpha])
        }
        Architecture::GatBaseline => gat_baseline_forward(tape, graph, config, bound, h0)?,
        Architecture::SimpleGcn => (simple_gcn_forward(tape, graph, config, bound, h0)?, vec![]),
    };
    let z = tape.scale(out, params.scaler.z_scale)?;
    let z_hat = tape.add_const(z, params.scaler.z_shift)?;
    Ok(ForwardOutput { z_hat, attention })
}

/// Inference-only forward returning ẑ for every node.
pub fn predict(graph: &Graph, params: &ModelParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward(&mut tape, graph, params, &bound)?;
    Ok(tape.value(out.z_hat).data().to_vec())
}
