//! Computation graphs and forward passes.
//!
//! Three architecture families are supported:
//!
//! * `Linear`: a bias-free stack of linear maps on a vector input, used to check
//!   that relevance propagation reduces to leave-one-out on linear functions.
//! * `Qkv`: a pixel-sequence linear-attention network without softmax. The two
//!   factorizations compute `(Q K^T) V` or `Q (K^T V)` from identical weights.
//! * `Encoder`: an L-layer single-head softmax-attention encoder over tokens with
//!   residual connections, a ReLU feed-forward block, mean pooling and a linear
//!   classifier.
//!
//! Every forward pass records a [`ForwardTrace`] holding the activations that the
//! relevance rules and the gradient code need.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Matrix};

/// Grouping of the two products in a linear-attention readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factorization {
    /// `O = (Q K^T / sqrt(d)) V`
    AvFirst,
    /// `O = Q (K^T V / sqrt(d))`
    KvFirst,
}

impl Factorization {
    pub fn other(self) -> Self {
        match self {
            Factorization::AvFirst => Factorization::KvFirst,
            Factorization::KvFirst => Factorization::AvFirst,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear {
        input_dim: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    Qkv {
        order: Factorization,
        seq_len: usize,
        d_model: usize,
        classes: usize,
    },
    Encoder {
        vocab: usize,
        seq_len: usize,
        d_model: usize,
        d_ff: usize,
        layers: usize,
        classes: usize,
    },
}

impl Architecture {
    /// MNIST configuration: 196 pixels, embedding width 32, 10 classes.
    pub fn mnist_qkv(order: Factorization) -> Self {
        Architecture::Qkv {
            order,
            seq_len: 196,
            d_model: 32,
            classes: 10,
        }
    }

    /// Six-layer encoder of width 32 for the keyword task.
    pub fn keyword_encoder(vocab: usize, seq_len: usize, classes: usize) -> Self {
        Architecture::Encoder {
            vocab,
            seq_len,
            d_model: 32,
            d_ff: 64,
            layers: 6,
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::Linear { classes, .. }
            | Architecture::Qkv { classes, .. }
            | Architecture::Encoder { classes, .. } => classes,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Setting(format!("architecture field `{name}` must be positive")))
            } else {
                Ok(())
            }
        };
        match self {
            Architecture::Linear {
                input_dim,
                hidden,
                classes,
            } => {
                positive("input_dim", *input_dim)?;
                positive("classes", *classes)?;
                hidden.iter().try_for_each(|&h| positive("hidden", h))
            }
            Architecture::Qkv {
                seq_len,
                d_model,
                classes,
                ..
            } => {
                positive("seq_len", *seq_len)?;
                positive("d_model", *d_model)?;
                positive("classes", *classes)
            }
            Architecture::Encoder {
                vocab,
                seq_len,
                d_model,
                d_ff,
                layers,
                classes,
            } => {
                for (n, v) in [
                    ("vocab", vocab),
                    ("seq_len", seq_len),
                    ("d_model", d_model),
                    ("d_ff", d_ff),
                    ("layers", layers),
                    ("classes", classes),
                ] {
                    positive(n, *v)?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// `X_t = x_t * e + p_t` with a shared pixel vector `e` and position rows `p_t`.
    Pixel,
    /// `X_t = E[id_t] + p_t`.
    Token,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Embedding(EmbeddingKind),
    /// Bias-free `X W` applied row-wise; names the weight parameter.
    Linear(String),
    Relu,
    /// Parameters `{prefix}.wq`, `{prefix}.wk`, `{prefix}.wv`.
    LinearAttention { prefix: String, order: Factorization },
    /// Parameters `{prefix}.wq`, `{prefix}.wk`, `{prefix}.wv`, `{prefix}.wo`.
    SoftmaxAttention { prefix: String },
    /// `X + branch(X)`.
    Residual(Vec<LayerSpec>),
    MeanPool,
    Classifier(String),
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Embedding(_) => "embedding",
            LayerSpec::Linear(_) => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::LinearAttention { .. } => "linear_attention",
            LayerSpec::SoftmaxAttention { .. } => "softmax_attention",
            LayerSpec::Residual(_) => "residual",
            LayerSpec::MeanPool => "mean_pool",
            LayerSpec::Classifier(_) => "classifier",
        }
    }
}

/// Named parameter matrices, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params(BTreeMap<String, Matrix>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.0.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.0.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.0.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> Params {
        Params(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
                .collect(),
        )
    }
}

/// What the model consumes. `keep` flags mark positions that are present; a
/// `false` entry masks the position out of attention and pooling.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Vector(Vec<f64>),
    Pixels(Vec<f64>),
    Tokens { ids: Vec<usize>, keep: Vec<bool> },
    /// Output of the embedding layer, fed directly to the layers after it.
    Embedded { rows: Matrix, keep: Vec<bool> },
}

impl ModelInput {
    pub fn tokens(ids: Vec<usize>) -> Self {
        let keep = vec![true; ids.len()];
        ModelInput::Tokens { ids, keep }
    }

    pub fn embedded(rows: Matrix) -> Self {
        let keep = vec![true; rows.rows()];
        ModelInput::Embedded { rows, keep }
    }

    /// Number of attributable features: vector entries, pixels, or token positions.
    pub fn feature_count(&self) -> usize {
        match self {
            ModelInput::Vector(v) | ModelInput::Pixels(v) => v.len(),
            ModelInput::Tokens { ids, .. } => ids.len(),
            ModelInput::Embedded { rows, .. } => rows.rows(),
        }
    }

    pub fn keep(&self) -> Vec<bool> {
        match self {
            ModelInput::Vector(v) | ModelInput::Pixels(v) => vec![true; v.len()],
            ModelInput::Tokens { keep, .. } | ModelInput::Embedded { keep, .. } => keep.clone(),
        }
    }

    /// Removes features: zeroes vector entries and pixels, masks token positions.
    pub fn remove(&self, features: &[usize]) -> ModelInput {
        let mut out = self.clone();
        match &mut out {
            ModelInput::Vector(v) | ModelInput::Pixels(v) => {
                for &i in features {
                    v[i] = 0.0;
                }
            }
            ModelInput::Tokens { keep, .. } | ModelInput::Embedded { keep, .. } => {
                for &i in features {
                    keep[i] = false;
                }
            }
        }
        out
    }

    /// True when removing feature `i` cannot change the model input.
    pub fn removal_is_noop(&self, i: usize) -> bool {
        match self {
            ModelInput::Vector(v) | ModelInput::Pixels(v) => v[i] == 0.0,
            ModelInput::Tokens { keep, .. } | ModelInput::Embedded { keep, .. } => !keep[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearAttentionTrace {
    pub order: Factorization,
    pub input: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// `Z = Q K^T / sqrt(d)` for `AvFirst`, `M = K^T V / sqrt(d)` for `KvFirst`.
    pub inner: Matrix,
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxAttentionTrace {
    pub input: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Raw logits `Q K^T / sqrt(d)`, including masked columns.
    pub z: Matrix,
    /// Row-wise softmax over kept columns; masked columns are exactly 0.
    pub a: Matrix,
    pub o: Matrix,
    /// `O W_O`.
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeTrace {
    PixelEmbedding {
        pixels: Vec<f64>,
        /// `x_t * e`, the pixel share of each embedding row.
        pixel_part: Matrix,
        output: Matrix,
    },
    TokenEmbedding {
        ids: Vec<usize>,
        output: Matrix,
    },
    Linear {
        param: String,
        input: Matrix,
        output: Matrix,
    },
    Relu {
        input: Matrix,
        output: Matrix,
    },
    LinearAttention {
        prefix: String,
        trace: LinearAttentionTrace,
    },
    SoftmaxAttention {
        prefix: String,
        trace: SoftmaxAttentionTrace,
    },
    Residual {
        input: Matrix,
        branch: Vec<NodeTrace>,
        output: Matrix,
    },
    MeanPool {
        input: Matrix,
        output: Matrix,
    },
    Classifier {
        param: String,
        input: Matrix,
        output: Matrix,
    },
}

impl NodeTrace {
    pub fn output(&self) -> &Matrix {
        match self {
            NodeTrace::PixelEmbedding { output, .. }
            | NodeTrace::TokenEmbedding { output, .. }
            | NodeTrace::Linear { output, .. }
            | NodeTrace::Relu { output, .. }
            | NodeTrace::Residual { output, .. }
            | NodeTrace::MeanPool { output, .. }
            | NodeTrace::Classifier { output, .. } => output,
            NodeTrace::LinearAttention { trace, .. } => &trace.output,
            NodeTrace::SoftmaxAttention { trace, .. } => &trace.output,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            NodeTrace::PixelEmbedding { .. } | NodeTrace::TokenEmbedding { .. } => "embedding",
            NodeTrace::Linear { .. } => "linear",
            NodeTrace::Relu { .. } => "relu",
            NodeTrace::LinearAttention { .. } => "linear_attention",
            NodeTrace::SoftmaxAttention { .. } => "softmax_attention",
            NodeTrace::Residual { .. } => "residual",
            NodeTrace::MeanPool { .. } => "mean_pool",
            NodeTrace::Classifier { .. } => "classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: ModelInput,
    pub keep: Vec<bool>,
    pub nodes: Vec<NodeTrace>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    /// Embedding-layer output (or the supplied embedded rows), if the model has one.
    pub fn embedded(&self) -> Option<&Matrix> {
        match (&self.input, self.nodes.first()) {
            (ModelInput::Embedded { rows, .. }, _) => Some(rows),
            (_, Some(NodeTrace::PixelEmbedding { output, .. } | NodeTrace::TokenEmbedding { output, .. })) => {
                Some(output)
            }
            _ => None,
        }
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }

    /// Attention traces in layer order (1-based index = position + 1).
    pub fn softmax_attention(&self) -> Vec<&SoftmaxAttentionTrace> {
        fn walk<'a>(nodes: &'a [NodeTrace], out: &mut Vec<&'a SoftmaxAttentionTrace>) {
            for n in nodes {
                match n {
                    NodeTrace::SoftmaxAttention { trace, .. } => out.push(trace),
                    NodeTrace::Residual { branch, .. } => walk(branch, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.nodes, &mut out);
        out
    }

    pub fn linear_attention(&self) -> Vec<&LinearAttentionTrace> {
        fn walk<'a>(nodes: &'a [NodeTrace], out: &mut Vec<&'a LinearAttentionTrace>) {
            for n in nodes {
                match n {
                    NodeTrace::LinearAttention { trace, .. } => out.push(trace),
                    NodeTrace::Residual { branch, .. } => walk(branch, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.nodes, &mut out);
        out
    }
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    arch: Architecture,
    layers: Vec<LayerSpec>,
    params: Params,
}

fn layers_for(arch: &Architecture) -> Vec<LayerSpec> {
    match arch {
        Architecture::Linear { hidden, .. } => {
            let mut layers: Vec<LayerSpec> = (0..hidden.len()).map(|i| LayerSpec::Linear(format!("linear.{i}"))).collect();
            layers.push(LayerSpec::Classifier("classifier".into()));
            layers
        }
        Architecture::Qkv { order, .. } => vec![
            LayerSpec::Embedding(EmbeddingKind::Pixel),
            LayerSpec::LinearAttention {
                prefix: "attn".into(),
                order: *order,
            },
            LayerSpec::MeanPool,
            LayerSpec::Classifier("classifier".into()),
        ],
        Architecture::Encoder { layers: depth, .. } => {
            let mut layers = vec![LayerSpec::Embedding(EmbeddingKind::Token)];
            for l in 1..=*depth {
                layers.push(LayerSpec::Residual(vec![LayerSpec::SoftmaxAttention {
                    prefix: format!("layer{l}.attn"),
                }]));
                layers.push(LayerSpec::Residual(vec![
                    LayerSpec::Linear(format!("layer{l}.ffn.w1")),
                    LayerSpec::Relu,
                    LayerSpec::Linear(format!("layer{l}.ffn.w2")),
                ]));
            }
            layers.push(LayerSpec::MeanPool);
            layers.push(LayerSpec::Classifier("classifier".into()));
            layers
        }
    }
}

/// Parameter names and shapes each architecture requires.
fn param_shapes(arch: &Architecture) -> Vec<(String, (usize, usize))> {
    match arch {
        Architecture::Linear {
            input_dim,
            hidden,
            classes,
        } => {
            let mut shapes = Vec::new();
            let mut prev = *input_dim;
            for (i, &h) in hidden.iter().enumerate() {
                shapes.push((format!("linear.{i}"), (prev, h)));
                prev = h;
            }
            shapes.push(("classifier".into(), (prev, *classes)));
            shapes
        }
        Architecture::Qkv {
            seq_len,
            d_model,
            classes,
            ..
        } => vec![
            ("embed.pixel".into(), (1, *d_model)),
            ("embed.pos".into(), (*seq_len, *d_model)),
            ("attn.wq".into(), (*d_model, *d_model)),
            ("attn.wk".into(), (*d_model, *d_model)),
            ("attn.wv".into(), (*d_model, *d_model)),
            ("classifier".into(), (*d_model, *classes)),
        ],
        Architecture::Encoder {
            vocab,
            seq_len,
            d_model,
            d_ff,
            layers,
            classes,
        } => {
            let d = *d_model;
            let mut shapes = vec![
                ("embed.token".to_string(), (*vocab, d)),
                ("embed.pos".to_string(), (*seq_len, d)),
            ];
            for l in 1..=*layers {
                for w in ["wq", "wk", "wv", "wo"] {
                    shapes.push((format!("layer{l}.attn.{w}"), (d, d)));
                }
                shapes.push((format!("layer{l}.ffn.w1"), (d, *d_ff)));
                shapes.push((format!("layer{l}.ffn.w2"), (*d_ff, d)));
            }
            shapes.push(("classifier".into(), (d, *classes)));
            shapes
        }
    }
}

impl ModelGraph {
    /// Fresh model with weights drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    /// Embedding tables use `fan_in = 1`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for (name, (rows, cols)) in param_shapes(&arch) {
            let fan_in = if name.starts_with("embed.") { 1 } else { rows };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            params.insert(name, Matrix::new(rows, cols, data)?);
        }
        Ok(Self {
            layers: layers_for(&arch),
            arch,
            params,
        })
    }

    /// Assembles a model from existing parameters, checking names and shapes.
    pub fn from_parts(arch: Architecture, params: Params) -> Result<Self> {
        arch.validate()?;
        for (name, expected) in param_shapes(&arch) {
            let actual = params.get(&name)?.shape();
            if actual != expected {
                return Err(Error::ParamShape { name, expected, actual });
            }
        }
        Ok(Self {
            layers: layers_for(&arch),
            arch,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.arch.classes()
    }

    /// Key dimension used in the `1/sqrt(d_k)` scale.
    pub fn d_k(&self) -> usize {
        match self.arch {
            Architecture::Qkv { d_model, .. } | Architecture::Encoder { d_model, .. } => d_model,
            Architecture::Linear { .. } => 1,
        }
    }

    /// Number of attention layers (softmax or linear), addressed 1..=L by rule configs.
    pub fn num_attention_layers(&self) -> usize {
        match self.arch {
            Architecture::Linear { .. } => 0,
            Architecture::Qkv { .. } => 1,
            Architecture::Encoder { layers, .. } => layers,
        }
    }

    pub fn has_softmax_attention(&self) -> bool {
        matches!(self.arch, Architecture::Encoder { .. })
    }

    /// Same parameters under the other linear-attention grouping.
    pub fn with_factorization(&self, order: Factorization) -> Result<ModelGraph> {
        match self.arch {
            Architecture::Qkv {
                seq_len,
                d_model,
                classes,
                ..
            } => ModelGraph::from_parts(
                Architecture::Qkv {
                    order,
                    seq_len,
                    d_model,
                    classes,
                },
                self.params.clone(),
            ),
            _ => Err(Error::Setting("only QKV models have a factorization".into())),
        }
    }

    pub fn logits(&self, input: &ModelInput) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.logits)
    }

    pub fn predict(&self, input: &ModelInput) -> Result<usize> {
        Ok(argmax(&self.logits(input)?))
    }

    pub fn forward(&self, input: &ModelInput) -> Result<ForwardTrace> {
        let keep = input.keep();
        let (start, nodes_prefix, x) = self.prepare_input(input)?;
        let (mut nodes, out) = self.run(&self.layers[start..], x, &keep)?;
        let mut all = nodes_prefix;
        all.append(&mut nodes);
        if out.rows() != 1 {
            return Err(Error::Input(format!("model produced {} output rows", out.rows())));
        }
        Ok(ForwardTrace {
            input: input.clone(),
            keep,
            nodes: all,
            logits: out.into_data(),
        })
    }

    /// Resolves the input into the activation entering the first non-embedding
    /// layer. Returns the index of that layer and the embedding node, if any.
    fn prepare_input(&self, input: &ModelInput) -> Result<(usize, Vec<NodeTrace>, Matrix)> {
        match (&self.arch, input) {
            (Architecture::Linear { input_dim, .. }, ModelInput::Vector(v)) => {
                if v.len() != *input_dim {
                    return Err(Error::Input(format!("expected {input_dim} features, got {}", v.len())));
                }
                Ok((0, Vec::new(), Matrix::row_vector(v)))
            }
            (Architecture::Qkv { seq_len, d_model, .. }, ModelInput::Pixels(px)) => {
                if px.len() != *seq_len {
                    return Err(Error::Input(format!("expected {seq_len} pixels, got {}", px.len())));
                }
                let e = self.params.get("embed.pixel")?;
                let pos = self.params.get("embed.pos")?;
                let mut pixel_part = Matrix::zeros(*seq_len, *d_model);
                for (t, &x) in px.iter().enumerate() {
                    for (o, &w) in pixel_part.row_mut(t).iter_mut().zip(e.row(0)) {
                        *o = x * w;
                    }
                }
                let output = pixel_part.add(pos)?;
                let node = NodeTrace::PixelEmbedding {
                    pixels: px.clone(),
                    pixel_part,
                    output: output.clone(),
                };
                Ok((1, vec![node], output))
            }
            (
                Architecture::Encoder {
                    vocab,
                    seq_len,
                    d_model,
                    ..
                },
                ModelInput::Tokens { ids, keep },
            ) => {
                if ids.len() != *seq_len || keep.len() != *seq_len {
                    return Err(Error::Input(format!("expected {seq_len} tokens, got {}", ids.len())));
                }
                if let Some(&bad) = ids.iter().find(|&&t| t >= *vocab) {
                    return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
                }
                let table = self.params.get("embed.token")?;
                let pos = self.params.get("embed.pos")?;
                let mut output = pos.clone();
                for (t, &id) in ids.iter().enumerate() {
                    for (o, &w) in output.row_mut(t).iter_mut().zip(table.row(id)) {
                        *o += w;
                    }
                }
                debug_assert_eq!(output.cols(), *d_model);
                let node = NodeTrace::TokenEmbedding {
                    ids: ids.clone(),
                    output: output.clone(),
                };
                Ok((1, vec![node], output))
            }
            (
                Architecture::Qkv { seq_len, d_model, .. } | Architecture::Encoder { seq_len, d_model, .. },
                ModelInput::Embedded { rows, keep },
            ) => {
                if rows.shape() != (*seq_len, *d_model) || keep.len() != *seq_len {
                    return Err(Error::Input(format!(
                        "embedded input must be {seq_len}x{d_model}, got {:?}",
                        rows.shape()
                    )));
                }
                Ok((1, Vec::new(), rows.clone()))
            }
            (arch, input) => Err(Error::Input(format!(
                "{} input does not fit a {} model",
                input_kind(input),
                arch_kind(arch)
            ))),
        }
    }

    fn run(&self, layers: &[LayerSpec], mut x: Matrix, keep: &[bool]) -> Result<(Vec<NodeTrace>, Matrix)> {
        let mut nodes = Vec::with_capacity(layers.len());
        for layer in layers {
            let node = self.apply(layer, x, keep)?;
            x = node.output().clone();
            nodes.push(node);
        }
        Ok((nodes, x))
    }

    fn apply(&self, layer: &LayerSpec, x: Matrix, keep: &[bool]) -> Result<NodeTrace> {
        Ok(match layer {
            LayerSpec::Embedding(_) => {
                return Err(Error::Input("embedding layer must come first".into()));
            }
            LayerSpec::Linear(param) => {
                let output = x.matmul(self.params.get(param)?)?;
                NodeTrace::Linear {
                    param: param.clone(),
                    input: x,
                    output,
                }
            }
            LayerSpec::Relu => NodeTrace::Relu {
                output: x.map(|v| v.max(0.0)),
                input: x,
            },
            LayerSpec::LinearAttention { prefix, order } => NodeTrace::LinearAttention {
                prefix: prefix.clone(),
                trace: self.linear_attention(prefix, *order, x)?,
            },
            LayerSpec::SoftmaxAttention { prefix } => NodeTrace::SoftmaxAttention {
                prefix: prefix.clone(),
                trace: self.softmax_attention(prefix, x, keep)?,
            },
            LayerSpec::Residual(branch) => {
                let (nodes, out) = self.run(branch, x.clone(), keep)?;
                let output = x.add(&out)?;
                NodeTrace::Residual {
                    input: x,
                    branch: nodes,
                    output,
                }
            }
            LayerSpec::MeanPool => NodeTrace::MeanPool {
                output: mean_pool(&x, keep),
                input: x,
            },
            LayerSpec::Classifier(param) => {
                let output = x.matmul(self.params.get(param)?)?;
                NodeTrace::Classifier {
                    param: param.clone(),
                    input: x,
                    output,
                }
            }
        })
    }

    fn linear_attention(&self, prefix: &str, order: Factorization, x: Matrix) -> Result<LinearAttentionTrace> {
        let q = x.matmul(self.params.get(&format!("{prefix}.wq"))?)?;
        let k = x.matmul(self.params.get(&format!("{prefix}.wk"))?)?;
        let v = x.matmul(self.params.get(&format!("{prefix}.wv"))?)?;
        let scale = 1.0 / (self.d_k() as f64).sqrt();
        let (inner, output) = match order {
            Factorization::AvFirst => {
                let z = q.matmul_t(&k)?.scale(scale);
                let o = z.matmul(&v)?;
                (z, o)
            }
            Factorization::KvFirst => {
                let m = k.t_matmul(&v)?.scale(scale);
                let o = q.matmul(&m)?;
                (m, o)
            }
        };
        Ok(LinearAttentionTrace {
            order,
            input: x,
            q,
            k,
            v,
            inner,
            output,
        })
    }

    fn softmax_attention(&self, prefix: &str, x: Matrix, keep: &[bool]) -> Result<SoftmaxAttentionTrace> {
        let q = x.matmul(self.params.get(&format!("{prefix}.wq"))?)?;
        let k = x.matmul(self.params.get(&format!("{prefix}.wk"))?)?;
        let v = x.matmul(self.params.get(&format!("{prefix}.wv"))?)?;
        let z = q.matmul_t(&k)?.scale(1.0 / (self.d_k() as f64).sqrt());
        let a = masked_softmax(&z, keep);
        let o = a.matmul(&v)?;
        let output = o.matmul(self.params.get(&format!("{prefix}.wo"))?)?;
        Ok(SoftmaxAttentionTrace {
            input: x,
            q,
            k,
            v,
            z,
            a,
            o,
            output,
        })
    }
}

fn input_kind(input: &ModelInput) -> &'static str {
    match input {
        ModelInput::Vector(_) => "vector",
        ModelInput::Pixels(_) => "pixel",
        ModelInput::Tokens { .. } => "token",
        ModelInput::Embedded { .. } => "embedded",
    }
}

fn arch_kind(arch: &Architecture) -> &'static str {
    match arch {
        Architecture::Linear { .. } => "linear",
        Architecture::Qkv { .. } => "qkv",
        Architecture::Encoder { .. } => "encoder",
    }
}

/// Softmax over the kept columns of each row; masked columns get exactly 0.
/// A row with no kept column is all zeros.
pub fn masked_softmax(z: &Matrix, keep: &[bool]) -> Matrix {
    if keep.iter().all(|&k| k) {
        return z.softmax_rows();
    }
    let mut a = Matrix::zeros(z.rows(), z.cols());
    let kept: Vec<usize> = (0..z.cols()).filter(|&i| keep[i]).collect();
    if kept.is_empty() {
        return a;
    }
    let mut buf = vec![0.0; kept.len()];
    for r in 0..z.rows() {
        for (b, &i) in buf.iter_mut().zip(&kept) {
            *b = z.get(r, i);
        }
        softmax_in_place(&mut buf);
        for (&b, &i) in buf.iter().zip(&kept) {
            a.set(r, i, b);
        }
    }
    a
}

/// Mean over kept rows as a 1 x cols matrix; zeros when nothing is kept.
pub fn mean_pool(x: &Matrix, keep: &[bool]) -> Matrix {
    let n = keep.iter().filter(|&&k| k).count();
    let mut out = Matrix::zeros(1, x.cols());
    if n == 0 {
        return out;
    }
    let w = 1.0 / n as f64;
    for r in (0..x.rows()).filter(|&r| keep[r]) {
        for (o, &v) in out.row_mut(0).iter_mut().zip(x.row(r)) {
            *o += w * v;
        }
    }
    out
}

/// Builds the two linear-attention graphs that share one set of parameters.
pub fn build_qkv_pair(params: Params, seq_len: usize, d_model: usize, classes: usize) -> Result<(ModelGraph, ModelGraph)> {
    let arch = |order| Architecture::Qkv {
        order,
        seq_len,
        d_model,
        classes,
    };
    let av = ModelGraph::from_parts(arch(Factorization::AvFirst), params.clone())?;
    let kv = ModelGraph::from_parts(arch(Factorization::KvFirst), params)?;
    Ok((av, kv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Association {
    /// `y = (x1 x2) x3`
    Left,
    /// `y = x1 (x2 x3)`
    Right,
}

/// Two multiply nodes computing `x1 * x2 * x3` under a given grouping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarChainTrace {
    pub order: Association,
    pub inputs: [f64; 3],
    /// `x1 x2` for `Left`, `x2 x3` for `Right`.
    pub hidden: f64,
    pub output: f64,
}

pub fn scalar_chain(order: Association, x1: f64, x2: f64, x3: f64) -> ScalarChainTrace {
    let (hidden, output) = match order {
        Association::Left => {
            let h = x1 * x2;
            (h, h * x3)
        }
        Association::Right => {
            let h = x2 * x3;
            (h, x1 * h)
        }
    };
    ScalarChainTrace {
        order,
        inputs: [x1, x2, x3],
        hidden,
        output,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_pixels(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| if rng.gen_bool(0.4) { rng.gen::<f64>() } else { 0.0 }).collect()
    }

    #[test]
    fn single_linear_layer() {
        let mut params = Params::new();
        params.insert("classifier", Matrix::from_rows(&[&[1.0, -1.0], &[2.0, 0.5]]));
        let arch = Architecture::Linear {
            input_dim: 2,
            hidden: vec![],
            classes: 2,
        };
        let model = ModelGraph::from_parts(arch, params).unwrap();
        let trace = model.forward(&ModelInput::Vector(vec![3.0, 4.0])).unwrap();
        assert_eq!(trace.logits, vec![11.0, -1.0]);
        match &trace.nodes[0] {
            NodeTrace::Classifier { input, .. } => assert_eq!(input.data(), &[3.0, 4.0]),
            other => panic!("unexpected node {other:?}"),
        }
    }

    #[test]
    fn uniform_attention_reads_value_mean() {
        let keep = vec![true; 3];
        let a = masked_softmax(&Matrix::zeros(3, 3), &keep);
        let v = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 9.0]]);
        let o = a.matmul(&v).unwrap();
        for r in 0..3 {
            assert!((o.get(r, 0) - 3.0).abs() < 1e-12);
            assert!((o.get(r, 1) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_skips_columns() {
        let z = Matrix::from_rows(&[&[0.0, 5.0, 2f64.ln()]]);
        let a = masked_softmax(&z, &[true, false, true]);
        assert_eq!(a.get(0, 1), 0.0);
        assert!((a.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((a.get(0, 2) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(masked_softmax(&z, &[false; 3]), Matrix::zeros(1, 3));
    }

    /// Two tokens, d = 2, identity projections and a hand-set classifier.
    #[test]
    fn tiny_encoder_matches_hand_computation() {
        let arch = Architecture::Encoder {
            vocab: 2,
            seq_len: 2,
            d_model: 2,
            d_ff: 1,
            layers: 1,
            classes: 1,
        };
        let mut params = Params::new();
        params.insert("embed.token", Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        params.insert("embed.pos", Matrix::zeros(2, 2));
        for w in ["wq", "wk", "wv", "wo"] {
            params.insert(format!("layer1.attn.{w}"), Matrix::identity(2));
        }
        params.insert("layer1.ffn.w1", Matrix::zeros(2, 1));
        params.insert("layer1.ffn.w2", Matrix::zeros(1, 2));
        params.insert("classifier", Matrix::from_rows(&[&[1.0], &[2.0]]));
        let model = ModelGraph::from_parts(arch, params).unwrap();
        let trace = model.forward(&ModelInput::tokens(vec![0, 1])).unwrap();
        // Z = I / sqrt(2); row 0 weights [s, 1-s] with s = e^{c}/(e^{c}+1), c = 1/sqrt(2).
        let c = 1.0 / 2f64.sqrt();
        let s = c.exp() / (c.exp() + 1.0);
        // O row 0 = [s, 1-s], row 1 = [1-s, s]; H1 = I + O; pooled = (I + O) mean = [0.5 + 0.5, 0.5 + 0.5]
        // since the rows of O sum column-wise to [1, 1]; logit = 1 + 2 = 3.
        let att = &trace.softmax_attention()[0];
        assert!((att.a.get(0, 0) - s).abs() < 1e-15);
        assert!((trace.logits[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn qkv_pair_agrees() {
        let base = ModelGraph::new(Architecture::mnist_qkv(Factorization::AvFirst), 0).unwrap();
        let (av, kv) = build_qkv_pair(base.params().clone(), 196, 32, 10).unwrap();
        for seed in 0..5 {
            let x = ModelInput::Pixels(random_pixels(seed, 196));
            let la = av.logits(&x).unwrap();
            let lk = kv.logits(&x).unwrap();
            let scale = la.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, b) in la.iter().zip(&lk) {
                assert!((a - b).abs() < 1e-9 * scale, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn qkv_zero_pixels_give_position_only_activations() {
        let mut model = ModelGraph::new(Architecture::mnist_qkv(Factorization::KvFirst), 1).unwrap();
        model.params_mut().insert("embed.pos", Matrix::zeros(196, 32));
        let trace = model.forward(&ModelInput::Pixels(vec![0.0; 196])).unwrap();
        for att in trace.linear_attention() {
            assert_eq!(att.output.max_abs(), 0.0);
        }
        assert!(trace.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trace_invariants_hold() {
        let model = ModelGraph::new(Architecture::keyword_encoder(16, 12, 4), 3).unwrap();
        let mut input = ModelInput::tokens((0..12).map(|i| (i * 5) % 16).collect());
        if let ModelInput::Tokens { keep, .. } = &mut input {
            keep[4] = false;
        }
        let trace = model.forward(&input).unwrap();
        let atts = trace.softmax_attention();
        assert_eq!(atts.len(), 6);
        for att in atts {
            assert!(att.a.max_abs_diff(&masked_softmax(&att.z, &trace.keep)) < 1e-12);
            assert!(att.o.max_abs_diff(&att.a.matmul(&att.v).unwrap()) < 1e-12);
            for r in 0..12 {
                assert_eq!(att.a.get(r, 4), 0.0);
                assert!((att.a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let model = ModelGraph::new(Architecture::mnist_qkv(Factorization::AvFirst), 3).unwrap();
        let trace = model.forward(&ModelInput::Pixels(random_pixels(9, 196))).unwrap();
        let att = trace.linear_attention()[0];
        let s = 1.0 / 32f64.sqrt();
        let left = att.q.matmul_t(&att.k).unwrap().scale(s).matmul(&att.v).unwrap();
        let right = att.q.matmul(&att.k.t_matmul(&att.v).unwrap()).unwrap().scale(s);
        let scale = left.max_abs();
        assert!(att.output.max_abs_diff(&left) < 1e-9 * scale);
        assert!(att.output.max_abs_diff(&right) < 1e-9 * scale);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let model = ModelGraph::new(Architecture::mnist_qkv(Factorization::AvFirst), 0).unwrap();
        assert!(matches!(model.forward(&ModelInput::Pixels(vec![0.0; 10])), Err(Error::Input(_))));
        assert!(matches!(model.forward(&ModelInput::tokens(vec![0; 196])), Err(Error::Input(_))));
        let enc = ModelGraph::new(Architecture::keyword_encoder(16, 12, 4), 0).unwrap();
        assert!(enc.forward(&ModelInput::tokens(vec![16; 12])).is_err());
    }

    #[test]
    fn from_parts_checks_shapes() {
        let model = ModelGraph::new(Architecture::mnist_qkv(Factorization::AvFirst), 0).unwrap();
        let mut params = model.params().clone();
        params.insert("attn.wq", Matrix::zeros(3, 3));
        assert!(matches!(
            ModelGraph::from_parts(model.architecture().clone(), params),
            Err(Error::ParamShape { .. })
        ));
    }

    #[test]
    fn scalar_chain_examples() {
        let l = scalar_chain(Association::Left, 2.0, 3.0, 4.0);
        assert_eq!((l.hidden, l.output), (6.0, 24.0));
        let r = scalar_chain(Association::Right, 2.0, 3.0, 4.0);
        assert_eq!((r.hidden, r.output), (12.0, 24.0));
        for order in [Association::Left, Association::Right] {
            assert_eq!(scalar_chain(order, 7.5, 1.0, 1.0).output, 7.5);
        }
    }
}
