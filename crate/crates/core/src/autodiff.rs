//! Reverse-mode gradients over a [`ForwardTrace`].
//!
//! Each layer kind has a hand-written vector-Jacobian product. Gradients flow
//! through softmax exactly; this path is independent of relevance propagation
//! and only shares the cached activations.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Factorization, ForwardTrace, ModelGraph, ModelInput, NodeTrace, Params};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// Gradient w.r.t. each scalar input feature (vector entries or pixels).
    /// Empty for token inputs, whose continuous input is the embedding.
    pub d_input: Vec<f64>,
    /// Gradient w.r.t. the embedding-layer output, when the model has one.
    pub d_embedded: Option<Matrix>,
    /// Parameter gradients; empty unless requested.
    pub d_params: Params,
}

/// Gradient of `logits[target]`, including parameter gradients.
pub fn backward(model: &ModelGraph, trace: &ForwardTrace, target: usize) -> Result<GradientSet> {
    let seed = one_hot(model, target)?;
    backward_from(model, trace, &seed, true)
}

/// Gradient of `logits[target]` w.r.t. the input only.
pub fn input_gradient(model: &ModelGraph, trace: &ForwardTrace, target: usize) -> Result<GradientSet> {
    let seed = one_hot(model, target)?;
    backward_from(model, trace, &seed, false)
}

fn one_hot(model: &ModelGraph, target: usize) -> Result<Vec<f64>> {
    let classes = model.num_classes();
    if target >= classes {
        return Err(Error::TargetOutOfRange { target, classes });
    }
    let mut seed = vec![0.0; classes];
    seed[target] = 1.0;
    Ok(seed)
}

/// Vector-Jacobian product for an arbitrary upstream gradient on the logits.
pub fn backward_from(model: &ModelGraph, trace: &ForwardTrace, d_logits: &[f64], with_params: bool) -> Result<GradientSet> {
    if d_logits.len() != trace.logits.len() {
        return Err(Error::Input(format!(
            "upstream gradient has {} entries, logits have {}",
            d_logits.len(),
            trace.logits.len()
        )));
    }
    let mut acc = Backprop {
        model,
        keep: &trace.keep,
        grads: with_params.then(|| model.params().zeros_like()),
    };
    let (embed, rest) = match trace.nodes.first() {
        Some(n @ (NodeTrace::PixelEmbedding { .. } | NodeTrace::TokenEmbedding { .. })) => (Some(n), &trace.nodes[1..]),
        _ => (None, &trace.nodes[..]),
    };
    let d_first = acc.nodes(rest, Matrix::row_vector(d_logits))?;

    let mut out = GradientSet {
        d_input: Vec::new(),
        d_embedded: None,
        d_params: Params::new(),
    };
    match (embed, &trace.input) {
        (Some(NodeTrace::PixelEmbedding { pixels, .. }), _) => {
            let e = model.params().get("embed.pixel")?;
            out.d_input = (0..d_first.rows())
                .map(|t| crate::tensor::dot(d_first.row(t), e.row(0)))
                .collect();
            if let Some(g) = acc.grads.as_mut() {
                let mut de = Matrix::zeros(1, e.cols());
                for (t, &x) in pixels.iter().enumerate() {
                    for (o, &d) in de.row_mut(0).iter_mut().zip(d_first.row(t)) {
                        *o += x * d;
                    }
                }
                accumulate(g, "embed.pixel", &de)?;
                accumulate(g, "embed.pos", &d_first)?;
            }
            out.d_embedded = Some(d_first);
        }
        (Some(NodeTrace::TokenEmbedding { ids, .. }), _) => {
            if let Some(g) = acc.grads.as_mut() {
                let table = g.get_mut("embed.token").ok_or_else(|| Error::MissingParam("embed.token".into()))?;
                for (t, &id) in ids.iter().enumerate() {
                    for (o, &d) in table.row_mut(id).iter_mut().zip(d_first.row(t)) {
                        *o += d;
                    }
                }
                accumulate(g, "embed.pos", &d_first)?;
            }
            out.d_embedded = Some(d_first);
        }
        (_, ModelInput::Vector(_)) => out.d_input = d_first.into_data(),
        (_, ModelInput::Embedded { .. }) => out.d_embedded = Some(d_first),
        _ => return Err(Error::Input("trace does not start at a supported input".into())),
    }
    if let Some(g) = acc.grads {
        out.d_params = g;
    }
    Ok(out)
}

fn accumulate(grads: &mut Params, name: &str, delta: &Matrix) -> Result<()> {
    grads
        .get_mut(name)
        .ok_or_else(|| Error::MissingParam(name.to_string()))?
        .add_assign(delta)?;
    Ok(())
}

struct Backprop<'a> {
    model: &'a ModelGraph,
    keep: &'a [bool],
    grads: Option<Params>,
}

impl Backprop<'_> {
    fn param(&self, name: &str) -> Result<&Matrix> {
        self.model.params().get(name)
    }

    fn add_grad(&mut self, name: &str, delta: impl FnOnce() -> Result<Matrix>) -> Result<()> {
        if let Some(g) = self.grads.as_mut() {
            accumulate(g, name, &delta()?)?;
        }
        Ok(())
    }

    fn nodes(&mut self, nodes: &[NodeTrace], mut grad: Matrix) -> Result<Matrix> {
        for node in nodes.iter().rev() {
            grad = self.node(node, grad)?;
        }
        Ok(grad)
    }

    fn node(&mut self, node: &NodeTrace, dy: Matrix) -> Result<Matrix> {
        match node {
            NodeTrace::Linear { param, input, .. } | NodeTrace::Classifier { param, input, .. } => {
                self.add_grad(param, || Ok(input.t_matmul(&dy)?))?;
                Ok(dy.matmul_t(self.param(param)?)?)
            }
            NodeTrace::Relu { input, .. } => {
                let mut dx = dy;
                for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                Ok(dx)
            }
            NodeTrace::Residual { branch, .. } => {
                let d_branch = self.nodes(branch, dy.clone())?;
                Ok(dy.add(&d_branch)?)
            }
            NodeTrace::MeanPool { input, .. } => {
                let n = self.keep.iter().filter(|&&k| k).count();
                let mut dx = Matrix::zeros(input.rows(), input.cols());
                if n > 0 {
                    let w = 1.0 / n as f64;
                    for r in (0..input.rows()).filter(|&r| self.keep[r]) {
                        for (o, &d) in dx.row_mut(r).iter_mut().zip(dy.row(0)) {
                            *o = w * d;
                        }
                    }
                }
                Ok(dx)
            }
            NodeTrace::SoftmaxAttention { prefix, trace } => {
                let wo = format!("{prefix}.wo");
                self.add_grad(&wo, || Ok(trace.o.t_matmul(&dy)?))?;
                let d_o = dy.matmul_t(self.param(&wo)?)?;
                let d_a = d_o.matmul_t(&trace.v)?;
                let d_v = trace.a.t_matmul(&d_o)?;
                let d_z = softmax_vjp(&trace.a, &d_a);
                let scale = 1.0 / (self.model.d_k() as f64).sqrt();
                let d_q = d_z.matmul(&trace.k)?.scale(scale);
                let d_k = d_z.t_matmul(&trace.q)?.scale(scale);
                self.projections(prefix, &trace.input, &d_q, &d_k, &d_v)
            }
            NodeTrace::LinearAttention { prefix, trace } => {
                let scale = 1.0 / (self.model.d_k() as f64).sqrt();
                let (d_q, d_k, d_v) = match trace.order {
                    Factorization::AvFirst => {
                        let d_z = dy.matmul_t(&trace.v)?;
                        let d_v = trace.inner.t_matmul(&dy)?;
                        (d_z.matmul(&trace.k)?.scale(scale), d_z.t_matmul(&trace.q)?.scale(scale), d_v)
                    }
                    Factorization::KvFirst => {
                        let d_q = dy.matmul_t(&trace.inner)?;
                        let d_m = trace.q.t_matmul(&dy)?;
                        (d_q, trace.v.matmul_t(&d_m)?.scale(scale), trace.k.matmul(&d_m)?.scale(scale))
                    }
                };
                self.projections(prefix, &trace.input, &d_q, &d_k, &d_v)
            }
            NodeTrace::PixelEmbedding { .. } | NodeTrace::TokenEmbedding { .. } => {
                Err(Error::Input("embedding must be the first node".into()))
            }
        }
    }

    fn projections(&mut self, prefix: &str, x: &Matrix, d_q: &Matrix, d_k: &Matrix, d_v: &Matrix) -> Result<Matrix> {
        let mut dx: Option<Matrix> = None;
        for (w, d) in [("wq", d_q), ("wk", d_k), ("wv", d_v)] {
            let name = format!("{prefix}.{w}");
            self.add_grad(&name, || Ok(x.t_matmul(d)?))?;
            let part = d.matmul_t(self.param(&name)?)?;
            match dx.as_mut() {
                Some(acc) => acc.add_assign(&part)?,
                None => dx = Some(part),
            }
        }
        Ok(dx.expect("three projections"))
    }
}

/// Row-wise softmax VJP: `dZ_ji = A_ji (dA_ji - sum_i' A_ji' dA_ji')`.
pub fn softmax_vjp(a: &Matrix, d_a: &Matrix) -> Matrix {
    let mut d_z = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let inner = crate::tensor::dot(a.row(r), d_a.row(r));
        for ((o, &av), &dv) in d_z.row_mut(r).iter_mut().zip(a.row(r)).zip(d_a.row(r)) {
            *o = av * (dv - inner);
        }
    }
    d_z
}

/// Continuous view of an input for finite differences and path integrals.
fn continuous(model: &ModelGraph, input: &ModelInput) -> Result<ModelInput> {
    Ok(match input {
        ModelInput::Tokens { keep, .. } => {
            let trace = model.forward(input)?;
            let rows = trace.embedded().cloned().ok_or(Error::NoAttentionLayers)?;
            ModelInput::Embedded { rows, keep: keep.clone() }
        }
        other => other.clone(),
    })
}

fn coordinates(input: &ModelInput) -> usize {
    match input {
        ModelInput::Vector(v) | ModelInput::Pixels(v) => v.len(),
        ModelInput::Embedded { rows, .. } => rows.data().len(),
        ModelInput::Tokens { .. } => 0,
    }
}

fn nudge(input: &ModelInput, coord: usize, delta: f64) -> ModelInput {
    let mut out = input.clone();
    match &mut out {
        ModelInput::Vector(v) | ModelInput::Pixels(v) => v[coord] += delta,
        ModelInput::Embedded { rows, .. } => rows.data_mut()[coord] += delta,
        ModelInput::Tokens { .. } => unreachable!("token inputs are converted to embeddings first"),
    }
    out
}

/// Max relative error between analytic and central-difference input gradients
/// over up to 64 sampled coordinates (all of them when there are fewer). Token
/// inputs are checked on their embedding rows. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(model: &ModelGraph, input: &ModelInput, target: usize, h: f64, seed: u64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Setting(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let x = continuous(model, input)?;
    let trace = model.forward(&x)?;
    let grads = input_gradient(model, &trace, target)?;
    let analytic: Vec<f64> = match &x {
        ModelInput::Embedded { .. } => grads.d_embedded.expect("embedded gradient").into_data(),
        _ => grads.d_input,
    };
    let n = coordinates(&x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if n <= 64 { (0..n).collect() } else { sample(&mut rng, n, 64).into_vec() };
    let mut worst = 0.0f64;
    for c in picks {
        let up = model.logits(&nudge(&x, c, h))?[target];
        let down = model.logits(&nudge(&x, c, -h))?[target];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[c];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
