//! Layer-wise relevance propagation.
//!
//! Rules are free functions on matrices so they can be tested in isolation;
//! [`propagate`] walks a [`ForwardTrace`] backwards and applies them per node.
//!
//! * linear maps, sums and pooling: epsilon rule
//! * `C = s * A B` (attention readout, query-key logits, `K^T V`): bilinear
//!   rule, which halves relevance between the two factors
//! * softmax: first-order Taylor rule `R_Z = Z * (R_A - A * rowsum(R_A))`
//! * value-only attention: `O = A V` treated as linear in `V`, so `A`, `Q`
//!   and `K` receive exactly zero
//! * ReLU: identity

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Association, Factorization, ForwardTrace, ModelGraph, ModelInput, NodeTrace, ScalarChainTrace};
use crate::tensor::{stabilize, Matrix};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Treatment of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnRule {
    /// Bilinear split at `O = A V`, softmax rule, bilinear split at `Z = Q K^T`.
    AttnLrp,
    /// All attention relevance goes to `V`; softmax is bypassed.
    CpLrp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleConfig {
    pub epsilon: f64,
    /// Attention layer index (1-based) to rule.
    pub attn_rule_per_layer: BTreeMap<usize, AttnRule>,
}

impl RuleConfig {
    pub fn uniform(layers: usize, rule: AttnRule, epsilon: f64) -> Self {
        Self {
            epsilon,
            attn_rule_per_layer: (1..=layers).map(|l| (l, rule)).collect(),
        }
    }

    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::RuleConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        let layers = model.num_attention_layers();
        for l in 1..=layers {
            if !self.attn_rule_per_layer.contains_key(&l) {
                return Err(Error::RuleConfig(format!("attention layer {l} has no rule assigned")));
            }
        }
        if let Some(&extra) = self.attn_rule_per_layer.keys().find(|&&l| l == 0 || l > layers) {
            return Err(Error::RuleConfig(format!(
                "rule assigned to layer {extra}, model has {layers} attention layers"
            )));
        }
        Ok(())
    }

    pub fn rule(&self, layer: usize) -> AttnRule {
        self.attn_rule_per_layer.get(&layer).copied().unwrap_or(AttnRule::AttnLrp)
    }

    /// Layers assigned the value-only rule, ascending.
    pub fn cp_layers(&self) -> Vec<usize> {
        self.attn_rule_per_layer
            .iter()
            .filter(|(_, &r)| r == AttnRule::CpLrp)
            .map(|(&l, _)| l)
            .collect()
    }
}

/// Epsilon rule for `Y = X W` applied row-wise:
/// `R_in[t,i] = sum_j X[t,i] W[i,j] / (Y[t,j] + eps sign(Y[t,j])) R_out[t,j]`.
pub fn epsilon_linear(r_out: &Matrix, input: &Matrix, w: &Matrix, eps: f64) -> Result<Matrix> {
    let y = input.matmul(w)?;
    let g = ratio(r_out, &y, eps)?;
    Ok(input.hadamard(&g.matmul_t(w)?)?)
}

/// Epsilon rule for `Y = sum_k parts[k]`; returns one relevance matrix per part.
pub fn epsilon_sum(r_out: &Matrix, parts: &[&Matrix], eps: f64) -> Result<Vec<Matrix>> {
    let mut total = (*parts
        .first()
        .ok_or_else(|| Error::Input("epsilon_sum needs at least one part".into()))?)
    .clone();
    for p in &parts[1..] {
        total.add_assign(p)?;
    }
    let g = ratio(r_out, &total, eps)?;
    parts.iter().map(|p| Ok(p.hadamard(&g)?)).collect()
}

/// `R / (Y + eps sign(Y))` entrywise.
fn ratio(r: &Matrix, y: &Matrix, eps: f64) -> Result<Matrix> {
    Ok(r.elementwise(y, crate::tensor::Elementwise::StabilizedDiv(eps))?)
}

/// Bilinear rule for `C = s * A B`. Each product term `s A[j,i] B[i,p]` receives
/// `term / (2 C[j,p] + eps sign(C[j,p])) * R_C[j,p]`, credited once to `A[j,i]`
/// and once to `B[i,p]`.
pub fn bilinear_matmul(r_c: &Matrix, a: &Matrix, b: &Matrix, scale: f64, eps: f64) -> Result<(Matrix, Matrix)> {
    let c = a.matmul(b)?.scale(scale);
    if c.shape() != r_c.shape() {
        return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
            op: "bilinear_matmul",
            left: r_c.shape(),
            right: c.shape(),
        }));
    }
    let mut g = r_c.clone();
    for (gv, &cv) in g.data_mut().iter_mut().zip(c.data()) {
        *gv /= stabilize(2.0 * cv, eps);
    }
    let r_a = a.hadamard(&g.matmul_t(b)?)?.scale(scale);
    let r_b = b.hadamard(&a.t_matmul(&g)?)?.scale(scale);
    Ok((r_a, r_b))
}

/// Bilinear rule at the readout `O = A V`; returns `(R_A, R_V)`.
pub fn bilinear_av(r_o: &Matrix, a: &Matrix, v: &Matrix, eps: f64) -> Result<(Matrix, Matrix)> {
    bilinear_matmul(r_o, a, v, 1.0, eps)
}

/// Bilinear rule at the logits `Z = Q K^T / sqrt(d_k)`; returns `(R_Q, R_K)`.
pub fn bilinear_qk(r_z: &Matrix, q: &Matrix, k: &Matrix, d_k: usize, eps: f64) -> Result<(Matrix, Matrix)> {
    let (r_q, r_kt) = bilinear_matmul(r_z, q, &k.transpose(), 1.0 / (d_k as f64).sqrt(), eps)?;
    Ok((r_q, r_kt.transpose()))
}

/// Softmax rule: `R_Z[j,i] = Z[j,i] (R_A[j,i] - A[j,i] sum_i' R_A[j,i'])`.
pub fn softmax_rule(r_a: &Matrix, z: &Matrix, a: &Matrix) -> Result<Matrix> {
    if r_a.shape() != z.shape() || a.shape() != z.shape() {
        return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
            op: "softmax_rule",
            left: r_a.shape(),
            right: z.shape(),
        }));
    }
    let mut r_z = Matrix::zeros(z.rows(), z.cols());
    for j in 0..z.rows() {
        let row_total: f64 = r_a.row(j).iter().sum();
        for i in 0..z.cols() {
            let zv = z.get(j, i);
            // Masked columns have A = 0 and R_A = 0 and contribute nothing.
            let v = if zv == 0.0 { 0.0 } else { zv * (r_a.get(j, i) - a.get(j, i) * row_total) };
            r_z.set(j, i, v);
        }
    }
    Ok(r_z)
}

/// Value-only rule: `O = A V` is linear in `V` with `A` held fixed. Returns
/// `(R_A, R_V)` where `R_A` is identically zero.
pub fn cp_value_only(r_o: &Matrix, a: &Matrix, v: &Matrix, eps: f64) -> Result<(Matrix, Matrix)> {
    let o = a.matmul(v)?;
    let g = ratio(r_o, &o, eps)?;
    let r_v = v.hadamard(&a.t_matmul(&g)?)?;
    Ok((Matrix::zeros(a.rows(), a.cols()), r_v))
}

/// Epsilon rule for the masked mean over rows.
pub fn mean_pool_rule(r_out: &Matrix, input: &Matrix, keep: &[bool], eps: f64) -> Matrix {
    let n = keep.iter().filter(|&&k| k).count();
    let mut r_in = Matrix::zeros(input.rows(), input.cols());
    if n == 0 {
        return r_in;
    }
    let w = 1.0 / n as f64;
    let pooled = crate::model::mean_pool(input, keep);
    for t in (0..input.rows()).filter(|&t| keep[t]) {
        for c in 0..input.cols() {
            r_in.set(t, c, w * input.get(t, c) / stabilize(pooled.get(0, c), eps) * r_out.get(0, c));
        }
    }
    r_in
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Epsilon,
    Bilinear,
    Softmax,
    ValueOnly,
    PassThrough,
}

/// Relevance totals before and after one rule application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub node: String,
    pub rule: RuleKind,
    /// Total relevance arriving at the node output.
    pub sum_out: f64,
    /// Total absolute relevance arriving at the node output.
    pub abs_out: f64,
    /// Total relevance handed to the node inputs.
    pub sum_in: f64,
}

impl AuditEntry {
    /// Gap relative to the signed total, which can be tiny after cancellation.
    pub fn relative_gap(&self) -> f64 {
        (self.sum_in - self.sum_out).abs() / self.sum_out.abs().max(f64::MIN_POSITIVE)
    }

    /// Gap relative to the absolute relevance mass entering the node.
    pub fn mass_gap(&self) -> f64 {
        (self.sum_in - self.sum_out).abs() / self.abs_out.max(f64::MIN_POSITIVE)
    }
}

/// Relevances inside one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRelevance {
    pub layer: usize,
    pub rule: AttnRule,
    pub r_o: Matrix,
    pub r_q: Matrix,
    pub r_k: Matrix,
    pub r_v: Matrix,
    /// Relevance on the attention weights (or `Z` / `M` for linear attention).
    pub r_attention: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRelevance {
    pub node: String,
    pub kind: &'static str,
    /// Relevance at the node input.
    pub relevance: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub target: usize,
    /// The target logit, used as total relevance at the output.
    pub seed: f64,
    pub nodes: Vec<NodeRelevance>,
    pub attention: Vec<AttentionRelevance>,
    /// Relevance at the embedding output, when the model has one.
    pub embedded: Option<Matrix>,
    /// One score per pixel, token position or vector entry.
    pub input_relevance: Vec<f64>,
    pub audit: Vec<AuditEntry>,
}

impl RelevanceMap {
    /// Audit entries for epsilon-rule nodes (linear maps, sums, pooling, value-only readouts).
    pub fn epsilon_audit(&self) -> impl Iterator<Item = &AuditEntry> {
        self.audit
            .iter()
            .filter(|e| matches!(e.rule, RuleKind::Epsilon | RuleKind::ValueOnly))
    }
}

/// Runs relevance propagation for `logits[target]` under `cfg`.
pub fn propagate(model: &ModelGraph, trace: &ForwardTrace, target: usize, cfg: &RuleConfig) -> Result<RelevanceMap> {
    let classes = model.num_classes();
    if target >= classes {
        return Err(Error::TargetOutOfRange { target, classes });
    }
    cfg.validate(model)?;
    let seed = trace.logits[target];
    let mut r_logits = Matrix::zeros(1, classes);
    r_logits.set(0, target, seed);

    let mut walker = Walker {
        model,
        cfg,
        keep: &trace.keep,
        eps: cfg.epsilon,
        attention_index: model.num_attention_layers(),
        nodes: Vec::new(),
        attention: Vec::new(),
        audit: Vec::new(),
    };

    let (embed, rest) = match trace.nodes.first() {
        Some(n @ (NodeTrace::PixelEmbedding { .. } | NodeTrace::TokenEmbedding { .. })) => (Some(n), &trace.nodes[1..]),
        _ => (None, &trace.nodes[..]),
    };
    let r_first = walker.walk(rest, r_logits, "")?;

    let (embedded, input_relevance) = match embed {
        Some(NodeTrace::PixelEmbedding { pixel_part, output, .. }) => {
            let pos = output.sub(pixel_part)?;
            let shares = epsilon_sum(&r_first, &[pixel_part, &pos], walker.eps)?;
            walker.audit.push(AuditEntry {
                node: "embed".into(),
                rule: RuleKind::Epsilon,
                sum_out: r_first.sum(),
                abs_out: abs_sum(&r_first),
                sum_in: shares[0].sum() + shares[1].sum(),
            });
            (Some(r_first), shares[0].row_sums())
        }
        Some(NodeTrace::TokenEmbedding { .. }) => {
            let per_token = r_first.row_sums();
            (Some(r_first), per_token)
        }
        _ => match &trace.input {
            ModelInput::Embedded { .. } => {
                let per_token = r_first.row_sums();
                (Some(r_first), per_token)
            }
            _ => {
                let flat = r_first.data().to_vec();
                (None, flat)
            }
        },
    };
    walker.attention.sort_by_key(|a| a.layer);
    Ok(RelevanceMap {
        target,
        seed,
        nodes: walker.nodes,
        attention: walker.attention,
        embedded,
        input_relevance,
        audit: walker.audit,
    })
}

fn abs_sum(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v.abs()).sum()
}

struct Walker<'a> {
    model: &'a ModelGraph,
    cfg: &'a RuleConfig,
    keep: &'a [bool],
    eps: f64,
    /// Index of the next attention layer met while walking backwards.
    attention_index: usize,
    nodes: Vec<NodeRelevance>,
    attention: Vec<AttentionRelevance>,
    audit: Vec<AuditEntry>,
}

impl Walker<'_> {
    fn record(&mut self, node: String, rule: RuleKind, r_out: &Matrix, sum_in: f64) {
        self.audit.push(AuditEntry {
            node,
            rule,
            sum_out: r_out.sum(),
            abs_out: abs_sum(r_out),
            sum_in,
        });
    }

    fn walk(&mut self, nodes: &[NodeTrace], mut r: Matrix, path: &str) -> Result<Matrix> {
        for (i, node) in nodes.iter().enumerate().rev() {
            let name = format!("{path}{i}:{}", node.kind_name());
            r = self.node(node, r, &name)?;
            self.nodes.push(NodeRelevance {
                node: name,
                kind: node.kind_name(),
                relevance: r.clone(),
            });
        }
        Ok(r)
    }

    fn linear(&mut self, name: String, r_out: &Matrix, input: &Matrix, param: &str) -> Result<Matrix> {
        let r_in = epsilon_linear(r_out, input, self.model.params().get(param)?, self.eps)?;
        self.record(name, RuleKind::Epsilon, r_out, r_in.sum());
        Ok(r_in)
    }

    fn node(&mut self, node: &NodeTrace, r_out: Matrix, name: &str) -> Result<Matrix> {
        match node {
            NodeTrace::Linear { param, input, .. } | NodeTrace::Classifier { param, input, .. } => {
                self.linear(format!("{name}({param})"), &r_out, input, param)
            }
            NodeTrace::Relu { .. } => {
                let s = r_out.sum();
                self.record(name.to_string(), RuleKind::PassThrough, &r_out, s);
                Ok(r_out)
            }
            NodeTrace::MeanPool { input, .. } => {
                let r_in = mean_pool_rule(&r_out, input, self.keep, self.eps);
                self.record(name.to_string(), RuleKind::Epsilon, &r_out, r_in.sum());
                Ok(r_in)
            }
            NodeTrace::Residual { input, branch, output } => {
                let branch_out = output.sub(input)?;
                let shares = epsilon_sum(&r_out, &[input, &branch_out], self.eps)?;
                self.record(format!("{name}(sum)"), RuleKind::Epsilon, &r_out, shares[0].sum() + shares[1].sum());
                let mut shares = shares.into_iter();
                let mut r_in = shares.next().expect("skip share");
                let r_branch = self.walk(branch, shares.next().expect("branch share"), &format!("{name}/"))?;
                r_in.add_assign(&r_branch)?;
                Ok(r_in)
            }
            NodeTrace::SoftmaxAttention { prefix, trace } => {
                let layer = self.next_layer();
                let rule = self.cfg.rule(layer);
                let wo = format!("{prefix}.wo");
                let r_o = self.linear(format!("{name}({wo})"), &r_out, &trace.o, &wo)?;
                let (r_q, r_k, r_v, r_attention) = match rule {
                    AttnRule::AttnLrp => {
                        let (r_a, r_v) = bilinear_av(&r_o, &trace.a, &trace.v, self.eps)?;
                        self.record(format!("{name}(A*V)"), RuleKind::Bilinear, &r_o, r_a.sum() + r_v.sum());
                        let r_z = softmax_rule(&r_a, &trace.z, &trace.a)?;
                        self.record(format!("{name}(softmax)"), RuleKind::Softmax, &r_a, r_z.sum());
                        let (r_q, r_k) = bilinear_qk(&r_z, &trace.q, &trace.k, self.model.d_k(), self.eps)?;
                        self.record(format!("{name}(Q*K)"), RuleKind::Bilinear, &r_z, r_q.sum() + r_k.sum());
                        (r_q, r_k, r_v, r_a)
                    }
                    AttnRule::CpLrp => {
                        let (r_a, r_v) = cp_value_only(&r_o, &trace.a, &trace.v, self.eps)?;
                        self.record(format!("{name}(A*V)"), RuleKind::ValueOnly, &r_o, r_v.sum());
                        let zeros = Matrix::zeros(trace.q.rows(), trace.q.cols());
                        (zeros.clone(), zeros, r_v, r_a)
                    }
                };
                let r_in = self.projections(name, prefix, &trace.input, &r_q, &r_k, &r_v, rule)?;
                self.attention.push(AttentionRelevance {
                    layer,
                    rule,
                    r_o,
                    r_q,
                    r_k,
                    r_v,
                    r_attention,
                });
                Ok(r_in)
            }
            NodeTrace::LinearAttention { prefix, trace } => {
                let layer = self.next_layer();
                let rule = self.cfg.rule(layer);
                let scale = 1.0 / (self.model.d_k() as f64).sqrt();
                let (r_q, r_k, r_v, r_attention) = match (rule, trace.order) {
                    (AttnRule::AttnLrp, Factorization::AvFirst) => {
                        let (r_z, r_v) = bilinear_matmul(&r_out, &trace.inner, &trace.v, 1.0, self.eps)?;
                        self.record(format!("{name}(Z*V)"), RuleKind::Bilinear, &r_out, r_z.sum() + r_v.sum());
                        let (r_q, r_k) = bilinear_qk(&r_z, &trace.q, &trace.k, self.model.d_k(), self.eps)?;
                        self.record(format!("{name}(Q*K)"), RuleKind::Bilinear, &r_z, r_q.sum() + r_k.sum());
                        (r_q, r_k, r_v, r_z)
                    }
                    (AttnRule::AttnLrp, Factorization::KvFirst) => {
                        let (r_q, r_m) = bilinear_matmul(&r_out, &trace.q, &trace.inner, 1.0, self.eps)?;
                        self.record(format!("{name}(Q*M)"), RuleKind::Bilinear, &r_out, r_q.sum() + r_m.sum());
                        let (r_kt, r_v) = bilinear_matmul(&r_m, &trace.k.transpose(), &trace.v, scale, self.eps)?;
                        self.record(format!("{name}(K*V)"), RuleKind::Bilinear, &r_m, r_kt.sum() + r_v.sum());
                        (r_q, r_kt.transpose(), r_v, r_m)
                    }
                    (AttnRule::CpLrp, _) => {
                        // Hold the effective attention Q K^T / sqrt(d) fixed whatever the grouping.
                        let z = match trace.order {
                            Factorization::AvFirst => trace.inner.clone(),
                            Factorization::KvFirst => trace.q.matmul_t(&trace.k)?.scale(scale),
                        };
                        let (r_z, r_v) = cp_value_only(&r_out, &z, &trace.v, self.eps)?;
                        self.record(format!("{name}(Z*V)"), RuleKind::ValueOnly, &r_out, r_v.sum());
                        let zeros = Matrix::zeros(trace.q.rows(), trace.q.cols());
                        (zeros.clone(), zeros, r_v, r_z)
                    }
                };
                let r_in = self.projections(name, prefix, &trace.input, &r_q, &r_k, &r_v, rule)?;
                self.attention.push(AttentionRelevance {
                    layer,
                    rule,
                    r_o: r_out,
                    r_q,
                    r_k,
                    r_v,
                    r_attention,
                });
                Ok(r_in)
            }
            NodeTrace::PixelEmbedding { .. } | NodeTrace::TokenEmbedding { .. } => {
                Err(Error::UnmappedLayer("embedding outside the input position".into()))
            }
        }
    }

    fn next_layer(&mut self) -> usize {
        let layer = self.attention_index;
        self.attention_index = self.attention_index.saturating_sub(1);
        layer
    }

    #[allow(clippy::too_many_arguments)]
    fn projections(
        &mut self,
        name: &str,
        prefix: &str,
        x: &Matrix,
        r_q: &Matrix,
        r_k: &Matrix,
        r_v: &Matrix,
        rule: AttnRule,
    ) -> Result<Matrix> {
        let wv = format!("{prefix}.wv");
        let mut r_in = self.linear(format!("{name}({wv})"), r_v, x, &wv)?;
        if rule == AttnRule::AttnLrp {
            for (w, r) in [("wq", r_q), ("wk", r_k)] {
                let param = format!("{prefix}.{w}");
                let part = self.linear(format!("{name}({param})"), r, x, &param)?;
                r_in.add_assign(&part)?;
            }
        }
        Ok(r_in)
    }
}

/// Relevance of `(x1, x2, x3)` for a scalar product chain, starting from `r_y`
/// at the output. Each multiply node uses the bilinear rule.
pub fn propagate_scalar_chain(trace: &ScalarChainTrace, r_y: f64, eps: f64) -> Result<[f64; 3]> {
    let s = |v: f64| Matrix::from_rows(&[&[v]]);
    let split = |r: f64, a: f64, b: f64| -> Result<(f64, f64)> {
        let (ra, rb) = bilinear_matmul(&s(r), &s(a), &s(b), 1.0, eps)?;
        Ok((ra.get(0, 0), rb.get(0, 0)))
    };
    let [x1, x2, x3] = trace.inputs;
    Ok(match trace.order {
        Association::Left => {
            let (r_h, r3) = split(r_y, trace.hidden, x3)?;
            let (r1, r2) = split(r_h, x1, x2)?;
            [r1, r2, r3]
        }
        Association::Right => {
            let (r1, r_h) = split(r_y, x1, trace.hidden)?;
            let (r2, r3) = split(r_h, x2, x3)?;
            [r1, r2, r3]
        }
    })
}
