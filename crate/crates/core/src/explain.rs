//! Explainers: exact leave-one-out, Integrated Gradients, attention rollout and
//! the LRP family, all behind the [`Explainer`] trait and looked up by name in
//! an [`ExplainerRegistry`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::autodiff::input_gradient;
use crate::error::{Error, Result};
use crate::model::{scalar_chain, Association, ModelGraph, ModelInput};
use crate::relprop::{propagate, AttnRule, RuleConfig, DEFAULT_EPSILON};
use crate::tensor::Matrix;

pub const DEFAULT_IG_STEPS: usize = 50;
pub const MIN_IG_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Pixel,
    Token,
    /// Entries of a plain feature vector.
    Value,
}

impl FeatureKind {
    pub fn of(input: &ModelInput) -> Self {
        match input {
            ModelInput::Pixels(_) => FeatureKind::Pixel,
            ModelInput::Tokens { .. } | ModelInput::Embedded { .. } => FeatureKind::Token,
            ModelInput::Vector(_) => FeatureKind::Value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodInfo {
    pub name: String,
    /// Short SHA-256 of the explainer's name and settings.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub scores: Vec<f64>,
    pub feature_kind: FeatureKind,
    pub normalized: bool,
    pub method: MethodInfo,
}

impl Attribution {
    pub fn new(scores: Vec<f64>, feature_kind: FeatureKind, method: MethodInfo) -> Self {
        Self {
            scores,
            feature_kind,
            normalized: false,
            method,
        }
    }

    /// Scores divided by their sum. `None` when the sum is not positive, in
    /// which case reporting falls back to raw scores.
    pub fn normalized_scores(&self) -> Option<Vec<f64>> {
        let total: f64 = self.scores.iter().sum();
        (total > 0.0 && total.is_finite()).then(|| self.scores.iter().map(|s| s / total).collect())
    }

    /// Sum-to-one copy; unchanged (flag stays false) when the sum is not positive.
    pub fn normalize(&self) -> Attribution {
        match self.normalized_scores() {
            Some(scores) => Attribution {
                scores,
                normalized: true,
                ..self.clone()
            },
            None => self.clone(),
        }
    }

    /// `(index, raw, normalized)` rows; the normalized column repeats the raw
    /// score when normalization is undefined.
    pub fn rows(&self) -> Vec<(usize, f64, f64)> {
        let norm = self.normalized_scores().unwrap_or_else(|| self.scores.clone());
        self.scores
            .iter()
            .zip(norm)
            .enumerate()
            .map(|(i, (&r, n))| (i, r, n))
            .collect()
    }
}

pub fn digest_of(name: &str, settings: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update([0u8]);
    h.update(settings.to_string().as_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Which layers get the value-only rule in a hybrid configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", content = "k", rename_all = "snake_case")]
pub enum AblationPlan {
    /// Layers `1..=k`.
    FrontToBack(usize),
    /// Layers `k..=L`.
    BackToFront(usize),
    /// Layer `k` only.
    Single(usize),
}

impl AblationPlan {
    pub fn k(&self) -> usize {
        match *self {
            AblationPlan::FrontToBack(k) | AblationPlan::BackToFront(k) | AblationPlan::Single(k) => k,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            AblationPlan::FrontToBack(_) => "front_to_back",
            AblationPlan::BackToFront(_) => "back_to_front",
            AblationPlan::Single(_) => "single",
        }
    }
}

impl fmt::Display for AblationPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.family(), self.k())
    }
}

impl FromStr for AblationPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (family, k) = s
            .split_once(':')
            .ok_or_else(|| Error::Ablation(format!("expected `family:k`, got `{s}`")))?;
        let k: usize = k
            .trim()
            .parse()
            .map_err(|_| Error::Ablation(format!("layer count `{k}` is not an integer")))?;
        match family.trim() {
            "front_to_back" => Ok(AblationPlan::FrontToBack(k)),
            "back_to_front" => Ok(AblationPlan::BackToFront(k)),
            "single" => Ok(AblationPlan::Single(k)),
            other => Err(Error::Ablation(format!("unknown ablation family `{other}`"))),
        }
    }
}

/// Rule configuration for a hybrid plan over `layers` attention layers.
pub fn ablation_configs(plan: AblationPlan, layers: usize, epsilon: f64) -> Result<RuleConfig> {
    let k = plan.k();
    if k == 0 || k > layers {
        return Err(Error::Ablation(format!("{plan} needs 1 <= k <= {layers}")));
    }
    let cp = |l: usize| match plan {
        AblationPlan::FrontToBack(k) => l <= k,
        AblationPlan::BackToFront(k) => l >= k,
        AblationPlan::Single(k) => l == k,
    };
    Ok(RuleConfig {
        epsilon,
        attn_rule_per_layer: (1..=layers)
            .map(|l| (l, if cp(l) { AttnRule::CpLrp } else { AttnRule::AttnLrp }))
            .collect(),
    })
}

fn target_logit(model: &ModelGraph, input: &ModelInput, target: usize) -> Result<f64> {
    let classes = model.num_classes();
    if target >= classes {
        return Err(Error::TargetOutOfRange { target, classes });
    }
    Ok(model.logits(input)?[target])
}

/// `f(x) - f(x without feature i)` for every feature. Features whose removal
/// leaves the input unchanged (zero pixels, already masked tokens) score 0
/// without a forward pass.
pub fn loo_scores(model: &ModelGraph, input: &ModelInput, target: usize) -> Result<Vec<f64>> {
    let full = target_logit(model, input, target)?;
    (0..input.feature_count())
        .map(|i| {
            if input.removal_is_noop(i) {
                Ok(0.0)
            } else {
                Ok(full - model.logits(&input.remove(&[i]))?[target])
            }
        })
        .collect()
}

/// Leave-one-out on the scalar chain `x1 * x2 * x3`, removing by zeroing.
pub fn loo_scalar_chain(order: Association, x: [f64; 3]) -> [f64; 3] {
    let f = |v: [f64; 3]| scalar_chain(order, v[0], v[1], v[2]).output;
    let full = f(x);
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let mut y = x;
        y[i] = 0.0;
        *o = full - f(y);
    }
    out
}

/// Continuous form of an input on which gradients are taken: the input itself
/// for vectors and pixels, the embedding rows for tokens.
fn continuous(model: &ModelGraph, input: &ModelInput) -> Result<ModelInput> {
    match input {
        ModelInput::Tokens { keep, .. } => {
            let trace = model.forward(input)?;
            let rows = trace
                .embedded()
                .ok_or_else(|| Error::Input("token input without an embedding layer".into()))?
                .clone();
            Ok(ModelInput::Embedded { rows, keep: keep.clone() })
        }
        other => Ok(other.clone()),
    }
}

fn values(input: &ModelInput) -> &[f64] {
    match input {
        ModelInput::Vector(v) | ModelInput::Pixels(v) => v,
        ModelInput::Embedded { rows, .. } => rows.data(),
        ModelInput::Tokens { .. } => &[],
    }
}

fn with_values(like: &ModelInput, data: Vec<f64>) -> Result<ModelInput> {
    Ok(match like {
        ModelInput::Vector(_) => ModelInput::Vector(data),
        ModelInput::Pixels(_) => ModelInput::Pixels(data),
        ModelInput::Embedded { rows, keep } => ModelInput::Embedded {
            rows: Matrix::new(rows.rows(), rows.cols(), data)?,
            keep: keep.clone(),
        },
        ModelInput::Tokens { .. } => return Err(Error::Input("tokens have no continuous values".into())),
    })
}

/// The all-zero baseline in the continuous form of `input`.
pub fn zero_baseline(model: &ModelGraph, input: &ModelInput) -> Result<ModelInput> {
    let c = continuous(model, input)?;
    let n = values(&c).len();
    with_values(&c, vec![0.0; n])
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgResult {
    /// Per feature: pixel/entry score, or row sum over embedding dims for tokens.
    pub scores: Vec<f64>,
    /// `f(x) - f(baseline)` for the target logit.
    pub delta: f64,
}

impl IgResult {
    /// `|sum(scores) - delta| / max(|delta|, 1e-12)`.
    pub fn completeness_gap(&self) -> f64 {
        (self.scores.iter().sum::<f64>() - self.delta).abs() / self.delta.abs().max(1e-12)
    }
}

/// Integrated Gradients along the straight path from `baseline` (continuous
/// form, see [`zero_baseline`]) with a midpoint Riemann sum of `steps` terms.
pub fn integrated_gradients(
    model: &ModelGraph,
    input: &ModelInput,
    baseline: &ModelInput,
    target: usize,
    steps: usize,
) -> Result<IgResult> {
    if steps == 0 {
        return Err(Error::Setting("integrated gradients needs at least one step".into()));
    }
    let x = continuous(model, input)?;
    let (xv, bv) = (values(&x), values(baseline));
    if std::mem::discriminant(&x) != std::mem::discriminant(baseline) || xv.len() != bv.len() {
        return Err(Error::Input("baseline does not match the input shape".into()));
    }
    let diff: Vec<f64> = xv.iter().zip(bv).map(|(a, b)| a - b).collect();
    let mut avg = vec![0.0; xv.len()];
    for s in 0..steps {
        let alpha = (s as f64 + 0.5) / steps as f64;
        let point = with_values(&x, bv.iter().zip(&diff).map(|(b, d)| b + alpha * d).collect())?;
        let trace = model.forward(&point)?;
        let g = input_gradient(model, &trace, target)?;
        let grad = match &point {
            ModelInput::Embedded { .. } => g
                .d_embedded
                .ok_or_else(|| Error::Input("missing embedding gradient".into()))?
                .into_data(),
            _ => g.d_input,
        };
        for (a, gv) in avg.iter_mut().zip(grad) {
            *a += gv / steps as f64;
        }
    }
    let per_value: Vec<f64> = avg.iter().zip(&diff).map(|(g, d)| g * d).collect();
    let scores = match &x {
        ModelInput::Embedded { rows, .. } => per_value.chunks(rows.cols()).map(|c| c.iter().sum()).collect(),
        _ => per_value,
    };
    let delta = target_logit(model, &x, target)? - target_logit(model, baseline, target)?;
    Ok(IgResult { scores, delta })
}

/// Attention rollout with mean-pool readout: `R = A_L ... A_1`, score of
/// position `i` is the mean of `R[j, i]` over kept rows `j`. With `residual`,
/// each `A` is replaced by the row-normalized `(A + I) / 2`.
pub fn rollout(model: &ModelGraph, input: &ModelInput, residual: bool) -> Result<Vec<f64>> {
    if !model.has_softmax_attention() {
        return Err(Error::NoAttentionLayers);
    }
    let trace = model.forward(input)?;
    let maps: Vec<Matrix> = trace.softmax_attention().iter().map(|t| t.a.clone()).collect();
    rollout_from_maps(&maps, &trace.keep, residual)
}

/// Rollout over explicit attention matrices, first layer first.
pub fn rollout_from_maps(maps: &[Matrix], keep: &[bool], residual: bool) -> Result<Vec<f64>> {
    let n = keep.len();
    let mut acc = Matrix::identity(n);
    for a in maps {
        let mut a = a.clone();
        if residual {
            a = a.add(&Matrix::identity(n))?.scale(0.5);
            for r in 0..n {
                let s: f64 = a.row(r).iter().sum();
                if s > 0.0 {
                    a.row_mut(r).iter_mut().for_each(|v| *v /= s);
                }
            }
        }
        acc = a.matmul(&acc)?;
    }
    let kept: Vec<usize> = (0..n).filter(|&j| keep[j]).collect();
    let mut scores = vec![0.0; n];
    if kept.is_empty() {
        return Ok(scores);
    }
    for &j in &kept {
        for (s, &v) in scores.iter_mut().zip(acc.row(j)) {
            *s += v / kept.len() as f64;
        }
    }
    Ok(scores)
}

/// Common interface of every attribution method.
pub trait Explainer: Send + Sync {
    fn name(&self) -> String;

    /// Settings that affect the output; hashed into the method digest.
    fn settings(&self) -> serde_json::Value;

    fn explain(&self, model: &ModelGraph, input: &ModelInput, target: usize) -> Result<Attribution>;

    fn method(&self) -> MethodInfo {
        let name = self.name();
        let digest = digest_of(&name, &self.settings());
        MethodInfo { name, digest }
    }

    fn attribution(&self, input: &ModelInput, scores: Vec<f64>) -> Attribution {
        Attribution::new(scores, FeatureKind::of(input), self.method())
    }
}

pub struct Loo;

impl Explainer for Loo {
    fn name(&self) -> String {
        "loo".into()
    }

    fn settings(&self) -> serde_json::Value {
        json!({ "pixel_removal": "zero", "token_removal": "mask" })
    }

    fn explain(&self, model: &ModelGraph, input: &ModelInput, target: usize) -> Result<Attribution> {
        Ok(self.attribution(input, loo_scores(model, input, target)?))
    }
}

pub struct IntegratedGradients {
    pub steps: usize,
}

impl Explainer for IntegratedGradients {
    fn name(&self) -> String {
        "ig".into()
    }

    fn settings(&self) -> serde_json::Value {
        json!({ "steps": self.steps, "baseline": "zero", "rule": "midpoint" })
    }

    fn explain(&self, model: &ModelGraph, input: &ModelInput, target: usize) -> Result<Attribution> {
        let baseline = zero_baseline(model, input)?;
        let ig = integrated_gradients(model, input, &baseline, target, self.steps)?;
        Ok(self.attribution(input, ig.scores))
    }
}

pub struct Rollout {
    pub residual: bool,
}

impl Explainer for Rollout {
    fn name(&self) -> String {
        "rollout".into()
    }

    fn settings(&self) -> serde_json::Value {
        json!({ "residual": self.residual, "readout": "mean_pool" })
    }

    fn explain(&self, model: &ModelGraph, input: &ModelInput, _target: usize) -> Result<Attribution> {
        Ok(self.attribution(input, rollout(model, input, self.residual)?))
    }
}

/// Layer assignment of an LRP explainer, resolved against the model depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrpVariant {
    AttnLrp,
    CpLrp,
    Hybrid(AblationPlan),
}

pub struct Lrp {
    pub variant: LrpVariant,
    pub epsilon: f64,
}

impl Lrp {
    pub fn rule_config(&self, model: &ModelGraph) -> Result<RuleConfig> {
        let layers = model.num_attention_layers();
        match self.variant {
            LrpVariant::AttnLrp => Ok(RuleConfig::uniform(layers, AttnRule::AttnLrp, self.epsilon)),
            LrpVariant::CpLrp => Ok(RuleConfig::uniform(layers, AttnRule::CpLrp, self.epsilon)),
            LrpVariant::Hybrid(plan) => ablation_configs(plan, layers, self.epsilon),
        }
    }
}

impl Explainer for Lrp {
    fn name(&self) -> String {
        match self.variant {
            LrpVariant::AttnLrp => "attnlrp".into(),
            LrpVariant::CpLrp => "cplrp".into(),
            LrpVariant::Hybrid(plan) => plan.to_string(),
        }
    }

    fn settings(&self) -> serde_json::Value {
        json!({ "variant": self.variant, "epsilon": self.epsilon })
    }

    fn explain(&self, model: &ModelGraph, input: &ModelInput, target: usize) -> Result<Attribution> {
        let trace = model.forward(input)?;
        let rel = propagate(model, &trace, target, &self.rule_config(model)?)?;
        Ok(self.attribution(input, rel.input_relevance))
    }
}

/// Scores drawn uniformly from [0, 1), seeded by `seed` and the input content
/// so repeated runs agree. A floor for the perturbation metrics.
pub struct RandomBaseline {
    pub seed: u64,
}

impl Explainer for RandomBaseline {
    fn name(&self) -> String {
        "random".into()
    }

    fn settings(&self) -> serde_json::Value {
        json!({ "seed": self.seed })
    }

    fn explain(&self, _model: &ModelGraph, input: &ModelInput, _target: usize) -> Result<Attribution> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        match input {
            ModelInput::Vector(v) | ModelInput::Pixels(v) => v.iter().for_each(|x| h.update(x.to_le_bytes())),
            ModelInput::Tokens { ids, keep } => {
                ids.iter().for_each(|&i| h.update((i as u64).to_le_bytes()));
                keep.iter().for_each(|&k| h.update([k as u8]));
            }
            ModelInput::Embedded { rows, .. } => rows.data().iter().for_each(|x| h.update(x.to_le_bytes())),
        }
        let seed = u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = (0..input.feature_count()).map(|_| rng.gen::<f64>()).collect();
        Ok(self.attribution(input, scores))
    }
}

/// Knobs shared by all explainer factories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerSettings {
    pub epsilon: f64,
    pub ig_steps: usize,
    pub rollout_residual: bool,
    pub seed: u64,
}

impl Default for ExplainerSettings {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            ig_steps: DEFAULT_IG_STEPS,
            rollout_residual: false,
            seed: 0,
        }
    }
}

type Factory = Box<dyn Fn(&ExplainerSettings, Option<&str>) -> Result<Box<dyn Explainer>> + Send + Sync>;

/// Explainer factories keyed by name. A name may carry an argument after a
/// colon, as in `front_to_back:3`.
pub struct ExplainerRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for ExplainerRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("loo", |_, _| Ok(Box::new(Loo)));
        r.register("ig", |s, _| {
            if s.ig_steps < MIN_IG_STEPS {
                return Err(Error::Setting(format!("ig_steps must be at least {MIN_IG_STEPS}, got {}", s.ig_steps)));
            }
            Ok(Box::new(IntegratedGradients { steps: s.ig_steps }))
        });
        r.register("rollout", |s, _| {
            Ok(Box::new(Rollout {
                residual: s.rollout_residual,
            }))
        });
        r.register("attnlrp", |s, _| lrp(LrpVariant::AttnLrp, s));
        r.register("cplrp", |s, _| lrp(LrpVariant::CpLrp, s));
        for family in ["front_to_back", "back_to_front", "single"] {
            r.register(family, move |s, arg| {
                let arg = arg.ok_or_else(|| Error::Ablation(format!("`{family}` needs a layer, as in `{family}:2`")))?;
                let plan: AblationPlan = format!("{family}:{arg}").parse()?;
                lrp(LrpVariant::Hybrid(plan), s)
            });
        }
        r.register("random", |s, _| Ok(Box::new(RandomBaseline { seed: s.seed })));
        r
    }
}

fn lrp(variant: LrpVariant, s: &ExplainerSettings) -> Result<Box<dyn Explainer>> {
    if !(s.epsilon > 0.0) {
        return Err(Error::Setting(format!("epsilon must be positive, got {}", s.epsilon)));
    }
    Ok(Box::new(Lrp {
        variant,
        epsilon: s.epsilon,
    }))
}

impl ExplainerRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&ExplainerSettings, Option<&str>) -> Result<Box<dyn Explainer>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, settings: &ExplainerSettings) -> Result<Box<dyn Explainer>> {
        let (base, arg) = match name.split_once(':') {
            Some((b, a)) => (b, Some(a)),
            None => (name, None),
        };
        let factory = self
            .factories
            .get(base)
            .ok_or_else(|| Error::UnknownExplainer(name.to_string()))?;
        factory(settings, arg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Factorization, Params};

    fn linear(w: &[f64]) -> ModelGraph {
        let mut p = Params::new();
        p.insert("classifier", Matrix::new(w.len(), 1, w.to_vec()).unwrap());
        ModelGraph::from_parts(
            Architecture::Linear {
                input_dim: w.len(),
                hidden: vec![],
                classes: 1,
            },
            p,
        )
        .unwrap()
    }

    #[test]
    fn loo_scalar_chain_is_24() {
        for order in [Association::Left, Association::Right] {
            assert_eq!(loo_scalar_chain(order, [2.0, 3.0, 4.0]), [24.0, 24.0, 24.0]);
        }
    }

    #[test]
    fn loo_and_ig_on_linear_model_equal_w_times_x() {
        let w = [0.5, -1.5, 2.0, 0.25];
        let x = vec![1.0, 2.0, -0.5, 0.0];
        let model = linear(&w);
        let input = ModelInput::Vector(x.clone());
        let loo = loo_scores(&model, &input, 0).unwrap();
        let base = zero_baseline(&model, &input).unwrap();
        for steps in [1, 3, 50] {
            let ig = integrated_gradients(&model, &input, &base, 0, steps).unwrap();
            for i in 0..4 {
                assert!((ig.scores[i] - w[i] * x[i]).abs() < 1e-12);
            }
        }
        for i in 0..4 {
            assert!((loo[i] - w[i] * x[i]).abs() < 1e-12);
        }
        assert!(integrated_gradients(&model, &input, &base, 0, 0).is_err());
    }

    #[test]
    fn ig_completeness_on_encoder() {
        let model = ModelGraph::new(Architecture::keyword_encoder(16, 12, 4), 3).unwrap();
        let input = ModelInput::tokens((0..12).map(|i| (3 * i + 1) % 16).collect());
        let base = zero_baseline(&model, &input).unwrap();
        let ig = integrated_gradients(&model, &input, &base, 2, 50).unwrap();
        assert_eq!(ig.scores.len(), 12);
        assert!(ig.completeness_gap() < 1e-3, "{}", ig.completeness_gap());
    }

    #[test]
    fn loo_and_ig_agree_across_grouping() {
        let av = ModelGraph::new(Architecture::mnist_qkv(Factorization::AvFirst), 1).unwrap();
        let kv = av.with_factorization(Factorization::KvFirst).unwrap();
        let x = ModelInput::Pixels((0..196).map(|i| ((i * 37) % 11) as f64 / 10.0).collect());
        let (la, lk) = (loo_scores(&av, &x, 3).unwrap(), loo_scores(&kv, &x, 3).unwrap());
        for (a, b) in la.iter().zip(&lk) {
            assert!((a - b).abs() < 1e-9);
        }
        let base = zero_baseline(&av, &x).unwrap();
        let ia = integrated_gradients(&av, &x, &base, 3, 16).unwrap();
        let ik = integrated_gradients(&kv, &x, &base, 3, 16).unwrap();
        for (a, b) in ia.scores.iter().zip(&ik.scores) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(ia.completeness_gap() < 1e-2);
    }

    #[test]
    fn rollout_examples() {
        let keep = vec![true; 3];
        let one = rollout_from_maps(&[Matrix::identity(3)], &[true, false, false], false).unwrap();
        assert_eq!(one, vec![1.0, 0.0, 0.0]);
        let uniform = Matrix::filled(3, 3, 1.0 / 3.0);
        let u = rollout_from_maps(&[uniform.clone()], &keep, false).unwrap();
        assert!(u.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let a1 = Matrix::from_rows(&[&[0.5, 0.5, 0.0], &[0.0, 1.0, 0.0], &[0.2, 0.3, 0.5]]);
        let a2 = Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.5, 0.5], &[0.0, 0.0, 1.0]]);
        // a2 * a1 by hand: rows (0.5,0.5,0), (0.1,0.65,0.25), (0.2,0.3,0.5).
        let r = rollout_from_maps(&[a1, a2], &keep, false).unwrap();
        let expect = [0.8 / 3.0, 1.45 / 3.0, 0.75 / 3.0];
        for (g, e) in r.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
        let res = rollout_from_maps(&[uniform], &keep, true).unwrap();
        assert!(res.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let qkv = ModelGraph::new(Architecture::mnist_qkv(Factorization::AvFirst), 0).unwrap();
        assert!(matches!(
            rollout(&qkv, &ModelInput::Pixels(vec![0.0; 196]), false),
            Err(Error::NoAttentionLayers)
        ));
    }

    #[test]
    fn ablation_plans() {
        let all = RuleConfig::uniform(6, AttnRule::CpLrp, 1e-6);
        assert_eq!(ablation_configs(AblationPlan::FrontToBack(6), 6, 1e-6).unwrap(), all);
        assert_eq!(ablation_configs(AblationPlan::BackToFront(1), 6, 1e-6).unwrap(), all);
        assert_eq!(
            ablation_configs(AblationPlan::Single(1), 6, 1e-6).unwrap(),
            ablation_configs(AblationPlan::FrontToBack(1), 6, 1e-6).unwrap()
        );
        assert_eq!(
            ablation_configs(AblationPlan::BackToFront(5), 6, 1e-6).unwrap().cp_layers(),
            vec![5, 6]
        );
        assert!(ablation_configs(AblationPlan::FrontToBack(0), 6, 1e-6).is_err());
        assert!(ablation_configs(AblationPlan::Single(7), 6, 1e-6).is_err());
        assert_eq!("back_to_front:3".parse::<AblationPlan>().unwrap(), AblationPlan::BackToFront(3));
        assert!("sideways:1".parse::<AblationPlan>().is_err());
    }

    #[test]
    fn normalization() {
        let m = MethodInfo {
            name: "x".into(),
            digest: "0".into(),
        };
        let a = Attribution::new(vec![1.0, 3.0], FeatureKind::Value, m.clone());
        let n = a.normalize();
        assert!(n.normalized && (n.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let neg = Attribution::new(vec![1.0, -3.0], FeatureKind::Value, m);
        assert!(!neg.normalize().normalized);
        assert_eq!(neg.rows()[1], (1, -3.0, -3.0));
    }

    #[test]
    fn registry_builds_by_name() {
        let reg = ExplainerRegistry::default();
        let s = ExplainerSettings::default();
        for name in ["loo", "ig", "rollout", "attnlrp", "cplrp", "random", "front_to_back:2", "single:6"] {
            let e = reg.build(name, &s).unwrap();
            assert_eq!(e.name(), name);
        }
        assert!(matches!(reg.build("shap", &s), Err(Error::UnknownExplainer(_))));
        assert!(reg.build("front_to_back", &s).is_err());
        let few = ExplainerSettings { ig_steps: 4, ..s.clone() };
        assert!(reg.build("ig", &few).is_err());

        let model = ModelGraph::new(Architecture::keyword_encoder(16, 12, 4), 2).unwrap();
        let x = ModelInput::tokens((0..12).map(|i| (i * 5) % 16).collect());
        let a = reg.build("single:7", &s).unwrap();
        assert!(a.explain(&model, &x, 0).is_err());
        let e = reg.build("random", &s).unwrap();
        assert_eq!(e.explain(&model, &x, 0).unwrap(), e.explain(&model, &x, 0).unwrap());
        let d1 = reg.build("attnlrp", &s).unwrap().method().digest;
        let d2 = reg
            .build("attnlrp", &ExplainerSettings { epsilon: 1e-3, ..s })
            .unwrap()
            .method()
            .digest;
        assert_ne!(d1, d2);
    }
}
