//! Faithfulness metrics: Pearson agreement with leave-one-out, MoRF/LeRF
//! perturbation curves and their AOPC summaries.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{loo_scores, Explainer};
use crate::model::{argmax, ModelGraph, ModelInput};

/// Sample Pearson correlation. `None` when lengths differ, fewer than two
/// entries are given, or either vector is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    r.is_finite().then(|| r.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalOrder {
    /// Most relevant first.
    Morf,
    /// Least relevant first.
    Lerf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "size", rename_all = "snake_case")]
pub enum RemovalUnit {
    Single,
    /// Non-overlapping contiguous chunks of this many features, scored by sum.
    Chunk(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub order: RemovalOrder,
    pub unit: RemovalUnit,
    /// Target score after each step; index 0 is the unperturbed input.
    pub step_outputs: Vec<f64>,
}

/// Feature groups in removal order. Ties keep ascending feature index.
pub fn removal_groups(scores: &[f64], order: RemovalOrder, unit: RemovalUnit) -> Result<Vec<Vec<usize>>> {
    let size = match unit {
        RemovalUnit::Single => 1,
        RemovalUnit::Chunk(0) => return Err(Error::Setting("chunk size must be positive".into())),
        RemovalUnit::Chunk(s) => s,
    };
    let groups: Vec<Vec<usize>> = (0..scores.len())
        .collect::<Vec<_>>()
        .chunks(size)
        .map(|c| c.to_vec())
        .collect();
    let group_score: Vec<f64> = groups.iter().map(|g| g.iter().map(|&i| scores[i]).sum()).collect();
    let mut idx: Vec<usize> = (0..groups.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = group_score[a].partial_cmp(&group_score[b]).unwrap_or(Ordering::Equal);
        match order {
            RemovalOrder::Morf => o.reverse(),
            RemovalOrder::Lerf => o,
        }
    });
    Ok(idx.into_iter().map(|g| groups[g].clone()).collect())
}

/// Cumulatively removes features ordered by `scores`, recording `logits[target]`
/// after each of at most `max_steps` steps (all groups when `None`).
pub fn perturbation_curve(
    model: &ModelGraph,
    input: &ModelInput,
    scores: &[f64],
    target: usize,
    order: RemovalOrder,
    unit: RemovalUnit,
    max_steps: Option<usize>,
) -> Result<PerturbationCurve> {
    if scores.len() != input.feature_count() {
        return Err(Error::Input(format!(
            "attribution has {} scores for {} features",
            scores.len(),
            input.feature_count()
        )));
    }
    let groups = removal_groups(scores, order, unit)?;
    let k = max_steps.map_or(groups.len(), |m| m.min(groups.len()));
    let mut outputs = Vec::with_capacity(k + 1);
    outputs.push(model.logits(input)?[target]);
    let mut current = input.clone();
    for group in &groups[..k] {
        if group.iter().all(|&i| current.removal_is_noop(i)) {
            let last = *outputs.last().expect("step 0 present");
            outputs.push(last);
            continue;
        }
        current = current.remove(group);
        outputs.push(model.logits(&current)?[target]);
    }
    Ok(PerturbationCurve {
        order,
        unit,
        step_outputs: outputs,
    })
}

/// Mean of the curve over steps `1..=K`; step 0 is excluded. A curve with no
/// removal steps returns its step-0 value.
pub fn aopc(curve: &PerturbationCurve) -> f64 {
    match curve.step_outputs.split_first() {
        Some((first, [])) => *first,
        Some((_, rest)) => rest.iter().sum::<f64>() / rest.len() as f64,
        None => f64::NAN,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    /// Mean Pearson against LOO over examples where it is defined.
    pub loo_r: Option<f64>,
    pub lerf: f64,
    pub morf: f64,
    pub delta: f64,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 5] = ["method", "loo_r", "lerf", "morf", "delta"];

    pub fn new(method: impl Into<String>, loo_r: Option<f64>, lerf: f64, morf: f64) -> Self {
        Self {
            method: method.into(),
            loo_r,
            lerf,
            morf,
            delta: lerf - morf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSettings {
    pub unit: RemovalUnit,
    pub max_steps: Option<usize>,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        Self {
            unit: RemovalUnit::Single,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodCounts {
    pub evaluated: usize,
    /// Examples whose Pearson against LOO was undefined.
    pub pearson_excluded: usize,
    /// Examples where the explainer or a curve failed.
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<MetricsRow>,
    pub counts: BTreeMap<String, MethodCounts>,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Scores every method on every input against the predicted class. Per-example
/// failures are logged and counted, not fatal.
pub fn evaluate_suite(
    model: &ModelGraph,
    inputs: &[ModelInput],
    methods: &[&dyn Explainer],
    settings: &SuiteSettings,
) -> Result<SuiteReport> {
    if methods.is_empty() {
        return Err(Error::Setting("evaluate_suite needs at least one method".into()));
    }
    struct Acc {
        r: Vec<f64>,
        lerf: Vec<f64>,
        morf: Vec<f64>,
        counts: MethodCounts,
    }
    let mut accs: Vec<Acc> = methods
        .iter()
        .map(|_| Acc {
            r: vec![],
            lerf: vec![],
            morf: vec![],
            counts: MethodCounts::default(),
        })
        .collect();
    for (n, input) in inputs.iter().enumerate() {
        let target = argmax(&model.logits(input)?);
        let reference = loo_scores(model, input, target)?;
        for (m, acc) in methods.iter().zip(accs.iter_mut()) {
            let run = || -> Result<(Option<f64>, f64, f64)> {
                let scores = if m.name() == "loo" {
                    reference.clone()
                } else {
                    m.explain(model, input, target)?.scores
                };
                let r = pearson(&scores, &reference);
                let curve = |order| perturbation_curve(model, input, &scores, target, order, settings.unit, settings.max_steps);
                Ok((r, aopc(&curve(RemovalOrder::Lerf)?), aopc(&curve(RemovalOrder::Morf)?)))
            };
            match run() {
                Ok((r, lerf, morf)) => {
                    acc.counts.evaluated += 1;
                    match r {
                        Some(r) => acc.r.push(r),
                        None => {
                            acc.counts.pearson_excluded += 1;
                            warn!("{}: Pearson undefined on example {n}, excluded", m.name());
                        }
                    }
                    acc.lerf.push(lerf);
                    acc.morf.push(morf);
                }
                Err(e) => {
                    acc.counts.failed += 1;
                    warn!("{} failed on example {n}: {e}", m.name());
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(methods.len());
    let mut counts = BTreeMap::new();
    for (m, acc) in methods.iter().zip(accs) {
        let loo_r = (!acc.r.is_empty()).then(|| mean(&acc.r));
        rows.push(MetricsRow::new(m.name(), loo_r, mean(&acc.lerf), mean(&acc.morf)));
        counts.insert(m.name(), acc.counts);
    }
    Ok(SuiteReport { rows, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::{Attribution, FeatureKind, Loo, MethodInfo};
    use crate::model::{Architecture, Params};
    use crate::tensor::Matrix;
    use proptest::prelude::*;

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // r = 1.5 / sqrt(2 * 4.6667) = 0.981980506...
        assert!((pearson(&x, &[1.0, 2.0, 4.0]).unwrap() - 0.981_980_506_061_965_7).abs() < 1e-12);
        assert_eq!(pearson(&x, &[5.0, 5.0, 5.0]), None);
        assert_eq!(pearson(&[1.0], &[2.0]), None);
        assert_eq!(pearson(&x, &[1.0, 2.0]), None);
    }

    proptest! {
        #[test]
        fn pearson_affine_invariant(v in prop::collection::vec(-10.0f64..10.0, 3..20), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let y: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * x + i as f64).collect();
            if let Some(r) = pearson(&v, &y) {
                let t: Vec<f64> = v.iter().map(|x| a * x + b).collect();
                prop_assert!((pearson(&t, &y).unwrap() - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aopc_examples() {
        let c = |v: Vec<f64>| PerturbationCurve {
            order: RemovalOrder::Morf,
            unit: RemovalUnit::Single,
            step_outputs: v,
        };
        assert_eq!(aopc(&c(vec![3.0, 3.0, 3.0])), 3.0);
        assert_eq!(aopc(&c(vec![9.0, 2.0, 0.0])), 1.0);
        assert_eq!(aopc(&c(vec![4.0])), 4.0);
        let row = MetricsRow::new("x", None, 0.3, 0.1);
        assert_eq!(row.delta, 0.3 - 0.1);
    }

    #[test]
    fn tie_break_is_by_index() {
        let s = [0.0; 5];
        for order in [RemovalOrder::Morf, RemovalOrder::Lerf] {
            let g = removal_groups(&s, order, RemovalUnit::Single).unwrap();
            assert_eq!(g, (0..5).map(|i| vec![i]).collect::<Vec<_>>());
        }
        let g = removal_groups(&[1.0, 0.0, 5.0, 0.0, -1.0], RemovalOrder::Morf, RemovalUnit::Chunk(2)).unwrap();
        assert_eq!(g, vec![vec![2, 3], vec![0, 1], vec![4]]);
        assert!(removal_groups(&s, RemovalOrder::Morf, RemovalUnit::Chunk(0)).is_err());
    }

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
    fn linear_morf_by_loo() {
        let w = [1.0, -2.0, 3.0, 0.5];
        let x = vec![1.0, 1.0, 1.0, 2.0];
        let model = linear(&w);
        let input = ModelInput::Vector(x.clone());
        let loo = loo_scores(&model, &input, 0).unwrap();
        let curve = perturbation_curve(&model, &input, &loo, 0, RemovalOrder::Morf, RemovalUnit::Single, None).unwrap();
        let mut contrib: Vec<f64> = w.iter().zip(&x).map(|(a, b)| a * b).collect();
        let f: f64 = contrib.iter().sum();
        contrib.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut expect = f;
        assert_eq!(curve.step_outputs.len(), 5);
        for (k, c) in contrib.iter().enumerate() {
            expect -= c;
            assert!((curve.step_outputs[k + 1] - expect).abs() < 1e-12);
        }
        let short = perturbation_curve(&model, &input, &loo, 0, RemovalOrder::Lerf, RemovalUnit::Single, Some(2)).unwrap();
        assert_eq!(short.step_outputs.len(), 3);
        assert!(perturbation_curve(&model, &input, &loo[..3], 0, RemovalOrder::Lerf, RemovalUnit::Single, None).is_err());
    }

    struct Constant;

    impl Explainer for Constant {
        fn name(&self) -> String {
            "constant".into()
        }
        fn settings(&self) -> serde_json::Value {
            serde_json::Value::Null
        }
        fn explain(&self, _: &ModelGraph, input: &ModelInput, _: usize) -> Result<Attribution> {
            Ok(Attribution::new(
                vec![1.0; input.feature_count()],
                FeatureKind::of(input),
                MethodInfo {
                    name: self.name(),
                    digest: String::new(),
                },
            ))
        }
    }

    #[test]
    fn suite_reports_loo_and_degenerate_methods() {
        let model = ModelGraph::new(Architecture::keyword_encoder(16, 6, 2), 5).unwrap();
        let inputs: Vec<ModelInput> = (0..4)
            .map(|s| ModelInput::tokens((0..6).map(|i| (i * 3 + s) % 16).collect()))
            .collect();
        let report = evaluate_suite(&model, &inputs, &[&Loo, &Constant], &SuiteSettings::default()).unwrap();
        assert_eq!(report.rows[0].method, "loo");
        assert!((report.rows[0].loo_r.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(report.rows[1].loo_r, None);
        assert_eq!(report.counts["constant"].pearson_excluded, 4);
        for row in &report.rows {
            assert_eq!(row.delta, row.lerf - row.morf);
        }
        assert!(evaluate_suite(&model, &inputs, &[], &SuiteSettings::default()).is_err());
    }
}
