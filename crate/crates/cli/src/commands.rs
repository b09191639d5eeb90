use std::path::PathBuf;

use anyhow::{anyhow, Context};
use log::info;
use lrp_lab::dataio::{
    encode_image_cache, encode_sequence_cache, gen_synthetic, load_mnist, read_cache, write_cache, CachedDataset,
    ImageDataset, MnistSplit, SequenceDataset,
};
use lrp_lab::explain::{
    integrated_gradients, loo_scalar_chain, loo_scores, zero_baseline, Explainer, ExplainerRegistry, Lrp, LrpVariant,
    AblationPlan,
};
use lrp_lab::metrics::{evaluate_suite, pearson, MetricsRow, SuiteReport, SuiteSettings};
use lrp_lab::model::{scalar_chain, Architecture, Association, ModelGraph, ModelInput};
use lrp_lab::relprop::propagate_scalar_chain;
use lrp_lab::train::{
    accuracy, load_checkpoint, save_checkpoint, train, train_shared_pair, EpochStats, Examples, TrainingMetadata,
};
use serde_json::json;

use crate::config::{ExperimentConfig, ModelChoice};
use crate::error::DataMissing;
use crate::output::{num, opt, RunDir};

const MNIST_HINT: &str = "place the MNIST IDX files (train/t10k images and labels, optionally .gz) in <data_dir>/mnist, \
     or run scripts/mnist_from_npm.py";

fn cache_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.data_dir.join("cache")
}

fn synthetic_cache(cfg: &ExperimentConfig) -> PathBuf {
    cache_dir(cfg).join(format!("synthetic-{}.lrpd", cfg.encoder_key()))
}

fn mnist_cache(cfg: &ExperimentConfig, split: MnistSplit) -> PathBuf {
    let name = match split {
        MnistSplit::Train => "mnist-train.lrpd",
        MnistSplit::Test => "mnist-test.lrpd",
    };
    cache_dir(cfg).join(name)
}

pub fn load_mnist_split(cfg: &ExperimentConfig, split: MnistSplit) -> anyhow::Result<ImageDataset> {
    let cached = mnist_cache(cfg, split);
    if cached.exists() {
        return match read_cache(&cached)? {
            CachedDataset::Images(ds) => Ok(ds),
            CachedDataset::Sequences(_) => Err(anyhow!("{} holds sequences, expected images", cached.display())),
        };
    }
    let dir = cfg.paths.data_dir.join("mnist");
    load_mnist(&dir, split).map_err(|e| anyhow!(DataMissing(format!("{e}; {MNIST_HINT}"))))
}

pub fn load_synthetic(cfg: &ExperimentConfig) -> anyhow::Result<SequenceDataset> {
    let cached = synthetic_cache(cfg);
    if cached.exists() {
        return match read_cache(&cached)? {
            CachedDataset::Sequences(ds) => Ok(ds),
            CachedDataset::Images(_) => Err(anyhow!("{} holds images, expected sequences", cached.display())),
        };
    }
    let s = &cfg.synthetic;
    Ok(gen_synthetic(cfg.seed, s.n, s.vocab, s.seq_len, s.classes)?)
}

fn synthetic_split(cfg: &ExperimentConfig) -> anyhow::Result<(Examples, SequenceDataset)> {
    let (train_part, test_part) = load_synthetic(cfg)?.split(cfg.synthetic.train_frac);
    Ok((Examples::from_sequences(&train_part), test_part))
}

fn encoder_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.checkpoint_dir().join(format!("encoder-{}.ckpt", cfg.encoder_key()))
}

fn mnist_checkpoints(cfg: &ExperimentConfig) -> (PathBuf, PathBuf) {
    let dir = cfg.checkpoint_dir();
    let key = cfg.mnist_key();
    (dir.join(format!("mnist-{key}-av.ckpt")), dir.join(format!("mnist-{key}-kv.ckpt")))
}

fn encoder_arch(cfg: &ExperimentConfig) -> Architecture {
    let s = &cfg.synthetic;
    Architecture::keyword_encoder(s.vocab, s.seq_len, s.classes)
}

struct TrainedEncoder {
    model: ModelGraph,
    history: Option<Vec<EpochStats>>,
}

/// Loads the encoder checkpoint for this config, or trains one in memory.
fn encoder(cfg: &ExperimentConfig) -> anyhow::Result<TrainedEncoder> {
    let path = encoder_checkpoint(cfg);
    if path.exists() {
        info!("loading {}", path.display());
        return Ok(TrainedEncoder {
            model: load_checkpoint(&path)?.model,
            history: None,
        });
    }
    info!("no encoder checkpoint at {}, training", path.display());
    let (train_set, _) = synthetic_split(cfg)?;
    let mut model = ModelGraph::new(encoder_arch(cfg), cfg.seed)?;
    let history = train(&mut model, &train_set, &cfg.train_config())?;
    Ok(TrainedEncoder {
        model,
        history: Some(history),
    })
}

struct Pair {
    av: ModelGraph,
    kv: ModelGraph,
    history: Option<Vec<EpochStats>>,
}

fn mnist_pair(cfg: &ExperimentConfig, test: &Examples) -> anyhow::Result<(Pair, f64)> {
    let (av_path, kv_path) = mnist_checkpoints(cfg);
    if av_path.exists() && kv_path.exists() {
        info!("loading {} and {}", av_path.display(), kv_path.display());
        let av = load_checkpoint(&av_path)?.model;
        let kv = load_checkpoint(&kv_path)?.model;
        let acc = accuracy(&kv, test)?;
        return Ok((Pair { av, kv, history: None }, acc));
    }
    info!("no MNIST checkpoints for this config, training");
    let train_set = Examples::from_images(&load_mnist_split(cfg, MnistSplit::Train)?);
    let pair = train_shared_pair(&train_set, test, &cfg.train_config())?;
    Ok((
        Pair {
            av: pair.av_first,
            kv: pair.kv_first,
            history: Some(pair.history),
        },
        pair.test_accuracy,
    ))
}

fn history_rows(history: &[EpochStats]) -> Vec<Vec<String>> {
    history
        .iter()
        .map(|h| vec![h.epoch.to_string(), num(h.mean_loss), num(h.train_accuracy)])
        .collect()
}

const HISTORY_HEADER: [&str; 3] = ["epoch", "mean_loss", "train_accuracy"];

pub fn prepare_data(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let mut run = RunDir::create(cfg, "prepare-data")?;
    let dir = cache_dir(cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mnist_dir = cfg.paths.data_dir.join("mnist");
    for split in [MnistSplit::Train, MnistSplit::Test] {
        match load_mnist(&mnist_dir, split) {
            Ok(ds) => {
                let path = mnist_cache(cfg, split);
                write_cache(&path, &encode_image_cache(&ds))?;
                run.note(format!("MNIST {split:?}: {} images at 14x14 -> {}", ds.len(), path.display()));
            }
            Err(e) => run.note(format!("MNIST {split:?} skipped: {e}; {MNIST_HINT}")),
        }
    }
    let s = &cfg.synthetic;
    let ds = gen_synthetic(cfg.seed, s.n, s.vocab, s.seq_len, s.classes)?;
    let path = synthetic_cache(cfg);
    write_cache(&path, &encode_sequence_cache(&ds))?;
    run.note(format!(
        "synthetic keyword task: {} sequences (vocab {}, length {}, {} classes) -> {}",
        ds.len(),
        s.vocab,
        s.seq_len,
        s.classes,
        path.display()
    ));
    run.finish()?;
    Ok(())
}

pub fn train_cmd(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let mut run = RunDir::create(cfg, "train")?;
    std::fs::create_dir_all(cfg.checkpoint_dir())?;
    let tc = cfg.train_config();
    match cfg.model {
        ModelChoice::Encoder => {
            let (train_set, test_part) = synthetic_split(cfg)?;
            let mut model = ModelGraph::new(encoder_arch(cfg), cfg.seed)?;
            let history = train(&mut model, &train_set, &tc)?;
            let acc = accuracy(&model, &Examples::from_sequences(&test_part))?;
            let meta = TrainingMetadata {
                config: tc.clone(),
                final_accuracy: Some(acc),
                seed: cfg.seed,
            };
            let path = encoder_checkpoint(cfg);
            save_checkpoint(&path, &model, Some(&meta))?;
            run.write_csv("history.csv", &HISTORY_HEADER, history_rows(&history))?;
            run.write_meta("train.meta.json", json!({ "model": "encoder", "test_accuracy": acc, "checkpoint": path }))?;
            run.note(format!("encoder test accuracy {acc:.4}; checkpoint {}", path.display()));
        }
        ModelChoice::MnistAv | ModelChoice::MnistKv => {
            let test = Examples::from_images(&load_mnist_split(cfg, MnistSplit::Test)?);
            let train_set = Examples::from_images(&load_mnist_split(cfg, MnistSplit::Train)?);
            let pair = train_shared_pair(&train_set, &test, &tc)?;
            let meta = TrainingMetadata {
                config: tc.clone(),
                final_accuracy: Some(pair.test_accuracy),
                seed: cfg.seed,
            };
            let (av_path, kv_path) = mnist_checkpoints(cfg);
            save_checkpoint(&av_path, &pair.av_first, Some(&meta))?;
            save_checkpoint(&kv_path, &pair.kv_first, Some(&meta))?;
            run.write_csv("history.csv", &HISTORY_HEADER, history_rows(&pair.history))?;
            run.write_meta(
                "train.meta.json",
                json!({
                    "model": "mnist_pair",
                    "trained_on": "kv_first",
                    "test_accuracy": pair.test_accuracy,
                    "checkpoints": [av_path, kv_path],
                }),
            )?;
            run.note(format!(
                "MNIST pair test accuracy {:.4}; checkpoints {} and {}",
                pair.test_accuracy,
                av_path.display(),
                kv_path.display()
            ));
        }
    }
    run.finish()?;
    Ok(())
}

/// Relevances from the bilinear rule on `x1 * x2 * x3` for both groupings,
/// checked against `(y/4, y/4, y/2)`, `(y/2, y/4, y/4)` and LOO `(y, y, y)`.
pub fn counterexample(cfg: &ExperimentConfig, x: [f64; 3], eps: f64) -> anyhow::Result<bool> {
    let mut run = RunDir::create(cfg, "counterexample")?;
    let left = scalar_chain(Association::Left, x[0], x[1], x[2]);
    let right = scalar_chain(Association::Right, x[0], x[1], x[2]);
    let y = left.output;
    let rl = propagate_scalar_chain(&left, y, eps)?;
    let rr = propagate_scalar_chain(&right, y, eps)?;
    let loo = loo_scalar_chain(Association::Left, x);
    let expected = [
        ("left (x1*x2)*x3", rl, [y / 4.0, y / 4.0, y / 2.0]),
        ("right x1*(x2*x3)", rr, [y / 2.0, y / 4.0, y / 4.0]),
        ("loo", loo, [y, y, y]),
    ];
    run.note(format!("inputs ({}, {}, {}), y = {y}, epsilon = {eps:e}", x[0], x[1], x[2]));
    let mut ok = true;
    for (label, got, want) in &expected {
        let err = got.iter().zip(want).fold(0.0f64, |m, (g, w)| m.max((g - w).abs()));
        ok &= err <= 1e-9;
        run.note(format!("{label:<18} ({}, {}, {})  max error {err:.2e}", got[0], got[1], got[2]));
    }
    run.write_csv(
        "counterexample.csv",
        &["method", "r_x1", "r_x2", "r_x3"],
        expected
            .iter()
            .map(|(label, got, _)| {
                let name = label.split_whitespace().next().unwrap_or(label);
                vec![name.to_string(), num(got[0]), num(got[1]), num(got[2])]
            }),
    )?;
    run.note(if ok { "PASS" } else { "FAIL" });
    run.finish()?;
    Ok(ok)
}

#[derive(Default)]
struct PairStats {
    l_vs_r: Vec<f64>,
    l_vs_loo: Vec<f64>,
    r_vs_loo: Vec<f64>,
    undefined: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

pub fn rq1(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let mut run = RunDir::create(cfg, "rq1")?;
    let test = Examples::from_images(&load_mnist_split(cfg, MnistSplit::Test)?);
    let (pair, acc) = mnist_pair(cfg, &test)?;
    if let Some(h) = &pair.history {
        run.write_csv("history.csv", &HISTORY_HEADER, history_rows(h))?;
    }
    run.note(format!("shared-weight pair test accuracy {acc:.4}"));
    let n = cfg.metrics.eval_n.min(test.len());
    let attn = Lrp {
        variant: LrpVariant::AttnLrp,
        epsilon: cfg.explainer.epsilon,
    };
    let steps = cfg.explainer.ig_steps;
    let methods = ["LOO", "IG", "AttnLRP"];
    let mut stats: Vec<PairStats> = methods.iter().map(|_| PairStats::default()).collect();
    let mut per_image = Vec::new();
    let mut loo_max_gap = 0.0f64;
    for i in 0..n {
        let x = &test.inputs[i];
        let target = pair.kv.predict(x)?;
        let loo_l = loo_scores(&pair.av, x, target)?;
        let loo_r = loo_scores(&pair.kv, x, target)?;
        loo_max_gap = loo_l.iter().zip(&loo_r).fold(loo_max_gap, |m, (a, b)| m.max((a - b).abs()));
        let base = zero_baseline(&pair.av, x)?;
        let ig_l = integrated_gradients(&pair.av, x, &base, target, steps)?.scores;
        let ig_r = integrated_gradients(&pair.kv, x, &base, target, steps)?.scores;
        let lrp_l = attn.explain(&pair.av, x, target)?.scores;
        let lrp_r = attn.explain(&pair.kv, x, target)?.scores;
        for ((name, (l, r)), st) in methods
            .iter()
            .zip([(&loo_l, &loo_r), (&ig_l, &ig_r), (&lrp_l, &lrp_r)])
            .zip(stats.iter_mut())
        {
            let lr = pearson(l, r);
            let ll = pearson(l, &loo_l);
            let rl = pearson(r, &loo_r);
            match (lr, ll, rl) {
                (Some(a), Some(b), Some(c)) => {
                    st.l_vs_r.push(a);
                    st.l_vs_loo.push(b);
                    st.r_vs_loo.push(c);
                }
                _ => st.undefined += 1,
            }
            per_image.push(vec![i.to_string(), name.to_string(), opt(lr), opt(ll), opt(rl)]);
        }
    }
    run.write_csv(
        "rq1_per_image.csv",
        &["image", "method", "l_vs_r", "l_vs_loo", "r_vs_loo"],
        per_image,
    )?;
    let mut rows = Vec::new();
    let mut meta_methods = serde_json::Map::new();
    run.note(format!("{:<8} {:>10} {:>10} {:>10}   (mean Pearson over {n} test images)", "method", "L vs R", "L vs LOO", "R vs LOO"));
    for (name, st) in methods.iter().zip(&stats) {
        let (a, sa) = mean_std(&st.l_vs_r);
        let (b, sb) = mean_std(&st.l_vs_loo);
        let (c, sc) = mean_std(&st.r_vs_loo);
        rows.push(vec![name.to_string(), num(a), num(b), num(c)]);
        run.note(format!("{name:<8} {a:>10.4} {b:>10.4} {c:>10.4}"));
        meta_methods.insert(
            name.to_string(),
            json!({
                "std": { "l_vs_r": sa, "l_vs_loo": sb, "r_vs_loo": sc },
                "min_l_vs_r": st.l_vs_r.iter().cloned().fold(f64::INFINITY, f64::min),
                "evaluated": st.l_vs_r.len(),
                "pearson_undefined": st.undefined,
            }),
        );
    }
    run.write_csv("rq1.csv", &["method", "l_vs_r", "l_vs_loo", "r_vs_loo"], rows)?;
    run.write_meta(
        "rq1.meta.json",
        json!({
            "test_accuracy": acc,
            "images": n,
            "epsilon": cfg.explainer.epsilon,
            "ig_steps": steps,
            "ig_baseline": "zero",
            "target": "predicted class",
            "loo_max_abs_difference_l_vs_r": loo_max_gap,
            "methods": meta_methods,
        }),
    )?;
    run.finish()?;
    Ok(())
}

fn suite_rows(report: &SuiteReport) -> Vec<Vec<String>> {
    report
        .rows
        .iter()
        .map(|r| vec![r.method.clone(), opt(r.loo_r), num(r.lerf), num(r.morf), num(r.delta)])
        .collect()
}

fn suite_settings(cfg: &ExperimentConfig) -> SuiteSettings {
    SuiteSettings {
        unit: cfg.metrics.removal_unit,
        max_steps: cfg.metrics.max_steps,
    }
}

fn encoder_eval_inputs(cfg: &ExperimentConfig) -> anyhow::Result<(TrainedEncoder, Vec<ModelInput>, f64)> {
    let enc = encoder(cfg)?;
    let (_, test_part) = synthetic_split(cfg)?;
    let test = Examples::from_sequences(&test_part);
    let acc = accuracy(&enc.model, &test)?;
    let n = cfg.metrics.eval_n.min(test.len());
    Ok((enc, test.inputs[..n].to_vec(), acc))
}

fn note_table(run: &mut RunDir, first: &str, rows: &[Vec<String>]) {
    run.note(format!("{first:<16} {:>10} {:>10} {:>10} {:>10}", "LOO r", "LeRF", "MoRF", "Delta"));
    for r in rows {
        let cell = |s: &String| s.parse::<f64>().map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let (label, vals) = r.split_at(r.len() - 4);
        run.note(format!(
            "{:<16} {:>10} {:>10} {:>10} {:>10}",
            label.join(" "),
            cell(&vals[0]),
            cell(&vals[1]),
            cell(&vals[2]),
            cell(&vals[3])
        ));
    }
}

pub fn rq2(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let mut run = RunDir::create(cfg, "rq2")?;
    let (enc, inputs, acc) = encoder_eval_inputs(cfg)?;
    if let Some(h) = &enc.history {
        run.write_csv("history.csv", &HISTORY_HEADER, history_rows(h))?;
    }
    run.note(format!("encoder test accuracy {acc:.4}; {} evaluation examples", inputs.len()));
    let reg = ExplainerRegistry::default();
    let settings = cfg.explainer_settings();
    let explainers = ["loo", "ig", "rollout", "attnlrp", "cplrp"]
        .iter()
        .map(|n| reg.build(n, &settings))
        .collect::<lrp_lab::Result<Vec<_>>>()?;
    let refs: Vec<&dyn Explainer> = explainers.iter().map(|b| b.as_ref()).collect();
    let report = evaluate_suite(&enc.model, &inputs, &refs, &suite_settings(cfg))?;
    let rows = suite_rows(&report);
    run.write_csv("rq2.csv", &MetricsRow::HEADER, rows.clone())?;
    note_table(&mut run, "method", &rows);
    let r = |m: &str| report.rows.iter().find(|row| row.method == m).and_then(|row| row.loo_r);
    let diff = r("cplrp").zip(r("attnlrp")).map(|(c, a)| c - a);
    run.write_meta(
        "rq2.meta.json",
        json!({
            "test_accuracy": acc,
            "examples": inputs.len(),
            "epsilon": cfg.explainer.epsilon,
            "ig_steps": cfg.explainer.ig_steps,
            "rollout_residual": cfg.explainer.rollout_residual,
            "removal_unit": cfg.metrics.removal_unit,
            "max_steps": cfg.metrics.max_steps,
            "aopc": "mean target logit over removal steps 1..K, step 0 excluded",
            "target": "predicted class",
            "cplrp_minus_attnlrp_loo_r": diff,
            "counts": report.counts,
        }),
    )?;
    if let Some(d) = diff {
        run.note(format!("CP-LRP minus AttnLRP LOO r: {d:+.4}"));
    }
    run.finish()?;
    Ok(())
}

pub fn removed_layers(plan: AblationPlan, layers: usize) -> String {
    match plan {
        AblationPlan::FrontToBack(k) if k == 1 => "1".into(),
        AblationPlan::FrontToBack(k) => format!("1-{k}"),
        AblationPlan::BackToFront(k) if k == layers => format!("{k}"),
        AblationPlan::BackToFront(k) => format!("{k}-{layers}"),
        AblationPlan::Single(k) => format!("{k}"),
    }
}

pub fn rq3(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let mut run = RunDir::create(cfg, "rq3")?;
    let (enc, inputs, acc) = encoder_eval_inputs(cfg)?;
    let layers = enc.model.num_attention_layers();
    run.note(format!(
        "encoder test accuracy {acc:.4}; {} evaluation examples; {layers} attention layers",
        inputs.len()
    ));
    let mut plans = Vec::new();
    for family in [AblationPlan::FrontToBack, AblationPlan::BackToFront, AblationPlan::Single] {
        plans.extend((1..=layers).map(family));
    }
    let explainers: Vec<Lrp> = plans
        .iter()
        .map(|&p| Lrp {
            variant: LrpVariant::Hybrid(p),
            epsilon: cfg.explainer.epsilon,
        })
        .collect();
    let refs: Vec<&dyn Explainer> = explainers.iter().map(|e| e as &dyn Explainer).collect();
    let report = evaluate_suite(&enc.model, &inputs, &refs, &suite_settings(cfg))?;
    let rows: Vec<Vec<String>> = plans
        .iter()
        .zip(&report.rows)
        .map(|(p, r)| {
            vec![
                p.family().to_string(),
                removed_layers(*p, layers),
                opt(r.loo_r),
                num(r.lerf),
                num(r.morf),
                num(r.delta),
            ]
        })
        .collect();
    run.write_csv(
        "rq3.csv",
        &["family", "removed_layers", "loo_r", "lerf", "morf", "delta"],
        rows.clone(),
    )?;
    note_table(&mut run, "family layers", &rows);
    run.write_meta(
        "rq3.meta.json",
        json!({
            "test_accuracy": acc,
            "examples": inputs.len(),
            "layers": layers,
            "epsilon": cfg.explainer.epsilon,
            "removal_unit": cfg.metrics.removal_unit,
            "max_steps": cfg.metrics.max_steps,
            "counts": report.counts,
        }),
    )?;
    run.finish()?;
    Ok(())
}

fn example_for(cfg: &ExperimentConfig, index: usize) -> anyhow::Result<(ModelGraph, ModelInput, usize)> {
    match cfg.model {
        ModelChoice::Encoder => {
            let enc = encoder(cfg)?;
            let (_, test_part) = synthetic_split(cfg)?;
            let test = Examples::from_sequences(&test_part);
            let x = test
                .inputs
                .get(index)
                .ok_or_else(|| anyhow!(DataMissing(format!("index {index} beyond {} test examples", test.len()))))?;
            Ok((enc.model, x.clone(), test.labels[index]))
        }
        ModelChoice::MnistAv | ModelChoice::MnistKv => {
            let test = Examples::from_images(&load_mnist_split(cfg, MnistSplit::Test)?);
            let x = test
                .inputs
                .get(index)
                .ok_or_else(|| anyhow!(DataMissing(format!("index {index} beyond {} test images", test.len()))))?
                .clone();
            let label = test.labels[index];
            let (pair, _) = mnist_pair(cfg, &test)?;
            let model = if cfg.model == ModelChoice::MnistAv { pair.av } else { pair.kv };
            Ok((model, x, label))
        }
    }
}

pub fn explain_cmd(cfg: &ExperimentConfig, method: &str, index: usize) -> anyhow::Result<()> {
    let reg = ExplainerRegistry::default();
    let explainer = reg.build(method, &cfg.explainer_settings())?;
    let mut run = RunDir::create(cfg, "explain")?;
    let (model, x, label) = example_for(cfg, index)?;
    let target = model.predict(&x)?;
    let attr = explainer.explain(&model, &x, target)?;
    let file = format!("explain-{}-{index}.csv", method.replace(':', "_"));
    run.write_csv(
        &file,
        &["index", "raw", "normalized"],
        attr.rows().into_iter().map(|(i, r, n)| vec![i.to_string(), num(r), num(n)]),
    )?;
    run.write_meta(
        &format!("{}.meta.json", file.trim_end_matches(".csv")),
        json!({
            "method": attr.method,
            "feature_kind": attr.feature_kind,
            "normalizable": attr.normalized_scores().is_some(),
            "example": index,
            "label": label,
            "target": target,
            "settings": explainer.settings(),
        }),
    )?;
    let top = lrp_lab::model::argmax(&attr.scores);
    run.note(format!(
        "{} on example {index} (label {label}, predicted {target}): {} {:?} scores, top feature {top}",
        attr.method.name,
        attr.scores.len(),
        attr.feature_kind
    ));
    run.finish()?;
    Ok(())
}

pub fn eval_cmd(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let reg = ExplainerRegistry::default();
    let settings = cfg.explainer_settings();
    let mut names: Vec<String> = Vec::new();
    for m in &cfg.methods {
        if m == "ablation" {
            let plan = cfg
                .ablation
                .ok_or_else(|| anyhow!(crate::error::ConfigError("method `ablation` needs an `ablation` plan".into())))?;
            names.push(plan.to_string());
        } else {
            names.push(m.clone());
        }
    }
    let explainers = names
        .iter()
        .map(|n| reg.build(n, &settings))
        .collect::<lrp_lab::Result<Vec<_>>>()?;
    let refs: Vec<&dyn Explainer> = explainers.iter().map(|b| b.as_ref()).collect();
    let mut run = RunDir::create(cfg, "eval")?;
    let (model, inputs, acc) = match cfg.model {
        ModelChoice::Encoder => {
            let (enc, inputs, acc) = encoder_eval_inputs(cfg)?;
            (enc.model, inputs, acc)
        }
        ModelChoice::MnistAv | ModelChoice::MnistKv => {
            let test = Examples::from_images(&load_mnist_split(cfg, MnistSplit::Test)?);
            let (pair, acc) = mnist_pair(cfg, &test)?;
            let n = cfg.metrics.eval_n.min(test.len());
            let model = if cfg.model == ModelChoice::MnistAv { pair.av } else { pair.kv };
            (model, test.inputs[..n].to_vec(), acc)
        }
    };
    run.note(format!("{:?} test accuracy {acc:.4}; {} evaluation examples", cfg.model, inputs.len()));
    let report = evaluate_suite(&model, &inputs, &refs, &suite_settings(cfg))?;
    let rows = suite_rows(&report);
    run.write_csv("eval.csv", &MetricsRow::HEADER, rows.clone())?;
    note_table(&mut run, "method", &rows);
    run.write_meta(
        "eval.meta.json",
        json!({
            "model": cfg.model,
            "test_accuracy": acc,
            "examples": inputs.len(),
            "methods": explainers.iter().map(|e| e.method()).collect::<Vec<_>>(),
            "removal_unit": cfg.metrics.removal_unit,
            "max_steps": cfg.metrics.max_steps,
            "counts": report.counts,
        }),
    )?;
    run.finish()?;
    Ok(())
}
