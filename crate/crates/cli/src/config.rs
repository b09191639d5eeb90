use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lrp_lab::explain::{AblationPlan, ExplainerSettings};
use lrp_lab::metrics::RemovalUnit;
use lrp_lab::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Holds `mnist/` (IDX files) and `cache/` (prepared datasets).
    pub data_dir: PathBuf,
    /// Defaults to `<out_dir>/checkpoints` when unset.
    pub checkpoint_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            checkpoint_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    /// Softmax-attention encoder on the keyword task.
    Encoder,
    /// MNIST linear attention computing (Q K^T) V.
    MnistAv,
    /// MNIST linear attention computing Q (K^T V).
    MnistKv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSettings {
    pub n: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub train_frac: f64,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        Self {
            n: 2000,
            vocab: 16,
            seq_len: 12,
            classes: 4,
            train_frac: 0.8,
        }
    }
}

/// Optimizer settings; the seed comes from the top-level config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
            adam_eps: d.adam_eps,
            epochs: d.epochs,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerBlock {
    pub epsilon: f64,
    pub ig_steps: usize,
    pub rollout_residual: bool,
}

impl Default for ExplainerBlock {
    fn default() -> Self {
        let d = ExplainerSettings::default();
        Self {
            epsilon: d.epsilon,
            ig_steps: d.ig_steps,
            rollout_residual: d.rollout_residual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    pub removal_unit: RemovalUnit,
    /// Examples per suite.
    pub eval_n: usize,
    /// Perturbation steps per curve; all features when unset.
    pub max_steps: Option<usize>,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            removal_unit: RemovalUnit::Single,
            eval_n: 200,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub model: ModelChoice,
    pub synthetic: SyntheticSettings,
    pub train: TrainSettings,
    pub explainer: ExplainerBlock,
    pub metrics: MetricSettings,
    /// Hybrid rule plan used by `eval` when it lists the `ablation` method.
    pub ablation: Option<AblationPlan>,
    /// Methods for `eval`, by registry name.
    pub methods: Vec<String>,
    /// Seeds parameter init, shuffling, synthetic data and the random baseline.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            model: ModelChoice::Encoder,
            synthetic: SyntheticSettings::default(),
            train: TrainSettings::default(),
            explainer: ExplainerBlock::default(),
            metrics: MetricSettings::default(),
            ablation: None,
            methods: ["loo", "ig", "rollout", "attnlrp", "cplrp", "random"]
                .map(String::from)
                .to_vec(),
            seed: 0,
        }
    }
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub eval_n: Option<usize>,
    pub epsilon: Option<f64>,
    pub ig_steps: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.paths.out_dir = o.clone();
        }
        if let Some(n) = overrides.eval_n {
            cfg.metrics.eval_n = n;
        }
        if let Some(e) = overrides.epsilon {
            cfg.explainer.epsilon = e;
        }
        if let Some(s) = overrides.ig_steps {
            cfg.explainer.ig_steps = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.explainer.epsilon > 0.0) {
            bail!("explainer.epsilon must be positive");
        }
        if self.metrics.eval_n == 0 {
            bail!("metrics.eval_n must be positive");
        }
        if let RemovalUnit::Chunk(0) = self.metrics.removal_unit {
            bail!("metrics.removal_unit chunk size must be positive");
        }
        if !(self.synthetic.train_frac > 0.0 && self.synthetic.train_frac < 1.0) {
            bail!("synthetic.train_frac must lie in (0, 1)");
        }
        if self.train.batch_size == 0 {
            bail!("train.batch_size must be positive");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
        }
    }

    pub fn explainer_settings(&self) -> ExplainerSettings {
        ExplainerSettings {
            epsilon: self.explainer.epsilon,
            ig_steps: self.explainer.ig_steps,
            rollout_residual: self.explainer.rollout_residual,
            seed: self.seed,
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths
            .checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("checkpoints"))
    }

    /// Hash of everything that affects results. Paths are left out so the
    /// same experiment written to two places carries the same digest.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        short_hash(v.to_string().as_bytes())
    }

    /// Hash of the settings that determine a trained encoder.
    pub fn encoder_key(&self) -> String {
        let v = serde_json::json!({ "synthetic": self.synthetic, "train": self.train, "seed": self.seed });
        short_hash(v.to_string().as_bytes())
    }

    /// Hash of the settings that determine the trained MNIST pair.
    pub fn mnist_key(&self) -> String {
        let v = serde_json::json!({ "train": self.train, "seed": self.seed });
        short_hash(v.to_string().as_bytes())
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..6])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_paths_skip_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 3, "metrics": {"eval_n": 10}}"#).unwrap();
        let cfg = ExperimentConfig::load(Some(&p), &Overrides::default()).unwrap();
        assert_eq!((cfg.seed, cfg.metrics.eval_n), (3, 10));
        let o = Overrides {
            seed: Some(5),
            out: Some("elsewhere".into()),
            ..Default::default()
        };
        let cfg2 = ExperimentConfig::load(Some(&p), &o).unwrap();
        assert_eq!(cfg2.seed, 5);
        let mut cfg3 = cfg2.clone();
        cfg3.paths.out_dir = "third".into();
        assert_eq!(cfg2.digest(), cfg3.digest());
        assert_ne!(cfg.digest(), cfg2.digest());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"sed": 3}"#).unwrap();
        assert!(ExperimentConfig::load(Some(&p), &Overrides::default()).is_err());
        let o = Overrides {
            epsilon: Some(0.0),
            ..Default::default()
        };
        assert!(ExperimentConfig::load(None, &o).is_err());
    }
}
