//! Adam training with cross-entropy and the binary checkpoint format.

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::backward_from;
use crate::dataio::{ImageDataset, SequenceDataset};
use crate::error::{Error, Result};
use crate::model::{argmax, Architecture, Factorization, ModelGraph, ModelInput, Params};
use crate::tensor::{softmax_in_place, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds both parameter init and the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 5,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Labelled inputs ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Examples {
    pub inputs: Vec<ModelInput>,
    pub labels: Vec<usize>,
}

impl Examples {
    pub fn from_images(ds: &ImageDataset) -> Self {
        Self {
            inputs: ds.images.iter().map(|m| ModelInput::Pixels(m.data().to_vec())).collect(),
            labels: ds.labels.clone(),
        }
    }

    pub fn from_sequences(ds: &SequenceDataset) -> Self {
        Self {
            inputs: ds.sequences.iter().map(|s| ModelInput::tokens(s.clone())).collect(),
            labels: ds.labels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One Adam update with bias correction.
pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads.get(&name)?;
        let p = params.get_mut(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(Error::ParamShape {
                name,
                expected: p.shape(),
                actual: g.shape(),
            });
        }
        let m = state.m.get_mut(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        let v = state.v.get_mut(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            *pv -= cfg.lr * (*mv / c1) / ((*vv / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's batches, measured before each update.
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Cross-entropy of `logits` for `label`, and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = log_z - logits[label];
    p[label] -= 1.0;
    (loss, p)
}

/// Trains `model` in place and returns per-epoch statistics.
pub fn train(model: &mut ModelGraph, data: &Examples, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Setting("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5f1e);
    let mut state = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = model.params().zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let trace = model.forward(&data.inputs[i])?;
                let (loss, d_logits) = cross_entropy(&trace.logits, data.labels[i]);
                batch_loss += loss;
                if argmax(&trace.logits) == data.labels[i] {
                    correct += 1;
                }
                let g = backward_from(model, &trace, &d_logits, true)?;
                for (name, gm) in g.d_params.iter() {
                    let acc = grads.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
                    acc.add_assign(gm)?;
                }
            }
            let n = batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss / n,
                });
            }
            loss_sum += batch_loss;
            let names: Vec<String> = grads.names().cloned().collect();
            for name in names {
                if let Some(g) = grads.get_mut(&name) {
                    *g = g.scale(1.0 / n);
                }
            }
            adam_step(model.params_mut(), &grads, &mut state, cfg)?;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        };
        info!(
            "epoch {epoch}: loss {:.4}, train accuracy {:.4}",
            stats.mean_loss, stats.train_accuracy
        );
        history.push(stats);
    }
    Ok(history)
}

pub fn accuracy(model: &ModelGraph, data: &Examples) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        if model.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Both groupings of the MNIST attention model with one shared parameter set.
#[derive(Debug, Clone)]
pub struct TrainedPair {
    pub av_first: ModelGraph,
    pub kv_first: ModelGraph,
    pub history: Vec<EpochStats>,
    pub test_accuracy: f64,
}

/// Trains once on `K^T V` grouping (the cheaper one for long sequences) and
/// instantiates both graphs from the result.
pub fn train_shared_pair(train_set: &Examples, test_set: &Examples, cfg: &TrainConfig) -> Result<TrainedPair> {
    let mut kv_first = ModelGraph::new(Architecture::mnist_qkv(Factorization::KvFirst), cfg.seed)?;
    let history = train(&mut kv_first, train_set, cfg)?;
    let av_first = kv_first.with_factorization(Factorization::AvFirst)?;
    let test_accuracy = accuracy(&kv_first, test_set)?;
    debug!("shared pair test accuracy {test_accuracy:.4}");
    Ok(TrainedPair {
        av_first,
        kv_first,
        history,
        test_accuracy,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LRPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub config: TrainConfig,
    pub final_accuracy: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    params: Vec<ParamEntry>,
    metadata: Option<TrainingMetadata>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelGraph,
    pub metadata: Option<TrainingMetadata>,
}

/// Layout: magic, u32 LE version, u64 LE header length, JSON header, then each
/// parameter's entries as LE f64 in header order (row-major).
pub fn encode_checkpoint(model: &ModelGraph, metadata: Option<&TrainingMetadata>) -> Result<Vec<u8>> {
    let header = Header {
        architecture: model.architecture().clone(),
        params: model
            .params()
            .iter()
            .map(|(name, m)| ParamEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
        metadata: metadata.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.params().iter().map(|(_, m)| m.data().len()).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in model.params().iter() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20usize.saturating_add(header_len))
        .ok_or_else(|| bad(format!("header of {header_len} bytes is truncated")))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut offset = 20 + header_len;
    let mut params = Params::new();
    for entry in &header.params {
        let n = entry
            .rows
            .checked_mul(entry.cols)
            .ok_or_else(|| bad(format!("`{}` dimensions overflow", entry.name)))?;
        let end = offset + 8 * n;
        let block = bytes
            .get(offset..end)
            .ok_or_else(|| bad(format!("`{}` block truncated at byte {offset}", entry.name)))?;
        let data = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(entry.name.clone(), Matrix::new(entry.rows, entry.cols, data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(Checkpoint {
        model: ModelGraph::from_parts(header.architecture, params)?,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(path: &Path, model: &ModelGraph, metadata: Option<&TrainingMetadata>) -> Result<()> {
    let bytes = encode_checkpoint(model, metadata)?;
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::gen_synthetic;

    fn single(v: f64) -> Params {
        let mut p = Params::new();
        p.insert("w", Matrix::from_rows(&[&[v]]));
        p
    }

    #[test]
    fn adam_matches_hand_recursion() {
        let cfg = TrainConfig::default();
        let mut params = single(1.0);
        let mut state = AdamState::new(&params);
        let grads = [0.5, -0.2, 0.1];
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in grads.iter().enumerate() {
            adam_step(&mut params, &single(*g), &mut state, &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            w -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!((params.get("w").unwrap().get(0, 0) - w).abs() < 1e-15);
        }
        // First step moves by lr * sign(g) up to adam_eps.
        let mut p = single(0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &single(3.0), &mut s, &cfg).unwrap();
        assert!((p.get("w").unwrap().get(0, 0) + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_zero_gradient_and_constant_gradient() {
        let cfg = TrainConfig::default();
        let mut params = single(2.0);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &single(0.0), &mut state, &cfg).unwrap();
        assert_eq!(params.get("w").unwrap().get(0, 0), 2.0);
        assert_eq!(state.step, 1);
        let mut prev = 2.0;
        for _ in 0..2000 {
            adam_step(&mut params, &single(-0.3), &mut state, &cfg).unwrap();
            let now = params.get("w").unwrap().get(0, 0);
            if state.step > 1500 {
                assert!(((now - prev) - 1e-3).abs() < 1e-6);
            }
            prev = now;
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let (loss, g) = cross_entropy(&[0.0, 0.0], 1);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![0.5, -0.5]);
        let (loss, _) = cross_entropy(&[1000.0, 0.0], 0);
        assert!(loss.is_finite() && loss < 1e-12);
    }

    fn tiny_task() -> (ModelGraph, Examples) {
        let ds = gen_synthetic(3, 40, 8, 4, 2).unwrap();
        let model = ModelGraph::new(
            Architecture::Encoder {
                vocab: 8,
                seq_len: 4,
                d_model: 4,
                d_ff: 4,
                layers: 1,
                classes: 2,
            },
            2,
        )
        .unwrap();
        (model, Examples::from_sequences(&ds))
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (mut model, data) = tiny_task();
        let before = model.params().clone();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &cfg).unwrap();
        assert_eq!(model.params(), &before);
    }

    #[test]
    fn training_is_deterministic_and_rejects_empty() {
        let cfg = TrainConfig {
            lr: 1e-2,
            epochs: 2,
            batch_size: 8,
            seed: 9,
            ..TrainConfig::default()
        };
        let (mut a, data) = tiny_task();
        let (mut b, _) = tiny_task();
        let ha = train(&mut a, &data, &cfg).unwrap();
        let hb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(encode_checkpoint(&a, None).unwrap(), encode_checkpoint(&b, None).unwrap());
        let empty = Examples {
            inputs: vec![],
            labels: vec![],
        };
        assert!(train(&mut a, &empty, &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (mut model, data) = tiny_task();
        let w = model.params_mut().get_mut("classifier").unwrap();
        *w = w.map(|_| f64::NAN);
        let err = train(&mut model, &data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, step: 0, .. }), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let model = ModelGraph::new(Architecture::mnist_qkv(Factorization::AvFirst), 4).unwrap();
        let meta = TrainingMetadata {
            config: TrainConfig::default(),
            final_accuracy: Some(0.8125),
            seed: 4,
        };
        let bytes = encode_checkpoint(&model, Some(&meta)).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.metadata.as_ref(), Some(&meta));
        let x = ModelInput::Pixels((0..196).map(|i| (i % 7) as f64 / 7.0).collect());
        assert_eq!(model.logits(&x).unwrap(), back.model.logits(&x).unwrap());
        assert_eq!(encode_checkpoint(&back.model, Some(&meta)).unwrap(), bytes);

        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_checkpoint(&wrong), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn pair_checkpoints_differ_only_in_grouping() {
        let model = ModelGraph::new(Architecture::mnist_qkv(Factorization::KvFirst), 4).unwrap();
        let other = model.with_factorization(Factorization::AvFirst).unwrap();
        let a = encode_checkpoint(&model, None).unwrap();
        let b = encode_checkpoint(&other, None).unwrap();
        let body = |bytes: &[u8]| {
            let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
            bytes[20 + n..].to_vec()
        };
        assert_eq!(body(&a), body(&b));
        assert_ne!(a, b);
    }
}
