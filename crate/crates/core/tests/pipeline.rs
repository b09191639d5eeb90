//! End-to-end checks through the public API: data, training, checkpoints,
//! explainers and metrics on the keyword encoder.

use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use lrp_lab::dataio::{
    decode_cache, encode_sequence_cache, gen_synthetic, load_mnist, serialize_idx, CachedDataset, IdxData, MnistSplit,
};
use lrp_lab::explain::{loo_scores, ExplainerRegistry, ExplainerSettings};
use lrp_lab::metrics::{aopc, perturbation_curve, RemovalOrder, RemovalUnit};
use lrp_lab::model::{argmax, Architecture, ModelGraph};
use lrp_lab::relprop::{propagate, AttnRule, RuleConfig};
use lrp_lab::train::{accuracy, load_checkpoint, save_checkpoint, train, Examples, TrainConfig};
use lrp_lab::Matrix;

fn trained_encoder() -> (ModelGraph, lrp_lab::dataio::SequenceDataset) {
    let ds = gen_synthetic(11, 1500, 16, 12, 4).unwrap();
    let (train_part, test_part) = ds.split(0.8);
    let mut model = ModelGraph::new(Architecture::keyword_encoder(16, 12, 4), 11).unwrap();
    let cfg = TrainConfig {
        seed: 11,
        ..TrainConfig::default()
    };
    train(&mut model, &Examples::from_sequences(&train_part), &cfg).unwrap();
    (model, test_part)
}

#[test]
fn keyword_encoder_trains_and_loo_finds_the_keyword() {
    let (model, test) = trained_encoder();
    let examples = Examples::from_sequences(&test);
    let acc = accuracy(&model, &examples).unwrap();
    assert!(acc >= 0.95, "test accuracy {acc}");

    let (mut hits, mut correct) = (0, 0);
    for (i, x) in examples.inputs.iter().enumerate() {
        if model.predict(x).unwrap() != test.labels[i] {
            continue;
        }
        correct += 1;
        let scores = loo_scores(&model, x, test.labels[i]).unwrap();
        if Some(argmax(&scores)) == test.keyword_position(i) {
            hits += 1;
        }
    }
    assert!(hits as f64 >= 0.9 * correct as f64, "{hits}/{correct}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    save_checkpoint(&path, &model, None).unwrap();
    let back = load_checkpoint(&path).unwrap().model;
    for x in examples.inputs.iter().take(20) {
        assert_eq!(model.logits(x).unwrap(), back.logits(x).unwrap());
    }

    // Conservation of every epsilon-rule node on the trained weights.
    let cfg = RuleConfig::uniform(6, AttnRule::AttnLrp, 1e-9);
    for x in examples.inputs.iter().take(10) {
        let trace = model.forward(x).unwrap();
        let rel = propagate(&model, &trace, trace.predicted(), &cfg).unwrap();
        for e in rel.epsilon_audit() {
            assert!(e.mass_gap() < 1e-6, "{e:?}");
        }
    }

    // LOO ordering removes the most damaging tokens first.
    let reg = ExplainerRegistry::default();
    let random = reg.build("random", &ExplainerSettings::default()).unwrap();
    let (mut d_loo, mut d_rand) = (0.0, 0.0);
    for x in examples.inputs.iter().take(50) {
        let t = model.predict(x).unwrap();
        let loo = loo_scores(&model, x, t).unwrap();
        let rnd = random.explain(&model, x, t).unwrap().scores;
        let delta = |s: &[f64]| {
            let c = |o| perturbation_curve(&model, x, s, t, o, RemovalUnit::Single, None).unwrap();
            aopc(&c(RemovalOrder::Lerf)) - aopc(&c(RemovalOrder::Morf))
        };
        d_loo += delta(&loo);
        d_rand += delta(&rnd);
    }
    assert!(d_loo > d_rand, "{d_loo} vs {d_rand}");
}

#[test]
fn mnist_files_load_from_gzip() {
    let dir = tempfile::tempdir().unwrap();
    let img = Matrix::new(28, 28, (0..784).map(|i| f64::from((i % 256) as u8) / 255.0).collect()).unwrap();
    let files = [
        ("train-images-idx3-ubyte.gz", IdxData::Images(vec![img.clone(), img])),
        ("train-labels-idx1-ubyte.gz", IdxData::Labels(vec![3, 7])),
    ];
    for (name, data) in &files {
        let mut gz = GzEncoder::new(Vec::new(), Compression::default());
        gz.write_all(&serialize_idx(data)).unwrap();
        std::fs::write(dir.path().join(name), gz.finish().unwrap()).unwrap();
    }
    let ds = load_mnist(dir.path(), MnistSplit::Train).unwrap();
    assert_eq!(ds.labels, vec![3, 7]);
    assert_eq!(ds.images[0].shape(), (14, 14));
    assert!(load_mnist(dir.path(), MnistSplit::Test).is_err());
}

#[test]
fn sequence_cache_round_trip() {
    let ds = gen_synthetic(2, 50, 16, 12, 4).unwrap();
    match decode_cache(&encode_sequence_cache(&ds)).unwrap() {
        CachedDataset::Sequences(back) => assert_eq!(back, ds),
        CachedDataset::Images(_) => panic!("wrong kind"),
    }
}
