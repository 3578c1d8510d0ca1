use std::fs;

use longred::checkpoint::{file_digest, load_checkpoint, read_header, save_checkpoint};
use longred::config::RunConfig;
use longred::corpus::{pack_corpus, synthetic_datasets, BatchSampler, DatasetName, MixRatio, PackedDataset, SyntheticConfig};
use longred::model::{DecoderModel, ModelConfig, PositionPlan};
use longred::rope::extend_abf;
use longred::run::run_training;
use longred::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model() -> DecoderModel<f32> {
    let cfg = ModelConfig::new(2, 2, 16, 64, 32, 1e4, 2.0).unwrap();
    DecoderModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(51)).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.lrd"), dir.path().join("b.lrd"));
    let m = model();
    let d1 = save_checkpoint(&m, &a).unwrap();
    assert_eq!(d1, file_digest(&a).unwrap());
    let back: DecoderModel<f32> = load_checkpoint(&a).unwrap();
    assert_eq!(save_checkpoint(&back, &b).unwrap(), d1);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let tokens = [1, 2, 3, 60, 0];
    let p = PositionPlan::contiguous(5);
    assert_eq!(m.logits(&tokens, &p).unwrap(), back.logits(&tokens, &p).unwrap());
    assert!(!dir.path().join("a.tmp").exists());

    // widening to f64 is exact
    let wide: DecoderModel<f64> = load_checkpoint(&a).unwrap();
    for (x, y) in wide.params().iter().zip(m.params()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| *p == *q as f64));
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lrd");
    save_checkpoint(&model(), &path).unwrap();
    let bytes = fs::read(&path).unwrap();

    let bad = dir.path().join("bad.lrd");
    for damaged in [
        bytes[..bytes.len() - 3].to_vec(),
        bytes[..40].to_vec(),
        {
            let mut b = bytes.clone();
            *b.last_mut().unwrap() ^= 1;
            b
        },
        {
            let mut b = bytes.clone();
            b[4] = 2;
            b
        },
        b"LRD0".iter().copied().chain(bytes[4..].iter().copied()).collect(),
    ] {
        fs::write(&bad, damaged).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&bad), Err(Error::Checkpoint { .. })));
    }
    assert!(matches!(load_checkpoint::<f32>(&dir.path().join("missing.lrd")), Err(Error::Io { .. })));
}

#[test]
fn extension_changes_only_rope_fields() {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    let mut ext = m.clone();
    ext.set_config(extend_abf(m.config(), 5e5, 128).unwrap()).unwrap();
    save_checkpoint(&m, &dir.path().join("a.lrd")).unwrap();
    save_checkpoint(&ext, &dir.path().join("b.lrd")).unwrap();
    let ha = read_header(&dir.path().join("a.lrd")).unwrap();
    let hb = read_header(&dir.path().join("b.lrd")).unwrap();
    assert_eq!(ha.payload_digest, hb.payload_digest);
    assert_eq!(ha.tensors, hb.tensors);
    assert_eq!((hb.config.theta, hb.config.context), (5e5, 128));
    let mut same = hb.config.clone();
    same.theta = ha.config.theta;
    same.context = ha.config.context;
    assert_eq!(same, ha.config);
}

#[test]
fn packed_datasets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let tokens: Vec<usize> = (0..1000).map(|i| (i * 7) % 256).collect();
    let d = pack_corpus(DatasetName::D2, &tokens, 64).unwrap();
    assert_eq!(d.len(), 15);
    d.save(dir.path()).unwrap();
    let back = PackedDataset::load(dir.path(), DatasetName::D2).unwrap();
    assert_eq!(back, d);
    assert!(PackedDataset::load(dir.path(), DatasetName::D1).is_err());

    let bin = dir.path().join("D2.bin");
    let mut bytes = fs::read(&bin).unwrap();
    bytes[10] ^= 0xff;
    fs::write(&bin, bytes).unwrap();
    assert!(PackedDataset::load(dir.path(), DatasetName::D2).is_err());
    assert!(pack_corpus(DatasetName::D1, &tokens[..10], 64).is_err());
}

#[test]
fn batch_budget_is_respected() {
    let syn = SyntheticConfig {
        long_docs: 40,
        short_docs: 40,
        input_docs: 40,
        ..Default::default()
    };
    let lengths = [64, 16, 32];
    let data = synthetic_datasets(&syn, lengths, &mut ChaCha8Rng::seed_from_u64(52)).unwrap();
    let [a, b, c] = &data;
    let mut sampler = BatchSampler::new([a, b, c]);
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for (ratio, budget) in [(MixRatio::default(), 512), (MixRatio([1.0, 1.0, 1.0]), 1024), (MixRatio([1.0, 0.0, 0.0]), 256)] {
        let batches = sampler.draw_batch([a, b, c], ratio, budget, &mut rng).unwrap();
        let tokens: usize = batches.tokens().iter().sum();
        // rounding each share to whole sequences costs at most half a sequence per source
        let slack: usize = lengths.iter().sum::<usize>() / 2;
        assert!(tokens.abs_diff(budget) <= slack, "{ratio:?}: {tokens} vs {budget}");
        let total: f64 = ratio.0.iter().sum();
        for (i, &t) in batches.tokens().iter().enumerate() {
            let want = ratio.0[i] / total * budget as f64;
            assert!((t as f64 - want).abs() <= lengths[i] as f64 / 2.0 + 1e-9 || ratio.0[i] > 0.0 && t == lengths[i]);
        }
    }
    assert!(sampler.draw_batch([a, b, c], MixRatio::default(), 32, &mut rng).is_err());
}

const RUN: &str = r#"
seed = 11
output_dir = "OUT"

[model]
layers = 2
heads = 2
d_model = 16
head_dim = 8
vocab = 256
context = 32
theta = 10000.0
ffn_mult = 2.0

[extension]
kind = "abf"
new_base = 500000.0
target_window = 64

[train]
long_len = 64
short_len = 16
input_len = 32
steps = 4
batch_tokens = 256

[train.optimizer]
lr = 0.001

[skip]
input_len = 32
target_len = 64
boundary = { fixed = 4 }
sampler = "cream"

[data]
probe_sequences = 4

[data.synthetic]
long_docs = 8
short_docs = 8
input_docs = 12
"#;

fn run_config(out: &std::path::Path, seed: u64) -> RunConfig {
    let text = RUN.replace("OUT", out.to_str().unwrap()).replace("seed = 11", &format!("seed = {seed}"));
    RunConfig::from_toml(&text).unwrap()
}

#[test]
fn training_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (name, seed) in [("a", 11), ("b", 11), ("c", 12)] {
        let cfg = run_config(&dir.path().join(name), seed);
        let summary = run_training(&cfg).unwrap().unwrap();
        assert_eq!(summary.steps, 4);
        let metrics = fs::read_to_string(&summary.metrics).unwrap();
        assert_eq!(metrics.lines().count(), 4);
        for line in metrics.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["loss_final"].is_f64() && v["loss_short"].is_f64() && v["loss_s2l"].is_f64());
            assert!(v.get("wall_seconds").is_none());
        }
        outputs.push((metrics, summary.checkpoint_digest));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_ne!(outputs[0].0, outputs[2].0);
    assert_ne!(outputs[0].1, outputs[2].1);
}

#[test]
fn diverging_run_stops_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = run_config(dir.path(), 11);
    cfg.train.optimizer.lr = 1e30;
    cfg.train.steps = 20;
    let abort = run_training(&cfg).unwrap().unwrap_err();
    assert!(matches!(abort.error, Error::NonFinite(_)));
    let metrics = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(last["step"].as_u64().unwrap() as usize, abort.step);
    assert!(last["error"].is_string());
    assert_eq!(metrics.lines().count(), abort.step);
    assert!(!dir.path().join("final.lrd").exists());
}
