use std::fs;
use std::path::Path;

use longred_cli::{run_command, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK};

struct Output {
    code: i32,
    out: String,
    err: String,
}

fn run(args: &[&str]) -> Output {
    let argv: Vec<&str> = std::iter::once("longred").chain(args.iter().copied()).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_command(&argv, &mut out, &mut err);
    Output {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

const CONFIG: &str = r#"
seed = 3
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
steps = 3
batch_tokens = 256

[train.optimizer]
lr = 0.001

[skip]
input_len = 32
target_len = 64
boundary = { fixed = 4 }
sampler = "uniform"

[data]
probe_sequences = 4

[data.synthetic]
long_docs = 8
short_docs = 8
input_docs = 12
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text.replace("OUT", dir.join("out").to_str().unwrap())).unwrap();
    path.to_str().unwrap().to_string()
}

fn digest_line(out: &str) -> String {
    out.lines().find(|l| l.starts_with("checkpoint")).unwrap().split_whitespace().last().unwrap().to_string()
}

#[test]
fn bound_table() {
    let o = run(&["bound", "--base", "1e4", "--base", "1e5", "--base", "1e6", "--base", "1e8"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    let mut lines = o.out.lines();
    assert_eq!(lines.next(), Some("base,bound"));
    let values: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 4);
    assert!(values.windows(2).all(|w| w[1] > w[0]), "{values:?}");
    assert_eq!(run(&["bound", "--base", "1e4", "--dim", "7"]).code, EXIT_CONFIG);
}

#[test]
fn argument_errors_exit_with_config_status() {
    assert_eq!(run(&["--help"]).code, EXIT_OK);
    assert_eq!(run(&["frobnicate"]).code, EXIT_CONFIG);
    assert_eq!(run(&["bound"]).code, EXIT_CONFIG);
    let o = run(&["train"]);
    assert_eq!(o.code, EXIT_CONFIG);
    assert!(o.err.contains("--config"));
    let o = run(&["sample-positions", "--input-len", "8", "--target-len", "16", "--boundary", "x"]);
    assert_eq!(o.code, EXIT_CONFIG);
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--config", "/nonexistent/run.toml", "train"]).code, EXIT_IO);
    let typo = write_config(dir.path(), &CONFIG.replace("steps = 3", "stepz = 3"));
    let o = run(&["--config", &typo, "train"]);
    assert_eq!(o.code, EXIT_CONFIG);
    assert!(o.err.contains("stepz"), "{}", o.err);
    let inconsistent = write_config(dir.path(), &CONFIG.replace("target_window = 64", "target_window = 128"));
    assert_eq!(run(&["--config", &inconsistent, "train"]).code, EXIT_CONFIG);
}

#[test]
fn training_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let a = run(&["--config", &cfg, "train", "--out", &out("a")]);
    assert_eq!(a.code, EXIT_OK, "{}", a.err);
    assert!(a.out.starts_with("steps 3\n"));
    let b = run(&["--config", &cfg, "train", "--out", &out("b")]);
    let c = run(&["--config", &cfg, "--seed", "4", "train", "--out", &out("c")]);
    assert_eq!(digest_line(&a.out), digest_line(&b.out));
    assert_ne!(digest_line(&a.out), digest_line(&c.out));
    assert_eq!(
        fs::read(dir.path().join("a/metrics.jsonl")).unwrap(),
        fs::read(dir.path().join("b/metrics.jsonl")).unwrap()
    );
}

#[test]
fn divergence_exits_with_numeric_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("lr = 0.001", "lr = 1e30").replace("steps = 3", "steps = 20"));
    let o = run(&["--config", &cfg, "train"]);
    assert_eq!(o.code, EXIT_NUMERIC, "{}", o.err);
    assert!(o.err.contains("aborted"));
}

#[test]
fn pack_extend_and_drift() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    // pack the synthetic datasets, then train from the packed directory
    let cfg = write_config(dir.path(), CONFIG);
    let o = run(&["--config", &cfg, "pack", "--synthetic", "--out", &p("data")]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert_eq!(o.out.lines().count(), 3);
    let from_dir = CONFIG.replace(
        "[data.synthetic]\nlong_docs = 8\nshort_docs = 8\ninput_docs = 12\n",
        &format!("dir = \"{}\"\n", p("data")),
    );
    let from_dir = write_config(dir.path(), &from_dir.replace("steps = 3", "steps = 1"));
    let o = run(&["--config", &from_dir, "train", "--out", &p("run")]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);

    // text packing
    fs::write(p("a.txt"), "the quick brown fox ".repeat(40)).unwrap();
    let o = run(&["pack", "--input", &p("a.txt"), "--name", "D2", "--length", "32", "--out", &p("text")]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert!(o.out.starts_with("D2 length 32 count 25 sha256 "));

    let ckpt = p("run/final.lrd");
    let o = run(&["extend", "--checkpoint", &ckpt, "--out", &p("ext.lrd"), "--abf-base", "1e6", "--target", "128"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);

    let o = run(&["drift", "--a", &ckpt, "--b", &ckpt, "--corpus", &p("a.txt"), "--length", "32", "--samples", "4"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    let records: Vec<serde_json::Value> = o.out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    for r in &records {
        assert!((r["sim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
        if r["layer"] != 0 {
            assert!(r["kld"].as_f64().unwrap().abs() < 1e-12);
        }
    }
    let o = run(&["drift", "--a", &ckpt, "--b", &p("ext.lrd"), "--corpus", &p("a.txt"), "--length", "32"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    let last: serde_json::Value = serde_json::from_str(o.out.lines().last().unwrap()).unwrap();
    assert!(last["sim"].as_f64().unwrap() < 1.0 && last["kld"].as_f64().unwrap() > 0.0);

    assert_eq!(run(&["extend", "--checkpoint", &p("missing.lrd"), "--out", &p("x.lrd"), "--abf-base", "1e6", "--target", "64"]).code, EXIT_IO);
    fs::write(p("junk.lrd"), b"LRD1junkjunkjunkjunk").unwrap();
    assert_eq!(run(&["extend", "--checkpoint", &p("junk.lrd"), "--out", &p("x.lrd"), "--abf-base", "1e6", "--target", "64"]).code, EXIT_IO);
    assert_eq!(run(&["extend", "--checkpoint", &ckpt, "--out", &p("x.lrd"), "--pi-scale", "0.5", "--target", "64"]).code, EXIT_CONFIG);
}

#[test]
fn sample_positions_is_seeded() {
    let args = ["sample-positions", "--input-len", "8", "--target-len", "32", "--boundary", "2", "--count", "5"];
    let a = run(&[&args[..], &["--seed", "1"]].concat());
    let b = run(&[&args[..], &["--seed", "1"]].concat());
    let c = run(&[&args[..], &["--seed", "2", "--sampler", "cream"]].concat());
    assert_eq!(a.code, EXIT_OK, "{}", a.err);
    assert_eq!(a.out, b.out);
    assert_ne!(a.out, c.out);
    for line in a.out.lines().chain(c.out.lines()) {
        let idx: Vec<usize> = line.split(' ').map(|x| x.parse().unwrap()).collect();
        assert_eq!(idx.len(), 8);
        assert_eq!(&idx[..2], &[0, 1]);
        assert_eq!(&idx[6..], &[30, 31]);
    }
}
