//! Command-line surface of the lab. [`run_command`] is the whole program; the
//! binary only forwards `argv` and the exit status.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use longred::checkpoint::{load_checkpoint, read_header, save_checkpoint};
use longred::config::{substream, RunConfig};
use longred::corpus::{pack_corpus, synthetic_datasets, DatasetName, SyntheticConfig, Tokenizer};
use longred::drift::drift_report;
use longred::model::{DecoderModel, PositionPlan};
use longred::positions::{sample_plan, BoundaryPolicy, SamplerKind, SkipConfig};
use longred::rope::{rope_bound, BoundConfig, ExtensionSpec};
use longred::run::run_training;
use longred::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "longred", about = "Context-window extension lab", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a student against the original model.
    Train(TrainArgs),
    /// Rewrite a checkpoint's positional encoding for a longer window.
    Extend(ExtendArgs),
    /// Compare two checkpoints on a text corpus.
    Drift(DriftArgs),
    /// Print the partial-sum bound for each RoPE base.
    Bound(BoundArgs),
    /// Print skipped positional-index plans, one per line.
    SamplePositions(SampleArgs),
    /// Pack text into fixed-length token datasets.
    Pack(PackArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured step count.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct ExtendArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// New RoPE base.
    #[arg(long, conflicts_with = "pi_scale")]
    abf_base: Option<f64>,
    /// Position-interpolation factor.
    #[arg(long)]
    pi_scale: Option<f64>,
    /// Target window; taken from the config's extension when absent.
    #[arg(long)]
    target: Option<usize>,
}

#[derive(Args, Debug)]
struct DriftArgs {
    /// Original model.
    #[arg(long)]
    a: PathBuf,
    /// Extended model.
    #[arg(long)]
    b: PathBuf,
    /// UTF-8 text, tokenized as bytes.
    #[arg(long)]
    corpus: PathBuf,
    /// Sequence length; defaults to the first model's window.
    #[arg(long)]
    length: Option<usize>,
    /// Maximum number of sequences compared.
    #[arg(long, default_value_t = 32)]
    samples: usize,
}

#[derive(Args, Debug)]
struct BoundArgs {
    #[arg(long = "base", required = true)]
    bases: Vec<f64>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 512)]
    len: usize,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Input length; taken from the config's skip section when absent.
    #[arg(long)]
    input_len: Option<usize>,
    #[arg(long)]
    target_len: Option<usize>,
    /// Head/tail length, or `cream` for the randomized policy.
    #[arg(long)]
    boundary: Option<String>,
    #[arg(long, value_parser = ["uniform", "cream"])]
    sampler: Option<String>,
    #[arg(long, default_value_t = 10)]
    count: usize,
}

#[derive(Args, Debug)]
struct PackArgs {
    /// Text files concatenated in order.
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    name: Option<DatasetName>,
    #[arg(long)]
    length: Option<usize>,
    /// Generate D1, D2 and D3 from the config's synthetic section instead.
    #[arg(long, conflicts_with = "inputs")]
    synthetic: bool,
    #[arg(long)]
    out: PathBuf,
}

/// A failure with the exit status it maps to.
struct Failure {
    code: i32,
    error: anyhow::Error,
}

fn code_for(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::NonFinite(_) | Error::ZeroNorm(_) | Error::NonDeterministic => EXIT_NUMERIC,
                Error::Io { .. } | Error::Checkpoint { .. } => EXIT_IO,
                _ => EXIT_CONFIG,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        Failure {
            code: code_for(&error),
            error,
        }
    }
}

type CliResult = Result<(), Failure>;

/// Parses `argv` (program name first), runs the subcommand and returns the exit
/// status. Diagnostics go to `err`.
pub fn run_command<S: AsRef<str>>(argv: &[S], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv.iter().map(AsRef::as_ref)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = out.write_all(text.as_bytes());
            } else {
                let _ = err.write_all(text.as_bytes());
            }
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {:#}", f.error);
            f.code
        }
    }
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>, Failure> {
    let Some(path) = &cli.config else { return Ok(None) };
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(Some(cfg))
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> CliResult {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Train(a) => train(cfg, a, out),
        Command::Extend(a) => extend(cfg, a, out),
        Command::Drift(a) => drift(a, out),
        Command::Bound(a) => bound(a, out),
        Command::SamplePositions(a) => sample_positions(cfg, cli.seed, a, out),
        Command::Pack(a) => pack(cfg, a, out),
    }
}

fn train(cfg: Option<RunConfig>, a: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = cfg.ok_or_else(|| anyhow!("train needs --config"))?;
    if let Some(dir) = &a.out {
        cfg.output_dir = dir.clone();
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    match run_training(&cfg)? {
        Ok(s) => {
            writeln!(out, "steps {}", s.steps)?;
            if let Some(r) = &s.last {
                writeln!(out, "loss_final {}", r.loss_final)?;
            }
            writeln!(out, "metrics {}", s.metrics.display())?;
            writeln!(out, "checkpoint {} sha256 {}", s.checkpoint.display(), s.checkpoint_digest)?;
            Ok(())
        }
        Err(abort) => Err(Failure {
            code: EXIT_NUMERIC,
            error: anyhow::Error::new(abort.error).context(format!("training aborted at step {}", abort.step)),
        }),
    }
}

fn extend(cfg: Option<RunConfig>, a: &ExtendArgs, out: &mut dyn Write) -> CliResult {
    let from_cfg = cfg.and_then(|c| c.extension);
    let target = a
        .target
        .or(from_cfg.as_ref().map(|e| e.target_window))
        .ok_or_else(|| anyhow!("extend needs --target or a config with an extension section"))?;
    let spec = match (a.abf_base, a.pi_scale, from_cfg) {
        (Some(b), None, _) => ExtensionSpec::abf(b, target),
        (None, Some(s), _) => ExtensionSpec::pi(s, target),
        (None, None, Some(mut e)) => {
            e.target_window = target;
            e
        }
        _ => return Err(anyhow!("extend needs --abf-base or --pi-scale").into()),
    };
    let dtype = read_header(&a.checkpoint)?.dtype;
    let digest = match dtype {
        longred::tensor::DType::F32 => extend_typed::<f32>(&a.checkpoint, &a.out, &spec)?,
        longred::tensor::DType::F64 => extend_typed::<f64>(&a.checkpoint, &a.out, &spec)?,
    };
    writeln!(out, "checkpoint {} sha256 {digest}", a.out.display())?;
    Ok(())
}

fn extend_typed<F: longred::tensor::Real>(from: &Path, to: &Path, spec: &ExtensionSpec) -> longred::Result<String> {
    let mut m: DecoderModel<F> = load_checkpoint(from)?;
    let cfg = spec.apply(m.config())?;
    m.set_config(cfg)?;
    save_checkpoint(&m, to)
}

fn drift(a: &DriftArgs, out: &mut dyn Write) -> CliResult {
    let teacher: DecoderModel<f64> = load_checkpoint(&a.a)?;
    let student: DecoderModel<f64> = load_checkpoint(&a.b)?;
    let len = a.length.unwrap_or(teacher.config().context);
    let text = fs::read(&a.corpus).with_context(|| format!("read {}", a.corpus.display()))?;
    let tokens = Tokenizer::default().tokenize(&text)?;
    let mut packed = pack_corpus(DatasetName::D3, &tokens, len)?;
    packed.sequences.truncate(a.samples.max(1));
    let report = drift_report(&teacher, &student, &packed.sequences, &PositionPlan::contiguous(len))?;
    report.write_records(&mut *out)?;
    Ok(())
}

fn bound(a: &BoundArgs, out: &mut dyn Write) -> CliResult {
    writeln!(out, "base,bound")?;
    for &base in &a.bases {
        let b = rope_bound(&BoundConfig::new(base, a.dim, a.len)?)?;
        writeln!(out, "{base:e},{b}")?;
    }
    Ok(())
}

fn parse_boundary(s: &str) -> Result<BoundaryPolicy, Failure> {
    if s == "cream" {
        return Ok(BoundaryPolicy::CreamRandom);
    }
    let v = s
        .parse()
        .map_err(|_| anyhow!("--boundary must be an integer or `cream`, got `{s}`"))?;
    Ok(BoundaryPolicy::Fixed(v))
}

fn sample_positions(cfg: Option<RunConfig>, seed: Option<u64>, a: &SampleArgs, out: &mut dyn Write) -> CliResult {
    let base = cfg.as_ref().map(|c| c.skip.clone());
    let seed = seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    let input_len = a.input_len.or(base.as_ref().map(|s| s.input_len));
    let target_len = a.target_len.or(base.as_ref().map(|s| s.target_len));
    let (Some(input_len), Some(target_len)) = (input_len, target_len) else {
        return Err(anyhow!("sample-positions needs --input-len and --target-len or a config").into());
    };
    let boundary = match &a.boundary {
        Some(b) => parse_boundary(b)?,
        None => base
            .as_ref()
            .map(|s| s.boundary)
            .ok_or_else(|| anyhow!("sample-positions needs --boundary or a config"))?,
    };
    let sampler = match a.sampler.as_deref() {
        Some("cream") => SamplerKind::Cream,
        Some(_) => SamplerKind::Uniform,
        None => base.as_ref().map_or(SamplerKind::Uniform, |s| s.sampler),
    };
    let mut skip = SkipConfig::new(input_len, target_len, boundary, sampler)?;
    if let Some(b) = &base {
        skip.sigma = b.sigma;
        skip.grid_points = b.grid_points;
    }
    let mut rng = substream(seed, "sampler");
    for _ in 0..a.count {
        let draw = sample_plan(&skip, &mut rng)?;
        let line: Vec<String> = draw.plan.indices().iter().map(usize::to_string).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

fn pack(cfg: Option<RunConfig>, a: &PackArgs, out: &mut dyn Write) -> CliResult {
    let sets = if a.synthetic {
        let cfg = cfg.ok_or_else(|| anyhow!("pack --synthetic needs --config"))?;
        let syn: SyntheticConfig = cfg.data.synthetic.clone().unwrap_or_default();
        synthetic_datasets(&syn, cfg.train.lengths(), &mut substream(cfg.seed, "data"))?.to_vec()
    } else {
        if a.inputs.is_empty() {
            return Err(anyhow!("pack needs --input files or --synthetic").into());
        }
        let (Some(name), Some(length)) = (a.name, a.length) else {
            return Err(anyhow!("pack needs --name and --length").into());
        };
        let mut text = Vec::new();
        for p in &a.inputs {
            let bytes = fs::read(p).with_context(|| format!("read {}", p.display()))?;
            std::str::from_utf8(&bytes).with_context(|| format!("{} is not UTF-8", p.display()))?;
            text.extend(bytes);
        }
        vec![pack_corpus(name, &Tokenizer::default().tokenize(&text)?, length)?]
    };
    for d in &sets {
        d.save(&a.out)?;
        writeln!(out, "{} length {} count {} sha256 {}", d.name, d.sequence_length, d.len(), d.digest)?;
    }
    Ok(())
}
