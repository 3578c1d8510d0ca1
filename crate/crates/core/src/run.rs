//! End-to-end training run driven by a [`RunConfig`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{substream, RunConfig};
use crate::corpus::{synthetic_datasets, BatchSampler, DatasetName, PackedDataset};
use crate::error::{Error, Result};
use crate::model::DecoderModel;
use crate::tensor::{DType, Real};
use crate::trainer::{StepRecord, Trainer};

/// Where a finished run left its outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub checkpoint_digest: String,
    pub steps: usize,
    pub last: Option<StepRecord>,
}

/// A run stopped by a non-finite loss or gradient. The metrics stream ends
/// with a diagnostic record.
#[derive(Debug)]
pub struct NumericAbort {
    pub step: usize,
    pub error: Error,
}

fn datasets(cfg: &RunConfig) -> Result<[PackedDataset; 3]> {
    let sets = match (&cfg.data.dir, &cfg.data.synthetic) {
        (Some(dir), _) => [DatasetName::D1, DatasetName::D2, DatasetName::D3]
            .map(|n| PackedDataset::load(dir, n))
            .into_iter()
            .collect::<Result<Vec<_>>>()?
            .try_into()
            .expect("three datasets"),
        (None, Some(syn)) => synthetic_datasets(syn, cfg.train.lengths(), &mut substream(cfg.seed, "data"))?,
        (None, None) => return Err(Error::config("no data source configured")),
    };
    for (d, want) in sets.iter().zip(cfg.train.lengths()) {
        if d.sequence_length != want {
            return Err(Error::config(format!(
                "dataset {} has length {} but the plan expects {want}",
                d.name, d.sequence_length
            )));
        }
        if let Some(max) = d.max_token() {
            if max >= cfg.model.vocab {
                return Err(Error::config(format!("dataset {} holds token {max} >= vocab {}", d.name, cfg.model.vocab)));
            }
        }
    }
    Ok(sets)
}

/// Trains per the config, streaming one JSON record per step to
/// `output_dir/metrics.jsonl` and writing `output_dir/final.lrd`.
pub fn run_training(cfg: &RunConfig) -> Result<Result<RunSummary, NumericAbort>> {
    match cfg.precision {
        DType::F32 => run_typed::<f32>(cfg),
        DType::F64 => run_typed::<f64>(cfg),
    }
}

fn run_typed<F: Real>(cfg: &RunConfig) -> Result<Result<RunSummary, NumericAbort>> {
    cfg.validate()?;
    let teacher: DecoderModel<F> = match &cfg.data.teacher {
        Some(path) => {
            let m: DecoderModel<F> = load_checkpoint(path)?;
            if *m.config() != cfg.model {
                return Err(Error::config(format!("teacher checkpoint {} does not match [model]", path.display())));
            }
            m
        }
        None => DecoderModel::init(cfg.model.clone(), &mut substream(cfg.seed, "init"))?,
    };
    let mut student = teacher.unfrozen_clone();
    student.set_config(cfg.student_config()?)?;

    let [d1, d2, mut d3] = datasets(cfg)?;
    if d3.len() <= cfg.data.probe_sequences {
        return Err(Error::config(format!(
            "D3 has {} sequences; at least {} are needed to hold out the probe",
            d3.len(),
            cfg.data.probe_sequences + 1
        )));
    }
    let probe = d3.sequences.split_off(d3.len() - cfg.data.probe_sequences);

    let mut trainer = Trainer::new(student, teacher, cfg.train.clone(), cfg.skip.clone(), &probe)?;
    let mut batch_rng = substream(cfg.seed, "batch");
    let mut sampler_rng = substream(cfg.seed, "sampler");
    let mut batches = BatchSampler::new([&d1, &d2, &d3]);

    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(format!("create {}", cfg.output_dir.display()), e))?;
    let metrics = cfg.output_dir.join("metrics.jsonl");
    let file = File::create(&metrics).map_err(|e| Error::io(format!("create {}", metrics.display()), e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(format!("write {}", metrics.display()), e);
    let mut last = None;
    for _ in 0..trainer.plan.steps {
        let b = batches.draw_batch([&d1, &d2, &d3], trainer.plan.mix_ratio, trainer.plan.batch_tokens, &mut batch_rng)?;
        match trainer.step(&b, &mut sampler_rng) {
            Ok(rec) => {
                serde_json::to_writer(&mut out, &rec).expect("record serializes");
                out.write_all(b"\n").map_err(io)?;
                last = Some(rec);
            }
            Err(error @ Error::NonFinite(_)) => {
                let step = trainer.steps_done() + 1;
                let diag = serde_json::json!({ "step": step, "error": error.to_string() });
                writeln!(out, "{diag}").map_err(io)?;
                out.flush().map_err(io)?;
                return Ok(Err(NumericAbort { step, error }));
            }
            Err(e) => return Err(e),
        }
    }
    out.flush().map_err(io)?;
    let checkpoint = cfg.output_dir.join("final.lrd");
    let checkpoint_digest = save_checkpoint(&trainer.student, &checkpoint)?;
    Ok(Ok(RunSummary {
        metrics,
        checkpoint,
        checkpoint_digest,
        steps: trainer.steps_done(),
        last,
    }))
}
