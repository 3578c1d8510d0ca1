//! Joint long-context training against a frozen teacher: long-text language
//! modelling, short-text hidden-state distillation over selected layers, and
//! short-to-long distillation of the last layer over skipped positions.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batches, MixRatio};
use crate::drift::{batch_traces, drift_report};
use crate::error::{Error, Result};
use crate::model::{Capture, DecoderModel, PositionPlan};
use crate::positions::{sample_plan, SkipConfig};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 2e-5,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip.map_or(true, |c| c > 0.0);
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Which objective a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Long-text loss plus both distillation terms.
    #[default]
    LongRed,
    /// Language modelling on long texts only.
    CptLong,
    /// Language modelling on all three datasets.
    CptMix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub objective: Objective,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Number of distilled layers `M`, the last layer included.
    pub distill_count: usize,
    /// Chosen before training; selected from a probe batch when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill_layers: Option<Vec<usize>>,
    pub mix_ratio: MixRatio,
    /// Long length `T_l` (D1).
    pub long_len: usize,
    /// Short length `T_s` (D2).
    pub short_len: usize,
    /// Short-to-long input length `T` (D3).
    pub input_len: usize,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_tokens: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            objective: Objective::LongRed,
            alpha1: 5.0,
            alpha2: 10.0,
            distill_count: 2,
            distill_layers: None,
            mix_ratio: MixRatio::default(),
            long_len: 256,
            short_len: 32,
            input_len: 64,
            optimizer: OptimizerConfig::default(),
            steps: 300,
            batch_tokens: 8192,
        }
    }
}

impl TrainPlan {
    /// The plan as actually run: baselines zero both weights and CPT-long draws only D1.
    pub fn effective(&self) -> TrainPlan {
        let mut p = self.clone();
        match self.objective {
            Objective::LongRed => {}
            Objective::CptLong => {
                p.alpha1 = 0.0;
                p.alpha2 = 0.0;
                p.mix_ratio = MixRatio([1.0, 0.0, 0.0]);
            }
            Objective::CptMix => {
                p.alpha1 = 0.0;
                p.alpha2 = 0.0;
            }
        }
        p
    }

    pub fn lengths(&self) -> [usize; 3] {
        [self.long_len, self.short_len, self.input_len]
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if !(self.alpha1 >= 0.0) || !(self.alpha2 >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        self.mix_ratio.validate()?;
        if self.objective == Objective::LongRed && self.mix_ratio.0.iter().any(|&r| r <= 0.0) {
            return Err(Error::config("mix ratio entries must be positive"));
        }
        if self.distill_count == 0 || self.distill_count > layers + 1 {
            return Err(Error::config(format!(
                "distill count {} must lie in 1..={}",
                self.distill_count,
                layers + 1
            )));
        }
        if let Some(sel) = &self.distill_layers {
            check_layers(sel, layers)?;
            if sel.len() != self.distill_count {
                return Err(Error::config(format!(
                    "{} distill layers listed but distill count is {}",
                    sel.len(),
                    self.distill_count
                )));
            }
            if !sel.contains(&layers) {
                return Err(Error::config(format!("distill layers must include the last layer {layers}")));
            }
        }
        if self.long_len < 2 || self.short_len < 2 || self.input_len < 2 {
            return Err(Error::config("sequence lengths must be at least 2"));
        }
        if self.input_len >= self.long_len {
            return Err(Error::config("input length must be below the long length"));
        }
        self.optimizer.validate()
    }
}

fn check_layers(layers: &[usize], last: usize) -> Result<()> {
    if let Some(&bad) = layers.iter().find(|&&l| l > last) {
        return Err(Error::OutOfRange {
            context: "distill layer",
            index: bad,
            limit: last + 1,
        });
    }
    Ok(())
}

/// Picks the `m - 1` layers with the largest head-averaged attention KL divergence,
/// plus the last layer. The embedding output (layer 0) has no attention and counts
/// as zero divergence. Ties go to the lower index.
pub fn select_distill_layers<F: Real>(
    teacher: &DecoderModel<F>,
    student: &DecoderModel<F>,
    probe: &[Vec<usize>],
    m: usize,
) -> Result<Vec<usize>> {
    let last = teacher.config().layers;
    if m == 0 || m > last + 1 {
        return Err(Error::invalid(format!("distill count {m} must lie in 1..={}", last + 1)));
    }
    let len = probe.first().map_or(0, Vec::len);
    let report = drift_report(teacher, student, probe, &PositionPlan::contiguous(len))?;
    let kld = report.per_layer_kld();
    let mut ranked: Vec<(usize, f64)> = (0..last).map(|l| (l, if l == 0 { 0.0 } else { kld[l - 1] })).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = ranked.iter().take(m - 1).map(|&(l, _)| l).collect();
    out.push(last);
    out.sort_unstable();
    Ok(out)
}

fn flatten_batch(batch: &[Vec<usize>], len: usize, what: &str) -> Result<Vec<usize>> {
    if batch.is_empty() {
        return Err(Error::invalid(format!("empty {what} batch")));
    }
    if let Some(s) = batch.iter().find(|s| s.len() != len) {
        return Err(Error::shape(format!("{what} sequence of length {} where {len} was expected", s.len())));
    }
    Ok(batch.iter().flatten().copied().collect())
}

/// Next-token targets; the final position of each sequence has none.
fn next_token_targets(batch: &[Vec<usize>]) -> Vec<Option<usize>> {
    batch
        .iter()
        .flat_map(|s| s[1..].iter().map(|&t| Some(t)).chain(std::iter::once(None)))
        .collect()
}

/// Teacher hidden states at `layers`, stacked over the batch: one `[B*T, d_model]` tensor per layer.
fn teacher_hidden<F: Real>(
    teacher: &DecoderModel<F>,
    batch: &[Vec<usize>],
    plan: &PositionPlan,
    layers: &[usize],
) -> Result<Vec<Tensor<F>>> {
    let traces = batch_traces(
        teacher,
        batch,
        plan,
        Capture {
            hidden: true,
            attention: false,
        },
    )?;
    let d = teacher.config().d_model;
    layers
        .iter()
        .map(|&l| {
            let data: Vec<F> = traces.iter().flat_map(|t| t.hidden[l].data().iter().copied()).collect();
            Tensor::new(vec![data.len() / d, d], data)
        })
        .collect()
}

/// Mean next-token cross-entropy over a batch of sequences of length `len`,
/// at contiguous positions.
pub fn long_loss_graph<F: Real>(
    g: &mut Graph<F>,
    student: &DecoderModel<F>,
    vars: &[Var],
    batch: &[Vec<usize>],
    len: usize,
) -> Result<Var> {
    let tokens = flatten_batch(batch, len, "long")?;
    let fw = student.forward_graph(g, vars, &tokens, len, &[PositionPlan::contiguous(len)])?;
    g.masked_cross_entropy(fw.logits, &next_token_targets(batch))
}

/// Negative summed similarity of student and teacher hidden states at `layers`,
/// both at contiguous positions.
pub fn short_loss_graph<F: Real>(
    g: &mut Graph<F>,
    student: &DecoderModel<F>,
    vars: &[Var],
    teacher: &DecoderModel<F>,
    batch: &[Vec<usize>],
    layers: &[usize],
) -> Result<Var> {
    check_layers(layers, student.config().layers)?;
    let len = batch.first().map_or(0, Vec::len);
    let tokens = flatten_batch(batch, len, "short")?;
    let plan = PositionPlan::contiguous(len);
    let targets = teacher_hidden(teacher, batch, &plan, layers)?;
    let fw = student.forward_graph(g, vars, &tokens, len, std::slice::from_ref(&plan))?;
    let mut terms = Vec::with_capacity(layers.len());
    for (&l, t) in layers.iter().zip(targets) {
        let tv = g.constant(t);
        terms.push((g.row_cosine_mean(fw.hidden[l], tv)?, -F::one()));
    }
    Ok(g.weighted_sum(&terms))
}

/// Negative similarity of the last hidden state of the student at skipped
/// positions and the teacher at contiguous positions. `plans` holds one plan
/// shared by the batch or one per sequence.
pub fn s2l_loss_graph<F: Real>(
    g: &mut Graph<F>,
    student: &DecoderModel<F>,
    vars: &[Var],
    teacher: &DecoderModel<F>,
    batch: &[Vec<usize>],
    plans: &[PositionPlan],
) -> Result<Var> {
    let len = batch.first().map_or(0, Vec::len);
    let tokens = flatten_batch(batch, len, "short-to-long")?;
    if let Some(p) = plans.iter().find(|p| p.len() != len) {
        return Err(Error::shape(format!("plan length {} != input length {len}", p.len())));
    }
    let last = student.config().layers;
    let target = teacher_hidden(teacher, batch, &PositionPlan::contiguous(len), &[last])?.remove(0);
    let fw = student.forward_graph(g, vars, &tokens, len, plans)?;
    let tv = g.constant(target);
    let sim = g.row_cosine_mean(fw.hidden[last], tv)?;
    Ok(g.scale(sim, -F::one()))
}

pub fn loss_long<F: Real>(student: &DecoderModel<F>, batch: &[Vec<usize>], len: usize) -> Result<f64> {
    let mut g = Graph::new();
    let vars = student.register(&mut g, false);
    let v = long_loss_graph(&mut g, student, &vars, batch, len)?;
    Ok(g.scalar(v).f64())
}

pub fn loss_short<F: Real>(
    student: &DecoderModel<F>,
    teacher: &DecoderModel<F>,
    batch: &[Vec<usize>],
    layers: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = student.register(&mut g, false);
    let v = short_loss_graph(&mut g, student, &vars, teacher, batch, layers)?;
    Ok(g.scalar(v).f64())
}

pub fn loss_s2l<F: Real>(
    student: &DecoderModel<F>,
    teacher: &DecoderModel<F>,
    batch: &[Vec<usize>],
    plans: &[PositionPlan],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = student.register(&mut g, false);
    let v = s2l_loss_graph(&mut g, student, &vars, teacher, batch, plans)?;
    Ok(g.scalar(v).f64())
}

/// Adam with decoupled weight decay. Decay applies to matrices only, not to
/// normalization gains.
#[derive(Clone, Debug)]
pub struct AdamW<F: Real> {
    pub config: OptimizerConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: OptimizerConfig, model: &DecoderModel<F>) -> Self {
        AdamW {
            config,
            m: model.params().iter().map(|p| vec![F::zero(); p.len()]).collect(),
            v: model.params().iter().map(|p| vec![F::zero(); p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies the accumulated gradients, then clears them. Returns the
    /// global gradient norm before clipping.
    pub fn step(&mut self, model: &mut DecoderModel<F>) -> Result<f64> {
        let c = &self.config;
        let params = model.params_mut()?;
        let norm = params
            .iter()
            .filter_map(|p| p.grad())
            .flatten()
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let clip = match c.grad_clip {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one, eps, clip) = (F::one(), F::of(c.eps), F::of(clip));
        let step = F::of(c.lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = p.take_grad() else { continue };
            let decay = if p.shape().len() >= 2 {
                F::of(1.0 - c.lr * c.weight_decay)
            } else {
                one
            };
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = *g * clip;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w * decay - step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

/// One line of the training metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_long: f64,
    /// Absent when its weight is zero and the term was not computed.
    pub loss_short: Option<f64>,
    pub loss_s2l: Option<f64>,
    pub loss_final: f64,
    pub grad_norm: f64,
    /// Cumulative tokens drawn from D1, D2, D3.
    pub tokens_seen: [usize; 3],
    /// Excluded from the stream so reruns are byte-identical.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Student, frozen teacher, optimizer state and the fixed distillation layers.
pub struct Trainer<F: Real> {
    pub student: DecoderModel<F>,
    pub teacher: DecoderModel<F>,
    pub plan: TrainPlan,
    pub skip: SkipConfig,
    pub layers: Vec<usize>,
    pub optimizer: AdamW<F>,
    step: usize,
    tokens_seen: [usize; 3],
}

impl<F: Real> Trainer<F> {
    /// `teacher` is frozen here. When the plan lists no distillation layers they
    /// are selected once on `probe`.
    pub fn new(
        student: DecoderModel<F>,
        mut teacher: DecoderModel<F>,
        plan: TrainPlan,
        skip: SkipConfig,
        probe: &[Vec<usize>],
    ) -> Result<Self> {
        let plan = plan.effective();
        let layers_n = student.config().layers;
        plan.validate(layers_n)?;
        skip.validate()?;
        if skip.input_len != plan.input_len || skip.target_len != plan.long_len {
            return Err(Error::config(format!(
                "skip lengths ({}, {}) disagree with train lengths (T={}, T_l={})",
                skip.input_len, skip.target_len, plan.input_len, plan.long_len
            )));
        }
        if plan.long_len > student.config().context {
            return Err(Error::config(format!(
                "long length {} exceeds the student window {}",
                plan.long_len,
                student.config().context
            )));
        }
        teacher.freeze();
        let layers = match (&plan.distill_layers, plan.alpha1 > 0.0) {
            (Some(l), _) => l.clone(),
            (None, true) => select_distill_layers(&teacher, &student, probe, plan.distill_count)?,
            (None, false) => vec![layers_n],
        };
        let optimizer = AdamW::new(plan.optimizer.clone(), &student);
        Ok(Trainer {
            student,
            teacher,
            plan,
            skip,
            layers,
            optimizer,
            step: 0,
            tokens_seen: [0; 3],
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Combines the step's losses in one graph, back-propagates once and applies
    /// one optimizer update. A non-finite loss aborts before any update.
    pub fn step<R: Rng + ?Sized>(&mut self, batches: &Batches, rng: &mut R) -> Result<StepRecord> {
        let start = Instant::now();
        let p = &self.plan;
        let mut g = Graph::new();
        let vars = self.student.register(&mut g, true);

        let (long, terms_long) = match p.objective {
            Objective::CptMix => {
                // language modelling on every non-empty batch, weighted by predicted tokens
                let mut parts = Vec::new();
                for (b, len) in [(&batches.long, p.long_len), (&batches.short, p.short_len), (&batches.s2l, p.input_len)] {
                    if !b.is_empty() {
                        let v = long_loss_graph(&mut g, &self.student, &vars, b, len)?;
                        parts.push((v, (b.len() * (len - 1)) as f64));
                    }
                }
                let total: f64 = parts.iter().map(|x| x.1).sum();
                let weighted: Vec<(Var, F)> = parts.iter().map(|&(v, w)| (v, F::of(w / total))).collect();
                let v = g.weighted_sum(&weighted);
                (v, vec![(v, F::one())])
            }
            _ => {
                let v = long_loss_graph(&mut g, &self.student, &vars, &batches.long, p.long_len)?;
                (v, vec![(v, F::one())])
            }
        };
        let mut terms = terms_long;
        let mut short = None;
        if p.alpha1 > 0.0 && !batches.short.is_empty() {
            let v = short_loss_graph(&mut g, &self.student, &vars, &self.teacher, &batches.short, &self.layers)?;
            terms.push((v, F::of(p.alpha1)));
            short = Some(v);
        }
        let mut s2l = None;
        if p.alpha2 > 0.0 && !batches.s2l.is_empty() {
            let plans = batches
                .s2l
                .iter()
                .map(|_| sample_plan(&self.skip, rng).map(|d| d.plan))
                .collect::<Result<Vec<_>>>()?;
            let v = s2l_loss_graph(&mut g, &self.student, &vars, &self.teacher, &batches.s2l, &plans)?;
            terms.push((v, F::of(p.alpha2)));
            s2l = Some(v);
        }
        let root = if terms.len() == 1 { terms[0].0 } else { g.weighted_sum(&terms) };

        let loss_long = g.scalar(long).f64();
        let loss_short = short.map(|v| g.scalar(v).f64());
        let loss_s2l = s2l.map(|v| g.scalar(v).f64());
        for (name, x) in [("loss_long", Some(loss_long)), ("loss_short", loss_short), ("loss_s2l", loss_s2l)] {
            if x.is_some_and(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        // recombined in f64 so the record satisfies the additivity identity exactly
        let loss_final = loss_long + p.alpha1 * loss_short.unwrap_or(0.0) + p.alpha2 * loss_s2l.unwrap_or(0.0);

        let grads = g.backward(root)?;
        self.student.zero_grad();
        self.student.accumulate_grads(&grads, &vars)?;
        let grad_norm = self.optimizer.step(&mut self.student)?;

        self.step += 1;
        for (seen, n) in self.tokens_seen.iter_mut().zip(batches.tokens()) {
            *seen += n;
        }
        Ok(StepRecord {
            step: self.step,
            loss_long,
            loss_short,
            loss_s2l,
            loss_final,
            grad_norm,
            tokens_seen: self.tokens_seen,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }
}
