//! Discrepancy between two models on shared inputs: per-layer hidden-state
//! cosine similarity, per-head attention KL divergence, and positional vectors.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{extract_traces, Capture, DecoderModel, LayerTrace, PositionPlan};
use crate::tensor::{Graph, Real, Tensor};

/// Floor applied to the reference probability before taking the log.
pub const KL_FLOOR: f64 = 1e-12;

/// Rows must sum to one within this tolerance to enter the KL divergence.
pub const ROW_SUM_TOL: f64 = 1e-4;

/// Sequences per forward pass when scanning a batch.
const CHUNK: usize = 8;

fn check_same_shape<F: Real>(a: &Tensor<F>, b: &Tensor<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::shape(format!(
            "{what}: expected matching matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean over positions of the cosine similarity between matching rows.
pub fn hidden_similarity<F: Real>(h: &Tensor<F>, h_hat: &Tensor<F>) -> Result<f64> {
    check_same_shape(h, h_hat, "hidden_similarity")?;
    let c = h.cols();
    let rows = h.rows();
    let mut total = 0.0;
    for (a, b) in h.data().chunks_exact(c).zip(h_hat.data().chunks_exact(c)) {
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x.f64(), y.f64());
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNorm("hidden_similarity row"));
        }
        total += (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    }
    Ok(total / rows as f64)
}

/// Mean over query positions of `KL(a_t || a_hat_t)` restricted to the causal prefix.
pub fn attention_kld<F: Real>(a: &Tensor<F>, a_hat: &Tensor<F>) -> Result<f64> {
    check_same_shape(a, a_hat, "attention_kld")?;
    let t = a.rows();
    if a.cols() != t {
        return Err(Error::shape(format!("attention matrix must be square, got {:?}", a.shape())));
    }
    let mut total = 0.0;
    for r in 0..t {
        let (p, q) = (&a.row(r)[..=r], &a_hat.row(r)[..=r]);
        for row in [p, q] {
            let s: f64 = row.iter().map(|x| x.f64()).sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("attention row {r} sums to {s}, not 1")));
            }
        }
        for (&pi, &qi) in p.iter().zip(q) {
            let (pi, qi) = (pi.f64(), qi.f64());
            if pi > 0.0 {
                total += pi * (pi / qi.max(KL_FLOOR)).ln();
            }
        }
    }
    Ok(total / t as f64)
}

/// Per-layer similarity and per-layer, per-head KL divergence of a student against a teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// `layers + 1` values; entry 0 is the embedding output.
    pub per_layer_sim: Vec<f64>,
    /// `layers x heads`; row `l` belongs to transformer block `l + 1`.
    pub per_layer_head_kld: Vec<Vec<f64>>,
    pub sample_count: usize,
    pub sequence_length: usize,
}

/// One line of a serialized report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub sim: f64,
    /// Mean over heads; absent for the embedding layer.
    pub kld: Option<f64>,
    pub head_kld: Vec<f64>,
}

impl DriftReport {
    /// Head-averaged KL divergence per transformer block.
    pub fn per_layer_kld(&self) -> Vec<f64> {
        self.per_layer_head_kld
            .iter()
            .map(|h| h.iter().sum::<f64>() / h.len() as f64)
            .collect()
    }

    /// Similarity averaged over all `layers + 1` hidden states with equal weight.
    pub fn mean_sim(&self) -> f64 {
        self.per_layer_sim.iter().sum::<f64>() / self.per_layer_sim.len() as f64
    }

    /// KL divergence averaged over layers and heads.
    pub fn mean_kld(&self) -> f64 {
        let k = self.per_layer_kld();
        k.iter().sum::<f64>() / k.len() as f64
    }

    pub fn records(&self) -> Vec<LayerRecord> {
        self.per_layer_sim
            .iter()
            .enumerate()
            .map(|(l, &sim)| {
                let heads = if l == 0 { Vec::new() } else { self.per_layer_head_kld[l - 1].clone() };
                LayerRecord {
                    layer: l,
                    sim,
                    kld: (l > 0).then(|| heads.iter().sum::<f64>() / heads.len() as f64),
                    head_kld: heads,
                }
            })
            .collect()
    }

    /// Writes one JSON record per layer.
    pub fn write_records<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in self.records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn check_batch(batch: &[Vec<usize>]) -> Result<usize> {
    let t = batch
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("empty batch"))?;
    if t == 0 || batch.iter().any(|s| s.len() != t) {
        return Err(Error::shape("batch sequences must share one non-zero length"));
    }
    Ok(t)
}

/// Traces of every sequence in `batch`, computed a few sequences per forward pass.
pub fn batch_traces<F: Real>(
    model: &DecoderModel<F>,
    batch: &[Vec<usize>],
    plan: &PositionPlan,
    capture: Capture,
) -> Result<Vec<LayerTrace<F>>> {
    let t = check_batch(batch)?;
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(CHUNK) {
        let tokens: Vec<usize> = chunk.iter().flatten().copied().collect();
        let mut g = Graph::new();
        let vars = model.register(&mut g, false);
        let fw = model.forward_graph(&mut g, &vars, &tokens, t, std::slice::from_ref(plan))?;
        out.extend(extract_traces(&g, &fw, chunk.len(), t, capture));
    }
    Ok(out)
}

/// Averages similarity and KL divergence over a batch; both models see the same
/// tokens and the same positional plan.
pub fn drift_report<F: Real>(
    teacher: &DecoderModel<F>,
    student: &DecoderModel<F>,
    batch: &[Vec<usize>],
    plan: &PositionPlan,
) -> Result<DriftReport> {
    let (tc, sc) = (teacher.config(), student.config());
    if tc.layers != sc.layers || tc.heads != sc.heads || tc.vocab != sc.vocab || tc.d_model != sc.d_model {
        return Err(Error::config(format!(
            "models not comparable: teacher (L={}, N={}, V={}, d={}) vs student (L={}, N={}, V={}, d={})",
            tc.layers, tc.heads, tc.vocab, tc.d_model, sc.layers, sc.heads, sc.vocab, sc.d_model
        )));
    }
    let t = check_batch(batch)?;
    let mut sims = vec![0.0; tc.layers + 1];
    let mut klds = vec![vec![0.0; tc.heads]; tc.layers];
    for chunk in batch.chunks(CHUNK) {
        let ta = batch_traces(teacher, chunk, plan, Capture::ALL)?;
        let sa = batch_traces(student, chunk, plan, Capture::ALL)?;
        for (tt, st) in ta.iter().zip(&sa) {
            for (l, (h, hh)) in tt.hidden.iter().zip(&st.hidden).enumerate() {
                sims[l] += hidden_similarity(h, hh)?;
            }
            for (l, (heads_t, heads_s)) in tt.attention.iter().zip(&st.attention).enumerate() {
                for (h, (a, ah)) in heads_t.iter().zip(heads_s).enumerate() {
                    // KL(original || extended)
                    klds[l][h] += attention_kld(a, ah)?;
                }
            }
        }
    }
    let n = batch.len() as f64;
    sims.iter_mut().for_each(|s| *s /= n);
    klds.iter_mut().flatten().for_each(|k| *k /= n);
    Ok(DriftReport {
        per_layer_sim: sims,
        per_layer_head_kld: klds,
        sample_count: batch.len(),
        sequence_length: t,
    })
}

/// Mean hidden state at each position, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalVectorSet {
    /// `layers + 1` tensors `[T, d_model]`.
    pub vectors: Vec<Tensor<f64>>,
    pub sample_count: usize,
}

pub fn positional_vectors<F: Real>(
    model: &DecoderModel<F>,
    batch: &[Vec<usize>],
    plan: &PositionPlan,
) -> Result<PositionalVectorSet> {
    check_batch(batch)?;
    let traces = batch_traces(
        model,
        batch,
        plan,
        Capture {
            hidden: true,
            attention: false,
        },
    )?;
    let layers = model.config().layers + 1;
    let mut sums: Vec<Vec<f64>> = traces[0].hidden.iter().map(|h| vec![0.0; h.len()]).collect();
    for tr in &traces {
        for (acc, h) in sums.iter_mut().zip(&tr.hidden) {
            acc.iter_mut().zip(h.data()).for_each(|(a, &x)| *a += x.f64());
        }
    }
    let n = batch.len() as f64;
    let shape = traces[0].hidden[0].shape().to_vec();
    let vectors = sums
        .into_iter()
        .take(layers)
        .map(|s| Tensor::new(shape.clone(), s.into_iter().map(|x| x / n).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(PositionalVectorSet {
        vectors,
        sample_count: batch.len(),
    })
}

/// Cosine similarity between the positional vectors of every pair of positions at one layer.
pub fn posvec_similarity_matrix(set: &PositionalVectorSet, layer: usize) -> Result<Tensor<f64>> {
    let v = set.vectors.get(layer).ok_or(Error::OutOfRange {
        context: "positional vector layer",
        index: layer,
        limit: set.vectors.len(),
    })?;
    let t = v.rows();
    let norms: Vec<f64> = (0..t).map(|i| v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::ZeroNorm("positional vector"));
    }
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        out[i * t + i] = 1.0;
        for j in 0..i {
            let dot: f64 = v.row(i).iter().zip(v.row(j)).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[i * t + j] = c;
            out[j * t + i] = c;
        }
    }
    Tensor::new(vec![t, t], out)
}
