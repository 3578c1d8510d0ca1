//! Held-out perplexity and key/value recall accuracy.

use crate::corpus::RecallDoc;
use crate::error::{Error, Result};
use crate::model::{DecoderModel, PositionPlan};
use crate::tensor::{Graph, Real};

const CHUNK: usize = 8;

/// `exp` of the mean next-token cross-entropy over all sequences.
pub fn perplexity<F: Real>(model: &DecoderModel<F>, batch: &[Vec<usize>]) -> Result<f64> {
    let len = batch.first().map_or(0, Vec::len);
    if len < 2 {
        return Err(Error::invalid("perplexity needs sequences of at least two tokens"));
    }
    let mut total = 0.0;
    for chunk in batch.chunks(CHUNK) {
        total += crate::trainer::loss_long(model, chunk, len)? * chunk.len() as f64;
    }
    Ok((total / batch.len() as f64).exp())
}

/// Fraction of recalled value tokens predicted exactly by greedy next-token choice.
pub fn recall_accuracy<F: Real>(model: &DecoderModel<F>, docs: &[RecallDoc]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    let vocab = model.config().vocab;
    for doc in docs {
        let tokens: Vec<usize> = doc.text.iter().map(|&b| b as usize).collect();
        let mut g = Graph::new();
        let vars = model.register(&mut g, false);
        let fw = model.forward_graph(&mut g, &vars, &tokens, tokens.len(), &[PositionPlan::contiguous(tokens.len())])?;
        let logits = g.value(fw.logits);
        for r in &doc.targets {
            for pos in r.clone() {
                if pos == 0 {
                    continue;
                }
                let row = &logits[(pos - 1) * vocab..pos * vocab];
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i);
                hit += (best == Some(tokens[pos])) as usize;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("no recall targets"));
    }
    Ok(hit as f64 / total as f64)
}
