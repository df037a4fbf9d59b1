use serde::{Deserialize, Serialize};

use super::model::{sequence_log_probs, LanguageModel};
use crate::error::{Error, Result};
use crate::tensor::kernels::map_indexed;
use crate::tensor::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub perplexity: f64,
    /// Summed negative log-likelihood in nats.
    pub nll: f64,
    /// Number of scored next-token predictions.
    pub predicted: usize,
    pub blocks: usize,
}

/// Joins documents into one stream with `separator` between neighbours.
pub fn concat_documents(docs: &[Vec<u32>], separator: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            out.extend_from_slice(separator);
        }
        out.extend_from_slice(d);
    }
    out
}

/// Perplexity of the concatenated documents, cut into non-overlapping
/// blocks of `block_size` tokens that are scored independently. The first
/// token of each block is context only; a trailing partial block is scored.
pub fn perplexity<M: LanguageModel + ?Sized>(
    model: &M,
    docs: &[Vec<u32>],
    separator: &[u32],
    block_size: usize,
) -> Result<PerplexityReport> {
    if block_size < 2 {
        return Err(Error::config(format!(
            "block size {block_size} must be at least 2"
        )));
    }
    if block_size > model.max_len() + 1 {
        return Err(Error::config(format!(
            "block size {block_size} exceeds model context {}",
            model.max_len()
        )));
    }
    let stream = concat_documents(docs, separator);
    if stream.len() < 2 {
        return Err(Error::config("corpus is empty after tokenization"));
    }
    let blocks: Vec<&[u32]> = stream.chunks(block_size).collect();
    let scored = map_indexed(Exec::current(), blocks.len(), |i| {
        sequence_log_probs(model, blocks[i])
    });
    let mut nll = 0.0;
    let mut predicted = 0;
    for lp in scored {
        let lp = lp?;
        predicted += lp.len();
        nll -= lp.iter().sum::<f64>();
    }
    Ok(PerplexityReport {
        perplexity: (nll / predicted as f64).exp(),
        nll,
        predicted,
        blocks: blocks.len(),
    })
}
