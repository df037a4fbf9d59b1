//! Small closed-form models for tests and calibration.

use super::model::LanguageModel;
use crate::error::{Error, Result};

/// Equal logits for every token.
#[derive(Debug, Clone, Copy)]
pub struct UniformModel {
    pub vocab: usize,
    pub max_len: usize,
}

impl LanguageModel for UniformModel {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        Ok(vec![0.0; tokens.len() * self.vocab])
    }
}

/// Logits that depend only on the previous token: row `a` of `table` holds
/// the logits after `a`.
#[derive(Debug, Clone)]
pub struct BigramModel {
    pub vocab: usize,
    pub max_len: usize,
    pub table: Vec<f64>,
}

impl BigramModel {
    pub fn new(vocab: usize, max_len: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != vocab * vocab {
            return Err(Error::Shape {
                op: "bigram table",
                lhs: vec![table.len()],
                rhs: vec![vocab, vocab],
            });
        }
        Ok(Self {
            vocab,
            max_len,
            table,
        })
    }

    /// Maximum-likelihood bigram estimate with add-`alpha` smoothing, stored
    /// as log-probabilities.
    pub fn fit(vocab: usize, max_len: usize, tokens: &[u32], alpha: f64) -> Self {
        let mut counts = vec![alpha; vocab * vocab];
        for w in tokens.windows(2) {
            counts[w[0] as usize * vocab + w[1] as usize] += 1.0;
        }
        for row in counts.chunks_mut(vocab) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|c| *c = (*c / total).ln());
        }
        Self {
            vocab,
            max_len,
            table: counts,
        }
    }
}

impl LanguageModel for BigramModel {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let v = self.vocab;
        let mut out = Vec::with_capacity(tokens.len() * v);
        for &t in tokens {
            let t = t as usize;
            if t >= v {
                return Err(Error::Index {
                    what: "token vocabulary",
                    index: t,
                    bound: v,
                });
            }
            out.extend_from_slice(&self.table[t * v..(t + 1) * v]);
        }
        Ok(out)
    }
}
