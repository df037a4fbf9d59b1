use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Transformer};
use crate::tensor::{log_sum_exp, Scalar, Tape};

/// Anything that yields next-token logits for a token sequence.
pub trait LanguageModel: Sync {
    fn vocab(&self) -> usize;

    /// Longest sequence accepted by [`LanguageModel::logits`].
    fn max_len(&self) -> usize;

    /// Row-major `[tokens.len() × vocab]` logits; row `i` scores the token
    /// following `tokens[..=i]`.
    fn logits(&self, tokens: &[u32]) -> Result<Vec<f64>>;
}

impl<T: Scalar> LanguageModel for Transformer<T> {
    fn vocab(&self) -> usize {
        self.config().vocab
    }

    fn max_len(&self) -> usize {
        self.config().seq_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, tokens, 1, ForwardOptions::eval())?;
        Ok(tape.value(out.logits).to_f64_vec())
    }
}

/// Log-probability of every token of `seq` after the first, each
/// conditioned on all tokens before it.
pub fn sequence_log_probs<M: LanguageModel + ?Sized>(model: &M, seq: &[u32]) -> Result<Vec<f64>> {
    if seq.len() < 2 {
        return Ok(Vec::new());
    }
    if seq.len() - 1 > model.max_len() {
        return Err(Error::Index {
            what: "sequence length",
            index: seq.len() - 1,
            bound: model.max_len(),
        });
    }
    let v = model.vocab();
    let logits = model.logits(&seq[..seq.len() - 1])?;
    Ok(seq[1..]
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = &logits[i * v..(i + 1) * v];
            row[t as usize] - log_sum_exp(row)
        })
        .collect())
}

/// Log-probabilities of the tokens of `continuation` given `context`. When
/// the pair is longer than the model accepts, the oldest context tokens are
/// dropped.
pub fn continuation_log_probs<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[u32],
    continuation: &[u32],
) -> Result<Vec<f64>> {
    if context.is_empty() {
        return Err(Error::config("scoring needs a non-empty context"));
    }
    if continuation.is_empty() {
        return Ok(Vec::new());
    }
    let budget = model.max_len() + 1;
    if continuation.len() >= budget {
        return Err(Error::Index {
            what: "continuation length",
            index: continuation.len(),
            bound: budget - 1,
        });
    }
    let keep = context.len().min(budget - continuation.len());
    let mut seq = context[context.len() - keep..].to_vec();
    seq.extend_from_slice(continuation);
    let lp = sequence_log_probs(model, &seq)?;
    Ok(lp[lp.len() - continuation.len()..].to_vec())
}
