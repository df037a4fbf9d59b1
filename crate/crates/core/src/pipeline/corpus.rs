use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

/// Splits text into documents at blank lines.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur.join("\n"));
    }
    docs
}

/// Reads a UTF-8 text file, or every `.txt` file of a directory in name
/// order, into documents.
pub fn load_documents(path: &Path) -> Result<Vec<String>> {
    let files = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut docs = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        docs.extend(split_documents(&text));
    }
    Ok(docs)
}

/// Tokenizes documents and joins them with the tokenizer's separator.
pub fn tokenize_documents(docs: &[String], tok: &Tokenizer) -> Vec<u32> {
    let sep = tok.separator();
    let mut out = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            out.extend_from_slice(&sep);
        }
        out.extend(tok.encode_str(d));
    }
    out
}

/// Perplexity of `eval` under the add-one-smoothed unigram distribution of
/// `train`.
pub fn unigram_perplexity(train: &[u32], eval: &[u32], vocab: usize) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::config("empty evaluation stream"));
    }
    let mut counts = vec![1.0f64; vocab];
    for &t in train {
        counts[t as usize] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let nll: f64 = eval
        .iter()
        .map(|&t| -(counts[t as usize] / total).ln())
        .sum();
    Ok((nll / eval.len() as f64).exp())
}

/// One training batch: `batch` rows of `seq` inputs with next-token targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

/// Deterministic batch source. The stream is cut into contiguous windows of
/// `seq + 1` tokens; each epoch visits the windows in a seed-determined
/// order, and the batch for a step depends only on the step index.
#[derive(Debug, Clone)]
pub struct Batcher {
    windows: Vec<Vec<u32>>,
    seq: usize,
    batch: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(tokens: &[u32], seq: usize, batch_tokens: usize, seed: u64) -> Result<Self> {
        if seq == 0 || batch_tokens == 0 || !batch_tokens.is_multiple_of(seq) {
            return Err(Error::config(format!(
                "batch_tokens {batch_tokens} must be a positive multiple of seq_len {seq}"
            )));
        }
        if tokens.len() < seq + 1 {
            return Err(Error::config(format!(
                "corpus has {} tokens, needs at least {}",
                tokens.len(),
                seq + 1
            )));
        }
        let windows = tokens.chunks_exact(seq + 1).map(<[u32]>::to_vec).collect();
        Ok(Self {
            windows,
            seq,
            batch: batch_tokens / seq,
            seed,
        })
    }

    pub fn windows(&self) -> usize {
        self.windows.len()
    }

    /// Window order of `epoch`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.windows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    pub fn batch(&self, step: u64) -> Batch {
        let n = self.windows.len() as u64;
        let mut inputs = Vec::with_capacity(self.batch * self.seq);
        let mut targets = Vec::with_capacity(self.batch * self.seq);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for j in 0..self.batch as u64 {
            let k = step * self.batch as u64 + j;
            let epoch = k / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.epoch_order(epoch)));
            }
            let w = &self.windows[cached.as_ref().unwrap().1[(k % n) as usize]];
            inputs.extend_from_slice(&w[..self.seq]);
            targets.extend(w[1..].iter().map(|&t| t as usize));
        }
        Batch {
            inputs,
            targets,
            batch: self.batch,
            seq: self.seq,
        }
    }
}
