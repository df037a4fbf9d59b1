use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scoring::{argmax, PromptTask};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Mode, ParamStore, Routing, Transformer};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of the data held out when no validation set is given.
    pub val_fraction: f64,
    pub head_init_std: f64,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr: 1e-4,
            batch_size: 8,
            seed: 0,
            val_fraction: 0.2,
            head_init_std: 0.02,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Classifier weights `W_y` (length `hidden`) of the selected epoch.
    pub head: Vec<f64>,
    pub initial_val_accuracy: f64,
    /// Validation accuracy after each epoch (index 0 is epoch 1).
    pub epoch_val_accuracy: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub train_size: usize,
    pub val_size: usize,
}

/// Per-candidate classifier logits: `W_y` applied to the final-block
/// representation of the last token of context + candidate.
fn candidate_logits<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Transformer<T>,
    task: &PromptTask,
    head: Var,
    trainable: bool,
) -> Result<Var> {
    let max = model.config().seq_len;
    let mut reps = Vec::with_capacity(task.candidates.len());
    for cand in &task.candidates {
        let mut seq = task.context.clone();
        seq.extend_from_slice(cand);
        let seq = &seq[seq.len().saturating_sub(max)..];
        let opts = ForwardOptions {
            mode: Mode::Eval,
            rng: None,
            routing: Routing::Compute,
            trainable,
        };
        let out = model.forward(tape, seq, 1, opts)?;
        reps.push(tape.gather_rows(out.final_hidden, &[seq.len() - 1])?);
    }
    let reps = tape.concat_rows(&reps)?;
    let scores = tape.matmul(reps, head)?;
    tape.reshape(scores, &[1, task.candidates.len()])
}

fn accuracy<T: Scalar>(
    model: &Transformer<T>,
    head: &Tensor<T>,
    tasks: &[PromptTask],
) -> Result<f64> {
    let mut correct = 0;
    for task in tasks {
        let mut tape = Tape::new();
        let h = tape.constant(head.clone());
        let logits = candidate_logits(&mut tape, model, task, h, false)?;
        if argmax(&tape.value(logits).to_f64_vec()) == task.gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / tasks.len() as f64)
}

/// Trains all model parameters plus a linear candidate head with a softmax
/// over candidates. Without a validation set, `val_fraction` of `data` is
/// held out. The model is left at the epoch with the best validation
/// accuracy (earliest on ties).
pub fn finetune_classifier<T: Scalar>(
    model: &mut Transformer<T>,
    data: &[PromptTask],
    validation: Option<&[PromptTask]>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("epochs and batch_size must be positive"));
    }
    for t in data.iter().chain(validation.unwrap_or_default()) {
        t.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, val): (Vec<PromptTask>, Vec<PromptTask>) = match validation {
        Some(v) => (data.to_vec(), v.to_vec()),
        None => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            let n_val = (data.len() as f64 * cfg.val_fraction).round() as usize;
            let (v, t) = idx.split_at(n_val);
            (
                t.iter().map(|&i| data[i].clone()).collect(),
                v.iter().map(|&i| data[i].clone()).collect(),
            )
        }
    };
    if train.is_empty() || val.is_empty() {
        return Err(Error::config(format!(
            "empty split: {} training and {} validation examples",
            train.len(),
            val.len()
        )));
    }

    let hidden = model.config().hidden;
    let normal = Normal::new(0.0, cfg.head_init_std).map_err(|e| Error::config(e.to_string()))?;
    let init: Vec<f64> = (0..hidden).map(|_| normal.sample(&mut rng)).collect();
    let mut head_store = ParamStore::new();
    let head_id = head_store.insert("head.weight", Tensor::from_f64(vec![hidden, 1], &init)?)?;
    let mut model_opt = Adam::new(cfg.adam, model.params());
    let mut head_opt = Adam::new(cfg.adam, &head_store);

    let initial = accuracy(model, &head_store.get(head_id).value, &val)?;
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut snapshot = (model.params().clone(), head_store.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            model.params_mut().zero_grad();
            head_store.zero_grad();
            for &i in batch {
                let mut tape = Tape::new();
                let head_value = head_store.get(head_id).value.clone();
                let head = tape.leaf(head_value, true);
                let logits = candidate_logits(&mut tape, model, &train[i], head, true)?;
                let loss = tape.cross_entropy(logits, &[train[i].gold])?;
                let loss = tape.scale(loss, 1.0 / batch.len() as f64)?;
                tape.backward(loss)?;
                model.params_mut().accumulate_from(&tape)?;
                if let Some(g) = tape.grad(head) {
                    head_store.get_mut(head_id).grad.add_assign(g)?;
                }
            }
            model_opt.step(model.params_mut(), cfg.lr)?;
            head_opt.step(&mut head_store, cfg.lr)?;
        }
        let acc = accuracy(model, &head_store.get(head_id).value, &val)?;
        history.push(acc);
        if acc > best.1 {
            best = (epoch, acc);
            snapshot = (model.params().clone(), head_store.clone());
        }
    }
    let (params, head_store) = snapshot;
    *model.params_mut() = params;
    Ok(FinetuneReport {
        head: head_store.get(head_id).value.to_f64_vec(),
        initial_val_accuracy: initial,
        epoch_val_accuracy: history,
        best_epoch: best.0,
        best_val_accuracy: best.1,
        train_size: train.len(),
        val_size: val.len(),
    })
}
