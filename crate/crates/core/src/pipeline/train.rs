use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{write_atomic, Checkpoint, RngState};
use super::config::RunConfig;
use super::corpus::{load_documents, tokenize_documents, unigram_perplexity, Batcher};
use super::tokenizer::Tokenizer;
use crate::distill::{distill_loss, DistillConfig};
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::flops::{train_flops, CostSpec, ZFLOP};
use crate::model::{ForwardOptions, Transformer};
use crate::optim::{clip_grad_norm, rescale_expert_gradients, Adam};
use crate::tensor::{Scalar, Tape};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVALS_FILE: &str = "evals.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOCK_FILE: &str = ".lock";

/// What the student minimizes.
pub enum Objective<'a, T> {
    LanguageModel,
    Distill {
        teacher: &'a Transformer<T>,
        config: DistillConfig,
    },
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub lr: f64,
    pub loss: f64,
    pub gate_loss: f64,
    pub overflow_fraction: f64,
}

/// One line of `evals.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub val_ppl: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub tokens_seen: u64,
    pub final_loss: f64,
    pub val_ppl: f64,
    pub unigram_ppl: f64,
    pub params: u64,
    pub experts: usize,
    /// Analytic training cost of the tokens seen.
    pub zflops: f64,
    pub wall_seconds: f64,
}

pub struct RunOutcome<T> {
    pub model: Transformer<T>,
    pub summary: RunSummary,
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Refused(format!(
                    "{} is in use by another run (remove {} if it is stale)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Tokenized training and validation streams.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub tokenizer: Tokenizer,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
}

pub fn load_tokenizer(cfg: &RunConfig) -> Result<Tokenizer> {
    match &cfg.tokenizer {
        Some(p) => Tokenizer::from_merges_file(p),
        None => Ok(Tokenizer::byte_level()),
    }
}

/// Loads and tokenizes the corpus. Without a validation corpus the last
/// `val_fraction` of the token stream is held out.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let tokenizer = load_tokenizer(cfg)?;
    if tokenizer.vocab_size() != cfg.model.vocab {
        return Err(Error::config(format!(
            "model vocab {} differs from tokenizer vocab {}",
            cfg.model.vocab,
            tokenizer.vocab_size()
        )));
    }
    let docs = load_documents(&cfg.corpus)?;
    let mut train = tokenize_documents(&docs, &tokenizer);
    let val = match &cfg.val_corpus {
        Some(p) => tokenize_documents(&load_documents(p)?, &tokenizer),
        None => {
            let n_val = ((train.len() as f64) * cfg.val_fraction).ceil() as usize;
            train.split_off(train.len().saturating_sub(n_val))
        }
    };
    if val.len() < 2 {
        return Err(Error::config("validation split has fewer than 2 tokens"));
    }
    Ok(PreparedData {
        tokenizer,
        train,
        val,
    })
}

/// Validation perplexity over at most `cfg.eval_max_blocks` blocks.
pub fn validation_perplexity<T: Scalar>(
    model: &Transformer<T>,
    cfg: &RunConfig,
    val: &[u32],
) -> Result<f64> {
    let block = model.config().seq_len + 1;
    let take = val.len().min(block * cfg.eval_max_blocks);
    Ok(perplexity(model, &[val[..take].to_vec()], &[], block)?.perplexity)
}

/// Rebuilds a model from a checkpoint's parameters and embedded config.
pub fn load_model<T: Scalar>(path: &Path) -> Result<Transformer<T>> {
    let ck = Checkpoint::<T>::load(path)?;
    let cfg = RunConfig::from_kv(&ck.config, path)?;
    Transformer::from_params(cfg.model, ck.params)
}

fn check_resume_compatible(current: &RunConfig, saved: &RunConfig) -> Result<()> {
    let same = current.model == saved.model
        && current.seed == saved.seed
        && current.batch_tokens == saved.batch_tokens
        && current.total_tokens == saved.total_tokens
        && current.peak_lr == saved.peak_lr
        && current.warmup_tokens == saved.warmup_tokens
        && current.adam == saved.adam
        && current.grad_clip == saved.grad_clip
        && current.precision == saved.precision;
    if same {
        Ok(())
    } else {
        Err(Error::config(
            "resume config differs from the checkpoint in model, data order, optimizer or schedule settings",
        ))
    }
}

/// Keeps the records of `path` whose `step` is at most `max_step`.
fn truncate_records(path: &Path, max_step: u64) -> Result<()> {
    let Ok(file) = File::open(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let step = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v.get("step").and_then(|s| s.as_u64()));
        if step.is_some_and(|s| s <= max_step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn append_line<S: Serialize>(file: &mut File, path: &Path, record: &S) -> Result<()> {
    let line = serde_json::to_string(record)?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

/// Seed of the dropout/jitter generator, kept apart from the init stream.
fn noise_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Runs (or resumes) a training run as configured, writing metrics,
/// evaluations, checkpoints and a summary into `cfg.out_dir`.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    objective: Objective<'_, T>,
    resume: Option<&Path>,
) -> Result<RunOutcome<T>> {
    let started = Instant::now();
    cfg.validate()?;
    if let Objective::Distill { teacher, config } = &objective {
        config.validate()?;
        let t = teacher.config();
        if t.vocab != cfg.model.vocab || t.seq_len < cfg.model.seq_len {
            return Err(Error::config(
                "teacher must share the student vocabulary and accept its sequence length",
            ));
        }
    }
    let _lock = RunLock::acquire(&cfg.out_dir)?;
    let data = prepare_data(cfg)?;
    let batcher = Batcher::new(
        &data.train,
        cfg.model.seq_len,
        cfg.batch_tokens as usize,
        cfg.seed,
    )?;
    let unigram_ppl = unigram_perplexity(&data.train, &data.val, cfg.model.vocab)?;
    let schedule = cfg.schedule()?;

    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let evals_path = cfg.out_dir.join(EVALS_FILE);
    let ckpt_path = cfg.out_dir.join(CHECKPOINT_FILE);

    let (mut model, mut opt, mut step, mut tokens_seen, mut rng) = match resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            check_resume_compatible(cfg, &RunConfig::from_kv(&ck.config, path)?)?;
            let model = Transformer::from_params(cfg.model.clone(), ck.params)?;
            truncate_records(&metrics_path, ck.step)?;
            truncate_records(&evals_path, ck.step)?;
            (
                model,
                ck.optimizer,
                ck.step,
                ck.tokens_seen,
                ck.rng.restore(),
            )
        }
        None => {
            let model = Transformer::<T>::new(cfg.model.clone(), cfg.seed)?;
            let opt = Adam::new(cfg.adam, model.params());
            for p in [&metrics_path, &evals_path] {
                File::create(p).map_err(|e| Error::io(p, e))?;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(cfg.seed));
            rng.set_stream(1);
            (model, opt, 0, 0, rng)
        }
    };
    let open_append = |p: &Path| {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|e| Error::io(p, e))
    };
    let mut metrics = open_append(&metrics_path)?;
    let mut evals = open_append(&evals_path)?;

    let save =
        |model: &Transformer<T>, opt: &Adam<T>, step: u64, tokens_seen: u64, rng: &ChaCha8Rng| {
            Checkpoint {
                config: cfg.to_kv(),
                tokens_seen,
                step,
                rng: RngState::capture(noise_seed(cfg.seed), rng),
                params: model.params().clone(),
                optimizer: opt.clone(),
            }
            .save(&ckpt_path)
        };

    let experts = cfg.model.experts;
    let planned = cfg.planned_steps();
    let mut last_loss = f64::NAN;
    while step < planned {
        let batch = batcher.batch(step);
        let mut tape = Tape::new();
        let out = model
            .forward(
                &mut tape,
                &batch.inputs,
                batch.batch,
                ForwardOptions::train(&mut rng),
            )
            .map_err(|e| abort(e, step, &ckpt_path))?;
        let main = match &objective {
            Objective::LanguageModel => tape.cross_entropy(out.logits, &batch.targets),
            Objective::Distill { teacher, config } => {
                let mut ttape = Tape::new();
                let t_out = teacher.forward(
                    &mut ttape,
                    &batch.inputs,
                    batch.batch,
                    ForwardOptions::eval(),
                )?;
                let t_logits = ttape.value(t_out.logits).clone();
                distill_loss(&mut tape, out.logits, &t_logits, &batch.targets, config)
                    .map(|t| t.total)
            }
        }
        .map_err(|e| abort(e, step, &ckpt_path))?;
        let gate = out.mean_gate_loss(&mut tape)?;
        let (total, gate_value) = match gate {
            Some(g) => {
                let w = tape.scale(g, cfg.model.gate_loss_weight)?;
                (tape.add(main, w)?, tape.value(g).item().to_f64())
            }
            None => (main, 0.0),
        };
        let loss = tape.value(main).item().to_f64();
        if !loss.is_finite() || !tape.value(total).item().is_finite() {
            return Err(abort(
                Error::NonFinite(format!("loss {loss}")),
                step,
                &ckpt_path,
            ));
        }
        tape.backward(total)
            .map_err(|e| abort(e, step, &ckpt_path))?;
        let params = model.params_mut();
        params.zero_grad();
        params.accumulate_from(&tape)?;
        if experts > 0 {
            rescale_expert_gradients(params, experts);
        }
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(params, max);
        }
        let next_tokens = tokens_seen + cfg.batch_tokens;
        let lr = schedule.lr_at(next_tokens);
        opt.step(params, lr)
            .map_err(|e| abort(e, step, &ckpt_path))?;
        tokens_seen = next_tokens;
        step += 1;
        last_loss = loss;

        let overflow = if out.router_stats.is_empty() {
            0.0
        } else {
            out.router_stats
                .iter()
                .map(|s| s.overflow_fraction())
                .sum::<f64>()
                / out.router_stats.len() as f64
        };
        append_line(
            &mut metrics,
            &metrics_path,
            &StepRecord {
                step,
                tokens_seen,
                lr,
                loss,
                gate_loss: gate_value,
                overflow_fraction: overflow,
            },
        )?;
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < planned {
            let val_ppl = validation_perplexity(&model, cfg, &data.val)?;
            append_line(
                &mut evals,
                &evals_path,
                &EvalRecord {
                    step,
                    tokens_seen,
                    val_ppl,
                },
            )?;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < planned {
            save(&model, &opt, step, tokens_seen, &rng)?;
        }
    }

    let val_ppl = validation_perplexity(&model, cfg, &data.val)?;
    append_line(
        &mut evals,
        &evals_path,
        &EvalRecord {
            step,
            tokens_seen,
            val_ppl,
        },
    )?;
    save(&model, &opt, step, tokens_seen, &rng)?;
    let summary = RunSummary {
        steps: step,
        tokens_seen,
        final_loss: last_loss,
        val_ppl,
        unigram_ppl,
        params: model.params().numel() as u64,
        experts,
        zflops: train_flops(&CostSpec::from_config(&cfg.model, tokens_seen as f64)) / ZFLOP,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let summary_path = cfg.out_dir.join(SUMMARY_FILE);
    write_atomic(
        &summary_path,
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(RunOutcome { model, summary })
}

fn abort(e: Error, step: u64, ckpt: &Path) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!(
            "{m} at step {}; training aborted, last good checkpoint (if any) kept at {}",
            step + 1,
            ckpt.display()
        )),
        other => other,
    }
}
