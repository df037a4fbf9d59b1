use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            _ => Err(Error::config(format!(
                "precision must be single or double, got {s}"
            ))),
        }
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub peak_lr: f64,
    /// Defaults to the standard warmup share of `total_tokens`.
    pub warmup_tokens: Option<u64>,
    pub total_tokens: u64,
    pub batch_tokens: u64,
    pub seed: u64,
    pub precision: Precision,
    pub corpus: PathBuf,
    /// Held-out text; without it the tail of the corpus is held out.
    pub val_corpus: Option<PathBuf>,
    pub val_fraction: f64,
    pub out_dir: PathBuf,
    /// Merges file; byte-level when absent.
    pub tokenizer: Option<PathBuf>,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Steps between validation passes; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Upper bound on validation blocks scored per pass.
    pub eval_max_blocks: usize,
    /// Stop after this many optimizer steps even if the token budget
    /// is not spent.
    pub max_steps: Option<u64>,
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            peak_lr: 3e-4,
            warmup_tokens: None,
            total_tokens: 5_000_000,
            batch_tokens: 8192,
            seed: 0,
            precision: Precision::Single,
            corpus: PathBuf::from("corpus.txt"),
            val_corpus: None,
            val_fraction: 0.05,
            out_dir: PathBuf::from("run"),
            tokenizer: None,
            checkpoint_every: 0,
            eval_every: 0,
            eval_max_blocks: 64,
            max_steps: None,
            grad_clip: None,
            adam: AdamConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn fmt_opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl RunConfig {
    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "layers" => m.layers = parse_num(key, value)?,
            "hidden" => m.hidden = parse_num(key, value)?,
            "heads" => m.heads = parse_num(key, value)?,
            "vocab" => m.vocab = parse_num(key, value)?,
            "seq_len" => m.seq_len = parse_num(key, value)?,
            "experts" => m.experts = parse_num(key, value)?,
            "capacity_factor" => m.capacity_factor = parse_num(key, value)?,
            "dropout" => m.dropout = parse_num(key, value)?,
            "gate_loss_weight" => m.gate_loss_weight = parse_num(key, value)?,
            "router_jitter" => m.router_jitter = parse_num(key, value)?,
            "layer_norm_eps" => m.layer_norm_eps = parse_num(key, value)?,
            "init_std" => m.init_std = parse_num(key, value)?,
            "peak_lr" => self.peak_lr = parse_num(key, value)?,
            "warmup_tokens" => {
                self.warmup_tokens = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "total_tokens" => self.total_tokens = parse_num::<f64>(key, value)? as u64,
            "batch_tokens" => self.batch_tokens = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "precision" => self.precision = value.parse()?,
            "corpus" => self.corpus = PathBuf::from(value),
            "val_corpus" => self.val_corpus = opt_path(value),
            "val_fraction" => self.val_fraction = parse_num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "tokenizer" => {
                self.tokenizer = if value == "byte" {
                    None
                } else {
                    opt_path(value)
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "eval_max_blocks" => self.eval_max_blocks = parse_num(key, value)?,
            "max_steps" => {
                self.max_steps = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "grad_clip" => {
                self.grad_clip = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "beta1" => self.adam.beta1 = parse_num(key, value)?,
            "beta2" => self.adam.beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam.eps = parse_num(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse_num(key, value)?,
            "fp16_state" => self.adam.fp16_state = parse_bool(key, value)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text; `#` starts a comment.
    pub fn from_kv(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text, path)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text, path)
    }

    /// Text form accepted by [`RunConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("layers", m.layers.to_string());
        put("hidden", m.hidden.to_string());
        put("heads", m.heads.to_string());
        put("vocab", m.vocab.to_string());
        put("seq_len", m.seq_len.to_string());
        put("experts", m.experts.to_string());
        put("capacity_factor", format!("{:?}", m.capacity_factor));
        put("dropout", format!("{:?}", m.dropout));
        put("gate_loss_weight", format!("{:?}", m.gate_loss_weight));
        put("router_jitter", format!("{:?}", m.router_jitter));
        put("layer_norm_eps", format!("{:?}", m.layer_norm_eps));
        put("init_std", format!("{:?}", m.init_std));
        put("peak_lr", format!("{:?}", self.peak_lr));
        put("warmup_tokens", fmt_opt(&self.warmup_tokens));
        put("total_tokens", self.total_tokens.to_string());
        put("batch_tokens", self.batch_tokens.to_string());
        put("seed", self.seed.to_string());
        put("precision", self.precision.to_string());
        put("corpus", self.corpus.display().to_string());
        put(
            "val_corpus",
            fmt_opt(&self.val_corpus.as_ref().map(|p| p.display())),
        );
        put("val_fraction", format!("{:?}", self.val_fraction));
        put("out_dir", self.out_dir.display().to_string());
        put(
            "tokenizer",
            self.tokenizer
                .as_ref()
                .map_or_else(|| "byte".to_string(), |p| p.display().to_string()),
        );
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("eval_every", self.eval_every.to_string());
        put("eval_max_blocks", self.eval_max_blocks.to_string());
        put("max_steps", fmt_opt(&self.max_steps));
        put(
            "grad_clip",
            fmt_opt(&self.grad_clip.map(|v| format!("{v:?}"))),
        );
        put("beta1", format!("{:?}", self.adam.beta1));
        put("beta2", format!("{:?}", self.adam.beta2));
        put("adam_eps", format!("{:?}", self.adam.eps));
        put("weight_decay", format!("{:?}", self.adam.weight_decay));
        put("fp16_state", self.adam.fp16_state.to_string());
        s
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match self.warmup_tokens {
            Some(w) => Schedule::new(self.peak_lr, w, self.total_tokens),
            None => Schedule::with_default_warmup(self.peak_lr, self.total_tokens),
        }
    }

    /// Optimizer steps the token budget allows, before `max_steps`.
    pub fn budget_steps(&self) -> u64 {
        self.total_tokens / self.batch_tokens.max(1)
    }

    pub fn planned_steps(&self) -> u64 {
        let budget = self.budget_steps();
        self.max_steps.map_or(budget, |m| m.min(budget))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let s = self.model.seq_len as u64;
        if self.batch_tokens == 0 || !self.batch_tokens.is_multiple_of(s) {
            return Err(Error::config(format!(
                "batch_tokens {} must be a positive multiple of seq_len {s}",
                self.batch_tokens
            )));
        }
        if self.total_tokens < self.batch_tokens {
            return Err(Error::config(format!(
                "total_tokens {} is smaller than batch_tokens {}",
                self.total_tokens, self.batch_tokens
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction must lie in (0, 1)"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        if self.eval_max_blocks == 0 {
            return Err(Error::config("eval_max_blocks must be positive"));
        }
        self.schedule()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.max_steps = Some(7);
        cfg.grad_clip = Some(1.0);
        cfg.tokenizer = Some(PathBuf::from("m.txt"));
        cfg.model.dropout = 0.125;
        let back = RunConfig::from_kv(&cfg.to_kv(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn parse_errors_carry_line() {
        match RunConfig::from_kv("# c\nlayers = 2\nbogus = 1\n", Path::new("c.kv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_kv("layers 2\n", Path::new("c")).is_err());
        let mut cfg = RunConfig::default();
        cfg.batch_tokens = 100;
        assert!(cfg.validate().is_err());
        cfg.batch_tokens = 8192;
        cfg.total_tokens = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_preset_budget() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.budget_steps(), 610);
        assert_eq!(cfg.schedule().unwrap().warmup_tokens, 6250);
    }
}
