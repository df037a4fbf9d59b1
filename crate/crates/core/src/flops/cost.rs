use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// FLOPs per ZFLOP.
pub const ZFLOP: f64 = 1e21;
/// Sustained A100 throughput assumed for dense training, TFLOP/s.
pub const DENSE_TFLOPS: f64 = 160.0;
/// Sustained A100 throughput assumed for MoE training, TFLOP/s.
pub const MOE_TFLOPS: f64 = 115.0;
/// 0.4 kW x 24 h x 1.125 PUE x 0.3 kgCO2e/kWh.
pub const KG_CO2E_PER_GPU_DAY: f64 = 0.4 * 24.0 * 1.125 * 0.3;

pub const DEFAULT_SEQ_LEN: u64 = 2048;
pub const DEFAULT_VOCAB: u64 = 51200;

/// Inputs to the analytic training-cost formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub tokens: f64,
    pub layers: u64,
    pub hidden: u64,
    pub seq_len: u64,
    pub vocab: u64,
    pub moe: bool,
    /// Informational only; the FLOP count does not depend on it.
    pub experts: u64,
}

impl CostSpec {
    pub fn dense(tokens: f64, layers: u64, hidden: u64) -> Self {
        Self {
            tokens,
            layers,
            hidden,
            seq_len: DEFAULT_SEQ_LEN,
            vocab: DEFAULT_VOCAB,
            moe: false,
            experts: 0,
        }
    }

    pub fn moe(tokens: f64, layers: u64, hidden: u64, experts: u64) -> Self {
        Self {
            moe: true,
            experts,
            ..Self::dense(tokens, layers, hidden)
        }
    }

    pub fn from_config(config: &ModelConfig, tokens: f64) -> Self {
        Self {
            tokens,
            layers: config.layers as u64,
            hidden: config.hidden as u64,
            seq_len: config.seq_len as u64,
            vocab: config.vocab as u64,
            moe: config.is_moe(),
            experts: config.experts as u64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.tokens > 0.0
            && self.tokens.is_finite()
            && self.layers > 0
            && self.hidden > 0
            && self.seq_len > 0
            && self.vocab > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "cost spec has non-positive fields: {self:?}"
            )))
        }
    }
}

/// Training FLOPs of a dense model, counting forward, backward and the
/// recomputed forward of activation checkpointing.
pub fn dense_train_flops(spec: &CostSpec) -> f64 {
    let (t, l, h) = (spec.tokens, spec.layers as f64, spec.hidden as f64);
    let (s, v) = (spec.seq_len as f64, spec.vocab as f64);
    96.0 * t * l * h * h * (1.0 + s / (6.0 * h) + v / (16.0 * l * h))
}

/// Dense cost plus the extra expert FFN work of top-2 routing on every
/// other layer. Independent of the expert count.
pub fn moe_train_flops(spec: &CostSpec) -> f64 {
    let (t, l, h) = (spec.tokens, spec.layers as f64, spec.hidden as f64);
    dense_train_flops(spec) + 32.0 * t * l * h * h
}

pub fn train_flops(spec: &CostSpec) -> f64 {
    if spec.moe {
        moe_train_flops(spec)
    } else {
        dense_train_flops(spec)
    }
}

/// Exact trainable parameter count of the model built from `config`:
/// attention and FFN weights with biases, two layer norms per block, a final
/// layer norm and a tied embedding. Expert layers replace their FFN with `E`
/// FFNs plus a bias-free `h x E` gate.
pub fn param_count(config: &ModelConfig) -> u64 {
    let (l, h, v, e) = (
        config.layers as u64,
        config.hidden as u64,
        config.vocab as u64,
        config.experts as u64,
    );
    let ffn = 8 * h * h + 5 * h;
    let mut n = l * (12 * h * h + 13 * h) + v * h + 2 * h;
    if config.is_moe() {
        let expert_layers = config.expert_layer_count() as u64;
        n += expert_layers * ((e - 1) * ffn + h * e);
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recipe {
    /// FP32 master weights, FP16 working copy, FP32 Adam moments, FP16 grads.
    MixedPrecision,
    /// FP16 weights, rescaled FP16 Adam moments, FP16 grads.
    Fp16Pure,
}

pub fn bytes_per_param(recipe: Recipe) -> u32 {
    match recipe {
        Recipe::MixedPrecision => 6 + 8 + 2,
        Recipe::Fp16Pure => 2 + 4 + 2,
    }
}

pub fn gpu_days(zflops: f64, throughput_tflops: f64) -> Result<f64> {
    if !(throughput_tflops > 0.0) {
        return Err(Error::config(format!(
            "throughput must be positive, got {throughput_tflops}"
        )));
    }
    Ok(zflops * ZFLOP / (throughput_tflops * 1e12) / 86400.0)
}

pub fn tco2e(gpu_days: f64) -> f64 {
    gpu_days * KG_CO2E_PER_GPU_DAY / 1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub name: String,
    pub params: u64,
    pub zflops: f64,
    pub gpu_days: f64,
    pub tco2e: f64,
    pub bytes_per_param: u32,
}

/// Full cost line for a model trained on `tokens` tokens, using the default
/// throughput for its family.
pub fn cost_report(
    name: &str,
    config: &ModelConfig,
    tokens: f64,
    recipe: Recipe,
) -> Result<CostReport> {
    let spec = CostSpec::from_config(config, tokens);
    spec.validate()?;
    let zflops = train_flops(&spec) / ZFLOP;
    let tput = if spec.moe { MOE_TFLOPS } else { DENSE_TFLOPS };
    let days = gpu_days(zflops, tput)?;
    Ok(CostReport {
        name: name.to_string(),
        params: param_count(config),
        zflops,
        gpu_days: days,
        tco2e: tco2e(days),
        bytes_per_param: bytes_per_param(recipe),
    })
}

pub fn cost_csv(rows: &[CostReport]) -> String {
    let mut out = String::from("name,params,zflops,gpu_days,tco2e\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.2},{:.3}",
            r.name, r.params, r.zflops, r.gpu_days, r.tco2e
        );
    }
    out
}
