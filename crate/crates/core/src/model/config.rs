use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of transformer blocks.
    pub layers: usize,
    /// Hidden (model) dimension.
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    /// Maximum sequence length in tokens.
    pub seq_len: usize,
    /// Experts per expert layer; 0 builds a dense model.
    pub experts: usize,
    /// Capacity factor C in the per-expert capacity `C·B/E`.
    pub capacity_factor: f64,
    pub dropout: f64,
    pub gate_loss_weight: f64,
    /// Multiplicative uniform jitter on router inputs during training
    /// (`x · U(1-j, 1+j)`); 0 disables it.
    pub router_jitter: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    /// The desk-scale preset: 4 layers, h=128, 4 heads, 8 experts, s=128,
    /// byte-level vocabulary.
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            heads: 4,
            vocab: 256,
            seq_len: 128,
            experts: 8,
            capacity_factor: 2.0,
            dropout: 0.1,
            gate_loss_weight: 0.01,
            router_jitter: 0.0,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn dense(mut self) -> Self {
        self.experts = 0;
        self
    }

    pub fn is_moe(&self) -> bool {
        self.experts > 0
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    /// Whether block `layer` (0-based) carries an expert layer: the second,
    /// fourth, ... blocks of an MoE model.
    pub fn is_expert_layer(&self, layer: usize) -> bool {
        self.is_moe() && layer % 2 == 1
    }

    pub fn expert_layer_count(&self) -> usize {
        (0..self.layers)
            .filter(|&l| self.is_expert_layer(l))
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0
            || self.hidden == 0
            || self.heads == 0
            || self.vocab == 0
            || self.seq_len == 0
        {
            return fail("layers, hidden, heads, vocab and seq_len must all be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if !self.hidden.is_multiple_of(2) {
            return fail(format!(
                "hidden {} must be even for sinusoidal positions",
                self.hidden
            ));
        }
        if self.experts > 0 && self.layers < 2 {
            return fail("an MoE model needs at least 2 layers".into());
        }
        if self.experts == 1 {
            return fail("expert layers need at least 2 experts".into());
        }
        if !(self.capacity_factor > 0.0) {
            return fail(format!(
                "capacity factor must be > 0, got {}",
                self.capacity_factor
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.gate_loss_weight < 0.0 || !self.gate_loss_weight.is_finite() {
            return fail(format!(
                "gate loss weight must be >= 0, got {}",
                self.gate_loss_weight
            ));
        }
        if !(0.0..1.0).contains(&self.router_jitter) {
            return fail(format!(
                "router jitter must be in [0, 1), got {}",
                self.router_jitter
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_preset_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.expert_layer_count(), 2);
        assert!(!cfg.is_expert_layer(0) && cfg.is_expert_layer(1));
        cfg.dense().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ModelConfig::default();
        for bad in [
            ModelConfig {
                heads: 3,
                ..base.clone()
            },
            ModelConfig {
                layers: 1,
                ..base.clone()
            },
            ModelConfig {
                capacity_factor: 0.0,
                ..base.clone()
            },
            ModelConfig {
                dropout: 1.0,
                ..base.clone()
            },
            ModelConfig {
                experts: 1,
                ..base.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }
}
