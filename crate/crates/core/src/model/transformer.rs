use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::moe::{moe_layer_forward, MoeVars, RouterStats, RoutingPlan};
use super::params::ParamStore;
use super::positions::sinusoidal_positions;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout and router jitter active.
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
enum FfnKind {
    Dense(FfnIds),
    Moe { gate: ParamId, experts: Vec<FfnIds> },
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ffn: FfnKind,
}

/// Tape handles of a two-projection feed-forward block `h → 4h → h`.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles of one attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// `gelu(x·W1 + b1)·W2 + b2`.
pub fn ffn<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &FfnVars) -> Result<Var> {
    let h = tape.linear(x, p.w1, p.b1)?;
    let h = tape.gelu(h)?;
    tape.linear(h, p.w2, p.b2)
}

/// Multi-head causal self-attention over `x [batch·seq × h]`.
///
/// Position `t` attends to positions `<= t` of its own sequence, with scores
/// scaled by `1/√(h/heads)`.
pub fn causal_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    p: &AttentionVars,
) -> Result<Var> {
    let h = tape.shape(x)[1];
    let d = h / heads;
    let split = |tape: &mut Tape<T>, w: Var, b: Var| -> Result<Var> {
        let y = tape.linear(x, w, b)?;
        tape.split_heads(y, batch, seq, heads)
    };
    let q = split(tape, p.wq, p.bq)?;
    // Scaling q is cheaper than scaling the seq×seq scores.
    let q = tape.scale(q, 1.0 / (d as f64).sqrt())?;
    let k = split(tape, p.wk, p.bk)?;
    let v = split(tape, p.wv, p.bv)?;
    let scores = tape.bmm(q, k, true)?;
    let att = tape.causal_softmax(scores)?;
    let ctx = tape.bmm(att, v, false)?;
    let ctx = tape.merge_heads(ctx, batch, heads)?;
    tape.linear(ctx, p.wo, p.bo)
}

/// How expert layers choose routes during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    /// Route from the current gate probabilities.
    Compute,
    /// Replay one plan per expert layer (in layer order).
    Frozen(&'a [RoutingPlan]),
}

/// Per-call forward settings.
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Source of dropout masks and router jitter; required in train mode
    /// whenever either is enabled.
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub routing: Routing<'a>,
    /// Record parameters as trainable leaves (otherwise constants).
    pub trainable: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            rng: None,
            routing: Routing::Compute,
            trainable: false,
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            mode: Mode::Train,
            rng: Some(rng),
            routing: Routing::Compute,
            trainable: true,
        }
    }
}

/// Result of [`Transformer::forward`].
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[batch·seq × V]` next-token logits.
    pub logits: Var,
    /// Output of the final block before the final layer norm, `[batch·seq × h]`.
    pub final_hidden: Var,
    /// One differentiable gate loss per expert layer.
    pub gate_losses: Vec<Var>,
    pub router_stats: Vec<RouterStats>,
    pub plans: Vec<RoutingPlan>,
}

impl ForwardOutput {
    /// Mean of the per-layer gate losses (zero for dense models).
    pub fn mean_gate_loss<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Option<Var>> {
        let Some((&first, rest)) = self.gate_losses.split_first() else {
            return Ok(None);
        };
        let mut total = first;
        for &g in rest {
            total = tape.add(total, g)?;
        }
        Ok(Some(
            tape.scale(total, 1.0 / self.gate_losses.len() as f64)?,
        ))
    }
}

/// Decoder-only transformer with pre-norm blocks, fixed sinusoidal
/// positions, tied input/output embeddings and, for `experts > 0`, a top-2
/// expert layer in place of the FFN of every second block.
#[derive(Debug, Clone)]
pub struct Transformer<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    positions: Tensor<T>,
    embedding: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

impl<T: Scalar> Transformer<T> {
    /// Builds a model with weights drawn from `N(0, init_std)`; residual
    /// output projections use `init_std / √(2·layers)`. Biases start at 0
    /// and layer-norm gains at 1.
    ///
    /// The token embedding is drawn from `N(0, 1/h)` and multiplied by `√h`
    /// on lookup, so token vectors have unit scale like the sinusoidal
    /// positions they are added to.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let std = config.init_std;
        let resid_std = std / (2.0 * config.layers as f64).sqrt();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ParamStore::new(),
        };

        let embedding = init.normal(
            "embedding.weight",
            vec![config.vocab, h],
            1.0 / (h as f64).sqrt(),
        )?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layers.{l}");
            let ln1_g = init.ones(format!("{p}.ln1.gain"), h)?;
            let ln1_b = init.zeros(format!("{p}.ln1.bias"), h)?;
            let wq = init.normal(format!("{p}.attn.q.weight"), vec![h, h], std)?;
            let bq = init.zeros(format!("{p}.attn.q.bias"), h)?;
            let wk = init.normal(format!("{p}.attn.k.weight"), vec![h, h], std)?;
            let bk = init.zeros(format!("{p}.attn.k.bias"), h)?;
            let wv = init.normal(format!("{p}.attn.v.weight"), vec![h, h], std)?;
            let bv = init.zeros(format!("{p}.attn.v.bias"), h)?;
            let wo = init.normal(format!("{p}.attn.out.weight"), vec![h, h], resid_std)?;
            let bo = init.zeros(format!("{p}.attn.out.bias"), h)?;
            let ln2_g = init.ones(format!("{p}.ln2.gain"), h)?;
            let ln2_b = init.zeros(format!("{p}.ln2.bias"), h)?;
            let ffn = if config.is_expert_layer(l) {
                let gate =
                    init.normal(format!("{p}.moe.gate.weight"), vec![h, config.experts], std)?;
                let experts = (0..config.experts)
                    .map(|e| init.ffn(&format!("{p}.moe.experts.{e}"), h, std, resid_std))
                    .collect::<Result<Vec<_>>>()?;
                FfnKind::Moe { gate, experts }
            } else {
                FfnKind::Dense(init.ffn(&format!("{p}.ffn"), h, std, resid_std)?)
            };
            blocks.push(BlockIds {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                ffn,
            });
        }
        let lnf_g = init.ones("final_ln.gain".into(), h)?;
        let lnf_b = init.zeros("final_ln.bias".into(), h)?;
        let positions = sinusoidal_positions(config.seq_len, h)?;
        Ok(Self {
            config,
            params: init.params,
            positions,
            embedding,
            blocks,
            lnf_g,
            lnf_b,
        })
    }

    /// Rebuilds a model around loaded parameters; names and shapes must match
    /// what [`Transformer::new`] creates for `config`.
    pub fn from_params(config: ModelConfig, loaded: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if loaded.len() != model.params.len() {
            return Err(Error::config(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                loaded.len()
            )));
        }
        for p in model.params.iter_mut() {
            let src = loaded
                .by_name(&p.name)
                .ok_or_else(|| Error::config(format!("missing parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    lhs: p.value.shape().to_vec(),
                    rhs: src.value.shape().to_vec(),
                });
            }
            p.value = src.value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Runs `tokens` (row-major `[batch × seq]`) through the network.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        tokens: &[u32],
        batch: usize,
        mut opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if batch == 0 || !tokens.len().is_multiple_of(batch) || tokens.is_empty() {
            return Err(Error::Shape {
                op: "forward",
                lhs: vec![tokens.len()],
                rhs: vec![batch],
            });
        }
        let seq = tokens.len() / batch;
        if seq > cfg.seq_len {
            return Err(Error::Index {
                what: "sequence length",
                index: seq,
                bound: cfg.seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::Index {
                what: "token vocabulary",
                index: bad as usize,
                bound: cfg.vocab,
            });
        }
        let training = opts.mode == Mode::Train;
        let dropout = if training { cfg.dropout } else { 0.0 };
        let jitter = if training { cfg.router_jitter } else { 0.0 };
        if (dropout > 0.0 || jitter > 0.0) && opts.rng.is_none() {
            return Err(Error::config(
                "train mode with dropout or jitter needs an rng",
            ));
        }
        let frozen = match opts.routing {
            Routing::Frozen(plans) => {
                if plans.len() != cfg.expert_layer_count() {
                    return Err(Error::Contract(format!(
                        "{} frozen plans for {} expert layers",
                        plans.len(),
                        cfg.expert_layer_count()
                    )));
                }
                Some(plans)
            }
            Routing::Compute => None,
        };

        let bind = |tape: &mut Tape<T>, id: ParamId| {
            let value = &self.params.get(id).value;
            if opts.trainable {
                tape.param(id, value)
            } else {
                tape.frozen_param(value)
            }
        };

        let n = tokens.len();
        let h = cfg.hidden;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let wte = bind(tape, self.embedding);
        let emb = tape.gather_rows(wte, &ids)?;
        let emb = tape.scale(emb, (h as f64).sqrt())?;
        let mut pos = Vec::with_capacity(n * h);
        for _ in 0..batch {
            pos.extend_from_slice(&self.positions.data()[..seq * h]);
        }
        let pos = tape.constant(Tensor::new(vec![n, h], pos)?);
        let mut x = tape.add(emb, pos)?;
        x = apply_dropout(tape, x, dropout, opts.rng.as_deref_mut())?;

        let mut gate_losses = Vec::new();
        let mut router_stats = Vec::new();
        let mut plans = Vec::new();
        let eps = cfg.layer_norm_eps;
        for block in &self.blocks {
            let g = bind(tape, block.ln1_g);
            let b = bind(tape, block.ln1_b);
            let a_in = tape.layer_norm(x, g, b, eps)?;
            let attn = AttentionVars {
                wq: bind(tape, block.wq),
                bq: bind(tape, block.bq),
                wk: bind(tape, block.wk),
                bk: bind(tape, block.bk),
                wv: bind(tape, block.wv),
                bv: bind(tape, block.bv),
                wo: bind(tape, block.wo),
                bo: bind(tape, block.bo),
            };
            let a = causal_attention(tape, a_in, batch, seq, cfg.heads, &attn)?;
            let a = apply_dropout(tape, a, dropout, opts.rng.as_deref_mut())?;
            x = tape.add(x, a)?;

            let g = bind(tape, block.ln2_g);
            let b = bind(tape, block.ln2_b);
            let f_in = tape.layer_norm(x, g, b, eps)?;
            let bind_ffn = |tape: &mut Tape<T>, f: &FfnIds| FfnVars {
                w1: bind(tape, f.w1),
                b1: bind(tape, f.b1),
                w2: bind(tape, f.w2),
                b2: bind(tape, f.b2),
            };
            let f = match &block.ffn {
                FfnKind::Dense(ids) => {
                    let vars = bind_ffn(tape, ids);
                    ffn(tape, f_in, &vars)?
                }
                FfnKind::Moe { gate, experts } => {
                    let vars = MoeVars {
                        gate: bind(tape, *gate),
                        experts: experts.iter().map(|f| bind_ffn(tape, f)).collect(),
                    };
                    let router_input = if jitter > 0.0 {
                        let rng = opts.rng.as_deref_mut().expect("checked above");
                        let noise: Vec<f64> = (0..n * h)
                            .map(|_| rng.gen_range(1.0 - jitter..1.0 + jitter))
                            .collect();
                        let noise = tape.constant(Tensor::from_f64(vec![n, h], &noise)?);
                        Some(tape.mul(f_in, noise)?)
                    } else {
                        None
                    };
                    let replay = frozen.map(|p| &p[plans.len()]);
                    let out = moe_layer_forward(
                        tape,
                        f_in,
                        &vars,
                        cfg.capacity_factor,
                        replay,
                        router_input,
                    )?;
                    gate_losses.push(out.gate_loss);
                    router_stats.push(out.stats);
                    plans.push(out.plan);
                    out.output
                }
            };
            let f = apply_dropout(tape, f, dropout, opts.rng.as_deref_mut())?;
            x = tape.add(x, f)?;
        }
        let final_hidden = x;
        let g = bind(tape, self.lnf_g);
        let b = bind(tape, self.lnf_b);
        let y = tape.layer_norm(x, g, b, eps)?;
        let logits = tape.matmul_nt(y, wte)?;
        Ok(ForwardOutput {
            logits,
            final_hidden,
            gate_losses,
            router_stats,
            plans,
        })
    }
}

struct Init<T> {
    rng: ChaCha8Rng,
    params: ParamStore<T>,
}

impl<T: Scalar> Init<T> {
    fn normal(&mut self, name: impl Into<String>, shape: Vec<usize>, sd: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, sd).map_err(|e| Error::config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(dist.sample(&mut self.rng)))
            .collect();
        self.params.insert(name, Tensor::new(shape, data)?)
    }

    fn zeros(&mut self, name: String, n: usize) -> Result<ParamId> {
        self.params.insert(name, Tensor::zeros(vec![n]))
    }

    fn ones(&mut self, name: String, n: usize) -> Result<ParamId> {
        self.params.insert(name, Tensor::full(vec![n], T::ONE))
    }

    fn ffn(&mut self, prefix: &str, h: usize, std: f64, resid_std: f64) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: self.normal(format!("{prefix}.fc1.weight"), vec![h, 4 * h], std)?,
            b1: self.zeros(format!("{prefix}.fc1.bias"), 4 * h)?,
            w2: self.normal(format!("{prefix}.fc2.weight"), vec![4 * h, h], resid_std)?,
            b2: self.zeros(format!("{prefix}.fc2.bias"), h)?,
        })
    }
}

/// Inverted dropout: zeroes with probability `p`, scales survivors by `1/(1-p)`.
fn apply_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let rng = rng.ok_or_else(|| Error::config("dropout needs an rng"))?;
    let keep = T::from_f64(1.0 / (1.0 - p));
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let threshold = (p * 4_294_967_296.0) as u64;
    let mask = (0..n)
        .map(|_| {
            if u64::from(rng.next_u32()) < threshold {
                T::ZERO
            } else {
                keep
            }
        })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}
