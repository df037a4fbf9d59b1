//! Top-2 routed expert layer with per-expert capacity.
//!
//! Routes are filled greedily: every token's first choice in position order,
//! then every token's second choice in position order. A route that finds its
//! expert full is dropped; a token with no surviving route contributes a zero
//! vector, so the surrounding residual connection passes it through.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

use super::transformer::{ffn, FfnVars};

/// Maximum tokens an expert accepts per batch: `ceil(C·B/E)`, at least 1.
pub fn expert_capacity(tokens: usize, experts: usize, factor: f64) -> usize {
    let nominal = factor * tokens as f64 / experts.max(1) as f64;
    // Guard against `4.000000000001` style float noise before the ceiling.
    let rounded = nominal.round();
    let cap = if (nominal - rounded).abs() < 1e-9 {
        rounded
    } else {
        nominal.ceil()
    };
    (cap as usize).max(1)
}

/// Expert choice and dispatch outcome for one batch; can be replayed to
/// freeze routing while differentiating.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPlan {
    pub experts: usize,
    pub capacity: usize,
    /// `[first, second]` expert per token.
    pub choice: Vec<[usize; 2]>,
    /// Whether each of the two routes was accepted by its expert.
    pub dispatched: Vec<[bool; 2]>,
}

impl RoutingPlan {
    pub fn tokens(&self) -> usize {
        self.choice.len()
    }

    /// Computes expert choices from row-major gate probabilities `[n × E]`
    /// and fills expert slots up to `capacity`.
    pub fn from_probs(probs: &[f64], experts: usize, capacity: usize) -> Result<Self> {
        if experts < 2 {
            return Err(Error::config(format!(
                "top-2 routing needs >= 2 experts, got {experts}"
            )));
        }
        if !probs.len().is_multiple_of(experts) {
            return Err(Error::Shape {
                op: "route",
                lhs: vec![probs.len()],
                rhs: vec![experts],
            });
        }
        let choice = probs.chunks(experts).map(top2).collect();
        Ok(Self::dispatch(choice, experts, capacity))
    }

    fn dispatch(choice: Vec<[usize; 2]>, experts: usize, capacity: usize) -> Self {
        let mut load = vec![0usize; experts];
        let mut dispatched = vec![[false; 2]; choice.len()];
        for rank in 0..2 {
            for (t, c) in choice.iter().enumerate() {
                let e = c[rank];
                if load[e] < capacity {
                    load[e] += 1;
                    dispatched[t][rank] = true;
                }
            }
        }
        Self {
            experts,
            capacity,
            choice,
            dispatched,
        }
    }

    pub fn per_expert_count(&self) -> Vec<usize> {
        let mut load = vec![0usize; self.experts];
        for (c, d) in self.choice.iter().zip(&self.dispatched) {
            for r in 0..2 {
                if d[r] {
                    load[c[r]] += 1;
                }
            }
        }
        load
    }
}

/// Indices of the two largest entries; ties resolve to the lower index.
fn top2(row: &[f64]) -> [usize; 2] {
    let mut first = 0;
    for (e, &p) in row.iter().enumerate() {
        if p > row[first] {
            first = e;
        }
    }
    let mut second = usize::from(first == 0);
    for (e, &p) in row.iter().enumerate() {
        if e != first && p > row[second] {
            second = e;
        }
    }
    [first, second]
}

/// Per-batch routing record of one expert layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterStats {
    pub experts: usize,
    /// Row-major `[tokens × E]` gate distribution.
    pub gate_probs: Vec<f64>,
    /// `(expert, renormalized weight)` for both routes of each token.
    pub top2: Vec<[(usize, f64); 2]>,
    pub per_expert_count: Vec<usize>,
    /// `true` where a route was dropped because its expert was full.
    pub overflow_mask: Vec<[bool; 2]>,
    pub capacity: usize,
}

impl RouterStats {
    pub fn tokens(&self) -> usize {
        self.top2.len()
    }

    /// Dropped routes over all routes attempted.
    pub fn overflow_fraction(&self) -> f64 {
        let dropped = self
            .overflow_mask
            .iter()
            .flat_map(|m| m.iter())
            .filter(|&&b| b)
            .count();
        dropped as f64 / (2 * self.tokens()).max(1) as f64
    }

    /// Fraction of tokens whose first choice is each expert.
    pub fn top1_fractions(&self) -> Vec<f64> {
        let mut f = vec![0.0; self.experts];
        for r in &self.top2 {
            f[r[0].0] += 1.0;
        }
        let n = self.tokens().max(1) as f64;
        f.iter_mut().for_each(|v| *v /= n);
        f
    }

    /// Mean gate probability of each expert over the batch.
    pub fn mean_gate_probs(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.experts];
        for row in self.gate_probs.chunks(self.experts) {
            for (a, &b) in p.iter_mut().zip(row) {
                *a += b;
            }
        }
        let n = self.tokens().max(1) as f64;
        p.iter_mut().for_each(|v| *v /= n);
        p
    }

    fn from_plan(plan: &RoutingPlan, gate_probs: Vec<f64>) -> Self {
        let e = plan.experts;
        let top2 = plan
            .choice
            .iter()
            .enumerate()
            .map(|(t, c)| {
                let (p0, p1) = (gate_probs[t * e + c[0]], gate_probs[t * e + c[1]]);
                let s = p0 + p1;
                [(c[0], p0 / s), (c[1], p1 / s)]
            })
            .collect();
        Self {
            experts: e,
            per_expert_count: plan.per_expert_count(),
            overflow_mask: plan.dispatched.iter().map(|d| [!d[0], !d[1]]).collect(),
            capacity: plan.capacity,
            top2,
            gate_probs,
        }
    }
}

/// Load-balancing loss `E · Σ_e f_e · p_e`, with `f_e` the share of tokens
/// whose first choice is `e` and `p_e` the mean gate probability of `e`.
pub fn gate_loss(stats: &RouterStats) -> f64 {
    let f = stats.top1_fractions();
    let p = stats.mean_gate_probs();
    stats.experts as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

/// Tape handles of one expert layer's parameters.
#[derive(Debug, Clone)]
pub struct MoeVars {
    /// Router projection `[h × E]`.
    pub gate: Var,
    pub experts: Vec<FfnVars>,
}

/// Output of [`moe_layer_forward`].
#[derive(Debug)]
pub struct MoeOutput {
    /// `[tokens × h]`; zero rows for fully overflowed tokens.
    pub output: Var,
    /// Differentiable gate loss (same value as [`gate_loss`] on `stats`).
    pub gate_loss: Var,
    pub stats: RouterStats,
    pub plan: RoutingPlan,
}

/// Routes every row of `x [tokens × h]` to its top-2 experts and combines
/// the expert outputs with renormalized gate weights.
///
/// With `frozen` set, expert choices and dispatch decisions are replayed
/// from that plan while gate weights are still recomputed from `x`.
pub fn moe_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &MoeVars,
    capacity_factor: f64,
    frozen: Option<&RoutingPlan>,
    router_input: Option<Var>,
) -> Result<MoeOutput> {
    let e = vars.experts.len();
    if e < 2 {
        return Err(Error::config(format!(
            "expert layer needs >= 2 experts, got {e}"
        )));
    }
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Shape {
            op: "moe_layer_forward",
            lhs: shape,
            rhs: vec![],
        });
    }
    let n = shape[0];
    let logits = tape.matmul(router_input.unwrap_or(x), vars.gate)?;
    let probs = tape.softmax(logits)?;
    let probs_f64 = tape.value(probs).to_f64_vec();

    let plan = match frozen {
        Some(p) => {
            if p.tokens() != n || p.experts != e {
                return Err(Error::Contract(format!(
                    "frozen routing for {} tokens / {} experts replayed on {n} / {e}",
                    p.tokens(),
                    p.experts
                )));
            }
            p.clone()
        }
        None => RoutingPlan::from_probs(&probs_f64, e, expert_capacity(n, e, capacity_factor))?,
    };

    // Renormalized top-2 weights laid out as [first routes.., second routes..].
    let picks: Vec<usize> = (0..2)
        .flat_map(|r| {
            plan.choice
                .iter()
                .enumerate()
                .map(move |(t, c)| t * e + c[r])
        })
        .collect();
    let picked = tape.gather_elems(probs, &picks)?;
    let pair = tape.reshape(picked, &[2, n])?;
    let denom = tape.sum_axis0(pair)?;
    let twice: Vec<usize> = (0..2 * n).map(|i| i % n).collect();
    let denom = tape.gather_elems(denom, &twice)?;
    let weights = tape.div(picked, denom)?;

    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    for (expert, ffn_vars) in vars.experts.iter().enumerate() {
        let mut tokens = Vec::new();
        let mut slots = Vec::new();
        for r in 0..2 {
            for (t, (c, d)) in plan.choice.iter().zip(&plan.dispatched).enumerate() {
                if d[r] && c[r] == expert {
                    tokens.push(t);
                    slots.push(r * n + t);
                }
            }
        }
        if tokens.is_empty() {
            continue;
        }
        let xin = tape.gather_rows(x, &tokens)?;
        let h = ffn(tape, xin, ffn_vars)?;
        let w = tape.gather_elems(weights, &slots)?;
        outputs.push(tape.scale_rows(h, w)?);
        rows.extend(tokens);
    }
    let output = if outputs.is_empty() {
        let zero = tape.constant(Tensor::zeros(vec![n, shape[1]]));
        tape.scale(zero, 1.0)?
    } else {
        let stacked = tape.concat_rows(&outputs)?;
        tape.scatter_add_rows(stacked, &rows, n)?
    };

    let stats = RouterStats::from_plan(&plan, probs_f64);
    let frac = tape.constant(Tensor::from_f64(vec![e], &stats.top1_fractions())?);
    let psum = tape.sum_axis0(probs)?;
    let weighted = tape.mul(psum, frac)?;
    let total = tape.sum(weighted)?;
    let gate_loss = tape.scale(total, e as f64 / n as f64)?;

    Ok(MoeOutput {
        output,
        gate_loss,
        stats,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_examples() {
        assert_eq!(expert_capacity(8, 4, 2.0), 4);
        assert_eq!(expert_capacity(10, 4, 2.0), 5);
        assert_eq!(expert_capacity(1, 512, 2.0), 1);
        assert_eq!(expert_capacity(3, 10, 1.0), 1);
    }

    #[test]
    fn top2_prefers_lower_index_on_ties() {
        assert_eq!(top2(&[0.25, 0.25, 0.25, 0.25]), [0, 1]);
        assert_eq!(top2(&[0.1, 0.6, 0.3]), [1, 2]);
        assert_eq!(top2(&[0.5, 0.1, 0.4]), [0, 2]);
    }

    #[test]
    fn forced_expert_overflows_beyond_capacity() {
        // Every token prefers expert 0: the first `capacity` tokens are served.
        let n = 12;
        let probs: Vec<f64> = (0..n).flat_map(|_| [0.9, 0.1]).collect();
        let cap = expert_capacity(n, 2, 1.0);
        let plan = RoutingPlan::from_probs(&probs, 2, cap).unwrap();
        assert_eq!(cap, 6);
        for t in 0..n {
            assert_eq!(plan.dispatched[t][0], t < cap, "token {t}");
            assert_eq!(plan.dispatched[t][1], t < cap);
        }
        assert_eq!(plan.per_expert_count(), vec![6, 6]);
    }

    fn stats_from(gate_probs: Vec<f64>, e: usize) -> RouterStats {
        let plan = RoutingPlan::from_probs(&gate_probs, e, usize::MAX).unwrap();
        RouterStats::from_plan(&plan, gate_probs)
    }

    #[test]
    fn gate_loss_examples() {
        let uniform = stats_from(vec![0.5, 0.5, 0.5, 0.5].into_iter().collect(), 2);
        // Ties all go to expert 0, so f is imbalanced but p is uniform: 2·(1·½) = 1.
        assert!((gate_loss(&uniform) - 1.0).abs() < 1e-12);

        let collapsed = stats_from(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], 4);
        assert!((gate_loss(&collapsed) - 4.0).abs() < 1e-12);

        // f = [0.75, 0.25], p = [0.7, 0.3] -> 2·(0.525 + 0.075) = 1.2
        let probs = vec![0.8, 0.2, 0.8, 0.2, 0.8, 0.2, 0.4, 0.6];
        let s = stats_from(probs, 2);
        assert_eq!(s.top1_fractions(), vec![0.75, 0.25]);
        let p = s.mean_gate_probs();
        assert!((p[0] - 0.7).abs() < 1e-12);
        assert!((gate_loss(&s) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn fewer_than_two_experts_is_a_config_error() {
        assert!(matches!(
            RoutingPlan::from_probs(&[1.0], 1, 1),
            Err(Error::Config(_))
        ));
    }
}
