//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use moelab::eval::toy::BigramModel;
use moelab::eval::{score_candidates, PromptTask, ScoringRule};
use moelab::model::{ForwardOptions, ModelConfig, Routing, RoutingPlan, Transformer};
use moelab::tensor::{ParamId, Tape, Tensor, Var};
use moelab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step for double-precision checks.
pub const FD_STEP: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-4)`: relative error, with a floor so
/// near-zero gradients are compared on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct amount to the gradient.
fn weighted_sum(tape: &mut Tape<f64>, out: Var) -> Var {
    if tape.value(out).is_scalar() {
        return out;
    }
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let w = random_tensor(&mut rng, &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

/// Largest relative error between reverse-mode gradients of
/// `Σ w ⊙ build(inputs)` and central differences, over every input element.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = build(&mut tape, &vars).unwrap();
        let loss = weighted_sum(&mut tape, out);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = weighted_sum(&mut tape, out);
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

pub fn tiny_moe_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        vocab: 11,
        seq_len: 6,
        experts: 4,
        // Below 2 so that some routes overflow.
        capacity_factor: 1.0,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Training objective (CE plus weighted mean gate loss) of `model` on
/// `tokens`, with routing replayed from `plans` when given.
pub fn model_loss(
    model: &Transformer<f64>,
    tokens: &[u32],
    targets: &[usize],
    batch: usize,
    plans: Option<&[RoutingPlan]>,
) -> (f64, Vec<RoutingPlan>, Tape<f64>) {
    let mut tape = Tape::new();
    let mut opts = ForwardOptions::eval();
    opts.trainable = true;
    if let Some(p) = plans {
        opts.routing = Routing::Frozen(p);
    }
    let out = model.forward(&mut tape, tokens, batch, opts).unwrap();
    let ce = tape.cross_entropy(out.logits, targets).unwrap();
    let loss = match out.mean_gate_loss(&mut tape).unwrap() {
        Some(g) => {
            let g = tape.scale(g, model.config().gate_loss_weight).unwrap();
            tape.add(ce, g).unwrap()
        }
        None => ce,
    };
    let value = tape.value(loss).item();
    tape.backward(loss).unwrap();
    (value, out.plans, tape)
}

/// Worst relative error over every parameter element of a model, with the
/// routing of the unperturbed pass held fixed.
pub fn model_gradcheck(
    model: &Transformer<f64>,
    tokens: &[u32],
    targets: &[usize],
    batch: usize,
) -> (f64, usize) {
    let (_, plans, tape) = model_loss(model, tokens, targets, batch, None);
    let mut store = model.params().clone();
    store.zero_grad();
    store.accumulate_from(&tape).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in 0..store.len() {
        let id = ParamId(id);
        for j in 0..store.get(id).value.numel() {
            let numeric = {
                let mut m = model.clone();
                m.params_mut().get_mut(id).value.data_mut()[j] += FD_STEP;
                let plus = model_loss(&m, tokens, targets, batch, Some(&plans)).0;
                let mut m = model.clone();
                m.params_mut().get_mut(id).value.data_mut()[j] -= FD_STEP;
                let minus = model_loss(&m, tokens, targets, batch, Some(&plans)).0;
                (plus - minus) / (2.0 * FD_STEP)
            };
            worst = worst.max(rel_err(store.get(id).grad.data()[j], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

/// A random model whose weights are large enough that every parameter
/// receives a clearly non-zero gradient.
pub fn random_model(cfg: ModelConfig, seed: u64) -> Transformer<f64> {
    let mut model = Transformer::<f64>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for p in model.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    model
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Finite-difference check of every differentiable tape operation, as
/// `(name, worst relative error)`.
pub fn op_gradchecks() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape, -1.0, 1.0);
    let a23 = r(&[2, 3]);
    let b34 = r(&[3, 4]);
    let b43 = r(&[4, 3]);
    let x23b = r(&[2, 3]);
    let bias3 = r(&[3]);
    let bias4 = r(&[4]);
    let pos23 = random_tensor(&mut ChaCha8Rng::seed_from_u64(8), &[2, 3], 0.5, 2.0);
    let s334 = r(&[3, 3, 4]);
    let s334b = r(&[3, 3, 4]);
    let s343 = r(&[3, 4, 3]);
    let sq = r(&[2, 4, 4]);
    let x4 = r(&[2, 3, 2, 2]);
    let heads_in = r(&[6, 4]);
    let heads_out = r(&[4, 3, 2]);
    let logits = r(&[3, 5]);
    let teacher = r(&[3, 5]);
    let w3 = r(&[3]);
    let w2 = r(&[2]);

    let mut out = Vec::new();
    let mut check = |name: &'static str,
                     inputs: &[Tensor<f64>],
                     f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>| {
        out.push((name, gradcheck(inputs, f)));
    };
    check("matmul", &[a23.clone(), b34.clone()], &|t, v| {
        t.matmul(v[0], v[1])
    });
    check("matmul_nt", &[a23.clone(), b43.clone()], &|t, v| {
        t.matmul_nt(v[0], v[1])
    });
    check("bmm", &[s334.clone(), s343.clone()], &|t, v| {
        t.bmm(v[0], v[1], false)
    });
    check("bmm_nt", &[s334.clone(), s334b.clone()], &|t, v| {
        t.bmm(v[0], v[1], true)
    });
    check("add", &[a23.clone(), x23b.clone()], &|t, v| {
        t.add(v[0], v[1])
    });
    check("sub", &[a23.clone(), x23b.clone()], &|t, v| {
        t.sub(v[0], v[1])
    });
    check("mul", &[a23.clone(), x23b.clone()], &|t, v| {
        t.mul(v[0], v[1])
    });
    check("div", &[a23.clone(), pos23.clone()], &|t, v| {
        t.div(v[0], v[1])
    });
    check("add_row", &[a23.clone(), bias3.clone()], &|t, v| {
        t.add_row(v[0], v[1])
    });
    check(
        "linear",
        &[a23.clone(), b34.clone(), bias4.clone()],
        &|t, v| t.linear(v[0], v[1], v[2]),
    );
    check("scale", std::slice::from_ref(&a23), &|t, v| {
        t.scale(v[0], -1.7)
    });
    check("gelu", std::slice::from_ref(&s334), &|t, v| t.gelu(v[0]));
    check("softmax", std::slice::from_ref(&s334), &|t, v| {
        t.softmax(v[0])
    });
    check("causal_softmax", std::slice::from_ref(&sq), &|t, v| {
        t.causal_softmax(v[0])
    });
    check("layer_norm", &[s334.clone(), r(&[4]), r(&[4])], &|t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    let targets = [0usize, 4, 2];
    check("cross_entropy", std::slice::from_ref(&logits), &|t, v| {
        t.cross_entropy(v[0], &targets)
    });
    check("kl_div", std::slice::from_ref(&logits), &|t, v| {
        t.kl_div(v[0], &teacher)
    });
    check("gather_rows", std::slice::from_ref(&b43), &|t, v| {
        t.gather_rows(v[0], &[3, 0, 3, 1])
    });
    check("scatter_add_rows", std::slice::from_ref(&b43), &|t, v| {
        t.scatter_add_rows(v[0], &[1, 0, 1, 2], 3)
    });
    check("scale_rows", &[a23.clone(), w2.clone()], &|t, v| {
        t.scale_rows(v[0], v[1])
    });
    check("gather_elems", std::slice::from_ref(&a23), &|t, v| {
        t.gather_elems(v[0], &[5, 0, 5, 2])
    });
    check("concat_rows", &[a23.clone(), b43.clone()], &|t, v| {
        t.concat_rows(&[v[0], v[1]])
    });
    check("sum", std::slice::from_ref(&a23), &|t, v| t.sum(v[0]));
    check("mean", std::slice::from_ref(&a23), &|t, v| t.mean(v[0]));
    check("sum_axis0", std::slice::from_ref(&s334), &|t, v| {
        t.sum_axis0(v[0])
    });
    check("reshape", std::slice::from_ref(&s334), &|t, v| {
        t.reshape(v[0], &[9, 4])
    });
    check("swap_axes12", std::slice::from_ref(&x4), &|t, v| {
        t.swap_axes12(v[0])
    });
    check("split_heads", std::slice::from_ref(&heads_in), &|t, v| {
        t.split_heads(v[0], 2, 3, 2)
    });
    check("merge_heads", std::slice::from_ref(&heads_out), &|t, v| {
        t.merge_heads(v[0], 2, 2)
    });
    check("scale_rows_col", &[b34.clone(), w3.clone()], &|t, v| {
        t.scale_rows(v[0], v[1])
    });
    out
}

/// Outcome of one randomized expert-layer forward pass.
#[derive(Debug, Clone)]
pub struct RoutingTrial {
    pub experts: usize,
    pub tokens: usize,
    pub capacity_factor: f64,
    /// No expert received more than its capacity.
    pub capacity_ok: bool,
    /// Renormalized top-2 weights sum to 1 for every token.
    pub weights_ok: bool,
    /// Each output row equals the weighted sum of its dispatched routes
    /// only; fully overflowed rows are zero.
    pub overflow_ok: bool,
    pub overflowed_routes: usize,
    pub gate_loss: f64,
}

/// Random tokens through a random expert layer with `experts` experts.
pub fn routing_trial(
    rng: &mut ChaCha8Rng,
    experts: usize,
    tokens: usize,
    capacity_factor: f64,
) -> RoutingTrial {
    use moelab::model::{expert_capacity, ffn, gate_loss, moe_layer_forward, FfnVars, MoeVars};
    let h = 4;
    let inner = 8;
    // Larger gate weights give peaked, unbalanced routing.
    let gate_scale = rng.gen_range(0.1..4.0);
    let x = random_tensor(rng, &[tokens, h], -1.0, 1.0);
    let gate = random_tensor(rng, &[h, experts], -gate_scale, gate_scale);
    let weights: Vec<[Tensor<f64>; 4]> = (0..experts)
        .map(|_| {
            [
                random_tensor(rng, &[h, inner], -1.0, 1.0),
                random_tensor(rng, &[inner], -1.0, 1.0),
                random_tensor(rng, &[inner, h], -1.0, 1.0),
                random_tensor(rng, &[h], -1.0, 1.0),
            ]
        })
        .collect();

    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let bind = |tape: &mut Tape<f64>, w: &[Tensor<f64>; 4]| FfnVars {
        w1: tape.constant(w[0].clone()),
        b1: tape.constant(w[1].clone()),
        w2: tape.constant(w[2].clone()),
        b2: tape.constant(w[3].clone()),
    };
    let vars = MoeVars {
        gate: tape.constant(gate),
        experts: weights.iter().map(|w| bind(&mut tape, w)).collect(),
    };
    let out = moe_layer_forward(&mut tape, xv, &vars, capacity_factor, None, None).unwrap();
    let stats = &out.stats;
    let y = tape.value(out.output).data().to_vec();

    let cap = expert_capacity(tokens, experts, capacity_factor);
    let capacity_ok = stats.capacity == cap && stats.per_expert_count.iter().all(|&c| c <= cap);
    let weights_ok = stats
        .top2
        .iter()
        .all(|r| (r[0].1 + r[1].1 - 1.0).abs() <= 1e-6);

    // Reference: each token's surviving routes evaluated on their own.
    let mut overflow_ok = true;
    for t in 0..tokens {
        let mut expect = vec![0.0; h];
        for r in 0..2 {
            if stats.overflow_mask[t][r] {
                continue;
            }
            let (e, w) = stats.top2[t][r];
            let mut ref_tape = Tape::<f64>::new();
            let row = Tensor::new(vec![1, h], x.data()[t * h..(t + 1) * h].to_vec()).unwrap();
            let xr = ref_tape.constant(row);
            let fv = bind(&mut ref_tape, &weights[e]);
            let o = ffn(&mut ref_tape, xr, &fv).unwrap();
            for (acc, v) in expect.iter_mut().zip(ref_tape.value(o).data()) {
                *acc += w * v;
            }
        }
        let got = &y[t * h..(t + 1) * h];
        if got.iter().zip(&expect).any(|(a, b)| (a - b).abs() > 1e-9) {
            overflow_ok = false;
        }
    }
    RoutingTrial {
        experts,
        tokens,
        capacity_factor,
        capacity_ok,
        weights_ok,
        overflow_ok,
        overflowed_routes: stats.overflow_mask.iter().flatten().filter(|&&b| b).count(),
        gate_loss: gate_loss(stats),
    }
}

/// Next-token probabilities of the four-token toy model, row = previous token.
pub const TOY_PROBS: [[f64; 4]; 4] = [
    [0.1, 0.2, 0.3, 0.4],
    [0.25, 0.25, 0.25, 0.25],
    [0.7, 0.1, 0.1, 0.1],
    [0.05, 0.15, 0.3, 0.5],
];

pub fn toy_model() -> BigramModel {
    let table = TOY_PROBS.iter().flatten().map(|p| p.ln()).collect();
    BigramModel::new(4, 16, table).unwrap()
}

/// Probability of `tokens` following `context` under [`TOY_PROBS`],
/// multiplied out directly.
pub fn toy_prob(context: &[u32], tokens: &[u32]) -> f64 {
    let mut prev = *context.last().unwrap() as usize;
    let mut p = 1.0;
    for &t in tokens {
        p *= TOY_PROBS[prev][t as usize];
        prev = t as usize;
    }
    p
}

/// Every scoring rule on the toy model against products of table entries.
/// Returns `(rule, worst absolute score error, prediction matches)`.
pub fn scorer_oracle_checks() -> Vec<(ScoringRule, f64, bool)> {
    let model = toy_model();
    let ctx = vec![0u32, 2];
    let task = |rule, candidates: Vec<Vec<u32>>, answer_context| PromptTask {
        context: ctx.clone(),
        candidates,
        rule,
        answer_context,
        gold: 0,
        pool: Vec::new(),
    };
    let cases: Vec<(PromptTask, Vec<f64>)> = vec![
        (
            task(
                ScoringRule::SumLl,
                vec![vec![1, 3], vec![3, 3, 1], vec![0]],
                None,
            ),
            vec![
                toy_prob(&ctx, &[1, 3]).ln(),
                toy_prob(&ctx, &[3, 3, 1]).ln(),
                toy_prob(&ctx, &[0]).ln(),
            ],
        ),
        (
            // Shared prefix [1, 2]; only the tokens after it count.
            task(
                ScoringRule::MeanLlIgnorePrefix,
                vec![vec![1, 2, 0], vec![1, 2, 3, 3]],
                None,
            ),
            vec![
                TOY_PROBS[2][0].ln(),
                (TOY_PROBS[2][3] * TOY_PROBS[3][3]).ln() / 2.0,
            ],
        ),
        (
            // Shared suffix [1, 3]; its probability depends on what precedes it.
            task(
                ScoringRule::CommonSuffixLl,
                vec![vec![0, 1, 3], vec![2, 1, 3]],
                None,
            ),
            vec![
                (TOY_PROBS[0][1] * TOY_PROBS[1][3]).ln(),
                (TOY_PROBS[2][1] * TOY_PROBS[1][3]).ln(),
            ],
        ),
        (
            task(
                ScoringRule::UncondNormalized,
                vec![vec![1, 2], vec![0, 0]],
                Some(vec![3]),
            ),
            vec![
                (toy_prob(&ctx, &[1, 2]) / toy_prob(&[3], &[1, 2])).ln(),
                (toy_prob(&ctx, &[0, 0]) / toy_prob(&[3], &[0, 0])).ln(),
            ],
        ),
    ];
    cases
        .into_iter()
        .map(|(t, expect)| {
            let got = score_candidates(&t, &model).unwrap();
            let worst = got
                .scores
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let best = (0..expect.len()).fold(0, |b, i| if expect[i] > expect[b] { i } else { b });
            (
                t.rule,
                worst,
                got.prediction == best && got.scores.len() == expect.len(),
            )
        })
        .collect()
}
