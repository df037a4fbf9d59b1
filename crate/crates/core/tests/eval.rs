mod common;

use common::*;
use moelab::eval::toy::UniformModel;
use moelab::eval::{
    build_fewshot_prompt, fewshot_eval, icat, perplexity, score_candidates, EvalConfig, PromptTask,
    ScoringRule,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn scoring_rules_match_hand_products() {
    let checks = scorer_oracle_checks();
    assert_eq!(checks.len(), 4);
    for (rule, err, argmax_ok) in checks {
        assert!(err < 1e-9, "{rule}: {err}");
        assert!(argmax_ok, "{rule}");
    }
}

#[test]
fn common_suffix_scores_follow_their_candidates() {
    let model = toy_model();
    let mk = |context: Vec<u32>| PromptTask {
        context,
        candidates: vec![vec![0, 1, 3], vec![1, 1, 3]],
        rule: ScoringRule::CommonSuffixLl,
        answer_context: None,
        gold: 0,
        pool: Vec::new(),
    };
    // Same candidates, same context: identical scores.
    let a = score_candidates(&mk(vec![2]), &model).unwrap();
    let b = score_candidates(&mk(vec![2]), &model).unwrap();
    assert_eq!(a, b);
    // Swapping the candidate order permutes the scores.
    let mut swapped = mk(vec![2]);
    swapped.candidates.reverse();
    let s = score_candidates(&swapped, &model).unwrap();
    assert_eq!(s.scores, vec![a.scores[1], a.scores[0]]);
}

#[test]
fn toy_perplexity_matches_hand_nll() {
    let model = toy_model();
    let docs = vec![vec![0u32, 3, 3, 1, 2]];
    let r = perplexity(&model, &docs, &[], 5).unwrap();
    let p = toy_prob(&[0], &[3, 3, 1, 2]);
    assert_eq!(r.predicted, 4);
    assert!((r.nll + p.ln()).abs() < 1e-12);
    assert!((r.perplexity - p.powf(-0.25)).abs() < 1e-9);

    // Two blocks of the same stream lose the prediction across the cut.
    let split = perplexity(&model, &docs, &[], 3).unwrap();
    assert_eq!(split.predicted, 3);
    assert_ne!(split.perplexity, r.perplexity);
}

#[test]
fn uniform_perplexity_is_vocab() {
    let m = UniformModel {
        vocab: 256,
        max_len: 32,
    };
    let docs: Vec<Vec<u32>> = (0..5)
        .map(|d| (0..40).map(|i| (i * 7 + d) % 256).collect())
        .collect();
    let r = perplexity(&m, &docs, &[10, 10], 33).unwrap();
    assert!((r.perplexity / 256.0 - 1.0).abs() < 1e-9);
}

#[test]
fn fewshot_truncation_example() {
    let pool: Vec<Vec<u32>> = (0..5).map(|i| vec![i; 10]).collect();
    let test = vec![9u32; 15];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prompt = build_fewshot_prompt(&pool, 4, &test, 40, &[7], &mut rng).unwrap();
    assert_eq!(prompt.len(), 37);
    assert_eq!(prompt.iter().filter(|&&t| t == 7).count(), 2);
    assert!(prompt.ends_with(&test));
    assert!(build_fewshot_prompt(&pool, 1, &[1; 41], 40, &[7], &mut rng).is_err());
    assert!(build_fewshot_prompt(&pool, 6, &test, 400, &[7], &mut rng).is_err());
}

#[test]
fn model_ranking_gold_first_scores_perfectly_for_any_k() {
    // After 2 the toy model strongly prefers 0, so candidate [0] wins.
    let model = toy_model();
    let tasks: Vec<PromptTask> = (0..2)
        .map(|i| PromptTask {
            context: vec![i, 2],
            candidates: vec![vec![0], vec![1]],
            rule: ScoringRule::SumLl,
            answer_context: None,
            gold: 0,
            pool: vec![vec![1, 2, 0], vec![3, 2, 0], vec![0, 2, 0]],
        })
        .collect();
    let ids: Vec<String> = vec!["a".into(), "b".into()];
    for k in 0..=3 {
        let cfg = EvalConfig {
            block_size: 16,
            k_shots: k,
            n_runs: 5,
            seed: 3,
        };
        let r = fewshot_eval(&tasks, &ids, &model, &cfg, &[1]).unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.per_run, vec![1.0; 5]);
        assert_eq!(fewshot_eval(&tasks, &ids, &model, &cfg, &[1]).unwrap(), r);
    }
}

#[test]
fn icat_spot_values() {
    assert!((icat(82.0, 47.2).unwrap() - 77.4).abs() <= 0.05);
    assert_eq!(icat(64.0, 50.0).unwrap(), 64.0);
    assert_eq!(icat(64.0, 0.0).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn fewshot_prompt_respects_budget(
        lens in prop::collection::vec(1usize..12, 1..10),
        k_frac in 0.0f64..1.0,
        test_len in 1usize..20,
        slack in 0usize..60,
        seed in any::<u64>(),
    ) {
        let pool: Vec<Vec<u32>> = lens.iter().enumerate().map(|(i, &n)| vec![i as u32 + 10; n]).collect();
        let k = (k_frac * pool.len() as f64) as usize;
        let test = vec![99u32; test_len];
        let max_ctx = test_len + slack;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt = build_fewshot_prompt(&pool, k, &test, max_ctx, &[0], &mut rng).unwrap();
        prop_assert!(prompt.len() <= max_ctx);
        prop_assert!(prompt.ends_with(&test));
        // The part before the test context is a run of whole examples.
        let head = &prompt[..prompt.len() - test_len];
        for chunk in head.split(|&t| t == 0).filter(|c| !c.is_empty()) {
            let id = chunk[0];
            prop_assert!(chunk.iter().all(|&t| t == id));
            prop_assert_eq!(chunk.len(), lens[(id - 10) as usize]);
        }
    }
}
