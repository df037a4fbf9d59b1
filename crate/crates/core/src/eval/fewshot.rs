use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::LanguageModel;
use super::scoring::{score_with_context, PromptTask};
use crate::error::{Error, Result};
use crate::tensor::kernels::map_indexed;
use crate::tensor::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub block_size: usize,
    pub k_shots: usize,
    pub n_runs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            block_size: 2048,
            k_shots: 0,
            n_runs: 25,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 2 {
            return Err(Error::config("block_size must be at least 2"));
        }
        if self.n_runs == 0 {
            return Err(Error::config("n_runs must be at least 1"));
        }
        Ok(())
    }
}

/// Prompt of `k` pool examples drawn without replacement, each followed by
/// `separator`, then `test_context`. Whole examples are dropped from the
/// front until the prompt has at most `max_ctx` tokens.
pub fn build_fewshot_prompt<R: Rng + ?Sized>(
    pool: &[Vec<u32>],
    k: usize,
    test_context: &[u32],
    max_ctx: usize,
    separator: &[u32],
    rng: &mut R,
) -> Result<Vec<u32>> {
    if test_context.len() > max_ctx {
        return Err(Error::config(format!(
            "test context of {} tokens exceeds the {max_ctx}-token budget",
            test_context.len()
        )));
    }
    if pool.len() < k {
        return Err(Error::config(format!(
            "few-shot pool has {} examples, {k} requested",
            pool.len()
        )));
    }
    let picked: Vec<&Vec<u32>> = sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| &pool[i])
        .collect();
    let cost = |e: &Vec<u32>| e.len() + separator.len();
    let mut total: usize = picked.iter().map(|e| cost(e)).sum::<usize>() + test_context.len();
    let mut start = 0;
    while total > max_ctx {
        total -= cost(picked[start]);
        start += 1;
    }
    let mut prompt = Vec::with_capacity(total);
    for e in &picked[start..] {
        prompt.extend_from_slice(e);
        prompt.extend_from_slice(separator);
    }
    prompt.extend_from_slice(test_context);
    Ok(prompt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub scores: Vec<f64>,
    pub prediction: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub mean_accuracy: f64,
    pub per_run: Vec<f64>,
    /// Per-task outcomes of the first run.
    pub results: Vec<TaskResult>,
}

/// Generator for run `run` of task `task`: independent of evaluation order.
fn task_rng(seed: u64, run: usize, task: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((run as u64) << 32) | task as u64);
    rng
}

/// Accuracy over `n_runs` draws of few-shot demonstrations. Each task uses
/// its own pool; with `k_shots = 0` every run is the zero-shot evaluation.
pub fn fewshot_eval<M: LanguageModel + ?Sized>(
    tasks: &[PromptTask],
    ids: &[String],
    model: &M,
    cfg: &EvalConfig,
    separator: &[u32],
) -> Result<FewShotReport> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::config("no tasks to evaluate"));
    }
    if ids.len() != tasks.len() {
        return Err(Error::Contract(format!(
            "{} ids for {} tasks",
            ids.len(),
            tasks.len()
        )));
    }
    for t in tasks {
        t.validate()?;
        if t.pool.len() < cfg.k_shots {
            return Err(Error::config(format!(
                "few-shot pool has {} examples, {} requested",
                t.pool.len(),
                cfg.k_shots
            )));
        }
    }
    let mut per_run = Vec::with_capacity(cfg.n_runs);
    let mut first = Vec::new();
    for run in 0..cfg.n_runs {
        let outcomes = map_indexed(Exec::current(), tasks.len(), |i| {
            let task = &tasks[i];
            let longest = task.candidates.iter().map(Vec::len).max().unwrap_or(0);
            let budget = (model.max_len() + 1).saturating_sub(longest);
            let mut rng = task_rng(cfg.seed, run, i);
            let prompt = build_fewshot_prompt(
                &task.pool,
                cfg.k_shots,
                &task.context,
                budget,
                separator,
                &mut rng,
            )?;
            let scored = score_with_context(task, &prompt, model)?;
            Ok(TaskResult {
                task_id: ids[i].clone(),
                correct: scored.prediction == task.gold,
                prediction: scored.prediction,
                scores: scored.scores,
            })
        });
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
        let correct = outcomes.iter().filter(|r| r.correct).count();
        per_run.push(correct as f64 / tasks.len() as f64);
        if run == 0 {
            first = outcomes;
        }
    }
    Ok(FewShotReport {
        mean_accuracy: per_run.iter().sum::<f64>() / per_run.len() as f64,
        per_run,
        results: first,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_keeps_whole_examples() {
        let pool: Vec<Vec<u32>> = (0..5).map(|i| vec![i; 10]).collect();
        let test = vec![9; 15];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = build_fewshot_prompt(&pool, 5, &test, 40, &[7], &mut rng).unwrap();
        assert_eq!(p.len(), 37);
        assert!(p.ends_with(&test));
        assert_eq!(p[10], 7);
        assert_eq!(p[21], 7);

        let p = build_fewshot_prompt(&pool, 0, &test, 40, &[7], &mut rng).unwrap();
        assert_eq!(p, test);
        assert!(build_fewshot_prompt(&pool, 6, &test, 400, &[7], &mut rng).is_err());
        assert!(build_fewshot_prompt(&pool, 1, &test, 10, &[7], &mut rng).is_err());
    }
}
