use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::model::{continuation_log_probs, LanguageModel};
use crate::error::{Error, Result};

/// How a candidate completion is turned into a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScoringRule {
    /// Mean token log-probability after the prefix shared by all candidates.
    MeanLlIgnorePrefix,
    /// Log-likelihood of the suffix shared by all candidates.
    CommonSuffixLl,
    /// `log p(candidate | context) - log p(candidate | answer_context)`.
    UncondNormalized,
    /// Summed token log-probability.
    SumLl,
    /// Mean token log-probability over the whole candidate.
    MeanLl,
}

impl ScoringRule {
    pub const ALL: [ScoringRule; 5] = [
        ScoringRule::MeanLlIgnorePrefix,
        ScoringRule::CommonSuffixLl,
        ScoringRule::UncondNormalized,
        ScoringRule::SumLl,
        ScoringRule::MeanLl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoringRule::MeanLlIgnorePrefix => "MEAN_LL_IGNORE_PREFIX",
            ScoringRule::CommonSuffixLl => "COMMON_SUFFIX_LL",
            ScoringRule::UncondNormalized => "UNCOND_NORMALIZED",
            ScoringRule::SumLl => "SUM_LL",
            ScoringRule::MeanLl => "MEAN_LL",
        }
    }
}

impl fmt::Display for ScoringRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoringRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoringRule::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown scoring rule {s}")))
    }
}

/// A multiple-choice instance over token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTask {
    pub context: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub rule: ScoringRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_context: Option<Vec<u32>>,
    pub gold: usize,
    /// Solved examples (context and gold answer) available as few-shot
    /// demonstrations.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pool: Vec<Vec<u32>>,
}

impl PromptTask {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::config("a task needs at least two candidates"));
        }
        if self.gold >= self.candidates.len() {
            return Err(Error::config(format!(
                "gold index {} out of range for {} candidates",
                self.gold,
                self.candidates.len()
            )));
        }
        if self.context.is_empty() {
            return Err(Error::config("task context is empty"));
        }
        if self.candidates.iter().any(|c| c.is_empty()) {
            return Err(Error::config("empty candidate"));
        }
        match (self.rule, &self.answer_context) {
            (ScoringRule::UncondNormalized, None) => Err(Error::config(
                "UNCOND_NORMALIZED requires an answer_context",
            )),
            (ScoringRule::UncondNormalized, Some(a)) if a.is_empty() => {
                Err(Error::config("answer_context is empty"))
            }
            (rule, Some(_)) if rule != ScoringRule::UncondNormalized => Err(Error::config(
                format!("answer_context is only used by UNCOND_NORMALIZED, not {rule}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub scores: Vec<f64>,
    pub prediction: usize,
}

fn common_prefix_len(cands: &[Vec<u32>]) -> usize {
    let first = &cands[0];
    (0..first.len())
        .take_while(|&i| cands.iter().all(|c| c.len() > i && c[i] == first[i]))
        .count()
}

fn common_suffix_len(cands: &[Vec<u32>]) -> usize {
    let first = &cands[0];
    (1..=first.len())
        .take_while(|&k| {
            cands
                .iter()
                .all(|c| c.len() >= k && c[c.len() - k] == first[first.len() - k])
        })
        .count()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Scores every candidate of `task` with `context` in place of the task's
/// own context (few-shot prompts prepend demonstrations to it).
pub fn score_with_context<M: LanguageModel + ?Sized>(
    task: &PromptTask,
    context: &[u32],
    model: &M,
) -> Result<Scored> {
    task.validate()?;
    let cands = &task.candidates;
    let scores = match task.rule {
        ScoringRule::SumLl => cands
            .iter()
            .map(|c| Ok(continuation_log_probs(model, context, c)?.iter().sum()))
            .collect::<Result<Vec<f64>>>()?,
        ScoringRule::MeanLl => cands
            .iter()
            .map(|c| Ok(mean(&continuation_log_probs(model, context, c)?)))
            .collect::<Result<Vec<f64>>>()?,
        ScoringRule::MeanLlIgnorePrefix => {
            let min_len = cands.iter().map(Vec::len).min().unwrap_or(0);
            let prefix = common_prefix_len(cands).min(min_len - 1);
            cands
                .iter()
                .map(|c| Ok(mean(&continuation_log_probs(model, context, c)?[prefix..])))
                .collect::<Result<Vec<f64>>>()?
        }
        ScoringRule::CommonSuffixLl => {
            let suffix = common_suffix_len(cands);
            if suffix == 0 {
                return Err(Error::config(
                    "COMMON_SUFFIX_LL needs candidates sharing a suffix",
                ));
            }
            cands
                .iter()
                .map(|c| {
                    let lp = continuation_log_probs(model, context, c)?;
                    Ok(lp[lp.len() - suffix..].iter().sum())
                })
                .collect::<Result<Vec<f64>>>()?
        }
        ScoringRule::UncondNormalized => {
            let answer = task.answer_context.as_deref().expect("validated");
            cands
                .iter()
                .map(|c| {
                    let cond: f64 = continuation_log_probs(model, context, c)?.iter().sum();
                    let uncond: f64 = continuation_log_probs(model, answer, c)?.iter().sum();
                    Ok(cond - uncond)
                })
                .collect::<Result<Vec<f64>>>()?
        }
    };
    let prediction = argmax(&scores);
    Ok(Scored { scores, prediction })
}

pub fn score_candidates<M: LanguageModel + ?Sized>(task: &PromptTask, model: &M) -> Result<Scored> {
    score_with_context(task, &task.context, model)
}
