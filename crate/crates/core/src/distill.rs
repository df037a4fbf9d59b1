//! Training a dense student against a teacher's output distribution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::pipeline::{train, Objective, RunConfig, RunSummary};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub ce_weight: f64,
    pub soft_weight: f64,
    /// Softening temperature applied to both logit sets in the soft term.
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            ce_weight: 0.25,
            soft_weight: 0.75,
            temperature: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ce_weight < 0.0 || self.soft_weight < 0.0 {
            return Err(Error::config("distillation weights must be non-negative"));
        }
        if (self.ce_weight + self.soft_weight - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "distillation weights sum to {}, expected 1",
                self.ce_weight + self.soft_weight
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }
}

/// Differentiable pieces of the distillation objective.
#[derive(Debug, Clone, Copy)]
pub struct DistillTerms {
    pub total: Var,
    pub ce: Var,
    pub soft: Var,
}

/// `ce_weight · CE(student, targets) + soft_weight · KL(teacher ‖ student)`,
/// both averaged over tokens. The teacher logits are constants.
pub fn distill_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    targets: &[usize],
    cfg: &DistillConfig,
) -> Result<DistillTerms> {
    cfg.validate()?;
    let ce = tape.cross_entropy(student_logits, targets)?;
    let soft = if cfg.temperature == 1.0 {
        tape.kl_div(student_logits, teacher_logits)?
    } else {
        let inv = 1.0 / cfg.temperature;
        let s = tape.scale(student_logits, inv)?;
        let t: Vec<f64> = teacher_logits
            .data()
            .iter()
            .map(|v| v.to_f64() * inv)
            .collect();
        tape.kl_div(s, &Tensor::from_f64(teacher_logits.shape().to_vec(), &t)?)?
    };
    let a = tape.scale(ce, cfg.ce_weight)?;
    let b = tape.scale(soft, cfg.soft_weight)?;
    let total = tape.add(a, b)?;
    Ok(DistillTerms { total, ce, soft })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub baseline: RunSummary,
    pub distilled: RunSummary,
}

impl DistillReport {
    pub fn csv(&self) -> String {
        format!(
            "model,params,val_ppl\nbaseline,{},{}\ndistilled,{},{}\n",
            self.baseline.params,
            self.baseline.val_ppl,
            self.distilled.params,
            self.distilled.val_ppl
        )
    }
}

/// Trains the student of `student` twice with identical seeds and budget:
/// once on the plain language-modeling loss, once distilled from
/// `teacher`. Runs go to `baseline/` and `distilled/` under the configured
/// output directory, next to a `distill.csv` comparison.
pub fn distill_train<T: Scalar>(
    teacher: &Transformer<T>,
    student: &RunConfig,
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    cfg.validate()?;
    if student.model.is_moe() {
        return Err(Error::config(
            "the distillation student must be dense (experts = 0)",
        ));
    }
    let root = student.out_dir.clone();
    let mut base_cfg = student.clone();
    base_cfg.out_dir = root.join("baseline");
    let mut dist_cfg = student.clone();
    dist_cfg.out_dir = root.join("distilled");
    let baseline = train::<T>(&base_cfg, Objective::LanguageModel, None)?.summary;
    let distilled = train::<T>(
        &dist_cfg,
        Objective::Distill {
            teacher,
            config: *cfg,
        },
        None,
    )?
    .summary;
    let report = DistillReport {
        baseline,
        distilled,
    };
    let csv_path = root.join("distill.csv");
    std::fs::write(&csv_path, report.csv()).map_err(|e| Error::io(&csv_path, e))?;
    Ok(report)
}

/// Loads a teacher checkpoint written by a training run.
pub fn load_teacher<T: Scalar>(path: &Path) -> Result<Transformer<T>> {
    crate::pipeline::load_model(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_two_token_example() {
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), true);
        let t = Tensor::new(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap();
        let terms = distill_loss(&mut tape, s, &t, &[0], &DistillConfig::default()).unwrap();
        let kl = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        let expect = 0.25 * 2f64.ln() + 0.75 * kl;
        assert!((tape.value(terms.total).item() - expect).abs() < 1e-12);
        assert!((expect - 0.2714).abs() < 1e-4);
    }

    #[test]
    fn equal_logits_leave_only_cross_entropy() {
        let z = Tensor::new(vec![2, 3], vec![0.1, -0.4, 2.0, 1.0, 0.0, -1.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(z.clone(), true);
        let terms = distill_loss(&mut tape, s, &z, &[2, 0], &DistillConfig::default()).unwrap();
        let ce = tape.value(terms.ce).item();
        assert!(tape.value(terms.soft).item().abs() < 1e-12);
        assert!((tape.value(terms.total).item() - 0.25 * ce).abs() < 1e-12);

        let cfg = DistillConfig {
            ce_weight: 1.0,
            soft_weight: 0.0,
            temperature: 1.0,
        };
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(z.clone(), true);
        let terms = distill_loss(&mut tape, s, &z, &[2, 0], &cfg).unwrap();
        assert_eq!(tape.value(terms.total).item(), ce);
    }

    #[test]
    fn config_checks() {
        assert!(DistillConfig {
            ce_weight: 0.5,
            soft_weight: 0.6,
            temperature: 1.0
        }
        .validate()
        .is_err());
        let mut run = RunConfig::default();
        run.model.experts = 4;
        let teacher = Transformer::<f32>::new(
            crate::model::ModelConfig {
                layers: 2,
                hidden: 16,
                heads: 2,
                seq_len: 8,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert!(matches!(
            distill_train(&teacher, &run, &DistillConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
