//! Validation metrics: constraint-level (micro) and plan-level (macro) pass
//! rates per constraint class, the final pass rate and the average score.

use rayon::prelude::*;
use serde::Serialize;

use crate::envs::{ConstraintClass, Difficulty, Environment, Task};
use crate::policy::{sample_rollout, PolicySnapshot};
use crate::rng::{self, Purpose};
use crate::sampling::task_key;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedPlan {
    pub task_id: String,
    pub difficulty: Difficulty,
    pub constraint_results: Vec<(ConstraintClass, bool)>,
    pub final_pass: bool,
    pub score: f64,
}

impl EvaluatedPlan {
    pub fn new(
        task_id: impl Into<String>,
        difficulty: Difficulty,
        results: Vec<(ConstraintClass, bool)>,
        score: f64,
    ) -> Self {
        let final_pass = results.iter().all(|(_, p)| *p);
        EvaluatedPlan {
            task_id: task_id.into(),
            difficulty,
            constraint_results: results,
            final_pass,
            score,
        }
    }

    fn in_class(&self, class: ConstraintClass) -> impl Iterator<Item = bool> + '_ {
        self.constraint_results
            .iter()
            .filter(move |(c, _)| *c == class)
            .map(|(_, p)| *p)
    }
}

pub fn micro_pass_rate(plans: &[EvaluatedPlan], class: ConstraintClass) -> Result<f64> {
    let (mut passed, mut total) = (0usize, 0usize);
    for p in plans {
        for ok in p.in_class(class) {
            total += 1;
            passed += ok as usize;
        }
    }
    if total == 0 {
        return Err(Error::Domain(format!("no {class:?} constraints to rate")));
    }
    Ok(passed as f64 / total as f64)
}

/// A plan without constraints of `class` satisfies that class vacuously.
pub fn macro_pass_rate(plans: &[EvaluatedPlan], class: ConstraintClass) -> Result<f64> {
    if plans.is_empty() {
        return Err(Error::Domain("macro pass rate of an empty plan set".into()));
    }
    let ok = plans.iter().filter(|p| p.in_class(class).all(|x| x)).count();
    Ok(ok as f64 / plans.len() as f64)
}

pub fn final_pass_rate(plans: &[EvaluatedPlan]) -> Result<f64> {
    if plans.is_empty() {
        return Err(Error::Domain("final pass rate of an empty plan set".into()));
    }
    Ok(plans.iter().filter(|p| p.final_pass).count() as f64 / plans.len() as f64)
}

pub fn avg_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Domain("average of no scores".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Rates over one set of plans. Micro rates are `None` when the set holds no
/// constraint of that class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rates {
    pub plans: usize,
    pub commonsense_micro: Option<f64>,
    pub commonsense_macro: f64,
    pub hard_micro: Option<f64>,
    pub hard_macro: f64,
    pub final_pass_rate: f64,
    pub avg_score: f64,
}

impl Rates {
    pub fn of(plans: &[EvaluatedPlan]) -> Result<Rates> {
        let scores: Vec<f64> = plans.iter().map(|p| p.score).collect();
        Ok(Rates {
            plans: plans.len(),
            commonsense_micro: micro_pass_rate(plans, ConstraintClass::Commonsense).ok(),
            commonsense_macro: macro_pass_rate(plans, ConstraintClass::Commonsense)?,
            hard_micro: micro_pass_rate(plans, ConstraintClass::Hard).ok(),
            hard_macro: macro_pass_rate(plans, ConstraintClass::Hard)?,
            final_pass_rate: final_pass_rate(plans)?,
            avg_score: avg_score(&scores)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub overall: Rates,
    pub easy: Option<Rates>,
    pub medium: Option<Rates>,
    pub hard: Option<Rates>,
}

impl EvalSummary {
    pub fn from_plans(plans: &[EvaluatedPlan]) -> Result<EvalSummary> {
        let tier = |d: Difficulty| {
            let sub: Vec<EvaluatedPlan> = plans.iter().filter(|p| p.difficulty == d).cloned().collect();
            if sub.is_empty() {
                Ok(None)
            } else {
                Rates::of(&sub).map(Some)
            }
        };
        Ok(EvalSummary {
            overall: Rates::of(plans)?,
            easy: tier(Difficulty::Easy)?,
            medium: tier(Difficulty::Medium)?,
            hard: tier(Difficulty::Hard)?,
        })
    }

    pub fn tier(&self, d: Difficulty) -> Option<&Rates> {
        match d {
            Difficulty::Easy => self.easy.as_ref(),
            Difficulty::Medium => self.medium.as_ref(),
            Difficulty::Hard => self.hard.as_ref(),
        }
    }
}

/// Samples `samples` answers per task from the feedback-free policy π(·|q)
/// and verifies them. Draws depend only on (seed, task, sample index), so
/// evaluations at different training steps share their random numbers.
pub fn evaluate_plans(
    snapshot: &PolicySnapshot,
    env: &Environment,
    tasks: &[Task],
    samples: usize,
    max_answer_len: usize,
    seed: u64,
) -> Result<Vec<EvaluatedPlan>> {
    if tasks.is_empty() || samples == 0 {
        return Err(Error::Domain("evaluation needs tasks and samples >= 1".into()));
    }
    let plans = tasks
        .par_iter()
        .flat_map_iter(|task| {
            let key = task_key(&task.id);
            (0..samples).map(move |s| {
                let mut rng = rng::stream(seed, Purpose::Eval, &[key, s as u64]);
                let seq = sample_rollout(snapshot, &task.prompt, max_answer_len, &mut rng);
                let report = env.verify(task, &seq.tokens);
                let results = report.constraint_results.iter().map(|r| (r.class, r.passed)).collect();
                EvaluatedPlan::new(task.id.clone(), task.difficulty, results, report.reward)
            })
        })
        .collect();
    Ok(plans)
}

pub fn evaluate(
    snapshot: &PolicySnapshot,
    env: &Environment,
    tasks: &[Task],
    samples: usize,
    max_answer_len: usize,
    seed: u64,
) -> Result<EvalSummary> {
    EvalSummary::from_plans(&evaluate_plans(snapshot, env, tasks, samples, max_answer_len, seed)?)
}
