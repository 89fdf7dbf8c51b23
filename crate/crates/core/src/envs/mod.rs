//! Rule-based environments. A verifier scores an answer against a task's
//! constraint set and returns a scalar reward together with feedback that
//! names every failed constraint and, where defined, where it failed.

mod constraint_plan;
mod grammar_proof;
mod suite;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::vocab::{TokenId, Vocab};
use crate::Result;

pub use constraint_plan::{ConstraintPlanConfig, ConstraintPlanEnv};
pub use grammar_proof::{GrammarProofConfig, GrammarProofEnv};
pub use suite::{read_suite, suite_from_str, suite_to_string, write_suite};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

/// Constraint classes. `Hard` sorts first: it is the higher-priority class
/// when feedback has to be truncated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintClass {
    Hard,
    Commonsense,
}

/// What a constraint checks. Checkers are pure functions of the task and
/// the answer tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Answer terminates with end-of-sequence and contains only item tokens.
    PlanFormat,
    NoDuplicates,
    PlanLength {
        len: usize,
    },
    Includes {
        item: String,
    },
    Budget {
        limit: u32,
    },
    /// Answer is `op* qed` followed by end-of-sequence.
    ProofFormat,
    ProofReaches {
        start: u32,
        goal: u32,
    },
}

/// One piece of a feedback template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplatePiece {
    Token(String),
    /// Replaced by the violation's detail tokens.
    Detail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub id: u32,
    pub class: ConstraintClass,
    #[serde(flatten)]
    pub kind: ConstraintKind,
    pub feedback_template: Vec<TemplatePiece>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub difficulty: Difficulty,
    pub prompt: Vec<TokenId>,
    pub constraints: Vec<ConstraintSpec>,
}

/// Half-open token span `[start, end)` of the answer.
pub type Locus = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintResult {
    pub constraint_id: u32,
    pub class: ConstraintClass,
    pub passed: bool,
    pub locus: Option<Locus>,
    /// Tokens substituted into the template's detail slot.
    pub detail: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub constraint_id: u32,
    pub class: ConstraintClass,
    pub locus: Option<Locus>,
    /// The instantiated template.
    pub message: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifierReport {
    pub reward: f64,
    pub constraint_results: Vec<ConstraintResult>,
    /// One entry per failed constraint, in constraint order.
    pub feedback: Vec<Violation>,
}

impl VerifierReport {
    pub fn all_passed(&self) -> bool {
        self.constraint_results.iter().all(|c| c.passed)
    }

    pub fn passed_in(&self, class: ConstraintClass) -> (usize, usize) {
        let of_class = self.constraint_results.iter().filter(|c| c.class == class);
        let total = of_class.clone().count();
        (of_class.filter(|c| c.passed).count(), total)
    }
}

/// The result of running a single checker.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CheckOutcome {
    pub passed: bool,
    pub locus: Option<Locus>,
    pub detail: Vec<TokenId>,
}

impl CheckOutcome {
    pub fn pass() -> Self {
        CheckOutcome {
            passed: true,
            locus: None,
            detail: Vec::new(),
        }
    }

    pub fn fail(locus: Option<Locus>, detail: Vec<TokenId>) -> Self {
        CheckOutcome {
            passed: false,
            locus,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    ConstraintPlan(ConstraintPlanConfig),
    GrammarProof(GrammarProofConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::ConstraintPlan(ConstraintPlanConfig::default())
    }
}

/// Task counts per difficulty plus the generation seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    #[serde(default)]
    pub easy: usize,
    #[serde(default)]
    pub medium: usize,
    #[serde(default)]
    pub hard: usize,
    pub seed: u64,
}

impl SuiteSpec {
    pub fn count(&self, d: Difficulty) -> usize {
        match d {
            Difficulty::Easy => self.easy,
            Difficulty::Medium => self.medium,
            Difficulty::Hard => self.hard,
        }
    }
}

/// An immutable environment. `verify` is safe to call from any number of
/// threads.
#[derive(Debug, Clone)]
pub enum Environment {
    ConstraintPlan(ConstraintPlanEnv),
    GrammarProof(GrammarProofEnv),
}

impl Environment {
    pub fn new(cfg: &EnvConfig) -> Result<Self> {
        Ok(match cfg {
            EnvConfig::ConstraintPlan(c) => Environment::ConstraintPlan(ConstraintPlanEnv::new(c.clone())?),
            EnvConfig::GrammarProof(c) => Environment::GrammarProof(GrammarProofEnv::new(c.clone())?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Environment::ConstraintPlan(_) => "constraint_plan",
            Environment::GrammarProof(_) => "grammar_proof",
        }
    }

    pub fn vocab(&self) -> &Vocab {
        match self {
            Environment::ConstraintPlan(e) => e.vocab(),
            Environment::GrammarProof(e) => e.vocab(),
        }
    }

    /// Tokens a well-formed answer is built from.
    pub fn answer_tokens(&self) -> Vec<TokenId> {
        match self {
            Environment::ConstraintPlan(e) => e.answer_tokens(),
            Environment::GrammarProof(e) => e.answer_tokens(),
        }
    }

    pub fn max_feedback_len(&self) -> usize {
        match self {
            Environment::ConstraintPlan(e) => e.config().max_feedback_len,
            Environment::GrammarProof(e) => e.config().max_feedback_len,
        }
    }

    fn check(&self, task: &Task, spec: &ConstraintSpec, answer: &[TokenId]) -> CheckOutcome {
        match self {
            Environment::ConstraintPlan(e) => e.check(task, spec, answer),
            Environment::GrammarProof(e) => e.check(task, spec, answer),
        }
    }

    fn reward(&self, results: &[ConstraintResult]) -> f64 {
        match self {
            Environment::ConstraintPlan(e) => e.reward(results),
            Environment::GrammarProof(e) => e.reward(results),
        }
    }

    /// Scores `answer` against every constraint of `task`.
    pub fn verify(&self, task: &Task, answer: &[TokenId]) -> VerifierReport {
        let vocab = self.vocab();
        let mut results = Vec::with_capacity(task.constraints.len());
        let mut feedback = Vec::new();
        for spec in &task.constraints {
            let out = self.check(task, spec, answer);
            if !out.passed {
                feedback.push(Violation {
                    constraint_id: spec.id,
                    class: spec.class,
                    locus: out.locus,
                    message: instantiate(vocab, &spec.feedback_template, &out.detail),
                });
            }
            results.push(ConstraintResult {
                constraint_id: spec.id,
                class: spec.class,
                passed: out.passed,
                locus: out.locus,
                detail: out.detail,
            });
        }
        let reward = self.reward(&results);
        VerifierReport {
            reward,
            constraint_results: results,
            feedback,
        }
    }

    /// Generates a deterministic task list for `spec`.
    pub fn make_toy_suite(&self, spec: &SuiteSpec) -> Result<Vec<Task>> {
        match self {
            Environment::ConstraintPlan(e) => e.make_suite(spec),
            Environment::GrammarProof(e) => e.make_suite(spec),
        }
    }

    /// Exhaustive search for an answer that passes every constraint.
    pub fn brute_force_solution(&self, task: &Task) -> Option<Vec<TokenId>> {
        match self {
            Environment::ConstraintPlan(e) => e.brute_force_solution(task),
            Environment::GrammarProof(e) => e.brute_force_solution(task),
        }
    }
}

fn instantiate(vocab: &Vocab, template: &[TemplatePiece], detail: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::new();
    for piece in template {
        match piece {
            TemplatePiece::Token(name) => {
                if let Some(t) = vocab.id(name) {
                    out.push(t);
                }
            }
            TemplatePiece::Detail => out.extend_from_slice(detail),
        }
    }
    out
}

fn violation_order(a: &Violation, b: &Violation) -> Ordering {
    (a.class, a.constraint_id).cmp(&(b.class, b.constraint_id))
}

/// Renders feedback as tokens: violations sorted by (class, constraint id)
/// with the hard class first, each expanded through its template. When the
/// result would exceed `max_len`, whole violations are dropped from the
/// lowest-priority end.
pub fn render_feedback(report: &VerifierReport, max_len: usize) -> Vec<TokenId> {
    let mut violations: Vec<&Violation> = report.feedback.iter().collect();
    violations.sort_by(|a, b| violation_order(a, b));
    let mut out = Vec::new();
    for v in violations {
        if out.len() + v.message.len() > max_len {
            break;
        }
        out.extend_from_slice(&v.message);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_with(violations: Vec<Violation>) -> VerifierReport {
        VerifierReport {
            reward: 0.0,
            constraint_results: Vec::new(),
            feedback: violations,
        }
    }

    fn v(id: u32, class: ConstraintClass, msg: &[TokenId]) -> Violation {
        Violation {
            constraint_id: id,
            class,
            locus: None,
            message: msg.to_vec(),
        }
    }

    #[test]
    fn empty_report_renders_empty() {
        assert!(render_feedback(&report_with(vec![]), 100).is_empty());
    }

    #[test]
    fn rendering_ignores_input_order() {
        let a = v(3, ConstraintClass::Commonsense, &[1, 2]);
        let b = v(5, ConstraintClass::Hard, &[3]);
        let c = v(1, ConstraintClass::Commonsense, &[4]);
        let all = [a, b, c];
        let reference = render_feedback(&report_with(all.to_vec()), 100);
        assert_eq!(reference, vec![3, 4, 1, 2]);
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for p in perms {
            let shuffled = p.iter().map(|&i| all[i].clone()).collect();
            assert_eq!(render_feedback(&report_with(shuffled), 100), reference);
        }
    }

    #[test]
    fn truncation_drops_commonsense_before_hard() {
        let r = report_with(vec![
            v(0, ConstraintClass::Commonsense, &[1, 1]),
            v(1, ConstraintClass::Hard, &[2, 2]),
            v(2, ConstraintClass::Hard, &[3, 3]),
        ]);
        assert_eq!(render_feedback(&r, 4), vec![2, 2, 3, 3]);
        assert_eq!(render_feedback(&r, 3), vec![2, 2]);
        assert_eq!(render_feedback(&r, 1), Vec::<TokenId>::new());
    }
}
