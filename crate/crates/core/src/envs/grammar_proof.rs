//! Grammar-checked derivations scored on {−1, 0, +1}.
//!
//! The prompt names a start value and a goal. An answer is a sequence of
//! rewrite steps (`op:inc` adds one, `op:dbl` doubles) closed by `qed` and
//! end-of-sequence. Malformed answers score −1, well-formed derivations that
//! miss the goal score 0, and correct derivations score +1.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    CheckOutcome, ConstraintClass, ConstraintKind, ConstraintResult, ConstraintSpec, Difficulty, SuiteSpec, Task,
    TemplatePiece,
};
use crate::rng::{self, Purpose};
use crate::vocab::{TokenId, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarProofConfig {
    pub max_value: u32,
    pub max_steps: usize,
    pub max_feedback_len: usize,
}

impl Default for GrammarProofConfig {
    fn default() -> Self {
        GrammarProofConfig {
            max_value: 15,
            max_steps: 5,
            max_feedback_len: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Inc,
    Dbl,
}

impl Op {
    fn apply(self, v: u32) -> u32 {
        match self {
            Op::Inc => v.saturating_add(1),
            Op::Dbl => v.saturating_mul(2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GrammarProofEnv {
    cfg: GrammarProofConfig,
    vocab: Vocab,
    inc: TokenId,
    dbl: TokenId,
    qed: TokenId,
    nums: Vec<TokenId>,
}

fn tier_lengths(d: Difficulty) -> std::ops::RangeInclusive<usize> {
    match d {
        Difficulty::Easy => 1..=2,
        Difficulty::Medium => 3..=3,
        Difficulty::Hard => 4..=5,
    }
}

impl GrammarProofEnv {
    pub fn new(cfg: GrammarProofConfig) -> Result<Self> {
        if cfg.max_value < 2 || cfg.max_steps == 0 {
            return Err(Error::Config(
                "grammar_proof needs max_value >= 2 and max_steps >= 1".into(),
            ));
        }
        let mut names: Vec<String> = ["<eos>", "<sep1>", "<sep2>", "<sep3>", "op:inc", "op:dbl", "qed"]
            .map(String::from)
            .to_vec();
        names.extend((0..=cfg.max_value).map(|v| format!("num{v}")));
        names.extend(["fb:format", "fb:wrong", "fb:too_low", "fb:too_high"].map(String::from));
        let vocab = Vocab::new(names, "<eos>", ["<sep1>", "<sep2>", "<sep3>"])?;
        let id = |n: &str| vocab.id(n).expect("builtin token");
        let nums = (0..=cfg.max_value).map(|v| id(&format!("num{v}"))).collect();
        Ok(GrammarProofEnv {
            inc: id("op:inc"),
            dbl: id("op:dbl"),
            qed: id("qed"),
            nums,
            cfg,
            vocab,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn answer_tokens(&self) -> Vec<TokenId> {
        vec![self.inc, self.dbl, self.qed, self.vocab.eos()]
    }

    pub fn config(&self) -> &GrammarProofConfig {
        &self.cfg
    }

    fn op(&self, t: TokenId) -> Option<Op> {
        if t == self.inc {
            Some(Op::Inc)
        } else if t == self.dbl {
            Some(Op::Dbl)
        } else {
            None
        }
    }

    fn num_token(&self, v: u32) -> TokenId {
        self.nums[v.min(self.cfg.max_value) as usize]
    }

    /// Position of the first grammar error, or `None` for `op* qed <eos>`.
    fn format_error(&self, answer: &[TokenId]) -> Option<usize> {
        let eos = self.vocab.eos();
        let mut i = 0;
        while i < answer.len() && self.op(answer[i]).is_some() {
            i += 1;
        }
        if answer.get(i) != Some(&self.qed) {
            return Some(i);
        }
        if answer.get(i + 1) != Some(&eos) {
            return Some(i + 1);
        }
        None
    }

    pub(crate) fn check(&self, _task: &Task, spec: &ConstraintSpec, answer: &[TokenId]) -> CheckOutcome {
        let fmt = self.format_error(answer);
        match &spec.kind {
            ConstraintKind::ProofFormat => match fmt {
                None => CheckOutcome::pass(),
                Some(p) => CheckOutcome::fail(Some((p, (p + 1).min(answer.len()).max(p))), vec![]),
            },
            ConstraintKind::ProofReaches { start, goal } => {
                let mut value = *start;
                let mut steps = 0;
                for op in answer.iter().map_while(|&t| self.op(t)) {
                    value = op.apply(value);
                    steps += 1;
                }
                if fmt.is_none() && value == *goal {
                    return CheckOutcome::pass();
                }
                let mut detail = Vec::new();
                if value < *goal {
                    detail.push(self.vocab.id("fb:too_low").expect("builtin"));
                } else if value > *goal {
                    detail.push(self.vocab.id("fb:too_high").expect("builtin"));
                }
                detail.push(self.num_token(value));
                CheckOutcome::fail(Some((0, steps)), detail)
            }
            _ => CheckOutcome::fail(None, vec![]),
        }
    }

    pub(crate) fn reward(&self, results: &[ConstraintResult]) -> f64 {
        let format_ok = results
            .iter()
            .filter(|r| r.class == ConstraintClass::Commonsense)
            .all(|r| r.passed);
        if !format_ok {
            -1.0
        } else if results.iter().all(|r| r.passed) {
            1.0
        } else {
            0.0
        }
    }

    /// Shortest derivation lengths from `start` to every reachable value.
    fn shortest(&self, start: u32) -> HashMap<u32, (usize, Vec<Op>)> {
        let mut best = HashMap::new();
        best.insert(start, (0usize, Vec::new()));
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            let (d, path) = best[&v].clone();
            if d == self.cfg.max_steps {
                continue;
            }
            for op in [Op::Inc, Op::Dbl] {
                let w = op.apply(v);
                if w > self.cfg.max_value || best.contains_key(&w) {
                    continue;
                }
                let mut p = path.clone();
                p.push(op);
                best.insert(w, (d + 1, p));
                queue.push_back(w);
            }
        }
        best
    }

    fn make_task(&self, id: String, difficulty: Difficulty, rng: &mut impl Rng) -> Result<Task> {
        let lengths = tier_lengths(difficulty);
        let mut candidates = Vec::new();
        for start in 0..=self.cfg.max_value {
            for (goal, (d, _)) in self.shortest(start) {
                if lengths.contains(&d) && d <= self.cfg.max_steps {
                    candidates.push((start, goal));
                }
            }
        }
        candidates.sort_unstable();
        if candidates.is_empty() {
            return Err(Error::Infeasible(format!(
                "no {} derivations exist with max_value {} and max_steps {}",
                difficulty.as_str(),
                self.cfg.max_value,
                self.cfg.max_steps
            )));
        }
        let (start, goal) = candidates[rng.random_range(0..candidates.len())];
        let constraints = vec![
            ConstraintSpec {
                id: 0,
                class: ConstraintClass::Commonsense,
                kind: ConstraintKind::ProofFormat,
                feedback_template: vec![TemplatePiece::Token("fb:format".into())],
            },
            ConstraintSpec {
                id: 1,
                class: ConstraintClass::Hard,
                kind: ConstraintKind::ProofReaches { start, goal },
                feedback_template: vec![TemplatePiece::Token("fb:wrong".into()), TemplatePiece::Detail],
            },
        ];
        Ok(Task {
            id,
            difficulty,
            prompt: vec![self.num_token(start), self.num_token(goal)],
            constraints,
        })
    }

    pub(crate) fn make_suite(&self, spec: &SuiteSpec) -> Result<Vec<Task>> {
        let mut rng = rng::stream(spec.seed, Purpose::Suite, &[2]);
        let mut tasks = Vec::new();
        for d in Difficulty::ALL {
            for k in 0..spec.count(d) {
                let task = self.make_task(format!("gp-{}-{k:03}", d.as_str()), d, &mut rng)?;
                if self.brute_force_solution(&task).is_none() {
                    return Err(Error::Infeasible(format!("task {} has no derivation", task.id)));
                }
                tasks.push(task);
            }
        }
        Ok(tasks)
    }

    /// Enumerates every operator sequence up to `max_steps`.
    pub(crate) fn brute_force_solution(&self, task: &Task) -> Option<Vec<TokenId>> {
        let ops = [self.inc, self.dbl];
        for len in 0..=self.cfg.max_steps {
            for code in 0..(1usize << len) {
                let mut answer: Vec<TokenId> = (0..len).map(|b| ops[(code >> b) & 1]).collect();
                answer.push(self.qed);
                answer.push(self.vocab.eos());
                if task.constraints.iter().all(|c| self.check(task, c, &answer).passed) {
                    return Some(answer);
                }
            }
        }
        None
    }
}
