//! Multi-constraint plan construction.
//!
//! An answer is a short sequence of item tokens terminated by end-of-sequence;
//! anything else does not parse and is scored as an empty plan, and an empty
//! plan is not well-formed.
//! The prompt states the plan length, an optional cost budget, and one clue
//! token per required item. Clues map to items through a fixed hidden
//! permutation shared by every task, so the mapping can be learned from the
//! prompt alone, while feedback names missing items outright.

use rand::seq::SliceRandom;
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
pub struct ConstraintPlanConfig {
    pub num_items: usize,
    pub max_plan_len: usize,
    /// Weight of the all-pass indicator in the reward.
    pub all_pass_bonus: f64,
    /// Seed of the clue → item permutation.
    pub mapping_seed: u64,
    /// Extra budget above the cheapest feasible plan, drawn from `0..=slack`.
    pub budget_slack: u32,
    pub max_feedback_len: usize,
}

impl Default for ConstraintPlanConfig {
    fn default() -> Self {
        ConstraintPlanConfig {
            num_items: 10,
            max_plan_len: 4,
            all_pass_bonus: 0.5,
            mapping_seed: 17,
            budget_slack: 1,
            max_feedback_len: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConstraintPlanEnv {
    cfg: ConstraintPlanConfig,
    vocab: Vocab,
    items: Vec<TokenId>,
    clues: Vec<TokenId>,
    lens: Vec<TokenId>,
    budgets: Vec<TokenId>,
    /// `clue_to_item[j]` is the item index clue `j` asks for.
    clue_to_item: Vec<usize>,
}

/// Per-tier layout: (plan length, required items, has budget).
fn tier(d: Difficulty, max_plan_len: usize) -> (usize, usize, bool) {
    match d {
        Difficulty::Easy => (2.min(max_plan_len), 1, false),
        Difficulty::Medium => (3.min(max_plan_len), 2, true),
        Difficulty::Hard => (4.min(max_plan_len), 3, true),
    }
}

pub fn item_cost(index: usize) -> u32 {
    1 + (index % 3) as u32
}

impl ConstraintPlanEnv {
    pub fn new(cfg: ConstraintPlanConfig) -> Result<Self> {
        if cfg.num_items < 2 || cfg.max_plan_len == 0 {
            return Err(Error::Config(
                "constraint_plan needs num_items >= 2 and max_plan_len >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&cfg.all_pass_bonus) {
            return Err(Error::Config("all_pass_bonus must lie in [0, 1]".into()));
        }
        let mut names: Vec<String> = ["<eos>", "<sep1>", "<sep2>", "<sep3>"].map(String::from).to_vec();
        let push = |names: &mut Vec<String>, n: String| {
            names.push(n);
            (names.len() - 1) as TokenId
        };
        let items = (0..cfg.num_items)
            .map(|i| push(&mut names, format!("item{i}")))
            .collect();
        let clues = (0..cfg.num_items)
            .map(|i| push(&mut names, format!("clue{i}")))
            .collect();
        let lens = (1..=cfg.max_plan_len)
            .map(|m| push(&mut names, format!("len{m}")))
            .collect();
        let max_budget = 3 * cfg.max_plan_len as u32;
        let budgets = (1..=max_budget)
            .map(|b| push(&mut names, format!("budget{b}")))
            .collect();
        for fb in ["fb:format", "fb:duplicate", "fb:length", "fb:missing", "fb:over_budget"] {
            push(&mut names, fb.to_string());
        }
        let vocab = Vocab::new(names, "<eos>", ["<sep1>", "<sep2>", "<sep3>"])?;
        let mut clue_to_item: Vec<usize> = (0..cfg.num_items).collect();
        clue_to_item.shuffle(&mut rng::stream(cfg.mapping_seed, Purpose::Suite, &[0xc1]));
        Ok(ConstraintPlanEnv {
            cfg,
            vocab,
            items,
            clues,
            lens,
            budgets,
            clue_to_item,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &ConstraintPlanConfig {
        &self.cfg
    }

    pub fn answer_tokens(&self) -> Vec<TokenId> {
        let mut t = self.items.clone();
        t.push(self.vocab.eos());
        t
    }

    pub fn item_token(&self, index: usize) -> TokenId {
        self.items[index]
    }

    fn item_index(&self, t: TokenId) -> Option<usize> {
        let first = *self.items.first()?;
        (t >= first && ((t - first) as usize) < self.items.len()).then(|| (t - first) as usize)
    }

    /// The item a clue token refers to.
    pub fn clue_target(&self, clue: TokenId) -> Option<TokenId> {
        let j = self.clues.iter().position(|&c| c == clue)?;
        Some(self.items[self.clue_to_item[j]])
    }

    fn clue_for_item(&self, item: usize) -> TokenId {
        let j = self.clue_to_item.iter().position(|&i| i == item).expect("permutation");
        self.clues[j]
    }

    /// Splits an answer into the body before end-of-sequence and whether
    /// end-of-sequence was produced.
    fn body<'a>(&self, answer: &'a [TokenId]) -> (&'a [TokenId], bool) {
        match answer.iter().position(|&t| t == self.vocab.eos()) {
            Some(p) => (&answer[..p], true),
            None => (answer, false),
        }
    }

    pub(crate) fn check(&self, _task: &Task, spec: &ConstraintSpec, answer: &[TokenId]) -> CheckOutcome {
        let (body, terminated) = self.body(answer);
        // An answer that does not parse as a plan delivers no plan at all.
        let parses = terminated && body.iter().all(|&t| self.item_index(t).is_some());
        let items: Vec<(usize, usize)> = if parses {
            body.iter()
                .enumerate()
                .filter_map(|(pos, &t)| self.item_index(t).map(|i| (pos, i)))
                .collect()
        } else {
            Vec::new()
        };
        match &spec.kind {
            ConstraintKind::PlanFormat => {
                if let Some(pos) = body.iter().position(|&t| self.item_index(t).is_none()) {
                    CheckOutcome::fail(Some((pos, pos + 1)), vec![])
                } else if !terminated {
                    CheckOutcome::fail(Some((answer.len(), answer.len())), vec![])
                } else if body.is_empty() {
                    CheckOutcome::fail(Some((0, 1)), vec![])
                } else {
                    CheckOutcome::pass()
                }
            }
            ConstraintKind::NoDuplicates => {
                for (k, &(pos, item)) in items.iter().enumerate() {
                    if items[..k].iter().any(|&(_, other)| other == item) {
                        return CheckOutcome::fail(Some((pos, pos + 1)), vec![self.items[item]]);
                    }
                }
                CheckOutcome::pass()
            }
            ConstraintKind::PlanLength { len } => {
                if items.len() == *len {
                    CheckOutcome::pass()
                } else {
                    let detail = self.lens.get(len.saturating_sub(1)).copied().into_iter().collect();
                    CheckOutcome::fail(None, detail)
                }
            }
            ConstraintKind::Includes { item } => {
                let Some(want) = self.vocab.id(item).and_then(|t| self.item_index(t)) else {
                    return CheckOutcome::fail(None, vec![]);
                };
                if items.iter().any(|&(_, i)| i == want) {
                    CheckOutcome::pass()
                } else {
                    CheckOutcome::fail(None, vec![self.items[want]])
                }
            }
            ConstraintKind::Budget { limit } => {
                let total: u32 = items.iter().map(|&(_, i)| item_cost(i)).sum();
                if total <= *limit {
                    return CheckOutcome::pass();
                }
                // Overshoot locus: the costliest item (earliest on ties).
                let &(pos, item) = items
                    .iter()
                    .max_by(|a, b| item_cost(a.1).cmp(&item_cost(b.1)).then(b.0.cmp(&a.0)))
                    .expect("over budget implies at least one item");
                CheckOutcome::fail(Some((pos, pos + 1)), vec![self.items[item]])
            }
            ConstraintKind::ProofFormat | ConstraintKind::ProofReaches { .. } => CheckOutcome::fail(None, vec![]),
        }
    }

    /// `(1 - bonus) · passed / total + bonus · [all passed]`.
    pub(crate) fn reward(&self, results: &[ConstraintResult]) -> f64 {
        if results.is_empty() {
            return 1.0;
        }
        let passed = results.iter().filter(|r| r.passed).count();
        let all = (passed == results.len()) as u8 as f64;
        let b = self.cfg.all_pass_bonus;
        (1.0 - b) * passed as f64 / results.len() as f64 + b * all
    }

    fn spec(id: u32, class: ConstraintClass, kind: ConstraintKind, head: &str, detail: bool) -> ConstraintSpec {
        let mut feedback_template = vec![TemplatePiece::Token(head.to_string())];
        if detail {
            feedback_template.push(TemplatePiece::Detail);
        }
        ConstraintSpec {
            id,
            class,
            kind,
            feedback_template,
        }
    }

    fn make_task(&self, id: String, difficulty: Difficulty, rng: &mut impl Rng) -> Result<Task> {
        let (len, required, budgeted) = tier(difficulty, self.cfg.max_plan_len);
        if required > len || len > self.cfg.num_items {
            return Err(Error::Infeasible(format!(
                "{} tier needs {required} required items in a plan of length {len} from {} items (max_plan_len {})",
                difficulty.as_str(),
                self.cfg.num_items,
                self.cfg.max_plan_len
            )));
        }
        let mut pool: Vec<usize> = (0..self.cfg.num_items).collect();
        pool.shuffle(rng);
        let mut req: Vec<usize> = pool[..required].to_vec();
        req.sort_unstable();

        let mut constraints = vec![
            Self::spec(
                0,
                ConstraintClass::Commonsense,
                ConstraintKind::PlanFormat,
                "fb:format",
                false,
            ),
            Self::spec(
                1,
                ConstraintClass::Commonsense,
                ConstraintKind::NoDuplicates,
                "fb:duplicate",
                true,
            ),
            Self::spec(
                2,
                ConstraintClass::Commonsense,
                ConstraintKind::PlanLength { len },
                "fb:length",
                true,
            ),
        ];
        for &i in &req {
            let item = self.vocab.name(self.items[i]).expect("item").to_string();
            constraints.push(Self::spec(
                constraints.len() as u32,
                ConstraintClass::Hard,
                ConstraintKind::Includes { item },
                "fb:missing",
                true,
            ));
        }
        let mut prompt = vec![self.lens[len - 1]];
        if budgeted {
            let mut others: Vec<u32> = (0..self.cfg.num_items)
                .filter(|i| !req.contains(i))
                .map(item_cost)
                .collect();
            others.sort_unstable();
            let cheapest: u32 =
                req.iter().map(|&i| item_cost(i)).sum::<u32>() + others.iter().take(len - required).sum::<u32>();
            let limit = cheapest + rng.random_range(0..=self.cfg.budget_slack);
            let limit = limit.min(self.budgets.len() as u32);
            constraints.push(Self::spec(
                constraints.len() as u32,
                ConstraintClass::Hard,
                ConstraintKind::Budget { limit },
                "fb:over_budget",
                true,
            ));
            prompt.push(self.budgets[limit as usize - 1]);
        }
        let mut clues: Vec<TokenId> = req.iter().map(|&i| self.clue_for_item(i)).collect();
        clues.sort_unstable();
        prompt.extend(clues);
        Ok(Task {
            id,
            difficulty,
            prompt,
            constraints,
        })
    }

    pub(crate) fn make_suite(&self, spec: &SuiteSpec) -> Result<Vec<Task>> {
        let mut rng = rng::stream(spec.seed, Purpose::Suite, &[1]);
        let mut tasks = Vec::new();
        for d in Difficulty::ALL {
            for k in 0..spec.count(d) {
                let task = self.make_task(format!("cp-{}-{k:03}", d.as_str()), d, &mut rng)?;
                if self.brute_force_solution(&task).is_none() {
                    return Err(Error::Infeasible(format!("task {} has no satisfying answer", task.id)));
                }
                tasks.push(task);
            }
        }
        Ok(tasks)
    }

    /// Enumerates every item sequence up to `max_plan_len`.
    pub(crate) fn brute_force_solution(&self, task: &Task) -> Option<Vec<TokenId>> {
        let m = self.cfg.num_items;
        for len in 0..=self.cfg.max_plan_len {
            let mut idx = vec![0usize; len];
            loop {
                let mut answer: Vec<TokenId> = idx.iter().map(|&i| self.items[i]).collect();
                answer.push(self.vocab.eos());
                let all = task.constraints.iter().all(|c| self.check(task, c, &answer).passed);
                if all {
                    return Some(answer);
                }
                // Odometer increment.
                let mut k = 0;
                while k < len {
                    idx[k] += 1;
                    if idx[k] < m {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == len {
                    break;
                }
            }
        }
        None
    }
}
