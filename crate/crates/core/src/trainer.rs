//! Per-step update protocols.
//!
//! | method              | sampling per task           | updates per step            |
//! |---------------------|-----------------------------|-----------------------------|
//! | `fbos`              | `n` from q, `n·k` from FAPs | EPA on `N`, then ECC on `n·k` |
//! | `fbos_wo_epa`       | same                        | ECC only                    |
//! | `fbos_wo_ecc`       | same                        | EPA only                    |
//! | `grpo`              | `N` from q                  | one GRPO update on `N`      |
//! | `grpo_extra_update` | `N` from q                  | GRPO on `N`, then on a random `n·k` subset |
//!
//! Every importance ratio in a step is taken against the behaviour
//! log-probabilities recorded at sampling time, i.e. against the single
//! snapshot frozen at the start of the step, even after the first update
//! has moved θ.

use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::envs::{Difficulty, Environment, Task};
use crate::objectives::{self, group_advantages, ClipConfig, LossReport};
use crate::optimizer::{apply_update, OptimizerSpec, OptimizerState};
use crate::policy::{PolicyParams, PolicySnapshot};
use crate::rng::Purpose;
use crate::sampling::{
    assemble_groups, collect_step_batch, rollout_records, sample_from_prompt, Rollout, RolloutCounter, RolloutGroup,
    RolloutRecord, SamplingLimits, StepBatch, StreamKey,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fbos,
    Grpo,
    GrpoExtraUpdate,
    FbosWoEpa,
    FbosWoEcc,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Fbos,
        Method::Grpo,
        Method::GrpoExtraUpdate,
        Method::FbosWoEpa,
        Method::FbosWoEcc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fbos => "fbos",
            Method::Grpo => "grpo",
            Method::GrpoExtraUpdate => "grpo_extra_update",
            Method::FbosWoEpa => "fbos_wo_epa",
            Method::FbosWoEcc => "fbos_wo_ecc",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn uses_feedback(self) -> bool {
        matches!(self, Method::Fbos | Method::FbosWoEpa | Method::FbosWoEcc)
    }

    pub fn updates_per_step(self) -> usize {
        match self {
            Method::Fbos | Method::GrpoExtraUpdate => 2,
            Method::Grpo | Method::FbosWoEpa | Method::FbosWoEcc => 1,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub n: usize,
    pub k: usize,
    pub clip: ClipConfig,
    pub eps_adv: f64,
    pub optimizer: OptimizerSpec,
    pub steps: usize,
    pub tasks_per_step: usize,
    pub seed: u64,
    pub max_answer_len: usize,
    pub max_prompt_len: usize,
    /// Recompute advantages over the extra-update subset instead of reusing
    /// the full-group values.
    pub extra_update_recompute: bool,
    pub dump_rollouts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Fbos,
            n: 8,
            k: 8,
            clip: ClipConfig::default(),
            eps_adv: objectives::DEFAULT_ADV_EPSILON,
            optimizer: OptimizerSpec::default(),
            steps: 200,
            tasks_per_step: 1,
            seed: 0,
            max_answer_len: 8,
            max_prompt_len: 64,
            extra_update_recompute: true,
            dump_rollouts: false,
        }
    }
}

impl TrainConfig {
    /// Rollouts sampled per task per step, identical for every method.
    pub fn budget(&self) -> usize {
        self.n + self.n * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(Error::Config("n and k must be >= 1".into()));
        }
        if self.tasks_per_step == 0 || self.max_answer_len == 0 {
            return Err(Error::Config("tasks_per_step and max_answer_len must be >= 1".into()));
        }
        if !(self.eps_adv >= 0.0 && self.eps_adv.is_finite()) {
            return Err(Error::Config("eps_adv must be >= 0".into()));
        }
        self.clip.validate()?;
        self.optimizer.validate()
    }
}

/// Mean and standard deviation (population) of a sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Per-difficulty values; `None` when no task of that tier was trained on in
/// the step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ByDifficulty {
    pub easy: Option<f64>,
    pub medium: Option<f64>,
    pub hard: Option<f64>,
}

impl ByDifficulty {
    fn from_pairs(pairs: &[(Difficulty, f64)]) -> Self {
        let pick = |d: Difficulty| {
            let xs: Vec<f64> = pairs.iter().filter(|(e, _)| *e == d).map(|(_, x)| *x).collect();
            mean(&xs)
        };
        ByDifficulty {
            easy: pick(Difficulty::Easy),
            medium: pick(Difficulty::Medium),
            hard: pick(Difficulty::Hard),
        }
    }

    pub fn get(&self, d: Difficulty) -> Option<f64> {
        match d {
            Difficulty::Easy => self.easy,
            Difficulty::Medium => self.medium,
            Difficulty::Hard => self.hard,
        }
    }
}

/// One row of training telemetry. Fields that do not apply to a method
/// (FAP statistics for the single-round baselines, the loss of an update a
/// method does not perform) are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub method: Method,
    pub tasks: usize,
    pub rollouts: usize,
    pub updates: usize,
    /// Reward statistics over every rollout sampled in the step (the EPA
    /// group for feedback methods), averaged over tasks.
    pub train_score_mean: f64,
    pub train_score_std: f64,
    pub train_score_by_difficulty: ByDifficulty,
    /// Reward mean over FAP-conditioned rollouts and mean within-group std.
    pub ecc_score_mean: Option<f64>,
    pub ecc_score_std: Option<f64>,
    pub fap_score_mean: Option<f64>,
    pub fap_score_max: Option<f64>,
    pub fap_mean_by_difficulty: ByDifficulty,
    pub fap_max_by_difficulty: ByDifficulty,
    /// Mean next-token entropy of the feedback-free policy π(·|q) over every
    /// generated position of the step.
    pub entropy: f64,
    /// Mean L2 norm of the applied gradients.
    pub grad_norm: f64,
    pub epa_loss: Option<f64>,
    pub ecc_loss: Option<f64>,
    pub grpo_loss: Option<f64>,
    pub extra_loss: Option<f64>,
    pub clipped_fraction: f64,
}

pub struct Trainer<'e> {
    cfg: TrainConfig,
    env: &'e Environment,
    params: PolicyParams,
    optimizer: OptimizerState,
    counter: Arc<RolloutCounter>,
    step: usize,
    updates: usize,
    records: Vec<RolloutRecord>,
}

struct Update {
    report: LossReport,
    grad_norm: f64,
}

impl<'e> Trainer<'e> {
    pub fn new(cfg: TrainConfig, env: &'e Environment, params: PolicyParams) -> Result<Self> {
        cfg.validate()?;
        let optimizer = OptimizerState::new(cfg.optimizer, params.num_params());
        Ok(Trainer {
            cfg,
            env,
            params,
            optimizer,
            counter: Arc::new(RolloutCounter::new()),
            step: 0,
            updates: 0,
            records: Vec::new(),
        })
    }

    /// Shares a rollout counter with other trainers.
    pub fn with_counter(mut self, counter: Arc<RolloutCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn counter(&self) -> &RolloutCounter {
        &self.counter
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_updates(&self) -> usize {
        self.updates
    }

    pub fn take_rollout_records(&mut self) -> Vec<RolloutRecord> {
        std::mem::take(&mut self.records)
    }

    fn limits(&self) -> SamplingLimits {
        SamplingLimits {
            max_answer_len: self.cfg.max_answer_len,
            max_prompt_len: self.cfg.max_prompt_len,
        }
    }

    fn apply(&mut self, reports: Vec<LossReport>) -> Result<Update> {
        let report = LossReport::mean(&reports).ok_or_else(|| Error::Domain("update without tasks".into()))?;
        if !report.value.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                step: self.step,
            });
        }
        let grad_norm = apply_update(&mut self.params, &report.grad, &mut self.optimizer, self.step)?;
        self.updates += 1;
        Ok(Update { report, grad_norm })
    }

    /// Runs one training step on `tasks`.
    pub fn step(&mut self, tasks: &[&Task]) -> Result<StepMetrics> {
        if tasks.is_empty() {
            return Err(Error::Domain("training step without tasks".into()));
        }
        let snapshot = PolicySnapshot::freeze(&self.params, self.step);
        let metrics = if self.cfg.method.uses_feedback() {
            self.feedback_step(&snapshot, tasks)?
        } else {
            self.single_round_step(&snapshot, tasks)?
        };
        self.step += 1;
        Ok(metrics)
    }

    fn feedback_step(&mut self, snapshot: &PolicySnapshot, tasks: &[&Task]) -> Result<StepMetrics> {
        let limits = self.limits();
        let batches: Vec<StepBatch> = tasks
            .iter()
            .map(|t| {
                let key = StreamKey::new(self.cfg.seed, self.step, t);
                collect_step_batch(
                    snapshot,
                    self.env,
                    t,
                    self.cfg.n,
                    self.cfg.k,
                    key,
                    limits,
                    &self.counter,
                )
            })
            .collect::<Result<_>>()?;
        if self.cfg.dump_rollouts {
            for b in &batches {
                let all: Vec<&Rollout> = b.all_rollouts().collect();
                self.records.extend(rollout_records(self.step, &b.task, &all));
            }
        }
        let method = self.cfg.method;
        let clip = self.cfg.clip;
        let eps_adv = self.cfg.eps_adv;

        let mut epa = None;
        if matches!(method, Method::Fbos | Method::FbosWoEcc) {
            let reports = batches
                .iter()
                .map(|b| {
                    let adv = group_advantages(&assemble_groups(b).0.rewards(), eps_adv)?;
                    objectives::epa_loss(&self.params, b, &adv, &clip)
                })
                .collect::<Result<Vec<_>>>()?;
            epa = Some(self.apply(reports)?);
        }
        let mut ecc = None;
        if matches!(method, Method::Fbos | Method::FbosWoEpa) {
            let reports = batches
                .iter()
                .map(|b| {
                    let groups = assemble_groups(b)
                        .1
                        .into_iter()
                        .map(|g| {
                            let adv = group_advantages(&g.rewards(), eps_adv)?;
                            Ok((g, adv))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    objectives::ecc_loss(&self.params, &groups, &clip)
                })
                .collect::<Result<Vec<_>>>()?;
            ecc = Some(self.apply(reports)?);
        }

        let mut per_task_mean = Vec::new();
        let mut per_task_std = Vec::new();
        let mut by_diff = Vec::new();
        let mut ecc_mean = Vec::new();
        let mut ecc_std = Vec::new();
        let mut fap_max = Vec::new();
        let mut fap_mean_diff = Vec::new();
        let mut fap_max_diff = Vec::new();
        let mut entropy = EntropyAcc::default();
        for b in &batches {
            let rewards: Vec<f64> = b.all_rollouts().map(Rollout::reward).collect();
            let (m, s) = mean_std(&rewards);
            per_task_mean.push(m);
            per_task_std.push(s);
            by_diff.push((b.task.difficulty, m));
            let fap_rewards: Vec<f64> = b.fap_rollouts.iter().map(Rollout::reward).collect();
            let (fm, _) = mean_std(&fap_rewards);
            let fmax = fap_rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ecc_mean.push(fm);
            let group_stds: Vec<f64> = (0..b.n)
                .map(|i| mean_std(&b.fap_children(i).iter().map(Rollout::reward).collect::<Vec<_>>()).1)
                .collect();
            ecc_std.push(mean(&group_stds).unwrap_or(0.0));
            fap_max.push(fmax);
            fap_mean_diff.push((b.task.difficulty, fm));
            fap_max_diff.push((b.task.difficulty, fmax));
            for r in b.all_rollouts() {
                entropy.add(snapshot.params(), &b.task.prompt, &r.tokens);
            }
        }
        let updates: Vec<&Update> = epa.iter().chain(ecc.iter()).collect();
        Ok(StepMetrics {
            step: self.step,
            method,
            tasks: batches.len(),
            rollouts: batches.iter().map(StepBatch::total).sum(),
            updates: updates.len(),
            train_score_mean: mean(&per_task_mean).unwrap_or(f64::NAN),
            train_score_std: mean(&per_task_std).unwrap_or(f64::NAN),
            train_score_by_difficulty: ByDifficulty::from_pairs(&by_diff),
            ecc_score_mean: mean(&ecc_mean),
            ecc_score_std: mean(&ecc_std),
            fap_score_mean: mean(&ecc_mean),
            fap_score_max: mean(&fap_max),
            fap_mean_by_difficulty: ByDifficulty::from_pairs(&fap_mean_diff),
            fap_max_by_difficulty: ByDifficulty::from_pairs(&fap_max_diff),
            entropy: entropy.mean(),
            grad_norm: mean(&updates.iter().map(|u| u.grad_norm).collect::<Vec<_>>()).unwrap_or(0.0),
            epa_loss: epa.as_ref().map(|u| u.report.value),
            ecc_loss: ecc.as_ref().map(|u| u.report.value),
            grpo_loss: None,
            extra_loss: None,
            clipped_fraction: mean(
                &updates
                    .iter()
                    .map(|u| u.report.mean_clipped_fraction())
                    .collect::<Vec<_>>(),
            )
            .unwrap_or(0.0),
        })
    }

    fn single_round_step(&mut self, snapshot: &PolicySnapshot, tasks: &[&Task]) -> Result<StepMetrics> {
        let limits = self.limits();
        let budget = self.cfg.budget();
        let samples: Vec<Vec<Rollout>> = tasks
            .iter()
            .map(|t| {
                let key = StreamKey::new(self.cfg.seed, self.step, t);
                sample_from_prompt(snapshot, self.env, t, budget, key, limits, &self.counter)
            })
            .collect();
        if self.cfg.dump_rollouts {
            for (t, rs) in tasks.iter().zip(&samples) {
                let all: Vec<&Rollout> = rs.iter().collect();
                self.records.extend(rollout_records(self.step, t, &all));
            }
        }
        let clip = self.cfg.clip;
        let eps_adv = self.cfg.eps_adv;
        let groups: Vec<RolloutGroup<'_>> = samples
            .iter()
            .map(|rs| RolloutGroup {
                members: rs.iter().collect(),
            })
            .collect();
        let full_adv = groups
            .iter()
            .map(|g| group_advantages(&g.rewards(), eps_adv))
            .collect::<Result<Vec<_>>>()?;
        let reports = groups
            .iter()
            .zip(&full_adv)
            .map(|(g, a)| objectives::grpo_loss(&self.params, g, a, &clip))
            .collect::<Result<Vec<_>>>()?;
        let first = self.apply(reports)?;

        let mut extra = None;
        if self.cfg.method == Method::GrpoExtraUpdate {
            let subset_size = self.cfg.n * self.cfg.k;
            let mut reports = Vec::with_capacity(groups.len());
            for ((t, g), full) in tasks.iter().zip(&groups).zip(&full_adv) {
                let picked = extra_update_subset(self.cfg.seed, self.step, t, g.len(), subset_size);
                let sub = RolloutGroup {
                    members: picked.iter().map(|&i| g.members[i]).collect(),
                };
                let adv = if self.cfg.extra_update_recompute {
                    group_advantages(&sub.rewards(), eps_adv)?
                } else {
                    objectives::AdvantageSet {
                        values: picked.iter().map(|&i| full.values[i]).collect(),
                        ..full.clone()
                    }
                };
                reports.push(objectives::grpo_loss(&self.params, &sub, &adv, &clip)?);
            }
            extra = Some(self.apply(reports)?);
        }

        let mut per_task_mean = Vec::new();
        let mut per_task_std = Vec::new();
        let mut by_diff = Vec::new();
        let mut entropy = EntropyAcc::default();
        for (t, rs) in tasks.iter().zip(&samples) {
            let rewards: Vec<f64> = rs.iter().map(Rollout::reward).collect();
            let (m, s) = mean_std(&rewards);
            per_task_mean.push(m);
            per_task_std.push(s);
            by_diff.push((t.difficulty, m));
            for r in rs {
                entropy.add(snapshot.params(), &t.prompt, &r.tokens);
            }
        }
        let updates: Vec<&Update> = std::iter::once(&first).chain(extra.iter()).collect();
        Ok(StepMetrics {
            step: self.step,
            method: self.cfg.method,
            tasks: tasks.len(),
            rollouts: samples.iter().map(Vec::len).sum(),
            updates: updates.len(),
            train_score_mean: mean(&per_task_mean).unwrap_or(f64::NAN),
            train_score_std: mean(&per_task_std).unwrap_or(f64::NAN),
            train_score_by_difficulty: ByDifficulty::from_pairs(&by_diff),
            ecc_score_mean: None,
            ecc_score_std: None,
            fap_score_mean: None,
            fap_score_max: None,
            fap_mean_by_difficulty: ByDifficulty::default(),
            fap_max_by_difficulty: ByDifficulty::default(),
            entropy: entropy.mean(),
            grad_norm: mean(&updates.iter().map(|u| u.grad_norm).collect::<Vec<_>>()).unwrap_or(0.0),
            epa_loss: None,
            ecc_loss: None,
            grpo_loss: Some(first.report.value),
            extra_loss: extra.as_ref().map(|u| u.report.value),
            clipped_fraction: mean(
                &updates
                    .iter()
                    .map(|u| u.report.mean_clipped_fraction())
                    .collect::<Vec<_>>(),
            )
            .unwrap_or(0.0),
        })
    }
}

/// Indices (ascending) of the extra-update subset: `size` of `total`, drawn
/// uniformly without replacement from a stream keyed by (seed, step, task).
pub fn extra_update_subset(seed: u64, step: usize, task: &Task, total: usize, size: usize) -> Vec<usize> {
    let mut rng = StreamKey::new(seed, step, task).rng(Purpose::Subset, &[]);
    let mut picked = index::sample(&mut rng, total, size.min(total)).into_vec();
    picked.sort_unstable();
    picked
}

#[derive(Default)]
struct EntropyAcc {
    sum: f64,
    count: usize,
}

impl EntropyAcc {
    fn add(&mut self, policy: &PolicyParams, prompt: &[crate::vocab::TokenId], tokens: &[crate::vocab::TokenId]) {
        let prep = policy.prepare(prompt);
        for t in 0..tokens.len() {
            self.sum += policy.entropy_prepared(&prep, &tokens[..t]);
            self.count += 1;
        }
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}
