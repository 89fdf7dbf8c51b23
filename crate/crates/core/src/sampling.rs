//! Two-round rollout collection for one training step.
//!
//! Round one samples `n` answers from the original prompt `q`. Each answer
//! is verified and folded into a feedback-augmented prompt
//! `q̃ᵢ = q ⊕ SEP₁ ⊕ ansᵢ ⊕ SEP₂ ⊕ Fᵢ ⊕ SEP₃`, and round two samples `k`
//! answers from every `q̃ᵢ`, for `N = n + n·k` rollouts per task.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::Serialize;

use crate::envs::{render_feedback, Environment, Task, VerifierReport};
use crate::policy::{sample_rollout, PolicySnapshot};
use crate::rng::{self, Purpose};
use crate::vocab::{TokenId, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Initial,
    Fap,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub origin: Origin,
    pub conditioning_prompt: Vec<TokenId>,
    /// Index `i` of the first-round rollout whose FAP produced this one.
    pub parent_index: Option<usize>,
    /// `i` for initial rollouts, `j` for FAP rollouts.
    pub index: usize,
    pub tokens: Vec<TokenId>,
    pub behavior_logprobs: Vec<f64>,
    pub report: VerifierReport,
}

impl Rollout {
    pub fn reward(&self) -> f64 {
        self.report.reward
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackAugmentedPrompt {
    pub base_prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub feedback_tokens: Vec<TokenId>,
    pub assembled: Vec<TokenId>,
}

impl FeedbackAugmentedPrompt {
    /// Recovers `(q, ans, F)` from an assembled prompt by splitting on the
    /// reserved separators.
    pub fn parse(vocab: &Vocab, assembled: &[TokenId]) -> Option<(Vec<TokenId>, Vec<TokenId>, Vec<TokenId>)> {
        let [s1, s2, s3] = vocab.separators();
        if assembled.last() != Some(&s3) {
            return None;
        }
        let p1 = assembled.iter().position(|&t| t == s1)?;
        let p2 = p1 + 1 + assembled[p1 + 1..].iter().position(|&t| t == s2)?;
        let body = &assembled[..assembled.len() - 1];
        if body[p2 + 1..].iter().any(|&t| vocab.is_separator(t)) {
            return None;
        }
        Some((
            assembled[..p1].to_vec(),
            assembled[p1 + 1..p2].to_vec(),
            body[p2 + 1..].to_vec(),
        ))
    }
}

/// Everything one task contributes to a training step.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub task: Task,
    pub n: usize,
    pub k: usize,
    pub initial_rollouts: Vec<Rollout>,
    pub faps: Vec<FeedbackAugmentedPrompt>,
    /// Row-major: rollout `(i, j)` lives at `i * k + j`.
    pub fap_rollouts: Vec<Rollout>,
}

impl StepBatch {
    pub fn total(&self) -> usize {
        self.n + self.n * self.k
    }

    pub fn all_rollouts(&self) -> impl Iterator<Item = &Rollout> {
        self.initial_rollouts.iter().chain(self.fap_rollouts.iter())
    }

    pub fn fap_children(&self, i: usize) -> &[Rollout] {
        &self.fap_rollouts[i * self.k..(i + 1) * self.k]
    }

    pub fn check_invariants(&self) -> Result<()> {
        let ok = self.initial_rollouts.len() == self.n
            && self.faps.len() == self.n
            && self.fap_rollouts.len() == self.n * self.k
            && self.all_rollouts().all(|r| r.tokens.len() == r.behavior_logprobs.len())
            && self
                .fap_rollouts
                .iter()
                .all(|r| r.origin == Origin::Fap && r.parent_index.is_some_and(|p| p < self.n));
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "step batch for task {} violates its layout",
                self.task.id
            )))
        }
    }
}

/// Counts every sampled rollout; shared by all methods so budget parity can
/// be checked directly.
#[derive(Debug, Default)]
pub struct RolloutCounter(AtomicU64);

impl RolloutCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: usize) {
        self.0.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Length limits for answers and assembled prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingLimits {
    pub max_answer_len: usize,
    pub max_prompt_len: usize,
}

/// Identifies the RNG lineage of a task's rollouts within one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub master_seed: u64,
    pub step: u64,
    pub task_key: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, step: usize, task: &Task) -> Self {
        StreamKey {
            master_seed,
            step: step as u64,
            task_key: task_key(&task.id),
        }
    }

    pub fn rng(&self, purpose: Purpose, parts: &[u64]) -> rng::StreamRng {
        let mut key = vec![self.step, self.task_key];
        key.extend_from_slice(parts);
        rng::stream(self.master_seed, purpose, &key)
    }
}

/// FNV-1a of the task id: stable across processes and platforms.
pub fn task_key(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn sample_one(
    snapshot: &PolicySnapshot,
    env: &Environment,
    task: &Task,
    prompt: &[TokenId],
    max_len: usize,
    mut rng: rng::StreamRng,
) -> (Vec<TokenId>, Vec<f64>, VerifierReport) {
    let s = sample_rollout(snapshot, prompt, max_len, &mut rng);
    let report = env.verify(task, &s.tokens);
    (s.tokens, s.log_probs, report)
}

/// Samples `n` rollouts conditioned only on the task prompt.
pub fn initial_exploration(
    snapshot: &PolicySnapshot,
    env: &Environment,
    task: &Task,
    n: usize,
    key: StreamKey,
    limits: SamplingLimits,
    counter: &RolloutCounter,
) -> Vec<Rollout> {
    sample_from_prompt(snapshot, env, task, n, key, limits, counter)
}

/// Samples `count` rollouts from `q`; shared by initial exploration and the
/// single-round baselines, so the first `n` coincide for equal seeds.
pub fn sample_from_prompt(
    snapshot: &PolicySnapshot,
    env: &Environment,
    task: &Task,
    count: usize,
    key: StreamKey,
    limits: SamplingLimits,
    counter: &RolloutCounter,
) -> Vec<Rollout> {
    let out: Vec<Rollout> = (0..count)
        .into_par_iter()
        .map(|i| {
            let rng = key.rng(Purpose::Initial, &[i as u64]);
            let (tokens, behavior_logprobs, report) =
                sample_one(snapshot, env, task, &task.prompt, limits.max_answer_len, rng);
            Rollout {
                origin: Origin::Initial,
                conditioning_prompt: task.prompt.clone(),
                parent_index: None,
                index: i,
                tokens,
                behavior_logprobs,
                report,
            }
        })
        .collect();
    counter.add(out.len());
    out
}

/// Assembles `q ⊕ SEP₁ ⊕ ans ⊕ SEP₂ ⊕ F ⊕ SEP₃`, truncating feedback by
/// priority so the whole prompt fits `max_prompt_len`.
pub fn build_fap(env: &Environment, task: &Task, rollout: &Rollout, max_prompt_len: usize) -> FeedbackAugmentedPrompt {
    debug_assert_eq!(rollout.origin, Origin::Initial);
    let [s1, s2, s3] = env.vocab().separators();
    let fixed = task.prompt.len() + rollout.tokens.len() + 3;
    let budget = env.max_feedback_len().min(max_prompt_len.saturating_sub(fixed));
    let feedback_tokens = render_feedback(&rollout.report, budget);
    let mut assembled = Vec::with_capacity(fixed + feedback_tokens.len());
    assembled.extend_from_slice(&task.prompt);
    assembled.push(s1);
    assembled.extend_from_slice(&rollout.tokens);
    assembled.push(s2);
    assembled.extend_from_slice(&feedback_tokens);
    assembled.push(s3);
    FeedbackAugmentedPrompt {
        base_prompt: task.prompt.clone(),
        answer: rollout.tokens.clone(),
        feedback_tokens,
        assembled,
    }
}

/// Samples `k` rollouts from every FAP; output is row-major in `(i, j)`.
pub fn feedback_guided_sampling(
    snapshot: &PolicySnapshot,
    env: &Environment,
    task: &Task,
    faps: &[FeedbackAugmentedPrompt],
    k: usize,
    key: StreamKey,
    limits: SamplingLimits,
    counter: &RolloutCounter,
) -> Vec<Rollout> {
    let out: Vec<Rollout> = (0..faps.len() * k)
        .into_par_iter()
        .map(|flat| {
            let (i, j) = (flat / k, flat % k);
            let rng = key.rng(Purpose::Fap, &[i as u64, j as u64]);
            let prompt = &faps[i].assembled;
            let (tokens, behavior_logprobs, report) =
                sample_one(snapshot, env, task, prompt, limits.max_answer_len, rng);
            Rollout {
                origin: Origin::Fap,
                conditioning_prompt: prompt.clone(),
                parent_index: Some(i),
                index: j,
                tokens,
                behavior_logprobs,
                report,
            }
        })
        .collect();
    counter.add(out.len());
    out
}

/// Runs both rounds for one task.
pub fn collect_step_batch(
    snapshot: &PolicySnapshot,
    env: &Environment,
    task: &Task,
    n: usize,
    k: usize,
    key: StreamKey,
    limits: SamplingLimits,
    counter: &RolloutCounter,
) -> Result<StepBatch> {
    if n == 0 || k == 0 {
        return Err(Error::Domain(format!("n and k must be >= 1, got n={n}, k={k}")));
    }
    let initial_rollouts = initial_exploration(snapshot, env, task, n, key, limits, counter);
    let faps: Vec<_> = initial_rollouts
        .iter()
        .map(|r| build_fap(env, task, r, limits.max_prompt_len))
        .collect();
    let fap_rollouts = feedback_guided_sampling(snapshot, env, task, &faps, k, key, limits, counter);
    let batch = StepBatch {
        task: task.clone(),
        n,
        k,
        initial_rollouts,
        faps,
        fap_rollouts,
    };
    batch.check_invariants()?;
    Ok(batch)
}

/// A group of rollouts sharing an advantage baseline, in `(origin, i, j)`
/// order.
#[derive(Debug, Clone)]
pub struct RolloutGroup<'a> {
    pub members: Vec<&'a Rollout>,
}

impl<'a> RolloutGroup<'a> {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.members.iter().map(|r| r.reward()).collect()
    }
}

/// The EPA group (all `N` rollouts) and the `n` ECC groups (the `k`
/// children of each FAP).
pub fn assemble_groups(batch: &StepBatch) -> (RolloutGroup<'_>, Vec<RolloutGroup<'_>>) {
    let epa = RolloutGroup {
        members: batch.all_rollouts().collect(),
    };
    let ecc = (0..batch.n)
        .map(|i| RolloutGroup {
            members: batch.fap_children(i).iter().collect(),
        })
        .collect();
    (epa, ecc)
}

/// One line of the optional per-step rollout dump.
#[derive(Debug, Clone, Serialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub task: String,
    pub origin: Origin,
    pub i: usize,
    pub j: Option<usize>,
    pub reward: f64,
    pub tokens: usize,
}

pub fn rollout_records(step: usize, task: &Task, rollouts: &[&Rollout]) -> Vec<RolloutRecord> {
    rollouts
        .iter()
        .map(|r| {
            let (i, j) = match r.origin {
                Origin::Initial => (r.index, None),
                Origin::Fap => (r.parent_index.unwrap_or(0), Some(r.index)),
            };
            RolloutRecord {
                step,
                task: task.id.clone(),
                origin: r.origin,
                i,
                j,
                reward: r.reward(),
                tokens: r.tokens.len(),
            }
        })
        .collect()
}
