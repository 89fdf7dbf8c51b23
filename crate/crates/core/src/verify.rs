//! Finite-difference gradient checks and randomized invariant suites, shared
//! by the test suite and the `gradcheck` / `verify-invariants` commands.

use rand::Rng;
use serde::Serialize;

use crate::envs::{ConstraintClass, Difficulty, Task, VerifierReport};
use crate::metrics::{self, EvaluatedPlan};
use crate::objectives::{self, group_advantages, AdvantageSet, ClipConfig, LossReport};
use crate::policy::{FeatureSpec, PolicyKind, PolicyParams};
use crate::rng::{self, Purpose, StreamRng};
use crate::sampling::{assemble_groups, task_key, FeedbackAugmentedPrompt, Origin, Rollout, StepBatch};
use crate::vocab::{TokenId, Vocab};
use crate::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
/// Instances with a reweighted ratio this close to a clip edge are redrawn,
/// since the surrogate is not differentiable there.
const KINK_MARGIN: f64 = 1e-3;

/// A deliberately wrong analytic gradient, used to show that the check
/// catches real bugs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Negates the contribution of every cross-prompt (FAP) token.
    FlipFapRatioSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Epa,
    Ecc,
}

/// A self-contained two-round batch with known behaviour log-probs.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub theta: PolicyParams,
    pub old: PolicyParams,
    pub batch: StepBatch,
    pub epa_adv: AdvantageSet,
    pub ecc_adv: Vec<AdvantageSet>,
    pub clip: ClipConfig,
}

fn random_content(rng: &mut StreamRng, vocab: &Vocab, len: usize) -> Vec<TokenId> {
    let content: Vec<TokenId> = (0..vocab.size() as TokenId)
        .filter(|&t| t != vocab.eos() && !vocab.is_separator(t))
        .collect();
    (0..len).map(|_| content[rng.random_range(0..content.len())]).collect()
}

fn random_answer(rng: &mut StreamRng, vocab: &Vocab) -> Vec<TokenId> {
    let len = rng.random_range(1..=6);
    let mut ans = random_content(rng, vocab, len);
    if rng.random_bool(0.5) {
        *ans.last_mut().unwrap() = vocab.eos();
    }
    ans
}

fn behaviour(old: &PolicyParams, prompt: &[TokenId], tokens: &[TokenId]) -> Vec<f64> {
    let prep = old.prepare(prompt);
    (0..tokens.len())
        .map(|t| old.eval_token(&prep, &tokens[..t], tokens[t]).log_prob)
        .collect()
}

fn scored(reward: f64) -> VerifierReport {
    VerifierReport {
        reward,
        constraint_results: Vec::new(),
        feedback: Vec::new(),
    }
}

/// Draws a random small instance: |V| ∈ {5, 6}, at most 300 parameters,
/// N = n + n·k ≤ 8 rollouts, answers of length ≤ 6.
pub fn random_instance(seed: u64) -> Result<Instance> {
    let mut rng = rng::stream(seed, Purpose::Check, &[]);
    let vocab = Vocab::synthetic(rng.random_range(1..=2));
    let kind = if rng.random_bool(0.5) {
        PolicyKind::tabular(2)
    } else {
        PolicyKind::LinearBag(FeatureSpec {
            max_position: 3,
            ..FeatureSpec::default()
        })
    };
    let old = PolicyParams::randomized(kind, vocab.clone(), 0.5, &mut rng)?;
    let mut theta = old.clone();
    for w in theta.weights_mut() {
        *w += rng.random_range(-0.15..0.15);
    }
    let (n, k) = if rng.random_bool(0.5) {
        (1, rng.random_range(1..=7))
    } else {
        (2, rng.random_range(1..=3))
    };
    let q_len = rng.random_range(1..=3);
    let q = random_content(&mut rng, &vocab, q_len);
    let task = Task {
        id: format!("check-{seed}"),
        difficulty: Difficulty::Easy,
        prompt: q.clone(),
        constraints: Vec::new(),
    };
    let [s1, s2, s3] = vocab.separators();
    let mut initial = Vec::new();
    let mut faps = Vec::new();
    let mut children = Vec::new();
    for i in 0..n {
        let tokens = random_answer(&mut rng, &vocab);
        let fb_len = rng.random_range(0..=2);
        let feedback = random_content(&mut rng, &vocab, fb_len);
        let mut assembled = q.clone();
        assembled.push(s1);
        assembled.extend_from_slice(&tokens);
        assembled.push(s2);
        assembled.extend_from_slice(&feedback);
        assembled.push(s3);
        initial.push(Rollout {
            origin: Origin::Initial,
            conditioning_prompt: q.clone(),
            parent_index: None,
            index: i,
            behavior_logprobs: behaviour(&old, &q, &tokens),
            tokens: tokens.clone(),
            report: scored(rng.random_range(0..=4) as f64 / 4.0),
        });
        for j in 0..k {
            let ans = random_answer(&mut rng, &vocab);
            children.push(Rollout {
                origin: Origin::Fap,
                conditioning_prompt: assembled.clone(),
                parent_index: Some(i),
                index: j,
                behavior_logprobs: behaviour(&old, &assembled, &ans),
                tokens: ans,
                report: scored(rng.random_range(0..=4) as f64 / 4.0),
            });
        }
        faps.push(FeedbackAugmentedPrompt {
            base_prompt: q.clone(),
            answer: tokens,
            feedback_tokens: feedback,
            assembled,
        });
    }
    let batch = StepBatch {
        task,
        n,
        k,
        initial_rollouts: initial,
        faps,
        fap_rollouts: children,
    };
    batch.check_invariants()?;
    let (epa_group, ecc_groups) = assemble_groups(&batch);
    let epa_adv = group_advantages(&epa_group.rewards(), objectives::DEFAULT_ADV_EPSILON)?;
    let ecc_adv = ecc_groups
        .iter()
        .map(|g| group_advantages(&g.rewards(), objectives::DEFAULT_ADV_EPSILON))
        .collect::<Result<Vec<_>>>()?;
    Ok(Instance {
        seed,
        theta,
        old,
        batch,
        epa_adv,
        ecc_adv,
        clip: ClipConfig::default(),
    })
}

impl Instance {
    pub fn loss(&self, theta: &PolicyParams, which: LossKind) -> Result<LossReport> {
        match which {
            LossKind::Epa => objectives::epa_loss(theta, &self.batch, &self.epa_adv, &self.clip),
            LossKind::Ecc => {
                let groups: Vec<_> = assemble_groups(&self.batch)
                    .1
                    .into_iter()
                    .zip(self.ecc_adv.iter().cloned())
                    .collect();
                objectives::ecc_loss(theta, &groups, &self.clip)
            }
        }
    }

    /// Analytic gradient, optionally corrupted by `mutation`.
    pub fn analytic_grad(&self, which: LossKind, mutation: Mutation) -> Result<Vec<f64>> {
        let full = self.loss(&self.theta, which)?.grad;
        if mutation == Mutation::None || which != LossKind::Epa {
            return Ok(full);
        }
        // Isolate the FAP-token gradient by silencing first-round advantages.
        let mut fap_only = self.epa_adv.clone();
        for v in &mut fap_only.values[..self.batch.initial_rollouts.len()] {
            *v = 0.0;
        }
        let fap = objectives::epa_loss(&self.theta, &self.batch, &fap_only, &self.clip)?.grad;
        Ok(full.iter().zip(&fap).map(|(g, f)| g - 2.0 * f).collect())
    }

    pub fn numeric_grad(&self, which: LossKind, h: f64) -> Result<Vec<f64>> {
        let mut probe = self.theta.clone();
        let mut out = Vec::with_capacity(probe.num_params());
        for i in 0..probe.num_params() {
            let w = self.theta.weights()[i];
            probe.weights_mut()[i] = w + h;
            let up = self.loss(&probe, which)?.value;
            probe.weights_mut()[i] = w - h;
            let down = self.loss(&probe, which)?.value;
            probe.weights_mut()[i] = w;
            out.push((up - down) / (2.0 * h));
        }
        Ok(out)
    }

    /// Smallest distance of any (reweighted) ratio to a clip edge.
    pub fn kink_distance(&self, which: LossKind) -> f64 {
        let eps = self.clip.epsilon;
        let c = self.clip.reweight_c;
        let mut best = f64::INFINITY;
        let rollouts: Vec<&Rollout> = match which {
            LossKind::Epa => self.batch.all_rollouts().collect(),
            LossKind::Ecc => self.batch.fap_rollouts.iter().collect(),
        };
        for r in rollouts {
            let target = match which {
                LossKind::Epa => &self.batch.task.prompt,
                LossKind::Ecc => &r.conditioning_prompt,
            };
            let prep = self.theta.prepare(target);
            for t in 0..r.tokens.len() {
                let lp = self.theta.eval_token(&prep, &r.tokens[..t], r.tokens[t]).log_prob;
                let rho = (lp - r.behavior_logprobs[t]).exp();
                let x = if which == LossKind::Epa && r.origin == Origin::Fap {
                    objectives::reweight(rho, c)
                } else {
                    rho
                };
                best = best.min((x - (1.0 - eps)).abs()).min((x - (1.0 + eps)).abs());
            }
        }
        best
    }
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-6)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckCase {
    pub seed: u64,
    pub loss: LossKind,
    pub params: usize,
    pub rollouts: usize,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub skipped_near_kink: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&GradcheckCase> {
        self.cases
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Checks `trials` off-kink instances for each loss, drawing instance seeds
/// from `seed`.
pub fn gradcheck(seed: u64, trials: usize, mutation: Mutation) -> Result<GradcheckReport> {
    let mut cases = Vec::new();
    let mut skipped = 0;
    for which in [LossKind::Epa, LossKind::Ecc] {
        let mut accepted = 0;
        let mut draw = 0u64;
        while accepted < trials {
            let inst_seed = rng::mix(&[seed, which as u64, draw]);
            draw += 1;
            let inst = random_instance(inst_seed)?;
            if inst.kink_distance(which) < KINK_MARGIN {
                skipped += 1;
                continue;
            }
            let analytic = inst.analytic_grad(which, mutation)?;
            let numeric = inst.numeric_grad(which, FD_STEP)?;
            cases.push(GradcheckCase {
                seed: inst_seed,
                loss: which,
                params: inst.theta.num_params(),
                rollouts: inst.batch.total(),
                relative_error: relative_error(&analytic, &numeric),
            });
            accepted += 1;
        }
    }
    let max_relative_error = cases.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        cases,
        skipped_near_kink: skipped,
        max_relative_error,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub failures: Vec<String>,
}

impl InvariantOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn run_cases(
    name: &'static str,
    seed: u64,
    cases: usize,
    check: impl Fn(&mut StreamRng) -> Option<String>,
) -> InvariantOutcome {
    let mut failures = Vec::new();
    for c in 0..cases {
        let mut rng = rng::stream(seed, Purpose::Check, &[task_key(name), c as u64]);
        if let Some(msg) = check(&mut rng) {
            failures.push(format!("case {c}: {msg}"));
            if failures.len() >= 5 {
                break;
            }
        }
    }
    InvariantOutcome { name, cases, failures }
}

fn random_plans(rng: &mut StreamRng) -> Vec<EvaluatedPlan> {
    let count = rng.random_range(1..=8);
    (0..count)
        .map(|i| {
            let m = rng.random_range(0..=6);
            let results = (0..m)
                .map(|_| {
                    let class = if rng.random_bool(0.5) {
                        ConstraintClass::Hard
                    } else {
                        ConstraintClass::Commonsense
                    };
                    (class, rng.random_bool(0.7))
                })
                .collect();
            EvaluatedPlan::new(
                format!("p{i}"),
                Difficulty::Easy,
                results,
                rng.random_range(-1..=1) as f64,
            )
        })
        .collect()
}

/// Randomized checks of the formula-level invariants; the full property
/// suites live in the test tree.
pub fn run_invariants(seed: u64, cases: usize) -> Result<Vec<InvariantOutcome>> {
    let mut out = Vec::new();
    out.push(run_cases("advantages_zero_mean_unit_scale", seed, cases, |rng| {
        let len = rng.random_range(1..=16);
        let rewards: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let adv = group_advantages(&rewards, objectives::DEFAULT_ADV_EPSILON).ok()?;
        let mean = adv.values.iter().sum::<f64>() / len as f64;
        if mean.abs() > 1e-9 {
            return Some(format!("advantage mean {mean}"));
        }
        if adv.std > 1e-3 {
            let sd = (adv.values.iter().map(|a| a * a).sum::<f64>() / len as f64).sqrt();
            if (sd - adv.std / (adv.std + adv.eps_adv)).abs() > 1e-9 {
                return Some(format!("advantage scale {sd}"));
            }
        }
        None
    }));
    out.push(run_cases("clipped_term_is_pessimistic", seed, cases, |rng| {
        let x: f64 = rng.random_range(0.0..3.0);
        let a: f64 = rng.random_range(-2.0..2.0);
        let v = objectives::clipped_term(x, a, 0.2);
        (v > x * a + 1e-15).then(|| format!("clipped_term({x}, {a}) = {v} above x·A"))
    }));
    out.push(run_cases("reweight_monotone_bounded", seed, cases, |rng| {
        let a: f64 = rng.random_range(0.0..10.0);
        let b: f64 = a + rng.random_range(1e-6..1.0);
        let (fa, fb) = (objectives::reweight(a, 0.1), objectives::reweight(b, 0.1));
        (!(0.0..1.0).contains(&fa) || fb <= fa).then(|| format!("f({a})={fa}, f({b})={fb}"))
    }));
    out.push(run_cases("on_policy_ratios_are_one", seed, cases, |rng| {
        let inst = random_instance(rng.random()).ok()?;
        let same = Instance {
            theta: inst.old.clone(),
            ..inst
        };
        let ecc = same.loss(&same.old, LossKind::Ecc).ok()?;
        (ecc.value.abs() > 1e-12).then(|| format!("ECC loss {} at θ = θ_old", ecc.value))
    }));
    out.push(run_cases("fap_parses_back", seed, cases, |rng| {
        let inst = random_instance(rng.random()).ok()?;
        let vocab = inst.theta.vocab();
        for fap in &inst.batch.faps {
            let (q, ans, fb) = FeedbackAugmentedPrompt::parse(vocab, &fap.assembled)?;
            if q != fap.base_prompt || ans != fap.answer || fb != fap.feedback_tokens {
                return Some("FAP did not parse back into its parts".into());
            }
        }
        None
    }));
    out.push(run_cases("final_pass_below_macro", seed, cases, |rng| {
        let plans = random_plans(rng);
        let fp = metrics::final_pass_rate(&plans).ok()?;
        for class in [ConstraintClass::Hard, ConstraintClass::Commonsense] {
            let m = metrics::macro_pass_rate(&plans, class).ok()?;
            if fp > m {
                return Some(format!("final {fp} > macro {m}"));
            }
        }
        None
    }));
    Ok(out)
}
