//! Group-normalised advantages, importance ratios and the clipped
//! surrogate losses of both training objectives.
//!
//! Gradients are exact derivatives of the loss with advantages and the
//! behaviour policy held constant, and with the `min`/`clip` selector frozen
//! at the evaluated parameters.

use crate::policy::{Context, PolicyParams};
use crate::sampling::{Rollout, RolloutGroup, StepBatch};
use crate::vocab::TokenId;
use crate::{Error, Result};

pub const DEFAULT_CLIP_EPSILON: f64 = 0.2;
pub const DEFAULT_REWEIGHT_C: f64 = 0.1;
pub const DEFAULT_ADV_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub eps_adv: f64,
}

/// `(r − μ) / (σ + ϵ)` with population mean and standard deviation. A group
/// whose rewards are all equal gets all-zero advantages.
pub fn group_advantages(rewards: &[f64], eps_adv: f64) -> Result<AdvantageSet> {
    if rewards.is_empty() {
        return Err(Error::Domain("advantages of an empty group".into()));
    }
    if !(eps_adv >= 0.0 && eps_adv.is_finite()) {
        return Err(Error::Domain(format!("eps_adv must be >= 0, got {eps_adv}")));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let degenerate = rewards.iter().all(|&r| r == rewards[0]) || std + eps_adv == 0.0;
    let values = if degenerate {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / (std + eps_adv)).collect()
    };
    Ok(AdvantageSet {
        values,
        mean,
        std: if degenerate { 0.0 } else { std },
        eps_adv,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    pub epsilon: f64,
    pub reweight_c: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            epsilon: DEFAULT_CLIP_EPSILON,
            reweight_c: DEFAULT_REWEIGHT_C,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "clip epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.reweight_c > 0.0 && self.reweight_c.is_finite()) {
            return Err(Error::Config(format!(
                "reweight_c must be positive, got {}",
                self.reweight_c
            )));
        }
        Ok(())
    }
}

/// The map applied to a ratio before clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reweight {
    Identity,
    /// `f(ρ) = ρ / (ρ + c)`.
    Saturating {
        c: f64,
    },
}

impl Reweight {
    /// `(f(ρ), f′(ρ))`.
    fn eval(self, rho: f64) -> (f64, f64) {
        match self {
            Reweight::Identity => (rho, 1.0),
            Reweight::Saturating { c } => (rho / (rho + c), c / (rho + c).powi(2)),
        }
    }
}

/// `f(ρ) = ρ / (ρ + c)`.
pub fn reweight(rho: f64, c: f64) -> f64 {
    Reweight::Saturating { c }.eval(rho).0
}

pub fn clip(x: f64, epsilon: f64) -> f64 {
    x.clamp(1.0 - epsilon, 1.0 + epsilon)
}

/// `min(x·Â, clip(x, 1−ε, 1+ε)·Â)`.
pub fn clipped_term(ratio_like: f64, adv: f64, epsilon: f64) -> f64 {
    (ratio_like * adv).min(clip(ratio_like, epsilon) * adv)
}

/// Which branch of the clipped term carries the gradient.
fn gradient_flows(x: f64, adv: f64, epsilon: f64) -> (bool, bool) {
    let unclipped = x * adv;
    let clipped = clip(x, epsilon) * adv;
    let inside = x > 1.0 - epsilon && x < 1.0 + epsilon;
    if unclipped <= clipped || inside {
        (true, false)
    } else {
        (false, true)
    }
}

fn token_log_prob(policy: &PolicyParams, prompt: &[TokenId], ans: &[TokenId], t: usize) -> Result<f64> {
    let token = *ans.get(t).ok_or_else(|| {
        Error::Domain(format!(
            "token index {t} out of range for answer of length {}",
            ans.len()
        ))
    })?;
    policy.log_prob(Context::new(prompt, &ans[..t]), token)
}

/// `π_θ(ans_t | q, ans_<t) / π_old(ans_t | q, ans_<t)`.
pub fn ratio_init(theta: &PolicyParams, old: &PolicyParams, q: &[TokenId], ans: &[TokenId], t: usize) -> Result<f64> {
    Ok((token_log_prob(theta, q, ans, t)? - token_log_prob(old, q, ans, t)?).exp())
}

/// `π_θ(ans_t | q, ans_<t) / π_old(ans_t | q̃, ans_<t)`: the target policy
/// sees the original prompt, the behaviour policy the FAP.
pub fn ratio_fap(
    theta: &PolicyParams,
    old: &PolicyParams,
    q: &[TokenId],
    fap: &[TokenId],
    ans: &[TokenId],
    t: usize,
) -> Result<f64> {
    Ok((token_log_prob(theta, q, ans, t)? - token_log_prob(old, fap, ans, t)?).exp())
}

/// `π_θ(ans_t | q̃, ans_<t) / π_old(ans_t | q̃, ans_<t)`.
pub fn ratio_ecc(theta: &PolicyParams, old: &PolicyParams, fap: &[TokenId], ans: &[TokenId], t: usize) -> Result<f64> {
    ratio_init(theta, old, fap, ans, t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// Contribution of first-round rollouts (EPA only).
    pub init_value: f64,
    /// Contribution of FAP-conditioned rollouts.
    pub fap_value: f64,
    pub grad: Vec<f64>,
    /// Per rollout, the fraction of tokens whose clip branch was binding.
    pub clipped_fraction: Vec<f64>,
}

impl LossReport {
    fn zero(num_params: usize) -> Self {
        LossReport {
            value: 0.0,
            init_value: 0.0,
            fap_value: 0.0,
            grad: vec![0.0; num_params],
            clipped_fraction: Vec::new(),
        }
    }

    /// Averages several reports (one per task in a multi-task step).
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let mut out = LossReport::zero(first.grad.len());
        for r in reports {
            out.value += r.value / n;
            out.init_value += r.init_value / n;
            out.fap_value += r.fap_value / n;
            for (o, g) in out.grad.iter_mut().zip(&r.grad) {
                *o += g / n;
            }
            out.clipped_fraction.extend_from_slice(&r.clipped_fraction);
        }
        Some(out)
    }

    pub fn mean_clipped_fraction(&self) -> f64 {
        if self.clipped_fraction.is_empty() {
            0.0
        } else {
            self.clipped_fraction.iter().sum::<f64>() / self.clipped_fraction.len() as f64
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// One rollout's contribution to a clipped surrogate:
/// `−weight · (1/|ans|) Σₜ min(f(ρₜ)Â, clip(f(ρₜ))Â)` where
/// `ρₜ = π_θ(ansₜ | target_prompt, ans_<t) / exp(behavior_logprobs[t])`.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateTerm<'a> {
    pub target_prompt: &'a [TokenId],
    pub tokens: &'a [TokenId],
    pub behavior_logprobs: &'a [f64],
    pub advantage: f64,
    pub weight: f64,
    pub reweight: Reweight,
}

/// Adds one term's value and gradient; returns (value, clipped fraction).
pub fn accumulate_term(theta: &PolicyParams, term: &SurrogateTerm<'_>, epsilon: f64, grad: &mut [f64]) -> (f64, f64) {
    let len = term.tokens.len();
    if len == 0 {
        return (0.0, 0.0);
    }
    let adv = term.advantage;
    let scale = -term.weight / len as f64;
    if adv == 0.0 {
        // Both branches vanish identically.
        return (0.0, 0.0);
    }
    let prep = theta.prepare(term.target_prompt);
    let mut sum = 0.0;
    let mut clipped = 0usize;
    for t in 0..len {
        let prefix = &term.tokens[..t];
        let token = term.tokens[t];
        let eval = theta.eval_token(&prep, prefix, token);
        let rho = (eval.log_prob - term.behavior_logprobs[t]).exp();
        let (x, dx) = term.reweight.eval(rho);
        sum += clipped_term(x, adv, epsilon);
        let (through_unclipped, binding) = gradient_flows(x, adv, epsilon);
        if binding {
            clipped += 1;
        }
        if through_unclipped {
            // d/dθ [x(ρ) Â] = Â · x′(ρ) · ρ · ∇ log π_θ
            theta.add_log_prob_grad(&prep, prefix, token, &eval, scale * adv * dx * rho, grad);
        }
    }
    (scale * sum, clipped as f64 / len as f64)
}

fn evaluate_terms(theta: &PolicyParams, terms: &[(bool, SurrogateTerm<'_>)], epsilon: f64) -> LossReport {
    let mut report = LossReport::zero(theta.num_params());
    for (is_fap, term) in terms {
        let (v, frac) = accumulate_term(theta, term, epsilon, &mut report.grad);
        if *is_fap {
            report.fap_value += v;
        } else {
            report.init_value += v;
        }
        report.clipped_fraction.push(frac);
    }
    report.value = report.init_value + report.fap_value;
    report
}

fn check_rollout(r: &Rollout) -> Result<()> {
    if r.tokens.len() != r.behavior_logprobs.len() {
        return Err(Error::Domain(
            "rollout tokens and behaviour log-probs differ in length".into(),
        ));
    }
    Ok(())
}

/// EPA loss over the whole group `𝒢_q` of one task: initial rollouts use
/// `ρ¹`, FAP rollouts use the cross-prompt ratio `ρ²` passed through `f`.
pub fn epa_loss(theta: &PolicyParams, batch: &StepBatch, adv: &AdvantageSet, cfg: &ClipConfig) -> Result<LossReport> {
    epa_loss_with(theta, batch, adv, cfg, Reweight::Saturating { c: cfg.reweight_c })
}

/// [`epa_loss`] with an explicit reweighting map for the FAP term.
pub fn epa_loss_with(
    theta: &PolicyParams,
    batch: &StepBatch,
    adv: &AdvantageSet,
    cfg: &ClipConfig,
    fap_reweight: Reweight,
) -> Result<LossReport> {
    cfg.validate()?;
    let n_total = batch.initial_rollouts.len() + batch.fap_rollouts.len();
    if n_total == 0 {
        return Err(Error::Domain("EPA loss of an empty group".into()));
    }
    if adv.values.len() != n_total {
        return Err(Error::Domain(format!(
            "EPA group has {n_total} rollouts but {} advantages",
            adv.values.len()
        )));
    }
    let weight = 1.0 / n_total as f64;
    let q = &batch.task.prompt;
    let mut terms = Vec::with_capacity(n_total);
    for (r, &a) in batch.all_rollouts().zip(&adv.values) {
        check_rollout(r)?;
        let is_fap = r.parent_index.is_some();
        terms.push((
            is_fap,
            SurrogateTerm {
                target_prompt: q,
                tokens: &r.tokens,
                behavior_logprobs: &r.behavior_logprobs,
                advantage: a,
                weight,
                reweight: if is_fap { fap_reweight } else { Reweight::Identity },
            },
        ));
    }
    Ok(evaluate_terms(theta, &terms, cfg.epsilon))
}

/// ECC loss: a standard same-prompt clipped surrogate inside each FAP group,
/// averaged over groups.
pub fn ecc_loss(
    theta: &PolicyParams,
    groups: &[(RolloutGroup<'_>, AdvantageSet)],
    cfg: &ClipConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(Error::Domain("ECC loss without groups".into()));
    }
    let mut terms = Vec::new();
    for (group, adv) in groups {
        if group.is_empty() || adv.values.len() != group.len() {
            return Err(Error::Domain(format!(
                "ECC group of {} rollouts with {} advantages",
                group.len(),
                adv.values.len()
            )));
        }
        let weight = 1.0 / (groups.len() * group.len()) as f64;
        for (r, &a) in group.members.iter().zip(&adv.values) {
            check_rollout(r)?;
            terms.push((
                true,
                SurrogateTerm {
                    target_prompt: &r.conditioning_prompt,
                    tokens: &r.tokens,
                    behavior_logprobs: &r.behavior_logprobs,
                    advantage: a,
                    weight,
                    reweight: Reweight::Identity,
                },
            ));
        }
    }
    Ok(evaluate_terms(theta, &terms, cfg.epsilon))
}

/// Vanilla GRPO surrogate over one group, every rollout scored under its
/// own conditioning prompt.
pub fn grpo_loss(
    theta: &PolicyParams,
    group: &RolloutGroup<'_>,
    adv: &AdvantageSet,
    cfg: &ClipConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    if group.is_empty() {
        return Err(Error::Domain("GRPO loss of an empty group".into()));
    }
    if adv.values.len() != group.len() {
        return Err(Error::Domain("GRPO group and advantages differ in length".into()));
    }
    let weight = 1.0 / group.len() as f64;
    let mut terms = Vec::with_capacity(group.len());
    for (r, &a) in group.members.iter().zip(&adv.values) {
        check_rollout(r)?;
        terms.push((
            false,
            SurrogateTerm {
                target_prompt: &r.conditioning_prompt,
                tokens: &r.tokens,
                behavior_logprobs: &r.behavior_logprobs,
                advantage: a,
                weight,
                reweight: Reweight::Identity,
            },
        ));
    }
    Ok(evaluate_terms(theta, &terms, cfg.epsilon))
}
