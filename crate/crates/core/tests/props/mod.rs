//! Property suites shared by the `properties` and `acceptance` targets.
//! Each entry runs `cases` deterministic proptest cases.

use std::sync::OnceLock;

use fbos_core::envs::{
    render_feedback, ConstraintClass, Difficulty, EnvConfig, Environment, GrammarProofConfig, SuiteSpec, Task,
};
use fbos_core::metrics::{avg_score, final_pass_rate, macro_pass_rate, micro_pass_rate, EvalSummary, EvaluatedPlan};
use fbos_core::objectives::{
    self, clip, clipped_term, ecc_loss, epa_loss, epa_loss_with, group_advantages, ratio_ecc, reweight, ClipConfig,
    Reweight,
};
use fbos_core::optimizer::OptimizerSpec;
use fbos_core::policy::{sample_rollout, Context, FeatureSpec, PolicyKind, PolicyParams, PolicySnapshot};
use fbos_core::rng::{self, Purpose};
use fbos_core::sampling::{
    assemble_groups, build_fap, collect_step_batch, FeedbackAugmentedPrompt, Origin, Rollout, RolloutCounter,
    SamplingLimits, StreamKey,
};
use fbos_core::trainer::{Method, TrainConfig, Trainer};
use fbos_core::verify::{random_instance, relative_error, LossKind};
use fbos_core::vocab::{TokenId, Vocab};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::seq::SliceRandom;

pub type Property = fn(u32) -> Result<(), String>;

pub const ALL: &[(&str, Property)] = &[
    ("policy_normalization", policy_normalization),
    (
        "log_prob_grad_matches_finite_differences",
        log_prob_grad_matches_finite_differences,
    ),
    ("tabular_grad_sums_to_zero", tabular_grad_sums_to_zero),
    ("snapshot_immutability", snapshot_immutability),
    ("sampling_determinism", sampling_determinism),
    ("vocab_well_formed", vocab_well_formed),
    ("verify_is_pure", verify_is_pure),
    ("reward_monotone_in_passed_set", reward_monotone_in_passed_set),
    ("feedback_sound_and_complete", feedback_sound_and_complete),
    ("grammar_proof_reward_range", grammar_proof_reward_range),
    (
        "render_feedback_order_free_and_bounded",
        render_feedback_order_free_and_bounded,
    ),
    ("fap_layout_and_parse_back", fap_layout_and_parse_back),
    ("step_batch_partition_and_budget", step_batch_partition_and_budget),
    ("advantages_zero_sum", advantages_zero_sum),
    ("reweight_analytics", reweight_analytics),
    ("clip_selector_brute_force", clip_selector_brute_force),
    ("reweight_scoping", reweight_scoping),
    ("ecc_on_policy_nullity", ecc_on_policy_nullity),
    ("loss_report_shape", loss_report_shape),
    (
        "rates_bounded_and_final_below_macro",
        rates_bounded_and_final_below_macro,
    ),
    ("macro_below_micro_for_equal_counts", macro_below_micro_for_equal_counts),
    ("tier_rates_aggregate", tier_rates_aggregate),
    ("budget_and_update_parity", budget_and_update_parity),
    (
        "constant_rewards_leave_policy_fixed",
        constant_rewards_leave_policy_fixed,
    ),
];

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn fail(e: impl std::fmt::Display) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

struct Fixture {
    env: Environment,
    tasks: Vec<Task>,
}

fn plan_fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let env = Environment::new(&EnvConfig::default()).unwrap();
        let tasks = env
            .make_toy_suite(&SuiteSpec {
                easy: 10,
                medium: 10,
                hard: 10,
                seed: 3,
            })
            .unwrap();
        Fixture { env, tasks }
    })
}

fn proof_fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let env = Environment::new(&EnvConfig::GrammarProof(GrammarProofConfig::default())).unwrap();
        let tasks = env
            .make_toy_suite(&SuiteSpec {
                easy: 5,
                medium: 5,
                hard: 5,
                seed: 4,
            })
            .unwrap();
        Fixture { env, tasks }
    })
}

/// Answers mostly built from answer tokens and EOS, with the occasional
/// arbitrary vocab token.
fn answer(env: &Environment, picks: &[(bool, u16)]) -> Vec<TokenId> {
    let pool = env.answer_tokens();
    let v = env.vocab().size();
    picks
        .iter()
        .map(|&(any, i)| {
            if any {
                (i as usize % v) as TokenId
            } else if i % 7 == 0 {
                env.vocab().eos()
            } else {
                pool[i as usize % pool.len()]
            }
        })
        .collect()
}

fn picks(max_len: usize) -> impl Strategy<Value = Vec<(bool, u16)>> {
    prop::collection::vec((prop::bool::weighted(0.1), any::<u16>()), 0..=max_len)
}

fn policy_kind(tabular: bool, order: usize) -> PolicyKind {
    if tabular {
        PolicyKind::tabular(order)
    } else {
        PolicyKind::LinearBag(FeatureSpec {
            max_position: 3,
            ..FeatureSpec::default()
        })
    }
}

/// A random policy plus a context over its vocab.
fn policy_case() -> impl Strategy<Value = (bool, usize, usize, u64, Vec<u16>, Vec<u16>)> {
    (
        any::<bool>(),
        1usize..=2,
        1usize..=4,
        any::<u64>(),
        prop::collection::vec(any::<u16>(), 0..6),
        prop::collection::vec(any::<u16>(), 0..4),
    )
}

fn build_policy(tabular: bool, order: usize, content: usize, seed: u64, scale: f64) -> PolicyParams {
    let mut rng = rng::stream(seed, Purpose::Check, &[]);
    PolicyParams::randomized(policy_kind(tabular, order), Vocab::synthetic(content), scale, &mut rng).unwrap()
}

fn tokens_mod(raw: &[u16], v: usize) -> Vec<TokenId> {
    raw.iter().map(|&t| (t as usize % v) as TokenId).collect()
}

pub fn policy_normalization(cases: u32) -> Result<(), String> {
    run(
        cases,
        policy_case(),
        |(tabular, order, content, seed, prompt, prefix)| {
            let p = build_policy(tabular, order, content, seed, 3.0);
            let v = p.vocab().size();
            let (prompt, prefix) = (tokens_mod(&prompt, v), tokens_mod(&prefix, v));
            let ctx = Context::new(&prompt, &prefix);
            let total: f64 = (0..v as TokenId).map(|t| p.log_prob(ctx, t).unwrap().exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "Σ π = {total}");
            prop_assert!(p.log_prob(ctx, v as TokenId).is_err());
            Ok(())
        },
    )
}

pub fn log_prob_grad_matches_finite_differences(cases: u32) -> Result<(), String> {
    run(
        cases,
        (policy_case(), any::<u16>()),
        |((tabular, order, content, seed, prompt, prefix), tok)| {
            let p = build_policy(tabular, order, content, seed, 1.0);
            let v = p.vocab().size();
            let (prompt, prefix) = (tokens_mod(&prompt, v), tokens_mod(&prefix, v));
            let token = (tok as usize % v) as TokenId;
            let ctx = Context::new(&prompt, &prefix);
            let analytic = p.log_prob_grad(ctx, token).map_err(fail)?.to_dense(p.num_params());
            let h = 1e-5;
            let mut probe = p.clone();
            let mut numeric = Vec::with_capacity(p.num_params());
            for i in 0..p.num_params() {
                let w = p.weights()[i];
                probe.weights_mut()[i] = w + h;
                let up = probe.log_prob(ctx, token).unwrap();
                probe.weights_mut()[i] = w - h;
                let down = probe.log_prob(ctx, token).unwrap();
                probe.weights_mut()[i] = w;
                numeric.push((up - down) / (2.0 * h));
            }
            let err = relative_error(&analytic, &numeric);
            prop_assert!(err < 1e-6, "relative error {err}");
            Ok(())
        },
    )
}

pub fn tabular_grad_sums_to_zero(cases: u32) -> Result<(), String> {
    run(cases, policy_case(), |(_, order, content, seed, prompt, prefix)| {
        let p = build_policy(true, order, content, seed, 2.0);
        let v = p.vocab().size();
        let (prompt, prefix) = (tokens_mod(&prompt, v), tokens_mod(&prefix, v));
        let ctx = Context::new(&prompt, &prefix);
        let rows = p.active_row_indices(ctx);
        prop_assert_eq!(rows.len(), 1);
        for token in 0..v as TokenId {
            let g = p.log_prob_grad(ctx, token).unwrap();
            let sum: f64 = (0..v as TokenId).map(|t| g.get(p.row_slot(rows[0], t))).sum();
            prop_assert!(sum.abs() <= 1e-12, "row gradient sums to {sum}");
            let dense = g.to_dense(p.num_params());
            let outside: f64 = dense.iter().map(|x| x.abs()).sum::<f64>()
                - (0..v as TokenId)
                    .map(|t| g.get(p.row_slot(rows[0], t)).abs())
                    .sum::<f64>();
            prop_assert!(outside.abs() <= 1e-15, "gradient leaks outside the active row");
        }
        Ok(())
    })
}

pub fn snapshot_immutability(cases: u32) -> Result<(), String> {
    run(
        cases,
        (policy_case(), any::<u64>()),
        |((tabular, order, content, seed, prompt, prefix), bump)| {
            let mut live = build_policy(tabular, order, content, seed, 1.0);
            let v = live.vocab().size();
            let (prompt, prefix) = (tokens_mod(&prompt, v), tokens_mod(&prefix, v));
            let ctx = Context::new(&prompt, &prefix);
            let snap = PolicySnapshot::freeze(&live, 0);
            let before: Vec<u64> = (0..v as TokenId)
                .map(|t| snap.params().log_prob(ctx, t).unwrap().to_bits())
                .collect();
            let grad: Vec<f64> = {
                let mut rng = rng::stream(bump, Purpose::Check, &[]);
                (0..live.num_params())
                    .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                    .collect()
            };
            let mut state = fbos_core::optimizer::OptimizerState::new(OptimizerSpec::sgd(0.5), live.num_params());
            fbos_core::optimizer::apply_update(&mut live, &grad, &mut state, 0).map_err(fail)?;
            let after: Vec<u64> = (0..v as TokenId)
                .map(|t| snap.params().log_prob(ctx, t).unwrap().to_bits())
                .collect();
            prop_assert_eq!(before, after);
            prop_assert_ne!(live.weights(), snap.params().weights());
            Ok(())
        },
    )
}

pub fn sampling_determinism(cases: u32) -> Result<(), String> {
    run(
        cases,
        (policy_case(), any::<u64>(), 1usize..8),
        |((tabular, order, content, seed, prompt, _), s, max_len)| {
            let p = build_policy(tabular, order, content, seed, 2.0);
            let v = p.vocab().size();
            let prompt = tokens_mod(&prompt, v);
            let snap = PolicySnapshot::freeze(&p, 3);
            let a = sample_rollout(&snap, &prompt, max_len, &mut rng::stream(s, Purpose::Check, &[]));
            let b = sample_rollout(&snap, &prompt, max_len, &mut rng::stream(s, Purpose::Check, &[]));
            prop_assert_eq!(&a, &b);
            prop_assert!(!a.tokens.is_empty() && a.tokens.len() <= max_len);
            prop_assert_eq!(a.tokens.len(), a.log_probs.len());
            let eos = p.vocab().eos();
            prop_assert!(a.tokens[..a.tokens.len() - 1].iter().all(|&t| t != eos));
            for t in 0..a.tokens.len() {
                let lp = p.log_prob(Context::new(&prompt, &a.tokens[..t]), a.tokens[t]).unwrap();
                prop_assert!((lp - a.log_probs[t]).abs() <= 1e-12);
            }
            Ok(())
        },
    )
}

pub fn vocab_well_formed(cases: u32) -> Result<(), String> {
    run(cases, 0usize..64, |content| {
        let v = Vocab::synthetic(content);
        prop_assert!(v.size() >= 2);
        let mut names: Vec<&String> = v.tokens().iter().collect();
        names.sort();
        names.dedup();
        prop_assert_eq!(names.len(), v.size());
        for s in v.separators() {
            prop_assert!((s as usize) < v.size() && v.is_separator(s) && s != v.eos());
        }
        for (i, name) in v.tokens().iter().enumerate() {
            prop_assert_eq!(v.id(name), Some(i as TokenId));
        }
        Ok(())
    })
}

fn env_case() -> impl Strategy<Value = (bool, usize, Vec<(bool, u16)>)> {
    (any::<bool>(), any::<usize>(), picks(12))
}

fn env_pick(grammar: bool, task: usize) -> (&'static Environment, &'static Task) {
    let f = if grammar { proof_fixture() } else { plan_fixture() };
    (&f.env, &f.tasks[task % f.tasks.len()])
}

pub fn verify_is_pure(cases: u32) -> Result<(), String> {
    run(cases, env_case(), |(grammar, task, raw)| {
        let (env, task) = env_pick(grammar, task);
        let ans = answer(env, &raw);
        let a = env.verify(task, &ans);
        let b = env.clone().verify(&task.clone(), &ans.clone());
        prop_assert_eq!(a, b);
        Ok(())
    })
}

fn passed_set(env: &Environment, task: &Task, ans: &[TokenId]) -> (Vec<bool>, f64) {
    let r = env.verify(task, ans);
    (r.constraint_results.iter().map(|c| c.passed).collect(), r.reward)
}

pub fn reward_monotone_in_passed_set(cases: u32) -> Result<(), String> {
    run(
        cases,
        (any::<usize>(), prop::collection::vec(picks(10), 4)),
        |(task, raws)| {
            let (env, task) = env_pick(false, task);
            let mut pool: Vec<Vec<TokenId>> = raws.iter().map(|r| answer(env, r)).collect();
            let sol = env.brute_force_solution(task).ok_or_else(|| fail("unsolvable task"))?;
            // Single-token edits of a solution give near-superset pairs.
            let mut edited = sol.clone();
            if let Some(first) = raws[0].first() {
                let i = first.1 as usize % edited.len();
                edited[i] = answer(env, &raws[0])[0];
            }
            pool.push(sol);
            pool.push(edited);
            let scored: Vec<_> = pool.iter().map(|a| passed_set(env, task, a)).collect();
            for (pa, ra) in &scored {
                for (pb, rb) in &scored {
                    let superset = pa.iter().zip(pb).all(|(a, b)| *a || !*b) && pa != pb;
                    if superset {
                        prop_assert!(ra >= rb, "strict superset scored {ra} < {rb}");
                    }
                }
                let all = pa.iter().all(|&p| p);
                prop_assert_eq!(all, *ra == 1.0);
                prop_assert!((0.0..=1.0).contains(ra));
            }
            Ok(())
        },
    )
}

pub fn feedback_sound_and_complete(cases: u32) -> Result<(), String> {
    run(cases, env_case(), |(grammar, task, raw)| {
        let (env, task) = env_pick(grammar, task);
        let ans = answer(env, &raw);
        let r = env.verify(task, &ans);
        prop_assert_eq!(r.constraint_results.len(), task.constraints.len());
        let failed: Vec<u32> = r
            .constraint_results
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.constraint_id)
            .collect();
        let named: Vec<u32> = r.feedback.iter().map(|v| v.constraint_id).collect();
        prop_assert_eq!(&failed, &named);
        prop_assert_eq!(r.feedback.is_empty(), r.all_passed());
        for v in &r.feedback {
            let c = r
                .constraint_results
                .iter()
                .find(|c| c.constraint_id == v.constraint_id)
                .unwrap();
            prop_assert!(!v.message.is_empty());
            prop_assert_eq!(v.class, c.class);
            prop_assert_eq!(v.locus, c.locus);
            if let Some((s, e)) = v.locus {
                prop_assert!(s <= e && e <= ans.len().max(1));
            }
        }
        Ok(())
    })
}

pub fn grammar_proof_reward_range(cases: u32) -> Result<(), String> {
    run(cases, (any::<usize>(), picks(10)), |(task, raw)| {
        let (env, task) = env_pick(true, task);
        let r = env.verify(task, &answer(env, &raw));
        prop_assert!([-1.0, 0.0, 1.0].contains(&r.reward), "reward {}", r.reward);
        prop_assert_eq!(r.reward == 1.0, r.all_passed());
        Ok(())
    })
}

pub fn render_feedback_order_free_and_bounded(cases: u32) -> Result<(), String> {
    run(
        cases,
        (env_case(), any::<u64>(), 0usize..40),
        |((grammar, task, raw), shuffle, max_len)| {
            let (env, task) = env_pick(grammar, task);
            let report = env.verify(task, &answer(env, &raw));
            let mut shuffled = report.clone();
            shuffled
                .feedback
                .shuffle(&mut rng::stream(shuffle, Purpose::Check, &[]));
            let a = render_feedback(&report, max_len);
            prop_assert_eq!(&a, &render_feedback(&shuffled, max_len));
            prop_assert!(a.len() <= max_len);
            // Output is a prefix of the priority-sorted messages.
            let mut sorted = report.feedback.clone();
            sorted.sort_by_key(|v| (v.class, v.constraint_id));
            let mut expect = Vec::new();
            for v in &sorted {
                if expect.len() + v.message.len() > max_len {
                    break;
                }
                expect.extend_from_slice(&v.message);
            }
            prop_assert_eq!(a, expect);
            prop_assert!(!env
                .vocab()
                .separators()
                .iter()
                .any(|s| render_feedback(&report, 1000).contains(s)));
            Ok(())
        },
    )
}

pub fn fap_layout_and_parse_back(cases: u32) -> Result<(), String> {
    run(
        cases,
        (env_case(), 4usize..80),
        |((grammar, task, raw), max_prompt_len)| {
            let (env, task) = env_pick(grammar, task);
            let ans: Vec<TokenId> = answer(env, &raw)
                .into_iter()
                .filter(|&t| !env.vocab().is_separator(t))
                .collect();
            let report = env.verify(task, &ans);
            let rollout = Rollout {
                origin: Origin::Initial,
                conditioning_prompt: task.prompt.clone(),
                parent_index: None,
                index: 0,
                behavior_logprobs: vec![0.0; ans.len()],
                tokens: ans.clone(),
                report: report.clone(),
            };
            let fap = build_fap(env, task, &rollout, max_prompt_len);
            let fixed = task.prompt.len() + ans.len() + 3;
            prop_assert_eq!(fap.assembled.len(), fixed + fap.feedback_tokens.len());
            if fixed <= max_prompt_len {
                prop_assert!(fap.assembled.len() <= max_prompt_len);
            }
            prop_assert_eq!(
                &fap.feedback_tokens,
                &render_feedback(&report, fap.feedback_tokens.len())
            );
            let (q, a, f) =
                FeedbackAugmentedPrompt::parse(env.vocab(), &fap.assembled).ok_or_else(|| fail("no parse"))?;
            prop_assert_eq!(q, task.prompt.clone());
            prop_assert_eq!(a, ans);
            prop_assert_eq!(f, fap.feedback_tokens.clone());
            Ok(())
        },
    )
}

pub fn step_batch_partition_and_budget(cases: u32) -> Result<(), String> {
    run(
        cases,
        (
            any::<bool>(),
            any::<usize>(),
            1usize..=4,
            1usize..=4,
            any::<u64>(),
            0usize..50,
        ),
        |(grammar, task, n, k, seed, step)| {
            let (env, task) = env_pick(grammar, task);
            let mut rng = rng::stream(seed, Purpose::Check, &[]);
            let mut p = PolicyParams::randomized(policy_kind(false, 1), env.vocab().clone(), 0.5, &mut rng).unwrap();
            p.add_token_prior(&env.answer_tokens(), 2.0).unwrap();
            let snap = PolicySnapshot::freeze(&p, step);
            let limits = SamplingLimits {
                max_answer_len: 6,
                max_prompt_len: 48,
            };
            let counter = RolloutCounter::new();
            let key = StreamKey::new(seed, step, task);
            let batch = collect_step_batch(&snap, env, task, n, k, key, limits, &counter).map_err(fail)?;
            prop_assert_eq!(counter.get(), (n + n * k) as u64);
            prop_assert_eq!(batch.total(), n + n * k);
            batch.check_invariants().map_err(fail)?;
            let (epa, ecc) = assemble_groups(&batch);
            prop_assert_eq!(epa.len(), n + n * k);
            prop_assert!(epa
                .members
                .iter()
                .zip(batch.all_rollouts())
                .all(|(a, b)| std::ptr::eq(*a, b)));
            prop_assert_eq!(ecc.len(), n);
            let flat: Vec<&Rollout> = ecc.iter().flat_map(|g| g.members.iter().copied()).collect();
            prop_assert_eq!(flat.len(), n * k);
            prop_assert!(flat.iter().zip(&batch.fap_rollouts).all(|(a, b)| std::ptr::eq(*a, b)));
            for (i, g) in ecc.iter().enumerate() {
                prop_assert_eq!(g.len(), k);
                for (j, r) in g.members.iter().enumerate() {
                    prop_assert_eq!((r.parent_index, r.index), (Some(i), j));
                    prop_assert_eq!(&r.conditioning_prompt, &batch.faps[i].assembled);
                }
            }
            for r in batch.all_rollouts() {
                prop_assert_eq!(r.report.clone(), env.verify(task, &r.tokens));
                for t in 0..r.tokens.len() {
                    let lp = p
                        .log_prob(Context::new(&r.conditioning_prompt, &r.tokens[..t]), r.tokens[t])
                        .unwrap();
                    prop_assert!((lp - r.behavior_logprobs[t]).abs() <= 1e-12);
                }
            }
            let again =
                collect_step_batch(&snap, env, task, n, k, key, limits, &RolloutCounter::new()).map_err(fail)?;
            for (a, b) in batch.all_rollouts().zip(again.all_rollouts()) {
                prop_assert_eq!(&a.tokens, &b.tokens);
                prop_assert_eq!(&a.behavior_logprobs, &b.behavior_logprobs);
            }
            Ok(())
        },
    )
}

pub fn advantages_zero_sum(cases: u32) -> Result<(), String> {
    let rewards = prop_oneof![
        prop::collection::vec(-1.0f64..1.0, 1..80),
        prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 0.5, 1.0]), 1..80),
    ];
    let eps = prop_oneof![Just(0.0), Just(1e-6), 0.0f64..1.0];
    run(cases, (rewards, eps), |(rewards, eps)| {
        let a = group_advantages(&rewards, eps).map_err(fail)?;
        let sum: f64 = a.values.iter().sum();
        prop_assert!(sum.abs() <= 1e-9, "Σ Â = {sum}");
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let sd = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
        if rewards.iter().all(|&r| r == rewards[0]) {
            prop_assert!(a.values.iter().all(|&v| v == 0.0));
        } else {
            for (v, r) in a.values.iter().zip(&rewards) {
                prop_assert!((v - (r - mean) / (sd + eps)).abs() <= 1e-9);
            }
        }
        Ok(())
    })
}

pub fn reweight_analytics(cases: u32) -> Result<(), String> {
    run(cases, (0.0f64..20.0, 1e-9f64..5.0, 0.01f64..2.0), |(rho, step, c)| {
        let (fa, fb) = (reweight(rho, c), reweight(rho + step, c));
        prop_assert!(fb > fa, "f not increasing at {rho}");
        prop_assert!((0.0..1.0).contains(&fa));
        prop_assert_eq!(fa < rho, rho > 1.0 - c);
        let h = 1e-9;
        let slope = reweight(h, c) / h;
        prop_assert!((slope * c - 1.0).abs() < 1e-6, "f'(0) = {slope}, expected {}", 1.0 / c);
        Ok(())
    })
}

pub fn clip_selector_brute_force(cases: u32) -> Result<(), String> {
    run(cases, (0.0f64..3.0, -3.0f64..3.0, 0.01f64..0.99), |(x, adv, eps)| {
        let lo = 1.0 - eps;
        let hi = 1.0 + eps;
        let clipped = if x < lo {
            lo
        } else if x > hi {
            hi
        } else {
            x
        };
        prop_assert_eq!(clip(x, eps), clipped);
        let brute = if x * adv <= clipped * adv {
            x * adv
        } else {
            clipped * adv
        };
        prop_assert_eq!(clipped_term(x, adv, eps), brute);
        if (lo..=hi).contains(&x) {
            prop_assert_eq!(clipped_term(x, adv, eps), x * adv);
        }
        Ok(())
    })
}

fn ecc_groups_of(
    inst: &fbos_core::verify::Instance,
) -> Vec<(fbos_core::sampling::RolloutGroup<'_>, objectives::AdvantageSet)> {
    assemble_groups(&inst.batch)
        .1
        .into_iter()
        .zip(inst.ecc_adv.iter().cloned())
        .collect()
}

pub fn reweight_scoping(cases: u32) -> Result<(), String> {
    run(cases, any::<u64>(), |seed| {
        let inst = random_instance(seed).map_err(fail)?;
        let sat = epa_loss(&inst.theta, &inst.batch, &inst.epa_adv, &inst.clip).map_err(fail)?;
        let id =
            epa_loss_with(&inst.theta, &inst.batch, &inst.epa_adv, &inst.clip, Reweight::Identity).map_err(fail)?;
        prop_assert_eq!(sat.init_value.to_bits(), id.init_value.to_bits());
        let groups = ecc_groups_of(&inst);
        let a = ecc_loss(&inst.theta, &groups, &inst.clip).map_err(fail)?;
        let other = ClipConfig {
            reweight_c: inst.clip.reweight_c * 3.0,
            ..inst.clip
        };
        let b = ecc_loss(&inst.theta, &groups, &other).map_err(fail)?;
        prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
        prop_assert_eq!(a.grad, b.grad);
        Ok(())
    })
}

pub fn ecc_on_policy_nullity(cases: u32) -> Result<(), String> {
    run(cases, any::<u64>(), |seed| {
        let inst = random_instance(seed).map_err(fail)?;
        let old = &inst.old;
        for r in &inst.batch.fap_rollouts {
            for t in 0..r.tokens.len() {
                prop_assert_eq!(ratio_ecc(old, old, &r.conditioning_prompt, &r.tokens, t).unwrap(), 1.0);
            }
        }
        let r = ecc_loss(old, &ecc_groups_of(&inst), &inst.clip).map_err(fail)?;
        prop_assert!(r.value.abs() <= 1e-12, "ECC loss {} on policy", r.value);
        prop_assert!(r.clipped_fraction.iter().all(|&f| f == 0.0));
        Ok(())
    })
}

pub fn loss_report_shape(cases: u32) -> Result<(), String> {
    run(cases, any::<u64>(), |seed| {
        let inst = random_instance(seed).map_err(fail)?;
        for which in [LossKind::Epa, LossKind::Ecc] {
            let r = inst.loss(&inst.theta, which).map_err(fail)?;
            prop_assert_eq!(r.grad.len(), inst.theta.num_params());
            prop_assert!(r.value.is_finite() && r.grad.iter().all(|g| g.is_finite()));
            prop_assert!(r.clipped_fraction.iter().all(|f| (0.0..=1.0).contains(f)));
            prop_assert_eq!((r.init_value + r.fap_value).to_bits(), r.value.to_bits());
        }
        Ok(())
    })
}

fn plan_strategy() -> impl Strategy<Value = Vec<EvaluatedPlan>> {
    let results = prop::collection::vec((any::<bool>(), prop::bool::weighted(0.7)), 0..7);
    let one = (
        results,
        prop::sample::select(vec![Difficulty::Easy, Difficulty::Medium, Difficulty::Hard]),
        -1i32..=1,
    );
    prop::collection::vec(one, 1..10).prop_map(|plans| {
        plans
            .into_iter()
            .enumerate()
            .map(|(i, (res, d, s))| {
                let res = res
                    .into_iter()
                    .map(|(hard, ok)| {
                        (
                            if hard {
                                ConstraintClass::Hard
                            } else {
                                ConstraintClass::Commonsense
                            },
                            ok,
                        )
                    })
                    .collect();
                EvaluatedPlan::new(format!("p{i}"), d, res, s as f64)
            })
            .collect()
    })
}

pub fn rates_bounded_and_final_below_macro(cases: u32) -> Result<(), String> {
    run(cases, plan_strategy(), |plans| {
        let fp = final_pass_rate(&plans).unwrap();
        prop_assert!((0.0..=1.0).contains(&fp));
        for class in [ConstraintClass::Hard, ConstraintClass::Commonsense] {
            let m = macro_pass_rate(&plans, class).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert!(fp <= m, "final {fp} above macro {m}");
            if let Ok(micro) = micro_pass_rate(&plans, class) {
                prop_assert!((0.0..=1.0).contains(&micro));
            }
        }
        let avg = avg_score(&plans.iter().map(|p| p.score).collect::<Vec<_>>()).unwrap();
        prop_assert!((-1.0..=1.0).contains(&avg));
        for p in &plans {
            prop_assert_eq!(p.final_pass, p.constraint_results.iter().all(|(_, ok)| *ok));
        }
        Ok(())
    })
}

pub fn macro_below_micro_for_equal_counts(cases: u32) -> Result<(), String> {
    let strategy = (1usize..6)
        .prop_flat_map(|m| prop::collection::vec(prop::collection::vec(prop::bool::weighted(0.7), m), 1..10));
    run(cases, strategy, |plans| {
        let plans: Vec<EvaluatedPlan> = plans
            .into_iter()
            .enumerate()
            .map(|(i, oks)| {
                let res = oks.into_iter().map(|ok| (ConstraintClass::Hard, ok)).collect();
                EvaluatedPlan::new(format!("p{i}"), Difficulty::Hard, res, 0.0)
            })
            .collect();
        let micro = micro_pass_rate(&plans, ConstraintClass::Hard).unwrap();
        let macro_ = macro_pass_rate(&plans, ConstraintClass::Hard).unwrap();
        prop_assert!(macro_ <= micro + 1e-15, "macro {macro_} above micro {micro}");
        Ok(())
    })
}

pub fn tier_rates_aggregate(cases: u32) -> Result<(), String> {
    run(cases, plan_strategy(), |plans| {
        let s = EvalSummary::from_plans(&plans).map_err(fail)?;
        let mut weighted = 0.0;
        let mut score = 0.0;
        let mut count = 0;
        for d in Difficulty::ALL {
            if let Some(t) = s.tier(d) {
                weighted += t.final_pass_rate * t.plans as f64;
                score += t.avg_score * t.plans as f64;
                count += t.plans;
            }
        }
        prop_assert_eq!(count, plans.len());
        prop_assert!((weighted / count as f64 - s.overall.final_pass_rate).abs() <= 1e-12);
        prop_assert!((score / count as f64 - s.overall.avg_score).abs() <= 1e-12);
        Ok(())
    })
}

fn method_strategy() -> impl Strategy<Value = Method> {
    prop::sample::select(Method::ALL.to_vec())
}

pub fn budget_and_update_parity(cases: u32) -> Result<(), String> {
    let strategy = (
        method_strategy(),
        1usize..=3,
        1usize..=3,
        1usize..=2,
        1usize..=2,
        any::<u64>(),
        any::<usize>(),
    );
    run(cases, strategy, |(method, n, k, steps, tps, seed, first)| {
        let f = plan_fixture();
        let cfg = TrainConfig {
            method,
            n,
            k,
            seed,
            steps,
            tasks_per_step: tps,
            max_answer_len: 6,
            ..TrainConfig::default()
        };
        let mut p = PolicyParams::uniform(policy_kind(false, 1), f.env.vocab().clone()).unwrap();
        p.add_token_prior(&f.env.answer_tokens(), 2.0).unwrap();
        let mut trainer = Trainer::new(cfg, &f.env, p).map_err(fail)?;
        for s in 0..steps {
            let tasks: Vec<&Task> = (0..tps)
                .map(|i| &f.tasks[(first + s * tps + i) % f.tasks.len()])
                .collect();
            let m = trainer.step(&tasks).map_err(fail)?;
            prop_assert_eq!(m.rollouts, tps * (n + n * k));
            prop_assert_eq!(m.updates, method.updates_per_step());
            prop_assert!(m.train_score_mean.is_finite() && m.train_score_std.is_finite());
            prop_assert!(m.entropy.is_finite() && m.grad_norm.is_finite() && m.clipped_fraction.is_finite());
            prop_assert_eq!(m.fap_score_mean.is_some(), method.uses_feedback());
            prop_assert_eq!(m.fap_score_max.is_some(), method.uses_feedback());
            prop_assert_eq!(m.epa_loss.is_some(), matches!(method, Method::Fbos | Method::FbosWoEcc));
            prop_assert_eq!(m.ecc_loss.is_some(), matches!(method, Method::Fbos | Method::FbosWoEpa));
            prop_assert_eq!(m.grpo_loss.is_some(), !method.uses_feedback());
            prop_assert_eq!(m.extra_loss.is_some(), method == Method::GrpoExtraUpdate);
        }
        prop_assert_eq!(trainer.counter().get(), (steps * tps * (n + n * k)) as u64);
        prop_assert_eq!(trainer.total_updates(), steps * method.updates_per_step());
        Ok(())
    })
}

pub fn constant_rewards_leave_policy_fixed(cases: u32) -> Result<(), String> {
    run(
        cases,
        (method_strategy(), 1usize..=3, 1usize..=3, any::<u64>()),
        |(method, n, k, seed)| {
            let f = plan_fixture();
            let task = Task {
                constraints: Vec::new(),
                ..f.tasks[seed as usize % f.tasks.len()].clone()
            };
            let cfg = TrainConfig {
                method,
                n,
                k,
                seed,
                max_answer_len: 5,
                ..TrainConfig::default()
            };
            let mut rng = rng::stream(seed, Purpose::Check, &[]);
            let start = PolicyParams::randomized(policy_kind(false, 1), f.env.vocab().clone(), 0.5, &mut rng).unwrap();
            let mut trainer = Trainer::new(cfg, &f.env, start.clone()).map_err(fail)?;
            let m = trainer.step(&[&task]).map_err(fail)?;
            prop_assert_eq!(trainer.params().weights(), start.weights());
            prop_assert_eq!(m.grad_norm, 0.0);
            Ok(())
        },
    )
}
