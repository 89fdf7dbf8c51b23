use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::csvio::{eval_rows, metrics_rows, to_csv, EVAL_COLUMNS, EVAL_SCHEMA, METRICS_COLUMNS, METRICS_SCHEMA};
use crate::envs::{Difficulty, Environment, Task};
use crate::metrics::{self, EvalSummary};
use crate::policy::{PolicyParams, PolicySnapshot};
use crate::rng::{self, Purpose};
use crate::trainer::{Method, StepMetrics, Trainer};
use crate::{Error, Result};

/// Task indices for every step. The order depends only on the master seed
/// and the suite size, so every method and repeat sees the same sequence.
pub fn training_schedule(cfg: &ExperimentConfig, num_tasks: usize) -> Vec<Vec<usize>> {
    let per_step = cfg.train.tasks_per_step;
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let needed = cfg.train.steps * per_step;
    while order.len() < needed && num_tasks > 0 {
        let mut perm: Vec<usize> = (0..num_tasks).collect();
        perm.shuffle(&mut rng::stream(cfg.seed, Purpose::TaskOrder, &[epoch]));
        order.extend(perm);
        epoch += 1;
    }
    order
        .chunks(per_step.max(1))
        .take(cfg.train.steps)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: Method,
    pub repeat: usize,
    pub metrics: Vec<StepMetrics>,
    /// (steps completed, cumulative rollouts, summary).
    pub evals: Vec<(usize, usize, EvalSummary)>,
    pub total_rollouts: u64,
    pub total_updates: usize,
    pub final_params: PolicyParams,
}

impl RunResult {
    pub fn final_eval(&self) -> &EvalSummary {
        &self.evals.last().expect("every run evaluates its final step").2
    }
}

fn initial_policy(cfg: &ExperimentConfig, env: &Environment, repeat: usize) -> Result<PolicyParams> {
    let vocab = env.vocab().clone();
    let mut p = PolicyParams::with_temperature(cfg.policy.model.clone(), vocab.clone(), cfg.policy.temperature)?;
    if cfg.policy.init_scale > 0.0 {
        let mut rng = rng::stream(cfg.repeat_seed(repeat), Purpose::Init, &[]);
        let r = PolicyParams::randomized(cfg.policy.model.clone(), vocab, cfg.policy.init_scale, &mut rng)?;
        p.set_weights(r.weights())?;
    }
    if cfg.policy.answer_prior != 0.0 {
        p.add_token_prior(&env.answer_tokens(), cfg.policy.answer_prior)?;
    }
    Ok(p)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Trains one (method, repeat) pair. When `out` is given, artifacts go to
/// `out/<method>/repeat_<r>/`.
pub fn run_single(
    cfg: &ExperimentConfig,
    method: Method,
    repeat: usize,
    env: &Environment,
    train_tasks: &[Task],
    validation: &[Task],
    out: Option<&Path>,
) -> Result<RunResult> {
    let tcfg = cfg.train_config(method, repeat);
    let steps = tcfg.steps;
    let max_answer_len = tcfg.max_answer_len;
    let eval_seed = tcfg.seed;
    let dump = tcfg.dump_rollouts;
    let schedule = training_schedule(cfg, train_tasks.len());
    if schedule.len() < steps {
        return Err(Error::Config("training suite is empty".into()));
    }
    let run_dir = out.map(|o| o.join(method.as_str()).join(format!("repeat_{repeat}")));
    if let Some(d) = &run_dir {
        create_dir(&d.join("checkpoints"))?;
    }
    let mut trainer = Trainer::new(tcfg, env, initial_policy(cfg, env, repeat)?)?;
    let evaluate = |params: &PolicyParams, step: usize| {
        let snap = PolicySnapshot::freeze(params, step);
        metrics::evaluate(&snap, env, validation, cfg.eval.samples, max_answer_len, eval_seed)
    };
    let mut rows = Vec::with_capacity(steps);
    let mut evals = vec![(0, 0, evaluate(trainer.params(), 0)?)];
    let mut dumped = Vec::new();
    let mut cumulative = 0usize;
    for (s, picks) in schedule.iter().enumerate().take(steps) {
        let tasks: Vec<&Task> = picks.iter().map(|&i| &train_tasks[i]).collect();
        let m = trainer.step(&tasks)?;
        cumulative += m.rollouts;
        rows.push(m);
        if dump {
            dumped.extend(trainer.take_rollout_records());
        }
        let done = s + 1;
        let due = cfg.eval.every > 0 && done % cfg.eval.every == 0;
        if due || done == steps {
            evals.push((done, cumulative, evaluate(trainer.params(), done)?));
        }
        if let Some(d) = &run_dir {
            let every = cfg.train.checkpoint_every;
            if (every > 0 && done % every == 0) || done == steps {
                trainer
                    .params()
                    .save(&d.join("checkpoints").join(format!("step_{done:05}.bin")))?;
            }
        }
    }
    if let Some(d) = &run_dir {
        write_atomic(
            &d.join("metrics.csv"),
            &to_csv(METRICS_SCHEMA, METRICS_COLUMNS, &metrics_rows(&rows, repeat))?,
        )?;
        write_atomic(
            &d.join("eval.csv"),
            &to_csv(EVAL_SCHEMA, EVAL_COLUMNS, &eval_rows(method.as_str(), repeat, &evals))?,
        )?;
        if dump {
            let mut text = String::new();
            for r in &dumped {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            write_atomic(&d.join("rollouts.jsonl"), text.as_bytes())?;
        }
    }
    Ok(RunResult {
        method,
        repeat,
        metrics: rows,
        evals,
        total_rollouts: trainer.counter().get(),
        total_updates: trainer.total_updates(),
        final_params: trainer.params().clone(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub repeats: usize,
    pub final_pass_mean: f64,
    pub final_pass_std: f64,
    pub hard_final_pass_mean: Option<f64>,
    pub hard_final_pass_std: Option<f64>,
    pub avg_score_mean: f64,
    pub avg_score_std: f64,
    pub rollouts_per_run: u64,
    pub updates_per_run: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub rows: Vec<SummaryRow>,
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

impl Summary {
    pub fn from_runs(name: &str, methods: &[Method], runs: &[RunResult]) -> Summary {
        let rows = methods
            .iter()
            .filter_map(|&method| {
                let mine: Vec<&RunResult> = runs.iter().filter(|r| r.method == method).collect();
                let first = mine.first()?;
                let finals: Vec<f64> = mine.iter().map(|r| r.final_eval().overall.final_pass_rate).collect();
                let hard: Vec<f64> = mine
                    .iter()
                    .filter_map(|r| r.final_eval().tier(Difficulty::Hard).map(|t| t.final_pass_rate))
                    .collect();
                let scores: Vec<f64> = mine.iter().map(|r| r.final_eval().overall.avg_score).collect();
                let (fm, fs) = mean_sd(&finals);
                let (am, asd) = mean_sd(&scores);
                let (hm, hs) = if hard.is_empty() {
                    (None, None)
                } else {
                    let (a, b) = mean_sd(&hard);
                    (Some(a), Some(b))
                };
                Some(SummaryRow {
                    method,
                    repeats: mine.len(),
                    final_pass_mean: fm,
                    final_pass_std: fs,
                    hard_final_pass_mean: hm,
                    hard_final_pass_std: hs,
                    avg_score_mean: am,
                    avg_score_std: asd,
                    rollouts_per_run: first.total_rollouts,
                    updates_per_run: first.total_updates,
                })
            })
            .collect();
        Summary {
            name: name.to_string(),
            rows,
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("# {}\n\n", self.name);
        s.push_str(
            "| method | repeats | final pass rate | hard-tier final pass | avg score | rollouts/run | updates/run |\n",
        );
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let hard = match (r.hard_final_pass_mean, r.hard_final_pass_std) {
                (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
                _ => "NA".into(),
            };
            s.push_str(&format!(
                "| {} | {} | {:.4} ± {:.4} | {} | {:.4} ± {:.4} | {} | {} |\n",
                r.method,
                r.repeats,
                r.final_pass_mean,
                r.final_pass_std,
                hard,
                r.avg_score_mean,
                r.avg_score_std,
                r.rollouts_per_run,
                r.updates_per_run
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub root: Option<PathBuf>,
    pub runs: Vec<RunResult>,
    pub summary: Summary,
}

/// Runs every configured method × repeat (in parallel) and writes artifacts
/// under `out` when given.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let env = Environment::new(&cfg.env)?;
    let train_tasks = env.make_toy_suite(&cfg.suite.train)?;
    let validation = env.make_toy_suite(&cfg.suite.validation)?;
    if train_tasks.is_empty() || validation.is_empty() {
        return Err(Error::Config("training and validation suites must be non-empty".into()));
    }
    if let Some(o) = out {
        create_dir(o)?;
        write_atomic(&o.join("config.toml"), cfg.to_toml().as_bytes())?;
    }
    let jobs: Vec<(Method, usize)> = cfg
        .methods
        .iter()
        .flat_map(|&m| (0..cfg.repeats).map(move |r| (m, r)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(m, r)| run_single(cfg, m, r, &env, &train_tasks, &validation, out))
        .collect::<Result<Vec<_>>>()?;
    let summary = Summary::from_runs(&cfg.name, &cfg.methods, &runs);
    if let Some(o) = out {
        write_atomic(
            &o.join("summary.json"),
            serde_json::to_string_pretty(&summary)?.as_bytes(),
        )?;
        write_atomic(&o.join("summary.md"), summary.to_markdown().as_bytes())?;
    }
    Ok(RunArtifacts {
        root: out.map(Path::to_path_buf),
        runs,
        summary,
    })
}
