use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fbos_core::envs::{suite_to_string, write_suite, Environment};
use fbos_core::harness::{self, ExperimentConfig};
use fbos_core::trainer::Method;
use fbos_core::verify::{self, Mutation};

#[derive(Parser)]
#[command(
    name = "fbos",
    version,
    about = "Feedback-driven bi-objective RL experiments on toy verifier tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method and write metrics, evals and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset, e.g. `fbos,grpo`.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Compare analytic loss gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Corrupts the FAP-token gradient; the check must then fail.
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Aggregate run directories into tidy curves, a table and SVG charts.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured training or validation suite as JSON lines.
    MakeSuite {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the randomized invariant checks.
    VerifyInvariants {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1000)]
        cases: usize,
    },
}

fn load(config: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(config)?)
}

fn train(
    config: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    methods: Option<Vec<String>>,
    repeats: Option<usize>,
) -> Result<ExitCode> {
    let mut cfg = load(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = repeats {
        cfg.repeats = r;
    }
    if let Some(names) = methods {
        cfg.methods = names
            .iter()
            .map(|n| Method::parse(n.trim()).with_context(|| format!("unknown method {n:?}")))
            .collect::<Result<_>>()?;
    }
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .context("no output directory: pass --out or set output_dir")?;
    cfg.validate()?;
    let artifacts = harness::run_experiment(&cfg, Some(&out))?;
    print!("{}", artifacts.summary.to_markdown());
    println!("\nwrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(config: Option<PathBuf>, seed: Option<u64>, trials: usize, flip: bool) -> Result<ExitCode> {
    let base = match &config {
        Some(p) => load(p)?.seed,
        None => 0,
    };
    let seed = seed.unwrap_or(base);
    let mutation = if flip {
        Mutation::FlipFapRatioSign
    } else {
        Mutation::None
    };
    let report = verify::gradcheck(seed, trials, mutation)?;
    println!(
        "checked {} instances ({} redrawn near a clip edge), max relative error {:.3e} (tolerance {:.0e})",
        report.cases.len(),
        report.skipped_near_kink,
        report.max_relative_error,
        report.tolerance
    );
    if report.passed() {
        return Ok(ExitCode::SUCCESS);
    }
    for c in report
        .cases
        .iter()
        .filter(|c| c.relative_error >= report.tolerance)
        .take(10)
    {
        eprintln!(
            "FAIL {:?} instance seed {} ({} params, {} rollouts): relative error {:.3e}",
            c.loss, c.seed, c.params, c.rollouts, c.relative_error
        );
    }
    Ok(ExitCode::FAILURE)
}

fn make_suite(config: PathBuf, split: &str, out: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = load(&config)?;
    let spec = match split {
        "train" => cfg.suite.train,
        "validation" => cfg.suite.validation,
        other => bail!("unknown split {other:?}, expected train or validation"),
    };
    let env = Environment::new(&cfg.env)?;
    let tasks = env.make_toy_suite(&spec)?;
    match out {
        Some(p) => {
            write_suite(&p, &env, &tasks)?;
            println!("wrote {} tasks to {}", tasks.len(), p.display());
        }
        None => print!("{}", suite_to_string(&env, &tasks)),
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_invariants(seed: Option<u64>, cases: usize) -> Result<ExitCode> {
    let outcomes = verify::run_invariants(seed.unwrap_or(0), cases)?;
    let mut ok = true;
    for o in &outcomes {
        println!(
            "{} {} ({} cases)",
            if o.passed() { "PASS" } else { "FAIL" },
            o.name,
            o.cases
        );
        for f in &o.failures {
            println!("    {f}");
        }
        ok &= o.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            out,
            methods,
            repeats,
        } => train(config, seed, out, methods, repeats),
        Command::Gradcheck {
            config,
            seed,
            trials,
            inject_sign_flip,
        } => gradcheck(config, seed, trials, inject_sign_flip),
        Command::Compare { runs, out } => harness::compare(&runs, &out).map_err(Into::into).map(|c| {
            for r in &c.rows {
                println!(
                    "{:<18} final pass {:.4} ± {:.4} over {} repeats (step {})",
                    r.method, r.final_pass_mean, r.final_pass_std, r.repeats, r.final_step
                );
            }
            println!("wrote {} and {} charts", c.curves_csv.display(), c.charts.len());
            ExitCode::SUCCESS
        }),
        Command::MakeSuite { config, split, out } => make_suite(config, &split, out),
        Command::VerifyInvariants { seed, cases } => verify_invariants(seed, cases),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
