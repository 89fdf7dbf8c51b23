//! Stable CSV layouts. Each file starts with a `# <schema>` comment line;
//! bump the schema tag whenever a column is added, removed or reordered.

use crate::envs::Difficulty;
use crate::metrics::{EvalSummary, Rates};
use crate::trainer::StepMetrics;
use crate::Result;

pub const METRICS_SCHEMA: &str = "fbos-metrics v1";
pub const EVAL_SCHEMA: &str = "fbos-eval v1";

pub const METRICS_COLUMNS: &[&str] = &[
    "method",
    "repeat",
    "step",
    "tasks",
    "rollouts",
    "cumulative_rollouts",
    "updates",
    "train_score_mean",
    "train_score_std",
    "train_score_easy",
    "train_score_medium",
    "train_score_hard",
    "ecc_score_mean",
    "ecc_score_std",
    "fap_score_mean",
    "fap_score_max",
    "fap_mean_easy",
    "fap_mean_medium",
    "fap_mean_hard",
    "fap_max_easy",
    "fap_max_medium",
    "fap_max_hard",
    "entropy",
    "grad_norm",
    "epa_loss",
    "ecc_loss",
    "grpo_loss",
    "extra_loss",
    "clipped_fraction",
];

pub const EVAL_COLUMNS: &[&str] = &[
    "method",
    "repeat",
    "step",
    "cumulative_rollouts",
    "split",
    "difficulty",
    "plans",
    "final_pass_rate",
    "commonsense_micro",
    "commonsense_macro",
    "hard_micro",
    "hard_macro",
    "avg_score",
];

/// Cells that do not apply to a row read `NA`.
pub(crate) const NA: &str = "NA";

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_else(|| NA.to_string())
}

pub fn metrics_rows(rows: &[StepMetrics], repeat: usize) -> Vec<Vec<String>> {
    let mut cumulative = 0usize;
    rows.iter()
        .map(|m| {
            cumulative += m.rollouts;
            let t = &m.train_score_by_difficulty;
            let fm = &m.fap_mean_by_difficulty;
            let fx = &m.fap_max_by_difficulty;
            vec![
                m.method.to_string(),
                repeat.to_string(),
                m.step.to_string(),
                m.tasks.to_string(),
                m.rollouts.to_string(),
                cumulative.to_string(),
                m.updates.to_string(),
                num(m.train_score_mean),
                num(m.train_score_std),
                opt(t.easy),
                opt(t.medium),
                opt(t.hard),
                opt(m.ecc_score_mean),
                opt(m.ecc_score_std),
                opt(m.fap_score_mean),
                opt(m.fap_score_max),
                opt(fm.easy),
                opt(fm.medium),
                opt(fm.hard),
                opt(fx.easy),
                opt(fx.medium),
                opt(fx.hard),
                num(m.entropy),
                num(m.grad_norm),
                opt(m.epa_loss),
                opt(m.ecc_loss),
                opt(m.grpo_loss),
                opt(m.extra_loss),
                num(m.clipped_fraction),
            ]
        })
        .collect()
}

fn rate_cells(r: &Rates) -> Vec<String> {
    vec![
        r.plans.to_string(),
        num(r.final_pass_rate),
        opt(r.commonsense_micro),
        num(r.commonsense_macro),
        opt(r.hard_micro),
        num(r.hard_macro),
        num(r.avg_score),
    ]
}

/// One row per (evaluation, difficulty split), overall first.
pub fn eval_rows(method: &str, repeat: usize, evals: &[(usize, usize, EvalSummary)]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for (step, cumulative, s) in evals {
        let mut push = |difficulty: &str, r: &Rates| {
            let mut row = vec![
                method.to_string(),
                repeat.to_string(),
                step.to_string(),
                cumulative.to_string(),
                "validation".to_string(),
                difficulty.to_string(),
            ];
            row.extend(rate_cells(r));
            out.push(row);
        };
        push("all", &s.overall);
        for d in Difficulty::ALL {
            if let Some(r) = s.tier(d) {
                push(d.as_str(), r);
            }
        }
    }
    out
}

pub(crate) fn to_csv(schema: &str, columns: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut buf = format!("# {schema}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(columns)?;
        for r in rows {
            debug_assert_eq!(r.len(), columns.len());
            w.write_record(r)?;
        }
        w.flush().map_err(|e| crate::Error::Csv(e.into()))?;
    }
    Ok(buf)
}

/// Reads a schema-tagged CSV, checking the tag and header.
pub(crate) fn from_csv(text: &str, schema: &str, columns: &[&str], origin: &str) -> Result<Vec<csv::StringRecord>> {
    let first = text.lines().next().unwrap_or("");
    if first.trim() != format!("# {schema}") {
        return Err(crate::Error::Schema {
            path: origin.into(),
            reason: format!("expected schema line '# {schema}', found {first:?}"),
        });
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.iter().ne(columns.iter().copied()) {
        return Err(crate::Error::Schema {
            path: origin.into(),
            reason: format!("header {:?} does not match {schema}", header.iter().collect::<Vec<_>>()),
        });
    }
    r.records().map(|x| x.map_err(Into::into)).collect()
}
