use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::csvio::{from_csv, to_csv, EVAL_COLUMNS, EVAL_SCHEMA, METRICS_COLUMNS, METRICS_SCHEMA, NA};
use super::svg::{line_chart, Series};
use crate::{Error, Result};

pub const CURVES_SCHEMA: &str = "fbos-curves v1";
pub const CURVES_COLUMNS: &[&str] = &[
    "method",
    "step",
    "cumulative_rollouts",
    "metric",
    "difficulty",
    "mean",
    "std",
    "repeats",
];

pub const TABLE_SCHEMA: &str = "fbos-comparison v1";
pub const TABLE_COLUMNS: &[&str] = &[
    "method",
    "repeats",
    "final_step",
    "final_pass_mean",
    "final_pass_std",
    "easy_final_pass_mean",
    "medium_final_pass_mean",
    "hard_final_pass_mean",
    "avg_score_mean",
];

/// Per-step training columns carried into the curves, with the difficulty
/// split each represents.
const STEP_CURVES: &[(&str, &str, &str)] = &[
    ("train_score_mean", "train_score_mean", "all"),
    ("train_score_std", "train_score_std", "all"),
    ("train_score_easy", "train_score_mean", "easy"),
    ("train_score_medium", "train_score_mean", "medium"),
    ("train_score_hard", "train_score_mean", "hard"),
    ("ecc_score_mean", "ecc_score_mean", "all"),
    ("ecc_score_std", "ecc_score_std", "all"),
    ("fap_score_mean", "fap_score_mean", "all"),
    ("fap_score_max", "fap_score_max", "all"),
    ("fap_mean_easy", "fap_score_mean", "easy"),
    ("fap_mean_medium", "fap_score_mean", "medium"),
    ("fap_mean_hard", "fap_score_mean", "hard"),
    ("fap_max_easy", "fap_score_max", "easy"),
    ("fap_max_medium", "fap_score_max", "medium"),
    ("fap_max_hard", "fap_score_max", "hard"),
    ("entropy", "entropy", "all"),
    ("grad_norm", "grad_norm", "all"),
];

const EVAL_CURVES: &[&str] = &[
    "final_pass_rate",
    "commonsense_micro",
    "commonsense_macro",
    "hard_micro",
    "hard_macro",
    "avg_score",
];

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    pub repeats: usize,
    pub final_step: usize,
    pub final_pass_mean: f64,
    pub final_pass_std: f64,
    pub easy_final_pass_mean: Option<f64>,
    pub medium_final_pass_mean: Option<f64>,
    pub hard_final_pass_mean: Option<f64>,
    pub avg_score_mean: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub curves_csv: PathBuf,
    pub table_csv: PathBuf,
    pub charts: Vec<PathBuf>,
}

type CurveKey = (String, String, String);

#[derive(Default)]
struct Curves {
    /// (method, metric, difficulty) → step → (cumulative rollouts, values over repeats).
    points: BTreeMap<CurveKey, BTreeMap<usize, (usize, Vec<f64>)>>,
}

impl Curves {
    fn add(
        &mut self,
        method: &str,
        metric: &str,
        difficulty: &str,
        step: usize,
        cumulative: usize,
        cell: &str,
    ) -> Result<()> {
        if cell == NA {
            return Ok(());
        }
        let v: f64 = cell
            .parse()
            .map_err(|_| Error::Domain(format!("non-numeric {metric} cell {cell:?}")))?;
        let entry = self
            .points
            .entry((method.into(), metric.into(), difficulty.into()))
            .or_default()
            .entry(step)
            .or_insert((cumulative, Vec::new()));
        entry.1.push(v);
        Ok(())
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() < 2 {
        0.0
    } else {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    };
    (m, v.sqrt())
}

/// Finds `<method>/repeat_<r>` directories at or below each input path.
fn find_run_dirs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack: Vec<(PathBuf, usize)> = inputs.iter().map(|p| (p.clone(), 0)).collect();
    while let Some((dir, depth)) = stack.pop() {
        if dir.join("eval.csv").is_file() {
            found.push(dir);
            continue;
        }
        if depth >= 3 {
            continue;
        }
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for e in entries {
            let e = e.map_err(|e| Error::io(&dir, e))?;
            if e.path().is_dir() {
                stack.push((e.path(), depth + 1));
            }
        }
    }
    found.sort();
    found.dedup();
    Ok(found)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Aggregates eval and metric CSVs found under `inputs` into tidy curves, a
/// final-value table and SVG charts in `out`.
pub fn compare(inputs: &[PathBuf], out: &Path) -> Result<Comparison> {
    let runs = find_run_dirs(inputs)?;
    if runs.len() < 2 {
        return Err(Error::Config(format!(
            "compare needs at least two runs, found {} under {:?}",
            runs.len(),
            inputs
        )));
    }
    let mut curves = Curves::default();
    let col = |name: &str, cols: &[&str]| cols.iter().position(|c| *c == name).expect("known column");
    for dir in &runs {
        let eval_path = dir.join("eval.csv");
        let records = from_csv(
            &read(&eval_path)?,
            EVAL_SCHEMA,
            EVAL_COLUMNS,
            &eval_path.display().to_string(),
        )?;
        for r in &records {
            let method = &r[col("method", EVAL_COLUMNS)];
            let step: usize = r[col("step", EVAL_COLUMNS)].parse().unwrap_or(0);
            let cum: usize = r[col("cumulative_rollouts", EVAL_COLUMNS)].parse().unwrap_or(0);
            let diff = &r[col("difficulty", EVAL_COLUMNS)];
            for metric in EVAL_CURVES {
                curves.add(method, metric, diff, step, cum, &r[col(metric, EVAL_COLUMNS)])?;
            }
        }
        let metrics_path = dir.join("metrics.csv");
        if metrics_path.is_file() {
            let records = from_csv(
                &read(&metrics_path)?,
                METRICS_SCHEMA,
                METRICS_COLUMNS,
                &metrics_path.display().to_string(),
            )?;
            for r in &records {
                let method = &r[col("method", METRICS_COLUMNS)];
                // Row `s` is the step that starts after `s` completed steps;
                // report it at the completed-step count it produces.
                let step: usize = r[col("step", METRICS_COLUMNS)].parse::<usize>().unwrap_or(0) + 1;
                let cum: usize = r[col("cumulative_rollouts", METRICS_COLUMNS)].parse().unwrap_or(0);
                for (column, metric, diff) in STEP_CURVES {
                    curves.add(method, metric, diff, step, cum, &r[col(column, METRICS_COLUMNS)])?;
                }
            }
        }
    }

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::new();
    for ((method, metric, diff), steps) in &curves.points {
        for (step, (cum, vals)) in steps {
            let (m, sd) = mean_sd(vals);
            rows.push(vec![
                method.clone(),
                step.to_string(),
                cum.to_string(),
                metric.clone(),
                diff.clone(),
                m.to_string(),
                sd.to_string(),
                vals.len().to_string(),
            ]);
        }
    }
    let curves_csv = out.join("curves.csv");
    std::fs::write(&curves_csv, to_csv(CURVES_SCHEMA, CURVES_COLUMNS, &rows)?)
        .map_err(|e| Error::io(&curves_csv, e))?;

    let methods: Vec<String> = {
        let mut m: Vec<String> = curves.points.keys().map(|k| k.0.clone()).collect();
        m.dedup();
        m
    };
    let last = |method: &str, metric: &str, diff: &str| -> Option<(usize, Vec<f64>)> {
        let c = curves.points.get(&(method.into(), metric.into(), diff.into()))?;
        c.iter().next_back().map(|(s, (_, v))| (*s, v.clone()))
    };
    let mut table = Vec::new();
    for method in &methods {
        let Some((final_step, finals)) = last(method, "final_pass_rate", "all") else {
            continue;
        };
        let (fm, fs) = mean_sd(&finals);
        let tier = |d: &str| last(method, "final_pass_rate", d).map(|(_, v)| mean_sd(&v).0);
        table.push(ComparisonRow {
            method: method.clone(),
            repeats: finals.len(),
            final_step,
            final_pass_mean: fm,
            final_pass_std: fs,
            easy_final_pass_mean: tier("easy"),
            medium_final_pass_mean: tier("medium"),
            hard_final_pass_mean: tier("hard"),
            avg_score_mean: last(method, "avg_score", "all")
                .map(|(_, v)| mean_sd(&v).0)
                .unwrap_or(f64::NAN),
        });
    }
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_else(|| NA.into());
    let table_rows: Vec<Vec<String>> = table
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.repeats.to_string(),
                r.final_step.to_string(),
                r.final_pass_mean.to_string(),
                r.final_pass_std.to_string(),
                opt(r.easy_final_pass_mean),
                opt(r.medium_final_pass_mean),
                opt(r.hard_final_pass_mean),
                r.avg_score_mean.to_string(),
            ]
        })
        .collect();
    let table_csv = out.join("comparison.csv");
    std::fs::write(&table_csv, to_csv(TABLE_SCHEMA, TABLE_COLUMNS, &table_rows)?)
        .map_err(|e| Error::io(&table_csv, e))?;

    let mut charts = Vec::new();
    let plots: Vec<(&str, &str, bool)> = vec![
        ("final_pass_rate", "all", false),
        ("final_pass_rate", "all", true),
        ("final_pass_rate", "easy", false),
        ("final_pass_rate", "medium", false),
        ("final_pass_rate", "hard", false),
        ("commonsense_micro", "all", false),
        ("hard_micro", "all", false),
        ("entropy", "all", false),
        ("grad_norm", "all", false),
        ("train_score_mean", "all", false),
        ("train_score_std", "all", false),
        ("ecc_score_mean", "all", false),
        ("ecc_score_std", "all", false),
        ("fap_score_mean", "all", false),
        ("fap_score_max", "all", false),
    ];
    for (metric, diff, by_rollouts) in plots {
        let series: Vec<Series> = methods
            .iter()
            .filter_map(|m| {
                let c = curves.points.get(&(m.clone(), metric.into(), diff.into()))?;
                let points = c
                    .iter()
                    .map(|(s, (cum, v))| (if by_rollouts { *cum as f64 } else { *s as f64 }, mean_sd(v).0))
                    .collect();
                Some(Series {
                    label: m.clone(),
                    points,
                })
            })
            .collect();
        if series.is_empty() {
            continue;
        }
        let x_label = if by_rollouts { "cumulative rollouts" } else { "step" };
        let file = format!("{metric}_{diff}{}.svg", if by_rollouts { "_by_rollouts" } else { "" });
        let path = out.join(file);
        let svg = line_chart(&format!("{metric} ({diff})"), x_label, &series);
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        charts.push(path);
    }

    Ok(Comparison {
        rows: table,
        curves_csv,
        table_csv,
        charts,
    })
}
