//! Line-delimited task suites: one JSON object per task with the
//! environment name, id, difficulty, prompt token names and constraints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConstraintSpec, Difficulty, Environment, Task};
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    env: String,
    id: String,
    difficulty: Difficulty,
    prompt: Vec<String>,
    constraints: Vec<ConstraintSpec>,
}

pub fn suite_to_string(env: &Environment, tasks: &[Task]) -> String {
    let mut out = String::new();
    for t in tasks {
        let rec = TaskRecord {
            env: env.name().to_string(),
            id: t.id.clone(),
            difficulty: t.difficulty,
            prompt: env.vocab().decode(&t.prompt),
            constraints: t.constraints.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("task record serializes"));
        out.push('\n');
    }
    out
}

pub fn suite_from_str(env: &Environment, text: &str) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord =
            serde_json::from_str(line).map_err(|e| Error::Config(format!("suite line {}: {e}", lineno + 1)))?;
        if rec.env != env.name() {
            return Err(Error::Config(format!(
                "suite line {}: task for environment {:?}, expected {:?}",
                lineno + 1,
                rec.env,
                env.name()
            )));
        }
        let names: Vec<&str> = rec.prompt.iter().map(String::as_str).collect();
        let prompt = env
            .vocab()
            .encode(&names)
            .map_err(|e| Error::Config(format!("suite line {}: {e}", lineno + 1)))?;
        if prompt.is_empty() {
            return Err(Error::Config(format!("suite line {}: empty prompt", lineno + 1)));
        }
        tasks.push(Task {
            id: rec.id,
            difficulty: rec.difficulty,
            prompt,
            constraints: rec.constraints,
        });
    }
    Ok(tasks)
}

pub fn write_suite(path: &Path, env: &Environment, tasks: &[Task]) -> Result<()> {
    std::fs::write(path, suite_to_string(env, tasks)).map_err(|e| Error::io(path, e))
}

pub fn read_suite(path: &Path, env: &Environment) -> Result<Vec<Task>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    suite_from_str(env, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvConfig, GrammarProofConfig, SuiteSpec};

    #[test]
    fn round_trips_both_environments() {
        for cfg in [
            EnvConfig::default(),
            EnvConfig::GrammarProof(GrammarProofConfig::default()),
        ] {
            let env = Environment::new(&cfg).unwrap();
            let tasks = env
                .make_toy_suite(&SuiteSpec {
                    easy: 2,
                    medium: 1,
                    hard: 2,
                    seed: 9,
                })
                .unwrap();
            let text = suite_to_string(&env, &tasks);
            assert_eq!(text.lines().count(), 5);
            assert_eq!(suite_from_str(&env, &text).unwrap(), tasks);
        }
    }

    #[test]
    fn errors_name_the_line() {
        let env = Environment::new(&EnvConfig::default()).unwrap();
        let other = Environment::new(&EnvConfig::GrammarProof(GrammarProofConfig::default())).unwrap();
        let tasks = other
            .make_toy_suite(&SuiteSpec {
                easy: 1,
                medium: 0,
                hard: 0,
                seed: 1,
            })
            .unwrap();
        let text = format!("\n{}", suite_to_string(&other, &tasks));
        let err = suite_from_str(&env, &text).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = suite_from_str(&env, "{not json").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }
}
