use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{EnvConfig, SuiteSpec};
use crate::objectives::ClipConfig;
use crate::optimizer::OptimizerSpec;
use crate::policy::{FeatureSpec, PolicyKind};
use crate::trainer::{Method, TrainConfig};
use crate::{Error, Result};

/// Everything needed to reproduce a set of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub suite: SuiteSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    /// Per-method replacements, keyed by method name.
    #[serde(default)]
    pub overrides: BTreeMap<String, TrainOverrides>,
}

fn default_name() -> String {
    "experiment".into()
}

fn one() -> usize {
    1
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSection {
    pub train: SuiteSpec,
    pub validation: SuiteSpec,
}

impl Default for SuiteSection {
    fn default() -> Self {
        SuiteSection {
            train: SuiteSpec {
                easy: 8,
                medium: 8,
                hard: 24,
                seed: 1,
            },
            validation: SuiteSpec {
                easy: 8,
                medium: 8,
                hard: 24,
                seed: 2,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub model: PolicyKind,
    /// Initial weights are drawn from `[-init_scale, init_scale]`; 0 gives the
    /// uniform policy.
    pub init_scale: f64,
    /// Logit bonus for the environment's answer tokens at initialisation, a
    /// stand-in for a starting policy that already follows the output format.
    pub answer_prior: f64,
    pub temperature: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            model: PolicyKind::LinearBag(FeatureSpec::default()),
            init_scale: 0.0,
            answer_prior: 0.0,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub n: usize,
    pub k: usize,
    pub clip_epsilon: f64,
    pub reweight_c: f64,
    pub eps_adv: f64,
    pub steps: usize,
    pub tasks_per_step: usize,
    pub max_answer_len: usize,
    pub max_prompt_len: usize,
    pub extra_update_recompute: bool,
    pub dump_rollouts: bool,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub optimizer: OptimizerSpec,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            n: t.n,
            k: t.k,
            clip_epsilon: t.clip.epsilon,
            reweight_c: t.clip.reweight_c,
            eps_adv: t.eps_adv,
            steps: t.steps,
            tasks_per_step: t.tasks_per_step,
            max_answer_len: t.max_answer_len,
            max_prompt_len: t.max_prompt_len,
            extra_update_recompute: t.extra_update_recompute,
            dump_rollouts: t.dump_rollouts,
            checkpoint_every: 0,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    #[serde(default)]
    pub optimizer: Option<OptimizerSpec>,
    #[serde(default)]
    pub clip_epsilon: Option<f64>,
    #[serde(default)]
    pub reweight_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Steps between validation runs; step 0 and the final step are always
    /// evaluated.
    pub every: usize,
    pub samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { every: 10, samples: 1 }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: default_name(),
            seed: 0,
            repeats: 1,
            methods: all_methods(),
            output_dir: None,
            env: EnvConfig::default(),
            suite: SuiteSection::default(),
            policy: PolicySection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            overrides: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The config with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.eval.samples == 0 {
            return Err(Error::Config("eval.samples must be >= 1".into()));
        }
        if !(self.policy.temperature > 0.0) || !(self.policy.init_scale >= 0.0) || !self.policy.answer_prior.is_finite()
        {
            return Err(Error::Config(
                "policy temperature must be > 0 and init_scale >= 0".into(),
            ));
        }
        for key in self.overrides.keys() {
            if Method::parse(key).is_none() {
                return Err(Error::Config(format!("overrides: unknown method {key:?}")));
            }
        }
        for m in &self.methods {
            self.train_config(*m, 0).validate()?;
        }
        Ok(())
    }

    /// Seed of repeat `r`; shared by every method so that methods are
    /// compared on common random numbers.
    pub fn repeat_seed(&self, repeat: usize) -> u64 {
        crate::rng::mix(&[self.seed, repeat as u64])
    }

    pub fn train_config(&self, method: Method, repeat: usize) -> TrainConfig {
        let t = &self.train;
        let mut cfg = TrainConfig {
            method,
            n: t.n,
            k: t.k,
            clip: ClipConfig {
                epsilon: t.clip_epsilon,
                reweight_c: t.reweight_c,
            },
            eps_adv: t.eps_adv,
            optimizer: t.optimizer,
            steps: t.steps,
            tasks_per_step: t.tasks_per_step,
            seed: self.repeat_seed(repeat),
            max_answer_len: t.max_answer_len,
            max_prompt_len: t.max_prompt_len,
            extra_update_recompute: t.extra_update_recompute,
            dump_rollouts: t.dump_rollouts,
        };
        if let Some(o) = self.overrides.get(method.as_str()) {
            if let Some(opt) = o.optimizer {
                cfg.optimizer = opt;
            }
            if let Some(e) = o.clip_epsilon {
                cfg.clip.epsilon = e;
            }
            if let Some(c) = o.reweight_c {
                cfg.clip.reweight_c = c;
            }
        }
        cfg
    }
}
