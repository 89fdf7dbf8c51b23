use serde::{Deserialize, Serialize};

use crate::policy::PolicyParams;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerSpec {
            learning_rate,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0) {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and epsilon be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    spec: OptimizerSpec,
    first: Vec<f64>,
    second: Vec<f64>,
    updates: u64,
}

impl OptimizerState {
    pub fn new(spec: OptimizerSpec, num_params: usize) -> Self {
        let moments = match spec.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => num_params,
        };
        OptimizerState {
            spec,
            first: vec![0.0; moments],
            second: vec![0.0; moments],
            updates: 0,
        }
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }
}

/// Applies one descent step and returns the L2 norm of `grad`.
pub fn apply_update(params: &mut PolicyParams, grad: &[f64], state: &mut OptimizerState, step: usize) -> Result<f64> {
    if grad.len() != params.num_params() {
        return Err(Error::Domain(format!(
            "gradient has {} entries, policy has {}",
            grad.len(),
            params.num_params()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient".into(),
            step,
        });
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let lr = state.spec.learning_rate;
    let w = params.weights_mut();
    match state.spec.kind {
        OptimizerKind::Sgd => {
            for (wi, gi) in w.iter_mut().zip(grad) {
                *wi -= lr * gi;
            }
        }
        OptimizerKind::Adam => {
            let OptimizerSpec {
                beta1, beta2, epsilon, ..
            } = state.spec;
            let t = (state.updates + 1) as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for i in 0..w.len() {
                let g = grad[i];
                state.first[i] = beta1 * state.first[i] + (1.0 - beta1) * g;
                state.second[i] = beta2 * state.second[i] + (1.0 - beta2) * g * g;
                let m = state.first[i] / c1;
                let v = state.second[i] / c2;
                w[i] -= lr * m / (v.sqrt() + epsilon);
            }
        }
    }
    state.updates += 1;
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "parameters".into(),
            step,
        });
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyKind;
    use crate::vocab::Vocab;

    fn policy() -> PolicyParams {
        PolicyParams::uniform(PolicyKind::tabular(1), Vocab::synthetic(2)).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = policy();
        let before = p.clone();
        let mut st = OptimizerState::new(OptimizerSpec::default(), p.num_params());
        let zeros = vec![0.0; p.num_params()];
        let norm = apply_update(&mut p, &zeros, &mut st, 0).unwrap();
        assert_eq!(norm, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn unit_rate_subtracts_gradient() {
        let mut p = policy();
        let g: Vec<f64> = (0..p.num_params()).map(|i| i as f64 * 0.25 - 1.0).collect();
        let mut st = OptimizerState::new(OptimizerSpec::sgd(1.0), p.num_params());
        apply_update(&mut p, &g, &mut st, 0).unwrap();
        for (w, gi) in p.weights().iter().zip(&g) {
            assert_eq!(*w, -gi);
        }
    }

    #[test]
    fn two_half_steps_equal_one_step() {
        let g: Vec<f64> = (0..policy().num_params()).map(|i| (i as f64).sin()).collect();
        let mut full = policy();
        apply_update(
            &mut full,
            &g,
            &mut OptimizerState::new(OptimizerSpec::sgd(0.5), g.len()),
            0,
        )
        .unwrap();
        let mut half = policy();
        let mut st = OptimizerState::new(OptimizerSpec::sgd(0.25), g.len());
        apply_update(&mut half, &g, &mut st, 0).unwrap();
        apply_update(&mut half, &g, &mut st, 0).unwrap();
        for (a, b) in full.weights().iter().zip(half.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = policy();
        let mut g = vec![0.0; p.num_params()];
        g[1] = f64::NAN;
        let mut st = OptimizerState::new(OptimizerSpec::default(), p.num_params());
        assert!(matches!(
            apply_update(&mut p, &g, &mut st, 7),
            Err(Error::NonFinite { step: 7, .. })
        ));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = policy();
        let mut g = vec![0.0; p.num_params()];
        g[0] = 3.0;
        g[1] = -0.01;
        let spec = OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut st = OptimizerState::new(spec, p.num_params());
        apply_update(&mut p, &g, &mut st, 0).unwrap();
        assert!((p.weights()[0] + 0.1).abs() < 1e-6);
        assert!((p.weights()[1] - 0.1).abs() < 1e-5);
        assert_eq!(p.weights()[2], 0.0);
    }
}
