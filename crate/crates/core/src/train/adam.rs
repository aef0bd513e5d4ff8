use crate::autodiff::GradMap;
use crate::nn::Params;
use crate::policy::OptimizerSnapshot;
use crate::tensor::Tensor;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &Params) -> Self {
        let mut m = Params::new();
        for (name, p) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(p.shape()));
        }
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.t,
            first_moment: self.m.clone(),
            second_moment: self.v.clone(),
        }
    }

    pub fn from_snapshot(s: &OptimizerSnapshot) -> Self {
        Self {
            m: s.first_moment.clone(),
            v: s.second_moment.clone(),
            t: s.step,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(
    params: &mut Params,
    grads: &GradMap,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(TrainError::MissingGradient(format!(
                "{name} (gradient shape {:?}, parameter {:?})",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads.get(&name).expect("checked above").data();
        let m = state
            .m
            .get_mut(&name)
            .ok_or_else(|| TrainError::MissingGradient(format!("{name} (no first moment)")))?
            .data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let m = state.m.get(&name).expect("present").data();
        let v = state
            .v
            .get_mut(&name)
            .ok_or_else(|| TrainError::MissingGradient(format!("{name} (no second moment)")))?
            .data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let v = state.v.get(&name).expect("present").data();
        let p = params.get_mut(&name).expect("iterated").data_mut();
        for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *pi -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
