use crate::observation::PointCloudObservation;

use super::demos::DemoStep;
use super::expert::{scripted_expert, ScriptedExpert};
use super::observe::observe;
use super::{check_success, env_step, reset, EnvError, EnvState, EpisodeResult, TaskSpec};

pub type ControlError = Box<dyn std::error::Error + Send + Sync>;

/// Anything that maps the current step to an action.
pub trait Controller {
    /// Whether [`Controller::act`] reads the observation. Controllers that
    /// don't skip rendering unless the rollout records demonstrations.
    fn needs_observation(&self) -> bool {
        true
    }

    fn act(
        &mut self,
        state: &EnvState,
        obs: Option<&PointCloudObservation>,
    ) -> Result<Vec<f64>, ControlError>;
}

impl Controller for ScriptedExpert {
    fn needs_observation(&self) -> bool {
        false
    }

    fn act(
        &mut self,
        state: &EnvState,
        _obs: Option<&PointCloudObservation>,
    ) -> Result<Vec<f64>, ControlError> {
        Ok(scripted_expert(state, &self.spec).to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub seed: u64,
    pub result: EpisodeResult,
    /// Recorded (observation, action) pairs; empty unless requested.
    pub steps: Vec<DemoStep>,
}

/// Runs one closed-loop episode until success or `spec.max_steps`.
pub fn rollout<C: Controller + ?Sized>(
    spec: &TaskSpec,
    seed: u64,
    controller: &mut C,
    substeps: usize,
    n_points: usize,
    record: bool,
) -> Result<Episode, EnvError> {
    let episode_err = |message: String| EnvError::Episode { seed, message };
    let mut state = reset(spec, seed);
    let mut steps = Vec::new();
    let mut result = check_success(&state, spec);
    while !result.success && state.step < spec.max_steps {
        let obs = if record || controller.needs_observation() {
            Some(observe(&state, n_points)?)
        } else {
            None
        };
        let action = controller
            .act(&state, obs.as_ref())
            .map_err(|e| episode_err(format!("step {}: {e}", state.step)))?;
        env_step(&mut state, spec, &action, substeps)
            .map_err(|e| episode_err(format!("step {}: {e}", state.step)))?;
        if record {
            steps.push(DemoStep {
                observation: obs.expect("rendered when recording"),
                action,
            });
        }
        result = check_success(&state, spec);
    }
    Ok(Episode {
        seed,
        result,
        steps,
    })
}
