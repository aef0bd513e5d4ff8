//! Waypoint expert. It reads the simulator state directly and is a pure
//! function of it, so the same state always yields the same action.
//!
//! Toy Pour is realised through grasp depth: the expert picks the grasp
//! height whose captured particle count lands the beaker level closest to
//! the target line, then releases everything it holds.

use super::{EnvState, TaskKind, TaskSpec, Vec3};

const AT_TARGET: f64 = 1e-9;
/// Fill grasp height above the source floor; encloses the whole column.
const FILL_GRASP_OFFSET: f64 = 0.032;
const GRASP_SEARCH_STEP: f64 = 5e-4;
/// Horizontal distance from the source axis at which the approach starts
/// descending below travel height.
const FUNNEL_RADIUS: f64 = 0.05;

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= AT_TARGET
}

fn toward(from: &Vec3, to: &Vec3, grip: f64, max_delta: f64) -> [f64; 4] {
    [
        (to[0] - from[0]).clamp(-max_delta, max_delta),
        (to[1] - from[1]).clamp(-max_delta, max_delta),
        (to[2] - from[2]).clamp(-max_delta, max_delta),
        grip,
    ]
}

/// Gripper height at which closing captures the intended particles.
pub fn grasp_height(state: &EnvState, spec: &TaskSpec) -> f64 {
    let src = &state.source;
    match spec.task {
        TaskKind::ToyFill => src.floor + FILL_GRASP_OFFSET,
        TaskKind::ToyPour => {
            let ph = &spec.physics;
            let top = src.rim + ph.grasp_radius;
            let steps = ((top - src.floor) / GRASP_SEARCH_STEP).floor() as usize;
            let mut best = (f64::INFINITY, top);
            for k in 0..=steps {
                let h = top - k as f64 * GRASP_SEARCH_STEP;
                let count = state
                    .within(&[src.center[0], src.center[1], h], ph.grasp_radius)
                    .count();
                let err = state
                    .beaker
                    .level_for_count(count, ph.layer_thickness)
                    .map_or(f64::INFINITY, |l| (l - state.target_line).abs());
                if err < best.0 {
                    best = (err, h);
                }
            }
            best.1
        }
    }
}

/// Expert action `[dx, dy, dz, grip]` for `state`.
///
/// Away from the grip switches the action is a continuous function of the
/// gripper position: the open approach descends along a funnel over the
/// source, and a loaded carry only moves sideways once the carried
/// particles clear the container rims.
pub fn scripted_expert(state: &EnvState, spec: &TaskSpec) -> [f64; 4] {
    let ph = &spec.physics;
    let g = state.gripper;
    let travel = spec.travel_height;
    // Grip is read by sign only; this magnitude keeps all four action
    // components on one scale.
    let (open, close) = (-ph.max_delta, ph.max_delta);

    if state.grip_closed {
        let holding = state.within(&g, ph.grasp_radius).next().is_some();
        if !holding {
            return [0.0, 0.0, 0.0, open];
        }
        let [bx, by] = state.beaker.center;
        if near(g[0], bx) && near(g[1], by) {
            return [0.0, 0.0, 0.0, open];
        }
        let clear = state.beaker.rim.max(state.source.rim) + ph.grasp_radius;
        let f = ((g[2] - clear) / (travel - clear)).clamp(0.0, 1.0);
        let mut a = toward(&g, &[bx, by, travel], close, ph.max_delta);
        a[0] *= f;
        a[1] *= f;
        return a;
    }

    if state.count_in(&state.source) < state.particle_count() {
        return toward(&g, &[g[0], g[1], travel], open, ph.max_delta);
    }
    let [sx, sy] = state.source.center;
    let h = grasp_height(state, spec);
    let d = (g[0] - sx).hypot(g[1] - sy);
    let z = h + (travel - h) * (d / FUNNEL_RADIUS).min(1.0);
    if near(g[0], sx) && near(g[1], sy) && near(g[2], h) {
        return [0.0, 0.0, 0.0, close];
    }
    toward(&g, &[sx, sy, z], open, ph.max_delta)
}

/// [`scripted_expert`] as a [`super::Controller`].
#[derive(Debug, Clone)]
pub struct ScriptedExpert {
    pub spec: TaskSpec,
}

