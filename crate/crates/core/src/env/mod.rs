//! Desk-scale particle environment with two tasks, Toy Fill and Toy Pour.
//!
//! Physics per substep: the gripper advances by its share of the action
//! delta; while the grip is closed, particles within the grasp radius move
//! rigidly with it. Every other particle integrates damped gravity. Then
//! constraints run: container walls and floors are solid boxes (position
//! clamp, normal velocity zeroed), the ground is `z = 0`, and particles
//! resting inside a container fill it layer by layer, so the surface level
//! tracks the particle count the way a poured liquid would.

mod demos;
mod expert;
mod observe;
mod rollout;

pub use demos::{
    decode_demos, encode_demos, generate_demos, read_demos, write_demos, DemoFile, DemoStep,
    Demonstration, DEMO_MAGIC, DEMO_VERSION,
};
pub use expert::{grasp_height, scripted_expert, ScriptedExpert};
pub use observe::{downsample, fuse_and_clip, observe, render_views, Point6, CLIP_HEIGHT};
pub use rollout::{rollout, ControlError, Controller, Episode};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action component {index} is not finite")]
    NonFiniteAction { index: usize },
    #[error("action must have 4 components, got {0}")]
    ActionLength(usize),
    #[error("no points left after height clipping")]
    DegenerateScene,
    #[error("cannot downsample an empty cloud")]
    EmptyCloud,
    #[error("episode seed {seed}: {message}")]
    Episode { seed: u64, message: String },
    #[error("only {found} of {wanted} demonstrations succeeded within {tried} seeds")]
    NotEnoughDemos {
        wanted: usize,
        found: usize,
        tried: usize,
    },
    #[error("demo file: {0}")]
    Format(String),
    #[error("demo file i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    ToyFill,
    ToyPour,
}

impl TaskKind {
    pub fn id(self) -> u32 {
        match self {
            TaskKind::ToyFill => 1,
            TaskKind::ToyPour => 2,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            1 => Some(TaskKind::ToyFill),
            2 => Some(TaskKind::ToyPour),
            _ => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::ToyFill => "ToyFill",
            TaskKind::ToyPour => "ToyPour",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ToyFill" => Ok(TaskKind::ToyFill),
            "ToyPour" => Ok(TaskKind::ToyPour),
            other => Err(format!("unknown task {other:?} (expected ToyFill or ToyPour)")),
        }
    }
}

/// Integration constants. None of these are measured values; they are
/// sized so the scripted expert finishes well inside the step budget.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsParams {
    pub dt: f64,
    pub gravity: f64,
    /// Velocity multiplier applied every substep.
    pub damping: f64,
    pub grasp_radius: f64,
    /// Per-axis bound on the commanded gripper translation per env step.
    pub max_delta: f64,
    /// Height of one resting layer of particles.
    pub layer_thickness: f64,
    /// Free velocity components below this magnitude are zeroed after each
    /// substep, so damped motion comes to an exact rest.
    pub rest_velocity: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            gravity: -9.8,
            damping: 0.98,
            grasp_radius: 0.06,
            max_delta: 0.05,
            layer_thickness: 0.004,
            rest_velocity: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub particles: usize,
    pub fill_threshold: f64,
    pub speed_threshold: f64,
    pub pour_tolerance: f64,
    pub spill_limit: usize,
    pub max_steps: usize,
    /// Height at which the expert carries particles between containers.
    pub travel_height: f64,
    pub physics: PhysicsParams,
}

impl TaskSpec {
    pub fn new(task: TaskKind) -> Self {
        Self {
            task,
            particles: 256,
            fill_threshold: 0.90,
            speed_threshold: 0.05,
            pour_tolerance: 0.004,
            spill_limit: 100,
            max_steps: 200,
            travel_height: 0.2,
            physics: PhysicsParams::default(),
        }
    }
}

pub const WORKSPACE_HALF: f64 = 1.0;
pub const WALL_THICKNESS: f64 = 0.005;
pub const RIM_HEIGHT: f64 = 0.08;
pub const SOURCE_HALF_WIDTH: f64 = 0.012;
pub const SOURCE_LAYER_CAPACITY: usize = 16;
pub const BEAKER_HALF_WIDTH: f64 = 0.04;
pub const BEAKER_LAYER_CAPACITY: usize = 36;

/// Pose ranges drawn at reset: `(x range, y range)` of each container centre.
pub const SOURCE_X: (f64, f64) = (-0.25, -0.10);
pub const BEAKER_X: (f64, f64) = (0.10, 0.25);
pub const CONTAINER_Y: (f64, f64) = (-0.15, 0.15);
/// Toy Pour target lines correspond to this many transferred particles.
pub const POUR_COUNT_RANGE: (usize, usize) = (64, 192);

pub type Vec3 = [f64; 3];

/// Open-top box standing on the ground.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub center: [f64; 2],
    pub half_width: f64,
    pub floor: f64,
    pub rim: f64,
    pub wall: f64,
    pub layer_capacity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Aabb {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }

    /// Depth of `p` inside the box, 0 when outside.
    pub fn penetration(&self, p: &Vec3) -> f64 {
        if !(0..3).all(|a| p[a] > self.lo[a] && p[a] < self.hi[a]) {
            return 0.0;
        }
        (0..3)
            .flat_map(|a| [p[a] - self.lo[a], self.hi[a] - p[a]])
            .fold(f64::INFINITY, f64::min)
    }
}

impl Container {
    fn new(center: [f64; 2], half_width: f64, layer_capacity: usize) -> Self {
        Self {
            center,
            half_width,
            floor: WALL_THICKNESS,
            rim: RIM_HEIGHT,
            wall: WALL_THICKNESS,
            layer_capacity,
        }
    }

    /// The open interior.
    pub fn interior(&self) -> Aabb {
        let [cx, cy] = self.center;
        let h = self.half_width;
        Aabb {
            lo: [cx - h, cy - h, self.floor],
            hi: [cx + h, cy + h, self.rim],
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.interior().contains(p)
    }

    fn in_footprint(&self, p: &Vec3) -> bool {
        let [cx, cy] = self.center;
        let h = self.half_width;
        p[0] >= cx - h && p[0] <= cx + h && p[1] >= cy - h && p[1] <= cy + h
    }

    /// Floor plus four walls.
    pub fn solids(&self) -> [Aabb; 5] {
        let [cx, cy] = self.center;
        let (h, w) = (self.half_width, self.wall);
        [
            Aabb {
                lo: [cx - h - w, cy - h - w, 0.0],
                hi: [cx + h + w, cy + h + w, self.floor],
            },
            Aabb {
                lo: [cx - h - w, cy - h - w, 0.0],
                hi: [cx - h, cy + h + w, self.rim],
            },
            Aabb {
                lo: [cx + h, cy - h - w, 0.0],
                hi: [cx + h + w, cy + h + w, self.rim],
            },
            Aabb {
                lo: [cx - h - w, cy - h - w, 0.0],
                hi: [cx + h + w, cy - h, self.rim],
            },
            Aabb {
                lo: [cx - h - w, cy + h, 0.0],
                hi: [cx + h + w, cy + h + w, self.rim],
            },
        ]
    }

    /// Resting height of the particle with fill rank `rank` (0 = lowest).
    pub fn support_height(&self, rank: usize, layer_thickness: f64) -> f64 {
        let layer = (rank / self.layer_capacity) as f64;
        (self.floor + (layer + 0.5) * layer_thickness).min(self.rim)
    }

    /// Surface level for `count` resting particles: mean height of the top
    /// decile. `None` when empty.
    pub fn level_for_count(&self, count: usize, layer_thickness: f64) -> Option<f64> {
        if count == 0 {
            return None;
        }
        let top = count.div_ceil(10);
        let sum: f64 = (count - top..count)
            .map(|r| self.support_height(r, layer_thickness))
            .sum();
        Some(sum / top as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub gripper: Vec3,
    /// Mean gripper velocity over the last env step.
    pub gripper_velocity: Vec3,
    pub grip_closed: bool,
    pub source: Container,
    pub beaker: Container,
    /// Target surface level (Toy Pour) or the 90 %-fill level (Toy Fill).
    pub target_line: f64,
    pub step: usize,
    pub seed: u64,
}

impl EnvState {
    pub fn particle_count(&self) -> usize {
        self.positions.len()
    }

    pub fn max_speed(&self) -> f64 {
        self.velocities
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self
            .velocities
            .iter()
            .map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
            .sum::<f64>()
    }

    pub fn count_in(&self, c: &Container) -> usize {
        self.positions.iter().filter(|p| c.contains(p)).count()
    }

    /// Indices of particles within `radius` of `centre`.
    pub fn within(&self, centre: &Vec3, radius: f64) -> impl Iterator<Item = usize> + '_ {
        let r2 = radius * radius;
        let c = *centre;
        self.positions
            .iter()
            .enumerate()
            .filter(move |(_, p)| dist2(p, &c) <= r2)
            .map(|(i, _)| i)
    }

    /// Mean height of the top decile of particles inside the beaker.
    pub fn surface_level(&self) -> Option<f64> {
        let mut zs: Vec<f64> = self
            .positions
            .iter()
            .filter(|p| self.beaker.contains(p))
            .map(|p| p[2])
            .collect();
        if zs.is_empty() {
            return None;
        }
        zs.sort_by(|a, b| b.total_cmp(a));
        let top = zs.len().div_ceil(10);
        Some(zs[..top].iter().sum::<f64>() / top as f64)
    }
}

pub(crate) fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// SplitMix64 finaliser over a sequence of words; derives independent
/// stream seeds from (seed, step, purpose) tuples.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn reset(spec: &TaskSpec, seed: u64) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.task.id() as u64, seed, 0]));
    let source = Container::new(
        [rng.random_range(SOURCE_X.0..SOURCE_X.1), rng.random_range(CONTAINER_Y.0..CONTAINER_Y.1)],
        SOURCE_HALF_WIDTH,
        SOURCE_LAYER_CAPACITY,
    );
    let beaker = Container::new(
        [rng.random_range(BEAKER_X.0..BEAKER_X.1), rng.random_range(CONTAINER_Y.0..CONTAINER_Y.1)],
        BEAKER_HALF_WIDTH,
        BEAKER_LAYER_CAPACITY,
    );
    let gripper = [
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        spec.travel_height,
    ];
    let d = spec.physics.layer_thickness;
    let target_line = match spec.task {
        TaskKind::ToyFill => {
            let count = (spec.fill_threshold * spec.particles as f64).ceil() as usize;
            beaker.level_for_count(count, d).unwrap_or(beaker.floor)
        }
        TaskKind::ToyPour => {
            let lo = beaker.level_for_count(POUR_COUNT_RANGE.0, d).unwrap_or(beaker.floor);
            let hi = beaker.level_for_count(POUR_COUNT_RANGE.1, d).unwrap_or(beaker.floor);
            rng.random_range(lo..hi)
        }
    };

    // Square columns on a regular grid, filled bottom-up one layer at a time.
    let side = (source.layer_capacity as f64).sqrt().round() as usize;
    let spacing = 2.0 * source.half_width / side as f64;
    let positions = (0..spec.particles)
        .map(|i| {
            let (col, rank) = (i % source.layer_capacity, i);
            let (cx, cy) = (col % side, col / side);
            [
                source.center[0] - source.half_width + (cx as f64 + 0.5) * spacing,
                source.center[1] - source.half_width + (cy as f64 + 0.5) * spacing,
                source.support_height(rank, d),
            ]
        })
        .collect();
    EnvState {
        positions,
        velocities: vec![[0.0; 3]; spec.particles],
        gripper,
        gripper_velocity: [0.0; 3],
        grip_closed: false,
        source,
        beaker,
        target_line,
        step: 0,
        seed,
    }
}

/// Clamps a raw action to the controller box: per-axis translation in
/// `[-max_delta, max_delta]`, grip closed iff the last component is positive.
pub fn clamp_action(action: &[f64], max_delta: f64) -> Result<(Vec3, bool), EnvError> {
    if action.len() != 4 {
        return Err(EnvError::ActionLength(action.len()));
    }
    if let Some(index) = action.iter().position(|v| !v.is_finite()) {
        return Err(EnvError::NonFiniteAction { index });
    }
    let delta = [
        action[0].clamp(-max_delta, max_delta),
        action[1].clamp(-max_delta, max_delta),
        action[2].clamp(-max_delta, max_delta),
    ];
    Ok((delta, action[3] > 0.0))
}

/// Advances one policy step of `substeps` physics substeps.
pub fn env_step(
    state: &mut EnvState,
    spec: &TaskSpec,
    action: &[f64],
    substeps: usize,
) -> Result<(), EnvError> {
    let ph = &spec.physics;
    let (delta, grip) = clamp_action(action, ph.max_delta)?;
    let substeps = substeps.max(1);
    let start = state.gripper;
    let mut travel = [0.0; 3];
    for a in 0..3 {
        let lo = if a == 2 { 0.0 } else { -WORKSPACE_HALF };
        travel[a] = (start[a] + delta[a]).clamp(lo, WORKSPACE_HALF) - start[a];
    }
    state.grip_closed = grip;

    let m = state.positions.len();
    let mut carried = vec![false; m];
    let mut settled = false;
    let r2 = ph.grasp_radius * ph.grasp_radius;
    for k in 1..=substeps {
        let prev = state.gripper;
        let frac = k as f64 / substeps as f64;
        let next = [
            start[0] + travel[0] * frac,
            start[1] + travel[1] * frac,
            start[2] + travel[2] * frac,
        ];
        let shift = [next[0] - prev[0], next[1] - prev[1], next[2] - prev[2]];
        let grip_velocity = shift.map(|s| s / ph.dt);
        state.gripper = next;

        let mut any_carried = false;
        if grip {
            for i in 0..m {
                carried[i] = dist2(&state.positions[i], &prev) <= r2;
                if carried[i] {
                    any_carried = true;
                    for a in 0..3 {
                        state.positions[i][a] += shift[a];
                    }
                    state.velocities[i] = grip_velocity;
                }
            }
        }
        if settled && !any_carried {
            continue;
        }

        let before_pos = state.positions.clone();
        let before_vel = state.velocities.clone();
        for i in 0..m {
            if carried[i] {
                continue;
            }
            let v = &mut state.velocities[i];
            v[2] += ph.gravity * ph.dt;
            for c in v.iter_mut() {
                *c *= ph.damping;
            }
            let v = *v;
            for a in 0..3 {
                state.positions[i][a] += v[a] * ph.dt;
            }
        }
        apply_constraints(state, &carried, ph.layer_thickness);
        for (v, &c) in state.velocities.iter_mut().zip(&carried) {
            if !c {
                for x in v.iter_mut().filter(|x| x.abs() < ph.rest_velocity) {
                    *x = 0.0;
                }
            }
        }
        settled = !any_carried && state.positions == before_pos && state.velocities == before_vel;
    }
    state.gripper_velocity = travel.map(|t| t / (substeps as f64 * ph.dt));
    state.step += 1;
    Ok(())
}

fn push_out(p: &mut Vec3, v: &mut Vec3, b: &Aabb) {
    if b.penetration(p) == 0.0 {
        return;
    }
    let mut best = (f64::INFINITY, 0, 0.0);
    for a in 0..3 {
        let down = p[a] - b.lo[a];
        if down < best.0 {
            best = (down, a, b.lo[a]);
        }
        let up = b.hi[a] - p[a];
        if up < best.0 {
            best = (up, a, b.hi[a]);
        }
    }
    let (_, axis, face) = best;
    p[axis] = face;
    v[axis] = 0.0;
}

fn apply_constraints(state: &mut EnvState, carried: &[bool], layer_thickness: f64) {
    let solids: Vec<Aabb> = state
        .source
        .solids()
        .into_iter()
        .chain(state.beaker.solids())
        .collect();
    for (p, v) in state.positions.iter_mut().zip(state.velocities.iter_mut()) {
        for a in 0..3 {
            let lo = if a == 2 { 0.0 } else { -WORKSPACE_HALF };
            if p[a] < lo {
                p[a] = lo;
                v[a] = 0.0;
            } else if p[a] > WORKSPACE_HALF {
                p[a] = WORKSPACE_HALF;
                v[a] = 0.0;
            }
        }
        // Two passes settle corners where a wall meets the floor slab.
        for _ in 0..2 {
            for s in &solids {
                push_out(p, v, s);
            }
        }
    }
    for container in [&state.source, &state.beaker] {
        let mut resting: Vec<usize> = (0..state.positions.len())
            .filter(|&i| {
                !carried[i]
                    && container.in_footprint(&state.positions[i])
                    && state.positions[i][2] <= container.rim
            })
            .collect();
        resting.sort_by(|&a, &b| {
            state.positions[a][2]
                .total_cmp(&state.positions[b][2])
                .then(a.cmp(&b))
        });
        for (rank, &i) in resting.iter().enumerate() {
            let support = container.support_height(rank, layer_thickness);
            if state.positions[i][2] < support {
                state.positions[i][2] = support;
                if state.velocities[i][2] < 0.0 {
                    state.velocities[i][2] = 0.0;
                }
            }
        }
    }
}

/// Final-state metrics of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps: usize,
    pub fill_fraction: f64,
    /// `|surface level − target line|`, infinite when the beaker is empty.
    pub level_error: f64,
    pub spilled: usize,
    pub max_speed: f64,
}

pub fn check_success(state: &EnvState, spec: &TaskSpec) -> EpisodeResult {
    let m = state.particle_count();
    let in_beaker = state.count_in(&state.beaker);
    let spilled = state
        .positions
        .iter()
        .filter(|p| !state.beaker.contains(p) && !state.source.contains(p))
        .count();
    let fill_fraction = in_beaker as f64 / m.max(1) as f64;
    let level_error = state
        .surface_level()
        .map_or(f64::INFINITY, |l| (l - state.target_line).abs());
    let max_speed = state.max_speed();
    let calm = max_speed < spec.speed_threshold;
    let success = match spec.task {
        TaskKind::ToyFill => fill_fraction > spec.fill_threshold && calm,
        TaskKind::ToyPour => {
            level_error <= spec.pour_tolerance && spilled < spec.spill_limit && calm
        }
    };
    EpisodeResult {
        success,
        steps: state.step,
        fill_fraction,
        level_error,
        spilled,
        max_speed,
    }
}

#[cfg(test)]
mod tests;
