//! Synthetic two-camera point clouds and the fuse → clip → downsample chain.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::observation::PointCloudObservation;
use crate::tensor::Tensor;

use super::{derive_seed, dist2, EnvError, EnvState};

/// `[x, y, z, r, g, b]`.
pub type Point6 = [f64; 6];

/// Points strictly below this height are treated as ground artifacts.
pub const CLIP_HEIGHT: f64 = 0.002;

const GRIPPER_LABEL: [f64; 3] = [1.0, 0.0, 0.0];
const PARTICLE_LABEL: [f64; 3] = [0.0, 1.0, 0.0];
const BEAKER_LABEL: [f64; 3] = [0.0, 0.0, 1.0];
const MARKER_LABEL: [f64; 3] = [0.0, 0.0, 0.5];
const GROUND_LABEL: [f64; 3] = [0.5, 0.5, 0.5];

const CAMERA_NOISE: f64 = 5e-4;
const HAND_CAMERA_RANGE: f64 = 0.25;
const MARKER_COUNT: usize = 24;

fn labelled(p: [f64; 3], label: [f64; 3]) -> Point6 {
    [p[0], p[1], p[2], label[0], label[1], label[2]]
}

/// Every visible surface sample, ground included.
fn scene_points(state: &EnvState) -> (Vec<Point6>, Vec<Point6>) {
    let mut pts: Vec<Point6> = state
        .positions
        .iter()
        .map(|p| labelled(*p, PARTICLE_LABEL))
        .collect();

    let g = state.gripper;
    pts.push(labelled(g, GRIPPER_LABEL));
    for corner in 0..8 {
        let s = |bit: usize| if corner >> bit & 1 == 1 { 0.01 } else { -0.01 };
        pts.push(labelled([g[0] + s(0), g[1] + s(1), g[2] + s(2)], GRIPPER_LABEL));
    }

    let b = &state.beaker;
    let [cx, cy] = b.center;
    let h = b.half_width;
    let lerp = |i: usize, n: usize| -h + 2.0 * h * i as f64 / (n - 1) as f64;
    for i in 0..5 {
        for j in 0..5 {
            pts.push(labelled([cx + lerp(i, 5), cy + lerp(j, 5), b.floor], BEAKER_LABEL));
        }
    }
    for i in 0..5 {
        for k in 1..=3 {
            let z = b.floor + (b.rim - b.floor) * k as f64 / 3.0;
            let t = lerp(i, 5);
            for p in [[cx - h, cy + t], [cx + h, cy + t], [cx + t, cy - h], [cx + t, cy + h]] {
                pts.push(labelled([p[0], p[1], z], BEAKER_LABEL));
            }
        }
    }

    for i in 0..MARKER_COUNT {
        let a = std::f64::consts::TAU * i as f64 / MARKER_COUNT as f64;
        let r = 0.9 * h;
        pts.push(labelled(
            [cx + r * a.cos(), cy + r * a.sin(), state.target_line],
            MARKER_LABEL,
        ));
    }

    let ground = (0..64)
        .map(|i| {
            let (u, v) = ((i % 8) as f64, (i / 8) as f64);
            labelled([-0.4 + u * 0.8 / 7.0, -0.4 + v * 0.8 / 7.0, 0.0], GROUND_LABEL)
        })
        .collect();
    (pts, ground)
}

fn add_noise(points: &mut [Point6], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, CAMERA_NOISE).expect("positive sigma");
    for p in points {
        for c in p.iter_mut().take(3) {
            *c += normal.sample(&mut rng);
        }
    }
}

/// Base and hand camera views. The base camera sees a fixed two-thirds of
/// the scene plus the ground; the hand camera sees the remaining third and
/// everything near the gripper.
pub fn render_views(state: &EnvState) -> (Vec<Point6>, Vec<Point6>) {
    let (scene, ground) = scene_points(state);
    let near2 = HAND_CAMERA_RANGE * HAND_CAMERA_RANGE;
    let mut base: Vec<Point6> = scene
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 3 != 2)
        .map(|(_, p)| *p)
        .chain(ground)
        .collect();
    let mut hand: Vec<Point6> = scene
        .iter()
        .enumerate()
        .filter(|(i, p)| i % 3 == 2 || dist2(&[p[0], p[1], p[2]], &state.gripper) <= near2)
        .map(|(_, p)| *p)
        .collect();
    let step = state.step as u64;
    add_noise(&mut base, derive_seed(&[state.seed, step, 0]));
    add_noise(&mut hand, derive_seed(&[state.seed, step, 1]));
    (base, hand)
}

/// Concatenates the views and drops points below [`CLIP_HEIGHT`].
pub fn fuse_and_clip(a: &[Point6], b: &[Point6]) -> Result<Vec<Point6>, EnvError> {
    let fused: Vec<Point6> = a
        .iter()
        .chain(b)
        .filter(|p| p[2] >= CLIP_HEIGHT)
        .copied()
        .collect();
    if fused.is_empty() {
        return Err(EnvError::DegenerateScene);
    }
    Ok(fused)
}

/// Picks `n_points` rows uniformly: without replacement when enough distinct
/// rows exist, with replacement otherwise. Exact duplicate rows are merged
/// first, so a view fused with itself samples like the view alone.
pub fn downsample<R: Rng + ?Sized>(
    points: &[Point6],
    n_points: usize,
    rng: &mut R,
) -> Result<Tensor, EnvError> {
    if points.is_empty() {
        return Err(EnvError::EmptyCloud);
    }
    let mut distinct = points.to_vec();
    distinct.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    distinct.dedup_by(|a, b| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let picks: Vec<usize> = if distinct.len() >= n_points {
        index::sample(rng, distinct.len(), n_points).into_vec()
    } else {
        (0..n_points).map(|_| rng.random_range(0..distinct.len())).collect()
    };
    let data = picks.iter().flat_map(|&i| distinct[i]).collect();
    Ok(Tensor::new(vec![n_points, 6], data).expect("n_points rows of 6"))
}

/// Full observation of `state`: rendered views, fusion, clipping,
/// downsampling and the 7-dimensional robot state.
pub fn observe(state: &EnvState, n_points: usize) -> Result<PointCloudObservation, EnvError> {
    let (base, hand) = render_views(state);
    let fused = fuse_and_clip(&base, &hand)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[state.seed, state.step as u64, 2]));
    let points = downsample(&fused, n_points, &mut rng)?;
    let g = state.gripper;
    let v = state.gripper_velocity;
    let grip = if state.grip_closed { 1.0 } else { 0.0 };
    let robot_state = Tensor::vector(vec![g[0], g[1], g[2], v[0], v[1], v[2], grip])
        .expect("non-empty state");
    Ok(PointCloudObservation {
        points,
        robot_state,
    })
}
