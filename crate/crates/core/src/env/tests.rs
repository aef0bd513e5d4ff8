use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn fill() -> TaskSpec {
    TaskSpec::new(TaskKind::ToyFill)
}

fn pour() -> TaskSpec {
    TaskSpec::new(TaskKind::ToyPour)
}

/// A state with one particle per position, far from both containers.
fn free_state(positions: Vec<Vec3>, gripper: Vec3) -> EnvState {
    let mut s = reset(&fill(), 0);
    s.velocities = vec![[0.0; 3]; positions.len()];
    s.positions = positions;
    s.gripper = gripper;
    s
}

#[test]
fn reset_is_deterministic() {
    assert_eq!(reset(&fill(), 7), reset(&fill(), 7));
    assert_eq!(reset(&pour(), 7), reset(&pour(), 7));
}

#[test]
fn reset_poses_vary_within_bounds() {
    let spec = fill();
    let mut centres = Vec::new();
    for seed in 0..100 {
        let s = reset(&spec, seed);
        let [bx, by] = s.beaker.center;
        let [sx, sy] = s.source.center;
        assert!((BEAKER_X.0..BEAKER_X.1).contains(&bx), "seed {seed}");
        assert!((CONTAINER_Y.0..CONTAINER_Y.1).contains(&by), "seed {seed}");
        assert!((SOURCE_X.0..SOURCE_X.1).contains(&sx), "seed {seed}");
        assert!((CONTAINER_Y.0..CONTAINER_Y.1).contains(&sy), "seed {seed}");
        centres.push(s.beaker.center);
    }
    assert_ne!(centres[0], centres[1]);
    centres.sort_by(|a, b| a[0].total_cmp(&b[0]));
    centres.dedup();
    assert_eq!(centres.len(), 100);
}

#[test]
fn particles_start_in_source() {
    for task in [fill(), pour()] {
        let s = reset(&task, 3);
        assert_eq!(s.particle_count(), 256);
        assert!(s.positions.iter().all(|p| s.source.contains(p)));
    }
}

#[test]
fn settled_state_is_an_equilibrium() {
    let spec = fill();
    let s0 = reset(&spec, 11);
    let mut s = s0.clone();
    env_step(&mut s, &spec, &[0.0, 0.0, 0.0, -1.0], 500).unwrap();
    for (a, b) in s.positions.iter().zip(&s0.positions) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= 1e-9);
        }
    }
    assert_eq!(s.max_speed(), 0.0);
}

#[test]
fn grasped_particles_move_rigidly() {
    let spec = fill();
    let near = vec![[0.0, 0.5, 0.50], [0.01, 0.5, 0.52], [-0.02, 0.49, 0.5]];
    let far = [0.3, 0.5, 0.5];
    let mut positions = near.clone();
    positions.push(far);
    let mut s = free_state(positions, [0.0, 0.5, 0.51]);
    env_step(&mut s, &spec, &[0.01, 0.0, 0.0, 1.0], 500).unwrap();
    for (moved, start) in s.positions.iter().zip(&near) {
        assert!((moved[0] - (start[0] + 0.01)).abs() < 1e-12);
        assert!((moved[1] - start[1]).abs() < 1e-12);
        assert!((moved[2] - start[2]).abs() < 1e-12);
    }
    assert!(s.positions[3][2] < far[2] - 0.05, "far particle falls");
}

/// Closed form of `v ← a(v + g·dt)`, `z ← z + v·dt` after `k` substeps.
fn damped_fall(z0: f64, v0: f64, g: f64, dt: f64, a: f64, k: i32) -> (f64, f64) {
    let c = g * dt;
    let ak = a.powi(k);
    let geo = a * (1.0 - ak) / (1.0 - a);
    let v = ak * v0 + c * geo;
    let z = z0 + dt * (v0 * geo + c * a / (1.0 - a) * (k as f64 - geo));
    (z, v)
}

#[test]
fn free_fall_matches_closed_form() {
    let spec = fill();
    let ph = &spec.physics;
    let mut s = free_state(vec![[0.0, 0.6, 0.5]], [0.0, -0.6, 0.5]);
    s.velocities[0] = [0.0, 0.0, 0.3];
    env_step(&mut s, &spec, &[0.0, 0.0, 0.0, -1.0], 500).unwrap();
    let (z, v) = damped_fall(0.5, 0.3, ph.gravity, ph.dt, ph.damping, 500);
    assert!((s.positions[0][2] - z).abs() < 1e-9, "{} vs {z}", s.positions[0][2]);
    assert!((s.velocities[0][2] - v).abs() < 1e-9);
    assert_eq!(s.positions[0][0], 0.0);
}

#[test]
fn closed_form_agrees_with_direct_recurrence() {
    let (mut z, mut v) = (1.0, 0.0);
    for _ in 0..500 {
        v = 0.98 * (v - 9.8e-3);
        z += v * 1e-3;
    }
    let (zc, vc) = damped_fall(1.0, 0.0, -9.8, 1e-3, 0.98, 500);
    assert!((z - zc).abs() < 1e-12 && (v - vc).abs() < 1e-12);
}

fn max_wall_penetration(s: &EnvState) -> f64 {
    let solids: Vec<Aabb> = s.source.solids().into_iter().chain(s.beaker.solids()).collect();
    s.positions
        .iter()
        .flat_map(|p| solids.iter().map(move |b| b.penetration(p)))
        .fold(0.0, f64::max)
}

#[test]
fn particles_never_enter_walls() {
    let spec = fill();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..3 {
        let mut s = reset(&spec, seed);
        for step in 0..60 {
            // Expert for a while so particles get carried and dropped, then noise.
            let action = if step < 40 {
                scripted_expert(&s, &spec).to_vec()
            } else {
                (0..4).map(|_| rng.random_range(-0.08..0.08)).collect()
            };
            for _ in 0..20 {
                env_step(&mut s, &spec, &action, 1).unwrap();
                assert!(max_wall_penetration(&s) <= 1e-9);
                assert_eq!(s.particle_count(), 256);
                assert!(s.positions.iter().flatten().all(|c| c.abs() <= 1.0));
            }
        }
    }
}

#[test]
fn kinetic_energy_never_grows_while_settling() {
    let spec = fill();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut s = reset(&spec, 2);
    for v in s.velocities.iter_mut() {
        *v = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0];
    }
    let mut ke = s.kinetic_energy();
    for _ in 0..2000 {
        env_step(&mut s, &spec, &[0.0, 0.0, 0.0, -1.0], 1).unwrap();
        let next = s.kinetic_energy();
        assert!(next <= ke, "{next} > {ke}");
        ke = next;
    }
}

#[test]
fn non_finite_action_is_rejected() {
    let spec = fill();
    let mut s = reset(&spec, 0);
    assert!(matches!(
        env_step(&mut s, &spec, &[0.0, f64::NAN, 0.0, 0.0], 10),
        Err(EnvError::NonFiniteAction { index: 1 })
    ));
    assert!(matches!(
        env_step(&mut s, &spec, &[0.0; 3], 10),
        Err(EnvError::ActionLength(3))
    ));
}

#[test]
fn fill_success_rules() {
    let spec = fill();
    let mut s = reset(&spec, 4);
    let [bx, by] = s.beaker.center;
    for (i, p) in s.positions.iter_mut().enumerate() {
        *p = [bx, by, s.beaker.support_height(i, 0.004)];
    }
    assert!(check_success(&s, &spec).success);
    // 89 % inside: move 29 of 256 out.
    for p in s.positions.iter_mut().take(29) {
        *p = [0.0, -0.5, 0.0];
    }
    let r = check_success(&s, &spec);
    assert!(r.fill_fraction < 0.9 && !r.success);
    s.positions = reset(&spec, 4).positions;
    let mut moving = s.clone();
    moving.velocities[0] = [0.0, 0.0, 0.06];
    assert!(!check_success(&moving, &spec).success);
}

#[test]
fn pour_success_rules() {
    let spec = pour();
    let mut s = reset(&spec, 8);
    let [bx, by] = s.beaker.center;
    for (i, p) in s.positions.iter_mut().enumerate().take(100) {
        *p = [bx, by, s.beaker.support_height(i, 0.004)];
    }
    let level = s.surface_level().unwrap();
    s.target_line = level + 0.003;
    assert!(check_success(&s, &spec).success);
    s.target_line = level + 0.005;
    let r = check_success(&s, &spec);
    assert!((r.level_error - 0.005).abs() < 1e-12 && !r.success);
    s.target_line = level;
    for p in s.positions.iter_mut().skip(150) {
        *p = [0.0, -0.5, 0.0];
    }
    assert_eq!(check_success(&s, &spec).spilled, 106);
    assert!(!check_success(&s, &spec).success);
}

fn labelled_points(n: usize, z: f64, rng: &mut ChaCha8Rng) -> Vec<Point6> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                z + rng.random_range(0.0..0.2),
                0.0,
                1.0,
                0.0,
            ]
        })
        .collect()
}

#[test]
fn fuse_and_clip_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut a = labelled_points(900, 0.0, &mut rng);
    let b = labelled_points(700, 0.0, &mut rng);
    a[0][2] = 0.0019;
    let fused = fuse_and_clip(&a, &b).unwrap();
    assert!(fused.len() < 1600);
    assert!(fused.iter().all(|p| p[2] >= CLIP_HEIGHT));
    let ground: Vec<Point6> = (0..50).map(|i| [i as f64, 0.0, 0.0, 0.5, 0.5, 0.5]).collect();
    let only_b = fuse_and_clip(&ground, &b[..10]).unwrap();
    assert_eq!(only_b.len(), b[..10].iter().filter(|p| p[2] >= CLIP_HEIGHT).count());
    assert!(matches!(fuse_and_clip(&ground, &[]), Err(EnvError::DegenerateScene)));
}

fn rows(t: &Tensor) -> Vec<Vec<u64>> {
    let mut r: Vec<Vec<u64>> = (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    r.sort();
    r
}

fn as_rows(p: &[Point6]) -> Vec<Vec<u64>> {
    let mut r: Vec<Vec<u64>> = p.iter().map(|x| x.iter().map(|v| v.to_bits()).collect()).collect();
    r.sort();
    r
}

#[test]
fn downsample_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let exact = labelled_points(1200, 0.01, &mut rng);
    let out = downsample(&exact, 1200, &mut rng).unwrap();
    assert_eq!(rows(&out), as_rows(&exact));

    let big = labelled_points(5000, 0.01, &mut rng);
    let pool = as_rows(&big);
    let out = downsample(&big, 1200, &mut rng).unwrap();
    assert_eq!(out.shape(), [1200, 6]);
    let picked = rows(&out);
    assert!(picked.iter().all(|r| pool.binary_search(r).is_ok()));
    let mut distinct = picked.clone();
    distinct.dedup();
    assert_eq!(distinct.len(), 1200);

    let small = labelled_points(800, 0.01, &mut rng);
    let pool = as_rows(&small);
    let out = downsample(&small, 1200, &mut rng).unwrap();
    assert_eq!(out.rows(), 1200);
    assert!(rows(&out).iter().all(|r| pool.binary_search(r).is_ok()));

    assert!(matches!(downsample(&[], 8, &mut rng), Err(EnvError::EmptyCloud)));
}

#[test]
fn doubled_view_downsamples_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let view = labelled_points(700, 0.01, &mut rng);
    let doubled = fuse_and_clip(&view, &view).unwrap();
    assert_eq!(doubled.len(), 1400);
    let single = fuse_and_clip(&view, &[]).unwrap();
    let a = downsample(&single, 256, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = downsample(&doubled, 256, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn observation_shape_and_labels() {
    let spec = pour();
    let s = reset(&spec, 6);
    let obs = observe(&s, 1200).unwrap();
    assert_eq!(obs.points.shape(), [1200, 6]);
    assert_eq!(obs.robot_state.len(), 7);
    assert!((0..1200).all(|i| obs.points.at(i, 2) >= CLIP_HEIGHT));
    let palette = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.5]];
    assert!((0..1200).all(|i| palette.contains(&[
        obs.points.at(i, 3),
        obs.points.at(i, 4),
        obs.points.at(i, 5)
    ])));
    assert!(observe(&s, 1200).unwrap() == obs);
}

#[test]
fn expert_is_deterministic_and_bounded() {
    for spec in [fill(), pour()] {
        let mut s = reset(&spec, 12);
        for _ in 0..40 {
            let a = scripted_expert(&s, &spec);
            assert_eq!(a, scripted_expert(&s, &spec));
            assert!(a[..3].iter().all(|d| d.abs() <= spec.physics.max_delta));
            assert_eq!(a[3].abs(), spec.physics.max_delta);
            env_step(&mut s, &spec, &a, 500).unwrap();
        }
    }
}

#[test]
fn expert_solves_both_tasks() {
    for spec in [fill(), pour()] {
        let wins = (0..10)
            .filter(|&seed| {
                let mut expert = ScriptedExpert { spec: spec.clone() };
                rollout(&spec, seed, &mut expert, 500, 64, false)
                    .unwrap()
                    .result
                    .success
            })
            .count();
        assert!(wins >= 9, "{}: {wins}/10", spec.task);
    }
}

#[test]
fn empty_demo_file_round_trips() {
    let file = generate_demos(&fill(), 0, 0, 32, 500).unwrap();
    assert!(file.episodes.is_empty());
    let bytes = encode_demos(&file).unwrap();
    assert_eq!(decode_demos(&bytes).unwrap(), file);
}

#[test]
fn demo_file_round_trip_and_determinism() {
    let spec = fill();
    let file = generate_demos(&spec, 2, 100, 16, 500).unwrap();
    assert_eq!(file.episodes.len(), 2);
    assert!(file.episodes.iter().all(|e| e.success && !e.steps.is_empty()));
    let bytes = encode_demos(&file).unwrap();
    let again = encode_demos(&generate_demos(&spec, 2, 100, 16, 500).unwrap()).unwrap();
    assert_eq!(bytes, again);

    let back = decode_demos(&bytes).unwrap();
    assert_eq!(back.episodes.len(), 2);
    let (a, b) = (&file.episodes[0].steps[0], &back.episodes[0].steps[0]);
    for (x, y) in a.observation.points.data().iter().zip(b.observation.points.data()) {
        assert_eq!(*y, *x as f32 as f64);
    }
    assert_eq!(encode_demos(&back).unwrap(), bytes);

    assert!(decode_demos(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_demos(&bad).is_err());
    let mut bad = bytes;
    bad[4] = 9;
    assert!(decode_demos(&bad).is_err());
}

#[test]
fn task_names_round_trip() {
    for t in [TaskKind::ToyFill, TaskKind::ToyPour] {
        assert_eq!(t.to_string().parse::<TaskKind>().unwrap(), t);
        assert_eq!(TaskKind::from_id(t.id()), Some(t));
    }
    assert!("Hang".parse::<TaskKind>().is_err());
}
