use proptest::prelude::*;

use gp2e::env::{clamp_action, downsample, reset, TaskKind, TaskSpec};
use gp2e::nn::{apply_layer_norm, LayerNormParams};
use gp2e::policy::{decode_checkpoint, encode_checkpoint, Dtype};
use gp2e::tensor::{matmul, matmul_nt, softmax_rows};
use gp2e::train::{finetune_schedule, StageSchedule, TrainConfig};
use gp2e::{Checkpoint, Policy, PointCloudObservation, PolicyConfig, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn tiny() -> PolicyConfig {
    PolicyConfig {
        n_points: 6,
        channel_plan: [6, 4, 4, 4],
        d_k: 4,
        head_hidden: 4,
        ..PolicyConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 7)) {
        let s = softmax_rows(&x);
        for r in 0..4 {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose(a in matrix(5, 9), b in matrix(3, 9)) {
        let fast = matmul_nt(&a, &b).unwrap();
        let slow = matmul(&a, &b.transpose()).unwrap();
        for (x, y) in fast.data().iter().zip(slow.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_centres_each_point(x in matrix(3, 8)) {
        let y = apply_layer_norm(&x, &LayerNormParams::identity(8)).unwrap();
        for r in 0..3 {
            let mean = y.row(r).iter().sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn forward_ignores_point_order(
        pts in matrix(6, 6),
        state in prop::collection::vec(-1.0f64..1.0, 7),
        order in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        seed in 0u64..1000,
    ) {
        let policy = Policy::new(tiny(), seed).unwrap();
        let obs = PointCloudObservation { points: pts, robot_state: Tensor::vector(state).unwrap() };
        let a = policy.forward(&obs).unwrap();
        let b = policy.forward(&obs.permuted(&order)).unwrap();
        prop_assert!(a.bit_eq(&b));
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in 0u64..1000, step in 0u64..1 << 40, best in 0.0f64..1.0) {
        let policy = Policy::new(tiny(), seed).unwrap();
        let ckpt = Checkpoint {
            config: policy.config.clone(),
            params: policy.params.clone(),
            optimizer: None,
            train_step: step,
            best_success: best,
        };
        let back = decode_checkpoint(&encode_checkpoint(&ckpt, Dtype::F64)).unwrap();
        prop_assert_eq!(back, ckpt);
    }

    #[test]
    fn schedule_shrinks_but_stays_positive(
        batch in 1usize..10_000,
        sim in 1usize..10_000,
        bs in 0.01f64..=1.0,
        ss in 0.01f64..=1.0,
    ) {
        let cfg = TrainConfig { batch_size: batch, sim_steps: sim, ..TrainConfig::default() };
        let out = finetune_schedule(&cfg, &StageSchedule { batch_scale: bs, sim_scale: ss });
        prop_assert!(out.batch_size >= 1 && out.batch_size <= batch);
        prop_assert!(out.sim_steps >= 1 && out.sim_steps <= sim);
        prop_assert_eq!(out.learning_rate, cfg.learning_rate);
    }

    #[test]
    fn clamped_actions_stay_in_the_box(a in prop::collection::vec(-10.0f64..10.0, 4)) {
        let (d, grip) = clamp_action(&a, 0.05).unwrap();
        prop_assert!(d.iter().all(|v| v.abs() <= 0.05));
        prop_assert_eq!(grip, a[3] > 0.0);
    }

    #[test]
    fn reset_places_particles_in_the_source(seed in any::<u64>(), pour in any::<bool>()) {
        let task = if pour { TaskKind::ToyPour } else { TaskKind::ToyFill };
        let s = reset(&TaskSpec::new(task), seed);
        prop_assert_eq!(s.count_in(&s.source), s.particle_count());
        prop_assert_eq!(s.count_in(&s.beaker), 0);
    }

    #[test]
    fn downsample_draws_rows_from_the_input(
        rows in prop::collection::vec(prop::array::uniform6(-1.0f64..1.0), 1..40),
        n in 1usize..64,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let out = downsample(&rows, n, &mut rng).unwrap();
        prop_assert_eq!(out.shape(), &[n, 6]);
        for r in 0..n {
            prop_assert!(rows.iter().any(|p| p[..] == *out.row(r)));
        }
    }
}
