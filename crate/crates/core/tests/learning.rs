//! Learned components on problems with known answers.

use ndarray::Array2;
use rand::Rng;

use bats_core::dataset::{Trajectory, TrajectoryDataset, Transition};
use bats_core::dynamics::{train_ensemble, DynamicsConfig, ForwardModel};
use bats_core::nn::OptimizerConfig;
use bats_core::policy_cloning::{action_rmse, behavior_clone, BcConfig};
use bats_core::seeding::rng_from;

mod support;
use support::oracles::chain_embedding_spearman;

const A: [[f64; 2]; 2] = [[0.95, 0.1], [-0.1, 0.95]];
const B: [f64; 2] = [0.2, 0.1];

fn linear_step(s: &[f64], a: f64) -> Vec<f64> {
    (0..2).map(|i| A[i][0] * s[0] + A[i][1] * s[1] + B[i] * a).collect()
}

fn linear_dataset(seed: u64, n_traj: usize, len: usize) -> TrajectoryDataset {
    let mut rng = rng_from(seed, &[]);
    let trajectories = (0..n_traj)
        .map(|_| {
            let mut s: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let transitions = (0..len)
                .map(|_| {
                    let a: f64 = rng.random_range(-1.0..1.0);
                    let next = linear_step(&s, a);
                    let t = Transition {
                        state: s.clone(),
                        action: vec![a],
                        reward: 0.5,
                        next_state: next.clone(),
                        terminal: false,
                    };
                    s = next;
                    t
                })
                .collect();
            Trajectory { transitions }
        })
        .collect();
    TrajectoryDataset::new(2, 1, trajectories).unwrap()
}

#[test]
fn ensemble_learns_a_linear_system() {
    let data = linear_dataset(1, 40, 50);
    let cfg = DynamicsConfig {
        hidden: vec![32, 32],
        reward_hidden: vec![16],
        n_trained: 3,
        n_kept: 2,
        max_epochs: 200,
        batch_size: 64,
        optimizer: OptimizerConfig::Adam { learning_rate: 1e-3 },
        ..DynamicsConfig::default()
    };
    let model = train_ensemble(&data, &cfg, 7).unwrap();
    assert_eq!(model.n_members(), 2);
    let test = linear_dataset(2, 5, 20);
    let (mut se, mut n) = (0.0, 0);
    let mut rewards = Vec::new();
    for r in test.records() {
        let p = model.predict(&r.state, &r.action).unwrap();
        se += p.mean.iter().zip(&r.next_state).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        n += 2;
        let s = Array2::from_shape_vec((1, 2), r.state.clone()).unwrap();
        let a = Array2::from_shape_vec((1, 1), r.action.clone()).unwrap();
        rewards.push(model.reward_batch(&s, &a)[0]);
    }
    let rmse = (se / n as f64).sqrt();
    assert!(rmse < 1e-2, "next-state rmse {rmse}");
    for r in rewards {
        assert!((r - 0.5).abs() < 1e-2, "constant reward predicted as {r}");
    }
}

#[test]
fn cloning_recovers_a_linear_controller() {
    let mut rng = rng_from(3, &[]);
    let gain = |s: &[f64]| (0.5 * s[0] - 0.3 * s[1]).clamp(-1.0, 1.0);
    let sample = |rng: &mut rand_chacha::ChaCha8Rng| {
        let trajectories = (0..2000)
            .map(|_| {
                let s: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = gain(&s);
                Trajectory {
                    transitions: vec![Transition {
                        next_state: linear_step(&s, a),
                        state: s,
                        action: vec![a],
                        reward: 0.0,
                        terminal: false,
                    }],
                }
            })
            .collect();
        TrajectoryDataset::new(2, 1, trajectories).unwrap()
    };
    let train = sample(&mut rng);
    let test = sample(&mut rng);
    let cfg = BcConfig {
        hidden: vec![64, 64],
        batch_updates: 3000,
        ..BcConfig::default()
    };
    let policy = behavior_clone(&train, &[[-1.0, 1.0]], &cfg, 11).unwrap();
    let rmse = action_rmse(&policy, &test);
    assert!(rmse < 0.05 * 2.0, "held-out action rmse {rmse}");
}

#[test]
fn learned_embedding_ranks_like_the_exact_metric() {
    for seed in 5..9 {
        let rho = chain_embedding_spearman(seed);
        assert!(rho > 0.9, "reward draw {seed}: spearman {rho}");
    }
}
