//! Deterministic environments and their dataset generators.

pub mod mountain_car;
pub mod point_maze;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use mountain_car::MountainCarEnv;
pub use point_maze::{MazeLayout, PointMaze};

use crate::dataset::{Trajectory, TrajectoryDataset, Transition};
use crate::error::Result;
use crate::seeding::{rng_from, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

/// Pure, deterministic environment dynamics.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_bounds(&self) -> Vec<[f64; 2]>;
    /// Episode length cap.
    fn max_steps(&self) -> usize;
    fn reset(&self, rng: &mut SeededRng) -> Vec<f64>;
    /// Actions outside the bounds are clamped.
    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Env {
    MountainCar(MountainCarEnv),
    PointMaze(PointMaze),
}

impl Env {
    fn inner(&self) -> &dyn Environment {
        match self {
            Env::MountainCar(e) => e,
            Env::PointMaze(e) => e,
        }
    }
}

impl Environment for Env {
    fn state_dim(&self) -> usize {
        self.inner().state_dim()
    }

    fn action_dim(&self) -> usize {
        self.inner().action_dim()
    }

    fn action_bounds(&self) -> Vec<[f64; 2]> {
        self.inner().action_bounds()
    }

    fn max_steps(&self) -> usize {
        self.inner().max_steps()
    }

    fn reset(&self, rng: &mut SeededRng) -> Vec<f64> {
        self.inner().reset(rng)
    }

    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        self.inner().step(state, action)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateSpec {
    /// Uniform-random-action episodes.
    pub n_random: usize,
    /// Scripted episodes: the energy-pumping controller for mountain car,
    /// the PD wanderer for the maze.
    pub n_expert: usize,
    pub seed: u64,
    /// Episode length; defaults to the environment's cap.
    pub episode_len: Option<usize>,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        GenerateSpec {
            n_random: 100,
            n_expert: 5,
            seed: 0,
            episode_len: None,
        }
    }
}

fn to_trajectory(steps: Vec<(Vec<f64>, Vec<f64>, StepOutcome)>) -> Trajectory {
    Trajectory {
        transitions: steps
            .into_iter()
            .map(|(s, a, o)| Transition {
                state: s,
                action: a,
                reward: o.reward,
                next_state: o.next_state,
                terminal: o.terminal,
            })
            .collect(),
    }
}

/// Roll `policy` from `start` until a terminal state or `steps` steps.
pub fn rollout<E, P>(env: &E, start: Vec<f64>, steps: usize, mut policy: P) -> Vec<(Vec<f64>, Vec<f64>, StepOutcome)>
where
    E: Environment + ?Sized,
    P: FnMut(&[f64]) -> Vec<f64>,
{
    let mut s = start;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = policy(&s);
        let o = env.step(&s, &a);
        let next = o.next_state.clone();
        let done = o.terminal;
        out.push((s, a, o));
        if done {
            break;
        }
        s = next;
    }
    out
}

fn random_episode(env: &Env, len: usize, rng: &mut SeededRng) -> Vec<(Vec<f64>, Vec<f64>, StepOutcome)> {
    let bounds = env.action_bounds();
    let start = match env {
        Env::PointMaze(m) => m.wander_start(rng),
        _ => env.reset(rng),
    };
    let mut action_rng = rng.clone();
    rollout(env, start, len, |_| {
        bounds.iter().map(|[lo, hi]| action_rng.random_range(*lo..=*hi)).collect()
    })
}

/// Scripted plus random trajectories, seed-deterministic.
pub fn generate_dataset(env: &Env, spec: &GenerateSpec) -> Result<TrajectoryDataset> {
    let len = spec.episode_len.unwrap_or_else(|| env.max_steps());
    let mut trajectories = Vec::with_capacity(spec.n_expert + spec.n_random);
    for i in 0..spec.n_expert {
        let mut rng = rng_from(spec.seed, &[1, i as u64]);
        let steps = match env {
            Env::MountainCar(mc) => {
                let start = mc.reset(&mut rng);
                rollout(mc, start, len, |s| mc.expert_action(s))
            }
            Env::PointMaze(m) => {
                let start = m.wander_start(&mut rng);
                m.wander(start, len, &mut rng)
            }
        };
        trajectories.push(to_trajectory(steps));
    }
    for i in 0..spec.n_random {
        let mut rng = rng_from(spec.seed, &[2, i as u64]);
        trajectories.push(to_trajectory(random_episode(env, len, &mut rng)));
    }
    TrajectoryDataset::new(env.state_dim(), env.action_dim(), trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_solves_every_episode() {
        let env = Env::MountainCar(MountainCarEnv::default());
        let d = generate_dataset(
            &env,
            &GenerateSpec {
                n_random: 0,
                n_expert: 5,
                seed: 3,
                episode_len: None,
            },
        )
        .unwrap();
        assert_eq!(d.trajectories.len(), 5);
        for t in &d.trajectories {
            assert!(t.transitions.last().unwrap().terminal);
            let ret: f64 = t.transitions.iter().map(|r| r.reward).sum();
            assert!(ret > 90.0, "expert return {ret}");
        }
    }

    #[test]
    fn random_episodes_run_to_the_cap() {
        let env = Env::MountainCar(MountainCarEnv::default());
        let d = generate_dataset(
            &env,
            &GenerateSpec {
                n_random: 100,
                n_expert: 0,
                seed: 9,
                episode_len: None,
            },
        )
        .unwrap();
        assert_eq!(d.trajectories.len(), 100);
        let capped = d.trajectories.iter().filter(|t| t.transitions.len() == 250).count();
        assert!(capped >= 95, "{capped} of 100 random episodes ran to the cap");
    }

    #[test]
    fn replay_is_bit_exact() {
        for env in [Env::MountainCar(MountainCarEnv::default()), Env::PointMaze(PointMaze::default())] {
            let d = generate_dataset(
                &env,
                &GenerateSpec {
                    n_random: 3,
                    n_expert: 3,
                    seed: 1,
                    episode_len: Some(120),
                },
            )
            .unwrap();
            for t in &d.trajectories {
                let mut s = t.transitions[0].state.clone();
                for r in &t.transitions {
                    assert_eq!(s, r.state);
                    let o = env.step(&s, &r.action);
                    assert_eq!(o.next_state, r.next_state);
                    assert_eq!(o.reward.to_bits(), r.reward.to_bits());
                    s = o.next_state;
                }
            }
        }
    }
}
