//! Continuous mountain car.
//!
//! Velocity update `v += a * power - gravity * cos(3p)`, clipped speed,
//! position clipped to the track with an inelastic left wall. Reaching the
//! goal pays `goal_reward`; every step costs `action_cost * a^2`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, StepOutcome};
use crate::seeding::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MountainCarEnv {
    pub min_position: f64,
    pub max_position: f64,
    pub max_speed: f64,
    pub goal_position: f64,
    pub power: f64,
    pub gravity: f64,
    pub goal_reward: f64,
    pub action_cost: f64,
    pub max_steps: usize,
    /// Reset positions are uniform in this interval, at rest.
    pub reset_low: f64,
    pub reset_high: f64,
    /// Push magnitude of the scripted controller.
    pub expert_force: f64,
}

impl Default for MountainCarEnv {
    fn default() -> Self {
        MountainCarEnv {
            min_position: -1.2,
            max_position: 0.6,
            max_speed: 0.07,
            goal_position: 0.45,
            power: 0.0015,
            gravity: 0.0025,
            goal_reward: 100.0,
            action_cost: 0.1,
            max_steps: 250,
            reset_low: -0.6,
            reset_high: -0.4,
            expert_force: 0.6,
        }
    }
}

impl MountainCarEnv {
    /// Energy pumping: push in the direction of motion.
    pub fn expert_action(&self, state: &[f64]) -> Vec<f64> {
        let v = state[1];
        vec![if v >= 0.0 { self.expert_force } else { -self.expert_force }]
    }

    /// Kinetic plus potential energy in the track's own units.
    pub fn mechanical_energy(&self, state: &[f64]) -> f64 {
        0.5 * state[1] * state[1] + self.gravity * (3.0 * state[0]).sin() / 3.0
    }
}

impl Environment for MountainCarEnv {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> Vec<[f64; 2]> {
        vec![[-1.0, 1.0]]
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&self, rng: &mut SeededRng) -> Vec<f64> {
        vec![rng.random_range(self.reset_low..=self.reset_high), 0.0]
    }

    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        let force = action[0].clamp(-1.0, 1.0);
        let (mut p, mut v) = (state[0], state[1]);
        v += force * self.power - self.gravity * (3.0 * p).cos();
        v = v.clamp(-self.max_speed, self.max_speed);
        p += v;
        p = p.clamp(self.min_position, self.max_position);
        if p <= self.min_position && v < 0.0 {
            v = 0.0;
        }
        let terminal = p >= self.goal_position && v >= 0.0;
        let reward = if terminal { self.goal_reward } else { 0.0 } - self.action_cost * force * force;
        StepOutcome {
            next_state: vec![p, v],
            reward,
            terminal,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valley_floor_is_a_fixed_point() {
        let env = MountainCarEnv::default();
        // cos(3p) = 0 at the bottom of the valley.
        let p = -std::f64::consts::PI / 6.0;
        let mut s = vec![p, 0.0];
        for _ in 0..100 {
            s = env.step(&s, &[0.0]).next_state;
        }
        assert!((s[0] - p).abs() < 1e-9 && s[1].abs() < 1e-9);
    }

    #[test]
    fn unforced_energy_drift_is_bounded() {
        // Semi-implicit Euler is not exactly energy-monotone step by step;
        // the total gain stays bounded by one speed quantum times gravity.
        let env = MountainCarEnv::default();
        for start in [-1.0, -0.8, -0.5, -0.3, 0.0, 0.3] {
            let mut s = vec![start, 0.0];
            let e0 = env.mechanical_energy(&s);
            for _ in 0..500 {
                s = env.step(&s, &[0.0]).next_state;
                assert!(env.mechanical_energy(&s) - e0 <= env.max_speed * env.gravity);
            }
        }
    }

    #[test]
    fn action_is_clamped() {
        let env = MountainCarEnv::default();
        let a = env.step(&[-0.5, 0.0], &[5.0]);
        let b = env.step(&[-0.5, 0.0], &[1.0]);
        assert_eq!(a, b);
    }
}
