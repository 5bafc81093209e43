//! Finite deterministic MDPs with per-state action sets.
//!
//! States carry their continuous vectors so that policies over the finite MDP
//! can be rolled out, harvested and cloned back into the continuous space.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BatsError, Result};
use crate::persist;
use crate::seeding::rng_from;

pub const MDP_FORMAT: &str = "bats-mdp";
pub const MDP_VERSION: u32 = 1;

/// Default sup-norm tolerance for value iteration, in reward units.
pub const DEFAULT_VI_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub action: Vec<f64>,
    pub next: usize,
    pub reward: f64,
    pub is_stitch: bool,
    /// Non-negative; zero for logged edges.
    pub penalty: f64,
    /// Planning distance the penalty was computed from (stitched edges only).
    #[serde(default)]
    pub distance: f64,
}

impl Edge {
    pub fn logged(action: Vec<f64>, next: usize, reward: f64) -> Self {
        Edge {
            action,
            next,
            reward,
            is_stitch: false,
            penalty: 0.0,
            distance: 0.0,
        }
    }

    pub fn effective_reward(&self, sense: RewardSense) -> f64 {
        match sense {
            RewardSense::Pessimistic => self.reward - self.penalty,
            RewardSense::Optimistic => self.reward + self.penalty,
            RewardSense::Raw => self.reward,
        }
    }
}

/// How stitch penalties enter the reward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSense {
    /// `reward - penalty`; the semantics of every value-iteration call in the loop.
    Pessimistic,
    /// `reward + penalty`.
    Optimistic,
    /// Penalties ignored.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<Edge>>,
    pub discount: f64,
    pub start_states: Vec<usize>,
    pub terminal: Vec<bool>,
    /// States inserted by stitching; never valid stitch targets.
    pub imagined: Vec<bool>,
}

impl TabularMdp {
    pub fn new(state_dim: usize, action_dim: usize, discount: f64) -> Result<Self> {
        if !(discount > 0.0 && discount < 1.0) {
            return Err(BatsError::Input(format!("discount {discount} outside (0, 1)")));
        }
        Ok(TabularMdp {
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            discount,
            start_states: Vec::new(),
            terminal: Vec::new(),
            imagined: Vec::new(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_edges(&self) -> usize {
        self.actions.iter().map(Vec::len).sum()
    }

    pub fn n_stitch_edges(&self) -> usize {
        self.actions.iter().flatten().filter(|e| e.is_stitch).count()
    }

    /// Append a state. Terminal states receive their absorbing self-loop immediately.
    pub fn add_state(&mut self, state: Vec<f64>, terminal: bool, imagined: bool) -> usize {
        let idx = self.states.len();
        self.states.push(state);
        self.terminal.push(terminal);
        self.imagined.push(imagined);
        self.actions.push(Vec::new());
        if terminal {
            self.actions[idx].push(Edge::logged(vec![0.0; self.action_dim], idx, 0.0));
        }
        idx
    }

    /// Turn `state` into an absorbing terminal, discarding its actions.
    pub fn make_terminal(&mut self, state: usize) {
        self.terminal[state] = true;
        self.actions[state] = vec![Edge::logged(vec![0.0; self.action_dim], state, 0.0)];
    }

    pub fn add_edge(&mut self, from: usize, edge: Edge) -> Result<()> {
        if from >= self.n_states() || edge.next >= self.n_states() {
            return Err(BatsError::Structural(format!(
                "edge {from} -> {} references a missing state",
                edge.next
            )));
        }
        if self.terminal[from] {
            return Err(BatsError::Structural(format!("cannot add an action to terminal state {from}")));
        }
        self.actions[from].push(edge);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(BatsError::Structural(format!("discount {} outside (0, 1)", self.discount)));
        }
        if self.actions.len() != n || self.terminal.len() != n || self.imagined.len() != n {
            return Err(BatsError::Structural("per-state tables have inconsistent lengths".into()));
        }
        for (s, state) in self.states.iter().enumerate() {
            if state.len() != self.state_dim {
                return Err(BatsError::Structural(format!("state {s} has dimension {}", state.len())));
            }
        }
        for &s in &self.start_states {
            if s >= n {
                return Err(BatsError::Structural(format!("start state {s} out of range")));
            }
        }
        for (s, edges) in self.actions.iter().enumerate() {
            for (a, e) in edges.iter().enumerate() {
                if e.next >= n {
                    return Err(BatsError::Structural(format!("edge ({s}, {a}) points at missing state {}", e.next)));
                }
                if e.action.len() != self.action_dim {
                    return Err(BatsError::Structural(format!("edge ({s}, {a}) has action dimension {}", e.action.len())));
                }
                if !e.reward.is_finite() || !e.penalty.is_finite() {
                    return Err(BatsError::Input(format!("edge ({s}, {a}) has a non-finite reward")));
                }
                if e.penalty < 0.0 || (!e.is_stitch && e.penalty != 0.0) {
                    return Err(BatsError::Structural(format!("edge ({s}, {a}) has invalid penalty {}", e.penalty)));
                }
            }
            if self.terminal[s] {
                let ok = edges.len() == 1 && edges[0].next == s && edges[0].reward == 0.0 && edges[0].penalty == 0.0;
                if !ok {
                    return Err(BatsError::Structural(format!("terminal state {s} is not a zero-reward self-loop")));
                }
            } else if edges.is_empty() {
                return Err(BatsError::Structural(format!("non-terminal state {s} has no actions")));
            }
        }
        Ok(())
    }

    /// Mean of `values` over the start states (0 when there are none).
    pub fn mean_over_starts(&self, values: &[f64]) -> f64 {
        if self.start_states.is_empty() {
            return 0.0;
        }
        self.start_states.iter().map(|&s| values[s]).sum::<f64>() / self.start_states.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        persist::to_versioned_string(MDP_FORMAT, MDP_VERSION, self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: TabularMdp = persist::from_versioned_str(MDP_FORMAT, MDP_VERSION, text)?;
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    pub values: Vec<f64>,
    pub q_values: Vec<Vec<f64>>,
    pub iterations_run: usize,
    /// Sup-norm change of the final sweep.
    pub residual: f64,
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

fn check_solvable(mdp: &TabularMdp) -> Result<()> {
    for (s, edges) in mdp.actions.iter().enumerate() {
        if edges.is_empty() && !mdp.terminal[s] {
            return Err(BatsError::Structural(format!("non-terminal state {s} has no actions")));
        }
        for e in edges {
            if e.next >= mdp.n_states() {
                return Err(BatsError::Structural(format!("state {s} has an edge to missing state {}", e.next)));
            }
            if !e.reward.is_finite() || !e.penalty.is_finite() {
                return Err(BatsError::Input(format!("state {s} has a non-finite reward")));
            }
        }
    }
    Ok(())
}

/// Synchronous value iteration under pessimistic (`reward - penalty`) rewards.
pub fn value_iteration(mdp: &TabularMdp, tolerance: f64, max_iters: usize) -> Result<ValueTable> {
    value_iteration_with(mdp, RewardSense::Pessimistic, tolerance, max_iters)
}

pub fn value_iteration_with(
    mdp: &TabularMdp,
    sense: RewardSense,
    tolerance: f64,
    max_iters: usize,
) -> Result<ValueTable> {
    if !(tolerance > 0.0) {
        return Err(BatsError::Input(format!("tolerance {tolerance} must be positive")));
    }
    check_solvable(mdp)?;
    let gamma = mdp.discount;
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut next_v = vec![0.0; n];
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters {
        residual = 0.0;
        for s in 0..n {
            let best = mdp.actions[s]
                .iter()
                .map(|e| e.effective_reward(sense) + gamma * v[e.next])
                .fold(f64::NEG_INFINITY, f64::max);
            let best = if best.is_finite() { best } else { 0.0 };
            residual = f64::max(residual, (best - v[s]).abs());
            next_v[s] = best;
        }
        std::mem::swap(&mut v, &mut next_v);
        iterations += 1;
        history.push(residual);
        if residual <= tolerance {
            break;
        }
    }
    let q_values: Vec<Vec<f64>> = mdp
        .actions
        .iter()
        .map(|edges| edges.iter().map(|e| e.effective_reward(sense) + gamma * v[e.next]).collect())
        .collect();
    let values = q_values
        .iter()
        .map(|q| q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .map(|x| if x.is_finite() { x } else { 0.0 })
        .collect();
    Ok(ValueTable {
        values,
        q_values,
        iterations_run: iterations,
        residual,
        converged: residual <= tolerance,
        residual_history: history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TabularPolicy {
    /// One action index per state.
    Greedy { choice: Vec<usize> },
    /// One categorical distribution over the state's action list per state.
    Boltzmann { temperature: f64, probabilities: Vec<Vec<f64>> },
}

impl TabularPolicy {
    pub fn n_states(&self) -> usize {
        match self {
            TabularPolicy::Greedy { choice } => choice.len(),
            TabularPolicy::Boltzmann { probabilities, .. } => probabilities.len(),
        }
    }

    /// The single most likely action (lowest index on ties).
    pub fn mode_action(&self, state: usize) -> usize {
        match self {
            TabularPolicy::Greedy { choice } => choice[state],
            TabularPolicy::Boltzmann { probabilities, .. } => argmax_lowest(&probabilities[state]),
        }
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        match self {
            TabularPolicy::Greedy { choice } => choice[state],
            TabularPolicy::Boltzmann { probabilities, .. } => {
                let p = &probabilities[state];
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return i;
                    }
                }
                p.len() - 1
            }
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, TabularPolicy::Greedy { .. })
    }
}

pub(crate) fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-state argmax of the Q table; ties go to the lowest action index.
pub fn greedy_policy(values: &ValueTable, mdp: &TabularMdp) -> TabularPolicy {
    debug_assert_eq!(values.q_values.len(), mdp.n_states());
    TabularPolicy::Greedy {
        choice: values.q_values.iter().map(|q| argmax_lowest(q)).collect(),
    }
}

/// `P(a|s) ∝ exp(Q(s,a) / temperature)`.
pub fn boltzmann_policy(values: &ValueTable, mdp: &TabularMdp, temperature: f64) -> Result<TabularPolicy> {
    if !(temperature > 0.0) {
        return Err(BatsError::Input(format!("temperature {temperature} must be positive")));
    }
    debug_assert_eq!(values.q_values.len(), mdp.n_states());
    let probabilities = values
        .q_values
        .iter()
        .map(|q| {
            let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = q.iter().map(|&x| ((x - m) / temperature).exp()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
        .collect();
    Ok(TabularPolicy::Boltzmann {
        temperature,
        probabilities,
    })
}

/// Draw `n_samples` states from the discounted occupancy of `policy`.
///
/// Each rollout starts uniformly on `start_states`, records every visited
/// state and stops after each step with probability `1 - discount` (or at
/// `horizon`).
pub fn sample_occupancy(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    n_samples: usize,
    horizon: usize,
    rng_seed: u64,
) -> Result<Vec<usize>> {
    if mdp.start_states.is_empty() {
        return Err(BatsError::Input("MDP has no start states".into()));
    }
    if horizon == 0 {
        return Err(BatsError::Input("occupancy horizon must be at least 1".into()));
    }
    if policy.n_states() != mdp.n_states() {
        return Err(BatsError::Input("policy does not cover every MDP state".into()));
    }
    let mut rng = rng_from(rng_seed, &[]);
    let mut out = Vec::with_capacity(n_samples);
    while out.len() < n_samples {
        let mut s = mdp.start_states[rng.random_range(0..mdp.start_states.len())];
        for _ in 0..horizon {
            out.push(s);
            if out.len() == n_samples {
                break;
            }
            if rng.random::<f64>() >= mdp.discount {
                break;
            }
            let a = policy.sample_action(s, &mut rng);
            s = mdp.actions[s][a].next;
        }
    }
    Ok(out)
}

/// Iterative evaluation of a fixed (possibly stochastic) policy.
pub fn evaluate_policy_values(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    sense: RewardSense,
    tolerance: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    check_solvable(mdp)?;
    if policy.n_states() != mdp.n_states() {
        return Err(BatsError::Input("policy does not cover every MDP state".into()));
    }
    let gamma = mdp.discount;
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut next_v = vec![0.0; n];
    for _ in 0..max_iters {
        let mut residual: f64 = 0.0;
        for s in 0..n {
            let edges = &mdp.actions[s];
            let x = match policy {
                TabularPolicy::Greedy { choice } => {
                    let e = &edges[choice[s]];
                    e.effective_reward(sense) + gamma * v[e.next]
                }
                TabularPolicy::Boltzmann { probabilities, .. } => edges
                    .iter()
                    .zip(&probabilities[s])
                    .map(|(e, p)| p * (e.effective_reward(sense) + gamma * v[e.next]))
                    .sum(),
            };
            residual = residual.max((x - v[s]).abs());
            next_v[s] = x;
        }
        std::mem::swap(&mut v, &mut next_v);
        if residual <= tolerance {
            break;
        }
    }
    Ok(v)
}
