//! Pessimistic / optimistic MDPs and exact on-policy bisimulation on finite
//! ground truths.
//!
//! The setting: a ground-truth finite MDP `m_true`, a dataset MDP `m0` on the
//! same state indices exposing a subset of each state's actions, and a set of
//! single-action stitches `(b, c, a)` that pretend action `a` at `b` lands on
//! `c`. Shifting each stitched reward by `-discount * eps` (resp. `+`) yields
//! MDPs whose values bracket the true value of the pessimistic policy,
//! provided every `eps` dominates the bisimulation distance between the true
//! successor and `c`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BatsError, Result};
use crate::mdp::{evaluate_policy_values, greedy_policy, value_iteration_with, Edge, RewardSense, TabularMdp, TabularPolicy};
use crate::seeding::rng_from;

/// Tolerance used for exact policy evaluation inside certification.
pub const EVAL_TOLERANCE: f64 = 1e-13;
/// Sup-norm residual at which the bisimulation fixed point is considered solved.
pub const BISIM_TOLERANCE: f64 = 1e-12;
const MAX_SWEEPS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchTuple {
    pub source: usize,
    pub target: usize,
    pub action: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StitchTupleSet {
    pub tuples: Vec<StitchTuple>,
    /// One non-negative penalty per tuple.
    pub penalties: Vec<f64>,
}

impl StitchTupleSet {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn with_penalties(&self, penalties: Vec<f64>) -> Self {
        StitchTupleSet {
            tuples: self.tuples.clone(),
            penalties,
        }
    }

    pub fn validate(&self, m0: &TabularMdp) -> Result<()> {
        if self.penalties.len() != self.tuples.len() {
            return Err(BatsError::Input("one penalty per stitch tuple is required".into()));
        }
        for (j, t) in self.tuples.iter().enumerate() {
            if t.source >= m0.n_states() || t.target >= m0.n_states() {
                return Err(BatsError::Input(format!("tuple {j} references a missing state")));
            }
            if m0.actions[t.source].iter().any(|e| e.action == t.action) {
                return Err(BatsError::Contract(format!(
                    "tuple {j}: action is already available at state {}",
                    t.source
                )));
            }
            if self.tuples[..j].iter().any(|u| u.source == t.source && u.action == t.action) {
                return Err(BatsError::Contract(format!("tuple {j} duplicates an earlier stitch")));
            }
            if !(self.penalties[j] >= 0.0) {
                return Err(BatsError::Input(format!("tuple {j} has a negative penalty")));
            }
        }
        Ok(())
    }
}

fn true_edge<'a>(m_true: &'a TabularMdp, state: usize, action: &[f64]) -> Result<&'a Edge> {
    m_true.actions[state]
        .iter()
        .find(|e| e.action == action)
        .ok_or_else(|| BatsError::Contract(format!("action {action:?} does not exist at state {state} of the true MDP")))
}

/// True rewards `r(b_j, a_j)` looked up in the ground-truth MDP.
pub fn true_rewards(m_true: &TabularMdp, set: &StitchTupleSet) -> Result<Vec<f64>> {
    set.tuples
        .iter()
        .map(|t| true_edge(m_true, t.source, &t.action).map(|e| e.reward))
        .collect()
}

/// `(M-, M+)`: `m0` plus each stitch with reward `r_j - discount * eps_j`,
/// respectively `r_j + discount * eps_j`.
pub fn build_m_minus_plus(m0: &TabularMdp, set: &StitchTupleSet, true_reward: &[f64]) -> Result<(TabularMdp, TabularMdp)> {
    set.validate(m0)?;
    if true_reward.len() != set.len() {
        return Err(BatsError::Input("one true reward per stitch tuple is required".into()));
    }
    let gamma = m0.discount;
    let mut minus = m0.clone();
    let mut plus = m0.clone();
    for ((t, eps), r) in set.tuples.iter().zip(&set.penalties).zip(true_reward) {
        let edge = |reward: f64| Edge {
            action: t.action.clone(),
            next: t.target,
            reward,
            is_stitch: true,
            penalty: 0.0,
            distance: *eps,
        };
        minus.add_edge(t.source, edge(r - gamma * eps))?;
        plus.add_edge(t.source, edge(r + gamma * eps))?;
    }
    Ok((minus, plus))
}

/// Re-express a deterministic policy of `from` on `to` by matching action vectors.
pub fn transfer_policy(from: &TabularMdp, policy: &TabularPolicy, to: &TabularMdp) -> Result<TabularPolicy> {
    let TabularPolicy::Greedy { choice } = policy else {
        return Err(BatsError::Unsupported("only deterministic policies can be transferred".into()));
    };
    if from.n_states() != to.n_states() || choice.len() != from.n_states() {
        return Err(BatsError::Input("policy transfer needs MDPs over the same states".into()));
    }
    let mapped = choice
        .iter()
        .enumerate()
        .map(|(s, &a)| {
            let action = &from.actions[s][a].action;
            to.actions[s]
                .iter()
                .position(|e| &e.action == action)
                .ok_or_else(|| BatsError::Contract(format!("state {s}: chosen action missing from target MDP")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TabularPolicy::Greedy { choice: mapped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BisimTable {
    /// Row-major `n x n` distances.
    pub distances: Vec<Vec<f64>>,
    pub residual: f64,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

impl BisimTable {
    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.distances[s][t]
    }
}

/// Fixed point of `d(s,t) = |r(s) - r(t)| + discount * d(T(s), T(t))` under a
/// deterministic policy.
pub fn exact_bisim_distance(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<BisimTable> {
    let TabularPolicy::Greedy { choice } = policy else {
        return Err(BatsError::Unsupported(
            "exact bisimulation is implemented for deterministic policies only".into(),
        ));
    };
    if choice.len() != mdp.n_states() {
        return Err(BatsError::Input("policy does not cover every MDP state".into()));
    }
    let n = mdp.n_states();
    let gamma = mdp.discount;
    let r: Vec<f64> = (0..n).map(|s| mdp.actions[s][choice[s]].reward).collect();
    let next: Vec<usize> = (0..n).map(|s| mdp.actions[s][choice[s]].next).collect();
    let mut d = vec![vec![0.0; n]; n];
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while residual >= BISIM_TOLERANCE && iterations < MAX_SWEEPS {
        let mut nd = vec![vec![0.0; n]; n];
        residual = 0.0;
        for s in 0..n {
            for t in 0..n {
                let v = (r[s] - r[t]).abs() + gamma * d[next[s]][next[t]];
                residual = residual.max((v - d[s][t]).abs());
                nd[s][t] = v;
            }
        }
        d = nd;
        iterations += 1;
        history.push(residual);
    }
    Ok(BisimTable {
        distances: d,
        residual,
        iterations,
        residual_history: history,
    })
}

fn policy_values(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    evaluate_policy_values(mdp, policy, RewardSense::Raw, EVAL_TOLERANCE, MAX_SWEEPS)
}

/// Smallest admissible penalties for the pessimistic policy of `M-`.
///
/// The policy depends on the penalties and vice versa, so the penalties are
/// raised monotonically until they dominate the distances induced by the
/// policy they produce. Returns the penalties, the policy of `M-` and the
/// per-tuple distances under that policy.
pub fn oracle_penalties(
    m_true: &TabularMdp,
    m0: &TabularMdp,
    tuples: &[StitchTuple],
) -> Result<(Vec<f64>, TabularPolicy, Vec<f64>)> {
    let rewards = true_rewards(
        m_true,
        &StitchTupleSet {
            tuples: tuples.to_vec(),
            penalties: vec![0.0; tuples.len()],
        },
    )?;
    let mut eps = vec![0.0; tuples.len()];
    for _ in 0..1000 {
        let set = StitchTupleSet {
            tuples: tuples.to_vec(),
            penalties: eps.clone(),
        };
        let (minus, _) = build_m_minus_plus(m0, &set, &rewards)?;
        let pi = pessimistic_policy(&minus)?;
        let d_min = min_penalties(m_true, &minus, &pi, tuples)?;
        if d_min.iter().zip(&eps).all(|(d, e)| d <= e) {
            return Ok((eps, pi, d_min));
        }
        for (e, d) in eps.iter_mut().zip(&d_min) {
            *e = e.max(*d);
        }
    }
    Err(BatsError::training("bounds", "penalty fixpoint did not settle"))
}

/// Optimal deterministic policy of an MDP (raw rewards, ties to the lowest index).
pub fn pessimistic_policy(minus: &TabularMdp) -> Result<TabularPolicy> {
    let vt = value_iteration_with(minus, RewardSense::Raw, EVAL_TOLERANCE, MAX_SWEEPS)?;
    Ok(greedy_policy(&vt, minus))
}

/// `d^pi(T_true(b_j, a_j), c_j)` for each tuple, with `pi` a policy of `minus`.
pub fn min_penalties(
    m_true: &TabularMdp,
    minus: &TabularMdp,
    pi_minus: &TabularPolicy,
    tuples: &[StitchTuple],
) -> Result<Vec<f64>> {
    let pi_true = transfer_policy(minus, pi_minus, m_true)?;
    let table = exact_bisim_distance(m_true, &pi_true)?;
    tuples
        .iter()
        .map(|t| true_edge(m_true, t.source, &t.action).map(|e| table.get(e.next, t.target)))
        .collect()
}

/// Explicit rollout of a deterministic policy on a pessimistic MDP, split
/// into `(base return with true rewards, sum of discount^(t+1) eps over the
/// stitch hitting times)`. The pessimistic value is `base - hits` and the
/// optimistic value of the same policy is `base + hits`.
pub fn hitting_time_expansion(mdp: &TabularMdp, policy: &TabularPolicy, from: usize, horizon: usize) -> (f64, f64) {
    let gamma = mdp.discount;
    let mut s = from;
    let mut discount = 1.0;
    let mut base = 0.0;
    let mut hits = 0.0;
    for _ in 0..horizon {
        let e = &mdp.actions[s][policy.mode_action(s)];
        if e.is_stitch {
            // Stitched reward is r -/+ discount * eps; split it back apart.
            base += discount * (e.reward + gamma * e.distance);
            hits += discount * gamma * e.distance;
        } else {
            base += discount * e.reward;
        }
        discount *= gamma;
        s = e.next;
    }
    (base, hits)
}

fn rollout_horizon(gamma: f64) -> usize {
    10 * ((1e-9f64).ln() / gamma.ln()).ceil() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub eps_min: Vec<f64>,
    pub eps_used: Vec<f64>,
    pub assumptions_satisfied: bool,
    pub lower: Vec<f64>,
    pub true_values: Vec<f64>,
    pub upper: Vec<f64>,
    /// States where the sandwich failed by more than the tolerance.
    pub violations: Vec<usize>,
    /// Smallest of `true - lower` and `upper - true` over states.
    pub min_margin: f64,
    /// Largest gap between rollout expansions and iterative values.
    pub max_expansion_error: f64,
}

impl SandwichReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check `V_{M-}^{pi-} <= V_true^{pi-} <= V_{M+}^{pi-}` on every state.
///
/// With `penalties = None` the penalties come from [`oracle_penalties`].
pub fn certify_sandwich(
    m_true: &TabularMdp,
    m0: &TabularMdp,
    tuples: &[StitchTuple],
    penalties: Option<Vec<f64>>,
    tolerance: f64,
) -> Result<SandwichReport> {
    let rewards = true_rewards(
        m_true,
        &StitchTupleSet {
            tuples: tuples.to_vec(),
            penalties: vec![0.0; tuples.len()],
        },
    )?;
    let eps_used = match penalties {
        Some(p) => p,
        None => oracle_penalties(m_true, m0, tuples)?.0,
    };
    let set = StitchTupleSet {
        tuples: tuples.to_vec(),
        penalties: eps_used.clone(),
    };
    let (minus, plus) = build_m_minus_plus(m0, &set, &rewards)?;
    let pi_minus = pessimistic_policy(&minus)?;
    let eps_min = min_penalties(m_true, &minus, &pi_minus, tuples)?;
    let assumptions_satisfied = eps_min.iter().zip(&eps_used).all(|(m, u)| m <= u);

    let lower = policy_values(&minus, &pi_minus)?;
    let upper = policy_values(&plus, &pi_minus)?;
    let true_values = policy_values(m_true, &transfer_policy(&minus, &pi_minus, m_true)?)?;

    let horizon = rollout_horizon(m0.discount);
    let mut max_expansion_error: f64 = 0.0;
    for s in 0..m0.n_states() {
        let (base, hits) = hitting_time_expansion(&minus, &pi_minus, s, horizon);
        max_expansion_error = max_expansion_error.max((base - hits - lower[s]).abs());
        max_expansion_error = max_expansion_error.max((base + hits - upper[s]).abs());
    }

    let mut violations = Vec::new();
    let mut min_margin = f64::INFINITY;
    for s in 0..m0.n_states() {
        let margin = (true_values[s] - lower[s]).min(upper[s] - true_values[s]);
        min_margin = min_margin.min(margin);
        if assumptions_satisfied && margin < -tolerance {
            violations.push(s);
        }
    }
    Ok(SandwichReport {
        eps_min,
        eps_used,
        assumptions_satisfied,
        lower,
        true_values,
        upper,
        violations,
        min_margin,
        max_expansion_error,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    /// States where the premise `V_{M+}^{pi-} < V_{M'-}^{pi'-}` held.
    pub fired: Vec<usize>,
    /// Fired states where the true values did not improve.
    pub counterexamples: Vec<usize>,
}

/// Premise margin: the premise counts as met only beyond this gap.
pub const PREMISE_MARGIN: f64 = 1e-9;

/// Wherever the optimistic value of the old policy is beaten by the
/// pessimistic value of the new one, the new one must be truly better.
pub fn certify_improvement(
    plus: &TabularMdp,
    pi_minus: &TabularPolicy,
    minus_prime: &TabularMdp,
    pi_minus_prime: &TabularPolicy,
    m_true: &TabularMdp,
) -> Result<ImprovementReport> {
    let upper_old = policy_values(plus, pi_minus)?;
    let lower_new = policy_values(minus_prime, pi_minus_prime)?;
    let true_old = policy_values(m_true, &transfer_policy(plus, pi_minus, m_true)?)?;
    let true_new = policy_values(m_true, &transfer_policy(minus_prime, pi_minus_prime, m_true)?)?;
    let mut fired = Vec::new();
    let mut counterexamples = Vec::new();
    for s in 0..m_true.n_states() {
        if upper_old[s] + PREMISE_MARGIN < lower_new[s] {
            fired.push(s);
            if !(true_old[s] < true_new[s]) {
                counterexamples.push(s);
            }
        }
    }
    Ok(ImprovementReport { fired, counterexamples })
}

/// A seeded synthetic certification problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsInstance {
    pub m_true: TabularMdp,
    pub m0: TabularMdp,
    pub tuples: Vec<StitchTuple>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub max_states: usize,
    pub max_actions: usize,
    pub max_stitches: usize,
    pub discount: f64,
    /// Chance that a stitch targets its own true successor.
    pub exact_target_prob: f64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        InstanceSpec {
            max_states: 30,
            max_actions: 3,
            max_stitches: 5,
            discount: 0.9,
            exact_target_prob: 0.2,
        }
    }
}

/// Random deterministic ground truth with a dataset view and 1..=max_stitches stitches.
pub fn random_instance(spec: &InstanceSpec, seed: u64) -> Result<BoundsInstance> {
    let mut rng = rng_from(seed, &[0xB0]);
    let m_true = random_true_mdp(spec, &mut rng)?;
    instance_from_truth(m_true, spec, &mut rng)
}

fn random_true_mdp<R: Rng>(spec: &InstanceSpec, rng: &mut R) -> Result<TabularMdp> {
    let n = rng.random_range(4..=spec.max_states.max(4));
    let mut m = TabularMdp::new(1, 1, spec.discount)?;
    for i in 0..n {
        m.add_state(vec![i as f64], false, false);
    }
    // Every state needs two actions somewhere for stitches to exist; most get 2-3.
    for s in 0..n {
        let n_actions = rng.random_range(2..=spec.max_actions.max(2));
        for a in 0..n_actions {
            let next = rng.random_range(0..n);
            let reward = rng.random_range(0.0..1.0);
            m.add_edge(s, Edge::logged(vec![a as f64], next, reward))?;
        }
    }
    m.start_states = (0..n).collect();
    Ok(m)
}

/// Derive a dataset MDP and stitches from a ground truth.
pub fn instance_from_truth<R: Rng>(m_true: TabularMdp, spec: &InstanceSpec, rng: &mut R) -> Result<BoundsInstance> {
    let n = m_true.n_states();
    let mut m0 = m_true.clone();
    let mut hidden: Vec<(usize, Edge)> = Vec::new();
    for s in 0..n {
        let keep_first = m_true.actions[s][0].clone();
        let mut kept = vec![keep_first];
        for e in &m_true.actions[s][1..] {
            if rng.random_bool(0.5) {
                kept.push(e.clone());
            } else {
                hidden.push((s, e.clone()));
            }
        }
        m0.actions[s] = kept;
    }
    if hidden.is_empty() {
        // Force at least one hidden action.
        let s = rng.random_range(0..n);
        let e = m0.actions[s].pop().expect("at least one action");
        if m0.actions[s].is_empty() {
            m0.actions[s].push(m_true.actions[s][1].clone());
            hidden.push((s, m_true.actions[s][0].clone()));
        } else {
            hidden.push((s, e));
        }
    }
    let n_stitches = rng.random_range(1..=spec.max_stitches.max(1)).min(hidden.len());
    let mut tuples = Vec::with_capacity(n_stitches);
    for _ in 0..n_stitches {
        let i = rng.random_range(0..hidden.len());
        let (b, e) = hidden.swap_remove(i);
        let target = if rng.random_bool(spec.exact_target_prob) {
            e.next
        } else {
            rng.random_range(0..n)
        };
        tuples.push(StitchTuple {
            source: b,
            target,
            action: e.action,
        });
    }
    Ok(BoundsInstance { m_true, m0, tuples })
}

/// Old stitch set = the first `split` tuples, new set = all of them, each
/// with its own oracle penalties.
pub fn improvement_trial(instance: &BoundsInstance, split: usize) -> Result<ImprovementReport> {
    let split = split.min(instance.tuples.len());
    let (m_true, m0) = (&instance.m_true, &instance.m0);
    let bracket = |tuples: &[StitchTuple]| -> Result<(TabularMdp, TabularMdp, TabularPolicy)> {
        let (eps, pi, _) = oracle_penalties(m_true, m0, tuples)?;
        let set = StitchTupleSet {
            tuples: tuples.to_vec(),
            penalties: eps,
        };
        let rewards = true_rewards(m_true, &set)?;
        let (minus, plus) = build_m_minus_plus(m0, &set, &rewards)?;
        Ok((minus, plus, pi))
    };
    let (_, plus_old, pi_old) = bracket(&instance.tuples[..split])?;
    let (minus_new, _, pi_new) = bracket(&instance.tuples)?;
    certify_improvement(&plus_old, &pi_old, &minus_new, &pi_new, m_true)
}

/// Pairs `(s, t)` with `|V(s) - V(t)| > d(s, t) + tolerance` under a
/// deterministic policy, and the largest excess seen.
pub fn lipschitz_violations(mdp: &TabularMdp, policy: &TabularPolicy, tolerance: f64) -> Result<(usize, f64)> {
    let table = exact_bisim_distance(mdp, policy)?;
    let v = policy_values(mdp, policy)?;
    let n = mdp.n_states();
    let mut count = 0;
    let mut worst = f64::NEG_INFINITY;
    for s in 0..n {
        for t in 0..n {
            let excess = (v[s] - v[t]).abs() - table.get(s, t);
            worst = worst.max(excess);
            if excess > tolerance {
                count += 1;
            }
        }
    }
    Ok((count, worst))
}

/// Aggregate of all certification checks over a batch of random instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsSummary {
    pub instances: usize,
    pub tolerance: f64,
    pub sandwich_violations: usize,
    /// Instances whose oracle penalties failed to dominate the distances.
    pub assumption_failures: usize,
    pub min_margin: f64,
    pub max_expansion_error: f64,
    pub improvement_fired: usize,
    pub improvement_counterexamples: usize,
    pub lipschitz_violations: usize,
    pub max_lipschitz_excess: f64,
}

/// Run sandwich, expansion, improvement and Lipschitz checks on
/// `n_instances` seeded random instances.
pub fn verify_random_instances(spec: &InstanceSpec, n_instances: usize, seed: u64, tolerance: f64) -> Result<BoundsSummary> {
    let mut out = BoundsSummary {
        instances: n_instances,
        tolerance,
        sandwich_violations: 0,
        assumption_failures: 0,
        min_margin: f64::INFINITY,
        max_expansion_error: 0.0,
        improvement_fired: 0,
        improvement_counterexamples: 0,
        lipschitz_violations: 0,
        max_lipschitz_excess: f64::NEG_INFINITY,
    };
    for i in 0..n_instances {
        let inst = random_instance(spec, crate::seeding::derive_seed(seed, &[i as u64]))?;
        let report = certify_sandwich(&inst.m_true, &inst.m0, &inst.tuples, None, tolerance)?;
        out.sandwich_violations += report.violations.len();
        out.assumption_failures += usize::from(!report.assumptions_satisfied);
        out.min_margin = out.min_margin.min(report.min_margin);
        out.max_expansion_error = out.max_expansion_error.max(report.max_expansion_error);

        let split = rng_from(seed, &[i as u64, 1]).random_range(0..inst.tuples.len());
        let imp = improvement_trial(&inst, split)?;
        out.improvement_fired += imp.fired.len();
        out.improvement_counterexamples += imp.counterexamples.len();

        let (_, pi, _) = oracle_penalties(&inst.m_true, &inst.m0, &inst.tuples)?;
        let set_mdp = {
            let set = StitchTupleSet {
                tuples: inst.tuples.clone(),
                penalties: vec![0.0; inst.tuples.len()],
            };
            build_m_minus_plus(&inst.m0, &set, &true_rewards(&inst.m_true, &set)?)?.0
        };
        let pi_true = transfer_policy(&set_mdp, &pi, &inst.m_true)?;
        let (count, worst) = lipschitz_violations(&inst.m_true, &pi_true, tolerance)?;
        out.lipschitz_violations += count;
        out.max_lipschitz_excess = out.max_lipschitz_excess.max(worst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_absorbing(r1: f64, r2: f64, gamma: f64) -> TabularMdp {
        let mut m = TabularMdp::new(1, 1, gamma).unwrap();
        m.add_state(vec![0.0], false, false);
        m.add_state(vec![1.0], false, false);
        m.add_edge(0, Edge::logged(vec![0.0], 0, r1)).unwrap();
        m.add_edge(1, Edge::logged(vec![0.0], 1, r2)).unwrap();
        m.start_states = vec![0, 1];
        m
    }

    #[test]
    fn absorbing_pair_distance_is_geometric() {
        let m = two_absorbing(1.0, 0.25, 0.9);
        let pi = TabularPolicy::Greedy { choice: vec![0, 0] };
        let t = exact_bisim_distance(&m, &pi).unwrap();
        assert!((t.get(0, 1) - 0.75 / 0.1).abs() < 1e-9);
        assert_eq!(t.get(0, 0), 0.0);
        // Contraction: each sweep shrinks the residual by the discount.
        for w in t.residual_history.windows(2).skip(1) {
            assert!(w[1] <= 0.9 * w[0] * (1.0 + 1e-9) + 1e-15);
        }
    }

    #[test]
    fn stochastic_policy_is_unsupported() {
        let m = two_absorbing(1.0, 0.0, 0.9);
        let pi = TabularPolicy::Boltzmann {
            temperature: 1.0,
            probabilities: vec![vec![1.0], vec![1.0]],
        };
        assert!(matches!(exact_bisim_distance(&m, &pi), Err(BatsError::Unsupported(_))));
    }

    #[test]
    fn stitched_rewards_shift_by_discounted_penalty() {
        let mut m0 = TabularMdp::new(1, 1, 0.9).unwrap();
        m0.add_state(vec![0.0], false, false);
        m0.add_state(vec![1.0], false, false);
        m0.add_edge(0, Edge::logged(vec![0.0], 0, 0.0)).unwrap();
        m0.add_edge(1, Edge::logged(vec![0.0], 1, 0.0)).unwrap();
        let set = StitchTupleSet {
            tuples: vec![StitchTuple {
                source: 0,
                target: 1,
                action: vec![1.0],
            }],
            penalties: vec![0.5],
        };
        let (minus, plus) = build_m_minus_plus(&m0, &set, &[1.0]).unwrap();
        assert!((minus.actions[0][1].reward - 0.55).abs() < 1e-12);
        assert!((plus.actions[0][1].reward - 1.45).abs() < 1e-12);

        let empty = StitchTupleSet::default();
        let (minus, plus) = build_m_minus_plus(&m0, &empty, &[]).unwrap();
        assert_eq!(minus, m0);
        assert_eq!(plus, m0);

        let clash = StitchTupleSet {
            tuples: vec![StitchTuple {
                source: 0,
                target: 1,
                action: vec![0.0],
            }],
            penalties: vec![0.0],
        };
        assert!(matches!(build_m_minus_plus(&m0, &clash, &[0.0]), Err(BatsError::Contract(_))));
    }

    #[test]
    fn exact_target_stitch_has_zero_gap() {
        let mut m_true = TabularMdp::new(1, 1, 0.8).unwrap();
        for i in 0..3 {
            m_true.add_state(vec![i as f64], false, false);
        }
        m_true.add_edge(0, Edge::logged(vec![0.0], 0, 0.1)).unwrap();
        m_true.add_edge(0, Edge::logged(vec![1.0], 1, 0.3)).unwrap();
        m_true.add_edge(1, Edge::logged(vec![0.0], 2, 1.0)).unwrap();
        m_true.add_edge(2, Edge::logged(vec![0.0], 2, 0.5)).unwrap();
        m_true.start_states = vec![0];
        let mut m0 = m_true.clone();
        m0.actions[0].truncate(1);
        let tuples = vec![StitchTuple {
            source: 0,
            target: 1,
            action: vec![1.0],
        }];
        let report = certify_sandwich(&m_true, &m0, &tuples, Some(vec![0.0]), 1e-9).unwrap();
        assert!(report.assumptions_satisfied);
        for s in 0..3 {
            assert!((report.lower[s] - report.true_values[s]).abs() < 1e-9);
            assert!((report.upper[s] - report.true_values[s]).abs() < 1e-9);
        }
    }
}
