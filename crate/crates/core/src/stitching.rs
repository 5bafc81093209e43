//! Stitch candidate enumeration, impact filtering and insertion.
//!
//! A candidate `(source, target, k)` says: there is a path from `source`
//! made of `k` MDP edges and exactly one neighbour-graph hop ending at
//! `target`, so a `k`-action plan from `source` straight to `target` is worth
//! trying.

use std::collections::VecDeque;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::NeighborGraph;
use crate::dynamics::ForwardModel;
use crate::error::{BatsError, Result};
use crate::mdp::{Edge, TabularMdp, TabularPolicy, ValueTable};
use crate::metric::DistanceMetric;

/// Where the single neighbour hop may sit along a candidate path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopPosition {
    #[default]
    Last,
    Anywhere,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathWitness {
    /// `(state, action index)` for every MDP edge, in path order.
    pub mdp_edges: Vec<(usize, usize)>,
    /// The neighbour-graph edge `(from, to)`.
    pub hop: (usize, usize),
    /// Number of MDP edges taken before the hop.
    pub hop_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StitchCandidate {
    pub source: usize,
    pub target: usize,
    pub k: usize,
    pub witness: PathWitness,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// At the source before any edge.
    Start,
    /// At least one MDP edge taken, no hop yet.
    Walking,
    /// Hop taken from the source itself; at least one more edge is required.
    HopFirst,
    Hopped,
}

const N_PHASES: usize = 4;

#[derive(Clone, Copy)]
enum Step {
    Edge(usize, usize),
    Hop(usize, usize),
}

/// All candidates from `from_state` using at most `max_k` MDP edges.
///
/// Targets are non-imagined states; each target appears once with its
/// minimum `k`, sorted by target index. Terminal sources yield nothing.
pub fn find_feasible(
    mdp: &TabularMdp,
    neighbors: &NeighborGraph,
    from_state: usize,
    max_k: usize,
    hop: HopPosition,
) -> Vec<StitchCandidate> {
    if from_state >= mdp.n_states() || mdp.terminal[from_state] || max_k == 0 {
        return Vec::new();
    }
    let n = mdp.n_states();
    let slot = |v: usize, p: Phase| v * N_PHASES + p as usize;
    let mut dist = vec![usize::MAX; N_PHASES * n];
    let mut parent: Vec<Option<(usize, Step)>> = vec![None; N_PHASES * n];
    let mut done = vec![false; N_PHASES * n];
    let mut deque = VecDeque::new();
    dist[slot(from_state, Phase::Start)] = 0;
    deque.push_back((from_state, Phase::Start));
    // 0-1 BFS over (state, phase): hops cost nothing, MDP edges cost one.
    while let Some((u, phase)) = deque.pop_front() {
        let su = slot(u, phase);
        if done[su] {
            continue;
        }
        done[su] = true;
        let d = dist[su];
        let hop_to = match (phase, hop) {
            (Phase::Start, HopPosition::Anywhere) => Some(Phase::HopFirst),
            (Phase::Walking, _) => Some(Phase::Hopped),
            _ => None,
        };
        if let Some(np) = hop_to {
            for &t in neighbors.neighbors(u) {
                let st = slot(t, np);
                if d < dist[st] {
                    dist[st] = d;
                    parent[st] = Some((su, Step::Hop(u, t)));
                    deque.push_front((t, np));
                }
            }
        }
        if d >= max_k {
            continue;
        }
        let np = match (phase, hop) {
            (Phase::Start | Phase::Walking, _) => Phase::Walking,
            (Phase::HopFirst | Phase::Hopped, HopPosition::Anywhere) => Phase::Hopped,
            (Phase::HopFirst | Phase::Hopped, HopPosition::Last) => continue,
        };
        for (a, e) in mdp.actions[u].iter().enumerate() {
            let sv = slot(e.next, np);
            if d + 1 < dist[sv] {
                dist[sv] = d + 1;
                parent[sv] = Some((su, Step::Edge(u, a)));
                deque.push_back((e.next, np));
            }
        }
    }
    let mut out = Vec::new();
    for t in 0..n {
        let st = slot(t, Phase::Hopped);
        let k = dist[st];
        if k == usize::MAX || k == 0 || k > max_k || mdp.imagined[t] {
            continue;
        }
        let mut steps = Vec::new();
        let mut cur = st;
        while let Some((prev, step)) = parent[cur] {
            steps.push(step);
            cur = prev;
        }
        steps.reverse();
        let mut mdp_edges = Vec::new();
        let mut hop_edge = (from_state, from_state);
        let mut hop_index = 0;
        for step in steps {
            match step {
                Step::Edge(u, a) => mdp_edges.push((u, a)),
                Step::Hop(u, v) => {
                    hop_edge = (u, v);
                    hop_index = mdp_edges.len();
                }
            }
        }
        out.push(StitchCandidate {
            source: from_state,
            target: t,
            k,
            witness: PathWitness {
                mdp_edges,
                hop: hop_edge,
                hop_index,
            },
        });
    }
    out
}

/// A candidate that passed the impact filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactfulCandidate {
    pub candidate: StitchCandidate,
    /// `V(target) - V(state the policy reaches in k steps)`.
    pub advantage: f64,
}

/// State reached by following the policy's most likely action `k` times.
pub fn policy_state_after(mdp: &TabularMdp, policy: &TabularPolicy, from: usize, k: usize) -> usize {
    let mut s = from;
    for _ in 0..k {
        s = mdp.actions[s][policy.mode_action(s)].next;
    }
    s
}

/// Keep candidates whose target is strictly more valuable than where the
/// current policy would be after the same number of steps.
pub fn filter_impactful(
    candidates: Vec<StitchCandidate>,
    values: &ValueTable,
    policy: &TabularPolicy,
    mdp: &TabularMdp,
) -> Vec<ImpactfulCandidate> {
    candidates
        .into_iter()
        .filter_map(|c| {
            let reached = policy_state_after(mdp, policy, c.source, c.k);
            let advantage = values.values[c.target] - values.values[reached];
            (values.values[c.target] > values.values[reached]).then_some(ImpactfulCandidate { candidate: c, advantage })
        })
        .collect()
}

/// How the planning distance becomes an edge penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// `c * d` on every edge of the stitch.
    #[default]
    AllEdges,
    /// `discount * c * d` on the final edge only.
    FinalGamma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchRecord {
    pub candidate: StitchCandidate,
    pub actions: Vec<Vec<f64>>,
    /// Member-averaged predicted states after each action; the last one is the
    /// predicted end point, the others become imagined MDP states.
    pub predicted_states: Vec<Vec<f64>>,
    pub achieved_distance: f64,
    pub accepted: bool,
    pub iteration_added: usize,
}

impl StitchRecord {
    pub fn intermediate_states(&self) -> &[Vec<f64>] {
        &self.predicted_states[..self.predicted_states.len().saturating_sub(1)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApplyOutcome {
    /// False when an identical stitch was already present.
    pub inserted: bool,
    pub new_states: Vec<usize>,
    pub penalty: f64,
    pub distance: f64,
}

pub fn penalty_for(mode: PenaltyMode, coefficient: f64, discount: f64, distance: f64, edge: usize, k: usize) -> f64 {
    match mode {
        PenaltyMode::AllEdges => coefficient * distance,
        PenaltyMode::FinalGamma if edge + 1 == k => discount * coefficient * distance,
        PenaltyMode::FinalGamma => 0.0,
    }
}

fn chain_exists(mdp: &TabularMdp, record: &StitchRecord) -> bool {
    let k = record.actions.len();
    let mut s = record.candidate.source;
    for (i, a) in record.actions.iter().enumerate() {
        let last = i + 1 == k;
        let hit = mdp.actions[s].iter().find(|e| {
            e.is_stitch && &e.action == a && if last { e.next == record.candidate.target } else { mdp.imagined[e.next] }
        });
        match hit {
            Some(e) => s = e.next,
            None => return false,
        }
    }
    true
}

/// Insert an accepted stitch: `k - 1` imagined states chained by `k` edges
/// from the source to the target, rewards from the model's reward head.
pub fn apply_stitch<M: ForwardModel + ?Sized>(
    mdp: &mut TabularMdp,
    record: &StitchRecord,
    model: &M,
    penalty_coefficient: f64,
    mode: PenaltyMode,
    metric: &DistanceMetric,
) -> Result<ApplyOutcome> {
    if !record.accepted {
        return Err(BatsError::Contract(format!(
            "stitch {} -> {} was not accepted by the planner",
            record.candidate.source, record.candidate.target
        )));
    }
    let k = record.actions.len();
    if k == 0 || record.predicted_states.len() != k {
        return Err(BatsError::Contract("stitch record needs one predicted state per action".into()));
    }
    let (source, target) = (record.candidate.source, record.candidate.target);
    if source >= mdp.n_states() || target >= mdp.n_states() {
        return Err(BatsError::Contract("stitch endpoints out of range".into()));
    }
    if mdp.imagined[target] {
        return Err(BatsError::Contract(format!("stitch target {target} is an imagined state")));
    }
    if mdp.terminal[source] {
        return Err(BatsError::Contract(format!("stitch source {source} is terminal")));
    }
    if !(penalty_coefficient >= 0.0) {
        return Err(BatsError::Input("penalty coefficient must be non-negative".into()));
    }
    let distance = metric.distance(&record.predicted_states[k - 1], &mdp.states[target]);
    if chain_exists(mdp, record) {
        return Ok(ApplyOutcome {
            inserted: false,
            new_states: Vec::new(),
            penalty: penalty_coefficient * distance,
            distance,
        });
    }
    let mut from_rows = Vec::with_capacity(k);
    from_rows.push(mdp.states[source].clone());
    from_rows.extend(record.intermediate_states().iter().cloned());
    let sd = mdp.state_dim;
    let ad = mdp.action_dim;
    let states = Array2::from_shape_fn((k, sd), |(i, j)| from_rows[i][j]);
    let actions = Array2::from_shape_fn((k, ad), |(i, j)| record.actions[i][j]);
    let rewards = model.reward_batch(&states, &actions);
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(BatsError::training("reward head", "non-finite predicted stitch reward"));
    }

    let mut new_states = Vec::with_capacity(k - 1);
    for s in record.intermediate_states() {
        new_states.push(mdp.add_state(s.clone(), false, true));
    }
    let mut from = source;
    for i in 0..k {
        let next = if i + 1 == k { target } else { new_states[i] };
        let penalty = penalty_for(mode, penalty_coefficient, mdp.discount, distance, i, k);
        mdp.add_edge(
            from,
            Edge {
                action: record.actions[i].clone(),
                next,
                reward: rewards[i],
                is_stitch: true,
                penalty,
                distance,
            },
        )?;
        from = next;
    }
    Ok(ApplyOutcome {
        inserted: true,
        new_states,
        penalty: penalty_coefficient * distance,
        distance,
    })
}

/// One line of the stitch audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchLogEntry {
    pub iteration: usize,
    pub source: usize,
    pub target: usize,
    pub k: usize,
    pub advantage: f64,
    pub distance: f64,
    pub accepted: bool,
}

pub fn write_stitch_log<W: Write>(w: &mut W, entries: &[StitchLogEntry]) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut *w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_stitch_log(text: &str) -> Result<Vec<StitchLogEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
