//! The outer stitching loop: solve, sample, enumerate, plan, commit, repeat.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::NeighborGraph;
use crate::dynamics::ForwardModel;
use crate::error::{BatsError, Result};
use crate::mdp::{boltzmann_policy, greedy_policy, sample_occupancy, value_iteration, TabularMdp, DEFAULT_VI_TOLERANCE};
use crate::metric::DistanceMetric;
use crate::persist;
use crate::planner::{multi_start_test_edge, CemConfig};
use crate::seeding::derive_seed;
use crate::stitching::{
    apply_stitch, filter_impactful, find_feasible, penalty_for, HopPosition, ImpactfulCandidate, PenaltyMode,
    StitchLogEntry, StitchRecord,
};

pub const RUN_FORMAT: &str = "bats-run";
pub const RUN_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatsConfig {
    pub n_iterations: usize,
    /// Occupancy samples drawn per iteration.
    pub samples_per_iter: usize,
    /// Longest stitch, in actions.
    pub max_stitch_len: usize,
    /// Planning tolerance.
    pub delta: f64,
    pub penalty_coefficient: f64,
    pub penalty_mode: PenaltyMode,
    pub boltzmann_temperature: f64,
    pub vi_tolerance: f64,
    pub vi_max_iters: usize,
    /// Most candidates planned per iteration.
    pub stitch_budget: usize,
    pub neighbor_hop: HopPosition,
    /// Independent planner attempts per candidate.
    pub attempts: usize,
    pub occupancy_horizon: usize,
    pub cem: CemConfig,
    pub rng_seed: u64,
}

impl Default for BatsConfig {
    fn default() -> Self {
        BatsConfig {
            n_iterations: 20,
            samples_per_iter: 100,
            max_stitch_len: 1,
            delta: 0.1,
            penalty_coefficient: 20.0,
            penalty_mode: PenaltyMode::AllEdges,
            boltzmann_temperature: 0.25,
            vi_tolerance: DEFAULT_VI_TOLERANCE,
            vi_max_iters: 1_000_000,
            stitch_budget: 200,
            neighbor_hop: HopPosition::Last,
            attempts: 1,
            occupancy_horizon: 10_000,
            cem: CemConfig::default(),
            rng_seed: 0,
        }
    }
}

impl BatsConfig {
    pub fn validate(&self, action_dim: usize) -> Result<()> {
        let positive = [
            ("samples_per_iter", self.samples_per_iter),
            ("max_stitch_len", self.max_stitch_len),
            ("stitch_budget", self.stitch_budget),
            ("attempts", self.attempts),
            ("occupancy_horizon", self.occupancy_horizon),
            ("vi_max_iters", self.vi_max_iters),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(BatsError::Input(format!("{name} must be positive")));
        }
        if !(self.delta > 0.0 && self.boltzmann_temperature > 0.0 && self.vi_tolerance > 0.0) {
            return Err(BatsError::Input("delta, temperature and VI tolerance must be positive".into()));
        }
        if !(self.penalty_coefficient >= 0.0) {
            return Err(BatsError::Input("penalty coefficient must be non-negative".into()));
        }
        self.cem.validate(action_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub candidates: usize,
    pub attempted: usize,
    pub accepted: usize,
    /// Mean pessimistic start value of the MDP this iteration started from.
    pub mean_start_value: f64,
    /// Same, after this iteration's stitches were committed.
    pub mean_start_value_after: f64,
    pub n_states: usize,
    pub n_edges: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatsRunState {
    pub mdp: TabularMdp,
    /// Iterations completed.
    pub iteration: usize,
    pub log: Vec<StitchLogEntry>,
    pub records: Vec<StitchRecord>,
    pub metrics: Vec<IterationMetrics>,
    pub accepted_pairs: BTreeSet<(usize, usize)>,
    /// Set when an iteration found no impactful candidate.
    pub finished: bool,
}

impl BatsRunState {
    pub fn new(mdp: TabularMdp) -> Self {
        BatsRunState {
            mdp,
            iteration: 0,
            log: Vec::new(),
            records: Vec::new(),
            metrics: Vec::new(),
            accepted_pairs: BTreeSet::new(),
            finished: false,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persist::save_versioned(path, RUN_FORMAT, RUN_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let state: BatsRunState = persist::load_versioned(path, RUN_FORMAT, RUN_VERSION)?;
        state.mdp.validate()?;
        Ok(state)
    }

    pub fn to_json(&self) -> Result<String> {
        persist::to_versioned_string(RUN_FORMAT, RUN_VERSION, self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let state: BatsRunState = persist::from_versioned_str(RUN_FORMAT, RUN_VERSION, text)?;
        state.mdp.validate()?;
        Ok(state)
    }
}

/// Impactful candidates of one iteration after de-duplication and ordering.
pub fn collect_candidates(
    state: &BatsRunState,
    graph: &NeighborGraph,
    config: &BatsConfig,
) -> Result<(Vec<ImpactfulCandidate>, f64, usize)> {
    let mdp = &state.mdp;
    let vt = value_iteration(mdp, config.vi_tolerance, config.vi_max_iters)?;
    if !vt.converged {
        log::warn!("value iteration stopped at residual {:.3e}", vt.residual);
    }
    let mean_start = mdp.mean_over_starts(&vt.values);
    let explore = boltzmann_policy(&vt, mdp, config.boltzmann_temperature)?;
    let greedy = greedy_policy(&vt, mdp);
    let samples = sample_occupancy(
        mdp,
        &explore,
        config.samples_per_iter,
        config.occupancy_horizon,
        derive_seed(config.rng_seed, &[state.iteration as u64, 0]),
    )?;
    let mut sources: Vec<usize> = samples;
    sources.sort_unstable();
    sources.dedup();
    let mut found: Vec<ImpactfulCandidate> = Vec::new();
    for s in sources {
        let feasible = find_feasible(mdp, graph, s, config.max_stitch_len, config.neighbor_hop);
        let feasible = feasible
            .into_iter()
            .filter(|c| !state.accepted_pairs.contains(&(c.source, c.target)))
            .collect();
        found.extend(filter_impactful(feasible, &vt, &greedy, mdp));
    }
    let n_found = found.len();
    found.sort_by(|a, b| {
        b.advantage
            .total_cmp(&a.advantage)
            .then(a.candidate.source.cmp(&b.candidate.source))
            .then(a.candidate.target.cmp(&b.candidate.target))
    });
    found.truncate(config.stitch_budget);
    Ok((found, mean_start, n_found))
}

/// Run a single iteration in place. Returns false once the loop has stopped.
pub fn step<M: ForwardModel + ?Sized>(
    state: &mut BatsRunState,
    graph: &NeighborGraph,
    model: &M,
    metric: &DistanceMetric,
    config: &BatsConfig,
) -> Result<bool> {
    if state.finished || state.iteration >= config.n_iterations {
        return Ok(false);
    }
    let it = state.iteration;
    let (candidates, mean_before, n_found) = collect_candidates(state, graph, config)?;

    let mut accepted = Vec::new();
    for c in &candidates {
        let cand = &c.candidate;
        let seed = derive_seed(config.rng_seed, &[it as u64, 1, cand.source as u64, cand.target as u64]);
        let plan = multi_start_test_edge(
            model,
            &state.mdp.states[cand.source],
            &state.mdp.states[cand.target],
            cand.k,
            config.delta,
            metric,
            &config.cem,
            config.attempts,
            seed,
        )?;
        state.log.push(StitchLogEntry {
            iteration: it,
            source: cand.source,
            target: cand.target,
            k: cand.k,
            advantage: c.advantage,
            distance: plan.achieved_distance,
            accepted: plan.accepted,
        });
        if plan.accepted {
            accepted.push(StitchRecord {
                candidate: cand.clone(),
                actions: plan.actions,
                predicted_states: plan.predicted_states,
                achieved_distance: plan.achieved_distance,
                accepted: true,
                iteration_added: it,
            });
        }
    }
    let n_accepted = accepted.len();
    for record in accepted {
        apply_stitch(
            &mut state.mdp,
            &record,
            model,
            config.penalty_coefficient,
            config.penalty_mode,
            metric,
        )?;
        state.accepted_pairs.insert((record.candidate.source, record.candidate.target));
        state.records.push(record);
    }
    let after = value_iteration(&state.mdp, config.vi_tolerance, config.vi_max_iters)?;
    state.metrics.push(IterationMetrics {
        iteration: it,
        candidates: n_found,
        attempted: candidates.len(),
        accepted: n_accepted,
        mean_start_value: mean_before,
        mean_start_value_after: state.mdp.mean_over_starts(&after.values),
        n_states: state.mdp.n_states(),
        n_edges: state.mdp.n_edges(),
    });
    state.iteration += 1;
    log::info!(
        "iteration {it}: {n_found} impactful candidates, {} planned, {n_accepted} accepted",
        candidates.len()
    );
    if candidates.is_empty() {
        state.finished = true;
        return Ok(false);
    }
    Ok(state.iteration < config.n_iterations)
}

/// Continue `state` until `n_iterations` or early termination. If
/// `checkpoint` is given the state is written there after every iteration.
pub fn resume<M: ForwardModel + ?Sized>(
    mut state: BatsRunState,
    graph: &NeighborGraph,
    model: &M,
    metric: &DistanceMetric,
    config: &BatsConfig,
    checkpoint: Option<&Path>,
) -> Result<BatsRunState> {
    config.validate(state.mdp.action_dim)?;
    loop {
        let more = step(&mut state, graph, model, metric, config)?;
        if let Some(path) = checkpoint {
            state.save(path)?;
        }
        if !more {
            break;
        }
    }
    Ok(state)
}

pub fn run_bats<M: ForwardModel + ?Sized>(
    m0: TabularMdp,
    graph: &NeighborGraph,
    model: &M,
    metric: &DistanceMetric,
    config: &BatsConfig,
) -> Result<BatsRunState> {
    resume(BatsRunState::new(m0), graph, model, metric, config, None)
}

/// Recompute every stitch penalty from its stored distance with a new coefficient.
pub fn relabel_penalties(mdp: &mut TabularMdp, coefficient: f64, mode: PenaltyMode) -> Result<usize> {
    if !(coefficient >= 0.0) {
        return Err(BatsError::Input("penalty coefficient must be non-negative".into()));
    }
    let gamma = mdp.discount;
    let imagined = mdp.imagined.clone();
    let mut changed = 0;
    for edges in &mut mdp.actions {
        for e in edges.iter_mut().filter(|e| e.is_stitch) {
            let is_final = !imagined[e.next];
            let (edge, k) = if is_final { (0, 1) } else { (0, 2) };
            e.penalty = penalty_for(mode, coefficient, gamma, e.distance, edge, k);
            changed += 1;
        }
    }
    Ok(changed)
}
