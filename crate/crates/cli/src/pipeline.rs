//! One function per subcommand. Each reads its prerequisites from the run
//! directory, writes its own artifacts and updates the manifest.

use std::fs;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use bats_core::bats_loop::{relabel_penalties, resume, BatsRunState};
use bats_core::bisim_embed::{train_bisim, BisimEmbedding};
use bats_core::bounds::{verify_random_instances, BoundsSummary};
use bats_core::dataset::{build_m0, build_neighbor_graph, relabel_start_states, NeighborGraph, TrajectoryDataset};
use bats_core::dynamics::{train_ensemble, DynamicsEnsemble};
use bats_core::envs::{generate_dataset, Environment};
use bats_core::mdp::{greedy_policy, value_iteration, TabularMdp};
use bats_core::metric::{DistanceMetric, MetricKind, Normalizer};
use bats_core::policy_cloning::{
    behavior_clone, evaluate_policy, harvest_trajectories, start_residuals, ClonedPolicy, EvalStats, Harvest,
};
use bats_core::stitching::{write_stitch_log, PenaltyMode};

use crate::config::{PipelineConfig, Stage};
use crate::error::{CliError, CliResult};
use crate::workspace::{self as ws, Workspace};

fn csv_bytes<T: Serialize>(rows: &[T]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Config(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::Config(format!("csv: {e}")))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    text.into_bytes()
}

pub fn load_dataset(w: &Workspace) -> CliResult<TrajectoryDataset> {
    Ok(TrajectoryDataset::load(&w.require(ws::DATASET)?)?)
}

/// `gen-data`: generate (or import) the offline dataset.
pub fn gen_data(cfg: &PipelineConfig, w: &Workspace) -> CliResult<TrajectoryDataset> {
    let data = match &cfg.data.path {
        Some(p) => TrajectoryDataset::load(p)?,
        None => generate_dataset(&cfg.env, &cfg.generate_spec())?,
    };
    if data.state_dim != cfg.env.state_dim() || data.action_dim != cfg.env.action_dim() {
        return Err(CliError::Config(format!(
            "dataset is {}->{}, environment is {}->{}",
            data.state_dim,
            data.action_dim,
            cfg.env.state_dim(),
            cfg.env.action_dim()
        )));
    }
    data.save(&w.path(ws::DATASET))?;
    w.write(ws::CONFIG.file, cfg.portable_json() + "\n")?;
    w.record(cfg, &[ws::CONFIG.file, ws::DATASET.file])?;
    log::info!("dataset: {} trajectories, {} records", data.trajectories.len(), data.n_records());
    Ok(data)
}

/// `train-dynamics`: fit the forward-model ensemble.
pub fn train_dynamics(cfg: &PipelineConfig, w: &Workspace) -> CliResult<DynamicsEnsemble> {
    let data = load_dataset(w)?;
    let model = train_ensemble(&data, &cfg.dynamics, cfg.stage_seed(Stage::Dynamics))?;
    model.save(&w.path(ws::DYNAMICS))?;
    w.record(cfg, &[ws::DYNAMICS.file])?;
    Ok(model)
}

/// `train-bisim`: fit the learned state embedding.
pub fn train_embedding(cfg: &PipelineConfig, w: &Workspace) -> CliResult<BisimEmbedding> {
    let data = load_dataset(w)?;
    let emb = train_bisim(&data, &cfg.bisim, cfg.stage_seed(Stage::Bisim))?;
    emb.save(&w.path(ws::BISIM))?;
    w.record(cfg, &[ws::BISIM.file])?;
    Ok(emb)
}

pub fn build_metric(cfg: &PipelineConfig, w: &Workspace, data: &TrajectoryDataset) -> CliResult<DistanceMetric> {
    Ok(match cfg.metric {
        MetricKind::Euclidean => DistanceMetric::Euclidean,
        MetricKind::NormalizedEuclidean => {
            let norm = Normalizer::fit(data.records().map(|r| r.state.as_slice()), data.state_dim);
            DistanceMetric::normalized(&norm)
        }
        MetricKind::LearnedEmbedding => {
            DistanceMetric::Learned(Arc::new(BisimEmbedding::load(&w.require(ws::BISIM)?)?))
        }
    })
}

/// Dataset MDP with the configured start states, and the neighbour graph.
pub fn build_graph(
    cfg: &PipelineConfig,
    data: &TrajectoryDataset,
    metric: &DistanceMetric,
) -> CliResult<(TabularMdp, NeighborGraph)> {
    let mut m0 = build_m0(data, cfg.discount)?;
    if let Some(start) = &cfg.start_region {
        let before = m0.start_states.clone();
        if start.replace {
            m0.start_states.clear();
        }
        let added = relabel_start_states(&mut m0, &start.region)?;
        if m0.start_states.is_empty() {
            log::warn!("start region matched no state; keeping trajectory starts");
            m0.start_states = before;
        } else {
            log::info!("start region matched {added} states");
        }
    }
    let graph = build_neighbor_graph(data, cfg.neighbors, metric)?;
    Ok((m0, graph))
}

/// `stitch`: run the stitching loop, checkpointing after every iteration.
pub fn stitch(cfg: &PipelineConfig, w: &Workspace, resume_run: bool) -> CliResult<BatsRunState> {
    let data = load_dataset(w)?;
    let model = DynamicsEnsemble::load(&w.require(ws::DYNAMICS)?)?;
    let metric = build_metric(cfg, w, &data)?;
    let (m0, graph) = build_graph(cfg, &data, &metric)?;
    let checkpoint = w.path(ws::RUN_STATE);
    let state = if resume_run && checkpoint.is_file() {
        let s = BatsRunState::load(&checkpoint)?;
        log::info!("resuming at iteration {}", s.iteration);
        s
    } else {
        BatsRunState::new(m0)
    };
    let state = resume(state, &graph, &model, &metric, &cfg.bats_config(), Some(&checkpoint))?;
    state.mdp.save(&w.path(ws::MDP))?;
    let mut log_bytes = Vec::new();
    write_stitch_log(&mut log_bytes, &state.log)?;
    w.write(ws::STITCH_LOG.file, log_bytes)?;
    w.write(ws::ITERATIONS.file, csv_bytes(&state.metrics)?)?;
    w.record(
        cfg,
        &[ws::RUN_STATE.file, ws::MDP.file, ws::STITCH_LOG.file, ws::ITERATIONS.file],
    )?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelSummary {
    pub edges_changed: usize,
    pub mean_start_value_before: f64,
    pub mean_start_value_after: f64,
}

/// `relabel`: recompute stitch penalties from stored distances and
/// re-solve; nothing is replanned.
pub fn relabel(cfg: &PipelineConfig, w: &Workspace, coefficient: f64, mode: PenaltyMode) -> CliResult<RelabelSummary> {
    let state = BatsRunState::load(&w.require(ws::RUN_STATE)?)?;
    let mut mdp = state.mdp;
    let before = value_iteration(&mdp, cfg.bats.vi_tolerance, cfg.bats.vi_max_iters)?;
    let edges_changed = relabel_penalties(&mut mdp, coefficient, mode)?;
    let after = value_iteration(&mdp, cfg.bats.vi_tolerance, cfg.bats.vi_max_iters)?;
    mdp.save(&w.path(ws::MDP))?;
    w.record(cfg, &[ws::MDP.file])?;
    Ok(RelabelSummary {
        edges_changed,
        mean_start_value_before: mdp.mean_over_starts(&before.values),
        mean_start_value_after: mdp.mean_over_starts(&after.values),
    })
}

/// Greedy rollouts of `M_n` from every start (threshold applied).
pub fn harvest(cfg: &PipelineConfig, mdp: &TabularMdp, threshold: f64) -> CliResult<Harvest> {
    let vt = value_iteration(mdp, cfg.bats.vi_tolerance, cfg.bats.vi_max_iters)?;
    let policy = greedy_policy(&vt, mdp);
    Ok(harvest_trajectories(mdp, &policy, threshold, cfg.harvest_horizon())?)
}

/// Text histogram of harvest returns, to help choose a threshold.
pub fn return_histogram(returns: &[f64], bins: usize) -> String {
    if returns.is_empty() {
        return "no returns\n".into();
    }
    let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for r in returns {
        counts[(((r - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let peak = *counts.iter().max().expect("bins > 0");
    let mut out = String::new();
    for (i, c) in counts.iter().enumerate() {
        let bar = "#".repeat((40 * c).div_ceil(peak.max(1)));
        out += &format!("{:>10.2} .. {:>10.2} | {:>6} {bar}\n", lo + i as f64 * width, lo + (i + 1) as f64 * width, c);
    }
    out
}

/// `clone`: harvest `M_n` and fit the policy, or with `raw` fit the whole
/// logged dataset as a baseline.
pub fn clone_policy(cfg: &PipelineConfig, w: &Workspace, raw: bool) -> CliResult<ClonedPolicy> {
    let bounds = cfg.env.action_bounds();
    if raw {
        let data = load_dataset(w)?;
        let p = behavior_clone(&data, &bounds, &cfg.cloning, cfg.stage_seed(Stage::CloneRaw))?;
        p.save(&w.path(ws::RAW_POLICY))?;
        w.record(cfg, &[ws::RAW_POLICY.file])?;
        return Ok(p);
    }
    let mdp = TabularMdp::load(&w.require(ws::MDP)?)?;
    let all = harvest(cfg, &mdp, f64::NEG_INFINITY);
    if let Ok(all) = &all {
        let returns: Vec<f64> = all.returns.iter().map(|r| r.ret).collect();
        eprint!("graph returns over {} starts:\n{}", returns.len(), return_histogram(&returns, 12));
    }
    let h = harvest(cfg, &mdp, cfg.harvest.threshold)?;
    w.write(ws::HARVEST_RETURNS.file, csv_bytes(&h.returns)?)?;
    h.dataset.save(&w.path(ws::HARVEST))?;
    let p = behavior_clone(&h.dataset, &bounds, &cfg.cloning, cfg.stage_seed(Stage::Clone))?;
    p.save(&w.path(ws::POLICY))?;
    w.record(cfg, &[ws::HARVEST_RETURNS.file, ws::HARVEST.file, ws::POLICY.file])?;
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub stats: EvalStats,
    /// Mean over episodes of the average reward in the final `tail_window`
    /// steps; for indicator rewards this is the goal occupancy.
    pub tail_reward_mean: Option<f64>,
}

impl PolicyReport {
    fn new(stats: EvalStats, window: usize) -> Self {
        let n = stats.episodes.len();
        let tail_reward_mean =
            (n > 0).then(|| stats.episodes.iter().map(|e| e.tail_reward_mean(window)).sum::<f64>() / n as f64);
        PolicyReport { stats, tail_reward_mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub episodes: usize,
    pub tail_window: usize,
    pub policy: PolicyReport,
    /// Baseline cloned from the raw dataset, when `clone --raw` has run.
    pub raw: Option<PolicyReport>,
}

fn evenly_spaced<T>(items: Vec<T>, n: usize) -> Vec<T> {
    let len = items.len();
    if len <= n {
        return items;
    }
    let keep: std::collections::BTreeSet<usize> = (0..n).map(|i| i * len / n).collect();
    items.into_iter().enumerate().filter(|(i, _)| keep.contains(i)).map(|(_, x)| x).collect()
}

/// `evaluate`: environment rollouts of the cloned policy (and the raw
/// baseline when present), plus per-start graph-versus-environment residuals.
pub fn evaluate(cfg: &PipelineConfig, w: &Workspace) -> CliResult<EvaluationReport> {
    let policy = ClonedPolicy::load(&w.require(ws::POLICY)?)?;
    let seed = cfg.stage_seed(Stage::Evaluate);
    let n = cfg.evaluation.episodes;
    let window = cfg.evaluation.tail_window;
    let report = PolicyReport::new(evaluate_policy(&policy, &cfg.env, n, seed)?, window);
    let raw_path = w.path(ws::RAW_POLICY);
    let raw = if raw_path.is_file() {
        let p = ClonedPolicy::load(&raw_path)?;
        Some(PolicyReport::new(evaluate_policy(&p, &cfg.env, n, seed)?, window))
    } else {
        None
    };
    let mdp = TabularMdp::load(&w.require(ws::MDP)?)?;
    let mut h = harvest(cfg, &mdp, f64::NEG_INFINITY)?;
    h.returns = evenly_spaced(h.returns, cfg.evaluation.residual_starts);
    let residuals = start_residuals(&mdp, &h, &policy, &cfg.env);
    w.write(ws::RESIDUALS.file, csv_bytes(&residuals)?)?;
    let out = EvaluationReport {
        episodes: n,
        tail_window: window,
        policy: report,
        raw,
    };
    w.write(ws::EVALUATION.file, json_bytes(&out))?;
    w.record(cfg, &[ws::EVALUATION.file, ws::RESIDUALS.file])?;
    Ok(out)
}

/// `verify-bounds`: certification checks on seeded random instances.
pub fn verify_bounds(cfg: &PipelineConfig, w: &Workspace) -> CliResult<BoundsSummary> {
    let b = &cfg.bounds;
    let summary = verify_random_instances(&b.spec, b.instances, cfg.stage_seed(Stage::Bounds), b.tolerance)?;
    w.write(ws::BOUNDS.file, json_bytes(&summary))?;
    w.record(cfg, &[ws::BOUNDS.file])?;
    Ok(summary)
}

/// `export-plots`: CSV series for the value map, residuals, action traces
/// and trajectory traces.
pub fn export_plots(cfg: &PipelineConfig, w: &Workspace) -> CliResult<Vec<String>> {
    let mdp = TabularMdp::load(&w.require(ws::MDP)?)?;
    let vt = value_iteration(&mdp, cfg.bats.vi_tolerance, cfg.bats.vi_max_iters)?;
    let mut values = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Config(format!("csv: {e}"));
    let mut header = vec!["state".to_string(), "value".into(), "start".into(), "imagined".into(), "terminal".into()];
    header.extend((0..mdp.state_dim).map(|j| format!("s{j}")));
    values.write_record(&header).map_err(csv_err)?;
    let starts: std::collections::BTreeSet<usize> = mdp.start_states.iter().copied().collect();
    for (i, s) in mdp.states.iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            vt.values[i].to_string(),
            u8::from(starts.contains(&i)).to_string(),
            u8::from(mdp.imagined[i]).to_string(),
            u8::from(mdp.terminal[i]).to_string(),
        ];
        row.extend(s.iter().map(f64::to_string));
        values.write_record(&row).map_err(csv_err)?;
    }
    let value_bytes = values.into_inner().map_err(|e| CliError::Config(format!("csv: {e}")))?;

    let eval_path = w.require(ws::EVALUATION)?;
    let text = fs::read_to_string(&eval_path).map_err(|e| CliError::io(&eval_path, e))?;
    let report: EvaluationReport = serde_json::from_str(&text).map_err(bats_core::BatsError::from)?;
    let mut actions = csv::Writer::from_writer(Vec::new());
    let mut states = csv::Writer::from_writer(Vec::new());
    let mut a_header = vec!["policy".to_string(), "episode".into(), "t".into()];
    a_header.extend((0..cfg.env.action_dim()).map(|j| format!("a{j}")));
    a_header.push("reward".into());
    actions.write_record(&a_header).map_err(csv_err)?;
    let mut s_header = vec!["policy".to_string(), "episode".into(), "t".into()];
    s_header.extend((0..cfg.env.state_dim()).map(|j| format!("s{j}")));
    states.write_record(&s_header).map_err(csv_err)?;
    let runs = std::iter::once(("bats", &report.policy)).chain(report.raw.as_ref().map(|r| ("raw", r)));
    for (name, r) in runs {
        for (e, ep) in r.stats.episodes.iter().enumerate() {
            for (t, (a, rew)) in ep.actions.iter().zip(&ep.rewards).enumerate() {
                let mut row = vec![name.to_string(), e.to_string(), t.to_string()];
                row.extend(a.iter().map(f64::to_string));
                row.push(rew.to_string());
                actions.write_record(&row).map_err(csv_err)?;
            }
            for (t, s) in ep.states.iter().enumerate() {
                let mut row = vec![name.to_string(), e.to_string(), t.to_string()];
                row.extend(s.iter().map(f64::to_string));
                states.write_record(&row).map_err(csv_err)?;
            }
        }
    }
    let finish = |wr: csv::Writer<Vec<u8>>| wr.into_inner().map_err(|e| CliError::Config(format!("csv: {e}")));
    let residual_path = w.require(ws::RESIDUALS)?;
    let residual_bytes = fs::read(&residual_path).map_err(|e| CliError::io(&residual_path, e))?;

    let files = [
        ("plots/value_map.csv", value_bytes),
        ("plots/residuals.csv", residual_bytes),
        ("plots/action_traces.csv", finish(actions)?),
        ("plots/trajectory_traces.csv", finish(states)?),
    ];
    let mut names = Vec::new();
    for (name, bytes) in files {
        w.write(name, bytes)?;
        names.push(name.to_string());
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    w.record(cfg, &refs)?;
    Ok(names)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: usize,
    pub stitches: usize,
    pub evaluation: EvaluationReport,
    pub bounds: BoundsSummary,
}

/// Every stage in order, including the raw-data baseline.
pub fn run_all(cfg: &PipelineConfig, w: &Workspace) -> CliResult<RunSummary> {
    gen_data(cfg, w)?;
    train_dynamics(cfg, w)?;
    if cfg.metric == MetricKind::LearnedEmbedding {
        train_embedding(cfg, w)?;
    }
    let state = stitch(cfg, w, false)?;
    clone_policy(cfg, w, false)?;
    clone_policy(cfg, w, true)?;
    let evaluation = evaluate(cfg, w)?;
    let bounds = verify_bounds(cfg, w)?;
    export_plots(cfg, w)?;
    Ok(RunSummary {
        iterations: state.iteration,
        stitches: state.records.len(),
        evaluation,
        bounds,
    })
}
