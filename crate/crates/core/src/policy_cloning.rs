//! Harvesting graph-optimal trajectories and distilling them into a
//! continuous Gaussian policy.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Trajectory, TrajectoryDataset, Transition};
use crate::dynamics::{gaussian_nll_grad, soft_clamp};
use crate::envs::Environment;
use crate::error::{BatsError, Result};
use crate::mdp::{TabularMdp, TabularPolicy};
use crate::metric::Normalizer;
use crate::nn::{clip_global_norm, Mlp, Optimizer, OptimizerConfig};
use crate::persist;
use crate::seeding::{rng_from, SeededRng};

pub const POLICY_FORMAT: &str = "bats-policy";
pub const POLICY_VERSION: u32 = 1;

/// Return of one harvested rollout and whether it passed the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarvestedReturn {
    pub start: usize,
    pub steps: usize,
    pub ret: f64,
    pub kept: bool,
}

#[derive(Clone, Debug)]
pub struct Harvest {
    pub dataset: TrajectoryDataset,
    pub returns: Vec<HarvestedReturn>,
}

/// Roll the deterministic policy from `start` for at most `horizon` steps.
/// Stops at terminal states and at the zero-reward self-loops that mark
/// truncated data; those placeholder actions are not emitted.
pub fn rollout_graph(mdp: &TabularMdp, policy: &TabularPolicy, start: usize, horizon: usize) -> Vec<Transition> {
    let mut out = Vec::new();
    let mut s = start;
    for _ in 0..horizon {
        if mdp.terminal[s] || mdp.actions[s].is_empty() {
            break;
        }
        let edge = &mdp.actions[s][policy.mode_action(s)];
        if !edge.is_stitch && edge.next == s && edge.reward == 0.0 {
            break;
        }
        out.push(Transition {
            state: mdp.states[s].clone(),
            action: edge.action.clone(),
            reward: edge.reward,
            next_state: mdp.states[edge.next].clone(),
            terminal: mdp.terminal[edge.next],
        });
        s = edge.next;
    }
    out
}

/// Roll the policy from every start state and keep the rollouts whose
/// undiscounted return reaches `threshold`.
pub fn harvest_trajectories(mdp: &TabularMdp, policy: &TabularPolicy, threshold: f64, horizon: usize) -> Result<Harvest> {
    if threshold.is_nan() {
        return Err(BatsError::Input("return threshold is NaN".into()));
    }
    if policy.n_states() != mdp.n_states() {
        return Err(BatsError::Contract(format!(
            "policy covers {} states, graph has {}",
            policy.n_states(),
            mdp.n_states()
        )));
    }
    let mut returns = Vec::with_capacity(mdp.start_states.len());
    let mut kept = Vec::new();
    for &start in &mdp.start_states {
        let transitions = rollout_graph(mdp, policy, start, horizon);
        let ret: f64 = transitions.iter().map(|t| t.reward).sum();
        let keep = ret >= threshold && !transitions.is_empty();
        returns.push(HarvestedReturn {
            start,
            steps: transitions.len(),
            ret,
            kept: keep,
        });
        if keep {
            kept.push(Trajectory { transitions });
        }
    }
    if kept.is_empty() {
        return Err(BatsError::EmptyHarvest { threshold });
    }
    log::info!("harvest kept {} of {} start rollouts", kept.len(), returns.len());
    let dataset = TrajectoryDataset::new(mdp.state_dim, mdp.action_dim, kept)?;
    Ok(Harvest { dataset, returns })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub batch_updates: usize,
    pub optimizer: OptimizerConfig,
    pub grad_clip: f64,
    /// Bounds of the log-variance head, in normalised action units.
    pub min_log_var: f64,
    pub max_log_var: f64,
    pub divergence_factor: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            hidden: vec![256, 256],
            batch_size: 256,
            batch_updates: 2000,
            optimizer: OptimizerConfig::Adam { learning_rate: 1e-3 },
            grad_clip: 10.0,
            min_log_var: -12.0,
            max_log_var: 1.0,
            divergence_factor: 10.0,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(BatsError::Input("batch size and hidden widths must be positive".into()));
        }
        if !(self.min_log_var < self.max_log_var) {
            return Err(BatsError::Input("min_log_var must be below max_log_var".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClonedPolicy {
    pub network: Mlp,
    pub state_norm: Normalizer,
    pub action_norm: Normalizer,
    pub action_bounds: Vec<[f64; 2]>,
    pub min_log_var: f64,
    pub max_log_var: f64,
    pub loss_history: Vec<f64>,
}

impl ClonedPolicy {
    pub fn state_dim(&self) -> usize {
        self.state_norm.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_norm.dim()
    }

    fn head(&self, state: &[f64]) -> Vec<f64> {
        self.network.forward_one(&self.state_norm.normalize(state))
    }

    /// Unclamped mean action.
    pub fn mean_action(&self, state: &[f64]) -> Vec<f64> {
        let out = self.head(state);
        self.action_norm.denormalize(&out[..self.action_dim()])
    }

    /// Per-dimension log standard deviation in action units.
    pub fn log_std(&self, state: &[f64]) -> Vec<f64> {
        let d = self.action_dim();
        let out = self.head(state);
        (0..d)
            .map(|j| 0.5 * soft_clamp(out[d + j], self.min_log_var, self.max_log_var).0 + self.action_norm.scale[j].ln())
            .collect()
    }

    fn clamp(&self, mut a: Vec<f64>) -> Vec<f64> {
        for (x, [lo, hi]) in a.iter_mut().zip(&self.action_bounds) {
            *x = x.clamp(*lo, *hi);
        }
        a
    }

    /// Deployed action: the mean, clamped to the bounds.
    pub fn act(&self, state: &[f64]) -> Vec<f64> {
        self.clamp(self.mean_action(state))
    }

    pub fn sample(&self, state: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        let mean = self.mean_action(state);
        let ls = self.log_std(state);
        let a = mean
            .iter()
            .zip(&ls)
            .map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.clamp(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persist::save_versioned(path, POLICY_FORMAT, POLICY_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        persist::load_versioned(path, POLICY_FORMAT, POLICY_VERSION)
    }
}

/// Fit a Gaussian policy to the harvest by maximum likelihood.
pub fn behavior_clone(
    harvest: &TrajectoryDataset,
    action_bounds: &[[f64; 2]],
    config: &BcConfig,
    seed: u64,
) -> Result<ClonedPolicy> {
    config.validate()?;
    let records: Vec<_> = harvest.records().collect();
    if records.is_empty() {
        return Err(BatsError::Input("cannot clone from an empty harvest".into()));
    }
    if action_bounds.len() != harvest.action_dim {
        return Err(BatsError::Input(format!(
            "{} action bounds for action dimension {}",
            action_bounds.len(),
            harvest.action_dim
        )));
    }
    let (sd, ad) = (harvest.state_dim, harvest.action_dim);
    let state_norm = Normalizer::fit(records.iter().map(|r| r.state.as_slice()), sd);
    let action_norm = Normalizer::fit(records.iter().map(|r| r.action.as_slice()), ad);
    let n = records.len();
    let mut x = Array2::zeros((n, sd));
    let mut y = Array2::zeros((n, ad));
    for (i, r) in records.iter().enumerate() {
        x.row_mut(i).assign(&ndarray::ArrayView1::from(state_norm.normalize(&r.state).as_slice()));
        y.row_mut(i).assign(&ndarray::ArrayView1::from(action_norm.normalize(&r.action).as_slice()));
    }

    let mut sizes = vec![sd];
    sizes.extend(&config.hidden);
    sizes.push(2 * ad);
    let mut net = Mlp::new(&sizes, &mut rng_from(seed, &[0]));
    let mut opt = Optimizer::new(config.optimizer.clone(), &net);
    let mut rng = rng_from(seed, &[1]);
    let mut history = Vec::with_capacity(config.batch_updates);
    let mut ema: Option<f64> = None;
    let mut initial = None;
    for step in 0..config.batch_updates {
        let idx: Vec<usize> = (0..config.batch_size.min(n)).map(|_| rng.random_range(0..n)).collect();
        let bx = x.select(Axis(0), &idx);
        let by = y.select(Axis(0), &idx);
        let (out, tape) = net.forward_tape(&bx);
        let (loss, g) = gaussian_nll_grad(&out, &by, config.min_log_var, config.max_log_var);
        if !loss.is_finite() {
            return Err(BatsError::training("behavior cloning", format!("non-finite loss at update {step}")));
        }
        let e = ema.map_or(loss, |e| 0.99 * e + 0.01 * loss);
        ema = Some(e);
        // The NLL can go negative; measure divergence against its magnitude.
        let base = *initial.get_or_insert(loss.abs().max(1.0));
        if e > config.divergence_factor * base {
            return Err(BatsError::training("behavior cloning", format!("loss diverged at update {step}")));
        }
        history.push(loss);
        let (mut grads, _) = net.backward(&tape, &g);
        clip_global_norm(&mut grads, config.grad_clip);
        opt.step(&mut net, &grads);
    }
    if !net.is_finite() {
        return Err(BatsError::training("behavior cloning", "non-finite weights"));
    }
    Ok(ClonedPolicy {
        network: net,
        state_norm,
        action_norm,
        action_bounds: action_bounds.to_vec(),
        min_log_var: config.min_log_var,
        max_log_var: config.max_log_var,
        loss_history: history,
    })
}

/// Mean action squared error of a policy over a dataset, in action units.
pub fn action_rmse(policy: &ClonedPolicy, data: &TrajectoryDataset) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for r in data.records() {
        for (p, a) in policy.mean_action(&r.state).iter().zip(&r.action) {
            sum += (p - a).powi(2);
            count += 1;
        }
    }
    (sum / count.max(1) as f64).sqrt()
}

/// Means of consecutive `window`-sized chunks of the loss history.
pub fn windowed_means(history: &[f64], window: usize) -> Vec<f64> {
    history
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub ret: f64,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl Episode {
    /// Mean reward over the last `n` steps (all steps when shorter).
    pub fn tail_reward_mean(&self, n: usize) -> f64 {
        let tail = &self.rewards[self.rewards.len().saturating_sub(n)..];
        if tail.is_empty() {
            0.0
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Absent when there are no episodes.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub returns: Vec<f64>,
    pub episodes: Vec<Episode>,
}

impl EvalStats {
    pub fn from_episodes(episodes: Vec<Episode>) -> Self {
        let returns: Vec<f64> = episodes.iter().map(|e| e.ret).collect();
        let n = returns.len();
        let mean = (n > 0).then(|| returns.iter().sum::<f64>() / n as f64);
        let std = mean.map(|m| (returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n as f64).sqrt());
        EvalStats {
            mean,
            std,
            returns,
            episodes,
        }
    }
}

/// Run `act` from `start` in the environment until terminal or the cap.
pub fn run_episode<E, F>(env: &E, start: Vec<f64>, mut act: F) -> Episode
where
    E: Environment + ?Sized,
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut ep = Episode {
        ret: 0.0,
        states: vec![start],
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    for _ in 0..env.max_steps() {
        let s = ep.states.last().expect("nonempty");
        let a = act(s);
        let o = env.step(s, &a);
        ep.ret += o.reward;
        ep.rewards.push(o.reward);
        ep.actions.push(a);
        ep.states.push(o.next_state);
        if o.terminal {
            break;
        }
    }
    ep
}

/// Deterministic mean-action rollouts; `seed` only drives the reset draws.
pub fn evaluate_policy<E: Environment + ?Sized>(policy: &ClonedPolicy, env: &E, n_episodes: usize, seed: u64) -> Result<EvalStats> {
    if env.state_dim() != policy.state_dim() || env.action_dim() != policy.action_dim() {
        return Err(BatsError::Input(format!(
            "policy is {}->{}, environment is {}->{}",
            policy.state_dim(),
            policy.action_dim(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    let episodes = (0..n_episodes)
        .map(|i| {
            let start = env.reset(&mut rng_from(seed, &[i as u64]));
            run_episode(env, start, |s| policy.act(s))
        })
        .collect();
    Ok(EvalStats::from_episodes(episodes))
}

/// Graph value versus realised return of the cloned policy from the same
/// start state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartResidual {
    pub start: usize,
    pub graph_return: f64,
    pub env_return: f64,
    pub residual: f64,
}

/// Per-start comparison of harvested graph returns with what the cloned
/// policy achieves when started from the same state.
pub fn start_residuals<E: Environment + ?Sized>(
    mdp: &TabularMdp,
    harvest: &Harvest,
    policy: &ClonedPolicy,
    env: &E,
) -> Vec<StartResidual> {
    harvest
        .returns
        .iter()
        .map(|h| {
            let ep = run_episode(env, mdp.states[h.start].clone(), |s| policy.act(s));
            StartResidual {
                start: h.start,
                graph_return: h.ret,
                env_return: ep.ret,
                residual: (h.ret - ep.ret).abs(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Edge;

    fn chain() -> TabularMdp {
        // 0 -a-> 1 -a-> 2 (terminal, reward 5); 3 is a dead end.
        let mut m = TabularMdp::new(1, 1, 0.9).unwrap();
        for i in 0..4 {
            m.add_state(vec![i as f64], i == 2, false);
        }
        m.add_edge(0, Edge::logged(vec![0.5], 1, 1.0)).unwrap();
        m.add_edge(1, Edge::logged(vec![-0.5], 2, 5.0)).unwrap();
        m.add_edge(3, Edge::logged(vec![0.0], 3, 0.0)).unwrap();
        m.start_states = vec![0, 3];
        m
    }

    fn greedy(n: usize) -> TabularPolicy {
        TabularPolicy::Greedy { choice: vec![0; n] }
    }

    #[test]
    fn harvest_keeps_everything_at_minus_infinity() {
        let m = chain();
        let h = harvest_trajectories(&m, &greedy(4), f64::NEG_INFINITY, 100).unwrap();
        // The dead-end start yields no transitions and so nothing to keep.
        assert_eq!(h.dataset.trajectories.len(), 1);
        assert_eq!(h.returns[0].ret, 6.0);
        assert_eq!(h.returns[1].steps, 0);
        assert!(h.dataset.trajectories[0].transitions.last().unwrap().terminal);
    }

    #[test]
    fn harvest_above_best_return_is_an_error() {
        let m = chain();
        let err = harvest_trajectories(&m, &greedy(4), 6.5, 100).unwrap_err();
        assert!(matches!(err, BatsError::EmptyHarvest { .. }));
    }

    #[test]
    fn single_pair_is_interpolated() {
        let t = Transition {
            state: vec![0.3, -0.2],
            action: vec![0.7],
            reward: 0.0,
            next_state: vec![0.3, -0.2],
            terminal: false,
        };
        let data = TrajectoryDataset::new(
            2,
            1,
            vec![Trajectory {
                transitions: vec![t.clone(); 8],
            }],
        )
        .unwrap();
        let cfg = BcConfig {
            hidden: vec![32, 32],
            batch_size: 8,
            batch_updates: 500,
            ..BcConfig::default()
        };
        let p = behavior_clone(&data, &[[-1.0, 1.0]], &cfg, 0).unwrap();
        assert!((p.act(&t.state)[0] - 0.7).abs() < 1e-2);
    }

    #[test]
    fn zero_episodes_give_absent_statistics() {
        let s = EvalStats::from_episodes(Vec::new());
        assert_eq!(s.mean, None);
        assert_eq!(s.std, None);
    }
}
