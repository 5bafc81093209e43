//! Cross-entropy method search for action sequences that carry the model from
//! a source state to within a tolerance of a target state.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{nearest_rank_quantile, ForwardModel};
use crate::error::{BatsError, Result};
use crate::metric::DistanceMetric;
use crate::seeding::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub iterations: usize,
    /// Initial sampling std per action dimension; empty means half the bound width.
    pub init_std: Vec<f64>,
    /// `[lo, hi]` per action dimension.
    pub action_bounds: Vec<[f64; 2]>,
    pub restarts: usize,
    /// Member quantile used to score a sequence.
    pub quantile: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            population: 200,
            elite_fraction: 0.1,
            iterations: 5,
            init_std: Vec::new(),
            action_bounds: vec![[-1.0, 1.0]],
            restarts: 1,
            quantile: 0.8,
        }
    }
}

impl CemConfig {
    pub fn with_bounds(bounds: Vec<[f64; 2]>) -> Self {
        CemConfig {
            action_bounds: bounds,
            ..CemConfig::default()
        }
    }

    pub fn n_elite(&self) -> usize {
        (self.population as f64 * self.elite_fraction).floor() as usize
    }

    pub fn validate(&self, action_dim: usize) -> Result<()> {
        if self.n_elite() < 2 {
            return Err(BatsError::Input(format!(
                "population {} x elite fraction {} leaves fewer than 2 elites",
                self.population, self.elite_fraction
            )));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction < 1.0) {
            return Err(BatsError::Input("elite_fraction must be in (0, 1)".into()));
        }
        if self.iterations == 0 || self.restarts == 0 {
            return Err(BatsError::Input("iterations and restarts must be positive".into()));
        }
        if self.action_bounds.len() != action_dim {
            return Err(BatsError::Input(format!(
                "{} action bounds given for action dimension {action_dim}",
                self.action_bounds.len()
            )));
        }
        if self
            .action_bounds
            .iter()
            .any(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && lo < hi))
        {
            return Err(BatsError::Input("action bounds must be finite with lo < hi".into()));
        }
        if !self.init_std.is_empty() && self.init_std.len() != action_dim {
            return Err(BatsError::Input("init_std length must match the action dimension".into()));
        }
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(BatsError::Input("quantile must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub actions: Vec<Vec<f64>>,
    pub achieved_distance: f64,
    pub accepted: bool,
    /// Member-averaged states after each action.
    pub predicted_states: Vec<Vec<f64>>,
    /// Best score after each CEM iteration, concatenated over restarts.
    #[serde(default)]
    pub score_history: Vec<f64>,
}

/// Scores for a population of sequences, shape `(population, k, action_dim)`.
fn score_population<M: ForwardModel + ?Sized>(
    model: &M,
    source: &[f64],
    target: &[f64],
    seqs: &Array3<f64>,
    quantile: f64,
    metric: &DistanceMetric,
) -> Vec<f64> {
    let (p, k, _) = seqs.dim();
    let sd = source.len();
    let target_embedded = metric.embed(target);
    let mut per_member: Vec<Vec<f64>> = Vec::with_capacity(model.n_members());
    for m in 0..model.n_members() {
        let mut states = Array2::from_shape_fn((p, sd), |(_, j)| source[j]);
        for t in 0..k {
            let actions = seqs.index_axis(Axis(1), t).to_owned();
            states = model.step_member_batch(m, &states, &actions);
        }
        let z = metric.embed_rows(&states);
        per_member.push(
            z.rows()
                .into_iter()
                .map(|row| {
                    row.iter()
                        .zip(&target_embedded)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect(),
        );
    }
    (0..p)
        .map(|i| {
            let mut d: Vec<f64> = per_member.iter().map(|m| m[i]).collect();
            let q = nearest_rank_quantile(&mut d, quantile);
            if q.is_finite() {
                q
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

fn predicted_means<M: ForwardModel + ?Sized>(model: &M, source: &[f64], actions: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = model.n_members();
    let sd = source.len();
    let mut states = Array2::from_shape_fn((n, sd), |(_, j)| source[j]);
    let mut out = Vec::with_capacity(actions.len());
    for a in actions {
        let mut next = Array2::zeros((n, sd));
        let batch = Array2::from_shape_fn((1, a.len()), |(_, j)| a[j]);
        for m in 0..n {
            let s = states.row(m).to_owned().insert_axis(Axis(0));
            next.row_mut(m).assign(&model.step_member_batch(m, &s, &batch).row(0));
        }
        out.push(next.mean_axis(Axis(0)).expect("at least one member").to_vec());
        states = next;
    }
    out
}

/// Plan `k` actions from `source` towards `target`; accepted when the member
/// quantile distance falls strictly below `delta`.
#[allow(clippy::too_many_arguments)]
pub fn plan_stitch<M: ForwardModel + ?Sized>(
    model: &M,
    source: &[f64],
    target: &[f64],
    k: usize,
    delta: f64,
    metric: &DistanceMetric,
    config: &CemConfig,
    rng_seed: u64,
) -> Result<PlanResult> {
    let ad = model.action_dim();
    config.validate(ad)?;
    if k == 0 {
        return Err(BatsError::Input("plan length k must be at least 1".into()));
    }
    if !(delta > 0.0) {
        return Err(BatsError::Input(format!("planning tolerance {delta} must be positive")));
    }
    if source.len() != model.state_dim() || target.len() != model.state_dim() {
        return Err(BatsError::Input("state dimension mismatch".into()));
    }
    let lo: Vec<f64> = config.action_bounds.iter().map(|b| b[0]).collect();
    let hi: Vec<f64> = config.action_bounds.iter().map(|b| b[1]).collect();
    let floor: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 1e-3 * (h - l)).collect();
    let init_std: Vec<f64> = if config.init_std.is_empty() {
        lo.iter().zip(&hi).map(|(l, h)| 0.5 * (h - l)).collect()
    } else {
        config.init_std.clone()
    };
    let n_elite = config.n_elite();
    let p = config.population;

    let mut best_score = f64::INFINITY;
    let mut best_seq: Option<Array2<f64>> = None;
    let mut history = Vec::with_capacity(config.iterations * config.restarts);
    for restart in 0..config.restarts {
        let mut rng = rng_from(rng_seed, &[restart as u64]);
        let mut mean = Array2::from_shape_fn((k, ad), |(_, j)| 0.5 * (lo[j] + hi[j]));
        let mut std = Array2::from_shape_fn((k, ad), |(_, j)| init_std[j]);
        for _ in 0..config.iterations {
            let seqs = Array3::from_shape_fn((p, k, ad), |(_, t, j)| {
                let z: f64 = rng.sample(StandardNormal);
                (mean[[t, j]] + std[[t, j]] * z).clamp(lo[j], hi[j])
            });
            let scores = score_population(model, source, target, &seqs, config.quantile, metric);
            let mut order: Vec<usize> = (0..p).collect();
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
            if scores[order[0]] < best_score || best_seq.is_none() {
                best_score = scores[order[0]];
                best_seq = Some(seqs.index_axis(Axis(0), order[0]).to_owned());
            }
            history.push(best_score);
            let elites = seqs.select(Axis(0), &order[..n_elite]);
            mean = elites.mean_axis(Axis(0)).expect("elites nonempty");
            let var = elites.var_axis(Axis(0), 0.0);
            std = Array2::from_shape_fn((k, ad), |(t, j)| var[[t, j]].sqrt().max(floor[j]));
        }
    }
    let best = best_seq.expect("at least one iteration ran");
    let actions: Vec<Vec<f64>> = best.rows().into_iter().map(|r| r.to_vec()).collect();
    Ok(PlanResult {
        predicted_states: predicted_means(model, source, &actions),
        actions,
        achieved_distance: best_score,
        accepted: best_score < delta,
        score_history: history,
    })
}

/// Repeat [`plan_stitch`] `attempts` times with derived seeds and keep the
/// closest result. The first attempt uses `rng_seed` itself.
#[allow(clippy::too_many_arguments)]
pub fn multi_start_test_edge<M: ForwardModel + ?Sized>(
    model: &M,
    source: &[f64],
    target: &[f64],
    k: usize,
    delta: f64,
    metric: &DistanceMetric,
    config: &CemConfig,
    attempts: usize,
    rng_seed: u64,
) -> Result<PlanResult> {
    if attempts == 0 {
        return Err(BatsError::Input("attempts must be at least 1".into()));
    }
    let mut best: Option<PlanResult> = None;
    for i in 0..attempts {
        let seed = if i == 0 { rng_seed } else { derive_seed(rng_seed, &[i as u64]) };
        let r = plan_stitch(model, source, target, k, delta, metric, config, seed)?;
        if best.as_ref().is_none_or(|b| r.achieved_distance < b.achieved_distance) {
            best = Some(r);
        }
    }
    Ok(best.expect("attempts >= 1"))
}
