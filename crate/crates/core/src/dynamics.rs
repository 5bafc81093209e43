//! Probabilistic forward-model ensemble and reward model used for planning.
//!
//! Members predict the standardised state delta as a diagonal Gaussian. Only
//! the means are used at planning time; the variance heads exist so the
//! members are fit by likelihood rather than plain regression.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TrajectoryDataset;
use crate::error::{BatsError, Result};
use crate::metric::{DistanceMetric, Normalizer};
use crate::nn::{clip_global_norm, Mlp, Optimizer, OptimizerConfig};
use crate::persist;
use crate::seeding::rng_from;

pub const DYNAMICS_FORMAT: &str = "bats-dynamics";
pub const DYNAMICS_VERSION: u32 = 1;

/// Anything that can push batches of states forward, member by member.
pub trait ForwardModel {
    fn n_members(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Mean next states of one member for a batch (`rows = samples`).
    fn step_member_batch(&self, member: usize, states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64>;
    /// Predicted rewards for a batch.
    fn reward_batch(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Array1<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub hidden: Vec<usize>,
    pub reward_hidden: Vec<usize>,
    pub n_trained: usize,
    pub n_kept: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub validation_max: usize,
    pub optimizer: OptimizerConfig,
    pub grad_clip: f64,
    pub min_log_var: f64,
    pub max_log_var: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            hidden: vec![200, 200, 200, 200],
            reward_hidden: vec![200, 200],
            n_trained: 7,
            n_kept: 5,
            batch_size: 256,
            max_epochs: 100,
            patience: 10,
            validation_fraction: 0.1,
            validation_max: 1000,
            optimizer: OptimizerConfig::SgdMomentum {
                learning_rate: 1e-3,
                momentum: 0.9,
            },
            grad_clip: 10.0,
            min_log_var: -10.0,
            max_log_var: 0.5,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_kept == 0 || self.n_kept > self.n_trained {
            return Err(BatsError::Input(format!(
                "need 1 <= n_kept ({}) <= n_trained ({})",
                self.n_kept, self.n_trained
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(BatsError::Input("batch_size and max_epochs must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(BatsError::Input("validation_fraction must be in (0, 1)".into()));
        }
        if !(self.min_log_var < self.max_log_var) {
            return Err(BatsError::Input("min_log_var must be below max_log_var".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsEnsemble {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Kept members, best validation loss first.
    pub members: Vec<Mlp>,
    /// Indices (into the trained set) of the kept members, aligned with `members`.
    pub kept_indices: Vec<usize>,
    pub reward_head: Mlp,
    pub n_trained: usize,
    pub n_kept: usize,
    /// Validation mean-squared error (standardised delta units) of every trained member.
    pub validation_losses: Vec<f64>,
    pub reward_validation_loss: f64,
    pub state_norm: Normalizer,
    pub action_norm: Normalizer,
    pub delta_norm: Normalizer,
    pub reward_norm: Normalizer,
    pub min_log_var: f64,
    pub max_log_var: f64,
}

/// Per-member means and their element-wise average.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub members: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smoothly squash a raw log-variance into `[lo, hi]`; returns value and derivative.
pub(crate) fn soft_clamp(raw: f64, lo: f64, hi: f64) -> (f64, f64) {
    let upper = hi - softplus(hi - raw);
    let d_upper = sigmoid(hi - raw);
    let v = lo + softplus(upper - lo);
    // Softplus rounding can overshoot `hi` by ~1e-5 far above the range.
    (v.clamp(lo, hi), d_upper * sigmoid(upper - lo))
}

fn inputs(state_norm: &Normalizer, action_norm: &Normalizer, states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    let mut s = states.clone();
    state_norm.normalize_rows(&mut s);
    let mut a = actions.clone();
    action_norm.normalize_rows(&mut a);
    ndarray::concatenate(Axis(1), &[s.view(), a.view()]).expect("batch rows agree")
}

impl DynamicsEnsemble {
    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    fn member_output(&self, member: usize, x: &Array2<f64>) -> Array2<f64> {
        let out = self.members[member].forward(x);
        out.slice(s![.., ..self.state_dim]).to_owned()
    }

    /// Log-variance heads of one member after clamping (standardised delta units).
    pub fn member_log_var(&self, member: usize, states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
        let x = inputs(&self.state_norm, &self.action_norm, states, actions);
        let out = self.members[member].forward(&x);
        out.slice(s![.., self.state_dim..])
            .mapv(|r| soft_clamp(r, self.min_log_var, self.max_log_var).0)
    }

    pub fn predict(&self, state: &[f64], action: &[f64]) -> Result<Prediction> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(BatsError::Input(format!(
                "expected state dim {} and action dim {}, got {} and {}",
                self.state_dim,
                self.action_dim,
                state.len(),
                action.len()
            )));
        }
        let s = Array2::from_shape_vec((1, self.state_dim), state.to_vec()).expect("shape");
        let a = Array2::from_shape_vec((1, self.action_dim), action.to_vec()).expect("shape");
        let members: Vec<Vec<f64>> = (0..self.n_members())
            .map(|m| self.step_member_batch(m, &s, &a).row(0).to_vec())
            .collect();
        Ok(Prediction {
            mean: aggregate(&members),
            members,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persist::save_versioned(path, DYNAMICS_FORMAT, DYNAMICS_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        persist::load_versioned(path, DYNAMICS_FORMAT, DYNAMICS_VERSION)
    }
}

impl ForwardModel for DynamicsEnsemble {
    fn n_members(&self) -> usize {
        self.members.len()
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn step_member_batch(&self, member: usize, states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
        let x = inputs(&self.state_norm, &self.action_norm, states, actions);
        let mut delta = self.member_output(member, &x);
        self.delta_norm.denormalize_rows(&mut delta);
        delta + states
    }

    fn reward_batch(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Array1<f64> {
        let x = inputs(&self.state_norm, &self.action_norm, states, actions);
        let mut r = self.reward_head.forward(&x);
        self.reward_norm.denormalize_rows(&mut r);
        r.column(0).to_owned()
    }
}

fn aggregate(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let dim = rows.first().map_or(0, Vec::len);
    (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Every member's state after applying `actions` in order from `state`.
pub fn member_rollouts<M: ForwardModel + ?Sized>(model: &M, state: &[f64], actions: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let s0 = Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("shape");
    (0..model.n_members())
        .map(|m| {
            let mut s = s0.clone();
            for a in actions {
                let a = Array2::from_shape_vec((1, a.len()), a.clone()).expect("shape");
                s = model.step_member_batch(m, &s, &a);
            }
            s.row(0).to_vec()
        })
        .collect()
}

/// Nearest-rank quantile: the `ceil(q n)`-th smallest value.
pub fn nearest_rank_quantile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    values[rank.min(values.len()) - 1]
}

/// The `q`-quantile over members of the distance between each member's
/// terminal state and `target`.
pub fn member_quantile_distance<M: ForwardModel + ?Sized>(
    model: &M,
    state: &[f64],
    actions: &[Vec<f64>],
    target: &[f64],
    q: f64,
    metric: &DistanceMetric,
) -> Result<f64> {
    if actions.is_empty() {
        return Err(BatsError::Input("action sequence must be nonempty".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(BatsError::Input(format!("quantile {q} outside (0, 1]")));
    }
    if state.len() != model.state_dim() || target.len() != model.state_dim() {
        return Err(BatsError::Input("state dimension mismatch".into()));
    }
    if actions.iter().any(|a| a.len() != model.action_dim()) {
        return Err(BatsError::Input("action dimension mismatch".into()));
    }
    let mut d: Vec<f64> = member_rollouts(model, state, actions)
        .iter()
        .map(|s| metric.distance(s, target))
        .collect();
    Ok(nearest_rank_quantile(&mut d, q))
}

struct TrainingArrays {
    x: Array2<f64>,
    y: Array2<f64>,
    r: Array2<f64>,
}

pub(crate) fn gaussian_nll_grad(out: &Array2<f64>, y: &Array2<f64>, lo: f64, hi: f64) -> (f64, Array2<f64>) {
    let (n, two_d) = out.dim();
    let d = two_d / 2;
    let mut grad = Array2::zeros((n, two_d));
    let mut loss = 0.0;
    let scale = 1.0 / (n * d) as f64;
    for i in 0..n {
        for j in 0..d {
            let mu = out[[i, j]];
            let (lv, dlv) = soft_clamp(out[[i, d + j]], lo, hi);
            let inv_var = (-lv).exp();
            let err = mu - y[[i, j]];
            loss += 0.5 * (err * err * inv_var + lv) * scale;
            grad[[i, j]] = err * inv_var * scale;
            grad[[i, d + j]] = 0.5 * (1.0 - err * err * inv_var) * dlv * scale;
        }
    }
    (loss, grad)
}

fn mse_grad(out: &Array2<f64>, y: &Array2<f64>) -> (f64, Array2<f64>) {
    let scale = 1.0 / out.len() as f64;
    let diff = out - y;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() * scale;
    (loss, diff * (2.0 * scale))
}

fn mean_head_mse(net: &Mlp, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let d = y.ncols();
    let out = net.forward(x);
    let diff = &out.slice(s![.., ..d]) - y;
    diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64
}

enum Objective {
    Nll { lo: f64, hi: f64 },
    Mse,
}

/// Minibatch training with early stopping on validation MSE of the first
/// `y.ncols()` outputs. Returns the best network and its validation loss.
#[allow(clippy::too_many_arguments)]
fn fit<R: Rng>(
    mut net: Mlp,
    x: &Array2<f64>,
    y: &Array2<f64>,
    train_idx: &[usize],
    val_x: &Array2<f64>,
    val_y: &Array2<f64>,
    objective: Objective,
    config: &DynamicsConfig,
    rng: &mut R,
    label: &str,
) -> Result<(Mlp, f64)> {
    let mut opt = Optimizer::new(config.optimizer.clone(), &net);
    let mut best = (net.clone(), mean_head_mse(&net, val_x, val_y));
    let mut stale = 0usize;
    let mut order = train_idx.to_vec();
    for epoch in 0..config.max_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let bx = x.select(Axis(0), chunk);
            let by = y.select(Axis(0), chunk);
            let (out, tape) = net.forward_tape(&bx);
            let (loss, g) = match objective {
                Objective::Nll { lo, hi } => gaussian_nll_grad(&out, &by, lo, hi),
                Objective::Mse => mse_grad(&out, &by),
            };
            if !loss.is_finite() {
                return Err(BatsError::training(label, format!("non-finite loss at epoch {epoch}")));
            }
            let (mut grads, _) = net.backward(&tape, &g);
            clip_global_norm(&mut grads, config.grad_clip);
            opt.step(&mut net, &grads);
        }
        let val = mean_head_mse(&net, val_x, val_y);
        if !val.is_finite() {
            return Err(BatsError::training(label, format!("non-finite validation loss at epoch {epoch}")));
        }
        if val < best.1 {
            best = (net.clone(), val);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log::debug!("{label}: early stop at epoch {epoch}");
                break;
            }
        }
    }
    Ok(best)
}

/// Fit `n_trained` bootstrapped members and a reward head; keep the best `n_kept`.
pub fn train_ensemble(data: &TrajectoryDataset, config: &DynamicsConfig, rng_seed: u64) -> Result<DynamicsEnsemble> {
    config.validate()?;
    let records: Vec<_> = data.records().collect();
    let n = records.len();
    let n_val = ((n as f64 * config.validation_fraction).floor() as usize)
        .min(config.validation_max)
        .max(1);
    if n < n_val + config.batch_size {
        return Err(BatsError::Input(format!(
            "{n} records is fewer than validation ({n_val}) plus batch size ({})",
            config.batch_size
        )));
    }
    let (sd, ad) = (data.state_dim, data.action_dim);
    let state_norm = Normalizer::fit(records.iter().map(|r| r.state.as_slice()), sd);
    let action_norm = Normalizer::fit(records.iter().map(|r| r.action.as_slice()), ad);
    let deltas: Vec<Vec<f64>> = records
        .iter()
        .map(|r| r.next_state.iter().zip(&r.state).map(|(a, b)| a - b).collect())
        .collect();
    let delta_norm = Normalizer::fit(deltas.iter().map(Vec::as_slice), sd);
    let rewards: Vec<[f64; 1]> = records.iter().map(|r| [r.reward]).collect();
    let reward_norm = Normalizer::fit(rewards.iter().map(|r| r.as_slice()), 1);

    let mut states = Array2::zeros((n, sd));
    let mut actions = Array2::zeros((n, ad));
    let mut y = Array2::zeros((n, sd));
    let mut r = Array2::zeros((n, 1));
    for (i, rec) in records.iter().enumerate() {
        states.row_mut(i).assign(&ndarray::ArrayView1::from(rec.state.as_slice()));
        actions.row_mut(i).assign(&ndarray::ArrayView1::from(rec.action.as_slice()));
        y.row_mut(i).assign(&ndarray::ArrayView1::from(delta_norm.normalize(&deltas[i]).as_slice()));
        r[[i, 0]] = (rec.reward - reward_norm.mean[0]) / reward_norm.scale[0];
    }
    let arrays = TrainingArrays {
        x: inputs(&state_norm, &action_norm, &states, &actions),
        y,
        r,
    };

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from(rng_seed, &[0]));
    let (val_idx, train_idx) = perm.split_at(n_val);
    let val_x = arrays.x.select(Axis(0), val_idx);
    let val_y = arrays.y.select(Axis(0), val_idx);
    let val_r = arrays.r.select(Axis(0), val_idx);

    let mut sizes = vec![sd + ad];
    sizes.extend(&config.hidden);
    sizes.push(2 * sd);

    let mut trained = Vec::with_capacity(config.n_trained);
    for m in 0..config.n_trained {
        let mut boot_rng = rng_from(rng_seed, &[1, m as u64]);
        let boot: Vec<usize> = (0..train_idx.len())
            .map(|_| train_idx[boot_rng.random_range(0..train_idx.len())])
            .collect();
        let net = Mlp::new(&sizes, &mut rng_from(rng_seed, &[2, m as u64]));
        let (net, loss) = fit(
            net,
            &arrays.x,
            &arrays.y,
            &boot,
            &val_x,
            &val_y,
            Objective::Nll {
                lo: config.min_log_var,
                hi: config.max_log_var,
            },
            config,
            &mut rng_from(rng_seed, &[3, m as u64]),
            &format!("dynamics member {m}"),
        )?;
        log::info!("dynamics member {m}: validation mse {loss:.3e}");
        trained.push((net, loss));
    }

    let mut reward_sizes = vec![sd + ad];
    reward_sizes.extend(&config.reward_hidden);
    reward_sizes.push(1);
    let (reward_head, reward_validation_loss) = fit(
        Mlp::new(&reward_sizes, &mut rng_from(rng_seed, &[4])),
        &arrays.x,
        &arrays.r,
        train_idx,
        &val_x,
        &val_r,
        Objective::Mse,
        config,
        &mut rng_from(rng_seed, &[5]),
        "reward head",
    )?;

    let validation_losses: Vec<f64> = trained.iter().map(|t| t.1).collect();
    let mut ranked: Vec<usize> = (0..trained.len()).collect();
    ranked.sort_by(|&a, &b| validation_losses[a].total_cmp(&validation_losses[b]).then(a.cmp(&b)));
    ranked.truncate(config.n_kept);
    let members = ranked.iter().map(|&i| trained[i].0.clone()).collect();

    Ok(DynamicsEnsemble {
        state_dim: sd,
        action_dim: ad,
        members,
        kept_indices: ranked,
        reward_head,
        n_trained: config.n_trained,
        n_kept: config.n_kept,
        validation_losses,
        reward_validation_loss,
        state_norm,
        action_norm,
        delta_norm,
        reward_norm,
        min_log_var: config.min_log_var,
        max_log_var: config.max_log_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_examples() {
        let mut d = vec![5.0, 3.0, 1.0, 4.0, 2.0];
        assert_eq!(nearest_rank_quantile(&mut d, 0.8), 4.0);
        assert_eq!(nearest_rank_quantile(&mut d, 1.0), 5.0);
        assert_eq!(nearest_rank_quantile(&mut d, 0.01), 1.0);
    }

    #[test]
    fn soft_clamp_stays_in_bounds_and_matches_derivative() {
        for raw in [-50.0, -3.0, -0.2, 0.0, 0.4, 2.0, 40.0] {
            let (v, dv) = soft_clamp(raw, -10.0, 0.5);
            assert!((-10.0..=0.5).contains(&v));
            let h = 1e-6;
            let fd = (soft_clamp(raw + h, -10.0, 0.5).0 - soft_clamp(raw - h, -10.0, 0.5).0) / (2.0 * h);
            assert!((fd - dv).abs() < 1e-6, "raw {raw}: {fd} vs {dv}");
        }
    }

    #[test]
    fn nll_gradient_matches_finite_difference() {
        let out = ndarray::array![[0.3, -0.2, 0.1, -1.5], [1.1, 0.4, -0.7, 0.2]];
        let y = ndarray::array![[0.0, 0.5], [1.0, -0.3]];
        let (_, g) = gaussian_nll_grad(&out, &y, -10.0, 0.5);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut p = out.clone();
                p[[i, j]] += h;
                let mut m = out.clone();
                m[[i, j]] -= h;
                let fd = (gaussian_nll_grad(&p, &y, -10.0, 0.5).0 - gaussian_nll_grad(&m, &y, -10.0, 0.5).0) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn keep_count_validated() {
        let bad = DynamicsConfig {
            n_trained: 3,
            n_kept: 4,
            ..DynamicsConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
