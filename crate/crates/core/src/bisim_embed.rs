//! Learned state embedding whose latent distances approximate the on-policy
//! bisimulation metric of the behaviour data.
//!
//! For random pairs `(i, j)` in a batch the encoder is regressed onto
//! `|r_i - r_j| + discount * ||P(zbar_i, a_i) - P(zbar_j, a_j)||`, where
//! `zbar` are stop-gradient latents and `P` is a deterministic latent
//! dynamics model trained alongside it.

use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::TrajectoryDataset;
use crate::error::{BatsError, Result};
use crate::metric::Normalizer;
use crate::nn::{clip_global_norm, Mlp, Optimizer, OptimizerConfig};
use crate::persist;
use crate::seeding::rng_from;

pub const BISIM_FORMAT: &str = "bats-bisim";
pub const BISIM_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BisimConfig {
    pub encoder_hidden: Vec<usize>,
    pub dynamics_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub discount: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    /// Rewards are multiplied by this before entering the loss.
    pub reward_scale: f64,
    /// Training stops with an error when the smoothed loss exceeds this
    /// multiple of its initial value.
    pub divergence_factor: f64,
}

impl Default for BisimConfig {
    fn default() -> Self {
        BisimConfig {
            encoder_hidden: vec![256, 128, 64],
            dynamics_hidden: vec![64, 64],
            latent_dim: 6,
            discount: 0.99,
            batch_size: 128,
            steps: 2000,
            learning_rate: 1e-3,
            grad_clip: 10.0,
            reward_scale: 1.0,
            divergence_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BisimEmbedding {
    pub encoder: Mlp,
    /// `(latent, normalised action) -> (next latent, reward)`.
    pub latent_model: Mlp,
    pub latent_dim: usize,
    pub state_norm: Normalizer,
    pub action_norm: Normalizer,
    pub loss_history: Vec<f64>,
}

impl BisimEmbedding {
    pub fn state_dim(&self) -> usize {
        self.state_norm.dim()
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.encoder.forward_one(&self.state_norm.normalize(x))
    }

    pub fn encode_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut xn = x.clone();
        self.state_norm.normalize_rows(&mut xn);
        self.encoder.forward(&xn)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persist::save_versioned(path, BISIM_FORMAT, BISIM_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        persist::load_versioned(path, BISIM_FORMAT, BISIM_VERSION)
    }
}

/// `||phi(s) - phi(t)||`.
pub fn embed_distance(embedding: &BisimEmbedding, s: &[f64], t: &[f64]) -> Result<f64> {
    if s.len() != embedding.state_dim() || t.len() != embedding.state_dim() {
        return Err(BatsError::Input("state dimension does not match the embedding".into()));
    }
    let (a, b) = (embedding.encode(s), embedding.encode(t));
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Logged transitions used to train the embedding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransitionBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<Vec<f64>>,
}

impl TransitionBatch {
    pub fn from_dataset(data: &TrajectoryDataset) -> Self {
        let mut b = TransitionBatch::default();
        for r in data.records() {
            b.states.push(r.state.clone());
            b.actions.push(r.action.clone());
            b.rewards.push(r.reward);
            b.next_states.push(r.next_state.clone());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j])
}

pub fn train_bisim(data: &TrajectoryDataset, config: &BisimConfig, rng_seed: u64) -> Result<BisimEmbedding> {
    train_bisim_on(&TransitionBatch::from_dataset(data), config, rng_seed)
}

pub fn train_bisim_on(batch: &TransitionBatch, config: &BisimConfig, rng_seed: u64) -> Result<BisimEmbedding> {
    if batch.is_empty() {
        return Err(BatsError::Input("cannot train an embedding on an empty dataset".into()));
    }
    if config.latent_dim == 0 || config.batch_size < 2 || config.steps == 0 {
        return Err(BatsError::Input("latent_dim, batch_size (>= 2) and steps must be positive".into()));
    }
    if !(config.discount > 0.0 && config.discount < 1.0) {
        return Err(BatsError::Input("discount must be in (0, 1)".into()));
    }
    let sd = batch.states[0].len();
    let ad = batch.actions[0].len();
    let state_norm = Normalizer::fit(batch.states.iter().chain(&batch.next_states).map(Vec::as_slice), sd);
    let action_norm = Normalizer::fit(batch.actions.iter().map(Vec::as_slice), ad);
    let mut s_all = to_array(&batch.states);
    state_norm.normalize_rows(&mut s_all);
    let mut s2_all = to_array(&batch.next_states);
    state_norm.normalize_rows(&mut s2_all);
    let mut a_all = to_array(&batch.actions);
    action_norm.normalize_rows(&mut a_all);
    let r_all: Vec<f64> = batch.rewards.iter().map(|r| r * config.reward_scale).collect();

    let latent = config.latent_dim;
    let mut enc_sizes = vec![sd];
    enc_sizes.extend(&config.encoder_hidden);
    enc_sizes.push(latent);
    let mut dyn_sizes = vec![latent + ad];
    dyn_sizes.extend(&config.dynamics_hidden);
    dyn_sizes.push(latent + 1);
    let mut encoder = Mlp::new(&enc_sizes, &mut rng_from(rng_seed, &[0]));
    let mut latent_model = Mlp::new(&dyn_sizes, &mut rng_from(rng_seed, &[1]));
    let adam = OptimizerConfig::Adam {
        learning_rate: config.learning_rate,
    };
    let mut enc_opt = Optimizer::new(adam.clone(), &encoder);
    let mut dyn_opt = Optimizer::new(adam, &latent_model);
    let mut rng = rng_from(rng_seed, &[2]);

    let n = batch.len();
    let b = config.batch_size.min(n.max(2));
    let gamma = config.discount;
    let mut history = Vec::with_capacity(config.steps);
    let mut initial: Option<f64> = None;
    let mut ema = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    for step in 0..config.steps {
        let mut idx = Vec::with_capacity(b);
        while idx.len() < b {
            if cursor >= n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng);

        let xs = s_all.select(Axis(0), &idx);
        let xs2 = s2_all.select(Axis(0), &idx);
        let xa = a_all.select(Axis(0), &idx);
        let r: Vec<f64> = idx.iter().map(|&i| r_all[i]).collect();

        // Stop-gradient latents and their model predictions.
        let z_bar = encoder.forward(&xs);
        let z_next_bar = encoder.forward(&xs2);
        let dyn_in = ndarray::concatenate(Axis(1), &[z_bar.view(), xa.view()]).expect("rows agree");
        let (dyn_out, dyn_tape) = latent_model.forward_tape(&dyn_in);
        let pred_next = dyn_out.slice(s![.., ..latent]).to_owned();

        // Bisimulation regression on the encoder.
        let (z, enc_tape) = encoder.forward_tape(&xs);
        let mut grad_z = Array2::zeros(z.raw_dim());
        let mut bisim_loss = 0.0;
        for i in 0..b {
            let j = perm[i];
            let diff = &z.row(i) - &z.row(j);
            let dist = diff.dot(&diff).sqrt();
            let pd = &pred_next.row(i) - &pred_next.row(j);
            let target = (r[i] - r[j]).abs() + gamma * pd.dot(&pd).sqrt();
            let err = dist - target;
            bisim_loss += err * err / b as f64;
            if dist > 1e-12 {
                let g = &diff * (2.0 * err / (b as f64 * dist));
                let mut gi = grad_z.row_mut(i);
                gi += &g;
                let mut gj = grad_z.row_mut(j);
                gj -= &g;
            }
        }

        // Latent model: next latent and reward.
        let mut grad_dyn = Array2::zeros(dyn_out.raw_dim());
        let mut model_loss = 0.0;
        let scale = 1.0 / b as f64;
        for i in 0..b {
            for k in 0..latent {
                let e = dyn_out[[i, k]] - z_next_bar[[i, k]];
                model_loss += e * e * scale;
                grad_dyn[[i, k]] = 2.0 * e * scale;
            }
            let e = dyn_out[[i, latent]] - r[i];
            model_loss += e * e * scale;
            grad_dyn[[i, latent]] = 2.0 * e * scale;
        }

        let loss = bisim_loss + model_loss;
        if !loss.is_finite() {
            return Err(BatsError::training("bisimulation embedding", format!("non-finite loss at step {step}")));
        }
        let init = *initial.get_or_insert(loss.max(1e-12));
        ema = if step == 0 { loss } else { 0.95 * ema + 0.05 * loss };
        if ema > config.divergence_factor * init {
            return Err(BatsError::training(
                "bisimulation embedding",
                format!("loss diverged to {ema:.3e} from {init:.3e} at step {step}"),
            ));
        }
        history.push(loss);

        let (mut g_enc, _) = encoder.backward(&enc_tape, &grad_z);
        clip_global_norm(&mut g_enc, config.grad_clip);
        enc_opt.step(&mut encoder, &g_enc);
        let (mut g_dyn, _) = latent_model.backward(&dyn_tape, &grad_dyn);
        clip_global_norm(&mut g_dyn, config.grad_clip);
        dyn_opt.step(&mut latent_model, &g_dyn);
    }
    Ok(BisimEmbedding {
        encoder,
        latent_model,
        latent_dim: latent,
        state_norm,
        action_norm,
        loss_history: history,
    })
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_of_monotone_map_is_one() {
        let a = [0.1, 0.5, 0.3, 2.0, 1.0];
        let b: Vec<f64> = a.iter().map(|x: &f64| x.powi(3) + 1.0).collect();
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((spearman(&a, &c) + 1.0).abs() < 1e-12);
    }
}
