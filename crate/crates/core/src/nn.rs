//! Small dense ReLU networks with manual backpropagation.
//!
//! Everything that learns in this crate (dynamics members, reward heads, the
//! bisimulation encoder and the cloned policy) is a plain multilayer
//! perceptron operating on row-major batches.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `fan_in x fan_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros_like(other: &Dense) -> Dense {
        Dense {
            weight: Array2::zeros(other.weight.raw_dim()),
            bias: Array1::zeros(other.bias.raw_dim()),
        }
    }
}

/// Parameter gradients, laid out exactly like the network's layers.
pub type Gradients = Vec<Dense>;

/// ReLU on hidden layers, identity on the output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations recorded during a forward pass, consumed by [`Mlp::backward`].
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes` lists every layer width including input and output.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let n_layers = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = if i + 1 == n_layers {
                    (1.0 / fan_in as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                let weight =
                    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.ncols()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.dot(&self.layers[0].weight) + &self.layers[0].bias;
        if last > 0 {
            h.mapv_inplace(relu);
        }
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            h = h.dot(&layer.weight) + &layer.bias;
            if i != last {
                h.mapv_inplace(relu);
            }
        }
        h
    }

    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        self.forward(&row).into_raw_vec_and_offset().0
    }

    pub fn forward_tape(&self, x: &Array2<f64>) -> (Array2<f64>, Tape) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.weight) + &layer.bias;
            inputs.push(h);
            h = if i == last { z.clone() } else { z.mapv(relu) };
            pre_activations.push(z);
        }
        (
            h,
            Tape {
                inputs,
                pre_activations,
            },
        )
    }

    /// Backpropagate `grad_out` (dLoss/dOutput for the taped batch).
    /// Returns parameter gradients and dLoss/dInput.
    pub fn backward(&self, tape: &Tape, grad_out: &Array2<f64>) -> (Gradients, Array2<f64>) {
        let last = self.layers.len() - 1;
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i != last {
                Zip::from(&mut g)
                    .and(&tape.pre_activations[i])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            let weight = tape.inputs[i].t().dot(&g);
            let bias = g.sum_axis(Axis(0));
            let g_in = g.dot(&self.layers[i].weight.t());
            grads.push(Dense { weight, bias });
            g = g_in;
        }
        grads.reverse();
        (grads, g)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

pub fn global_norm(grads: &[Dense]) -> f64 {
    grads
        .iter()
        .map(|g| g.weight.iter().map(|v| v * v).sum::<f64>() + g.bias.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Dense], max_norm: f64) {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads {
            g.weight.mapv_inplace(|v| v * s);
            g.bias.mapv_inplace(|v| v * s);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    SgdMomentum { learning_rate: f64, momentum: f64 },
    Adam { learning_rate: f64 },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Dense>,
    second: Vec<Dense>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, net: &Mlp) -> Self {
        let first = net.layers.iter().map(Dense::zeros_like).collect();
        let second = net.layers.iter().map(Dense::zeros_like).collect();
        Optimizer {
            config,
            first,
            second,
            steps: 0,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &[Dense]) {
        self.steps += 1;
        match self.config {
            OptimizerConfig::SgdMomentum {
                learning_rate,
                momentum,
            } => {
                for ((layer, vel), g) in net.layers.iter_mut().zip(&mut self.first).zip(grads) {
                    sgd_update(&mut layer.weight, &mut vel.weight, &g.weight, learning_rate, momentum);
                    sgd_update(&mut layer.bias, &mut vel.bias, &g.bias, learning_rate, momentum);
                }
            }
            OptimizerConfig::Adam { learning_rate } => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let step = learning_rate * c2.sqrt() / c1;
                for (((layer, m), v), g) in net
                    .layers
                    .iter_mut()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                    .zip(grads)
                {
                    adam_update(&mut layer.weight, &mut m.weight, &mut v.weight, &g.weight, step);
                    adam_update(&mut layer.bias, &mut m.bias, &mut v.bias, &g.bias, step);
                }
            }
        }
    }
}

fn sgd_update<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    velocity: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    lr: f64,
    momentum: f64,
) {
    Zip::from(param).and(velocity).and(grad).for_each(|p, v, &g| {
        *v = momentum * *v + g;
        *p -= lr * *v;
    });
}

fn adam_update<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    step: f64,
) {
    Zip::from(param).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= step * *m / (v.sqrt() + ADAM_EPS);
    });
}

/// Pack rows into a batch matrix.
pub fn rows_to_array(rows: &[&[f64]]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&ndarray::ArrayView1::from(*r));
    }
    out
}
