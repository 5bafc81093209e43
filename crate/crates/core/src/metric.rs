use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bisim_embed::BisimEmbedding;
use crate::spatial::squared_distance;

/// Per-dimension standardisation statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation per column; flat columns get scale 1.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        // Welford updates: constant columns give exactly zero variance.
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            n += 1;
            for (j, &x) in row.iter().enumerate() {
                let delta = x - mean[j];
                mean[j] += delta / n as f64;
                m2[j] += delta * (x - mean[j]);
            }
        }
        if n == 0 {
            return Normalizer::identity(dim);
        }
        let scale = m2
            .iter()
            .map(|&v| {
                let sd = (v / n as f64).max(0.0).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    pub fn normalize_rows(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
    }

    pub fn denormalize_rows(&self, z: &mut Array2<f64>) {
        for mut row in z.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.scale[j] + self.mean[j];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Euclidean,
    NormalizedEuclidean,
    LearnedEmbedding,
}

/// Distances between environment states.
///
/// Every variant is a Euclidean distance after mapping states through
/// [`DistanceMetric::embed`].
#[derive(Clone, Debug)]
pub enum DistanceMetric {
    Euclidean,
    /// Coordinates divided by the per-dimension scale.
    Normalized(Vec<f64>),
    Learned(Arc<BisimEmbedding>),
}

impl DistanceMetric {
    pub fn normalized(normalizer: &Normalizer) -> Self {
        DistanceMetric::Normalized(normalizer.scale.clone())
    }

    pub fn kind(&self) -> MetricKind {
        match self {
            DistanceMetric::Euclidean => MetricKind::Euclidean,
            DistanceMetric::Normalized(_) => MetricKind::NormalizedEuclidean,
            DistanceMetric::Learned(_) => MetricKind::LearnedEmbedding,
        }
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        match self {
            DistanceMetric::Euclidean => x.to_vec(),
            DistanceMetric::Normalized(scale) => x.iter().zip(scale).map(|(v, s)| v / s).collect(),
            DistanceMetric::Learned(e) => e.encode(x),
        }
    }

    /// Row-wise [`DistanceMetric::embed`].
    pub fn embed_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            DistanceMetric::Euclidean => x.clone(),
            DistanceMetric::Normalized(scale) => {
                let mut out = x.clone();
                for mut row in out.rows_mut() {
                    for (v, s) in row.iter_mut().zip(scale) {
                        *v /= s;
                    }
                }
                out
            }
            DistanceMetric::Learned(e) => e.encode_rows(x),
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceMetric::Euclidean => squared_distance(a, b).sqrt(),
            _ => squared_distance(&self.embed(a), &self.embed(b)).sqrt(),
        }
    }
}
