//! Pipeline configuration: one JSON file, one section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bats_core::bats_loop::BatsConfig;
use bats_core::bisim_embed::BisimConfig;
use bats_core::bounds::InstanceSpec;
use bats_core::dataset::{NeighborMode, Region};
use bats_core::dynamics::DynamicsConfig;
use bats_core::envs::{Env, Environment, GenerateSpec};
use bats_core::metric::MetricKind;
use bats_core::policy_cloning::BcConfig;
use bats_core::seeding::derive_seed;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_random: usize,
    pub n_expert: usize,
    pub episode_len: Option<usize>,
    /// Use an existing dataset file instead of generating one.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_random: 100,
            n_expert: 5,
            episode_len: None,
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarvestConfig {
    /// Undiscounted return a graph rollout needs to be cloned. Required:
    /// pick it from the histogram `clone` prints.
    pub threshold: f64,
    /// Rollout cap; defaults to the environment's episode cap.
    #[serde(default)]
    pub horizon: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Steps at the end of each episode over which goal occupancy is averaged.
    pub tail_window: usize,
    /// Starts (evenly spaced over the harvest) used for residuals.
    pub residual_starts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 20,
            tail_window: 50,
            residual_starts: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsConfig {
    pub instances: usize,
    pub tolerance: f64,
    pub spec: InstanceSpec,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            instances: 100,
            tolerance: 1e-9,
            spec: InstanceSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartRegion {
    pub region: Region,
    /// Replace the trajectory-initial starts instead of adding to them.
    #[serde(default = "yes")]
    pub replace: bool,
}

fn yes() -> bool {
    true
}

fn default_discount() -> f64 {
    0.99
}

fn default_metric() -> MetricKind {
    MetricKind::NormalizedEuclidean
}

fn default_neighbors() -> NeighborMode {
    NeighborMode::Knn(25)
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub env: Env,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default)]
    pub dynamics: DynamicsConfig,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    #[serde(default)]
    pub bisim: BisimConfig,
    #[serde(default = "default_neighbors")]
    pub neighbors: NeighborMode,
    #[serde(default)]
    pub start_region: Option<StartRegion>,
    #[serde(default)]
    pub bats: BatsConfig,
    pub harvest: HarvestConfig,
    #[serde(default)]
    pub cloning: BcConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
}

/// Stream identifiers for per-stage seeds.
#[derive(Clone, Copy, Debug)]
pub enum Stage {
    Data = 1,
    Dynamics = 2,
    Bisim = 3,
    Stitch = 4,
    Clone = 5,
    CloneRaw = 6,
    Evaluate = 7,
    Bounds = 8,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        // Relative dataset paths are taken relative to the config file.
        if let (Some(p), Some(dir)) = (cfg.data.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount {} must lie in (0, 1)", self.discount));
        }
        if self.harvest.threshold.is_nan() {
            return bad("harvest.threshold must be a number".into());
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return bad(format!("data.path {} does not exist", p.display()));
            }
        }
        if let Some(r) = &self.start_region {
            r.region.validate(self.env.state_dim()).map_err(CliError::from_config)?;
        }
        self.bats_config().validate(self.env.action_dim()).map_err(CliError::from_config)?;
        self.dynamics.validate().map_err(CliError::from_config)?;
        self.cloning.validate().map_err(CliError::from_config)?;
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, &[stage as u64])
    }

    pub fn generate_spec(&self) -> GenerateSpec {
        GenerateSpec {
            n_random: self.data.n_random,
            n_expert: self.data.n_expert,
            seed: self.stage_seed(Stage::Data),
            episode_len: self.data.episode_len,
        }
    }

    /// Loop settings with the stage seed and the environment's action
    /// bounds substituted.
    pub fn bats_config(&self) -> BatsConfig {
        let mut cfg = BatsConfig {
            rng_seed: self.stage_seed(Stage::Stitch),
            ..self.bats.clone()
        };
        cfg.cem.action_bounds = self.env.action_bounds();
        cfg
    }

    pub fn harvest_horizon(&self) -> usize {
        self.harvest.horizon.unwrap_or_else(|| self.env.max_steps())
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Canonical serialization without the output directory, which is a
    /// location rather than a setting.
    pub fn portable_json(&self) -> String {
        PipelineConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        }
        .to_canonical_json()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.portable_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"seed": 3, "env": {"name": "mountain_car"}, "harvest": {"threshold": 50}}"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = PipelineConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.discount, 0.99);
        assert_eq!(cfg.neighbors, NeighborMode::Knn(25));
        let again = PipelineConfig::from_json(&cfg.to_canonical_json()).unwrap();
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn seed_and_threshold_are_mandatory() {
        let no_seed = r#"{"env": {"name": "mountain_car"}, "harvest": {"threshold": 50}}"#;
        assert!(matches!(PipelineConfig::from_json(no_seed), Err(CliError::Config(_))));
        let no_threshold = r#"{"seed": 1, "env": {"name": "mountain_car"}}"#;
        assert!(matches!(PipelineConfig::from_json(no_threshold), Err(CliError::Config(_))));
    }

    #[test]
    fn planner_bounds_follow_the_environment() {
        let maze = r#"{"seed": 3, "env": {"name": "point_maze"}, "harvest": {"threshold": 50}}"#;
        let cfg = PipelineConfig::from_json(maze).unwrap();
        assert_eq!(cfg.bats_config().cem.action_bounds, vec![[-1.0, 1.0]; 2]);
    }
}
