//! Command-line driver for the stitching pipeline. Every subcommand reads
//! one JSON config and works inside the run directory named there.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod workspace;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use bats_core::stitching::PenaltyMode;

pub use config::PipelineConfig;
pub use error::{CliError, CliResult};
pub use workspace::Workspace;

#[derive(Debug, Parser)]
#[command(name = "bats", version, about = "Trajectory stitching over offline datasets")]
pub struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the run directory from the config.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,

    /// Override the root seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PenaltyArg {
    AllEdges,
    FinalGamma,
}

impl From<PenaltyArg> for PenaltyMode {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::AllEdges => PenaltyMode::AllEdges,
            PenaltyArg::FinalGamma => PenaltyMode::FinalGamma,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or import) the offline dataset.
    GenData {
        #[arg(long)]
        n_random: Option<usize>,
        #[arg(long)]
        n_expert: Option<usize>,
    },
    /// Train the dynamics ensemble.
    TrainDynamics {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the learned state embedding.
    TrainBisim {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the stitching loop.
    Stitch {
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Harvest the stitched graph and clone a policy.
    Clone {
        #[arg(long)]
        threshold: Option<f64>,
        /// Clone the raw dataset instead, as a baseline.
        #[arg(long)]
        raw: bool,
    },
    /// Roll out cloned policies in the environment.
    Evaluate {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Check the value bounds on random finite instances.
    VerifyBounds {
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Recompute stitch penalties with a new coefficient and re-solve.
    Relabel {
        #[arg(long)]
        penalty_coefficient: f64,
        #[arg(long, value_enum)]
        penalty_mode: Option<PenaltyArg>,
    },
    /// Write CSV series for plotting.
    ExportPlots,
    /// Every stage in order.
    RunAll,
}

/// Config with global and per-command overrides applied.
pub fn resolve_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::GenData { n_random, n_expert } => {
            cfg.data.n_random = n_random.unwrap_or(cfg.data.n_random);
            cfg.data.n_expert = n_expert.unwrap_or(cfg.data.n_expert);
        }
        Command::TrainDynamics { epochs: Some(e) } => cfg.dynamics.max_epochs = *e,
        Command::TrainBisim { steps: Some(s) } => cfg.bisim.steps = *s,
        Command::Stitch {
            iterations: Some(n), ..
        } => cfg.bats.n_iterations = *n,
        Command::Clone {
            threshold: Some(t), ..
        } => cfg.harvest.threshold = *t,
        Command::Evaluate { episodes: Some(n) } => cfg.evaluation.episodes = *n,
        Command::VerifyBounds { instances: Some(n) } => cfg.bounds.instances = *n,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    let ws = Workspace::create(&cfg.output_dir)?;
    let show = |v: &dyn erased::Show| println!("{}", v.json());
    match &cli.command {
        Command::GenData { .. } => {
            let d = pipeline::gen_data(&cfg, &ws)?;
            println!("{} trajectories, {} records", d.trajectories.len(), d.n_records());
        }
        Command::TrainDynamics { .. } => {
            let m = pipeline::train_dynamics(&cfg, &ws)?;
            println!("kept {} ensemble members", m.n_members());
        }
        Command::TrainBisim { .. } => {
            pipeline::train_embedding(&cfg, &ws)?;
            println!("embedding written to {}", ws.path(workspace::BISIM).display());
        }
        Command::Stitch { resume, .. } => {
            let s = pipeline::stitch(&cfg, &ws, *resume)?;
            for m in &s.metrics {
                println!(
                    "iteration {:>3}: {} candidates, {} accepted, mean start value {:.4} -> {:.4}",
                    m.iteration, m.candidates, m.accepted, m.mean_start_value, m.mean_start_value_after
                );
            }
        }
        Command::Clone { raw, .. } => {
            let p = pipeline::clone_policy(&cfg, &ws, *raw)?;
            let last = p.loss_history.last().copied().unwrap_or(f64::NAN);
            println!("cloned policy, final batch loss {last:.4}");
        }
        Command::Evaluate { .. } => show(&pipeline::evaluate(&cfg, &ws).map(summary_of)?),
        Command::VerifyBounds { .. } => show(&pipeline::verify_bounds(&cfg, &ws)?),
        Command::Relabel {
            penalty_coefficient,
            penalty_mode,
        } => {
            let mode = penalty_mode.map(PenaltyMode::from).unwrap_or(cfg.bats.penalty_mode);
            show(&pipeline::relabel(&cfg, &ws, *penalty_coefficient, mode)?)
        }
        Command::ExportPlots => {
            for f in pipeline::export_plots(&cfg, &ws)? {
                println!("{}", ws.file(&f).display());
            }
        }
        Command::RunAll => {
            let s = pipeline::run_all(&cfg, &ws)?;
            show(&summary_of(s.evaluation));
        }
    }
    Ok(())
}

/// Evaluation report without per-step traces.
fn summary_of(r: pipeline::EvaluationReport) -> serde_json::Value {
    let brief = |p: &pipeline::PolicyReport| {
        serde_json::json!({
            "mean_return": p.stats.mean,
            "std_return": p.stats.std,
            "tail_reward_mean": p.tail_reward_mean,
        })
    };
    serde_json::json!({
        "episodes": r.episodes,
        "policy": brief(&r.policy),
        "raw": r.raw.as_ref().map(brief),
    })
}

mod erased {
    pub trait Show {
        fn json(&self) -> String;
    }

    impl<T: serde::Serialize> Show for T {
        fn json(&self) -> String {
            serde_json::to_string_pretty(self).expect("serializable")
        }
    }
}
