//! Best-action trajectory stitching.
//!
//! Offline transitions become a deterministic tabular MDP. A learned forward
//! model plans short action sequences between states that the data never
//! connects, the graph is solved exactly by value iteration, and the
//! resulting policy is distilled into a continuous controller. The `bounds`
//! module certifies value estimates of stitched graphs.

pub mod bats_loop;
pub mod bisim_embed;
pub mod bounds;
pub mod dataset;
pub mod dynamics;
pub mod envs;
pub mod error;
pub mod mdp;
pub mod metric;
pub mod nn;
pub mod persist;
pub mod planner;
pub mod policy_cloning;
pub mod seeding;
pub mod spatial;
pub mod stitching;

pub use error::{BatsError, Result};
