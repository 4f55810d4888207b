//! Bidirectional hierarchical fusion of a protein sequence encoder and an
//! SE(3)-invariant structure encoder.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and tape-based reverse-mode autodiff.
//! - [`geometry`]: local residue frames and the invariant angles built on them.
//! - [`protein`]: PDB parsing, cutoff graphs, dataset and embedding files.
//! - [`plm`], [`gnn`]: the sequence and structure branches.
//! - [`fusion`]: serial, local gated and global attention fusion, plus the
//!   full two-branch model.
//! - [`heads`]: ligand encoder, task heads and losses.
//! - [`metrics`]: RMSE, correlations, accuracy and AUCPR.
//! - [`harness`]: configuration, synthetic data, training and the check suites.

pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gnn;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod plm;
pub mod protein;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use fusion::{FusionConfig, FusionMode, FusionModel, ModelConfig};
pub use geometry::{LocalFrame, SE3Transform, Vec3};
pub use metrics::MetricReport;
pub use protein::{Level, ProteinGraph, ProteinStructure, Task};
pub use tensor::{Graph, ParamStore, Tensor, Var};
