//! Training-free open-vocabulary segmentation from precomputed CLIP tensors.
//!
//! The crate implements an align-then-propagate inference path:
//!
//! * [`procrustes`] rotates the keys of the last attention block onto the query
//!   subspace (weighted centering plus an orthogonal Procrustes solve) and
//!   scores the re-attended patch features against text prototypes.
//! * [`propagate`] refines the resulting class-logit field on a small grid with
//!   a confidence-weighted, text-gated graph Laplacian solved by conjugate
//!   gradients.
//! * [`pipeline`] handles sliding windows, overlap fusion and the end-to-end run.
//! * [`eval`] provides the confusion-matrix metrics and the precision-efficiency
//!   score.
//! * [`interchange`] defines the `PRL1` tensor container and the run configuration.
//!
//! Parallel execution goes through [`par::Exec`]; with the `parallel` feature
//! disabled every stage runs sequentially and produces identical output.

pub mod error;
pub mod eval;
pub mod interchange;
pub mod par;
pub mod pipeline;
pub mod procrustes;
pub mod propagate;
pub mod resample;
pub mod synth;

pub use error::{PearlError, Result};
pub use interchange::{
    GrayImage, LabelMap, LogitGrid, PipelineConfig, PrototypeMatrix, SolverKind, TensorContainer,
    TensorEntry,
};
pub use par::Exec;
