//! CNN inference simulator.
//!
//! A model file lists the layers of a network with their full geometry.
//! [`run_inference`] pushes a synthetic batch through them with the chosen
//! convolution back-end and reports per-layer time, GFLOPS and workspace.

mod csv;
mod model;
mod run;

pub use csv::{emit_csv, write_csv, HEADER};
pub use model::{model_workspace, parse_model, parse_model_str, LayerKind, LayerSpec, ModelSpec};
pub use run::{run_inference, Algo, LayerResult, RunConfig, RunRecord, CHECK_TOLERANCE};
