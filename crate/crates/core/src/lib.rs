//! Training-free refinement of open-vocabulary segmentation maps.
//!
//! A feature bundle exported from a semantic (CLIP) and a structural (DINO)
//! backbone is turned into a label map in four steps: attention fusion of
//! both branches ([`caf`]), cross-graph random-walk diffusion ([`graph`],
//! [`diffusion`]), and a superpixel-weighted convex fusion solved by
//! primal-dual iterations ([`superpixel`], [`cscp`]). [`pipeline`] wires the
//! stages together and [`eval`] scores the result.
//!
//! Numeric stages are generic over [`Scalar`] (`f32` or `f64`); artifacts on
//! disk are always `f32`.

pub mod caf;
pub mod config;
pub mod cscp;
pub mod diffusion;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod pipeline;
pub mod scalar;
pub mod superpixel;
pub mod synthetic;
pub mod tensorio;

pub use config::{parse_config, PipelineConfig};
pub use geometry::Grid;
pub use pipeline::{run_pipeline, PipelineError, RunOptions};
pub use scalar::Scalar;
pub use tensorio::{load_bundle, read_tensor, write_tensor, FeatureBundle, Tensor};

pub type ScoreMapF32 = caf::ScoreMap<f32>;
pub type ScoreMapF64 = caf::ScoreMap<f64>;
pub type AttentionMapF32 = caf::AttentionMap<f32>;
pub type AttentionMapF64 = caf::AttentionMap<f64>;
pub type TransitionMatrixF32 = graph::TransitionMatrix<f32>;
pub type TransitionMatrixF64 = graph::TransitionMatrix<f64>;
pub type ProbabilityFieldF32 = cscp::ProbabilityField<f32>;
pub type ProbabilityFieldF64 = cscp::ProbabilityField<f64>;
pub type EdgeWeightFieldF32 = superpixel::EdgeWeightField<f32>;
pub type EdgeWeightFieldF64 = superpixel::EdgeWeightField<f64>;
pub type CscpParamsF32 = cscp::CscpParams<f32>;
pub type CscpParamsF64 = cscp::CscpParams<f64>;
pub type DiffusionParamsF32 = diffusion::DiffusionParams<f32>;
pub type DiffusionParamsF64 = diffusion::DiffusionParams<f64>;
