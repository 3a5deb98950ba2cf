//! Stage functions, configuration and run manifests behind the `ehrgen`
//! binary.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod stages;

pub use config::PipelineConfig;
pub use manifest::RunManifest;
pub use pipeline::run_pipeline;
