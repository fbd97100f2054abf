//! Region-prompted chest X-ray report generation.
//!
//! Images are encoded into patch features, region features are extracted by
//! cross-attending to textual region descriptions, and a causal decoder
//! generates the report from a multimodal prompt. A second training stage
//! refines the decoder with PPO against a clinical-quality reward.

pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod extractor;
pub mod generator;
pub mod grammar;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod regions;
pub mod rl;
pub mod synth;
pub mod text;
pub mod train;
