//! INT8 vision-transformer encoder with dynamic token pruning and FFN2
//! dimension pruning, plus the accelerator cycle model, SRAM/traffic
//! accounting and closed-form MAC analytics built around it.

pub mod analytics;
pub mod config;
pub mod container;
pub mod engine;
pub mod mem;
pub mod model;
pub mod perf;
pub mod pruning;
pub mod quant;
pub mod report;
pub mod strategy;

pub use config::EncoderConfig;
pub use engine::{run_encoder, EncoderOutput, Engine, LayerTrace};
pub use model::Model;
pub use strategy::Registry;
