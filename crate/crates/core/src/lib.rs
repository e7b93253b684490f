pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod postprocess;
pub mod render;
pub mod service;
pub mod synth;
pub mod tensor;
pub mod train;
