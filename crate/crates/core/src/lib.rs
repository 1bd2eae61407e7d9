pub mod error;
pub mod exec;
pub mod model;
pub mod linalg;
pub mod sampler;
pub mod postprocess;
pub mod gir;
pub mod metrics;
pub mod simgen;
