pub mod augment;
pub mod error;
pub mod losses;
pub mod model;
pub mod synth;
pub mod optimizer;
pub mod problem;
pub mod analysis;
pub mod metrics;
pub mod config;
pub mod experiments;
pub mod io;
