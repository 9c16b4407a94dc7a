pub mod audio;
pub mod nn;
pub mod metrics;
pub mod models;
pub mod runtime;
pub mod seed;
pub mod room;
pub mod synth;
