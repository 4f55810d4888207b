pub mod config;
pub mod suites;
pub mod synth;
pub mod train;
