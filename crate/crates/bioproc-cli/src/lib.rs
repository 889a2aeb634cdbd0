//! Experiment driver for the bioprocess control toolkit: dataset generation,
//! model fitting, policy optimization, evaluation, attribution, benchmarks
//! and the integrated upstream + downstream scenario.

pub mod bench;
pub mod config;
pub mod integrated;
pub mod pipeline;
