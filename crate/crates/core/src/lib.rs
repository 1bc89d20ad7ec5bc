//! Emotion-conditioned symbolic music generation.

pub mod emotion;
pub mod generate;
pub mod metrics;
pub mod midi;
pub mod model;
pub mod nn;
pub mod remi;
pub mod rng;
pub mod study;
pub mod synth;
pub mod train;
