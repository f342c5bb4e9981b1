pub mod hand;
pub mod image;
pub mod synth;
pub mod sampling;
pub mod augment;
pub mod nn;
pub mod metrics;
pub mod experiment;
