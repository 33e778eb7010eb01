pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod geometry;
pub mod layers;
pub mod synth;
pub mod condition;
pub mod text;
pub mod ide;
pub mod dfm;
pub mod diffusion;
pub mod train;
pub mod metrics;
pub mod error;
pub mod config;
pub mod experiment;
pub mod dump;
