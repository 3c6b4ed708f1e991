pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod imaging;
pub mod diffusion;
pub mod scorenets;
pub mod seed;
pub mod sampler;
pub mod training;
pub mod cli;
