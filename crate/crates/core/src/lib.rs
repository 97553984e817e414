pub mod analysis;
pub mod cli;
pub mod dataset;
pub mod flow;
pub mod image;
pub mod maze;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod tensor;
