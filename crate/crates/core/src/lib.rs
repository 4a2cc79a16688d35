pub mod cli;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod generation;
pub mod heads;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod training;
