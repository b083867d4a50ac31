pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod model;
pub mod tape;
pub mod trainer;
pub mod cli;
