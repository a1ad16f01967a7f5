pub mod corpus;
pub mod error;
pub mod eval;
pub mod geo;
pub mod inference;
pub mod model;
pub mod recsys;
pub mod synth;
