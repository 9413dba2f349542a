pub mod corpus;
pub mod dataset;
pub mod distiller;
pub mod evalharness;
pub mod jsonl;
pub mod tags;
pub mod tinylm;
pub mod trainer;
