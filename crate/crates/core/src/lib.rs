pub mod bench;
pub mod classifier;
pub mod container;
pub mod drift;
pub mod featurize;
pub mod oos_score;
pub mod pipeline;
pub mod simd;
pub mod textnorm;
