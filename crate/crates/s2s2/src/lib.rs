//! Semantic-stacking consistency training (S2S2) at desk scale: a minimal
//! differentiable tensor engine, the stacking/Bayesian statistics behind
//! the method, a procedural synthetic-data benchmark, a tiny encoder-decoder
//! segmentation network, the consistency-regularized trainer, segmentation
//! metrics, and a reproducible experiment harness.

pub mod diff;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod segnet;
pub mod stacklab;
pub mod synthgen;
pub mod trainer;
