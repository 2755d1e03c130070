//! Opportunistic actor-critic: a three-critic maximum-entropy off-policy
//! actor-critic with conservative target aggregation (mean of the smaller two
//! critics, or median of three), plus SAC and TD3 baseline variants, a tabular
//! clipped-triple-Q validator, desk-scale environments, and a reproducible
//! experiment harness.

pub mod agent;
pub mod checkpoint;
pub mod diffcore;
pub mod ensemble;
pub mod envs;
pub mod gradcheck;
pub mod harness;
pub mod nets;
pub mod policy;
pub mod replay;
pub mod rng;
pub mod tabular;
