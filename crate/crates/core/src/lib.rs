//! EV charging-station simulation with a shared-replay DQN operator and baselines.

pub mod allocator;
pub mod baselines;
pub mod error;
pub mod experiment;
pub mod lp;
pub mod policy;
pub mod qnet;
pub mod replay;
pub mod rl;
pub mod scenario;
pub mod station;
pub mod weights;
