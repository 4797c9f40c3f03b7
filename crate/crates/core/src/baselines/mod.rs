//! Reference operators: greedy rules, rolling-horizon LP control and an
//! exhaustive optimum for tiny instances.

pub mod grd;
pub mod mpc;
pub mod oracle;

pub use grd::{grd_act, grd_allocate, Greedy, ReserveRule};
pub use mpc::{Mpc, Prediction, WindowAllocation};
pub use oracle::{oracle_solve, OracleSolution, Scripted};
