//! Linear programming: a dense bounded-variable simplex and the
//! finite-horizon station model built on it.

pub mod horizon;
pub mod simplex;

pub use horizon::{build_lp, HorizonEv, HorizonInstance, HorizonLp};
pub use simplex::{LinearProgram, LpSolution, Row};
