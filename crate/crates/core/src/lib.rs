//! Continuous normalizing flows on embedded matrix manifolds.
//!
//! A flow is the time-1 map of an ODE whose velocity is a learned
//! combination of fixed tangent generators. The crate covers the dense
//! linear algebra, the manifolds and their generators, the coefficient
//! network, the flow field and its divergence, an adaptive ODE solver with
//! an adjoint sensitivity pass, target densities, training, evaluation and
//! a command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod densemat;
pub mod manifolds;
pub mod net;
pub mod field;
pub mod ode;
pub mod targets;
pub mod train;
pub mod checks;
pub mod cli;
