//! Quantum reference frames under a single gauge constraint, in three
//! formalisms: lattice Hilbert spaces with group averaging, algebraic states
//! on a noncommutative polynomial algebra, and truncated semiclassical moments.

pub mod algstates;
pub mod effective;
pub mod kinspace;
pub mod models;
pub mod ncalg;
pub mod par;
pub mod reduction_gauge;
pub mod relobs;
