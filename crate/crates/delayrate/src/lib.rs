//! Short-rate model with delay terms.
//!
//! The rate follows `dr = (a + b r + Σ c_j r(t−τ_j)) dt + σ dW` with a deterministic
//! initial function on `[−τ_N, 0]`. Bonds, forward rates and caplets have closed
//! forms built from the fundamental solution R of the delay equation.

pub mod bonds;
pub mod cli;
pub mod estimation;
pub mod marketfit;
pub mod optim;
pub mod quad;
pub mod rfr_caplets;
pub mod series_kernel;
pub mod shortrate;
pub mod termfn;
