//! Energy-based generative modeling at desk scale.
//!
//! The crate implements classical restricted Boltzmann machines, transverse-field
//! (quantum) Boltzmann machines simulated by path-integral Monte Carlo, and the
//! associative coupling of either machine to a dense generative adversarial
//! network, together with exact small-instance oracles and distribution-distance
//! metrics used to evaluate all of the above.
//!
//! Unit indexing convention used throughout: a configuration of `n` binary units
//! is packed into a table index with unit `a` at bit `a` (LSB first). Visible
//! units occupy bits `0..n_visible`, hidden units the bits above them. Bit `1`
//! corresponds to spin `+1`, bit `0` to spin `-1`.

pub mod adversarial;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pimc;
pub mod qbm;
pub mod rbm;
pub mod rng;

pub use error::{Error, Result};
