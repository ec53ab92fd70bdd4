//! Fixed-point surrogate models of unbalanced three-phase distribution feeders.
//!
//! The ground-truth feeder is solved by the fixed-point load flow
//! `v = w + f_X(v, s)`; the surrogate keeps that structure and learns `X_hat`
//! and `w_hat` from (power, voltage) samples with complex-valued SGD.

pub mod cio;
pub mod datagen;
pub mod error;
pub mod evaluate;
pub mod loadflow;
pub mod network;
pub mod surrogate;
pub mod trainer;
pub mod wirtinger;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub use error::{Error, Result};
pub use loadflow::{Injection, SolveReport, SolverOptions, VoltageProfile};
pub use network::{DerivedOperator, FeederModel};
pub use surrogate::{ForwardTape, SurrogateParams};

/// An independent seed for one `purpose` (feeder, data, shuffle, ...) split
/// off a master seed.
pub fn derive_seed(master: u64, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(purpose);
    rng.next_u64()
}
