//! Linear feedback synthesis for chance-constrained stochastic systems.
//!
//! The closed loop `x⁺ = (A + BK)x + w` settles to a zero-mean stationary
//! distribution with covariance `X̄(K)`. Quadratic cost and single or joint
//! chance constraints on that stationary state and input are rewritten as
//! linear matrix inequalities in `(X, Y = KX)`, and the resulting
//! semidefinite program is solved by the embedded interior-point solver in
//! [`sdp`]. Closed loops are validated with the seeded simulator in [`sim`].

pub mod error;
pub mod estimator;
pub mod linalg;
pub mod probbounds;
pub mod sdp;
pub mod sim;
pub mod synthesis;

pub use error::{Error, Result};
pub use linalg::Matrix;
