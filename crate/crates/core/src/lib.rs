//! Riemannian stochastic gradient descent for convolution kernels that are
//! constrained to matrix submanifolds (sphere, oblique, Stiefel, SO(n)).
//!
//! * [`manifold`] geometry primitives: validation, tangent projection,
//!   retraction, exponential map, distances, random points.
//! * [`sgd`] the optimizer: momentum on the Euclidean gradient, tangent
//!   projection, step-size schedule, retraction.
//! * [`net`] a small differentiable CNN producing per-kernel gradients.
//! * [`bench`] benchmark problems with independent oracles and convergence
//!   diagnostics.
//! * [`io`] configuration, dataset loading and metrics output.
//! * [`check`] the self-check property suite behind `mksgd --command check`.

pub mod bench;
pub mod check;
pub mod error;
pub mod io;
pub mod manifold;
pub mod net;
pub mod par;
pub mod run;
pub mod sgd;

pub use error::{Error, Result};
pub use manifold::{Family, KernelPoint, ManifoldSpec, Mat, TangentVector, Validation};
pub use par::Exec;
