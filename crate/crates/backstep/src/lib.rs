//! Adaptive boundary control of the 1-D transport equation with recirculation,
//!
//! ```text
//!     u_t(x,t) = u_x(x,t) + beta(x) u(0,t),   x in [0,1],
//!     u(1,t)   = U(t),
//! ```
//!
//! where the recirculation coefficient `beta` is unknown to the controller.
//! The control gain is a Volterra kernel `k` solving `k = -b + b * k`
//! (with `*` the convolution `(a*b)(x) = int_0^x a(x-y) b(y) dy`) for the
//! current coefficient estimate `b`, and the boundary feedback is
//! `U(t) = int_0^1 k(1-y) u(y,t) dy`.
//!
//! The crate provides:
//!
//! - [`numerics`]: uniform grids, grid functions, the convolution quadrature
//!   and the norms every other module builds on;
//! - [`volterra`]: exact kernel solvers (marching and successive
//!   approximation), the inverse-kernel involution and the kernel time
//!   derivative;
//! - [`adaptive`]: backstepping transform, boundary feedback, projected
//!   gradient and passive-identifier update laws, Lyapunov diagnostics;
//! - [`plant`]: upwind steppers for the plant and its observer, and the
//!   closed-loop driver producing sampled trajectories;
//! - [`deeponet`]: a small, dependency-free branch/trunk operator network
//!   that learns the map from coefficient estimate to gain kernel, trained
//!   with hand-derived gradients and Adam;
//! - [`dataset`]: generation and binary (de)serialization of
//!   (estimate, kernel) training pairs harvested from closed-loop runs;
//! - [`bench`]: wall-clock comparison of the exact solver against the
//!   learned operator across grid refinements.
//!
//! All floating point work is `f64` on uniform grids over `[0,1]`. Every
//! random choice flows through a single seedable ChaCha8 generator so that
//! dataset generation, training and benchmarks are reproducible
//! bit-for-bit on a given platform.

pub mod adaptive;
pub mod bench;
pub mod dataset;
pub mod deeponet;
mod error;
pub mod numerics;
pub mod plant;
pub mod volterra;

pub use error::{Error, Result};
