//! Exact gain-kernel computations.
//!
//! The gain kernel `k` for a coefficient estimate `b` solves the Volterra
//! equation of the second kind
//!
//! ```text
//!     k(x) = -b(x) + (b * k)(x),
//! ```
//!
//! whose solution is bounded by `sup|k| <= B e^B` with `B = sup|b|`. With the
//! left-rectangle convolution the equation becomes lower-triangular, so
//! [`solve_kernel`] marches it out explicitly in `O(n^2)`. A successive
//! approximation solver ([`solve_kernel_series`]) sums the Neumann-type
//! series `k = sum_n dk_n`, `dk_0 = -b`, `dk_{n+1} = b * dk_n`, whose terms
//! obey `sup|dk_n| <= B^{n+1} x^n / n!`; it exists as an independent
//! cross-check for the marching solver.
//!
//! The same kernel map `K : b -> k` is an involution (`K(K(b)) = b` in the
//! continuum), which is what makes the backstepping transform invertible;
//! [`involution_apply`] exposes that round trip. [`kernel_time_derivative`]
//! differentiates `K` along a direction `b1`, which is needed when the
//! estimate evolves in time and satisfies the linear Volterra equation
//!
//! ```text
//!     k1 = -b1 + b1 * k0 + b0 * k1,        k0 = K(b0).
//! ```

use crate::numerics::{convolve, same_grid, sup_norm, GridFunction};
use crate::{Error, Result};

/// Result of a kernel solve: the kernel itself, the sup-norm residual of the
/// defining Volterra equation re-evaluated with the shared convolution
/// quadrature, and the number of series terms used (zero for the direct
/// marching solver, which is not iterative).
#[derive(Debug, Clone)]
pub struct KernelSolveReport {
    pub kernel: GridFunction,
    pub residual_sup: f64,
    pub iterations: usize,
}

/// Produces a gain kernel from a coefficient estimate. Implemented by the
/// exact solver here and by the learned operator in [`crate::deeponet`], so
/// the closed loop can swap one for the other.
pub trait KernelOperator {
    fn kernel(&self, beta_hat: &GridFunction) -> Result<GridFunction>;
}

/// The exact marching solver as a [`KernelOperator`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactKernelOperator;

impl KernelOperator for ExactKernelOperator {
    fn kernel(&self, beta_hat: &GridFunction) -> Result<GridFunction> {
        solve_kernel(beta_hat).map(|r| r.kernel)
    }
}

/// The backstepping map `B(xi, eta) = xi - eta * xi`.
///
/// Applied with the gain kernel as `eta` it sends the plant state to the
/// target state; applied with the inverse kernel it undoes that.
pub fn backstepping(xi: &GridFunction, eta: &GridFunction) -> Result<GridFunction> {
    let conv = convolve(eta, xi)?;
    xi.sub(&conv)
}

/// Marches the kernel equation `k = -b + b * k` node by node.
///
/// With the left-rectangle rule the convolution at `x_i` only involves
/// `k(x_j)` for `j < i`, so
///
/// ```text
///     k(x_i) = -b(x_i) + dx * sum_{j<i} b(x_{i-j}) k(x_j)
/// ```
///
/// is explicit. First-order accurate; the reported residual re-checks the
/// solution against the equation and is zero up to rounding by construction.
pub fn solve_kernel(beta_hat: &GridFunction) -> Result<KernelSolveReport> {
    let kernel = march_second_kind(&beta_hat.map(|v| -v), beta_hat)?;
    let residual_sup = kernel_residual_sup(&kernel, beta_hat)?;
    Ok(KernelSolveReport {
        kernel,
        residual_sup,
        iterations: 0,
    })
}

/// Sup-norm residual `sup |k + b - b * k|` of the kernel equation.
pub fn kernel_residual_sup(kernel: &GridFunction, beta_hat: &GridFunction) -> Result<f64> {
    let conv = convolve(beta_hat, kernel)?;
    let residual = kernel.add(beta_hat)?.sub(&conv)?;
    Ok(sup_norm(&residual))
}

/// Solves `k = g + b * k` by explicit marching (shared by the kernel solve
/// and the kernel-derivative solve).
fn march_second_kind(g: &GridFunction, b: &GridFunction) -> Result<GridFunction> {
    same_grid(g, b)?;
    let n = g.grid().n_points();
    let dx = g.grid().dx();
    let gv = g.values();
    let bv = b.values();
    let mut k = vec![0.0; n];
    k[0] = gv[0];
    for i in 1..n {
        let mut acc = 0.0;
        for j in 0..i {
            acc += bv[i - j] * k[j];
        }
        k[i] = gv[i] + dx * acc;
    }
    GridFunction::new(g.grid(), k)
}

/// Sums the successive-approximation series `dk_0 = -b`,
/// `dk_{n+1} = b * dk_n` until the latest term's sup-norm drops below
/// `tolerance`. Fails with [`Error::SeriesDiverged`] if `max_terms` terms do
/// not reach that point. Kept as an independent oracle for [`solve_kernel`].
pub fn solve_kernel_series(
    beta_hat: &GridFunction,
    max_terms: usize,
    tolerance: f64,
) -> Result<KernelSolveReport> {
    if max_terms == 0 {
        return Err(Error::InvalidConfig {
            field: "max_terms",
            message: "need at least one series term".into(),
        });
    }
    let bound = sup_norm(beta_hat);
    let mut kernel = GridFunction::zeros(beta_hat.grid());
    let mut term = beta_hat.map(|v| -v);
    // sup|dk_n| <= B^{n+1}/n!; tracked alongside the loop as a cheap sanity
    // check on the quadrature (the left-rectangle rule under-integrates the
    // increasing majorant, so the discrete terms obey the same bound).
    let mut majorant = bound;
    let mut terms = 0;
    loop {
        kernel = kernel.add(&term)?;
        terms += 1;
        let size = sup_norm(&term);
        debug_assert!(
            size <= majorant * (1.0 + 1e-9) + 1e-12,
            "series term {terms} of size {size} exceeds factorial majorant {majorant}"
        );
        if size < tolerance {
            break;
        }
        if terms >= max_terms {
            return Err(Error::SeriesDiverged {
                terms,
                last_term: size,
                tolerance,
            });
        }
        term = convolve(beta_hat, &term)?;
        majorant *= bound / terms as f64;
    }
    let residual_sup = kernel_residual_sup(&kernel, beta_hat)?;
    Ok(KernelSolveReport {
        kernel,
        residual_sup,
        iterations: terms,
    })
}

/// Applies the kernel map twice: `K(K(b))`. In the continuum `K` is an
/// involution, so the result reproduces `b` up to quadrature error.
pub fn involution_apply(beta: &GridFunction) -> Result<GridFunction> {
    let once = solve_kernel(beta)?.kernel;
    Ok(solve_kernel(&once)?.kernel)
}

/// The inverse backstepping map `W(zeta, eta) = zeta - K(eta) * zeta`, i.e.
/// `B(zeta, K(eta))`. Satisfies `B(W(zeta, eta), eta) = zeta` up to
/// quadrature error.
pub fn solve_w(zeta: &GridFunction, eta: &GridFunction) -> Result<GridFunction> {
    let k = solve_kernel(eta)?.kernel;
    backstepping(zeta, &k)
}

/// Directional derivative `k1` of the kernel map at `b0` along `b1`,
/// computed by marching the defining linear Volterra equation
///
/// ```text
///     k1 = -b1 + b1 * k0 + b0 * k1,        k0 = K(b0),
/// ```
///
/// which is the exact derivative of the discrete kernel map (differentiating
/// the marched equation term by term yields exactly this system). The
/// reported residual re-evaluates that equation and is zero up to rounding.
///
/// See [`kernel_time_derivative_explicit`] for the closed-form expansion in
/// terms of `K(b0)` alone; the two agree to `O(dx)`.
pub fn kernel_time_derivative(
    beta0: &GridFunction,
    beta1: &GridFunction,
) -> Result<KernelSolveReport> {
    same_grid(beta0, beta1)?;
    let k0 = solve_kernel(beta0)?.kernel;
    let g = convolve(beta1, &k0)?.sub(beta1)?;
    let k1 = march_second_kind(&g, beta0)?;
    let residual_sup = k1_residual_sup(&k1, beta0, beta1, &k0)?;
    Ok(KernelSolveReport {
        kernel: k1,
        residual_sup,
        iterations: 0,
    })
}

/// Closed-form expansion of the kernel derivative,
///
/// ```text
///     k1 = -b1 + 2 (b1 * K(b0)) - (b1 * K(b0)) * K(b0),
/// ```
///
/// obtained by unfolding the inverse map `W` in the defining equation. Under
/// the discrete convolution the unfolding picks up `O(dx)` boundary terms,
/// so this form deviates from [`kernel_time_derivative`] by `O(dx)`; it is
/// retained as a cross-check of the operator algebra.
pub fn kernel_time_derivative_explicit(
    beta0: &GridFunction,
    beta1: &GridFunction,
) -> Result<GridFunction> {
    same_grid(beta0, beta1)?;
    let k0 = solve_kernel(beta0)?.kernel;
    let q = convolve(beta1, &k0)?;
    let qk = convolve(&q, &k0)?;
    // -b1 + 2q - q*k0
    let two_q = q.map(|v| 2.0 * v);
    two_q.sub(beta1)?.sub(&qk)
}

/// Sup-norm residual of the kernel-derivative equation
/// `k1 - b0 * k1 + b1 - b1 * k0 = 0`.
pub fn k1_residual_sup(
    k1: &GridFunction,
    beta0: &GridFunction,
    beta1: &GridFunction,
    k0: &GridFunction,
) -> Result<f64> {
    let b0k1 = convolve(beta0, k1)?;
    let b1k0 = convolve(beta1, k0)?;
    let residual = k1.sub(&b0k1)?.add(beta1)?.sub(&b1k0)?;
    Ok(sup_norm(&residual))
}
