//! Uniform grids on `[0,1]`, sampled functions on them, and the quadratures
//! the rest of the crate is built on.
//!
//! Two quadrature rules appear and the distinction is deliberate:
//!
//! - the Volterra convolution uses the left-rectangle rule
//!   `(a*b)(x_i) = dx * sum_{j<i} a(x_{i-j}) b(x_j)`, which makes the kernel
//!   equation solvable by explicit marching (the `j = i` term is absent, so
//!   each new value depends only on earlier ones);
//! - integrals and norms (`L^2`, exponentially weighted `L^2`) use the
//!   trapezoidal rule, second-order accurate for the smooth states the
//!   simulations produce.

use std::io::Write;

use crate::{Error, Result};

/// A uniform grid of `n_points >= 2` samples of `[0,1]`, including both
/// endpoints: `x_i = i / (n_points - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid1D {
    n_points: usize,
}

impl Grid1D {
    /// Grid with `n_points` samples. Fails for fewer than two points.
    pub fn new(n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::InvalidConfig {
                field: "n_points",
                message: format!("need at least 2 grid points, got {n_points}"),
            });
        }
        Ok(Self { n_points })
    }

    /// Grid with spacing `dx`, which must divide the unit interval evenly
    /// (`1/dx` integral to within 1e-9).
    pub fn from_dx(dx: f64) -> Result<Self> {
        if !(dx.is_finite() && dx > 0.0 && dx <= 0.5) {
            return Err(Error::InvalidConfig {
                field: "dx",
                message: format!("dx must lie in (0, 0.5], got {dx}"),
            });
        }
        let cells = 1.0 / dx;
        if (cells - cells.round()).abs() > 1e-9 {
            return Err(Error::InvalidConfig {
                field: "dx",
                message: format!("1/dx = {cells} is not an integer; the grid must tile [0,1]"),
            });
        }
        Self::new(cells.round() as usize + 1)
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// Grid spacing `1/(n_points - 1)`.
    pub fn dx(&self) -> f64 {
        1.0 / (self.n_points - 1) as f64
    }

    /// Coordinate of node `i`; `x(0) == 0.0` and `x(n-1) == 1.0` exactly.
    pub fn x(&self, i: usize) -> f64 {
        debug_assert!(i < self.n_points);
        i as f64 / (self.n_points - 1) as f64
    }

    /// All node coordinates in order.
    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_points).map(move |i| self.x(i))
    }
}

/// A function sampled on a [`Grid1D`]. All values are finite; constructors
/// reject NaN and infinities so downstream arithmetic never has to check.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Grid1D,
    values: Vec<f64>,
}

impl GridFunction {
    /// Wraps sampled values; fails if the length does not match the grid or
    /// any value is non-finite.
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_points() {
            return Err(Error::GridMismatch {
                left: grid.n_points(),
                right: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "grid function values",
            });
        }
        Ok(Self { grid, values })
    }

    /// The constant function `x -> value`.
    pub fn constant(grid: Grid1D, value: f64) -> Self {
        assert!(value.is_finite(), "constant grid function must be finite");
        Self {
            grid,
            values: vec![value; grid.n_points()],
        }
    }

    /// The zero function.
    pub fn zeros(grid: Grid1D) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Samples `f` at every node. Panics if `f` produces a non-finite value;
    /// use [`GridFunction::new`] when the input is untrusted.
    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Self {
        let values: Vec<f64> = grid.points().map(f).collect();
        assert!(
            values.iter().all(|v| v.is_finite()),
            "sampled function produced a non-finite value"
        );
        Self { grid, values }
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at node `i`.
    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Linear interpolation at an arbitrary `x` clamped to `[0,1]`.
    pub fn sample_at(&self, x: f64) -> f64 {
        let n = self.grid.n_points();
        let s = x.clamp(0.0, 1.0) * (n - 1) as f64;
        let i = (s.floor() as usize).min(n - 2);
        let frac = s - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    /// Resamples onto another grid by linear interpolation.
    pub fn resample(&self, grid: Grid1D) -> GridFunction {
        if grid == self.grid {
            return self.clone();
        }
        GridFunction::from_fn(grid, |x| self.sample_at(x))
    }

    /// Pointwise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        assert!(
            values.iter().all(|v| v.is_finite()),
            "map produced a non-finite value"
        );
        GridFunction {
            grid: self.grid,
            values,
        }
    }

    /// Pointwise difference; fails on grid mismatch.
    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        same_grid(self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        GridFunction::new(self.grid, values)
    }

    /// Pointwise sum; fails on grid mismatch.
    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        same_grid(self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        GridFunction::new(self.grid, values)
    }

    /// Writes the function as CSV with header `x,value`, one row per node.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "x,value")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(out, "{},{}", self.grid.x(i), v)?;
        }
        Ok(())
    }
}

pub(crate) fn same_grid(a: &GridFunction, b: &GridFunction) -> Result<()> {
    if a.grid() != b.grid() {
        return Err(Error::GridMismatch {
            left: a.grid().n_points(),
            right: b.grid().n_points(),
        });
    }
    Ok(())
}

/// Volterra convolution `(a*b)(x) = int_0^x a(x-y) b(y) dy` by the
/// left-rectangle rule:
///
/// ```text
/// (a*b)(x_i) = dx * sum_{j=0}^{i-1} a(x_{i-j}) b(x_j),    (a*b)(x_0) = 0.
/// ```
///
/// First-order accurate. The rule is symmetric in `a` and `b` up to a single
/// boundary term of size `dx * |a(x_i) b(0) - a(0) b(x_i)|`, so discrete
/// commutativity holds to `O(dx)`.
pub fn convolve(a: &GridFunction, b: &GridFunction) -> Result<GridFunction> {
    same_grid(a, b)?;
    let n = a.grid().n_points();
    let dx = a.grid().dx();
    let av = a.values();
    let bv = b.values();
    let mut out = vec![0.0; n];
    for i in 1..n {
        let mut acc = 0.0;
        for j in 0..i {
            acc += av[i - j] * bv[j];
        }
        out[i] = dx * acc;
    }
    GridFunction::new(a.grid(), out)
}

/// Trapezoidal integral `int_0^1 f(x) dx`.
pub fn integrate(f: &GridFunction) -> f64 {
    let v = f.values();
    let n = v.len();
    let interior: f64 = v[1..n - 1].iter().sum();
    f.grid().dx() * (0.5 * (v[0] + v[n - 1]) + interior)
}

/// Weighted squared norm `||w||_c^2 = int_0^1 e^{c x} w(x)^2 dx` by the
/// trapezoidal rule. The weight exponent `c` must be non-negative.
pub fn weighted_norm_sq(w: &GridFunction, c: f64) -> f64 {
    assert!(c >= 0.0 && c.is_finite(), "weight exponent must be >= 0");
    let grid = w.grid();
    let v = w.values();
    let n = v.len();
    let mut acc = 0.5 * (v[0] * v[0] + (c).exp() * v[n - 1] * v[n - 1]);
    for i in 1..n - 1 {
        acc += (c * grid.x(i)).exp() * v[i] * v[i];
    }
    grid.dx() * acc
}

/// `L^2` norm by the trapezoidal rule.
pub fn l2_norm(f: &GridFunction) -> f64 {
    weighted_norm_sq(f, 0.0).sqrt()
}

/// Sup norm `max_i |f(x_i)|`.
pub fn sup_norm(f: &GridFunction) -> f64 {
    f.values().iter().fold(0.0, |m, v| m.max(v.abs()))
}
