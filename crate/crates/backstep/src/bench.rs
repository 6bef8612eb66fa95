//! Wall-clock comparison of the direct Volterra kernel solve against
//! neural-operator inference across grid refinements.
//!
//! The two paths are timed on the same coefficient inputs. The direct solve
//! is O(n²) in the grid size; the operator's per-call cost is one branch
//! pass plus an `n x p` mix against a trunk table computed once per grid, so
//! the measured speedup grows as the grid refines. Before any timing, both
//! paths must agree within a correctness gate — a speedup claim for a wrong
//! kernel would be meaningless, so the harness refuses to produce one.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::deeponet::{DeepOnetModel, NeuralKernelOperator};
use crate::numerics::{l2_norm, Grid1D, GridFunction};
use crate::volterra::{solve_kernel, KernelOperator};
use crate::{Error, Result};

/// Benchmark settings.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Grid spacings to sweep, each of which must divide [0, 1] evenly.
    pub dx_list: Vec<f64>,
    /// Timed calls per path per spacing (after 3 warm-up calls each).
    pub n_repeats: usize,
    /// Maximum relative L2 disagreement between the two paths tolerated
    /// before timing is allowed to begin. The default is loose enough to
    /// absorb the discretization bias a model inherits from its (coarser)
    /// training grid when the sweep refines past it, while still rejecting
    /// an untrained or mismatched operator (whose error is order one).
    pub gate_rel_l2: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dx_list: vec![1e-2, 1e-3, 5e-4, 1e-4],
            n_repeats: 100,
            gate_rel_l2: 1e-1,
        }
    }
}

/// Timing summary for one grid spacing.
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub dx: f64,
    pub n_points: usize,
    pub analytic_mean_s: f64,
    pub analytic_stddev_s: f64,
    pub no_mean_s: f64,
    pub no_stddev_s: f64,
    /// `analytic_mean_s / no_mean_s`.
    pub speedup: f64,
    pub n_repeats: usize,
    /// Set when the monotonic timer's resolution exceeds 1% of either mean,
    /// meaning the numbers are too close to the clock's grain to trust.
    pub low_confidence: bool,
}

/// Smallest positive step the monotonic clock can resolve, estimated from
/// back-to-back readings.
fn timer_resolution_s() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..1000 {
        let a = Instant::now();
        let b = Instant::now();
        let d = (b - a).as_secs_f64();
        if d > 0.0 && d < best {
            best = d;
        }
    }
    if best.is_finite() {
        best
    } else {
        1e-9
    }
}

fn mean_stddev(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples
        .iter()
        .map(|s| (s - mean) * (s - mean))
        .sum::<f64>()
        / (n - 1.0);
    (mean, var.sqrt())
}

/// Times the direct solve and the operator on the same inputs for each grid
/// spacing. Inputs are resampled onto each bench grid; calls cycle through
/// them. Single-threaded by construction — nothing here spawns threads.
pub fn run_bench(
    model: &DeepOnetModel,
    beta_hat_family: &[GridFunction],
    cfg: &BenchConfig,
) -> Result<Vec<BenchResult>> {
    if cfg.n_repeats < 2 {
        return Err(Error::InvalidConfig {
            field: "n_repeats",
            message: "need at least 2 repeats for a standard deviation".into(),
        });
    }
    if cfg.dx_list.is_empty() || beta_hat_family.is_empty() {
        return Err(Error::InvalidConfig {
            field: "bench",
            message: "need at least one grid spacing and one input".into(),
        });
    }
    if !(cfg.gate_rel_l2 > 0.0) {
        return Err(Error::InvalidConfig {
            field: "gate_rel_l2",
            message: "correctness gate must be positive".into(),
        });
    }
    let resolution = timer_resolution_s();
    let mut results = Vec::with_capacity(cfg.dx_list.len());
    for &dx in &cfg.dx_list {
        let grid = Grid1D::from_dx(dx)?;
        let inputs: Vec<GridFunction> = beta_hat_family
            .iter()
            .map(|b| b.resample(grid))
            .collect();
        // Trunk table construction is one-time per-grid setup, not part of
        // the per-call cost being compared.
        let op = NeuralKernelOperator::new(model.clone(), grid)?;

        // Correctness gate: every input must agree between the paths before
        // a single timing sample is collected.
        for b in &inputs {
            let analytic = solve_kernel(b)?.kernel;
            let predicted = op.kernel(b)?;
            let rel = l2_norm(&predicted.sub(&analytic)?) / l2_norm(&analytic).max(1e-12);
            if rel > cfg.gate_rel_l2 {
                return Err(Error::InvalidConfig {
                    field: "model",
                    message: format!(
                        "correctness gate failed at dx = {dx}: relative L2 error {rel:.3e} \
                         exceeds {:.3e}; refusing to benchmark a wrong kernel",
                        cfg.gate_rel_l2
                    ),
                });
            }
        }

        for _ in 0..3 {
            std::hint::black_box(solve_kernel(std::hint::black_box(&inputs[0]))?);
            std::hint::black_box(op.kernel(std::hint::black_box(&inputs[0]))?);
        }

        let mut analytic_times = Vec::with_capacity(cfg.n_repeats);
        for i in 0..cfg.n_repeats {
            let b = &inputs[i % inputs.len()];
            let t = Instant::now();
            std::hint::black_box(solve_kernel(std::hint::black_box(b))?);
            analytic_times.push(t.elapsed().as_secs_f64());
        }
        let mut no_times = Vec::with_capacity(cfg.n_repeats);
        for i in 0..cfg.n_repeats {
            let b = &inputs[i % inputs.len()];
            let t = Instant::now();
            std::hint::black_box(op.kernel(std::hint::black_box(b))?);
            no_times.push(t.elapsed().as_secs_f64());
        }

        let (analytic_mean_s, analytic_stddev_s) = mean_stddev(&analytic_times);
        let (no_mean_s, no_stddev_s) = mean_stddev(&no_times);
        let low_confidence =
            resolution > 0.01 * analytic_mean_s || resolution > 0.01 * no_mean_s;
        results.push(BenchResult {
            dx,
            n_points: grid.n_points(),
            analytic_mean_s,
            analytic_stddev_s,
            no_mean_s,
            no_stddev_s,
            speedup: analytic_mean_s / no_mean_s,
            n_repeats: cfg.n_repeats,
            low_confidence,
        });
    }
    Ok(results)
}

/// Writes `dx,analytic_mean_s,no_mean_s,speedup` rows.
pub fn write_csv(results: &[BenchResult], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "dx,analytic_mean_s,no_mean_s,speedup")?;
    for r in results {
        writeln!(
            out,
            "{},{},{},{}",
            r.dx, r.analytic_mean_s, r.no_mean_s, r.speedup
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Renders an aligned text table of the sweep.
pub fn format_table(results: &[BenchResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>10} {:>8} {:>14} {:>14} {:>10} {:>8}",
        "dx", "points", "analytic [s]", "operator [s]", "speedup", "trust"
    );
    for r in results {
        let _ = writeln!(
            s,
            "{:>10.0e} {:>8} {:>14.3e} {:>14.3e} {:>9.1}x {:>8}",
            r.dx,
            r.n_points,
            r.analytic_mean_s,
            r.no_mean_s,
            r.speedup,
            if r.low_confidence { "low" } else { "ok" }
        );
    }
    s
}
