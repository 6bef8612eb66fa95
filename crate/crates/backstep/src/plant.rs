//! The transport plant, its observer, and the closed-loop driver.
//!
//! The plant `u_t = u_x + beta(x) u(0,t)`, `u(1,t) = U(t)` is discretized by
//! the first-order upwind scheme (transport runs right to left, so the
//! one-sided difference looks toward larger `x`):
//!
//! ```text
//!     u_i' = u_i + (dt/dx)(u_{i+1} - u_i) + dt beta_i u_0,   i < n-1,
//!     u_{n-1}' = U,
//! ```
//!
//! stable under the CFL condition `dt <= dx` and an exact shift at
//! `dt = dx`. The observer copies the plant with the coefficient estimate in
//! place of `beta` plus nonlinear output injection.
//!
//! [`run_closed_loop`] advances plant, identifier and (for the passive
//! design) observer together, recomputing the gain kernel from the current
//! estimate every step through a pluggable [`KernelOperator`], and records
//! snapshots at a fixed sampling cadence. Trajectories abort cleanly when
//! the state crosses the blow-up threshold of `1e12`, keeping the last
//! finite snapshot.

use std::path::Path;

use crate::adaptive::{
    boundary_control, diagnostics, tau_passive, update_beta_lyapunov, update_beta_passive,
    Diagnostics, LyapunovConfig, PassiveConfig,
};
use crate::numerics::{sup_norm, weighted_norm_sq, GridFunction, Grid1D};
use crate::volterra::KernelOperator;
use crate::{Error, Result};

/// States whose sup-norm crosses this value abort the run as blown up.
/// Far below overflow, so detection always happens while values are finite.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

/// Plant description: grid, time step, true recirculation coefficient and
/// initial state, plus the known coefficient bound `B`.
#[derive(Debug, Clone)]
pub struct PlantConfig {
    pub grid: Grid1D,
    pub dt: f64,
    pub beta: GridFunction,
    pub u0: GridFunction,
    pub bound: f64,
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidConfig {
                field: "dt",
                message: format!("time step must be positive, got {}", self.dt),
            });
        }
        let dx = self.grid.dx();
        if self.dt > dx * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt: self.dt, dx });
        }
        if self.beta.grid() != self.grid || self.u0.grid() != self.grid {
            return Err(Error::GridMismatch {
                left: self.grid.n_points(),
                right: self.beta.grid().n_points().max(self.u0.grid().n_points()),
            });
        }
        if !(self.bound.is_finite() && self.bound > 0.0) {
            return Err(Error::InvalidConfig {
                field: "bound",
                message: format!("coefficient bound must be positive, got {}", self.bound),
            });
        }
        if sup_norm(&self.beta) > self.bound * (1.0 + 1e-12) {
            return Err(Error::InvalidConfig {
                field: "beta",
                message: format!(
                    "sup|beta| = {} exceeds the declared bound {}",
                    sup_norm(&self.beta),
                    self.bound
                ),
            });
        }
        Ok(())
    }
}

/// One upwind step of the plant under boundary input `boundary`.
pub fn step_plant(
    u: &GridFunction,
    boundary: f64,
    beta: &GridFunction,
    dt: f64,
) -> Result<GridFunction> {
    crate::numerics::same_grid(u, beta)?;
    if !boundary.is_finite() {
        return Err(Error::NonFinite {
            context: "boundary control value",
        });
    }
    let grid = u.grid();
    let lambda = dt / grid.dx();
    let n = grid.n_points();
    let uv = u.values();
    let bv = beta.values();
    let u0 = uv[0];
    let mut next = Vec::with_capacity(n);
    for i in 0..n - 1 {
        // Grouped as dt * (b * u0) so the observer with a zero injection
        // term reproduces the plant bitwise.
        next.push(uv[i] + lambda * (uv[i + 1] - uv[i]) + dt * (bv[i] * u0));
    }
    next.push(boundary);
    GridFunction::new(grid, next)
}

/// One upwind step of the observer
/// `u_hat_t = u_hat_x + beta_hat u(0) + gamma0 (u - u_hat) u(0)^2` under the
/// same boundary input as the plant.
pub fn step_observer(
    u_hat: &GridFunction,
    u: &GridFunction,
    boundary: f64,
    beta_hat: &GridFunction,
    gamma0: f64,
    dt: f64,
) -> Result<GridFunction> {
    crate::numerics::same_grid(u_hat, u)?;
    crate::numerics::same_grid(u_hat, beta_hat)?;
    if !boundary.is_finite() {
        return Err(Error::NonFinite {
            context: "boundary control value",
        });
    }
    let grid = u_hat.grid();
    let lambda = dt / grid.dx();
    let n = grid.n_points();
    let hv = u_hat.values();
    let uv = u.values();
    let bv = beta_hat.values();
    let u0 = uv[0];
    let u0_sq = u0 * u0;
    let mut next = Vec::with_capacity(n);
    for i in 0..n - 1 {
        let source = bv[i] * u0 + gamma0 * (uv[i] - hv[i]) * u0_sq;
        next.push(hv[i] + lambda * (hv[i + 1] - hv[i]) + dt * source);
    }
    next.push(boundary);
    GridFunction::new(grid, next)
}

/// Which feedback (if any) closes the loop. The kernel operator decides how
/// gains are produced — exact Volterra solve or learned operator — so every
/// controller kind runs identically with either.
pub enum Controller<'a> {
    /// No feedback: `U = 0`. The coefficient estimate stays at zero.
    OpenLoop,
    /// Lyapunov design: feedback from the plant state, normalized projected
    /// gradient identifier.
    Lyapunov {
        op: &'a dyn KernelOperator,
        cfg: LyapunovConfig,
        beta_hat0: GridFunction,
    },
    /// Passive design: observer-based feedback, unnormalized identifier.
    /// The observer starts from `u_hat0`, defaulting to the plant state.
    Passive {
        op: &'a dyn KernelOperator,
        cfg: PassiveConfig,
        beta_hat0: GridFunction,
        u_hat0: Option<GridFunction>,
    },
}

/// One sampled instant of a closed-loop run.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub u: GridFunction,
    /// Observer state, present for passive runs.
    pub u_hat: Option<GridFunction>,
    pub beta_hat: GridFunction,
    /// Gain kernel in use at this instant (zero for open loop).
    pub kernel: GridFunction,
    /// Boundary control value applied at this instant.
    pub control: f64,
    pub diag: Diagnostics,
    /// Running quadrature of the squared output estimation error,
    /// `sum dt * (u(0) - u_hat(0))^2` (passive runs; zero otherwise).
    pub e0_sq_integral: f64,
    /// Running quadrature of the squared `L^2` estimation error norm.
    pub e_l2_sq_integral: f64,
}

/// Blow-up marker: the time and magnitude at which the threshold was
/// crossed. The trajectory's final snapshot is the last finite state.
#[derive(Debug, Clone, Copy)]
pub struct BlowUpReport {
    pub t: f64,
    pub sup_u: f64,
}

/// A sampled closed-loop run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub snapshots: Vec<Snapshot>,
    pub blowup: Option<BlowUpReport>,
}

impl Trajectory {
    pub fn final_snapshot(&self) -> &Snapshot {
        self.snapshots.last().expect("trajectory has at least the initial snapshot")
    }

    /// Writes `u.csv`, `beta_hat.csv`, `kernel.csv`, `scalars.csv` (and
    /// `u_hat.csv` when an observer ran) into `dir`. Field files have one
    /// row per sample: `t` followed by the nodal values; `scalars.csv`
    /// carries `t,U,u_norm,w_norm_c,V,Gamma`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let grid = self.final_snapshot().u.grid();
        let header: String = std::iter::once("t".to_string())
            .chain(grid.points().map(|x| x.to_string()))
            .collect::<Vec<_>>()
            .join(",");

        let write_field = |name: &str, field: &dyn Fn(&Snapshot) -> Option<&GridFunction>| -> Result<()> {
            let mut rows = Vec::new();
            for snap in &self.snapshots {
                if let Some(f) = field(snap) {
                    let mut row = snap.t.to_string();
                    for v in f.values() {
                        row.push(',');
                        row.push_str(&v.to_string());
                    }
                    rows.push(row);
                }
            }
            if rows.is_empty() {
                return Ok(());
            }
            let mut text = header.clone();
            text.push('\n');
            for row in rows {
                text.push_str(&row);
                text.push('\n');
            }
            std::fs::write(dir.join(name), text)?;
            Ok(())
        };

        write_field("u.csv", &|s| Some(&s.u))?;
        write_field("beta_hat.csv", &|s| Some(&s.beta_hat))?;
        write_field("kernel.csv", &|s| Some(&s.kernel))?;
        write_field("u_hat.csv", &|s| s.u_hat.as_ref())?;

        let mut scalars = String::from("t,U,u_norm,w_norm_c,V,Gamma\n");
        for snap in &self.snapshots {
            let u_norm = weighted_norm_sq(&snap.u, 0.0).sqrt();
            scalars.push_str(&format!(
                "{},{},{},{},{},{}\n",
                snap.t,
                snap.control,
                u_norm,
                snap.diag.w_norm_c_sq.sqrt(),
                snap.diag.v,
                snap.diag.gamma_state,
            ));
        }
        std::fs::write(dir.join("scalars.csv"), scalars)?;
        Ok(())
    }
}

/// Advances the closed loop over `horizon` seconds, sampling every
/// `sample_every` seconds (clamped to at least every step) plus the final
/// state. The kernel is recomputed from the current estimate each step.
///
/// A blow-up does not produce an `Err`: the truncated trajectory is returned
/// with [`Trajectory::blowup`] set, so callers keep the partial data.
pub fn run_closed_loop(
    plant: &PlantConfig,
    controller: &Controller,
    horizon: f64,
    sample_every: f64,
) -> Result<Trajectory> {
    plant.validate()?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidConfig {
            field: "horizon",
            message: format!("horizon must be positive, got {horizon}"),
        });
    }
    if !(sample_every.is_finite() && sample_every > 0.0) {
        return Err(Error::InvalidConfig {
            field: "sample_every",
            message: format!("sampling interval must be positive, got {sample_every}"),
        });
    }
    let grid = plant.grid;
    let dt = plant.dt;
    let n_steps = (horizon / dt).round().max(1.0) as usize;
    let stride = ((sample_every / dt).round() as usize).max(1);

    // Identifier state and per-controller diagnostics weights.
    let (mut beta_hat, diag_gamma, diag_c) = match controller {
        Controller::OpenLoop => (GridFunction::zeros(grid), 1.0, 1.0),
        Controller::Lyapunov { cfg, beta_hat0, op: _ } => {
            cfg.validate()?;
            check_estimate(beta_hat0, grid, cfg.bound)?;
            (beta_hat0.clone(), cfg.gamma, cfg.c)
        }
        Controller::Passive { cfg, beta_hat0, .. } => {
            cfg.validate()?;
            check_estimate(beta_hat0, grid, cfg.bound)?;
            (beta_hat0.clone(), cfg.gamma, 1.0)
        }
    };
    let mut u = plant.u0.clone();
    let mut u_hat = match controller {
        Controller::Passive { u_hat0, .. } => {
            let h = u_hat0.clone().unwrap_or_else(|| plant.u0.clone());
            if h.grid() != grid {
                return Err(Error::GridMismatch {
                    left: grid.n_points(),
                    right: h.grid().n_points(),
                });
            }
            Some(h)
        }
        _ => None,
    };

    let mut e0_sq_integral = 0.0;
    let mut e_l2_sq_integral = 0.0;
    let mut snapshots = Vec::with_capacity(n_steps / stride + 2);
    let mut blowup = None;

    for step in 0..=n_steps {
        let t = step as f64 * dt;
        let kernel = match controller {
            Controller::OpenLoop => GridFunction::zeros(grid),
            Controller::Lyapunov { op, .. } | Controller::Passive { op, .. } => {
                op.kernel(&beta_hat)?
            }
        };
        let control = match controller {
            Controller::OpenLoop => 0.0,
            Controller::Lyapunov { .. } => boundary_control(&kernel, &u)?,
            Controller::Passive { .. } => {
                boundary_control(&kernel, u_hat.as_ref().expect("passive runs have an observer"))?
            }
        };

        let crossed = sup_norm(&u) > BLOWUP_THRESHOLD
            || u_hat.as_ref().map_or(false, |h| sup_norm(h) > BLOWUP_THRESHOLD);
        if step % stride == 0 || step == n_steps || crossed {
            let diag = diagnostics(
                &u,
                u_hat.as_ref(),
                &beta_hat,
                &plant.beta,
                &kernel,
                diag_gamma,
                diag_c,
            )?;
            snapshots.push(Snapshot {
                t,
                u: u.clone(),
                u_hat: u_hat.clone(),
                beta_hat: beta_hat.clone(),
                kernel: kernel.clone(),
                control,
                diag,
                e0_sq_integral,
                e_l2_sq_integral,
            });
        }
        if crossed {
            blowup = Some(BlowUpReport { t, sup_u: sup_norm(&u) });
            break;
        }
        if step == n_steps {
            break;
        }

        // Advance identifier and states simultaneously from the time-t data.
        match controller {
            Controller::OpenLoop => {
                u = step_plant(&u, 0.0, &plant.beta, dt)?;
            }
            Controller::Lyapunov { cfg, .. } => {
                let beta_next = update_beta_lyapunov(&u, &beta_hat, &kernel, cfg, dt)?;
                u = step_plant(&u, control, &plant.beta, dt)?;
                beta_hat = beta_next;
            }
            Controller::Passive { cfg, .. } => {
                let h = u_hat.as_ref().expect("passive runs have an observer");
                let e = u.sub(h)?;
                let e0 = e.value(0);
                e0_sq_integral += dt * e0 * e0;
                e_l2_sq_integral += dt * weighted_norm_sq(&e, 0.0);
                let tau = tau_passive(&u, h, cfg)?;
                let beta_next = update_beta_passive(&beta_hat, &tau, cfg.bound, dt)?;
                let h_next = step_observer(h, &u, control, &beta_hat, cfg.gamma0, dt)?;
                u = step_plant(&u, control, &plant.beta, dt)?;
                u_hat = Some(h_next);
                beta_hat = beta_next;
            }
        }
    }

    Ok(Trajectory { dt, snapshots, blowup })
}

fn check_estimate(beta_hat0: &GridFunction, grid: Grid1D, bound: f64) -> Result<()> {
    if beta_hat0.grid() != grid {
        return Err(Error::GridMismatch {
            left: grid.n_points(),
            right: beta_hat0.grid().n_points(),
        });
    }
    if sup_norm(beta_hat0) > bound {
        return Err(Error::InvalidConfig {
            field: "beta_hat0",
            message: format!(
                "initial estimate sup {} exceeds the projection bound {bound}",
                sup_norm(beta_hat0)
            ),
        });
    }
    Ok(())
}
