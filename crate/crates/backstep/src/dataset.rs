//! Supervised kernel datasets: generation by running the exact-kernel
//! adaptive loop, and a checksummed binary serialization format.
//!
//! A dataset is a list of (coefficient estimate, gain kernel) pairs sampled
//! along closed-loop trajectories: for each run a shape parameter `sigma` is
//! drawn uniformly, the plant coefficient is the Chebyshev-type function
//! `5 cos(sigma * arccos x)`, and the adaptive controller with the exact
//! Volterra solver is simulated, recording the pair every `subsample`
//! seconds. The recorded estimates — not the true coefficients — are what a
//! learned kernel operator must handle at run time.
//!
//! Runs execute in parallel (capped by the `BACKSTEP_NO_THREADS` environment
//! variable); all randomness is drawn up front so results are byte-identical
//! regardless of scheduling.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptive::LyapunovConfig;
use crate::numerics::{convolve, sup_norm, GridFunction, Grid1D};
use crate::plant::{run_closed_loop, Controller, PlantConfig};
use crate::volterra::ExactKernelOperator;
use crate::{Error, Result};

/// One supervised pair plus the provenance needed to regenerate it.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSample {
    pub run_id: u32,
    /// Index of the sampling instant within its run (`t = index * subsample`).
    pub sample_index: u32,
    pub t: f64,
    /// Shape parameter of the run's true coefficient.
    pub sigma: f64,
    /// True if the originating run crossed the blow-up threshold before its
    /// horizon; such samples are kept but flagged for auditability.
    pub blown_up: bool,
    /// Coefficient estimate at the sensor points (network input).
    pub beta_hat: Vec<f64>,
    /// Gain kernel at the grid points (regression target).
    pub kernel: Vec<f64>,
}

/// A kernel dataset: fixed sensor locations, kernel grid, and samples.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDataset {
    pub sensors: Vec<f64>,
    pub grid: Grid1D,
    pub dx: f64,
    pub dt: f64,
    pub seed: u64,
    pub samples: Vec<KernelSample>,
}

impl KernelDataset {
    /// Validates sample shapes and rejects duplicate (run, index) keys.
    pub fn new(
        sensors: Vec<f64>,
        grid: Grid1D,
        dx: f64,
        dt: f64,
        seed: u64,
        samples: Vec<KernelSample>,
    ) -> Result<Self> {
        let m = sensors.len();
        let n = grid.n_points();
        let mut keys: Vec<(u32, u32)> = Vec::with_capacity(samples.len());
        for s in &samples {
            if s.beta_hat.len() != m || s.kernel.len() != n {
                return Err(Error::GridMismatch {
                    left: m.max(n),
                    right: s.beta_hat.len().max(s.kernel.len()),
                });
            }
            if !s.beta_hat.iter().chain(&s.kernel).all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "dataset sample values",
                });
            }
            keys.push((s.run_id, s.sample_index));
        }
        keys.sort_unstable();
        if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateSample {
                run_id: w[0].0,
                sample_index: w[0].1,
            });
        }
        Ok(Self { sensors, grid, dx, dt, seed, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Re-solves the kernel equation on a deterministic subset of samples
    /// (every `stride`-th) and checks the stored kernel's equation residual
    /// against `tolerance`.
    pub fn validate_kernels(&self, stride: usize, tolerance: f64) -> Result<()> {
        let stride = stride.max(1);
        for s in self.samples.iter().step_by(stride) {
            let beta_hat = GridFunction::new(self.grid, s.beta_hat.clone())?;
            let kernel = GridFunction::new(self.grid, s.kernel.clone())?;
            // Residual of k = -beta_hat + beta_hat * k.
            let recirc = convolve(&beta_hat, &kernel)?;
            let residual = kernel.sub(&recirc)?.add(&beta_hat)?;
            let sup = sup_norm(&residual);
            if sup > tolerance {
                return Err(Error::InvalidConfig {
                    field: "kernel",
                    message: format!(
                        "sample (run {}, index {}) has kernel residual {sup} > {tolerance}",
                        s.run_id, s.sample_index
                    ),
                });
            }
        }
        Ok(())
    }

    /// Flattens the dataset to CSV (one row per sample; coefficient and
    /// kernel values as numbered columns).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = String::from("run_id,sample_index,t,sigma,blown_up");
        for i in 0..self.sensors.len() {
            header.push_str(&format!(",beta_hat_{i}"));
        }
        for i in 0..self.grid.n_points() {
            header.push_str(&format!(",kernel_{i}"));
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{header}")?;
        for s in &self.samples {
            let mut row = format!(
                "{},{},{},{},{}",
                s.run_id,
                s.sample_index,
                s.t,
                s.sigma,
                u8::from(s.blown_up)
            );
            for v in s.beta_hat.iter().chain(&s.kernel) {
                row.push(',');
                row.push_str(&v.to_string());
            }
            writeln!(out, "{row}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Settings for dataset generation. Defaults reproduce the shipped corpus:
/// 10 runs over `sigma ~ U(2.7, 3.2)`, horizon 10 s sampled every 0.01 s
/// (10000 pairs), on the 101-point grid with `dt = 5e-3`.
#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub n_runs: usize,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub horizon: f64,
    pub subsample: f64,
    pub grid: Grid1D,
    pub dt: f64,
    /// Adaptation gain of the generating controller. The default of 1 makes
    /// the estimate actually travel during the unstable transient, so the
    /// recorded inputs cover a genuinely diverse family.
    pub gamma: f64,
    pub c: f64,
    pub bound: f64,
    pub beta_hat0: f64,
    pub u0: f64,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_runs: 10,
            sigma_low: 2.7,
            sigma_high: 3.2,
            horizon: 10.0,
            subsample: 0.01,
            grid: Grid1D::from_dx(0.01).expect("default grid spacing is valid"),
            dt: 5e-3,
            gamma: 1.0,
            c: 1.0,
            bound: 5.0,
            beta_hat0: 1.0,
            u0: 1.0,
            seed: 1,
        }
    }
}

/// The Chebyshev-type coefficient family `5 cos(sigma * arccos x)`.
pub fn chebyshev_beta(grid: Grid1D, sigma: f64) -> GridFunction {
    GridFunction::from_fn(grid, |x| 5.0 * (sigma * x.acos()).cos())
}

struct RunOutput {
    sigma: f64,
    blown_up: bool,
    /// (sample_index, t, beta_hat values, kernel values)
    rows: Vec<(u32, f64, Vec<f64>, Vec<f64>)>,
}

/// Runs `cfg.n_runs` adaptive closed loops and collects the sampled
/// (estimate, kernel) pairs. Blown-up runs contribute their samples up to
/// the blow-up, flagged; generation continues with the remaining runs.
pub fn generate(cfg: &GenerateConfig) -> Result<KernelDataset> {
    if !(cfg.sigma_low < cfg.sigma_high) {
        return Err(Error::InvalidConfig {
            field: "sigma",
            message: format!("need sigma_low < sigma_high, got [{}, {}]", cfg.sigma_low, cfg.sigma_high),
        });
    }
    if !(cfg.horizon > 0.0 && cfg.horizon.is_finite()) {
        return Err(Error::InvalidConfig {
            field: "horizon",
            message: format!("horizon must be positive, got {}", cfg.horizon),
        });
    }
    if cfg.subsample < cfg.dt {
        return Err(Error::InvalidConfig {
            field: "subsample",
            message: format!("subsample {} must be at least dt {}", cfg.subsample, cfg.dt),
        });
    }
    let ratio = cfg.subsample / cfg.dt;
    if (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::InvalidConfig {
            field: "subsample",
            message: format!("subsample {} is not an integer multiple of dt {}", cfg.subsample, cfg.dt),
        });
    }
    let n_samples_per_run = (cfg.horizon / cfg.subsample).round() as usize;
    if n_samples_per_run == 0 {
        return Err(Error::InvalidConfig {
            field: "horizon",
            message: "horizon shorter than one subsample interval".into(),
        });
    }

    // Draw every run's sigma up front so the result does not depend on
    // thread scheduling.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigmas: Vec<f64> = (0..cfg.n_runs)
        .map(|_| cfg.sigma_low + (cfg.sigma_high - cfg.sigma_low) * rng.gen::<f64>())
        .collect();

    let n_threads = std::env::var("BACKSTEP_NO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map_or(1, |p| p.get())
        })
        .min(cfg.n_runs.max(1));

    let mut outputs: Vec<Option<Result<RunOutput>>> = Vec::new();
    outputs.resize_with(cfg.n_runs, || None);
    {
        let slots: Vec<std::sync::Mutex<&mut Option<Result<RunOutput>>>> =
            outputs.iter_mut().map(std::sync::Mutex::new).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..n_threads {
                scope.spawn(|| loop {
                    let run = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if run >= cfg.n_runs {
                        break;
                    }
                    let result = generate_one_run(cfg, sigmas[run], n_samples_per_run);
                    **slots[run].lock().expect("result slot poisoned") = Some(result);
                });
            }
        });
    }

    let mut samples = Vec::with_capacity(cfg.n_runs * n_samples_per_run);
    for (run_id, slot) in outputs.into_iter().enumerate() {
        let out = slot.expect("every run produces a result")?;
        for (sample_index, t, beta_hat, kernel) in out.rows {
            samples.push(KernelSample {
                run_id: run_id as u32,
                sample_index,
                t,
                sigma: out.sigma,
                blown_up: out.blown_up,
                beta_hat,
                kernel,
            });
        }
    }

    KernelDataset::new(
        cfg.grid.points().collect(),
        cfg.grid,
        cfg.grid.dx(),
        cfg.dt,
        cfg.seed,
        samples,
    )
}

fn generate_one_run(
    cfg: &GenerateConfig,
    sigma: f64,
    n_samples: usize,
) -> Result<RunOutput> {
    let plant = PlantConfig {
        grid: cfg.grid,
        dt: cfg.dt,
        beta: chebyshev_beta(cfg.grid, sigma),
        u0: GridFunction::constant(cfg.grid, cfg.u0),
        bound: cfg.bound,
    };
    let op = ExactKernelOperator;
    let controller = Controller::Lyapunov {
        op: &op,
        cfg: LyapunovConfig {
            gamma: cfg.gamma,
            c: cfg.c,
            bound: cfg.bound,
        },
        beta_hat0: GridFunction::constant(cfg.grid, cfg.beta_hat0),
    };
    let traj = run_closed_loop(&plant, &controller, cfg.horizon, cfg.subsample)?;
    let blown_up = traj.blowup.is_some();
    let rows = traj
        .snapshots
        .iter()
        .enumerate()
        .filter(|(i, _)| *i < n_samples)
        .map(|(i, snap)| {
            (
                i as u32,
                snap.t,
                snap.beta_hat.values().to_vec(),
                snap.kernel.values().to_vec(),
            )
        })
        .collect();
    Ok(RunOutput { sigma, blown_up, rows })
}

const MAGIC: [u8; 4] = *b"KDS1";
const SUPPORTED_VERSION: u8 = b'1';

/// Serializes the dataset: magic `KDS1`, header, sensor locations, sample
/// records, and a trailing CRC-32 of everything before it.
pub fn save(ds: &KernelDataset, path: &Path) -> Result<()> {
    let m = ds.sensors.len();
    let n = ds.grid.n_points();
    let mut buf: Vec<u8> =
        Vec::with_capacity(64 + 8 * m + ds.samples.len() * (21 + 8 * (m + n + 2)));
    buf.extend_from_slice(b"KDS");
    buf.push(SUPPORTED_VERSION);
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.samples.len() as u64).to_le_bytes());
    buf.extend_from_slice(&ds.seed.to_le_bytes());
    buf.extend_from_slice(&ds.dx.to_le_bytes());
    buf.extend_from_slice(&ds.dt.to_le_bytes());
    for v in &ds.sensors {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.samples {
        buf.extend_from_slice(&s.run_id.to_le_bytes());
        buf.extend_from_slice(&s.sample_index.to_le_bytes());
        buf.extend_from_slice(&s.t.to_le_bytes());
        buf.extend_from_slice(&s.sigma.to_le_bytes());
        buf.push(u8::from(s.blown_up));
        for v in &s.beta_hat {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &s.kernel {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&buf);
    let crc = hasher.finalize();
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

/// Cursor over a byte buffer producing precise truncation errors.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).ok_or(Error::Truncated {
            expected: usize::MAX,
        })?;
        if end > self.buf.len() {
            return Err(Error::Truncated { expected: end });
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64_vec(&mut self, len: usize) -> Result<Vec<f64>> {
        let bytes = self.take(len.checked_mul(8).ok_or(Error::Truncated {
            expected: usize::MAX,
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Reads a dataset back, verifying magic, version, checksum, and key
/// uniqueness. Each failure mode is a distinct error.
pub fn load(path: &Path) -> Result<KernelDataset> {
    let buf = std::fs::read(path)?;
    if buf.len() < 4 {
        return Err(Error::Truncated { expected: 4 });
    }
    if &buf[0..3] != b"KDS" {
        return Err(Error::BadMagic {
            found: [buf[0], buf[1], buf[2], buf[3]],
            expected: MAGIC,
        });
    }
    if buf[3] != SUPPORTED_VERSION {
        return Err(Error::VersionMismatch {
            found: (buf[3] as char).to_digit(10).unwrap_or(0),
            supported: 1,
        });
    }
    if buf.len() < 8 {
        return Err(Error::Truncated { expected: 8 });
    }
    let (payload, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(payload);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut r = ByteReader::new(payload);
    r.take(4)?; // magic + version, already validated
    let m = r.u32()? as usize;
    let n = r.u32()? as usize;
    let count = r.u64()? as usize;
    let seed = r.u64()?;
    let dx = r.f64()?;
    let dt = r.f64()?;
    let sensors = r.f64_vec(m)?;
    let grid = Grid1D::new(n)?;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let run_id = r.u32()?;
        let sample_index = r.u32()?;
        let t = r.f64()?;
        let sigma = r.f64()?;
        let blown_up = r.u8()? != 0;
        let beta_hat = r.f64_vec(m)?;
        let kernel = r.f64_vec(n)?;
        samples.push(KernelSample {
            run_id,
            sample_index,
            t,
            sigma,
            blown_up,
            beta_hat,
            kernel,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Truncated {
            expected: r.position(),
        });
    }
    KernelDataset::new(sensors, grid, dx, dt, seed, samples)
}
