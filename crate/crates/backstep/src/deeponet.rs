//! A small operator-learning network mapping coefficient estimates to gain
//! kernels, written from scratch on flat `f64` arrays.
//!
//! The model follows the branch/trunk construction: a branch MLP encodes the
//! coefficient's values at `m` fixed sensor points into `p` latent
//! coefficients, a trunk MLP encodes an evaluation point `x` into `p` basis
//! values, and the prediction is their dot product plus a scalar bias,
//!
//! ```text
//!     k(x) = sum_k branch_k(beta_hat(sensors)) * trunk_k(x) + b0 .
//! ```
//!
//! Because the trunk depends only on `x`, its outputs over a fixed grid can
//! be computed once and reused for every subsequent coefficient — that is
//! what makes inference dramatically cheaper than re-solving the kernel
//! equation (see [`NeuralKernelOperator`] and the `bench` module).
//!
//! Training is plain Adam on mean-squared error with hand-derived batched
//! gradients, reproducible bit-for-bit from a seed on one platform.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ByteReader, KernelDataset};
use crate::numerics::{GridFunction, Grid1D};
use crate::volterra::KernelOperator;
use crate::{Error, Result};

/// Hidden-layer nonlinearity, applied uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn id(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            other => Err(Error::InvalidConfig {
                field: "activation",
                message: format!("unknown activation id {other}"),
            }),
        }
    }
}

/// Shape of one multilayer perceptron. `layer_widths` runs
/// `[input, hidden..., output]`; hidden layers always carry biases and the
/// activation, the output layer carries them only if the flags say so.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub output_bias: bool,
    pub activate_output: bool,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::InvalidConfig {
                field: "layer_widths",
                message: format!(
                    "need input, at least one hidden, and output widths; got {:?}",
                    self.layer_widths
                ),
            });
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig {
                field: "layer_widths",
                message: "zero-width layer".into(),
            });
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    fn layer_has_bias(&self, layer: usize) -> bool {
        layer + 1 < self.n_layers() || self.output_bias
    }

    fn layer_is_activated(&self, layer: usize) -> bool {
        layer + 1 < self.n_layers() || self.activate_output
    }

    pub fn param_count(&self) -> usize {
        (0..self.n_layers())
            .map(|l| {
                let fan_in = self.layer_widths[l];
                let fan_out = self.layer_widths[l + 1];
                fan_in * fan_out + if self.layer_has_bias(l) { fan_out } else { 0 }
            })
            .sum()
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated widths")
    }
}

/// Per-layer scratch of post-activation values for a forward pass; index 0
/// holds the input batch.
#[derive(Debug, Default, Clone)]
struct MlpCache {
    acts: Vec<Vec<f64>>,
    batch: usize,
}

/// A multilayer perceptron over flat row-major weights. Layer `l` stores its
/// weight matrix `[out x in]` row-major followed by its bias vector (when
/// present), all layers concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub weights: Vec<f64>,
}

impl Mlp {
    /// Zero-initialized network of the given shape.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.param_count();
        Ok(Self { spec, weights: vec![0.0; n] })
    }

    /// Uniform Glorot initialization for weights, zero biases.
    pub fn glorot(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::with_capacity(spec.param_count());
        for l in 0..spec.n_layers() {
            let fan_in = spec.layer_widths[l];
            let fan_out = spec.layer_widths[l + 1];
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                weights.push((2.0 * rng.gen::<f64>() - 1.0) * limit);
            }
            if spec.layer_has_bias(l) {
                weights.extend(std::iter::repeat(0.0).take(fan_out));
            }
        }
        Ok(Self { spec, weights })
    }

    /// Offset of layer `l`'s weight matrix within the flat parameter vector.
    fn layer_offset(&self, layer: usize) -> usize {
        (0..layer)
            .map(|l| {
                let fan_in = self.spec.layer_widths[l];
                let fan_out = self.spec.layer_widths[l + 1];
                fan_in * fan_out + if self.spec.layer_has_bias(l) { fan_out } else { 0 }
            })
            .sum()
    }

    /// Forward pass over a batch laid out row-major `[batch x input_width]`.
    fn forward_batch(&self, input: &[f64], batch: usize, cache: &mut MlpCache) {
        debug_assert_eq!(input.len(), batch * self.spec.input_width());
        cache.batch = batch;
        cache
            .acts
            .resize_with(self.spec.n_layers() + 1, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(input);
        for l in 0..self.spec.n_layers() {
            let fan_in = self.spec.layer_widths[l];
            let fan_out = self.spec.layer_widths[l + 1];
            let w_off = self.layer_offset(l);
            let b_off = w_off + fan_in * fan_out;
            let has_bias = self.spec.layer_has_bias(l);
            let activated = self.spec.layer_is_activated(l);
            let (prev_slot, out_slot) = split_two(&mut cache.acts, l, l + 1);
            let prev = &*prev_slot;
            out_slot.clear();
            out_slot.resize(batch * fan_out, 0.0);
            for s in 0..batch {
                let row = &prev[s * fan_in..(s + 1) * fan_in];
                let out_row = &mut out_slot[s * fan_out..(s + 1) * fan_out];
                for o in 0..fan_out {
                    let w = &self.weights[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    let mut acc = if has_bias { self.weights[b_off + o] } else { 0.0 };
                    for i in 0..fan_in {
                        acc += w[i] * row[i];
                    }
                    out_row[o] = if activated {
                        self.spec.activation.apply(acc)
                    } else {
                        acc
                    };
                }
            }
        }
    }

    /// Convenience single-sample forward.
    fn forward_single(&self, input: &[f64], cache: &mut MlpCache) -> Vec<f64> {
        self.forward_batch(input, 1, cache);
        cache.acts[self.spec.n_layers()].clone()
    }

    /// Accumulates parameter gradients for the batch recorded in `cache`.
    /// `upstream` is dLoss/dOutput, `[batch x output_width]`; `grads` has the
    /// weight layout and is added into (callers zero it between steps).
    fn backward_batch(&self, cache: &MlpCache, upstream: &[f64], grads: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.spec.param_count());
        let batch = cache.batch;
        let mut delta = upstream.to_vec();
        for l in (0..self.spec.n_layers()).rev() {
            let fan_in = self.spec.layer_widths[l];
            let fan_out = self.spec.layer_widths[l + 1];
            let w_off = self.layer_offset(l);
            let b_off = w_off + fan_in * fan_out;
            let has_bias = self.spec.layer_has_bias(l);
            let outputs = &cache.acts[l + 1];
            let inputs = &cache.acts[l];
            if self.spec.layer_is_activated(l) {
                for (d, &a) in delta.iter_mut().zip(outputs.iter()) {
                    *d *= self.spec.activation.derivative_from_output(a);
                }
            }
            for s in 0..batch {
                let d_row = &delta[s * fan_out..(s + 1) * fan_out];
                let in_row = &inputs[s * fan_in..(s + 1) * fan_in];
                for o in 0..fan_out {
                    let d = d_row[o];
                    if d == 0.0 {
                        continue;
                    }
                    let g = &mut grads[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    for i in 0..fan_in {
                        g[i] += d * in_row[i];
                    }
                }
                if has_bias {
                    for o in 0..fan_out {
                        grads[b_off + o] += d_row[o];
                    }
                }
            }
            if l > 0 {
                let mut prev_delta = vec![0.0; batch * fan_in];
                for s in 0..batch {
                    let d_row = &delta[s * fan_out..(s + 1) * fan_out];
                    let p_row = &mut prev_delta[s * fan_in..(s + 1) * fan_in];
                    for o in 0..fan_out {
                        let d = d_row[o];
                        if d == 0.0 {
                            continue;
                        }
                        let w = &self.weights[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                        for i in 0..fan_in {
                            p_row[i] += d * w[i];
                        }
                    }
                }
                delta = prev_delta;
            }
        }
    }
}

/// Borrows two distinct entries of the activation list mutably.
fn split_two(acts: &mut [Vec<f64>], a: usize, b: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
    debug_assert!(a < b);
    let (left, right) = acts.split_at_mut(b);
    (&mut left[a], &mut right[0])
}

/// Affine normalization: values enter the network as
/// `(v - input_offset) * input_scale`, targets as
/// `(k - output_offset) * output_scale`, and predictions are mapped back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub input_offset: f64,
    pub input_scale: f64,
    pub output_offset: f64,
    pub output_scale: f64,
}

impl Scaling {
    pub fn identity() -> Self {
        Self {
            input_offset: 0.0,
            input_scale: 1.0,
            output_offset: 0.0,
            output_scale: 1.0,
        }
    }

    /// Natural scales for a coefficient family bounded by `bound`: inputs in
    /// roughly [-1, 1], targets divided by the kernel magnitude bound
    /// `bound * exp(bound)`.
    pub fn for_bound(bound: f64) -> Self {
        Self {
            input_offset: 0.0,
            input_scale: 1.0 / bound,
            output_offset: 0.0,
            output_scale: 1.0 / (bound * bound.exp()),
        }
    }

    fn scale_input(&self, v: f64) -> f64 {
        (v - self.input_offset) * self.input_scale
    }

    fn scale_output(&self, k: f64) -> f64 {
        (k - self.output_offset) * self.output_scale
    }

    fn unscale_output(&self, y: f64) -> f64 {
        y / self.output_scale + self.output_offset
    }
}

/// The branch/trunk model plus everything needed to reproduce and serialize
/// it. `input_channels` is 1 for the plain coefficient-to-kernel map and 2
/// for models that also take the coefficient's time derivative (the branch
/// then reads the concatenation of both channels at the sensors).
#[derive(Debug, Clone, PartialEq)]
pub struct DeepOnetModel {
    pub branch: Mlp,
    pub trunk: Mlp,
    /// Scalar bias added to every branch-trunk dot product.
    pub output_bias: f64,
    /// Sensor locations in [0, 1] at which the branch reads its input.
    pub sensors: Vec<f64>,
    pub scaling: Scaling,
    pub seed: u64,
    pub input_channels: usize,
}

impl DeepOnetModel {
    /// Builds a model with freshly initialized weights.
    pub fn new(
        branch_spec: MlpSpec,
        trunk_spec: MlpSpec,
        sensors: Vec<f64>,
        scaling: Scaling,
        seed: u64,
        input_channels: usize,
    ) -> Result<Self> {
        branch_spec.validate()?;
        trunk_spec.validate()?;
        if input_channels == 0 || input_channels > 2 {
            return Err(Error::InvalidConfig {
                field: "input_channels",
                message: format!("supported channel counts are 1 and 2, got {input_channels}"),
            });
        }
        if branch_spec.input_width() != sensors.len() * input_channels {
            return Err(Error::InvalidConfig {
                field: "branch",
                message: format!(
                    "branch input width {} != sensors {} x channels {input_channels}",
                    branch_spec.input_width(),
                    sensors.len()
                ),
            });
        }
        if trunk_spec.input_width() != 1 {
            return Err(Error::InvalidConfig {
                field: "trunk",
                message: format!("trunk input width must be 1, got {}", trunk_spec.input_width()),
            });
        }
        if branch_spec.output_width() != trunk_spec.output_width() {
            return Err(Error::InvalidConfig {
                field: "p",
                message: format!(
                    "branch output {} != trunk output {}",
                    branch_spec.output_width(),
                    trunk_spec.output_width()
                ),
            });
        }
        if sensors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "sensor locations" });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branch = Mlp::glorot(branch_spec, &mut rng)?;
        let trunk = Mlp::glorot(trunk_spec, &mut rng)?;
        Ok(Self {
            branch,
            trunk,
            output_bias: 0.0,
            sensors,
            scaling,
            seed,
            input_channels,
        })
    }

    /// The default coefficient-to-kernel architecture: 101 sensors, branch
    /// 101 -> 49 -> 49 -> 49 (tanh hidden, linear bias-free output), trunk
    /// 1 -> 49 -> 49 -> 49 (tanh throughout, biased), one scalar output
    /// bias — 14848 parameters in total, scaled for a coefficient bound
    /// of 5. Two hidden layers measurably out-fit a single wider one at
    /// this parameter budget on kernel datasets.
    pub fn new_default(seed: u64) -> Self {
        let sensors: Vec<f64> = Grid1D::new(101).expect("101-point grid").points().collect();
        let branch_spec = MlpSpec {
            layer_widths: vec![101, 49, 49, 49],
            activation: Activation::Tanh,
            output_bias: false,
            activate_output: false,
        };
        let trunk_spec = MlpSpec {
            layer_widths: vec![1, 49, 49, 49],
            activation: Activation::Tanh,
            output_bias: true,
            activate_output: true,
        };
        Self::new(
            branch_spec,
            trunk_spec,
            sensors,
            Scaling::for_bound(5.0),
            seed,
            1,
        )
        .expect("default architecture is valid")
    }

    /// Latent basis size shared by branch and trunk.
    pub fn p(&self) -> usize {
        self.branch.spec.output_width()
    }

    /// Total trainable parameters (branch + trunk + scalar output bias).
    pub fn param_count(&self) -> usize {
        self.branch.spec.param_count() + self.trunk.spec.param_count() + 1
    }

    /// Reads a coefficient at the sensor locations (linear interpolation if
    /// the grids differ) and applies input scaling.
    fn sensor_inputs(&self, beta_hat: &GridFunction) -> Vec<f64> {
        let grid_matches = beta_hat.grid().n_points() == self.sensors.len()
            && self
                .sensors
                .iter()
                .enumerate()
                .all(|(i, &s)| s == beta_hat.grid().x(i));
        if grid_matches {
            beta_hat
                .values()
                .iter()
                .map(|&v| self.scaling.scale_input(v))
                .collect()
        } else {
            self.sensors
                .iter()
                .map(|&s| self.scaling.scale_input(beta_hat.sample_at(s)))
                .collect()
        }
    }

    /// Trunk outputs over a grid, row-major `[n_points x p]`.
    pub fn trunk_outputs(&self, grid: Grid1D) -> Vec<f64> {
        let xs: Vec<f64> = grid.points().collect();
        let mut cache = MlpCache::default();
        self.trunk.forward_batch(&xs, xs.len(), &mut cache);
        cache.acts[self.trunk.spec.n_layers()].clone()
    }

    /// Mixes branch outputs with precomputed trunk outputs and de-normalizes.
    fn mix(&self, branch_out: &[f64], trunk_out: &[f64], n: usize) -> Vec<f64> {
        let p = self.p();
        (0..n)
            .map(|j| {
                let t_row = &trunk_out[j * p..(j + 1) * p];
                let mut acc = self.output_bias;
                for k in 0..p {
                    acc += branch_out[k] * t_row[k];
                }
                self.scaling.unscale_output(acc)
            })
            .collect()
    }

    /// Predicts the gain kernel for a coefficient estimate, evaluated at
    /// every point of the estimate's own grid.
    pub fn forward(&self, beta_hat: &GridFunction) -> Result<GridFunction> {
        if self.input_channels != 1 {
            return Err(Error::InvalidConfig {
                field: "input_channels",
                message: format!(
                    "this model expects {} input channels; use the matching entry point",
                    self.input_channels
                ),
            });
        }
        let grid = beta_hat.grid();
        let trunk_out = self.trunk_outputs(grid);
        let inputs = self.sensor_inputs(beta_hat);
        let mut cache = MlpCache::default();
        let branch_out = self.branch.forward_single(&inputs, &mut cache);
        let values = self.mix(&branch_out, &trunk_out, grid.n_points());
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "model output" });
        }
        GridFunction::new(grid, values)
    }

    /// Predicts the kernel's time derivative from the estimate and its rate;
    /// requires a two-channel model (both channels share the input scaling).
    pub fn forward_derivative(
        &self,
        beta_hat: &GridFunction,
        beta_hat_t: &GridFunction,
    ) -> Result<GridFunction> {
        if self.input_channels != 2 {
            return Err(Error::InvalidConfig {
                field: "input_channels",
                message: format!(
                    "derivative prediction needs a 2-channel model, this one has {}",
                    self.input_channels
                ),
            });
        }
        crate::numerics::same_grid(beta_hat, beta_hat_t)?;
        let grid = beta_hat.grid();
        let trunk_out = self.trunk_outputs(grid);
        let mut inputs = self.sensor_inputs(beta_hat);
        inputs.extend(self.sensor_inputs(beta_hat_t));
        let mut cache = MlpCache::default();
        let branch_out = self.branch.forward_single(&inputs, &mut cache);
        let values = self.mix(&branch_out, &trunk_out, grid.n_points());
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "model output" });
        }
        GridFunction::new(grid, values)
    }

    /// Serializes the model (magic `BKNO`, version 1, little-endian).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + 8 * (self.sensors.len() + self.param_count()));
        buf.extend_from_slice(b"BKNO");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(self.input_channels as u32).to_le_bytes());
        buf.extend_from_slice(&(self.sensors.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.p() as u32).to_le_bytes());
        for spec in [&self.branch.spec, &self.trunk.spec] {
            buf.extend_from_slice(&(spec.layer_widths.len() as u32).to_le_bytes());
            for &w in &spec.layer_widths {
                buf.extend_from_slice(&(w as u32).to_le_bytes());
            }
            buf.push(spec.activation.id());
            buf.push(u8::from(spec.output_bias));
            buf.push(u8::from(spec.activate_output));
        }
        for v in [
            self.scaling.input_offset,
            self.scaling.input_scale,
            self.scaling.output_offset,
            self.scaling.output_scale,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.output_bias.to_le_bytes());
        for v in &self.sensors {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.branch.weights.iter().chain(&self.trunk.weights) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Reads a model back; magic, version, and truncation each fail
    /// distinctly.
    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        let mut r = ByteReader::new(&buf);
        let magic = r.take(4)?;
        if magic != b"BKNO" {
            return Err(Error::BadMagic {
                found: magic.try_into().expect("4 bytes"),
                expected: *b"BKNO",
            });
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::VersionMismatch { found: version, supported: 1 });
        }
        let input_channels = r.u32()? as usize;
        let m = r.u32()? as usize;
        let p = r.u32()? as usize;
        let mut specs = Vec::with_capacity(2);
        for _ in 0..2 {
            let n_widths = r.u32()? as usize;
            let mut layer_widths = Vec::with_capacity(n_widths);
            for _ in 0..n_widths {
                layer_widths.push(r.u32()? as usize);
            }
            let activation = Activation::from_id(r.u8()?)?;
            let output_bias = r.u8()? != 0;
            let activate_output = r.u8()? != 0;
            let spec = MlpSpec { layer_widths, activation, output_bias, activate_output };
            spec.validate()?;
            specs.push(spec);
        }
        let trunk_spec = specs.pop().expect("two specs");
        let branch_spec = specs.pop().expect("two specs");
        let scaling = Scaling {
            input_offset: r.f64()?,
            input_scale: r.f64()?,
            output_offset: r.f64()?,
            output_scale: r.f64()?,
        };
        let seed = r.u64()?;
        let output_bias = r.f64()?;
        let sensors = r.f64_vec(m)?;
        let branch_weights = r.f64_vec(branch_spec.param_count())?;
        let trunk_weights = r.f64_vec(trunk_spec.param_count())?;
        if r.remaining() != 0 {
            return Err(Error::Truncated { expected: r.position() });
        }
        if branch_spec.output_width() != p || trunk_spec.output_width() != p {
            return Err(Error::InvalidConfig {
                field: "p",
                message: "stored latent size disagrees with network shapes".into(),
            });
        }
        if branch_spec.input_width() != m * input_channels {
            return Err(Error::InvalidConfig {
                field: "branch",
                message: "stored branch width disagrees with sensor count".into(),
            });
        }
        Ok(Self {
            branch: Mlp { spec: branch_spec, weights: branch_weights },
            trunk: Mlp { spec: trunk_spec, weights: trunk_weights },
            output_bias,
            sensors,
            scaling,
            seed,
            input_channels,
        })
    }
}

/// A model bound to a fixed grid with the trunk evaluated once up front.
/// Each kernel query then costs one branch pass plus an `n x p` mix — the
/// per-call cost is what the speedup benchmark measures against the direct
/// Volterra solve.
pub struct NeuralKernelOperator {
    model: DeepOnetModel,
    grid: Grid1D,
    trunk_cache: Vec<f64>,
}

impl NeuralKernelOperator {
    pub fn new(model: DeepOnetModel, grid: Grid1D) -> Result<Self> {
        if model.input_channels != 1 {
            return Err(Error::InvalidConfig {
                field: "input_channels",
                message: "kernel operators use single-channel models".into(),
            });
        }
        let trunk_cache = model.trunk_outputs(grid);
        if trunk_cache.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "trunk outputs" });
        }
        Ok(Self { model, grid, trunk_cache })
    }

    pub fn model(&self) -> &DeepOnetModel {
        &self.model
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }
}

impl KernelOperator for NeuralKernelOperator {
    fn kernel(&self, beta_hat: &GridFunction) -> Result<GridFunction> {
        if beta_hat.grid() != self.grid {
            return Err(Error::GridMismatch {
                left: self.grid.n_points(),
                right: beta_hat.grid().n_points(),
            });
        }
        let inputs = self.model.sensor_inputs(beta_hat);
        let mut cache = MlpCache::default();
        let branch_out = self.model.branch.forward_single(&inputs, &mut cache);
        let values = self
            .model
            .mix(&branch_out, &self.trunk_cache, self.grid.n_points());
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "model output" });
        }
        GridFunction::new(self.grid, values)
    }
}

/// Training settings. `holdout_every = k` holds out whole runs whose id is
/// congruent to `k - 1` modulo `k`, so no trajectory leaks between splits;
/// 0 disables the holdout. When `target_test_rel_l2` is set, training stops
/// early once the held-out error reaches it (checked every `check_every`
/// epochs) — the stopping rule is deterministic.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub holdout_every: usize,
    /// Recalibrate the model's output scale to `1 / max |target|` over the
    /// training split before optimizing, so scaled targets fill [-1, 1].
    /// The calibrated scale is stored in the model and serialized with it.
    pub auto_scale: bool,
    pub target_test_rel_l2: Option<f64>,
    pub check_every: usize,
    /// Print a progress line every this many epochs (0 = silent).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            learning_rate: 1e-3,
            batch_size: 256,
            seed: 0,
            holdout_every: 10,
            auto_scale: true,
            target_test_rel_l2: None,
            check_every: 50,
            log_every: 0,
        }
    }
}

/// Outcome of a training call.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_train_rel_l2: f64,
    pub final_test_rel_l2: f64,
    pub wall_time_s: f64,
    pub rng_seed: u64,
}

/// Relative L2 error of stacked predictions against stacked targets, with an
/// absolute root-mean-square fallback when the targets are (near) zero.
fn stacked_rel_l2(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in pred.iter().zip(target) {
        num += (p - t) * (p - t);
        den += t * t;
    }
    if den > 1e-12 {
        (num / den).sqrt()
    } else {
        (num / pred.len().max(1) as f64).sqrt()
    }
}

/// Fits `model` to the dataset by Adam on mean-squared error over scaled
/// targets. Deterministic for a fixed seed on one platform.
pub fn train(
    dataset: &KernelDataset,
    model: &mut DeepOnetModel,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let started = Instant::now();
    if dataset.is_empty() {
        return Err(Error::InvalidConfig {
            field: "dataset",
            message: "cannot train on an empty dataset".into(),
        });
    }
    if model.input_channels != 1 {
        return Err(Error::InvalidConfig {
            field: "input_channels",
            message: "training targets kernels, which use single-channel models".into(),
        });
    }
    let m = model.sensors.len();
    if dataset.sensors.len() != m
        || dataset
            .sensors
            .iter()
            .zip(&model.sensors)
            .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(Error::InvalidConfig {
            field: "sensors",
            message: "model sensors do not match the dataset sensor locations".into(),
        });
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidConfig {
            field: "train",
            message: "batch_size and epochs must be positive".into(),
        });
    }
    let n = dataset.grid.n_points();
    let p = model.p();

    let total = dataset.len();
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = if cfg.holdout_every >= 2 {
        (0..total).partition(|&i| {
            dataset.samples[i].run_id as usize % cfg.holdout_every != cfg.holdout_every - 1
        })
    } else {
        ((0..total).collect(), Vec::new())
    };
    if train_idx.is_empty() {
        return Err(Error::InvalidConfig {
            field: "holdout_every",
            message: "holdout left no training samples".into(),
        });
    }

    if cfg.auto_scale {
        let max_abs = train_idx
            .iter()
            .flat_map(|&i| dataset.samples[i].kernel.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        model.scaling.output_offset = 0.0;
        model.scaling.output_scale = 1.0 / max_abs.max(1e-12);
    }

    // Pre-scale every input and target once.
    let mut inputs = Vec::with_capacity(total * m);
    let mut targets = Vec::with_capacity(total * n);
    for s in &dataset.samples {
        inputs.extend(s.beta_hat.iter().map(|&v| model.scaling.scale_input(v)));
        targets.extend(s.kernel.iter().map(|&k| model.scaling.scale_output(k)));
    }

    let xs: Vec<f64> = dataset.grid.points().collect();
    let nb = model.branch.spec.param_count();
    let nt = model.trunk.spec.param_count();
    let n_params = nb + nt + 1;
    let mut grads = vec![0.0; n_params];
    let mut adam_m = vec![0.0; n_params];
    let mut adam_v = vec![0.0; n_params];
    let mut adam_t = 0u64;
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = train_idx.clone();
    let mut branch_cache = MlpCache::default();
    let mut trunk_cache = MlpCache::default();
    let mut batch_in = Vec::new();
    let mut batch_target = Vec::new();
    let mut residual = Vec::new();
    let mut g_branch_out = Vec::new();
    let mut g_trunk_out = Vec::new();

    let eval = |model: &DeepOnetModel, idx: &[usize]| -> f64 {
        if idx.is_empty() {
            return f64::NAN;
        }
        let mut bc = MlpCache::default();
        let mut tc = MlpCache::default();
        model.trunk.forward_batch(&xs, n, &mut tc);
        let trunk_out = &tc.acts[model.trunk.spec.n_layers()];
        let mut pred = Vec::with_capacity(idx.len() * n);
        let mut tgt = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            model
                .branch
                .forward_batch(&inputs[i * m..(i + 1) * m], 1, &mut bc);
            let b_out = &bc.acts[model.branch.spec.n_layers()];
            for j in 0..n {
                let t_row = &trunk_out[j * p..(j + 1) * p];
                let mut acc = model.output_bias;
                for k in 0..p {
                    acc += b_out[k] * t_row[k];
                }
                pred.push(acc);
            }
            tgt.extend_from_slice(&targets[i * n..(i + 1) * n]);
        }
        stacked_rel_l2(&pred, &tgt)
    };

    let mut epochs_run = 0;
    'outer: for epoch in 0..cfg.epochs {
        // Linear warmdown to 1% of the initial rate over the scheduled
        // epochs: coarse progress early, a settled tail late.
        let lr = cfg.learning_rate
            * (1.0 - 0.99 * epoch as f64 / cfg.epochs.max(1) as f64);
        // Fisher-Yates shuffle from the dedicated stream.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let s_count = chunk.len();
            batch_in.clear();
            batch_target.clear();
            for &i in chunk {
                batch_in.extend_from_slice(&inputs[i * m..(i + 1) * m]);
                batch_target.extend_from_slice(&targets[i * n..(i + 1) * n]);
            }
            model.branch.forward_batch(&batch_in, s_count, &mut branch_cache);
            model.trunk.forward_batch(&xs, n, &mut trunk_cache);
            let branch_out = &branch_cache.acts[model.branch.spec.n_layers()];
            let trunk_out = &trunk_cache.acts[model.trunk.spec.n_layers()];

            // Residual scaled so that grads are exact MSE derivatives.
            residual.clear();
            residual.resize(s_count * n, 0.0);
            let inv = 2.0 / (s_count * n) as f64;
            let mut loss = 0.0;
            for s in 0..s_count {
                let b_row = &branch_out[s * p..(s + 1) * p];
                for j in 0..n {
                    let t_row = &trunk_out[j * p..(j + 1) * p];
                    let mut acc = model.output_bias;
                    for k in 0..p {
                        acc += b_row[k] * t_row[k];
                    }
                    let r = acc - batch_target[s * n + j];
                    loss += r * r;
                    residual[s * n + j] = r * inv;
                }
            }
            loss /= (s_count * n) as f64;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }

            g_branch_out.clear();
            g_branch_out.resize(s_count * p, 0.0);
            g_trunk_out.clear();
            g_trunk_out.resize(n * p, 0.0);
            let mut g_b0 = 0.0;
            for s in 0..s_count {
                let b_row = &branch_out[s * p..(s + 1) * p];
                let gb_row = &mut g_branch_out[s * p..(s + 1) * p];
                for j in 0..n {
                    let r = residual[s * n + j];
                    if r == 0.0 {
                        continue;
                    }
                    g_b0 += r;
                    let t_row = &trunk_out[j * p..(j + 1) * p];
                    for k in 0..p {
                        gb_row[k] += r * t_row[k];
                    }
                    let gt_row = &mut g_trunk_out[j * p..(j + 1) * p];
                    for k in 0..p {
                        gt_row[k] += r * b_row[k];
                    }
                }
            }

            grads.iter_mut().for_each(|g| *g = 0.0);
            model
                .branch
                .backward_batch(&branch_cache, &g_branch_out, &mut grads[0..nb]);
            model
                .trunk
                .backward_batch(&trunk_cache, &g_trunk_out, &mut grads[nb..nb + nt]);
            grads[nb + nt] = g_b0;

            adam_t += 1;
            let corr1 = 1.0 - BETA1.powi(adam_t as i32);
            let corr2 = 1.0 - BETA2.powi(adam_t as i32);
            let step = lr * corr2.sqrt() / corr1;
            for (idx, slot) in model
                .branch
                .weights
                .iter_mut()
                .chain(model.trunk.weights.iter_mut())
                .chain(std::iter::once(&mut model.output_bias))
                .enumerate()
            {
                let g = grads[idx];
                adam_m[idx] = BETA1 * adam_m[idx] + (1.0 - BETA1) * g;
                adam_v[idx] = BETA2 * adam_v[idx] + (1.0 - BETA2) * g * g;
                *slot -= step * adam_m[idx] / (adam_v[idx].sqrt() + EPS);
            }
        }
        epochs_run = epoch + 1;
        if cfg.log_every > 0 && (epoch + 1) % cfg.log_every == 0 {
            let tr = eval(model, &train_idx);
            println!("epoch {:>5}: train rel L2 {tr:.3e}", epoch + 1);
        }
        if let Some(target) = cfg.target_test_rel_l2 {
            let check_every = cfg.check_every.max(1);
            if (epoch + 1) % check_every == 0 {
                let probe_idx = if test_idx.is_empty() { &train_idx } else { &test_idx };
                if eval(model, probe_idx) <= target {
                    break 'outer;
                }
            }
        }
    }

    let final_train_rel_l2 = eval(model, &train_idx);
    let final_test_rel_l2 = if test_idx.is_empty() {
        final_train_rel_l2
    } else {
        eval(model, &test_idx)
    };
    Ok(TrainReport {
        epochs_run,
        final_train_rel_l2,
        final_test_rel_l2,
        wall_time_s: started.elapsed().as_secs_f64(),
        rng_seed: cfg.seed,
    })
}

/// Largest observed ratio of output sup-distance to input sup-distance over
/// all pairs of the given inputs — an empirical continuity certificate.
pub fn lipschitz_estimate(model: &DeepOnetModel, inputs: &[GridFunction]) -> Result<f64> {
    let mut outputs = Vec::with_capacity(inputs.len());
    for b in inputs {
        outputs.push(model.forward(b)?);
    }
    let mut best: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in i + 1..inputs.len() {
            let din = crate::numerics::sup_norm(&inputs[i].sub(&inputs[j])?);
            if din < 1e-12 {
                continue;
            }
            let dout = crate::numerics::sup_norm(&outputs[i].sub(&outputs[j])?);
            best = best.max(dout / din);
        }
    }
    Ok(best)
}
