//! Dense behavior-cloning policy network.
//!
//! A multilayer perceptron with rectifier hidden layers and a `tanh` output
//! head, stored as one flat `f64` parameter vector. Layer `l` occupies a
//! row-major `fan_in x fan_out` weight block followed by its `fan_out` biases,
//! so a batch is propagated as `Z = A W + b`.
//!
//! Training uses mean squared error averaged over every batch row and action
//! dimension, analytic backpropagation, and a bias-corrected adaptive-moment
//! optimizer.

use rand::distributions::{Distribution, Open01};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("{what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("batch must contain at least one row")]
    EmptyBatch,
    #[error("target value {0} outside [-1, 1]")]
    TargetRange(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Default hidden stack: a 256/128 state encoder followed by a 512-unit
/// policy layer.
pub const DEFAULT_HIDDEN: [usize; 3] = [256, 128, 512];
/// Action dimension of every task.
pub const ACTION_DIM: usize = 4;

/// Network architecture. Hidden layers use ReLU, the output layer `tanh`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct ModelSpec {
    input_dim: usize,
    hidden_widths: Vec<usize>,
    output_dim: usize,
}

#[derive(Deserialize)]
struct RawSpec {
    input_dim: usize,
    hidden_widths: Vec<usize>,
    output_dim: usize,
}

impl TryFrom<RawSpec> for ModelSpec {
    type Error = ModelError;

    fn try_from(raw: RawSpec) -> Result<Self, Self::Error> {
        ModelSpec::new(raw.input_dim, raw.hidden_widths, raw.output_dim)
    }
}

/// Offsets of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }
}

impl ModelSpec {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        output_dim: usize,
    ) -> Result<Self, ModelError> {
        if input_dim == 0 || output_dim == 0 {
            return Err(ModelError::InvalidSpec(
                "input and output dimensions must be >= 1".into(),
            ));
        }
        if hidden_widths.contains(&0) {
            return Err(ModelError::InvalidSpec("hidden widths must be >= 1".into()));
        }
        Ok(Self {
            input_dim,
            hidden_widths,
            output_dim,
        })
    }

    /// The default policy stack for an observation of `input_dim` reals.
    pub fn policy(input_dim: usize) -> Result<Self, ModelError> {
        Self::new(input_dim, DEFAULT_HIDDEN.to_vec(), ACTION_DIM)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.hidden_widths
    }

    fn widths(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.input_dim)
            .chain(self.hidden_widths.iter().copied())
            .chain(std::iter::once(self.output_dim))
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let widths: Vec<usize> = self.widths().collect();
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += (w[0] + 1) * w[1];
                shape
            })
            .collect()
    }

    /// Σ (fan_in + 1) · fan_out over all layers.
    pub fn param_count(&self) -> usize {
        let widths: Vec<usize> = self.widths().collect();
        widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Stable 64-bit fingerprint of the architecture, stored in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let dims: Vec<u64> = self.widths().map(|w| w as u64).collect();
        seed::mix_all(0x4d4c_5053_5045_4331, &dims)
    }

    fn max_width(&self) -> usize {
        self.widths().max().unwrap_or(1)
    }
}

/// Flat model weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector(Vec<f64>);

/// Loss gradient with the same layout as [`ParameterVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

macro_rules! flat_vector {
    ($ty:ident) => {
        impl $ty {
            pub fn from_vec(values: Vec<f64>) -> Self {
                Self(values)
            }

            pub fn zeros(len: usize) -> Self {
                Self(vec![0.0; len])
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }
        }
    };
}

flat_vector!(ParameterVector);
flat_vector!(GradientVector);

impl ParameterVector {
    /// Checks length against `spec` and that all entries are finite.
    pub fn validate(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        check_len("parameter vector", spec.param_count(), self.len())?;
        if !self.is_finite() {
            return Err(ModelError::NonFinite("parameter vector"));
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        check_len("matrix data", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_len("matrix row", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Expert state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    observations: Matrix,
    targets: Matrix,
}

impl Batch {
    pub fn new(observations: Matrix, targets: Matrix) -> Result<Self, ModelError> {
        if observations.rows() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        check_len("target rows", observations.rows(), targets.rows())?;
        if let Some(&bad) = targets
            .as_slice()
            .iter()
            .find(|v| !(-1.0..=1.0).contains(*v))
        {
            return Err(ModelError::TargetRange(bad));
        }
        Ok(Self {
            observations,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observations(&self) -> &Matrix {
        &self.observations
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    fn check_spec(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        check_len(
            "observation width",
            spec.input_dim(),
            self.observations.cols(),
        )?;
        check_len("target width", spec.output_dim(), self.targets.cols())
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), ModelError> {
    if expected == actual {
        Ok(())
    } else {
        Err(ModelError::Dimension {
            what,
            expected,
            actual,
        })
    }
}

/// Fan-in scaled uniform weights in `(-a, a)`, `a = sqrt(6 / fan_in)`; zero
/// biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = seed::rng(seed);
    let mut values = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let a = (6.0 / layer.fan_in as f64).sqrt();
        for w in &mut values[layer.weight_offset..layer.bias_offset] {
            let u: f64 = Open01.sample(&mut rng);
            *w = a * (2.0 * u - 1.0);
        }
    }
    ParameterVector(values)
}

/// `c = beta * c + a * b` for strided f64 matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the asserts above bound every element matrixmultiply touches
    // inside the three slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Scratch buffers for batched forward and backward passes.
#[derive(Debug, Clone)]
pub struct Workspace {
    capacity: usize,
    activations: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &ModelSpec, capacity: usize) -> Self {
        let capacity = capacity.max(1);
        let activations = spec
            .layers()
            .iter()
            .map(|l| vec![0.0; capacity * l.fan_out])
            .collect();
        let width = spec.max_width();
        Self {
            capacity,
            activations,
            delta: vec![0.0; capacity * width],
            delta_prev: vec![0.0; capacity * width],
        }
    }

    fn ensure(&mut self, spec: &ModelSpec, rows: usize) {
        if rows > self.capacity || self.activations.len() != spec.layers().len() {
            *self = Workspace::new(spec, rows.max(self.capacity));
        }
    }

    /// Output rows of the most recent forward pass.
    fn output(&self, rows: usize, out: usize) -> &[f64] {
        &self.activations[self.activations.len() - 1][..rows * out]
    }
}

/// Propagates `rows` observations stored row-major in `obs`; the outputs land
/// in the workspace's last activation buffer.
fn forward_into(spec: &ModelSpec, params: &[f64], obs: &[f64], rows: usize, ws: &mut Workspace) {
    ws.ensure(spec, rows);
    let layers = spec.layers();
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let (before, rest) = ws.activations.split_at_mut(l);
        let input: &[f64] = if l == 0 { obs } else { &before[l - 1] };
        let z = &mut rest[0][..rows * layer.fan_out];
        let bias = &params[layer.bias_offset..layer.bias_offset + layer.fan_out];
        for row in z.chunks_exact_mut(layer.fan_out) {
            row.copy_from_slice(bias);
        }
        gemm(
            rows,
            layer.fan_in,
            layer.fan_out,
            input,
            (layer.fan_in, 1),
            &params[layer.weight_offset..layer.bias_offset],
            (layer.fan_out, 1),
            1.0,
            z,
            layer.fan_out,
        );
        if l == last {
            z.iter_mut().for_each(|v| *v = v.tanh());
        } else {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
}

/// Policy output for a single observation. Every component lies in `[-1, 1]`.
pub fn forward(
    spec: &ModelSpec,
    params: &ParameterVector,
    obs: &[f64],
) -> Result<Vec<f64>, ModelError> {
    let mut ws = Workspace::new(spec, 1);
    forward_with(spec, params, obs, &mut ws)
}

/// [`forward`] reusing caller-owned scratch space.
pub fn forward_with(
    spec: &ModelSpec,
    params: &ParameterVector,
    obs: &[f64],
    ws: &mut Workspace,
) -> Result<Vec<f64>, ModelError> {
    check_len("parameter vector", spec.param_count(), params.len())?;
    check_len("observation", spec.input_dim(), obs.len())?;
    forward_into(spec, params.as_slice(), obs, 1, ws);
    Ok(ws.output(1, spec.output_dim()).to_vec())
}

/// Row-wise policy outputs for a matrix of observations.
pub fn forward_batch(
    spec: &ModelSpec,
    params: &ParameterVector,
    obs: &Matrix,
    ws: &mut Workspace,
) -> Result<Matrix, ModelError> {
    check_len("parameter vector", spec.param_count(), params.len())?;
    check_len("observation width", spec.input_dim(), obs.cols())?;
    if obs.rows() == 0 {
        return Ok(Matrix::zeros(0, spec.output_dim()));
    }
    forward_into(spec, params.as_slice(), obs.as_slice(), obs.rows(), ws);
    Matrix::new(
        obs.rows(),
        spec.output_dim(),
        ws.output(obs.rows(), spec.output_dim()).to_vec(),
    )
}

/// Mean over all entries of the squared error.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<f64, ModelError> {
    check_len("prediction rows", target.rows(), pred.rows())?;
    check_len("prediction cols", target.cols(), pred.cols())?;
    if pred.as_slice().is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    Ok(squared_error_sum(pred.as_slice(), target.as_slice()) / pred.as_slice().len() as f64)
}

fn squared_error_sum(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

/// Loss and exact gradient of `mse_loss(forward(obs), targets)` for `rows`
/// row-major observation/target pairs. `grad` is overwritten.
pub fn backward_into(
    spec: &ModelSpec,
    params: &[f64],
    obs: &[f64],
    targets: &[f64],
    rows: usize,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    let out = spec.output_dim();
    debug_assert_eq!(obs.len(), rows * spec.input_dim());
    debug_assert_eq!(targets.len(), rows * out);
    debug_assert_eq!(grad.len(), spec.param_count());
    forward_into(spec, params, obs, rows, ws);

    let layers = spec.layers();
    let last = layers.len() - 1;
    let scale = 2.0 / (rows * out) as f64;
    let y = &ws.activations[last][..rows * out];
    let loss = squared_error_sum(y, targets) / (rows * out) as f64;
    for ((d, &yi), &ti) in ws.delta[..rows * out].iter_mut().zip(y).zip(targets) {
        *d = scale * (yi - ti) * (1.0 - yi * yi);
    }

    for l in (0..=last).rev() {
        let layer = layers[l];
        let input: &[f64] = if l == 0 { obs } else { &ws.activations[l - 1] };
        let delta = &ws.delta[..rows * layer.fan_out];

        // dW = A_prevᵀ · delta
        gemm(
            layer.fan_in,
            rows,
            layer.fan_out,
            input,
            (1, layer.fan_in),
            delta,
            (layer.fan_out, 1),
            0.0,
            &mut grad[layer.weight_offset..layer.bias_offset],
            layer.fan_out,
        );
        let db = &mut grad[layer.bias_offset..layer.bias_offset + layer.fan_out];
        db.iter_mut().for_each(|v| *v = 0.0);
        for row in delta.chunks_exact(layer.fan_out) {
            db.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }

        if l > 0 {
            // delta_prev = (delta · Wᵀ) ⊙ relu'(A_prev)
            let prev = &mut ws.delta_prev[..rows * layer.fan_in];
            gemm(
                rows,
                layer.fan_out,
                layer.fan_in,
                delta,
                (layer.fan_out, 1),
                &params[layer.weight_offset..layer.bias_offset],
                (1, layer.fan_out),
                0.0,
                prev,
                layer.fan_in,
            );
            for (d, &a) in prev.iter_mut().zip(&input[..rows * layer.fan_in]) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }
    loss
}

/// Loss and gradient over a whole batch.
pub fn backward(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &Batch,
) -> Result<(f64, GradientVector), ModelError> {
    check_len("parameter vector", spec.param_count(), params.len())?;
    batch.check_spec(spec)?;
    let mut ws = Workspace::new(spec, batch.len());
    let mut grad = vec![0.0; spec.param_count()];
    let loss = backward_into(
        spec,
        params.as_slice(),
        batch.observations.as_slice(),
        batch.targets.as_slice(),
        batch.len(),
        &mut ws,
        &mut grad,
    );
    Ok((loss, GradientVector(grad)))
}

/// Batch loss without the gradient.
pub fn batch_loss(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &Batch,
) -> Result<f64, ModelError> {
    let mut ws = Workspace::new(spec, batch.len());
    let pred = forward_batch(spec, params, &batch.observations, &mut ws)?;
    mse_loss(&pred, &batch.targets)
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
}

/// Local learning rate used throughout the benchmark.
pub const DEFAULT_LR: f64 = 1e-4;

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ParameterVector,
    grad: &GradientVector,
    state: &mut AdamState,
) -> Result<(), ModelError> {
    adam_step_slice(params.as_mut_slice(), grad.as_slice(), state)
}

pub(crate) fn adam_step_slice(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
) -> Result<(), ModelError> {
    check_len("gradient", params.len(), grad.len())?;
    check_len("first moment", params.len(), state.m.len())?;
    check_len("second moment", params.len(), state.v.len())?;
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Largest coordinate-wise relative error between `analytic` and central
/// differences of the batch loss. Coordinates where both magnitudes are below
/// `1e-12` contribute their absolute difference instead.
pub fn compare_gradient(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &Batch,
    analytic: &GradientVector,
    h: f64,
) -> Result<f64, ModelError> {
    check_len("gradient", spec.param_count(), analytic.len())?;
    batch.check_spec(spec)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = probe.0[i];
        probe.0[i] = orig + h;
        let plus = batch_loss(spec, &probe, batch)?;
        probe.0[i] = orig - h;
        let minus = batch_loss(spec, &probe, batch)?;
        probe.0[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.0[i];
        let scale = a.abs().max(numeric.abs());
        let err = if scale < 1e-12 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks [`backward`] against central differences with step `h`.
pub fn grad_check(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &Batch,
    h: f64,
) -> Result<f64, ModelError> {
    let (_, grad) = backward(spec, params, batch)?;
    compare_gradient(spec, params, batch, &grad, h)
}
