//! Trainable building blocks with hand-derived gradients: GELU dense layers,
//! MLP towers, embedding tables and Adam.
//!
//! Everything is `f64`. There is no autodiff graph; each model in the crate
//! wires its own backward pass out of the pieces here, and `grad_check`
//! verifies those passes against central differences.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::checkpoint::Tensor;
use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow for large negative `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Flat views over every parameter tensor of a model, in a fixed order.
///
/// Gradient containers are the same type as the model, so `tensors()` of a
/// gradient lines up with `tensors_mut()` of the parameters it updates.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

/// `phi(A e + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Values saved by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct DenseTrace {
    pub input: DVector<f64>,
    pub pre: DVector<f64>,
    pub output: DVector<f64>,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        Self {
            weight: DMatrix::from_fn(output, input, |_, _| dist.sample(rng)),
            bias: DVector::zeros(output),
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: DVector::zeros(self.bias.len()),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, input: &DVector<f64>) -> Result<DenseTrace> {
        if input.len() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), input.len()));
        }
        let mut pre = self.bias.clone();
        pre.gemv(1.0, &self.weight, input, 1.0);
        let output = pre.map(|x| self.activation.apply(x));
        Ok(DenseTrace {
            input: input.clone(),
            pre,
            output,
        })
    }

    pub fn apply(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.forward(input)?.output)
    }

    /// Accumulates `dL/dA`, `dL/db` into `grad` and returns `dL/de`.
    pub fn backward(&self, trace: &DenseTrace, upstream: &DVector<f64>, grad: &mut DenseLayer) -> Result<DVector<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::shape(self.output_dim(), upstream.len()));
        }
        let delta = upstream.zip_map(&trace.pre, |g, x| g * self.activation.derivative(x));
        grad.weight.ger(1.0, &delta, &trace.input, 1.0);
        grad.bias += &delta;
        Ok(self.weight.tr_mul(&delta))
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<Tensor> {
        vec![
            Tensor::from_matrix(format!("{prefix}.weight"), &self.weight),
            Tensor::from_vector(format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub fn from_tensors(prefix: &str, tensors: &[Tensor], activation: Activation) -> Result<Self> {
        let weight = Tensor::find(tensors, &format!("{prefix}.weight"))?.to_matrix()?;
        let bias = Tensor::find(tensors, &format!("{prefix}.bias"))?.to_vector()?;
        if bias.len() != weight.nrows() {
            return Err(Error::shape(weight.nrows(), bias.len()));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }
}

impl Parameters for DenseLayer {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), self.bias.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), self.bias.as_mut_slice()]
    }
}

/// A stack of dense layers, `f_H ∘ ... ∘ f_1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tower {
    pub layers: Vec<DenseLayer>,
}

impl Tower {
    /// Builds `dims[0] -> dims[1] -> ... -> dims[n]`. Hidden layers use GELU;
    /// the last layer uses `output_activation`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], output_activation: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "a tower needs at least one layer");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { output_activation } else { Activation::Gelu };
                DenseLayer::new(dims[k], dims[k + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(DenseLayer::zeros_like).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty tower").output_dim()
    }

    pub fn forward(&self, input: &DVector<f64>) -> Result<Vec<DenseTrace>> {
        let mut traces: Vec<DenseTrace> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = traces.last().map_or(input, |t| &t.output);
            let trace = layer.forward(x)?;
            traces.push(trace);
        }
        Ok(traces)
    }

    pub fn apply(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.apply(&x)?;
        }
        Ok(x)
    }

    pub fn backward(&self, traces: &[DenseTrace], upstream: &DVector<f64>, grad: &mut Tower) -> Result<DVector<f64>> {
        let mut g = upstream.clone();
        for ((layer, trace), lg) in self.layers.iter().zip(traces).zip(grad.layers.iter_mut()).rev() {
            g = layer.backward(trace, &g, lg)?;
        }
        Ok(g)
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<Tensor> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| l.to_tensors(&format!("{prefix}.{k}")))
            .collect()
    }

    pub fn from_tensors(prefix: &str, tensors: &[Tensor], depth: usize, output_activation: Activation) -> Result<Self> {
        let layers = (0..depth)
            .map(|k| {
                let act = if k + 1 == depth { output_activation } else { Activation::Gelu };
                DenseLayer::from_tensors(&format!("{prefix}.{k}"), tensors, act)
            })
            .collect::<Result<Vec<_>>>()?;
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::shape(w[0].output_dim(), w[1].input_dim()));
            }
        }
        Ok(Self { layers })
    }
}

impl Parameters for Tower {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// Row-major `vocab x dim` lookup table.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn normal<R: Rng + ?Sized>(rows: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Self {
            rows,
            dim,
            data: (0..rows * dim).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn from_rows(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape(rows * dim, data.len()));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.dim)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, ix: usize) -> &[f64] {
        &self.data[ix * self.dim..(ix + 1) * self.dim]
    }

    pub fn row_mut(&mut self, ix: usize) -> &mut [f64] {
        &mut self.data[ix * self.dim..(ix + 1) * self.dim]
    }

    pub fn checked_row(&self, ix: usize) -> Result<&[f64]> {
        if ix >= self.rows {
            return Err(Error::Invalid(format!("row {ix} out of range for table with {} rows", self.rows)));
        }
        Ok(self.row(ix))
    }

    /// Adds `scale * values` to row `ix`.
    pub fn add_to_row(&mut self, ix: usize, values: &[f64], scale: f64) {
        for (d, v) in self.row_mut(ix).iter_mut().zip(values) {
            *d += scale * v;
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self, name: impl Into<String>) -> Tensor {
        Tensor::new(name, vec![self.rows, self.dim], self.data.clone())
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        match tensor.shape.as_slice() {
            &[rows, dim] => Self::from_rows(rows, dim, tensor.data.clone()),
            other => Err(Error::shape("2-d tensor", format!("{other:?}"))),
        }
    }
}

impl Parameters for EmbeddingTable {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.data]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.data]
    }
}

/// Mean of the given rows, or zeros for an empty set.
pub fn mean_rows(table: &EmbeddingTable, ids: &[usize]) -> DVector<f64> {
    let mut out = DVector::zeros(table.dim());
    if ids.is_empty() {
        return out;
    }
    for &id in ids {
        for (o, v) in out.iter_mut().zip(table.row(id)) {
            *o += v;
        }
    }
    out / ids.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Bias-corrected Adam update. Leaves everything untouched and errors if
    /// any gradient entry is non-finite.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::shape(self.m.len(), grads.len()));
        }
        for (k, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[k].len() {
                return Err(Error::shape(self.m[k].len(), g.len()));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient tensor {k}")));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Step used for central differences throughout the crate's gradient checks.
pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Floor on the denominator of the relative error, so that components whose
/// true derivative is zero do not divide by zero.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Largest componentwise `|analytic - numeric| / max(|numeric|, floor)` over
/// `coords` (all coordinates when `None`).
pub fn grad_check_coords<F>(f: F, point: &[f64], analytic: &[f64], step: f64, coords: Option<&[usize]>) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length must match point");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for &k in coords {
        let orig = x[k];
        x[k] = orig + step;
        let plus = f(&x);
        x[k] = orig - step;
        let minus = f(&x);
        x[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[k] - numeric).abs() / numeric.abs().max(GRAD_CHECK_FLOOR);
        worst = worst.max(err);
    }
    worst
}

pub fn grad_check<F>(f: F, point: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    grad_check_coords(f, point, analytic, step, None)
}
