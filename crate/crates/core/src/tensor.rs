//! Dense kernels: activations, fully connected layers with cached backward
//! passes, inverted dropout, the clamped logistic loss and Adagrad.
//!
//! Everything is generic over [`Real`] so the same code can run in `f32`
//! (training) and `f64` (gradient checking). Dot products and loss sums are
//! always accumulated in `f64`.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use thiserror::Error;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Default Adagrad denominator offset.
pub const ADAGRAD_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },
    #[error("backward called without a cached forward state")]
    MissingCache,
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Floating point storage type for parameters and activations.
pub trait Real:
    Float + AddAssign + SubAssign + Debug + Display + Default + Send + Sync + 'static
{
    fn from_wide(v: f64) -> Self;
    fn to_wide(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_wide(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_wide(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_wide(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_wide(self) -> f64 {
        self
    }
}

/// Overflow-safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `(1 - e^{-2x}) / (1 + e^{-2x})`, evaluated on `|x|` and mirrored so the
/// exponential never overflows.
pub fn tanh_act(x: f64) -> f64 {
    let a = x.abs();
    let e = (-2.0 * a).exp();
    let t = (1.0 - e) / (1.0 + e);
    if x < 0.0 {
        -t
    } else {
        t
    }
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p` clamped.
pub fn logistic_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Derivative of `logistic_loss(sigmoid(z), y)` with respect to `z`.
/// Zero inside the clamped region, where the loss is flat.
pub fn logistic_loss_logit_grad(p: f64, y: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        0.0
    } else {
        p - y
    }
}

/// `-ln σ(x)` with the probability clamp applied.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    -sigmoid(x).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
}

/// Derivative of [`neg_log_sigmoid`].
pub fn neg_log_sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&s) {
        0.0
    } else {
        s - 1.0
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.to_wide() * y.to_wide()).sum()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T: Real = f32> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<T>) -> Result<Self, TensorError> {
        if values.len() != rows * cols {
            return Err(TensorError::Dimension {
                expected: format!("{} values for {rows}x{cols}", rows * cols),
                got: format!("{} values", values.len()),
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.values[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: T) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Converts element type, e.g. to run an `f32` model in `f64`.
    pub fn cast<U: Real>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| U::from_wide(v.to_wide())).collect(),
        }
    }
}

/// A trainable tensor with its gradient and Adagrad accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<T: Real = f32> {
    pub value: DenseMatrix<T>,
    pub grad: DenseMatrix<T>,
    pub accum: DenseMatrix<T>,
}

impl<T: Real> ParamBlock<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_value(DenseMatrix::zeros(rows, cols))
    }

    pub fn from_value(value: DenseMatrix<T>) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: DenseMatrix::zeros(r, c),
            accum: DenseMatrix::zeros(r, c),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    /// Fills the value with uniform draws on `[-scale, scale]`, row-major.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for v in self.value.values_mut() {
            *v = T::from_wide(rng.random_range(-scale..=scale));
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

fn check_adagrad(lr: f64, eps: f64) -> Result<(), TensorError> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(TensorError::Config(format!("learning rate must be > 0, got {lr}")));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(TensorError::Config(format!("adagrad eps must be > 0, got {eps}")));
    }
    Ok(())
}

#[inline]
fn adagrad_entry<T: Real>(value: &mut T, grad: &mut T, accum: &mut T, lr: f64, eps: f64) {
    let g = grad.to_wide();
    let acc = accum.to_wide() + g * g;
    *accum = T::from_wide(acc);
    *value = T::from_wide(value.to_wide() - lr * g / (accum.to_wide().sqrt() + eps));
    *grad = T::zero();
}

/// Applies one Adagrad step to every entry and zeroes the gradient.
pub fn adagrad_update<T: Real>(param: &mut ParamBlock<T>, lr: f64, eps: f64) -> Result<(), TensorError> {
    check_adagrad(lr, eps)?;
    let ParamBlock { value, grad, accum } = param;
    for ((v, g), a) in value
        .values
        .iter_mut()
        .zip(grad.values.iter_mut())
        .zip(accum.values.iter_mut())
    {
        adagrad_entry(v, g, a, lr, eps);
    }
    Ok(())
}

/// Adagrad restricted to the listed rows. Rows with zero gradient would not
/// move under the dense update either, so the result is identical.
pub fn adagrad_update_rows<T: Real>(
    param: &mut ParamBlock<T>,
    rows: &[usize],
    lr: f64,
    eps: f64,
) -> Result<(), TensorError> {
    check_adagrad(lr, eps)?;
    let cols = param.value.cols;
    let ParamBlock { value, grad, accum } = param;
    for &r in rows {
        let span = r * cols..(r + 1) * cols;
        for ((v, g), a) in value.values[span.clone()]
            .iter_mut()
            .zip(grad.values[span.clone()].iter_mut())
            .zip(accum.values[span].iter_mut())
        {
            adagrad_entry(v, g, a, lr, eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu(x),
            Activation::Tanh => tanh_act(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward state kept for the backward pass of one [`FcLayer`] call.
#[derive(Debug, Clone)]
pub struct FcCache<T: Real> {
    input: Vec<T>,
    output: Vec<T>,
}

/// `activation(W x + b)` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer<T: Real = f32> {
    pub weight: ParamBlock<T>,
    pub bias: ParamBlock<T>,
    pub activation: Activation,
}

impl<T: Real> FcLayer<T> {
    pub fn zeros(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            weight: ParamBlock::zeros(output_dim, input_dim),
            bias: ParamBlock::zeros(1, output_dim),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.cols
    }

    pub fn init_glorot<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let limit = (6.0 / (self.input_dim() + self.output_dim()) as f64).sqrt();
        self.weight.init_uniform(rng, limit);
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.rows
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>, TensorError> {
        if input.len() != self.input_dim() {
            return Err(TensorError::Dimension {
                expected: format!(
                    "input of length {} for weight {}x{}",
                    self.input_dim(),
                    self.output_dim(),
                    self.input_dim()
                ),
                got: format!("input of length {}", input.len()),
            });
        }
        let w = &self.weight.value;
        let b = self.bias.value.values();
        Ok((0..self.output_dim())
            .map(|j| {
                let pre = b[j].to_wide() + dot(w.row(j), input);
                T::from_wide(self.activation.apply(pre))
            })
            .collect())
    }

    pub fn forward_cached(&self, input: &[T]) -> Result<(Vec<T>, FcCache<T>), TensorError> {
        let output = self.forward(input)?;
        let cache = FcCache {
            input: input.to_vec(),
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Returns `d loss / d input` and adds this call's contribution to
    /// `weight.grad` and `bias.grad`.
    pub fn backward(
        &mut self,
        cache: Option<&FcCache<T>>,
        upstream: &[T],
    ) -> Result<Vec<T>, TensorError> {
        let cache = cache.ok_or(TensorError::MissingCache)?;
        let (out_dim, in_dim) = self.weight.shape();
        if upstream.len() != out_dim || cache.input.len() != in_dim {
            return Err(TensorError::Dimension {
                expected: format!("upstream {out_dim}, cached input {in_dim}"),
                got: format!("upstream {}, cached input {}", upstream.len(), cache.input.len()),
            });
        }
        let mut input_grad = vec![0.0f64; in_dim];
        for j in 0..out_dim {
            let d = upstream[j].to_wide() * self.activation.derivative_from_output(cache.output[j].to_wide());
            if d == 0.0 {
                continue;
            }
            let dt = T::from_wide(d);
            self.bias.grad.values[j] += dt;
            let grow = self.weight.grad.row_mut(j);
            for (g, &x) in grow.iter_mut().zip(&cache.input) {
                *g += dt * x;
            }
            for (acc, &w) in input_grad.iter_mut().zip(self.weight.value.row(j)) {
                *acc += d * w.to_wide();
            }
        }
        Ok(input_grad.into_iter().map(T::from_wide).collect())
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }

    pub fn adagrad(&mut self, lr: f64, eps: f64) -> Result<(), TensorError> {
        adagrad_update(&mut self.weight, lr, eps)?;
        adagrad_update(&mut self.bias, lr, eps)
    }

    pub fn cast<U: Real>(&self) -> FcLayer<U> {
        FcLayer {
            weight: ParamBlock::from_value(self.weight.value.cast()),
            bias: ParamBlock::from_value(self.bias.value.cast()),
            activation: self.activation,
        }
    }
}

/// Which units survived dropout and the survivor scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub scale: f64,
}

impl DropoutMask {
    pub fn keep_all(n: usize) -> Self {
        Self {
            keep: vec![true; n],
            scale: 1.0,
        }
    }

    pub fn backward<T: Real>(&self, upstream: &[T]) -> Vec<T> {
        let s = T::from_wide(self.scale);
        upstream
            .iter()
            .zip(&self.keep)
            .map(|(&g, &k)| if k { g * s } else { T::zero() })
            .collect()
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - ratio)` at train time
/// so evaluation is a pass-through.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    input: &[T],
    ratio: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<(Vec<T>, DropoutMask), TensorError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(TensorError::Config(format!("dropout ratio must be in [0, 1), got {ratio}")));
    }
    if mode == Mode::Eval || ratio == 0.0 {
        return Ok((input.to_vec(), DropoutMask::keep_all(input.len())));
    }
    let scale = 1.0 / (1.0 - ratio);
    let keep: Vec<bool> = (0..input.len()).map(|_| rng.random::<f64>() >= ratio).collect();
    let mask = DropoutMask { keep, scale };
    let s = T::from_wide(scale);
    let out = input
        .iter()
        .zip(&mask.keep)
        .map(|(&x, &k)| if k { x * s } else { T::zero() })
        .collect();
    Ok((out, mask))
}
