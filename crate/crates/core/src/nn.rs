//! Minimal neural kernel: dense layers with optional Swish, hand-written
//! backward passes, a central-difference gradient checker and momentum SGD.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Swish,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Swish => swish(x),
        }
    }

    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Swish => swish_grad(x),
        }
    }

    /// Stable code used by the model file format.
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Swish => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Swish),
            _ => None,
        }
    }
}

/// Flat, ordered view over every trainable tensor of a model.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |t| out.extend_from_slice(t));
        out
    }

    /// Panics if `flat` is shorter than [`Parameters::num_params`].
    fn load_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_mut(&mut |t| {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `in × out`; rows are multiplied as `x·W`.
    pub weight: Matrix,
    pub bias: Option<Array1<f64>>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Stack of dense layers applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations saved by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension { expected: pair[0].out_dim(), actual: pair[1].in_dim() });
            }
        }
        for l in &layers {
            if let Some(b) = &l.bias {
                if b.len() != l.out_dim() {
                    return Err(Error::Dimension { expected: l.out_dim(), actual: b.len() });
                }
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights and zero biases. Hidden layers use Swish; the
    /// last layer uses `last`.
    pub fn init(dims: &[usize], bias: bool, last: Activation, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fi, fo) = (dims[i], dims[i + 1]);
                let limit = (6.0 / (fi + fo) as f64).sqrt();
                let weight = Array2::from_shape_fn((fi, fo), |_| rng.random_range(-limit..=limit));
                Layer {
                    weight,
                    bias: bias.then(|| Array1::zeros(fo)),
                    activation: if i + 1 == n { last } else { Activation::Swish },
                }
            })
            .collect();
        Self { layers }
    }

    /// Convenience wrapper seeding its own generator.
    pub fn init_seeded(dims: &[usize], bias: bool, last: Activation, seed: u64) -> Self {
        Self::init(dims, bias, last, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn identity(d: usize) -> Self {
        Self {
            layers: vec![Layer { weight: Array2::eye(d), bias: None, activation: Activation::Identity }],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(Layer::out_dim).unwrap_or(0)
    }

    /// True when the map sends zero rows to zero rows for any weights.
    pub fn is_zero_preserving(&self) -> bool {
        self.layers.iter().all(|l| l.bias.is_none())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: l.bias.as_ref().map(|b| Array1::zeros(b.len())),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = h.dot(&l.weight);
            if let Some(b) = &l.bias {
                z += b;
            }
            z.mapv_inplace(|v| l.activation.apply(v));
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        self.check_input(x)?;
        let mut cache = MlpCache { inputs: Vec::with_capacity(self.layers.len()), pre: Vec::with_capacity(self.layers.len()) };
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = h.dot(&l.weight);
            if let Some(b) = &l.bias {
                z += b;
            }
            let out = match l.activation {
                Activation::Identity => z.clone(),
                act => z.mapv(|v| act.apply(v)),
            };
            cache.inputs.push(h);
            cache.pre.push(z);
            h = out;
        }
        Ok((h, cache))
    }

    /// Returns the gradient with respect to the input and accumulates
    /// parameter gradients into `grads` (shaped like `self`).
    pub fn backward(&self, cache: &MlpCache, grad_out: &Matrix, grads: &mut Mlp) -> Matrix {
        let mut g = grad_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.activation != Activation::Identity {
                g.zip_mut_with(&cache.pre[i], |gv, &z| *gv *= l.activation.grad(z));
            }
            let gl = &mut grads.layers[i];
            gl.weight += &cache.inputs[i].t().dot(&g);
            if let Some(gb) = gl.bias.as_mut() {
                *gb += &g.sum_axis(Axis(0));
            }
            g = g.dot(&l.weight.t());
        }
        g
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Dimension { expected: self.in_dim(), actual: x.ncols() });
        }
        Ok(())
    }
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            f(l.weight.as_slice().expect("standard layout"));
            if let Some(b) = &l.bias {
                f(b.as_slice().expect("standard layout"));
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(l.weight.as_slice_mut().expect("standard layout"));
            if let Some(b) = l.bias.as_mut() {
                f(b.as_slice_mut().expect("standard layout"));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `loss` at `params`
/// for the coordinates in `indices` (all coordinates when `None`).
///
/// The relative-error floor is `1e-6·max(1, |loss(params)|)`: a central
/// difference carries round-off of about `ε·|loss|/h`, so gradients below
/// the floor are compared on an absolute scale.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::Dimension { expected: params.len(), actual: analytic.len() });
    }
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut x = params.to_vec();
    let floor = 1e-6 * loss(&x).abs().max(1.0);
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_index: 0, checked: 0 };
    for &i in idx {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at parameter {i}: {up} / {down}")));
        }
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric, floor);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// SGD with heavy-ball momentum: `v ← μ·v + g; p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f64) -> Self {
        Self { momentum, velocity: vec![0.0; num_params] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::Dimension { expected: self.velocity.len(), actual: grads.len() });
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` at step 0 to zero at `total_steps`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = (step as f64 / total_steps as f64).min(1.0);
    0.5 * lr0 * (1.0 + (PI * t).cos())
}
