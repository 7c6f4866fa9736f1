//! Minimal differentiable building blocks.
//!
//! Layers expose explicit `forward`/`backward` pairs over row-major 2-D
//! arrays (rows are tokens or samples). Gradients accumulate into a value of
//! the same type as the layer, so a whole model doubles as its own gradient
//! container. Everything is generic over [`Real`] so that gradient checks can
//! run in `f64` while training runs in `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::seed;

pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Forward-pass mode. Training mode carries the seed of the dropout streams
/// for the current step; each dropout site derives its own stream from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Callback receiving a parameter's name, shape and values.
pub type Visit<'a, F> = dyn FnMut(&str, &[usize], &[F]) + 'a;
pub type VisitMut<'a, F> = dyn FnMut(&str, &[usize], &mut [F]) + 'a;

/// Visitor over named parameter tensors, in a fixed order.
pub trait Params<F: Real> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_, F>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, F>);

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_array1<F: Real>(a: &Array1<F>, name: String, f: &mut Visit<'_, F>) {
    f(&name, a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit_array2<F: Real>(a: &Array2<F>, name: String, f: &mut Visit<'_, F>) {
    f(&name, a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit_array1_mut<F: Real>(a: &mut Array1<F>, name: String, f: &mut VisitMut<'_, F>) {
    let shape = a.shape().to_vec();
    f(&name, &shape, a.as_slice_mut().expect("standard layout"));
}

pub(crate) fn visit_array2_mut<F: Real>(a: &mut Array2<F>, name: String, f: &mut VisitMut<'_, F>) {
    let shape = a.shape().to_vec();
    f(&name, &shape, a.as_slice_mut().expect("standard layout"));
}

/// A copy of `m` with every parameter set to zero.
pub fn zeros_like<F: Real, M: Params<F> + Clone>(m: &M) -> M {
    let mut z = m.clone();
    z.visit_mut("", &mut |_, _, v| v.fill(F::zero()));
    z
}

/// Flatten all parameters into one vector in visit order.
pub fn flatten<F: Real, M: Params<F>>(m: &M) -> Vec<F> {
    let mut out = Vec::with_capacity(m.num_params());
    m.visit("", &mut |_, _, v| out.extend_from_slice(v));
    out
}

/// Overwrite all parameters from a flat vector in visit order.
pub fn unflatten<F: Real, M: Params<F>>(m: &mut M, flat: &[F]) {
    let mut off = 0;
    m.visit_mut("", &mut |_, _, v| {
        v.copy_from_slice(&flat[off..off + v.len()]);
        off += v.len();
    });
    assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
}

pub fn gaussian<F: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        F::c(z * std)
    })
}

fn uniform<F: Real, R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<F> {
    (0..n).map(|_| F::c(rng.gen_range(-bound..bound))).collect()
}

/// Affine map `y = x W + b` with `W` stored as (in × out).
#[derive(Clone, Debug)]
pub struct Linear<F: Real> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    /// Uniform init in ±1/sqrt(fan_in), the usual default for dense layers.
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_vec((fan_in, fan_out), uniform(rng, fan_in * fan_out, bound)).expect("shape");
        let bias = Array1::from(uniform(rng, fan_out, bound));
        Self { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        self.backward_params(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    pub fn backward_params(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Self) {
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

impl<F: Real> Params<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_, F>) {
        visit_array2(&self.weight, join(prefix, "weight"), f);
        visit_array1(&self.bias, join(prefix, "bias"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, F>) {
        visit_array2_mut(&mut self.weight, join(prefix, "weight"), f);
        visit_array1_mut(&mut self.bias, join(prefix, "bias"), f);
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm<F: Real> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

pub struct LayerNormCache<F: Real> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

const LN_EPS: f64 = 1e-5;

impl<F: Real> LayerNorm<F> {
    pub fn new(width: usize) -> Self {
        Self { gamma: Array1::ones(width), beta: Array1::zeros(width) }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let n = F::from_usize(x.ncols()).unwrap();
        let eps = F::c(LN_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / n;
            *is = F::one() / (var + eps).sqrt();
            let s = *is;
            row.mapv_inplace(|v| v * s);
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let n = F::from_usize(dy.ncols()).unwrap();
        let mut dx = &dy * &self.gamma;
        for ((mut row, xh), &is) in dx.outer_iter_mut().zip(cache.xhat.outer_iter()).zip(cache.inv_std.iter()) {
            let mean_d = row.sum() / n;
            let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
            Zip::from(&mut row).and(&xh).for_each(|d, &h| *d = (*d - mean_d - h * mean_dx) * is);
        }
        dx
    }
}

impl<F: Real> Params<F> for LayerNorm<F> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_, F>) {
        visit_array1(&self.gamma, join(prefix, "weight"), f);
        visit_array1(&self.beta, join(prefix, "bias"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, F>) {
        visit_array1_mut(&mut self.gamma, join(prefix, "weight"), f);
        visit_array1_mut(&mut self.beta, join(prefix, "bias"), f);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu<F: Real>(x: ArrayView2<F>) -> Array2<F> {
    let (c, a, h) = (F::c(GELU_C), F::c(GELU_A), F::c(0.5));
    x.mapv(|v| h * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<F: Real>(x: ArrayView2<F>, dy: ArrayView2<F>) -> Array2<F> {
    let (c, a, h, three) = (F::c(GELU_C), F::c(GELU_A), F::c(0.5), F::c(3.0));
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(&x).for_each(|d, &v| {
        let t = (c * (v + a * v * v * v)).tanh();
        let dt = (F::one() - t * t) * c * (F::one() + three * a * v * v);
        *d *= h * (F::one() + t) + h * v * dt;
    });
    dx
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`. `None` when the layer is inactive.
pub fn dropout_mask<F: Real>(mode: Mode, rate: f64, tag: &str, rows: usize, cols: usize) -> Option<Array2<F>> {
    let Mode::Train { seed } = mode else {
        return None;
    };
    if rate <= 0.0 {
        return None;
    }
    let mut rng = seed::rng(seed, tag, 0);
    let keep = F::c(1.0 / (1.0 - rate));
    Some(Array2::from_shape_simple_fn((rows, cols), || if rng.gen::<f64>() < rate { F::zero() } else { keep }))
}

/// Numerically stable row softmax, in place.
pub fn softmax_rows_inplace<F: Real>(x: &mut Array2<F>) {
    for mut row in x.outer_iter_mut() {
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_row<F: Real>(row: ArrayView1<F>) -> Array1<F> {
    let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<F>().ln() + m;
    row.mapv(|v| v - lse)
}

const NORM_EPS: f64 = 1e-12;

/// L2-normalize each row; returns the normalized rows and the row norms.
pub fn l2_normalize_rows<F: Real>(x: ArrayView2<F>) -> (Array2<F>, Array1<F>) {
    let eps = F::c(NORM_EPS);
    let norms = x.map_axis(Axis(1), |r| r.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps));
    let y = &x / &norms.view().insert_axis(Axis(1));
    (y, norms)
}

/// Backward of [`l2_normalize_rows`]: `dx = (dy - y (y·dy)) / |x|`.
pub fn l2_normalize_rows_backward<F: Real>(y: ArrayView2<F>, norms: ArrayView1<F>, dy: ArrayView2<F>) -> Array2<F> {
    let mut dx = dy.to_owned();
    for ((mut d, yr), &n) in dx.outer_iter_mut().zip(y.outer_iter()).zip(norms.iter()) {
        let dot = d.dot(&yr);
        Zip::from(&mut d).and(&yr).for_each(|a, &b| *a = (*a - b * dot) / n);
    }
    dx
}
