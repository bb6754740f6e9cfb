//! Dense layers with explicit forward caches and hand-derived backward passes.
//!
//! Every `backward` accumulates parameter gradients into a gradient struct of
//! the same type and returns the gradient with respect to the layer input.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Mat = Array2<f64>;
pub type Vector = Array1<f64>;

/// Named flat view of one trainable tensor.
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

/// Enumerates trainable tensors in a fixed order.
pub trait Params {
    fn views<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>);
    fn views_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Mat {
    fn views<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        out.push(ParamView {
            name: prefix.to_string(),
            shape: self.shape().to_vec(),
            data: self.as_slice().expect("parameters are contiguous"),
        });
    }

    fn views_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        out.push(ParamViewMut {
            name: prefix.to_string(),
            data: self.as_slice_mut().expect("parameters are contiguous"),
        });
    }
}

impl Params for Vector {
    fn views<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        out.push(ParamView {
            name: prefix.to_string(),
            shape: vec![self.len()],
            data: self.as_slice().expect("parameters are contiguous"),
        });
    }

    fn views_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        out.push(ParamViewMut {
            name: prefix.to_string(),
            data: self.as_slice_mut().expect("parameters are contiguous"),
        });
    }
}

impl<T: Params> Params for Vec<T> {
    fn views<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        for (i, item) in self.iter().enumerate() {
            item.views(&join(prefix, &i.to_string()), out);
        }
    }

    fn views_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        for (i, item) in self.iter_mut().enumerate() {
            item.views_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Implements [`Params`] for a struct by listing its fields in order.
macro_rules! impl_params {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl $crate::nn::Params for $ty {
            fn views<'a>(&'a self, prefix: &str, out: &mut Vec<$crate::nn::ParamView<'a>>) {
                $( self.$field.views(&$crate::nn::join_name(prefix, stringify!($field)), out); )+
            }
            fn views_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<$crate::nn::ParamViewMut<'a>>) {
                $( self.$field.views_mut(&$crate::nn::join_name(prefix, stringify!($field)), out); )+
            }
        }
    };
}
pub(crate) use impl_params;

#[doc(hidden)]
pub fn join_name(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub weight: Mat,
    pub bias: Vector,
}

impl_params!(Linear { weight, bias });

impl Linear {
    /// Uniform fan-in initialization, zero bias.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: uniform(input, output, bound, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        x.dot(&self.weight) + &self.bias
    }

    pub fn forward_vec(&self, x: &Vector) -> Vector {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear) -> Mat {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub fn backward_vec(&self, x: &Vector, dy: &Vector, grad: &mut Linear) -> Vector {
        let outer = x
            .view()
            .insert_axis(Axis(1))
            .dot(&dy.view().insert_axis(Axis(0)));
        grad.weight += &outer;
        grad.bias += dy;
        self.weight.dot(dy)
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vector,
    pub bias: Vector,
}

impl_params!(LayerNorm { gain, bias });

pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vector,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let n = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / n;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gain + &self.bias;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Mat, grad: &mut LayerNorm) -> Mat {
        grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let n = dy.ncols() as f64;
        let dxhat = dy * &self.gain;
        let mean_d = dxhat.sum_axis(Axis(1)) / n;
        let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / n;
        let mut dx = dxhat - mean_d.view().insert_axis(Axis(1));
        dx -= &(&cache.xhat * &mean_dx.view().insert_axis(Axis(1)));
        dx * cache.inv_std.view().insert_axis(Axis(1))
    }
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Gradient through `log_softmax` given the output and upstream gradient.
pub fn log_softmax_backward(log_probs: &Mat, dy: &Mat) -> Mat {
    let sums = dy.sum_axis(Axis(1));
    dy - &(log_probs.mapv(f64::exp) * sums.view().insert_axis(Axis(1)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl_params!(Attention {
    query,
    key,
    value,
    output
});

pub struct AttentionCache {
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per-head attention weights, `Tq x Tk`.
    pub probs: Vec<Mat>,
    context: Mat,
}

impl Attention {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            output: Linear::new(dim, dim, rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            query: Linear::zeros(dim, dim),
            key: Linear::zeros(dim, dim),
            value: Linear::zeros(dim, dim),
            output: Linear::zeros(dim, dim),
        }
    }

    /// Scaled dot-product attention of `queries` over `memory`.
    pub fn forward(&self, queries: &Mat, memory: &Mat, heads: usize) -> (Mat, AttentionCache) {
        let q = self.query.forward(queries);
        let k = self.key.forward(memory);
        let v = self.value.forward(memory);
        let dim = q.ncols();
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut context = Array2::zeros((q.nrows(), dim));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let p = softmax_rows(&scores);
            context.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let out = self.output.forward(&context);
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                probs,
                context,
            },
        )
    }

    /// Returns `(d_queries, d_memory)`.
    pub fn backward(
        &self,
        queries: &Mat,
        memory: &Mat,
        cache: &AttentionCache,
        dy: &Mat,
        grad: &mut Attention,
    ) -> (Mat, Mat) {
        let heads = cache.probs.len();
        let dcontext = self.output.backward(&cache.context, dy, &mut grad.output);
        let dim = cache.q.ncols();
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dctx = dcontext.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dctx));
            let dp = dctx.dot(&cache.v.slice(cols).t());
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let ds = (dp - row_dot.view().insert_axis(Axis(1))) * p * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let dqueries = self.query.backward(queries, &dq, &mut grad.query);
        let mut dmemory = self.key.backward(memory, &dk, &mut grad.key);
        dmemory += &self.value.backward(memory, &dv, &mut grad.value);
        (dqueries, dmemory)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl_params!(FeedForward { inner, outer });

pub struct FeedForwardCache {
    pre: Mat,
    act: Mat,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            inner: Linear::new(dim, hidden, rng),
            outer: Linear::new(hidden, dim, rng),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            inner: Linear::zeros(dim, hidden),
            outer: Linear::zeros(hidden, dim),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, FeedForwardCache) {
        let pre = self.inner.forward(x);
        let act = pre.mapv(gelu);
        let out = self.outer.forward(&act);
        (out, FeedForwardCache { pre, act })
    }

    pub fn backward(
        &self,
        x: &Mat,
        cache: &FeedForwardCache,
        dy: &Mat,
        grad: &mut FeedForward,
    ) -> Mat {
        let dact = self.outer.backward(&cache.act, dy, &mut grad.outer);
        let dpre = dact * &cache.pre.mapv(gelu_grad);
        self.inner.backward(x, &dpre, &mut grad.inner)
    }
}

/// Fixed sinusoidal position table, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    Array2::from_shape_fn((len, dim), |(t, i)| {
        let pair = (i / 2) as f64;
        let angle = t as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Scalar probe: L = sum(W .* y) with a fixed random W.
    fn probe(y: &Mat, w: &Mat) -> f64 {
        (y * w).sum()
    }

    fn check_input_grad(f: impl Fn(&Mat) -> Mat, backward: impl Fn(&Mat, &Mat) -> Mat, x: &Mat) {
        let mut r = rng();
        let y = f(x);
        let w = gaussian(y.nrows(), y.ncols(), 1.0, &mut r);
        let dx = backward(x, &w);
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = (probe(&f(&xp), &w) - probe(&f(&xm), &w)) / (2.0 * h);
            let ana = dx.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                "idx {idx}: numeric {num} vs analytic {ana}"
            );
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut r = rng();
        let mut ln = LayerNorm::new(5);
        ln.gain = Array1::from_shape_simple_fn(5, || r.random_range(0.5..1.5));
        ln.bias = Array1::from_shape_simple_fn(5, || r.random_range(-0.5..0.5));
        let x = gaussian(3, 5, 1.0, &mut r);
        check_input_grad(
            |x| ln.forward(x).0,
            |x, dy| {
                let (_, cache) = ln.forward(x);
                ln.backward(&cache, dy, &mut LayerNorm::zeros(5))
            },
            &x,
        );
    }

    #[test]
    fn attention_gradients_both_inputs() {
        let mut r = rng();
        let attn = Attention::new(6, &mut r);
        let q = gaussian(3, 6, 1.0, &mut r);
        let m = gaussian(4, 6, 1.0, &mut r);
        check_input_grad(
            |q| attn.forward(q, &m, 2).0,
            |q, dy| {
                let (_, c) = attn.forward(q, &m, 2);
                attn.backward(q, &m, &c, dy, &mut Attention::zeros(6)).0
            },
            &q,
        );
        check_input_grad(
            |m| attn.forward(&q, m, 2).0,
            |m, dy| {
                let (_, c) = attn.forward(&q, m, 2);
                attn.backward(&q, m, &c, dy, &mut Attention::zeros(6)).1
            },
            &m,
        );
    }

    #[test]
    fn feed_forward_gradient() {
        let mut r = rng();
        let ff = FeedForward::new(4, 7, &mut r);
        let x = gaussian(3, 4, 1.0, &mut r);
        check_input_grad(
            |x| ff.forward(x).0,
            |x, dy| {
                let (_, c) = ff.forward(x);
                ff.backward(x, &c, dy, &mut FeedForward::zeros(4, 7))
            },
            &x,
        );
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut r = rng();
        let attn = Attention::new(8, &mut r);
        let x = gaussian(5, 8, 2.0, &mut r);
        let (_, cache) = attn.forward(&x, &x, 4);
        for p in &cache.probs {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let x = ndarray::array![[1.0, 2.0, 3.0], [1000.0, 0.0, -1000.0]];
        let lp = log_softmax_rows(&x);
        for row in lp.rows() {
            assert!((row.mapv(f64::exp).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn param_names_are_ordered() {
        let lin = Linear::zeros(2, 3);
        let mut views = Vec::new();
        lin.views("head", &mut views);
        let names: Vec<_> = views.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["head.weight", "head.bias"]);
        assert_eq!(views[0].shape, vec![2, 3]);
    }
}
