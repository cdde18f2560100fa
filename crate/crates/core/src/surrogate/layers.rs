//! Layers of the surrogate with hand-written backward passes.
//!
//! Activations are token matrices `[N, C]`. Every layer keeps whatever its
//! backward pass needs in an explicit cache; gradients accumulate into a
//! zero-initialised copy of the layer itself.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

/// Visits named parameter tensors in a fixed order.
pub(crate) trait Visit<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn normal<T: Scalar, R: Rng>(rng: &mut R, std: f64) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::lit(z * std)
}

macro_rules! visit_array {
    ($arr:expr, $name:expr, $f:expr) => {{
        let shape = $arr.shape().to_vec();
        $f($name, &shape, $arr.as_slice().expect("standard layout"))
    }};
}

macro_rules! visit_array_mut {
    ($arr:expr, $name:expr, $f:expr) => {{
        let shape = $arr.shape().to_vec();
        $f($name, &shape, $arr.as_slice_mut().expect("standard layout"))
    }};
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || normal(rng, std)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: &ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &ArrayView2<T>, dy: &ArrayView2<T>, grad: &mut Self) -> Array2<T> {
        general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl<T: Scalar> Visit<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        visit_array!(self.weight, &join(prefix, "weight"), f);
        visit_array!(self.bias, &join(prefix, "bias"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        visit_array_mut!(self.weight, &join(prefix, "weight"), f);
        visit_array_mut!(self.bias, &join(prefix, "bias"), f);
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let (n, c) = x.dim();
        let cn = T::from_usize_lossy(c);
        let eps = T::lit(LN_EPS);
        let mut xhat = Array2::zeros((n, c));
        let mut rstd = Vec::with_capacity(n);
        for (row, mut out) in x.rows().into_iter().zip(xhat.rows_mut()) {
            let mean = row.sum() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o = (v - mean) * r;
            }
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let c = dy.ncols();
        let cn = T::from_usize_lossy(c);
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
            let xh = cache.xhat.row(i);
            let dyr = dy.row(i);
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for k in 0..c {
                let d = dyr[k] * self.gamma[k];
                mean_d += d;
                mean_dx += d * xh[k];
            }
            mean_d /= cn;
            mean_dx /= cn;
            let r = cache.rstd[i];
            for k in 0..c {
                let d = dyr[k] * self.gamma[k];
                out[k] = r * (d - mean_d - xh[k] * mean_dx);
            }
        }
        dx
    }
}

impl<T: Scalar> Visit<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        visit_array!(self.gamma, &join(prefix, "gamma"), f);
        visit_array!(self.beta, &join(prefix, "beta"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        visit_array_mut!(self.gamma, &join(prefix, "gamma"), f);
        visit_array_mut!(self.beta, &join(prefix, "beta"), f);
    }
}

/// Token sequences attended over: token `start + i·step` for `i < len`.
#[derive(Clone, Debug)]
pub struct Sequences {
    pub starts: Vec<usize>,
    pub step: usize,
    pub len: usize,
}

/// Multi-head self-attention restricted to [`Sequences`] (one axis of the
/// token grid).
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    /// `[C, 3C]`, columns ordered Q | K | V.
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

pub struct AttentionCache<T> {
    x: Array2<T>,
    qkv: Array2<T>,
    /// Softmax weights, `[sequence][head][i][j]` flattened.
    probs: Vec<T>,
    mixed: Array2<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn new<R: Rng>(dim: usize, heads: usize, proj_std: f64, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            qkv: Linear::new(dim, 3 * dim, std, rng),
            proj: Linear::new(dim, dim, proj_std, rng),
            heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            qkv: self.qkv.zeros_like(),
            proj: self.proj.zeros_like(),
            heads: self.heads,
        }
    }

    pub fn forward(&self, x: Array2<T>, seqs: &Sequences) -> (Array2<T>, AttentionCache<T>) {
        let (n, c) = x.dim();
        let dh = c / self.heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let qkv = self.qkv.forward(&x.view());
        let q = qkv.as_slice().expect("standard layout");
        let l = seqs.len;
        let mut probs = vec![T::zero(); seqs.starts.len() * self.heads * l * l];
        let mut mixed = Array2::zeros((n, c));
        let m = mixed.as_slice_mut().expect("standard layout");
        let row = 3 * c;
        let mut scores = vec![T::zero(); l];
        for (s, &start) in seqs.starts.iter().enumerate() {
            for h in 0..self.heads {
                let (qo, ko, vo) = (h * dh, c + h * dh, 2 * c + h * dh);
                let base = (s * self.heads + h) * l * l;
                for i in 0..l {
                    let ti = start + i * seqs.step;
                    let qi = &q[ti * row + qo..ti * row + qo + dh];
                    let mut max = T::neg_infinity();
                    for j in 0..l {
                        let tj = start + j * seqs.step;
                        let kj = &q[tj * row + ko..tj * row + ko + dh];
                        let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        scores[j] = dot * scale;
                        max = max.max(scores[j]);
                    }
                    let mut z = T::zero();
                    for sj in scores.iter_mut() {
                        *sj = (*sj - max).exp();
                        z += *sj;
                    }
                    let p = &mut probs[base + i * l..base + (i + 1) * l];
                    for (pj, sj) in p.iter_mut().zip(&scores) {
                        *pj = *sj / z;
                    }
                    let out = &mut m[ti * c + qo..ti * c + qo + dh];
                    for j in 0..l {
                        let tj = start + j * seqs.step;
                        let vj = &q[tj * row + vo..tj * row + vo + dh];
                        let pj = p[j];
                        for (o, &v) in out.iter_mut().zip(vj) {
                            *o += pj * v;
                        }
                    }
                }
            }
        }
        let y = self.proj.forward(&mixed.view());
        (y, AttentionCache { x, qkv, probs, mixed })
    }

    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        dy: &Array2<T>,
        seqs: &Sequences,
        grad: &mut Self,
    ) -> Array2<T> {
        let (n, c) = cache.x.dim();
        let dh = c / self.heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let dmixed = self.proj.backward(&cache.mixed.view(), &dy.view(), &mut grad.proj);
        let dm = dmixed.as_slice().expect("standard layout");
        let q = cache.qkv.as_slice().expect("standard layout");
        let mut dqkv = Array2::<T>::zeros((n, 3 * c));
        let dq = dqkv.as_slice_mut().expect("standard layout");
        let row = 3 * c;
        let l = seqs.len;
        let mut dp = vec![T::zero(); l];
        for (s, &start) in seqs.starts.iter().enumerate() {
            for h in 0..self.heads {
                let (qo, ko, vo) = (h * dh, c + h * dh, 2 * c + h * dh);
                let base = (s * self.heads + h) * l * l;
                for i in 0..l {
                    let ti = start + i * seqs.step;
                    let p = &cache.probs[base + i * l..base + (i + 1) * l];
                    let doi = &dm[ti * c + qo..ti * c + qo + dh];
                    // dP and dV
                    let mut dot_pdp = T::zero();
                    for j in 0..l {
                        let tj = start + j * seqs.step;
                        let vj = &q[tj * row + vo..tj * row + vo + dh];
                        dp[j] = doi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        dot_pdp += p[j] * dp[j];
                        let dvj = &mut dq[tj * row + vo..tj * row + vo + dh];
                        for (dv, &d) in dvj.iter_mut().zip(doi) {
                            *dv += p[j] * d;
                        }
                    }
                    // dS, then dQ_i and dK_j
                    for j in 0..l {
                        let ds = p[j] * (dp[j] - dot_pdp) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let tj = start + j * seqs.step;
                        for d in 0..dh {
                            let kjd = q[tj * row + ko + d];
                            let qid = q[ti * row + qo + d];
                            dq[ti * row + qo + d] += ds * kjd;
                            dq[tj * row + ko + d] += ds * qid;
                        }
                    }
                }
            }
        }
        self.qkv.backward(&cache.x.view(), &dqkv.view(), &mut grad.qkv)
    }
}

impl<T: Scalar> Visit<T> for Attention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct MlpCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: Rng>(dim: usize, hidden: usize, out_std: f64, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(dim, hidden, 1.0 / (dim as f64).sqrt(), rng),
            fc2: Linear::new(hidden, dim, out_std, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    pub fn forward(&self, x: Array2<T>) -> (Array2<T>, MlpCache<T>) {
        let pre = self.fc1.forward(&x.view());
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act.view());
        (y, MlpCache { x, pre, act })
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let mut dact = self.fc2.backward(&cache.act.view(), &dy.view(), &mut grad.fc2);
        ndarray::Zip::from(&mut dact)
            .and(&cache.pre)
            .for_each(|d, &p| *d *= gelu_grad(p));
        self.fc1.backward(&cache.x.view(), &dact.view(), &mut grad.fc1)
    }
}

impl<T: Scalar> Visit<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_simple_fn((5, 16), || normal::<f64, _>(&mut rng, 3.0) + 2.0);
        let (y, _) = LayerNorm::new(16).forward(&x);
        for row in y.rows() {
            let mean = row.sum() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = Attention::<f64>::new(8, 2, 0.1, &mut rng);
        let x = Array2::from_shape_simple_fn((6, 8), || normal(&mut rng, 1.0));
        let seqs = Sequences { starts: vec![0, 1], step: 2, len: 3 };
        let (_, cache) = attn.forward(x, &seqs);
        for p in cache.probs.chunks(3) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
