//! Dense parameter containers and the visitor used by the optimizer,
//! checkpointing and gradient checks.
//!
//! Gradients are stored in the same structures as parameters, so a
//! `BlockParams<T>` doubles as its own gradient accumulator.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::scalar::Scalar;

/// Walks every learnable array in a deterministic order.
#[allow(clippy::type_complexity)]
pub trait ParamSet<T: Scalar> {
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

/// An n-dimensional array with row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/data mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl<T: Scalar> ParamSet<T> for Tensor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(prefix, &self.shape, &self.data);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        f(prefix, &self.shape, &mut self.data);
    }
}

/// `y = W x (+ b)` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: bias.then(|| vec![T::zero(); out_dim]),
        }
    }

    /// Uniform in `±scale / sqrt(in_dim)`.
    pub fn init(in_dim: usize, out_dim: usize, bias: bool, scale: f64, rng: &mut impl Rng) -> Self {
        let bound = scale / (in_dim as f64).sqrt();
        Linear {
            in_dim,
            out_dim,
            weight: uniform(rng, in_dim * out_dim, bound),
            bias: bias.then(|| vec![T::zero(); out_dim]),
        }
    }

    /// Writes `W x + b` into `out`.
    #[inline]
    pub fn apply(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, row) in out.iter_mut().zip(self.weight.chunks_exact(self.in_dim)) {
            *o = dot(row, x);
        }
        if let Some(b) = &self.bias {
            for (o, &bv) in out.iter_mut().zip(b) {
                *o += bv;
            }
        }
    }

    /// Row-wise application over a `[rows, in]` matrix.
    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let rows = x.len() / self.in_dim;
        let mut out = vec![T::zero(); rows * self.out_dim];
        for (xr, or) in x.chunks_exact(self.in_dim).zip(out.chunks_exact_mut(self.out_dim)) {
            self.apply(xr, or);
        }
        out
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` and adds `Wᵀ dy` into `dx`.
    #[inline]
    pub fn backward_one(&self, x: &[T], dy: &[T], grad: &mut Linear<T>, dx: &mut [T]) {
        for (o, &g) in dy.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let gw = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                gw[i] += g * x[i];
                dx[i] += g * w[i];
            }
        }
        if let Some(gb) = &mut grad.bias {
            for (b, &g) in gb.iter_mut().zip(dy) {
                *b += g;
            }
        }
    }

    /// Row-wise `dW`/`db` accumulation without the input gradient.
    pub fn backward_weights(&self, x: &[T], dy: &[T], grad: &mut Linear<T>) {
        for (xr, dyr) in x.chunks_exact(self.in_dim).zip(dy.chunks_exact(self.out_dim)) {
            for (o, &g) in dyr.iter().enumerate() {
                let gw = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
                for (w, &xv) in gw.iter_mut().zip(xr) {
                    *w += g * xv;
                }
            }
            if let Some(gb) = &mut grad.bias {
                for (b, &g) in gb.iter_mut().zip(dyr) {
                    *b += g;
                }
            }
        }
    }

    /// Row-wise backward; returns `dx` with the shape of `x`.
    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Linear<T>) -> Vec<T> {
        let mut dx = vec![T::zero(); x.len()];
        for ((xr, dyr), dxr) in x
            .chunks_exact(self.in_dim)
            .zip(dy.chunks_exact(self.out_dim))
            .zip(dx.chunks_exact_mut(self.in_dim))
        {
            self.backward_one(xr, dyr, grad, dxr);
        }
        dx
    }

    /// Dense `[out, in]` matrix product `self · other`.
    pub fn compose(&self, inner: &Linear<T>) -> Vec<T> {
        assert_eq!(self.in_dim, inner.out_dim);
        let mut m = vec![T::zero(); self.out_dim * inner.in_dim];
        for o in 0..self.out_dim {
            for k in 0..self.in_dim {
                let a = self.weight[o * self.in_dim + k];
                for i in 0..inner.in_dim {
                    m[o * inner.in_dim + i] += a * inner.weight[k * inner.in_dim + i];
                }
            }
        }
        m
    }
}

impl<T: Scalar> ParamSet<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "weight"), &[self.out_dim, self.in_dim], &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), &[self.out_dim], b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let shape = [self.out_dim, self.in_dim];
        f(&join(prefix, "weight"), &shape, &mut self.weight);
        let out = self.out_dim;
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), &[out], b);
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<T> {
    if bound == 0.0 {
        return vec![T::zero(); n];
    }
    let dist = Uniform::new_inclusive(-bound, bound);
    (0..n).map(|_| T::c(dist.sample(rng))).collect()
}

pub fn normal<T: Scalar>(rng: &mut impl Rng, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| T::c(dist.sample(rng))).collect()
}

/// Total number of scalars.
pub fn param_count<T: Scalar>(p: &impl ParamSet<T>) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, d| n += d.len());
    n
}

/// Concatenates every array in visit order.
pub fn flatten<T: Scalar>(p: &impl ParamSet<T>) -> Vec<T> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, d| out.extend_from_slice(d));
    out
}

/// Inverse of [`flatten`]; `flat` must have exactly [`param_count`] entries.
pub fn load_flat<T: Scalar>(p: &mut impl ParamSet<T>, flat: &[T]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, _, d| {
        d.copy_from_slice(&flat[offset..offset + d.len()]);
        offset += d.len();
    });
    assert_eq!(offset, flat.len(), "flat parameter vector length mismatch");
}

pub fn fill<T: Scalar>(p: &mut impl ParamSet<T>, value: T) {
    p.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|v| *v = value));
}

/// A copy of `p` with every entry zeroed, for use as a gradient buffer.
pub fn zeros_like<T: Scalar, P: ParamSet<T> + Clone>(p: &P) -> P {
    let mut g = p.clone();
    fill(&mut g, T::zero());
    g
}

/// `dst += scale * src`, element-wise over matching structures.
pub fn add_scaled<T: Scalar, P: ParamSet<T>>(dst: &mut P, src: &P, scale: T) {
    let flat = flatten(src);
    let mut offset = 0;
    dst.visit_mut("", &mut |_, _, d| {
        for v in d.iter_mut() {
            *v += scale * flat[offset];
            offset += 1;
        }
    });
}

/// `(name, shape)` for every array, in visit order.
pub fn layout<T: Scalar>(p: &impl ParamSet<T>) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, shape, _| out.push((name.to_string(), shape.to_vec())));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin: Linear<f64> = Linear::init(5, 3, true, 1.0, &mut rng);
        lin.bias = Some(uniform(&mut rng, 3, 0.5));
        let x: Vec<f64> = uniform(&mut rng, 10, 1.0);
        let w: Vec<f64> = uniform(&mut rng, 6, 1.0);
        let loss = |l: &Linear<f64>, x: &[f64]| dot(&l.forward(x), &w);

        let mut grad = zeros_like(&lin);
        let dx = lin.backward(&x, &w, &mut grad);

        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
        let flat = flatten(&lin);
        let gflat = flatten(&grad);
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += h;
            let mut lp = lin.clone();
            load_flat(&mut lp, &p);
            p[i] -= 2.0 * h;
            let mut lm = lin.clone();
            load_flat(&mut lm, &p);
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
            assert!((fd - gflat[i]).abs() < 1e-8, "param {i}");
        }
    }

    #[test]
    fn flatten_load_round_trip_preserves_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin: Linear<f32> = Linear::init(4, 2, true, 1.0, &mut rng);
        let flat = flatten(&lin);
        assert_eq!(flat.len(), param_count(&lin));
        let mut other = zeros_like(&lin);
        load_flat(&mut other, &flat);
        assert_eq!(other, lin);
        let names: Vec<_> = layout(&lin).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["weight", "bias"]);
    }
}
