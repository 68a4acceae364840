//! Softmax-attention baseline of matched width and depth.
//!
//! Each layer is pre-norm single-head self-attention over the whole
//! template+search sequence with a residual connection. Frame boundaries are
//! ignored; every token attends to every other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::rms_norm;
use crate::error::{ensure, Result};
use crate::nn::{join, Linear, ParamSet, Tensor};
use crate::scalar::Scalar;
use crate::ssm::FrameSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<T> {
    pub norm: Tensor<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Scalar> AttentionLayer<T> {
    pub fn init(width: usize, out_scale: f64, rng: &mut impl rand::Rng) -> Self {
        AttentionLayer {
            norm: Tensor::filled(&[width], T::one()),
            query: Linear::init(width, width, false, 1.0, rng),
            key: Linear::init(width, width, false, 1.0, rng),
            value: Linear::init(width, width, false, 1.0, rng),
            out: Linear::init(width, width, false, out_scale, rng),
        }
    }
}

impl<T: Scalar> ParamSet<T> for AttentionLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub width: usize,
    pub layers: Vec<AttentionLayer<T>>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn init(width: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out_scale = 1.0 / (2.0 * depth.max(1) as f64).sqrt();
        AttentionParams {
            width,
            layers: (0..depth)
                .map(|_| AttentionLayer::init(width, out_scale, &mut rng))
                .collect(),
        }
    }
}

impl<T: Scalar> ParamSet<T> for AttentionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Row-softmax of `q kᵀ / sqrt(width)`, `[L, L]`.
pub fn attention_weights<T: Scalar>(q: &[T], k: &[T], width: usize) -> Vec<T> {
    let len = q.len() / width;
    let scale = T::one() / T::c(width as f64).sqrt();
    let mut w = vec![T::zero(); len * len];
    for (qi, row) in q.chunks_exact(width).zip(w.chunks_exact_mut(len)) {
        let mut max = T::neg_infinity();
        for (kj, s) in k.chunks_exact(width).zip(row.iter_mut()) {
            *s = crate::nn::dot(qi, kj) * scale;
            max = max.max(*s);
        }
        let mut sum = T::zero();
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
    w
}

/// `softmax(q kᵀ / sqrt(width)) v`.
pub fn attend<T: Scalar>(q: &[T], k: &[T], v: &[T], width: usize) -> Vec<T> {
    let len = q.len() / width;
    let w = attention_weights(q, k, width);
    let mut out = vec![T::zero(); q.len()];
    for (row, o) in w.chunks_exact(len).zip(out.chunks_exact_mut(width)) {
        for (&a, vj) in row.iter().zip(v.chunks_exact(width)) {
            for (oc, &vc) in o.iter_mut().zip(vj) {
                *oc += a * vc;
            }
        }
    }
    out
}

pub fn attention_layer_forward<T: Scalar>(tokens: &[T], layer: &AttentionLayer<T>) -> Vec<T> {
    let width = layer.norm.len();
    let normed = rms_norm(tokens, &layer.norm.data);
    let q = layer.query.forward(&normed);
    let k = layer.key.forward(&normed);
    let v = layer.value.forward(&normed);
    let mixed = attend(&q, &k, &v, width);
    let proj = layer.out.forward(&mixed);
    tokens.iter().zip(&proj).map(|(&a, &b)| a + b).collect()
}

pub fn attention_baseline_forward<T: Scalar>(
    seq: &FrameSequence<T>,
    params: &AttentionParams<T>,
) -> Result<FrameSequence<T>> {
    ensure!(
        seq.width == params.width,
        "attention stack expects width {}, got {}",
        params.width,
        seq.width
    );
    let mut tokens = seq.tokens.clone();
    for layer in &params.layers {
        tokens = attention_layer_forward(&tokens, layer);
    }
    Ok(seq.with_tokens(tokens, seq.width))
}
