//! The SASM block: RMS-normalized input, gated forward/backward scan pair
//! with temporal causal flipping, and a residual output projection.
//!
//! ```text
//! x, z  = W_x norm(F), W_z norm(F)
//! u_f   = silu(conv_f(x))              u_b = silu(conv_b(flip(x)))
//! y_f   = scan_f(u_f, h_f)             y_b = flip(scan_b(u_b, h_b))
//! F_out = F + W_o ((y_f + y_b) ⊙ silu(z))
//! ```
//!
//! `flip` reverses tokens inside each frame and keeps frame order, so both
//! directions carry state strictly forward in time across frames. Convolutions
//! are padded per frame by default; together these make a block applied to
//! `[template; search]` equal, on the search tokens, to the block applied to
//! the search frame alone and seeded with the template's final states.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::nn::{join, normal, uniform, Linear, ParamSet, Tensor};
use crate::scalar::{silu, silu_grad, Scalar};
use crate::ssm::{
    scan_backward, segmented_scan, segmented_scan_taped, DeltaMode, FrameSequence, HiddenState, ScanParams, ScanTape,
};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    /// Inner (scanned) width; equal to `d_model` unless expanded.
    pub d_inner: usize,
    pub states: usize,
    pub conv_kernel: usize,
    pub delta_mode: DeltaMode,
    pub interaction: bool,
    /// Pad the causal convolution independently per frame.
    pub per_frame_conv: bool,
}

impl BlockConfig {
    pub fn new(d_model: usize, states: usize) -> Self {
        BlockConfig {
            d_model,
            d_inner: d_model,
            states,
            conv_kernel: 4,
            delta_mode: DeltaMode::Joint,
            interaction: true,
            per_frame_conv: true,
        }
    }
}

/// Depthwise causal 1-D convolution; weights `[channels, kernel]`, tap
/// `kernel - 1` multiplies the current token.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<T> {
    pub channels: usize,
    pub kernel: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv1d<T> {
    pub fn zeros(channels: usize, kernel: usize) -> Self {
        Conv1d {
            channels,
            kernel,
            weight: vec![T::zero(); channels * kernel],
            bias: vec![T::zero(); channels],
        }
    }

    pub fn identity(channels: usize, kernel: usize) -> Self {
        let mut c = Self::zeros(channels, kernel);
        for ch in 0..channels {
            c.weight[ch * kernel + kernel - 1] = T::one();
        }
        c
    }
}

impl<T: Scalar> ParamSet<T> for Conv1d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "weight"), &[self.channels, self.kernel], &self.weight);
        f(&join(prefix, "bias"), &[self.channels], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let shape = [self.channels, self.kernel];
        f(&join(prefix, "weight"), &shape, &mut self.weight);
        f(&join(prefix, "bias"), &[self.channels], &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub cfg: BlockConfig,
    pub norm: Tensor<T>,
    pub in_proj_x: Linear<T>,
    pub in_proj_z: Linear<T>,
    pub conv_f: Conv1d<T>,
    pub conv_b: Conv1d<T>,
    pub scan_f: ScanParams<T>,
    pub scan_b: ScanParams<T>,
    pub out_proj: Linear<T>,
    pub h_init_f: Tensor<T>,
    pub h_init_b: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn zeros(cfg: BlockConfig) -> Result<Self> {
        ensure!(cfg.conv_kernel >= 1, "conv kernel width must be at least 1");
        let (dm, d, n) = (cfg.d_model, cfg.d_inner, cfg.states);
        Ok(BlockParams {
            cfg,
            norm: Tensor::filled(&[dm], T::one()),
            in_proj_x: Linear::zeros(dm, d, false),
            in_proj_z: Linear::zeros(dm, d, false),
            conv_f: Conv1d::zeros(d, cfg.conv_kernel),
            conv_b: Conv1d::zeros(d, cfg.conv_kernel),
            scan_f: ScanParams::zeros(d, n, cfg.delta_mode)?,
            scan_b: ScanParams::zeros(d, n, cfg.delta_mode)?,
            out_proj: Linear::zeros(d, dm, false),
            h_init_f: Tensor::zeros(&[d, n]),
            h_init_b: Tensor::zeros(&[d, n]),
        })
    }

    /// Random initialization; `out_scale` shrinks the residual branch.
    pub fn init(cfg: BlockConfig, out_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let (dm, d, n, k) = (cfg.d_model, cfg.d_inner, cfg.states, cfg.conv_kernel);
        p.in_proj_x = Linear::init(dm, d, false, 1.0, rng);
        p.in_proj_z = Linear::init(dm, d, false, 1.0, rng);
        p.conv_f.weight = uniform(rng, d * k, 1.0 / (k as f64).sqrt());
        p.conv_b.weight = uniform(rng, d * k, 1.0 / (k as f64).sqrt());
        p.scan_f = ScanParams::init(d, n, cfg.delta_mode, rng)?;
        p.scan_b = ScanParams::init(d, n, cfg.delta_mode, rng)?;
        p.out_proj = Linear::init(d, dm, false, out_scale, rng);
        p.h_init_f.data = normal(rng, d * n, 0.02);
        p.h_init_b.data = normal(rng, d * n, 0.02);
        Ok(p)
    }

    /// The learnable initial states as a [`BlockState`].
    pub fn initial_state(&self) -> BlockState<T> {
        let (d, n) = (self.cfg.d_inner, self.cfg.states);
        BlockState {
            forward: HiddenState {
                channels: d,
                states: n,
                data: self.h_init_f.data.clone(),
                tag: crate::ssm::StateTag::Initial,
            },
            backward: HiddenState {
                channels: d,
                states: n,
                data: self.h_init_b.data.clone(),
                tag: crate::ssm::StateTag::Initial,
            },
        }
    }
}

impl<T: Scalar> ParamSet<T> for BlockParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.in_proj_x.visit(&join(prefix, "in_proj_x"), f);
        self.in_proj_z.visit(&join(prefix, "in_proj_z"), f);
        self.conv_f.visit(&join(prefix, "conv_f"), f);
        self.conv_b.visit(&join(prefix, "conv_b"), f);
        self.scan_f.visit(&join(prefix, "scan_f"), f);
        self.scan_b.visit(&join(prefix, "scan_b"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
        self.h_init_f.visit(&join(prefix, "h_init_f"), f);
        self.h_init_b.visit(&join(prefix, "h_init_b"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.in_proj_x.visit_mut(&join(prefix, "in_proj_x"), f);
        self.in_proj_z.visit_mut(&join(prefix, "in_proj_z"), f);
        self.conv_f.visit_mut(&join(prefix, "conv_f"), f);
        self.conv_b.visit_mut(&join(prefix, "conv_b"), f);
        self.scan_f.visit_mut(&join(prefix, "scan_f"), f);
        self.scan_b.visit_mut(&join(prefix, "scan_b"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
        self.h_init_f.visit_mut(&join(prefix, "h_init_f"), f);
        self.h_init_b.visit_mut(&join(prefix, "h_init_b"), f);
    }
}

/// Final states of both scan directions.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState<T> {
    pub forward: HiddenState<T>,
    pub backward: HiddenState<T>,
}

impl<T: Scalar> BlockState<T> {
    pub fn zeros(channels: usize, states: usize) -> Self {
        BlockState {
            forward: HiddenState::zeros(channels, states),
            backward: HiddenState::zeros(channels, states),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.forward.is_finite() && self.backward.is_finite()
    }

    pub fn cast<U: Scalar>(&self) -> BlockState<U> {
        BlockState {
            forward: self.forward.cast(),
            backward: self.backward.cast(),
        }
    }
}

/// Reverses token order inside each frame; frame order is kept.
pub fn temporal_causal_flip<T: Scalar>(seq: &FrameSequence<T>) -> FrameSequence<T> {
    let w = seq.width;
    let mut tokens = Vec::with_capacity(seq.tokens.len());
    for (start, len) in seq.frame_spans() {
        for t in (start..start + len).rev() {
            tokens.extend_from_slice(&seq.tokens[t * w..(t + 1) * w]);
        }
    }
    FrameSequence {
        width: w,
        tokens,
        frame_lengths: seq.frame_lengths.clone(),
    }
}

/// Per-token `x / sqrt(mean(x²) + ε) ⊙ weights` over rows of `weights.len()`.
pub fn rms_norm<T: Scalar>(x: &[T], weights: &[T]) -> Vec<T> {
    rms_norm_with_scale(x, weights).0
}

pub(crate) fn rms_norm_with_scale<T: Scalar>(x: &[T], weights: &[T]) -> (Vec<T>, Vec<T>) {
    let w = weights.len();
    let rows = x.len() / w;
    let mut out = vec![T::zero(); x.len()];
    let mut scales = Vec::with_capacity(rows);
    let inv_w = T::one() / T::c(w as f64);
    for (xr, or) in x.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() * inv_w;
        let r = T::one() / (ms + T::c(RMS_EPS)).sqrt();
        for ((o, &v), &g) in or.iter_mut().zip(xr).zip(weights) {
            *o = v * r * g;
        }
        scales.push(r);
    }
    (out, scales)
}

/// Backward of [`rms_norm`]; accumulates into `dweights`, returns `dx`.
pub(crate) fn rms_norm_backward<T: Scalar>(
    x: &[T],
    scales: &[T],
    weights: &[T],
    dy: &[T],
    dweights: &mut [T],
) -> Vec<T> {
    let w = weights.len();
    let inv_w = T::one() / T::c(w as f64);
    let mut dx = vec![T::zero(); x.len()];
    for (((xr, dyr), dxr), &r) in x
        .chunks_exact(w)
        .zip(dy.chunks_exact(w))
        .zip(dx.chunks_exact_mut(w))
        .zip(scales)
    {
        let mut proj = T::zero();
        for i in 0..w {
            dweights[i] += dyr[i] * xr[i] * r;
            proj += dyr[i] * weights[i] * xr[i];
        }
        let coef = r * r * r * proj * inv_w;
        for i in 0..w {
            dxr[i] = r * dyr[i] * weights[i] - coef * xr[i];
        }
    }
    dx
}

/// Depthwise causal convolution. With `per_frame`, every frame is left-padded
/// with `kernel - 1` zeros on its own, so no tap reaches into an earlier frame.
pub fn causal_conv1d<T: Scalar>(seq: &FrameSequence<T>, conv: &Conv1d<T>, per_frame: bool) -> Result<FrameSequence<T>> {
    ensure!(conv.kernel >= 1, "conv kernel width must be at least 1");
    ensure!(
        seq.width == conv.channels,
        "conv has {} channels, tokens have {}",
        conv.channels,
        seq.width
    );
    let (c, k) = (conv.channels, conv.kernel);
    let mut out = vec![T::zero(); seq.tokens.len()];
    let segments: Vec<(usize, usize)> = if per_frame {
        seq.frame_spans().collect()
    } else {
        vec![(0, seq.len())]
    };
    for (start, len) in segments {
        for t in start..start + len {
            let o = &mut out[t * c..(t + 1) * c];
            o.copy_from_slice(&conv.bias);
            for tap in 0..k {
                let back = k - 1 - tap;
                if t < start + back {
                    continue;
                }
                let src = &seq.tokens[(t - back) * c..(t - back + 1) * c];
                for ch in 0..c {
                    o[ch] += conv.weight[ch * k + tap] * src[ch];
                }
            }
        }
    }
    Ok(seq.with_tokens(out, c))
}

fn causal_conv1d_backward<T: Scalar>(
    seq: &FrameSequence<T>,
    conv: &Conv1d<T>,
    per_frame: bool,
    dy: &[T],
    grad: &mut Conv1d<T>,
) -> Vec<T> {
    let (c, k) = (conv.channels, conv.kernel);
    let mut dx = vec![T::zero(); seq.tokens.len()];
    let segments: Vec<(usize, usize)> = if per_frame {
        seq.frame_spans().collect()
    } else {
        vec![(0, seq.len())]
    };
    for (start, len) in segments {
        for t in start..start + len {
            let g = &dy[t * c..(t + 1) * c];
            for ch in 0..c {
                grad.bias[ch] += g[ch];
            }
            for tap in 0..k {
                let back = k - 1 - tap;
                if t < start + back {
                    continue;
                }
                let s = t - back;
                for ch in 0..c {
                    grad.weight[ch * k + tap] += g[ch] * seq.tokens[s * c + ch];
                    dx[s * c + ch] += g[ch] * conv.weight[ch * k + tap];
                }
            }
        }
    }
    dx
}

fn flip_tokens<T: Scalar>(tokens: &[T], width: usize, frame_lengths: &[usize]) -> Vec<T> {
    let seq = FrameSequence {
        width,
        tokens: tokens.to_vec(),
        frame_lengths: frame_lengths.to_vec(),
    };
    temporal_causal_flip(&seq).tokens
}

/// Saved activations of one block forward pass.
#[derive(Clone, Debug)]
pub struct BlockTape<T> {
    input: FrameSequence<T>,
    norm_scales: Vec<T>,
    normed: Vec<T>,
    x: FrameSequence<T>,
    x_flipped: FrameSequence<T>,
    z: Vec<T>,
    pre_f: Vec<T>,
    pre_b: Vec<T>,
    y_sum: Vec<T>,
    tape_f: ScanTape<T>,
    tape_b: ScanTape<T>,
}

struct Forward<T> {
    out: FrameSequence<T>,
    state: BlockState<T>,
    tape: Option<BlockTape<T>>,
}

fn forward_impl<T: Scalar>(
    input: &FrameSequence<T>,
    state_in: &BlockState<T>,
    p: &BlockParams<T>,
    record: bool,
) -> Result<Forward<T>> {
    let cfg = &p.cfg;
    ensure!(
        input.width == cfg.d_model,
        "block expects token width {}, got {}",
        cfg.d_model,
        input.width
    );
    let (d, n) = (cfg.d_inner, cfg.states);
    for (which, h) in [("forward", &state_in.forward), ("backward", &state_in.backward)] {
        ensure!(
            h.channels == d && h.states == n,
            "{which} state is {}x{}, block expects {d}x{n}",
            h.channels,
            h.states
        );
    }

    let (normed, norm_scales) = rms_norm_with_scale(&input.tokens, &p.norm.data);
    let x = input.with_tokens(p.in_proj_x.forward(&normed), d);
    let z = p.in_proj_z.forward(&normed);
    let x_flipped = temporal_causal_flip(&x);

    let pre_f = causal_conv1d(&x, &p.conv_f, cfg.per_frame_conv)?;
    let pre_b = causal_conv1d(&x_flipped, &p.conv_b, cfg.per_frame_conv)?;
    let u_f = pre_f.with_tokens(pre_f.tokens.iter().map(|&v| silu(v)).collect(), d);
    let u_b = pre_b.with_tokens(pre_b.tokens.iter().map(|&v| silu(v)).collect(), d);

    let (out_f, out_b, tapes) = if record {
        let (of, tf) = segmented_scan_taped(&u_f, &state_in.forward, &p.scan_f, cfg.interaction)?;
        let (ob, tb) = segmented_scan_taped(&u_b, &state_in.backward, &p.scan_b, cfg.interaction)?;
        (of, ob, Some((tf, tb)))
    } else {
        let of = segmented_scan(&u_f, &state_in.forward, &p.scan_f, cfg.interaction)?;
        let ob = segmented_scan(&u_b, &state_in.backward, &p.scan_b, cfg.interaction)?;
        (of, ob, None)
    };

    let y_b = flip_tokens(&out_b.y, d, &input.frame_lengths);
    let y_sum: Vec<T> = out_f.y.iter().zip(&y_b).map(|(&a, &b)| a + b).collect();
    let gated: Vec<T> = y_sum.iter().zip(&z).map(|(&y, &zv)| y * silu(zv)).collect();
    let proj = p.out_proj.forward(&gated);
    let out_tokens: Vec<T> = input.tokens.iter().zip(&proj).map(|(&a, &b)| a + b).collect();

    let state = BlockState {
        forward: out_f.h_last,
        backward: out_b.h_last,
    };
    let tape = tapes.map(|(tape_f, tape_b)| BlockTape {
        input: input.clone(),
        norm_scales,
        normed,
        x,
        x_flipped,
        z,
        pre_f: pre_f.tokens,
        pre_b: pre_b.tokens,
        y_sum,
        tape_f,
        tape_b,
    });
    Ok(Forward {
        out: input.with_tokens(out_tokens, cfg.d_model),
        state,
        tape,
    })
}

/// Runs the block from `state_in`; returns features and both final states.
pub fn block_forward<T: Scalar>(
    input: &FrameSequence<T>,
    state_in: &BlockState<T>,
    params: &BlockParams<T>,
) -> Result<(FrameSequence<T>, BlockState<T>)> {
    let f = forward_impl(input, state_in, params, false)?;
    Ok((f.out, f.state))
}

/// As [`block_forward`], also returning the tape for [`block_backward`].
pub fn block_forward_taped<T: Scalar>(
    input: &FrameSequence<T>,
    state_in: &BlockState<T>,
    params: &BlockParams<T>,
) -> Result<(FrameSequence<T>, BlockState<T>, BlockTape<T>)> {
    let f = forward_impl(input, state_in, params, true)?;
    Ok((f.out, f.state, f.tape.expect("tape recorded")))
}

/// Gradients w.r.t. block inputs.
#[derive(Clone, Debug)]
pub struct BlockInputGrads<T> {
    pub d_input: Vec<T>,
    pub d_state_forward: Vec<T>,
    pub d_state_backward: Vec<T>,
}

/// Reverse pass. `d_out` is `[L, d_model]`; `d_state_out` are the gradients
/// flowing into the two propagated states (zeros when they are unused).
pub fn block_backward<T: Scalar>(
    tape: &BlockTape<T>,
    p: &BlockParams<T>,
    d_out: &[T],
    d_state_out: (&[T], &[T]),
    grads: &mut BlockParams<T>,
) -> Result<BlockInputGrads<T>> {
    let cfg = &p.cfg;
    let d = cfg.d_inner;
    ensure!(
        d_out.len() == tape.input.tokens.len(),
        "upstream gradient shape mismatch"
    );
    let lengths = &tape.input.frame_lengths;

    let gate: Vec<T> = tape.z.iter().map(|&v| silu(v)).collect();
    let gated: Vec<T> = tape.y_sum.iter().zip(&gate).map(|(&y, &g)| y * g).collect();
    let d_gated = p.out_proj.backward(&gated, d_out, &mut grads.out_proj);

    let d_y: Vec<T> = d_gated.iter().zip(&gate).map(|(&a, &g)| a * g).collect();
    let d_z: Vec<T> = d_gated
        .iter()
        .zip(&tape.y_sum)
        .zip(&tape.z)
        .map(|((&a, &y), &zv)| a * y * silu_grad(zv))
        .collect();

    let d_yb_flipped = flip_tokens(&d_y, d, lengths);
    let gb = scan_backward(&tape.tape_b, &p.scan_b, &d_yb_flipped, d_state_out.1, &mut grads.scan_b)?;
    let gf = scan_backward(&tape.tape_f, &p.scan_f, &d_y, d_state_out.0, &mut grads.scan_f)?;

    let d_pre_f: Vec<T> = gf.dx.iter().zip(&tape.pre_f).map(|(&g, &a)| g * silu_grad(a)).collect();
    let d_pre_b: Vec<T> = gb.dx.iter().zip(&tape.pre_b).map(|(&g, &a)| g * silu_grad(a)).collect();

    let mut d_x = causal_conv1d_backward(&tape.x, &p.conv_f, cfg.per_frame_conv, &d_pre_f, &mut grads.conv_f);
    let d_x_flipped = causal_conv1d_backward(
        &tape.x_flipped,
        &p.conv_b,
        cfg.per_frame_conv,
        &d_pre_b,
        &mut grads.conv_b,
    );
    for (a, b) in d_x.iter_mut().zip(flip_tokens(&d_x_flipped, d, lengths)) {
        *a += b;
    }

    let mut d_normed = p.in_proj_x.backward(&tape.normed, &d_x, &mut grads.in_proj_x);
    let dz_in = p.in_proj_z.backward(&tape.normed, &d_z, &mut grads.in_proj_z);
    for (a, b) in d_normed.iter_mut().zip(dz_in) {
        *a += b;
    }

    let mut d_input = rms_norm_backward(
        &tape.input.tokens,
        &tape.norm_scales,
        &p.norm.data,
        &d_normed,
        &mut grads.norm.data,
    );
    for (a, &b) in d_input.iter_mut().zip(d_out) {
        *a += b;
    }

    Ok(BlockInputGrads {
        d_input,
        d_state_forward: gf.dh_init,
        d_state_backward: gb.dh_init,
    })
}
