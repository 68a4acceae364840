//! Selective state-aware scan.
//!
//! The recurrence runs per channel over a diagonal evolution matrix:
//!
//! ```text
//! Δ_t      = f(W_Δc x_t + b_Δ, W_Δs x_t)          D × N, strictly positive
//! Ā_t      = exp(Δ_t ⊙ A)                          D × N
//! B̄_t      = Δ_t ⊙ broadcast(W_B x_t)              D × N
//! h_t[d,:] = Ā_t[d,:] ⊙ h_{t-1}[d,:] + B̄_t[d,:] x_t[d]
//! y_t[d]   = Σ_n (W_C x_t)[n] h_t[d,n]
//! ```
//!
//! Sequences are split into frames. When interaction is enabled, the state is
//! mixed along the state axis through an `N → N/4 → N` bottleneck after every
//! frame, the last one included, so the state handed to the next call is
//! always post-interaction.

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::nn::{join, Linear, ParamSet, Tensor};
use crate::scalar::{inverse_softplus, sigmoid, softplus, Scalar};

/// How the channel-wise and state-wise timescale logits combine into `Δ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DeltaMode {
    /// `softplus(c[d] + s[n])`.
    #[default]
    Joint,
    /// `softplus(s[n]) + softplus(c[d])`.
    SplitSoftplus,
    /// `sigmoid(s[n]) · softplus(c[d])`.
    SigmoidState,
    /// `softplus(s[n]) · sigmoid(c[d])`.
    SigmoidChannel,
    /// `softplus(c[d])`, shared across states.
    ChannelOnly,
    /// `softplus(s[n])`, shared across channels.
    StateOnly,
}

impl DeltaMode {
    pub const ALL: [DeltaMode; 6] = [
        DeltaMode::Joint,
        DeltaMode::SplitSoftplus,
        DeltaMode::SigmoidState,
        DeltaMode::SigmoidChannel,
        DeltaMode::ChannelOnly,
        DeltaMode::StateOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DeltaMode::Joint => "joint",
            DeltaMode::SplitSoftplus => "split_softplus",
            DeltaMode::SigmoidState => "sigmoid_state",
            DeltaMode::SigmoidChannel => "sigmoid_channel",
            DeltaMode::ChannelOnly => "channel_only",
            DeltaMode::StateOnly => "state_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// `Δ` from the channel logit `c` and state logit `s`.
    #[inline]
    pub fn eval<T: Scalar>(self, c: T, s: T) -> T {
        match self {
            DeltaMode::Joint => softplus(c + s),
            DeltaMode::SplitSoftplus => softplus(s) + softplus(c),
            DeltaMode::SigmoidState => sigmoid(s) * softplus(c),
            DeltaMode::SigmoidChannel => softplus(s) * sigmoid(c),
            DeltaMode::ChannelOnly => softplus(c),
            DeltaMode::StateOnly => softplus(s),
        }
    }

    /// `(∂Δ/∂c, ∂Δ/∂s)`.
    #[inline]
    pub fn grad<T: Scalar>(self, c: T, s: T) -> (T, T) {
        let one = T::one();
        match self {
            DeltaMode::Joint => {
                let g = sigmoid(c + s);
                (g, g)
            }
            DeltaMode::SplitSoftplus => (sigmoid(c), sigmoid(s)),
            DeltaMode::SigmoidState => {
                let ss = sigmoid(s);
                (ss * sigmoid(c), ss * (one - ss) * softplus(c))
            }
            DeltaMode::SigmoidChannel => {
                let sc = sigmoid(c);
                (softplus(s) * sc * (one - sc), sigmoid(s) * sc)
            }
            DeltaMode::ChannelOnly => (sigmoid(c), T::zero()),
            DeltaMode::StateOnly => (T::zero(), sigmoid(s)),
        }
    }
}

/// Learnable parameters of one scan direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanParams<T> {
    pub channels: usize,
    pub states: usize,
    pub delta_mode: DeltaMode,
    /// Evolution parameter, `[D, N]`.
    pub a: Tensor<T>,
    /// Bias on the channel-wise timescale logits, `[D]`.
    pub delta_bias: Tensor<T>,
    pub proj_b: Linear<T>,
    pub proj_c: Linear<T>,
    pub delta_state: Linear<T>,
    pub delta_channel: Linear<T>,
    pub interaction_down: Linear<T>,
    pub interaction_up: Linear<T>,
}

impl<T: Scalar> ScanParams<T> {
    pub fn zeros(channels: usize, states: usize, delta_mode: DeltaMode) -> Result<Self> {
        ensure!(
            channels > 0 && states > 0,
            "scan needs at least one channel and one state"
        );
        ensure!(
            states.is_multiple_of(4),
            "state count {states} must be divisible by 4 for the interaction bottleneck"
        );
        let (d, n) = (channels, states);
        Ok(ScanParams {
            channels: d,
            states: n,
            delta_mode,
            a: Tensor::zeros(&[d, n]),
            delta_bias: Tensor::zeros(&[d]),
            proj_b: Linear::zeros(d, n, false),
            proj_c: Linear::zeros(d, n, false),
            delta_state: Linear::zeros(d, n, false),
            delta_channel: Linear::zeros(d, d, false),
            interaction_down: Linear::zeros(n, n / 4, false),
            interaction_up: Linear::zeros(n / 4, n, false),
        })
    }

    /// `A[d,n] = -(n+1)`; `softplus(Δ_bias)` log-uniform in `[1e-3, 1e-1]`.
    pub fn init(channels: usize, states: usize, delta_mode: DeltaMode, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(channels, states, delta_mode)?;
        let (d, n) = (channels, states);
        for di in 0..d {
            for ni in 0..n {
                p.a.data[di * n + ni] = T::c(-((ni + 1) as f64));
            }
        }
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        for b in p.delta_bias.data.iter_mut() {
            let dt = rng.gen_range(lo..=hi).exp();
            *b = T::c(inverse_softplus(dt));
        }
        p.proj_b = Linear::init(d, n, false, 1.0, rng);
        p.proj_c = Linear::init(d, n, false, 1.0, rng);
        p.delta_state = Linear::init(d, n, false, 0.5, rng);
        p.delta_channel = Linear::init(d, d, false, 0.5, rng);
        p.interaction_down = Linear::init(n, n / 4, false, 1.0, rng);
        p.interaction_up = Linear::init(n / 4, n, false, 1.0, rng);
        Ok(p)
    }

    pub fn bottleneck(&self) -> usize {
        self.states / 4
    }
}

impl<T: Scalar> ParamSet<T> for ScanParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.a.visit(&join(prefix, "a"), f);
        self.delta_bias.visit(&join(prefix, "delta_bias"), f);
        self.proj_b.visit(&join(prefix, "proj_b"), f);
        self.proj_c.visit(&join(prefix, "proj_c"), f);
        self.delta_state.visit(&join(prefix, "delta_state"), f);
        self.delta_channel.visit(&join(prefix, "delta_channel"), f);
        self.interaction_down.visit(&join(prefix, "interaction_down"), f);
        self.interaction_up.visit(&join(prefix, "interaction_up"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.a.visit_mut(&join(prefix, "a"), f);
        self.delta_bias.visit_mut(&join(prefix, "delta_bias"), f);
        self.proj_b.visit_mut(&join(prefix, "proj_b"), f);
        self.proj_c.visit_mut(&join(prefix, "proj_c"), f);
        self.delta_state.visit_mut(&join(prefix, "delta_state"), f);
        self.delta_channel.visit_mut(&join(prefix, "delta_channel"), f);
        self.interaction_down.visit_mut(&join(prefix, "interaction_down"), f);
        self.interaction_up.visit_mut(&join(prefix, "interaction_up"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateTag {
    Initial,
    PostFrame,
    PostInteraction,
}

/// A `[D, N]` scan state.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState<T> {
    pub channels: usize,
    pub states: usize,
    pub data: Vec<T>,
    pub tag: StateTag,
}

impl<T: Scalar> HiddenState<T> {
    pub fn zeros(channels: usize, states: usize) -> Self {
        HiddenState {
            channels,
            states,
            data: vec![T::zero(); channels * states],
            tag: StateTag::Initial,
        }
    }

    pub fn from_vec(channels: usize, states: usize, data: Vec<T>) -> Result<Self> {
        ensure!(
            data.len() == channels * states,
            "hidden state has {} entries, expected {channels}x{states}",
            data.len()
        );
        Ok(HiddenState {
            channels,
            states,
            data,
            tag: StateTag::Initial,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn row(&self, channel: usize) -> &[T] {
        &self.data[channel * self.states..(channel + 1) * self.states]
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn cast<U: Scalar>(&self) -> HiddenState<U> {
        HiddenState {
            channels: self.channels,
            states: self.states,
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
            tag: self.tag,
        }
    }
}

/// Tokens `[L, width]` partitioned into consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence<T> {
    pub width: usize,
    pub tokens: Vec<T>,
    pub frame_lengths: Vec<usize>,
}

impl<T: Scalar> FrameSequence<T> {
    pub fn new(width: usize, tokens: Vec<T>, frame_lengths: Vec<usize>) -> Result<Self> {
        ensure!(width > 0, "token width must be positive");
        ensure!(!frame_lengths.is_empty(), "sequence must contain at least one frame");
        ensure!(
            frame_lengths.iter().all(|&l| l >= 1),
            "every frame must contain at least one token: {frame_lengths:?}"
        );
        let total: usize = frame_lengths.iter().sum();
        ensure!(
            tokens.len() == total * width,
            "frame lengths sum to {total} tokens but {} values of width {width} were given",
            tokens.len()
        );
        Ok(FrameSequence {
            width,
            tokens,
            frame_lengths,
        })
    }

    /// A single-frame sequence.
    pub fn single(width: usize, tokens: Vec<T>) -> Result<Self> {
        ensure!(
            width > 0 && tokens.len().is_multiple_of(width),
            "token buffer is not a multiple of width {width}"
        );
        let len = tokens.len() / width;
        Self::new(width, tokens, vec![len])
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.frame_lengths.len()
    }

    /// `(start_token, length)` per frame.
    pub fn frame_spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.frame_lengths.iter().scan(0usize, |start, &len| {
            let s = *start;
            *start += len;
            Some((s, len))
        })
    }

    pub fn token(&self, t: usize) -> &[T] {
        &self.tokens[t * self.width..(t + 1) * self.width]
    }

    /// Frame `index` as its own single-frame sequence.
    pub fn frame(&self, index: usize) -> FrameSequence<T> {
        let (start, len) = self.frame_spans().nth(index).expect("frame index in range");
        FrameSequence {
            width: self.width,
            tokens: self.tokens[start * self.width..(start + len) * self.width].to_vec(),
            frame_lengths: vec![len],
        }
    }

    /// Frames `range` as a new sequence.
    pub fn frames(&self, range: std::ops::Range<usize>) -> FrameSequence<T> {
        let spans: Vec<_> = self.frame_spans().collect();
        let start = spans[range.start].0;
        let end = spans[range.end - 1].0 + spans[range.end - 1].1;
        FrameSequence {
            width: self.width,
            tokens: self.tokens[start * self.width..end * self.width].to_vec(),
            frame_lengths: self.frame_lengths[range].to_vec(),
        }
    }

    pub fn concat(parts: &[&FrameSequence<T>]) -> Result<Self> {
        ensure!(!parts.is_empty(), "nothing to concatenate");
        let width = parts[0].width;
        ensure!(parts.iter().all(|p| p.width == width), "mismatched token widths");
        let mut tokens = Vec::new();
        let mut lengths = Vec::new();
        for p in parts {
            tokens.extend_from_slice(&p.tokens);
            lengths.extend_from_slice(&p.frame_lengths);
        }
        Self::new(width, tokens, lengths)
    }

    pub fn with_tokens(&self, tokens: Vec<T>, width: usize) -> FrameSequence<T> {
        debug_assert_eq!(tokens.len(), self.len() * width);
        FrameSequence {
            width,
            tokens,
            frame_lengths: self.frame_lengths.clone(),
        }
    }
}

fn check_finite<T: Scalar>(what: &str, v: &[T]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericDomain(format!("{what} contains non-finite values")))
    }
}

/// Zero-order-hold discretization with the `B̄ ≈ ΔB` approximation.
///
/// `a` and `delta` are `[D, N]`, `b` is `[N]`; returns `(Ā, B̄)`, both `[D, N]`.
pub fn discretize<T: Scalar>(a: &[T], b: &[T], delta: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let n = b.len();
    ensure!(
        n > 0 && a.len().is_multiple_of(n),
        "A has {} entries, not a multiple of N = {n}",
        a.len()
    );
    ensure!(delta.len() == a.len(), "Δ and A shapes differ");
    check_finite("A", a)?;
    check_finite("B", b)?;
    check_finite("Δ", delta)?;
    let a_bar = a.iter().zip(delta).map(|(&a, &dt)| (dt * a).exp()).collect();
    let b_bar = delta.iter().enumerate().map(|(i, &dt)| dt * b[i % n]).collect();
    Ok((a_bar, b_bar))
}

/// Channel logits `W_Δc x + b_Δ` (length D) and state logits `W_Δs x` (length N).
#[inline]
fn delta_logits<T: Scalar>(x: &[T], p: &ScanParams<T>, c: &mut [T], s: &mut [T]) {
    p.delta_channel.apply(x, c);
    for (cv, &b) in c.iter_mut().zip(&p.delta_bias.data) {
        *cv += b;
    }
    p.delta_state.apply(x, s);
}

/// State-wise timescales `Δ_t`, `[D, N]`, every entry strictly positive.
pub fn state_wise_delta<T: Scalar>(x: &[T], params: &ScanParams<T>) -> Result<Vec<T>> {
    ensure!(
        x.len() == params.channels,
        "token width {} != channels {}",
        x.len(),
        params.channels
    );
    let (d, n) = (params.channels, params.states);
    let mut c = vec![T::zero(); d];
    let mut s = vec![T::zero(); n];
    delta_logits(x, params, &mut c, &mut s);
    let mut out = Vec::with_capacity(d * n);
    for &cv in &c {
        for &sv in &s {
            out.push(params.delta_mode.eval(cv, sv));
        }
    }
    Ok(out)
}

/// Mixes state coordinates per channel through the `N → N/4 → N` bottleneck.
pub fn state_interaction<T: Scalar>(h: &HiddenState<T>, params: &ScanParams<T>) -> Result<HiddenState<T>> {
    ensure!(
        h.channels == params.channels && h.states == params.states,
        "state shape {}x{} does not match scan {}x{}",
        h.channels,
        h.states,
        params.channels,
        params.states
    );
    let mut out = HiddenState::zeros(h.channels, h.states);
    let mut z = vec![T::zero(); params.bottleneck()];
    for d in 0..h.channels {
        interact_row(
            params,
            h.row(d),
            &mut z,
            &mut out.data[d * h.states..(d + 1) * h.states],
        );
    }
    out.tag = StateTag::PostInteraction;
    Ok(out)
}

#[inline]
fn interact_row<T: Scalar>(p: &ScanParams<T>, h: &[T], z: &mut [T], out: &mut [T]) {
    p.interaction_down.apply(h, z);
    p.interaction_up.apply(z, out);
}

#[derive(Clone, Debug)]
pub struct ScanOutput<T> {
    /// `[L, D]`.
    pub y: Vec<T>,
    pub h_last: HiddenState<T>,
    /// State at each frame boundary, after interaction when enabled.
    pub per_frame_states: Vec<HiddenState<T>>,
}

/// Everything the backward pass needs from a forward scan.
#[derive(Clone, Debug)]
pub struct ScanTape<T> {
    channels: usize,
    states: usize,
    interact: bool,
    frame_lengths: Vec<usize>,
    x: Vec<T>,
    c_logit: Vec<T>,
    s_logit: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
    delta: Vec<T>,
    a_bar: Vec<T>,
    h_prev: Vec<T>,
    /// Per frame: state before interaction and the bottleneck activations.
    boundaries: Vec<(Vec<T>, Vec<T>)>,
}

/// Runs the selective scan token by token from `h_init`.
pub fn segmented_scan<T: Scalar>(
    seq: &FrameSequence<T>,
    h_init: &HiddenState<T>,
    params: &ScanParams<T>,
    apply_interaction: bool,
) -> Result<ScanOutput<T>> {
    scan_impl(seq, h_init, params, apply_interaction, None)
}

/// As [`segmented_scan`], also recording the tape for [`scan_backward`].
pub fn segmented_scan_taped<T: Scalar>(
    seq: &FrameSequence<T>,
    h_init: &HiddenState<T>,
    params: &ScanParams<T>,
    apply_interaction: bool,
) -> Result<(ScanOutput<T>, ScanTape<T>)> {
    let (d, n, l) = (params.channels, params.states, seq.len());
    let mut tape = ScanTape {
        channels: d,
        states: n,
        interact: apply_interaction,
        frame_lengths: seq.frame_lengths.clone(),
        x: seq.tokens.clone(),
        c_logit: vec![T::zero(); l * d],
        s_logit: vec![T::zero(); l * n],
        b: vec![T::zero(); l * n],
        c: vec![T::zero(); l * n],
        delta: vec![T::zero(); l * d * n],
        a_bar: vec![T::zero(); l * d * n],
        h_prev: vec![T::zero(); l * d * n],
        boundaries: Vec::with_capacity(seq.frame_count()),
    };
    let out = scan_impl(seq, h_init, params, apply_interaction, Some(&mut tape))?;
    Ok((out, tape))
}

fn scan_impl<T: Scalar>(
    seq: &FrameSequence<T>,
    h_init: &HiddenState<T>,
    params: &ScanParams<T>,
    interact: bool,
    mut tape: Option<&mut ScanTape<T>>,
) -> Result<ScanOutput<T>> {
    let (d, n) = (params.channels, params.states);
    ensure!(seq.width == d, "sequence width {} != scan channels {d}", seq.width);
    ensure!(!seq.is_empty(), "empty sequences are not scanned");
    ensure!(
        h_init.channels == d && h_init.states == n,
        "initial state shape {}x{} does not match scan {d}x{n}",
        h_init.channels,
        h_init.states
    );

    let mut h = h_init.data.clone();
    let mut y = vec![T::zero(); seq.len() * d];
    let mut per_frame_states = Vec::with_capacity(seq.frame_count());
    let mut c_logit = vec![T::zero(); d];
    let mut s_logit = vec![T::zero(); n];
    let mut bv = vec![T::zero(); n];
    let mut cv = vec![T::zero(); n];
    let mut z = vec![T::zero(); params.bottleneck()];
    let mode = params.delta_mode;

    for (start, len) in seq.frame_spans() {
        for t in start..start + len {
            let x = seq.token(t);
            delta_logits(x, params, &mut c_logit, &mut s_logit);
            params.proj_b.apply(x, &mut bv);
            params.proj_c.apply(x, &mut cv);
            if let Some(tp) = tape.as_deref_mut() {
                tp.c_logit[t * d..(t + 1) * d].copy_from_slice(&c_logit);
                tp.s_logit[t * n..(t + 1) * n].copy_from_slice(&s_logit);
                tp.b[t * n..(t + 1) * n].copy_from_slice(&bv);
                tp.c[t * n..(t + 1) * n].copy_from_slice(&cv);
                tp.h_prev[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
            }
            let yt = &mut y[t * d..(t + 1) * d];
            for di in 0..d {
                let xd = x[di];
                let arow = &params.a.data[di * n..(di + 1) * n];
                let hrow = &mut h[di * n..(di + 1) * n];
                let mut acc = T::zero();
                for ni in 0..n {
                    let dt = mode.eval(c_logit[di], s_logit[ni]);
                    let ab = (dt * arow[ni]).exp();
                    let hv = ab * hrow[ni] + dt * bv[ni] * xd;
                    hrow[ni] = hv;
                    acc += cv[ni] * hv;
                    if let Some(tp) = tape.as_deref_mut() {
                        let k = (t * d + di) * n + ni;
                        tp.delta[k] = dt;
                        tp.a_bar[k] = ab;
                    }
                }
                yt[di] = acc;
            }
        }
        if interact {
            let pre = h.clone();
            let mut zs = vec![T::zero(); d * params.bottleneck()];
            for di in 0..d {
                interact_row(params, &pre[di * n..(di + 1) * n], &mut z, &mut h[di * n..(di + 1) * n]);
                zs[di * z.len()..(di + 1) * z.len()].copy_from_slice(&z);
            }
            if let Some(tp) = tape.as_deref_mut() {
                tp.boundaries.push((pre, zs));
            }
        }
        per_frame_states.push(HiddenState {
            channels: d,
            states: n,
            data: h.clone(),
            tag: if interact {
                StateTag::PostInteraction
            } else {
                StateTag::PostFrame
            },
        });
    }

    let h_last = per_frame_states.last().cloned().expect("at least one frame");
    Ok(ScanOutput {
        y,
        h_last,
        per_frame_states,
    })
}

/// Gradients w.r.t. the scan inputs; parameter gradients accumulate in `grads`.
#[derive(Clone, Debug)]
pub struct ScanInputGrads<T> {
    /// `[L, D]`.
    pub dx: Vec<T>,
    /// `[D, N]`.
    pub dh_init: Vec<T>,
}

/// Reverse-mode pass over a recorded scan.
///
/// `dy` is `[L, D]`, `dh_last` is `[D, N]` (the gradient flowing into the
/// propagated state). Parameter gradients are added to `grads`.
pub fn scan_backward<T: Scalar>(
    tape: &ScanTape<T>,
    params: &ScanParams<T>,
    dy: &[T],
    dh_last: &[T],
    grads: &mut ScanParams<T>,
) -> Result<ScanInputGrads<T>> {
    let (d, n) = (tape.channels, tape.states);
    let l = tape.x.len() / d;
    ensure!(
        params.channels == d && params.states == n,
        "tape was recorded with {d}x{n}, parameters are {}x{}",
        params.channels,
        params.states
    );
    ensure!(
        dy.len() == l * d,
        "upstream dy has {} entries, expected {}",
        dy.len(),
        l * d
    );
    ensure!(dh_last.len() == d * n, "upstream state gradient has wrong shape");
    ensure!(
        !tape.interact || tape.boundaries.len() == tape.frame_lengths.len(),
        "tape is missing frame boundaries"
    );

    let mode = params.delta_mode;
    let r = params.bottleneck();
    let mut dh = dh_last.to_vec();
    let mut dx = vec![T::zero(); l * d];
    let mut dc_logit = vec![T::zero(); d];
    let mut ds_logit = vec![T::zero(); n];
    let mut db = vec![T::zero(); n];
    let mut dcv = vec![T::zero(); n];
    let mut dz = vec![T::zero(); r];
    let mut dpre = vec![T::zero(); d * n];
    let mut h_t = vec![T::zero(); n];

    let spans: Vec<(usize, usize)> = tape
        .frame_lengths
        .iter()
        .scan(0usize, |s, &len| {
            let st = *s;
            *s += len;
            Some((st, len))
        })
        .collect();

    for (f, &(start, len)) in spans.iter().enumerate().rev() {
        if tape.interact {
            let (pre, zs) = &tape.boundaries[f];
            dpre.iter_mut().for_each(|v| *v = T::zero());
            for di in 0..d {
                dz.iter_mut().for_each(|v| *v = T::zero());
                params.interaction_up.backward_one(
                    &zs[di * r..(di + 1) * r],
                    &dh[di * n..(di + 1) * n],
                    &mut grads.interaction_up,
                    &mut dz,
                );
                params.interaction_down.backward_one(
                    &pre[di * n..(di + 1) * n],
                    &dz,
                    &mut grads.interaction_down,
                    &mut dpre[di * n..(di + 1) * n],
                );
            }
            dh.copy_from_slice(&dpre);
        }

        for t in (start..start + len).rev() {
            let x = &tape.x[t * d..(t + 1) * d];
            let bv = &tape.b[t * n..(t + 1) * n];
            let cv = &tape.c[t * n..(t + 1) * n];
            let cl = &tape.c_logit[t * d..(t + 1) * d];
            let sl = &tape.s_logit[t * n..(t + 1) * n];
            let dyt = &dy[t * d..(t + 1) * d];
            dc_logit.iter_mut().for_each(|v| *v = T::zero());
            ds_logit.iter_mut().for_each(|v| *v = T::zero());
            db.iter_mut().for_each(|v| *v = T::zero());
            dcv.iter_mut().for_each(|v| *v = T::zero());
            let dxt = &mut dx[t * d..(t + 1) * d];

            for di in 0..d {
                let base = (t * d + di) * n;
                let hp = &tape.h_prev[base..base + n];
                let dts = &tape.delta[base..base + n];
                let abs = &tape.a_bar[base..base + n];
                let arow = &params.a.data[di * n..(di + 1) * n];
                let ga = &mut grads.a.data[di * n..(di + 1) * n];
                let dhrow = &mut dh[di * n..(di + 1) * n];
                let xd = x[di];
                let gy = dyt[di];
                for ni in 0..n {
                    h_t[ni] = abs[ni] * hp[ni] + dts[ni] * bv[ni] * xd;
                }
                let mut dxd = T::zero();
                for ni in 0..n {
                    dcv[ni] += gy * h_t[ni];
                    let g = dhrow[ni] + gy * cv[ni];
                    let dab = g * hp[ni];
                    let ddt = dab * abs[ni] * arow[ni] + g * bv[ni] * xd;
                    ga[ni] += dab * abs[ni] * dts[ni];
                    db[ni] += g * dts[ni] * xd;
                    dxd += g * dts[ni] * bv[ni];
                    dhrow[ni] = g * abs[ni];
                    let (gc, gs) = mode.grad(cl[di], sl[ni]);
                    dc_logit[di] += ddt * gc;
                    ds_logit[ni] += ddt * gs;
                }
                dxt[di] += dxd;
            }

            params.proj_c.backward_one(x, &dcv, &mut grads.proj_c, dxt);
            params.proj_b.backward_one(x, &db, &mut grads.proj_b, dxt);
            params
                .delta_state
                .backward_one(x, &ds_logit, &mut grads.delta_state, dxt);
            params
                .delta_channel
                .backward_one(x, &dc_logit, &mut grads.delta_channel, dxt);
            for (gb, &g) in grads.delta_bias.data.iter_mut().zip(&dc_logit) {
                *gb += g;
            }
        }
    }

    Ok(ScanInputGrads { dx, dh_init: dh })
}
