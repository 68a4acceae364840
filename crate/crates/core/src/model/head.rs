//! Three-branch convolutional box head and box decoding.

use rand::Rng;

use crate::block::{rms_norm_backward, rms_norm_with_scale};
use crate::error::{ensure, Result};
use crate::image::BBox;
use crate::nn::{join, Linear, ParamSet, Tensor};
use crate::scalar::{sigmoid, silu, silu_grad, Scalar};

use super::config::ModelConfig;

/// Logit of the initial classification prior, `-ln((1 - 0.1) / 0.1)`.
pub const CLS_PRIOR_BIAS: f64 = -2.19;

/// 3×3 "same" convolution over a channels-last grid, stored as a linear map
/// over the `(ky, kx, channel)` neighbourhood.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3<T> {
    pub map: Linear<T>,
}

impl<T: Scalar> Conv3x3<T> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Conv3x3 {
            map: Linear::zeros(9 * in_ch, out_ch, true),
        }
    }

    pub fn init(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Conv3x3 {
            map: Linear::init(9 * in_ch, out_ch, true, 1.0, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.map.in_dim / 9
    }

    pub fn forward(&self, x: &[T], grid: (usize, usize)) -> Vec<T> {
        self.map.forward(&im2col(x, grid, self.in_channels()))
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&self, x: &[T], grid: (usize, usize), dy: &[T], grad: &mut Conv3x3<T>) -> Vec<T> {
        let cols = im2col(x, grid, self.in_channels());
        let d_cols = self.map.backward(&cols, dy, &mut grad.map);
        col2im(&d_cols, grid, self.in_channels())
    }
}

impl<T: Scalar> ParamSet<T> for Conv3x3<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.map.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.map.visit_mut(prefix, f);
    }
}

fn im2col<T: Scalar>(x: &[T], (gh, gw): (usize, usize), ch: usize) -> Vec<T> {
    let mut cols = vec![T::zero(); gh * gw * 9 * ch];
    for r in 0..gh {
        for c in 0..gw {
            let dst = &mut cols[(r * gw + c) * 9 * ch..(r * gw + c + 1) * 9 * ch];
            for ky in 0..3 {
                let y = r as isize + ky as isize - 1;
                if y < 0 || y >= gh as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = c as isize + kx as isize - 1;
                    if xx < 0 || xx >= gw as isize {
                        continue;
                    }
                    let src = (y as usize * gw + xx as usize) * ch;
                    let k = ky * 3 + kx;
                    dst[k * ch..(k + 1) * ch].copy_from_slice(&x[src..src + ch]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], (gh, gw): (usize, usize), ch: usize) -> Vec<T> {
    let mut x = vec![T::zero(); gh * gw * ch];
    for r in 0..gh {
        for c in 0..gw {
            let src = &cols[(r * gw + c) * 9 * ch..(r * gw + c + 1) * 9 * ch];
            for ky in 0..3 {
                let y = r as isize + ky as isize - 1;
                if y < 0 || y >= gh as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = c as isize + kx as isize - 1;
                    if xx < 0 || xx >= gw as isize {
                        continue;
                    }
                    let dst = (y as usize * gw + xx as usize) * ch;
                    let k = ky * 3 + kx;
                    for i in 0..ch {
                        x[dst + i] += src[k * ch + i];
                    }
                }
            }
        }
    }
    x
}

/// Four 3×3 conv + SiLU layers followed by a 1×1 projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T> {
    pub convs: Vec<Conv3x3<T>>,
    pub out: Linear<T>,
}

impl<T: Scalar> Branch<T> {
    fn zeros(widths: &[usize; 5], out_ch: usize) -> Self {
        Branch {
            convs: widths.windows(2).map(|w| Conv3x3::zeros(w[0], w[1])).collect(),
            out: Linear::zeros(widths[4], out_ch, true),
        }
    }

    fn init(widths: &[usize; 5], out_ch: usize, rng: &mut impl Rng) -> Self {
        Branch {
            convs: widths.windows(2).map(|w| Conv3x3::init(w[0], w[1], rng)).collect(),
            out: Linear::init(widths[4], out_ch, true, 1.0, rng),
        }
    }
}

impl<T: Scalar> ParamSet<T> for Branch<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    /// RMSNorm applied to the search features before the branches.
    pub norm: Tensor<T>,
    pub cls: Branch<T>,
    pub offset: Branch<T>,
    pub size: Branch<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let w = cfg.head_channels();
        HeadParams {
            norm: Tensor::filled(&[cfg.d_model], T::one()),
            cls: Branch::zeros(&w, 1),
            offset: Branch::zeros(&w, 2),
            size: Branch::zeros(&w, 2),
        }
    }

    /// Random init with the classification bias at [`CLS_PRIOR_BIAS`].
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let w = cfg.head_channels();
        let mut h = HeadParams {
            norm: Tensor::filled(&[cfg.d_model], T::one()),
            cls: Branch::init(&w, 1, rng),
            offset: Branch::init(&w, 2, rng),
            size: Branch::init(&w, 2, rng),
        };
        h.cls.out.bias = Some(vec![T::c(CLS_PRIOR_BIAS)]);
        h
    }
}

impl<T: Scalar> ParamSet<T> for HeadParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.cls.visit(&join(prefix, "cls"), f);
        self.offset.visit(&join(prefix, "offset"), f);
        self.size.visit(&join(prefix, "size"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.cls.visit_mut(&join(prefix, "cls"), f);
        self.offset.visit_mut(&join(prefix, "offset"), f);
        self.size.visit_mut(&join(prefix, "size"), f);
    }
}

/// Head outputs on the search grid, row-major cells. `offset` and `size`
/// interleave their two channels per cell; the `*_logit` fields hold the
/// pre-sigmoid values.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps<T> {
    pub grid: (usize, usize),
    pub cls: Vec<T>,
    pub offset: Vec<T>,
    pub size: Vec<T>,
    pub cls_logit: Vec<T>,
    pub offset_logit: Vec<T>,
    pub size_logit: Vec<T>,
}

impl<T: Scalar> HeadMaps<T> {
    /// Builds maps directly from sigmoid-domain values.
    pub fn from_probabilities(grid: (usize, usize), cls: Vec<T>, offset: Vec<T>, size: Vec<T>) -> Result<Self> {
        let cells = grid.0 * grid.1;
        ensure!(
            cls.len() == cells && offset.len() == 2 * cells && size.len() == 2 * cells,
            "map sizes do not match a {}x{} grid",
            grid.0,
            grid.1
        );
        let logit = |v: &Vec<T>| v.iter().map(|&p| (p / (T::one() - p)).ln()).collect();
        Ok(HeadMaps {
            grid,
            cls_logit: logit(&cls),
            offset_logit: logit(&offset),
            size_logit: logit(&size),
            cls,
            offset,
            size,
        })
    }

    /// Row-major index of the first maximum of `cls`.
    pub fn peak(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.cls.iter().enumerate() {
            if v > self.cls[best] {
                best = i;
            }
        }
        best
    }
}

/// Gradients w.r.t. the three maps' logits.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads<T> {
    pub cls: Vec<T>,
    pub offset: Vec<T>,
    pub size: Vec<T>,
}

impl<T: Scalar> HeadGrads<T> {
    pub fn zeros(cells: usize) -> Self {
        HeadGrads {
            cls: vec![T::zero(); cells],
            offset: vec![T::zero(); 2 * cells],
            size: vec![T::zero(); 2 * cells],
        }
    }
}

#[derive(Clone, Debug)]
struct BranchTape<T> {
    /// Input of each conv layer.
    inputs: Vec<Vec<T>>,
    /// Pre-activation of each conv layer.
    pre: Vec<Vec<T>>,
    last: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct HeadTape<T> {
    features: Vec<T>,
    scales: Vec<T>,
    branches: [BranchTape<T>; 3],
}

fn branch_forward<T: Scalar>(b: &Branch<T>, x: &[T], grid: (usize, usize)) -> (Vec<T>, BranchTape<T>) {
    let mut inputs = Vec::with_capacity(b.convs.len());
    let mut pre = Vec::with_capacity(b.convs.len());
    let mut h = x.to_vec();
    for conv in &b.convs {
        let z = conv.forward(&h, grid);
        inputs.push(std::mem::replace(&mut h, z.iter().map(|&v| silu(v)).collect()));
        pre.push(z);
    }
    let logits = b.out.forward(&h);
    (logits, BranchTape { inputs, pre, last: h })
}

fn branch_backward<T: Scalar>(
    b: &Branch<T>,
    tape: &BranchTape<T>,
    grid: (usize, usize),
    d_logits: &[T],
    grad: &mut Branch<T>,
) -> Vec<T> {
    let mut d = b.out.backward(&tape.last, d_logits, &mut grad.out);
    for i in (0..b.convs.len()).rev() {
        for (g, &z) in d.iter_mut().zip(&tape.pre[i]) {
            *g *= silu_grad(z);
        }
        d = b.convs[i].backward(&tape.inputs[i], grid, &d, &mut grad.convs[i]);
    }
    d
}

fn head_impl<T: Scalar>(features: &[T], cfg: &ModelConfig, p: &HeadParams<T>) -> Result<(HeadMaps<T>, HeadTape<T>)> {
    let grid = cfg.search_grid();
    ensure!(
        features.len() == cfg.search_tokens() * cfg.d_model,
        "head expects {} search tokens of width {}",
        cfg.search_tokens(),
        cfg.d_model
    );
    let (normed, scales) = rms_norm_with_scale(features, &p.norm.data);
    let (cls_logit, tc) = branch_forward(&p.cls, &normed, grid);
    let (offset_logit, to) = branch_forward(&p.offset, &normed, grid);
    let (size_logit, ts) = branch_forward(&p.size, &normed, grid);
    let sig = |v: &Vec<T>| v.iter().map(|&x| sigmoid(x)).collect();
    let maps = HeadMaps {
        grid,
        cls: sig(&cls_logit),
        offset: sig(&offset_logit),
        size: sig(&size_logit),
        cls_logit,
        offset_logit,
        size_logit,
    };
    let tape = HeadTape {
        features: features.to_vec(),
        scales,
        branches: [tc, to, ts],
    };
    Ok((maps, tape))
}

/// Maps `[L_s, D_model]` search features to the three score maps.
pub fn head_forward<T: Scalar>(features: &[T], cfg: &ModelConfig, p: &HeadParams<T>) -> Result<HeadMaps<T>> {
    head_impl(features, cfg, p).map(|(m, _)| m)
}

pub fn head_forward_taped<T: Scalar>(
    features: &[T],
    cfg: &ModelConfig,
    p: &HeadParams<T>,
) -> Result<(HeadMaps<T>, HeadTape<T>)> {
    head_impl(features, cfg, p)
}

/// Reverse pass from logit gradients; returns the feature gradient.
pub fn head_backward<T: Scalar>(
    tape: &HeadTape<T>,
    cfg: &ModelConfig,
    p: &HeadParams<T>,
    d: &HeadGrads<T>,
    grads: &mut HeadParams<T>,
) -> Vec<T> {
    let grid = cfg.search_grid();
    let [tc, to, ts] = &tape.branches;
    let mut d_normed = branch_backward(&p.cls, tc, grid, &d.cls, &mut grads.cls);
    for (branch, bt, dl, g) in [
        (&p.offset, to, &d.offset, &mut grads.offset),
        (&p.size, ts, &d.size, &mut grads.size),
    ] {
        for (a, b) in d_normed.iter_mut().zip(branch_backward(branch, bt, grid, dl, g)) {
            *a += b;
        }
    }
    rms_norm_backward(
        &tape.features,
        &tape.scales,
        &p.norm.data,
        &d_normed,
        &mut grads.norm.data,
    )
}

/// The box read off cell `index` of the maps, in search-region pixels.
pub fn box_at<T: Scalar>(maps: &HeadMaps<T>, index: usize, cfg: &ModelConfig) -> BBox {
    let gw = maps.grid.1;
    let (row, col) = (index / gw, index % gw);
    let p = cfg.patch as f64;
    let (hs, ws) = (cfg.search_size.0 as f64, cfg.search_size.1 as f64);
    let (ew, eh) = if cfg.swap_size_extent { (ws, hs) } else { (hs, ws) };
    BBox::new(
        (col as f64 + maps.offset[2 * index].as_f64()) * p,
        (row as f64 + maps.offset[2 * index + 1].as_f64()) * p,
        maps.size[2 * index].as_f64() * ew,
        maps.size[2 * index + 1].as_f64() * eh,
    )
}

/// Box at the classification peak; ties go to the smallest row-major index.
pub fn decode_box<T: Scalar>(maps: &HeadMaps<T>, cfg: &ModelConfig) -> BBox {
    box_at(maps, maps.peak(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{flatten, load_flat, uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geometry(p: usize, side: usize) -> ModelConfig {
        let mut c = ModelConfig::tiny();
        c.patch = p;
        c.search_size = (side, side);
        c
    }

    fn maps_with(grid: (usize, usize), peak: usize, offset: (f64, f64), size: (f64, f64)) -> HeadMaps<f64> {
        let cells = grid.0 * grid.1;
        let mut cls = vec![0.1; cells];
        cls[peak] = 0.9;
        let mut o = vec![0.3; 2 * cells];
        let mut s = vec![0.2; 2 * cells];
        o[2 * peak] = offset.0;
        o[2 * peak + 1] = offset.1;
        s[2 * peak] = size.0;
        s[2 * peak + 1] = size.1;
        HeadMaps::from_probabilities(grid, cls, o, s).unwrap()
    }

    #[test]
    fn decode_reference_example() {
        let cfg = geometry(16, 256);
        let maps = maps_with((16, 16), 4 * 16 + 3, (0.0, 0.0), (0.5, 0.25));
        assert_eq!(decode_box(&maps, &cfg), BBox::new(48.0, 64.0, 128.0, 64.0));
    }

    #[test]
    fn decode_half_offset_at_origin() {
        let cfg = geometry(16, 256);
        let b = decode_box(&maps_with((16, 16), 0, (0.5, 0.5), (0.1, 0.1)), &cfg);
        assert_eq!((b.x, b.y), (8.0, 8.0));
    }

    #[test]
    fn uniform_cls_picks_first_cell() {
        let m = HeadMaps::from_probabilities((4, 4), vec![0.5; 16], vec![0.5; 32], vec![0.5; 32]).unwrap();
        assert_eq!(m.peak(), 0);
    }

    #[test]
    fn swapped_extent_uses_matching_side() {
        let mut cfg = geometry(8, 64);
        cfg.search_size = (64, 128);
        let maps = maps_with((8, 16), 0, (0.0, 0.0), (0.5, 0.5));
        let b = decode_box(&maps, &cfg);
        assert_eq!((b.w, b.h), (32.0, 64.0));
        cfg.swap_size_extent = true;
        let b = decode_box(&maps, &cfg);
        assert_eq!((b.w, b.h), (64.0, 32.0));
    }

    #[test]
    fn zero_final_layers_give_half_cls() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut h = HeadParams::<f64>::init(&cfg, &mut rng);
        for b in [&mut h.cls, &mut h.offset, &mut h.size] {
            b.out = Linear::zeros(b.out.in_dim, b.out.out_dim, true);
        }
        let feats = vec![0.0; cfg.search_tokens() * cfg.d_model];
        let maps = head_forward(&feats, &cfg, &h).unwrap();
        assert_eq!(maps.grid, (8, 8));
        assert!(maps.cls.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn reference_geometry_grid() {
        let cfg = ModelConfig::s256();
        assert_eq!(cfg.search_grid(), (16, 16));
    }

    #[test]
    fn outputs_are_sigmoid_bounded() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = HeadParams::<f64>::init(&cfg, &mut rng);
        let feats: Vec<f64> = uniform(&mut rng, cfg.search_tokens() * cfg.d_model, 3.0);
        let m = head_forward(&feats, &cfg, &h).unwrap();
        for v in m.cls.iter().chain(&m.offset).chain(&m.size) {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn im2col_roundtrip_is_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = (3, 4);
        let x: Vec<f64> = uniform(&mut rng, 12 * 2, 1.0);
        let c: Vec<f64> = uniform(&mut rng, 12 * 18, 1.0);
        let lhs: f64 = im2col(&x, grid, 2).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, grid, 2)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = HeadParams::<f64>::init(&cfg, &mut rng);
        let feats: Vec<f64> = uniform(&mut rng, cfg.search_tokens() * cfg.d_model, 1.0);
        let cells = cfg.search_tokens();
        let w = HeadGrads {
            cls: uniform(&mut rng, cells, 1.0),
            offset: uniform(&mut rng, 2 * cells, 1.0),
            size: uniform(&mut rng, 2 * cells, 1.0),
        };
        let loss = |hp: &HeadParams<f64>, f: &[f64]| {
            let m = head_forward(f, &cfg, hp).unwrap();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            dot(&m.cls_logit, &w.cls) + dot(&m.offset_logit, &w.offset) + dot(&m.size_logit, &w.size)
        };
        let (_, tape) = head_forward_taped(&feats, &cfg, &h).unwrap();
        let mut g = HeadParams::zeros(&cfg);
        crate::nn::fill(&mut g, 0.0);
        let d_feat = head_backward(&tape, &cfg, &h, &w, &mut g);

        let eps = 1e-5;
        let flat = flatten(&h);
        let gflat = flatten(&g);
        for i in (0..flat.len()).step_by(37) {
            let mut hp = h.clone();
            let mut v = flat.clone();
            v[i] += eps;
            load_flat(&mut hp, &v);
            let up = loss(&hp, &feats);
            v[i] -= 2.0 * eps;
            load_flat(&mut hp, &v);
            let down = loss(&hp, &feats);
            let num = (up - down) / (2.0 * eps);
            let err = (num - gflat[i]).abs() / num.abs().max(gflat[i].abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: analytic {} numeric {num}", gflat[i]);
        }
        for i in (0..feats.len()).step_by(13) {
            let mut f = feats.clone();
            f[i] += eps;
            let up = loss(&h, &f);
            f[i] -= 2.0 * eps;
            let down = loss(&h, &f);
            let num = (up - down) / (2.0 * eps);
            let err = (num - d_feat[i]).abs() / num.abs().max(d_feat[i].abs()).max(1e-4);
            assert!(err < 1e-5, "feature {i}: analytic {} numeric {num}", d_feat[i]);
        }
    }
}
