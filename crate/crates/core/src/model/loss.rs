//! Heatmap target, weighted focal loss and box regression terms.

use crate::error::{ensure, Result};
use crate::image::BBox;
use crate::scalar::Scalar;

use super::config::ModelConfig;
use super::head::{box_at, HeadGrads, HeadMaps};

/// Focal exponent on the prediction.
pub const FOCAL_ALPHA: f64 = 2.0;
/// Focal exponent on the negative-cell penalty reduction.
pub const FOCAL_BETA: f64 = 4.0;
pub const MIN_OVERLAP: f64 = 0.7;

/// CornerNet radius: the largest corner shift that keeps IoU ≥ `min_overlap`.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Heatmap standard deviation in grid cells for a box of `w × h` cells.
pub fn gaussian_sigma(w: f64, h: f64) -> f64 {
    let r = gaussian_radius(h, w, MIN_OVERLAP).floor().max(0.0);
    ((2.0 * r + 1.0) / 6.0).max(0.5)
}

/// Grid cell holding the box center, clamped to the grid.
pub fn peak_cell(bbox: &BBox, grid: (usize, usize), p: usize) -> (usize, usize) {
    let pf = p as f64;
    let clamp = |v: f64, n: usize| ((v / pf).floor().max(0.0) as usize).min(n - 1);
    (clamp(bbox.y, grid.0), clamp(bbox.x, grid.1))
}

/// `exp(-d² / 2σ²)` around cell `peak`, row-major.
pub fn gaussian_map(peak: (usize, usize), sigma: f64, grid: (usize, usize)) -> Vec<f64> {
    let denom = 2.0 * sigma * sigma;
    let mut out = Vec::with_capacity(grid.0 * grid.1);
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let d2 = (r as f64 - peak.0 as f64).powi(2) + (c as f64 - peak.1 as f64).powi(2);
            out.push((-d2 / denom).exp());
        }
    }
    out
}

/// Heatmap for `bbox` (search pixels); exactly 1 on the center cell.
pub fn gaussian_target(bbox: &BBox, grid: (usize, usize), p: usize) -> Vec<f64> {
    let sigma = gaussian_sigma(bbox.w / p as f64, bbox.h / p as f64);
    gaussian_map(peak_cell(bbox, grid, p), sigma, grid)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Focal loss summed over cells and divided by the positive count, together
/// with its gradient w.r.t. the logits.
pub fn focal_loss(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let num_pos = target.iter().filter(|&&t| t == 1.0).count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&a, &y) in logits.iter().zip(target) {
        let p = 1.0 / (1.0 + (-a).exp());
        let log_p = -softplus(-a);
        let log_q = -softplus(a);
        let q = 1.0 - p;
        if y == 1.0 {
            loss -= q.powf(FOCAL_ALPHA) * log_p;
            grad.push(2.0 * p * q * q * log_p - q * q * q);
        } else {
            let w = (1.0 - y).powf(FOCAL_BETA);
            loss -= w * p.powf(FOCAL_ALPHA) * log_q;
            grad.push(w * p * p * (p - 2.0 * q * log_q));
        }
    }
    (loss / num_pos, grad.into_iter().map(|g| g / num_pos).collect())
}

/// `1 - GIoU` for `(x0, y0, x1, y1)` boxes and its gradient w.r.t. `pred`.
pub fn giou_loss(pred: [f64; 4], gt: [f64; 4]) -> (f64, [f64; 4]) {
    let [a0, a1, a2, a3] = pred;
    let [b0, b1, b2, b3] = gt;
    let area_p = (a2 - a0) * (a3 - a1);
    let area_g = (b2 - b0) * (b3 - b1);
    let iw_raw = a2.min(b2) - a0.max(b0);
    let ih_raw = a3.min(b3) - a1.max(b1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_p + area_g - inter;
    let cw = a2.max(b2) - a0.min(b0);
    let ch = a3.max(b3) - a1.min(b1);
    let hull = cw * ch;
    let loss = 2.0 - inter / union - union / hull;

    let dl_di = -(union + inter) / (union * union) + 1.0 / hull;
    let dl_dap = inter / (union * union) - 1.0 / hull;
    let dl_dc = union / (hull * hull);

    let ind = |c: bool| if c { 1.0 } else { 0.0 };
    let x_live = ind(iw_raw > 0.0);
    let y_live = ind(ih_raw > 0.0);
    let di = [
        -ih * x_live * ind(a0 > b0),
        -iw * y_live * ind(a1 > b1),
        ih * x_live * ind(a2 < b2),
        iw * y_live * ind(a3 < b3),
    ];
    let dap = [-(a3 - a1), -(a2 - a0), a3 - a1, a2 - a0];
    let dc = [
        -ch * ind(a0 < b0),
        -cw * ind(a1 < b1),
        ch * ind(a2 > b2),
        cw * ind(a3 > b3),
    ];
    let mut g = [0.0; 4];
    for i in 0..4 {
        g[i] = dl_di * di[i] + dl_dap * dap[i] + dl_dc * dc[i];
    }
    (loss, g)
}

/// Loss terms before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
}

fn normalized_corners(b: &BBox, hs: f64, ws: f64) -> [f64; 4] {
    let [x0, y0, x1, y1] = b.corners();
    [x0 / ws, y0 / hs, x1 / ws, y1 / hs]
}

/// Full objective for one sample. The box terms read the prediction at the
/// ground-truth peak cell; `gt` is in search-region pixels.
pub fn training_loss<T: Scalar>(
    maps: &HeadMaps<T>,
    gt: &BBox,
    cfg: &ModelConfig,
) -> Result<(LossBreakdown, HeadGrads<T>)> {
    ensure!(gt.is_valid(), "degenerate ground-truth box {gt:?}");
    let grid = maps.grid;
    let target = gaussian_target(gt, grid, cfg.patch);
    let logits: Vec<f64> = maps.cls_logit.iter().map(|v| v.as_f64()).collect();
    let (focal, d_cls) = focal_loss(&logits, &target);

    let (row, col) = peak_cell(gt, grid, cfg.patch);
    let idx = row * grid.1 + col;
    let (hs, ws) = (cfg.search_size.0 as f64, cfg.search_size.1 as f64);
    let (ew, eh) = if cfg.swap_size_extent { (ws, hs) } else { (hs, ws) };
    let pred = normalized_corners(&box_at(maps, idx, cfg), hs, ws);
    let truth = normalized_corners(gt, hs, ws);

    let mut l1 = 0.0;
    let mut d_l1 = [0.0; 4];
    for i in 0..4 {
        let diff = pred[i] - truth[i];
        l1 += diff.abs() / 4.0;
        d_l1[i] = diff.signum() * 0.25 * if diff == 0.0 { 0.0 } else { 1.0 };
    }
    let (giou, d_giou) = giou_loss(pred, truth);

    let mut d_corner = [0.0; 4];
    for i in 0..4 {
        d_corner[i] = cfg.lambda_l1 * d_l1[i] + cfg.lambda_giou * d_giou[i];
    }
    let p = cfg.patch as f64;
    let d_ox = (d_corner[0] + d_corner[2]) * p / ws;
    let d_oy = (d_corner[1] + d_corner[3]) * p / hs;
    let d_sw = (d_corner[2] - d_corner[0]) * ew / (2.0 * ws);
    let d_sh = (d_corner[3] - d_corner[1]) * eh / (2.0 * hs);

    let cells = grid.0 * grid.1;
    let mut grads = HeadGrads::zeros(cells);
    grads.cls = d_cls.into_iter().map(T::c).collect();
    let sig_grad = |v: T| v.as_f64() * (1.0 - v.as_f64());
    grads.offset[2 * idx] = T::c(d_ox * sig_grad(maps.offset[2 * idx]));
    grads.offset[2 * idx + 1] = T::c(d_oy * sig_grad(maps.offset[2 * idx + 1]));
    grads.size[2 * idx] = T::c(d_sw * sig_grad(maps.size[2 * idx]));
    grads.size[2 * idx + 1] = T::c(d_sh * sig_grad(maps.size[2 * idx + 1]));

    let total = focal + cfg.lambda_l1 * l1 + cfg.lambda_giou * giou;
    Ok((LossBreakdown { total, focal, l1, giou }, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn giou_of(a: [f64; 4], b: [f64; 4]) -> f64 {
        1.0 - giou_loss(a, b).0
    }

    #[test]
    fn gaussian_center_and_sigma_ring() {
        let b = BBox::new(8.0 * 16.0 + 3.0, 8.0 * 16.0 + 5.0, 64.0, 48.0);
        assert_eq!(gaussian_target(&b, (16, 16), 16)[8 * 16 + 8], 1.0);
        let m = gaussian_map((3, 3), 2.0, (8, 8));
        assert!((m[3 * 8 + 5] - 0.606_530_659_712_633).abs() < 1e-15);
        assert!((m[8 + 3] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn tiny_box_sigma_hits_the_floor() {
        assert_eq!(gaussian_sigma(0.5, 0.5), 0.5);
        // One-cell distance with sigma 0.5 gives exp(-2).
        let t = gaussian_target(&BBox::new(4.0, 4.0, 2.0, 2.0), (4, 4), 8);
        assert!((t[1] - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_is_monotone_in_distance() {
        let b = BBox::new(100.0, 60.0, 90.0, 40.0);
        let grid = (16, 16);
        let t = gaussian_target(&b, grid, 16);
        let (pr, pc) = peak_cell(&b, grid, 16);
        let mut pairs: Vec<(f64, f64)> = (0..256)
            .map(|i| {
                let d = ((i / 16) as f64 - pr as f64).hypot((i % 16) as f64 - pc as f64);
                (d, t[i])
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-15);
        }
    }

    #[test]
    fn radius_matches_reference_values() {
        // Values produced by the published CornerNet helper.
        assert!((gaussian_radius(10.0, 10.0, 0.7) - 2.733_200_530_681_511).abs() < 1e-12);
        assert!((gaussian_radius(4.0, 8.0, 0.7) - 1.471_170_143_402_453).abs() < 1e-12);
    }

    #[test]
    fn giou_hand_geometry_and_limits() {
        let g = giou_of([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]);
        assert!((g - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-12);
        let b = [0.1, 0.2, 0.5, 0.6];
        assert!(giou_loss(b, b).0.abs() < 1e-15);
        let far = giou_loss([0.0, 0.0, 1.0, 1.0], [1e6, 1e6, 1e6 + 1.0, 1e6 + 1.0]).0;
        assert!(far > 1.999_999 && far <= 2.0);
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let cases = [
            ([0.1, 0.2, 0.5, 0.7], [0.2, 0.1, 0.6, 0.5]),
            ([0.0, 0.0, 0.2, 0.2], [0.5, 0.6, 0.9, 0.8]),
            ([0.3, 0.3, 0.4, 0.45], [0.1, 0.1, 0.9, 0.9]),
        ];
        for (pred, gt) in cases {
            let (_, g) = giou_loss(pred, gt);
            for i in 0..4 {
                let eps = 1e-6;
                let mut up = pred;
                up[i] += eps;
                let mut down = pred;
                down[i] -= eps;
                let num = (giou_loss(up, gt).0 - giou_loss(down, gt).0) / (2.0 * eps);
                assert!((num - g[i]).abs() < 1e-6, "coord {i}: {num} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let logits = [-3.0, -0.5, 0.0, 0.7, 2.5, 6.0];
        let target = [0.0, 0.3, 1.0, 0.9, 0.1, 1.0];
        let (_, g) = focal_loss(&logits, &target);
        for i in 0..logits.len() {
            let eps = 1e-6;
            let mut up = logits;
            up[i] += eps;
            let mut down = logits;
            down[i] -= eps;
            let num = (focal_loss(&up, &target).0 - focal_loss(&down, &target).0) / (2.0 * eps);
            assert!((num - g[i]).abs() < 1e-7, "cell {i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn focal_is_stable_for_extreme_logits() {
        let (l, g) = focal_loss(&[-800.0, 800.0], &[0.0, 1.0]);
        assert!(l.is_finite() && l.abs() < 1e-300);
        assert!(g.iter().all(|v| v.is_finite()));
        let (l, _) = focal_loss(&[800.0], &[0.0]);
        assert!(l.is_finite() && l > 100.0);
    }

    fn perfect_maps(gt: &BBox, cfg: &ModelConfig, confidence: f64) -> HeadMaps<f64> {
        let grid = cfg.search_grid();
        let cells = grid.0 * grid.1;
        let (r, c) = peak_cell(gt, grid, cfg.patch);
        let idx = r * grid.1 + c;
        let mut cls = vec![1.0 / (1.0 + confidence.exp()); cells];
        cls[idx] = 1.0 / (1.0 + (-confidence).exp());
        let mut offset = vec![0.5; 2 * cells];
        let mut size = vec![0.5; 2 * cells];
        let p = cfg.patch as f64;
        offset[2 * idx] = gt.x / p - c as f64;
        offset[2 * idx + 1] = gt.y / p - r as f64;
        size[2 * idx] = gt.w / cfg.search_size.0 as f64;
        size[2 * idx + 1] = gt.h / cfg.search_size.1 as f64;
        let mut m = HeadMaps::from_probabilities(grid, cls, offset, size).unwrap();
        m.cls_logit = m.cls_logit.iter().map(|&v| v.signum() * confidence).collect();
        m
    }

    #[test]
    fn matching_box_has_zero_box_terms() {
        let cfg = ModelConfig::tiny();
        let gt = BBox::new(13.0, 17.0, 8.0, 6.0);
        let (l, _) = training_loss(&perfect_maps(&gt, &cfg, 4.0), &gt, &cfg).unwrap();
        assert!(l.l1 < 1e-12 && l.giou < 1e-12);
        assert!(l.focal > 0.0);
    }

    #[test]
    fn perfect_prediction_drives_loss_to_zero() {
        let mut cfg = ModelConfig::tiny();
        cfg.patch = 16;
        cfg.search_size = (256, 256);
        // Negatives sit at p ≈ e^-60, so their weighted terms vanish.
        let gt = BBox::new(40.0, 40.0, 10.0, 10.0);
        let (l, _) = training_loss(&perfect_maps(&gt, &cfg, 60.0), &gt, &cfg).unwrap();
        assert!(l.total < 1e-12, "{l:?}");
        assert!(l.focal >= 0.0 && l.giou >= 0.0);
    }

    #[test]
    fn degenerate_gt_is_rejected() {
        let cfg = ModelConfig::tiny();
        let m = perfect_maps(&BBox::new(5.0, 5.0, 2.0, 2.0), &cfg, 1.0);
        assert!(training_loss(&m, &BBox::new(5.0, 5.0, 0.0, 3.0), &cfg).is_err());
    }

    #[test]
    fn encode_decode_recovers_box() {
        let cfg = ModelConfig::tiny();
        let gt = BBox::new(21.3, 9.7, 11.0, 5.5);
        let b = super::super::head::decode_box(&perfect_maps(&gt, &cfg, 3.0), &cfg);
        for (a, e) in [(b.x, gt.x), (b.y, gt.y), (b.w, gt.w), (b.h, gt.h)] {
            assert!((a - e).abs() < 0.5);
        }
    }
}
