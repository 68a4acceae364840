//! Planar images and axis-aligned boxes.

use crate::error::{ensure, Result};

/// A `[channels, height, width]` image with `f32` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: &[f32]) -> Self {
        let mut img = Self::new(channels, height, width);
        for c in 0..channels {
            img.plane_mut(c).iter_mut().for_each(|v| *v = value[c]);
        }
        img
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == channels * height * width,
            "image buffer has {} samples, expected {channels}x{height}x{width}",
            data.len()
        );
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Per-channel mean.
    pub fn mean_pixel(&self) -> Vec<f32> {
        let n = (self.height * self.width).max(1) as f64;
        (0..self.channels)
            .map(|c| (self.plane(c).iter().map(|&v| v as f64).sum::<f64>() / n) as f32)
            .collect()
    }
}

/// Axis-aligned box in center format, pixels.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            x: 0.5 * (x0 + x1),
            y: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.x - 0.5 * self.w,
            self.y - 0.5 * self.h,
            self.x + 0.5 * self.w,
            self.y + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let a = self.corners();
        let b = other.corners();
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn giou(&self, other: &BBox) -> f64 {
        let a = self.corners();
        let b = other.corners();
        let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if hull <= 0.0 || union <= 0.0 {
            return 0.0;
        }
        inter / union - (hull - union) / hull
    }

    /// Clips the box to `[0, width] × [0, height]`, keeping at least `min_size` pixels.
    pub fn clip_to(&self, width: f64, height: f64, min_size: f64) -> BBox {
        let [mut x0, mut y0, mut x1, mut y1] = self.corners();
        x0 = x0.clamp(0.0, width - min_size);
        y0 = y0.clamp(0.0, height - min_size);
        x1 = x1.clamp(x0 + min_size, width);
        y1 = y1.clamp(y0 + min_size, height);
        BBox::from_corners(x0, y0, x1, y1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_and_giou_hand_geometry() {
        // [0,0,2,2] vs [1,1,3,3] in corner format.
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-12);
        assert!((a.giou(&b) - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-12);
        assert_eq!(a.giou(&a), 1.0);
    }

    #[test]
    fn far_disjoint_boxes_approach_minus_one() {
        let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let b = BBox::from_corners(1e6, 1e6, 1e6 + 1.0, 1e6 + 1.0);
        assert_eq!(a.iou(&b), 0.0);
        assert!(a.giou(&b) < -0.999_999);
    }

    #[test]
    fn clip_keeps_min_size() {
        let b = BBox::new(-10.0, 5.0, 4.0, 4.0).clip_to(20.0, 20.0, 1.0);
        assert!(b.w >= 1.0 && b.corners()[0] >= 0.0);
    }

    #[test]
    fn mean_pixel_per_channel() {
        let img = Image::from_vec(2, 1, 2, vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        assert_eq!(img.mean_pixel(), vec![2.0, 15.0]);
    }
}
