//! Square context crops around a box and the map back to image pixels.

use crate::image::{BBox, Image};

/// `image = origin + crop · scale`, per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    /// Image pixels per crop pixel.
    pub scale: f64,
}

impl CropTransform {
    pub fn point_to_image(&self, x: f64, y: f64) -> (f64, f64) {
        (self.origin_x + x * self.scale, self.origin_y + y * self.scale)
    }

    pub fn point_to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin_x) / self.scale, (y - self.origin_y) / self.scale)
    }

    pub fn box_to_image(&self, b: &BBox) -> BBox {
        let (x, y) = self.point_to_image(b.x, b.y);
        BBox::new(x, y, b.w * self.scale, b.h * self.scale)
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let (x, y) = self.point_to_crop(b.x, b.y);
        BBox::new(x, y, b.w / self.scale, b.h / self.scale)
    }
}

/// Moves a box that misses the image until it overlaps by one pixel.
pub fn keep_overlap(b: &BBox, width: usize, height: usize) -> BBox {
    let (w, h) = (width as f64, height as f64);
    let x = b.x.clamp(1.0 - b.w / 2.0, w - 1.0 + b.w / 2.0);
    let y = b.y.clamp(1.0 - b.h / 2.0, h - 1.0 + b.h / 2.0);
    BBox::new(x, y, b.w, b.h)
}

/// Crops a square of `factor × area(box)` centered on the box and resamples
/// it bilinearly to `out` (rows, cols). Samples outside the image take the
/// per-channel mean.
pub fn crop_region(image: &Image, bbox: &BBox, factor: f64, out: (usize, usize)) -> (Image, CropTransform) {
    let b = keep_overlap(bbox, image.width, image.height);
    let side = (factor * b.w * b.h).sqrt().max(1.0);
    let (oh, ow) = out;
    let t = CropTransform {
        origin_x: b.x - side / 2.0,
        origin_y: b.y - side / 2.0,
        scale: side / ow.max(oh) as f64,
    };
    let mean = image.mean_pixel();
    let mut crop = Image::new(image.channels, oh, ow);
    let (iw, ih) = (image.width as f64, image.height as f64);
    for r in 0..oh {
        for c in 0..ow {
            let (u, v) = t.point_to_image(c as f64 + 0.5, r as f64 + 0.5);
            if u < 0.0 || v < 0.0 || u > iw || v > ih {
                for ch in 0..image.channels {
                    crop.set(ch, r, c, mean[ch]);
                }
                continue;
            }
            // Pixel centers sit at half-integers.
            let fx = (u - 0.5).clamp(0.0, iw - 1.0);
            let fy = (v - 0.5).clamp(0.0, ih - 1.0);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(image.width - 1), (y0 + 1).min(image.height - 1));
            let (ax, ay) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
            for ch in 0..image.channels {
                let top = image.get(ch, y0, x0) * (1.0 - ax) + image.get(ch, y0, x1) * ax;
                let bot = image.get(ch, y1, x0) * (1.0 - ax) + image.get(ch, y1, x1) * ax;
                crop.set(ch, r, c, top * (1.0 - ay) + bot * ay);
            }
        }
    }
    (crop, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Image {
        let mut img = Image::new(1, h, w);
        for y in 0..h {
            for x in 0..w {
                img.set(0, y, x, x as f32 + 100.0 * y as f32);
            }
        }
        img
    }

    #[test]
    fn side_is_root_factor_times_box_scale() {
        let img = Image::new(3, 100, 100);
        let b = BBox::new(50.0, 50.0, 10.0, 40.0);
        let (_, t) = crop_region(&img, &b, 4.0, (40, 40));
        assert!((t.scale * 40.0 - 2.0 * (10.0f64 * 40.0).sqrt()).abs() < 1e-12);
        assert_eq!((t.origin_x, t.origin_y), (30.0, 30.0));
    }

    #[test]
    fn corner_box_is_padded_on_two_sides() {
        let img = Image::filled(1, 50, 50, &[0.75]);
        let mut img = img;
        img.set(0, 0, 0, 0.0);
        let mean = img.mean_pixel()[0];
        let (crop, _) = crop_region(&img, &BBox::new(2.0, 2.0, 4.0, 4.0), 16.0, (16, 16));
        assert_eq!(crop.get(0, 0, 0), mean);
        assert_eq!(crop.get(0, 0, 15), mean);
        assert_eq!(crop.get(0, 15, 0), mean);
        assert_ne!(crop.get(0, 15, 15), mean);
    }

    #[test]
    fn unit_scale_crop_copies_pixels() {
        let img = ramp(20, 20);
        let (crop, t) = crop_region(&img, &BBox::new(10.0, 10.0, 4.0, 4.0), 4.0, (8, 8));
        assert_eq!(t.scale, 1.0);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(crop.get(0, r, c), img.get(0, r + 6, c + 6));
            }
        }
    }

    #[test]
    fn box_outside_image_keeps_one_pixel() {
        let b = keep_overlap(&BBox::new(-50.0, 300.0, 10.0, 10.0), 100, 100);
        assert!((b.intersection(&BBox::new(50.0, 50.0, 100.0, 100.0)) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn point_roundtrip(x in -50.0f64..150.0, y in -50.0f64..150.0,
                           cx in 0.0f64..100.0, cy in 0.0f64..100.0,
                           w in 1.0f64..60.0, h in 1.0f64..60.0) {
            let img = Image::new(1, 100, 100);
            let (_, t) = crop_region(&img, &BBox::new(cx, cy, w, h), 16.0, (8, 8));
            let (ix, iy) = t.point_to_image(x, y);
            let (bx, by) = t.point_to_crop(ix, iy);
            prop_assert!((bx - x).abs() < 0.5 && (by - y).abs() < 0.5);
            let b = BBox::new(x, y, w, h);
            let back = t.box_to_crop(&t.box_to_image(&b));
            prop_assert!((back.x - b.x).abs() < 0.5 && (back.w - b.w).abs() < 0.5);
        }
    }
}
