//! Synthetic tracking sequences: a striped target moving over a smooth
//! background among look-alike distractors, with optional occluders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::image::{BBox, Image};
use crate::model::{ModelConfig, Sample};
use crate::tracker::crop::crop_region;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    /// Range of the target's side lengths, pixels.
    pub object_size: (f64, f64),
    /// Range of the per-frame speed, pixels.
    pub speed: (f64, f64),
    /// Direction of motion in radians; random when absent.
    pub heading: Option<f64>,
    /// Standard deviation of the per-frame position jitter, pixels.
    pub jitter: f64,
    pub distractors: usize,
    /// 0 gives unrelated distractor colors, 1 gives copies of the target.
    pub similarity: f64,
    /// Per-frame chance that an occluder appears over the target.
    pub occluder_prob: f64,
    pub occluder_frames: usize,
    pub length: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_size: (128, 128),
            object_size: (14.0, 24.0),
            speed: (1.0, 3.0),
            heading: None,
            jitter: 0.5,
            distractors: 2,
            similarity: 0.3,
            occluder_prob: 0.0,
            occluder_frames: 6,
            length: 100,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (lo, hi) = self.object_size;
        ensure!(lo > 0.0 && lo <= hi, "object size range {lo}..{hi} is empty");
        ensure!(
            hi * 2.0 < h.min(w) as f64,
            "objects up to {hi} px do not fit a {h}x{w} image"
        );
        ensure!(self.speed.0 >= 0.0 && self.speed.0 <= self.speed.1, "bad speed range");
        ensure!(self.jitter >= 0.0, "jitter must be non-negative");
        ensure!((0.0..=1.0).contains(&self.similarity), "similarity must lie in [0, 1]");
        ensure!(
            (0.0..=1.0).contains(&self.occluder_prob),
            "occluder probability must lie in [0, 1]"
        );
        ensure!(self.length >= 1, "sequences need at least one frame");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Look {
    colors: [[f32; 3]; 2],
    /// Stripe direction (unit vector) and period in pixels.
    dir: (f64, f64),
    period: f64,
}

impl Look {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        Look {
            colors: [random_color(rng), random_color(rng)],
            dir: (theta.cos(), theta.sin()),
            period: rng.gen_range(4.0..9.0),
        }
    }

    fn blend(&self, other: &Look, t: f64) -> Look {
        let mix = |a: f32, b: f32| (t as f32) * a + (1.0 - t as f32) * b;
        let mut colors = other.colors;
        for k in 0..2 {
            for c in 0..3 {
                colors[k][c] = mix(self.colors[k][c], other.colors[k][c]);
            }
        }
        Look {
            colors,
            dir: if t >= 0.5 { self.dir } else { other.dir },
            period: t * self.period + (1.0 - t) * other.period,
        }
    }

    fn color_at(&self, u: f64, v: f64) -> [f32; 3] {
        let s = (u * self.dir.0 + v * self.dir.1) / self.period;
        self.colors[(s.floor() as i64).rem_euclid(2) as usize]
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..1.0),
    ]
}

/// Trajectory of one rectangle, with its appearance.
#[derive(Clone, Debug, PartialEq)]
struct Track {
    boxes: Vec<BBox>,
    look: Look,
}

fn simulate(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, size: (f64, f64), look: Look) -> Track {
    let (h, w) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
    let (bw, bh) = size;
    let mut x = rng.gen_range(bw / 2.0..w - bw / 2.0);
    let mut y = rng.gen_range(bh / 2.0..h - bh / 2.0);
    let speed = if cfg.speed.1 > cfg.speed.0 {
        rng.gen_range(cfg.speed.0..cfg.speed.1)
    } else {
        cfg.speed.0
    };
    let random_angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let angle = cfg.heading.unwrap_or(random_angle);
    let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
    let noise = Normal::new(0.0, cfg.jitter.max(1e-12)).expect("positive std");
    let mut boxes = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        if t > 0 {
            let (jx, jy) = if cfg.jitter > 0.0 {
                (noise.sample(rng), noise.sample(rng))
            } else {
                (0.0, 0.0)
            };
            x += vx + jx;
            y += vy + jy;
            if x < bw / 2.0 || x > w - bw / 2.0 {
                vx = -vx;
                x = x.clamp(bw / 2.0, w - bw / 2.0);
            }
            if y < bh / 2.0 || y > h - bh / 2.0 {
                vy = -vy;
                y = y.clamp(bh / 2.0, h - bh / 2.0);
            }
        }
        boxes.push(BBox::new(x, y, bw, bh));
    }
    Track { boxes, look }
}

/// A fully simulated world; frames are rendered on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub cfg: SyntheticConfig,
    background: Vec<[f32; 3]>,
    grain: Vec<f32>,
    target: Track,
    distractors: Vec<Track>,
    /// Occluder box per frame, if any.
    occluders: Vec<Option<(BBox, [f32; 3])>>,
}

const BG_CELLS: usize = 6;

impl World {
    pub fn new(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (h, w) = cfg.image_size;
        let background = (0..(BG_CELLS + 1) * (BG_CELLS + 1))
            .map(|_| {
                let c = random_color(&mut rng);
                [0.25 + 0.5 * c[0], 0.25 + 0.5 * c[1], 0.25 + 0.5 * c[2]]
            })
            .collect();
        let grain = (0..h * w).map(|_| rng.gen_range(-0.06..0.06)).collect();

        let mut size = || {
            let (lo, hi) = cfg.object_size;
            if hi > lo {
                (rng.gen_range(lo..hi), rng.gen_range(lo..hi))
            } else {
                (lo, lo)
            }
        };
        let target_size = size();
        let distractor_sizes: Vec<_> = (0..cfg.distractors).map(|_| size()).collect();
        let look = Look::random(&mut rng);
        let target = simulate(&mut rng, cfg, target_size, look.clone());
        let distractors = distractor_sizes
            .into_iter()
            .map(|s| {
                let own = Look::random(&mut rng);
                let l = look.blend(&own, cfg.similarity);
                simulate(&mut rng, cfg, s, l)
            })
            .collect();

        let mut occluders = vec![None; cfg.length];
        let mut t = 1;
        while t < cfg.length {
            if cfg.occluder_prob > 0.0 && rng.gen_bool(cfg.occluder_prob) {
                let b = target.boxes[t];
                let ox = b.x + rng.gen_range(-0.3..0.3) * b.w;
                let oy = b.y + rng.gen_range(-0.3..0.3) * b.h;
                let occ = BBox::new(ox, oy, b.w * rng.gen_range(0.5..1.0), b.h * rng.gen_range(0.5..1.0));
                let color = random_color(&mut rng);
                for slot in occluders.iter_mut().skip(t).take(cfg.occluder_frames) {
                    *slot = Some((occ, color));
                }
                t += cfg.occluder_frames;
            } else {
                t += 1;
            }
        }
        Ok(World {
            cfg: cfg.clone(),
            background,
            grain,
            target,
            distractors,
            occluders,
        })
    }

    pub fn len(&self) -> usize {
        self.cfg.length
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.length == 0
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.target.boxes
    }

    pub fn render(&self, t: usize) -> Image {
        let (h, w) = self.cfg.image_size;
        let mut img = Image::new(3, h, w);
        let n = BG_CELLS as f64;
        for y in 0..h {
            let gy = y as f64 / h as f64 * n;
            let (y0, fy) = (gy.floor() as usize, (gy - gy.floor()) as f32);
            for x in 0..w {
                let gx = x as f64 / w as f64 * n;
                let (x0, fx) = (gx.floor() as usize, (gx - gx.floor()) as f32);
                let at = |r: usize, c: usize| self.background[r * (BG_CELLS + 1) + c];
                let g = self.grain[y * w + x];
                for ch in 0..3 {
                    let top = at(y0, x0)[ch] * (1.0 - fx) + at(y0, x0 + 1)[ch] * fx;
                    let bot = at(y0 + 1, x0)[ch] * (1.0 - fx) + at(y0 + 1, x0 + 1)[ch] * fx;
                    img.set(ch, y, x, top * (1.0 - fy) + bot * fy + g);
                }
            }
        }
        for d in &self.distractors {
            paint_track(&mut img, d, t);
        }
        paint_track(&mut img, &self.target, t);
        if let Some((b, color)) = self.occluders[t] {
            paint_rect(&mut img, &b, |_, _| color);
        }
        img
    }
}

fn paint_rect(img: &mut Image, b: &BBox, color: impl Fn(f64, f64) -> [f32; 3]) {
    let [x0, y0, x1, y1] = b.corners();
    let xs = (x0.round().max(0.0) as usize)..(x1.round().min(img.width as f64).max(0.0) as usize);
    let ys = (y0.round().max(0.0) as usize)..(y1.round().min(img.height as f64).max(0.0) as usize);
    for y in ys {
        for x in xs.clone() {
            let c = color(x as f64 - x0, y as f64 - y0);
            for ch in 0..3 {
                img.set(ch, y, x, c[ch]);
            }
        }
    }
}

fn paint_track(img: &mut Image, track: &Track, t: usize) {
    let b = track.boxes[t];
    paint_rect(img, &b, |u, v| track.look.color_at(u, v));
}

/// Frames and ground-truth boxes of one sequence.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub frames: Vec<Image>,
    pub boxes: Vec<BBox>,
}

pub fn generate_sequence(cfg: &SyntheticConfig) -> Result<Sequence> {
    let world = World::new(cfg)?;
    Ok(Sequence {
        frames: (0..world.len()).map(|t| world.render(t)).collect(),
        boxes: world.boxes().to_vec(),
    })
}

/// How training crops are perturbed around the ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleJitter {
    /// Search-crop center shift as a fraction of `sqrt(w·h)`, uniform.
    pub center: f64,
    /// Log-normal std of the search-crop scale.
    pub scale: f64,
}

impl Default for SampleJitter {
    fn default() -> Self {
        SampleJitter {
            center: 0.6,
            scale: 0.15,
        }
    }
}

/// Draws one training sample from `world`: `k` templates from earlier
/// frames in temporal order and a search crop around a jittered box.
pub fn draw_sample(
    world: &World,
    k: usize,
    model: &ModelConfig,
    jitter: SampleJitter,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    ensure!(k >= 1, "samples need at least one template");
    ensure!(
        world.len() > k,
        "sequence of {} frames cannot host {k} templates",
        world.len()
    );
    let search_t = rng.gen_range(k..world.len());
    let mut picks: Vec<usize> = rand::seq::index::sample(rng, search_t, k).into_vec();
    picks.sort_unstable();

    let mut templates = Vec::with_capacity(k);
    let mut template_boxes = Vec::with_capacity(k);
    for &t in &picks {
        let b = world.boxes()[t];
        let (crop, tr) = crop_region(&world.render(t), &b, model.template_factor, model.template_size);
        templates.push(crop);
        template_boxes.push(tr.box_to_crop(&b));
    }

    let gt = world.boxes()[search_t];
    let side = (gt.w * gt.h).sqrt();
    let scale = Normal::new(0.0, jitter.scale.max(1e-12))
        .expect("positive std")
        .sample(rng)
        .exp();
    let center = BBox::new(
        gt.x + rng.gen_range(-1.0..=1.0) * jitter.center * side,
        gt.y + rng.gen_range(-1.0..=1.0) * jitter.center * side,
        gt.w * scale,
        gt.h * scale,
    );
    let (search, tr) = crop_region(&world.render(search_t), &center, model.search_factor, model.search_size);
    Ok(Sample {
        templates,
        template_boxes,
        search,
        search_box: tr.box_to_crop(&gt),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn still_target_has_constant_box() {
        let cfg = SyntheticConfig {
            speed: (0.0, 0.0),
            jitter: 0.0,
            length: 12,
            ..Default::default()
        };
        let w = World::new(&cfg).unwrap();
        assert!(w.boxes().iter().all(|b| *b == w.boxes()[0]));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig {
            length: 5,
            occluder_prob: 0.3,
            seed: 9,
            ..Default::default()
        };
        let a = generate_sequence(&cfg).unwrap();
        let b = generate_sequence(&cfg).unwrap();
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn constant_velocity_until_bounce() {
        let cfg = SyntheticConfig {
            speed: (2.0, 2.0),
            jitter: 0.0,
            length: 200,
            distractors: 0,
            ..Default::default()
        };
        for seed in 0..10 {
            let w = World::new(&SyntheticConfig { seed, ..cfg.clone() }).unwrap();
            let b = w.boxes();
            // Every step moves the center by exactly the speed unless a
            // wall clamp shortened it.
            for pair in b.windows(2) {
                let d = (pair[1].x - pair[0].x).hypot(pair[1].y - pair[0].y);
                let inside =
                    |q: &BBox| q.x > q.w / 2.0 && q.x < 128.0 - q.w / 2.0 && q.y > q.h / 2.0 && q.y < 128.0 - q.h / 2.0;
                if inside(&pair[1]) {
                    assert!((d - 2.0).abs() < 1e-9, "step {d}");
                } else {
                    assert!(d <= 2.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn horizontal_velocity_increments_x() {
        let cfg = SyntheticConfig {
            speed: (2.0, 2.0),
            heading: Some(0.0),
            jitter: 0.0,
            length: 120,
            ..Default::default()
        };
        for seed in 0..5 {
            let w = World::new(&SyntheticConfig { seed, ..cfg.clone() }).unwrap();
            let b = w.boxes();
            let wall = b.iter().position(|q| q.x + q.w / 2.0 >= 128.0 - 1e-9).unwrap();
            for t in 1..=wall.min(b.len() - 1) {
                if t < wall {
                    assert!((b[t].x - b[t - 1].x - 2.0).abs() < 1e-9);
                }
                assert_eq!(b[t].y, b[0].y);
            }
            assert!(b[wall + 1].x < b[wall].x, "bounce reverses motion");
        }
    }

    #[test]
    fn boxes_stay_inside_the_image() {
        let cfg = SyntheticConfig {
            speed: (3.0, 3.0),
            jitter: 1.5,
            length: 300,
            ..Default::default()
        };
        let w = World::new(&cfg).unwrap();
        for b in w.boxes() {
            let [x0, y0, x1, y1] = b.corners();
            assert!(x0 >= -1e-9 && y0 >= -1e-9 && x1 <= 128.0 + 1e-9 && y1 <= 128.0 + 1e-9);
        }
    }

    #[test]
    fn target_pixels_follow_the_box() {
        let cfg = SyntheticConfig {
            distractors: 0,
            length: 3,
            seed: 4,
            ..Default::default()
        };
        let w = World::new(&cfg).unwrap();
        let b = w.boxes()[2];
        let img = w.render(2);
        let [x0, y0, _, _] = b.corners();
        let (x, y) = (b.x as usize, b.y as usize);
        let expect = w.target.look.color_at(x as f64 - x0, y as f64 - y0);
        assert_eq!([img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)], expect);
    }

    #[test]
    fn sample_geometry_matches_model() {
        let m = ModelConfig::small();
        let w = World::new(&SyntheticConfig {
            length: 20,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = draw_sample(&w, 4, &m, SampleJitter::default(), &mut rng).unwrap();
        assert_eq!(s.templates.len(), 4);
        assert_eq!((s.search.height, s.search.width), m.search_size);
        assert!(s.search_box.is_valid());
        // Centered templates put the box in the middle of the crop.
        for b in &s.template_boxes {
            assert!((b.x - 16.0).abs() < 1e-9 && (b.y - 16.0).abs() < 1e-9);
        }
    }
}
