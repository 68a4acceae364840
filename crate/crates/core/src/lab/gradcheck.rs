//! Analytic gradients against finite differences, per named parameter array.
//!
//! Differences use the five-point stencil
//! `(8(f(+h) − f(−h)) − (f(+2h) − f(−2h))) / 12h`; relative error is
//! `|a − n| / max(|a|, |n|, floor)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::{BBox, Image};
use crate::model::{forward_sample, loss, loss_and_grad, zero_grads, ModelConfig, ModelParams, Sample};
use crate::nn::{flatten, layout, load_flat};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub seeds: Vec<u64>,
    /// Coordinates sampled per parameter array per seed.
    pub per_group: usize,
    pub templates: usize,
    pub step: f64,
    pub floor: f64,
    pub tolerance: f64,
    /// Negates the analytic gradient of arrays whose name starts with this.
    pub flip_sign: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig::tiny(),
            seeds: (0..20).collect(),
            per_group: 2,
            templates: 2,
            step: 1e-4,
            floor: 1e-6,
            tolerance: 1e-4,
            flip_sign: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub groups: Vec<GroupResult>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Largest `|analytic|` and `|numeric|` over parameters no sample reaches.
    pub unreached_max_abs: (f64, f64),
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.unreached_max_abs.0 == 0.0 && self.unreached_max_abs.1 < 1e-8
    }

    pub fn worst(&self) -> Option<&GroupResult> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn five_point(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `y = w·x`, loss `y²`: returns the closed-form gradient `2wx²` and its
/// finite-difference estimate.
pub fn scalar_toy(w: f64, x: f64, step: f64) -> (f64, f64) {
    let loss = |w: f64| (w * x).powi(2);
    (2.0 * w * x * x, five_point(|h| loss(w + h), step))
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, (h, w): (usize, usize)) -> Image {
    Image::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("sized buffer")
}

/// Random images with boxes placed away from the borders.
pub fn random_sample(cfg: &ModelConfig, templates: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (th, tw) = cfg.template_size;
    let (sh, sw) = cfg.search_size;
    let mut boxed = |h: usize, w: usize| {
        let (bw, bh) = (rng.gen_range(0.2..0.4) * w as f64, rng.gen_range(0.2..0.4) * h as f64);
        let x = rng.gen_range(0.3..0.7) * w as f64;
        let y = rng.gen_range(0.3..0.7) * h as f64;
        BBox::new(x, y, bw, bh)
    };
    let template_boxes = (0..templates).map(|_| boxed(th, tw)).collect();
    let search_box = boxed(sh, sw);
    Sample {
        templates: (0..templates)
            .map(|_| random_image(&mut rng, cfg.channels, (th, tw)))
            .collect(),
        template_boxes,
        search: random_image(&mut rng, cfg.channels, (sh, sw)),
        search_box,
    }
}

/// Runs the check in double precision over every seed.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradReport> {
    let m = &cfg.model;
    m.validate()?;
    let names = layout(&ModelParams::<f64>::zeros(m)?);
    let mut groups: Vec<GroupResult> = names
        .iter()
        .map(|(n, _)| GroupResult {
            name: n.clone(),
            checked: 0,
            max_rel_err: 0.0,
        })
        .collect();
    let mut unreached = (0.0f64, 0.0f64);
    let dm = m.d_model;

    for &seed in &cfg.seeds {
        let params = ModelParams::<f64>::init(m, seed)?;
        let sample = random_sample(m, cfg.templates, seed ^ 0x5eed);
        let mut grads = zero_grads(&params);
        loss_and_grad(&params, &sample, &mut grads)?;
        if let Some(prefix) = &cfg.flip_sign {
            use crate::nn::ParamSet;
            grads.visit_mut("", &mut |name, _, g| {
                if name.starts_with(prefix.as_str()) {
                    g.iter_mut().for_each(|v| *v = -*v);
                }
            });
        }
        let flat = flatten(&params);
        let gflat = flatten(&grads);
        let loss_at = |i: usize, h: f64| -> f64 {
            let mut v = flat.clone();
            v[i] += h;
            let mut q = params.clone();
            load_flat(&mut q, &v);
            let maps = forward_sample(&q, &sample).expect("shapes fixed by the config");
            loss::training_loss(&maps, &sample.search_box, m)
                .expect("valid box")
                .0
                .total
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut offset = 0;
        for ((name, shape), group) in names.iter().zip(&mut groups) {
            let len: usize = shape.iter().product();
            // Temporal rows past the template count never reach the loss.
            let reachable = if name == "embed.temporal" {
                cfg.templates.min(m.max_templates) * dm
            } else {
                len
            };
            for _ in 0..cfg.per_group.min(reachable) {
                let i = offset + rng.gen_range(0..reachable);
                let num = five_point(|h| loss_at(i, h), cfg.step);
                let err = relative_error(gflat[i], num, cfg.floor);
                group.checked += 1;
                group.max_rel_err = group.max_rel_err.max(err);
            }
            if reachable < len {
                let i = offset + rng.gen_range(reachable..len);
                unreached.0 = unreached.0.max(gflat[i].abs());
                unreached.1 = unreached.1.max(five_point(|h| loss_at(i, h), cfg.step).abs());
            }
            offset += len;
        }
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradReport {
        groups,
        max_rel_err,
        tolerance: cfg.tolerance,
        unreached_max_abs: unreached,
    })
}
