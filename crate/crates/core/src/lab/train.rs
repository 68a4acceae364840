//! Desk-scale trainer: AdamW with cosine decay on synthetic samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::model::{loss_and_grad, zero_grads, ModelParams};
use crate::nn::ParamSet;
use crate::scalar::Scalar;

use super::synth::{draw_sample, SampleJitter, SyntheticConfig, World};

/// `peak/2 · (1 + cos(π·step/total))`.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let t = (step.min(total)) as f64 / total as f64;
    peak / 2.0 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate for embeddings and blocks.
    pub lr_backbone: f64,
    /// Peak learning rate for the box head.
    pub lr_head: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Template counts are drawn uniformly from this inclusive range.
    pub templates: (usize, usize),
    /// Distinct synthetic worlds to draw samples from.
    pub worlds: usize,
    pub synth: SyntheticConfig,
    pub jitter: SampleJitter,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            lr_backbone: 4e-5,
            lr_head: 4e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            templates: (4, 4),
            worlds: 256,
            synth: SyntheticConfig::default(),
            jitter: SampleJitter::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings that clear the learning gate on the `small` preset within
    /// the desk budget: one peak rate for both groups and clipping at 5.
    pub fn desk() -> Self {
        TrainConfig {
            steps: 1500,
            lr_backbone: 1e-3,
            lr_head: 1e-3,
            grad_clip: Some(5.0),
            ..Self::default()
        }
    }
}

/// Per-step training log entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub total: f64,
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub grad_norm: f64,
}

/// Decoupled-weight-decay Adam over a [`ParamSet`], with separate learning
/// rates for arrays under `head.` and everything else.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// One update; `grad_scale` multiplies every gradient first.
    pub fn step<T: Scalar, P: ParamSet<T>>(
        &mut self,
        params: &mut P,
        grads: &P,
        lr_backbone: f64,
        lr_head: f64,
        grad_scale: f64,
    ) {
        let mut flat_g = Vec::new();
        grads.visit("", &mut |_, _, g| {
            flat_g.extend(g.iter().map(|v| v.as_f64() * grad_scale))
        });
        if self.m.len() != flat_g.len() {
            self.m = vec![0.0; flat_g.len()];
            self.v = vec![0.0; flat_g.len()];
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut offset = 0;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |name, _, p| {
            let lr = if name.starts_with("head.") {
                lr_head
            } else {
                lr_backbone
            };
            for (j, w) in p.iter_mut().enumerate() {
                let i = offset + j;
                let g = flat_g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                let x = w.as_f64();
                *w = T::c(x - lr * (update + wd * x));
            }
            offset += p.len();
        });
    }
}

fn grad_norm<T: Scalar>(g: &impl ParamSet<T>) -> f64 {
    let mut acc = 0.0;
    g.visit("", &mut |_, _, v| {
        acc += v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>()
    });
    acc.sqrt()
}

/// Seeds of the training worlds; disjoint from [`heldout_seed`].
pub fn training_seed(rng: &mut ChaCha8Rng) -> u64 {
    rng.gen_range(0..1u64 << 32)
}

/// Seed of held-out sequence `i`.
pub fn heldout_seed(i: usize) -> u64 {
    (1u64 << 40) + i as u64
}

/// Trains `params` in place. `on_step` sees every log row as it is produced.
pub fn train<T: Scalar>(
    params: &mut ModelParams<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRow),
) -> Result<Vec<LossRow>> {
    ensure!(cfg.batch_size >= 1, "batch size must be positive");
    ensure!(
        cfg.templates.0 >= 1 && cfg.templates.0 <= cfg.templates.1 && cfg.templates.1 <= params.cfg.max_templates,
        "template range {:?} must lie in 1..={}",
        cfg.templates,
        params.cfg.max_templates
    );
    ensure!(cfg.worlds >= 1, "need at least one training world");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let worlds = (0..cfg.worlds)
        .map(|_| {
            World::new(&SyntheticConfig {
                seed: training_seed(&mut rng),
                ..cfg.synth.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = zero_grads(params);
        let mut sums = [0.0; 4];
        for _ in 0..cfg.batch_size {
            let world = &worlds[rng.gen_range(0..worlds.len())];
            let k = rng.gen_range(cfg.templates.0..=cfg.templates.1);
            let sample = draw_sample(world, k, &params.cfg, cfg.jitter, &mut rng)?;
            let (l, _) = loss_and_grad(params, &sample, &mut grads)?;
            if !l.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("focal {} l1 {} giou {}", l.focal, l.l1, l.giou),
                });
            }
            for (s, v) in sums.iter_mut().zip([l.total, l.focal, l.l1, l.giou]) {
                *s += v;
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let norm = grad_norm(&grads) * inv;
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        let clip = match cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr_b = cosine_lr(cfg.lr_backbone, step, cfg.steps);
        let lr_h = cosine_lr(cfg.lr_head, step, cfg.steps);
        opt.step(params, &grads, lr_b, lr_h, inv * clip);
        let row = LossRow {
            step,
            lr_backbone: lr_b,
            lr_head: lr_h,
            total: sums[0] * inv,
            focal: sums[1] * inv,
            l1: sums[2] * inv,
            giou: sums[3] * inv,
            grad_norm: norm,
        };
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}

pub fn write_loss_csv(rows: &[LossRow], w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "step",
        "lr_backbone",
        "lr_head",
        "total",
        "focal",
        "l1",
        "giou",
        "grad_norm",
    ])?;
    for r in rows {
        out.write_record([
            r.step.to_string(),
            r.lr_backbone.to_string(),
            r.lr_head.to_string(),
            r.total.to_string(),
            r.focal.to_string(),
            r.l1.to_string(),
            r.giou.to_string(),
            r.grad_norm.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<loss log>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{loss_and_grad, ModelConfig};
    use crate::nn::Tensor;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![1.0, -1.0]);
        let g = Tensor::<f64>::from_vec(&[2], vec![0.3, -5.0]);
        let mut opt = AdamW::new(0.9, 0.999, 0.0, 0.0);
        opt.step(&mut p, &g, 0.01, 0.0, 1.0);
        assert!((p.data[0] - 0.99).abs() < 1e-12);
        assert!((p.data[1] + 0.99).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = Tensor::<f64>::from_vec(&[1], vec![2.0]);
        let g = Tensor::<f64>::from_vec(&[1], vec![0.0]);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.1);
        opt.step(&mut p, &g, 0.5, 0.0, 1.0);
        assert!((p.data[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }

    fn tiny_train(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            lr_backbone: lr,
            lr_head: lr,
            templates: (2, 2),
            worlds: 4,
            synth: SyntheticConfig {
                image_size: (64, 64),
                object_size: (8.0, 12.0),
                length: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = ModelConfig::tiny();
        let mut p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let before = p.clone();
        let mut t = tiny_train(2, 0.0);
        t.weight_decay = 0.1;
        train(&mut p, &t, |_| {}).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let run = || {
            let mut p = ModelParams::<f32>::init(&cfg, 2).unwrap();
            let log = train(&mut p, &tiny_train(3, 1e-3), |_| {}).unwrap();
            (p, log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_on_fixed_batch_decreases() {
        let cfg = ModelConfig::tiny();
        let mut p = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let world = World::new(&tiny_train(1, 0.0).synth).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch: Vec<_> = (0..4)
            .map(|_| draw_sample(&world, 2, &cfg, SampleJitter::default(), &mut rng).unwrap())
            .collect();
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 1e-4);
        let mut losses = Vec::new();
        for _ in 0..11 {
            let mut g = zero_grads(&p);
            let mut total = 0.0;
            for s in &batch {
                total += loss_and_grad(&p, s, &mut g).unwrap().0.total;
            }
            losses.push(total);
            opt.step(&mut p, &g, 1e-3, 1e-3, 0.25);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn nan_loss_aborts_with_step() {
        let cfg = ModelConfig::tiny();
        let mut p = ModelParams::<f32>::init(&cfg, 5).unwrap();
        p.head.cls.out.bias = Some(vec![f32::NAN]);
        match train(&mut p, &tiny_train(2, 1e-3), |_| {}) {
            Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
    }
}
