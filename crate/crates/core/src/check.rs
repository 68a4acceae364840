//! The invariant battery: every structural property the library promises,
//! runnable outside the test harness.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{block_forward, temporal_causal_flip, BlockConfig, BlockParams, BlockState};
use crate::error::Result;
use crate::image::BBox;
use crate::lab::gradcheck::{grad_check, GradCheckConfig};
use crate::lab::metrics::compute_metrics;
use crate::model::{backbone_features, backbone_forward, embed, ModelConfig, ModelParams};
use crate::nn::{flatten, load_flat, normal, uniform};
use crate::scalar::Scalar;
use crate::ssm::{discretize, segmented_scan, state_wise_delta, DeltaMode, FrameSequence, HiddenState, ScanParams};
use crate::tracker::memory::{eviction_target, sample_memory_indices, StateMemory};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckItem {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        CheckItem {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<24} {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for item in &self.items {
            writeln!(f, "{item}")?;
        }
        let failed = self.items.iter().filter(|i| !i.passed).count();
        write!(f, "{} checks, {failed} failed", self.items.len())
    }
}

#[derive(Clone, Debug)]
pub struct CheckConfig {
    pub seed: u64,
    pub scan_instances: usize,
    pub causality_instances: usize,
    pub property_cases: usize,
    pub grad: GradCheckConfig,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            seed: 0,
            scan_instances: 200,
            causality_instances: 100,
            property_cases: 500,
            grad: GradCheckConfig::default(),
        }
    }
}

/// Plain-loop recurrence built from the primitive ops: `Δ` per token,
/// discretize, `h ← Ā⊙h + B̄·x`, `y = Σ C⊙h`, and the composed interaction
/// matrix at each frame end.
pub fn reference_scan(
    seq: &FrameSequence<f64>,
    h_init: &HiddenState<f64>,
    p: &ScanParams<f64>,
    interact: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d, n) = (p.channels, p.states);
    let mixing = p.interaction_up.compose(&p.interaction_down);
    let mut h = h_init.data.clone();
    let mut y = Vec::with_capacity(seq.tokens.len());
    for (start, len) in seq.frame_spans() {
        for t in start..start + len {
            let x = seq.token(t);
            let delta = state_wise_delta(x, p)?;
            let b = p.proj_b.forward(x);
            let c = p.proj_c.forward(x);
            let b_rows: Vec<f64> = (0..d).flat_map(|_| b.iter().copied()).collect();
            let (a_bar, b_bar) = discretize(&p.a.data, &b_rows, &delta)?;
            for di in 0..d {
                let mut acc = 0.0;
                for ni in 0..n {
                    let k = di * n + ni;
                    h[k] = a_bar[k] * h[k] + b_bar[k] * x[di];
                    acc += c[ni] * h[k];
                }
                y.push(acc);
            }
        }
        if interact {
            let prev = h.clone();
            for di in 0..d {
                for i in 0..n {
                    h[di * n + i] = (0..n).map(|j| mixing[i * n + j] * prev[di * n + j]).sum();
                }
            }
        }
    }
    Ok((y, h))
}

fn random_lengths(rng: &mut ChaCha8Rng, total: usize, frames: usize) -> Vec<usize> {
    let frames = frames.min(total);
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, total - 1, frames - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    cuts.push(total);
    let mut prev = 0;
    cuts.into_iter()
        .map(|c| {
            let l = c - prev;
            prev = c;
            l
        })
        .collect()
}

fn random_scan_params(rng: &mut ChaCha8Rng, d: usize, n: usize) -> ScanParams<f64> {
    let mode = DeltaMode::ALL[rng.gen_range(0..DeltaMode::ALL.len())];
    let mut p = ScanParams::init(d, n, mode, rng).expect("valid shape");
    for a in p.a.data.iter_mut() {
        *a = -rng.gen_range(0.1..4.0);
    }
    p
}

fn cast_scan(p: &ScanParams<f64>) -> ScanParams<f32> {
    let mut q = ScanParams::<f32>::zeros(p.channels, p.states, p.delta_mode).expect("valid shape");
    load_flat(&mut q, &flatten(p).iter().map(|&v| v as f32).collect::<Vec<_>>());
    q
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-12)
}

/// `segmented_scan` against [`reference_scan`] on random instances with
/// `D ≤ 8`, `N ∈ {4, 8}`, `L ≤ 64` and 1–4 frames. Returns the worst
/// relative errors in double and single precision.
pub fn scan_oracle(instances: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let d = rng.gen_range(1..=8);
        let n = 4 * rng.gen_range(1..=2);
        let l = rng.gen_range(1..=64);
        let frames = rng.gen_range(1..=4);
        let p = random_scan_params(&mut rng, d, n);
        let interact = rng.gen_bool(0.5);
        let seq = FrameSequence::new(d, uniform(&mut rng, l * d, 1.0), random_lengths(&mut rng, l, frames))?;
        let h0 = HiddenState::from_vec(d, n, uniform(&mut rng, d * n, 0.5))?;
        let (y_ref, h_ref) = reference_scan(&seq, &h0, &p, interact)?;

        let out = segmented_scan(&seq, &h0, &p, interact)?;
        worst64 = worst64
            .max(rel_err(&out.y, &y_ref))
            .max(rel_err(&out.h_last.data, &h_ref));

        let seq32 = FrameSequence::new(
            d,
            seq.tokens.iter().map(|&v| v as f32).collect(),
            seq.frame_lengths.clone(),
        )?;
        let out32 = segmented_scan(&seq32, &h0.cast::<f32>(), &cast_scan(&p), interact)?;
        let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        worst32 = worst32
            .max(rel_err(&widen(&out32.y), &y_ref))
            .max(rel_err(&widen(&out32.h_last.data), &h_ref));
    }
    Ok((worst64, worst32))
}

fn perturb_from(seq: &FrameSequence<f64>, frame: usize, rng: &mut ChaCha8Rng) -> FrameSequence<f64> {
    let start: usize = seq.frame_lengths[..frame].iter().sum::<usize>() * seq.width;
    let mut tokens = seq.tokens.clone();
    for v in &mut tokens[start..] {
        *v += rng.gen_range(-1.0..1.0);
    }
    seq.with_tokens(tokens, seq.width)
}

fn prefix_equal(a: &FrameSequence<f64>, b: &FrameSequence<f64>, frames: usize) -> bool {
    let end: usize = a.frame_lengths[..frames].iter().sum::<usize>() * a.width;
    a.tokens[..end] == b.tokens[..end]
}

/// Perturbs every frame from `k` on and counts instances where an earlier
/// frame's output moved at all. Half the instances use a single block, half
/// the tiny backbone.
pub fn causality(instances: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model_cfg = ModelConfig::tiny();
    let model = ModelParams::<f64>::init(&model_cfg, seed)?;
    let mut violations = 0;
    for i in 0..instances {
        let frames = rng.gen_range(2..=5);
        let k = rng.gen_range(1..frames);
        let lengths: Vec<usize> = (0..frames).map(|_| rng.gen_range(1..=6)).collect();
        let total: usize = lengths.iter().sum();
        if i % 2 == 0 {
            let mut cfg = BlockConfig::new(rng.gen_range(2..=8), 4 * rng.gen_range(1..=2));
            cfg.delta_mode = DeltaMode::ALL[rng.gen_range(0..DeltaMode::ALL.len())];
            cfg.per_frame_conv = rng.gen_bool(0.5);
            let p = BlockParams::<f64>::init(cfg, 1.0, &mut rng)?;
            let seq = FrameSequence::new(cfg.d_model, normal(&mut rng, total * cfg.d_model, 1.0), lengths)?;
            let moved = perturb_from(&seq, k, &mut rng);
            let (a, _) = block_forward(&seq, &p.initial_state(), &p)?;
            let (b, _) = block_forward(&moved, &p.initial_state(), &p)?;
            violations += usize::from(!prefix_equal(&a, &b, k));
        } else {
            let dm = model_cfg.d_model;
            let seq = FrameSequence::new(dm, normal(&mut rng, total * dm, 1.0), lengths)?;
            let moved = perturb_from(&seq, k, &mut rng);
            let (a, _) = backbone_features(&model, &seq, None)?;
            let (b, _) = backbone_features(&model, &moved, None)?;
            violations += usize::from(!prefix_equal(&a, &b, k));
        }
    }
    Ok(violations)
}

/// Seeded inference against the concatenated pass for 1–4 templates on the
/// tiny config, in single precision. Returns the template counts that
/// differ in any bit, or whose repeat run differs.
pub fn propagation_equivalence(seed: u64) -> Result<Vec<usize>> {
    let cfg = ModelConfig::tiny();
    let p = ModelParams::<f32>::init(&cfg, seed)?;
    let mut bad = Vec::new();
    for k in 1..=4 {
        let s = crate::lab::gradcheck::random_sample(&cfg, k, seed.wrapping_mul(31).wrapping_add(k as u64));
        let (seq, _) = embed::compose_inputs(&s.templates, &s.template_boxes, &s.search, &cfg, &p.embed)?;
        let (joint, _) = backbone_forward(&p, &seq, None)?;
        let (_, states) = backbone_forward(&p, &seq.frames(0..k), None)?;
        let (seeded, _) = backbone_forward(&p, &seq.frame(k), Some(&states))?;
        let (again, _) = backbone_forward(&p, &seq.frame(k), Some(&states))?;
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&joint) != bits(&seeded) || bits(&seeded) != bits(&again) {
            bad.push(k);
        }
    }
    Ok(bad)
}

fn tcflip_involution(cases: usize, rng: &mut ChaCha8Rng) -> Result<bool> {
    for _ in 0..cases {
        let width = rng.gen_range(1..=4);
        let lengths: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(1..=7)).collect();
        let total: usize = lengths.iter().sum();
        let seq = FrameSequence::new(width, normal::<f64>(rng, total * width, 1.0), lengths)?;
        let once = temporal_causal_flip(&seq);
        if temporal_causal_flip(&once) != seq || once.frame_lengths != seq.frame_lengths {
            return Ok(false);
        }
        // Frame order is kept: frame j of the flip holds the same tokens.
        for j in 0..seq.frame_count() {
            let a = seq.frame(j).tokens;
            let rev: Vec<f64> = a.chunks_exact(width).rev().flatten().copied().collect();
            if rev != once.frame(j).tokens {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn delta_positive<T: Scalar>(cases: usize, rng: &mut ChaCha8Rng) -> Result<bool> {
    for _ in 0..cases {
        let (d, n) = (rng.gen_range(1..=6), 4 * rng.gen_range(1..=2));
        let mut p = ScanParams::<f64>::init(d, n, DeltaMode::ALL[rng.gen_range(0..6)], rng)?;
        // Push logits toward both tails.
        let spread = rng.gen_range(0.1..30.0);
        for w in p.delta_channel.weight.iter_mut().chain(p.delta_state.weight.iter_mut()) {
            *w = rng.gen_range(-spread..spread);
        }
        let x: Vec<f64> = uniform(rng, d, 1.0);
        let mut q = ScanParams::<T>::zeros(d, n, p.delta_mode)?;
        load_flat(&mut q, &flatten(&p).iter().map(|&v| T::c(v)).collect::<Vec<_>>());
        let xt: Vec<T> = x.iter().map(|&v| T::c(v)).collect();
        if !state_wise_delta(&xt, &q)?
            .iter()
            .all(|&v| v > T::zero() && v.is_finite())
        {
            return Ok(false);
        }
    }
    Ok(true)
}

fn metrics_bounds(cases: usize, rng: &mut ChaCha8Rng) -> Result<bool> {
    let random_box = |rng: &mut ChaCha8Rng| {
        BBox::new(
            rng.gen_range(0.0..50.0),
            rng.gen_range(0.0..50.0),
            rng.gen_range(0.5..30.0),
            rng.gen_range(0.5..30.0),
        )
    };
    for _ in 0..cases / 10 + 1 {
        let n = rng.gen_range(1..40);
        let gt: Vec<BBox> = (0..n).map(|_| random_box(rng)).collect();
        let pred: Vec<BBox> = gt
            .iter()
            .map(|g| {
                if rng.gen_bool(0.5) {
                    BBox::new(g.x + rng.gen_range(-3.0..3.0), g.y, g.w, g.h * rng.gen_range(0.7..1.3))
                } else {
                    random_box(rng)
                }
            })
            .collect();
        let m = compute_metrics(&pred, &gt)?;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(m.ao) && unit(m.sr50) && unit(m.sr75) && m.sr75 <= m.sr50) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Random update schedules: the memory never exceeds its cap, frame 1 is
/// never evicted, order is strictly increasing and every eviction removes
/// the later element of a closest pair.
fn eviction_invariants(cases: usize, rng: &mut ChaCha8Rng) -> Result<bool> {
    let stub = vec![BlockState::<f64>::zeros(1, 4)];
    for _ in 0..cases / 10 + 1 {
        let cap = rng.gen_range(2..20);
        let mut mem = StateMemory::new(cap);
        let mut frame = 1;
        for _ in 0..rng.gen_range(1..120) {
            let before = mem.frame_indexes();
            mem.push(frame, stub.clone())?;
            let after = mem.frame_indexes();
            if after.len() > cap || after[0] != 1 || after.windows(2).any(|w| w[0] >= w[1]) {
                return Ok(false);
            }
            if before.len() == cap {
                let mut full = before.clone();
                full.push(frame);
                let i = eviction_target(&full).expect("two or more entries");
                let min_gap = full.windows(2).map(|w| w[1] - w[0]).min().unwrap();
                full.remove(i);
                if full != after || i == 0 || after.len() != cap {
                    return Ok(false);
                }
                let removed_gap = mem_gap(&before, frame, i);
                if removed_gap != min_gap {
                    return Ok(false);
                }
            }
            frame += rng.gen_range(1..30);
        }
    }
    Ok(true)
}

fn mem_gap(before: &[usize], pushed: usize, i: usize) -> usize {
    let mut full = before.to_vec();
    full.push(pushed);
    full[i] - full[i - 1]
}

/// `(memory size, N_h)` pairs listed by the sampling-table check.
pub const SAMPLING_TABLE: [(usize, usize); 5] = [(50, 10), (10, 10), (5, 10), (20, 5), (1, 10)];

pub fn run_checks(cfg: &CheckConfig) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (e64, e32) = scan_oracle(cfg.scan_instances, cfg.seed)?;
    report.items.push(CheckItem::new(
        "scan oracle",
        e64 < 1e-10 && e32 < 1e-5,
        format!("{} instances, rel err f64 {e64:.2e}, f32 {e32:.2e}", cfg.scan_instances),
    ));

    let v = causality(cfg.causality_instances, cfg.seed)?;
    report.items.push(CheckItem::new(
        "causality",
        v == 0,
        format!("{} instances, {v} violations", cfg.causality_instances),
    ));

    report.items.push(CheckItem::new(
        "tcflip involution",
        tcflip_involution(cfg.property_cases, &mut rng)?,
        format!("{} sequences", cfg.property_cases),
    ));

    let pos =
        delta_positive::<f64>(cfg.property_cases, &mut rng)? && delta_positive::<f32>(cfg.property_cases, &mut rng)?;
    report.items.push(CheckItem::new(
        "delta positivity",
        pos,
        format!("{} draws per precision, all six modes", cfg.property_cases),
    ));

    let bad = propagation_equivalence(cfg.seed)?;
    report.items.push(CheckItem::new(
        "propagation equivalence",
        bad.is_empty(),
        if bad.is_empty() {
            "seeded == concatenated, bit-exact for 1-4 templates".to_string()
        } else {
            format!("mismatch for template counts {bad:?}")
        },
    ));

    let grad = grad_check(&cfg.grad)?;
    let worst = grad.worst().map(|g| g.name.clone()).unwrap_or_default();
    report.items.push(CheckItem::new(
        "gradient check",
        grad.passed(),
        format!(
            "{} seeds, max rel err {:.2e} ({worst}), unreached grad {:.1e}",
            cfg.grad.seeds.len(),
            grad.max_rel_err,
            grad.unreached_max_abs.0
        ),
    ));

    let expected = [1, 6, 11, 17, 22, 28, 33, 39, 44, 50];
    let table: Vec<String> = SAMPLING_TABLE
        .iter()
        .map(|&(m, n)| format!("({m},{n}) -> {:?}", sample_memory_indices(m, n)))
        .collect();
    report.items.push(CheckItem::new(
        "sampling formula",
        sample_memory_indices(50, 10) == expected,
        table.join("; "),
    ));

    report.items.push(CheckItem::new(
        "metrics bounds",
        metrics_bounds(cfg.property_cases, &mut rng)?,
        "0 <= AO, SR <= 1 and SR75 <= SR50",
    ));

    report.items.push(CheckItem::new(
        "eviction invariants",
        eviction_invariants(cfg.property_cases, &mut rng)?,
        "cap, anchor, order, closest-pair removal",
    ));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_agrees_on_a_small_case() {
        let (e64, e32) = scan_oracle(20, 9).unwrap();
        assert!(e64 < 1e-10 && e32 < 1e-5, "{e64} {e32}");
    }

    #[test]
    fn random_lengths_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for total in 1..20 {
            for frames in 1..=4 {
                let l = random_lengths(&mut rng, total, frames);
                assert_eq!(l.iter().sum::<usize>(), total);
                assert_eq!(l.len(), frames.min(total));
                assert!(l.iter().all(|&x| x >= 1));
            }
        }
    }

    #[test]
    fn quick_battery_is_green() {
        let cfg = CheckConfig {
            scan_instances: 10,
            causality_instances: 6,
            property_cases: 50,
            grad: GradCheckConfig {
                seeds: vec![1],
                per_group: 1,
                ..GradCheckConfig::default()
            },
            ..CheckConfig::default()
        };
        let report = run_checks(&cfg).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.items.len(), 9);
        assert!(report
            .to_string()
            .contains("(50,10) -> [1, 6, 11, 17, 22, 28, 33, 39, 44, 50]"));
    }

    #[test]
    fn sign_flip_fails_the_battery() {
        let cfg = CheckConfig {
            scan_instances: 1,
            causality_instances: 1,
            property_cases: 1,
            grad: GradCheckConfig {
                seeds: vec![1],
                per_group: 1,
                flip_sign: Some("head.".into()),
                ..GradCheckConfig::default()
            },
            ..CheckConfig::default()
        };
        let report = run_checks(&cfg).unwrap();
        assert!(!report.passed());
        let failed: Vec<&str> = report
            .items
            .iter()
            .filter(|i| !i.passed)
            .map(|i| i.name.as_str())
            .collect();
        assert_eq!(failed, ["gradient check"]);
    }
}
