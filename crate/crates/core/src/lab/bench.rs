//! Cost of the SASM stack versus the attention baseline as templates grow.
//!
//! FLOP convention: a multiply-add counts 2, any other arithmetic op,
//! comparison or transcendental counts 1. Only the block stack is counted;
//! patch embedding and the head are identical for both paths. Zero taps of
//! the padded convolution are counted as if multiplied.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{block_forward, BlockConfig, BlockParams};
use crate::error::{ensure, Error, Result};
use crate::lab::attention::{attention_baseline_forward, AttentionParams};
use crate::model::ModelConfig;
use crate::nn::normal;
use crate::ssm::{DeltaMode, FrameSequence};

const SIGMOID: u64 = 4;
const SOFTPLUS: u64 = 3;
const SILU: u64 = 4;

fn delta_cost(mode: DeltaMode) -> u64 {
    match mode {
        DeltaMode::Joint => 1 + SOFTPLUS,
        DeltaMode::SplitSoftplus => 2 * SOFTPLUS + 1,
        DeltaMode::SigmoidState | DeltaMode::SigmoidChannel => SIGMOID + SOFTPLUS + 1,
        DeltaMode::ChannelOnly | DeltaMode::StateOnly => SOFTPLUS,
    }
}

fn rms_norm_flops(width: u64) -> u64 {
    // Square-accumulate, then mean, epsilon, sqrt and reciprocal, then two
    // multiplies per element.
    2 * width + 4 + 2 * width
}

/// Per-token cost of one SASM block.
pub fn sasm_token_flops(cfg: &BlockConfig) -> u64 {
    let (dm, d, n, k) = (
        cfg.d_model as u64,
        cfg.d_inner as u64,
        cfg.states as u64,
        cfg.conv_kernel as u64,
    );
    let scan = 2 * d * d + d // channel logits and bias
        + 2 * d * n // state logits
        + 4 * d * n // B and C projections
        + d * n * (delta_cost(cfg.delta_mode) + 2 + 4 + 2); // Δ, Ā, recurrence, readout
    rms_norm_flops(dm)
        + 2 * 2 * dm * d // in_proj x and z
        + 2 * (2 * k * d + SILU * d) // conv and SiLU per direction
        + 2 * scan
        + d + (SILU + 1) * d // merge directions, gate
        + 2 * d * dm // out_proj
        + dm // residual
}

/// Per-frame cost of one SASM block: the state interaction in both directions.
pub fn sasm_frame_flops(cfg: &BlockConfig) -> u64 {
    if !cfg.interaction {
        return 0;
    }
    let (d, n) = (cfg.d_inner as u64, cfg.states as u64);
    let b = (cfg.states / 4) as u64;
    2 * d * (2 * n * b + 2 * b * n)
}

/// `k` templates plus the search frame.
pub fn token_count(cfg: &ModelConfig, k: usize) -> usize {
    k * cfg.template_tokens() + cfg.search_tokens()
}

pub fn sasm_flops(cfg: &ModelConfig, k: usize) -> u64 {
    let bc = cfg.block_config();
    let per_block = token_count(cfg, k) as u64 * sasm_token_flops(&bc) + (k as u64 + 1) * sasm_frame_flops(&bc);
    cfg.n_blocks as u64 * per_block
}

/// Attention layer cost for `l` tokens of width `w`: linear part and the
/// coefficient of `l²`.
pub fn attention_flop_terms(w: u64) -> (u64, u64) {
    let linear = rms_norm_flops(w) + 4 * 2 * w * w + w;
    // Score dot product and scale, max, subtract+exp, sum, divide, weighted sum.
    let pair = 2 * w + 1 + 1 + 2 + 1 + 1 + 2 * w;
    (linear, pair)
}

pub fn attention_flops(cfg: &ModelConfig, k: usize) -> u64 {
    let l = token_count(cfg, k) as u64;
    let (lin, pair) = attention_flop_terms(cfg.d_model as u64);
    cfg.n_blocks as u64 * (l * lin + l * l * pair)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Sasm,
    Attention,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Sasm => "sasm",
            Variant::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Variant::Sasm, Variant::Attention].into_iter().find(|v| v.name() == s)
    }

    pub fn flops(self, cfg: &ModelConfig, k: usize) -> u64 {
        match self {
            Variant::Sasm => sasm_flops(cfg, k),
            Variant::Attention => attention_flops(cfg, k),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub k_max: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub variants: Vec<Variant>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelConfig::desk(),
            k_max: 8,
            repeats: 15,
            warmup: 3,
            variants: vec![Variant::Sasm, Variant::Attention],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub k: usize,
    pub tokens: usize,
    pub flops: u64,
    pub wall_ns_mean: f64,
    /// The fits use the median.
    pub wall_ns_median: f64,
    pub wall_ns_std: f64,
}

/// Least-squares fit of `y = intercept + slope·x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

fn r_squared(y: &[f64], pred: impl Iterator<Item = f64>) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(pred).map(|(v, p)| (v - p).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    LinearFit {
        slope,
        intercept,
        r2: r_squared(y, x.iter().map(|a| intercept + slope * a)),
    }
}

/// Least-squares `y = c0 + c1·x + c2·x²`; returns the coefficients and R².
pub fn quadratic_fit(x: &[f64], y: &[f64]) -> ([f64; 3], f64) {
    let mut m = [[0.0f64; 4]; 3];
    for (&xi, &yi) in x.iter().zip(y) {
        let pw = [1.0, xi, xi * xi];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] += pw[r] * pw[c];
            }
            m[r][3] += pw[r] * yi;
        }
    }
    // Gauss-Jordan with partial pivoting on the 3×3 normal equations.
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        m.swap(col, piv);
        if m[col][col].abs() < 1e-300 {
            return ([0.0; 3], 0.0);
        }
        for r in 0..3 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..4 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let coef = [m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]];
    let r2 = r_squared(y, x.iter().map(|a| coef[0] + coef[1] * a + coef[2] * a * a));
    (coef, r2)
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn time_once(run: &mut impl FnMut() -> Result<()>) -> Result<f64> {
    let t = Instant::now();
    run()?;
    Ok(t.elapsed().as_nanos() as f64)
}

/// Times the block stack of each variant on random tokens for `k = 1..=k_max`.
/// Repeats go round-robin over `k` so slow drift in machine speed spreads
/// evenly. Runs on the calling thread only.
pub fn complexity_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    ensure!(cfg.k_max >= 1, "k_max must be at least 1");
    ensure!(cfg.repeats >= 1, "at least one timed repeat is needed");
    let m = &cfg.model;
    m.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out_scale = 1.0 / (2.0 * m.n_blocks as f64).sqrt();
    let blocks: Vec<BlockParams<f32>> = (0..m.n_blocks)
        .map(|_| BlockParams::init(m.block_config(), out_scale, &mut rng))
        .collect::<Result<_>>()?;
    let states: Vec<_> = blocks.iter().map(|b| b.initial_state()).collect();
    let attn = AttentionParams::<f32>::init(m.d_model, m.n_blocks, cfg.seed);

    let seqs: Vec<FrameSequence<f32>> = (1..=cfg.k_max)
        .map(|k| {
            let mut lengths = vec![m.template_tokens(); k];
            lengths.push(m.search_tokens());
            FrameSequence::new(m.d_model, normal(&mut rng, token_count(m, k) * m.d_model, 1.0), lengths)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for &variant in &cfg.variants {
        let run_k = |seq: &FrameSequence<f32>| -> Result<()> {
            match variant {
                Variant::Sasm => {
                    let mut x = seq.clone();
                    for (b, s) in blocks.iter().zip(&states) {
                        x = block_forward(&x, s, b)?.0;
                    }
                    std::hint::black_box(&x);
                }
                Variant::Attention => {
                    std::hint::black_box(attention_baseline_forward(seq, &attn)?);
                }
            }
            Ok(())
        };
        let mut samples = vec![Vec::with_capacity(cfg.repeats); cfg.k_max];
        for _ in 0..cfg.warmup {
            for seq in &seqs {
                run_k(seq)?;
            }
        }
        for _ in 0..cfg.repeats {
            for (seq, out) in seqs.iter().zip(&mut samples) {
                out.push(time_once(&mut || run_k(seq))?);
            }
        }
        for (i, s) in samples.iter().enumerate() {
            let k = i + 1;
            let (wall_ns_mean, wall_ns_std) = mean_std(s);
            rows.push(BenchRow {
                variant,
                k,
                tokens: token_count(m, k),
                flops: variant.flops(m, k),
                wall_ns_mean,
                wall_ns_median: median(s),
                wall_ns_std,
            });
        }
    }
    Ok(rows)
}

/// Goodness of fit of wall time against `k`, per variant.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub variant: Variant,
    pub linear: LinearFit,
    pub quadratic: [f64; 3],
    pub quadratic_r2: f64,
}

pub fn fit_report(rows: &[BenchRow]) -> Vec<FitReport> {
    let mut out = Vec::new();
    for variant in [Variant::Sasm, Variant::Attention] {
        let (x, y): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| (r.k as f64, r.wall_ns_median))
            .unzip();
        if x.len() < 3 {
            continue;
        }
        let (quadratic, quadratic_r2) = quadratic_fit(&x, &y);
        out.push(FitReport {
            variant,
            linear: linear_fit(&x, &y),
            quadratic,
            quadratic_r2,
        });
    }
    out
}

pub fn write_bench_csv(rows: &[BenchRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::io("<bench csv>", std::io::Error::other(e));
    out.write_record(["variant", "k", "tokens", "flops", "wall_ns_mean", "wall_ns_std"])
        .map_err(err)?;
    for r in rows {
        out.write_record([
            r.variant.name().to_string(),
            r.k.to_string(),
            r.tokens.to_string(),
            r.flops.to_string(),
            format!("{:.1}", r.wall_ns_mean),
            format!("{:.1}", r.wall_ns_std),
        ])
        .map_err(err)?;
    }
    out.flush().map_err(|e| Error::io("<bench csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn second_differences(f: impl Fn(usize) -> u64) -> Vec<i128> {
        (1..=6)
            .map(|k| f(k + 2) as i128 - 2 * f(k + 1) as i128 + f(k) as i128)
            .collect()
    }

    #[test]
    fn sasm_flops_are_affine_in_k() {
        for cfg in [ModelConfig::desk(), ModelConfig::tiny(), ModelConfig::m256()] {
            assert!(second_differences(|k| sasm_flops(&cfg, k)).iter().all(|&d| d == 0));
            // Without interaction the count is proportional to the token count.
            let mut plain = cfg.clone();
            plain.interaction = false;
            let per = sasm_flops(&plain, 1) / token_count(&plain, 1) as u64;
            for k in 1..=8 {
                assert_eq!(sasm_flops(&plain, k), per * token_count(&plain, k) as u64);
            }
        }
    }

    #[test]
    fn attention_flops_carry_the_square_term() {
        let cfg = ModelConfig::desk();
        let (_, pair) = attention_flop_terms(cfg.d_model as u64);
        let lt = cfg.template_tokens() as i128;
        let expect = 2 * cfg.n_blocks as i128 * pair as i128 * lt * lt;
        assert!(second_differences(|k| attention_flops(&cfg, k))
            .iter()
            .all(|&d| d == expect));
        assert!(expect > 0);
    }

    #[test]
    fn hand_counted_block() {
        let mut bc = BlockConfig::new(4, 4);
        bc.conv_kernel = 2;
        bc.delta_mode = DeltaMode::ChannelOnly;
        // norm 8+4+8, in 64, conv+silu 2·(16+16), scan 2·(36+32+64+16·11),
        // gate 4+20, out 32, residual 4.
        assert_eq!(sasm_token_flops(&bc), 20 + 64 + 64 + 2 * 308 + 24 + 32 + 4);
        // Bottleneck 1: 2 directions · 4 channels · (8 + 8).
        assert_eq!(sasm_frame_flops(&bc), 128);
    }

    #[test]
    fn fits_recover_exact_curves() {
        let x: Vec<f64> = (1..=8).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 + 2.0 * v).collect();
        let f = linear_fit(&x, &y);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 3.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        let q: Vec<f64> = x.iter().map(|v| 1.0 - v + 0.5 * v * v).collect();
        let (c, r2) = quadratic_fit(&x, &q);
        assert!((c[0] - 1.0).abs() < 1e-9 && (c[1] + 1.0).abs() < 1e-9 && (c[2] - 0.5).abs() < 1e-9);
        assert!((r2 - 1.0).abs() < 1e-12);
        assert!(linear_fit(&x, &q).r2 < 1.0);
    }

    #[test]
    fn bench_rows_cover_the_k_range() {
        let cfg = BenchConfig {
            model: ModelConfig::tiny(),
            k_max: 3,
            repeats: 2,
            warmup: 0,
            variants: vec![Variant::Sasm, Variant::Attention],
            seed: 1,
        };
        let rows = complexity_bench(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), [1, 2, 3, 1, 2, 3]);
        assert!(rows.iter().all(|r| r.wall_ns_mean > 0.0));
        let mut buf = Vec::new();
        write_bench_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("variant,k,tokens,flops,wall_ns_mean,wall_ns_std\nsasm,1,"));
        assert_eq!(text.lines().count(), 7);
    }
}
