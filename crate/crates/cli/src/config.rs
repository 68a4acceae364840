//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. `model.preset` is applied
//! before any other `model.*` key regardless of where it appears. Unknown
//! and repeated keys are errors. [`RunConfig::render`] lists every key with
//! its resolved value and parses back to the same config.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use smtk::lab::bench::{BenchConfig, Variant};
use smtk::lab::gradcheck::GradCheckConfig;
use smtk::lab::synth::SyntheticConfig;
use smtk::lab::train::TrainConfig;
use smtk::model::ModelConfig;
use smtk::ssm::DeltaMode;
use smtk::tracker::TrackerConfig;
use smtk::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub synth: SyntheticConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    /// Held-out sequences for `track`.
    pub eval_sequences: usize,
    pub bench: BenchConfig,
    pub check_scan_instances: usize,
    pub check_causality_instances: usize,
    pub check_property_cases: usize,
    pub grad: GradCheckConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let preset = "small";
        RunConfig {
            preset: preset.into(),
            model: ModelConfig::preset(preset).expect("known preset"),
            synth: SyntheticConfig::default(),
            tracker: TrackerConfig::default(),
            train: TrainConfig::desk(),
            eval_sequences: 20,
            bench: BenchConfig::default(),
            check_scan_instances: 200,
            check_causality_instances: 100,
            check_property_cases: 500,
            grad: GradCheckConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn bad(key: &str, value: &str, why: impl Display) -> Error {
    Error::Config(format!("{key} = {value}: {why}"))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| bad(key, v, e))
}

fn pair<T: FromStr>(key: &str, v: &str, sep: char) -> Result<(T, T)>
where
    T::Err: Display,
{
    match v.split_once(sep) {
        Some((a, b)) => Ok((num(key, a.trim())?, num(key, b.trim())?)),
        None => {
            let x: T = num(key, v)?;
            let y: T = num(key, v)?;
            Ok((x, y))
        }
    }
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

fn optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |x| x.to_string())
}

/// Splits text into `(line number, key, value)`.
fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let items = entries(text)?;
        let mut seen = std::collections::HashSet::new();
        for (line, k, _) in &items {
            if !seen.insert(k.as_str()) {
                return Err(Error::Config(format!("line {line}: {k} is set twice")));
            }
        }
        let mut cfg = RunConfig::default();
        if let Some((_, _, v)) = items.iter().find(|(_, k, _)| k == "model.preset") {
            cfg.set("model.preset", v)?;
        }
        for (line, k, v) in &items {
            if k != "model.preset" {
                cfg.set(k, v)
                    .map_err(|e| Error::Config(format!("line {line}: {}", strip(e))))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        let t = &self.train;
        if t.templates.0 == 0 || t.templates.0 > t.templates.1 || t.templates.1 > self.model.max_templates {
            return Err(Error::Config(format!(
                "train.templates {:?} must satisfy 1 <= min <= max <= model.max_templates ({})",
                t.templates, self.model.max_templates
            )));
        }
        if t.batch_size == 0 || t.worlds == 0 {
            return Err(Error::Config(
                "train.batch_size and train.worlds must be positive".into(),
            ));
        }
        if self.tracker.update_interval == 0 || self.tracker.memory_cap == 0 {
            return Err(Error::Config(
                "tracker.update_interval and tracker.memory_cap must be positive".into(),
            ));
        }
        if self.bench.k_max == 0 || self.bench.repeats == 0 {
            return Err(Error::Config("bench.k_max and bench.repeats must be positive".into()));
        }
        Ok(())
    }

    /// Applies one `key = value`; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.synth;
        let t = &mut self.train;
        match key {
            "model.preset" => {
                *m = ModelConfig::preset(v)
                    .ok_or_else(|| bad(key, v, "presets are s256, m256, m384, desk, small, tiny"))?;
                self.preset = v.into();
            }
            "model.template_size" => m.template_size = pair(key, v, 'x')?,
            "model.search_size" => m.search_size = pair(key, v, 'x')?,
            "model.patch" => m.patch = num(key, v)?,
            "model.n_blocks" => m.n_blocks = num(key, v)?,
            "model.d_model" => m.d_model = num(key, v)?,
            "model.d_inner" => m.d_inner = num(key, v)?,
            "model.states" => m.states = num(key, v)?,
            "model.n_templates" => m.n_templates = num(key, v)?,
            "model.max_templates" => m.max_templates = num(key, v)?,
            "model.channels" => m.channels = num(key, v)?,
            "model.conv_kernel" => m.conv_kernel = num(key, v)?,
            "model.head_width" => m.head_width = num(key, v)?,
            "model.delta_mode" => {
                m.delta_mode = DeltaMode::parse(v).ok_or_else(|| {
                    let names: Vec<&str> = DeltaMode::ALL.iter().map(|d| d.name()).collect();
                    bad(key, v, format!("expected one of {}", names.join(", ")))
                })?
            }
            "model.interaction" => m.interaction = flag(key, v)?,
            "model.per_frame_conv" => m.per_frame_conv = flag(key, v)?,
            "model.template_factor" => m.template_factor = num(key, v)?,
            "model.search_factor" => m.search_factor = num(key, v)?,
            "model.swap_size_extent" => m.swap_size_extent = flag(key, v)?,
            "model.lambda_l1" => m.lambda_l1 = num(key, v)?,
            "model.lambda_giou" => m.lambda_giou = num(key, v)?,

            "synth.image_size" => s.image_size = pair(key, v, 'x')?,
            "synth.object_size" => s.object_size = pair(key, v, ',')?,
            "synth.speed" => s.speed = pair(key, v, ',')?,
            "synth.heading" => s.heading = optional(key, v)?,
            "synth.jitter" => s.jitter = num(key, v)?,
            "synth.distractors" => s.distractors = num(key, v)?,
            "synth.similarity" => s.similarity = num(key, v)?,
            "synth.occluder_prob" => s.occluder_prob = num(key, v)?,
            "synth.occluder_frames" => s.occluder_frames = num(key, v)?,
            "synth.length" => s.length = num(key, v)?,

            "tracker.update_interval" => self.tracker.update_interval = num(key, v)?,
            "tracker.memory_cap" => self.tracker.memory_cap = num(key, v)?,
            "tracker.n_h" => self.tracker.n_h = num(key, v)?,

            "train.steps" => t.steps = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.lr_backbone" => t.lr_backbone = num(key, v)?,
            "train.lr_head" => t.lr_head = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.beta1" => t.beta1 = num(key, v)?,
            "train.beta2" => t.beta2 = num(key, v)?,
            "train.eps" => t.eps = num(key, v)?,
            "train.grad_clip" => t.grad_clip = optional(key, v)?,
            "train.templates" => t.templates = pair(key, v, ',')?,
            "train.worlds" => t.worlds = num(key, v)?,
            "train.jitter_center" => t.jitter.center = num(key, v)?,
            "train.jitter_scale" => t.jitter.scale = num(key, v)?,

            "eval.sequences" => self.eval_sequences = num(key, v)?,

            "bench.k_max" => self.bench.k_max = num(key, v)?,
            "bench.repeats" => self.bench.repeats = num(key, v)?,
            "bench.warmup" => self.bench.warmup = num(key, v)?,
            "bench.variants" => {
                self.bench.variants = v
                    .split(',')
                    .map(|p| Variant::parse(p.trim()).ok_or_else(|| bad(key, v, "variants are sasm, attention")))
                    .collect::<Result<_>>()?
            }

            "check.scan_instances" => self.check_scan_instances = num(key, v)?,
            "check.causality_instances" => self.check_causality_instances = num(key, v)?,
            "check.property_cases" => self.check_property_cases = num(key, v)?,
            "check.grad_seeds" => self.grad.seeds = (0..num::<u64>(key, v)?).collect(),
            "check.grad_per_group" => self.grad.per_group = num(key, v)?,

            "seed" => self.seed = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line.
    pub fn render(&self) -> String {
        let m = &self.model;
        let s = &self.synth;
        let t = &self.train;
        let xy = |(a, b): (usize, usize)| format!("{a}x{b}");
        let variants: Vec<&str> = self.bench.variants.iter().map(|v| v.name()).collect();
        let lines: Vec<(&str, String)> = vec![
            ("model.preset", self.preset.clone()),
            ("model.template_size", xy(m.template_size)),
            ("model.search_size", xy(m.search_size)),
            ("model.patch", m.patch.to_string()),
            ("model.n_blocks", m.n_blocks.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.d_inner", m.d_inner.to_string()),
            ("model.states", m.states.to_string()),
            ("model.n_templates", m.n_templates.to_string()),
            ("model.max_templates", m.max_templates.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.conv_kernel", m.conv_kernel.to_string()),
            ("model.head_width", m.head_width.to_string()),
            ("model.delta_mode", m.delta_mode.name().to_string()),
            ("model.interaction", m.interaction.to_string()),
            ("model.per_frame_conv", m.per_frame_conv.to_string()),
            ("model.template_factor", m.template_factor.to_string()),
            ("model.search_factor", m.search_factor.to_string()),
            ("model.swap_size_extent", m.swap_size_extent.to_string()),
            ("model.lambda_l1", m.lambda_l1.to_string()),
            ("model.lambda_giou", m.lambda_giou.to_string()),
            ("synth.image_size", xy(s.image_size)),
            ("synth.object_size", format!("{},{}", s.object_size.0, s.object_size.1)),
            ("synth.speed", format!("{},{}", s.speed.0, s.speed.1)),
            ("synth.heading", show_opt(&s.heading)),
            ("synth.jitter", s.jitter.to_string()),
            ("synth.distractors", s.distractors.to_string()),
            ("synth.similarity", s.similarity.to_string()),
            ("synth.occluder_prob", s.occluder_prob.to_string()),
            ("synth.occluder_frames", s.occluder_frames.to_string()),
            ("synth.length", s.length.to_string()),
            ("tracker.update_interval", self.tracker.update_interval.to_string()),
            ("tracker.memory_cap", self.tracker.memory_cap.to_string()),
            ("tracker.n_h", self.tracker.n_h.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr_backbone", t.lr_backbone.to_string()),
            ("train.lr_head", t.lr_head.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.grad_clip", show_opt(&t.grad_clip)),
            ("train.templates", format!("{},{}", t.templates.0, t.templates.1)),
            ("train.worlds", t.worlds.to_string()),
            ("train.jitter_center", t.jitter.center.to_string()),
            ("train.jitter_scale", t.jitter.scale.to_string()),
            ("eval.sequences", self.eval_sequences.to_string()),
            ("bench.k_max", self.bench.k_max.to_string()),
            ("bench.repeats", self.bench.repeats.to_string()),
            ("bench.warmup", self.bench.warmup.to_string()),
            ("bench.variants", variants.join(",")),
            ("check.scan_instances", self.check_scan_instances.to_string()),
            ("check.causality_instances", self.check_causality_instances.to_string()),
            ("check.property_cases", self.check_property_cases.to_string()),
            ("check.grad_seeds", self.grad.seeds.len().to_string()),
            ("check.grad_per_group", self.grad.per_group.to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Seeds every component from the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            synth: self.synth.clone(),
            ..self.train.clone()
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            model: self.model.clone(),
            seed: self.seed,
            ..self.bench.clone()
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_render_and_parse_back() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn preset_applies_before_overrides() {
        let cfg = RunConfig::parse("model.d_model = 24\nmodel.preset = tiny\n").unwrap();
        assert_eq!(cfg.model.d_model, 24);
        assert_eq!(cfg.model.search_size, (32, 32));
    }

    #[test]
    fn unknown_and_repeated_keys_are_rejected() {
        let e = RunConfig::parse("seed = 1\nlearning_rate = 3\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2") && e.contains("learning_rate"), "{e}");
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
    }

    #[test]
    fn values_are_typed() {
        let cfg = RunConfig::parse(
            "# comment\nsynth.heading = 0.5\ntrain.grad_clip = none\nmodel.delta_mode = channel_only\nsynth.image_size = 96x128\n",
        )
        .unwrap();
        assert_eq!(cfg.synth.heading, Some(0.5));
        assert_eq!(cfg.train.grad_clip, None);
        assert_eq!(cfg.model.delta_mode, DeltaMode::ChannelOnly);
        assert_eq!(cfg.synth.image_size, (96, 128));
        assert!(RunConfig::parse("model.delta_mode = fast").is_err());
        assert!(RunConfig::parse("train.steps = -4").is_err());
    }

    #[test]
    fn invalid_geometry_is_a_config_error() {
        let e = RunConfig::parse("model.patch = 7").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }
}
