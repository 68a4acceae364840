//! Online tracking with propagated hidden states.

use std::io::Write;

use log::{debug, warn};

use crate::block::BlockState;
use crate::error::{ensure, Error, Result};
use crate::image::{BBox, Image};
use crate::model::embed::{embed_search, embed_template};
use crate::model::head::{decode_box, head_forward, HeadMaps};
use crate::model::{backbone_forward, ModelParams};
use crate::scalar::Scalar;
use crate::ssm::FrameSequence;

use super::crop::{crop_region, CropTransform};
use super::memory::StateMemory;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerConfig {
    /// Frames between template updates.
    pub update_interval: usize,
    pub memory_cap: usize,
    /// States sampled from memory per update.
    pub n_h: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            update_interval: 20,
            memory_cap: 50,
            n_h: 10,
        }
    }
}

/// One line of the per-frame trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub frame_index: usize,
    pub bbox: BBox,
    /// Peak classification score; absent on the initialization frame.
    pub cls_peak: Option<f64>,
    pub memory_size: usize,
    pub scan_count: usize,
}

/// Replaces the network head, given the search crop and its transform.
pub type HeadOverride<T> = Box<dyn Fn(&Image, &CropTransform) -> HeadMaps<T>>;

pub struct TrackSession<'m, T: Scalar> {
    pub model: &'m ModelParams<T>,
    pub config: TrackerConfig,
    /// Seeds for every block on the next search frame.
    pub active_states: Vec<BlockState<T>>,
    pub memory: StateMemory<T>,
    /// 1-based index of the last processed frame.
    pub frame_counter: usize,
    /// Image coordinates.
    pub last_box: BBox,
    /// Templates embedded so far; selects the temporal embedding row.
    pub templates_seen: usize,
    /// Backbone passes over template tokens.
    pub scan_count: usize,
    pub trace: Vec<TraceRow>,
    head_override: Option<HeadOverride<T>>,
}

fn template_sequence<T: Scalar>(
    model: &ModelParams<T>,
    frame: &Image,
    bbox: &BBox,
    slot: usize,
) -> Result<FrameSequence<T>> {
    let cfg = &model.cfg;
    let (crop, t) = crop_region(frame, bbox, cfg.template_factor, cfg.template_size);
    let local = t.box_to_crop(bbox);
    let (tokens, _, _) = embed_template(&crop, &local, slot, cfg, &model.embed)?;
    FrameSequence::single(cfg.d_model, tokens)
}

/// Crops and scans the first template from the learnable initial states.
pub fn init_session<'m, T: Scalar>(
    model: &'m ModelParams<T>,
    frame: &Image,
    bbox: BBox,
    config: TrackerConfig,
) -> Result<TrackSession<'m, T>> {
    ensure!(bbox.is_valid(), "initial box {bbox:?} is degenerate");
    ensure!(config.update_interval >= 1, "update interval must be at least 1");
    ensure!(
        frame.channels == model.cfg.channels,
        "frame has {} channels, model expects {}",
        frame.channels,
        model.cfg.channels
    );
    let seq = template_sequence(model, frame, &bbox, 0)?;
    let (_, states) = backbone_forward(model, &seq, None)?;
    let mut memory = StateMemory::new(config.memory_cap);
    memory.push(1, states.clone())?;
    let mut s = TrackSession {
        model,
        config,
        active_states: states,
        memory,
        frame_counter: 1,
        last_box: bbox,
        templates_seen: 1,
        scan_count: 1,
        trace: Vec::new(),
        head_override: None,
    };
    s.record(None);
    Ok(s)
}

impl<'m, T: Scalar> TrackSession<'m, T> {
    pub fn set_head_override(&mut self, f: HeadOverride<T>) {
        self.head_override = Some(f);
    }

    fn record(&mut self, cls_peak: Option<f64>) {
        self.trace.push(TraceRow {
            frame_index: self.frame_counter,
            bbox: self.last_box,
            cls_peak,
            memory_size: self.memory.len(),
            scan_count: self.scan_count,
        });
    }

    /// Tracks the next frame and, on update frames, refreshes the template
    /// states. Returns the box in image coordinates.
    pub fn track_frame(&mut self, frame: &Image) -> Result<BBox> {
        let cfg = &self.model.cfg;
        let (crop, t) = crop_region(frame, &self.last_box, cfg.search_factor, cfg.search_size);
        let maps = match &self.head_override {
            Some(f) => f(&crop, &t),
            None => {
                let (tokens, _) = embed_search(&crop, cfg, &self.model.embed)?;
                let seq = FrameSequence::single(cfg.d_model, tokens)?;
                let (features, _) = backbone_forward(self.model, &seq, Some(&self.active_states))?;
                head_forward(&features, cfg, &self.model.head)?
            }
        };
        let peak = maps.cls[maps.peak()].as_f64();
        let local = decode_box(&maps, cfg);
        let pred = t
            .box_to_image(&local)
            .clip_to(frame.width as f64, frame.height as f64, 1.0);
        if !pred.is_valid() {
            return Err(Error::NumericDomain(format!(
                "frame {}: decoded box {pred:?} is not finite",
                self.frame_counter + 1
            )));
        }
        self.frame_counter += 1;
        self.last_box = pred;
        if self.frame_counter.is_multiple_of(self.config.update_interval) {
            self.update_template(frame, pred)?;
        }
        self.record(Some(peak));
        Ok(pred)
    }

    /// Scans a new template seeded by the active states, stores the result
    /// and re-derives the active states from sampled memory.
    pub fn update_template(&mut self, frame: &Image, bbox: BBox) -> Result<()> {
        if !(bbox.is_valid() && bbox.w >= 1.0 && bbox.h >= 1.0) {
            warn!(
                "frame {}: skipping template update for box {bbox:?}",
                self.frame_counter
            );
            return Ok(());
        }
        let seq = template_sequence(self.model, frame, &bbox, self.templates_seen)?;
        let (_, states) = backbone_forward(self.model, &seq, Some(&self.active_states))?;
        self.templates_seen += 1;
        self.scan_count += 1;
        self.memory.push(self.frame_counter, states)?;
        self.active_states = self.memory.sample_average(self.config.n_h)?;
        debug!(
            "frame {}: template update, memory {:?}",
            self.frame_counter,
            self.memory.frame_indexes()
        );
        Ok(())
    }

    pub fn write_trace(&self, w: impl Write) -> Result<()> {
        write_trace(&self.trace, w)
    }
}

/// CSV with header `frame_index,x,y,w,h,cls_peak,memory_size,scan_count`;
/// boxes are center format in image pixels.
pub fn write_trace(rows: &[TraceRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "frame_index",
        "x",
        "y",
        "w",
        "h",
        "cls_peak",
        "memory_size",
        "scan_count",
    ])?;
    for r in rows {
        out.write_record([
            r.frame_index.to_string(),
            r.bbox.x.to_string(),
            r.bbox.y.to_string(),
            r.bbox.w.to_string(),
            r.bbox.h.to_string(),
            r.cls_peak.map(|v| v.to_string()).unwrap_or_default(),
            r.memory_size.to_string(),
            r.scan_count.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

/// Template scans for a session of `frames` frames: the initial scan plus
/// one per update frame `i ≤ frames` with `i mod T = 0`.
pub fn expected_scan_count(frames: usize, update_interval: usize) -> usize {
    if frames == 0 {
        return 0;
    }
    1 + (2..=frames).filter(|i| i % update_interval == 0).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::embed::compose_inputs;
    use crate::model::loss::peak_cell;
    use crate::model::ModelConfig;
    use crate::nn::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_frame(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = uniform(&mut rng, 3 * h * w, 0.5);
        Image::from_vec(3, h, w, data.into_iter().map(|v| v as f32 + 0.5).collect()).unwrap()
    }

    fn tiny_model() -> ModelParams<f32> {
        ModelParams::init(&ModelConfig::tiny(), 7).unwrap()
    }

    #[test]
    fn init_populates_memory_and_states() {
        let m = tiny_model();
        let s = init_session(
            &m,
            &noise_frame(1, 60, 80),
            BBox::new(40.0, 30.0, 12.0, 10.0),
            TrackerConfig::default(),
        )
        .unwrap();
        assert_eq!(s.memory.len(), 1);
        assert_eq!(s.memory.frame_indexes(), vec![1]);
        assert_eq!(s.active_states.len(), m.cfg.n_blocks);
    }

    #[test]
    fn init_states_match_concatenated_template_scan() {
        let m = tiny_model();
        let frame = noise_frame(2, 60, 80);
        let b = BBox::new(40.0, 30.0, 12.0, 10.0);
        let s = init_session(&m, &frame, b, TrackerConfig::default()).unwrap();
        let cfg = &m.cfg;
        let (tc, t) = crop_region(&frame, &b, cfg.template_factor, cfg.template_size);
        let (sc, _) = crop_region(&frame, &b, cfg.search_factor, cfg.search_size);
        let (seq, _) = compose_inputs(&[tc], &[t.box_to_crop(&b)], &sc, cfg, &m.embed).unwrap();
        let (_, states) = backbone_forward(&m, &seq.frame(0), None).unwrap();
        assert_eq!(states, s.active_states);
    }

    #[test]
    fn updates_follow_the_schedule() {
        let m = tiny_model();
        let frame = noise_frame(3, 60, 80);
        let cfg = TrackerConfig {
            update_interval: 5,
            memory_cap: 3,
            n_h: 2,
        };
        let mut s = init_session(&m, &frame, BBox::new(40.0, 30.0, 12.0, 10.0), cfg).unwrap();
        for i in 2..=23 {
            s.track_frame(&frame).unwrap();
            assert_eq!(s.frame_counter, i);
            if i == 5 {
                assert_eq!(s.memory.frame_indexes(), vec![1, 5]);
            }
            assert!(s.memory.len() <= 3);
        }
        assert_eq!(s.scan_count, expected_scan_count(23, 5));
        assert_eq!(s.scan_count, 1 + 23 / 5);
        // Gaps 9, 5, 5 after frame 20: the tie rule drops the newest entry.
        assert_eq!(s.memory.frame_indexes(), vec![1, 10, 15]);
        assert_eq!(s.trace.len(), 23);
    }

    #[test]
    fn active_states_are_mean_of_sampled_memory() {
        let m = tiny_model();
        let frame = noise_frame(4, 60, 80);
        let cfg = TrackerConfig {
            update_interval: 2,
            memory_cap: 10,
            n_h: 10,
        };
        let mut s = init_session(&m, &frame, BBox::new(40.0, 30.0, 12.0, 10.0), cfg).unwrap();
        for _ in 0..4 {
            s.track_frame(&frame).unwrap();
        }
        let e = &s.memory.entries;
        assert_eq!(e.len(), 3);
        for k in 0..m.cfg.n_blocks {
            for j in 0..e[0].states[k].forward.data.len() {
                let mean =
                    (e[0].states[k].forward.data[j] + e[1].states[k].forward.data[j] + e[2].states[k].forward.data[j])
                        / 3.0;
                assert!((s.active_states[k].forward.data[j] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn stubbed_head_recovers_static_target() {
        let m = tiny_model();
        let frame = noise_frame(5, 60, 80);
        let gt = BBox::new(37.0, 29.0, 9.0, 7.0);
        let mut s = init_session(&m, &frame, BBox::new(39.0, 27.0, 9.0, 7.0), TrackerConfig::default()).unwrap();
        let cfg = m.cfg.clone();
        s.set_head_override(Box::new(move |_, t| {
            let local = t.box_to_crop(&gt);
            let grid = cfg.search_grid();
            let (r, c) = peak_cell(&local, grid, cfg.patch);
            let cells = grid.0 * grid.1;
            let mut cls = vec![0.1f32; cells];
            cls[r * grid.1 + c] = 0.9;
            let mut size = vec![0.5f32; 2 * cells];
            size[2 * (r * grid.1 + c)] = (local.w / cfg.search_size.0 as f64) as f32;
            size[2 * (r * grid.1 + c) + 1] = (local.h / cfg.search_size.1 as f64) as f32;
            HeadMaps::from_probabilities(grid, cls, vec![0.5; 2 * cells], size).unwrap()
        }));
        for _ in 0..3 {
            let b = s.track_frame(&frame).unwrap();
            // One grid cell in image pixels for a crop around a 9x7 box.
            let cell = 4.0 * (16.0f64 * 9.0 * 7.0).sqrt() / 32.0;
            assert!((b.x - gt.x).abs() <= cell && (b.y - gt.y).abs() <= cell, "{b:?}");
            assert!((b.w - gt.w).abs() < 1e-3 && (b.h - gt.h).abs() < 1e-3);
        }
    }

    #[test]
    fn tracking_is_deterministic() {
        let m = tiny_model();
        let frames: Vec<Image> = (0..6).map(|i| noise_frame(10 + i, 60, 80)).collect();
        let run = || {
            let mut s = init_session(
                &m,
                &frames[0],
                BBox::new(40.0, 30.0, 12.0, 10.0),
                TrackerConfig::default(),
            )
            .unwrap();
            frames[1..]
                .iter()
                .map(|f| s.track_frame(f).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn degenerate_update_is_skipped() {
        let m = tiny_model();
        let frame = noise_frame(6, 60, 80);
        let mut s = init_session(&m, &frame, BBox::new(40.0, 30.0, 12.0, 10.0), TrackerConfig::default()).unwrap();
        s.update_template(&frame, BBox::new(10.0, 10.0, 0.0, 5.0)).unwrap();
        assert_eq!((s.memory.len(), s.scan_count), (1, 1));
    }

    #[test]
    fn trace_csv_layout() {
        let rows = [TraceRow {
            frame_index: 1,
            bbox: BBox::new(1.0, 2.0, 3.0, 4.5),
            cls_peak: None,
            memory_size: 1,
            scan_count: 1,
        }];
        let mut buf = Vec::new();
        write_trace(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "frame_index,x,y,w,h,cls_peak,memory_size,scan_count\n1,1,2,3,4.5,,1,1\n"
        );
    }

    #[test]
    fn scan_count_formula() {
        assert_eq!(expected_scan_count(1, 20), 1);
        assert_eq!(expected_scan_count(19, 20), 1);
        assert_eq!(expected_scan_count(20, 20), 2);
        assert_eq!(expected_scan_count(100, 20), 6);
        for n in 1..200 {
            assert_eq!(expected_scan_count(n, 7), 1 + n / 7);
        }
    }
}
