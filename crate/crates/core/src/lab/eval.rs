//! Running trackers over synthetic sequences and scoring them.

use crate::error::Result;
use crate::image::BBox;
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::tracker::session::{init_session, TraceRow, TrackerConfig};

use super::metrics::{compute_metrics, Metrics};
use super::synth::{Sequence, SyntheticConfig, World};
use super::train::heldout_seed;

/// Result of tracking one sequence.
#[derive(Clone, Debug)]
pub struct TrackRun {
    /// Predictions for frames `2..=N`.
    pub boxes: Vec<BBox>,
    pub trace: Vec<TraceRow>,
    pub metrics: Metrics,
}

/// Tracks `seq` from its first ground-truth box. Metrics cover frames 2..N.
pub fn track_sequence<T: Scalar>(model: &ModelParams<T>, seq: &Sequence, cfg: TrackerConfig) -> Result<TrackRun> {
    let mut s = init_session(model, &seq.frames[0], seq.boxes[0], cfg)?;
    let boxes = seq.frames[1..]
        .iter()
        .map(|f| s.track_frame(f))
        .collect::<Result<Vec<_>>>()?;
    let metrics = compute_metrics(&boxes, &seq.boxes[1..])?;
    Ok(TrackRun {
        boxes,
        trace: s.trace,
        metrics,
    })
}

/// The keep-initial-box baseline over frames 2..N.
pub fn static_baseline(boxes: &[BBox]) -> Result<Metrics> {
    let pred = vec![boxes[0]; boxes.len().saturating_sub(1)];
    compute_metrics(&pred, &boxes[1..])
}

/// Held-out sequences `0..count` under `synth` (its seed is replaced).
pub fn heldout_worlds(synth: &SyntheticConfig, count: usize) -> Result<Vec<World>> {
    (0..count)
        .map(|i| {
            World::new(&SyntheticConfig {
                seed: heldout_seed(i),
                ..synth.clone()
            })
        })
        .collect()
}

pub fn render(world: &World) -> Sequence {
    Sequence {
        frames: (0..world.len()).map(|t| world.render(t)).collect(),
        boxes: world.boxes().to_vec(),
    }
}

/// Per-sequence metrics of the tracker and the static baseline.
pub fn evaluate<T: Scalar>(
    model: &ModelParams<T>,
    worlds: &[World],
    cfg: TrackerConfig,
) -> Result<Vec<(Metrics, Metrics)>> {
    worlds
        .iter()
        .map(|w| {
            let seq = render(w);
            Ok((track_sequence(model, &seq, cfg)?.metrics, static_baseline(&seq.boxes)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_baseline_is_perfect_on_still_targets() {
        let w = World::new(&SyntheticConfig {
            speed: (0.0, 0.0),
            jitter: 0.0,
            length: 10,
            ..Default::default()
        })
        .unwrap();
        let m = static_baseline(w.boxes()).unwrap();
        assert_eq!((m.ao, m.overlaps.len()), (1.0, 9));
    }

    #[test]
    fn heldout_seeds_are_stable() {
        let a = heldout_worlds(&SyntheticConfig::default(), 3).unwrap();
        let b = heldout_worlds(&SyntheticConfig::default(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].boxes(), a[1].boxes());
    }
}
