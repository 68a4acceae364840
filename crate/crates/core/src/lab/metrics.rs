//! Overlap metrics over tracked sequences.

use std::io::Write;

use crate::error::{ensure, Error, Result};
use crate::image::BBox;

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Mean IoU.
    pub ao: f64,
    /// Fraction of frames with IoU above 0.5.
    pub sr50: f64,
    /// Fraction of frames with IoU above 0.75.
    pub sr75: f64,
    pub overlaps: Vec<f64>,
}

pub fn success_rate(overlaps: &[f64], threshold: f64) -> f64 {
    if overlaps.is_empty() {
        return 0.0;
    }
    overlaps.iter().filter(|&&o| o > threshold).count() as f64 / overlaps.len() as f64
}

pub fn compute_metrics(pred: &[BBox], gt: &[BBox]) -> Result<Metrics> {
    ensure!(
        pred.len() == gt.len(),
        "{} predictions for {} ground-truth boxes",
        pred.len(),
        gt.len()
    );
    let overlaps: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let ao = if overlaps.is_empty() {
        0.0
    } else {
        overlaps.iter().sum::<f64>() / overlaps.len() as f64
    };
    Ok(Metrics {
        ao,
        sr50: success_rate(&overlaps, 0.5),
        sr75: success_rate(&overlaps, 0.75),
        overlaps,
    })
}

/// Mean of per-sequence metrics.
pub fn aggregate(per_sequence: &[Metrics]) -> Metrics {
    let n = per_sequence.len().max(1) as f64;
    let mean = |f: fn(&Metrics) -> f64| per_sequence.iter().map(f).sum::<f64>() / n;
    Metrics {
        ao: mean(|m| m.ao),
        sr50: mean(|m| m.sr50),
        sr75: mean(|m| m.sr75),
        overlaps: per_sequence.iter().flat_map(|m| m.overlaps.iter().copied()).collect(),
    }
}

/// One row per named sequence plus a final `mean` row.
pub fn write_metrics_csv(rows: &[(String, Metrics)], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sequence", "frames", "ao", "sr50", "sr75"])?;
    for (name, m) in rows {
        out.write_record([
            name.clone(),
            m.overlaps.len().to_string(),
            m.ao.to_string(),
            m.sr50.to_string(),
            m.sr75.to_string(),
        ])?;
    }
    let all: Vec<Metrics> = rows.iter().map(|(_, m)| m.clone()).collect();
    let agg = aggregate(&all);
    out.write_record([
        "mean".to_string(),
        agg.overlaps.len().to_string(),
        agg.ao.to_string(),
        agg.sr50.to_string(),
        agg.sr75.to_string(),
    ])?;
    out.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// A box with IoU `q` against the unit-height reference `[0,0,1,1]`.
    fn with_iou(q: f64) -> BBox {
        BBox::from_corners(0.0, 0.0, q, 1.0)
    }

    #[test]
    fn perfect_and_disjoint() {
        let gt = vec![BBox::new(5.0, 5.0, 2.0, 2.0); 4];
        let m = compute_metrics(&gt, &gt).unwrap();
        assert_eq!((m.ao, m.sr50, m.sr75), (1.0, 1.0, 1.0));
        let far = vec![BBox::new(50.0, 50.0, 2.0, 2.0); 4];
        assert_eq!(compute_metrics(&far, &gt).unwrap().ao, 0.0);
    }

    #[test]
    fn mixed_overlaps() {
        let gt = vec![BBox::from_corners(0.0, 0.0, 1.0, 1.0); 4];
        let pred = vec![with_iou(0.6), with_iou(0.8), with_iou(0.6), with_iou(0.8)];
        let m = compute_metrics(&pred, &gt).unwrap();
        assert!((m.ao - 0.7).abs() < 1e-12);
        assert_eq!((m.sr50, m.sr75), (1.0, 0.5));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(compute_metrics(&[BBox::default()], &[]).is_err());
    }

    #[test]
    fn csv_has_aggregate_row() {
        let gt = vec![BBox::from_corners(0.0, 0.0, 1.0, 1.0); 2];
        let a = compute_metrics(&[with_iou(0.6), with_iou(0.8)], &gt).unwrap();
        let b = compute_metrics(&gt, &gt).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&[("a".into(), a), ("b".into(), b)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let last = text.lines().last().unwrap();
        assert!(last.starts_with("mean,4,0.85"), "{last}");
    }

    proptest! {
        #[test]
        fn bounds_and_ordering(coords in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 0.5f64..20.0, 0.5f64..20.0), 1..40)) {
            let pred: Vec<BBox> = coords.iter().map(|&(x, y, w, h)| BBox::new(x, y, w, h)).collect();
            let gt: Vec<BBox> = coords.iter().map(|&(x, y, w, h)| BBox::new(y, x, h, w)).collect();
            let m = compute_metrics(&pred, &gt).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.ao));
            prop_assert!((0.0..=1.0).contains(&m.sr50));
            prop_assert!(m.sr75 <= m.sr50);
        }
    }
}
