//! Trains the `small` preset with the desk settings and tracks the 20
//! held-out sequences.
//!
//! cargo run --release -p smtk --example train_and_track -- [steps]

use std::time::Instant;

use smtk::lab::eval::{evaluate, heldout_worlds};
use smtk::lab::train::{train, TrainConfig};
use smtk::model::{ModelConfig, ModelParams};
use smtk::tracker::TrackerConfig;

fn main() -> smtk::Result<()> {
    let mut tc = TrainConfig::desk();
    if let Some(steps) = std::env::args().nth(1) {
        tc.steps = steps.parse().expect("steps must be an integer");
    }
    let mut params = ModelParams::<f32>::init(&ModelConfig::small(), 0)?;
    let t = Instant::now();
    train(&mut params, &tc, |r| {
        if r.step % 100 == 0 {
            println!(
                "step {:>5} loss {:.4} ({:.0}s)",
                r.step,
                r.total,
                t.elapsed().as_secs_f64()
            );
        }
    })?;
    let results = evaluate(&params, &heldout_worlds(&tc.synth, 20)?, TrackerConfig::default())?;
    let n = results.len() as f64;
    let ao = results.iter().map(|r| r.0.ao).sum::<f64>() / n;
    let base = results.iter().map(|r| r.1.ao).sum::<f64>() / n;
    println!("AO {ao:.3}, keep-initial-box AO {base:.3}");
    Ok(())
}
