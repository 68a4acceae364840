//! `smtk`: train, track, benchmark and verify.

mod config;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use smtk::check::{run_checks, CheckConfig};
use smtk::lab::bench::{complexity_bench, fit_report, write_bench_csv};
use smtk::lab::eval::{heldout_worlds, render, static_baseline, track_sequence};
use smtk::lab::metrics::{aggregate, write_metrics_csv};
use smtk::lab::train::{train, write_loss_csv};
use smtk::model::{checkpoint, ModelParams};
use smtk::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "smtk", version, about = "State-aware Mamba tracker lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Parent of the timestamped run directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic sequences; writes model.smtk and loss.csv.
    Train(Common),
    /// Track held-out synthetic sequences with a checkpoint.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        update_interval: Option<usize>,
        #[arg(long)]
        memory_cap: Option<usize>,
        #[arg(long)]
        n_h: Option<usize>,
    },
    /// Analytic FLOPs and wall time of the SASM stack and the attention baseline.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Run the invariant battery.
    Check {
        #[command(flatten)]
        common: Common,
        /// Negate the analytic gradient of arrays with this name prefix.
        #[arg(long, value_name = "PREFIX")]
        inject_sign_flip: Option<String>,
    },
}

enum Failure {
    Error(Error),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } | Error::NumericDomain(_) => 4,
        _ => 2,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::parse(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })?
        }
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `<out_dir>/<timestamp>-<command>`, adding a counter rather than
/// reusing an existing directory, and echoes the resolved config into it.
fn run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let mut n = 0;
    let dir = loop {
        let name = if n == 0 {
            format!("{stamp}-{command}")
        } else {
            format!("{stamp}-{command}-{n}")
        };
        let dir = cfg.out_dir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => break dir,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    };
    write_file(&dir.join("config.txt"), cfg.render().as_bytes())?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = run_dir(&cfg, "train")?;
    let tc = cfg.train_config();
    let mut params = ModelParams::<f32>::init(&cfg.model, cfg.seed)?;
    info!(
        "training {} preset for {} steps, batch {}",
        cfg.preset, tc.steps, tc.batch_size
    );
    let every = (tc.steps / 20).max(1);
    let rows = train(&mut params, &tc, |r| {
        if r.step % every == 0 || r.step + 1 == tc.steps {
            info!(
                "step {:>5} loss {:.4} (focal {:.4} l1 {:.4} giou {:.4}) |g| {:.3}",
                r.step, r.total, r.focal, r.l1, r.giou, r.grad_norm
            );
        }
    })?;
    write_loss_csv(&rows, create(&dir.join("loss.csv"))?)?;
    checkpoint::save(&dir.join("model.smtk"), &params)?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_track(common: &Common, ckpt: &Path, sequences: Option<usize>, overrides: [Option<usize>; 3]) -> Result<()> {
    let mut cfg = load_config(common)?;
    let [t, cap, n_h] = overrides;
    cfg.tracker.update_interval = t.unwrap_or(cfg.tracker.update_interval);
    cfg.tracker.memory_cap = cap.unwrap_or(cfg.tracker.memory_cap);
    cfg.tracker.n_h = n_h.unwrap_or(cfg.tracker.n_h);
    cfg.eval_sequences = sequences.unwrap_or(cfg.eval_sequences);
    cfg.validate()?;
    let mut params = ModelParams::<f32>::zeros(&cfg.model)?;
    checkpoint::load(ckpt, &mut params).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Config(format!("{} does not fit the configured model: {m}", ckpt.display())),
        other => other,
    })?;
    let dir = run_dir(&cfg, "track")?;
    let worlds = heldout_worlds(&cfg.synth, cfg.eval_sequences)?;
    let mut tracked = Vec::new();
    let mut baseline = Vec::new();
    for (i, w) in worlds.iter().enumerate() {
        let seq = render(w);
        let run = track_sequence(&params, &seq, cfg.tracker)?;
        smtk::tracker::session::write_trace(&run.trace, create(&dir.join(format!("trace_{i:03}.csv")))?)?;
        info!("sequence {i}: AO {:.3}", run.metrics.ao);
        let name = format!("heldout_{i:03}");
        baseline.push((name.clone(), static_baseline(&seq.boxes)?));
        tracked.push((name, run.metrics));
    }
    write_metrics_csv(&tracked, create(&dir.join("metrics.csv"))?)?;
    write_metrics_csv(&baseline, create(&dir.join("baseline_metrics.csv"))?)?;
    let mean = aggregate(&tracked.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>());
    let base = aggregate(&baseline.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>());
    println!(
        "AO {:.4} SR50 {:.4} SR75 {:.4} | keep-initial-box AO {:.4}",
        mean.ao, mean.sr50, mean.sr75, base.ao
    );
    println!("{}", dir.display());
    Ok(())
}

fn cmd_bench(common: &Common, k_max: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.bench.k_max = k_max.unwrap_or(cfg.bench.k_max);
    cfg.validate()?;
    let dir = run_dir(&cfg, "bench")?;
    let rows = complexity_bench(&cfg.bench_config())?;
    write_bench_csv(&rows, create(&dir.join("bench.csv"))?)?;
    let mut fits = String::new();
    for f in fit_report(&rows) {
        fits += &format!(
            "{} linear R2 {:.5} (slope {:.1} ns/template) quadratic R2 {:.5}\n",
            f.variant.name(),
            f.linear.r2,
            f.linear.slope,
            f.quadratic_r2
        );
    }
    write_file(&dir.join("fits.txt"), fits.as_bytes())?;
    print!("{fits}");
    println!("{}", dir.display());
    Ok(())
}

fn cmd_check(common: &Common, flip: Option<String>) -> Result<bool, Failure> {
    let cfg = load_config(common)?;
    let dir = run_dir(&cfg, "check")?;
    let mut grad = cfg.grad.clone();
    grad.flip_sign = flip;
    let report = run_checks(&CheckConfig {
        seed: cfg.seed,
        scan_instances: cfg.check_scan_instances,
        causality_instances: cfg.check_causality_instances,
        property_cases: cfg.check_property_cases,
        grad,
    })?;
    let text = report.to_string();
    write_file(&dir.join("report.txt"), format!("{text}\n").as_bytes())?;
    println!("{text}");
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Command::Train(c) => cmd_train(&c)?,
        Command::Track {
            common,
            checkpoint,
            sequences,
            update_interval,
            memory_cap,
            n_h,
        } => cmd_track(&common, &checkpoint, sequences, [update_interval, memory_cap, n_h])?,
        Command::Bench { common, k_max } => cmd_bench(&common, k_max)?,
        Command::Check {
            common,
            inject_sign_flip,
        } => {
            if !cmd_check(&common, inject_sign_flip)? {
                return Err(Failure::Check);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => {
            eprintln!("error: invariant checks failed");
            ExitCode::from(3)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
