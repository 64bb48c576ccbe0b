//! `fcw`: generate scenarios, train, calibrate, replay warnings, evaluate,
//! benchmark and run ablations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fcw_core::bench::run_bench;
use fcw_core::drta::DrivingMode;
use fcw_core::hstan::{HstanModel, TrainState};
use fcw_core::metrics::{comparison_table, EvalReport};
use fcw_core::pipeline::{
    cmd_ablate, cmd_calibrate, cmd_eval, cmd_gen, cmd_train, cmd_warn, loss_log_path, Ablation, Baseline, RunConfig,
};

#[derive(Parser, Debug)]
#[command(name = "fcw", version, about = "Forward collision warning pipeline")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override values from the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Conformal miscoverage level.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Threshold multiplier; takes precedence over --mode.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// highway, urban or default.
    #[arg(long, global = true)]
    mode: Option<DrivingMode>,
    /// Comma-separated switches, e.g. `no_sam,fixed_threshold=0.4`.
    #[arg(long, global = true, value_delimiter = ',')]
    ablation: Vec<Ablation>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the scenario families and write the dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the loss log goes to `<out>.log.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fit conformal corrections on the calibration split.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay the test split tick by tick and write the warning log.
    Warn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Run directory for events.jsonl, predictions.csv and latency.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a run directory, or the constant-velocity baseline.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Run directory written by `warn`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// `cv` evaluates the constant-velocity baseline instead of a run.
        #[arg(long)]
        baseline: Option<String>,
        /// Earlier report files to print side by side with this one.
        #[arg(long, value_delimiter = ',')]
        compare: Vec<PathBuf>,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention work and inference latency against scene size.
    Bench {
        /// Trained weights; a freshly initialised model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline once per switch, plus the unablated model.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(a) = o.alpha {
        cfg.alpha = a;
    }
    if let Some(m) = o.mode {
        cfg.mode = Some(m);
    }
    if let Some(l) = o.lambda {
        cfg.mode = None;
        cfg.risk.weights.lambda = l;
    }
    cfg.effective()?;
    Ok(cfg)
}

fn write_report(out: Option<&Path>, text: &str) -> Result<()> {
    print!("{text}");
    if let Some(p) = out {
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.overrides)?;
    match cli.command {
        Command::Ablate { data, out } => {
            let switches = if cli.overrides.ablation.is_empty() {
                Ablation::ALL.to_vec()
            } else {
                cli.overrides.ablation.clone()
            };
            cfg.ablations.clear();
            let run = cmd_ablate(&cfg, &data, &out, &switches, |m| eprintln!("{m}"))?;
            let table = comparison_table(&run.reports);
            write_report(Some(&out.join("ablation.txt")), &table)?;
        }
        command => {
            cfg.ablations.extend(cli.overrides.ablation.iter().copied());
            run_single(&cfg, command)?;
        }
    }
    Ok(())
}

fn run_single(cfg: &RunConfig, command: Command) -> Result<()> {
    match command {
        Command::Gen { out } => {
            let s = cmd_gen(cfg, &out)?;
            println!("episodes={} danger_episodes={}", s.episodes, s.danger_episodes);
            for (split, n) in &s.windows {
                println!("windows_{split}={n}");
            }
            println!("fingerprint={}", s.fingerprint);
        }
        Command::Train { data, out, resume } => {
            let state = cmd_train(cfg, &data, &out, resume.as_deref(), |r| {
                eprintln!(
                    "epoch {:>4} lr {:.3e} loss {:.6} mse {:.6} pinball {:.6} collision {:.6}",
                    r.epoch, r.lr, r.loss, r.mse, r.pinball, r.collision
                )
            })?;
            println!("epochs={}", state.epochs_done());
            println!("checkpoint={}", out.display());
            println!("log={}", loss_log_path(&out).display());
        }
        Command::Calibrate { checkpoint, data, out } => {
            let s = cmd_calibrate(cfg, &checkpoint, &data, &out)?;
            let a = &s.artifact;
            println!("alpha={} n_cal={}", a.alpha, a.n_cal);
            println!("cal_raw_coverage={:.4} cal_calibrated_coverage={:.4}", a.raw_coverage, a.calibrated_coverage);
            if let (Some(r), Some(c)) = (s.test_raw_coverage, s.test_calibrated_coverage) {
                println!("test_raw_coverage={r:.4} test_calibrated_coverage={c:.4}");
            }
        }
        Command::Warn {
            checkpoint,
            calibration,
            data,
            out,
        } => {
            if calibration.is_none() && !cfg.no_cqr() {
                eprintln!("no --calibration given: raw quantile intervals are used");
            }
            let s = cmd_warn(cfg, &checkpoint, calibration.as_deref(), &data, &out)?;
            println!("episodes={} events={} triggered={}", s.episodes, s.events, s.triggered);
            if let Some(l) = s.latency {
                println!("latency_p50_ms={:.3} latency_p95_ms={:.3} latency_p99_ms={:.3}", l.p50_ms, l.p95_ms, l.p99_ms);
            }
        }
        Command::Eval {
            data,
            run,
            baseline,
            compare,
            out,
        } => {
            let report = match (baseline.as_deref(), run) {
                (Some("cv"), _) => cmd_eval(cfg, &data, Path::new("."), Baseline::ConstantVelocity)?,
                (Some(other), _) => bail!("unknown baseline `{other}` (expected `cv`)"),
                (None, Some(dir)) => cmd_eval(cfg, &data, &dir, Baseline::Replay)?,
                (None, None) => bail!("eval needs --run <dir> or --baseline cv"),
            };
            let mut text = report.to_text();
            if !compare.is_empty() {
                let mut all = Vec::with_capacity(compare.len() + 1);
                for p in &compare {
                    let t = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    all.push(EvalReport::parse(&t).with_context(|| format!("parsing {}", p.display()))?);
                }
                all.push(report);
                text.push('\n');
                text.push_str(&comparison_table(&all));
            }
            write_report(out.as_deref(), &text)?;
        }
        Command::Bench { checkpoint, sizes, out } => {
            let model = match checkpoint {
                Some(p) => TrainState::load(&p)?.model,
                None => HstanModel::new(cfg.effective()?.model, cfg.seed)?,
            };
            let mut bc = cfg.bench.clone();
            if !sizes.is_empty() {
                bc.sizes = sizes;
            }
            let report = run_bench(&model, &bc)?;
            write_report(out.as_deref(), &report.to_text())?;
        }
        Command::Ablate { .. } => unreachable!("handled by run"),
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
