use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use chunk_lab::bench::{
    cmd_collect, cmd_eval, cmd_sweep, cmd_trace, cmd_train, format_trend, MetricsRow, RunConfig, TrainStart,
};
use chunk_lab::net::Head;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Latency benchmark for action-chunking policies.
#[derive(Parser, Debug)]
#[command(name = "chunk-lab", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; built-in defaults fill anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set eval.trials=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Flow,
    Discrete,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Head {
        match h {
            HeadArg::Flow => Head::Velocity,
            HeadArg::Discrete => Head::Logits,
        }
    }
}

#[derive(Args, Debug)]
struct Checkpoints {
    /// Velocity-head checkpoint (sets eval.flow_checkpoint).
    #[arg(long)]
    flow: Option<PathBuf>,
    /// Logits-head checkpoint (sets eval.discrete_checkpoint).
    #[arg(long)]
    discrete: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record expert demonstrations into <out>/dataset.bin.
    Collect,
    /// Train one policy head.
    Train {
        #[arg(long, value_enum)]
        head: HeadArg,
        #[arg(long)]
        dataset: PathBuf,
        /// Start from these parameters with a fresh optimizer.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps, keeping the full schedule.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Evaluate the configured methods and delays into <out>/metrics.csv.
    Eval {
        #[command(flatten)]
        checkpoints: Checkpoints,
    },
    /// Evaluate every method at d = 0..4 into <out>/sweep.csv.
    Sweep {
        #[command(flatten)]
        checkpoints: Checkpoints,
    },
    /// Dump DiscreteRTC unmasking traces into <out>/trace.jsonl.
    Trace {
        #[arg(long)]
        discrete: Option<PathBuf>,
        /// Number of inferences to record (sets trace.inferences).
        #[arg(long)]
        inferences: Option<usize>,
    },
}

fn path_override(key: &str, path: &Option<PathBuf>) -> Option<String> {
    let p = path.as_ref()?;
    Some(format!("{key}={}", toml_string(&p.to_string_lossy())))
}

/// Basic TOML string literal.
fn toml_string(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn print_row(r: &MetricsRow) {
    eprintln!(
        "{:<18} d={} seed={} solve {:.3} [{:.3}, {:.3}] throughput {:.2} jerk {:.3}/{:.3}",
        r.method.name(),
        r.d,
        r.seed,
        r.solve_rate,
        r.solve_ci_low,
        r.solve_ci_high,
        r.throughput_256,
        r.boundary_jerk,
        r.within_jerk
    );
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut overrides = cli.common.overrides.clone();
    match &cli.command {
        Command::Eval { checkpoints } | Command::Sweep { checkpoints } => {
            overrides.extend(path_override("eval.flow_checkpoint", &checkpoints.flow));
            overrides.extend(path_override("eval.discrete_checkpoint", &checkpoints.discrete));
        }
        Command::Trace { discrete, inferences } => {
            overrides.extend(path_override("eval.discrete_checkpoint", discrete));
            overrides.extend(inferences.map(|n| format!("trace.inferences={n}")));
        }
        _ => {}
    }
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides).context("loading the run config")?;
    let out = &cli.common.out;

    match cli.command {
        Command::Collect => {
            let s = cmd_collect(&cfg, out)?;
            println!("{} episodes, {} records -> {} (sha256 {})", s.episodes, s.records, s.path.display(), s.hash);
        }
        Command::Train {
            head,
            dataset,
            init,
            resume,
            stop_at,
        } => {
            let start = match (init, resume) {
                (Some(p), None) => TrainStart::Init(p),
                (None, Some(p)) => TrainStart::Resume(p),
                (None, None) => TrainStart::Scratch,
                (Some(_), Some(_)) => bail!("--init and --resume are exclusive"),
            };
            let every = 100;
            let mut acc = 0.0;
            let s = cmd_train(&cfg, head.into(), &dataset, &start, stop_at, out, |l| {
                acc += l.loss;
                if (l.step + 1) % every == 0 {
                    eprintln!("step {:>6} loss {:.5} lr {:.2e}", l.step + 1, acc / every as f64, l.lr);
                    acc = 0.0;
                }
            })?;
            println!(
                "trained to step {}/{} -> {} (loss curve {})",
                s.step,
                s.total_steps,
                s.checkpoint.display(),
                s.loss_csv.display()
            );
        }
        Command::Eval { .. } => {
            let rows = cmd_eval(&cfg, out, print_row)?;
            println!("{} rows -> {}", rows.len(), out.join(chunk_lab::bench::METRICS_FILE).display());
        }
        Command::Sweep { .. } => {
            let s = cmd_sweep(&cfg, out, print_row)?;
            print!("{}", format_trend(&s.trend, cfg.eval.trend_tolerance));
            println!("{} rows -> {}", s.rows.len(), out.join(chunk_lab::bench::SWEEP_FILE).display());
        }
        Command::Trace { .. } => {
            let (_, s) = cmd_trace(&cfg, out)?;
            println!(
                "{} inferences, boundary respected in {} ({:.1}%), at most {} rounds -> {}",
                s.inferences,
                s.respected,
                100.0 * s.respect_rate,
                s.max_rounds,
                out.join(chunk_lab::bench::TRACE_FILE).display()
            );
        }
    }
    Ok(())
}
