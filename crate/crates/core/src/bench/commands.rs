//! The work behind each CLI subcommand. Every command writes its outputs
//! under an output directory and echoes the effective config into them.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::config::RunConfig;
use super::metrics::{write_metrics_csv, MetricsRow};
use crate::discrete::UnmaskTrace;
use crate::envs::Dataset;
use crate::error::{Error, Result};
use crate::executors::{run_rollouts, DiscretePolicy, FlowPolicy, Method, Policy, RolloutSpec};
use crate::net::{Checkpoint, Head, PolicyParams};
use crate::train::{StepLog, Trainer};

pub const DATASET_FILE: &str = "dataset.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const TREND_FILE: &str = "trend.txt";
pub const TRACE_FILE: &str = "trace.jsonl";

/// Delays covered by [`cmd_sweep`].
pub const SWEEP_DELAYS: [usize; 5] = [0, 1, 2, 3, 4];

pub fn checkpoint_file(head: Head) -> &'static str {
    match head {
        Head::Velocity => "flow.ck",
        Head::Logits => "discrete.ck",
    }
}

pub fn loss_file(head: Head) -> &'static str {
    match head {
        Head::Velocity => "flow_loss.csv",
        Head::Logits => "discrete_loss.csv",
    }
}

/// Which head `method` runs on.
pub fn head_for(method: Method, cfg: &RunConfig) -> Head {
    match method {
        Method::ContinuousRtc => Head::Velocity,
        Method::DiscreteRtc => Head::Logits,
        _ => cfg.executor.baseline_head,
    }
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

fn run_config_json(cfg: &RunConfig) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct CollectSummary {
    pub path: PathBuf,
    pub episodes: usize,
    pub records: usize,
    pub hash: String,
}

/// Rolls out the expert and writes `<out>/dataset.bin`.
pub fn cmd_collect(cfg: &RunConfig, out: &Path) -> Result<CollectSummary> {
    prepare_out(cfg, out)?;
    let data = Dataset::collect(&cfg.env, cfg.collect.episodes, cfg.collect.seed, cfg.policy.chunk_len)?;
    let path = out.join(DATASET_FILE);
    data.save(&path)?;
    Ok(CollectSummary {
        path,
        episodes: data.header().episodes,
        records: data.len(),
        hash: data.hash()?,
    })
}

/// Where a training run starts from.
#[derive(Clone, Debug, Default)]
pub enum TrainStart {
    /// Fresh parameters from `policy.init_seed`.
    #[default]
    Scratch,
    /// Parameters of an earlier run, new optimizer and schedule.
    Init(PathBuf),
    /// Parameters, optimizer and schedule position of an interrupted run.
    Resume(PathBuf),
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub logs: Vec<StepLog>,
    /// Steps completed when the checkpoint was written.
    pub step: usize,
    pub total_steps: usize,
}

/// Trains `head` on `dataset`, writing `<out>/{flow,discrete}.ck` and the
/// matching loss CSV. `stop_at` ends the run early at that step count
/// without changing the learning-rate schedule, so a resumed run continues
/// exactly where the uninterrupted one would have been.
pub fn cmd_train(
    cfg: &RunConfig,
    head: Head,
    dataset: &Path,
    start: &TrainStart,
    stop_at: Option<usize>,
    out: &Path,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainSummary> {
    let data = Dataset::load(dataset)?;
    let mut trainer = match start {
        TrainStart::Scratch => {
            let params = PolicyParams::init(&cfg.policy.mixer(head), cfg.policy.init_seed)?;
            Trainer::new(params, cfg.train.for_head(head).clone())?
        }
        TrainStart::Init(path) => {
            let params = load_head(path, head)?;
            if params.config() != &cfg.policy.mixer(head) {
                return Err(Error::config("policy", format!("{} was trained with a different shape", path.display())));
            }
            Trainer::new(params, cfg.train.for_head(head).clone())?
        }
        TrainStart::Resume(path) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            if t.params.config().head != head {
                return Err(Error::config("head", format!("{} holds the other head", path.display())));
            }
            t
        }
    };
    prepare_out(cfg, out)?;
    let total = trainer.config.total_steps(data.len());
    let end = stop_at.map_or(total, |s| s.min(total));
    let mut logs = Vec::with_capacity(end.saturating_sub(trainer.step));
    while trainer.step < end {
        let log = trainer.train_step(&data)?;
        if !log.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {} (lr {:e}, grad norm {:e})",
                log.step, log.lr, log.grad_norm
            )));
        }
        on_step(&log);
        logs.push(log);
    }
    let mut ck = trainer.to_checkpoint()?;
    ck.meta["run_config"] = run_config_json(cfg)?;
    ck.meta["dataset_hash"] = json!(data.hash()?);
    let checkpoint = out.join(checkpoint_file(head));
    ck.save(&checkpoint)?;

    let loss_csv = out.join(loss_file(head));
    let mut w = BufWriter::new(File::create(&loss_csv)?);
    w.write_all(cfg.comment_header().as_bytes())?;
    writeln!(w, "step,loss,lr,grad_norm")?;
    for l in &logs {
        writeln!(w, "{},{},{},{}", l.step, l.loss, l.lr, l.grad_norm)?;
    }
    w.flush()?;
    Ok(TrainSummary {
        checkpoint,
        loss_csv,
        logs,
        step: trainer.step,
        total_steps: total,
    })
}

fn load_head(path: &Path, head: Head) -> Result<PolicyParams> {
    let params = Checkpoint::load(path)?.policy()?;
    if params.config().head != head {
        return Err(Error::config(
            "checkpoint",
            format!("{} holds a {:?} head, expected {:?}", path.display(), params.config().head, head),
        ));
    }
    Ok(params)
}

/// Wraps parameters with the configured sampler settings.
pub fn make_policy(cfg: &RunConfig, params: PolicyParams) -> Policy {
    match params.config().head {
        Head::Velocity => Policy::Flow(FlowPolicy {
            params,
            n: cfg.sampler.n,
            beta: cfg.sampler.beta,
            decay_ratio: cfg.sampler.decay_ratio,
        }),
        Head::Logits => Policy::Discrete(DiscretePolicy {
            params,
            unmask: cfg.sampler.unmask,
        }),
    }
}

/// Loads the checkpoint configured for `head`.
pub fn load_policy(cfg: &RunConfig, head: Head) -> Result<Policy> {
    let (field, path) = match head {
        Head::Velocity => ("eval.flow_checkpoint", &cfg.eval.flow_checkpoint),
        Head::Logits => ("eval.discrete_checkpoint", &cfg.eval.discrete_checkpoint),
    };
    let path = path.as_ref().ok_or_else(|| Error::config(field, "no checkpoint given"))?;
    if !path.exists() {
        return Err(Error::config(field, format!("{} does not exist", path.display())));
    }
    Ok(make_policy(cfg, load_head(path, head)?))
}

struct Policies {
    flow: Option<Policy>,
    discrete: Option<Policy>,
}

impl Policies {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let need = |h: Head| cfg.eval.methods.iter().any(|&m| head_for(m, cfg) == h);
        Ok(Policies {
            flow: need(Head::Velocity).then(|| load_policy(cfg, Head::Velocity)).transpose()?,
            discrete: need(Head::Logits).then(|| load_policy(cfg, Head::Logits)).transpose()?,
        })
    }

    fn get(&self, head: Head) -> &Policy {
        match head {
            Head::Velocity => self.flow.as_ref(),
            Head::Logits => self.discrete.as_ref(),
        }
        .expect("loaded for every configured method")
    }
}

/// Evaluates every (delay, method, seed) combination in that nesting order.
pub fn evaluate<'a>(
    cfg: &RunConfig,
    policies: impl Fn(Head) -> Result<&'a Policy>,
    delays: &[usize],
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &d in delays {
        for &method in &cfg.eval.methods {
            let exec = cfg.executor_config(method, d);
            let policy = policies(head_for(method, cfg))?;
            policy.check(&exec)?;
            for &seed in &cfg.eval.seeds {
                let spec = RolloutSpec {
                    env: cfg.env.clone(),
                    exec,
                    seed,
                    trials: cfg.eval.trials,
                    timeline: false,
                    trace_trials: 0,
                };
                let report = run_rollouts(policy, &spec)?;
                let row = MetricsRow::aggregate(method, d, exec.s, seed, &report.trials);
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

fn write_csv(cfg: &RunConfig, path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_metrics_csv(&mut w, &cfg.comment_header(), rows)?;
    w.flush()?;
    Ok(())
}

/// Evaluates `eval.methods × eval.delays × eval.seeds` into `<out>/metrics.csv`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, on_row: impl FnMut(&MetricsRow)) -> Result<Vec<MetricsRow>> {
    let policies = Policies::load(cfg)?;
    prepare_out(cfg, out)?;
    let rows = evaluate(cfg, |h| Ok(policies.get(h)), &cfg.eval.delays, on_row)?;
    write_csv(cfg, &out.join(METRICS_FILE), &rows)?;
    Ok(rows)
}

/// Solve-rate change of one method between the smallest and largest delay.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrendEntry {
    pub method: Method,
    pub d_first: usize,
    pub d_last: usize,
    pub solve_first: f64,
    pub solve_last: f64,
    /// The solve rate rose by more than the tolerance.
    pub flagged: bool,
}

/// Compares each method's seed-averaged solve rate at the extreme delays.
pub fn trend_report(rows: &[MetricsRow], tolerance: f64) -> Vec<TrendEntry> {
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let solve_at = |m: Method, d: usize| {
        let hits: Vec<f64> = rows.iter().filter(|r| r.method == m && r.d == d).map(|r| r.solve_rate).collect();
        hits.iter().sum::<f64>() / hits.len() as f64
    };
    methods
        .into_iter()
        .filter_map(|m| {
            let ds = rows.iter().filter(|r| r.method == m).map(|r| r.d);
            let (lo, hi) = (ds.clone().min()?, ds.max()?);
            let (a, b) = (solve_at(m, lo), solve_at(m, hi));
            Some(TrendEntry {
                method: m,
                d_first: lo,
                d_last: hi,
                solve_first: a,
                solve_last: b,
                flagged: b - a > tolerance,
            })
        })
        .collect()
}

pub fn format_trend(entries: &[TrendEntry], tolerance: f64) -> String {
    let mut s = format!("# solve rate rises above {:.1} points are flagged\n", tolerance * 100.0);
    for e in entries {
        s.push_str(&format!(
            "{}\td={}: {:.4}\td={}: {:.4}\t{}\n",
            e.method.name(),
            e.d_first,
            e.solve_first,
            e.d_last,
            e.solve_last,
            if e.flagged { "FLAGGED" } else { "ok" }
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub rows: Vec<MetricsRow>,
    pub trend: Vec<TrendEntry>,
}

/// Evaluates every configured method at each delay in [`SWEEP_DELAYS`],
/// writing `<out>/sweep.csv` and `<out>/trend.txt`.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path, on_row: impl FnMut(&MetricsRow)) -> Result<SweepSummary> {
    let cfg = RunConfig {
        eval: super::config::EvalSection {
            delays: SWEEP_DELAYS.to_vec(),
            ..cfg.eval.clone()
        },
        ..cfg.clone()
    };
    cfg.validate()?;
    let policies = Policies::load(&cfg)?;
    prepare_out(&cfg, out)?;
    let rows = evaluate(&cfg, |h| Ok(policies.get(h)), &SWEEP_DELAYS, on_row)?;
    write_csv(&cfg, &out.join(SWEEP_FILE), &rows)?;
    let trend = trend_report(&rows, cfg.eval.trend_tolerance);
    let mut text = cfg.comment_header();
    text.push_str(&format_trend(&trend, cfg.eval.trend_tolerance));
    fs::write(out.join(TREND_FILE), text)?;
    Ok(SweepSummary { rows, trend })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceSummary {
    pub inferences: usize,
    pub respected: usize,
    pub respect_rate: f64,
    pub max_rounds: usize,
}

/// Records unmasking traces of DiscreteRTC inferences at `trace.d` into
/// `<out>/trace.jsonl`: a config record, one record per inference, then a
/// summary record.
pub fn cmd_trace(cfg: &RunConfig, out: &Path) -> Result<(Vec<UnmaskTrace>, TraceSummary)> {
    let policy = load_policy(cfg, Head::Logits)?;
    let exec = cfg.executor_config(Method::DiscreteRtc, cfg.trace.d);
    policy.check(&exec)?;
    prepare_out(cfg, out)?;
    // bootstrap plus one request every s steps
    let per_trial = 1 + cfg.env.episode_len.saturating_sub(1) / exec.s;
    let trials = cfg.trace.inferences.div_ceil(per_trial).max(1);
    let spec = RolloutSpec {
        env: cfg.env.clone(),
        exec,
        seed: cfg.trace.seed,
        trials,
        timeline: false,
        trace_trials: trials,
    };
    let mut traces = run_rollouts(&policy, &spec)?.traces;
    traces.truncate(cfg.trace.inferences);
    let respected = traces.iter().filter(|t| t.respected).count();
    let summary = TraceSummary {
        inferences: traces.len(),
        respected,
        respect_rate: if traces.is_empty() { 0.0 } else { respected as f64 / traces.len() as f64 },
        max_rounds: traces.iter().map(|t| t.rounds.len()).max().unwrap_or(0),
    };
    let mut w = BufWriter::new(File::create(out.join(TRACE_FILE))?);
    let line = |w: &mut BufWriter<File>, v: serde_json::Value| -> Result<()> {
        serde_json::to_writer(&mut *w, &v).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    };
    line(&mut w, json!({ "record": "config", "config": run_config_json(cfg)? }))?;
    for (i, t) in traces.iter().enumerate() {
        line(
            &mut w,
            json!({
                "record": "inference",
                "index": i,
                "d": t.d,
                "s": t.s,
                "boundary": t.boundary,
                "initial": t.initial,
                "rounds": t.rounds,
                "respected": t.respected,
            }),
        )?;
    }
    line(&mut w, json!({ "record": "summary", "summary": summary }))?;
    w.flush()?;
    Ok((traces, summary))
}
