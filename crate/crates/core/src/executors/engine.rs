//! Simulated-clock executors and the lockstep batched rollout loop.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{ExecutorConfig, Method, PauseAction};
use super::ops::{bid_select, commit_prefix, commit_prefix_tokens, temporal_ensemble_combine};
use crate::chunk::{ActionChunk, TokenChunk};
use crate::discrete::{inpaint_init, run_unmasking, shift_carry_pattern, Quantizer, UnmaskConfig, UnmaskJob, UnmaskTrace};
use crate::envs::{EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::flow::{gaussian_chunk, rtc_sample_batch, rtc_weights, sample_batch, CommittedPrefix, GuidanceConfig};
use crate::math::Tensor;
use crate::net::{Head, PolicyParams};
use crate::rng::{stream_for, Purpose};

/// Rows per policy call; larger request sets are split.
const MAX_BATCH: usize = 512;

/// Flow-matching policy with its sampler settings.
#[derive(Clone, Debug)]
pub struct FlowPolicy {
    pub params: PolicyParams,
    /// Euler steps per chunk.
    pub n: usize,
    pub beta: f64,
    pub decay_ratio: f64,
}

/// Discrete unmasking policy with its decoder settings.
#[derive(Clone, Debug)]
pub struct DiscretePolicy {
    pub params: PolicyParams,
    pub unmask: UnmaskConfig,
}

#[derive(Clone, Debug)]
pub enum Policy {
    Flow(FlowPolicy),
    Discrete(DiscretePolicy),
}

impl Policy {
    /// Wraps trained parameters with default sampler settings.
    pub fn from_params(params: PolicyParams) -> Self {
        match params.config().head {
            Head::Velocity => Policy::Flow(FlowPolicy {
                params,
                n: 5,
                beta: 5.0,
                decay_ratio: 0.5,
            }),
            Head::Logits => Policy::Discrete(DiscretePolicy {
                params,
                unmask: UnmaskConfig::default(),
            }),
        }
    }

    pub fn params(&self) -> &PolicyParams {
        match self {
            Policy::Flow(p) => &p.params,
            Policy::Discrete(p) => &p.params,
        }
    }

    pub fn chunk_shape(&self) -> (usize, usize) {
        let c = self.params().config();
        (c.chunk_len, c.action_dim)
    }

    /// Rejects method/head pairs that cannot work together.
    pub fn check(&self, cfg: &ExecutorConfig) -> Result<()> {
        cfg.validate()?;
        let (h, _) = self.chunk_shape();
        if cfg.horizon != h {
            return Err(Error::config(
                "executor.horizon",
                format!("executor expects H={} but the policy emits H={h}", cfg.horizon),
            ));
        }
        match (cfg.method, self) {
            (Method::ContinuousRtc, Policy::Discrete(_)) => {
                Err(Error::config("executor.method", "continuous_rtc needs a velocity-head policy"))
            }
            (Method::DiscreteRtc, Policy::Flow(_)) => {
                Err(Error::config("executor.method", "discrete_rtc needs a logits-head policy"))
            }
            _ => Ok(()),
        }
    }
}

/// A generated chunk and what it cost.
#[derive(Clone, Debug)]
pub struct Plan {
    /// Masked cells of a partially decoded chunk are NaN.
    pub actions: ActionChunk,
    pub tokens: Option<TokenChunk>,
    /// Forward passes spent, relative to a from-scratch call.
    pub cost_ratio: f64,
    pub rounds: usize,
    pub newly_unmasked: usize,
    pub trace: Option<UnmaskTrace>,
}

#[derive(Clone, Debug)]
enum Ask {
    Scratch { candidates: usize },
    Guided(CommittedPrefix),
    Inpaint { prefix: TokenChunk, carry: Option<TokenChunk> },
}

/// One inference request; `lane` and `inference` key its random streams.
#[derive(Clone, Debug)]
struct Query {
    lane: u64,
    inference: u64,
    obs: Vec<f64>,
    ask: Ask,
    trace: bool,
}

fn tokens_to_actions(t: &TokenChunk, q: &Quantizer) -> ActionChunk {
    let data = t.cells().iter().map(|c| c.map_or(f64::NAN, |b| q.center(b))).collect();
    ActionChunk::new(t.horizon(), t.action_dim(), data).expect("token chunk shape")
}

fn noise_for(seed: u64, lane: u64, inference: u64, cand: u64, h: usize, a: usize) -> Tensor {
    gaussian_chunk(&mut stream_for(seed, Purpose::FlowNoise, &[lane, inference, cand]), h, a)
}

fn stack(rows: &[&[f64]], shape_tail: &[usize]) -> Result<Tensor> {
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(shape_tail);
    Tensor::new(shape, rows.iter().flat_map(|r| r.iter().copied()).collect())
}

/// Answers every query, batching rows of the same kind; the result holds
/// one plan per candidate.
fn infer(policy: &Policy, queries: &[Query], seed: u64, d: usize, s: usize) -> Result<Vec<Vec<Plan>>> {
    let (h, a) = policy.chunk_shape();
    let mut out: Vec<Vec<Option<Plan>>> = queries
        .iter()
        .map(|q| match q.ask {
            Ask::Scratch { candidates } => vec![None; candidates],
            _ => vec![None],
        })
        .collect();
    // (query, candidate) pairs by kind
    let mut scratch = Vec::new();
    let mut guided = Vec::new();
    let mut inpaint = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        match &q.ask {
            Ask::Scratch { candidates } => scratch.extend((0..*candidates).map(|c| (i, c))),
            Ask::Guided(_) => guided.push((i, 0)),
            Ask::Inpaint { .. } => inpaint.push((i, 0)),
        }
    }
    match policy {
        Policy::Flow(fp) => {
            if !inpaint.is_empty() {
                return Err(Error::contract("token inpainting requested from a flow policy"));
            }
            let reference = plain_row_flops(fp)?;
            let gcfg = GuidanceConfig {
                beta: fp.beta,
                decay_ratio: fp.decay_ratio,
                d,
                s,
            };
            let w = if guided.is_empty() { Vec::new() } else { rtc_weights(&gcfg, h)? };
            for (pairs, is_guided) in [(&scratch, false), (&guided, true)] {
                for part in pairs.chunks(MAX_BATCH) {
                    let obs: Vec<&[f64]> = part.iter().map(|&(i, _)| queries[i].obs.as_slice()).collect();
                    let obs = stack(&obs, &[queries[part[0].0].obs.len()])?;
                    let noises: Vec<Tensor> = part
                        .iter()
                        .map(|&(i, c)| noise_for(seed, queries[i].lane, queries[i].inference, c as u64, h, a))
                        .collect();
                    let noise_rows: Vec<&[f64]> = noises.iter().map(Tensor::data).collect();
                    let noise = stack(&noise_rows, &[h, a])?;
                    let (result, cost) = if is_guided {
                        let ys: Vec<&[f64]> = part
                            .iter()
                            .map(|&(i, _)| match &queries[i].ask {
                                Ask::Guided(p) => p.values.data(),
                                _ => unreachable!("guided partition"),
                            })
                            .collect();
                        let y = stack(&ys, &[h, a])?;
                        rtc_sample_batch(&fp.params, &obs, &noise, &y, &w, fp.beta, fp.n)?
                    } else {
                        sample_batch(&fp.params, &obs, &noise, fp.n)?
                    };
                    let ratio = cost.ops.total_flops() as f64 / part.len() as f64 / reference;
                    for (k, &(i, c)) in part.iter().enumerate() {
                        let data = result.data()[k * h * a..(k + 1) * h * a].to_vec();
                        out[i][c] = Some(Plan {
                            actions: ActionChunk::new(h, a, data)?,
                            tokens: None,
                            cost_ratio: ratio,
                            rounds: fp.n,
                            newly_unmasked: 0,
                            trace: None,
                        });
                    }
                }
            }
        }
        Policy::Discrete(dp) => {
            if !guided.is_empty() {
                return Err(Error::contract("guided inpainting requested from a discrete policy"));
            }
            let q = Quantizer::new(dp.params.config().num_bins);
            let mut pairs = scratch;
            pairs.extend(inpaint);
            for part in pairs.chunks(MAX_BATCH) {
                let obs: Vec<&[f64]> = part.iter().map(|&(i, _)| queries[i].obs.as_slice()).collect();
                let obs = stack(&obs, &[queries[part[0].0].obs.len()])?;
                let jobs = part
                    .iter()
                    .map(|&(i, c)| {
                        let qr = &queries[i];
                        let rng = stream_for(seed, Purpose::Unmask, &[qr.lane, qr.inference, c as u64]);
                        let (state, boundary) = match &qr.ask {
                            Ask::Inpaint { prefix, carry } => {
                                (inpaint_init(prefix, d, carry.as_ref(), &dp.unmask)?, d..d + s)
                            }
                            _ => (TokenChunk::masked(h, a), 0..h),
                        };
                        Ok(UnmaskJob {
                            state,
                            boundary,
                            rng,
                            trace: qr.trace,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let results = run_unmasking(&dp.params, &obs, jobs, &dp.unmask)?;
                for (r, &(i, c)) in results.into_iter().zip(part) {
                    out[i][c] = Some(Plan {
                        actions: tokens_to_actions(&r.tokens, &q),
                        cost_ratio: r.rounds as f64 / dp.unmask.k as f64,
                        rounds: r.rounds,
                        newly_unmasked: r.newly_unmasked,
                        trace: r.trace,
                        tokens: Some(r.tokens),
                    });
                }
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|plans| plans.into_iter().map(|p| p.expect("every request answered")).collect())
        .collect())
}

/// Op-counter flops of one from-scratch flow sample.
fn plain_row_flops(fp: &FlowPolicy) -> Result<f64> {
    let c = fp.params.config();
    let obs = Tensor::zeros(vec![1, c.obs_dim]);
    let noise = Tensor::zeros(vec![1, c.chunk_len, c.action_dim]);
    let (_, cost) = sample_batch(&fp.params, &obs, &noise, fp.n)?;
    Ok(cost.ops.total_flops() as f64)
}

/// Where an executed action came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Chunk,
    Pause,
    Ensemble,
}

/// One row of an execution timeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub step: usize,
    /// Chunk played (newest chunk for an ensemble); none while paused.
    pub chunk: Option<usize>,
    pub rel_index: Option<usize>,
    pub source: Source,
}

impl fmt::Display for TimelineEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
        let src = match self.source {
            Source::Chunk => "chunk",
            Source::Pause => "pause",
            Source::Ensemble => "ensemble",
        };
        write!(f, "{}\t{}\t{}\t{}", self.step, opt(self.chunk), opt(self.rel_index), src)
    }
}

/// Text table with a header row, one line per step.
pub fn format_timeline(entries: &[TimelineEntry]) -> String {
    let mut s = String::from("step\tchunk\trel\tsource\n");
    for e in entries {
        s.push_str(&e.to_string());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
struct Chunk {
    id: usize,
    /// Step at which relative index 0 would execute.
    base: usize,
    actions: ActionChunk,
    tokens: Option<TokenChunk>,
}

/// Running totals of one executor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExecStats {
    /// Inferences after the bootstrap.
    pub inferences: usize,
    pub newly_unmasked: usize,
    pub rounds: usize,
    pub cost_ratio: f64,
    /// Swaps at which the committed prefix was compared with its source.
    pub prefix_checks: usize,
    /// Of those, how many matched exactly.
    pub prefix_exact: usize,
    /// Sum over checks of the mean absolute prefix deviation.
    pub prefix_error: f64,
}

/// Per-episode scheduling state of one executor.
#[derive(Clone, Debug)]
pub struct Executor {
    cfg: ExecutorConfig,
    seed: u64,
    lane: u64,
    t: usize,
    active: Chunk,
    pending: Option<(usize, Chunk)>,
    ensemble: Vec<Chunk>,
    next_id: usize,
    next_inference: u64,
    last_action: Vec<f64>,
    last_source: Option<Option<usize>>,
    pub stats: ExecStats,
    timeline: Option<Vec<TimelineEntry>>,
    traces: Option<Vec<UnmaskTrace>>,
}

/// An executed action and its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Executed {
    pub action: Vec<f64>,
    /// The step switched chunks (or between chunk and pause).
    pub boundary: bool,
    pub entry: TimelineEntry,
}

impl Executor {
    /// One from-scratch inference per observation, before the clock starts.
    /// `lanes[i]` keys the random streams of executor `i`.
    pub fn bootstrap_batch(
        policy: &Policy,
        cfg: &ExecutorConfig,
        obs: &[Vec<f64>],
        seed: u64,
        lanes: &[u64],
    ) -> Result<Vec<Executor>> {
        policy.check(cfg)?;
        if obs.len() != lanes.len() {
            return Err(Error::shape("bootstrap", "one observation per lane"));
        }
        let queries: Vec<Query> = obs
            .iter()
            .zip(lanes)
            .map(|(o, &lane)| Query {
                lane,
                inference: 0,
                obs: o.clone(),
                ask: Ask::Scratch { candidates: 1 },
                trace: false,
            })
            .collect();
        let plans = infer(policy, &queries, seed, cfg.d, cfg.s)?;
        let (_, a) = policy.chunk_shape();
        Ok(plans
            .into_iter()
            .zip(lanes)
            .map(|(mut p, &lane)| {
                let plan = p.remove(0);
                let active = Chunk {
                    id: 0,
                    base: 0,
                    actions: plan.actions,
                    tokens: plan.tokens,
                };
                Executor {
                    cfg: *cfg,
                    seed,
                    lane,
                    t: 0,
                    ensemble: vec![active.clone()],
                    active,
                    pending: None,
                    next_id: 1,
                    next_inference: 1,
                    last_action: vec![0.0; a],
                    last_source: None,
                    stats: ExecStats::default(),
                    timeline: None,
                    traces: None,
                }
            })
            .collect())
    }

    pub fn bootstrap(policy: &Policy, cfg: &ExecutorConfig, obs: &[f64], seed: u64, lane: u64) -> Result<Executor> {
        Ok(Self::bootstrap_batch(policy, cfg, &[obs.to_vec()], seed, &[lane])?.remove(0))
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.cfg
    }

    /// Steps executed so far.
    pub fn clock(&self) -> usize {
        self.t
    }

    /// Tokens of the chunk currently being played, if token-native.
    pub fn active_tokens(&self) -> Option<&TokenChunk> {
        self.active.tokens.as_ref()
    }

    /// Tokens of the most recent inference, whether or not it has been
    /// swapped in yet.
    pub fn latest_tokens(&self) -> Option<&TokenChunk> {
        match &self.pending {
            Some((_, c)) => c.tokens.as_ref(),
            None => self.active.tokens.as_ref(),
        }
    }

    pub fn record_timeline(&mut self) {
        self.timeline.get_or_insert_with(Vec::new);
    }

    pub fn record_traces(&mut self) {
        self.traces.get_or_insert_with(Vec::new);
    }

    pub fn timeline(&self) -> &[TimelineEntry] {
        self.timeline.as_deref().unwrap_or(&[])
    }

    pub fn traces(&self) -> &[UnmaskTrace] {
        self.traces.as_deref().unwrap_or(&[])
    }

    fn swap(&mut self, chunk: Chunk) {
        let (d, s) = (self.cfg.d, self.cfg.s);
        if self.cfg.method == Method::DiscreteRtc && d > 0 {
            if let (Some(new), Some(old)) = (&chunk.tokens, &self.active.tokens) {
                self.stats.prefix_checks += 1;
                if (0..d).all(|i| new.row(i) == old.row(i + s)) {
                    self.stats.prefix_exact += 1;
                }
            }
        }
        if self.cfg.method == Method::ContinuousRtc && d > 0 {
            let a = chunk.actions.action_dim();
            let err: f64 = (0..d)
                .flat_map(|i| chunk.actions.row(i).iter().zip(self.active.actions.row(i + s)))
                .map(|(x, y)| (x - y).abs())
                .sum();
            self.stats.prefix_checks += 1;
            self.stats.prefix_error += err / (d * a) as f64;
        }
        if self.cfg.method == Method::TemporalEnsemble {
            self.ensemble.push(chunk.clone());
        }
        self.active = chunk;
    }

    fn wants_request(&self) -> bool {
        if self.pending.is_some() {
            return false;
        }
        match self.cfg.method {
            Method::Sync => self.t >= self.active.base + self.cfg.horizon,
            _ => self.t > 0 && self.t % self.cfg.s == 0,
        }
    }

    /// Resolves a due pending chunk, then builds this step's request if a
    /// cycle starts now.
    fn begin_step(&mut self, obs: &[f64], policy: &Policy) -> Result<Option<Query>> {
        if let Some((ready, _)) = &self.pending {
            if *ready == self.t {
                let (_, chunk) = self.pending.take().expect("pending chunk");
                self.swap(chunk);
            }
        }
        if !self.wants_request() {
            return Ok(None);
        }
        let (d, s) = (self.cfg.d, self.cfg.s);
        let ask = match self.cfg.method {
            Method::Sync | Method::NaiveAsync | Method::TemporalEnsemble => Ask::Scratch { candidates: 1 },
            Method::Bid => Ask::Scratch {
                candidates: self.cfg.bid_n,
            },
            Method::ContinuousRtc => Ask::Guided(commit_prefix(&self.active.actions, d, s)?),
            Method::DiscreteRtc => {
                let tokens = self
                    .active
                    .tokens
                    .as_ref()
                    .ok_or_else(|| Error::contract("discrete_rtc needs token chunks"))?;
                let prefix = commit_prefix_tokens(tokens, d, s)?;
                let natural = matches!(policy, Policy::Discrete(p) if p.unmask.natural_carry);
                // nothing is committed at d = 0, so the stale pattern is dropped too
                let carry = (natural && d > 0).then(|| shift_carry_pattern(tokens, s, &prefix, d));
                Ask::Inpaint { prefix, carry }
            }
        };
        let q = Query {
            lane: self.lane,
            inference: self.next_inference,
            obs: obs.to_vec(),
            ask,
            trace: self.traces.is_some(),
        };
        self.next_inference += 1;
        Ok(Some(q))
    }

    fn accept(&mut self, mut plans: Vec<Plan>) -> Result<()> {
        let pick = if self.cfg.method == Method::Bid {
            let cands: Vec<ActionChunk> = plans.iter().map(|p| p.actions.clone()).collect();
            bid_select(&cands, &self.active.actions, self.cfg.s)?
        } else {
            0
        };
        self.stats.inferences += 1;
        self.stats.cost_ratio += plans.iter().map(|p| p.cost_ratio).sum::<f64>();
        let plan = plans.swap_remove(pick);
        self.stats.newly_unmasked += plan.newly_unmasked;
        self.stats.rounds += plan.rounds;
        if let (Some(traces), Some(tr)) = (self.traces.as_mut(), plan.trace) {
            traces.push(tr);
        }
        let base = match self.cfg.method {
            Method::Sync => self.t + self.cfg.d,
            _ => self.t,
        };
        let chunk = Chunk {
            id: self.next_id,
            base,
            actions: plan.actions,
            tokens: plan.tokens,
        };
        self.next_id += 1;
        if self.cfg.d == 0 {
            self.swap(chunk);
        } else {
            self.pending = Some((self.t + self.cfg.d, chunk));
        }
        Ok(())
    }

    fn act(&mut self) -> Result<Executed> {
        let t = self.t;
        let h = self.cfg.horizon;
        let (action, entry) = if self.cfg.method == Method::Sync && self.pending.is_some() {
            let a = match self.cfg.pause_action {
                PauseAction::Zero => vec![0.0; self.last_action.len()],
                PauseAction::Hold => self.last_action.clone(),
            };
            (a, TimelineEntry { step: t, chunk: None, rel_index: None, source: Source::Pause })
        } else if self.cfg.method == Method::TemporalEnsemble {
            self.ensemble.retain(|c| c.base + h > t);
            let newest = self.active.base;
            let preds: Vec<(usize, &[f64])> = self
                .ensemble
                .iter()
                .filter(|c| c.base <= t)
                .map(|c| ((newest - c.base) / self.cfg.s, c.actions.row(t - c.base)))
                .filter(|(_, r)| r.iter().all(|v| v.is_finite()))
                .collect();
            let a = temporal_ensemble_combine(&preds, self.cfg.te_decay)?;
            let entry = TimelineEntry {
                step: t,
                chunk: Some(self.active.id),
                rel_index: Some(t - newest),
                source: Source::Ensemble,
            };
            (a, entry)
        } else {
            let rel = t
                .checked_sub(self.active.base)
                .filter(|&r| r < h)
                .ok_or_else(|| Error::contract(format!("step {t} not covered by the active chunk")))?;
            let entry = TimelineEntry {
                step: t,
                chunk: Some(self.active.id),
                rel_index: Some(rel),
                source: Source::Chunk,
            };
            (self.active.actions.row(rel).to_vec(), entry)
        };
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("step {t} would execute an undecoded action")));
        }
        let boundary = self.last_source.is_some_and(|s| s != entry.chunk);
        self.last_source = Some(entry.chunk);
        self.last_action = action.clone();
        if let Some(tl) = self.timeline.as_mut() {
            tl.push(entry);
        }
        self.t += 1;
        Ok(Executed {
            action,
            boundary,
            entry,
        })
    }

    /// Single-executor step: request, wait for inference if it is due, act.
    pub fn step(&mut self, policy: &Policy, obs: &[f64]) -> Result<Executed> {
        Ok(step_batch(policy, &mut [self], &[obs.to_vec()])?.remove(0))
    }
}

/// Advances every executor by one step with batched inference.
pub fn step_batch(policy: &Policy, execs: &mut [&mut Executor], obs: &[Vec<f64>]) -> Result<Vec<Executed>> {
    if execs.len() != obs.len() {
        return Err(Error::shape("step_batch", "one observation per executor"));
    }
    let mut queries = Vec::new();
    let mut owners = Vec::new();
    for (i, (e, o)) in execs.iter_mut().zip(obs).enumerate() {
        if let Some(q) = e.begin_step(o, policy)? {
            queries.push(q);
            owners.push(i);
        }
    }
    if !queries.is_empty() {
        let (seed, d, s) = {
            let e = &execs[owners[0]];
            (e.seed, e.cfg.d, e.cfg.s)
        };
        if owners.iter().any(|&i| execs[i].seed != seed || execs[i].cfg != execs[owners[0]].cfg) {
            return Err(Error::contract("batched executors must share seed and config"));
        }
        let answers = infer(policy, &queries, seed, d, s)?;
        for (plans, &i) in answers.into_iter().zip(&owners) {
            execs[i].accept(plans)?;
        }
    }
    execs.iter_mut().map(|e| e.act()).collect()
}

/// Outcome of one rollout episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub trial: u64,
    pub completed: usize,
    pub crashed: bool,
    pub steps: usize,
    pub boundary_jerk: f64,
    pub within_jerk: f64,
    pub stats: ExecStats,
    /// Masked cells left in the most recent inference's output.
    pub final_masked: usize,
}

impl TrialResult {
    pub fn solved(&self) -> bool {
        self.completed > 0
    }
}

/// Trials to run and what to record.
#[derive(Clone, Debug)]
pub struct RolloutSpec {
    pub env: EnvConfig,
    pub exec: ExecutorConfig,
    /// Keys the env resets and policy noise; trial `i` uses lane `i`.
    pub seed: u64,
    pub trials: usize,
    /// Record the execution timeline of trial 0.
    pub timeline: bool,
    /// Record unmasking traces of the first this-many trials.
    pub trace_trials: usize,
}

#[derive(Clone, Debug)]
pub struct RolloutReport {
    pub trials: Vec<TrialResult>,
    pub timeline: Vec<TimelineEntry>,
    pub traces: Vec<UnmaskTrace>,
}

/// Runs all trials in lockstep, one batched policy call per request wave.
pub fn run_rollouts(policy: &Policy, spec: &RolloutSpec) -> Result<RolloutReport> {
    spec.env.validate()?;
    let env_cfg = EnvConfig {
        seed: spec.seed,
        ..spec.env.clone()
    };
    let lanes: Vec<u64> = (0..spec.trials as u64).collect();
    let mut envs: Vec<EnvState> = lanes.iter().map(|&l| EnvState::reset(&env_cfg, l)).collect();
    let obs: Vec<Vec<f64>> = envs.iter().map(EnvState::observation).collect();
    if let Some(o) = obs.first() {
        if o.len() != policy.params().config().obs_dim {
            return Err(Error::config("policy.obs_dim", "does not match the environment"));
        }
    }
    let mut execs = Executor::bootstrap_batch(policy, &spec.exec, &obs, spec.seed, &lanes)?;
    if spec.timeline {
        if let Some(e) = execs.first_mut() {
            e.record_timeline();
        }
    }
    for e in execs.iter_mut().take(spec.trace_trials) {
        e.record_traces();
    }
    let mut alive = vec![true; spec.trials];
    let mut logs: Vec<(Vec<Vec<f64>>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); spec.trials];
    for _ in 0..env_cfg.episode_len {
        let idx: Vec<usize> = (0..spec.trials).filter(|&i| alive[i]).collect();
        if idx.is_empty() {
            break;
        }
        let obs: Vec<Vec<f64>> = idx.iter().map(|&i| envs[i].observation()).collect();
        let executed = {
            let mut refs: Vec<&mut Executor> = execs
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| alive[*i])
                .map(|(_, e)| e)
                .collect();
            step_batch(policy, &mut refs, &obs)?
        };
        for (&i, ex) in idx.iter().zip(executed) {
            let action = [ex.action[0], ex.action[1]];
            logs[i].0.push(ex.action);
            logs[i].1.push(ex.boundary);
            if envs[i].step(&env_cfg, action)?.done {
                alive[i] = false;
            }
        }
    }
    let trials = execs
        .iter()
        .zip(&envs)
        .zip(&logs)
        .enumerate()
        .map(|(i, ((e, env), (actions, marks)))| {
            let (bj, wj) = super::ops::jerk_metric(actions, marks);
            TrialResult {
                trial: i as u64,
                completed: env.completed,
                crashed: env.crashed,
                steps: actions.len(),
                boundary_jerk: bj,
                within_jerk: wj,
                stats: e.stats.clone(),
                final_masked: e.latest_tokens().map_or(0, TokenChunk::masked_count),
            }
        })
        .collect();
    Ok(RolloutReport {
        trials,
        timeline: execs.first().map(|e| e.timeline().to_vec()).unwrap_or_default(),
        traces: execs.iter().flat_map(|e| e.traces().iter().cloned()).collect(),
    })
}
