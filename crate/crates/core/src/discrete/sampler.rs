use std::cmp::Ordering;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::TokenChunk;
use crate::error::{Error, Result};
use crate::math::{Tape, Tensor};
use crate::net::PolicyParams;
use crate::rng::{stream, Purpose};

/// Anything that scores every bin at every token position.
pub trait LogitsModel {
    /// `(H, A)` of the chunks this model acts on.
    fn chunk_shape(&self) -> (usize, usize);

    fn num_bins(&self) -> usize;

    /// `obs [B, O]` and one token chunk per row; returns `[B, H, A, bins]`.
    fn logits(&self, obs: &Tensor, tokens: &[&TokenChunk]) -> Result<Tensor>;
}

impl LogitsModel for PolicyParams {
    fn chunk_shape(&self) -> (usize, usize) {
        (self.config().chunk_len, self.config().action_dim)
    }

    fn num_bins(&self) -> usize {
        self.config().num_bins
    }

    fn logits(&self, obs: &Tensor, tokens: &[&TokenChunk]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        Ok(PolicyParams::logits(self, &p, tape.constant(obs.clone()), tokens)?.value())
    }
}

/// Count schedule family used at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

/// Iterative unmasking settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnmaskConfig {
    /// Unmasking rounds for a fully masked chunk.
    pub k: usize,
    /// Token sampling temperature; 0 takes the argmax.
    pub decode_temp: f64,
    /// Gumbel scale on the position-selection score; 0 is max-confidence.
    pub choice_temp: f64,
    pub schedule: Schedule,
    /// Always spend exactly `k` rounds, spreading the masked total over them.
    pub fixed_steps: bool,
    /// Stop once the timesteps right after the prefix are fully unmasked.
    pub early_stop: bool,
    /// Start inpainting from the previous call's partial pattern.
    pub natural_carry: bool,
}

impl Default for UnmaskConfig {
    fn default() -> Self {
        UnmaskConfig {
            k: 5,
            decode_temp: 1.0,
            choice_temp: 0.0,
            schedule: Schedule::Cosine,
            fixed_steps: false,
            early_stop: true,
            natural_carry: false,
        }
    }
}

impl UnmaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("unmask.k", "need at least one round"));
        }
        if !(self.decode_temp >= 0.0 && self.decode_temp.is_finite()) {
            return Err(Error::config("unmask.decode_temp", "must be a finite value >= 0"));
        }
        if !(self.choice_temp >= 0.0 && self.choice_temp.is_finite()) {
            return Err(Error::config("unmask.choice_temp", "must be a finite value >= 0"));
        }
        Ok(())
    }
}

/// `remaining(k) = floor(T·cos(πk / 2K))`; round `k` reveals
/// `remaining(k − 1) − remaining(k)`.
pub fn unmask_count_schedule(total_masked: usize, k: usize) -> Vec<usize> {
    let remaining = |i: usize| -> usize {
        if i == 0 {
            return total_masked;
        }
        if i == k {
            return 0;
        }
        let c = (std::f64::consts::FRAC_PI_2 * i as f64 / k as f64).cos();
        (total_masked as f64 * c).floor() as usize
    };
    (1..=k).map(|i| remaining(i - 1) - remaining(i)).collect()
}

/// Per-round reveal counts for a chunk with `masked` of `total` tokens
/// masked. Without `fixed_steps` the number of rounds shrinks in proportion
/// to the masked fraction (`ceil(K · masked / total)`).
pub fn round_budget(masked: usize, total: usize, cfg: &UnmaskConfig) -> Vec<usize> {
    if masked == 0 {
        return Vec::new();
    }
    let rounds = if cfg.fixed_steps {
        cfg.k
    } else {
        (cfg.k * masked).div_ceil(total).max(1)
    };
    unmask_count_schedule(masked, rounds)
}

fn softmax(row: &[f64], temp: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = row.iter().map(|v| ((v - max) / temp).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_index(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the running sum: take the last non-zero bin
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Reveals `n` masked positions of `state` given its logits (`H·A·bins`
/// values, position-major). Already unmasked positions are never touched.
///
/// Each masked position proposes a token (argmax at `decode_temp = 0`,
/// otherwise a sample at that temperature) with confidence equal to the
/// probability of the proposal; with `decode_temp = 0` the probability is
/// taken at temperature 1. Positions are ranked by `ln(confidence)` plus
/// `choice_temp` times Gumbel noise, ties going to the lower index.
pub fn select_unmask(
    logits: &[f64],
    bins: usize,
    state: &TokenChunk,
    n: usize,
    cfg: &UnmaskConfig,
    rng: &mut impl Rng,
) -> Result<TokenChunk> {
    let masked = state.masked_positions();
    if n > masked.len() {
        return Err(Error::contract(format!(
            "asked to unmask {n} tokens but only {} are masked",
            masked.len()
        )));
    }
    if logits.len() != state.len() * bins {
        return Err(Error::shape("unmask_step", "logits do not cover the chunk"));
    }
    if n == 0 {
        return Ok(state.clone());
    }
    let mut scored = Vec::with_capacity(masked.len());
    for &pos in &masked {
        let row = &logits[pos * bins..(pos + 1) * bins];
        let (token, conf) = if cfg.decode_temp == 0.0 {
            let b = argmax(row);
            (b, softmax(row, 1.0)[b])
        } else {
            let p = softmax(row, cfg.decode_temp);
            let b = sample_index(&p, rng);
            (b, p[b])
        };
        let mut score = conf.ln();
        if cfg.choice_temp > 0.0 {
            score += cfg.choice_temp * gumbel(rng);
        }
        scored.push((score, pos, token as u32));
    }
    scored.sort_by(|a, b| match b.0.total_cmp(&a.0) {
        Ordering::Equal => a.1.cmp(&b.1),
        o => o,
    });
    let mut out = state.clone();
    for &(_, pos, token) in scored.iter().take(n) {
        out.set(pos, Some(token));
    }
    Ok(out)
}

/// One unmasking round for a single chunk.
pub fn unmask_step(
    model: &impl LogitsModel,
    obs: &Tensor,
    state: &TokenChunk,
    n: usize,
    cfg: &UnmaskConfig,
    rng: &mut impl Rng,
) -> Result<TokenChunk> {
    if n == 0 {
        return Ok(state.clone());
    }
    let obs = obs.reshape(vec![1, obs.len()])?;
    let logits = model.logits(&obs, &[state])?;
    select_unmask(logits.data(), model.num_bins(), state, n, cfg, rng)
}

/// Mask pattern history of one inpainting call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnmaskTrace {
    pub d: usize,
    pub s: usize,
    /// Timesteps `0..boundary` must be unmasked before execution.
    pub boundary: usize,
    /// Mask grid (1 = unmasked) before the first round.
    pub initial: Vec<Vec<u8>>,
    /// Mask grid after each round that revealed tokens.
    pub rounds: Vec<Vec<Vec<u8>>>,
    /// No token past the boundary was revealed before the boundary filled.
    pub respected: bool,
}

/// One chunk to unmask inside a lockstep batch.
pub struct UnmaskJob {
    pub state: TokenChunk,
    /// Timesteps that must be complete for early stop.
    pub boundary: Range<usize>,
    pub rng: ChaCha8Rng,
    pub trace: bool,
}

/// Result of an unmasking job.
#[derive(Clone, Debug, PartialEq)]
pub struct UnmaskOutcome {
    pub tokens: TokenChunk,
    /// Rounds that revealed at least one token.
    pub rounds: usize,
    pub newly_unmasked: usize,
    pub trace: Option<UnmaskTrace>,
}

struct Running {
    job: UnmaskJob,
    counts: Vec<usize>,
    rounds: usize,
    start_masked: usize,
    stopped: bool,
    grids: Vec<Vec<Vec<u8>>>,
    initial: Vec<Vec<u8>>,
    respected: Option<bool>,
}

fn boundary_done(state: &TokenChunk, boundary: &Range<usize>) -> bool {
    state.rows_unmasked(boundary.clone())
}

/// Runs every job to completion in lockstep, batching the logits calls of
/// all jobs that are still active in a round. `obs` has one row per job.
pub fn run_unmasking(
    model: &impl LogitsModel,
    obs: &Tensor,
    jobs: Vec<UnmaskJob>,
    cfg: &UnmaskConfig,
) -> Result<Vec<UnmaskOutcome>> {
    cfg.validate()?;
    let (h, a) = model.chunk_shape();
    if obs.rank() != 2 || obs.shape()[0] != jobs.len() {
        return Err(Error::shape("run_unmasking", format!("obs {:?} for {} jobs", obs.shape(), jobs.len())));
    }
    let od = obs.shape()[1];
    let mut run: Vec<Running> = jobs
        .into_iter()
        .map(|job| {
            let masked = job.state.masked_count();
            Running {
                counts: round_budget(masked, h * a, cfg),
                rounds: 0,
                start_masked: masked,
                stopped: false,
                grids: Vec::new(),
                initial: job.state.mask_grid(),
                respected: None,
                job,
            }
        })
        .collect();
    for r in &run {
        if r.job.state.horizon() != h || r.job.state.action_dim() != a {
            return Err(Error::shape("run_unmasking", "token chunk does not match the model"));
        }
    }
    let max_rounds = run.iter().map(|r| r.counts.len()).max().unwrap_or(0);
    for round in 0..max_rounds {
        let mut active = Vec::new();
        for (i, r) in run.iter_mut().enumerate() {
            if r.stopped || round >= r.counts.len() {
                r.stopped = true;
                continue;
            }
            if cfg.early_stop && boundary_done(&r.job.state, &r.job.boundary) {
                r.stopped = true;
                continue;
            }
            if r.counts[round] > 0 {
                active.push(i);
            }
        }
        if active.is_empty() {
            continue;
        }
        let mut rows = Vec::with_capacity(active.len() * od);
        for &i in &active {
            rows.extend_from_slice(&obs.data()[i * od..(i + 1) * od]);
        }
        let sub_obs = Tensor::new(vec![active.len(), od], rows)?;
        let states: Vec<&TokenChunk> = active.iter().map(|&i| &run[i].job.state).collect();
        let logits = model.logits(&sub_obs, &states)?;
        let per = h * a * model.num_bins();
        for (slot, &i) in active.iter().enumerate() {
            let r = &mut run[i];
            let before = r.job.state.clone();
            let next = select_unmask(
                &logits.data()[slot * per..(slot + 1) * per],
                model.num_bins(),
                &before,
                r.counts[round],
                cfg,
                &mut r.job.rng,
            )?;
            if r.respected.is_none() {
                let outside = (0..next.len()).any(|p| {
                    before.is_masked(p) && !next.is_masked(p) && p / a >= r.job.boundary.end
                });
                if outside {
                    r.respected = Some(false);
                } else if boundary_done(&next, &r.job.boundary) {
                    r.respected = Some(true);
                }
            }
            r.job.state = next;
            r.rounds += 1;
            if r.job.trace {
                r.grids.push(r.job.state.mask_grid());
            }
        }
    }
    Ok(run
        .into_iter()
        .map(|r| {
            let newly = r.start_masked - r.job.state.masked_count();
            let trace = r.job.trace.then(|| UnmaskTrace {
                d: r.job.boundary.start,
                s: r.job.boundary.len(),
                boundary: r.job.boundary.end,
                initial: r.initial,
                rounds: r.grids,
                respected: r.respected.unwrap_or(true),
            });
            UnmaskOutcome {
                tokens: r.job.state,
                rounds: r.rounds,
                newly_unmasked: newly,
                trace,
            }
        })
        .collect())
}

fn single_obs(obs: &Tensor) -> Result<Tensor> {
    obs.reshape(vec![1, obs.len()])
}

/// Generates a chunk from a fully masked start; `K` rounds on the cosine
/// count schedule.
pub fn sample_chunk_discrete(
    model: &impl LogitsModel,
    obs: &Tensor,
    cfg: &UnmaskConfig,
    seed: u64,
) -> Result<TokenChunk> {
    let (h, a) = model.chunk_shape();
    let job = UnmaskJob {
        state: TokenChunk::masked(h, a),
        boundary: 0..h,
        rng: stream(seed, Purpose::Unmask),
        trace: false,
    };
    let mut out = run_unmasking(model, &single_obs(obs)?, vec![job], cfg)?;
    Ok(out.remove(0).tokens)
}

/// Starting state of an inpainting call: the carried pattern when natural
/// carry is on and one is available, else the prefix rows with everything
/// after them masked.
pub fn inpaint_init(
    prefix: &TokenChunk,
    d: usize,
    carry: Option<&TokenChunk>,
    cfg: &UnmaskConfig,
) -> Result<TokenChunk> {
    if d > prefix.horizon() || !prefix.rows_unmasked(0..d) {
        return Err(Error::contract(format!("prefix does not define the first {d} timesteps")));
    }
    match carry {
        Some(c) if cfg.natural_carry => {
            if c.horizon() != prefix.horizon() || c.action_dim() != prefix.action_dim() {
                return Err(Error::shape("inpaint_init", "carry shape differs from prefix"));
            }
            if (0..d).any(|t| c.row(t) != prefix.row(t)) {
                return Err(Error::contract("carried pattern disagrees with the committed prefix"));
            }
            Ok(c.clone())
        }
        _ => {
            let mut state = TokenChunk::masked(prefix.horizon(), prefix.action_dim());
            for t in 0..d {
                state.set_row(t, prefix.row(t));
            }
            Ok(state)
        }
    }
}

/// Output of [`discrete_rtc_sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteRtcOutput {
    /// The (possibly partially masked) chunk; also the carry pattern for the
    /// next call.
    pub tokens: TokenChunk,
    pub rounds: usize,
    pub newly_unmasked: usize,
}

/// Inpaints the chunk after a `d`-step committed prefix. Prefix tokens are
/// never resampled; with early stop the call ends once timesteps
/// `d..d + s` are fully unmasked.
#[allow(clippy::too_many_arguments)]
pub fn discrete_rtc_sample(
    model: &impl LogitsModel,
    obs: &Tensor,
    prefix: &TokenChunk,
    d: usize,
    s: usize,
    carry: Option<&TokenChunk>,
    cfg: &UnmaskConfig,
    seed: u64,
) -> Result<DiscreteRtcOutput> {
    if d + s > prefix.horizon() {
        return Err(Error::config("executor.d", format!("d + s = {} exceeds H", d + s)));
    }
    let job = UnmaskJob {
        state: inpaint_init(prefix, d, carry, cfg)?,
        boundary: d..d + s,
        rng: stream(seed, Purpose::Unmask),
        trace: false,
    };
    let out = run_unmasking(model, &single_obs(obs)?, vec![job], cfg)?.remove(0);
    Ok(DiscreteRtcOutput {
        tokens: out.tokens,
        rounds: out.rounds,
        newly_unmasked: out.newly_unmasked,
    })
}

/// Moves a carried pattern into the next chunk's time base: drop the first
/// `s` timesteps, shift the rest left, append `s` masked timesteps and
/// write the first `d` timesteps of `prefix` over the head.
pub fn shift_carry_pattern(carry: &TokenChunk, s: usize, prefix: &TokenChunk, d: usize) -> TokenChunk {
    let h = carry.horizon();
    let mut out = TokenChunk::masked(h, carry.action_dim());
    for t in 0..h.saturating_sub(s) {
        out.set_row(t, carry.row(t + s));
    }
    for t in 0..d.min(h) {
        out.set_row(t, prefix.row(t));
    }
    out
}
