//! Flow-matching policy: training loss, Euler sampling, one-step denoising
//! and ΠGDM-guided inpainting of a committed prefix.
//!
//! Interpolant: `A^τ = (1 − τ)·A⁰ + τ·A¹` with `A⁰ ~ N(0, I)` and data `A¹`;
//! the velocity target is `A¹ − A⁰` and sampling integrates τ from 0 to 1.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::chunk::ActionChunk;
use crate::error::{Error, Result};
use crate::math::{OpStats, Tape, Tensor, Var};
use crate::net::PolicyParams;
use crate::rng::{stream, Purpose};

/// Anything that predicts a velocity field over a batch of chunks.
pub trait VelocityModel {
    /// `(H, A)` of the chunks this model acts on.
    fn chunk_shape(&self) -> (usize, usize);

    /// `obs [B, O]`, `chunk [B, H, A]`, one flow time per row.
    fn velocity<'t>(&self, tape: &'t Tape, obs: &Tensor, chunk: Var<'t>, tau: &[f64]) -> Result<Var<'t>>;
}

impl VelocityModel for PolicyParams {
    fn chunk_shape(&self) -> (usize, usize) {
        (self.config().chunk_len, self.config().action_dim)
    }

    fn velocity<'t>(&self, tape: &'t Tape, obs: &Tensor, chunk: Var<'t>, tau: &[f64]) -> Result<Var<'t>> {
        let p = self.bind(tape, false);
        PolicyParams::velocity(self, &p, tape.constant(obs.clone()), chunk, tau)
    }
}

/// Euler sampler settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSampleConfig {
    /// Denoising steps.
    pub n: usize,
    pub seed: u64,
}

impl Default for FlowSampleConfig {
    fn default() -> Self {
        FlowSampleConfig { n: 5, seed: 0 }
    }
}

/// ΠGDM inpainting settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Upper clamp on the guidance weight.
    pub beta: f64,
    /// Geometric decay of the soft mask over the overlap region.
    pub decay_ratio: f64,
    pub d: usize,
    pub s: usize,
}

impl GuidanceConfig {
    pub fn new(d: usize, s: usize) -> Self {
        GuidanceConfig {
            beta: 5.0,
            decay_ratio: 0.5,
            d,
            s,
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("guidance.beta", "must be positive"));
        }
        if !(self.decay_ratio > 0.0 && self.decay_ratio <= 1.0) {
            return Err(Error::config("guidance.decay_ratio", "must lie in (0, 1]"));
        }
        if self.d > self.s || self.d + self.s > horizon {
            return Err(Error::config(
                "guidance.d",
                format!("need d <= s and d + s <= H (d={}, s={}, H={horizon})", self.d, self.s),
            ));
        }
        Ok(())
    }
}

/// Evaluation cost of a sampler call.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleCost {
    pub forwards: usize,
    pub vjps: usize,
    pub ops: OpStats,
}

impl SampleCost {
    fn add_tape(&mut self, tape: &Tape) {
        self.ops.merge(&tape.stats());
    }

    pub fn merge(&mut self, other: &SampleCost) {
        self.forwards += other.forwards;
        self.vjps += other.vjps;
        self.ops.merge(&other.ops);
    }
}

/// Standard-normal chunk noise `[H, A]` drawn from `rng`.
pub fn gaussian_chunk(rng: &mut impl Rng, horizon: usize, action_dim: usize) -> Tensor {
    let data = (0..horizon * action_dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![horizon, action_dim], data).expect("noise shape")
}

/// Initial noise for a single-chunk sampler call with this seed.
pub fn initial_noise(seed: u64, horizon: usize, action_dim: usize) -> Tensor {
    gaussian_chunk(&mut stream(seed, Purpose::FlowNoise), horizon, action_dim)
}

fn check_batch(model: &impl VelocityModel, obs: &Tensor, chunk: &Tensor) -> Result<usize> {
    let (h, a) = model.chunk_shape();
    let b = chunk.shape().first().copied().unwrap_or(0);
    if chunk.shape() != [b, h, a] || obs.rank() != 2 || obs.shape()[0] != b {
        return Err(Error::shape(
            "flow sampler",
            format!("obs {:?}, chunk {:?} for H={h}, A={a}", obs.shape(), chunk.shape()),
        ));
    }
    Ok(b)
}

fn axpy(x: &Tensor, c: f64, v: &Tensor) -> Result<Tensor> {
    x.zip_map(v, |x, v| x + c * v)
}

fn interpolate(clean: &Tensor, noise: &Tensor, tau: &[f64]) -> Result<(Tensor, Tensor)> {
    let b = tau.len();
    if noise.shape() != clean.shape() || b == 0 || clean.shape()[0] != b {
        return Err(Error::shape("flow_loss", "noise/τ do not match the batch"));
    }
    let per_row = clean.len() / b;
    let a_tau = (0..clean.len())
        .map(|i| {
            let t = tau[i / per_row];
            (1.0 - t) * noise.data()[i] + t * clean.data()[i]
        })
        .collect();
    let target = clean.zip_map(noise, |x1, x0| x1 - x0)?;
    Ok((Tensor::new(clean.shape().to_vec(), a_tau)?, target))
}

fn mse_to_target<'t>(
    tape: &'t Tape,
    clean: &Tensor,
    noise: &Tensor,
    tau: &[f64],
    velocity: impl FnOnce(Var<'t>) -> Result<Var<'t>>,
) -> Result<Var<'t>> {
    let (a_tau, target) = interpolate(clean, noise, tau)?;
    velocity(tape.constant(a_tau))?
        .sub(&tape.constant(target))?
        .square()?
        .mean_all()
}

/// Flow-matching loss on an existing tape: mean squared error between the
/// predicted velocity at `A^τ` and `A¹ − A⁰`, averaged over elements.
pub fn flow_loss<'t>(
    model: &impl VelocityModel,
    tape: &'t Tape,
    obs: &Tensor,
    clean: &Tensor,
    noise: &Tensor,
    tau: &[f64],
) -> Result<Var<'t>> {
    check_batch(model, obs, clean)?;
    mse_to_target(tape, clean, noise, tau, |a| model.velocity(tape, obs, a, tau))
}

/// Loss value and gradients for every parameter tensor.
#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// Draws `τ ~ U[0, 1)` and `A⁰ ~ N(0, I)` per row from `rng`, then evaluates
/// the flow loss and its parameter gradients.
pub fn flow_train_loss(
    params: &PolicyParams,
    obs: &Tensor,
    clean: &Tensor,
    rng: &mut impl Rng,
) -> Result<LossAndGrads> {
    let b = check_batch(params, obs, clean)?;
    let tau: Vec<f64> = (0..b).map(|_| rng.gen_range(0.0..1.0)).collect();
    let noise_data = (0..clean.len()).map(|_| rng.sample(StandardNormal)).collect();
    let noise = Tensor::new(clean.shape().to_vec(), noise_data)?;
    let tape = Tape::new();
    let p = params.bind(&tape, true);
    let obs_v = tape.constant(obs.clone());
    let loss = mse_to_target(&tape, clean, &noise, &tau, |a| params.velocity(&p, obs_v, a, &tau))?;
    param_grads(&tape, &p, loss)
}

pub(crate) fn param_grads<'t>(
    tape: &'t Tape,
    p: &crate::net::BoundParams<'t>,
    loss: Var<'t>,
) -> Result<LossAndGrads> {
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let g = tape.backward(loss, &Tensor::scalar(1.0))?;
    let grads = p.iter().map(|(k, v)| (k.to_string(), g.wrt(v))).collect();
    Ok(LossAndGrads { loss: value, grads })
}

/// One plain Euler step `A + v/n` for a batch at flow time `tau`.
pub fn euler_step(
    model: &impl VelocityModel,
    obs: &Tensor,
    a: &Tensor,
    tau: f64,
    n: usize,
    cost: &mut SampleCost,
) -> Result<Tensor> {
    let b = check_batch(model, obs, a)?;
    let tape = Tape::new();
    let v = model.velocity(&tape, obs, tape.constant(a.clone()), &vec![tau; b])?;
    cost.forwards += 1;
    cost.add_tape(&tape);
    axpy(a, 1.0 / n as f64, &v.value())
}

/// Integrates a batch of initial noises `[B, H, A]` through `n` Euler steps
/// and clamps the result to `[-1, 1]`.
pub fn sample_batch(
    model: &impl VelocityModel,
    obs: &Tensor,
    noise: &Tensor,
    n: usize,
) -> Result<(Tensor, SampleCost)> {
    if n == 0 {
        return Err(Error::config("flow.n", "need at least one denoising step"));
    }
    let mut cost = SampleCost::default();
    let mut a = noise.clone();
    for k in 0..n {
        a = euler_step(model, obs, &a, k as f64 / n as f64, n, &mut cost)?;
    }
    Ok((a.map(|x| x.clamp(-1.0, 1.0)), cost))
}

fn batch_of_one(obs: &Tensor, chunk: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut cshape = vec![1];
    cshape.extend_from_slice(chunk.shape());
    Ok((obs.reshape(vec![1, obs.len()])?, chunk.reshape(cshape)?))
}

/// Samples one chunk from `N(0, I)` noise seeded by `cfg.seed`.
pub fn sample_chunk(model: &impl VelocityModel, obs: &Tensor, cfg: &FlowSampleConfig) -> Result<ActionChunk> {
    let (h, a) = model.chunk_shape();
    let (obs, noise) = batch_of_one(obs, &initial_noise(cfg.seed, h, a))?;
    let (out, _) = sample_batch(model, &obs, &noise, cfg.n)?;
    ActionChunk::new(h, a, out.into_data())
}

/// `f̂(A^τ) = A^τ + (1 − τ)·v(A^τ)` recorded on `tape`.
pub fn one_step_denoise_var<'t>(
    model: &impl VelocityModel,
    tape: &'t Tape,
    obs: &Tensor,
    a_tau: Var<'t>,
    tau: f64,
) -> Result<Var<'t>> {
    let b = a_tau.shape()[0];
    let v = model.velocity(tape, obs, a_tau, &vec![tau; b])?;
    a_tau.add(&v.scale(1.0 - tau)?)
}

/// Single-chunk one-step denoiser.
pub fn one_step_denoise(model: &impl VelocityModel, obs: &Tensor, a_tau: &Tensor, tau: f64) -> Result<ActionChunk> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::contract(format!("one-step denoise needs τ in [0, 1), got {tau}")));
    }
    let (obs, a) = batch_of_one(obs, a_tau)?;
    let tape = Tape::new();
    let out = one_step_denoise_var(model, &tape, &obs, tape.constant(a), tau)?;
    ActionChunk::from_tensor(&out.value().reshape(a_tau.shape().to_vec())?)
}

/// Per-timestep guidance weights: 1 on the first `d` rows, `r^(i−d+1)` over
/// the overlap, 0 on the last `s` rows.
pub fn soft_mask_weights(d: usize, s: usize, horizon: usize, decay_ratio: f64) -> Result<Vec<f64>> {
    if d + s > horizon {
        return Err(Error::config("guidance.d", format!("d + s = {} exceeds H = {horizon}", d + s)));
    }
    Ok((0..horizon)
        .map(|i| {
            if i < d {
                1.0
            } else if i < horizon - s {
                decay_ratio.powi((i - d + 1) as i32)
            } else {
                0.0
            }
        })
        .collect())
}

/// `r_τ² = (1 − τ)² / (τ² + (1 − τ)²)`.
pub fn r_tau_squared(tau: f64) -> f64 {
    let u = 1.0 - tau;
    u * u / (tau * tau + u * u)
}

/// `min(β, (1 − τ) / (τ · r_τ²))`, equal to β at τ = 0.
pub fn guidance_weight(tau: f64, beta: f64) -> f64 {
    if tau <= 0.0 {
        return beta;
    }
    beta.min((1.0 - tau) / (tau * r_tau_squared(tau)))
}

/// One guided Euler step for a batch sharing `tau` and the soft mask `w`.
///
/// The correction pulls `f̂(A^τ)` toward `y` through the VJP of the
/// one-step denoiser; the VJP is evaluated even where `w` vanishes, so the
/// cost of a guided step does not depend on the mask.
#[allow(clippy::too_many_arguments)]
pub fn pigdm_guided_step(
    model: &impl VelocityModel,
    obs: &Tensor,
    a: &Tensor,
    tau: f64,
    y: &Tensor,
    w: &[f64],
    beta: f64,
    n: usize,
    cost: &mut SampleCost,
) -> Result<Tensor> {
    let b = check_batch(model, obs, a)?;
    let (h, ad) = model.chunk_shape();
    if y.shape() != a.shape() || w.len() != h {
        return Err(Error::shape("pigdm_guided_step", "prefix or mask does not match the chunk"));
    }
    let tape = Tape::new();
    let x = tape.leaf(a.clone());
    let v = model.velocity(&tape, obs, x, &vec![tau; b])?;
    let f_hat = x.add(&v.scale(1.0 - tau)?)?;
    let f_val = f_hat.value();
    let err: Vec<f64> = (0..a.len())
        .map(|i| {
            let row = (i / ad) % h;
            if w[row] == 0.0 {
                0.0
            } else {
                w[row] * (y.data()[i] - f_val.data()[i])
            }
        })
        .collect();
    let g = tape.backward(f_hat, &Tensor::new(a.shape().to_vec(), err)?)?.wrt(x);
    cost.forwards += 1;
    cost.vjps += 1;
    cost.add_tape(&tape);
    let weight = guidance_weight(tau, beta);
    let vv = v.value();
    let step = 1.0 / n as f64;
    let out: Vec<f64> = a
        .data()
        .iter()
        .zip(vv.data())
        .zip(g.data())
        .map(|((&a, &v), &g)| a + step * (v + weight * g))
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("guided step".into()));
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Full guided sampler for a batch: `n` guided steps from `noise`, clamped
/// at the end. `w` is the soft mask shared by the batch.
pub fn rtc_sample_batch(
    model: &impl VelocityModel,
    obs: &Tensor,
    noise: &Tensor,
    y: &Tensor,
    w: &[f64],
    beta: f64,
    n: usize,
) -> Result<(Tensor, SampleCost)> {
    if n == 0 {
        return Err(Error::config("flow.n", "need at least one denoising step"));
    }
    let mut cost = SampleCost::default();
    let mut a = noise.clone();
    for k in 0..n {
        a = pigdm_guided_step(model, obs, &a, k as f64 / n as f64, y, w, beta, n, &mut cost)?;
    }
    Ok((a.map(|x| x.clamp(-1.0, 1.0)), cost))
}

/// Prefix the next chunk must reproduce: rows `0..d` are frozen actions,
/// rows `d..` hold overlap targets (stale predictions) where available.
#[derive(Clone, Debug, PartialEq)]
pub struct CommittedPrefix {
    pub values: ActionChunk,
    pub d: usize,
}

/// Inpaints `prefix` into a chunk sampled from the seeded noise; the
/// soft mask is zero everywhere when `d = 0`.
pub fn rtc_sample_chunk(
    model: &impl VelocityModel,
    obs: &Tensor,
    prefix: &CommittedPrefix,
    gcfg: &GuidanceConfig,
    cfg: &FlowSampleConfig,
) -> Result<(ActionChunk, SampleCost)> {
    let (h, a) = model.chunk_shape();
    gcfg.validate(h)?;
    if prefix.d != gcfg.d {
        return Err(Error::contract("prefix length disagrees with guidance config"));
    }
    if prefix.values.data()[..prefix.d * a].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("committed prefix".into()));
    }
    let w = rtc_weights(gcfg, h)?;
    let (obs, noise) = batch_of_one(obs, &initial_noise(cfg.seed, h, a))?;
    let y = prefix.values.to_tensor().reshape(vec![1, h, a])?;
    let (out, cost) = rtc_sample_batch(model, &obs, &noise, &y, &w, gcfg.beta, cfg.n)?;
    Ok((ActionChunk::new(h, a, out.into_data())?, cost))
}

/// Soft mask used by the RTC executor. With no frozen prefix there is
/// nothing to inpaint, so the overlap weights are dropped as well and the
/// sampler reduces to plain Euler.
pub fn rtc_weights(gcfg: &GuidanceConfig, horizon: usize) -> Result<Vec<f64>> {
    if gcfg.d == 0 {
        return Ok(vec![0.0; horizon]);
    }
    soft_mask_weights(gcfg.d, gcfg.s, horizon, gcfg.decay_ratio)
}
