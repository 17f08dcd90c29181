//! MLP-Mixer over the H chunk timesteps with AdaLN-zero conditioning.
//!
//! Each token is one chunk timestep. Its channel vector is the action (or
//! packed bin-embedding) features next to the observation embedding, plus a
//! learned positional table.

use super::config::{Head, MixerConfig};
use super::params::{BoundParams, PolicyParams};
use crate::chunk::TokenChunk;
use crate::error::{Error, Result};
use crate::math::{Tape, Tensor, Var};

fn check_obs(cfg: &MixerConfig, obs: &Var<'_>, batch: usize) -> Result<()> {
    if obs.shape() != [batch, cfg.obs_dim] {
        return Err(Error::shape(
            "mixer",
            format!("obs {:?}, expected [{batch}, {}]", obs.shape(), cfg.obs_dim),
        ));
    }
    Ok(())
}

/// `[B, W] -> [B, H, W]` slices of a modulation vector.
fn modulation<'t>(m: &Var<'t>, index: usize, width: usize, h: usize) -> Result<Var<'t>> {
    m.slice_last(index * width, width)?.expand_axis(1, h)
}

fn modulate<'t>(x: &Var<'t>, shift: &Var<'t>, scale: &Var<'t>) -> Result<Var<'t>> {
    x.layer_norm()?.mul(&scale.add_scalar(1.0)?)?.add(shift)
}

fn trunk<'t>(
    cfg: &MixerConfig,
    p: &BoundParams<'t>,
    action_features: Var<'t>,
    obs: Var<'t>,
    cond: Var<'t>,
) -> Result<Var<'t>> {
    let (h, c) = (cfg.chunk_len, cfg.channel_dim);
    let tape = obs.tape();
    let obs_e = obs
        .matmul(&p.var("embed.obs.w"))?
        .add_trailing(&p.var("embed.obs.b"))?
        .expand_axis(1, h)?;
    let mut x = tape
        .concat(&[action_features, obs_e])?
        .add_trailing(&p.var("embed.pos"))?;
    let cond = cond.gelu()?;
    for i in 0..cfg.num_blocks {
        let w = |n: &str| p.var(&format!("blocks.{i}.{n}"));
        let m = cond.matmul(&w("mod.w"))?.add_trailing(&w("mod.b"))?;
        let slice = |k: usize| modulation(&m, k, c, h);
        let (shift1, scale1, gate1) = (slice(0)?, slice(1)?, slice(2)?);
        let (shift2, scale2, gate2) = (slice(3)?, slice(4)?, slice(5)?);

        let y = modulate(&x, &shift1, &scale1)?
            .transpose_last2()?
            .matmul(&w("token.w1"))?
            .add_trailing(&w("token.b1"))?
            .gelu()?
            .matmul(&w("token.w2"))?
            .add_trailing(&w("token.b2"))?
            .transpose_last2()?;
        x = x.add(&gate1.mul(&y)?)?;

        let y = modulate(&x, &shift2, &scale2)?
            .matmul(&w("channel.w1"))?
            .add_trailing(&w("channel.b1"))?
            .gelu()?
            .matmul(&w("channel.w2"))?
            .add_trailing(&w("channel.b2"))?;
        x = x.add(&gate2.mul(&y)?)?;
    }
    let m = cond
        .matmul(&p.var("final.mod.w"))?
        .add_trailing(&p.var("final.mod.b"))?;
    let shift = modulation(&m, 0, c, h)?;
    let scale = modulation(&m, 1, c, h)?;
    modulate(&x, &shift, &scale)
}

impl PolicyParams {
    /// Batched velocity field: `obs [B, O]`, `chunk [B, H, A]`, one flow time
    /// per row; returns `[B, H, A]`.
    pub fn velocity<'t>(
        &self,
        p: &BoundParams<'t>,
        obs: Var<'t>,
        chunk: Var<'t>,
        tau: &[f64],
    ) -> Result<Var<'t>> {
        let cfg = self.config();
        if cfg.head != Head::Velocity {
            return Err(Error::contract("velocity requested from a logits-head policy"));
        }
        let b = tau.len();
        check_obs(cfg, &obs, b)?;
        if chunk.shape() != [b, cfg.chunk_len, cfg.action_dim] {
            return Err(Error::shape(
                "velocity",
                format!("chunk {:?} for batch {b}", chunk.shape()),
            ));
        }
        if let Some(t) = tau.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::contract(format!("flow time {t} outside [0, 1]")));
        }
        let feats = chunk
            .matmul(&p.var("embed.action.w"))?
            .add_trailing(&p.var("embed.action.b"))?;
        let cond = obs
            .tape()
            .sinusoidal(tau, cfg.channel_dim)
            .matmul(&p.var("cond.time.w"))?
            .add_trailing(&p.var("cond.time.b"))?;
        let x = trunk(cfg, p, feats, obs, cond)?;
        x.matmul(&p.var("head.w"))?.add_trailing(&p.var("head.b"))
    }

    /// Batched bin logits: `obs [B, O]` and one token chunk per row; returns
    /// `[B, H, A, bins]`.
    pub fn logits<'t>(
        &self,
        p: &BoundParams<'t>,
        obs: Var<'t>,
        tokens: &[&TokenChunk],
    ) -> Result<Var<'t>> {
        let cfg = self.config();
        if cfg.head != Head::Logits {
            return Err(Error::contract("logits requested from a velocity-head policy"));
        }
        let b = tokens.len();
        check_obs(cfg, &obs, b)?;
        let (h, a, e) = (cfg.chunk_len, cfg.action_dim, cfg.bin_embed_dim);
        let mut ids = Vec::with_capacity(b * h * a);
        for t in tokens {
            if t.horizon() != h || t.action_dim() != a {
                return Err(Error::shape(
                    "logits",
                    format!("token chunk {}x{}, expected {h}x{a}", t.horizon(), t.action_dim()),
                ));
            }
            t.validate(cfg.num_bins)?;
            ids.extend(t.embedding_ids(cfg.num_bins));
        }
        let feats = p
            .var("embed.bins")
            .gather(&ids)?
            .reshape(&[b, h, a * e])?
            .matmul(&p.var("embed.pack.w"))?
            .add_trailing(&p.var("embed.pack.b"))?;
        let cond = p.var("cond.learned").expand_axis(0, b)?;
        let x = trunk(cfg, p, feats, obs, cond)?;
        x.matmul(&p.var("head.w"))?
            .add_trailing(&p.var("head.b"))?
            .reshape(&[b, h, a, cfg.num_bins])
    }
}

fn single_obs<'t>(tape: &'t Tape, obs: &Tensor) -> Result<Var<'t>> {
    Ok(tape.constant(obs.reshape(vec![1, obs.len()])?))
}

/// Velocity prediction `[H, A]` for one observation and noisy chunk.
pub fn flow_forward(params: &PolicyParams, obs: &Tensor, noisy_chunk: &Tensor, tau: f64) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let cfg = params.config();
    if noisy_chunk.shape() != [cfg.chunk_len, cfg.action_dim] {
        return Err(Error::shape("flow_forward", format!("chunk {:?}", noisy_chunk.shape())));
    }
    let chunk = tape.constant(noisy_chunk.reshape(vec![1, cfg.chunk_len, cfg.action_dim])?);
    let v = params.velocity(&p, single_obs(&tape, obs)?, chunk, &[tau])?;
    v.value().reshape(vec![cfg.chunk_len, cfg.action_dim])
}

/// Unnormalised bin logits `[H, A, bins]` for one observation and token chunk.
pub fn logits_forward(params: &PolicyParams, obs: &Tensor, tokens: &TokenChunk) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let cfg = params.config();
    let l = params.logits(&p, single_obs(&tape, obs)?, &[tokens])?;
    l.value()
        .reshape(vec![cfg.chunk_len, cfg.action_dim, cfg.num_bins])
}
