use rand::Rng;

use super::tokenize::{apply_random_mask, quantize, Quantizer};
use crate::chunk::{ActionChunk, TokenChunk};
use crate::error::{Error, Result};
use crate::flow::{param_grads, LossAndGrads};
use crate::math::{Tape, Tensor, Var};
use crate::net::PolicyParams;

/// Weight of the expected-value L1 term.
pub const L1_WEIGHT: f64 = 0.1;

/// Longest prefix force-unmasked by prefix fine-tuning.
pub const MAX_FINETUNE_PREFIX: usize = 4;

/// Cross-entropy and L1 parts of the discrete loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscreteLossParts {
    pub ce: f64,
    pub l1: f64,
    pub masked: usize,
}

/// Masked-token loss from logits `[.., bins]` (one row per token).
///
/// `inputs` are the partially masked chunks the logits were computed from;
/// only their masked positions contribute. Returns the total loss variable
/// and its two parts.
pub fn discrete_loss_from_logits<'t>(
    logits: Var<'t>,
    inputs: &[&TokenChunk],
    clean: &[&ActionChunk],
    q: &Quantizer,
) -> Result<(Var<'t>, DiscreteLossParts)> {
    let tape = logits.tape();
    let bins = q.bins;
    let rows: usize = inputs.iter().map(|t| t.len()).sum();
    if logits.value().len() != rows * bins || clean.len() != inputs.len() {
        return Err(Error::shape("discrete_loss", format!("logits {:?} for {rows} tokens", logits.shape())));
    }
    let mut targets = Vec::with_capacity(rows);
    let mut weights = Vec::with_capacity(rows);
    let mut values = Vec::with_capacity(rows);
    for (t, c) in inputs.iter().zip(clean) {
        if c.data().len() != t.len() {
            return Err(Error::shape("discrete_loss", "clean chunk does not match tokens"));
        }
        for (i, &v) in c.data().iter().enumerate() {
            targets.push(q.bin(v)? as usize);
            weights.push(if t.is_masked(i) { 1.0 } else { 0.0 });
            values.push(v);
        }
    }
    let masked = weights.iter().filter(|&&w| w > 0.0).count();
    if masked == 0 {
        return Err(Error::contract("no masked positions to score"));
    }
    let inv = 1.0 / masked as f64;
    let flat = logits.reshape(&[rows, bins])?;
    let mask = tape.constant(Tensor::new(vec![rows], weights)?);

    let ce = flat
        .log_softmax()?
        .pick(&targets)?
        .mul(&mask)?
        .sum_all()?
        .scale(-inv)?;
    let centers = tape.constant(Tensor::new(vec![bins, 1], q.centers())?);
    let expected = flat.softmax()?.matmul(&centers)?.reshape(&[rows])?;
    let l1 = expected
        .sub(&tape.constant(Tensor::new(vec![rows], values)?))?
        .abs()?
        .mul(&mask)?
        .sum_all()?
        .scale(inv)?;
    let parts = DiscreteLossParts {
        ce: ce.value().item()?,
        l1: l1.value().item()?,
        masked,
    };
    Ok((ce.add(&l1.scale(L1_WEIGHT)?)?, parts))
}

/// Tokenizes `clean`, draws `u ~ U[0, 1)` and masks accordingly, redrawing
/// while nothing ends up masked.
pub fn draw_training_mask(clean: &ActionChunk, q: &Quantizer, rng: &mut impl Rng) -> Result<TokenChunk> {
    let tokens = quantize(clean, q)?;
    loop {
        let u = rng.gen_range(0.0..1.0);
        let masked = apply_random_mask(&tokens, u, rng)?;
        if masked.masked_count() > 0 {
            return Ok(masked);
        }
    }
}

/// Reveals the first `p` timesteps of `masked` from the clean tokens.
pub fn force_prefix(masked: &TokenChunk, clean: &TokenChunk, p: usize) -> TokenChunk {
    let mut out = masked.clone();
    for t in 0..p.min(masked.horizon()) {
        out.set_row(t, clean.row(t));
    }
    out
}

fn loss_and_grads(
    params: &PolicyParams,
    obs: &Tensor,
    inputs: &[TokenChunk],
    clean: &[ActionChunk],
) -> Result<(LossAndGrads, DiscreteLossParts)> {
    let q = Quantizer::new(params.config().num_bins);
    let tape = Tape::new();
    let p = params.bind(&tape, true);
    let refs: Vec<&TokenChunk> = inputs.iter().collect();
    let logits = params.logits(&p, tape.constant(obs.clone()), &refs)?;
    let clean_refs: Vec<&ActionChunk> = clean.iter().collect();
    let (loss, parts) = discrete_loss_from_logits(logits, &refs, &clean_refs, &q)?;
    Ok((param_grads(&tape, &p, loss)?, parts))
}

/// Loss and parameter gradients on explicitly masked inputs.
pub fn discrete_loss_masked(
    params: &PolicyParams,
    obs: &Tensor,
    inputs: &[TokenChunk],
    clean: &[ActionChunk],
) -> Result<(LossAndGrads, DiscreteLossParts)> {
    loss_and_grads(params, obs, inputs, clean)
}

/// Standard masked-token objective for a batch (`obs [B, O]`).
pub fn discrete_train_loss(
    params: &PolicyParams,
    obs: &Tensor,
    clean: &[ActionChunk],
    rng: &mut impl Rng,
) -> Result<(LossAndGrads, DiscreteLossParts)> {
    let q = Quantizer::new(params.config().num_bins);
    let inputs = clean
        .iter()
        .map(|c| draw_training_mask(c, &q, rng))
        .collect::<Result<Vec<_>>>()?;
    loss_and_grads(params, obs, &inputs, clean)
}

/// Prefix fine-tuning objective: after the usual masking, the first `p`
/// timesteps of each sample (`p` uniform on `0..=4`) are revealed. A sample
/// left with nothing masked is masked and revealed again.
pub fn prefix_finetune_batch(
    params: &PolicyParams,
    obs: &Tensor,
    clean: &[ActionChunk],
    rng: &mut impl Rng,
) -> Result<(LossAndGrads, DiscreteLossParts)> {
    let q = Quantizer::new(params.config().num_bins);
    let mut inputs = Vec::with_capacity(clean.len());
    for c in clean {
        let tokens = quantize(c, &q)?;
        let revealed = loop {
            let masked = draw_training_mask(c, &q, rng)?;
            let p = rng.gen_range(0..=MAX_FINETUNE_PREFIX);
            let revealed = force_prefix(&masked, &tokens, p);
            if revealed.masked_count() > 0 {
                break revealed;
            }
        };
        inputs.push(revealed);
    }
    loss_and_grads(params, obs, &inputs, clean)
}
