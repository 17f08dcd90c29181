use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Head, MixerConfig};
use crate::error::{Error, Result};
use crate::math::{Tape, Tensor, Var};

const POS_INIT_STD: f64 = 0.02;
const LOGITS_HEAD_STD: f64 = 0.01;

/// Named parameter tensors of one mixer policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    config: MixerConfig,
    tensors: BTreeMap<String, Tensor>,
}

enum Init {
    Zero,
    /// N(0, 1/fan_in) with `fan_in` the leading dim.
    FanIn,
    Normal(f64),
}

/// Parameter names, shapes and initialisers in construction order.
fn layout(cfg: &MixerConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, a, c) = (cfg.chunk_len, cfg.action_dim, cfg.channel_dim);
    let ca = cfg.action_channels();
    let co = cfg.obs_channels();
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, init: Init| out.push((name.to_string(), shape, init));
    match cfg.head {
        Head::Velocity => {
            push("embed.action.w", vec![a, ca], Init::FanIn);
            push("embed.action.b", vec![ca], Init::Zero);
            push("cond.time.w", vec![c, c], Init::FanIn);
            push("cond.time.b", vec![c], Init::Zero);
        }
        Head::Logits => {
            push("embed.bins", vec![cfg.num_bins + 1, cfg.bin_embed_dim], Init::Normal(1.0));
            push("embed.pack.w", vec![a * cfg.bin_embed_dim, ca], Init::FanIn);
            push("embed.pack.b", vec![ca], Init::Zero);
            push("cond.learned", vec![c], Init::Normal(1.0));
        }
    }
    push("embed.obs.w", vec![cfg.obs_dim, co], Init::FanIn);
    push("embed.obs.b", vec![co], Init::Zero);
    push("embed.pos", vec![h, c], Init::Normal(POS_INIT_STD));
    for i in 0..cfg.num_blocks {
        let p = format!("blocks.{i}");
        push(&format!("{p}.mod.w"), vec![c, 6 * c], Init::Zero);
        push(&format!("{p}.mod.b"), vec![6 * c], Init::Zero);
        push(&format!("{p}.token.w1"), vec![h, cfg.token_hidden], Init::FanIn);
        push(&format!("{p}.token.b1"), vec![cfg.token_hidden], Init::Zero);
        push(&format!("{p}.token.w2"), vec![cfg.token_hidden, h], Init::FanIn);
        push(&format!("{p}.token.b2"), vec![h], Init::Zero);
        push(&format!("{p}.channel.w1"), vec![c, cfg.channel_hidden], Init::FanIn);
        push(&format!("{p}.channel.b1"), vec![cfg.channel_hidden], Init::Zero);
        push(&format!("{p}.channel.w2"), vec![cfg.channel_hidden, c], Init::FanIn);
        push(&format!("{p}.channel.b2"), vec![c], Init::Zero);
    }
    push("final.mod.w", vec![c, 2 * c], Init::Zero);
    push("final.mod.b", vec![2 * c], Init::Zero);
    match cfg.head {
        Head::Velocity => {
            push("head.w", vec![c, a], Init::Zero);
            push("head.b", vec![a], Init::Zero);
        }
        Head::Logits => {
            push("head.w", vec![c, a * cfg.num_bins], Init::Normal(LOGITS_HEAD_STD));
            push("head.b", vec![a * cfg.num_bins], Init::Zero);
        }
    }
    out
}

impl PolicyParams {
    /// Deterministic initialisation. The velocity head and every AdaLN
    /// projection start at zero, so a fresh flow policy outputs zero velocity
    /// and every block starts as the identity.
    pub fn init(config: &MixerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::FanIn => sample(&mut rng, n, 1.0 / (shape[0] as f64).sqrt()),
                Init::Normal(std) => sample(&mut rng, n, std),
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(PolicyParams {
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds params from named tensors, checking names and shapes.
    pub fn from_tensors(config: &MixerConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut out = BTreeMap::new();
        for (name, shape, _) in layout(config) {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
            out.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected parameter `{extra}`")));
        }
        Ok(PolicyParams {
            config: config.clone(),
            tensors: out,
        })
    }

    pub fn config(&self) -> &MixerConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Applies `f(name, tensor)` to every parameter in name order.
    pub fn update(&mut self, mut f: impl FnMut(&str, &mut Tensor) -> Result<()>) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            f(name, t)?;
        }
        Ok(())
    }

    /// Records every parameter on `tape`: as gradient leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

fn sample(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Parameters recorded on one tape.
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    /// Substitutes `var` for the parameter `name` (used to differentiate
    /// with respect to a single tensor).
    pub fn with_var(mut self, name: &str, var: Var<'t>) -> Self {
        self.vars.insert(name.to_string(), var);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
