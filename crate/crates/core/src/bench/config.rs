//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by `key=value` overrides, then checked against the schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::discrete::UnmaskConfig;
use crate::envs::{EnvConfig, EnvKind, ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::executors::{ExecutorConfig, Method, PauseAction};
use crate::net::{Head, MixerConfig};
use crate::train::TrainConfig;

/// Backbone shape; observation and action sizes come from the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub chunk_len: usize,
    pub channel_dim: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub num_blocks: usize,
    pub num_bins: usize,
    pub bin_embed_dim: usize,
    pub init_seed: u64,
}

impl PolicySection {
    pub fn mixer(&self, head: Head) -> MixerConfig {
        MixerConfig {
            chunk_len: self.chunk_len,
            action_dim: ACTION_DIM,
            obs_dim: OBS_DIM,
            channel_dim: self.channel_dim,
            token_hidden: self.token_hidden,
            channel_hidden: self.channel_hidden,
            num_blocks: self.num_blocks,
            head,
            num_bins: self.num_bins,
            bin_embed_dim: self.bin_embed_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectSection {
    pub episodes: usize,
    pub seed: u64,
}

/// One training recipe per head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub velocity: TrainConfig,
    pub logits: TrainConfig,
}

impl TrainSection {
    pub fn for_head(&self, head: Head) -> &TrainConfig {
        match head {
            Head::Velocity => &self.velocity,
            Head::Logits => &self.logits,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    /// Euler steps of the flow sampler.
    pub n: usize,
    pub beta: f64,
    pub decay_ratio: f64,
    pub unmask: UnmaskConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutorSection {
    pub bid_n: usize,
    pub te_decay: f64,
    pub pause_action: PauseAction,
    /// Head used by methods that work with either.
    pub baseline_head: Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub methods: Vec<Method>,
    pub delays: Vec<usize>,
    pub trials: usize,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discrete_checkpoint: Option<PathBuf>,
    /// Solve-rate rise from the smallest to the largest delay that the
    /// trend report flags.
    pub trend_tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    pub d: usize,
    pub inferences: usize,
    pub seed: u64,
}

/// Everything a CLI command needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub policy: PolicySection,
    pub collect: CollectSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub executor: ExecutorSection,
    pub eval: EvalSection,
    pub trace: TraceSection,
}

impl RunConfig {
    /// Reference settings for `env`.
    pub fn defaults(env: EnvKind) -> Self {
        let reference = MixerConfig::reference(Head::Velocity, OBS_DIM, ACTION_DIM);
        RunConfig {
            env: EnvConfig::preset(env),
            policy: PolicySection {
                chunk_len: reference.chunk_len,
                channel_dim: reference.channel_dim,
                token_hidden: reference.token_hidden,
                channel_hidden: reference.channel_hidden,
                num_blocks: reference.num_blocks,
                num_bins: reference.num_bins,
                bin_embed_dim: reference.bin_embed_dim,
                init_seed: 0,
            },
            collect: CollectSection {
                episodes: 1000,
                seed: 1000,
            },
            train: TrainSection {
                velocity: TrainConfig::for_head(Head::Velocity),
                logits: TrainConfig::for_head(Head::Logits),
            },
            sampler: SamplerSection {
                n: 5,
                beta: 5.0,
                decay_ratio: 0.5,
                unmask: UnmaskConfig::default(),
            },
            executor: ExecutorSection {
                bid_n: 16,
                te_decay: 0.5,
                pause_action: PauseAction::Zero,
                baseline_head: Head::Velocity,
            },
            eval: EvalSection {
                methods: Method::ALL.to_vec(),
                delays: vec![0, 1, 2, 3, 4],
                trials: 512,
                seeds: vec![0],
                flow_checkpoint: None,
                discrete_checkpoint: None,
                trend_tolerance: 0.05,
            },
            trace: TraceSection {
                d: 2,
                inferences: 64,
                seed: 0,
            },
        }
    }

    /// Parses `text` (may be empty), applies `overrides` and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: Value = toml::from_str(text).map_err(|e| Error::config("<config>", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let kind = match user.get("env").and_then(|e| e.get("env")) {
            None => EnvKind::MovingTarget,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|_| Error::config("env.env", "expected one of moving_target, fork, static_reach"))?,
        };
        let mut merged = Value::try_from(Self::defaults(kind)).map_err(|e| Error::Format(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
            let path = e.path().to_string();
            let reason = e.into_inner().to_string();
            Error::config(path, reason.lines().next().unwrap_or_default().trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        for head in [Head::Velocity, Head::Logits] {
            self.policy.mixer(head).validate()?;
        }
        for (name, t) in [("velocity", &self.train.velocity), ("logits", &self.train.logits)] {
            t.validate().map_err(|e| match e {
                Error::Config { field, reason } => {
                    Error::config(field.replacen("train.", &format!("train.{name}."), 1), reason)
                }
                other => other,
            })?;
        }
        if self.collect.episodes == 0 {
            return Err(Error::config("collect.episodes", "must be positive"));
        }
        if self.sampler.n == 0 {
            return Err(Error::config("sampler.n", "need at least one denoising step"));
        }
        if !(self.sampler.beta > 0.0) {
            return Err(Error::config("sampler.beta", "must be positive"));
        }
        if !(self.sampler.decay_ratio > 0.0 && self.sampler.decay_ratio <= 1.0) {
            return Err(Error::config("sampler.decay_ratio", "must lie in (0, 1]"));
        }
        self.sampler.unmask.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("sampler.{field}"), reason),
            other => other,
        })?;
        if self.eval.trials == 0 {
            return Err(Error::config("eval.trials", "must be positive"));
        }
        if self.eval.methods.is_empty() {
            return Err(Error::config("eval.methods", "must not be empty"));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "must not be empty"));
        }
        if self.eval.delays.is_empty() {
            return Err(Error::config("eval.delays", "must not be empty"));
        }
        for &d in self.eval.delays.iter().chain([&self.trace.d]) {
            let e = self.executor_config(Method::NaiveAsync, d);
            e.validate().map_err(|_| {
                Error::config(
                    "eval.delays",
                    format!("delay {d} needs d + max(1, d) <= chunk_len = {}", self.policy.chunk_len),
                )
            })?;
        }
        if self.trace.inferences == 0 {
            return Err(Error::config("trace.inferences", "must be positive"));
        }
        Ok(())
    }

    /// Executor settings for `method` at delay `d` with `s = max(1, d)`.
    pub fn executor_config(&self, method: Method, d: usize) -> ExecutorConfig {
        ExecutorConfig {
            bid_n: self.executor.bid_n,
            te_decay: self.executor.te_decay,
            pause_action: self.executor.pause_action,
            ..ExecutorConfig::new(method, d, self.policy.chunk_len)
        }
    }

    /// The effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// [`RunConfig::to_toml`] with every line prefixed by `# `.
    pub fn comment_header(&self) -> String {
        self.to_toml()
            .lines()
            .map(|l| if l.is_empty() { "#\n".to_string() } else { format!("# {l}\n") })
            .collect()
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is read as TOML, falling back to a bare string.
fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut node = doc;
    for p in parts {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(key, "override path crosses a non-table value"))?;
        node = table.entry(p).or_insert_with(|| Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::config(key, "override path crosses a non-table value"))?
        .insert(last.to_string(), value);
    Ok(())
}
