//! AdamW training of either head on a demonstration dataset, with
//! step-keyed randomness so a resumed run continues bit-exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::chunk::ActionChunk;
use crate::discrete::{discrete_train_loss, prefix_finetune_batch};
use crate::envs::Dataset;
use crate::error::{Error, Result};
use crate::flow::{flow_train_loss, LossAndGrads};
use crate::math::Tensor;
use crate::net::{Checkpoint, Head, PolicyParams};
use crate::rng::{stream_for, Purpose};

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Learning-rate shape after warmup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Which objective the discrete head is trained with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Standard,
    /// Reveal a random ground-truth prefix after masking.
    PrefixFinetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the total step count below `epochs` worth of batches.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub schedule: LrSchedule,
    pub warmup_steps: usize,
    #[serde(default)]
    pub mode: TrainMode,
    pub seed: u64,
}

impl TrainConfig {
    /// Reference hyperparameters for `head`.
    pub fn for_head(head: Head) -> Self {
        let (schedule, warmup_steps) = match head {
            Head::Velocity => (LrSchedule::Constant, 1000),
            Head::Logits => (LrSchedule::Cosine, 2000),
        };
        TrainConfig {
            batch_size: 512,
            epochs: 32,
            max_steps: None,
            lr: 3e-4,
            weight_decay: 1e-2,
            grad_clip: 10.0,
            schedule,
            warmup_steps,
            mode: TrainMode::Standard,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("train.max_steps", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("train.grad_clip", "must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, records: usize) -> usize {
        records.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, records: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(records);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    /// Learning rate for 0-based `step`: linear warmup, then constant or
    /// cosine decay to zero at `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1);
                let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                0.5 * self.lr * (1.0 + (PI * progress).cos())
            }
        }
    }
}

/// Decoupled-weight-decay Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    /// Updates applied so far.
    t: u64,
}

impl AdamW {
    pub fn new(params: &PolicyParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .tensors()
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut PolicyParams, grads: &BTreeMap<String, Tensor>, lr: f64, wd: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        params.update(|name, p| {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
            let m = self.m.get_mut(name).expect("moment per parameter");
            let v = self.v.get_mut(name).expect("moment per parameter");
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let step = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * (step + wd * *p);
            }
            Ok(())
        })
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Parameters, optimizer and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: PolicyParams,
    pub opt: AdamW,
    pub config: TrainConfig,
    /// Steps completed.
    pub step: usize,
}

impl Trainer {
    pub fn new(params: PolicyParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(&params);
        Ok(Trainer {
            params,
            opt,
            config,
            step: 0,
        })
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let h = data.header();
        let c = self.params.config();
        if h.obs_dim != c.obs_dim || h.action_dim != c.action_dim || h.chunk_len != c.chunk_len {
            return Err(Error::config(
                "policy",
                format!(
                    "dataset dims (obs {}, A {}, H {}) differ from the policy (obs {}, A {}, H {})",
                    h.obs_dim, h.action_dim, h.chunk_len, c.obs_dim, c.action_dim, c.chunk_len
                ),
            ));
        }
        if data.is_empty() {
            return Err(Error::contract("empty dataset"));
        }
        Ok(())
    }

    /// Record indices of the batch used at `step`: each epoch walks a fresh
    /// permutation.
    fn batch_indices(&self, records: usize, step: usize) -> Vec<usize> {
        let per_epoch = self.config.steps_per_epoch(records);
        let (epoch, k) = (step / per_epoch, step % per_epoch);
        let mut order: Vec<usize> = (0..records).collect();
        order.shuffle(&mut stream_for(self.config.seed, Purpose::Shuffle, &[epoch as u64]));
        let lo = k * self.config.batch_size;
        let hi = (lo + self.config.batch_size).min(records);
        order[lo..hi].to_vec()
    }

    /// Loss and gradients of the batch for `step`, without updating.
    pub fn batch_loss(&self, data: &Dataset, step: usize) -> Result<LossAndGrads> {
        let idx = self.batch_indices(data.len(), step);
        let c = self.params.config();
        let obs_rows: Vec<f64> = idx.iter().flat_map(|&i| data.observation(i).iter().copied()).collect();
        let obs = Tensor::new(vec![idx.len(), c.obs_dim], obs_rows)?;
        let chunks: Vec<ActionChunk> = idx.iter().map(|&i| data.window(i)).collect();
        let mut rng = stream_for(self.config.seed, Purpose::Training, &[step as u64]);
        match (c.head, self.config.mode) {
            (Head::Velocity, TrainMode::Standard) => {
                let clean: Vec<f64> = chunks.iter().flat_map(|a| a.data().iter().copied()).collect();
                let clean = Tensor::new(vec![idx.len(), c.chunk_len, c.action_dim], clean)?;
                flow_train_loss(&self.params, &obs, &clean, &mut rng)
            }
            (Head::Velocity, TrainMode::PrefixFinetune) => {
                Err(Error::config("train.mode", "prefix fine-tuning applies to the logits head only"))
            }
            (Head::Logits, TrainMode::Standard) => Ok(discrete_train_loss(&self.params, &obs, &chunks, &mut rng)?.0),
            (Head::Logits, TrainMode::PrefixFinetune) => {
                Ok(prefix_finetune_batch(&self.params, &obs, &chunks, &mut rng)?.0)
            }
        }
    }

    /// Runs one optimizer step.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepLog> {
        self.check_dataset(data)?;
        let total = self.config.total_steps(data.len());
        let LossAndGrads { loss, mut grads } = self.batch_loss(data, self.step)?;
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at step {}", self.step)));
        }
        let lr = self.config.lr_at(self.step, total);
        self.opt.update(&mut self.params, &grads, lr, self.config.weight_decay)?;
        let log = StepLog {
            step: self.step,
            loss,
            lr,
            grad_norm,
        };
        self.step += 1;
        Ok(log)
    }

    /// Trains until the schedule's last step, calling `on_step` after each.
    pub fn run(&mut self, data: &Dataset, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let total = self.config.total_steps(data.len());
        let mut logs = Vec::with_capacity(total.saturating_sub(self.step));
        while self.step < total {
            let log = self.train_step(data)?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    /// Parameters plus optimizer moments and schedule position.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let train = serde_json::to_value(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let meta = json!({ "train": train, "step": self.step, "adam_t": self.opt.t });
        let mut ck = Checkpoint::from_policy(&self.params, meta)?;
        for (k, t) in &self.opt.m {
            ck.tensors.insert(format!("{ADAM_M}{k}"), t.clone());
        }
        for (k, t) in &self.opt.v {
            ck.tensors.insert(format!("{ADAM_V}{k}"), t.clone());
        }
        Ok(ck)
    }

    /// Restores a run written by [`Trainer::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let params = ck.policy()?;
        let config: TrainConfig = ck
            .meta
            .get("train")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint has no training state".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Format(e.to_string())))?;
        let field = |k: &str| {
            ck.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Format(format!("checkpoint meta lacks `{k}`")))
        };
        let step = field("step")? as usize;
        let t = field("adam_t")?;
        let mut opt = AdamW::new(&params);
        for (prefix, store) in [(ADAM_M, &mut opt.m), (ADAM_V, &mut opt.v)] {
            for (k, slot) in store.iter_mut() {
                let saved = ck
                    .tensors
                    .get(&format!("{prefix}{k}"))
                    .ok_or_else(|| Error::Format(format!("missing optimizer tensor {prefix}{k}")))?;
                if saved.shape() != slot.shape() {
                    return Err(Error::Format(format!("optimizer tensor {prefix}{k} has the wrong shape")));
                }
                *slot = saved.clone();
            }
        }
        opt.t = t;
        config.validate()?;
        Ok(Trainer {
            params,
            opt,
            config,
            step,
        })
    }
}
