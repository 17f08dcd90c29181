use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Execution strategy under inference delay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Play the whole chunk, then stand still while the next one is computed.
    Sync,
    /// Switch to a from-scratch chunk as soon as it is ready.
    NaiveAsync,
    /// Exponentially weighted average of every chunk covering a step.
    TemporalEnsemble,
    /// Best of N from-scratch chunks by agreement with the previous chunk.
    Bid,
    /// Flow sampling with guided inpainting of the committed prefix.
    ContinuousRtc,
    /// Unmasking with the committed prefix tokens kept fixed.
    DiscreteRtc,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Sync,
        Method::NaiveAsync,
        Method::TemporalEnsemble,
        Method::Bid,
        Method::ContinuousRtc,
        Method::DiscreteRtc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sync => "sync",
            Method::NaiveAsync => "naive_async",
            Method::TemporalEnsemble => "temporal_ensemble",
            Method::Bid => "bid",
            Method::ContinuousRtc => "continuous_rtc",
            Method::DiscreteRtc => "discrete_rtc",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// What a synchronous executor sends while it waits for inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PauseAction {
    #[default]
    Zero,
    /// Repeat the last executed action.
    Hold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub method: Method,
    /// Inference delay in controller steps.
    pub d: usize,
    /// Execution horizon: steps between inference starts.
    pub s: usize,
    pub horizon: usize,
    pub bid_n: usize,
    /// Temporal-ensemble decay per cycle of age.
    pub te_decay: f64,
    pub pause_action: PauseAction,
}

impl ExecutorConfig {
    /// `s = max(1, d)` and default knobs.
    pub fn new(method: Method, d: usize, horizon: usize) -> Self {
        ExecutorConfig {
            method,
            d,
            s: d.max(1),
            horizon,
            bid_n: 16,
            te_decay: 0.5,
            pause_action: PauseAction::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(Error::config("executor.s", "must be at least 1"));
        }
        if self.d > self.s {
            return Err(Error::config(
                "executor.d",
                format!("inference delay {} exceeds execution horizon {}; requests would overrun", self.d, self.s),
            ));
        }
        if self.d + self.s > self.horizon {
            return Err(Error::config(
                "executor.s",
                format!("d + s = {} exceeds chunk length {}", self.d + self.s, self.horizon),
            ));
        }
        if self.bid_n == 0 {
            return Err(Error::config("executor.bid_n", "must be at least 1"));
        }
        if !(self.te_decay >= 0.0) {
            return Err(Error::config("executor.te_decay", "must be >= 0"));
        }
        Ok(())
    }
}
