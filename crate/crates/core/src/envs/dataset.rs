//! Expert demonstration files.
//!
//! Layout (little endian): magic `CLDATA01`, `u32` format version, `u64`
//! length + UTF-8 JSON header, then per episode a `u32` step count followed
//! by that many `(observation, clean action)` records as `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sim::{EnvConfig, EnvKind, EnvState, ACTION_DIM, OBS_DIM};
use crate::chunk::ActionChunk;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CLDATA01";
pub const DATASET_VERSION: u32 = 1;

/// Self-description stored ahead of the records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub env: EnvKind,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub chunk_len: usize,
    pub action_noise_std: f64,
    pub seed: u64,
    pub episodes: usize,
    pub records: usize,
    pub env_config: EnvConfig,
}

#[derive(Clone, Debug, PartialEq)]
struct Episode {
    obs: Vec<f64>,
    actions: Vec<f64>,
}

impl Episode {
    fn len(&self) -> usize {
        self.actions.len() / ACTION_DIM
    }
}

/// Per-step observations and clean expert actions, grouped by episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    header: DatasetHeader,
    episodes: Vec<Episode>,
    /// `(episode, step)` of every record, in file order.
    index: Vec<(usize, usize)>,
}

impl Dataset {
    /// Rolls the noisy expert for `n_episodes`; the stored action is the
    /// expert's clean intent.
    pub fn collect(cfg: &EnvConfig, n_episodes: usize, seed: u64, chunk_len: usize) -> Result<Self> {
        cfg.validate()?;
        if chunk_len == 0 {
            return Err(Error::config("policy.chunk_len", "must be positive"));
        }
        let cfg = EnvConfig { seed, ..cfg.clone() };
        let mut episodes = Vec::with_capacity(n_episodes);
        for e in 0..n_episodes {
            let mut st = EnvState::reset(&cfg, e as u64);
            let mut ep = Episode {
                obs: Vec::new(),
                actions: Vec::new(),
            };
            for _ in 0..cfg.episode_len {
                let a = st.expert_action(&cfg);
                ep.obs.extend(st.observation());
                ep.actions.extend_from_slice(&a);
                if st.step(&cfg, a)?.done {
                    break;
                }
            }
            episodes.push(ep);
        }
        let header = DatasetHeader {
            env: cfg.env,
            obs_dim: OBS_DIM,
            action_dim: ACTION_DIM,
            chunk_len,
            action_noise_std: cfg.action_noise_std,
            seed,
            episodes: n_episodes,
            records: episodes.iter().map(Episode::len).sum(),
            env_config: cfg,
        };
        Ok(Self::assemble(header, episodes))
    }

    fn assemble(header: DatasetHeader, episodes: Vec<Episode>) -> Self {
        let index = episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t)))
            .collect();
        Dataset {
            header,
            episodes,
            index,
        }
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    /// Number of records (one per simulated step).
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn episode_lengths(&self) -> Vec<usize> {
        self.episodes.iter().map(Episode::len).collect()
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        let (e, t) = self.index[i];
        &self.episodes[e].obs[t * OBS_DIM..(t + 1) * OBS_DIM]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        let (e, t) = self.index[i];
        &self.episodes[e].actions[t * ACTION_DIM..(t + 1) * ACTION_DIM]
    }

    /// The `chunk_len` clean actions starting at record `i`, padded with the
    /// episode's last action past its end.
    pub fn window(&self, i: usize) -> ActionChunk {
        let (e, t) = self.index[i];
        let ep = &self.episodes[e];
        let h = self.header.chunk_len;
        let mut data = Vec::with_capacity(h * ACTION_DIM);
        for k in 0..h {
            let j = (t + k).min(ep.len() - 1);
            data.extend_from_slice(&ep.actions[j * ACTION_DIM..(j + 1) * ACTION_DIM]);
        }
        ActionChunk::new(h, ACTION_DIM, data).expect("window shape")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for ep in &self.episodes {
            out.extend_from_slice(&(ep.len() as u32).to_le_bytes());
            for t in 0..ep.len() {
                for v in &ep.obs[t * OBS_DIM..(t + 1) * OBS_DIM] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for v in &ep.actions[t * ACTION_DIM..(t + 1) * ACTION_DIM] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a dataset (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let len = read_u64(&mut r)? as usize;
        if len > r.len() {
            return Err(Error::Format("truncated header".into()));
        }
        let header: DatasetHeader =
            serde_json::from_slice(&r[..len]).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        r = &r[len..];
        if header.obs_dim != OBS_DIM || header.action_dim != ACTION_DIM {
            return Err(Error::Format(format!(
                "dims obs={} action={} do not match this build",
                header.obs_dim, header.action_dim
            )));
        }
        let mut episodes = Vec::with_capacity(header.episodes);
        for _ in 0..header.episodes {
            let steps = read_u32(&mut r)? as usize;
            let mut ep = Episode {
                obs: Vec::with_capacity(steps * OBS_DIM),
                actions: Vec::with_capacity(steps * ACTION_DIM),
            };
            for _ in 0..steps {
                for _ in 0..OBS_DIM {
                    ep.obs.push(read_f64(&mut r)?);
                }
                for _ in 0..ACTION_DIM {
                    ep.actions.push(read_f64(&mut r)?);
                }
            }
            episodes.push(ep);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        let records: usize = episodes.iter().map(Episode::len).sum();
        if records != header.records {
            return Err(Error::Format(format!("header says {} records, found {records}", header.records)));
        }
        Ok(Self::assemble(header, episodes))
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
