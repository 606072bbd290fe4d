//! Expert demonstrations and the FLDM binary format.
//!
//! Layout (all little-endian):
//!
//! ```text
//! header   "FLDM" | version u16 | task u8 | client_id u32 | d_obs u16 | d_act u16 | n_episodes u32
//! episode  seed i64 | T u32 | success u8 | obs f64 x T*d_obs | act f64 x T*d_act
//! ```
//!
//! A run directory stores one file per client at
//! `data/<split>/client_<id>.fldm`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{Batch, Matrix, ModelError};
use crate::registry::{EnvironmentConfig, Registry, Split, TaskId};
use crate::seed;
use crate::sim::{self, Expert, SimError, ACTION_DIM, HORIZON};

pub const MAGIC: &[u8; 4] = b"FLDM";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 19;
/// Fresh seeds tried after a failed expert episode before giving up.
pub const MAX_RETRIES: usize = 3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?} (expected \"FLDM\")")]
    BadMagic([u8; 4]),
    #[error("unsupported FLDM version {0}")]
    Version(u16),
    #[error(
        "truncated FLDM payload: needed {needed} bytes at offset {offset}, {available} available"
    )]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("malformed FLDM structure: {0}")]
    Structure(String),
    #[error("dataset of client {0} has no episodes")]
    Empty(u32),
    #[error("expert failed on client {client_id} after {attempts} attempts")]
    ExpertFailure { client_id: u32, attempts: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub client_id: u32,
    pub episode_seed: u64,
    pub observations: Vec<f64>,
    pub actions: Vec<f64>,
    pub success: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len() / ACTION_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: u32,
    pub task: TaskId,
    pub d_obs: usize,
    pub episodes: Vec<Episode>,
}

impl ClientDataset {
    /// Number of (observation, action) pairs.
    pub fn num_pairs(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// First `k` episodes (all of them if fewer).
    pub fn truncated(&self, k: usize) -> ClientDataset {
        ClientDataset {
            episodes: self.episodes.iter().take(k).cloned().collect(),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.d_obs == 0 || self.d_obs > usize::from(u16::MAX) {
            return Err(DatasetError::Structure(format!("d_obs = {}", self.d_obs)));
        }
        for ep in &self.episodes {
            if ep.client_id != self.client_id {
                return Err(DatasetError::Structure(format!(
                    "episode of client {} inside dataset of client {}",
                    ep.client_id, self.client_id
                )));
            }
            let t = ep.len();
            if ep.actions.len() != t * ACTION_DIM || ep.observations.len() != t * self.d_obs {
                return Err(DatasetError::Structure(
                    "episode arrays disagree with their step count".into(),
                ));
            }
            if t as u64 > u64::from(HORIZON) {
                return Err(DatasetError::Structure(format!(
                    "episode length {t} exceeds horizon"
                )));
            }
            if ep.actions.iter().any(|a| !(-1.0..=1.0).contains(a)) {
                return Err(DatasetError::Structure("action outside [-1, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Serializes a dataset to FLDM bytes.
pub fn encode_dataset(ds: &ClientDataset) -> Result<Vec<u8>, DatasetError> {
    ds.validate()?;
    let floats: usize = ds
        .episodes
        .iter()
        .map(|e| e.observations.len() + e.actions.len())
        .sum();
    let mut out = Vec::with_capacity(HEADER_LEN + ds.episodes.len() * 13 + floats * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(ds.task.code());
    out.extend_from_slice(&ds.client_id.to_le_bytes());
    out.extend_from_slice(&(ds.d_obs as u16).to_le_bytes());
    out.extend_from_slice(&(ACTION_DIM as u16).to_le_bytes());
    out.extend_from_slice(&(ds.episodes.len() as u32).to_le_bytes());
    for ep in &ds.episodes {
        out.extend_from_slice(&(ep.episode_seed as i64).to_le_bytes());
        out.extend_from_slice(&(ep.len() as u32).to_le_bytes());
        out.push(u8::from(ep.success));
        for v in ep.observations.iter().chain(&ep.actions) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(DatasetError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DatasetError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn i64(&mut self) -> Result<i64, DatasetError> {
        Ok(i64::from_le_bytes(self.array()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DatasetError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| DatasetError::Structure("episode size overflows".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses FLDM bytes.
pub fn decode_dataset(bytes: &[u8]) -> Result<ClientDataset, DatasetError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Version(version));
    }
    let code = r.u8()?;
    let task = TaskId::from_code(code)
        .ok_or_else(|| DatasetError::Structure(format!("unknown task code {code}")))?;
    let client_id = r.u32()?;
    let d_obs = usize::from(r.u16()?);
    let d_act = usize::from(r.u16()?);
    let n_episodes = r.u32()?;
    if d_obs == 0 || d_act != ACTION_DIM {
        return Err(DatasetError::Structure(format!(
            "dimensions d_obs={d_obs}, d_act={d_act}"
        )));
    }
    let mut episodes = Vec::new();
    for i in 0..n_episodes {
        if r.remaining() == 0 {
            return Err(DatasetError::Structure(format!(
                "header declares {n_episodes} episodes, payload holds {i}"
            )));
        }
        let episode_seed = r.i64()? as u64;
        let t = r.u32()? as usize;
        if t > HORIZON as usize {
            return Err(DatasetError::Structure(format!(
                "episode length {t} exceeds horizon"
            )));
        }
        let success = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(DatasetError::Structure(format!("success flag byte {b}"))),
        };
        let observations = r.f64s(t * d_obs)?;
        let actions = r.f64s(t * d_act)?;
        episodes.push(Episode {
            client_id,
            episode_seed,
            observations,
            actions,
            success,
        });
    }
    if r.remaining() != 0 {
        return Err(DatasetError::Structure(format!(
            "{} bytes after the {n_episodes} declared episodes",
            r.remaining()
        )));
    }
    let ds = ClientDataset {
        client_id,
        task,
        d_obs,
        episodes,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(ds: &ClientDataset, path: &Path) -> Result<(), DatasetError> {
    let bytes = encode_dataset(ds)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<ClientDataset, DatasetError> {
    decode_dataset(&fs::read(path)?)
}

/// `<root>/data/<split>/client_<id>.fldm`
pub fn dataset_path(root: &Path, split: Split, client_id: u32) -> PathBuf {
    root.join("data")
        .join(split.name())
        .join(format!("client_{client_id}.fldm"))
}

/// Flattens episodes, in order, into one (observation, action) batch.
pub fn to_pairs(ds: &ClientDataset) -> Result<Batch, DatasetError> {
    let rows = ds.num_pairs();
    if rows == 0 {
        return Err(DatasetError::Empty(ds.client_id));
    }
    let mut obs = Vec::with_capacity(rows * ds.d_obs);
    let mut act = Vec::with_capacity(rows * ACTION_DIM);
    for ep in &ds.episodes {
        obs.extend_from_slice(&ep.observations);
        act.extend_from_slice(&ep.actions);
    }
    Ok(Batch::new(
        Matrix::new(rows, ds.d_obs, obs)?,
        Matrix::new(rows, ACTION_DIM, act)?,
    )?)
}

/// Collects `k` successful expert episodes for one environment. Each failed
/// candidate is replaced by the next seed in the stream, at most
/// [`MAX_RETRIES`] times per episode slot.
pub fn collect_client(
    env: &EnvironmentConfig,
    k: usize,
    collection_seed: u64,
) -> Result<ClientDataset, DatasetError> {
    let dynamics = sim::derive_dynamics(env);
    let mut episodes = Vec::with_capacity(k);
    let mut candidate = 0u64;
    for _ in 0..k {
        let mut attempts = 0;
        loop {
            let episode_seed = seed::demo_episode_seed(env.base_seed, collection_seed, candidate);
            candidate += 1;
            attempts += 1;
            let (result, traj) = sim::record_rollout(&mut Expert, &dynamics, episode_seed)?;
            if result.success {
                episodes.push(Episode {
                    client_id: env.client_id,
                    episode_seed,
                    observations: traj.observations,
                    actions: traj.actions,
                    success: true,
                });
                break;
            }
            if attempts > MAX_RETRIES {
                return Err(DatasetError::ExpertFailure {
                    client_id: env.client_id,
                    attempts,
                });
            }
        }
    }
    Ok(ClientDataset {
        client_id: env.client_id,
        task: env.task,
        d_obs: sim::obs_dim(env.task),
        episodes,
    })
}

/// Collects and writes one file per environment of `split` under `root`.
/// Returns the written paths in client-id order.
pub fn collect_demos(
    reg: &Registry,
    split: Split,
    k: usize,
    collection_seed: u64,
    root: &Path,
) -> Result<Vec<PathBuf>, DatasetError> {
    if k == 0 {
        return Err(DatasetError::Structure(
            "episodes per client must be >= 1".into(),
        ));
    }
    let envs: Vec<&EnvironmentConfig> = reg.split(split).collect();
    envs.par_iter()
        .map(|env| {
            let ds = collect_client(env, k, collection_seed)?;
            let path = dataset_path(root, split, env.client_id);
            write_dataset(&ds, &path)?;
            Ok(path)
        })
        .collect()
}

/// Loads every dataset of `split` from a run directory, in client-id order.
pub fn load_split(
    reg: &Registry,
    split: Split,
    root: &Path,
) -> Result<Vec<ClientDataset>, DatasetError> {
    reg.split(split)
        .map(|env| {
            let ds = read_dataset(&dataset_path(root, split, env.client_id))?;
            if ds.client_id != env.client_id || ds.task != env.task {
                return Err(DatasetError::Structure(format!(
                    "file for client {} holds client {} ({})",
                    env.client_id, ds.client_id, ds.task
                )));
            }
            Ok(ds)
        })
        .collect()
}
