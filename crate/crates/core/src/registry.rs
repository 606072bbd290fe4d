//! Environment registry: one sampled task variation per federated client.
//!
//! An environment is a task together with a set of variation factors. The
//! registry samples factors independently and uniformly within their ranges,
//! assigns contiguous client ids, splits them into train/val/test blocks and
//! round-trips through a JSON document.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub const FORMAT_VERSION: u32 = 1;
/// Texture ids index a set of 213 textures.
pub const MAX_TEXTURE_ID: u32 = 212;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry schema: {0}")]
    Schema(String),
    #[error("unsupported registry format_version {0} (expected {FORMAT_VERSION})")]
    Version(u64),
    #[error("client {client_id}: {field} = {value} outside its allowed range")]
    Range {
        client_id: u32,
        field: &'static str,
        value: f64,
    },
    #[error("split counts {train}+{val}+{test} do not sum to {total}")]
    SplitCounts {
        train: usize,
        val: usize,
        test: usize,
        total: usize,
    },
    #[error("registry must contain at least one environment")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    SlideBlock,
    CloseBox,
    PegInsert,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::SlideBlock, TaskId::CloseBox, TaskId::PegInsert];

    /// Stable serialization code.
    pub fn code(self) -> u8 {
        match self {
            TaskId::SlideBlock => 0,
            TaskId::CloseBox => 1,
            TaskId::PegInsert => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::SlideBlock => "slide_block",
            TaskId::CloseBox => "close_box",
            TaskId::PegInsert => "peg_insert",
        }
    }

    /// Human-readable column label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            TaskId::SlideBlock => "Slide Block",
            TaskId::CloseBox => "Close Box",
            TaskId::PegInsert => "Peg Insert",
        }
    }

    /// Allowed `object_size_scale` range; slide_block is fixed at 1.0.
    pub fn size_range(self) -> (f64, f64) {
        match self {
            TaskId::SlideBlock => (1.0, 1.0),
            TaskId::CloseBox => (0.75, 1.15),
            TaskId::PegInsert => (1.0, 1.5),
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                format!("unknown task '{s}' (expected slide_block, close_box or peg_insert)")
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown split '{s}' (expected train, val or test)"))
    }
}

/// Per-environment variation factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationFactors {
    pub background_texture_id: u32,
    pub object_texture_id: u32,
    pub table_texture_id: u32,
    pub camera_pose_delta: [f64; 3],
    pub light_color: [f64; 3],
    pub object_color: [f64; 3],
    pub table_color: [f64; 3],
    pub object_size_scale: f64,
    pub friction_u: f64,
}

/// Open interval `(lo, hi)` factors.
const CAMERA: (f64, f64) = (-0.05, 0.05);
const LIGHT: (f64, f64) = (0.0, 0.5);
const OBJECT_COLOR: (f64, f64) = (0.0, 1.0);
const TABLE_COLOR: (f64, f64) = (0.25, 1.0);
const FRICTION: (f64, f64) = (0.0, 1.0);

/// Uniform on the open interval: half-open draw with the endpoints rejected.
fn open_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    loop {
        let x = lo + (hi - lo) * rng.gen::<f64>();
        if x > lo && x < hi {
            return x;
        }
    }
}

impl VariationFactors {
    pub fn sample<R: Rng>(task: TaskId, rng: &mut R) -> Self {
        let mut triple = |range| {
            [
                open_uniform(rng, range),
                open_uniform(rng, range),
                open_uniform(rng, range),
            ]
        };
        let camera_pose_delta = triple(CAMERA);
        let light_color = triple(LIGHT);
        let object_color = triple(OBJECT_COLOR);
        let table_color = triple(TABLE_COLOR);
        let (lo, hi) = task.size_range();
        let object_size_scale = if lo == hi {
            lo
        } else {
            lo + (hi - lo) * rng.gen::<f64>()
        };
        Self {
            background_texture_id: rng.gen_range(0..=MAX_TEXTURE_ID),
            object_texture_id: rng.gen_range(0..=MAX_TEXTURE_ID),
            table_texture_id: rng.gen_range(0..=MAX_TEXTURE_ID),
            camera_pose_delta,
            light_color,
            object_color,
            table_color,
            object_size_scale,
            friction_u: open_uniform(rng, FRICTION),
        }
    }

    /// Checks every field against its range for `task`.
    pub fn validate(&self, task: TaskId, client_id: u32) -> Result<(), RegistryError> {
        let err = |field, value: f64| RegistryError::Range {
            client_id,
            field,
            value,
        };
        let textures = [
            ("background_texture_id", self.background_texture_id),
            ("object_texture_id", self.object_texture_id),
            ("table_texture_id", self.table_texture_id),
        ];
        for (field, id) in textures {
            if id > MAX_TEXTURE_ID {
                return Err(err(field, f64::from(id)));
            }
        }
        let open = [
            ("camera_pose_delta", &self.camera_pose_delta, CAMERA),
            ("light_color", &self.light_color, LIGHT),
            ("object_color", &self.object_color, OBJECT_COLOR),
            ("table_color", &self.table_color, TABLE_COLOR),
        ];
        for (field, values, (lo, hi)) in open {
            if let Some(&v) = values.iter().find(|&&v| !(v > lo && v < hi)) {
                return Err(err(field, v));
            }
        }
        let (lo, hi) = task.size_range();
        let s = self.object_size_scale;
        if !(s >= lo && s <= hi) {
            return Err(err("object_size_scale", s));
        }
        let u = self.friction_u;
        if !(u > FRICTION.0 && u < FRICTION.1) {
            return Err(err("friction_u", u));
        }
        Ok(())
    }
}

/// One client's environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub client_id: u32,
    pub task: TaskId,
    pub factors: VariationFactors,
    pub split: Split,
    pub base_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registry {
    pub format_version: u32,
    pub task: TaskId,
    pub seed: u64,
    pub environments: Vec<EnvironmentConfig>,
    pub split_counts: SplitCounts,
}

/// Samples `n` environments with client ids `0..n`, all in the train split.
pub fn sample_environments(task: TaskId, n: usize, seed: u64) -> Result<Registry, RegistryError> {
    if n == 0 {
        return Err(RegistryError::Empty);
    }
    let environments = (0..n as u32)
        .map(|client_id| {
            let mut rng = seed::rng(seed::mix_all(
                seed,
                &[seed::STREAM_FACTORS, u64::from(client_id)],
            ));
            EnvironmentConfig {
                client_id,
                task,
                factors: VariationFactors::sample(task, &mut rng),
                split: Split::Train,
                base_seed: seed::base_seed(seed, client_id),
            }
        })
        .collect();
    Ok(Registry {
        format_version: FORMAT_VERSION,
        task,
        seed,
        environments,
        split_counts: SplitCounts {
            train: n,
            val: 0,
            test: 0,
        },
    })
}

/// Assigns contiguous blocks by client id: train first, then val, then test.
pub fn assign_splits(
    mut reg: Registry,
    train: usize,
    val: usize,
    test: usize,
) -> Result<Registry, RegistryError> {
    let total = reg.environments.len();
    if train + val + test != total {
        return Err(RegistryError::SplitCounts {
            train,
            val,
            test,
            total,
        });
    }
    reg.environments.sort_by_key(|e| e.client_id);
    for (i, env) in reg.environments.iter_mut().enumerate() {
        env.split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    reg.split_counts = SplitCounts { train, val, test };
    Ok(reg)
}

impl Registry {
    pub fn len(&self) -> usize {
        self.environments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.environments.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &EnvironmentConfig> {
        self.environments.iter().filter(move |e| e.split == split)
    }

    pub fn client_ids(&self, split: Split) -> Vec<u32> {
        self.split(split).map(|e| e.client_id).collect()
    }

    pub fn get(&self, client_id: u32) -> Option<&EnvironmentConfig> {
        self.environments
            .binary_search_by_key(&client_id, |e| e.client_id)
            .ok()
            .map(|i| &self.environments[i])
    }

    /// Enforces every structural and range invariant.
    pub fn validate(&self) -> Result<(), RegistryError> {
        if self.format_version != FORMAT_VERSION {
            return Err(RegistryError::Version(u64::from(self.format_version)));
        }
        if self.environments.is_empty() {
            return Err(RegistryError::Empty);
        }
        let counts = self.split_counts;
        if counts.total() != self.environments.len() {
            return Err(RegistryError::SplitCounts {
                train: counts.train,
                val: counts.val,
                test: counts.test,
                total: self.environments.len(),
            });
        }
        for pair in self.environments.windows(2) {
            if pair[0].client_id >= pair[1].client_id {
                return Err(RegistryError::Schema(format!(
                    "client ids must be unique and ascending (found {} before {})",
                    pair[0].client_id, pair[1].client_id
                )));
            }
        }
        for split in Split::ALL {
            let actual = self.split(split).count();
            if actual != counts.get(split) {
                return Err(RegistryError::Schema(format!(
                    "split_counts.{split} = {} but {actual} environments are labelled {split}",
                    counts.get(split)
                )));
            }
        }
        for env in &self.environments {
            if env.task != self.task {
                return Err(RegistryError::Schema(format!(
                    "client {} has task {} in a {} registry",
                    env.client_id, env.task, self.task
                )));
            }
            if env.base_seed != seed::base_seed(self.seed, env.client_id) {
                return Err(RegistryError::Schema(format!(
                    "client {} base_seed does not derive from registry seed",
                    env.client_id
                )));
            }
            env.factors.validate(env.task, env.client_id)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        // Floats are written in shortest round-trip form, so reloads are
        // bit-exact.
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RegistryError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| RegistryError::Schema(e.to_string()))?;
        match value.get("format_version").map(|v| v.as_u64()) {
            Some(Some(v)) if v == u64::from(FORMAT_VERSION) => {}
            Some(Some(v)) => return Err(RegistryError::Version(v)),
            _ => {
                return Err(RegistryError::Schema(
                    "missing integer format_version".into(),
                ))
            }
        }
        let reg: Registry =
            serde_json::from_value(value).map_err(|e| RegistryError::Schema(e.to_string()))?;
        reg.validate()?;
        Ok(reg)
    }
}

pub fn save_registry(reg: &Registry, path: &Path) -> Result<(), RegistryError> {
    reg.validate()?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, reg.to_json())?;
    Ok(())
}

pub fn load_registry(path: &Path) -> Result<Registry, RegistryError> {
    Registry::from_json(&fs::read_to_string(path)?)
}
