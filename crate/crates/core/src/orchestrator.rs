//! The federated training loop.
//!
//! Each round samples `M` training clients, broadcasts the global policy,
//! collects local fits through a [`ClientPool`], aggregates them in
//! ascending client-id order, and (on evaluation rounds) scores the
//! aggregate on the validation split. Every evaluated aggregate is kept as a
//! [`Checkpoint`]; [`select_best`] picks the one to test.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{AggregationError, ServerState, Strategy};
use crate::client::{self, ClientError, ClientUpdate, LocalTrainConfig};
use crate::dataset::{self, ClientDataset, DatasetError};
use crate::evaluation::{self, EvalError};
use crate::model::{
    self, ModelError, ModelSpec, ParameterVector, ACTION_DIM, DEFAULT_HIDDEN, DEFAULT_LR,
};
use crate::protocol::{self, FitRequest, FitResult, Message, ProtocolError, PROTO_VERSION};
use crate::registry::{self, EnvironmentConfig, Registry, RegistryError, Split, TaskId};
use crate::seed;
use crate::sim;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no checkpoints to choose from")]
    NoCheckpoints,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

type Result<T, E = OrchestratorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    InProcess,
    Tcp,
}

impl std::str::FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in_process" => Ok(Self::InProcess),
            "tcp" => Ok(Self::Tcp),
            other => Err(format!("unknown transport `{other}` (in_process, tcp)")),
        }
    }
}

/// Per-round local training settings. The shuffle seed is derived per
/// (round, client) from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalSchedule {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for LocalSchedule {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: DEFAULT_LR,
        }
    }
}

impl LocalSchedule {
    pub fn train_config(&self, shuffle_seed: u64) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            shuffle_seed,
        }
    }
}

/// Contents of `run.json`. Relative paths resolve against the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskId,
    pub strategy: Strategy,
    pub rounds: u32,
    pub clients_per_round: usize,
    pub local: LocalSchedule,
    pub registry: PathBuf,
    pub data_dir: PathBuf,
    pub run_seed: u64,
    pub init_seed: u64,
    pub eval_every: u32,
    pub val_episodes: u32,
    pub test_episodes: u32,
    /// Demonstrations per client used for training (K).
    pub demos_per_client: usize,
    pub collection_seed: u64,
    pub hidden: Vec<usize>,
    pub transport: Transport,
    /// Worker threads; `None` means one per logical core.
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskId::SlideBlock,
            strategy: Strategy::FedAvg,
            rounds: 30,
            clients_per_round: 20,
            local: LocalSchedule::default(),
            registry: "environments.json".into(),
            data_dir: "data".into(),
            run_seed: 0,
            init_seed: 0,
            eval_every: 1,
            val_episodes: 50,
            test_episodes: 50,
            demos_per_client: 100,
            collection_seed: 0,
            hidden: DEFAULT_HIDDEN.to_vec(),
            transport: Transport::InProcess,
            workers: None,
        }
    }
}

impl RunConfig {
    /// Checks that do not need the registry.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(OrchestratorError::Config(m));
        if self.rounds == 0 {
            return err("rounds must be >= 1".into());
        }
        if self.clients_per_round == 0 {
            return err("clients_per_round must be >= 1".into());
        }
        if self.eval_every == 0 {
            return err("eval_every must be >= 1".into());
        }
        if self.val_episodes == 0 || self.test_episodes == 0 {
            return err("val_episodes and test_episodes must be >= 1".into());
        }
        if self.demos_per_client == 0 {
            return err("demos_per_client must be >= 1".into());
        }
        if self.workers == Some(0) {
            return err("workers must be >= 1".into());
        }
        self.local
            .train_config(0)
            .validate()
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        self.strategy
            .validate()
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        if let Strategy::Krum { f } = self.strategy {
            if self.clients_per_round < f + 3 {
                return err(format!(
                    "krum with f = {f} needs clients_per_round >= {}",
                    f + 3
                ));
            }
        }
        self.model_spec()?;
        Ok(())
    }

    /// [`validate`](Self::validate) plus the checks against a registry.
    pub fn validate_against(&self, reg: &Registry) -> Result<()> {
        self.validate()?;
        if reg.task != self.task {
            return Err(OrchestratorError::Config(format!(
                "run task {} but registry task {}",
                self.task, reg.task
            )));
        }
        let n_train = reg.split_counts.train;
        if self.clients_per_round > n_train {
            return Err(OrchestratorError::Config(format!(
                "clients_per_round {} exceeds {} training clients",
                self.clients_per_round, n_train
            )));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec::new(
            sim::obs_dim(self.task),
            self.hidden.clone(),
            ACTION_DIM,
        )?)
    }

    pub fn is_eval_round(&self, round: u32) -> bool {
        (round + 1).is_multiple_of(self.eval_every) || round + 1 == self.rounds
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    /// FNV-1a hash of the canonical JSON form.
    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(self).expect("run config serializes");
        text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
        })
    }

    pub fn registry_path(&self, root: &Path) -> PathBuf {
        root.join(&self.registry)
    }

    pub fn data_root(&self, root: &Path) -> PathBuf {
        root.join(&self.data_dir)
    }

    pub fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.unwrap_or(0))
            .build()
            .map_err(|e| OrchestratorError::Config(e.to_string()))
    }
}

/// Uniform sample of `m` of `n_train` positions without replacement, sorted.
pub fn sample_clients(n_train: usize, m: usize, round: u32, run_seed: u64) -> Result<Vec<usize>> {
    if m > n_train {
        return Err(OrchestratorError::Config(format!(
            "cannot sample {m} of {n_train} clients"
        )));
    }
    let mut rng = seed::rng(seed::mix_all(
        run_seed,
        &[seed::STREAM_SAMPLE, u64::from(round)],
    ));
    let mut picked = index::sample(&mut rng, n_train, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub selected: Vec<u32>,
    pub mean_train_loss: f64,
    pub val_rmse: Option<f64>,
    pub val_rmse_std: Option<f64>,
    /// Normalized validation success of the aggregate.
    pub val_success: Option<f64>,
    pub val_success_raw: Option<f64>,
    pub wall_time: f64,
}

/// Equality ignores `wall_time`.
impl PartialEq for RoundRecord {
    fn eq(&self, other: &Self) -> bool {
        self.round == other.round
            && self.selected == other.selected
            && self.mean_train_loss == other.mean_train_loss
            && self.val_rmse == other.val_rmse
            && self.val_rmse_std == other.val_rmse_std
            && self.val_success == other.val_success
            && self.val_success_raw == other.val_success_raw
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    round: u32,
    selected: String,
    mean_train_loss: f64,
    val_rmse: Option<f64>,
    val_rmse_std: Option<f64>,
    val_success: Option<f64>,
    val_success_raw: Option<f64>,
    wall_time: f64,
}

pub fn write_records(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(RecordRow {
            round: r.round,
            selected: r
                .selected
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(" "),
            mean_train_loss: r.mean_train_loss,
            val_rmse: r.val_rmse,
            val_rmse_std: r.val_rmse_std,
            val_success: r.val_success,
            val_success_raw: r.val_success_raw,
            wall_time: r.wall_time,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<RecordRow>()
        .map(|row| {
            let row = row?;
            let selected = row
                .selected
                .split_whitespace()
                .map(|s| {
                    s.parse()
                        .map_err(|_| OrchestratorError::Config(format!("bad client id `{s}`")))
                })
                .collect::<Result<_>>()?;
            Ok(RoundRecord {
                round: row.round,
                selected,
                mean_train_loss: row.mean_train_loss,
                val_rmse: row.val_rmse,
                val_rmse_std: row.val_rmse_std,
                val_success: row.val_success,
                val_success_raw: row.val_success_raw,
                wall_time: row.wall_time,
            })
        })
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FLCK";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: u32,
    pub params: ParameterVector,
    pub fingerprint: u64,
}

impl Checkpoint {
    pub fn new(round: u32, params: ParameterVector, spec: &ModelSpec) -> Result<Self> {
        params.validate(spec)?;
        Ok(Self {
            round,
            params,
            fingerprint: spec.fingerprint(),
        })
    }

    /// `FLCK | u16 version | u32 round | u64 fingerprint | u64 count | f64 * count`.
    pub fn encode(&self) -> Vec<u8> {
        let p = self.params.as_slice();
        let mut out = Vec::with_capacity(26 + 8 * p.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| OrchestratorError::Checkpoint(m.to_string());
        if bytes.len() < 26 {
            return Err(bad("file shorter than its header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        if u16::from_le_bytes([bytes[4], bytes[5]]) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let round = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        let fingerprint = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
        let body = &bytes[26..];
        if count.checked_mul(8) != Some(body.len() as u64) {
            return Err(bad("parameter count does not match file length"));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            round,
            params: ParameterVector::from_vec(params),
            fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Fails unless this checkpoint was produced for `spec`.
    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.fingerprint != spec.fingerprint() {
            return Err(OrchestratorError::Checkpoint(
                "model spec fingerprint mismatch".into(),
            ));
        }
        self.params.validate(spec)?;
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, round: u32) -> PathBuf {
    dir.join(format!("round_{round:04}.ckpt"))
}

/// Highest validation success, then lowest validation RMSE, then latest round.
pub fn select_best<'a>(
    checkpoints: &'a [Checkpoint],
    records: &[RoundRecord],
) -> Result<&'a Checkpoint> {
    let by_round: BTreeMap<u32, &RoundRecord> = records.iter().map(|r| (r.round, r)).collect();
    let key = |c: &Checkpoint| {
        let r = by_round.get(&c.round);
        let success = r.and_then(|r| r.val_success).unwrap_or(f64::NEG_INFINITY);
        let rmse = r.and_then(|r| r.val_rmse).unwrap_or(f64::INFINITY);
        (success, rmse, c.round)
    };
    checkpoints
        .iter()
        .max_by(|a, b| {
            let (sa, ra, na) = key(a);
            let (sb, rb, nb) = key(b);
            sa.total_cmp(&sb).then(rb.total_cmp(&ra)).then(na.cmp(&nb))
        })
        .ok_or(OrchestratorError::NoCheckpoints)
}

/// Everything a run needs in memory.
#[derive(Debug, Clone)]
pub struct TrainingContext {
    pub spec: ModelSpec,
    /// Training datasets in ascending client-id order, cut to K episodes.
    pub train: Vec<ClientDataset>,
    pub val_envs: Vec<EnvironmentConfig>,
    pub val_data: Vec<ClientDataset>,
    /// Expert success per validation environment on its evaluation seeds.
    pub val_expert: Vec<f64>,
}

impl TrainingContext {
    pub fn new(
        cfg: &RunConfig,
        reg: &Registry,
        train: Vec<ClientDataset>,
        val_data: Vec<ClientDataset>,
    ) -> Result<Self> {
        cfg.validate_against(reg)?;
        let spec = cfg.model_spec()?;
        let train_ids = reg.client_ids(Split::Train);
        if train.iter().map(|d| d.client_id).collect::<Vec<_>>() != train_ids {
            return Err(OrchestratorError::Config(
                "training datasets do not match the registry's train split".into(),
            ));
        }
        let val_envs: Vec<EnvironmentConfig> = reg.split(Split::Val).cloned().collect();
        if val_data.iter().map(|d| d.client_id).collect::<Vec<_>>()
            != val_envs.iter().map(|e| e.client_id).collect::<Vec<_>>()
        {
            return Err(OrchestratorError::Config(
                "validation datasets do not match the registry's val split".into(),
            ));
        }
        let mut cut = Vec::with_capacity(train.len());
        for ds in train {
            if ds.episodes.len() < cfg.demos_per_client {
                return Err(OrchestratorError::Config(format!(
                    "client {} has {} demonstrations, run needs {}",
                    ds.client_id,
                    ds.episodes.len(),
                    cfg.demos_per_client
                )));
            }
            cut.push(ds.truncated(cfg.demos_per_client));
        }
        let val_expert = if val_envs.is_empty() {
            Vec::new()
        } else {
            evaluation::expert_success(&val_envs, cfg.val_episodes)?
        };
        Ok(Self {
            spec,
            train: cut,
            val_envs,
            val_data,
            val_expert,
        })
    }

    /// Reads the registry and the train/val datasets of a run directory.
    pub fn load(cfg: &RunConfig, root: &Path) -> Result<(Registry, Self)> {
        let reg = registry::load_registry(&cfg.registry_path(root))?;
        cfg.validate_against(&reg)?;
        let data = cfg.data_root(root);
        let train = dataset::load_split(&reg, Split::Train, &data)?;
        let val = dataset::load_split(&reg, Split::Val, &data)?;
        let ctx = Self::new(cfg, &reg, train, val)?;
        Ok((reg, ctx))
    }

    pub fn train_ids(&self) -> Vec<u32> {
        self.train.iter().map(|d| d.client_id).collect()
    }
}

/// One client's work order for a round.
#[derive(Debug, Clone)]
pub struct FitJob {
    pub client_id: u32,
    pub request: FitRequest,
}

/// Where local fits run.
pub trait ClientPool: Send {
    /// Runs every job; results may come back in any order.
    fn fit(&mut self, jobs: &[FitJob]) -> Result<Vec<ClientUpdate>>;
}

/// Fits clients on a local worker pool.
pub struct InProcessPool<'a> {
    datasets: BTreeMap<u32, &'a ClientDataset>,
    spec: ModelSpec,
    batch_size: usize,
    pool: rayon::ThreadPool,
}

impl<'a> InProcessPool<'a> {
    pub fn new(cfg: &RunConfig, ctx: &'a TrainingContext) -> Result<Self> {
        Ok(Self {
            datasets: ctx.train.iter().map(|d| (d.client_id, d)).collect(),
            spec: ctx.spec.clone(),
            batch_size: cfg.local.batch_size,
            pool: cfg.thread_pool()?,
        })
    }
}

/// Runs one FIT request against a local dataset.
pub fn serve_fit(
    req: &FitRequest,
    spec: &ModelSpec,
    ds: &ClientDataset,
    batch_size: usize,
) -> Result<ClientUpdate, ClientError> {
    let global = ParameterVector::from_vec(req.params.clone());
    let cfg = LocalTrainConfig {
        epochs: req.epochs,
        batch_size,
        lr: req.lr,
        shuffle_seed: req.shuffle_seed,
    };
    client::local_fit(&global, spec, ds, &cfg)
}

impl ClientPool for InProcessPool<'_> {
    fn fit(&mut self, jobs: &[FitJob]) -> Result<Vec<ClientUpdate>> {
        let (datasets, spec, bs) = (&self.datasets, &self.spec, self.batch_size);
        self.pool.install(|| {
            jobs.par_iter()
                .map(|job| {
                    let ds = datasets.get(&job.client_id).ok_or_else(|| {
                        OrchestratorError::Config(format!("unknown client {}", job.client_id))
                    })?;
                    Ok(serve_fit(&job.request, spec, ds, bs)?)
                })
                .collect()
        })
    }
}

/// Server side of the TCP transport: one connection per training client.
pub struct TcpPool {
    conns: BTreeMap<u32, (BufReader<TcpStream>, BufWriter<TcpStream>)>,
}

impl TcpPool {
    /// Accepts connections until every id in `expected` has said HELLO.
    pub fn accept(listener: &TcpListener, expected: &[u32]) -> Result<Self> {
        let mut conns = BTreeMap::new();
        while conns.len() < expected.len() {
            let (stream, peer) = listener.accept()?;
            stream.set_nodelay(true)?;
            let mut reader = BufReader::new(stream.try_clone()?);
            let writer = BufWriter::new(stream);
            match protocol::read_message(&mut reader)? {
                Message::Hello { client_id, .. } => {
                    if !expected.contains(&client_id) {
                        return Err(OrchestratorError::Transport(format!(
                            "{peer} announced client {client_id}, which is not a training client"
                        )));
                    }
                    if conns.insert(client_id, (reader, writer)).is_some() {
                        return Err(OrchestratorError::Transport(format!(
                            "client {client_id} connected twice"
                        )));
                    }
                }
                other => {
                    return Err(OrchestratorError::Transport(format!(
                        "{peer} opened with {} instead of HELLO",
                        other.name()
                    )))
                }
            }
        }
        Ok(Self { conns })
    }

    /// Asks every connected client for (rmse, success) of `params` on its own
    /// data. Diagnostic only; the training loop never calls it.
    pub fn evaluate_clients(&mut self, params: &ParameterVector) -> Result<Vec<(u32, f64, f64)>> {
        let msg = Message::Eval {
            params: params.as_slice().to_vec(),
        };
        for (_, w) in self.conns.values_mut() {
            protocol::write_message(w, &msg)?;
        }
        let mut out = Vec::new();
        for (&id, (r, _)) in self.conns.iter_mut() {
            match protocol::read_message(r)? {
                Message::EvalResult { rmse, success } => out.push((id, rmse, success)),
                other => {
                    return Err(OrchestratorError::Transport(format!(
                        "client {id} answered EVAL with {}",
                        other.name()
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn shutdown(mut self) -> Result<()> {
        for (_, w) in self.conns.values_mut() {
            protocol::write_message(w, &Message::Shutdown)?;
        }
        Ok(())
    }
}

impl ClientPool for TcpPool {
    fn fit(&mut self, jobs: &[FitJob]) -> Result<Vec<ClientUpdate>> {
        for job in jobs {
            let (_, w) = self.conns.get_mut(&job.client_id).ok_or_else(|| {
                OrchestratorError::Transport(format!("client {} is not connected", job.client_id))
            })?;
            protocol::write_message(w, &Message::Fit(job.request.clone()))?;
        }
        let mut out = Vec::with_capacity(jobs.len());
        for job in jobs {
            let (r, _) = self.conns.get_mut(&job.client_id).expect("checked above");
            let msg = protocol::read_message(r).map_err(|e| {
                OrchestratorError::Transport(format!("client {} failed: {e}", job.client_id))
            })?;
            match msg {
                Message::FitResult(res) if res.client_id == job.client_id => {
                    out.push(ClientUpdate {
                        client_id: res.client_id,
                        params: ParameterVector::from_vec(res.params),
                        num_samples: res.num_samples,
                        train_loss: res.train_loss,
                    })
                }
                other => {
                    return Err(OrchestratorError::Transport(format!(
                        "client {} answered FIT with an unexpected {}",
                        job.client_id,
                        other.name()
                    )))
                }
            }
        }
        Ok(out)
    }
}

/// Client side of the TCP transport.
pub struct TcpClient {
    pub client_id: u32,
    pub spec: ModelSpec,
    pub dataset: ClientDataset,
    pub batch_size: usize,
    /// Environment and episode count for answering EVAL with a success rate.
    pub env: Option<(EnvironmentConfig, u32)>,
}

impl TcpClient {
    /// Connects (retrying for up to `patience`), says HELLO, and serves
    /// requests until SHUTDOWN. Returns the number of FIT requests served.
    pub fn run<A: ToSocketAddrs>(&self, addr: A, patience: Duration) -> Result<u32> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let start = Instant::now();
        let stream = loop {
            match TcpStream::connect(&addrs[..]) {
                Ok(s) => break s,
                Err(e) if start.elapsed() < patience => {
                    let _ = e;
                    thread::sleep(Duration::from_millis(50));
                }
                Err(e) => return Err(e.into()),
            }
        };
        stream.set_nodelay(true)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        protocol::write_message(
            &mut writer,
            &Message::Hello {
                client_id: self.client_id,
                proto_version: PROTO_VERSION,
            },
        )?;
        let mut served = 0;
        loop {
            let reply = match protocol::read_message(&mut reader)? {
                Message::Fit(req) => {
                    let up = serve_fit(&req, &self.spec, &self.dataset, self.batch_size)?;
                    served += 1;
                    Message::FitResult(FitResult {
                        client_id: self.client_id,
                        num_samples: up.num_samples,
                        train_loss: up.train_loss,
                        params: up.params.into_vec(),
                    })
                }
                Message::Eval { params } => {
                    let params = ParameterVector::from_vec(params);
                    let rmse = client::local_evaluate(&params, &self.spec, &self.dataset)?;
                    let success = match &self.env {
                        Some((env, episodes)) => {
                            let flags = evaluation::policy_successes(
                                &params,
                                &self.spec,
                                env,
                                &evaluation::eval_seeds(env, *episodes),
                            )?;
                            flags.iter().filter(|&&s| s).count() as f64 / flags.len() as f64
                        }
                        None => f64::NAN,
                    };
                    Message::EvalResult { rmse, success }
                }
                Message::Shutdown => return Ok(served),
                other => {
                    return Err(OrchestratorError::Transport(format!(
                        "server sent unexpected {}",
                        other.name()
                    )))
                }
            };
            protocol::write_message(&mut writer, &reply)?;
        }
    }
}

/// Builds this round's FIT jobs for the sampled clients.
pub fn fit_jobs(
    global: &ParameterVector,
    round: u32,
    cfg: &RunConfig,
    client_ids: &[u32],
) -> Vec<FitJob> {
    client_ids
        .iter()
        .map(|&client_id| FitJob {
            client_id,
            request: FitRequest {
                round,
                epochs: cfg.local.epochs,
                lr: cfg.local.lr,
                shuffle_seed: seed::shuffle_seed(cfg.run_seed, round, client_id),
                params: global.as_slice().to_vec(),
            },
        })
        .collect()
}

/// One round: sample, fit, aggregate, and (on eval rounds) validate the
/// aggregate.
pub fn run_round(
    global: &ParameterVector,
    round: u32,
    cfg: &RunConfig,
    ctx: &TrainingContext,
    pool: &mut dyn ClientPool,
    state: &mut ServerState,
) -> Result<(ParameterVector, RoundRecord)> {
    let start = Instant::now();
    let ids = ctx.train_ids();
    let selected: Vec<u32> = sample_clients(ids.len(), cfg.clients_per_round, round, cfg.run_seed)?
        .into_iter()
        .map(|i| ids[i])
        .collect();
    let mut updates = pool.fit(&fit_jobs(global, round, cfg, &selected))?;
    updates.sort_by_key(|u| u.client_id);
    if updates
        .iter()
        .map(|u| u.client_id)
        .ne(selected.iter().copied())
    {
        return Err(OrchestratorError::Transport(
            "updates do not match the selected clients".into(),
        ));
    }
    for u in &updates {
        u.params.validate(&ctx.spec)?;
    }
    let next = state.aggregate(global, &updates)?;
    let mean_train_loss = updates.iter().map(|u| u.train_loss).sum::<f64>() / updates.len() as f64;

    let mut record = RoundRecord {
        round,
        selected,
        mean_train_loss,
        val_rmse: None,
        val_rmse_std: None,
        val_success: None,
        val_success_raw: None,
        wall_time: 0.0,
    };
    if cfg.is_eval_round(round) && !ctx.val_envs.is_empty() {
        let offline = evaluation::offline_rmse(&next, &ctx.spec, &ctx.val_data)?;
        let online = evaluation::online_success_against(
            &next,
            &ctx.spec,
            &ctx.val_envs,
            cfg.val_episodes,
            &ctx.val_expert,
        )?;
        record.val_rmse = Some(offline.mean);
        record.val_rmse_std = Some(offline.std);
        record.val_success = Some(online.normalized_mean);
        record.val_success_raw = Some(online.raw_mean);
    }
    record.wall_time = start.elapsed().as_secs_f64();
    Ok((next, record))
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub records: Vec<RoundRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub final_params: ParameterVector,
}

impl TrainingOutcome {
    pub fn best(&self) -> Result<&Checkpoint> {
        select_best(&self.checkpoints, &self.records)
    }
}

/// All `R` rounds from a fresh initialization. With `out` set, checkpoints
/// go to `out/checkpoints/` and records to `out/records.csv`.
pub fn run_training(
    cfg: &RunConfig,
    ctx: &TrainingContext,
    pool: &mut dyn ClientPool,
    out: Option<&Path>,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let ckpt_dir = out.map(|o| o.join("checkpoints"));
    if let Some(dir) = &ckpt_dir {
        fs::create_dir_all(dir)?;
    }
    let eval_pool = cfg.thread_pool()?;
    let mut global = model::init_params(&ctx.spec, cfg.init_seed);
    let mut state = cfg.strategy.init_state(global.len());
    let mut records = Vec::with_capacity(cfg.rounds as usize);
    let mut checkpoints = Vec::new();
    for round in 0..cfg.rounds {
        let (next, record) =
            eval_pool.install(|| run_round(&global, round, cfg, ctx, pool, &mut state))?;
        global = next;
        if cfg.is_eval_round(round) {
            let ckpt = Checkpoint::new(round, global.clone(), &ctx.spec)?;
            if let Some(dir) = &ckpt_dir {
                ckpt.save(&checkpoint_path(dir, round))?;
            }
            checkpoints.push(ckpt);
        }
        records.push(record);
        if let Some(o) = out {
            write_records(&records, &o.join("records.csv"))?;
        }
    }
    Ok(TrainingOutcome {
        records,
        checkpoints,
        final_params: global,
    })
}

/// Trains with clients served over loopback TCP, one thread per training
/// client.
pub fn run_training_tcp(
    cfg: &RunConfig,
    ctx: &TrainingContext,
    out: Option<&Path>,
) -> Result<TrainingOutcome> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    thread::scope(|scope| {
        let handles: Vec<_> = ctx
            .train
            .iter()
            .map(|ds| {
                let client = TcpClient {
                    client_id: ds.client_id,
                    spec: ctx.spec.clone(),
                    dataset: ds.clone(),
                    batch_size: cfg.local.batch_size,
                    env: None,
                };
                scope.spawn(move || client.run(addr, Duration::from_secs(10)))
            })
            .collect();
        let mut pool = TcpPool::accept(&listener, &ctx.train_ids())?;
        let outcome = run_training(cfg, ctx, &mut pool, out);
        let closed = pool.shutdown();
        for h in handles {
            h.join()
                .map_err(|_| OrchestratorError::Transport("client thread panicked".into()))??;
        }
        let outcome = outcome?;
        closed?;
        Ok(outcome)
    })
}

/// Trains through the transport named in `cfg`.
pub fn train(
    cfg: &RunConfig,
    ctx: &TrainingContext,
    out: Option<&Path>,
) -> Result<TrainingOutcome> {
    match cfg.transport {
        Transport::InProcess => {
            let mut pool = InProcessPool::new(cfg, ctx)?;
            run_training(cfg, ctx, &mut pool, out)
        }
        Transport::Tcp => run_training_tcp(cfg, ctx, out),
    }
}

/// What a run would do, computed without touching any demonstration data.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub n_train: usize,
    pub n_val: usize,
    pub param_count: usize,
    pub eval_rounds: Vec<u32>,
    pub selections: Vec<Vec<u32>>,
    pub local_fits: usize,
}

pub fn plan(cfg: &RunConfig, reg: &Registry) -> Result<Plan> {
    reg.validate()?;
    cfg.validate_against(reg)?;
    let ids = reg.client_ids(Split::Train);
    let selections = (0..cfg.rounds)
        .map(|r| {
            Ok(
                sample_clients(ids.len(), cfg.clients_per_round, r, cfg.run_seed)?
                    .into_iter()
                    .map(|i| ids[i])
                    .collect(),
            )
        })
        .collect::<Result<Vec<Vec<u32>>>>()?;
    Ok(Plan {
        n_train: ids.len(),
        n_val: reg.split_counts.val,
        param_count: cfg.model_spec()?.param_count(),
        eval_rounds: (0..cfg.rounds).filter(|&r| cfg.is_eval_round(r)).collect(),
        local_fits: selections.iter().map(Vec::len).sum(),
        selections,
    })
}

impl std::fmt::Display for Plan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "training clients: {}", self.n_train)?;
        writeln!(f, "validation environments: {}", self.n_val)?;
        writeln!(f, "parameters: {}", self.param_count)?;
        writeln!(f, "rounds: {}", self.selections.len())?;
        writeln!(f, "local fits: {}", self.local_fits)?;
        write!(f, "evaluation rounds: {}", self.eval_rounds.len())
    }
}
