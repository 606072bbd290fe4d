//! Command-line front end. Exit status: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::io;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::aggregation::{self, Strategy};
use crate::client::ClientUpdate;
use crate::dataset::{self, DatasetError};
use crate::evaluation::{self, Benchmark, EvalError, EvalReport, Knob, ReportFormat, SweepResult};
use crate::model::{self, Batch, Matrix, ModelSpec, ParameterVector};
use crate::orchestrator::{
    self, Checkpoint, OrchestratorError, RunConfig, TcpClient, TcpPool, TrainingContext, Transport,
};
use crate::protocol::{self, FitRequest, FitResult, Message, PROTO_VERSION};
use crate::registry::{self, RegistryError, Split, TaskId};
use crate::seed;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn io_kind(e: &io::Error, msg: String) -> CliError {
    if e.kind() == io::ErrorKind::NotFound {
        CliError::Usage(msg)
    } else {
        CliError::Runtime(msg)
    }
}

impl From<OrchestratorError> for CliError {
    fn from(e: OrchestratorError) -> Self {
        let msg = e.to_string();
        match &e {
            OrchestratorError::Config(_) | OrchestratorError::Json(_) => CliError::Usage(msg),
            OrchestratorError::Io(io) => io_kind(io, msg),
            OrchestratorError::Registry(r) => CliError::from_registry(r, msg),
            OrchestratorError::Dataset(DatasetError::Io(io)) => io_kind(io, msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl CliError {
    fn from_registry(e: &RegistryError, msg: String) -> Self {
        match e {
            RegistryError::Io(io) => io_kind(io, msg),
            RegistryError::Schema(_) | RegistryError::SplitCounts { .. } | RegistryError::Empty => {
                CliError::Usage(msg)
            }
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<RegistryError> for CliError {
    fn from(e: RegistryError) -> Self {
        let msg = e.to_string();
        CliError::from_registry(&e, msg)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        OrchestratorError::from(e).into()
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(io) => OrchestratorError::Io(io).into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        OrchestratorError::Io(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "fedmanip",
    version,
    about = "Federated imitation-learning benchmark on simulated manipulation tasks"
)]
struct Cli {
    /// Worker threads for local fits and evaluation (default: logical cores).
    #[arg(long, global = true, env = "FLAME_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample an environment registry.
    GenEnvs(GenEnvsArgs),
    /// Collect expert demonstrations for every environment of a registry.
    Collect(CollectArgs),
    /// Federated training with the merged run configuration.
    Train(TrainArgs),
    /// TCP server role: waits for every training client, then trains.
    Serve(ServeArgs),
    /// TCP client role for one training environment.
    Client(ClientArgs),
    /// Evaluate a checkpoint (default: best on validation) on a split.
    Eval(EvalArgs),
    /// Sweep one knob, training once per value.
    Ablate(AblateArgs),
    /// Render saved evaluation and sweep results.
    Report(ReportArgs),
    /// Gradient check, aggregation oracles, and protocol round trips.
    Selftest,
    /// Tiny end-to-end pipeline in a fresh directory.
    Demo(DemoArgs),
}

#[derive(Args, Debug)]
struct GenEnvsArgs {
    #[arg(long)]
    task: TaskId,
    #[arg(long)]
    num_envs: usize,
    /// Split sizes as TRAIN/VAL/TEST; defaults to all-train.
    #[arg(long)]
    splits: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory; the registry goes to `<out>/environments.json`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CollectArgs {
    /// Registry file.
    #[arg(long, default_value = "environments.json")]
    registry: PathBuf,
    /// Demonstrations per environment.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Data root; defaults to `data/` next to the registry.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flags that override `run.json` fields.
#[derive(Args, Debug, Default, Clone)]
struct RunOverrides {
    /// Run directory holding run.json.
    #[arg(long = "run", default_value = ".")]
    run_dir: PathBuf,
    #[arg(long)]
    task: Option<TaskId>,
    /// fedavg, fedavgm, fedopt, or krum (default hyperparameters).
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    clients_per_round: Option<usize>,
    #[arg(long)]
    local_epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    run_seed: Option<u64>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<u32>,
    #[arg(long)]
    val_episodes: Option<u32>,
    #[arg(long)]
    test_episodes: Option<u32>,
    #[arg(long)]
    demos_per_client: Option<usize>,
    #[arg(long)]
    transport: Option<Transport>,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Validate and print the schedule without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[command(flatten)]
    run: RunOverrides,
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
}

#[derive(Args, Debug)]
struct ClientArgs {
    #[arg(long = "run", default_value = ".")]
    run_dir: PathBuf,
    #[arg(long)]
    connect: String,
    #[arg(long)]
    client_id: u32,
    /// Seconds to keep retrying the connection.
    #[arg(long, default_value_t = 30)]
    patience: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long = "run", default_value = ".")]
    run_dir: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<u32>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunOverrides,
    #[arg(long)]
    knob: Knob,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<u32>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long = "run", default_value = ".")]
    run_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "csv,md,svg")]
    formats: Vec<ReportFormat>,
}

#[derive(Args, Debug)]
struct DemoArgs {
    /// Directory for the demo run (created; must not already hold a run).
    #[arg(long, default_value = "fedmanip-demo")]
    out: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

fn run(cli: Cli) -> CliResult {
    if cli.workers == Some(0) {
        return Err(CliError::Usage("--workers must be >= 1".into()));
    }
    let workers = cli.workers;
    match cli.command {
        Command::GenEnvs(a) => gen_envs(a),
        Command::Collect(a) => collect(a),
        Command::Train(a) => train(a, workers),
        Command::Serve(a) => serve(a, workers),
        Command::Client(a) => client(a),
        Command::Eval(a) => eval(a, workers),
        Command::Ablate(a) => ablate(a, workers),
        Command::Report(a) => report(a),
        Command::Selftest => selftest_command(),
        Command::Demo(a) => demo(&a.out).map(|_| ()),
    }
}

fn parse_splits(text: &str) -> CliResult<(usize, usize, usize)> {
    let parts: Vec<&str> = text.split('/').collect();
    let bad = || CliError::Usage(format!("--splits expects TRAIN/VAL/TEST, got `{text}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let n: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<CliResult<_>>()?;
    Ok((n[0], n[1], n[2]))
}

fn gen_envs(a: GenEnvsArgs) -> CliResult {
    let (train, val, test) = match &a.splits {
        Some(s) => parse_splits(s)?,
        None => (a.num_envs, 0, 0),
    };
    if a.num_envs == 0 {
        return Err(CliError::Usage("--num-envs must be >= 1".into()));
    }
    let reg = registry::sample_environments(a.task, a.num_envs, a.seed)?;
    let reg = registry::assign_splits(reg, train, val, test)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("environments.json");
    registry::save_registry(&reg, &path)?;
    println!(
        "wrote {} ({} {} environments: {train} train / {val} val / {test} test)",
        path.display(),
        reg.len(),
        reg.task
    );
    Ok(())
}

fn collect(a: CollectArgs) -> CliResult {
    if a.episodes == 0 {
        return Err(CliError::Usage("--episodes must be >= 1".into()));
    }
    let reg = registry::load_registry(&a.registry)?;
    let root = a
        .out
        .unwrap_or_else(|| a.registry.parent().unwrap_or(Path::new(".")).join("data"));
    let start = Instant::now();
    let mut files = 0;
    for split in [Split::Train, Split::Val, Split::Test] {
        fs::create_dir_all(root.join(split.name()))?;
        files += dataset::collect_demos(&reg, split, a.episodes, a.seed, &root)?.len();
    }
    println!(
        "collected {} demonstrations x {files} environments into {} in {:.1}s",
        a.episodes,
        root.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

/// `run.json` (or defaults) with flag overrides applied. The registry and
/// data paths default to the run directory's own layout.
fn merged_config(o: &RunOverrides, workers: Option<usize>) -> CliResult<RunConfig> {
    let path = o.run_dir.join("run.json");
    let mut cfg = if path.exists() {
        RunConfig::load(&path)?
    } else {
        RunConfig::default()
    };
    if let Some(t) = o.task {
        cfg.task = t;
    } else if !path.exists() {
        if let Ok(reg) = registry::load_registry(&cfg.registry_path(&o.run_dir)) {
            cfg.task = reg.task;
        }
    }
    if let Some(s) = &o.strategy {
        cfg.strategy = Strategy::from_name(s)
            .ok_or_else(|| CliError::Usage(format!("unknown strategy `{s}`")))?;
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = o.$flag.clone() { cfg.$($field).+ = v; })*
        };
    }
    set!(
        rounds => rounds,
        clients_per_round => clients_per_round,
        local_epochs => local.epochs,
        batch_size => local.batch_size,
        lr => local.lr,
        run_seed => run_seed,
        init_seed => init_seed,
        eval_every => eval_every,
        val_episodes => val_episodes,
        test_episodes => test_episodes,
        demos_per_client => demos_per_client,
        transport => transport,
        registry => registry,
        data_dir => data_dir,
    );
    if workers.is_some() {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(outcome: &orchestrator::TrainingOutcome) -> CliResult {
    for r in &outcome.records {
        let metrics = match (r.val_success, r.val_rmse) {
            (Some(s), Some(e)) => format!("val success {s:.3}  val rmse {e:.4}"),
            _ => "no validation".to_string(),
        };
        println!(
            "round {:>3}  train loss {:.5}  {metrics}  ({:.1}s)",
            r.round, r.mean_train_loss, r.wall_time
        );
    }
    let best = outcome.best()?;
    println!("best checkpoint: round {}", best.round);
    Ok(())
}

fn save_best(dir: &Path, outcome: &orchestrator::TrainingOutcome) -> CliResult {
    outcome
        .best()?
        .save(&dir.join("checkpoints").join("best.ckpt"))?;
    Ok(())
}

fn train(a: TrainArgs, workers: Option<usize>) -> CliResult {
    let cfg = merged_config(&a.run, workers)?;
    let dir = &a.run.run_dir;
    if a.dry_run {
        let reg = registry::load_registry(&cfg.registry_path(dir))?;
        let plan = orchestrator::plan(&cfg, &reg)?;
        println!("{plan}");
        return Ok(());
    }
    let (_, ctx) = TrainingContext::load(&cfg, dir)?;
    cfg.save(&dir.join("run.json"))?;
    let outcome = orchestrator::train(&cfg, &ctx, Some(dir))?;
    save_best(dir, &outcome)?;
    print_summary(&outcome)
}

fn serve(a: ServeArgs, workers: Option<usize>) -> CliResult {
    let mut cfg = merged_config(&a.run, workers)?;
    cfg.transport = Transport::Tcp;
    let dir = &a.run.run_dir;
    let (_, ctx) = TrainingContext::load(&cfg, dir)?;
    cfg.save(&dir.join("run.json"))?;
    let listener = TcpListener::bind(&a.listen)
        .map_err(|e| CliError::Usage(format!("cannot listen on {}: {e}", a.listen)))?;
    println!(
        "listening on {} for {} clients",
        listener.local_addr()?,
        ctx.train.len()
    );
    let mut pool = TcpPool::accept(&listener, &ctx.train_ids())?;
    let outcome = orchestrator::run_training(&cfg, &ctx, &mut pool, Some(dir));
    pool.shutdown()?;
    let outcome = outcome?;
    save_best(dir, &outcome)?;
    print_summary(&outcome)
}

fn client(a: ClientArgs) -> CliResult {
    let cfg = merged_config(
        &RunOverrides {
            run_dir: a.run_dir.clone(),
            ..Default::default()
        },
        None,
    )?;
    let reg = registry::load_registry(&cfg.registry_path(&a.run_dir))?;
    let env = reg
        .get(a.client_id)
        .filter(|e| e.split == Split::Train)
        .ok_or_else(|| CliError::Usage(format!("{} is not a training client", a.client_id)))?
        .clone();
    let ds = dataset::read_dataset(&dataset::dataset_path(
        &cfg.data_root(&a.run_dir),
        Split::Train,
        a.client_id,
    ))?;
    let client = TcpClient {
        client_id: a.client_id,
        spec: cfg.model_spec()?,
        dataset: ds.truncated(cfg.demos_per_client),
        batch_size: cfg.local.batch_size,
        env: Some((env, cfg.val_episodes)),
    };
    let served = client.run(a.connect.as_str(), Duration::from_secs(a.patience))?;
    println!("client {} served {served} fits", a.client_id);
    Ok(())
}

/// The explicitly named checkpoint, else the best one recorded in the run.
fn resolve_checkpoint(dir: &Path, explicit: Option<&Path>) -> CliResult<Checkpoint> {
    if let Some(p) = explicit {
        return Ok(Checkpoint::load(p)?);
    }
    let best = dir.join("checkpoints").join("best.ckpt");
    if best.exists() {
        return Ok(Checkpoint::load(&best)?);
    }
    Err(CliError::Usage(format!(
        "no checkpoint given and {} does not exist; run `train` first",
        best.display()
    )))
}

fn reports_dir(dir: &Path) -> PathBuf {
    dir.join("reports")
}

fn eval(a: EvalArgs, workers: Option<usize>) -> CliResult {
    let cfg = merged_config(
        &RunOverrides {
            run_dir: a.run_dir.clone(),
            ..Default::default()
        },
        workers,
    )?;
    let ckpt = resolve_checkpoint(&a.run_dir, a.checkpoint.as_deref())?;
    let spec = cfg.model_spec()?;
    ckpt.check_spec(&spec)?;
    let bench = Benchmark::load(&cfg, &a.run_dir)?;
    let episodes = a.episodes.unwrap_or(cfg.test_episodes);
    let label = format!("{} {} round {}", cfg.strategy.name(), a.split, ckpt.round);
    let report = cfg
        .thread_pool()?
        .install(|| bench.report(&label, &ckpt.params, &spec, a.split, episodes))?;
    let out = reports_dir(&a.run_dir);
    fs::create_dir_all(&out)?;
    let path = out.join(format!("eval_{}.json", a.split));
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "{}: rmse (x1e-2) {}  normalized success {}  raw {:.3}  [{} envs x {} episodes]",
        report.label,
        evaluation::format_pm(report.mean_rmse, report.std_rmse, 100.0),
        evaluation::format_pm(report.mean_success, report.std_success, 1.0),
        report.mean_success_raw,
        report.env_count,
        report.episodes
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn ablate(a: AblateArgs, workers: Option<usize>) -> CliResult {
    let cfg = merged_config(&a.run, workers)?;
    let dir = &a.run.run_dir;
    let bench = Benchmark::load(&cfg, dir)?;
    let sweep = cfg
        .thread_pool()?
        .install(|| evaluation::ablation_sweep(&cfg, &bench, a.knob, &a.values))?;
    let out = reports_dir(dir);
    fs::create_dir_all(&out)?;
    let path = out.join(format!("sweep_{}.json", sweep.knob));
    fs::write(&path, serde_json::to_string_pretty(&sweep)? + "\n")?;
    for (v, r) in sweep.values.iter().zip(&sweep.reports) {
        println!(
            "{}={v}: normalized success {}  rmse (x1e-2) {}",
            sweep.knob,
            evaluation::format_pm(r.mean_success, r.std_success, 1.0),
            evaluation::format_pm(r.mean_rmse, r.std_rmse, 100.0)
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Saved evaluation reports and sweeps of a run, in file-name order.
fn saved_results(dir: &Path) -> CliResult<(Vec<EvalReport>, Vec<SweepResult>)> {
    let out = reports_dir(dir);
    let mut names: Vec<PathBuf> = match fs::read_dir(&out) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
        Err(e) => return Err(io_kind(&e, format!("{}: {e}", out.display()))),
    };
    names.sort();
    let (mut reports, mut sweeps) = (Vec::new(), Vec::new());
    for p in names {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if !name.ends_with(".json") {
            continue;
        }
        let text = fs::read_to_string(&p)?;
        if name.starts_with("eval_") {
            reports.push(serde_json::from_str(&text)?);
        } else if name.starts_with("sweep_") {
            sweeps.push(serde_json::from_str(&text)?);
        }
    }
    Ok((reports, sweeps))
}

fn report(a: ReportArgs) -> CliResult {
    let (reports, sweeps) = saved_results(&a.run_dir)?;
    if reports.is_empty() && sweeps.is_empty() {
        return Err(CliError::Usage(
            "no saved results; run `eval` or `ablate` first".into(),
        ));
    }
    let out = reports_dir(&a.run_dir);
    let mut all = reports.clone();
    all.extend(sweeps.iter().flat_map(|s| s.reports.iter().cloned()));
    for format in a.formats {
        let path = evaluation::emit_report(&all, &sweeps, format, &out, "report")?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Runs the built-in checks; returns (name, passed) per check.
pub fn selftest() -> Vec<(String, bool)> {
    let mut results = Vec::new();
    let mut rng = seed::rng(0x5e1f);

    let mut worst = 0.0f64;
    for i in 0..5u64 {
        let spec = ModelSpec::new(3, vec![5, 4], 2).unwrap();
        let params = model::init_params(&spec, i);
        let obs: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let act: Vec<f64> = (0..4 * 2).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let batch = Batch::new(
            Matrix::new(4, 3, obs).unwrap(),
            Matrix::new(4, 2, act).unwrap(),
        )
        .unwrap();
        worst = worst.max(model::grad_check(&spec, &params, &batch, 1e-6).unwrap_or(f64::INFINITY));
    }
    results.push((
        format!("gradient check (max rel err {worst:.2e})"),
        worst <= 1e-5,
    ));

    let updates: Vec<ClientUpdate> = (0..5u32)
        .map(|id| ClientUpdate {
            client_id: id,
            params: ParameterVector::from_vec((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            num_samples: rng.gen_range(1..50),
            train_loss: 0.0,
        })
        .collect();
    let global = ParameterVector::from_vec(vec![0.3; 6]);
    let avg = aggregation::weighted_average(&updates).unwrap();
    let close = |a: &ParameterVector| {
        a.as_slice()
            .iter()
            .zip(avg.as_slice())
            .all(|(x, y)| (x - y).abs() <= 1e-12)
    };
    let m = Strategy::FedAvgM {
        beta: 0.0,
        server_lr: 1.0,
    }
    .init_state(6)
    .aggregate(&global, &updates)
    .unwrap();
    results.push(("fedavgm(beta=0, lr=1) equals fedavg".into(), close(&m)));
    let o = Strategy::FedOpt {
        variant: aggregation::FedOptVariant::Sgd,
        eta: 1.0,
        tau: 1e-3,
    }
    .init_state(6)
    .aggregate(&global, &updates)
    .unwrap();
    results.push(("fedopt(sgd, eta=1) equals fedavg".into(), close(&o)));
    let mut byz = updates.clone();
    byz[2].params = ParameterVector::from_vec(vec![100.0; 6]);
    let pick = aggregation::krum_select(&byz, 1).map(|u| u.client_id);
    results.push((
        "krum rejects an outlier".into(),
        matches!(pick, Ok(id) if id != 2),
    ));

    let msgs = [
        Message::Hello {
            client_id: 7,
            proto_version: PROTO_VERSION,
        },
        Message::Fit(FitRequest {
            round: 3,
            epochs: 2,
            lr: 1e-3,
            shuffle_seed: 99,
            params: vec![0.5, -1.25],
        }),
        Message::FitResult(FitResult {
            client_id: 7,
            num_samples: 12,
            train_loss: 0.25,
            params: vec![1.0],
        }),
        Message::Eval {
            params: vec![2.0, 3.0],
        },
        Message::EvalResult {
            rmse: 0.1,
            success: 0.9,
        },
        Message::Shutdown,
    ];
    let ok = msgs.iter().all(|m| {
        protocol::decode_message(&protocol::encode_message(m))
            .ok()
            .as_ref()
            == Some(m)
    });
    results.push(("protocol round trips".into(), ok));
    results
}

fn selftest_command() -> CliResult {
    let results = selftest();
    for (name, ok) in &results {
        println!("{} {name}", if *ok { "ok  " } else { "FAIL" });
    }
    if results.iter().all(|r| r.1) {
        Ok(())
    } else {
        Err(CliError::Runtime("selftest failed".into()))
    }
}

/// The demo configuration: slide_block, 12 environments split 8/2/2, K=10,
/// M=4, R=5, 10 local epochs.
pub fn demo_config() -> RunConfig {
    RunConfig {
        task: TaskId::SlideBlock,
        rounds: 5,
        clients_per_round: 4,
        local: orchestrator::LocalSchedule {
            epochs: 10,
            ..Default::default()
        },
        val_episodes: 10,
        test_episodes: 10,
        demos_per_client: 10,
        ..RunConfig::default()
    }
}

/// gen -> collect -> train -> eval -> report in `dir`. Returns the test report.
pub fn demo(dir: &Path) -> CliResult<EvalReport> {
    if dir.join("run.json").exists() {
        return Err(CliError::Usage(format!(
            "{} already holds a run; pick a fresh --out",
            dir.display()
        )));
    }
    let start = Instant::now();
    let cfg = demo_config();
    fs::create_dir_all(dir)?;
    let reg = registry::assign_splits(registry::sample_environments(cfg.task, 12, 0)?, 8, 2, 2)?;
    registry::save_registry(&reg, &cfg.registry_path(dir))?;
    let data = cfg.data_root(dir);
    for split in [Split::Train, Split::Val, Split::Test] {
        fs::create_dir_all(data.join(split.name()))?;
        dataset::collect_demos(
            &reg,
            split,
            cfg.demos_per_client,
            cfg.collection_seed,
            &data,
        )?;
    }
    cfg.save(&dir.join("run.json"))?;
    println!(
        "[demo] environments and demonstrations ready ({:.1}s)",
        start.elapsed().as_secs_f64()
    );

    let (_, ctx) = TrainingContext::load(&cfg, dir)?;
    let outcome = orchestrator::train(&cfg, &ctx, Some(dir))?;
    save_best(dir, &outcome)?;
    print_summary(&outcome)?;

    let bench = Benchmark::load(&cfg, dir)?;
    let best = outcome.best()?;
    let report = bench.report(
        "demo test",
        &best.params,
        &ctx.spec,
        Split::Test,
        cfg.test_episodes,
    )?;
    let out = reports_dir(dir);
    fs::create_dir_all(&out)?;
    fs::write(
        out.join("eval_test.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    for format in [ReportFormat::Csv, ReportFormat::Md] {
        evaluation::emit_report(std::slice::from_ref(&report), &[], format, &out, "report")?;
    }
    println!(
        "[demo] test rmse (x1e-2) {}  normalized success {}  total {:.1}s",
        evaluation::format_pm(report.mean_rmse, report.std_rmse, 100.0),
        evaluation::format_pm(report.mean_success, report.std_success, 1.0),
        start.elapsed().as_secs_f64()
    );
    Ok(report)
}
