//! Offline RMSE, online success, ablation sweeps, and report files.
//!
//! Spreads (`±`) are population standard deviations across environments.
//! Decimal renderings round half to even, which is what Rust's `{:.N}`
//! formatting does on the exact binary value.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{self, ClientError};
use crate::dataset::{self, ClientDataset, DatasetError};
use crate::model::{self, Matrix, ModelError, ModelSpec, ParameterVector, Workspace};
use crate::orchestrator::{self, OrchestratorError, RunConfig, TrainingContext};
use crate::registry::{self, EnvironmentConfig, Registry, Split};
use crate::seed;
use crate::sim::{self, Action, Expert, SimError, Simulator};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluation environments")]
    Empty,
    #[error("episodes must be >= 1")]
    NoEpisodes,
    #[error("expert never succeeds in environment {0}; success cannot be normalized")]
    ExpertFailed(u32),
    #[error("environment/dataset mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineStats {
    pub per_env: Vec<(u32, f64)>,
    pub mean: f64,
    pub std: f64,
}

/// Per-environment action RMSE over each environment's demonstrations.
pub fn offline_rmse(
    params: &ParameterVector,
    spec: &ModelSpec,
    datasets: &[ClientDataset],
) -> Result<OfflineStats, EvalError> {
    if datasets.is_empty() {
        return Err(EvalError::Empty);
    }
    let per_env = datasets
        .par_iter()
        .map(|ds| Ok((ds.client_id, client::local_evaluate(params, spec, ds)?)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    let values: Vec<f64> = per_env.iter().map(|p| p.1).collect();
    let (mean, std) = mean_std(&values);
    Ok(OfflineStats { per_env, mean, std })
}

/// Evaluation episode seeds of one environment.
pub fn eval_seeds(env: &EnvironmentConfig, episodes: u32) -> Vec<u64> {
    (0..u64::from(episodes))
        .map(|i| seed::eval_episode_seed(env.base_seed, i))
        .collect()
}

/// Runs the learned policy on every seed in lockstep, batching the forward
/// pass across still-running episodes. Returns per-episode success flags.
pub fn policy_successes(
    params: &ParameterVector,
    spec: &ModelSpec,
    env: &EnvironmentConfig,
    seeds: &[u64],
) -> Result<Vec<bool>, EvalError> {
    params.validate(spec)?;
    let dynamics = sim::derive_dynamics(env);
    let mut sims: Vec<Simulator> = seeds
        .iter()
        .map(|&s| Simulator::with_dynamics(dynamics.clone(), s))
        .collect();
    let d_in = spec.input_dim();
    let mut ws = Workspace::new(spec, sims.len().max(1));
    let mut active: Vec<usize> = (0..sims.len()).collect();
    while !active.is_empty() {
        let mut obs = Vec::with_capacity(active.len() * d_in);
        for &i in &active {
            obs.extend(sims[i].observe());
        }
        let out = model::forward_batch(
            spec,
            params,
            &Matrix::new(active.len(), d_in, obs)?,
            &mut ws,
        )?;
        for (row, &i) in active.iter().enumerate() {
            sims[i].step(Action::from_slice(out.row(row))?.clamped())?;
        }
        active.retain(|&i| !sims[i].is_done());
    }
    Ok(sims.iter().map(|s| s.result().success).collect())
}

/// Scripted-expert success rate of each environment on its evaluation seeds.
pub fn expert_success(envs: &[EnvironmentConfig], episodes: u32) -> Result<Vec<f64>, EvalError> {
    if episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    envs.par_iter()
        .map(|env| {
            let dynamics = sim::derive_dynamics(env);
            let mut wins = 0u32;
            for s in eval_seeds(env, episodes) {
                wins += u32::from(sim::rollout_with(&mut Expert, &dynamics, s)?.success);
            }
            Ok(f64::from(wins) / f64::from(episodes))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSuccess {
    pub env_id: u32,
    pub raw: f64,
    pub expert: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineStats {
    pub per_env: Vec<EnvSuccess>,
    pub raw_mean: f64,
    pub raw_std: f64,
    pub normalized_mean: f64,
    pub normalized_std: f64,
    pub episodes: u32,
}

/// Learner success on each environment's evaluation seeds, normalized by the
/// expert's rate on the same seeds.
pub fn online_success(
    params: &ParameterVector,
    spec: &ModelSpec,
    envs: &[EnvironmentConfig],
    episodes: u32,
) -> Result<OnlineStats, EvalError> {
    let expert = expert_success(envs, episodes)?;
    online_success_against(params, spec, envs, episodes, &expert)
}

/// [`online_success`] with precomputed expert rates (one per environment).
pub fn online_success_against(
    params: &ParameterVector,
    spec: &ModelSpec,
    envs: &[EnvironmentConfig],
    episodes: u32,
    expert: &[f64],
) -> Result<OnlineStats, EvalError> {
    if episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    if envs.is_empty() {
        return Err(EvalError::Empty);
    }
    if expert.len() != envs.len() {
        return Err(EvalError::Mismatch(format!(
            "{} expert rates for {} environments",
            expert.len(),
            envs.len()
        )));
    }
    let per_env = envs
        .par_iter()
        .zip(expert.par_iter())
        .map(|(env, &expert)| {
            if expert <= 0.0 {
                return Err(EvalError::ExpertFailed(env.client_id));
            }
            let flags = policy_successes(params, spec, env, &eval_seeds(env, episodes))?;
            let raw = flags.iter().filter(|&&s| s).count() as f64 / f64::from(episodes);
            Ok(EnvSuccess {
                env_id: env.client_id,
                raw,
                expert,
                normalized: raw / expert,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let (raw_mean, raw_std) = mean_std(&per_env.iter().map(|e| e.raw).collect::<Vec<_>>());
    let (normalized_mean, normalized_std) =
        mean_std(&per_env.iter().map(|e| e.normalized).collect::<Vec<_>>());
    Ok(OnlineStats {
        per_env,
        raw_mean,
        raw_std,
        normalized_mean,
        normalized_std,
        episodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvReport {
    pub env_id: u32,
    pub rmse: f64,
    pub success_raw: f64,
    pub success_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub per_env: Vec<EnvReport>,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    /// Normalized success, mean and spread across environments.
    pub mean_success: f64,
    pub std_success: f64,
    pub mean_success_raw: f64,
    pub episodes: u32,
    pub env_count: usize,
}

/// Offline and online evaluation on the same environments. `datasets` must
/// hold one demonstration set per environment, in the same order.
pub fn evaluate(
    label: &str,
    params: &ParameterVector,
    spec: &ModelSpec,
    envs: &[EnvironmentConfig],
    datasets: &[ClientDataset],
    episodes: u32,
) -> Result<EvalReport, EvalError> {
    let ids: Vec<u32> = envs.iter().map(|e| e.client_id).collect();
    let data_ids: Vec<u32> = datasets.iter().map(|d| d.client_id).collect();
    if ids != data_ids {
        return Err(EvalError::Mismatch(format!(
            "environments {ids:?} vs datasets {data_ids:?}"
        )));
    }
    let offline = offline_rmse(params, spec, datasets)?;
    let online = online_success(params, spec, envs, episodes)?;
    Ok(combine(label, &offline, &online))
}

pub fn combine(label: &str, offline: &OfflineStats, online: &OnlineStats) -> EvalReport {
    let per_env = offline
        .per_env
        .iter()
        .zip(&online.per_env)
        .map(|(&(env_id, rmse), s)| EnvReport {
            env_id,
            rmse,
            success_raw: s.raw,
            success_norm: s.normalized,
        })
        .collect::<Vec<_>>();
    EvalReport {
        label: label.to_string(),
        env_count: per_env.len(),
        per_env,
        mean_rmse: offline.mean,
        std_rmse: offline.std,
        mean_success: online.normalized_mean,
        std_success: online.normalized_std,
        mean_success_raw: online.raw_mean,
        episodes: online.episodes,
    }
}

/// `mean ± std` at two decimals after scaling both by `scale`.
pub fn format_pm(mean: f64, std: f64, scale: f64) -> String {
    format!("{:.2} ± {:.2}", mean * scale, std * scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Md,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "md" => Ok(Self::Md),
            "svg" => Ok(Self::Svg),
            other => Err(format!("unknown report format `{other}` (csv, md, svg)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub knob: String,
    pub values: Vec<f64>,
    pub reports: Vec<EvalReport>,
    pub base_fingerprint: u64,
}

/// Writes `reports` (and `sweeps`, for svg) to `dir/<stem>.<ext>`.
pub fn emit_report(
    reports: &[EvalReport],
    sweeps: &[SweepResult],
    format: ReportFormat,
    dir: &Path,
    stem: &str,
) -> Result<PathBuf, EvalError> {
    fs::create_dir_all(dir)?;
    match format {
        ReportFormat::Csv => {
            let path = dir.join(format!("{stem}.csv"));
            write_csv(reports, &path)?;
            Ok(path)
        }
        ReportFormat::Md => {
            let path = dir.join(format!("{stem}.md"));
            fs::write(&path, render_markdown(reports))?;
            Ok(path)
        }
        ReportFormat::Svg => {
            let path = dir.join(format!("{stem}.svg"));
            fs::write(&path, render_svg(sweeps))?;
            Ok(path)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    report: String,
    env_id: String,
    rmse: f64,
    success_raw: f64,
    success_norm: f64,
}

/// One row per environment, then a `mean` summary row, for every report.
pub fn write_csv(reports: &[EvalReport], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        for e in &r.per_env {
            w.serialize(CsvRow {
                report: r.label.clone(),
                env_id: e.env_id.to_string(),
                rmse: e.rmse,
                success_raw: e.success_raw,
                success_norm: e.success_norm,
            })?;
        }
        w.serialize(CsvRow {
            report: r.label.clone(),
            env_id: "mean".into(),
            rmse: r.mean_rmse,
            success_raw: r.mean_success_raw,
            success_norm: r.mean_success,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// `(report, env_id, rmse, success_raw, success_norm)`; env_id is `mean` on summary rows.
pub type ReportRow = (String, String, f64, f64, f64);

/// Parses a file written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok((
                row.report,
                row.env_id,
                row.rmse,
                row.success_raw,
                row.success_norm,
            ))
        })
        .collect()
}

/// Two-panel table: RMSE (×10⁻²) and normalized success rate.
pub fn render_markdown(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "## (a) RMSE (×10⁻²)\n");
    let _ = writeln!(s, "| Run | RMSE | Envs |");
    let _ = writeln!(s, "|---|---|---|");
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {} | {} |",
            r.label,
            format_pm(r.mean_rmse, r.std_rmse, 100.0),
            r.env_count
        );
    }
    let _ = writeln!(s, "\n## (b) Normalized Success Rate\n");
    let _ = writeln!(s, "| Run | Normalized Success Rate | Raw | Episodes/env |");
    let _ = writeln!(s, "|---|---|---|---|");
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {} | {:.2} | {} |",
            r.label,
            format_pm(r.mean_success, r.std_success, 1.0),
            r.mean_success_raw,
            r.episodes
        );
    }
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Knob value vs mean normalized success, one polyline per sweep, with
/// ±std whiskers. Each sweep's x axis spans the plot width independently.
pub fn render_svg(sweeps: &[SweepResult]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let y_max = sweeps
        .iter()
        .flat_map(|s| &s.reports)
        .map(|r| r.mean_success + r.std_success)
        .fold(1.0f64, f64::max);
    let y = |v: f64| h - m - (v / y_max) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m
    );
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#,
        h - m
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})">normalized success</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (k, sweep) in sweeps.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let n = sweep.values.len();
        let x = |i: usize| {
            if n <= 1 {
                w / 2.0
            } else {
                m + i as f64 * (w - 2.0 * m) / (n - 1) as f64
            }
        };
        let points: Vec<String> = sweep
            .reports
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{:.2},{:.2}", x(i), y(r.mean_success)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
            points.join(" "),
            escape(&sweep.knob)
        );
        for (i, (r, v)) in sweep.reports.iter().zip(&sweep.values).enumerate() {
            let _ = writeln!(
                s,
                r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="{color}"/>"#,
                x(i),
                y((r.mean_success - r.std_success).max(0.0)),
                y(r.mean_success + r.std_success)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{v}</text>"#,
                x(i),
                h - m + 14.0 + 12.0 * k as f64
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" fill="{color}">{}</text>"#,
            w - m - 120.0,
            m + 14.0 * k as f64,
            escape(&sweep.knob)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// A task's registry with its stored demonstrations, split by split.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub registry: Registry,
    pub train: Vec<ClientDataset>,
    pub val: Vec<ClientDataset>,
    pub test: Vec<ClientDataset>,
}

impl Benchmark {
    pub fn load(cfg: &RunConfig, root: &Path) -> Result<Self, OrchestratorError> {
        let registry = registry::load_registry(&cfg.registry_path(root))?;
        let data = cfg.data_root(root);
        Ok(Self {
            train: dataset::load_split(&registry, Split::Train, &data)?,
            val: dataset::load_split(&registry, Split::Val, &data)?,
            test: dataset::load_split(&registry, Split::Test, &data)?,
            registry,
        })
    }

    /// Collects `k` demonstrations for every environment of `registry`.
    pub fn collect(
        registry: Registry,
        k: usize,
        collection_seed: u64,
    ) -> Result<Self, DatasetError> {
        let split = |s: Split| -> Result<Vec<ClientDataset>, DatasetError> {
            let envs: Vec<&EnvironmentConfig> = registry.split(s).collect();
            envs.par_iter()
                .map(|env| dataset::collect_client(env, k, collection_seed))
                .collect()
        };
        Ok(Self {
            train: split(Split::Train)?,
            val: split(Split::Val)?,
            test: split(Split::Test)?,
            registry,
        })
    }

    pub fn envs(&self, split: Split) -> Vec<EnvironmentConfig> {
        self.registry.split(split).cloned().collect()
    }

    pub fn data(&self, split: Split) -> &[ClientDataset] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn context(&self, cfg: &RunConfig) -> Result<TrainingContext, OrchestratorError> {
        TrainingContext::new(cfg, &self.registry, self.train.clone(), self.val.clone())
    }

    /// Offline and online evaluation on one split.
    pub fn report(
        &self,
        label: &str,
        params: &ParameterVector,
        spec: &ModelSpec,
        split: Split,
        episodes: u32,
    ) -> Result<EvalReport, EvalError> {
        evaluate(
            label,
            params,
            spec,
            &self.envs(split),
            self.data(split),
            episodes,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    ClientsPerRound,
    DemosPerClient,
    LocalEpochs,
    Rounds,
}

impl Knob {
    pub fn name(self) -> &'static str {
        match self {
            Knob::ClientsPerRound => "clients_per_round",
            Knob::DemosPerClient => "demos_per_client",
            Knob::LocalEpochs => "local_epochs",
            Knob::Rounds => "rounds",
        }
    }

    /// `base` with this knob set to `value`.
    pub fn apply(self, base: &RunConfig, value: u32) -> Result<RunConfig, OrchestratorError> {
        if value == 0 {
            return Err(OrchestratorError::Config(format!(
                "{} must be >= 1",
                self.name()
            )));
        }
        let mut cfg = base.clone();
        match self {
            Knob::ClientsPerRound => cfg.clients_per_round = value as usize,
            Knob::DemosPerClient => cfg.demos_per_client = value as usize,
            Knob::LocalEpochs => cfg.local.epochs = value,
            Knob::Rounds => cfg.rounds = value,
        }
        Ok(cfg)
    }
}

impl std::str::FromStr for Knob {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Knob::ClientsPerRound,
            Knob::DemosPerClient,
            Knob::LocalEpochs,
            Knob::Rounds,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| {
            format!(
                "unknown knob `{s}` (clients_per_round, demos_per_client, local_epochs, rounds)"
            )
        })
    }
}

/// One full training run per knob value, each scored on the test split with
/// its best validation checkpoint. Every other setting, seeds included, is
/// taken from `base`; `demos_per_client` keeps the first K stored episodes.
pub fn ablation_sweep(
    base: &RunConfig,
    bench: &Benchmark,
    knob: Knob,
    values: &[u32],
) -> Result<SweepResult, OrchestratorError> {
    if values.is_empty() {
        return Err(OrchestratorError::Config(
            "sweep needs at least one value".into(),
        ));
    }
    let mut reports = Vec::with_capacity(values.len());
    for &v in values {
        let cfg = knob.apply(base, v)?;
        let ctx = bench.context(&cfg)?;
        let outcome = orchestrator::train(&cfg, &ctx, None)?;
        let best = outcome.best()?;
        let label = format!("{}={v}", knob.name());
        reports.push(bench.report(
            &label,
            &best.params,
            &ctx.spec,
            Split::Test,
            cfg.test_episodes,
        )?);
    }
    Ok(SweepResult {
        knob: knob.name().to_string(),
        values: values.iter().map(|&v| f64::from(v)).collect(),
        reports,
        base_fingerprint: base.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{sample_environments, TaskId};

    #[test]
    fn population_std_rendering() {
        let (m, s) = mean_std(&[0.02, 0.04]);
        assert_eq!(format_pm(m, s, 100.0), "3.00 ± 1.00");
        assert_eq!(format_pm(0.0264, 0.0013, 100.0), "2.64 ± 0.13");
    }

    #[test]
    fn renderings_round_half_to_even() {
        assert_eq!(format_pm(0.125, 0.375, 1.0), "0.12 ± 0.38");
    }

    #[test]
    fn zero_policy_never_moves_the_block() {
        let reg = sample_environments(TaskId::SlideBlock, 2, 4).unwrap();
        let spec = ModelSpec::policy(sim::obs_dim(TaskId::SlideBlock)).unwrap();
        let zero = ParameterVector::from_vec(vec![0.0; spec.param_count()]);
        let s = online_success(&zero, &spec, &reg.environments, 5).unwrap();
        assert_eq!(s.raw_mean, 0.0);
        assert!(s.per_env.iter().all(|e| e.expert == 1.0));
    }
}
