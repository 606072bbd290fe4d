use fedmanip::dataset::collect_client;
use fedmanip::evaluation::{
    ablation_sweep, emit_report, eval_seeds, evaluate, expert_success, offline_rmse,
    online_success, online_success_against, read_csv, render_markdown, Benchmark, EvalReport, Knob,
    ReportFormat,
};
use fedmanip::model::{self, ModelSpec};
use fedmanip::orchestrator::{self, LocalSchedule, RunConfig};
use fedmanip::registry::{assign_splits, sample_environments, Split, TaskId};
use fedmanip::seed;
use fedmanip::sim;

fn slide_spec() -> ModelSpec {
    ModelSpec::policy(sim::obs_dim(TaskId::SlideBlock)).unwrap()
}

#[test]
fn perfect_predictor_has_zero_rmse() {
    let reg = sample_environments(TaskId::SlideBlock, 2, 8).unwrap();
    let spec = ModelSpec::new(10, vec![6], 4).unwrap();
    let params = model::init_params(&spec, 4);
    let mut datasets: Vec<_> = reg
        .environments
        .iter()
        .map(|e| collect_client(e, 2, 0).unwrap())
        .collect();
    for ds in &mut datasets {
        for ep in &mut ds.episodes {
            ep.actions = ep
                .observations
                .chunks(10)
                .flat_map(|o| model::forward(&spec, &params, o).unwrap())
                .collect();
        }
    }
    let stats = offline_rmse(&params, &spec, &datasets).unwrap();
    assert_eq!(stats.mean, 0.0);
    assert_eq!(stats.std, 0.0);
    assert!(offline_rmse(&params, &spec, &[]).is_err());
}

#[test]
fn normalization_is_expert_relative() {
    let reg = sample_environments(TaskId::SlideBlock, 3, 2).unwrap();
    let spec = slide_spec();
    let params = model::init_params(&spec, 0);
    let s = online_success(&params, &spec, &reg.environments, 4).unwrap();
    for e in &s.per_env {
        assert_eq!(e.expert, 1.0);
        assert_eq!(e.normalized, e.raw);
    }
    let halved = online_success_against(&params, &spec, &reg.environments, 4, &[0.5; 3]).unwrap();
    for (h, e) in halved.per_env.iter().zip(&s.per_env) {
        assert_eq!(h.normalized, 2.0 * e.raw);
    }
}

#[test]
fn random_policy_rarely_succeeds() {
    let reg = sample_environments(TaskId::SlideBlock, 10, 5).unwrap();
    let spec = slide_spec();
    let s = online_success(&model::init_params(&spec, 11), &spec, &reg.environments, 50).unwrap();
    assert!(s.raw_mean <= 0.1, "raw success {}", s.raw_mean);
}

#[test]
fn evaluation_is_deterministic_and_seeds_are_disjoint() {
    let reg = sample_environments(TaskId::SlideBlock, 2, 6).unwrap();
    let spec = slide_spec();
    let params = model::init_params(&spec, 2);
    let data: Vec<_> = reg
        .environments
        .iter()
        .map(|e| collect_client(e, 2, 0).unwrap())
        .collect();
    let a = evaluate("a", &params, &spec, &reg.environments, &data, 5).unwrap();
    let b = evaluate("a", &params, &spec, &reg.environments, &data, 5).unwrap();
    assert_eq!(a, b);
    for env in &reg.environments {
        let demo: Vec<u64> = (0..1000)
            .map(|i| seed::demo_episode_seed(env.base_seed, 0, i))
            .collect();
        assert!(eval_seeds(env, 1000).iter().all(|s| !demo.contains(s)));
    }
    assert_eq!(
        expert_success(&reg.environments, 5).unwrap(),
        vec![1.0, 1.0]
    );
}

fn tiny_bench() -> Benchmark {
    let reg = sample_environments(TaskId::SlideBlock, 5, 12).unwrap();
    Benchmark::collect(assign_splits(reg, 3, 1, 1).unwrap(), 2, 0).unwrap()
}

fn tiny_config() -> RunConfig {
    RunConfig {
        rounds: 2,
        clients_per_round: 2,
        local: LocalSchedule {
            epochs: 1,
            batch_size: 32,
            lr: 1e-3,
        },
        hidden: vec![8],
        val_episodes: 2,
        test_episodes: 2,
        demos_per_client: 2,
        workers: Some(1),
        ..RunConfig::default()
    }
}

#[test]
fn single_value_sweep_equals_a_plain_run() {
    let bench = tiny_bench();
    let cfg = tiny_config();
    let sweep = ablation_sweep(&cfg, &bench, Knob::LocalEpochs, &[1]).unwrap();
    let ctx = bench.context(&cfg).unwrap();
    let out = orchestrator::train(&cfg, &ctx, None).unwrap();
    let direct = bench
        .report(
            "local_epochs=1",
            &out.best().unwrap().params,
            &ctx.spec,
            Split::Test,
            2,
        )
        .unwrap();
    assert_eq!(sweep.reports, vec![direct]);
    assert_eq!(sweep.base_fingerprint, cfg.fingerprint());
    assert!(ablation_sweep(&cfg, &bench, Knob::Rounds, &[0]).is_err());
    assert!(ablation_sweep(&cfg, &bench, Knob::DemosPerClient, &[3]).is_err());
    assert!(ablation_sweep(&cfg, &bench, Knob::Rounds, &[]).is_err());
}

fn sample_report(label: &str, rmse: &[f64], success: &[f64]) -> EvalReport {
    let per_env = rmse
        .iter()
        .zip(success)
        .enumerate()
        .map(|(i, (&r, &s))| fedmanip::evaluation::EnvReport {
            env_id: i as u32,
            rmse: r,
            success_raw: s,
            success_norm: s,
        })
        .collect();
    let (mean_rmse, std_rmse) = fedmanip::evaluation::mean_std(rmse);
    let (mean_success, std_success) = fedmanip::evaluation::mean_std(success);
    EvalReport {
        label: label.into(),
        per_env,
        mean_rmse,
        std_rmse,
        mean_success,
        std_success,
        mean_success_raw: mean_success,
        episodes: 50,
        env_count: rmse.len(),
    }
}

#[test]
fn report_files() {
    let dir = tempfile::tempdir().unwrap();
    let reports = vec![
        sample_report("fedavg", &[0.02, 0.04], &[0.7, 0.9]),
        sample_report("krum & co", &[0.1 / 3.0, 0.123456789012345], &[0.2, 0.3]),
    ];
    let csv = emit_report(&reports, &[], ReportFormat::Csv, dir.path(), "r").unwrap();
    let rows = read_csv(&csv).unwrap();
    assert_eq!(rows.len(), 6);
    let mut i = 0;
    for r in &reports {
        for e in &r.per_env {
            let (label, id, rmse, raw, norm) = &rows[i];
            assert_eq!(
                (label, id.as_str()),
                (&r.label, e.env_id.to_string().as_str())
            );
            for (a, b) in [(rmse, e.rmse), (raw, e.success_raw), (norm, e.success_norm)] {
                assert!((a - b).abs() < 1e-12);
            }
            i += 1;
        }
        assert_eq!(rows[i].1, "mean");
        assert!((rows[i].2 - r.mean_rmse).abs() < 1e-12);
        i += 1;
    }

    let md = render_markdown(&reports);
    assert!(md.contains("RMSE") && md.contains("Normalized Success Rate"));
    assert!(md.contains("| fedavg | 3.00 ± 1.00 | 2 |"));

    let sweeps: Vec<_> = ["clients_per_round", "demos_per_client"]
        .iter()
        .map(|k| fedmanip::evaluation::SweepResult {
            knob: k.to_string(),
            values: vec![1.0, 4.0, 10.0],
            reports: reports
                .iter()
                .cloned()
                .chain([reports[0].clone()])
                .collect(),
            base_fingerprint: 0,
        })
        .collect();
    let svg = emit_report(&reports, &sweeps, ReportFormat::Svg, dir.path(), "r").unwrap();
    let text = std::fs::read_to_string(svg).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let polylines = doc
        .descendants()
        .filter(|n| n.tag_name().name() == "polyline")
        .count();
    assert_eq!(polylines, 2);
}
