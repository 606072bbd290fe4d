use std::fs;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use fedmanip::orchestrator::{read_records, RunConfig};
use fedmanip::registry::load_registry;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedmanip"));
    c.env("FLAME_WORKERS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn selftest_passes() {
    let out = run(&["selftest"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&run(&["train", "--no-such-flag"])), 1);
    let missing = run(&["collect", "--registry", "/nonexistent/environments.json"]);
    assert_eq!(code(&missing), 1);
    assert!(!missing.stderr.is_empty());
    assert_eq!(code(&run(&["--workers", "0", "selftest"])), 1);
}

#[test]
fn full_scale_registry_and_dry_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = path(dir.path());
    let out = run(&[
        "gen-envs",
        "--task",
        "peg_insert",
        "--num-envs",
        "420",
        "--splits",
        "400/10/10",
        "--out",
        d,
    ]);
    assert_eq!(code(&out), 0);
    let reg = load_registry(&dir.path().join("environments.json")).unwrap();
    assert_eq!(reg.len(), 420);
    assert_eq!(
        (
            reg.split_counts.train,
            reg.split_counts.val,
            reg.split_counts.test
        ),
        (400, 10, 10)
    );
    let plan = run(&[
        "train",
        "--run",
        d,
        "--rounds",
        "30",
        "--clients-per-round",
        "20",
        "--local-epochs",
        "50",
        "--demos-per-client",
        "100",
        "--dry-run",
    ]);
    assert_eq!(code(&plan), 0, "{}", String::from_utf8_lossy(&plan.stderr));
    assert!(String::from_utf8_lossy(&plan.stdout).contains("local fits: 600"));
    let too_many = run(&[
        "train",
        "--run",
        d,
        "--clients-per-round",
        "401",
        "--dry-run",
    ]);
    assert_eq!(code(&too_many), 1);
}

#[test]
fn demo_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    for d in [&a, &b] {
        let out = run(&["demo", "--out", path(d)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(read_records(&a.join("records.csv")).unwrap().len(), 5);
    for name in ["round_0004.ckpt", "best.ckpt"] {
        assert_eq!(
            fs::read(a.join("checkpoints").join(name)).unwrap(),
            fs::read(b.join("checkpoints").join(name)).unwrap()
        );
    }
    let report = fs::read_to_string(a.join("reports/eval_test.json")).unwrap();
    assert!(report.contains("mean_rmse") && report.contains("mean_success"));
    assert_eq!(code(&run(&["demo", "--out", path(&a)])), 1);
}

#[test]
fn staged_pipeline_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = path(dir.path());
    assert_eq!(
        code(&run(&[
            "gen-envs",
            "--task",
            "close_box",
            "--num-envs",
            "6",
            "--splits",
            "3/1/2",
            "--out",
            d
        ])),
        0
    );
    let reg = dir.path().join("environments.json");
    assert_eq!(
        code(&run(&[
            "collect",
            "--registry",
            path(&reg),
            "--episodes",
            "3"
        ])),
        0
    );
    let train = run(&[
        "train",
        "--run",
        d,
        "--rounds",
        "2",
        "--clients-per-round",
        "2",
        "--local-epochs",
        "1",
        "--demos-per-client",
        "3",
        "--val-episodes",
        "2",
        "--test-episodes",
        "2",
        "--strategy",
        "fedavgm",
    ]);
    assert_eq!(
        code(&train),
        0,
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    let cfg = RunConfig::load(&dir.path().join("run.json")).unwrap();
    assert_eq!(cfg.rounds, 2);
    assert_eq!(cfg.local.epochs, 1);
    assert_eq!(cfg.strategy.name(), "fedavgm");
    assert_eq!(code(&run(&["eval", "--run", d, "--split", "test"])), 0);
    let ablate = run(&[
        "ablate",
        "--run",
        d,
        "--knob",
        "clients_per_round",
        "--values",
        "1,2",
    ]);
    assert_eq!(
        code(&ablate),
        0,
        "{}",
        String::from_utf8_lossy(&ablate.stderr)
    );
    assert_eq!(code(&run(&["report", "--run", d])), 0);
    for f in ["report.csv", "report.md", "report.svg"] {
        assert!(dir.path().join("reports").join(f).exists(), "{f}");
    }
}

#[test]
fn serve_and_client_processes_train_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let d = path(dir.path());
    assert_eq!(
        code(&run(&[
            "gen-envs",
            "--task",
            "slide_block",
            "--num-envs",
            "4",
            "--splits",
            "3/1/0",
            "--out",
            d
        ])),
        0
    );
    let reg = dir.path().join("environments.json");
    assert_eq!(
        code(&run(&[
            "collect",
            "--registry",
            path(&reg),
            "--episodes",
            "2"
        ])),
        0
    );
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let server = bin()
        .args([
            "serve",
            "--run",
            d,
            "--listen",
            &addr,
            "--rounds",
            "2",
            "--clients-per-round",
            "2",
            "--local-epochs",
            "1",
            "--demos-per-client",
            "2",
            "--val-episodes",
            "2",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let clients: Vec<_> = (0..3)
        .map(|id| {
            bin()
                .args([
                    "client",
                    "--run",
                    d,
                    "--connect",
                    &addr,
                    "--client-id",
                    &id.to_string(),
                ])
                .stdout(Stdio::null())
                .stderr(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    let out = server.wait_with_output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for c in clients {
        let o = c.wait_with_output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        read_records(&dir.path().join("records.csv")).unwrap().len(),
        2
    );
}
