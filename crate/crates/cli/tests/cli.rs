use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dropprune"))
        .args(args)
        .env_remove("DROPPRUNE_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn quick_fc(out_dir: &Path) -> Vec<String> {
    [
        "--task=synthetic-fc",
        "--pretrain-epochs=5",
        "--phase1-rounds=20",
        "--phase3-rounds=100",
        "--synthetic-train=600",
        "--synthetic-test=200",
        "--valid-size=100",
        "--eval-examples=100",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("--out-dir={}", out_dir.display())])
    .collect()
}

fn args<'a>(sub: &'a str, rest: &'a [String]) -> Vec<&'a str> {
    std::iter::once(sub).chain(rest.iter().map(String::as_str)).collect()
}

#[test]
fn compress_writes_artifacts_and_prune_reproduces_model() {
    let dir = tempfile::tempdir().unwrap();
    let rest = quick_fc(dir.path());
    let out = run(&args("compress", &rest));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("param-fraction = "), "{stdout}");
    for f in ["model.dpm", "critic.model", "masks.txt", "metrics.csv", "summary.txt", "config.txt"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }

    let again = dir.path().join("again.dpm");
    let p = |x: &str| dir.path().join(x).display().to_string();
    let out = run(&[
        "prune",
        "--critic",
        &p("critic.model"),
        "--masks",
        &p("masks.txt"),
        "--out",
        &again.display().to_string(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(&again).unwrap(),
        std::fs::read(dir.path().join("model.dpm")).unwrap()
    );

    let mut eval = rest.clone();
    eval.push(format!("--model={}", p("model.dpm")));
    let out = run(&args("eval", &eval));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("latency-ms"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut rest = quick_fc(dir.path());
    rest.push("--alpha=1.5".into());
    assert_eq!(code(&run(&args("compress", &rest))), 2);

    // mnist without a data directory
    assert_eq!(code(&run(&["train", "--task=mnist-lenet"])), 2);

    let rest = quick_fc(dir.path());
    let mut sweep = rest.clone();
    sweep.push("--alphas=0.5".into());
    assert_eq!(code(&run(&args("sweep", &sweep))), 2);

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "alpha = 0.5\nno-such-key = 1\n").unwrap();
    let mut rest = quick_fc(dir.path());
    rest.push(format!("--config={}", cfg.display()));
    assert_eq!(code(&run(&args("compress", &rest))), 2);
}

#[test]
fn corrupt_model_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dpm");
    std::fs::write(&bad, b"NOTAMODEL-at-all").unwrap();
    let mut rest = quick_fc(dir.path());
    rest.push(format!("--model={}", bad.display()));
    let out = run(&args("eval", &rest));
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 0"));
}

#[test]
fn exhausted_schedule_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut rest = quick_fc(dir.path());
    rest.extend(["--alpha=0.01".to_string(), "--phase2-rounds=3".to_string()]);
    let out = run(&args("compress", &rest));
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible schedule"));
}

#[test]
fn sweep_writes_sorted_tradeoff_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut rest = quick_fc(dir.path());
    rest.push("--alphas=1.0,0.5,0.1".into());
    let out = run(&args("sweep", &rest));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("tradeoff.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("alpha,param_fraction,model_bytes,accuracy,latency_ms"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.windows(2).all(|w| w[0][1] >= w[1][1]));
    assert_eq!(rows[0][0], 1.0);
    assert_eq!(rows[0][1], 1.0);
    let summary = std::fs::read_to_string(dir.path().join("alpha-1").join("summary.txt")).unwrap();
    let baseline: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("baseline-accuracy = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((rows[0][3] - baseline).abs() < 1e-6);
    // one cached baseline shared by all three runs
    let baselines = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".model"))
        .count();
    assert_eq!(baselines, 1);
}
