use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fairfed::harness::{DataSource, ExperimentConfig};

fn fairfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairfed"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fairfed(args);
    assert!(
        out.status.success(),
        "fairfed {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A reduced demo that tunes both penalty weights in a few seconds.
fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::demo();
    cfg.data = DataSource::Synthetic {
        n: 1600,
        d: 4,
        bias: 0.5,
        seed: 21,
    };
    cfg.federation.rounds = 3;
    cfg.penalty.tuning.coarse_points = 3;
    cfg.penalty.tuning.refined_points = 3;
    cfg.penalty.tuning.lambda_count = 1;
    cfg.penalty.tuning.sweep.max_lambda = 0.5;
    cfg.output_dir = dir.join("out");
    let path = dir.join("experiment.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn repeated_runs_write_identical_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["run", "--config", s(&cfg), "--out-dir", s(&a)]);
    ok(&["run", "--config", s(&cfg), "--out-dir", s(&b), "--sequential"]);
    let (ca, cb) = (csv_bytes(&a), csv_bytes(&b));
    assert!(ca.iter().any(|(n, _)| n == "report.csv"));
    assert!(ca.iter().any(|(n, _)| n.starts_with("gamma_")));
    assert_eq!(ca, cb);
    for f in ["report.md", "metadata.toml", "result.json"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
}

#[test]
fn metadata_file_reruns_the_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = tmp.path().join("a");
    ok(&["run", "--config", s(&cfg), "--out-dir", s(&a), "--formats", "csv,meta"]);
    let b = tmp.path().join("b");
    ok(&["run", "--config", s(&a.join("metadata.toml")), "--out-dir", s(&b), "--formats", "csv"]);
    assert_eq!(fs::read(a.join("report.csv")).unwrap(), fs::read(b.join("report.csv")).unwrap());
}

#[test]
fn report_renders_saved_result() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = tmp.path().join("a");
    ok(&["run", "--config", s(&cfg), "--out-dir", s(&a), "--roster", "central,fedavg", "--formats", "csv,json"]);
    let r = tmp.path().join("rendered");
    ok(&["report", "--result", s(&a.join("result.json")), "--out-dir", s(&r), "--formats", "csv,md"]);
    assert_eq!(fs::read(a.join("report.csv")).unwrap(), fs::read(r.join("report.csv")).unwrap());
    assert!(r.join("report.md").exists());
}

#[test]
fn synth_partition_and_client_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("cohort.csv");
    ok(&["synth", "--n", "1200", "--d", "3", "--out", s(&data)]);
    let text = fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 1201);

    let mut cfg: ExperimentConfig = ExperimentConfig::demo();
    cfg.data = DataSource::Synthetic {
        n: 1200,
        d: 3,
        bias: 0.5,
        seed: 4,
    };
    let cfg_path = tmp.path().join("p.toml");
    fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let sites = tmp.path().join("sites");
    let out = ok(&["partition", "--config", s(&cfg_path), "--out-dir", s(&sites)]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("client,file,n"));
    let manifest = fs::read_to_string(sites.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 5);

    let roles = fairfed::data::generate_synthetic(20, 3, 0.5, 1).unwrap().schema().roles();
    cfg.data = DataSource::Clients {
        paths: (1..=4).map(|k| sites.join(format!("client_{k}.csv"))).collect(),
        roles,
    };
    cfg.partition = None;
    cfg.roster = vec![fairfed::harness::ModelKind::Central, fairfed::harness::ModelKind::FedAvg];
    let run_cfg = tmp.path().join("clients.toml");
    fs::write(&run_cfg, cfg.to_toml().unwrap()).unwrap();
    let r = tmp.path().join("r");
    ok(&["run", "--config", s(&run_cfg), "--out-dir", s(&r), "--formats", "csv"]);
    let report = fs::read_to_string(r.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 4 * 2 + 2);
}

#[test]
fn train_and_tuning_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = tmp.path().join("t");
    let out = ok(&["train", "--config", s(&cfg), "--model", "local", "--out-dir", s(&o)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Local Model"));
    assert!(o.join("model_local.json").exists());

    let out = ok(&["tune-lambda", "--config", s(&cfg), "--lambda-policy", "min", "--out-dir", s(&o)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("candidates"));
    assert!(o.join("lambda_sweep_client_4.csv").exists());

    let out = ok(&["tune-gamma", "--config", s(&cfg), "--lambda", "0.5", "--refine", "two", "--out-dir", s(&o)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("final gamma"));
    let header = fs::read_to_string(o.join("gamma_refined.csv")).unwrap();
    assert!(header.starts_with("gamma,mean_auc,DPD,DPR,EOD,EOR,eligible,selected"));
}

#[test]
fn failures_exit_non_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    assert!(!fairfed(&["run", "--config", "/nonexistent/cfg.toml"]).status.success());
    assert!(!fairfed(&["run", "--config", s(&cfg), "--roster", "central,bogus"]).status.success());
    assert!(!fairfed(&["run", "--config", s(&cfg), "--formats", "pdf"]).status.success());
    assert!(!fairfed(&["tune-gamma", "--config", s(&cfg)]).status.success());
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "roster = []\n").unwrap();
    assert!(!fairfed(&["run", "--config", s(&bad)]).status.success());
}

#[test]
fn dump_config_round_trips() {
    let out = ok(&["run", "--dump-config", "--seed", "5"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = fairfed::harness::parse_config(&text).unwrap();
    assert_eq!(cfg.federation.train.seed, 5);
    assert_eq!(cfg.roster.len(), 6);
}
