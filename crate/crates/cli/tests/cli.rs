use std::path::Path;
use std::process::{Command, Output};

fn burstmtl(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_burstmtl"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TOY: [&str; 3] = ["data.synth.n=48", "epochs=1", "lr_backbone=1e-3"];

#[test]
fn unknown_override_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = burstmtl(dir.path(), &["train", "foo=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`foo`"), "{}", stderr(&o));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = burstmtl(dir.path(), &["--config", "/nonexistent/run.toml", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.toml"));
    let o = burstmtl(dir.path(), &["evaluate", "--checkpoint", "/nonexistent/best.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    let o = burstmtl(dir.path(), &["weight-trace", "/nonexistent/epochs.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = burstmtl(dir.path(), &["evaluate", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = burstmtl(dir.path(), &["gradcheck", "--trials", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for op in ["matmul", "attention", "ccc_loss", "cross_entropy", "rruw_loss", "druw_loss"] {
        assert!(text.lines().any(|l| l.starts_with(op) && l.ends_with("pass")), "{op}\n{text}");
    }
}

#[test]
fn generate_then_train_chain_dwa_then_evaluate_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = burstmtl(&data, &["generate-data", "data.synth.n=48"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["manifest.csv", "signals.bin", "summary.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let run = dir.path().join("run");
    let manifest = format!("manifest={}", data.join("manifest.csv").display());
    let signals = format!("signals={}", data.join("signals.bin").display());
    let mut args = vec!["train", "architecture=chain", "strategy=dwa", &manifest, &signals];
    args.extend(TOY);
    let o = burstmtl(&run, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for row in ["type     UAR", "two      CCC", "high     CCC", "culture  CCC"] {
        assert!(text.contains(row), "{row}\n{text}");
    }
    assert!(text.contains('ρ'));
    assert!(run.join("config.resolved").exists());
    assert!(run.join("report.json").exists());
    let seed_dir = run.join("seed-0");
    for f in ["epochs.csv", "weights.csv", "best.ckpt", "last.ckpt", "report.json", "config.resolved"] {
        assert!(seed_dir.join(f).exists(), "{f}");
    }

    let ckpt = seed_dir.join("best.ckpt");
    let o = burstmtl(&run, &["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--split", "test"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(run.join("metrics-test.csv")).unwrap();
    assert!(csv.starts_with("task,metric,value,rho\ntype,UAR,"), "{csv}");
    assert_eq!(csv.lines().count(), 5);

    let o = burstmtl(&run, &["weight-trace", seed_dir.join("epochs.csv").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = stdout(&o);
    assert!(trace.starts_with("epoch,strategy,task,lambda,alpha\n1,dwa,type,1,1\n"), "{trace}");
}

#[test]
fn out_root_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_burstmtl"))
        .args(["generate-data", "data.synth.n=16"])
        .env("BURSTMTL_OUT", dir.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("manifest.csv").exists());
}

#[test]
fn config_file_and_resolved_echo_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nepochs = 1\nlr_backbone = 0.001\n\n[data.synth]\nn = 32\n").unwrap();
    let a = dir.path().join("a");
    let o = burstmtl(&a, &["--config", cfg.to_str().unwrap(), "train", "strategy=rruw"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = a.join("config.resolved");
    let b = dir.path().join("b");
    let o = burstmtl(&b, &["--config", resolved.to_str().unwrap(), "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["epochs.csv", "best.ckpt", "last.ckpt"] {
        assert_eq!(std::fs::read(a.join("seed-0").join(f)).unwrap(), std::fs::read(b.join("seed-0").join(f)).unwrap(), "{f}");
    }
}
