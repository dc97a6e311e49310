use std::path::Path;
use std::process::{Command, Output};

fn icmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icmf"))
        .args(args)
        .env_remove("ICMF_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small, fast training run.
fn train(out: &Path, steps: usize, extra: &[&str]) -> Output {
    train_seeded(out, steps, 7, extra)
}

fn train_seeded(out: &Path, steps: usize, seed: u64, extra: &[&str]) -> Output {
    let (steps, seed) = (steps.to_string(), seed.to_string());
    let mut args = vec![
        "train", "--out", p(out), "--steps", &steps, "--image-side", "32", "--batch-size", "2",
        "--synth", "4", "--checkpoint-every", "5", "--seed", &seed,
    ];
    args.extend_from_slice(extra);
    icmf(&args)
}

#[test]
fn help_and_unknown_flags() {
    let o = icmf(&["train", "--help"]);
    assert!(o.status.success());
    let help = stdout(&o);
    for flag in ["--config", "--seed", "--out", "--steps", "--resume", "--checkpoint-every", "--no-augment", "--variant"] {
        assert!(help.contains(flag), "missing {flag}");
    }
    assert_eq!(icmf(&["eval", "--oracle", "--bogus"]).status.code(), Some(2));
    assert_eq!(icmf(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_smoke_determinism_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let o = train(&a, 10, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(a.join("train.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 10);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    assert!(a.join("step-000005.icmf").exists() && a.join("final.icmf").exists());

    assert!(train(&b, 10, &[]).status.success());
    let fa = std::fs::read(a.join("final.icmf")).unwrap();
    assert_eq!(fa, std::fs::read(b.join("final.icmf")).unwrap());

    let ck5 = a.join("step-000005.icmf");
    let o = train(&c, 10, &["--resume", p(&ck5)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fa, std::fs::read(c.join("final.icmf")).unwrap());
    assert_eq!(std::fs::read_to_string(c.join("train.ndjson")).unwrap().lines().count(), 5);

    // A different seed gives a different model.
    let d = dir.path().join("d");
    assert!(train_seeded(&d, 5, 8, &[]).status.success());
    assert_ne!(std::fs::read(d.join("final.icmf")).unwrap(), std::fs::read(&ck5).unwrap());

    // Checkpoint/config mismatch names both.
    let o = icmf(&["eval", "--checkpoint", p(&a.join("final.icmf")), "--dim", "32", "--synth", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("dim: 64") && err.contains("dim: 32"), "{err}");

    // Fresh-ish model: evaluation runs and is deterministic.
    let run = || stdout(&icmf(&["eval", "--checkpoint", p(&a.join("final.icmf")), "--synth", "4", "--workers", "2"]));
    let (r1, r2) = (run(), run());
    assert!(r1.contains("NoC@85"));
    assert_eq!(r1, r2);
}

#[test]
fn unwritable_out_dir_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert_eq!(train(&blocker.join("sub"), 1, &[]).status.code(), Some(3));
}

#[test]
fn synth_then_eval_with_stubs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(icmf(&["synth", "--n", "5", "--out", p(&data), "--seed", "2"]).status.success());
    assert_eq!(std::fs::read_dir(&data).unwrap().count(), 10);

    let out = dir.path().join("eval");
    let o = icmf(&["eval", "--oracle", "--data-dir", p(&data), "--out", p(&out)]);
    assert!(o.status.success());
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!((s["noc85"].as_f64(), s["noc90"].as_f64(), s["nof90"].as_u64()), (Some(1.0), Some(1.0), Some(0)));
    assert_eq!(s["n_instances"], 5);
    assert_eq!(s["miou_curve"].as_array().unwrap().len(), 20);
    let csv = std::fs::read_to_string(out.join("records.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(1).unwrap().starts_with("synth_000,1,1,1,"));

    let o = icmf(&["eval", "--stub", "empty", "--synth", "3"]);
    let text = stdout(&o);
    let json: serde_json::Value = serde_json::from_str(&text[text.find('{').unwrap()..]).unwrap();
    assert_eq!((json["noc85"].as_f64(), json["nof85"].as_u64()), (Some(20.0), Some(3)));

    assert_eq!(icmf(&["eval", "--oracle", "--data-dir", p(&dir.path().join("missing"))]).status.code(), Some(3));
    assert_eq!(icmf(&["eval", "--synth", "2"]).status.code(), Some(2));
}

#[test]
fn seed_sources() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, args: &[&str], env: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_icmf"));
        cmd.args(["synth", "--n", "2", "--out", p(&out)]).args(args).env_remove("ICMF_SEED");
        if let Some(v) = env {
            cmd.env("ICMF_SEED", v);
        }
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(out.join("synth_000.png")).unwrap()
    };
    let flag3 = run("a", &["--seed", "3"], None);
    assert_eq!(run("b", &[], Some("3")), flag3);
    assert_eq!(run("c", &["--seed", "3"], Some("4")), flag3);
    assert_ne!(run("d", &[], Some("4")), flag3);

    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 3}"#).unwrap();
    assert_eq!(run("e", &["--config", p(&cfg)], Some("4")), flag3);
}

#[test]
fn gradcheck_outcomes() {
    let o = icmf(&["gradcheck", "--n-params", "12"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS"));

    let o = icmf(&["gradcheck", "--n-params", "12", "--corrupt-backward"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).contains("FAIL"));

    let o = icmf(&["gradcheck", "--n-params", "0"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("PASS: 0 probes"));

    assert_eq!(icmf(&["gradcheck", "--dim", "256", "--heads", "8"]).status.code(), Some(2));
}

#[test]
fn simulate_oracle_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(icmf(&["synth", "--n", "1", "--out", p(&data)]).status.success());
    let (img, gt) = (data.join("synth_000.png"), data.join("synth_000_mask.png"));

    let out = dir.path().join("sim");
    let o = icmf(&["simulate", "--oracle", "--image", p(&img), "--gt", p(&gt), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let replay: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("replay.json")).unwrap()).unwrap();
    assert_eq!(replay.as_array().unwrap().len(), 1);
    assert_eq!(replay[0]["iou"], 1.0);
    assert_eq!(std::fs::read(out.join("mask_01.png")).unwrap().len() > 0, true);

    // Replaying the emitted click file gives the same masks.
    let out2 = dir.path().join("sim2");
    let clicks = out.join("clicks.json");
    let o = icmf(&["simulate", "--oracle", "--image", p(&img), "--gt", p(&gt), "--clicks", p(&clicks), "--out", p(&out2)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(out.join("mask_01.png")).unwrap(), std::fs::read(out2.join("mask_01.png")).unwrap());

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"[{"row": 0, "col": 0, "positive": false}]"#).unwrap();
    let o = icmf(&["simulate", "--oracle", "--image", p(&img), "--gt", p(&gt), "--clicks", p(&bad), "--out", p(&out2)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("first click must be positive"));
}
