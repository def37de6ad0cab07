use std::path::Path;
use std::process::{Command, Output};

fn bsvsr(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_bsvsr"))
        .args(args)
        .env_remove("BSVSR_CONFIG")
        .output()
        .expect("spawn bsvsr");
    out
}

fn ok(args: &[&str]) -> String {
    let out = bsvsr(args);
    assert!(
        out.status.success(),
        "bsvsr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_degrade_train_infer_eval() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    let ckpt = run.join("model.ckpt");
    let small = [
        "--toy",
        "--set",
        "synth.height=64",
        "--set",
        "synth.width=64",
        "--set",
        "synth.frames=5",
        "--set",
        "train.phase1_steps=2",
        "--set",
        "train.total_epochs=1",
        "--set",
        "train.steps_per_epoch=2",
        "--set",
        "train.batch_size=1",
    ];
    let with = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        v.extend(small.iter().map(|s| s.to_string()));
        v
    };
    let call = |extra: &[&str]| ok(&with(extra).iter().map(String::as_str).collect::<Vec<_>>());

    call(&["synth", "--clips", "2", "--dataset", p(&data)]);
    assert!(data.join("gt/clip_001/frame_0004.png").exists());
    call(&["degrade", "--dataset", p(&data)]);
    assert!(data.join("lr/clip_000/frame_0000.png").exists());
    let manifest = std::fs::read_to_string(data.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"scale\": 4"));

    call(&[
        "train",
        "--phase",
        "full",
        "--dataset",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--output",
        p(&run),
    ]);
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 + 2);
    assert!(run.join("effective_config.toml").exists());

    let out = root.path().join("sr");
    call(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&data.join("lr/clip_000")),
        "--output",
        p(&out),
    ]);
    for t in 0..5 {
        assert!(out.join(format!("clip_000/frame_{t:04}.png")).exists());
    }
    let stats = std::fs::read_to_string(out.join("clip_000/attention.csv")).unwrap();
    assert_eq!(stats.lines().count(), 6);

    let report_dir = root.path().join("oracle");
    let text = call(&[
        "eval",
        "--dataset",
        p(&data),
        "--predictions",
        p(&data.join("gt")),
        "--output",
        p(&report_dir),
    ]);
    assert!(text.contains("bicubic"));
    let csv = std::fs::read_to_string(report_dir.join("report.csv")).unwrap();
    let oracle: Vec<&str> = csv.lines().filter(|l| l.starts_with("predictions")).collect();
    assert!(!oracle.is_empty());
    for line in oracle {
        assert!(line.contains(",99,") || line.contains(",99.0"), "{line}");
    }

    let kern = root.path().join("kernel");
    let text = call(&[
        "inspect-kernel",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&data.join("lr/clip_000")),
        "--output",
        p(&kern),
    ]);
    assert!(text.contains("fitted sigma"));
    assert!(kern.join("kernel.png").exists());
}

#[test]
fn bad_config_key_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = bsvsr(&["--set", "model.colour=3", "synth", "--dataset", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.colour"));
}

#[test]
fn missing_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bsvsr(&["eval", "--dataset", p(&dir.path().join("none")), "--predictions", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("bsvsr: "));
}
