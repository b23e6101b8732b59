use std::path::Path;
use std::process::{Command, Output};

fn patchdiff(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchdiff"))
        .args(args)
        .env("PATCHDIFF_RUN_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

const TINY: &str = r#"
[data]
resolution = 16
count = 32

[net]
base_width = 4
depth = 1

[train]
batch_size = 2
duration_images = 12
metrics_every = 1
"#;

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

fn metric_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn oracle_passes_and_writes_run_dir() {
    let root = tempfile::tempdir().unwrap();
    let out = patchdiff(&["oracle"], root.path());
    assert!(out.status.success(), "{}", text(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS block_patch_fit_recovers_mean"), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    let runs: Vec<_> = std::fs::read_dir(root.path()).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let dir = runs[0].as_ref().unwrap().path();
    for f in ["config.toml", "manifest.json", "oracle.txt", "oracle.json"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
}

#[test]
fn unknown_flag_prints_usage() {
    let root = tempfile::tempdir().unwrap();
    let out = patchdiff(&["train", "--bogus"], root.path());
    assert!(!out.status.success());
    assert!(text(&out).contains("Usage"), "{}", text(&out));
}

#[test]
fn invalid_range_names_key() {
    let root = tempfile::tempdir().unwrap();
    let out = patchdiff(&["train", "--p", "1.7"], root.path());
    assert!(!out.status.success());
    assert!(text(&out).contains("`p`"), "{}", text(&out));
}

#[test]
fn missing_checkpoint_is_fatal() {
    let root = tempfile::tempdir().unwrap();
    let out = patchdiff(&["sample", "--checkpoint", "/nonexistent/ck.bin"], root.path());
    assert!(!out.status.success());
    assert!(text(&out).contains("does not exist"), "{}", text(&out));
}

#[test]
fn train_is_reproducible_then_samples_and_outpaints() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path());
    let a = root.path().join("a");
    let b = root.path().join("b");
    for dir in [&a, &b] {
        let out = patchdiff(
            &[
                "train",
                "--config",
                &cfg,
                "--p",
                "1.0",
                "--seed",
                "3",
                "--out",
                dir.to_str().unwrap(),
            ],
            root.path(),
        );
        assert!(out.status.success(), "{}", text(&out));
    }
    let (la, lb) = (
        metric_lines(&a.join("metrics.jsonl")),
        metric_lines(&b.join("metrics.jsonl")),
    );
    assert_eq!(la.len(), 6);
    assert_eq!(la, lb);
    assert_eq!(
        std::fs::read_to_string(a.join("config.toml")).unwrap(),
        std::fs::read_to_string(b.join("config.toml")).unwrap()
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let artifacts: Vec<&str> = manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(artifacts.contains(&"checkpoint.bin") && artifacts.contains(&"metrics.jsonl"));

    let ckpt = a.join("checkpoint.bin");
    let s1 = root.path().join("s1");
    let s2 = root.path().join("s2");
    for dir in [&s1, &s2] {
        let out = patchdiff(
            &[
                "sample",
                "--config",
                &cfg,
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--steps",
                "5",
                "--count",
                "2",
                "--out",
                dir.to_str().unwrap(),
            ],
            root.path(),
        );
        assert!(out.status.success(), "{}", text(&out));
        assert!(String::from_utf8_lossy(&out.stdout).contains("5 steps, 9 denoiser evaluations"));
    }
    for f in ["samples.png", "sample_0000.png", "sample_0001.png"] {
        assert_eq!(
            std::fs::read(s1.join(f)).unwrap(),
            std::fs::read(s2.join(f)).unwrap(),
            "{f}"
        );
    }

    let o = root.path().join("o");
    let out = patchdiff(
        &[
            "outpaint",
            "--config",
            &cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--reference",
            s1.join("sample_0000.png").to_str().unwrap(),
            "--extended",
            "24",
            "--steps",
            "4",
            "--out",
            o.to_str().unwrap(),
        ],
        root.path(),
    );
    assert!(out.status.success(), "{}", text(&out));
    assert!(o.join("outpaint.png").exists());

    let out = patchdiff(
        &[
            "eval",
            "--config",
            &cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--steps",
            "3",
            "--count",
            "6",
            "--coherence-images",
            "2",
            "--patch",
            "8",
            "--out",
            root.path().join("e").to_str().unwrap(),
        ],
        root.path(),
    );
    assert!(out.status.success(), "{}", text(&out));
    assert!(root.path().join("e/eval.json").exists());
}

#[test]
fn echoed_config_reproduces_run() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path());
    let first = root.path().join("first");
    let out = patchdiff(
        &[
            "train",
            "--config",
            &cfg,
            "--p",
            "0.5",
            "--out",
            first.to_str().unwrap(),
        ],
        root.path(),
    );
    assert!(out.status.success(), "{}", text(&out));
    let echo = first.join("config.toml");
    let second = root.path().join("second");
    let out = patchdiff(
        &[
            "train",
            "--config",
            echo.to_str().unwrap(),
            "--out",
            second.to_str().unwrap(),
        ],
        root.path(),
    );
    assert!(out.status.success(), "{}", text(&out));
    assert_eq!(
        metric_lines(&first.join("metrics.jsonl")),
        metric_lines(&second.join("metrics.jsonl"))
    );
    assert_eq!(
        std::fs::read_to_string(&echo).unwrap(),
        std::fs::read_to_string(second.join("config.toml")).unwrap()
    );
}

#[test]
fn bench_reports_rows() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path());
    let out = patchdiff(
        &[
            "bench",
            "--config",
            &cfg,
            "--ps",
            "0.5,1.0",
            "--batches",
            "2",
            "--warmup",
            "1",
            "--batch-size",
            "2",
        ],
        root.path(),
    );
    assert!(out.status.success(), "{}", text(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0.5875"), "{stdout}");
}
