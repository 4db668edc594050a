use std::path::Path;
use std::process::{Command, Output};

fn counterpoint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_counterpoint")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_dataset(dir: &Path) -> String {
    let piece = |shift: i64| -> Vec<Vec<i64>> {
        (0..12).map(|t| vec![67 + (t + shift) % 5, 62 + t % 3, 55 + (t * 2 + shift) % 4, 43 + t % 6]).collect()
    };
    let json = serde_json::json!({
        "resolution": "quarter",
        "splits": {"train": [piece(0), piece(1), piece(2)], "valid": [piece(3)], "test": [piece(4), piece(5)]}
    });
    let path = dir.join("data.json");
    std::fs::write(&path, json.to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn tiny_model(dir: &Path, data: &str) -> String {
    let out = dir.join("train");
    let o = counterpoint(&[
        "train",
        "--data",
        data,
        "--outdir",
        out.to_str().unwrap(),
        "--layers",
        "3",
        "--channels",
        "4",
        "--crop-length",
        "8",
        "--batch-size",
        "2",
        "--steps",
        "4",
        "--checkpoint-every",
        "2",
        "--validation-pieces",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["train_log.jsonl", "config.json", "summary.json", "final.ckpt", "best.ckpt", "step_000002.ckpt"] {
        assert!(out.join(name).exists(), "{name}");
    }
    out.join("final.ckpt").to_str().unwrap().to_owned()
}

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let ckpt = tiny_model(dir.path(), &data);

    let sample_dir = dir.path().join("sample");
    let o = counterpoint(&[
        "sample",
        "--checkpoint",
        &ckpt,
        "--outdir",
        sample_dir.to_str().unwrap(),
        "--length",
        "6",
        "--count",
        "2",
        "--sampler",
        "gibbs-independent",
        "--trace",
        "--score-orderings",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["sample_000.mid", "sample_001.json", "sample_000_trace.jsonl", "samples.json"] {
        assert!(sample_dir.join(name).exists(), "{name}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sample_dir.join("samples.json")).unwrap()).unwrap();
    assert_eq!(summary["sampler"], "gibbs-independent");
    assert_eq!(summary["samples"][0]["evaluations"], 25);

    let inpaint_dir = dir.path().join("inpaint");
    let o = counterpoint(&[
        "inpaint",
        "--checkpoint",
        &ckpt,
        "--outdir",
        inpaint_dir.to_str().unwrap(),
        "--data",
        &data,
        "--split",
        "test",
        "--piece",
        "1",
        "--fix-voice",
        "soprano",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let frames = |name: &str| -> Vec<Vec<i64>> {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(inpaint_dir.join(name)).unwrap()).unwrap();
        serde_json::from_value(v["frames"].clone()).unwrap()
    };
    let (input, output) = (frames("input.json"), frames("inpainted.json"));
    assert_eq!(input.len(), 12);
    assert!(input.iter().zip(&output).all(|(a, b)| a[0] == b[0]), "soprano changed");
    assert!(inpaint_dir.join("inpainted.mid").exists());

    let eval_dir = dir.path().join("eval");
    let o = counterpoint(&[
        "evaluate",
        "--checkpoint",
        &ckpt,
        "--data",
        &data,
        "--orderings",
        "5",
        "--mode",
        "random",
        "--outdir",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["config"]["orderings"], 5);
    assert_eq!(report["config"]["mode"], "random");
    assert_eq!(report["per_piece"].as_array().unwrap().len(), 2);
    assert!(report["sem"].is_number());
    assert_eq!(std::fs::read(eval_dir.join("eval_report.json")).unwrap(), o.stdout);
}

#[test]
fn inpaint_partial_score() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let ckpt = tiny_model(dir.path(), &data);
    let score = dir.path().join("partial.json");
    std::fs::write(
        &score,
        r#"{"resolution":"quarter","frames":[[72,null,null,48],[71,null,null,50],[69,null,null,52]]}"#,
    )
    .unwrap();
    let out = dir.path().join("inpaint");
    let o = counterpoint(&[
        "inpaint",
        "--checkpoint",
        &ckpt,
        "--score",
        score.to_str().unwrap(),
        "--outdir",
        out.to_str().unwrap(),
        "--sampler",
        "gibbs-ancestral",
        "--rho",
        "0.5",
        "--steps",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("inpainted.json")).unwrap()).unwrap();
    let frames: Vec<Vec<i64>> = serde_json::from_value(v["frames"].clone()).unwrap();
    assert_eq!((frames[0][0], frames[0][3], frames[2][0], frames[2][3]), (72, 48, 69, 52));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("inpaint.json")).unwrap()).unwrap();
    assert_eq!(summary["fixed_cells"], 6);

    // a fixed cell must have a pitch
    let o = counterpoint(&[
        "inpaint",
        "--checkpoint",
        &ckpt,
        "--score",
        score.to_str().unwrap(),
        "--outdir",
        out.to_str().unwrap(),
        "--fix",
        "voice:alto",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn identical_arguments_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let ckpt = tiny_model(dir.path(), &data);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = counterpoint(&[
            "sample",
            "--checkpoint",
            &ckpt,
            "--outdir",
            out.to_str().unwrap(),
            "--length",
            "5",
            "--count",
            "2",
            "--seed",
            "9",
            "--sampler",
            "gibbs-ancestral",
            "--rho",
            "0.25",
            "--steps",
            "4",
            "--score-orderings",
            "2",
        ]);
        assert_eq!(code(&o), 0);
        ["sample_000.mid", "sample_001.json", "samples.json"].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
    let second = dir.path().join("train2");
    let o = counterpoint(&[
        "train",
        "--data",
        &data,
        "--outdir",
        second.to_str().unwrap(),
        "--layers",
        "3",
        "--channels",
        "4",
        "--crop-length",
        "8",
        "--batch-size",
        "2",
        "--steps",
        "4",
        "--checkpoint-every",
        "2",
        "--validation-pieces",
        "1",
    ]);
    assert_eq!(code(&o), 0);
    let first = dir.path().join("train");
    for f in ["train_log.jsonl", "final.ckpt", "summary.json"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let ckpt = tiny_model(dir.path(), &data);
    let o = counterpoint(&["sample", "--checkpoint", &ckpt, "--sampler", "gibbs-independent", "--steps", "0"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("N >= 1"));
    assert_eq!(code(&counterpoint(&["sample", "--checkpoint", "/nonexistent.ckpt"])), 1);
    assert_eq!(code(&counterpoint(&["evaluate", "--checkpoint", &ckpt, "--data", &data, "--mode", "sideways"])), 1);
    assert_eq!(code(&counterpoint(&["inpaint", "--checkpoint", &ckpt, "--data", &data, "--fix", "voice:viola"])), 1);
    assert_eq!(code(&counterpoint(&[])), 1);
    assert_eq!(code(&counterpoint(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let o =
        counterpoint(&["sample", "--checkpoint", bogus.to_str().unwrap(), "--outdir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let out = dir.path().join("t");
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({"data": data, "outdir": out, "layers": 3, "channels": 4, "crop_length": 8, "batch_size": 2, "steps": 50, "checkpoint_every": 0})
            .to_string(),
    )
    .unwrap();
    let o = counterpoint(&["train", "--config", config.to_str().unwrap(), "--steps", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn selftest_passes() {
    let o = counterpoint(&["selftest"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().count() >= 6 && text.lines().all(|l| l.starts_with("PASS")), "{text}");
}
