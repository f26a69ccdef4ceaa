use std::path::Path;
use std::process::{Command, Output};

fn petri(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_petri"))
        .args(args)
        .env_remove("PETRI_EMBED_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn tiny_run(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec![
        "run",
        "--output",
        out,
        "--height",
        "8",
        "--width",
        "8",
        "--agents",
        "2",
        "--population",
        "3",
        "--iterations",
        "2",
        "--set",
        "meta.world_segments=2",
        "--checkpoint-interval",
        "1",
    ];
    args.extend_from_slice(extra);
    petri(&args)
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn fixed_run_on_default_config_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = petri(&[
        "run",
        "--mode",
        "fixed",
        "--seed",
        "7",
        "--iterations",
        "1",
        "--output",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&dir.path().join("metrics.jsonl")), 4);
    assert!(dir.path().join("ckpt_t000001.bin").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("t=1/1"));
}

#[test]
fn usage_errors_exit_one() {
    let o = petri(&["run", "--config", "/definitely/not/here.json"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--help"));
    assert_eq!(code(&petri(&["run", "--no-such-flag"])), 1);
    assert_eq!(code(&petri(&["frobnicate"])), 1);
    assert_eq!(
        code(&petri(&["config-print", "--set", "meta.exploit.rho=0.9"])),
        1
    );
    assert_eq!(code(&petri(&["config-print", "--set", "meta.bogus=1"])), 1);
    assert_eq!(code(&petri(&["run", "--mode", "sideways"])), 1);
    assert_eq!(code(&petri(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"PETRICKPgarbage").unwrap();
    assert_eq!(code(&petri(&["analyze", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&petri(&["run", "--resume", bad.to_str().unwrap()])), 2);
}

#[test]
fn config_print_reflects_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.json");
    std::fs::write(
        &file,
        r#"{"seed": 5, "meta": {"population": 6, "k_nn": 3}}"#,
    )
    .unwrap();
    let o = petri(&[
        "config-print",
        "--config",
        file.to_str().unwrap(),
        "--set",
        "meta.k_nn=4",
        "--population",
        "7",
    ]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 5);
    assert_eq!(v["meta"]["population"], 7);
    assert_eq!(v["meta"]["k_nn"], 4);
    assert_eq!(v["meta"]["mode"], "pbt");

    let paper: serde_json::Value =
        serde_json::from_slice(&petri(&["config-print", "--preset", "paper"]).stdout).unwrap();
    assert_eq!(paper["meta"]["population"], 30);
    assert_eq!(paper["meta"]["iterations"], 500);
    assert_eq!(paper["meta"]["world_segments"], 12);
}

#[test]
fn analyze_and_render_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny_run(dir.path(), &["--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("ckpt_t000002.bin");

    let o = petri(&["analyze", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let analysis = dir.path().join("analysis.jsonl");
    assert_eq!(lines(&analysis), 3);
    assert_eq!(
        code(&petri(&[
            "analyze",
            ckpt.to_str().unwrap(),
            "--symbolization",
            "rgb"
        ])),
        0
    );
    assert_eq!(lines(&analysis), 6);
    let row: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(&analysis)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(row["iteration"], 2);
    for key in ["persistence", "entropy_mean", "complexity_mean"] {
        assert!(row[key].as_f64().unwrap().is_finite());
    }

    let out = dir.path().join("render");
    let o = petri(&[
        "render",
        ckpt.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--world",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("world_001_sheet.png").exists());
    let frames = out.join("world_001");
    assert!(std::fs::read_dir(&frames).unwrap().count() > 0);
    assert_eq!(
        code(&petri(&["render", ckpt.to_str().unwrap(), "--world", "9"])),
        1
    );

    let o = petri(&["analyze", frames.to_str().unwrap(), "--agents", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&frames.join("analysis.jsonl")), 1);
}

#[test]
fn resumed_cli_run_matches_uninterrupted() {
    let full = tempfile::tempdir().unwrap();
    assert_eq!(code(&tiny_run(full.path(), &["--seed", "4"])), 0);
    let part = tempfile::tempdir().unwrap();
    assert_eq!(code(&tiny_run(part.path(), &["--seed", "4"])), 0);
    // Rewind to t=1 and redo the last iteration in place.
    let ckpt = part.path().join("ckpt_t000001.bin");
    let o = petri(&["run", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.jsonl", "summary.jsonl"] {
        assert_eq!(
            std::fs::read(full.path().join(f)).unwrap(),
            std::fs::read(part.path().join(f)).unwrap(),
            "{f}"
        );
    }
}
