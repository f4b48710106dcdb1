//! Criterion 10: every command with a fixed seed produces byte-identical
//! artifacts across two consecutive runs, plus the exit-code contract.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_editlab")
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("editlab_cli_acceptance_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("workdir");
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, body).expect("config");
    path
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().expect("spawn editlab")
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).expect("read_dir") {
        let entry = entry.expect("entry");
        if entry.file_type().expect("type").is_file() {
            out.insert(
                entry.file_name().to_string_lossy().to_string(),
                std::fs::read(entry.path()).expect("read"),
            );
        }
    }
    out
}

fn assert_deterministic(label: &str, args: &[&str], out_dir: &Path) {
    let first = run(args);
    assert!(
        first.status.success(),
        "{label} first run failed: {}",
        String::from_utf8_lossy(&first.stderr)
    );
    let snap1 = snapshot(out_dir);
    assert!(!snap1.is_empty(), "{label} wrote no artifacts");
    let second = run(args);
    assert!(second.status.success(), "{label} second run failed");
    let snap2 = snapshot(out_dir);
    assert_eq!(
        snap1.keys().collect::<Vec<_>>(),
        snap2.keys().collect::<Vec<_>>(),
        "{label} artifact set changed"
    );
    for (name, bytes) in &snap1 {
        assert_eq!(bytes, &snap2[name], "{label}: {name} differs between runs");
    }
}

#[test]
fn criterion_10_cli_determinism() {
    let start = Instant::now();
    let dir = workdir("det");

    // Smoke training budget so the whole suite stays in minutes.
    let train_cfg = write_config(
        &dir,
        "[train]\nsteps = 60\nbatch = 4\n\n[model]\nvariant = joint\n",
    );
    let train_out = dir.join("train");
    assert_deterministic(
        "train",
        &[
            "train",
            "--config",
            train_cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            train_out.to_str().unwrap(),
        ],
        &train_out,
    );

    let edit_out = dir.join("edit");
    assert_deterministic(
        "edit",
        &[
            "edit",
            "--backend",
            "oracle",
            "--seed",
            "7",
            "--alpha",
            "1.0",
            "--out",
            edit_out.to_str().unwrap(),
        ],
        &edit_out,
    );

    let sweep_cfg = write_config(&dir.join("train"), "[sweep]\nalphas = 0,0.5,1\n");
    let sweep_out = dir.join("sweep");
    assert_deterministic(
        "sweep",
        &[
            "sweep",
            "--backend",
            "oracle",
            "--config",
            sweep_cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            sweep_out.to_str().unwrap(),
        ],
        &sweep_out,
    );
    // Sweep grid width equals the ladder length in tiles.
    let ppm = std::fs::read(sweep_out.join("sweep.ppm")).expect("sweep.ppm");
    let header = String::from_utf8_lossy(&ppm[..20]).to_string();
    assert!(header.contains("48 16"), "expected 3 tiles of 16px, got {header}");

    let sde_cfg = write_config(&dir, "[sde]\nsamples = 4\n");
    let sde_out = dir.join("sde");
    assert_deterministic(
        "sde",
        &[
            "sde",
            "--backend",
            "oracle",
            "--config",
            sde_cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            sde_out.to_str().unwrap(),
        ],
        &sde_out,
    );

    let ckpt = train_out.join("model");
    let probe_cfg = write_config(
        &dir,
        &format!(
            "[model]\ncheckpoint = {}\n\n[probe]\nreps = 1\nshuffles = 5\n",
            ckpt.display()
        ),
    );
    let probe_out = dir.join("probe");
    assert_deterministic(
        "probe",
        &[
            "probe",
            "--backend",
            "joint",
            "--config",
            probe_cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            probe_out.to_str().unwrap(),
        ],
        &probe_out,
    );

    let bench_cfg = write_config(&dir, "[bench]\nrecords = 4\n");
    let bench_out = dir.join("bench");
    assert_deterministic(
        "bench",
        &[
            "bench",
            "--backend",
            "oracle",
            "--config",
            bench_cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            bench_out.to_str().unwrap(),
        ],
        &bench_out,
    );

    let props_cfg = write_config(&dir, "[props]\ntrials = 100000\nms = 1,4\nds = 4,16\nalphas = 1,2\n");
    let props_out = dir.join("props");
    assert_deterministic(
        "props",
        &[
            "props",
            "--config",
            props_cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            props_out.to_str().unwrap(),
        ],
        &props_out,
    );

    println!(
        "[criterion 10] PASS - all seven commands byte-identical across consecutive runs (runtime {:.2}s)",
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn exit_code_contract() {
    let dir = workdir("exit");

    // Semantic edit failure: oracle at a mid degree misses its threshold on
    // both paths but still writes the trace, exit code 2.
    let out = dir.join("fail");
    let result = run(&[
        "edit",
        "--backend",
        "oracle",
        "--seed",
        "3",
        "--alpha",
        "0.3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(2), "expected semantic-failure exit");
    assert!(out.join("trace.json").exists(), "trace must be written on failure");
    assert!(out.join("edited.ppm").exists());

    // Unknown attribute: exit 1 and the message names the valid ones.
    let bad_cfg = write_config(&dir, "[edit]\nattribute = flavor\n");
    let result = run(&[
        "edit",
        "--backend",
        "oracle",
        "--config",
        bad_cfg.to_str().unwrap(),
        "--out",
        dir.join("bad").to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("shape") && stderr.contains("brightness"), "stderr: {stderr}");

    // Missing checkpoint: exit 1 with the path in the message.
    let result = run(&[
        "edit",
        "--backend",
        "joint",
        "--checkpoint",
        "/nonexistent/model",
        "--out",
        dir.join("none").to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("/nonexistent/model"), "stderr: {stderr}");

    // Bad flag values: exit 1.
    let result = run(&["edit", "--backend", "oracle", "--alpha", "soup"]);
    assert_eq!(result.status.code(), Some(1));
}
