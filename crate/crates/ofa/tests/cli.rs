//! CLI contract tests: exit codes, the run.json-first rule, and the
//! matrix-dump interface.

use std::process::Command;

fn ofa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ofa"))
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = ofa().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "stderr: {stderr}");
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    // Unknown override key.
    let out = ofa()
        .args(["synth", "--out", tmp.path().to_str().unwrap(), "--set", "synth.bogus=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // Invalid ratios caught by validation.
    let out = ofa()
        .args([
            "train",
            "--out",
            tmp.path().to_str().unwrap(),
            "--set",
            "data.ratios=[0.5,0.2,0.2]",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ofa()
        .args([
            "train",
            "--out",
            tmp.path().to_str().unwrap(),
            "--set",
            "data.manifest=/nonexistent/manifest.json",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    // run.json was still written first.
    assert!(tmp.path().join("run.json").exists());
}

#[test]
fn synth_writes_manifest_and_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("data");
    let out = ofa()
        .args([
            "synth",
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "9",
            "--set",
            "synth.count=6",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("manifest.json").exists());
    assert!(out_dir.join("sample_0000.vvol").exists());

    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 9);
    assert_eq!(run["synth"]["count"], 6);

    // Re-running with the resolved config reproduces the dataset bytes.
    let out_dir2 = tmp.path().join("data2");
    let out = ofa()
        .args([
            "synth",
            "--config",
            out_dir.join("run.json").to_str().unwrap(),
            "--out",
            out_dir2.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    for name in ["manifest.json", "sample_0000.vvol", "sample_0005_mask.vvol"] {
        assert_eq!(
            std::fs::read(out_dir.join(name)).unwrap(),
            std::fs::read(out_dir2.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn opam_dumps_matrix_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = ofa()
        .args(["synth", "--out", data.to_str().unwrap(), "--set", "synth.count=2"])
        .output()
        .unwrap();
    assert!(out.status.success());

    let opam_out = tmp.path().join("opam");
    let out = ofa()
        .args([
            "opam",
            "--mask",
            data.join("sample_0000_mask.vvol").to_str().unwrap(),
            "--out",
            opam_out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let (n, m) = ofa::vvol::load_matrix(&opam_out.join("opam_m.vmat")).unwrap();
    assert_eq!(n, 27);
    assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
    let (n2, t) = ofa::vvol::load_matrix(&opam_out.join("opam_mprime.vmat")).unwrap();
    assert_eq!(n2, 27);
    for row in t.chunks_exact(27) {
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
}

#[test]
fn grad_check_subcommand_reports_and_exits_0() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ofa()
        .args([
            "grad-check",
            "--out",
            tmp.path().to_str().unwrap(),
            "--set",
            "vit.embed_dim=16",
            "--set",
            "vit.layers=1",
            "--set",
            "vit.heads=2",
            "--set",
            "vit.mlp_ratio=2.0",
            "--set",
            "vit.input_dims=[8,8,8]",
            "--set",
            "vit.patch_size=[4,4,4]",
            "--set",
            "train.alpha=100",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("gradcheck.json")).unwrap())
            .unwrap();
    assert!(report["max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn seed_override_changes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (dir, seed) in [(&a, "1"), (&b, "2")] {
        let out = ofa()
            .args([
                "synth",
                "--out",
                dir.to_str().unwrap(),
                "--seed",
                seed,
                "--set",
                "synth.count=2",
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    assert_ne!(
        std::fs::read(a.join("sample_0000.vvol")).unwrap(),
        std::fs::read(b.join("sample_0000.vvol")).unwrap()
    );
}

#[test]
fn full_pipeline_smoke() {
    // synth -> train -> eval -> rollout on a tiny dataset, via the binary.
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = |args: &[&str]| {
        let out = ofa().args(args).output().unwrap();
        assert!(
            out.status.success(),
            "args {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    };
    run(&["synth", "--out", data.to_str().unwrap(), "--seed", "5", "--set", "synth.count=20"]);
    let train_out = tmp.path().join("train");
    let manifest_arg = format!("data.manifest={}", data.join("manifest.json").display());
    run(&[
        "train",
        "--out",
        train_out.to_str().unwrap(),
        "--seed",
        "5",
        "--set",
        &manifest_arg,
        "--set",
        "data.ratios=[0.6,0.2,0.2]",
        "--set",
        "train.epochs=2",
        "--set",
        "train.alpha=100",
    ]);
    assert!(train_out.join("best.ckpt").exists());
    assert!(train_out.join("epochs.jsonl").exists());

    let eval_out = tmp.path().join("eval");
    run(&[
        "eval",
        "--out",
        eval_out.to_str().unwrap(),
        "--seed",
        "5",
        "--set",
        &manifest_arg,
        "--set",
        "data.ratios=[0.6,0.2,0.2]",
        "--set",
        &format!("eval.checkpoint={}", train_out.join("best.ckpt").display()),
    ]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["threshold_source"], "val");
    assert!(eval_out.join("results.csv").exists());

    let rollout_out = tmp.path().join("rollout");
    run(&[
        "rollout",
        "--out",
        rollout_out.to_str().unwrap(),
        "--set",
        &format!("rollout.checkpoint={}", train_out.join("best.ckpt").display()),
        "--set",
        &format!("rollout.volume={}", data.join("sample_0000.vvol").display()),
        "--set",
        &format!("rollout.mask={}", data.join("sample_0000_mask.vvol").display()),
    ]);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(rollout_out.join("rollout.json")).unwrap())
            .unwrap();
    let mass = record["organ_attention_mass"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mass));
    assert!(rollout_out.join("heatmap.vvol").exists());
}
