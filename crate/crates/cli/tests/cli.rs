//! End-to-end tests of the `d2r` binary: the full
//! phantom -> degrade -> train-diffusion -> recover -> train-vsr -> infer ->
//! eval chain on a desk-scale configuration, plus the error-handling
//! contract (exit codes, remediation hints, --json-errors).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use d2r_core::volume::load_volume;

fn d2r() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_d2r"));
    c.env_remove("D2R_WORKSPACE");
    c
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn d2r");
    assert!(
        out.status.success(),
        "command failed ({}):\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(cmd: &mut Command, expect_code: i32) -> Output {
    let out = cmd.output().expect("spawn d2r");
    assert_eq!(
        out.status.code(),
        Some(expect_code),
        "expected exit {expect_code}:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Desk-scale run config: tiny networks, very short training budgets.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let adam = serde_json::json!({"lr": 1e-3, "beta1": 0.9, "beta2": 0.99, "eps": 1e-8});
    let cfg = serde_json::json!({
        "degrade": {
            "r": 4,
            "keep_phase": 0,
            "noise": {"alpha": 0.004, "sigma": 0.05, "seed": 0},
            "noise_inputs": true
        },
        "sde": {"t_steps": 6, "delta": 0.05},
        "dgean": {
            "n_context": 4,
            "encoder_channels": [4, 4, 8, 8, 8],
            "gaussian_embed_dim": 2,
            "gaussian_sigma": 10.0,
            "depth_embed_dim": 8,
            "attention_reduction": 4
        },
        "losses": {"lambda_ffl": 100.0, "lambda_cont": 0.1},
        "train": {
            "unet": {"base_channels": 4, "scales": 2, "time_embed_dim": 8},
            "stage1_pairs": 4,
            "stage1_patch": 16,
            "stage1": {"steps": 8, "val_every": 4, "adam": adam},
            "stage3": {
                "steps": 8, "val_every": 4, "val_windows": 2, "patch": 16,
                "adam": adam
            },
            "workers": 1
        },
        "seeds": {"stage1": 101, "stage2": 202, "stage3": 303, "infer": 404},
        "eval": {"with_fsc": false},
        "paths": {}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn full_chain_phantom_to_eval_with_arbitrary_scale_and_idempotence() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_tiny_config(dir);
    let ws = dir.join("ws");
    let gt = dir.join("gt.raw");
    let low = dir.join("low.raw");

    run_ok(d2r().args([
        "phantom",
        "--seed",
        "7",
        "--shape",
        "17,24,24",
        "--structures",
        "4",
        "--out",
        gt.to_str().unwrap(),
    ]));
    let v_gt = load_volume(&gt).unwrap();
    assert_eq!(v_gt.shape(), [17, 24, 24]);
    assert!(gt.with_extension("manifest.json").exists());

    run_ok(d2r().args([
        "degrade",
        "--config",
        config.to_str().unwrap(),
        "--input",
        gt.to_str().unwrap(),
        "--out",
        low.to_str().unwrap(),
    ]));
    let v_low = load_volume(&low).unwrap();
    assert_eq!(v_low.shape(), [5, 24, 24]);

    // Degrading again produces the byte-identical file (seeded noise).
    let bytes_before = std::fs::read(&low).unwrap();
    run_ok(d2r().args([
        "degrade",
        "--config",
        config.to_str().unwrap(),
        "--input",
        gt.to_str().unwrap(),
        "--out",
        low.to_str().unwrap(),
    ]));
    assert_eq!(bytes_before, std::fs::read(&low).unwrap());

    let ws_args = [
        "--config",
        config.to_str().unwrap(),
        "--workspace",
        ws.to_str().unwrap(),
    ];
    run_ok(d2r().args(["train-diffusion"]).args(ws_args).args([
        "--input",
        low.to_str().unwrap(),
    ]));
    assert!(ws.join("stage1/diffusion.bin").exists());

    run_ok(d2r().args(["recover"]).args(ws_args).args([
        "--input",
        low.to_str().unwrap(),
        "--workers",
        "2",
    ]));
    let recovered = ws.join("stage2/recovered.raw");
    assert_eq!(load_volume(&recovered).unwrap().shape(), [17, 24, 24]);

    // Rerun with D2R_WORKSPACE instead of --workspace: stage manifest
    // matches, so the recovered volume is reused byte-identically.
    let rec_bytes = std::fs::read(&recovered).unwrap();
    run_ok(
        d2r()
            .env("D2R_WORKSPACE", ws.to_str().unwrap())
            .args(["recover", "--config", config.to_str().unwrap()])
            .args(["--input", low.to_str().unwrap()]),
    );
    assert_eq!(rec_bytes, std::fs::read(&recovered).unwrap());

    run_ok(d2r().args(["train-vsr"]).args(ws_args));
    assert!(ws.join("stage3/dgean.bin").exists());

    // Inference at the training factor: kept slices pass through bitwise.
    let out4 = dir.join("restored_r4.raw");
    run_ok(d2r().args(["infer"]).args(ws_args).args([
        "--input",
        low.to_str().unwrap(),
        "--out",
        out4.to_str().unwrap(),
    ]));
    let v4 = load_volume(&out4).unwrap();
    assert_eq!(v4.shape(), [17, 24, 24]);
    for k in 0..5 {
        assert_eq!(
            v4.data.index_axis(ndarray::Axis(0), 4 * k),
            v_low.data.index_axis(ndarray::Axis(0), k)
        );
    }

    // Arbitrary-scale inference: a factor-3 run with the factor-4 checkpoint.
    let out3 = dir.join("restored_r3.raw");
    run_ok(d2r().args(["infer"]).args(ws_args).args([
        "--input",
        low.to_str().unwrap(),
        "--out",
        out3.to_str().unwrap(),
        "--factor",
        "3",
    ]));
    let v3 = load_volume(&out3).unwrap();
    assert_eq!(v3.shape(), [13, 24, 24]);
    assert!(v3.data.iter().all(|x| x.is_finite()));

    // Evaluation with FSC curve, CSV, and plot.
    let report = dir.join("report.json");
    let csv = dir.join("fsc.csv");
    let plot = dir.join("fsc.ppm");
    run_ok(d2r().args([
        "eval",
        "--pred",
        out4.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--fsc",
        csv.to_str().unwrap(),
        "--plot",
        plot.to_str().unwrap(),
    ]));
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(rep["psnr_xz"]["mean"].as_f64().unwrap() > 0.0);
    assert!(rep["resolution_nm"].as_f64().unwrap() > 0.0);
    // CSV rows = header + one line per shell (17^3 center cube -> 8 shells).
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(csv_text.lines().count(), 1 + 8);
    let ppm = std::fs::read(&plot).unwrap();
    assert!(ppm.starts_with(b"P6\n400 300\n255\n"));

    // Self-evaluation: SSIM exactly 1 and PSNR at the cap.
    let self_report = dir.join("self_report.json");
    run_ok(d2r().args([
        "eval",
        "--pred",
        gt.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--report",
        self_report.to_str().unwrap(),
    ]));
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&self_report).unwrap()).unwrap();
    assert!((rep["ssim_xy"]["mean"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(rep["psnr_xy"]["mean"].as_f64().unwrap(), 100.0);
}

#[test]
fn degrade_factor_one_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_tiny_config(dir);
    let gt = dir.join("gt.raw");
    run_ok(d2r().args([
        "phantom", "--seed", "1", "--shape", "16,16,16", "--out",
        gt.to_str().unwrap(),
    ]));

    let out = run_err(
        d2r().args([
            "degrade",
            "--config",
            config.to_str().unwrap(),
            "--input",
            gt.to_str().unwrap(),
            "--out",
            dir.join("low.raw").to_str().unwrap(),
            "--factor",
            "1",
        ]),
        2,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("r must be >= 2"));
}

#[test]
fn json_errors_flag_emits_machine_parseable_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_tiny_config(dir);
    let gt = dir.join("gt.raw");
    run_ok(d2r().args([
        "phantom", "--seed", "1", "--shape", "16,16,16", "--out",
        gt.to_str().unwrap(),
    ]));

    let out = run_err(
        d2r().args([
            "degrade",
            "--json-errors",
            "--config",
            config.to_str().unwrap(),
            "--input",
            gt.to_str().unwrap(),
            "--out",
            dir.join("low.raw").to_str().unwrap(),
            "--factor",
            "1",
        ]),
        2,
    );
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["kind"], "validation");
    assert!(err["error"].as_str().unwrap().contains("r must be >= 2"));
}

#[test]
fn missing_checkpoints_give_remediation_hints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_tiny_config(dir);
    let gt = dir.join("gt.raw");
    run_ok(d2r().args([
        "phantom", "--seed", "1", "--shape", "16,16,16", "--out",
        gt.to_str().unwrap(),
    ]));
    let empty_ws = dir.join("empty_ws");
    let ws_args = [
        "--config",
        config.to_str().unwrap(),
        "--workspace",
        empty_ws.to_str().unwrap(),
    ];

    let out = run_err(
        d2r().args(["recover"]).args(ws_args).args([
            "--input",
            gt.to_str().unwrap(),
        ]),
        3,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("d2r train-diffusion"));

    let out = run_err(
        d2r().args(["infer"]).args(ws_args).args([
            "--input",
            gt.to_str().unwrap(),
            "--out",
            dir.join("o.raw").to_str().unwrap(),
        ]),
        3,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("d2r train-vsr"));

    let out = run_err(d2r().args(["train-vsr"]).args(ws_args), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("d2r recover"));
}

#[test]
fn unknown_config_keys_and_missing_workspace_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_tiny_config(dir);
    let gt = dir.join("gt.raw");
    run_ok(d2r().args([
        "phantom", "--seed", "1", "--shape", "16,16,16", "--out",
        gt.to_str().unwrap(),
    ]));

    // Unknown top-level key -> validation error.
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    cfg["not_a_section"] = serde_json::json!(1);
    let bad = dir.join("bad.json");
    std::fs::write(&bad, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = run_err(
        d2r().args([
            "degrade",
            "--config",
            bad.to_str().unwrap(),
            "--input",
            gt.to_str().unwrap(),
            "--out",
            dir.join("low.raw").to_str().unwrap(),
        ]),
        2,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_section"));

    // No --workspace, no paths.workspace, no D2R_WORKSPACE -> validation.
    let out = run_err(
        d2r().args([
            "train-diffusion",
            "--config",
            config.to_str().unwrap(),
            "--input",
            gt.to_str().unwrap(),
        ]),
        2,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("workspace"));
}
