//! End-to-end command tests: the binary is driven exactly as a user would,
//! through argv, files on disk, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use unobs_core::hsio::{save_hsi, HyperCube};

fn unobs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unobs"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal expected")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn config_rejects_unknown_keys_and_architecture_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");

    write(&cfg, "no_such_key = 5\n");
    let out = unobs(&["synth-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "unknown key: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    write(&cfg, "f = 3\n");
    let out = unobs(&["synth-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "factor mismatch: {}", String::from_utf8_lossy(&out.stderr));

    write(&cfg, "seed = notanumber\n");
    let out = unobs(&["synth-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    // Comments and blank lines are fine; values may carry trailing comments.
    write(&cfg, "# comment only\n\nseed = 7 # trailing\n");
    let out = unobs(&["oracle-check", "--suite", "metrics", "--seed", "1"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn oracle_check_reports_a_stable_schema_and_passes() {
    for suite in ["ssf", "manifold", "metrics"] {
        let out = unobs(&["oracle-check", "--suite", suite, "--seed", "1"]);
        assert_eq!(code(&out), 0, "suite {suite}: {}", String::from_utf8_lossy(&out.stderr));
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).expect("valid JSON");
        assert_eq!(v["suite"], suite);
        let checks = v["checks"].as_array().expect("checks array");
        assert!(!checks.is_empty());
        for c in checks {
            assert!(c["name"].is_string());
            assert!(c["pass"].as_bool().expect("pass is a bool"));
            assert!(c["value"].is_number());
            assert!(c["tol"].is_number());
        }
    }
}

#[test]
fn missing_inputs_exit_with_the_format_code() {
    let out = unobs(&["reconstruct", "--rgb", "/nonexistent/x.hsc1", "--out", "/tmp/never.hsc1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn relight_rejects_a_blind_channel_as_a_domain_failure() {
    let dir = tempfile::tempdir().unwrap();
    // Three-band camera whose blue row is zero everywhere the illuminant
    // has power: the re-exposure gain divides by zero response.
    let ssf = dir.path().join("ssf.csv");
    write(
        &ssf,
        "wavelength,r,g,b\n400,0.0,0.0,1.0\n500,0.0,1.0,0.0\n600,1.0,0.0,0.0\n700,1.0,1.0,0.0\n",
    );
    let spike = dir.path().join("spike.csv");
    write(&spike, "wavelength,power\n400,0\n500,1\n600,1\n700,1\n");
    let flat = dir.path().join("flat.csv");
    write(&flat, "wavelength,power\n400,1\n500,1\n600,1\n700,1\n");

    let rgb_path = dir.path().join("in.hsc1");
    let rgb = HyperCube::rgb(4, 4, vec![0.5; 48]).unwrap();
    save_hsi(&rgb, &rgb_path).unwrap();

    let out = unobs(&[
        "relight",
        "--rgb",
        rgb_path.to_str().unwrap(),
        "--method",
        "rgb-re",
        "--illum",
        spike.to_str().unwrap(),
        "--target-illum",
        flat.to_str().unwrap(),
        "--ssf",
        ssf.to_str().unwrap(),
        "--out",
        dir.path().join("out.hsc1").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // Missing per-method flags are an input error, not a domain one.
    let out = unobs(&[
        "relight",
        "--rgb",
        rgb_path.to_str().unwrap(),
        "--method",
        "rgb-re",
        "--out",
        dir.path().join("out2.hsc1").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn pipeline_commands_compose_and_rerun_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("ckpt");
    let cfg = dir.path().join("run.cfg");
    write(
        &cfg,
        &format!(
            "data_dir = {}\nckpt_dir = {}\nseed = 0\nnx = 16\nny = 16\n\
             train_count = 6\ntest_count = 1\nmanifold_dims = 3\n\
             spaae_iters = 60\nstage1_iters = 40\nuldm_iters = 40\n\
             rgb_pretrain_iters = 0\nuldm_lr = 1e-3\nbatch = 4\n\
             spaae_holdout = 2\nspaae_target_psnr = 5\n",
            data.display(),
            ckpt.display()
        ),
    );
    let cfg = cfg.to_str().unwrap();

    // Data prep is idempotent.
    assert_eq!(code(&unobs(&["synth-data", "--config", cfg])), 0);
    let cube0 = std::fs::read(data.join("train/cube_000.hsc1")).unwrap();
    assert_eq!(code(&unobs(&["synth-data", "--config", cfg])), 0);
    assert_eq!(cube0, std::fs::read(data.join("train/cube_000.hsc1")).unwrap());

    // Stage order is enforced.
    assert_eq!(code(&unobs(&["train", "--stage", "uldm", "--config", cfg])), 3);
    assert_eq!(code(&unobs(&["train", "--stage", "speuae", "--config", cfg])), 3);

    for stage in ["spaae", "speuae", "uldm"] {
        let out = unobs(&["train", "--stage", stage, "--config", cfg]);
        assert_eq!(code(&out), 0, "stage {stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for artifact in
        ["spaae.nnw", "speuae.nnw", "uldm.nnw", "spaae_loss.csv", "speuae_loss.csv", "uldm_loss.csv"]
    {
        assert!(ckpt.join(artifact).is_file(), "missing {artifact}");
    }
    let loss = std::fs::read_to_string(ckpt.join("spaae_loss.csv")).unwrap();
    assert!(loss.starts_with("iter,loss\n"));
    assert!(loss.lines().count() > 1);

    // Retraining a stage with the same seed reproduces the checkpoint.
    let spaae_bytes = std::fs::read(ckpt.join("spaae.nnw")).unwrap();
    assert_eq!(code(&unobs(&["train", "--stage", "spaae", "--config", cfg])), 0);
    assert_eq!(spaae_bytes, std::fs::read(ckpt.join("spaae.nnw")).unwrap());

    // Render a truth cube to RGB, reconstruct it, and evaluate.
    let truth = data.join("test/cube_000.hsc1");
    let rgb = dir.path().join("scene.hsc1");
    let ssf = data.join("ssf.csv");
    let out = unobs(&[
        "hsi2rgb",
        "--hsi",
        truth.to_str().unwrap(),
        "--ssf",
        ssf.to_str().unwrap(),
        "--out",
        rgb.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("scene.png").is_file());

    let est = dir.path().join("est.hsc1");
    let reconstruct = [
        "reconstruct",
        "--rgb",
        rgb.to_str().unwrap(),
        "--ckpt-dir",
        ckpt.to_str().unwrap(),
        "--samples",
        "2",
        "--seed",
        "9",
        "--out",
        est.to_str().unwrap(),
        "--ref",
        truth.to_str().unwrap(),
    ];
    let out = unobs(&reconstruct);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval = std::fs::read_to_string(dir.path().join("est.eval.csv")).unwrap();
    assert!(eval.starts_with("image,psnr,ssim,sam\n"));
    let first = std::fs::read(&est).unwrap();

    // Same command, and a single-threaded run, both reproduce the bytes.
    assert_eq!(code(&unobs(&reconstruct)), 0);
    assert_eq!(first, std::fs::read(&est).unwrap());
    let mut serial: Vec<&str> = vec!["--threads", "1"];
    serial.extend_from_slice(&reconstruct);
    assert_eq!(code(&unobs(&serial)), 0);
    assert_eq!(first, std::fs::read(&est).unwrap());

    // Relight through the trained reconstructor; artifacts land next to out.
    let illum_a = dir.path().join("a.csv");
    let illum_b = dir.path().join("b.csv");
    let mut a_text = String::from("wavelength,power\n");
    let mut b_text = String::from("wavelength,power\n");
    for i in 0..31 {
        let wl = 400 + 10 * i;
        a_text.push_str(&format!("{wl},1.0\n"));
        b_text.push_str(&format!("{wl},{}\n", 0.4 + 0.02 * i as f64));
    }
    write(&illum_a, &a_text);
    write(&illum_b, &b_text);
    let relit = dir.path().join("relit.hsc1");
    let out = unobs(&[
        "relight",
        "--rgb",
        rgb.to_str().unwrap(),
        "--method",
        "uldm",
        "--illum",
        illum_a.to_str().unwrap(),
        "--target-illum",
        illum_b.to_str().unwrap(),
        "--ssf",
        ssf.to_str().unwrap(),
        "--ckpt-dir",
        ckpt.to_str().unwrap(),
        "--samples",
        "2",
        "--out",
        relit.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("relit.png").is_file());
    assert!(dir.path().join("relit_sr.hsc1").is_file());

    // A reconstruction input whose extent the codec cannot tile is an input
    // error.
    let odd = dir.path().join("odd.hsc1");
    save_hsi(&HyperCube::rgb(10, 10, vec![0.3; 300]).unwrap(), &odd).unwrap();
    let out = unobs(&[
        "reconstruct",
        "--rgb",
        odd.to_str().unwrap(),
        "--ckpt-dir",
        ckpt.to_str().unwrap(),
        "--out",
        dir.path().join("never.hsc1").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}
