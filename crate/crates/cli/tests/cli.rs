use std::process::Command;

fn avscene() -> Command {
    Command::new(env!("CARGO_BIN_EXE_avscene"))
}

#[test]
fn synth_then_metrics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = dir.path().join("fixtures");
    let out = avscene()
        .args(["synth", "--seed", "3", "--out"])
        .arg(&fixtures)
        .output()
        .unwrap();
    assert!(out.status.success(), "synth failed: {}", String::from_utf8_lossy(&out.stderr));
    for f in ["video.ascv", "mask.ascv", "source.wav", "target.wav"] {
        assert!(fixtures.join(f).exists(), "missing fixture {f}");
    }
    assert!(fixtures.join("frames/frame_0000.png").exists());
    assert!(fixtures.join("mask/mask_0000.png").exists());

    // scoring a video against itself: self-SSIM is 1, temp_s factorizes
    let report_path = dir.path().join("report.json");
    let out = avscene()
        .arg("metrics")
        .arg("--source")
        .arg(fixtures.join("video.ascv"))
        .arg("--edited")
        .arg(fixtures.join("video.ascv"))
        .arg("--mask")
        .arg(fixtures.join("mask.ascv"))
        .arg("--target-audio")
        .arg(fixtures.join("target.wav"))
        .arg("--out")
        .arg(&report_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "metrics failed: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["ssim_fg"].as_f64().unwrap(), 1.0);
    let ts = report["temp_s"].as_f64().unwrap();
    let product = report["clip_f"].as_f64().unwrap() * report["clip_t"].as_f64().unwrap();
    assert!((ts - product).abs() < 1e-12);
}

#[test]
fn gradcheck_subcommand_passes() {
    let out = avscene().args(["gradcheck", "--seed", "11"]).output().unwrap();
    assert!(
        out.status.success(),
        "gradcheck failed: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gradient check passed"));
}

#[test]
fn edit_requires_inputs() {
    let out = avscene()
        .args(["edit", "--out", "/tmp/nowhere"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
