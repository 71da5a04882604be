//! End-to-end runs of the binary: exit codes, file outputs, determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;

fn signpos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signpos"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn simulate(dir: &Path, seed: &str, config: Option<&Path>) {
    let out_s = dir.to_str().unwrap();
    let mut args = vec!["simulate", "--out", out_s, "--seed", seed];
    let cfg_s;
    if let Some(c) = config {
        cfg_s = c.to_str().unwrap().to_string();
        args.extend(["--config", &cfg_s]);
        let out = signpos(&args);
        assert_code(&out, 0);
    } else {
        let out = signpos(&args);
        assert_code(&out, 0);
    }
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn closed_loop_roundtrip_zero_noise() {
    let dir = TempDir::new().unwrap();
    simulate(dir.path(), "5", None);
    let run_dir = dir.path().join("run");
    let out = signpos(&[
        "triangulate",
        "--poses",
        path_str(&dir.path().join("poses.csv")),
        "--gps",
        path_str(&dir.path().join("gps.csv")),
        "--detections",
        path_str(&dir.path().join("detections.csv")),
        "--calibration",
        path_str(&dir.path().join("calibration.json")),
        "--out",
        path_str(&run_dir),
        "--mode",
        "full",
    ]);
    assert_code(&out, 0);
    for f in ["map.json", "relative.json", "failures.json"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }

    let report_path = dir.path().join("report.json");
    let out = signpos(&[
        "evaluate",
        "--map",
        path_str(&run_dir.join("map.json")),
        "--rel",
        path_str(&run_dir.join("relative.json")),
        "--gt-signs",
        path_str(&dir.path().join("gt_signs.csv")),
        "--ref-poses",
        path_str(&dir.path().join("gt_poses.csv")),
        "--est-poses",
        path_str(&dir.path().join("poses.csv")),
        "--out",
        path_str(&report_path),
    ]);
    assert_code(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["signs"]["abs_mean"].as_f64().unwrap() < 1e-6);
    assert!(report["signs"]["e_f"].as_f64().unwrap() < 1e-6);
    assert!(report["ate"]["full"].as_f64().unwrap() < 1e-6);
    assert!(report["signs"]["m"].as_u64().unwrap() >= 10);

    // Re-evaluating the saved run is byte-identical.
    let again = dir.path().join("report2.json");
    let out = signpos(&[
        "evaluate",
        "--map",
        path_str(&run_dir.join("map.json")),
        "--rel",
        path_str(&run_dir.join("relative.json")),
        "--gt-signs",
        path_str(&dir.path().join("gt_signs.csv")),
        "--ref-poses",
        path_str(&dir.path().join("gt_poses.csv")),
        "--est-poses",
        path_str(&dir.path().join("poses.csv")),
        "--out",
        path_str(&again),
    ]);
    assert_code(&out, 0);
    assert_eq!(fs::read(&report_path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn triangulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    simulate(dir.path(), "11", None);
    let mut maps = Vec::new();
    for name in ["a", "b"] {
        let run_dir = dir.path().join(name);
        let out = signpos(&[
            "triangulate",
            "--poses",
            path_str(&dir.path().join("poses.csv")),
            "--gps",
            path_str(&dir.path().join("gps.csv")),
            "--detections",
            path_str(&dir.path().join("detections.csv")),
            "--calibration",
            path_str(&dir.path().join("calibration.json")),
            "--out",
            path_str(&run_dir),
        ]);
        assert_code(&out, 0);
        maps.push(fs::read(run_dir.join("map.json")).unwrap());
    }
    assert_eq!(maps[0], maps[1]);
}

#[test]
fn simulate_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    simulate(a.path(), "21", None);
    simulate(b.path(), "21", None);
    for f in ["poses.csv", "gps.csv", "detections.csv", "gt_signs.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "file {f} differs between identical seeds"
        );
    }
}

#[test]
fn detection_of_unknown_frame_is_fatal_with_frame_named() {
    let dir = TempDir::new().unwrap();
    simulate(dir.path(), "7", None);
    let det = dir.path().join("detections.csv");
    let mut text = fs::read_to_string(&det).unwrap();
    text.push_str("99999,0,stop,600.0,200.0\n");
    fs::write(&det, text).unwrap();
    let out = signpos(&[
        "triangulate",
        "--poses",
        path_str(&dir.path().join("poses.csv")),
        "--gps",
        path_str(&dir.path().join("gps.csv")),
        "--detections",
        path_str(&det),
        "--calibration",
        path_str(&dir.path().join("calibration.json")),
        "--out",
        path_str(&dir.path().join("run")),
    ]);
    assert_code(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("99999"), "stderr: {stderr}");
}

#[test]
fn schema_violation_reports_file_and_line() {
    let dir = TempDir::new().unwrap();
    simulate(dir.path(), "7", None);
    let gps = dir.path().join("gps.csv");
    let mut lines: Vec<String> = fs::read_to_string(&gps)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    lines[3] = "3,999.0,8.4,100".to_string(); // latitude out of range
    fs::write(&gps, lines.join("\n")).unwrap();
    let out = signpos(&[
        "triangulate",
        "--poses",
        path_str(&dir.path().join("poses.csv")),
        "--gps",
        path_str(&gps),
        "--detections",
        path_str(&dir.path().join("detections.csv")),
        "--calibration",
        path_str(&dir.path().join("calibration.json")),
        "--out",
        path_str(&dir.path().join("run")),
    ]);
    assert_code(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gps.csv:4"), "stderr: {stderr}");
}

#[test]
fn turns_distinguishes_straight_from_curvy() {
    let dir = TempDir::new().unwrap();

    // Straight track: constant longitude steps.
    let mut straight = String::from("frame_id,lat,lon,alt\n");
    for i in 0..100 {
        straight.push_str(&format!("{i},49.0,{},112.0\n", 8.42 + 1e-5 * i as f64));
    }
    let s_path = dir.path().join("straight.csv");
    fs::write(&s_path, straight).unwrap();
    let out = signpos(&[
        "turns",
        "--gps",
        path_str(&s_path),
        "--out",
        path_str(&dir.path().join("turns.json")),
    ]);
    assert_code(&out, 3);

    // Simulated curvy journey has turns.
    simulate(dir.path(), "3", None);
    let t_path = dir.path().join("turns.json");
    let out = signpos(&[
        "turns",
        "--gps",
        path_str(&dir.path().join("gps.csv")),
        "--out",
        path_str(&t_path),
        "--rdp-epsilon",
        "2.0",
    ]);
    assert_code(&out, 0);
    let turns: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&t_path).unwrap()).unwrap();
    assert!(!turns["segments"].as_array().unwrap().is_empty());
}

#[test]
fn sweep_writes_grids_and_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("config.toml");
    fs::write(
        &cfg,
        r#"
[sweep]
mode = "one-at-a-time"
groups = ["focal", "distortion"]
range_pct = [-15.0, 0.0, 15.0]
repeats = 1
aggregate = "min"
joint_distortion = true
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("sweep");
    let out = signpos(&[
        "sweep",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_dir),
        "--seed",
        "13",
    ]);
    assert_code(&out, 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    let grids = manifest["grids"].as_array().unwrap();
    assert_eq!(grids.len(), 2);
    for grid in grids {
        let file = out_dir.join(grid["file"].as_str().unwrap());
        let text = fs::read_to_string(&file).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "group1_pct,group2_pct,score,failed_signs,repeats"
        );
        assert_eq!(lines.count(), 3);
    }
}

#[test]
fn map_records_carry_the_exact_schema() {
    let dir = TempDir::new().unwrap();
    simulate(dir.path(), "9", None);
    let run_dir = dir.path().join("run");
    let out = signpos(&[
        "triangulate",
        "--poses",
        path_str(&dir.path().join("poses.csv")),
        "--gps",
        path_str(&dir.path().join("gps.csv")),
        "--detections",
        path_str(&dir.path().join("detections.csv")),
        "--calibration",
        path_str(&dir.path().join("calibration.json")),
        "--out",
        path_str(&run_dir),
    ]);
    assert_code(&out, 0);
    let map: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("map.json")).unwrap()).unwrap();
    let record = &map.as_array().unwrap()[0];
    let mut keys: Vec<&str> = record
        .as_object()
        .unwrap()
        .keys()
        .map(|k| k.as_str())
        .collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        vec![
            "class",
            "frames",
            "lat",
            "lon",
            "mode",
            "residual_px",
            "sign_id",
            "xyz"
        ]
    );
    assert_eq!(record["xyz"].as_array().unwrap().len(), 3);
}

/// The CLI evaluation must equal the metrics computed in process from the
/// same bundle.
#[test]
fn evaluate_matches_in_process_metrics() {
    use signpos::metrics::{sign_errors, SignGroundTruth, MATCH_GATE_M};
    use signpos::pipeline::{run_triangulation, PipelineOptions};
    use signpos::triangulate::TrajectoryMode;

    let dir = TempDir::new().unwrap();
    simulate(dir.path(), "31", None);
    let run_dir = dir.path().join("run");
    let out = signpos(&[
        "triangulate",
        "--poses",
        path_str(&dir.path().join("poses.csv")),
        "--gps",
        path_str(&dir.path().join("gps.csv")),
        "--detections",
        path_str(&dir.path().join("detections.csv")),
        "--calibration",
        path_str(&dir.path().join("calibration.json")),
        "--out",
        path_str(&run_dir),
        "--mode",
        "full",
    ]);
    assert_code(&out, 0);
    let report_path = dir.path().join("report.json");
    let out = signpos(&[
        "evaluate",
        "--map",
        path_str(&run_dir.join("map.json")),
        "--rel",
        path_str(&run_dir.join("relative.json")),
        "--gt-signs",
        path_str(&dir.path().join("gt_signs.csv")),
        "--ref-poses",
        path_str(&dir.path().join("gt_poses.csv")),
        "--out",
        path_str(&report_path),
    ]);
    assert_code(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();

    // In-process oracle over the same files.
    let poses = signpos::io::load_poses(&dir.path().join("poses.csv")).unwrap();
    let fixes = signpos::io::load_gps(&dir.path().join("gps.csv")).unwrap();
    let detections = signpos::io::load_detections(&dir.path().join("detections.csv")).unwrap();
    let (calib, _) = signpos::io::load_calibration(&dir.path().join("calibration.json")).unwrap();
    let reference = signpos::io::load_poses(&dir.path().join("gt_poses.csv")).unwrap();
    let ref_frames: Vec<i64> = reference.iter().map(|p| p.frame_id()).collect();
    let gt: Vec<SignGroundTruth> = signpos::io::load_gt_signs(&dir.path().join("gt_signs.csv"))
        .unwrap()
        .into_iter()
        .map(|g| g.with_relatives_from(&reference, &ref_frames))
        .collect();
    let opts = PipelineOptions {
        mode: TrajectoryMode::Full,
        ..Default::default()
    };
    let run = run_triangulation(&poses, &fixes, &detections, &calib, &opts).unwrap();
    let expected = sign_errors(&run.triangulated(), &gt, MATCH_GATE_M).unwrap();

    assert_eq!(
        report["signs"]["m"].as_u64().unwrap() as usize,
        expected.triangulated
    );
    assert_eq!(
        report["signs"]["matched"].as_u64().unwrap() as usize,
        expected.matched
    );
    // The binary and this test instantiate the generic numerics in separate
    // compilation units, which may differ in the last ulp; compare at a
    // physically meaningless tolerance instead of bitwise.
    let got_abs = report["signs"]["abs_mean"].as_f64().unwrap();
    assert!(
        (got_abs - expected.abs_mean).abs() <= 1e-6,
        "cli {got_abs:e} vs in-process {:e}",
        expected.abs_mean
    );
    let got_ef = report["signs"]["e_f"].as_f64().unwrap();
    let want_ef = expected.rel_mean_full.unwrap();
    assert!((got_ef - want_ef).abs() <= 1e-6);
}

/// The turns subcommand must reproduce the in-process turn extraction.
#[test]
fn turns_match_in_process_extraction() {
    use nalgebra::Vector2;
    use signpos::align::turn_segments_from_track;
    use signpos::geo::{to_mercator, MercatorRef};

    let dir = TempDir::new().unwrap();
    simulate(dir.path(), "13", None);
    let t_path = dir.path().join("turns.json");
    let out = signpos(&[
        "turns",
        "--gps",
        path_str(&dir.path().join("gps.csv")),
        "--out",
        path_str(&t_path),
        "--rdp-epsilon",
        "2.5",
        "--turn-window",
        "20",
    ]);
    assert_code(&out, 0);
    let turns: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&t_path).unwrap()).unwrap();

    let fixes = signpos::io::load_gps(&dir.path().join("gps.csv")).unwrap();
    let mercator = MercatorRef::new(fixes[0].geo.lat()).unwrap();
    let frame_ids: Vec<i64> = fixes.iter().map(|f| f.frame_id).collect();
    let planar: Vec<Vector2<f64>> = fixes
        .iter()
        .map(|f| to_mercator(&f.geo, &mercator))
        .collect();
    let expected = turn_segments_from_track(&frame_ids, &planar, 2.5, 20).unwrap();
    let got: Vec<(i64, i64)> = turns["segments"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| (s[0].as_i64().unwrap(), s[1].as_i64().unwrap()))
        .collect();
    assert_eq!(got, expected);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("config.toml");
    fs::write(&cfg, "[pipeline]\nmoed = \"full\"\n").unwrap();
    let out = signpos(&[
        "simulate",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&dir.path().join("x")),
        "--seed",
        "1",
    ]);
    assert_code(&out, 2);
}

#[test]
fn scenario_section_drives_simulation() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("config.toml");
    fs::write(
        &cfg,
        r#"
[scenario]
seed = 4
origin_lat_deg = 48.5
origin_lon_deg = 9.1
path = [[0.0, 0.0], [150.0, 10.0], [170.0, 120.0], [300.0, 150.0]]
speed_mps = 8.0
frame_rate_hz = 10.0
camera_height_m = 1.6
n_signs = 6
lateral_offset_range_m = [2.0, 4.0]
height_range_m = [1.0, 3.0]
max_detection_range_m = 40.0
pixel_noise_sigma = 0.5
gps_noise_sigma = 0.25
pose_drift_rad_per_m = 0.0001

[scenario.calibration]
fx = 960.115
fy = 954.891
cx = 694.792
cy = 240.355
width = 1392
height = 512
lambda1 = -0.363
lambda2 = 0.151
"#,
    )
    .unwrap();
    simulate(dir.path(), "4", Some(&cfg));
    let scn: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("scenario.json")).unwrap())
            .unwrap();
    assert_eq!(scn["n_signs"].as_u64().unwrap(), 6);
    assert_eq!(scn["origin_lat_deg"].as_f64().unwrap(), 48.5);
    let gt = fs::read_to_string(dir.path().join("gt_signs.csv")).unwrap();
    assert_eq!(gt.lines().count(), 7); // header + 6 signs
}
