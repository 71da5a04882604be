//! File formats of the pipeline boundary.
//!
//! CSV inputs: poses (`frame_id,tx,ty,tz,qx,qy,qz,qw`, world-from-camera),
//! GPS (`frame_id,lat,lon,alt`), detections (`frame_id,sign_id,class,u,v`),
//! ground-truth signs (`sign_id,class,x,y,z` in the journey's Mercator
//! frame). JSON: calibration, output map, failure and relative-position
//! records, evaluation reports, sweep manifests. Sweep grids are CSV
//! (`group1_pct,group2_pct,score,failed_signs,repeats`).
//!
//! Schema violations are reported with file and line. All writes go through
//! a temp-file-then-rename so partial outputs never exist.

use crate::align::FramePose;
use crate::camera::{Calibration, CalibrationFile, PixelPoint};
use crate::geo::{GeoPoint, GpsFix};
use crate::metrics::{Ate5, ErrorReport, SignGroundTruth};
use crate::pipeline::SignFailure;
use crate::synth::{ScenarioSpec, SweepGrid, SweepSpec};
use crate::triangulate::{SignObservation, TriangulatedSign};
use nalgebra::{Point3, UnitQuaternion};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

impl IoError {
    fn file(path: &Path, message: impl ToString) -> Self {
        Self::File {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    fn schema(path: &Path, line: u64, message: impl ToString) -> Self {
        Self::Schema {
            path: path.to_path_buf(),
            line,
            message: message.to_string(),
        }
    }
}

/// Writes `bytes` to `path` atomically: temp file in the same directory,
/// then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
    }
    fs::write(&tmp, bytes).map_err(|e| IoError::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| IoError::file(path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| IoError::file(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_to_string(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::file(path, e))
}

fn csv_line(err: &csv::Error) -> u64 {
    match err.position() {
        Some(pos) => pos.line(),
        None => 0,
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>, IoError> {
    let file = fs::File::open(path).map_err(|e| IoError::file(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file))
}

fn csv_to_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    Ok(w.into_inner().expect("writing to Vec cannot fail"))
}

// ---- calibration ----------------------------------------------------------

pub fn load_calibration(path: &Path) -> Result<(Calibration, CalibrationFile), IoError> {
    let text = read_to_string(path)?;
    let file: CalibrationFile =
        serde_json::from_str(&text).map_err(|e| IoError::schema(path, e.line() as u64, e))?;
    let calibration = file.build().map_err(|e| IoError::file(path, e))?;
    Ok((calibration, file))
}

pub fn save_calibration(path: &Path, file: &CalibrationFile) -> Result<(), IoError> {
    write_json(path, file)
}

// ---- poses ----------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct PoseRow {
    frame_id: i64,
    tx: f64,
    ty: f64,
    tz: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    qw: f64,
}

pub fn load_poses(path: &Path) -> Result<Vec<FramePose>, IoError> {
    let mut out = Vec::new();
    for result in csv_reader(path)?.deserialize::<PoseRow>() {
        let row = result.map_err(|e| IoError::schema(path, csv_line(&e), &e))?;
        let line = out.len() as u64 + 2; // header is line 1
        let pose = FramePose::from_quaternion(
            row.frame_id,
            Point3::new(row.tx, row.ty, row.tz),
            [row.qx, row.qy, row.qz, row.qw],
        )
        .map_err(|e| IoError::schema(path, line, e))?;
        out.push(pose);
    }
    if out.is_empty() {
        return Err(IoError::file(path, "no pose rows"));
    }
    Ok(out)
}

pub fn save_poses(path: &Path, poses: &[FramePose]) -> Result<(), IoError> {
    let rows: Vec<PoseRow> = poses
        .iter()
        .map(|p| {
            let q = UnitQuaternion::from_rotation_matrix(p.rotation());
            PoseRow {
                frame_id: p.frame_id(),
                tx: p.position().x,
                ty: p.position().y,
                tz: p.position().z,
                qx: q.i,
                qy: q.j,
                qz: q.k,
                qw: q.w,
            }
        })
        .collect();
    let bytes = csv_to_bytes(&rows).map_err(|e| IoError::file(path, e))?;
    write_atomic(path, &bytes)
}

// ---- GPS ------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct GpsRow {
    frame_id: i64,
    lat: f64,
    lon: f64,
    alt: f64,
}

pub fn load_gps(path: &Path) -> Result<Vec<GpsFix>, IoError> {
    let mut out: Vec<GpsFix> = Vec::new();
    for result in csv_reader(path)?.deserialize::<GpsRow>() {
        let row = result.map_err(|e| IoError::schema(path, csv_line(&e), &e))?;
        let line = out.len() as u64 + 2;
        if let Some(prev) = out.last() {
            if row.frame_id <= prev.frame_id {
                return Err(IoError::schema(
                    path,
                    line,
                    format!(
                        "frame ids must be strictly increasing ({} after {})",
                        row.frame_id, prev.frame_id
                    ),
                ));
            }
        }
        let geo =
            GeoPoint::new(row.lat, row.lon, row.alt).map_err(|e| IoError::schema(path, line, e))?;
        out.push(GpsFix {
            frame_id: row.frame_id,
            geo,
        });
    }
    if out.is_empty() {
        return Err(IoError::file(path, "no GPS rows"));
    }
    Ok(out)
}

pub fn save_gps(path: &Path, fixes: &[GpsFix]) -> Result<(), IoError> {
    let rows: Vec<GpsRow> = fixes
        .iter()
        .map(|f| GpsRow {
            frame_id: f.frame_id,
            lat: f.geo.lat(),
            lon: f.geo.lon(),
            alt: f.geo.alt(),
        })
        .collect();
    let bytes = csv_to_bytes(&rows).map_err(|e| IoError::file(path, e))?;
    write_atomic(path, &bytes)
}

// ---- detections -----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRow {
    frame_id: i64,
    sign_id: u64,
    class: String,
    u: f64,
    v: f64,
}

pub fn load_detections(path: &Path) -> Result<Vec<SignObservation>, IoError> {
    let mut out = Vec::new();
    for result in csv_reader(path)?.deserialize::<DetectionRow>() {
        let row = result.map_err(|e| IoError::schema(path, csv_line(&e), &e))?;
        let line = out.len() as u64 + 2;
        if !row.u.is_finite() || !row.v.is_finite() {
            return Err(IoError::schema(
                path,
                line,
                "pixel coordinates must be finite",
            ));
        }
        out.push(SignObservation {
            sign_id: row.sign_id,
            frame_id: row.frame_id,
            pixel: PixelPoint::new(row.u, row.v),
            class_label: row.class,
        });
    }
    Ok(out)
}

pub fn save_detections(path: &Path, detections: &[SignObservation]) -> Result<(), IoError> {
    let rows: Vec<DetectionRow> = detections
        .iter()
        .map(|d| DetectionRow {
            frame_id: d.frame_id,
            sign_id: d.sign_id,
            class: d.class_label.clone(),
            u: d.pixel.u,
            v: d.pixel.v,
        })
        .collect();
    let bytes = csv_to_bytes(&rows).map_err(|e| IoError::file(path, e))?;
    write_atomic(path, &bytes)
}

// ---- ground-truth signs ---------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct GtSignRow {
    sign_id: u64,
    class: String,
    x: f64,
    y: f64,
    z: f64,
}

pub fn load_gt_signs(path: &Path) -> Result<Vec<SignGroundTruth>, IoError> {
    let mut out = Vec::new();
    for result in csv_reader(path)?.deserialize::<GtSignRow>() {
        let row = result.map_err(|e| IoError::schema(path, csv_line(&e), &e))?;
        out.push(SignGroundTruth {
            sign_id: row.sign_id,
            class_label: row.class,
            abs_position: Point3::new(row.x, row.y, row.z),
            rel_positions: None,
        });
    }
    if out.is_empty() {
        return Err(IoError::file(path, "no ground-truth sign rows"));
    }
    Ok(out)
}

pub fn save_gt_signs(path: &Path, signs: &[SignGroundTruth]) -> Result<(), IoError> {
    let rows: Vec<GtSignRow> = signs
        .iter()
        .map(|s| GtSignRow {
            sign_id: s.sign_id,
            class: s.class_label.clone(),
            x: s.abs_position.x,
            y: s.abs_position.y,
            z: s.abs_position.z,
        })
        .collect();
    let bytes = csv_to_bytes(&rows).map_err(|e| IoError::file(path, e))?;
    write_atomic(path, &bytes)
}

// ---- output map -----------------------------------------------------------

/// One triangulated sign in the output map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapRecord {
    pub sign_id: u64,
    pub class: String,
    pub lat: f64,
    pub lon: f64,
    pub xyz: [f64; 3],
    pub residual_px: f64,
    pub mode: String,
    pub frames: Vec<i64>,
}

impl From<&TriangulatedSign> for MapRecord {
    fn from(s: &TriangulatedSign) -> Self {
        Self {
            sign_id: s.sign_id,
            class: s.class_label.clone(),
            lat: s.geo.lat(),
            lon: s.geo.lon(),
            xyz: [s.abs_position.x, s.abs_position.y, s.abs_position.z],
            residual_px: s.residual_px,
            mode: s.mode.as_str().to_string(),
            frames: s.frames.clone(),
        }
    }
}

pub fn save_map(path: &Path, records: &[MapRecord]) -> Result<(), IoError> {
    write_json(path, &records)
}

pub fn load_map(path: &Path) -> Result<Vec<MapRecord>, IoError> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| IoError::schema(path, e.line() as u64, e))
}

/// A sign the pipeline rejected, with the reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub sign_id: u64,
    pub class: String,
    pub reason: String,
    pub frames: Vec<i64>,
}

impl From<&SignFailure> for FailureRecord {
    fn from(f: &SignFailure) -> Self {
        Self {
            sign_id: f.sign_id,
            class: f.class_label.clone(),
            reason: f.reason.to_string(),
            frames: f.frames.clone(),
        }
    }
}

pub fn save_failures(path: &Path, records: &[FailureRecord]) -> Result<(), IoError> {
    write_json(path, &records)
}

// ---- relative positions ---------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelativeEntry {
    pub frame_id: i64,
    pub xyz: [f64; 3],
}

/// Per-frame camera-frame sign positions, the counterpart of the map file
/// needed for relative-error evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelativeRecord {
    pub sign_id: u64,
    pub rel: Vec<RelativeEntry>,
}

impl From<&TriangulatedSign> for RelativeRecord {
    fn from(s: &TriangulatedSign) -> Self {
        Self {
            sign_id: s.sign_id,
            rel: s
                .rel_positions
                .iter()
                .map(|(frame_id, p)| RelativeEntry {
                    frame_id: *frame_id,
                    xyz: [p.x, p.y, p.z],
                })
                .collect(),
        }
    }
}

pub fn save_relative(path: &Path, records: &[RelativeRecord]) -> Result<(), IoError> {
    write_json(path, &records)
}

pub fn load_relative(path: &Path) -> Result<Vec<RelativeRecord>, IoError> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| IoError::schema(path, e.line() as u64, e))
}

// ---- evaluation report ----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignErrorsJson {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_s: Option<f64>,
    pub m: usize,
    pub matched: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_f_per_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_s_per_m: Option<f64>,
    pub abs_mean: f64,
}

impl From<&ErrorReport> for SignErrorsJson {
    fn from(r: &ErrorReport) -> Self {
        Self {
            e_f: r.rel_mean_full,
            e_s: r.rel_mean_short,
            m: r.triangulated,
            matched: r.matched,
            e_f_per_m: r.rel_norm_full,
            e_s_per_m: r.rel_norm_short,
            abs_mean: r.abs_mean,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AteJson {
    pub full: f64,
    pub ate5_mean: f64,
    pub ate5_std: f64,
    pub windows: usize,
    pub skipped: usize,
}

impl AteJson {
    pub fn new(full: f64, ate5: &Ate5) -> Self {
        Self {
            full,
            ate5_mean: ate5.mean,
            ate5_std: ate5.std,
            windows: ate5.windows,
            skipped: ate5.skipped,
        }
    }
}

/// Table-style evaluation output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub signs: SignErrorsJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate: Option<AteJson>,
}

pub fn save_report(path: &Path, report: &EvaluationReport) -> Result<(), IoError> {
    write_json(path, report)
}

// ---- turn segments --------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnSegments {
    pub rdp_epsilon_m: f64,
    pub window_frames: usize,
    pub segments: Vec<[i64; 2]>,
}

pub fn save_turns(path: &Path, turns: &TurnSegments) -> Result<(), IoError> {
    write_json(path, turns)
}

// ---- sweep output ---------------------------------------------------------

#[derive(Debug, Serialize)]
struct SweepRow<'a> {
    group1_pct: f64,
    group2_pct: f64,
    score: &'a str,
    failed_signs: usize,
    repeats: usize,
}

/// Writes one grid as CSV; failed cells carry `nan` scores.
pub fn save_sweep_grid(path: &Path, grid: &SweepGrid) -> Result<(), IoError> {
    let scores: Vec<String> = grid
        .cells
        .iter()
        .map(|c| match c.score {
            Some(s) => format!("{s}"),
            None => "nan".to_string(),
        })
        .collect();
    let rows: Vec<SweepRow> = grid
        .cells
        .iter()
        .zip(&scores)
        .map(|(c, score)| SweepRow {
            group1_pct: c.axis1_pct,
            group2_pct: c.axis2_pct,
            score,
            failed_signs: c.failed_signs,
            repeats: c.repeats,
        })
        .collect();
    let bytes = csv_to_bytes(&rows).map_err(|e| IoError::file(path, e))?;
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepManifestGrid {
    pub axis1: String,
    pub axis2: Option<String>,
    pub file: String,
}

/// Scenario and sweep description accompanying the grid CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepManifest {
    pub scenario: ScenarioSpec,
    pub sweep: SweepSpec,
    pub grids: Vec<SweepManifestGrid>,
}

pub fn save_sweep_manifest(path: &Path, manifest: &SweepManifest) -> Result<(), IoError> {
    write_json(path, manifest)
}

pub fn save_scenario(path: &Path, scenario: &ScenarioSpec) -> Result<(), IoError> {
    write_json(path, scenario)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_journey, ScenarioSpec};
    use tempfile::TempDir;

    #[test]
    fn calibration_roundtrip_and_schema_errors() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("calibration.json");
        let file = CalibrationFile {
            fx: 960.115,
            fy: 954.891,
            cx: 694.792,
            cy: 240.355,
            width: 1392,
            height: 512,
            lambda1: -0.363,
            lambda2: 0.151,
        };
        save_calibration(&path, &file).unwrap();
        let (_, loaded) = load_calibration(&path).unwrap();
        assert_eq!(loaded, file);

        std::fs::write(&path, r#"{"fx": 1.0, "unknown_key": 2}"#).unwrap();
        let err = load_calibration(&path).unwrap_err();
        assert!(matches!(err, IoError::Schema { .. }), "{err}");

        std::fs::write(
            &path,
            serde_json::to_string(&CalibrationFile { fx: -1.0, ..file }).unwrap(),
        )
        .unwrap();
        assert!(load_calibration(&path).is_err());
    }

    #[test]
    fn journey_files_roundtrip() {
        let dir = TempDir::new().unwrap();
        let journey = generate_journey(&ScenarioSpec::kitti_like(3).with_noise(0.5, 0.2)).unwrap();

        let poses_path = dir.path().join("poses.csv");
        save_poses(&poses_path, &journey.slam_poses).unwrap();
        let poses = load_poses(&poses_path).unwrap();
        assert_eq!(poses.len(), journey.slam_poses.len());
        for (a, b) in poses.iter().zip(&journey.slam_poses) {
            assert_eq!(a.frame_id(), b.frame_id());
            assert!((a.position() - b.position()).norm() < 1e-9);
            let da = a.rotation().matrix() - b.rotation().matrix();
            assert!(da.abs().max() < 1e-9);
        }

        let gps_path = dir.path().join("gps.csv");
        save_gps(&gps_path, &journey.gps_fixes).unwrap();
        let gps = load_gps(&gps_path).unwrap();
        assert_eq!(gps.len(), journey.gps_fixes.len());
        for (a, b) in gps.iter().zip(&journey.gps_fixes) {
            assert!((a.geo.lat() - b.geo.lat()).abs() < 1e-12);
        }

        let det_path = dir.path().join("detections.csv");
        save_detections(&det_path, &journey.detections).unwrap();
        let det = load_detections(&det_path).unwrap();
        assert_eq!(det.len(), journey.detections.len());
        for (a, b) in det.iter().zip(&journey.detections) {
            assert_eq!(a.sign_id, b.sign_id);
            assert!((a.pixel.u - b.pixel.u).abs() < 1e-9);
            assert_eq!(a.class_label, b.class_label);
        }

        let gt_path = dir.path().join("gt_signs.csv");
        save_gt_signs(&gt_path, &journey.gt_signs).unwrap();
        let gt = load_gt_signs(&gt_path).unwrap();
        assert_eq!(gt.len(), journey.gt_signs.len());
    }

    #[test]
    fn pose_schema_errors_carry_line_numbers() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("poses.csv");
        std::fs::write(
            &path,
            "frame_id,tx,ty,tz,qx,qy,qz,qw\n0,0,0,0,0,0,0,1\n1,0,0,0,0,0,0,2\n",
        )
        .unwrap();
        let err = load_poses(&path).unwrap_err();
        match err {
            IoError::Schema { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("quaternion"), "{message}");
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn gps_rejects_non_increasing_frames() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("gps.csv");
        std::fs::write(
            &path,
            "frame_id,lat,lon,alt\n0,49.0,8.4,100\n0,49.0,8.4,100\n",
        )
        .unwrap();
        let err = load_gps(&path).unwrap_err();
        assert!(matches!(err, IoError::Schema { line: 3, .. }), "{err}");
    }

    #[test]
    fn map_and_relative_roundtrip() {
        let dir = TempDir::new().unwrap();
        let journey = generate_journey(&ScenarioSpec::kitti_like(5)).unwrap();
        let run = crate::pipeline::run_triangulation(
            &journey.slam_poses,
            &journey.gps_fixes,
            &journey.detections,
            &journey.calibration,
            &crate::pipeline::PipelineOptions::default(),
        )
        .unwrap();
        let ok = run.triangulated();
        let records: Vec<MapRecord> = ok.iter().map(MapRecord::from).collect();
        let rel: Vec<RelativeRecord> = ok.iter().map(RelativeRecord::from).collect();

        let map_path = dir.path().join("map.json");
        save_map(&map_path, &records).unwrap();
        let loaded = load_map(&map_path).unwrap();
        assert_eq!(loaded.len(), records.len());
        assert_eq!(loaded[0].sign_id, records[0].sign_id);
        assert_eq!(loaded[0].xyz, records[0].xyz);

        let rel_path = dir.path().join("relative.json");
        save_relative(&rel_path, &rel).unwrap();
        let loaded = load_relative(&rel_path).unwrap();
        assert_eq!(loaded.len(), rel.len());
        assert_eq!(loaded[0].rel.len(), rel[0].rel.len());
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("out.json");
        write_atomic(&path, b"{}").unwrap();
        let names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["out.json"]);
    }
}
