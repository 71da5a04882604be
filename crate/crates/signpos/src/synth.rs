//! Synthetic-journey oracle: generates ground-truth trajectories, signs,
//! GPS, and distorted observations, and drives sensitivity sweeps over
//! camera-parameter error.
//!
//! The pose channel is what a monocular ego-motion system would hand the
//! pipeline: the ground-truth trajectory warped by a seed-derived global
//! similarity (ego-motion is valid only up to scale) plus an optional slow
//! heading drift, so trajectory alignment does real work. Observations are
//! ground-truth projections through the ground-truth calibration, distorted,
//! with isotropic Gaussian pixel noise; GPS gets isotropic Gaussian noise in
//! Mercator meters.
//!
//! Scene layout (path, sign placement) is drawn from `seed`; noise is drawn
//! from `noise_seed`, so sweep repeats can redraw noise over a fixed scene.

use crate::align::{apply_similarity, FramePose, SimilarityTransform};
use crate::camera::{
    distort, Calibration, CalibrationFile, CameraError, NormalizedPoint, PerturbationSpec,
};
use crate::geo::{from_mercator, to_mercator, GeoError, GeoPoint, GpsFix, MercatorRef};
use crate::metrics::{sign_errors, SignGroundTruth, MATCH_GATE_M};
use crate::pipeline::{run_triangulation, PipelineError, PipelineOptions};
use crate::triangulate::{SignObservation, TrajectoryMode};
use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("no sign is ever visible from the generated trajectory")]
    EmptyScene,
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Align(#[from] crate::align::AlignError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Everything needed to generate one synthetic journey deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Scene seed: path sampling, sign placement, pose warp.
    pub seed: u64,
    /// Noise seed; defaults to a value derived from `seed`.
    #[serde(default)]
    pub noise_seed: Option<u64>,
    /// Geodetic anchor of the local metric frame.
    pub origin_lat_deg: f64,
    pub origin_lon_deg: f64,
    /// Local-metric waypoints (m) defining the road polyline.
    pub path: Vec<[f64; 2]>,
    pub speed_mps: f64,
    pub frame_rate_hz: f64,
    pub camera_height_m: f64,
    pub n_signs: usize,
    /// Lateral sign offset from the path, meters; positive is right of travel.
    pub lateral_offset_range_m: [f64; 2],
    /// Sign height band, meters above ground.
    pub height_range_m: [f64; 2],
    /// Detector range: beyond this the sign is not reported.
    pub max_detection_range_m: f64,
    pub pixel_noise_sigma: f64,
    pub gps_noise_sigma: f64,
    /// Heading drift of the ego-motion estimate, radians per meter traveled.
    /// Zero reproduces the ground truth trajectory exactly (up to the warp).
    pub pose_drift_rad_per_m: f64,
    pub calibration: CalibrationFile,
}

const MIN_DEPTH_M: f64 = 2.0;
const MIN_FRAMES: usize = 10;
const SIGN_CLASSES: [&str; 6] = [
    "speed-limit",
    "stop",
    "yield",
    "no-entry",
    "warning",
    "priority",
];

impl ScenarioSpec {
    /// KITTI-like default: a curvy ~600 m urban loop with the Seq 00-02
    /// ground-truth calibration, noiseless.
    pub fn kitti_like(seed: u64) -> Self {
        // Lissajous-style road: smoothly curved everywhere, so every local
        // alignment window is well conditioned.
        let n_waypoints = 64;
        let path = (0..n_waypoints)
            .map(|i| {
                let u = 0.2 + (std::f64::consts::PI - 0.4) * i as f64 / (n_waypoints - 1) as f64;
                [200.0 * u.sin(), 120.0 * (2.0 * u).sin()]
            })
            .collect();
        Self {
            seed,
            noise_seed: None,
            origin_lat_deg: 49.0,
            origin_lon_deg: 8.42,
            path,
            speed_mps: 10.0,
            frame_rate_hz: 10.0,
            camera_height_m: 1.65,
            n_signs: 14,
            lateral_offset_range_m: [2.5, 5.5],
            height_range_m: [1.5, 3.5],
            max_detection_range_m: 45.0,
            pixel_noise_sigma: 0.0,
            gps_noise_sigma: 0.0,
            pose_drift_rad_per_m: 0.0,
            calibration: CalibrationFile {
                fx: 960.115,
                fy: 954.891,
                cx: 694.792,
                cy: 240.355,
                width: 1392,
                height: 512,
                lambda1: -0.363,
                lambda2: 0.151,
            },
        }
    }

    pub fn with_noise(mut self, pixel_sigma: f64, gps_sigma: f64) -> Self {
        self.pixel_noise_sigma = pixel_sigma;
        self.gps_noise_sigma = gps_sigma;
        self
    }

    pub fn with_drift(mut self, rad_per_m: f64) -> Self {
        self.pose_drift_rad_per_m = rad_per_m;
        self
    }

    pub fn with_noise_seed(mut self, noise_seed: u64) -> Self {
        self.noise_seed = Some(noise_seed);
        self
    }

    fn effective_noise_seed(&self) -> u64 {
        self.noise_seed
            .unwrap_or_else(|| self.seed.wrapping_add(0x9E37_79B9_7F4A_7C15))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidScenario(m));
        if self.speed_mps <= 0.0 || self.speed_mps.is_nan() {
            return bad(format!("speed must be positive, got {}", self.speed_mps));
        }
        if self.frame_rate_hz <= 0.0 || self.frame_rate_hz.is_nan() {
            return bad(format!(
                "frame rate must be positive, got {}",
                self.frame_rate_hz
            ));
        }
        for (name, sigma) in [
            ("pixel noise", self.pixel_noise_sigma),
            ("gps noise", self.gps_noise_sigma),
            ("pose drift", self.pose_drift_rad_per_m),
        ] {
            if sigma < 0.0 || sigma.is_nan() {
                return bad(format!("{name} must be non-negative, got {sigma}"));
            }
        }
        if self.lateral_offset_range_m[0] > self.lateral_offset_range_m[1]
            || self.height_range_m[0] > self.height_range_m[1]
        {
            return bad("offset/height ranges must be min <= max".into());
        }
        if self.max_detection_range_m <= MIN_DEPTH_M {
            return bad(format!(
                "detection range must exceed {MIN_DEPTH_M} m, got {}",
                self.max_detection_range_m
            ));
        }
        self.calibration.build()?;
        GeoPoint::new(self.origin_lat_deg, self.origin_lon_deg, 0.0)?;
        MercatorRef::new(self.origin_lat_deg)?;
        PathWalk::new(&self.path)?;
        Ok(())
    }
}

/// Piecewise-linear path with cumulative arclength.
struct PathWalk {
    pts: Vec<Vector2<f64>>,
    cum: Vec<f64>,
}

impl PathWalk {
    fn new(path: &[[f64; 2]]) -> Result<Self, SynthError> {
        let mut pts: Vec<Vector2<f64>> = Vec::with_capacity(path.len());
        for p in path {
            let v = Vector2::new(p[0], p[1]);
            if pts.last().is_none_or(|q| (v - q).norm() > 1e-9) {
                pts.push(v);
            }
        }
        if pts.len() < 2 {
            return Err(SynthError::InvalidScenario(
                "path needs at least two distinct waypoints".into(),
            ));
        }
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
        }
        Ok(Self { pts, cum })
    }

    fn total(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Position and unit tangent at arclength `s` (clamped to the path).
    fn sample(&self, s: f64) -> (Vector2<f64>, Vector2<f64>) {
        let s = s.clamp(0.0, self.total());
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => (i - 1).min(self.pts.len() - 2),
        };
        let seg = self.pts[i + 1] - self.pts[i];
        let len = seg.norm();
        let t = seg / len;
        (self.pts[i] + t * (s - self.cum[i]), t)
    }
}

/// World-from-camera rotation for a camera looking along the planar tangent,
/// x right, y down (world: x east, y north, z up).
fn heading_rotation(tangent: Vector2<f64>) -> Matrix3<f64> {
    Matrix3::from_columns(&[
        Vector3::new(tangent.y, -tangent.x, 0.0),
        Vector3::new(0.0, 0.0, -1.0),
        Vector3::new(tangent.x, tangent.y, 0.0),
    ])
}

/// One generated journey: ground truth plus the noisy channels a real run
/// would ingest.
#[derive(Debug, Clone)]
pub struct SyntheticJourney {
    pub mercator: MercatorRef,
    pub calibration: Calibration,
    /// Ground-truth poses in the Mercator world frame.
    pub gt_poses: Vec<FramePose>,
    /// The pose-file channel: ground truth warped by a global similarity and
    /// bent by the configured heading drift.
    pub slam_poses: Vec<FramePose>,
    /// Noisy GPS fixes, one per frame.
    pub gps_fixes: Vec<GpsFix>,
    /// Distorted, noisy pixel observations, frame-major order.
    pub detections: Vec<SignObservation>,
    pub gt_signs: Vec<SignGroundTruth>,
}

fn uniform_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let axis = Vector3::new(gauss.sample(rng), gauss.sample(rng), gauss.sample(rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle)
}

/// Deterministically generates the journey described by `spec`.
pub fn generate_journey(spec: &ScenarioSpec) -> Result<SyntheticJourney, SynthError> {
    spec.validate()?;
    let calibration = spec.calibration.build()?;
    let mercator = MercatorRef::new(spec.origin_lat_deg)?;
    let origin = to_mercator(
        &GeoPoint::new(spec.origin_lat_deg, spec.origin_lon_deg, 0.0)?,
        &mercator,
    );
    let walk = PathWalk::new(&spec.path)?;

    let spacing = spec.speed_mps / spec.frame_rate_hz;
    let n_frames = (walk.total() / spacing).floor() as usize + 1;
    if n_frames < MIN_FRAMES {
        return Err(SynthError::InvalidScenario(format!(
            "path yields only {n_frames} frames; need at least {MIN_FRAMES}"
        )));
    }

    // Frame 0 sits exactly at the geodetic origin, so the Mercator reference
    // a consumer derives from the first GPS fix coincides with this frame.
    let start = walk.sample(0.0).0;
    let anchor = origin - start;

    let mut gt_poses = Vec::with_capacity(n_frames);
    let mut arclens = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let s = k as f64 * spacing;
        let (p, t) = walk.sample(s);
        gt_poses.push(FramePose::new(
            k as i64,
            heading_rotation(t),
            Point3::new(anchor.x + p.x, anchor.y + p.y, spec.camera_height_m),
        )?);
        arclens.push(s);
    }

    // Scene draws, in fixed order: warp, then sign placement.
    let mut scene_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let warp = SimilarityTransform::new(
        scene_rng.gen_range(0.5..2.0),
        uniform_rotation(&mut scene_rng).into_inner(),
        Vector3::new(
            scene_rng.gen_range(-100.0..100.0),
            scene_rng.gen_range(-100.0..100.0),
            scene_rng.gen_range(-100.0..100.0),
        ),
    )
    .expect("randomly drawn warp is a valid similarity");

    let mut signs = Vec::with_capacity(spec.n_signs);
    for i in 0..spec.n_signs {
        let s = scene_rng.gen_range(0.05..0.95) * walk.total();
        let lateral =
            scene_rng.gen_range(spec.lateral_offset_range_m[0]..=spec.lateral_offset_range_m[1]);
        let height = scene_rng.gen_range(spec.height_range_m[0]..=spec.height_range_m[1]);
        let (p, t) = walk.sample(s);
        let right = Vector2::new(t.y, -t.x);
        let pos = p + right * lateral;
        signs.push((
            i as u64,
            SIGN_CLASSES[i % SIGN_CLASSES.len()].to_string(),
            Point3::new(anchor.x + pos.x, anchor.y + pos.y, height),
        ));
    }

    // Ground-truth observations, frame-major.
    let mut clean: Vec<SignObservation> = Vec::new();
    for pose in &gt_poses {
        for (sign_id, class, pos) in &signs {
            let q = pose.world_to_camera(pos);
            if q.z <= MIN_DEPTH_M || q.z >= spec.max_detection_range_m {
                continue;
            }
            let n = NormalizedPoint::new(q.x / q.z, q.y / q.z);
            if n.radius() > calibration.distortion.working_radius() {
                continue;
            }
            let pixel = calibration
                .intrinsics
                .denormalize(distort(n, &calibration.distortion));
            if !calibration.intrinsics.contains(pixel) {
                continue;
            }
            clean.push(SignObservation {
                sign_id: *sign_id,
                frame_id: pose.frame_id(),
                pixel,
                class_label: class.clone(),
            });
        }
    }

    // Noise draws, in fixed order: pixels, then GPS.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.effective_noise_seed());
    let mut detections = Vec::with_capacity(clean.len());
    if spec.pixel_noise_sigma > 0.0 {
        let pix = Normal::new(0.0, spec.pixel_noise_sigma).unwrap();
        for mut obs in clean {
            obs.pixel.u += pix.sample(&mut noise_rng);
            obs.pixel.v += pix.sample(&mut noise_rng);
            if calibration.intrinsics.contains(obs.pixel) {
                detections.push(obs);
            }
        }
    } else {
        detections = clean;
    }

    let mut gps_fixes = Vec::with_capacity(n_frames);
    if spec.gps_noise_sigma > 0.0 {
        let gps = Normal::new(0.0, spec.gps_noise_sigma).unwrap();
        for pose in &gt_poses {
            let p = pose.position();
            let xy = Vector2::new(
                p.x + gps.sample(&mut noise_rng),
                p.y + gps.sample(&mut noise_rng),
            );
            let alt = p.z + gps.sample(&mut noise_rng);
            gps_fixes.push(GpsFix {
                frame_id: pose.frame_id(),
                geo: from_mercator(xy, &mercator).with_alt(alt),
            });
        }
    } else {
        for pose in &gt_poses {
            let p = pose.position();
            gps_fixes.push(GpsFix {
                frame_id: pose.frame_id(),
                geo: from_mercator(Vector2::new(p.x, p.y), &mercator).with_alt(p.z),
            });
        }
    }

    if spec.n_signs > 0 && detections.is_empty() {
        return Err(SynthError::EmptyScene);
    }

    // Ego-motion channel: heading drift around the start, then the global warp.
    let drifted: Vec<FramePose> = if spec.pose_drift_rad_per_m > 0.0 {
        let pivot = gt_poses[0].position();
        gt_poses
            .iter()
            .zip(&arclens)
            .map(|(pose, s)| {
                let yaw =
                    Rotation3::from_axis_angle(&Vector3::z_axis(), spec.pose_drift_rad_per_m * s);
                FramePose::new(
                    pose.frame_id(),
                    (yaw * pose.rotation()).into_inner(),
                    pivot + yaw * (pose.position() - pivot),
                )
                .expect("drifted pose stays orthonormal")
            })
            .collect()
    } else {
        gt_poses.clone()
    };
    let slam_poses = apply_similarity(&warp, &drifted);

    let gt_signs = signs
        .into_iter()
        .map(|(sign_id, class_label, abs_position)| {
            let rel: BTreeMap<i64, Point3<f64>> = detections
                .iter()
                .filter(|o| o.sign_id == sign_id)
                .map(|o| {
                    let pose = &gt_poses[o.frame_id as usize];
                    (o.frame_id, pose.world_to_camera(&abs_position))
                })
                .collect();
            SignGroundTruth {
                sign_id,
                class_label,
                abs_position,
                rel_positions: Some(rel),
            }
        })
        .collect();

    Ok(SyntheticJourney {
        mercator,
        calibration,
        gt_poses,
        slam_poses,
        gps_fixes,
        detections,
        gt_signs,
    })
}

/// Parameter group whose error is being swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Focal,
    PrincipalPoint,
    Distortion,
}

/// Sweep layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// One grid per group, others held at ground truth.
    OneAtATime,
    /// One grid per pair of groups.
    TwoAtATime,
    /// Focal lengths and principal point varied jointly against the
    /// distortion coefficients.
    FppVsDistortion,
}

/// How the per-cell repeats collapse to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregate {
    Min,
    Mean,
    Median,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub mode: SweepMode,
    pub groups: Vec<ParamGroup>,
    /// Percentages swept along each axis.
    pub range_pct: Vec<f64>,
    /// Journeys scored per cell, each with freshly drawn noise.
    pub repeats: usize,
    pub aggregate: Aggregate,
    /// Scale both distortion coefficients together; when false only lambda1
    /// carries the distortion-axis percentage.
    pub joint_distortion: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            mode: SweepMode::OneAtATime,
            groups: vec![
                ParamGroup::Focal,
                ParamGroup::PrincipalPoint,
                ParamGroup::Distortion,
            ],
            range_pct: (-5..=5).map(|i| 3.0 * i as f64).collect(),
            repeats: 10,
            aggregate: Aggregate::Min,
            joint_distortion: true,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.repeats == 0 {
            return Err(SynthError::InvalidSweep(
                "repeats must be at least 1".into(),
            ));
        }
        if self.range_pct.is_empty() {
            return Err(SynthError::InvalidSweep("range is empty".into()));
        }
        for pct in &self.range_pct {
            if !pct.is_finite() || !(-100.0..=100.0).contains(pct) {
                return Err(SynthError::InvalidSweep(format!(
                    "percentage {pct} outside [-100, 100]"
                )));
            }
        }
        match self.mode {
            SweepMode::OneAtATime if self.groups.is_empty() => Err(SynthError::InvalidSweep(
                "one-at-a-time sweep needs at least one group".into(),
            )),
            SweepMode::TwoAtATime if self.groups.len() < 2 => Err(SynthError::InvalidSweep(
                "two-at-a-time sweep needs at least two groups".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Axis of a sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Focal,
    PrincipalPoint,
    Distortion,
    FocalAndPrincipalPoint,
}

impl SweepAxis {
    pub fn label(&self) -> &'static str {
        match self {
            SweepAxis::Focal => "focal",
            SweepAxis::PrincipalPoint => "principal_point",
            SweepAxis::Distortion => "distortion",
            SweepAxis::FocalAndPrincipalPoint => "focal_and_principal_point",
        }
    }
}

impl From<ParamGroup> for SweepAxis {
    fn from(g: ParamGroup) -> Self {
        match g {
            ParamGroup::Focal => SweepAxis::Focal,
            ParamGroup::PrincipalPoint => SweepAxis::PrincipalPoint,
            ParamGroup::Distortion => SweepAxis::Distortion,
        }
    }
}

/// One scored grid cell. `score` is the aggregated normalized relative error
/// (e/m); `None` marks a failed cell. `failed_signs` totals per-sign
/// failures across all repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub axis1_pct: f64,
    pub axis2_pct: f64,
    pub score: Option<f64>,
    pub failed_signs: usize,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub axis1: SweepAxis,
    pub axis2: Option<SweepAxis>,
    pub cells: Vec<SweepCell>,
}

fn derive_noise_seed(master: u64, repeat: usize) -> u64 {
    master ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(repeat as u64 + 1)
}

fn apply_axis(spec: &mut PerturbationSpec, axis: SweepAxis, pct: f64, joint_distortion: bool) {
    match axis {
        SweepAxis::Focal => spec.focal_pct = pct,
        SweepAxis::PrincipalPoint => spec.principal_point_pct = pct,
        SweepAxis::Distortion => {
            spec.lambda1_pct = pct;
            if joint_distortion {
                spec.lambda2_pct = pct;
            }
        }
        SweepAxis::FocalAndPrincipalPoint => {
            spec.focal_pct = pct;
            spec.principal_point_pct = pct;
        }
    }
}

fn count_signs(detections: &[SignObservation]) -> usize {
    let mut ids: Vec<u64> = detections.iter().map(|d| d.sign_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.len()
}

/// Scores one journey under a (possibly perturbed) calibration: the
/// normalized mean relative error e/m for the run's trajectory mode.
pub fn score_journey(
    journey: &SyntheticJourney,
    calib: &Calibration,
    opts: &PipelineOptions,
) -> (Option<f64>, usize) {
    match run_triangulation(
        &journey.slam_poses,
        &journey.gps_fixes,
        &journey.detections,
        calib,
        opts,
    ) {
        Err(_) => (None, count_signs(&journey.detections)),
        Ok(run) => {
            let ok = run.triangulated();
            let failed = run.outcomes.len() - ok.len();
            if ok.is_empty() {
                return (None, failed);
            }
            match sign_errors(&ok, &journey.gt_signs, MATCH_GATE_M) {
                Ok(report) => {
                    let score = match opts.mode {
                        TrajectoryMode::Full => report.rel_norm_full,
                        TrajectoryMode::Short => report.rel_norm_short,
                    };
                    (score, failed)
                }
                Err(_) => (None, failed),
            }
        }
    }
}

fn aggregate_scores(scores: &[f64], aggregate: Aggregate) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    Some(match aggregate {
        Aggregate::Min => scores.iter().cloned().fold(f64::INFINITY, f64::min),
        Aggregate::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        Aggregate::Median => {
            let mut sorted = scores.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sorted.len().is_multiple_of(2) {
                0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
            } else {
                sorted[sorted.len() / 2]
            }
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn run_cell_on(
    journeys: &[SyntheticJourney],
    gt_calib: &Calibration,
    sweep: &SweepSpec,
    opts: &PipelineOptions,
    axis1: SweepAxis,
    pct1: f64,
    axis2: Option<SweepAxis>,
    pct2: f64,
) -> SweepCell {
    let mut perturbation = PerturbationSpec::zero();
    apply_axis(&mut perturbation, axis1, pct1, sweep.joint_distortion);
    if let Some(a2) = axis2 {
        apply_axis(&mut perturbation, a2, pct2, sweep.joint_distortion);
    }
    let cell = |score, failed| SweepCell {
        axis1_pct: pct1,
        axis2_pct: pct2,
        score,
        failed_signs: failed,
        repeats: sweep.repeats,
    };
    let calib = match gt_calib.perturbed(&perturbation) {
        Ok(c) => c,
        Err(_) => {
            let failed = journeys.iter().map(|j| count_signs(&j.detections)).sum();
            return cell(None, failed);
        }
    };
    let mut scores = Vec::with_capacity(journeys.len());
    let mut failed_total = 0usize;
    for journey in journeys {
        let (score, failed) = score_journey(journey, &calib, opts);
        failed_total += failed;
        if let Some(s) = score {
            scores.push(s);
        }
    }
    cell(aggregate_scores(&scores, sweep.aggregate), failed_total)
}

fn repeat_journeys(
    scenario: &ScenarioSpec,
    repeats: usize,
) -> Result<Vec<SyntheticJourney>, SynthError> {
    (0..repeats)
        .map(|r| {
            generate_journey(
                &scenario
                    .clone()
                    .with_noise_seed(derive_noise_seed(scenario.seed, r)),
            )
        })
        .collect()
}

fn grid_axes(sweep: &SweepSpec) -> Vec<(SweepAxis, Option<SweepAxis>)> {
    match sweep.mode {
        SweepMode::OneAtATime => sweep.groups.iter().map(|g| ((*g).into(), None)).collect(),
        SweepMode::TwoAtATime => {
            let mut pairs = Vec::new();
            for i in 0..sweep.groups.len() {
                for j in i + 1..sweep.groups.len() {
                    pairs.push((sweep.groups[i].into(), Some(sweep.groups[j].into())));
                }
            }
            pairs
        }
        SweepMode::FppVsDistortion => vec![(
            SweepAxis::FocalAndPrincipalPoint,
            Some(SweepAxis::Distortion),
        )],
    }
}

/// Recomputes a single cell from scratch; bit-identical to the cell the full
/// sweep produces, whatever order the grid ran in.
pub fn run_cell(
    scenario: &ScenarioSpec,
    sweep: &SweepSpec,
    opts: &PipelineOptions,
    axis1: SweepAxis,
    pct1: f64,
    axis2: Option<SweepAxis>,
    pct2: f64,
) -> Result<SweepCell, SynthError> {
    sweep.validate()?;
    let journeys = repeat_journeys(scenario, sweep.repeats)?;
    let gt_calib = scenario.calibration.build()?;
    Ok(run_cell_on(
        &journeys, &gt_calib, sweep, opts, axis1, pct1, axis2, pct2,
    ))
}

/// Runs the configured sensitivity sweep. Each cell re-triangulates every
/// repeat journey under the perturbed calibration; repeats share journeys
/// across cells so a cell's value depends only on its own perturbation.
pub fn run_sweep(
    scenario: &ScenarioSpec,
    sweep: &SweepSpec,
    opts: &PipelineOptions,
) -> Result<Vec<SweepGrid>, SynthError> {
    sweep.validate()?;
    let journeys = repeat_journeys(scenario, sweep.repeats)?;
    let gt_calib = scenario.calibration.build()?;

    let mut grids = Vec::new();
    for (axis1, axis2) in grid_axes(sweep) {
        let cells_def: Vec<(f64, f64)> = match axis2 {
            None => sweep.range_pct.iter().map(|&p| (p, 0.0)).collect(),
            Some(_) => sweep
                .range_pct
                .iter()
                .flat_map(|&p1| sweep.range_pct.iter().map(move |&p2| (p1, p2)))
                .collect(),
        };
        let cells: Vec<SweepCell> = cells_def
            .par_iter()
            .map(|&(p1, p2)| run_cell_on(&journeys, &gt_calib, sweep, opts, axis1, p1, axis2, p2))
            .collect();
        grids.push(SweepGrid {
            axis1,
            axis2,
            cells,
        });
    }
    Ok(grids)
}
