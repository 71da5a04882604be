//! Sign position estimation: midpoint linear initialization, single-point
//! bundle-adjustment refinement, per-frame relative positions, and the
//! negative-depth discard rule, in full- and short-trajectory modes.
//!
//! Observations are undistorted once at ingestion and compared against
//! projections through the unchanged K, so the cost refined here is
//!
//! ```text
//! sum_j || project(R_j^T (p - t_j)) - undistorted c_ij ||^2
//! ```
//!
//! with only the sign point varying; poses and calibration stay fixed.

use crate::align::{
    apply_similarity, umeyama_fit, AlignError, FramePose, SimilarityTransform, Trajectory,
};
use crate::camera::{project, undistort, Calibration, CameraError, PixelPoint};
use crate::geo::{from_mercator, GeoPoint};
use nalgebra::{Matrix3, Point3, Unit, UnitVector3, Vector2, Vector3};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum TriangulateError {
    #[error("track has {0} observation(s); at least 2 are required")]
    InsufficientObservations(usize),
    #[error("rays are degenerate (parallel or a single effective viewpoint)")]
    DegenerateRays,
    #[error(
        "refinement did not meet gradient tolerance {tolerance:e} within {iterations} iterations"
    )]
    NonConvergence { iterations: usize, tolerance: f64 },
    #[error("relative depth is not positive at frame {frame_id} (z = {z})")]
    NegativeDepth { frame_id: i64, z: f64 },
    #[error("no pose available for frame {0}")]
    MissingPose(i64),
    #[error("observations for sign {sign_id} are not strictly increasing in frame id")]
    UnorderedObservations { sign_id: u64 },
    #[error(transparent)]
    Alignment(#[from] AlignError),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

/// A single detection of a sign: the distorted pixel center of its bounding
/// box in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SignObservation {
    pub sign_id: u64,
    pub frame_id: i64,
    pub pixel: PixelPoint,
    pub class_label: String,
}

/// All observations of one physical sign, ordered by frame.
#[derive(Debug, Clone)]
pub struct SignTrack {
    sign_id: u64,
    observations: Vec<SignObservation>,
}

impl SignTrack {
    pub fn new(sign_id: u64, observations: Vec<SignObservation>) -> Result<Self, TriangulateError> {
        if observations.is_empty() {
            return Err(TriangulateError::InsufficientObservations(0));
        }
        for w in observations.windows(2) {
            if w[1].frame_id <= w[0].frame_id {
                return Err(TriangulateError::UnorderedObservations { sign_id });
            }
        }
        Ok(Self {
            sign_id,
            observations,
        })
    }

    pub fn sign_id(&self) -> u64 {
        self.sign_id
    }

    pub fn observations(&self) -> &[SignObservation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn class_label(&self) -> &str {
        &self.observations[0].class_label
    }

    pub fn frame_ids(&self) -> Vec<i64> {
        self.observations.iter().map(|o| o.frame_id).collect()
    }
}

/// Groups detections into per-sign tracks, sorted by sign id with
/// observations sorted by frame id. Duplicate (sign, frame) pairs are
/// rejected.
pub fn group_tracks(detections: &[SignObservation]) -> Result<Vec<SignTrack>, TriangulateError> {
    let mut by_sign: BTreeMap<u64, Vec<SignObservation>> = BTreeMap::new();
    for obs in detections {
        by_sign.entry(obs.sign_id).or_default().push(obs.clone());
    }
    by_sign
        .into_iter()
        .map(|(sign_id, mut obs)| {
            obs.sort_by_key(|o| o.frame_id);
            SignTrack::new(sign_id, obs)
        })
        .collect()
}

/// Which frames anchor the Umeyama alignment before triangulating a sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryMode {
    /// Align with every co-indexed frame of the journey.
    Full,
    /// Re-align locally with the sign's observation frames plus padding.
    Short,
}

impl TrajectoryMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrajectoryMode::Full => "full",
            TrajectoryMode::Short => "short",
        }
    }
}

/// A back-projected observation ray in world coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Point3<f64>,
    pub direction: UnitVector3<f64>,
}

fn pose_for(poses: &[FramePose], frame_id: i64) -> Result<&FramePose, TriangulateError> {
    poses
        .iter()
        .find(|p| p.frame_id() == frame_id)
        .ok_or(TriangulateError::MissingPose(frame_id))
}

/// Undistorts each observation and turns it into a world-frame viewing ray
/// through its camera center.
pub fn backproject_rays(
    track: &SignTrack,
    poses: &[FramePose],
    calib: &Calibration,
) -> Result<Vec<Ray>, TriangulateError> {
    track
        .observations()
        .iter()
        .map(|obs| {
            let pose = pose_for(poses, obs.frame_id)?;
            let n = undistort(calib.intrinsics.normalize(obs.pixel), &calib.distortion)?;
            let dir_cam = Vector3::new(n.x, n.y, 1.0);
            Ok(Ray {
                origin: pose.position(),
                direction: Unit::new_normalize(pose.rotation() * dir_cam),
            })
        })
        .collect()
}

const DEGENERATE_EIGENVALUE_RATIO: f64 = 1e-9;

/// Linear least-squares point minimizing the summed squared perpendicular
/// distance to the rays: solves `sum (I - d d^T) p = sum (I - d d^T) o`.
pub fn midpoint_from_rays(rays: &[Ray]) -> Result<Point3<f64>, TriangulateError> {
    if rays.len() < 2 {
        return Err(TriangulateError::InsufficientObservations(rays.len()));
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for ray in rays {
        let d = ray.direction.into_inner();
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * ray.origin.coords;
    }
    let eigen = a.symmetric_eigen();
    let max_eig = eigen.eigenvalues.max();
    let min_eig = eigen.eigenvalues.min();
    if min_eig <= DEGENERATE_EIGENVALUE_RATIO * max_eig.max(1.0) {
        return Err(TriangulateError::DegenerateRays);
    }
    let mut p = Vector3::zeros();
    for i in 0..3 {
        let v = eigen.eigenvectors.column(i);
        p += v * (v.dot(&b) / eigen.eigenvalues[i]);
    }
    Ok(Point3::from(p))
}

/// Midpoint triangulation of a track against the given (aligned) poses.
pub fn midpoint_triangulate(
    track: &SignTrack,
    poses: &[FramePose],
    calib: &Calibration,
) -> Result<Point3<f64>, TriangulateError> {
    if track.len() < 2 {
        return Err(TriangulateError::InsufficientObservations(track.len()));
    }
    midpoint_from_rays(&backproject_rays(track, poses, calib)?)
}

/// Damped least-squares settings for [`refine_ba`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-10,
            initial_damping: 1e-3,
        }
    }
}

/// Refined sign point plus the residual it achieves.
#[derive(Debug, Clone)]
pub struct BaResult {
    pub position: Point3<f64>,
    /// Mean Euclidean reprojection error over the track, in pixels.
    pub mean_reprojection_px: f64,
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
}

/// One precomputed reprojection target: a pose and the undistorted pixel it
/// must explain.
struct ReprojectionTerm {
    pose: FramePose,
    target: Vector2<f64>,
}

const MIN_BA_DEPTH: f64 = 1e-9;

fn reprojection_terms(
    track: &SignTrack,
    poses: &[FramePose],
    calib: &Calibration,
) -> Result<Vec<ReprojectionTerm>, TriangulateError> {
    track
        .observations()
        .iter()
        .map(|obs| {
            let pose = *pose_for(poses, obs.frame_id)?;
            let u = calib.undistort_pixel(obs.pixel)?;
            Ok(ReprojectionTerm {
                pose,
                target: Vector2::new(u.u, u.v),
            })
        })
        .collect()
}

/// Cost and per-term residuals; `None` when the point is at or behind any
/// observing camera.
fn cost_at(terms: &[ReprojectionTerm], calib: &Calibration, p: &Point3<f64>) -> Option<f64> {
    let mut cost = 0.0;
    for term in terms {
        let q = term.pose.world_to_camera(p);
        if q.z <= MIN_BA_DEPTH {
            return None;
        }
        let pix = project(&q.coords, &calib.intrinsics).ok()?;
        cost += (Vector2::new(pix.u, pix.v) - term.target).norm_squared();
    }
    Some(cost)
}

fn gradient_and_normal(
    terms: &[ReprojectionTerm],
    calib: &Calibration,
    p: &Point3<f64>,
) -> Option<(Vector3<f64>, Matrix3<f64>, f64)> {
    let (f_x, f_y) = (calib.intrinsics.f_x(), calib.intrinsics.f_y());
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    let mut cost = 0.0;
    for term in terms {
        let q = term.pose.world_to_camera(p);
        if q.z <= MIN_BA_DEPTH {
            return None;
        }
        let r = Vector2::new(
            f_x * q.x / q.z + calib.intrinsics.c_x(),
            f_y * q.y / q.z + calib.intrinsics.c_y(),
        ) - term.target;
        cost += r.norm_squared();
        // d(pixel)/d(q) chained with dq/dp = R^T gives gradient columns R * d/dq.
        let du_dq = Vector3::new(f_x / q.z, 0.0, -f_x * q.x / (q.z * q.z));
        let dv_dq = Vector3::new(0.0, f_y / q.z, -f_y * q.y / (q.z * q.z));
        let ju = term.pose.rotation() * du_dq;
        let jv = term.pose.rotation() * dv_dq;
        jtj += ju * ju.transpose() + jv * jv.transpose();
        jtr += ju * r.x + jv * r.y;
    }
    Some((jtr, jtj, cost))
}

/// Sum of squared reprojection errors of a candidate sign point, in px^2.
pub fn reprojection_cost(
    p: &Point3<f64>,
    track: &SignTrack,
    poses: &[FramePose],
    calib: &Calibration,
) -> Result<f64, TriangulateError> {
    let terms = reprojection_terms(track, poses, calib)?;
    cost_at(&terms, calib, p).ok_or(TriangulateError::NegativeDepth {
        frame_id: first_nonpositive_frame(&terms, p),
        z: 0.0,
    })
}

/// Analytic gradient of [`reprojection_cost`] with respect to the point.
pub fn reprojection_gradient(
    p: &Point3<f64>,
    track: &SignTrack,
    poses: &[FramePose],
    calib: &Calibration,
) -> Result<Vector3<f64>, TriangulateError> {
    let terms = reprojection_terms(track, poses, calib)?;
    let (jtr, _, _) =
        gradient_and_normal(&terms, calib, p).ok_or(TriangulateError::NegativeDepth {
            frame_id: first_nonpositive_frame(&terms, p),
            z: 0.0,
        })?;
    Ok(2.0 * jtr)
}

fn first_nonpositive_frame(terms: &[ReprojectionTerm], p: &Point3<f64>) -> i64 {
    terms
        .iter()
        .find(|t| t.pose.world_to_camera(p).z <= MIN_BA_DEPTH)
        .map(|t| t.pose.frame_id())
        .unwrap_or(-1)
}

const MAX_DAMPING: f64 = 1e12;
/// Accepted steps below this relative size mean the iterate can no longer
/// move at f64 resolution.
const STEP_TOLERANCE: f64 = 1e-12;

/// Refines a sign point by damped least squares on the reprojection cost.
/// Damping shrinks tenfold on accepted steps and grows tenfold on rejected
/// ones; candidates that put the point behind a camera are rejected outright,
/// so the cost never increases across accepted iterations.
pub fn refine_ba(
    initial: &Point3<f64>,
    track: &SignTrack,
    poses: &[FramePose],
    calib: &Calibration,
    opts: &BaOptions,
) -> Result<BaResult, TriangulateError> {
    let terms = reprojection_terms(track, poses, calib)?;
    let mut p = *initial;
    let mut damping = opts.initial_damping;

    let Some((mut jtr, mut jtj, mut cost)) = gradient_and_normal(&terms, calib, &p) else {
        return Err(TriangulateError::NegativeDepth {
            frame_id: first_nonpositive_frame(&terms, &p),
            z: terms
                .iter()
                .map(|t| t.pose.world_to_camera(&p).z)
                .fold(f64::INFINITY, f64::min),
        });
    };
    let mut accepted_costs = vec![cost];

    for iteration in 0..opts.max_iterations {
        let gradient = 2.0 * jtr;
        if gradient.amax() <= opts.gradient_tolerance {
            return Ok(BaResult {
                position: p,
                mean_reprojection_px: mean_reprojection(&terms, calib, &p),
                iterations: iteration,
                accepted_costs,
            });
        }
        let lhs = jtj + Matrix3::identity() * damping;
        let step = match lhs.cholesky() {
            Some(ch) => ch.solve(&-jtr),
            None => {
                damping *= 10.0;
                continue;
            }
        };
        let candidate = p + step;
        match cost_at(&terms, calib, &candidate) {
            Some(new_cost) if new_cost < cost => {
                p = candidate;
                cost = new_cost;
                accepted_costs.push(cost);
                damping = (damping / 10.0).max(1e-15);
                if step.norm() <= STEP_TOLERANCE * (1.0 + p.coords.norm()) {
                    return Ok(BaResult {
                        position: p,
                        mean_reprojection_px: mean_reprojection(&terms, calib, &p),
                        iterations: iteration + 1,
                        accepted_costs,
                    });
                }
                let Some((njtr, njtj, _)) = gradient_and_normal(&terms, calib, &p) else {
                    break;
                };
                jtr = njtr;
                jtj = njtj;
            }
            _ => {
                damping *= 10.0;
                if damping > MAX_DAMPING {
                    // No strictly improving step exists at f64 resolution:
                    // the iterate is a numerical stationary point.
                    return Ok(BaResult {
                        position: p,
                        mean_reprojection_px: mean_reprojection(&terms, calib, &p),
                        iterations: iteration + 1,
                        accepted_costs,
                    });
                }
            }
        }
    }

    let gradient = 2.0 * jtr;
    if gradient.amax() <= opts.gradient_tolerance {
        return Ok(BaResult {
            position: p,
            mean_reprojection_px: mean_reprojection(&terms, calib, &p),
            iterations: opts.max_iterations,
            accepted_costs,
        });
    }
    Err(TriangulateError::NonConvergence {
        iterations: opts.max_iterations,
        tolerance: opts.gradient_tolerance,
    })
}

fn mean_reprojection(terms: &[ReprojectionTerm], calib: &Calibration, p: &Point3<f64>) -> f64 {
    let total: f64 = terms
        .iter()
        .map(|term| {
            let q = term.pose.world_to_camera(p);
            match project(&q.coords, &calib.intrinsics) {
                Ok(pix) => (Vector2::new(pix.u, pix.v) - term.target).norm(),
                Err(_) => f64::INFINITY,
            }
        })
        .sum();
    total / terms.len() as f64
}

/// Camera-frame coordinates of the sign for every observation frame:
/// `p_rel = R_j^T (p_abs - t_j)`.
pub fn relative_positions(
    p_abs: &Point3<f64>,
    track: &SignTrack,
    poses: &[FramePose],
) -> Result<BTreeMap<i64, Point3<f64>>, TriangulateError> {
    track
        .observations()
        .iter()
        .map(|obs| {
            let pose = pose_for(poses, obs.frame_id)?;
            Ok((obs.frame_id, pose.world_to_camera(p_abs)))
        })
        .collect()
}

/// A fully triangulated sign.
#[derive(Debug, Clone)]
pub struct TriangulatedSign {
    pub sign_id: u64,
    pub class_label: String,
    /// World (Mercator metric) position.
    pub abs_position: Point3<f64>,
    /// Camera-frame position per observation frame; depths all positive.
    pub rel_positions: BTreeMap<i64, Point3<f64>>,
    pub geo: GeoPoint,
    pub mode: TrajectoryMode,
    /// Final mean reprojection error in pixels.
    pub residual_px: f64,
    /// Frames that observed the sign.
    pub frames: Vec<i64>,
}

/// Options shared by every per-sign triangulation.
#[derive(Debug, Clone, Copy)]
pub struct TriangulationOptions {
    pub mode: TrajectoryMode,
    /// Frames of padding on each side of a sign's observations in short mode.
    pub half_window: usize,
    pub ba: BaOptions,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        Self {
            mode: TrajectoryMode::Full,
            half_window: 25,
            ba: BaOptions::default(),
        }
    }
}

/// Trajectory indices used to align before triangulating `track`.
fn alignment_indices(
    track: &SignTrack,
    traj: &Trajectory,
    opts: &TriangulationOptions,
) -> Result<Vec<usize>, TriangulateError> {
    let n = traj.len();
    match opts.mode {
        TrajectoryMode::Full => Ok((0..n).collect()),
        TrajectoryMode::Short => {
            // One window per observation, merged; a sign observed across
            // disjoint stretches keeps the union of its windows.
            let mut windows: Vec<(usize, usize)> = Vec::new();
            for obs in track.observations() {
                let idx = traj
                    .index_of(obs.frame_id)
                    .ok_or(TriangulateError::MissingPose(obs.frame_id))?;
                let lo = idx.saturating_sub(opts.half_window);
                let hi = (idx + opts.half_window).min(n - 1);
                match windows.last_mut() {
                    Some(last) if lo <= last.1 + 1 => last.1 = last.1.max(hi),
                    _ => windows.push((lo, hi)),
                }
            }
            Ok(windows.into_iter().flat_map(|(a, b)| a..=b).collect())
        }
    }
}

/// Fits the mode-dependent Umeyama alignment for a track and returns the
/// aligned poses covering its observation frames.
fn aligned_observation_poses(
    track: &SignTrack,
    traj: &Trajectory,
    opts: &TriangulationOptions,
) -> Result<(Vec<FramePose>, SimilarityTransform), TriangulateError> {
    let indices = alignment_indices(track, traj, opts)?;
    let source: Vec<Point3<f64>> = indices
        .iter()
        .map(|&i| traj.poses()[i].position())
        .collect();
    let target: Vec<Point3<f64>> = indices
        .iter()
        .map(|&i| Point3::from(traj.gps()[i]))
        .collect();
    let fit = umeyama_fit(&source, &target)?;

    let obs_poses: Vec<FramePose> = track
        .observations()
        .iter()
        .map(|obs| {
            traj.index_of(obs.frame_id)
                .map(|i| traj.poses()[i])
                .ok_or(TriangulateError::MissingPose(obs.frame_id))
        })
        .collect::<Result<_, _>>()?;
    Ok((apply_similarity(&fit.transform, &obs_poses), fit.transform))
}

/// Runs the per-sign pipeline: mode-dependent alignment, midpoint
/// initialization, reprojection refinement, relative positions, and the
/// discard rule rejecting any sign with a non-positive relative depth.
pub fn triangulate_track(
    track: &SignTrack,
    traj: &Trajectory,
    calib: &Calibration,
    opts: &TriangulationOptions,
) -> Result<TriangulatedSign, TriangulateError> {
    if track.len() < 2 {
        return Err(TriangulateError::InsufficientObservations(track.len()));
    }
    let (aligned, _) = aligned_observation_poses(track, traj, opts)?;

    let initial = midpoint_triangulate(track, &aligned, calib)?;
    check_depths(&initial, track, &aligned)?;

    let refined = refine_ba(&initial, track, &aligned, calib, &opts.ba)?;
    let rel_positions = relative_positions(&refined.position, track, &aligned)?;
    for (frame_id, rel) in &rel_positions {
        if rel.z <= 0.0 {
            return Err(TriangulateError::NegativeDepth {
                frame_id: *frame_id,
                z: rel.z,
            });
        }
    }

    let geo = from_mercator(
        Vector2::new(refined.position.x, refined.position.y),
        traj.mercator(),
    );
    Ok(TriangulatedSign {
        sign_id: track.sign_id(),
        class_label: track.class_label().to_string(),
        abs_position: refined.position,
        rel_positions,
        geo,
        mode: opts.mode,
        residual_px: refined.mean_reprojection_px,
        frames: track.frame_ids(),
    })
}

fn check_depths(
    p: &Point3<f64>,
    track: &SignTrack,
    poses: &[FramePose],
) -> Result<(), TriangulateError> {
    for obs in track.observations() {
        let pose = pose_for(poses, obs.frame_id)?;
        let z = pose.world_to_camera(p).z;
        if z <= 0.0 {
            return Err(TriangulateError::NegativeDepth {
                frame_id: obs.frame_id,
                z,
            });
        }
    }
    Ok(())
}
