//! Trajectory utilities: polyline simplification for turn extraction and
//! closed-form similarity fitting of estimated camera positions to GPS.
//!
//! Poses are stored world-from-camera: `p_world = R p_cam + t`, with `t` the
//! camera center. The camera-from-world quantities needed by triangulation
//! are obtained by rigid inversion at the use site.

use crate::geo::{to_mercator, to_mercator_3d, GeoError, GpsFix, MercatorRef};
use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum AlignError {
    #[error("invalid pose for frame {frame_id}: {message}")]
    InvalidPose { frame_id: i64, message: String },
    #[error("pose and GPS lists have different lengths ({poses} vs {gps})")]
    LengthMismatch { poses: usize, gps: usize },
    #[error("frame ids not strictly increasing at index {index}")]
    NonIncreasingFrameIds { index: usize },
    #[error("no interior point retained: the trajectory has no turns")]
    NoTurns,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// World-from-camera pose of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePose {
    frame_id: i64,
    rotation: Rotation3<f64>,
    position: Point3<f64>,
}

const ORTHONORMALITY_TOL: f64 = 1e-9;

impl FramePose {
    pub fn new(
        frame_id: i64,
        rotation: Matrix3<f64>,
        position: Point3<f64>,
    ) -> Result<Self, AlignError> {
        let gram = rotation.transpose() * rotation;
        let defect = (gram - Matrix3::identity()).abs().max();
        if defect > ORTHONORMALITY_TOL {
            return Err(AlignError::InvalidPose {
                frame_id,
                message: format!("rotation not orthonormal (defect {defect:e})"),
            });
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMALITY_TOL {
            return Err(AlignError::InvalidPose {
                frame_id,
                message: format!("rotation determinant {} != +1", rotation.determinant()),
            });
        }
        if !position.coords.iter().all(|v| v.is_finite()) {
            return Err(AlignError::InvalidPose {
                frame_id,
                message: "position not finite".into(),
            });
        }
        Ok(Self {
            frame_id,
            rotation: Rotation3::from_matrix_unchecked(rotation),
            position,
        })
    }

    /// From a normalized world-from-camera quaternion (x, y, z, w) and camera
    /// center.
    pub fn from_quaternion(
        frame_id: i64,
        position: Point3<f64>,
        quat_xyzw: [f64; 4],
    ) -> Result<Self, AlignError> {
        let [x, y, z, w] = quat_xyzw;
        let norm = (x * x + y * y + z * z + w * w).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(AlignError::InvalidPose {
                frame_id,
                message: format!("quaternion norm {norm} != 1"),
            });
        }
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Self::new(frame_id, q.to_rotation_matrix().into_inner(), position)
    }

    pub(crate) fn new_unchecked(
        frame_id: i64,
        rotation: Rotation3<f64>,
        position: Point3<f64>,
    ) -> Self {
        Self {
            frame_id,
            rotation,
            position,
        }
    }

    pub fn frame_id(&self) -> i64 {
        self.frame_id
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn position(&self) -> Point3<f64> {
        self.position
    }

    /// World point into this frame's camera coordinates: `R^T (p - t)`.
    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.inverse() * (p - self.position))
    }

    /// Camera-frame point back to world coordinates.
    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        self.position + self.rotation * p.coords
    }
}

/// Whether GPS enters alignment with its altitude or with z fixed to 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignDims {
    Two,
    Three,
}

/// Time-indexed camera poses and co-indexed metric GPS positions for one
/// journey, together with the Mercator reference that produced them.
#[derive(Debug, Clone)]
pub struct Trajectory {
    poses: Vec<FramePose>,
    gps: Vec<Vector3<f64>>,
    mercator: MercatorRef,
}

impl Trajectory {
    pub fn new(
        poses: Vec<FramePose>,
        gps: Vec<Vector3<f64>>,
        mercator: MercatorRef,
    ) -> Result<Self, AlignError> {
        if poses.len() != gps.len() {
            return Err(AlignError::LengthMismatch {
                poses: poses.len(),
                gps: gps.len(),
            });
        }
        for i in 1..poses.len() {
            if poses[i].frame_id <= poses[i - 1].frame_id {
                return Err(AlignError::NonIncreasingFrameIds { index: i });
            }
        }
        Ok(Self {
            poses,
            gps,
            mercator,
        })
    }

    /// Builds a trajectory from raw GPS fixes co-indexed with the poses,
    /// converting them through the Mercator reference.
    pub fn from_fixes(
        poses: Vec<FramePose>,
        fixes: &[GpsFix],
        mercator: MercatorRef,
        dims: AlignDims,
    ) -> Result<Self, AlignError> {
        let gps = fixes
            .iter()
            .map(|f| match dims {
                AlignDims::Three => to_mercator_3d(&f.geo, &mercator),
                AlignDims::Two => {
                    let xy = to_mercator(&f.geo, &mercator);
                    Vector3::new(xy.x, xy.y, 0.0)
                }
            })
            .collect();
        Self::new(poses, gps, mercator)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[FramePose] {
        &self.poses
    }

    pub fn gps(&self) -> &[Vector3<f64>] {
        &self.gps
    }

    pub fn mercator(&self) -> &MercatorRef {
        &self.mercator
    }

    pub fn index_of(&self, frame_id: i64) -> Option<usize> {
        self.poses
            .binary_search_by_key(&frame_id, |p| p.frame_id)
            .ok()
    }
}

/// Distance from `p` to the segment `a..b` (endpoint distance when the
/// segment degenerates, which covers closed loops).
fn segment_distance(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn rdp_recurse(
    points: &[Vector2<f64>],
    start: usize,
    end: usize,
    epsilon: f64,
    keep: &mut Vec<usize>,
) {
    let mut max_dist = 0.0;
    let mut max_idx = start;
    for i in start + 1..end {
        let d = segment_distance(points[i], points[start], points[end]);
        if d > max_dist {
            max_dist = d;
            max_idx = i;
        }
    }
    if max_dist > epsilon {
        rdp_recurse(points, start, max_idx, epsilon, keep);
        keep.push(max_idx);
        rdp_recurse(points, max_idx, end, epsilon, keep);
    }
}

/// Ramer-Douglas-Peucker simplification. Returns the indices of retained
/// points in increasing order, always including the first and last; every
/// discarded point lies within `epsilon` of the retained polyline.
pub fn rdp_simplify(points: &[Vector2<f64>], epsilon: f64) -> Vec<usize> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    if points.len() < 2 {
        return (0..points.len()).collect();
    }
    let mut keep = vec![0];
    rdp_recurse(points, 0, points.len() - 1, epsilon, &mut keep);
    keep.push(points.len() - 1);
    keep
}

/// Turn extraction over a raw planar GPS track co-indexed with frame ids.
/// See [`extract_turn_segments`].
pub fn turn_segments_from_track(
    frame_ids: &[i64],
    planar: &[Vector2<f64>],
    epsilon: f64,
    window: usize,
) -> Result<Vec<(i64, i64)>, AlignError> {
    if window < 2 {
        return Err(AlignError::InvalidParameter(format!(
            "turn window must be at least 2 frames, got {window}"
        )));
    }
    if epsilon <= 0.0 {
        return Err(AlignError::InvalidParameter(format!(
            "rdp epsilon must be positive, got {epsilon}"
        )));
    }
    if frame_ids.len() != planar.len() {
        return Err(AlignError::LengthMismatch {
            poses: frame_ids.len(),
            gps: planar.len(),
        });
    }
    let kept = rdp_simplify(planar, epsilon);
    let n = planar.len();
    let interior: Vec<usize> = kept.into_iter().filter(|&i| i != 0 && i != n - 1).collect();
    if interior.is_empty() {
        return Err(AlignError::NoTurns);
    }
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    for apex in interior {
        let lo = apex.saturating_sub(window);
        let hi = (apex + window).min(n - 1);
        match ranges.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => ranges.push((lo, hi)),
        }
    }
    Ok(ranges
        .into_iter()
        .map(|(a, b)| (frame_ids[a], frame_ids[b]))
        .collect())
}

/// Extracts the turn sub-sequences of a trajectory as inclusive frame-id
/// ranges: one range per interior RDP-retained GPS point, spanning
/// `window` frames on each side, clamped to the trajectory and merged when
/// overlapping. Fails with `NoTurns` when the track simplifies to a straight
/// segment.
pub fn extract_turn_segments(
    traj: &Trajectory,
    epsilon: f64,
    window: usize,
) -> Result<Vec<(i64, i64)>, AlignError> {
    let frame_ids: Vec<i64> = traj.poses.iter().map(|p| p.frame_id).collect();
    let planar: Vec<Vector2<f64>> = traj.gps.iter().map(|g| Vector2::new(g.x, g.y)).collect();
    turn_segments_from_track(&frame_ids, &planar, epsilon, window)
}

/// A similarity transform `p -> s R p + t` with positive scale and proper
/// rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    scale: f64,
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn new(
        scale: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, AlignError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(AlignError::DegenerateGeometry(format!(
                "scale must be positive, got {scale}"
            )));
        }
        let gram = rotation.transpose() * rotation;
        if (gram - Matrix3::identity()).abs().max() > ORTHONORMALITY_TOL
            || (rotation.determinant() - 1.0).abs() > ORTHONORMALITY_TOL
        {
            return Err(AlignError::DegenerateGeometry(
                "rotation not a proper orthonormal matrix".into(),
            ));
        }
        Ok(Self {
            scale,
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * v) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rotation.inverse();
        Self {
            scale: 1.0 / self.scale,
            rotation: inv_rot,
            translation: -(inv_rot * self.translation) / self.scale,
        }
    }
}

/// A fitted similarity along with the mean squared residual it achieves.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityFit {
    pub transform: SimilarityTransform,
    pub mse: f64,
}

/// One-sided Jacobi SVD of a 3x3 matrix: `a = U diag(d) V^T` with singular
/// values sorted descending.
///
/// Column rotations orthogonalize `a` in place, which keeps tiny singular
/// values accurate; the general-purpose bidiagonalization SVD loses several
/// digits on the near-rank-2 covariances this module fits, tilting the
/// rotation by far more than the problem's conditioning allows.
fn jacobi_svd3(a: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>, Matrix3<f64>) {
    let mut w = *a;
    let mut v = Matrix3::<f64>::identity();
    for _ in 0..60 {
        let mut converged = true;
        for p in 0..2 {
            for q in p + 1..3 {
                let wp = w.column(p).clone_owned();
                let wq = w.column(q).clone_owned();
                let app = wp.dot(&wp);
                let aqq = wq.dot(&wq);
                let apq = wp.dot(&wq);
                if apq.abs() <= f64::EPSILON * (app * aqq).sqrt() {
                    continue;
                }
                converged = false;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..3 {
                    let (a0, a1) = (w[(i, p)], w[(i, q)]);
                    w[(i, p)] = c * a0 - s * a1;
                    w[(i, q)] = s * a0 + c * a1;
                    let (b0, b1) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * b0 - s * b1;
                    v[(i, q)] = s * b0 + c * b1;
                }
            }
        }
        if converged {
            break;
        }
    }
    let mut cols: Vec<(f64, Vector3<f64>, Vector3<f64>)> = (0..3)
        .map(|i| {
            (
                w.column(i).norm(),
                w.column(i).clone_owned(),
                v.column(i).clone_owned(),
            )
        })
        .collect();
    cols.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut u = Matrix3::zeros();
    let mut d = Vector3::zeros();
    let mut vm = Matrix3::zeros();
    for (i, (norm, wc, vc)) in cols.into_iter().enumerate() {
        d[i] = norm;
        vm.set_column(i, &vc);
        if norm > 0.0 {
            u.set_column(i, &(wc / norm));
        }
    }
    // Complete the left basis for (near-)rank-deficient inputs.
    if d[2] <= f64::EPSILON * d[0].max(1.0) {
        let u2 = u.column(0).cross(&u.column(1));
        u.set_column(2, &u2);
        if d[1] <= f64::EPSILON * d[0].max(1.0) {
            let any = if u.column(0).x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            let u1 = u.column(0).cross(&any).normalize();
            u.set_column(1, &u1);
            let u2 = u.column(0).cross(&u.column(1));
            u.set_column(2, &u2);
        }
    }
    (u, d, vm)
}

/// Closed-form least-squares similarity between co-indexed point sets:
/// minimizes `(1/n) sum ||target_i - (s R source_i + t)||^2` via the SVD of
/// the cross-covariance with determinant-sign correction.
pub fn umeyama_fit(
    source: &[Point3<f64>],
    target: &[Point3<f64>],
) -> Result<SimilarityFit, AlignError> {
    if source.len() != target.len() {
        return Err(AlignError::LengthMismatch {
            poses: source.len(),
            gps: target.len(),
        });
    }
    let n = source.len();
    if n < 3 {
        return Err(AlignError::DegenerateGeometry(format!(
            "need at least 3 point pairs, got {n}"
        )));
    }
    let nf = n as f64;
    let mean_s: Vector3<f64> = source.iter().map(|p| p.coords).sum::<Vector3<f64>>() / nf;
    let mean_t: Vector3<f64> = target.iter().map(|p| p.coords).sum::<Vector3<f64>>() / nf;

    let mut sigma = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s.coords - mean_s;
        let dt = t.coords - mean_t;
        sigma += dt * ds.transpose();
        var_s += ds.norm_squared();
    }
    sigma /= nf;
    var_s /= nf;

    if var_s <= 1e-20 {
        return Err(AlignError::DegenerateGeometry(
            "source points are coincident".into(),
        ));
    }

    let (u, d, v) = jacobi_svd3(&sigma);
    if d[0] <= 1e-20 || d[1] <= 1e-12 * d[0] {
        return Err(AlignError::DegenerateGeometry(
            "point sets are collinear or coincident; rotation is not unique".into(),
        ));
    }

    // Reflection correction: flip the smallest singular direction when
    // det(U) det(V) < 0 so the rotation stays proper.
    let parity = if u.determinant() * v.determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let rotation = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, parity)) * v.transpose();
    let scale = (d[0] + d[1] + parity * d[2]) / var_s;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(AlignError::DegenerateGeometry(format!(
            "fitted scale {scale} is not positive"
        )));
    }
    let translation = mean_t - scale * (rotation * mean_s);

    let transform = SimilarityTransform {
        scale,
        rotation: Rotation3::from_matrix_unchecked(rotation),
        translation,
    };
    let mse = source
        .iter()
        .zip(target)
        .map(|(s, t)| (t.coords - transform.apply_point(s).coords).norm_squared())
        .sum::<f64>()
        / nf;
    Ok(SimilarityFit { transform, mse })
}

/// Maps every pose through the similarity: positions by `s R p + t`,
/// orientations by the world-frame rotation. Frame ids are preserved.
pub fn apply_similarity(tf: &SimilarityTransform, poses: &[FramePose]) -> Vec<FramePose> {
    poses
        .iter()
        .map(|p| {
            FramePose::new_unchecked(
                p.frame_id,
                tf.rotation * p.rotation,
                tf.apply_point(&p.position),
            )
        })
        .collect()
}
