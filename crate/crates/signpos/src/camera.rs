//! Pinhole camera model with a two-parameter polynomial radial distortion.
//!
//! Projection uses the zero-skew matrix `[[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`
//! with explicit perspective division. Distortion acts on normalized
//! image-plane coordinates:
//!
//! ```text
//! (x_d, y_d) = (1 + l1 r^2 + l2 r^4) (x_u, y_u),   r^2 = x_u^2 + y_u^2
//! ```
//!
//! Undistortion inverts the scalar radial profile `g(r) = r (1 + l1 r^2 + l2 r^4)`
//! with a bracketed Newton solve. Invertibility over the working radius is
//! certified at construction by sampling `g'(r) = 1 + 3 l1 r^2 + 5 l2 r^4`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of radii sampled by the monotonicity certificate.
const MONOTONICITY_SAMPLES: usize = 64;
/// Iteration cap for the undistortion solve.
const UNDISTORT_MAX_ITERATIONS: usize = 50;
/// Residual tolerance for undistortion, in normalized units.
const UNDISTORT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Error)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid distortion: {0}")]
    InvalidDistortion(String),
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("undistortion did not reach {tolerance:e} within {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        tolerance: f64,
        residual: f64,
    },
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
}

/// A point in raw pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// A point on the normalized image plane (pixels mapped through `K^-1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
}

impl NormalizedPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn radius(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Zero-skew pinhole intrinsics plus image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    f_x: f64,
    f_y: f64,
    c_x: f64,
    c_y: f64,
    width: u32,
    height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        f_x: f64,
        f_y: f64,
        c_x: f64,
        c_y: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        for (name, v) in [("f_x", f_x), ("f_y", f_y), ("c_x", c_x), ("c_y", c_y)] {
            if !v.is_finite() {
                return Err(CameraError::InvalidIntrinsics(format!(
                    "{name} is not finite"
                )));
            }
        }
        if f_x <= 0.0 || f_y <= 0.0 {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive (f_x = {f_x}, f_y = {f_y})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(CameraError::InvalidIntrinsics(format!(
                "image size must be positive ({width}x{height})"
            )));
        }
        if c_x <= 0.0 || c_x >= width as f64 || c_y <= 0.0 || c_y >= height as f64 {
            return Err(CameraError::InvalidIntrinsics(format!(
                "principal point ({c_x}, {c_y}) outside the {width}x{height} image"
            )));
        }
        Ok(Self {
            f_x,
            f_y,
            c_x,
            c_y,
            width,
            height,
        })
    }

    pub fn f_x(&self) -> f64 {
        self.f_x
    }

    pub fn f_y(&self) -> f64 {
        self.f_y
    }

    pub fn c_x(&self) -> f64 {
        self.c_x
    }

    pub fn c_y(&self) -> f64 {
        self.c_y
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Maps a pixel through `K^-1` onto the normalized image plane.
    pub fn normalize(&self, p: PixelPoint) -> NormalizedPoint {
        NormalizedPoint::new((p.u - self.c_x) / self.f_x, (p.v - self.c_y) / self.f_y)
    }

    /// Maps a normalized image-plane point back to pixels.
    pub fn denormalize(&self, p: NormalizedPoint) -> PixelPoint {
        PixelPoint::new(self.f_x * p.x + self.c_x, self.f_y * p.y + self.c_y)
    }

    /// Whether a pixel lies inside the image rectangle.
    pub fn contains(&self, p: PixelPoint) -> bool {
        p.u >= 0.0 && p.u < self.width as f64 && p.v >= 0.0 && p.v < self.height as f64
    }

    /// Normalized radius of the farthest image corner.
    pub fn corner_radius(&self) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
            .iter()
            .map(|&(u, v)| self.normalize(PixelPoint::new(u, v)).radius())
            .fold(0.0, f64::max)
    }
}

/// Two-parameter radial distortion, certified invertible up to `working_radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialDistortion {
    lambda1: f64,
    lambda2: f64,
    working_radius: f64,
}

impl RadialDistortion {
    /// Builds a distortion model and certifies that the radial profile
    /// `g(r) = r (1 + l1 r^2 + l2 r^4)` is positive and strictly increasing
    /// over `[0, working_radius]`, so `undistort` has a unique solution there.
    pub fn new(lambda1: f64, lambda2: f64, working_radius: f64) -> Result<Self, CameraError> {
        if !lambda1.is_finite() || !lambda2.is_finite() {
            return Err(CameraError::InvalidDistortion(
                "coefficients must be finite".into(),
            ));
        }
        if !working_radius.is_finite() || working_radius <= 0.0 {
            return Err(CameraError::InvalidDistortion(format!(
                "working radius must be positive, got {working_radius}"
            )));
        }
        for i in 0..=MONOTONICITY_SAMPLES {
            let r = working_radius * i as f64 / MONOTONICITY_SAMPLES as f64;
            let r2 = r * r;
            let poly = 1.0 + lambda1 * r2 + lambda2 * r2 * r2;
            let slope = 1.0 + 3.0 * lambda1 * r2 + 5.0 * lambda2 * r2 * r2;
            if poly <= 0.0 || slope <= 0.0 {
                return Err(CameraError::InvalidDistortion(format!(
                    "profile not invertible at r = {r:.4} (poly = {poly:.4}, slope = {slope:.4}) \
                     for l1 = {lambda1}, l2 = {lambda2}"
                )));
            }
        }
        Ok(Self {
            lambda1,
            lambda2,
            working_radius,
        })
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn working_radius(&self) -> f64 {
        self.working_radius
    }

    /// `1 + l1 r^2 + l2 r^4`.
    fn polynomial(&self, r: f64) -> f64 {
        let r2 = r * r;
        1.0 + self.lambda1 * r2 + self.lambda2 * r2 * r2
    }

    /// Distorted radius `g(r) = r (1 + l1 r^2 + l2 r^4)`.
    fn profile(&self, r: f64) -> f64 {
        r * self.polynomial(r)
    }

    /// `g'(r) = 1 + 3 l1 r^2 + 5 l2 r^4`.
    fn profile_slope(&self, r: f64) -> f64 {
        let r2 = r * r;
        1.0 + 3.0 * self.lambda1 * r2 + 5.0 * self.lambda2 * r2 * r2
    }
}

/// Applies radial distortion to an undistorted normalized point.
pub fn distort(p: NormalizedPoint, d: &RadialDistortion) -> NormalizedPoint {
    let scale = d.polynomial(p.radius());
    NormalizedPoint::new(scale * p.x, scale * p.y)
}

/// Inverts `distort`: finds `p_u` with `distort(p_u) = p` to 1e-10 in
/// normalized units.
///
/// The radial profile is strictly increasing over the working radius, so the
/// scalar root is found by Newton steps bracketed in `[0, working_radius]`.
/// Inputs outside the image of the profile fail with `NonConvergence`.
pub fn undistort(p: NormalizedPoint, d: &RadialDistortion) -> Result<NormalizedPoint, CameraError> {
    let r_d = p.radius();
    if r_d == 0.0 {
        return Ok(NormalizedPoint::new(0.0, 0.0));
    }

    let mut lo = 0.0f64;
    let mut hi = d.working_radius;
    if d.profile(hi) < r_d - UNDISTORT_TOLERANCE {
        // No preimage within the certified radius.
        return Err(CameraError::NonConvergence {
            iterations: 0,
            tolerance: UNDISTORT_TOLERANCE,
            residual: r_d - d.profile(hi),
        });
    }

    // Newton with a bisection fallback; iterate down to rounding noise so the
    // result is far inside the 1e-10 contract, then verify it.
    let mut r = r_d.min(hi);
    let mut residual = d.profile(r) - r_d;
    let floor = f64::EPSILON * (1.0 + r_d);
    for _ in 0..UNDISTORT_MAX_ITERATIONS {
        if residual.abs() <= floor {
            break;
        }
        if residual > 0.0 {
            hi = r;
        } else {
            lo = r;
        }
        let slope = d.profile_slope(r);
        let mut next = r - residual / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if next == r {
            break;
        }
        r = next;
        residual = d.profile(r) - r_d;
    }
    if residual.abs() <= UNDISTORT_TOLERANCE {
        let scale = r / r_d;
        return Ok(NormalizedPoint::new(scale * p.x, scale * p.y));
    }
    Err(CameraError::NonConvergence {
        iterations: UNDISTORT_MAX_ITERATIONS,
        tolerance: UNDISTORT_TOLERANCE,
        residual: residual.abs(),
    })
}

/// Projects a camera-frame point (z forward, meters) to pixels.
pub fn project(p_cam: &Vector3<f64>, k: &CameraIntrinsics) -> Result<PixelPoint, CameraError> {
    if p_cam.z <= 0.0 {
        return Err(CameraError::BehindCamera { z: p_cam.z });
    }
    Ok(PixelPoint::new(
        k.f_x * p_cam.x / p_cam.z + k.c_x,
        k.f_y * p_cam.y / p_cam.z + k.c_y,
    ))
}

/// Per-group percentage errors applied by [`perturb`].
///
/// Focal lengths scale jointly, the principal point scales jointly, and the
/// distortion coefficients carry separate percentages so sweeps can couple or
/// decouple them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub focal_pct: f64,
    pub principal_point_pct: f64,
    pub lambda1_pct: f64,
    pub lambda2_pct: f64,
}

impl PerturbationSpec {
    pub fn zero() -> Self {
        Self {
            focal_pct: 0.0,
            principal_point_pct: 0.0,
            lambda1_pct: 0.0,
            lambda2_pct: 0.0,
        }
    }

    /// Scales both distortion coefficients by the same percentage.
    pub fn joint(focal_pct: f64, principal_point_pct: f64, distortion_pct: f64) -> Self {
        Self {
            focal_pct,
            principal_point_pct,
            lambda1_pct: distortion_pct,
            lambda2_pct: distortion_pct,
        }
    }
}

/// Returns a copy of the calibration with each parameter group multiplied by
/// `1 + pct/100`. Inputs are untouched; results violating the type invariants
/// are rejected.
pub fn perturb(
    k: &CameraIntrinsics,
    d: &RadialDistortion,
    spec: &PerturbationSpec,
) -> Result<(CameraIntrinsics, RadialDistortion), CameraError> {
    for (name, pct) in [
        ("focal", spec.focal_pct),
        ("principal point", spec.principal_point_pct),
        ("lambda1", spec.lambda1_pct),
        ("lambda2", spec.lambda2_pct),
    ] {
        if !pct.is_finite() || !(-100.0..=100.0).contains(&pct) {
            return Err(CameraError::InvalidPerturbation(format!(
                "{name} percentage {pct} outside [-100, 100]"
            )));
        }
    }
    let fs = 1.0 + spec.focal_pct / 100.0;
    let ps = 1.0 + spec.principal_point_pct / 100.0;
    let k2 = CameraIntrinsics::new(
        k.f_x * fs,
        k.f_y * fs,
        k.c_x * ps,
        k.c_y * ps,
        k.width,
        k.height,
    )
    .map_err(|e| CameraError::InvalidPerturbation(e.to_string()))?;
    let l1 = d.lambda1 * (1.0 + spec.lambda1_pct / 100.0);
    let l2 = d.lambda2 * (1.0 + spec.lambda2_pct / 100.0);
    let radius = working_radius_for(&k2, l1, l2)
        .map_err(|e| CameraError::InvalidPerturbation(e.to_string()))?;
    let d2 = RadialDistortion::new(l1, l2, radius)
        .map_err(|e| CameraError::InvalidPerturbation(e.to_string()))?;
    Ok((k2, d2))
}

/// Intrinsics plus distortion, with a working radius wide enough to undistort
/// every in-image observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub intrinsics: CameraIntrinsics,
    pub distortion: RadialDistortion,
}

/// Working radius for a coefficient pair under the given intrinsics: 1.05
/// times the undistorted preimage of the farthest image corner.
///
/// For compressive distortion (l1 < 0) the preimage of the corner lies well
/// beyond the corner's raw normalized radius, so the bound is grown until the
/// profile reaches the corner, validating monotonicity along the way.
fn working_radius_for(
    k: &CameraIntrinsics,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64, CameraError> {
    let r_corner = k.corner_radius();
    let mut hi = r_corner;
    loop {
        let candidate = RadialDistortion::new(lambda1, lambda2, hi)?;
        if candidate.profile(hi) >= r_corner {
            let preimage = invert_profile(&candidate, r_corner);
            return Ok(preimage * 1.05);
        }
        hi *= 1.1;
        if hi > 4.0 * r_corner {
            return Err(CameraError::InvalidDistortion(format!(
                "profile never reaches the image corner (l1 = {lambda1}, l2 = {lambda2})"
            )));
        }
    }
}

/// Bisection root of `profile(r) = target` on `[0, d.working_radius]`;
/// the profile is certified increasing there.
fn invert_profile(d: &RadialDistortion, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, d.working_radius);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if d.profile(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl Calibration {
    pub fn new(
        intrinsics: CameraIntrinsics,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<Self, CameraError> {
        let radius = working_radius_for(&intrinsics, lambda1, lambda2)?;
        Ok(Self {
            intrinsics,
            distortion: RadialDistortion::new(lambda1, lambda2, radius)?,
        })
    }

    pub fn perturbed(&self, spec: &PerturbationSpec) -> Result<Self, CameraError> {
        let (intrinsics, distortion) = perturb(&self.intrinsics, &self.distortion, spec)?;
        Ok(Self {
            intrinsics,
            distortion,
        })
    }

    /// Rectifies a raw (distorted) pixel observation: `K^-1`, radial inverse,
    /// then `K` again. K itself stays unchanged as the rectified matrix.
    pub fn undistort_pixel(&self, p: PixelPoint) -> Result<PixelPoint, CameraError> {
        let n = undistort(self.intrinsics.normalize(p), &self.distortion)?;
        Ok(self.intrinsics.denormalize(n))
    }

    /// Projects a camera-frame point through the full model, distortion
    /// included. Used when synthesizing raw observations.
    pub fn project_distorted(&self, p_cam: &Vector3<f64>) -> Result<PixelPoint, CameraError> {
        if p_cam.z <= 0.0 {
            return Err(CameraError::BehindCamera { z: p_cam.z });
        }
        let n = NormalizedPoint::new(p_cam.x / p_cam.z, p_cam.y / p_cam.z);
        Ok(self.intrinsics.denormalize(distort(n, &self.distortion)))
    }
}

/// On-disk calibration schema: a flat JSON object of numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl CalibrationFile {
    pub fn build(&self) -> Result<Calibration, CameraError> {
        Calibration::new(
            CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)?,
            self.lambda1,
            self.lambda2,
        )
    }
}

impl From<&Calibration> for CalibrationFile {
    fn from(c: &Calibration) -> Self {
        Self {
            fx: c.intrinsics.f_x(),
            fy: c.intrinsics.f_y(),
            cx: c.intrinsics.c_x(),
            cy: c.intrinsics.c_y(),
            width: c.intrinsics.width(),
            height: c.intrinsics.height(),
            lambda1: c.distortion.lambda1(),
            lambda2: c.distortion.lambda2(),
        }
    }
}
