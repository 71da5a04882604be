//! End-to-end journey triangulation: validates that pose, GPS, and detection
//! files describe the same frames, builds the Mercator trajectory, and fans
//! out one triangulation task per sign track.
//!
//! Per-sign work is independent and side-effect free; results are merged in
//! sign-id order regardless of scheduling.

use crate::align::{AlignDims, AlignError, FramePose, Trajectory};
use crate::camera::{Calibration, CameraError};
use crate::geo::{GeoError, GpsFix, MercatorRef};
use crate::triangulate::{
    group_tracks, triangulate_track, BaOptions, SignObservation, SignTrack, TrajectoryMode,
    TriangulateError, TriangulatedSign, TriangulationOptions,
};
use rayon::prelude::*;
use thiserror::Error;

const MAX_LISTED_FRAMES: usize = 8;

fn summarize_frames(frames: &[i64]) -> String {
    let shown: Vec<String> = frames
        .iter()
        .take(MAX_LISTED_FRAMES)
        .map(|f| f.to_string())
        .collect();
    if frames.len() > MAX_LISTED_FRAMES {
        format!(
            "{} (+{} more)",
            shown.join(", "),
            frames.len() - MAX_LISTED_FRAMES
        )
    } else {
        shown.join(", ")
    }
}

#[derive(Debug, Clone, Error)]
pub enum PipelineError {
    #[error(
        "GPS file does not cover pose frames [{}]; poses missing for GPS frames [{}]",
        summarize_frames(missing_gps),
        summarize_frames(missing_poses)
    )]
    GpsFrameMismatch {
        missing_gps: Vec<i64>,
        missing_poses: Vec<i64>,
    },
    #[error("detections reference frames with no pose: [{}]", summarize_frames(.0))]
    DetectionFrameMismatch(Vec<i64>),
    #[error("observation of sign {sign_id} in frame {frame_id} at ({u}, {v}) is outside the {width}x{height} image")]
    ObservationOutOfBounds {
        sign_id: u64,
        frame_id: i64,
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },
    #[error("no pose rows were provided")]
    EmptyTrajectory,
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Track(#[from] TriangulateError),
}

/// Knobs shared by a full pipeline run.
#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub mode: TrajectoryMode,
    /// Short-mode alignment padding on each side of a sign's observations.
    pub half_window: usize,
    pub align_dims: AlignDims,
    pub ba: BaOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            mode: TrajectoryMode::Full,
            half_window: 25,
            align_dims: AlignDims::Three,
            ba: BaOptions::default(),
        }
    }
}

impl PipelineOptions {
    fn triangulation(&self) -> TriangulationOptions {
        TriangulationOptions {
            mode: self.mode,
            half_window: self.half_window,
            ba: self.ba,
        }
    }
}

/// A sign the pipeline could not triangulate, kept as a first-class record.
#[derive(Debug, Clone)]
pub struct SignFailure {
    pub sign_id: u64,
    pub class_label: String,
    pub frames: Vec<i64>,
    pub reason: TriangulateError,
}

/// Outcome of one journey: the aligned-input trajectory plus one record per
/// sign, ordered by sign id.
#[derive(Debug)]
pub struct PipelineRun {
    pub trajectory: Trajectory,
    pub outcomes: Vec<Result<TriangulatedSign, SignFailure>>,
}

impl PipelineRun {
    pub fn triangulated(&self) -> Vec<TriangulatedSign> {
        self.outcomes
            .iter()
            .filter_map(|o| o.as_ref().ok().cloned())
            .collect()
    }

    pub fn failures(&self) -> Vec<&SignFailure> {
        self.outcomes
            .iter()
            .filter_map(|o| o.as_ref().err())
            .collect()
    }
}

/// Joins poses with GPS fixes by frame id, failing with a diff summary when
/// the files disagree, and anchors the Mercator plane at the first fix.
pub fn build_trajectory(
    poses: &[FramePose],
    fixes: &[GpsFix],
    dims: AlignDims,
) -> Result<Trajectory, PipelineError> {
    if poses.is_empty() {
        return Err(PipelineError::EmptyTrajectory);
    }
    let mut missing_gps = Vec::new();
    let mut ordered = Vec::with_capacity(poses.len());
    for pose in poses {
        match fixes.iter().find(|f| f.frame_id == pose.frame_id()) {
            Some(fix) => ordered.push(*fix),
            None => missing_gps.push(pose.frame_id()),
        }
    }
    let missing_poses: Vec<i64> = fixes
        .iter()
        .filter(|f| poses.iter().all(|p| p.frame_id() != f.frame_id))
        .map(|f| f.frame_id)
        .collect();
    if !missing_gps.is_empty() || !missing_poses.is_empty() {
        return Err(PipelineError::GpsFrameMismatch {
            missing_gps,
            missing_poses,
        });
    }
    let mercator = MercatorRef::new(ordered[0].geo.lat())?;
    Ok(Trajectory::from_fixes(
        poses.to_vec(),
        &ordered,
        mercator,
        dims,
    )?)
}

fn validate_detections(
    detections: &[SignObservation],
    poses: &[FramePose],
    calib: &Calibration,
) -> Result<(), PipelineError> {
    let mut missing: Vec<i64> = detections
        .iter()
        .filter(|d| poses.iter().all(|p| p.frame_id() != d.frame_id))
        .map(|d| d.frame_id)
        .collect();
    missing.sort_unstable();
    missing.dedup();
    if !missing.is_empty() {
        return Err(PipelineError::DetectionFrameMismatch(missing));
    }
    for d in detections {
        if !calib.intrinsics.contains(d.pixel) {
            return Err(PipelineError::ObservationOutOfBounds {
                sign_id: d.sign_id,
                frame_id: d.frame_id,
                u: d.pixel.u,
                v: d.pixel.v,
                width: calib.intrinsics.width(),
                height: calib.intrinsics.height(),
            });
        }
    }
    Ok(())
}

fn failure_for(track: &SignTrack, reason: TriangulateError) -> SignFailure {
    SignFailure {
        sign_id: track.sign_id(),
        class_label: track.class_label().to_string(),
        frames: track.frame_ids(),
        reason,
    }
}

/// Validates the journey inputs and triangulates every sign track.
pub fn run_triangulation(
    poses: &[FramePose],
    fixes: &[GpsFix],
    detections: &[SignObservation],
    calib: &Calibration,
    opts: &PipelineOptions,
) -> Result<PipelineRun, PipelineError> {
    let trajectory = build_trajectory(poses, fixes, opts.align_dims)?;
    validate_detections(detections, poses, calib)?;
    let tracks = group_tracks(detections)?;
    let topts = opts.triangulation();
    let outcomes: Vec<Result<TriangulatedSign, SignFailure>> = tracks
        .par_iter()
        .map(|track| {
            triangulate_track(track, &trajectory, calib, &topts).map_err(|e| failure_for(track, e))
        })
        .collect();
    Ok(PipelineRun {
        trajectory,
        outcomes,
    })
}
