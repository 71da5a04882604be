//! Triangulation of absolute and relative 3D traffic-sign positions from
//! per-frame 2D detections, GPS fixes, and externally supplied camera poses,
//! plus a synthetic-journey harness that quantifies how positioning accuracy
//! degrades with errors in camera intrinsics and distortion coefficients.
//!
//! The pipeline, per journey: convert GPS to local Mercator meters, fit a
//! similarity aligning the up-to-scale camera trajectory to GPS, back-project
//! undistorted detections, triangulate each sign by the midpoint method,
//! refine by minimizing reprojection error, derive per-frame relative
//! positions, and discard any sign whose relative depth turns negative.

pub mod align;
pub mod camera;
pub mod geo;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod triangulate;

pub use align::{
    apply_similarity, extract_turn_segments, rdp_simplify, umeyama_fit, AlignDims, AlignError,
    FramePose, SimilarityFit, SimilarityTransform, Trajectory,
};
pub use camera::{
    distort, perturb, project, undistort, Calibration, CameraError, CameraIntrinsics,
    NormalizedPoint, PerturbationSpec, PixelPoint, RadialDistortion,
};
pub use geo::{from_mercator, to_mercator, GeoError, GeoPoint, GpsFix, MercatorRef};
pub use metrics::{ate_5, ate_full, sign_errors, Ate5, ErrorReport, MetricsError, SignGroundTruth};
pub use pipeline::{run_triangulation, PipelineError, PipelineOptions, PipelineRun, SignFailure};
pub use synth::{
    generate_journey, run_sweep, ScenarioSpec, SweepGrid, SweepSpec, SynthError, SyntheticJourney,
};
pub use triangulate::{
    group_tracks, midpoint_triangulate, refine_ba, relative_positions, triangulate_track,
    BaOptions, SignObservation, SignTrack, TrajectoryMode, TriangulateError, TriangulatedSign,
    TriangulationOptions,
};
