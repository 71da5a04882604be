//! Evaluation metrics: absolute trajectory error over full trajectories and
//! sliding 5-frame windows, and relative/absolute sign-positioning errors
//! with per-sequence normalization.
//!
//! Trajectory alignment uses the same scale-aware similarity fit as the
//! positioning pipeline, matching scale-ambiguous monocular evaluation
//! practice.

use crate::align::{umeyama_fit, AlignError, FramePose};
use crate::triangulate::{TrajectoryMode, TriangulatedSign};
use nalgebra::Point3;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum MetricsError {
    #[error("trajectories have different lengths ({estimated} vs {reference})")]
    LengthMismatch { estimated: usize, reference: usize },
    #[error("need at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("every alignment window was degenerate")]
    NoValidWindows,
    #[error("no estimated sign matched ground truth within the gate")]
    NoMatches,
    #[error(transparent)]
    Alignment(#[from] AlignError),
}

/// Ground-truth position of one sign, with optional per-frame camera-frame
/// positions for relative-error evaluation.
#[derive(Debug, Clone)]
pub struct SignGroundTruth {
    pub sign_id: u64,
    pub class_label: String,
    pub abs_position: Point3<f64>,
    pub rel_positions: Option<BTreeMap<i64, Point3<f64>>>,
}

impl SignGroundTruth {
    /// Fills in relative positions from reference poses for the given frames.
    pub fn with_relatives_from(mut self, poses: &[FramePose], frames: &[i64]) -> Self {
        let map: BTreeMap<i64, Point3<f64>> = frames
            .iter()
            .filter_map(|fid| {
                poses
                    .iter()
                    .find(|p| p.frame_id() == *fid)
                    .map(|p| (*fid, p.world_to_camera(&self.abs_position)))
            })
            .collect();
        self.rel_positions = Some(map);
        self
    }
}

/// Sign-positioning errors of one run, mirroring the per-sequence table
/// columns: e_f / e_s, the sign count m, and the normalized variants e/m.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Mean relative error (m) over full-mode signs, when any.
    pub rel_mean_full: Option<f64>,
    /// Mean relative error (m) over short-mode signs, when any.
    pub rel_mean_short: Option<f64>,
    /// Number of successfully triangulated signs.
    pub triangulated: usize,
    /// Signs matched against ground truth.
    pub matched: usize,
    /// rel_mean_full / m.
    pub rel_norm_full: Option<f64>,
    /// rel_mean_short / m.
    pub rel_norm_short: Option<f64>,
    /// Mean absolute error (m) over matched signs.
    pub abs_mean: f64,
}

/// RMSE of camera positions after one closed-form similarity alignment of
/// the whole estimated trajectory onto the reference.
pub fn ate_full(estimated: &[FramePose], reference: &[FramePose]) -> Result<f64, MetricsError> {
    if estimated.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            estimated: estimated.len(),
            reference: reference.len(),
        });
    }
    if estimated.len() < 3 {
        return Err(MetricsError::TooFewFrames {
            needed: 3,
            got: estimated.len(),
        });
    }
    let src: Vec<Point3<f64>> = estimated.iter().map(|p| p.position()).collect();
    let dst: Vec<Point3<f64>> = reference.iter().map(|p| p.position()).collect();
    let fit = umeyama_fit(&src, &dst)?;
    let sq_sum: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (d - fit.transform.apply_point(s)).norm_squared())
        .sum();
    Ok((sq_sum / src.len() as f64).sqrt())
}

/// ATE statistics over sliding 5-frame windows, each aligned independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ate5 {
    pub mean: f64,
    pub std: f64,
    /// Windows that produced an RMSE.
    pub windows: usize,
    /// Windows skipped because their alignment was degenerate.
    pub skipped: usize,
}

const ATE_WINDOW: usize = 5;

/// Aligns every consecutive 5-frame window on its own and reports the mean
/// and standard deviation of the per-window RMSE. Degenerate windows
/// (collinear or coincident positions) are skipped and counted.
pub fn ate_5(estimated: &[FramePose], reference: &[FramePose]) -> Result<Ate5, MetricsError> {
    if estimated.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            estimated: estimated.len(),
            reference: reference.len(),
        });
    }
    if estimated.len() < ATE_WINDOW {
        return Err(MetricsError::TooFewFrames {
            needed: ATE_WINDOW,
            got: estimated.len(),
        });
    }
    let mut rmses = Vec::new();
    let mut skipped = 0usize;
    for start in 0..=estimated.len() - ATE_WINDOW {
        match ate_full(
            &estimated[start..start + ATE_WINDOW],
            &reference[start..start + ATE_WINDOW],
        ) {
            Ok(rmse) => rmses.push(rmse),
            Err(MetricsError::Alignment(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if rmses.is_empty() {
        return Err(MetricsError::NoValidWindows);
    }
    let n = rmses.len() as f64;
    let mean = rmses.iter().sum::<f64>() / n;
    let var = rmses.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(Ate5 {
        mean,
        std: var.sqrt(),
        windows: rmses.len(),
        skipped,
    })
}

/// Deterministic matching of results to ground truth: identical sign ids
/// first, then greedy nearest neighbor within the gate (distance ties broken
/// by sign id).
fn match_signs<'a>(
    results: &'a [TriangulatedSign],
    gt: &'a [SignGroundTruth],
    gate_m: f64,
) -> Vec<(&'a TriangulatedSign, &'a SignGroundTruth)> {
    let mut sorted: Vec<&TriangulatedSign> = results.iter().collect();
    sorted.sort_by_key(|r| r.sign_id);

    let mut gt_used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for r in sorted {
        match gt.iter().position(|g| g.sign_id == r.sign_id) {
            Some(i) if !gt_used[i] => {
                gt_used[i] = true;
                pairs.push((r, &gt[i]));
            }
            _ => unmatched.push(r),
        }
    }

    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (ri, r) in unmatched.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            if gt_used[gi] {
                continue;
            }
            let d = (r.abs_position - g.abs_position).norm();
            if d <= gate_m {
                candidates.push((d, ri, gi));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(unmatched[a.1].sign_id.cmp(&unmatched[b.1].sign_id))
            .then(gt[a.2].sign_id.cmp(&gt[b.2].sign_id))
    });
    let mut result_used = vec![false; unmatched.len()];
    for (_, ri, gi) in candidates {
        if !result_used[ri] && !gt_used[gi] {
            result_used[ri] = true;
            gt_used[gi] = true;
            pairs.push((unmatched[ri], &gt[gi]));
        }
    }
    pairs
}

/// Mean over observation frames of the camera-frame position error, when the
/// ground truth carries relative positions for common frames.
fn relative_error(r: &TriangulatedSign, g: &SignGroundTruth) -> Option<f64> {
    let gt_rel = g.rel_positions.as_ref()?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (frame, est) in &r.rel_positions {
        if let Some(truth) = gt_rel.get(frame) {
            sum += (est - truth).norm();
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Default matching gate in meters.
pub const MATCH_GATE_M: f64 = 5.0;

/// Compares triangulated signs against ground truth. The relative error of a
/// sign is the mean over its observation frames of the camera-frame position
/// error; the absolute error is the world-frame distance. The normalized
/// columns divide the means by the number of successfully triangulated signs.
pub fn sign_errors(
    results: &[TriangulatedSign],
    gt: &[SignGroundTruth],
    gate_m: f64,
) -> Result<ErrorReport, MetricsError> {
    let pairs = match_signs(results, gt, gate_m);
    if pairs.is_empty() {
        return Err(MetricsError::NoMatches);
    }
    let m = results.len();

    let mut abs_sum = 0.0;
    let mut rel: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    for (r, g) in &pairs {
        abs_sum += (r.abs_position - g.abs_position).norm();
        if let Some(e) = relative_error(r, g) {
            let slot = rel.entry(r.mode.as_str()).or_insert((0.0, 0));
            slot.0 += e;
            slot.1 += 1;
        }
    }
    let mean_of = |mode: TrajectoryMode| {
        rel.get(mode.as_str())
            .map(|(sum, count)| sum / *count as f64)
    };
    let rel_mean_full = mean_of(TrajectoryMode::Full);
    let rel_mean_short = mean_of(TrajectoryMode::Short);
    Ok(ErrorReport {
        rel_mean_full,
        rel_mean_short,
        triangulated: m,
        matched: pairs.len(),
        rel_norm_full: rel_mean_full.map(|e| e / m as f64),
        rel_norm_short: rel_mean_short.map(|e| e / m as f64),
        abs_mean: abs_sum / pairs.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::SimilarityTransform;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Rotation3, Vector3};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn curved_trajectory(n: usize) -> Vec<FramePose> {
        (0..n)
            .map(|i| {
                let t = i as f64;
                FramePose::new(
                    i as i64,
                    Rotation3::from_euler_angles(0.0, 0.01 * t, 0.0).into_inner(),
                    Point3::new(t, (0.05 * t).sin() * 8.0, 0.02 * t * t),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn ate_full_zero_on_identical_trajectories() {
        let traj = curved_trajectory(40);
        assert!(ate_full(&traj, &traj).unwrap() < 1e-9);
    }

    #[test]
    fn ate_full_absorbs_constant_offset() {
        let reference = curved_trajectory(40);
        let offset =
            SimilarityTransform::new(1.0, Matrix3::identity(), Vector3::new(100.0, -30.0, 4.0))
                .unwrap();
        let estimated = crate::align::apply_similarity(&offset, &reference);
        assert!(ate_full(&estimated, &reference).unwrap() < 1e-9);
    }

    #[test]
    fn ate_full_invariant_under_global_similarity() {
        let reference = curved_trajectory(40);
        let mut rng = StdRng::seed_from_u64(9);
        let mut estimated = reference.clone();
        // Perturb the estimate, then warp it by an arbitrary similarity.
        estimated = estimated
            .iter()
            .map(|p| {
                FramePose::new(
                    p.frame_id(),
                    p.rotation().matrix().clone_owned(),
                    p.position()
                        + Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0),
                )
                .unwrap()
            })
            .collect();
        let base = ate_full(&estimated, &reference).unwrap();
        let warp = SimilarityTransform::new(
            2.3,
            Rotation3::from_euler_angles(0.7, -0.2, 1.4).into_inner(),
            Vector3::new(19.0, 3.0, -11.0),
        )
        .unwrap();
        let warped = crate::align::apply_similarity(&warp, &estimated);
        let after = ate_full(&warped, &reference).unwrap();
        assert_relative_eq!(base, after, epsilon = 1e-9);
    }

    #[test]
    fn ate_full_noise_band_matches_direct_formula() {
        let reference = curved_trajectory(60);
        let mut rng = StdRng::seed_from_u64(17);
        let gauss = |rng: &mut StdRng, sigma: f64| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        // sigma = 0.1 m of total per-frame position noise, split over axes.
        let axis_sigma = 0.1 / 3.0f64.sqrt();
        let mut in_band = 0;
        for _ in 0..20 {
            let estimated: Vec<FramePose> = reference
                .iter()
                .map(|p| {
                    FramePose::new(
                        p.frame_id(),
                        p.rotation().matrix().clone_owned(),
                        p.position()
                            + Vector3::new(
                                gauss(&mut rng, axis_sigma),
                                gauss(&mut rng, axis_sigma),
                                gauss(&mut rng, axis_sigma),
                            ),
                    )
                    .unwrap()
                })
                .collect();
            let rmse = ate_full(&estimated, &reference).unwrap();

            // Direct recomputation: fit, then the explicit RMSE formula.
            let src: Vec<Point3<f64>> = estimated.iter().map(|p| p.position()).collect();
            let dst: Vec<Point3<f64>> = reference.iter().map(|p| p.position()).collect();
            let fit = umeyama_fit(&src, &dst).unwrap();
            let direct = (src
                .iter()
                .zip(&dst)
                .map(|(s, d)| (d - fit.transform.apply_point(s)).norm_squared())
                .sum::<f64>()
                / src.len() as f64)
                .sqrt();
            assert_relative_eq!(rmse, direct, epsilon = 1e-12);
            if (0.05..=0.15).contains(&rmse) {
                in_band += 1;
            }
        }
        assert!(in_band >= 15, "only {in_band}/20 runs inside [0.05, 0.15]");
    }

    #[test]
    fn ate5_zero_on_identical_trajectories() {
        let traj = curved_trajectory(30);
        let out = ate_5(&traj, &traj).unwrap();
        assert!(out.mean < 1e-9);
        assert!(out.std < 1e-9);
        assert_eq!(out.windows, 26);
        assert_eq!(out.skipped, 0);
    }

    #[test]
    fn ate5_much_smaller_than_full_under_slow_warp() {
        // Locally rigid but globally bent copy of the reference.
        let reference = curved_trajectory(80);
        let estimated: Vec<FramePose> = reference
            .iter()
            .map(|p| {
                let t = p.frame_id() as f64;
                let bend = Rotation3::from_euler_angles(0.0, 0.0, 0.00002 * t * t);
                FramePose::new(
                    p.frame_id(),
                    (bend * p.rotation()).into_inner(),
                    Point3::from(bend * p.position().coords),
                )
                .unwrap()
            })
            .collect();
        let full = ate_full(&estimated, &reference).unwrap();
        let windowed = ate_5(&estimated, &reference).unwrap();
        assert!(
            windowed.mean * 10.0 < full,
            "ate5 {} vs full {}",
            windowed.mean,
            full
        );
    }

    #[test]
    fn ate5_matches_windowed_recomputation() {
        let reference = curved_trajectory(25);
        let mut rng = StdRng::seed_from_u64(23);
        let estimated: Vec<FramePose> = reference
            .iter()
            .map(|p| {
                FramePose::new(
                    p.frame_id(),
                    p.rotation().matrix().clone_owned(),
                    p.position()
                        + Vector3::new(
                            rng.gen_range(-0.3..0.3),
                            rng.gen_range(-0.3..0.3),
                            rng.gen_range(-0.3..0.3),
                        ),
                )
                .unwrap()
            })
            .collect();
        let out = ate_5(&estimated, &reference).unwrap();

        let mut rmses = Vec::new();
        for start in 0..=estimated.len() - 5 {
            if let Ok(r) = ate_full(&estimated[start..start + 5], &reference[start..start + 5]) {
                rmses.push(r);
            }
        }
        let mean = rmses.iter().sum::<f64>() / rmses.len() as f64;
        let std =
            (rmses.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rmses.len() as f64).sqrt();
        assert_eq!(out.mean, mean);
        assert_eq!(out.std, std);
        assert_eq!(out.windows, rmses.len());
    }

    fn sign_at(id: u64, p: Point3<f64>, mode: TrajectoryMode) -> TriangulatedSign {
        let mut rel = BTreeMap::new();
        rel.insert(0i64, Point3::new(0.0, 0.0, p.coords.norm()));
        TriangulatedSign {
            sign_id: id,
            class_label: "stop".into(),
            abs_position: p,
            rel_positions: rel,
            geo: crate::geo::from_mercator(
                nalgebra::Vector2::new(p.x, p.y),
                &crate::geo::MercatorRef::new(0.0).unwrap(),
            ),
            mode,
            residual_px: 0.0,
            frames: vec![0],
        }
    }

    fn gt_of(sign: &TriangulatedSign) -> SignGroundTruth {
        SignGroundTruth {
            sign_id: sign.sign_id,
            class_label: sign.class_label.clone(),
            abs_position: sign.abs_position,
            rel_positions: Some(sign.rel_positions.clone()),
        }
    }

    #[test]
    fn sign_errors_zero_on_identical_inputs() {
        let results: Vec<TriangulatedSign> = (0..6)
            .map(|i| {
                sign_at(
                    i,
                    Point3::new(i as f64 * 10.0, 5.0, 2.0),
                    TrajectoryMode::Full,
                )
            })
            .collect();
        let gt: Vec<SignGroundTruth> = results.iter().map(gt_of).collect();
        let report = sign_errors(&results, &gt, MATCH_GATE_M).unwrap();
        assert_eq!(report.triangulated, 6);
        assert_eq!(report.matched, 6);
        assert_eq!(report.abs_mean, 0.0);
        assert_eq!(report.rel_mean_full, Some(0.0));
        assert_eq!(report.rel_mean_short, None);
    }

    #[test]
    fn sign_errors_unit_offset_gives_unit_abs_error() {
        let truth = sign_at(1, Point3::new(10.0, 0.0, 2.0), TrajectoryMode::Full);
        let mut moved = truth.clone();
        moved.abs_position += Vector3::new(1.0, 0.0, 0.0);
        let second = sign_at(2, Point3::new(30.0, 0.0, 2.0), TrajectoryMode::Full);
        let report = sign_errors(
            &[moved, second.clone()],
            &[gt_of(&truth), gt_of(&second)],
            MATCH_GATE_M,
        )
        .unwrap();
        assert_relative_eq!(report.abs_mean, 0.5, epsilon = 1e-12); // (1.0 + 0.0) / 2
    }

    #[test]
    fn sign_errors_matches_standalone_recomputation() {
        let mut rng = StdRng::seed_from_u64(31);
        let mut results = Vec::new();
        let mut gt = Vec::new();
        for i in 0..10u64 {
            let p = Point3::new(
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(0.0..4.0),
            );
            let truth = sign_at(i, p, TrajectoryMode::Full);
            gt.push(gt_of(&truth));
            let mut est = truth.clone();
            est.abs_position += Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            for rel in est.rel_positions.values_mut() {
                *rel += Vector3::new(rng.gen_range(-0.1..0.1), 0.0, 0.0);
            }
            results.push(est);
        }
        let report = sign_errors(&results, &gt, MATCH_GATE_M).unwrap();

        // Standalone recomputation from the raw values.
        let mut abs_sum = 0.0;
        let mut rel_sum = 0.0;
        for (est, truth) in results.iter().zip(&gt) {
            abs_sum += (est.abs_position - truth.abs_position).norm();
            let gt_rel = truth.rel_positions.as_ref().unwrap();
            let per_sign: f64 = est
                .rel_positions
                .iter()
                .map(|(f, p)| (p - gt_rel[f]).norm())
                .sum::<f64>()
                / est.rel_positions.len() as f64;
            rel_sum += per_sign;
        }
        assert_relative_eq!(report.abs_mean, abs_sum / 10.0, epsilon = 1e-12);
        assert_relative_eq!(
            report.rel_mean_full.unwrap(),
            rel_sum / 10.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            report.rel_norm_full.unwrap(),
            (rel_sum / 10.0) / 10.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sign_errors_is_permutation_invariant() {
        let mut rng = StdRng::seed_from_u64(37);
        let results: Vec<TriangulatedSign> = (0..8)
            .map(|i| {
                sign_at(
                    i,
                    Point3::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), 2.0),
                    TrajectoryMode::Short,
                )
            })
            .collect();
        let gt: Vec<SignGroundTruth> = results.iter().map(gt_of).collect();
        let base = sign_errors(&results, &gt, MATCH_GATE_M).unwrap();
        let mut shuffled_results = results.clone();
        shuffled_results.reverse();
        let mut shuffled_gt = gt.clone();
        shuffled_gt.swap(0, 5);
        shuffled_gt.swap(2, 7);
        let again = sign_errors(&shuffled_results, &shuffled_gt, MATCH_GATE_M).unwrap();
        assert_eq!(base, again);
    }

    #[test]
    fn sign_errors_nearest_neighbor_gate() {
        // Different ids, 1 m apart: matched through the distance gate.
        let result = sign_at(100, Point3::new(10.0, 0.0, 2.0), TrajectoryMode::Full);
        let mut truth = gt_of(&result);
        truth.sign_id = 7;
        truth.abs_position += Vector3::new(1.0, 0.0, 0.0);
        let report = sign_errors(std::slice::from_ref(&result), &[truth], MATCH_GATE_M).unwrap();
        assert_relative_eq!(report.abs_mean, 1.0, epsilon = 1e-12);

        // Beyond the gate: no match at all.
        let mut far = gt_of(&result);
        far.sign_id = 7;
        far.abs_position += Vector3::new(10.0, 0.0, 0.0);
        assert!(matches!(
            sign_errors(&[result], &[far], MATCH_GATE_M),
            Err(MetricsError::NoMatches)
        ));
    }

    #[test]
    fn table_normalization_identity() {
        // Twelve matched signs with relative errors averaging 0.994 must
        // produce e/m = 0.994/12: the printed 0.083 to three decimals.
        let mut results = Vec::new();
        let mut gt = Vec::new();
        let errors = [
            1.2, 0.8, 1.1, 0.9, 1.05, 0.95, 1.0, 1.0, 0.994, 0.994, 0.94, 1.0,
        ];
        let mean: f64 = errors.iter().sum::<f64>() / 12.0;
        let scale = 0.994 / mean;
        for (i, e) in errors.iter().enumerate() {
            let truth = sign_at(
                i as u64,
                Point3::new(i as f64 * 20.0, 0.0, 2.0),
                TrajectoryMode::Full,
            );
            gt.push(gt_of(&truth));
            let mut est = truth.clone();
            let rel = est.rel_positions.get_mut(&0).unwrap();
            rel.x += e * scale;
            results.push(est);
        }
        let report = sign_errors(&results, &gt, MATCH_GATE_M).unwrap();
        assert_relative_eq!(report.rel_mean_full.unwrap(), 0.994, epsilon = 1e-12);
        assert_relative_eq!(report.rel_norm_full.unwrap(), 0.994 / 12.0, epsilon = 1e-12);
        assert_eq!(format!("{:.3}", report.rel_norm_full.unwrap()), "0.083");
    }
}
