//! Command-line front end for the sign-positioning pipeline: ingests pose,
//! GPS, detection, and calibration files, triangulates sign positions, and
//! emits maps, evaluation metrics, turn segments, and sensitivity grids.
//!
//! Exit codes: 0 on success, 2 on validation errors (bad schema, mismatched
//! frames, invalid config), 3 when a run produces no output (no turns, no
//! matches, every sign failed).

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{Point3, Vector2};
use serde::Deserialize;
use signpos::align::{turn_segments_from_track, AlignDims, FramePose};
use signpos::geo::{to_mercator, GeoPoint, MercatorRef};
use signpos::io;
use signpos::metrics::{ate_5, ate_full, sign_errors, SignGroundTruth, MATCH_GATE_M};
use signpos::pipeline::{run_triangulation, PipelineOptions};
use signpos::synth::{generate_journey, run_sweep, ScenarioSpec, SweepSpec};
use signpos::triangulate::{BaOptions, TrajectoryMode, TriangulatedSign};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "signpos",
    version,
    about = "3D traffic-sign positioning from monocular detections, GPS, and camera poses"
)]
struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Full,
    Short,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DimsArg {
    #[value(name = "2d")]
    Two,
    #[value(name = "3d")]
    Three,
}

#[derive(Subcommand)]
enum Command {
    /// Triangulate sign positions from pose, GPS, detection, and calibration files.
    Triangulate {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        gps: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        /// Output directory for map.json, relative.json, failures.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<ModeArg>,
        #[arg(long)]
        turn_window: Option<usize>,
        #[arg(long)]
        align_dims: Option<DimsArg>,
    },
    /// Compare a triangulated map against ground truth.
    Evaluate {
        #[arg(long)]
        map: PathBuf,
        /// relative.json written next to the map.
        #[arg(long)]
        rel: PathBuf,
        #[arg(long)]
        gt_signs: PathBuf,
        /// Reference (ground-truth) pose file; supplies GT relative
        /// positions and the ATE reference.
        #[arg(long)]
        ref_poses: PathBuf,
        /// Estimated pose file; enables the trajectory-error section.
        #[arg(long)]
        est_poses: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic journey bundle.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Scene seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a camera-parameter sensitivity sweep on a synthetic scenario.
    Sweep {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<ModeArg>,
    },
    /// Extract turn sub-sequences from a GPS track.
    Turns {
        #[arg(long)]
        gps: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rdp_epsilon: Option<f64>,
        #[arg(long)]
        turn_window: Option<usize>,
    },
}

enum CliError {
    Validation(String),
    NoOutput(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::NoOutput(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::NoOutput(m) => m,
        }
    }
}

fn validation(e: impl ToString) -> CliError {
    CliError::Validation(e.to_string())
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        validation(e)
    }
}

// ---- config ----------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    pipeline: PipelineSection,
    scenario: Option<ScenarioSpec>,
    sweep: Option<SweepSpec>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineSection {
    mode: Option<String>,
    rdp_epsilon: Option<f64>,
    turn_window: Option<usize>,
    align_dims: Option<String>,
    ba_max_iterations: Option<usize>,
    ba_gradient_tolerance: Option<f64>,
    ba_initial_damping: Option<f64>,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, CliError> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| validation(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| validation(format!("{}: {e}", p.display())))
        }
    }
}

fn parse_mode(s: &str) -> Result<TrajectoryMode, CliError> {
    match s {
        "full" => Ok(TrajectoryMode::Full),
        "short" => Ok(TrajectoryMode::Short),
        other => Err(validation(format!(
            "unknown mode '{other}' (expected full|short)"
        ))),
    }
}

fn parse_dims(s: &str) -> Result<AlignDims, CliError> {
    match s {
        "2d" => Ok(AlignDims::Two),
        "3d" => Ok(AlignDims::Three),
        other => Err(validation(format!(
            "unknown align_dims '{other}' (expected 2d|3d)"
        ))),
    }
}

/// Pipeline settings after merging defaults, config file, and flags.
struct Resolved {
    mode: TrajectoryMode,
    rdp_epsilon: f64,
    turn_window: usize,
    align_dims: AlignDims,
    ba: BaOptions,
}

fn resolve(
    cfg: &PipelineSection,
    default_mode: TrajectoryMode,
    mode_flag: Option<ModeArg>,
    window_flag: Option<usize>,
    dims_flag: Option<DimsArg>,
) -> Result<Resolved, CliError> {
    let mut mode = default_mode;
    if let Some(s) = &cfg.mode {
        mode = parse_mode(s)?;
    }
    if let Some(flag) = mode_flag {
        mode = match flag {
            ModeArg::Full => TrajectoryMode::Full,
            ModeArg::Short => TrajectoryMode::Short,
        };
    }
    let mut align_dims = AlignDims::Three;
    if let Some(s) = &cfg.align_dims {
        align_dims = parse_dims(s)?;
    }
    if let Some(flag) = dims_flag {
        align_dims = match flag {
            DimsArg::Two => AlignDims::Two,
            DimsArg::Three => AlignDims::Three,
        };
    }
    let defaults = BaOptions::default();
    let ba = BaOptions {
        max_iterations: cfg.ba_max_iterations.unwrap_or(defaults.max_iterations),
        gradient_tolerance: cfg
            .ba_gradient_tolerance
            .unwrap_or(defaults.gradient_tolerance),
        initial_damping: cfg.ba_initial_damping.unwrap_or(defaults.initial_damping),
    };
    let rdp_epsilon = cfg.rdp_epsilon.unwrap_or(2.0);
    let turn_window = window_flag.or(cfg.turn_window).unwrap_or(25);
    for (name, v) in [
        ("rdp_epsilon", rdp_epsilon),
        ("ba_gradient_tolerance", ba.gradient_tolerance),
        ("ba_initial_damping", ba.initial_damping),
    ] {
        if v <= 0.0 || v.is_nan() {
            return Err(validation(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(Resolved {
        mode,
        rdp_epsilon,
        turn_window,
        align_dims,
        ba,
    })
}

fn pipeline_options(r: &Resolved) -> PipelineOptions {
    PipelineOptions {
        mode: r.mode,
        half_window: r.turn_window,
        align_dims: r.align_dims,
        ba: r.ba,
    }
}

// ---- subcommands -----------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_triangulate(
    cfg: &ConfigFile,
    poses: &Path,
    gps: &Path,
    detections: &Path,
    calibration: &Path,
    out: &Path,
    mode: Option<ModeArg>,
    turn_window: Option<usize>,
    align_dims: Option<DimsArg>,
) -> Result<(), CliError> {
    let resolved = resolve(
        &cfg.pipeline,
        TrajectoryMode::Short,
        mode,
        turn_window,
        align_dims,
    )?;
    let poses = io::load_poses(poses)?;
    let fixes = io::load_gps(gps)?;
    let detections = io::load_detections(detections)?;
    let (calib, _) = io::load_calibration(calibration)?;

    let run = run_triangulation(
        &poses,
        &fixes,
        &detections,
        &calib,
        &pipeline_options(&resolved),
    )
    .map_err(validation)?;

    let ok = run.triangulated();
    let failures: Vec<io::FailureRecord> = run
        .failures()
        .into_iter()
        .map(io::FailureRecord::from)
        .collect();
    let map: Vec<io::MapRecord> = ok.iter().map(io::MapRecord::from).collect();
    let rel: Vec<io::RelativeRecord> = ok.iter().map(io::RelativeRecord::from).collect();

    io::save_map(&out.join("map.json"), &map)?;
    io::save_relative(&out.join("relative.json"), &rel)?;
    io::save_failures(&out.join("failures.json"), &failures)?;
    println!(
        "triangulated {} sign(s), {} failure(s) -> {}",
        map.len(),
        failures.len(),
        out.display()
    );
    for f in &failures {
        println!("  sign {} ({}): {}", f.sign_id, f.class, f.reason);
    }
    if map.is_empty() {
        return Err(CliError::NoOutput("every sign failed triangulation".into()));
    }
    Ok(())
}

/// Rebuilds in-memory signs from the map and relative files.
fn signs_from_files(
    map: &[io::MapRecord],
    rel: &[io::RelativeRecord],
) -> Result<Vec<TriangulatedSign>, CliError> {
    map.iter()
        .map(|r| {
            let rel_positions: BTreeMap<i64, Point3<f64>> = rel
                .iter()
                .find(|x| x.sign_id == r.sign_id)
                .map(|x| {
                    x.rel
                        .iter()
                        .map(|e| (e.frame_id, Point3::new(e.xyz[0], e.xyz[1], e.xyz[2])))
                        .collect()
                })
                .unwrap_or_default();
            let mode = parse_mode(&r.mode)?;
            let geo = GeoPoint::new(r.lat, r.lon, 0.0).map_err(validation)?;
            Ok(TriangulatedSign {
                sign_id: r.sign_id,
                class_label: r.class.clone(),
                abs_position: Point3::new(r.xyz[0], r.xyz[1], r.xyz[2]),
                rel_positions,
                geo,
                mode,
                residual_px: r.residual_px,
                frames: r.frames.clone(),
            })
        })
        .collect()
}

fn cmd_evaluate(
    map: &Path,
    rel: &Path,
    gt_signs: &Path,
    ref_poses: &Path,
    est_poses: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let map = io::load_map(map)?;
    let rel = io::load_relative(rel)?;
    let results = signs_from_files(&map, &rel)?;
    let reference = io::load_poses(ref_poses)?;
    let ref_frames: Vec<i64> = reference.iter().map(|p| p.frame_id()).collect();
    let gt: Vec<SignGroundTruth> = io::load_gt_signs(gt_signs)?
        .into_iter()
        .map(|g| g.with_relatives_from(&reference, &ref_frames))
        .collect();

    let report = sign_errors(&results, &gt, MATCH_GATE_M).map_err(|e| match e {
        signpos::metrics::MetricsError::NoMatches => CliError::NoOutput(e.to_string()),
        other => validation(other),
    })?;

    let ate = match est_poses {
        None => None,
        Some(path) => {
            let estimated = io::load_poses(path)?;
            let (est, reference): (Vec<FramePose>, Vec<FramePose>) = estimated
                .iter()
                .filter_map(|e| {
                    reference
                        .iter()
                        .find(|r| r.frame_id() == e.frame_id())
                        .map(|r| (*e, *r))
                })
                .unzip();
            let full = ate_full(&est, &reference).map_err(validation)?;
            let windowed = ate_5(&est, &reference).map_err(validation)?;
            Some(io::AteJson::new(full, &windowed))
        }
    };

    let report = io::EvaluationReport {
        signs: (&report).into(),
        ate,
    };
    io::save_report(out, &report)?;
    println!(
        "evaluated {} matched sign(s); abs mean {:.4} m -> {}",
        report.signs.matched,
        report.signs.abs_mean,
        out.display()
    );
    Ok(())
}

fn scenario_from(cfg: &ConfigFile, seed: Option<u64>) -> ScenarioSpec {
    let mut scenario = cfg
        .scenario
        .clone()
        .unwrap_or_else(|| ScenarioSpec::kitti_like(seed.unwrap_or(0)));
    if let Some(s) = seed {
        scenario.seed = s;
    }
    scenario
}

fn cmd_simulate(cfg: &ConfigFile, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let scenario = scenario_from(cfg, seed);
    let journey = generate_journey(&scenario).map_err(|e| match e {
        signpos::synth::SynthError::EmptyScene => CliError::NoOutput(e.to_string()),
        other => validation(other),
    })?;
    io::save_poses(&out.join("poses.csv"), &journey.slam_poses)?;
    io::save_poses(&out.join("gt_poses.csv"), &journey.gt_poses)?;
    io::save_gps(&out.join("gps.csv"), &journey.gps_fixes)?;
    io::save_detections(&out.join("detections.csv"), &journey.detections)?;
    io::save_calibration(
        &out.join("calibration.json"),
        &(&journey.calibration).into(),
    )?;
    io::save_gt_signs(&out.join("gt_signs.csv"), &journey.gt_signs)?;
    io::save_scenario(&out.join("scenario.json"), &scenario)?;
    println!(
        "simulated {} frames, {} detections of {} signs -> {}",
        journey.gt_poses.len(),
        journey.detections.len(),
        journey.gt_signs.len(),
        out.display()
    );
    Ok(())
}

fn grid_file_name(grid: &signpos::synth::SweepGrid) -> String {
    match grid.axis2 {
        None => format!("oat_{}.csv", grid.axis1.label()),
        Some(axis2) => {
            if grid.axis1 == signpos::synth::SweepAxis::FocalAndPrincipalPoint {
                "fpp_vs_distortion.csv".to_string()
            } else {
                format!("tat_{}_{}.csv", grid.axis1.label(), axis2.label())
            }
        }
    }
}

fn cmd_sweep(
    cfg: &ConfigFile,
    out: &Path,
    seed: Option<u64>,
    mode: Option<ModeArg>,
) -> Result<(), CliError> {
    let resolved = resolve(&cfg.pipeline, TrajectoryMode::Full, mode, None, None)?;
    let scenario = scenario_from(cfg, seed);
    let sweep = cfg.sweep.clone().unwrap_or_default();
    let grids = run_sweep(&scenario, &sweep, &pipeline_options(&resolved)).map_err(validation)?;

    let mut manifest_grids = Vec::new();
    for grid in &grids {
        let file = grid_file_name(grid);
        io::save_sweep_grid(&out.join(&file), grid)?;
        manifest_grids.push(io::SweepManifestGrid {
            axis1: grid.axis1.label().to_string(),
            axis2: grid.axis2.map(|a| a.label().to_string()),
            file,
        });
    }
    io::save_sweep_manifest(
        &out.join("manifest.json"),
        &io::SweepManifest {
            scenario,
            sweep,
            grids: manifest_grids,
        },
    )?;
    println!("wrote {} sweep grid(s) -> {}", grids.len(), out.display());
    Ok(())
}

fn cmd_turns(
    cfg: &ConfigFile,
    gps: &Path,
    out: &Path,
    rdp_epsilon: Option<f64>,
    turn_window: Option<usize>,
) -> Result<(), CliError> {
    let resolved = resolve(
        &cfg.pipeline,
        TrajectoryMode::Short,
        None,
        turn_window,
        None,
    )?;
    let epsilon = rdp_epsilon.unwrap_or(resolved.rdp_epsilon);
    let fixes = io::load_gps(gps)?;
    let mercator = MercatorRef::new(fixes[0].geo.lat()).map_err(validation)?;
    let frame_ids: Vec<i64> = fixes.iter().map(|f| f.frame_id).collect();
    let planar: Vec<Vector2<f64>> = fixes
        .iter()
        .map(|f| to_mercator(&f.geo, &mercator))
        .collect();
    let segments = turn_segments_from_track(&frame_ids, &planar, epsilon, resolved.turn_window)
        .map_err(|e| match e {
            signpos::align::AlignError::NoTurns => CliError::NoOutput(e.to_string()),
            other => validation(other),
        })?;
    io::save_turns(
        out,
        &io::TurnSegments {
            rdp_epsilon_m: epsilon,
            window_frames: resolved.turn_window,
            segments: segments.iter().map(|&(a, b)| [a, b]).collect(),
        },
    )?;
    println!("{} turn segment(s) -> {}", segments.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Triangulate {
            poses,
            gps,
            detections,
            calibration,
            out,
            mode,
            turn_window,
            align_dims,
        } => cmd_triangulate(
            &cfg,
            poses,
            gps,
            detections,
            calibration,
            out,
            *mode,
            *turn_window,
            *align_dims,
        ),
        Command::Evaluate {
            map,
            rel,
            gt_signs,
            ref_poses,
            est_poses,
            out,
        } => cmd_evaluate(map, rel, gt_signs, ref_poses, est_poses.as_deref(), out),
        Command::Simulate { out, seed } => cmd_simulate(&cfg, out, *seed),
        Command::Sweep { out, seed, mode } => cmd_sweep(&cfg, out, *seed, *mode),
        Command::Turns {
            gps,
            out,
            rdp_epsilon,
            turn_window,
        } => cmd_turns(&cfg, gps, out, *rdp_epsilon, *turn_window),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
