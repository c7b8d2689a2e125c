use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use featref::bundle::{
    featuremetric_ba, geometric_ba, select_references, BaError, BaMode, BaOptions, PoseHandling,
};
use featref::eval::{evaluate, EvalThresholds};
use featref::features::{
    extract_gradient_features, extract_ncc_intensity, extract_patches, FeaturePatch,
};
use featref::io::{self, IoError};
use featref::keypoint_adjust::{adjust_all, KaError, KaOptions};
use featref::matching::build_tentative_tracks;
use featref::optim::{OptimError, RobustLoss};
use featref::pipeline::{triangulate_tracks, PipelineError, TriangulationOptions};
use featref::synth::{synth_generate, Plane, SynthConfig};

#[derive(Parser)]
#[command(
    name = "featref",
    version,
    about = "Featuremetric keypoint and bundle adjustment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Gradient,
    Ncc,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Costmap,
}

#[derive(Clone, Copy, ValueEnum)]
enum Poses {
    Fixed,
    Free,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Skip writing dense feature maps.
        #[arg(long)]
        no_fmaps: bool,
    },
    /// Compute dense feature maps from grayscale images.
    Extract {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Window side of the normalized intensity extractor.
        #[arg(long, default_value_t = 5)]
        window: u32,
    },
    /// Cut feature patches around every keypoint of a model.
    Patches {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fmaps: PathBuf,
        #[arg(long, default_value_t = 16)]
        size: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adjust keypoints over tentative tracks and re-triangulate.
    Ka {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8.0)]
        max_drift: f64,
        #[arg(long, default_value_t = 0.25)]
        loss_scale: f64,
    },
    /// Featuremetric bundle adjustment.
    Ba {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        patches: PathBuf,
        #[arg(long, value_enum, default_value = "exact")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "fixed")]
        poses: Poses,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        max_iters: usize,
        #[arg(long, default_value_t = 0.25)]
        loss_scale: f64,
    },
    /// Reprojection-error bundle adjustment.
    GeoBa {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "fixed")]
        poses: Poses,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        max_iters: usize,
    },
    /// Compare a model against ground truth and write a JSON report.
    Eval {
        #[arg(long)]
        refined: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

fn data(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn optim(e: &OptimError) -> Failure {
    match e {
        OptimError::NumericalFailure { .. }
        | OptimError::SingularSystem
        | OptimError::SingularPointBlock(_) => Failure::Numerical(e.to_string()),
        _ => data(e),
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        data(e)
    }
}

impl From<BaError> for Failure {
    fn from(e: BaError) -> Self {
        match &e {
            BaError::Optim(o) => optim(o),
            _ => data(e),
        }
    }
}

impl From<KaError> for Failure {
    fn from(e: KaError) -> Self {
        match &e {
            KaError::Optim(o) => optim(o),
            _ => data(e),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Bundle(b) => b.into(),
            PipelineError::KeypointAdjustment(k) => k.into(),
            other => data(other),
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| data(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn pose_handling(p: Poses) -> PoseHandling {
    match p {
        Poses::Fixed => PoseHandling::AllFixed,
        Poses::Free => PoseHandling::AllFree,
    }
}

fn cauchy(scale: f64) -> Result<RobustLoss, Failure> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Failure::Usage(format!(
            "loss scale must be positive, got {scale}"
        )));
    }
    Ok(RobustLoss::cauchy(scale))
}

/// Image id from the trailing digits of a file stem, e.g. `image_007.pgm` → 7.
fn image_id_from_path(path: &Path) -> Option<u32> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    Ok(paths)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth {
            config,
            out,
            no_fmaps,
        } => {
            let config = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .map_err(|e| data(format!("{}: {e}", path.display())))?;
                    SynthConfig::from_toml(&text).map_err(data)?
                }
                None => SynthConfig::default(),
            };
            let scene = synth_generate(&config).map_err(data)?;
            io::write_model(&scene.truth, &out.join("gt"))?;
            write_text(
                &out.join("gt").join("surface.json"),
                &serde_json::to_string_pretty(&scene.surface).map_err(data)?,
            )?;
            io::write_model(&scene.observed, &out.join("model"))?;
            io::write_matches(&scene.matches, &out.join("matches.txt"))?;
            let patches = scene.patches(&scene.observed);
            io::write_fpat(patches.iter(), &out.join("patches.fpat"))?;
            create_dir(&out.join("images"))?;
            if !no_fmaps {
                create_dir(&out.join("fmaps"))?;
            }
            for (id, image) in scene.observed.images() {
                io::write_pgm(
                    &scene.render_image(*id),
                    &out.join("images").join(&image.name).with_extension("pgm"),
                )?;
                if !no_fmaps {
                    io::write_fmap(
                        &scene.feature_map(*id),
                        &out.join("fmaps").join(format!("{id}.fmap")),
                    )?;
                }
            }
            println!(
                "{} images, {} points, {} matches ({} outliers)",
                scene.observed.images().len(),
                scene.observed.points().len(),
                scene.matches.len(),
                scene.outlier_matches
            );
        }
        Command::Extract {
            method,
            images,
            out,
            window,
        } => {
            create_dir(&out)?;
            let mut count = 0;
            for path in sorted_entries(&images)? {
                let Some(id) = image_id_from_path(&path) else {
                    continue;
                };
                let image = io::read_gray_image(&path)?;
                let fmap = match method {
                    Method::Gradient => extract_gradient_features(id, &image),
                    Method::Ncc => extract_ncc_intensity(id, &image, window),
                }
                .map_err(data)?;
                io::write_fmap(&fmap, &out.join(format!("{id}.fmap")))?;
                count += 1;
            }
            if count == 0 {
                return Err(data(format!(
                    "no images with numeric ids in {}",
                    images.display()
                )));
            }
            println!("{count} feature maps written");
        }
        Command::Patches {
            model,
            fmaps,
            size,
            out,
        } => {
            let recon = io::read_model(&model)?;
            let mut all: Vec<FeaturePatch> = Vec::new();
            for (id, image) in recon.images() {
                let fmap = io::read_fmap(&fmaps.join(format!("{id}.fmap")))?;
                if fmap.image_id != *id {
                    return Err(data(format!(
                        "feature map for image {id} carries id {}",
                        fmap.image_id
                    )));
                }
                all.extend(extract_patches(&fmap, &image.keypoints, size).map_err(data)?);
            }
            io::write_fpat(all.iter(), &out)?;
            println!("{} patches written", all.len());
        }
        Command::Ka {
            model,
            matches,
            patches,
            out,
            max_drift,
            loss_scale,
        } => {
            let mut recon = io::read_model(&model)?;
            let matches = io::read_matches(&matches)?;
            let patches = io::read_patch_set(&patches)?;
            let opts = KaOptions {
                drift_bound: max_drift,
                loss: cauchy(loss_scale)?,
                ..KaOptions::default()
            };
            opts.validate(patches.size)?;
            let tracks = build_tentative_tracks(&matches).map_err(data)?;
            let report = adjust_all(&tracks, &patches, &recon, &opts);
            for (track, err) in report.failures() {
                eprintln!("track {track}: {err}");
            }
            report.apply(&mut recon).map_err(data)?;
            triangulate_tracks(&mut recon, &tracks, &TriangulationOptions::default())?;
            io::write_model(&recon, &out)?;
            println!(
                "{} tracks, {} adjusted keypoints, {} points",
                tracks.len(),
                report.locations.len(),
                recon.points().len()
            );
        }
        Command::Ba {
            model,
            patches,
            mode,
            poses,
            out,
            max_iters,
            loss_scale,
        } => {
            let mut recon = io::read_model(&model)?;
            let patches = io::read_patch_set(&patches)?;
            let mut opts = BaOptions {
                loss: cauchy(loss_scale)?,
                poses: pose_handling(poses),
                ..BaOptions::default()
            };
            opts.mode = match mode {
                Mode::Exact => BaMode::Exact,
                Mode::Costmap => BaMode::CostMap,
            };
            opts.lm.max_iterations = max_iters;
            let refs = select_references(&recon, &patches, &opts.loss)?;
            let report = featuremetric_ba(&mut recon, &patches, &refs, &opts)?;
            io::write_model(&recon, &out)?;
            println!(
                "cost {:.6e} -> {:.6e} after {} iterations ({:?}), {} observations dropped",
                report.summary.initial_cost,
                report.summary.final_cost,
                report.summary.num_iterations(),
                report.summary.termination,
                report.dropped.len()
            );
        }
        Command::GeoBa {
            model,
            poses,
            out,
            max_iters,
        } => {
            let mut recon = io::read_model(&model)?;
            let mut opts = BaOptions {
                poses: pose_handling(poses),
                ..BaOptions::geometric()
            };
            opts.lm.max_iterations = max_iters;
            let report = geometric_ba(&mut recon, &opts)?;
            io::write_model(&recon, &out)?;
            println!(
                "cost {:.6e} -> {:.6e} after {} iterations",
                report.summary.initial_cost,
                report.summary.final_cost,
                report.summary.num_iterations()
            );
        }
        Command::Eval {
            refined,
            truth,
            report,
        } => {
            let refined = io::read_model(&refined)?;
            let surface_path = truth.join("surface.json");
            let truth = io::read_model(&truth)?;
            let surface: Option<Plane> = if surface_path.is_file() {
                let text = fs::read_to_string(&surface_path)
                    .map_err(|e| data(format!("{}: {e}", surface_path.display())))?;
                Some(
                    serde_json::from_str(&text)
                        .map_err(|e| data(format!("{}: {e}", surface_path.display())))?,
                )
            } else {
                None
            };
            let ev = evaluate(
                &refined,
                &truth,
                surface.as_ref(),
                &EvalThresholds::default(),
            )
            .map_err(data)?;
            write_text(&report, &serde_json::to_string_pretty(&ev).map_err(data)?)?;
            println!(
                "mean keypoint error {:.4} px, mean point error {:.4} px",
                ev.keypoint_error(),
                ev.point_error()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("usage error: {m}"),
                Failure::Data(m) => eprintln!("error: {m}"),
                Failure::Numerical(m) => eprintln!("numerical failure: {m}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
