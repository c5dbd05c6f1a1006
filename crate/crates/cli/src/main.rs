use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mwreg::baseline::{multiway_register, prepare_cloud, MultiwayConfig};
use mwreg::cloudproc::{preprocess, PointCloud};
use mwreg::dataio::{read_ply, write_cloud_ply, write_kitti_poses, write_ply, RunConfig, ScanSequence, PALETTE, POSES_FILE};
use mwreg::dataio::{read_kitti_poses, synth_generate};
use mwreg::evalbench::{
    compare_report, read_report_csv, windowed_eval, write_comparison_csv, write_report_csv, Aggregation, Trajectory,
};
use mwreg::geom3d::{apply, PoseSet};
use mwreg::model::{Model, Trainer};
use mwreg::{Error, Result};

/// Multiway registration of LiDAR scan sequences: a learned model and a
/// classical pose-graph baseline, with synthetic data and evaluation tools.
#[derive(Parser)]
#[command(name = "mwreg", version)]
struct Cli {
    /// TOML configuration; missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prepare model inputs: scan directory to a directory of PLY clouds with normals.
    Preprocess {
        #[arg(long)]
        scans: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic scan sequence with exact ground truth.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        scans: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        /// Sensor noise standard deviation in meters.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train the model on one sequence and write a checkpoint and a loss log.
    Train {
        #[command(flatten)]
        input: ScanInput,
        #[arg(long)]
        output: PathBuf,
        /// Loss log CSV; defaults to the checkpoint path with `.loss.csv`.
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Training window; fixes the largest window usable at inference.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Predict poses of a sequence with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: ScanInput,
        #[arg(long)]
        output: PathBuf,
        /// Inference window; at most the training window.
        #[arg(long)]
        window: Option<usize>,
        /// Also write the aligned clouds as a colored PLY.
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Register a sequence with the pose-graph baseline.
    Baseline {
        #[arg(long)]
        scans: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        voxel: Option<f64>,
        /// Dump the pose graph as JSON.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Windowed pose-error report of predicted poses against ground truth.
    Eval {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Sequence id written in the report.
        #[arg(long, default_value = "")]
        sequence: String,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// One RMSE over all windows instead of the mean of per-window RMSEs.
        #[arg(long)]
        pooled: bool,
    },
    /// Side-by-side comparison of a model report and a baseline report.
    Compare {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the full configuration with every default filled in.
    Config,
}

#[derive(Args)]
struct ScanInput {
    /// Scan directory, or a directory of preprocessed PLY clouds.
    #[arg(long)]
    scans: PathBuf,
    /// Ground-truth poses; defaults to `poses.txt` in the scan directory.
    #[arg(long)]
    poses: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    match cli.command {
        Command::Preprocess { scans, output } => {
            let seq = ScanSequence::read_dir(&scans, None)?;
            std::fs::create_dir_all(&output)?;
            for (k, c) in model_inputs(&seq.clouds, &cfg)?.iter().enumerate() {
                write_cloud_ply(c, &output.join(format!("{k:06}.ply")))?;
            }
            if let Some(t) = &seq.truth {
                write_kitti_poses(t, &output.join(POSES_FILE))?;
            }
        }
        Command::Synth { output, scans, points, noise } => {
            let mut spec = cfg.synth;
            if let Some(n) = scans {
                spec.n_scans = n;
            }
            if let Some(n) = points {
                spec.points_per_scan = n;
            }
            if let Some(s) = noise {
                spec.noise_sigma = s;
            }
            spec.validate()?;
            synth_generate(&spec)?.write_dir(&output)?;
        }
        Command::Train { input, output, loss_log, steps, lr, window } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(lr) = lr {
                cfg.train.adam.lr = lr;
            }
            if let Some(w) = window {
                cfg.model.window = w;
            }
            cfg.validate()?;
            let (clouds, truth) = load_inputs(&input, &cfg)?;
            let truth = truth.ok_or_else(|| Error::InvalidConfig("training needs ground-truth poses".into()))?;
            let windows = training_windows(clouds.len(), cfg.model.window);
            if windows.is_empty() {
                return Err(Error::TooShort { len: clouds.len(), window: 2 });
            }
            let mut trainer = Trainer::new(Model::init(cfg.model.clone(), cfg.seed)?, cfg.train.adam);
            let log_path = loss_log.unwrap_or_else(|| output.with_extension("loss.csv"));
            let mut log = csv::Writer::from_path(&log_path).map_err(csv_error)?;
            log.write_record(["step", "loss"]).map_err(csv_error)?;
            for step in 0..cfg.train.steps {
                let (a, b) = windows[step % windows.len()];
                let window_truth = PoseSet::new(truth.poses[a..b].to_vec()).anchored();
                let loss = trainer.train_step(&clouds[a..b], &window_truth)?;
                log.write_record([step.to_string(), format!("{loss:.16e}")]).map_err(csv_error)?;
                log::info!("step {step}: loss {loss:.6}");
            }
            log.flush()?;
            trainer.model.save(&output)?;
        }
        Command::Infer { checkpoint, input, output, window, ply } => {
            let model = Model::load(&checkpoint)?;
            let window = window.unwrap_or(model.config().window);
            if window > model.config().window {
                // refuse before any preprocessing work
                return Err(Error::WindowTooLarge { requested: window, trained: model.config().window });
            }
            let (clouds, _) = load_inputs(&input, &cfg)?;
            let poses = model.predict_sequence(&clouds, window)?;
            write_kitti_poses(&poses, &output)?;
            if let Some(p) = ply {
                write_aligned(&clouds, &poses, &p)?;
            }
        }
        Command::Baseline { scans, output, voxel, graph, ply } => {
            if let Some(v) = voxel {
                cfg.baseline = MultiwayConfig::for_voxel(v);
            }
            cfg.baseline.seed = cfg.seed;
            cfg.baseline.validate()?;
            let seq = ScanSequence::read_dir(&scans, None)?;
            let result = multiway_register(&seq.clouds, &cfg.baseline)?;
            write_kitti_poses(&result.poses, &output)?;
            if let Some(g) = graph {
                result.graph.save(&g)?;
            }
            if let Some(p) = ply {
                let prepared = seq.clouds.iter().map(|c| prepare_cloud(c, &cfg.baseline)).collect::<Result<Vec<_>>>()?;
                write_aligned(&prepared, &result.poses, &p)?;
            }
        }
        Command::Eval { poses, truth, output, sequence, window, stride, pooled } => {
            let mut eval = cfg.eval;
            if let Some(w) = window {
                eval.window = w;
            }
            if stride.is_some() {
                eval.stride = stride;
            }
            if pooled {
                eval.aggregation = Aggregation::Pooled;
            }
            let pred = Trajectory::from(read_kitti_poses(&poses)?);
            let truth = Trajectory::from(read_kitti_poses(&truth)?);
            let report = windowed_eval(&pred, &truth, &sequence, &eval)?;
            write_report_csv(&report, BufWriter::new(File::create(&output)?))?;
        }
        Command::Compare { model, baseline, output } => {
            let m = read_report_csv(File::open(&model)?)?;
            let b = read_report_csv(File::open(&baseline)?)?;
            let rows = compare_report(&m, &b)?;
            write_comparison_csv(&rows, BufWriter::new(File::create(&output)?))?;
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidConfig(format!("{other:?}")),
    }
}

/// Model inputs for each scan; scan `k` uses seed `seed + k` for its
/// randomized steps.
fn model_inputs(clouds: &[PointCloud], cfg: &RunConfig) -> Result<Vec<PointCloud>> {
    clouds
        .iter()
        .enumerate()
        .map(|(k, c)| preprocess(c, &cfg.preprocess, cfg.seed.wrapping_add(k as u64)))
        .collect()
}

/// Preprocessed clouds plus ground truth. A directory holding `.ply` files
/// is taken as already preprocessed.
fn load_inputs(input: &ScanInput, cfg: &RunConfig) -> Result<(Vec<PointCloud>, Option<PoseSet>)> {
    let mut plys: Vec<PathBuf> = std::fs::read_dir(&input.scans)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ply"))
        .collect();
    plys.sort();
    let (clouds, truth) = if plys.is_empty() {
        let seq = ScanSequence::read_dir(&input.scans, input.poses.as_deref())?;
        (model_inputs(&seq.clouds, cfg)?, seq.truth)
    } else {
        let clouds = plys.iter().map(|p| read_ply(p)).collect::<Result<Vec<_>>>()?;
        (clouds, read_truth(&input.scans, input.poses.as_deref())?)
    };
    if let Some(t) = &truth {
        if t.len() != clouds.len() {
            return Err(Error::LengthMismatch(clouds.len(), t.len()));
        }
    }
    Ok((clouds, truth))
}

fn read_truth(dir: &Path, explicit: Option<&Path>) -> Result<Option<PoseSet>> {
    let default = dir.join(POSES_FILE);
    match explicit {
        Some(p) => Ok(Some(read_kitti_poses(p)?)),
        None if default.is_file() => Ok(Some(read_kitti_poses(&default)?)),
        None => Ok(None),
    }
}

/// Consecutive windows of `window` clouds sharing one cloud at each seam,
/// with a shorter last window; a one-cloud tail is dropped.
fn training_windows(n: usize, window: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < n {
        let end = (start + window).min(n);
        out.push((start, end));
        start = end - 1;
    }
    out
}

fn write_aligned(clouds: &[PointCloud], poses: &PoseSet, path: &Path) -> Result<()> {
    let aligned: Vec<PointCloud> = clouds.iter().zip(&poses.poses).map(|(c, p)| apply(p, c)).collect();
    let colored: Vec<_> = aligned.iter().enumerate().map(|(k, c)| (c, PALETTE[k % PALETTE.len()])).collect();
    write_ply(&colored, path)
}

#[cfg(test)]
mod tests {
    use super::training_windows;

    #[test]
    fn windows_share_seams() {
        assert_eq!(training_windows(10, 10), vec![(0, 10)]);
        assert_eq!(training_windows(12, 5), vec![(0, 5), (4, 9), (8, 12)]);
        assert_eq!(training_windows(1, 5), vec![]);
    }
}
