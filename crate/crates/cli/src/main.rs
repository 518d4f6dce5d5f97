use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use dpm_core::decoder::RegisterOptions;
use dpm_core::geometry::RigidTransform;
use dpm_core::io::{
    ape_evaluate, load_sequence, memory_report, read_poses, read_trajectory, save_sequence, synth_sequence,
    write_poses, write_trajectory, ApeReport, PipelineConfig, SequenceSource,
};
use dpm_core::model::Model;
use dpm_core::slam::{read_descriptor_map, run_slam, write_descriptor_map, LearnedRegistrar};
use dpm_core::training::{train_loop_head, train_registration, write_loss_csv};

/// Scan period used for trajectory timestamps (s).
const FRAME_PERIOD: f64 = 0.1;

#[derive(Parser)]
#[command(name = "dpm", version, about = "Learned descriptor lidar odometry and SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the synthetic-scene and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the synthetic-scene noise ratio.
    #[arg(long)]
    noise_ratio: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Sequence directory; a synthetic sequence is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence.
    Synth(Common),
    /// Train the registration network.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training sequence directories; synthetic sequences are used when absent.
        #[arg(long)]
        data: Vec<PathBuf>,
    },
    /// Train the loop-closure head with the trunk frozen.
    TrainLoop {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Vec<PathBuf>,
    },
    /// Odometry without loop closure.
    Odometry(RunArgs),
    /// Full pipeline with loop closure.
    Slam(RunArgs),
    /// APE of a predicted trajectory against ground truth.
    Eval { pred: PathBuf, gt: PathBuf },
    /// Descriptor-map size against the raw clouds.
    ReportMem {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.synth.seed = seed;
        cfg.training.seed = seed;
    }
    if let Some(r) = common.noise_ratio {
        cfg.synth.noise_ratio = r;
    }
    cfg.validate()?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(cfg)
}

fn sequence(cfg: &PipelineConfig, data: Option<&Path>) -> Result<SequenceSource> {
    Ok(match data {
        Some(dir) => load_sequence(dir).with_context(|| format!("loading {}", dir.display()))?,
        None => synth_sequence(&cfg.synth)?.source,
    })
}

fn training_set(cfg: &PipelineConfig, data: &[PathBuf]) -> Result<Vec<SequenceSource>> {
    if !data.is_empty() {
        return data.iter().map(|d| sequence(cfg, Some(d))).collect();
    }
    (0..cfg.train_sequences as u64)
        .map(|k| {
            let mut synth = cfg.synth.clone();
            synth.seed = cfg.synth.seed.wrapping_add(k);
            Ok(synth_sequence(&synth)?.source)
        })
        .collect()
}

fn stamps(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 * FRAME_PERIOD).collect()
}

fn print_ape(report: &ApeReport) {
    println!(
        "rmse {:.3} mean {:.3} median {:.3} max {:.3}",
        report.rmse, report.mean, report.median, report.max
    );
}

fn write_ape(path: &Path, report: &ApeReport) -> Result<()> {
    let mut text = String::from("frame,error\n");
    for (k, e) in report.errors.iter().enumerate() {
        text.push_str(&format!("{k},{e}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

fn run(args: RunArgs, loops: bool) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    cfg.slam.enable_loop_closure = loops;
    let model = Model::load(&args.model, cfg.model).with_context(|| format!("loading {}", args.model.display()))?;
    let seq = sequence(&cfg, args.data.as_deref())?;
    let registrar = LearnedRegistrar {
        model: &model,
        sample_n: cfg.registration.sample_n,
        options: RegisterOptions { dynamic_filter: cfg.registration.dynamic_filter },
        seed: cfg.synth.seed,
    };
    let out = run_slam(&seq, &registrar, &cfg.slam)?;
    let dir = &args.common.out;
    write_poses(&dir.join("trajectory.txt"), &out.trajectory)?;
    write_trajectory(&dir.join("trajectory.tum"), &stamps(out.trajectory.len()), &out.trajectory)?;
    write_descriptor_map(&dir.join("map.bin"), &out.descriptor_map)?;
    println!(
        "frames {} keyframes {} loop edges {} registration failures {}",
        out.trajectory.len(),
        out.keyframes.len(),
        out.loop_edges,
        out.failures
    );
    if let Some(gt) = &seq.poses {
        let origin = gt[0].inverse();
        let gt: Vec<RigidTransform> = gt.iter().map(|p| origin.compose(p)).collect();
        write_poses(&dir.join("groundtruth.txt"), &gt)?;
        let report = ape_evaluate(&out.trajectory, &gt)?;
        write_ape(&dir.join("ape.csv"), &report)?;
        print_ape(&report);
    }
    Ok(())
}

fn read_any_trajectory(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let columns = text.lines().find(|l| !l.trim().is_empty()).map_or(0, |l| l.split_whitespace().count());
    Ok(match columns {
        12 => read_poses(path)?,
        8 => read_trajectory(path)?.1,
        n => bail!("{}: expected 12 or 8 columns, found {n}", path.display()),
    })
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let cfg = load_config(&common)?;
            let synth = synth_sequence(&cfg.synth)?;
            save_sequence(&common.out, &synth.source)?;
            write_trajectory(&common.out.join("groundtruth.tum"), &stamps(synth.source.len()), synth.poses())?;
            println!("wrote {} frames to {}", synth.source.len(), common.out.display());
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            let dataset = training_set(&cfg, &data)?;
            let mut model = Model::new(cfg.model, cfg.training.seed)?;
            let report = train_registration(&mut model, &dataset, &cfg.training)?;
            model.save(&common.out.join("model.ckpt"))?;
            write_loss_csv(&common.out.join("loss.csv"), &report.steps)?;
            for (e, m) in report.epoch_means.iter().enumerate() {
                println!("epoch {e} loss {m:.4}");
            }
            info!("skipped {} pairs without correspondences", report.skipped_pairs);
        }
        Command::TrainLoop { common, model, data } => {
            let cfg = load_config(&common)?;
            let dataset = training_set(&cfg, &data)?;
            let mut net = Model::load(&model, cfg.model).with_context(|| format!("loading {}", model.display()))?;
            let report = train_loop_head(&mut net, &dataset, &cfg.training)?;
            net.save(&common.out.join("model.ckpt"))?;
            for (e, m) in report.epoch_means.iter().enumerate() {
                println!("epoch {e} loss {m:.4}");
            }
        }
        Command::Odometry(args) => run(args, false)?,
        Command::Slam(args) => run(args, true)?,
        Command::Eval { pred, gt } => {
            let report = ape_evaluate(&read_any_trajectory(&pred)?, &read_any_trajectory(&gt)?)?;
            print_ape(&report);
        }
        Command::ReportMem { common, map, data } => {
            let cfg = load_config(&common)?;
            let map = read_descriptor_map(&map).with_context(|| format!("reading {}", map.display()))?;
            let seq = sequence(&cfg, data.as_deref())?;
            let report = memory_report(&map, &seq.frames);
            println!(
                "descriptor bytes {} raw bytes {} ratio {:.3}",
                report.descriptor_bytes, report.raw_bytes, report.ratio
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
