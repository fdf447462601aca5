//! `freehand`: command-line harness for simulated freehand reconstruction
//! experiments.
//!
//! Every subcommand regenerates its inputs from the configuration, so a
//! config file plus a seed fully determines the output. Exit codes: 0 on
//! success, 1 on usage or input errors, 2 when a numerical check fails.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use freehand_core::config::ExperimentConfig;
use freehand_core::experiment::{
    bench, build_scene, gradcheck, recon_params_for, reconstruct_sequence, run_experiment,
};
use freehand_core::geometry::{read_poses_csv, write_poses_csv, RelativeParams};
use freehand_core::imaging::{generate_phantom, read_sequence, write_sequence, write_volume};
use freehand_core::metrics::evaluate;
use freehand_core::Result;

#[derive(Debug, Parser)]
#[command(
    name = "freehand",
    version,
    about = "Freehand 3-D ultrasound reconstruction experiments"
)]
struct Cli {
    /// Configuration file (`section.key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the phantom volume.
    Phantom,
    /// Simulate the scan and write the phantom and frame sequence.
    Scan,
    /// Write ground-truth and noisy relative pose estimates.
    Estimate,
    /// Reconstruct a volume from a sequence and relative poses.
    Reconstruct {
        /// Sequence directory; the simulated sequence when omitted.
        #[arg(long)]
        sequence: Option<PathBuf>,
        /// Relative poses CSV; the noisy estimate when omitted.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Run the full pipeline: simulate, estimate, refine, evaluate.
    Refine,
    /// Compare estimated relative poses against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        est: PathBuf,
    },
    /// Check analytic objective gradients against finite differences.
    Gradcheck,
    /// Run the refinement benchmark over consecutive seeds.
    Bench,
    /// Print the effective configuration.
    Config,
}

enum Failure {
    Usage(String),
    Check(String),
}

impl From<freehand_core::Error> for Failure {
    fn from(e: freehand_core::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::parse(&fs::read_to_string(path).map_err(|e| {
            freehand_core::Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn read_poses(path: &Path) -> Result<RelativeParams> {
    Ok(RelativeParams::new(read_poses_csv(BufReader::new(
        File::open(path)?,
    ))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    let cfg = load_config(cli)?;
    let out = &cfg.out_dir;
    match &cli.command {
        Command::Config => print!("{}", cfg.serialize()),
        Command::Phantom => {
            fs::create_dir_all(out).map_err(freehand_core::Error::from)?;
            let v = generate_phantom(&cfg.phantom, cfg.phantom_seed())?;
            write_volume(create(&out.join("phantom.vol"))?, &v)?;
            println!(
                "phantom: {} voxels, mean gray {:.6}",
                v.grid().len(),
                v.mean_gray()
            );
        }
        Command::Scan => {
            let scene = build_scene(&cfg)?;
            fs::create_dir_all(out).map_err(freehand_core::Error::from)?;
            write_volume(create(&out.join("phantom.vol"))?, &scene.phantom)?;
            write_sequence(&out.join("sequence"), &scene.sequence)?;
            println!("scan: {} frames", scene.sequence.len());
        }
        Command::Estimate => {
            let scene = build_scene(&cfg)?;
            fs::create_dir_all(out).map_err(freehand_core::Error::from)?;
            write_poses_csv(create(&out.join("gt.csv"))?, scene.ground_truth().poses())?;
            write_poses_csv(create(&out.join("initial.csv"))?, scene.initial.poses())?;
            let m = evaluate(scene.ground_truth(), &scene.initial, &cfg.geometry)?;
            println!("estimate: fdr {:.6} hd {:.6}", m.fdr, m.hd);
        }
        Command::Reconstruct { sequence, poses } => {
            let (seq, default_poses) = match sequence {
                Some(dir) => {
                    let seq = read_sequence(dir)?;
                    let gt = seq.ground_truth().cloned();
                    (seq, gt)
                }
                None => {
                    let scene = build_scene(&cfg)?;
                    (scene.sequence, Some(scene.initial))
                }
            };
            let rel = match poses {
                Some(p) => read_poses(p)?,
                None => default_poses
                    .ok_or_else(|| Failure::Usage("sequence has no poses; pass --poses".into()))?,
            };
            let recon = recon_params_for(&cfg, &rel)?;
            let v = reconstruct_sequence(&seq, &rel, &recon)?;
            fs::create_dir_all(out).map_err(freehand_core::Error::from)?;
            write_volume(create(&out.join("recon.vol"))?, &v)?;
            println!(
                "reconstruct: {} of {} voxels valid",
                v.valid_count(),
                v.grid().len()
            );
        }
        Command::Refine => {
            let run = run_experiment(&cfg)?;
            println!("before: {}", run.before.csv_row());
            println!("after:  {}", run.after.csv_row());
        }
        Command::Eval { gt, est } => {
            let m = evaluate(&read_poses(gt)?, &read_poses(est)?, &cfg.geometry)?;
            fs::create_dir_all(out).map_err(freehand_core::Error::from)?;
            m.write_csv(create(&out.join("metrics.csv"))?)?;
            println!(
                "fdr {:.6} adr {:.6} md {:.6} sd {:.6} hd {:.6}",
                m.fdr, m.adr, m.md, m.sd, m.hd
            );
        }
        Command::Gradcheck => {
            let reports = gradcheck(&cfg)?;
            let mut failed = 0;
            for r in &reports {
                println!(
                    "instance {:2} {:<4} frames {} grid {:2}^3 checked {:2} max_rel_error {:.3e} {}",
                    r.instance,
                    r.objective.id(),
                    r.frames,
                    r.grid,
                    r.checked,
                    r.max_rel_error,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Failure::Check(format!("{failed} gradient checks failed")));
            }
        }
        Command::Bench => {
            let report = bench(&cfg)?;
            let (b, a) = (report.median_before(), report.median_after());
            println!("median fdr {:.6} -> {:.6}", b.fdr, a.fdr);
            println!("median hd  {:.6} -> {:.6}", b.hd, a.hd);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
    }
}
