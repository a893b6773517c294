use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use localmap_core::pipeline::{run_sequence, Mode, PipelineConfig, StageValues};
use localmap_core::report::{compare, comparison_table, run_table, RepeatRecord, RunReport};
use localmap_core::synth::{
    associate, ate_rmse, generate_sequence, load_sequence, load_trajectory, save_sequence, save_trajectory,
    TrajectoryKind, WorldConfig,
};

#[derive(Parser)]
#[command(name = "localmap", version, about = "Synthetic local-mapping benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic keyframe sequence.
    Generate {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 3000)]
        landmarks: usize,
        #[arg(long, default_value_t = 50)]
        keyframes: usize,
        /// Pixel noise sigma.
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        /// Fraction of landmarks instantiated twice.
        #[arg(long, default_value_t = 0.0)]
        duplicates: f64,
        #[arg(long, default_value_t = 300)]
        features: usize,
        #[arg(long, value_enum, default_value_t = Trajectory::Line)]
        trajectory: Trajectory,
        /// Distance between keyframes (m).
        #[arg(long, default_value_t = 0.1)]
        spacing: f64,
        /// Also zero descriptor noise, clutter and pose-prior noise.
        #[arg(long)]
        noise_free: bool,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth trajectory in text form.
        #[arg(long)]
        gt_out: Option<PathBuf>,
    },
    /// Run the local-mapping pipeline over a sequence.
    Run {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Optimized)]
        mode: ModeArg,
        #[arg(long, default_value_t = 4, value_parser = at_least_one())]
        workers: usize,
        /// Feed keyframes on a fixed schedule regardless of processing time.
        #[arg(long)]
        stress: bool,
        /// Frames between keyframe arrivals under --stress.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        min_kf_interval: u32,
        /// Multiplier on measured stage time for the stress clock.
        #[arg(long, default_value_t = 1.0)]
        delay_multiplier: f64,
        /// Fixed virtual cost per stage (ms) for the stress clock.
        #[arg(long, default_value_t = 0.0)]
        stage_cost_ms: f64,
        #[arg(long, default_value_t = 3, value_parser = at_least_one())]
        queue_capacity: usize,
        /// Never run local bundle adjustment.
        #[arg(long)]
        disable_lba: bool,
        #[arg(long, default_value_t = 1, value_parser = at_least_one())]
        repeat: usize,
        #[arg(long)]
        align_scale: bool,
        #[arg(long)]
        out: PathBuf,
        /// Estimated trajectory of the last repeat.
        #[arg(long)]
        traj: Option<PathBuf>,
        /// Print the stage table.
        #[arg(long)]
        table: bool,
    },
    /// Pair a baseline and an optimized run.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        optimized: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        table: bool,
    },
    /// ATE RMSE between two trajectory files.
    Ate {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        align_scale: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Trajectory {
    Line,
    Orbit,
    CorridorLoop,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Baseline,
    Optimized,
}

fn at_least_one() -> clap::builder::RangedU64ValueParser<usize> {
    clap::builder::RangedU64ValueParser::new().range(1..)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> localmap_core::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_report(path: &Path) -> localmap_core::Result<RunReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn execute(command: Command) -> localmap_core::Result<()> {
    match command {
        Command::Generate {
            seed,
            landmarks,
            keyframes,
            noise,
            duplicates,
            features,
            trajectory,
            spacing,
            noise_free,
            out,
            gt_out,
        } => {
            let mut cfg = WorldConfig {
                seed,
                landmark_count: landmarks,
                keyframe_count: keyframes,
                pixel_noise_sigma: noise,
                duplicate_injection_rate: duplicates,
                features_per_kf: features,
                kf_spacing: spacing,
                trajectory: match trajectory {
                    Trajectory::Line => TrajectoryKind::Line,
                    Trajectory::Orbit => TrajectoryKind::Orbit,
                    Trajectory::CorridorLoop => TrajectoryKind::CorridorLoop,
                },
                ..WorldConfig::default()
            };
            if noise_free {
                cfg = cfg.noise_free();
            }
            let seq = generate_sequence(&cfg)?;
            save_sequence(&seq, &out)?;
            if let Some(gt) = gt_out {
                save_trajectory(&seq.ground_truth_trajectory(), &gt)?;
            }
            eprintln!("wrote {} keyframes to {}", seq.frames.len(), out.display());
        }
        Command::Run {
            seq,
            mode,
            workers,
            stress,
            min_kf_interval,
            delay_multiplier,
            stage_cost_ms,
            queue_capacity,
            disable_lba,
            repeat,
            align_scale,
            out,
            traj,
            table,
        } => {
            let seq = load_sequence(&seq)?;
            let cfg = PipelineConfig {
                mode: match mode {
                    ModeArg::Baseline => Mode::Baseline,
                    ModeArg::Optimized => Mode::Optimized,
                },
                worker_count: workers,
                queue_capacity,
                stress,
                min_kf_interval_frames: min_kf_interval,
                stage_delay_multipliers: StageValues::uniform(delay_multiplier),
                stage_fixed_costs_ms: StageValues::uniform(stage_cost_ms),
                disable_lba,
                ..PipelineConfig::default()
            };
            let mut repeats = Vec::with_capacity(repeat);
            let mut last = None;
            for _ in 0..repeat {
                let output = run_sequence(&seq, &cfg)?;
                repeats.push(RepeatRecord::from_output(&output, &seq, align_scale));
                last = Some(output);
            }
            if let (Some(path), Some(output)) = (traj, &last) {
                save_trajectory(&output.trajectory, &path)?;
            }
            let report = RunReport::new(&cfg, &seq, repeats);
            write_json(&out, &report)?;
            if table {
                print!("{}", run_table(&report));
            }
        }
        Command::Compare {
            baseline,
            optimized,
            out,
            table,
        } => {
            let c = compare(&read_report(&baseline)?, &read_report(&optimized)?)?;
            write_json(&out, &c)?;
            if table {
                print!("{}", comparison_table(&c));
            }
        }
        Command::Ate { traj, gt, align_scale } => {
            let (est, truth) = associate(&load_trajectory(&traj)?, &load_trajectory(&gt)?);
            println!("{:.9}", ate_rmse(&est, &truth, align_scale)?);
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
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
