//! Command-line harness for the CDGNSS/IMU spoofing detection testbed.
//!
//! Stages compose through files inside a run directory, so `run` is exactly
//! `simulate`, `inject`, `filter`, `detect` executed back to back.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use wfarc_core::harness::{
    calibrate, run_scenario, stage_detect, stage_filter, stage_inject, stage_simulate,
    write_thresholds, DetectorChoice, Overrides, ResolvedRunConfig, RunReport,
};
use wfarc_core::scenario::ImuGrade;

#[derive(Parser)]
#[command(name = "wfarc", version, about = "CDGNSS/IMU spoofing detection testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override every seed in the scenario config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the IMU grade.
    #[arg(long, value_parser = parse_imu)]
    imu: Option<ImuGrade>,
    /// Attack spec path, or "none" to strip a configured attack.
    #[arg(long)]
    attack: Option<String>,
    /// Detector mode: chi2 or empirical.
    #[arg(long)]
    detector: Option<String>,
    /// False-alarm probability for chi2 mode.
    #[arg(long)]
    pf: Option<f64>,
    /// Thresholds file for empirical mode.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Output directory root.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate truth, IMU and observable artifacts.
    Simulate(CommonArgs),
    /// Rewrite the observable stream with the configured attack.
    Inject(CommonArgs),
    /// Run the tightly-coupled filter over the recorded stream.
    Filter(CommonArgs),
    /// Score the fix series and emit verdicts, CCDFs and the report.
    Detect(CommonArgs),
    /// Full pipeline: simulate, inject, filter, detect.
    Run(CommonArgs),
    /// Pool null runs into empirical thresholds.
    Calibrate {
        /// Null-run configurations to pool.
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        /// Seeds to sweep per config (each replaces the scenario seeds).
        #[arg(long, num_args = 0..)]
        seeds: Vec<u64>,
        /// Where to write thresholds.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a stored run report.
    Report {
        /// Run directory containing report.json.
        dir: PathBuf,
    },
}

fn parse_imu(s: &str) -> Result<ImuGrade, String> {
    match s {
        "industrial" => Ok(ImuGrade::Industrial),
        "consumer" => Ok(ImuGrade::Consumer),
        other => Err(format!("unknown IMU grade '{other}' (industrial|consumer)")),
    }
}

fn overrides_from(args: &CommonArgs) -> Result<Overrides> {
    let attack = match args.attack.as_deref() {
        None => None,
        Some("none") => Some(None),
        Some(p) => Some(Some(PathBuf::from(p))),
    };
    let detector = match args.detector.as_deref() {
        None => None,
        Some("chi2") => Some(DetectorChoice::Chi2 { pf: args.pf.unwrap_or(0.01) }),
        Some("empirical") => {
            Some(DetectorChoice::Empirical { thresholds: args.thresholds.clone() })
        }
        Some(other) => bail!("unknown detector mode '{other}' (chi2|empirical)"),
    };
    Ok(Overrides {
        seed: args.seed,
        imu_grade: args.imu,
        attack,
        detector,
        out_dir: args.out.clone(),
    })
}

fn load(args: &CommonArgs) -> Result<ResolvedRunConfig> {
    let overrides = overrides_from(args)?;
    ResolvedRunConfig::load(&args.config, &overrides)
        .with_context(|| format!("loading {}", args.config.display()))
}

fn print_report(report: &RunReport) {
    println!("digest        {}", report.config_digest);
    println!("detector      {}", report.detector_mode);
    println!(
        "epochs        {} ({} skipped, {} empty)",
        report.num_epochs, report.skipped_epochs, report.dropped_epochs
    );
    match report.attack_start_s {
        Some(t0) => {
            println!("attack start  {t0} s");
            match report.time_to_detect_s {
                Some(ttd) => println!("time to detect {ttd:.2} s"),
                None => println!("time to detect none"),
            }
        }
        None => println!("attack        none"),
    }
    println!("false alarms  {}", report.false_alarms);
    println!("psi max       {:.3}", report.psi_max);
    println!(
        "pos error     rms {:.3} m, max {:.3} m, final {:.3} m",
        report.pos_error_rms_m, report.pos_error_max_m, report.pos_error_final_m
    );
    if let Some(e) = report.pos_error_at_attack_end_m {
        println!("pos error at attack end {e:.3} m");
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(args) => {
            let cfg = load(&args)?;
            let dir = cfg.run_dir();
            stage_simulate(&cfg, &dir)?;
            println!("simulated into {}", dir.display());
        }
        Command::Inject(args) => {
            let cfg = load(&args)?;
            if cfg.attack.is_none() {
                bail!("no attack configured; pass --attack <path>");
            }
            let dir = cfg.run_dir();
            let warnings = stage_inject(&cfg, &dir)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            println!("injected attack into {}", dir.display());
        }
        Command::Filter(args) => {
            let cfg = load(&args)?;
            let dir = cfg.run_dir();
            let skipped = stage_filter(&cfg, &dir)?;
            println!("filtered; {skipped} epochs skipped; artifacts in {}", dir.display());
        }
        Command::Detect(args) => {
            let cfg = load(&args)?;
            let dir = cfg.run_dir();
            let report = stage_detect(&cfg, &dir)?;
            print_report(&report);
        }
        Command::Run(args) => {
            let cfg = load(&args)?;
            let (report, dir) = run_scenario(&cfg)?;
            println!("artifacts in {}", dir.display());
            print_report(&report);
        }
        Command::Calibrate { configs, seeds, out } => {
            let mut resolved = Vec::new();
            for path in &configs {
                if seeds.is_empty() {
                    resolved.push(ResolvedRunConfig::load(path, &Overrides::default())?);
                } else {
                    for &seed in &seeds {
                        let overrides = Overrides { seed: Some(seed), ..Default::default() };
                        resolved.push(ResolvedRunConfig::load(path, &overrides)?);
                    }
                }
            }
            let thresholds = calibrate(&resolved)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("thresholds.json");
            write_thresholds(&path, &thresholds)?;
            println!(
                "thresholds: open_sky {:.3}, shallow {:.3}, deep {:.3} -> {}",
                thresholds.open_sky,
                thresholds.shallow,
                thresholds.deep,
                path.display()
            );
        }
        Command::Report { dir } => {
            let text = std::fs::read_to_string(dir.join("report.json"))
                .with_context(|| format!("reading {}/report.json", dir.display()))?;
            let report: RunReport = serde_json::from_str(&text)?;
            print_report(&report);
        }
    }
    Ok(())
}
