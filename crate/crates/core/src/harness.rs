//! Run orchestration: simulate, inject, filter, detect, calibrate.
//!
//! Every stage reads and writes plain files inside a run directory, so the
//! stages compose from the command line exactly like the in-process pipeline.
//! Runs are deterministic given the resolved configuration; artifacts are
//! namespaced by a digest of that configuration so concurrent campaigns never
//! collide.

use crate::detector::{
    calibrate_empirical_threshold, ccdf_table, time_to_detect, write_ccdf_csv, write_verdicts_csv,
    DetectorError, DetectorMode, DetectorState, Hypothesis, Thresholds, Verdict,
    DEFAULT_WINDOW_LEN,
};
use crate::estimator::{
    run_filter, write_fixes_csv, write_nav_csv, FilterConfig, FilterError, FixResult, NavState,
};
use crate::geometry::{Constellation, GeometryError};
use crate::observables::{
    read_epochs_jsonl, write_epochs_jsonl, AmbiguityLedger, Environment, EpochMeasurement,
    ObservableSim, ObservablesError,
};
use crate::scenario::{
    generate_trajectory, read_imu_csv, read_truth_csv, synthesize_imu, write_imu_csv,
    write_truth_csv, ImuGrade, ImuSample, ScenarioConfig, ScenarioError, TruthState,
};
use crate::spoofing::{apply_attack, AttackSpec, SpoofingError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    BadConfig(String),
    #[error("environment schedule does not cover t={0}")]
    UncoveredTime(f64),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Observables(#[from] ObservablesError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Spoofing(#[from] SpoofingError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// One labeled span of the environment schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvRange {
    pub start_s: f64,
    pub end_s: f64,
    pub env: Environment,
}

/// Looks up the environment label for an epoch time.
pub fn env_at(schedule: &[EnvRange], t: f64) -> Result<Environment, HarnessError> {
    schedule
        .iter()
        .find(|r| t >= r.start_s - 1e-9 && t <= r.end_s + 1e-9)
        .map(|r| r.env)
        .ok_or(HarnessError::UncoveredTime(t))
}

fn validate_schedule(schedule: &[EnvRange], duration: f64) -> Result<(), HarnessError> {
    if schedule.is_empty() {
        return Err(HarnessError::BadConfig("environment schedule is empty".into()));
    }
    let mut sorted: Vec<&EnvRange> = schedule.iter().collect();
    sorted.sort_by(|a, b| a.start_s.partial_cmp(&b.start_s).expect("finite times"));
    let mut cursor = 0.0;
    for r in sorted {
        if r.end_s <= r.start_s {
            return Err(HarnessError::BadConfig(format!(
                "empty environment range at {}",
                r.start_s
            )));
        }
        if r.start_s > cursor + 1e-9 {
            return Err(HarnessError::UncoveredTime(cursor));
        }
        if r.start_s < cursor - 1e-9 {
            return Err(HarnessError::BadConfig(format!(
                "environment ranges overlap at {}",
                r.start_s
            )));
        }
        cursor = r.end_s;
    }
    if cursor < duration - 1e-9 {
        return Err(HarnessError::UncoveredTime(cursor));
    }
    Ok(())
}

/// Detector selection as stored in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DetectorChoice {
    Chi2 { pf: f64 },
    Empirical { thresholds: Option<PathBuf> },
}

/// On-disk run configuration. Paths are resolved relative to the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfigFile {
    pub scenario: PathBuf,
    /// Omitted: the stock GPS-like constellation.
    #[serde(default)]
    pub constellation: Option<PathBuf>,
    pub environment: Vec<EnvRange>,
    #[serde(default)]
    pub attack: Option<PathBuf>,
    pub detector: DetectorChoice,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Command-line overrides applied while resolving a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub imu_grade: Option<ImuGrade>,
    /// `Some(None)` removes a configured attack.
    pub attack: Option<Option<PathBuf>>,
    pub detector: Option<DetectorChoice>,
    pub out_dir: Option<PathBuf>,
}

/// Fully resolved run: every referenced file loaded, overrides applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRunConfig {
    pub scenario: ScenarioConfig,
    pub constellation: Constellation,
    pub environment: Vec<EnvRange>,
    pub attack: Option<AttackSpec>,
    pub detector: DetectorChoice,
    pub thresholds: Option<Thresholds>,
    pub out_dir: PathBuf,
}

impl ResolvedRunConfig {
    pub fn load(config_path: &Path, overrides: &Overrides) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(config_path)
            .map_err(|_| HarnessError::MissingArtifact(config_path.to_path_buf()))?;
        let file: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| HarnessError::BadConfig(e.to_string()))?;
        let base = config_path.parent().unwrap_or(Path::new("."));
        let rel = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };

        let mut scenario = ScenarioConfig::from_json_file(&rel(&file.scenario))?;
        if let Some(grade) = overrides.imu_grade {
            scenario.imu_grade = grade;
        }
        if let Some(seed) = overrides.seed {
            scenario.seeds = crate::scenario::Seeds {
                trajectory: seed,
                imu: seed.wrapping_add(0x9e37_79b9),
                observables: seed.wrapping_add(0x3c6e_f372),
            };
        }

        let constellation = match &file.constellation {
            Some(p) => Constellation::from_json_file(&rel(p))?,
            None => Constellation::gps_like(),
        };

        // Paths inside the config file resolve against the config directory;
        // paths given on the command line resolve against the working
        // directory as typed.
        let attack = match &overrides.attack {
            Some(Some(p)) => Some(AttackSpec::from_json_file(p)?),
            Some(None) => None,
            None => match &file.attack {
                Some(p) => Some(AttackSpec::from_json_file(&rel(p))?),
                None => None,
            },
        };

        let (detector, thresholds) = match &overrides.detector {
            Some(d) => {
                let th = match d {
                    DetectorChoice::Empirical { thresholds: Some(p) } => {
                        Some(read_thresholds(p)?)
                    }
                    _ => None,
                };
                (d.clone(), th)
            }
            None => {
                let th = match &file.detector {
                    DetectorChoice::Empirical { thresholds: Some(p) } => {
                        Some(read_thresholds(&rel(p))?)
                    }
                    _ => None,
                };
                (file.detector.clone(), th)
            }
        };

        let out_dir = overrides
            .out_dir
            .clone()
            .or(file.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));

        let resolved = ResolvedRunConfig {
            scenario,
            constellation,
            environment: file.environment,
            attack,
            detector,
            thresholds,
            out_dir,
        };
        resolved.validate()?;
        Ok(resolved)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.scenario.validate()?;
        validate_schedule(&self.environment, self.scenario.duration_s)?;
        if let DetectorChoice::Chi2 { pf } = self.detector {
            if !(pf > 0.0 && pf < 1.0) {
                return Err(HarnessError::BadConfig(format!("pf {pf} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// Digest over the resolved inputs; identifies a run. The output
    /// directory is where artifacts land, not an input, so it is excluded.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(&(
            &self.scenario,
            &self.constellation,
            &self.environment,
            &self.attack,
            &self.detector,
            &self.thresholds,
        ))
        .expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Artifact directory for this run: out_dir plus a digest prefix.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.digest()[..12])
    }

    pub fn sim<'a>(&'a self) -> ObservableSim<'a> {
        ObservableSim::new(&self.constellation, self.scenario.base_pos(), self.scenario.lever_arm())
    }
}

pub fn read_thresholds(path: &Path) -> Result<Thresholds, HarnessError> {
    let text = fs::read_to_string(path)
        .map_err(|_| HarnessError::MissingArtifact(path.to_path_buf()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_thresholds(path: &Path, thresholds: &Thresholds) -> Result<(), HarnessError> {
    fs::write(path, serde_json::to_string_pretty(thresholds)?)?;
    Ok(())
}

/// Summary of a full pipeline run, persisted as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub detector_mode: String,
    pub num_epochs: usize,
    pub skipped_epochs: usize,
    pub dropped_epochs: usize,
    pub attack_start_s: Option<f64>,
    pub time_to_detect_s: Option<f64>,
    pub false_alarms: usize,
    pub psi_max: f64,
    pub pos_error_rms_m: f64,
    pub pos_error_max_m: f64,
    pub pos_error_final_m: f64,
    pub pos_error_at_attack_end_m: Option<f64>,
    pub warnings: Vec<String>,
}

fn create_writer(path: &Path) -> Result<BufWriter<fs::File>, HarnessError> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn open_reader(path: &Path) -> Result<BufReader<fs::File>, HarnessError> {
    Ok(BufReader::new(
        fs::File::open(path).map_err(|_| HarnessError::MissingArtifact(path.to_path_buf()))?,
    ))
}

/// Simulate truth, IMU and observables into the run directory.
pub fn stage_simulate(cfg: &ResolvedRunConfig, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let truth = generate_trajectory(&cfg.scenario, cfg.scenario.seeds.trajectory)?;
    let imu = synthesize_imu(&truth, &cfg.scenario.imu_grade.model(), cfg.scenario.seeds.imu)?;

    let sim = cfg.sim();
    let mut ledger = AmbiguityLedger::new();
    let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(
        cfg.scenario.seeds.observables,
    );
    let mut epochs = Vec::new();
    for s in truth.iter().step_by(20).skip(1) {
        let env = env_at(&cfg.environment, s.t)?;
        let (e, _) = sim.synthesize_epoch(s, &mut ledger, env, &mut rng)?;
        epochs.push(e);
    }

    write_truth_csv(create_writer(&dir.join("truth.csv"))?, &truth)?;
    write_imu_csv(create_writer(&dir.join("imu.csv"))?, &imu)?;
    write_epochs_jsonl(create_writer(&dir.join("observables.jsonl"))?, &epochs)?;
    Ok(())
}

/// Rewrite the observable stream with the configured attack.
pub fn stage_inject(cfg: &ResolvedRunConfig, dir: &Path) -> Result<Vec<String>, HarnessError> {
    let spec = match &cfg.attack {
        Some(s) => *s,
        None => return Ok(Vec::new()),
    };
    let truth = read_truth_csv(open_reader(&dir.join("truth.csv"))?)?;
    let epochs = read_epochs_jsonl(open_reader(&dir.join("observables.jsonl"))?)?;
    let sim = cfg.sim();
    let (spoofed, report) = apply_attack(&epochs, &spec, &sim, &truth)?;
    write_epochs_jsonl(create_writer(&dir.join("spoofed.jsonl"))?, &spoofed)?;
    Ok(report.warnings)
}

/// Run the filter over the (possibly spoofed) stream.
pub fn stage_filter(cfg: &ResolvedRunConfig, dir: &Path) -> Result<usize, HarnessError> {
    let truth = read_truth_csv(open_reader(&dir.join("truth.csv"))?)?;
    let imu = read_imu_csv(open_reader(&dir.join("imu.csv"))?)?;
    let stream_path = if cfg.attack.is_some() {
        dir.join("spoofed.jsonl")
    } else {
        dir.join("observables.jsonl")
    };
    let epochs = read_epochs_jsonl(open_reader(&stream_path)?)?;

    let sim = cfg.sim();
    let grade = cfg.scenario.imu_grade.model();
    let init = initial_state(&truth, grade)?;
    let run = run_filter(&imu, &epochs, init, &sim, &FilterConfig::new(grade))?;

    write_fixes_csv(create_writer(&dir.join("fixes.csv"))?, &run.fixes)?;
    write_nav_csv(create_writer(&dir.join("nav.csv"))?, &run.states)?;
    fs::write(dir.join("skipped.txt"), format!("{}\n", run.skipped_epochs))?;
    Ok(run.skipped_epochs)
}

fn initial_state(truth: &[TruthState], grade: crate::scenario::ImuGradeModel) -> Result<NavState, HarnessError> {
    let first = truth
        .first()
        .ok_or_else(|| HarnessError::BadConfig("empty truth series".into()))?;
    Ok(NavState::at_truth(first, grade))
}

/// Detector pass over the persisted fixes; writes verdicts, CCDF tables and
/// the run report.
pub fn stage_detect(cfg: &ResolvedRunConfig, dir: &Path) -> Result<RunReport, HarnessError> {
    let fixes = crate::estimator::read_fixes_csv(open_reader(&dir.join("fixes.csv"))?)?;
    let truth = read_truth_csv(open_reader(&dir.join("truth.csv"))?)?;
    let nav = read_nav_positions(&dir.join("nav.csv"))?;
    let skipped: usize = fs::read_to_string(dir.join("skipped.txt"))
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0);

    let (mode, label) = match &cfg.detector {
        DetectorChoice::Chi2 { pf } => (DetectorMode::Chi2 { pf: *pf }, "chi2"),
        DetectorChoice::Empirical { .. } => (DetectorMode::Empirical, "empirical"),
    };
    let mut state = DetectorState::new(DEFAULT_WINDOW_LEN, mode, cfg.thresholds);
    let mut verdicts: Vec<Verdict> = Vec::with_capacity(fixes.len());
    let mut psi_series: Vec<(Environment, f64)> = Vec::with_capacity(fixes.len());
    for fix in &fixes {
        let env = env_at(&cfg.environment, fix.t)?;
        state.update_wfarc(fix);
        let v = state.decide(fix.t, env)?;
        psi_series.push((env, v.psi));
        verdicts.push(v);
    }
    write_verdicts_csv(create_writer(&dir.join("verdicts.csv"))?, &verdicts, &mode)?;

    for env in [Environment::OpenSky, Environment::ShallowUrban, Environment::DeepUrban] {
        let values: Vec<f64> = psi_series
            .iter()
            .filter(|(e, _)| *e == env)
            .map(|(_, p)| *p)
            .collect();
        if values.is_empty() {
            continue;
        }
        let table = ccdf_table(&values, 100);
        write_ccdf_csv(create_writer(&dir.join(format!("ccdf_{env}.csv")))?, &table)?;
    }

    let attack_start = cfg.attack.as_ref().map(|a| a.start_s());
    let ttd = attack_start.and_then(|t0| time_to_detect(&verdicts, t0));
    let false_alarms = verdicts
        .iter()
        .filter(|v| v.hypothesis == Hypothesis::H1)
        .filter(|v| attack_start.map_or(true, |t0| v.t < t0))
        .count();

    // Position error series against the truth at epoch times.
    let mut se = 0.0;
    let mut max_err: f64 = 0.0;
    let mut final_err = 0.0;
    let mut err_at_attack_end = None;
    let attack_end = cfg.attack.as_ref().map(|a| match a {
        AttackSpec::PositionOffset { end_s, .. } | AttackSpec::Timestamp { end_s, .. } => *end_s,
    });
    for (t, pos) in &nav {
        let tr = truth_position_at(&truth, *t)?;
        let err = (pos - tr).norm();
        se += err * err;
        max_err = max_err.max(err);
        final_err = err;
        if let Some(end) = attack_end {
            if (t - end).abs() < 0.1001 {
                err_at_attack_end = Some(err);
            }
        }
    }
    let n = nav.len().max(1) as f64;
    let psi_max = verdicts.iter().map(|v| v.psi).fold(0.0f64, f64::max);
    let dropped = fixes.iter().filter(|f| f.num_pairs == 0).count();

    let report = RunReport {
        config_digest: cfg.digest(),
        detector_mode: label.to_string(),
        num_epochs: fixes.len(),
        skipped_epochs: skipped,
        dropped_epochs: dropped,
        attack_start_s: attack_start,
        time_to_detect_s: ttd,
        false_alarms,
        psi_max,
        pos_error_rms_m: (se / n).sqrt(),
        pos_error_max_m: max_err,
        pos_error_final_m: final_err,
        pos_error_at_attack_end_m: err_at_attack_end,
        warnings: Vec::new(),
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn read_nav_positions(path: &Path) -> Result<Vec<(f64, nalgebra::Vector3<f64>)>, HarnessError> {
    let text = fs::read_to_string(path)
        .map_err(|_| HarnessError::MissingArtifact(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| HarnessError::BadConfig(format!("nav.csv line {}: {e}", idx + 1)))?;
        out.push((f[0], nalgebra::Vector3::new(f[1], f[2], f[3])));
    }
    Ok(out)
}

fn truth_position_at(
    truth: &[TruthState],
    t: f64,
) -> Result<nalgebra::Vector3<f64>, HarnessError> {
    truth
        .iter()
        .find(|s| (s.t - t).abs() < 1e-6)
        .map(|s| s.position)
        .ok_or(HarnessError::UncoveredTime(t))
}

/// Full pipeline in one call; stages communicate through the run directory.
pub fn run_scenario(cfg: &ResolvedRunConfig) -> Result<(RunReport, PathBuf), HarnessError> {
    let dir = cfg.run_dir();
    stage_simulate(cfg, &dir)?;
    let warnings = stage_inject(cfg, &dir)?;
    stage_filter(cfg, &dir)?;
    let mut report = stage_detect(cfg, &dir)?;
    if !warnings.is_empty() {
        report.warnings = warnings;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok((report, dir))
}

/// Run several configs concurrently; each run stays sequential internally and
/// owns its digest-named directory.
pub fn run_campaign(configs: &[ResolvedRunConfig]) -> Vec<Result<(RunReport, PathBuf), HarnessError>> {
    configs.par_iter().map(run_scenario).collect()
}

/// Calibrate empirical thresholds from null runs: per-environment maxima
/// pooled across the provided configs. Individual runs may be
/// single-environment; the pool as a whole must visit both urban classes.
pub fn calibrate(configs: &[ResolvedRunConfig]) -> Result<Thresholds, HarnessError> {
    let results: Vec<Result<(Vec<FixResult>, Vec<Environment>), HarnessError>> = configs
        .par_iter()
        .map(|cfg| {
            if cfg.attack.is_some() {
                return Err(HarnessError::BadConfig(
                    "calibration configs must not contain attacks".into(),
                ));
            }
            let dir = cfg.run_dir();
            stage_simulate(cfg, &dir)?;
            stage_filter(cfg, &dir)?;
            let fixes = crate::estimator::read_fixes_csv(open_reader(&dir.join("fixes.csv"))?)?;
            let envs = fixes
                .iter()
                .map(|f| env_at(&cfg.environment, f.t))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((fixes, envs))
        })
        .collect();

    let mut pooled_fixes: Vec<FixResult> = Vec::new();
    let mut pooled_envs: Vec<Environment> = Vec::new();
    for r in results {
        let (mut fixes, mut envs) = r?;
        // A window-length gap of empty epochs keeps windows from straddling
        // run boundaries in the pooled series.
        for _ in 0..DEFAULT_WINDOW_LEN {
            pooled_fixes.push(FixResult {
                t: 0.0,
                num_pairs: 0,
                eps_phi: 0.0,
                j3: 0.0,
                fix_applied: false,
                fixed_ambiguities: Vec::new(),
            });
            pooled_envs.push(Environment::OpenSky);
        }
        pooled_fixes.append(&mut fixes);
        pooled_envs.append(&mut envs);
    }
    if pooled_fixes.is_empty() {
        return Err(HarnessError::BadConfig("no calibration configs provided".into()));
    }
    Ok(calibrate_empirical_threshold(&pooled_fixes, &pooled_envs, DEFAULT_WINDOW_LEN)?)
}

/// Convenience for tests and campaigns: in-memory simulation of one run's
/// epochs and truth without touching the filesystem.
pub fn simulate_in_memory(
    cfg: &ResolvedRunConfig,
) -> Result<(Vec<TruthState>, Vec<ImuSample>, Vec<EpochMeasurement>), HarnessError> {
    let truth = generate_trajectory(&cfg.scenario, cfg.scenario.seeds.trajectory)?;
    let imu = synthesize_imu(&truth, &cfg.scenario.imu_grade.model(), cfg.scenario.seeds.imu)?;
    let sim = cfg.sim();
    let mut ledger = AmbiguityLedger::new();
    let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(
        cfg.scenario.seeds.observables,
    );
    let mut epochs = Vec::new();
    for s in truth.iter().step_by(20).skip(1) {
        let env = env_at(&cfg.environment, s.t)?;
        let (e, _) = sim.synthesize_epoch(s, &mut ledger, env, &mut rng)?;
        epochs.push(e);
    }
    Ok((truth, imu, epochs))
}
