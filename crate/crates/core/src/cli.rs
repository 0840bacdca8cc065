//! Command-line entry point: wires JSON configs to the library modules and
//! emits CSV/JSON artifacts plus a checksummed run manifest.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical abort,
//! 3 acceptance-check failure.

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::prelude::*;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use crate::error::{Error, Result};
use crate::train::{LossKind, TrainConfig, TrainSession};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "symindex", version, about = "Symmetric single-index learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to a JSON config; command defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum LossArg {
    L,
    Lhat,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo check of powersum orthogonality under the CUE measure.
    Orthogonality(CommonArgs),
    /// Integrate the summary-statistics flow.
    Flow(CommonArgs),
    /// Full-batch preconditioned gradient descent.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of weight seeds (seed_weights, seed_weights+1, ...).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Use the reference experiment configuration.
        #[arg(long)]
        reproduce_paper: bool,
        /// Override the loss of the loaded config.
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
    },
    /// Initialization diagnostics over a seed sweep.
    InitDiag(CommonArgs),
}

/// Top-level entry point used by `main`.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Orthogonality(common) => cmd_orthogonality(&common),
        Command::Flow(common) => cmd_flow(&common),
        Command::Train {
            common,
            seeds,
            reproduce_paper,
            loss,
        } => cmd_train(&common, seeds, reproduce_paper, loss),
        Command::InitDiag(common) => cmd_init_diag(&common),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Validation(_) | Error::Regime(_) | Error::Io(_) | Error::Json(_) => {
                    ExitCode::from(1)
                }
                Error::Numerical(_) => ExitCode::from(2),
            }
        }
    }
}

#[derive(Debug, Serialize)]
struct ArtifactEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    schema_version: u32,
    config: serde_json::Value,
    artifacts: Vec<ArtifactEntry>,
}

struct OutputDir {
    dir: PathBuf,
    artifacts: Vec<ArtifactEntry>,
}

impl OutputDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        let mut hasher = Sha256::new();
        hasher.update(bytes);
        self.artifacts.push(ArtifactEntry {
            path: name.to_string(),
            sha256: format!("{:x}", hasher.finalize()),
        });
        Ok(())
    }

    fn finish(self, command: &str, config: serde_json::Value) -> Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            schema_version: SCHEMA_VERSION,
            config,
            artifacts: self.artifacts,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("cannot read config {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn check_schema(version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::validation(format!(
            "unsupported schema_version {version}, expected {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// orthogonality

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrthogonalityConfig {
    pub schema_version: u32,
    #[serde(rename = "N")]
    pub n_dim: usize,
    pub k_max: u32,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for OrthogonalityConfig {
    fn default() -> Self {
        OrthogonalityConfig {
            schema_version: SCHEMA_VERSION,
            n_dim: 25,
            k_max: 5,
            n_samples: 20_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize)]
struct OrthogonalityReport {
    pairs: Vec<OrthogonalityRow>,
    max_abs_z: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct OrthogonalityRow {
    k: u32,
    l: u32,
    estimate_re: f64,
    estimate_im: f64,
    stderr: f64,
    exact: f64,
    z_score: f64,
}

fn cmd_orthogonality(common: &CommonArgs) -> Result<ExitCode> {
    let cfg: OrthogonalityConfig = match &common.config {
        Some(p) => load_config(p)?,
        None => OrthogonalityConfig::default(),
    };
    check_schema(cfg.schema_version)?;
    if cfg.n_samples == 0 {
        return Err(Error::validation("n_samples must be >= 1"));
    }
    if cfg.k_max as usize > cfg.n_dim {
        return Err(Error::regime(format!(
            "k_max = {} exceeds N = {}: |lambda| > N has no Hall oracle",
            cfg.k_max, cfg.n_dim
        )));
    }
    let checks =
        crate::sympoly::orthogonality_scan(cfg.n_dim, cfg.k_max, cfg.n_samples, cfg.seed)?;
    let mut rows = Vec::new();
    let mut max_abs_z = 0.0f64;
    for chk in &checks {
        max_abs_z = max_abs_z.max(chk.z_score.abs());
        rows.push(OrthogonalityRow {
            k: chk.k,
            l: chk.l,
            estimate_re: chk.estimate.estimate.re,
            estimate_im: chk.estimate.estimate.im,
            stderr: chk.estimate.stderr,
            exact: chk.exact.re,
            z_score: chk.z_score,
        });
    }
    let pass = max_abs_z <= 4.0;
    let report = OrthogonalityReport {
        pairs: rows,
        max_abs_z,
        pass,
    };
    let mut out = OutputDir::create(&common.out)?;
    out.write(
        "orthogonality.json",
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    out.finish("orthogonality", serde_json::to_value(&cfg)?)?;
    if !common.quiet {
        println!(
            "orthogonality: {} pairs, max |z| = {max_abs_z:.3}, {}",
            report.pairs.len(),
            if pass { "pass" } else { "FAIL" }
        );
    }
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

// ---------------------------------------------------------------------------
// flow

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub schema_version: u32,
    pub s: usize,
    pub delta: f64,
    pub r0: f64,
    pub cos_s_theta0: f64,
    /// Defaults to `1 - r0^2` when omitted.
    #[serde(default)]
    pub v0: Option<f64>,
    pub eps: f64,
    pub horizon: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            schema_version: SCHEMA_VERSION,
            s: 3,
            delta: 0.0,
            r0: 0.1,
            cos_s_theta0: 0.6,
            v0: None,
            eps: 1e-2,
            horizon: 400.0,
        }
    }
}

#[derive(Debug, Serialize)]
struct FlowReport {
    stopping_time: Option<f64>,
    time_bound_reference: f64,
    cos_monotone: bool,
    r_in_unit_interval: bool,
    clamp_events: usize,
    events: Vec<crate::dynamics::PhaseEvent>,
    terminal: crate::dynamics::SummaryStats,
}

fn cmd_flow(common: &CommonArgs) -> Result<ExitCode> {
    let cfg: FlowConfig = match &common.config {
        Some(p) => load_config(p)?,
        None => FlowConfig::default(),
    };
    check_schema(cfg.schema_version)?;
    if cfg.r0 <= 0.0 {
        return Err(Error::validation(
            "r0 must be positive (r0 = 0 is excluded at initialization)",
        ));
    }
    let v0 = cfg.v0.unwrap_or(1.0 - cfg.r0 * cfg.r0);
    let state0 = crate::dynamics::SummaryStats::from_polar(
        cfg.r0,
        cfg.cos_s_theta0,
        v0,
        cfg.delta,
        cfg.s,
        1.0,
    )?;
    let traj = crate::dynamics::integrate_flow(
        &state0,
        cfg.s,
        cfg.horizon,
        crate::dynamics::StepControl::default(),
    )?;
    let stopping = crate::dynamics::stopping_time(&traj, cfg.eps)?;
    let bound = crate::dynamics::time_bound(cfg.s, cfg.eps, cfg.r0)?;
    let cos_monotone = traj
        .states
        .windows(2)
        .all(|p| p[1].cos_s_theta >= p[0].cos_s_theta - 1e-12);
    let r_in_unit = traj.states.iter().all(|s| (0.0..=1.0 + 1e-12).contains(&s.r));
    let report = FlowReport {
        stopping_time: stopping,
        time_bound_reference: bound,
        cos_monotone,
        r_in_unit_interval: r_in_unit,
        clamp_events: traj.clamp_events.len(),
        events: traj.events.clone(),
        terminal: *traj.terminal(),
    };
    let mut out = OutputDir::create(&common.out)?;
    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    out.write("trajectory.csv", &csv)?;
    out.write("flow.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    out.finish("flow", serde_json::to_value(&cfg)?)?;
    if !common.quiet {
        match stopping {
            Some(t) => println!("flow: stopping time {t:.4} (reference bound {bound:.3e})"),
            None => println!("flow: accuracy not reached within horizon {}", cfg.horizon),
        }
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCliConfig {
    pub schema_version: u32,
    pub train: TrainConfig,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    runs: usize,
    successes: usize,
    stalls: usize,
    dips_among_successes: usize,
    success_threshold: f64,
    delta: f64,
    preconditioner_rank: usize,
    terminal_r: Vec<f64>,
}

fn cmd_train(
    common: &CommonArgs,
    seeds: u64,
    reproduce_paper: bool,
    loss: Option<LossArg>,
) -> Result<ExitCode> {
    let mut train_cfg = match (&common.config, reproduce_paper) {
        (Some(p), false) => {
            let cfg: TrainCliConfig = load_config(p)?;
            check_schema(cfg.schema_version)?;
            cfg.train
        }
        (None, true) => TrainConfig::paper_preset(),
        (Some(_), true) => {
            return Err(Error::validation(
                "--config and --reproduce-paper are mutually exclusive",
            ))
        }
        (None, false) => {
            return Err(Error::validation(
                "train needs --config PATH or --reproduce-paper",
            ))
        }
    };
    if let Some(kind) = loss {
        train_cfg.loss_kind = match kind {
            LossArg::L => LossKind::L,
            LossArg::Lhat => LossKind::Lhat,
        };
    }
    if seeds == 0 {
        return Err(Error::validation("--seeds must be >= 1"));
    }
    let session = TrainSession::prepare(&train_cfg)?;
    let mut out = OutputDir::create(&common.out)?;
    let mut successes = 0;
    let mut dips = 0;
    let mut terminal_r = Vec::new();
    for i in 0..seeds {
        let seed = train_cfg.seed_weights + i;
        let rec = session.run(seed)?;
        if rec.success {
            successes += 1;
            if crate::train::has_recovery_dip(&rec) {
                dips += 1;
            }
        }
        terminal_r.push(rec.outcome.r);
        let mut csv = Vec::new();
        rec.write_csv(&mut csv)?;
        out.write(&format!("run_{seed}.csv"), &csv)?;
        out.write(
            &format!("run_{seed}.json"),
            serde_json::to_string_pretty(&rec)?.as_bytes(),
        )?;
        if !common.quiet {
            println!(
                "seed {seed}: terminal r = {:.4}, {} ({:.1}s)",
                rec.outcome.r,
                if rec.success { "recovered" } else { "stalled" },
                rec.wallclock_secs
            );
        }
    }
    let summary = TrainSummary {
        runs: seeds as usize,
        successes,
        stalls: seeds as usize - successes,
        dips_among_successes: dips,
        success_threshold: train_cfg.success_threshold,
        delta: session.delta(),
        preconditioner_rank: session.preconditioner().rank(),
        terminal_r,
    };
    out.write("summary.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
    out.finish("train", serde_json::to_value(&train_cfg)?)?;
    if !common.quiet {
        println!(
            "train: {successes}/{seeds} runs reached r >= {}",
            train_cfg.success_threshold
        );
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// init-diag

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitDiagConfig {
    pub schema_version: u32,
    #[serde(rename = "N")]
    pub n_dim: usize,
    #[serde(rename = "M")]
    pub width: usize,
    #[serde(rename = "K")]
    pub depth: usize,
    pub activation: crate::model::ActivationKind,
    pub alphas: Vec<[f64; 2]>,
    pub seed_frozen: u64,
    pub seed_hstar: u64,
    pub seed_weights: u64,
    pub runs: usize,
}

impl Default for InitDiagConfig {
    fn default() -> Self {
        let a = 1.0 / 3f64.sqrt();
        InitDiagConfig {
            schema_version: SCHEMA_VERSION,
            n_dim: 25,
            width: 100,
            depth: 150,
            activation: crate::model::ActivationKind::Experiment,
            alphas: vec![[0.0, 0.0], [0.0, 0.0], [a, 0.0], [a, 0.0], [a, 0.0]],
            seed_frozen: 2,
            seed_hstar: 4,
            seed_weights: 1,
            runs: 1000,
        }
    }
}

#[derive(Debug, Serialize)]
struct InitDiagSummary {
    runs: usize,
    cos_half_frequency: Option<f64>,
    delta: f64,
    sigma_n_over_sqrt_m: f64,
    r0_min: f64,
    r0_median: f64,
    r0_max: f64,
}

fn cmd_init_diag(common: &CommonArgs) -> Result<ExitCode> {
    let cfg: InitDiagConfig = match &common.config {
        Some(p) => load_config(p)?,
        None => InitDiagConfig::default(),
    };
    check_schema(cfg.schema_version)?;
    if cfg.runs == 0 {
        return Err(Error::validation("runs must be >= 1"));
    }
    let act = crate::model::activation(cfg.activation, cfg.n_dim, cfg.depth)?;
    let mut rng_frozen =
        <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed_frozen);
    let frozen = crate::model::frozen_weights_uniform(cfg.width, &mut rng_frozen);
    let mut rng_h = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed_hstar);
    let h_star = crate::model::sample_h_star(cfg.n_dim, &mut rng_h);
    let alphas = Array1::from_iter(cfg.alphas.iter().map(|p| C64::new(p[0], p[1])));
    let teacher = crate::model::TeacherSpec::new(cfg.n_dim, h_star, alphas)?;
    let student = crate::model::StudentSpec::build(
        &act,
        frozen,
        cfg.depth,
        &teacher,
        crate::model::LinkScale::PaperTheory,
    )?;
    let s = student.info_exponent() as f64;
    let delta = crate::init::projection_deficiency(&student, teacher.h_star())?;
    let vdm = crate::init::vandermonde_diagnostics(student.frozen_weights(), cfg.n_dim)?;
    let mut rng_w =
        <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed_weights);
    let mut reports = Vec::with_capacity(cfg.runs);
    let mut cos_hits = 0usize;
    let mut r0s = Vec::with_capacity(cfg.runs);
    for _ in 0..cfg.runs {
        let draw = crate::init::init_weights(&student, &mut rng_w)?;
        let summary =
            crate::dynamics::summary_from_weights(&draw.w0, &student, &teacher, delta);
        if summary.cos_s_theta >= 0.5 {
            cos_hits += 1;
        }
        r0s.push(summary.r);
        reports.push(crate::init::InitReport {
            r0: summary.r,
            cos_s_theta0: summary.cos_s_theta,
            v0: summary.v,
            delta,
            norm_aw_pre_normalization: draw.aw_norm,
            sigma1_x: vdm.sigma1,
            sigma_n_x: vdm.sigma_n,
            w_norm: draw.w_norm,
            r0_lower_scale: act.sigma_minus / (act.sigma_plus * (cfg.width as f64).sqrt()),
        });
    }
    r0s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let summary = InitDiagSummary {
        runs: cfg.runs,
        cos_half_frequency: if cfg.runs > 1 {
            Some(cos_hits as f64 / cfg.runs as f64)
        } else {
            None
        },
        delta,
        sigma_n_over_sqrt_m: vdm.sigma_n / (cfg.width as f64).sqrt(),
        r0_min: r0s[0],
        r0_median: r0s[r0s.len() / 2],
        r0_max: *r0s.last().unwrap(),
    };
    let _ = s;
    let mut out = OutputDir::create(&common.out)?;
    out.write(
        "init_reports.json",
        serde_json::to_string_pretty(&reports)?.as_bytes(),
    )?;
    out.write(
        "init_summary.json",
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    out.finish("init-diag", serde_json::to_value(&cfg)?)?;
    if !common.quiet {
        match summary.cos_half_frequency {
            Some(f) => println!(
                "init-diag: {} runs, P(cos s theta0 >= 1/2) = {f:.3}, delta = {:.2e}",
                cfg.runs, delta
            ),
            None => println!("init-diag: single report, delta = {delta:.2e}"),
        }
    }
    Ok(ExitCode::SUCCESS)
}
