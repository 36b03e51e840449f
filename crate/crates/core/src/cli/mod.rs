//! Command-line front end: `simulate`, `analyze` and `verify`.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or parse error,
//! 3 numerical error.

mod analyze;
mod verify;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::{ConditionMoments, CovarianceMode};
use crate::error::{Error, Result};
use crate::fmt::{g17, to_json_string};
use crate::pca::within_and_between_from_moments;
use crate::synthgen::{self, Preset, PresetOptions};

pub use analyze::{analyze_moments, AnalysisOptions, AnalysisReport, Basis, Source};
pub use verify::{verify_scenario, Check, Comparison, VerifyReport};

pub const SEED_ENV: &str = "VARALLOC_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "varalloc",
    version,
    about = "Within- and between-condition PCA diagnostics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a preset scenario, a sample from it and its exact moments.
    Simulate(SimulateArgs),
    /// Analyse a CSV dataset or a moments file.
    Analyze(AnalyzeArgs),
    /// Check the expected verdicts of a scenario.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RotationKind {
    None,
    Varimax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub preset: String,
    #[arg(long, default_value_t = synthgen::DEFAULT_P)]
    pub p: usize,
    #[arg(long, default_value_t = synthgen::DEFAULT_K)]
    pub k: usize,
    /// Observations per condition.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = synthgen::DEFAULT_EFFECT)]
    pub effect: f64,
    /// Comma-separated scale factors, one per condition (theorem4).
    #[arg(long, value_delimiter = ',')]
    pub theta: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Wanted components recorded in the scenario.
    #[arg(long)]
    pub q: Option<usize>,
    /// Whiten the draws so sample moments equal the population moments.
    #[arg(long)]
    pub exact: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// CSV with a `condition` column.
    #[arg(long, conflicts_with = "moments", required_unless_present = "moments")]
    pub input: Option<PathBuf>,
    /// Moments file written by `simulate`.
    #[arg(long)]
    pub moments: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub q: usize,
    #[arg(long, value_enum, default_value_t = RotationKind::Varimax)]
    pub rotation: RotationKind,
    /// Kaiser row normalisation for varimax.
    #[arg(long)]
    pub normalize: bool,
    /// Component basis that is split and rotated.
    #[arg(long, value_enum, default_value_t = Basis::Total)]
    pub basis: Basis,
    /// Shape-matching tolerance; defaults to 1e-6 for moments, 0.05 for data.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, value_enum, default_value_t = CovarianceMode::Population)]
    pub mode: CovarianceMode,
    /// One-based component expected to carry the condition effect.
    #[arg(long, default_value_t = 1)]
    pub target: usize,
    /// Report path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Wanted components; defaults to the scenario's value.
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long, default_value_t = crate::allocation::POPULATION_TOL)]
    pub tolerance: f64,
    /// Defaults to `verify.json` next to the scenario.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for the moment-matched sample; falls back to the scenario seed.
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

/// Contents of `moments.json`: exact moments plus their PCA solutions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentsFile {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
    #[serde(with = "crate::json::vectors")]
    pub means: Vec<Array1<f64>>,
    #[serde(with = "crate::json::matrices")]
    pub covariances: Vec<Array2<f64>>,
    #[serde(with = "crate::json::matrix")]
    pub between_covariance: Array2<f64>,
    pub proportions: Vec<f64>,
    #[serde(
        default,
        with = "crate::json::matrices",
        skip_serializing_if = "Vec::is_empty"
    )]
    pub within_loadings: Vec<Array2<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub within_eigenvalues: Vec<Vec<f64>>,
    #[serde(
        default,
        with = "crate::json::opt_matrix",
        skip_serializing_if = "Option::is_none"
    )]
    pub between_loadings: Option<Array2<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub between_eigenvalues: Option<Vec<f64>>,
}

impl MomentsFile {
    pub fn from_moments(moments: &ConditionMoments, levels: Vec<String>) -> Result<Self> {
        let pca = within_and_between_from_moments(moments)?;
        Ok(Self {
            levels,
            means: moments.means.clone(),
            covariances: moments.covariances.clone(),
            between_covariance: moments.between_covariance.clone(),
            proportions: moments.proportions.clone(),
            within_loadings: pca.within.iter().map(|s| s.loadings.clone()).collect(),
            within_eigenvalues: pca.within.iter().map(|s| s.eigenvalues.to_vec()).collect(),
            between_loadings: Some(pca.between.loadings.clone()),
            between_eigenvalues: Some(pca.between.eigenvalues.to_vec()),
        })
    }

    /// Moments revalidated; the stored between covariance is recomputed.
    pub fn moments(&self) -> Result<ConditionMoments> {
        ConditionMoments::new(
            self.means.clone(),
            self.covariances.clone(),
            self.proportions.clone(),
        )
    }
}

/// What a command produced, for the exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    VerificationFailed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::VerificationFailed => 1,
        }
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args).map(|_| Outcome::Success),
        Command::Analyze(args) => cmd_analyze(&args).map(|_| Outcome::Success),
        Command::Verify(args) => cmd_verify(&args).map(|report| {
            if report.passed {
                Outcome::Success
            } else {
                Outcome::VerificationFailed
            }
        }),
    }
}

/// Paths written by `simulate`.
#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub scenario: PathBuf,
    pub data: PathBuf,
    pub moments: PathBuf,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<SimulateOutput> {
    let preset: Preset = args.preset.parse()?;
    let spec = synthgen::build_preset(
        preset,
        &PresetOptions {
            p: args.p,
            k: args.k,
            q: args.q,
            effect_size: args.effect,
            theta: args.theta.clone(),
            noise_sd: args.noise,
            seed: args.seed,
        },
    )?;
    let ds = if args.exact {
        synthgen::moment_matched_sample(&spec, args.n, args.seed)?
    } else {
        synthgen::sample(&spec, args.n, args.seed)?
    };
    let moments = synthgen::population_moments(&spec)?;
    let moments_file = MomentsFile::from_moments(&moments, ds.level_names().to_vec())?;

    fs::create_dir_all(&args.out)?;
    let out = SimulateOutput {
        scenario: args.out.join("scenario.json"),
        data: args.out.join("data.csv"),
        moments: args.out.join("moments.json"),
    };
    fs::write(&out.scenario, to_json_string(&spec)?)?;
    let mut csv_bytes = Vec::new();
    ds.write_csv(&mut csv_bytes)?;
    fs::write(&out.data, csv_bytes)?;
    fs::write(&out.moments, to_json_string(&moments_file)?)?;
    Ok(out)
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<AnalysisReport> {
    if let Some(t) = args.tolerance {
        if t.is_nan() || t <= 0.0 {
            return Err(Error::Invalid(format!(
                "tolerance must be positive, got {t}"
            )));
        }
    }
    let mut opts = AnalysisOptions {
        q: args.q,
        rotation: args.rotation,
        normalize: args.normalize,
        basis: args.basis,
        tolerance: crate::allocation::POPULATION_TOL,
        mode: args.mode,
        target: args.target,
    };
    let report = match (&args.input, &args.moments) {
        (Some(path), _) => {
            let file = fs::File::open(path)?;
            let ds = crate::dataset::ConditionDataset::read_csv(file)?;
            opts.tolerance = args.tolerance.unwrap_or(crate::allocation::SAMPLE_TOL);
            analyze::analyze_dataset(&ds, &opts)?
        }
        (None, Some(path)) => {
            let file: MomentsFile = serde_json::from_str(&fs::read_to_string(path)?)?;
            opts.tolerance = args.tolerance.unwrap_or(crate::allocation::POPULATION_TOL);
            analyze_moments(
                &file.moments()?,
                file.levels.clone(),
                &opts,
                Source::Moments,
            )?
        }
        (None, None) => return Err(Error::Invalid("need --input or --moments".into())),
    };
    let text = match args.format {
        ReportFormat::Json => to_json_string(&report)?,
        ReportFormat::Csv => report.to_csv()?,
    };
    match &args.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text)?;
        }
        None => print!("{text}"),
    }
    Ok(report)
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<VerifyReport> {
    if args.tolerance.is_nan() || args.tolerance <= 0.0 {
        return Err(Error::Invalid(format!(
            "tolerance must be positive, got {}",
            args.tolerance
        )));
    }
    let spec: synthgen::ScenarioSpec = serde_json::from_str(&fs::read_to_string(&args.scenario)?)?;
    let seed = args.seed.unwrap_or(spec.seed);
    let report = verify_scenario(&spec, args.q.unwrap_or(spec.q), args.tolerance, seed)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| default_verify_path(&args.scenario));
    fs::write(out, to_json_string(&report)?)?;
    Ok(report)
}

fn default_verify_path(scenario: &Path) -> PathBuf {
    scenario
        .parent()
        .map_or_else(|| PathBuf::from("verify.json"), |d| d.join("verify.json"))
}

/// Short statements of the property behind each group of checks.
pub(crate) fn paper_refs(keys: &[&str]) -> BTreeMap<String, String> {
    let text = |key: &str| match key {
        "pca" => "loadings reproduce the analysed covariance: A A' = S",
        "theorem1" => {
            "theorem1: rotating the wanted components by T moves the condition effect of \
             component 1 onto every component j with t*_j1 != 0"
        }
        "theorem2" => {
            "theorem2: identical within and between loadings let one set of components carry \
             within and between variance without misallocation"
        }
        "theorem3" => {
            "theorem3: a shared first loading vector suffices to combine the first within and \
             between components; the residual stays in the later within components"
        }
        "theorem4" => {
            "theorem4: first loadings equal up to positive scale theta_i (theta_i a_i = a_b) \
             still allow the combination with weights 1/theta_i"
        }
        "mismatch" => "negative control: first loadings of different shape cannot be combined",
        "diagnostics" => {
            "congruence and Pearson correlation of loadings are invariant to positive scaling"
        }
        _ => "",
    };
    keys.iter()
        .map(|k| (k.to_string(), text(k).to_string()))
        .collect()
}

/// Long-format CSV rows `table,row,column,value`.
pub(crate) struct LongTable {
    writer: csv::Writer<Vec<u8>>,
}

impl LongTable {
    pub(crate) fn new() -> Result<Self> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(["table", "row", "column", "value"])
            .map_err(csv_error)?;
        Ok(Self { writer })
    }

    pub(crate) fn push(&mut self, table: &str, row: &str, column: &str, value: f64) -> Result<()> {
        self.writer
            .write_record([table, row, column, &g17(value)])
            .map_err(csv_error)
    }

    pub(crate) fn matrix(
        &mut self,
        table: &str,
        rows: &[String],
        columns: &[String],
        values: &Array2<f64>,
    ) -> Result<()> {
        for (i, r) in rows.iter().enumerate() {
            for (j, c) in columns.iter().enumerate() {
                self.push(table, r, c, values[[i, j]])?;
            }
        }
        Ok(())
    }

    pub(crate) fn finish(self) -> Result<String> {
        let bytes = self
            .writer
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Invalid(format!("{other:?}")),
    }
}

/// `["name1", "name2", ...]`.
pub(crate) fn numbered(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}{i}")).collect()
}
