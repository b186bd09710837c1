//! Experiment drivers: strict JSON configs, rate sweeps, Monte Carlo
//! comparisons and the linear closed-form checks, written as CSV files with
//! metadata sidecars.

mod oracle;
mod output;
mod sampling;
mod sweeps;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::LdpError;
use crate::gp::Dataset;
use crate::mc::MalaConfig;
use crate::nngp::{ActivationKind, NetworkSpec};
use crate::rate::OptimizerSettings;

pub use oracle::log_log_slope;
pub use output::{Cell, Sink, VERSION};

/// Experiments selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    #[serde(rename = "01a")]
    PriorRate,
    #[serde(rename = "01b")]
    PosteriorRate,
    #[serde(rename = "01c")]
    MapCurve,
    #[serde(rename = "02a")]
    PriorVsNngp,
    #[serde(rename = "02b")]
    PosteriorVsNngp,
    #[serde(rename = "02c")]
    MapVsNngp,
    #[serde(rename = "03a")]
    PriorTails,
    #[serde(rename = "03b")]
    PosteriorSampling,
    #[serde(rename = "rate")]
    Rate,
    #[serde(rename = "oracle")]
    Oracle,
}

impl Experiment {
    pub const ALL: [Experiment; 10] = [
        Experiment::PriorRate,
        Experiment::PosteriorRate,
        Experiment::MapCurve,
        Experiment::PriorVsNngp,
        Experiment::PosteriorVsNngp,
        Experiment::MapVsNngp,
        Experiment::PriorTails,
        Experiment::PosteriorSampling,
        Experiment::Rate,
        Experiment::Oracle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::PriorRate => "01a",
            Experiment::PosteriorRate => "01b",
            Experiment::MapCurve => "01c",
            Experiment::PriorVsNngp => "02a",
            Experiment::PosteriorVsNngp => "02b",
            Experiment::MapVsNngp => "02c",
            Experiment::PriorTails => "03a",
            Experiment::PosteriorSampling => "03b",
            Experiment::Rate => "rate",
            Experiment::Oracle => "oracle",
        }
    }

    /// Default sweep range; the sweep variable is `y` except for the
    /// prediction curves, which sweep `x_test`.
    fn default_grid(&self) -> Grid {
        let (min, max) = match self {
            Experiment::MapCurve | Experiment::MapVsNngp => (-4.0, 4.0),
            Experiment::PosteriorVsNngp => (0.0, 2.0),
            Experiment::PriorTails => (0.05, 1.5),
            _ => (-1.0, 4.0),
        };
        Grid {
            min,
            max,
            count: DEFAULT_GRID_COUNT,
        }
    }

    fn default_x_test(&self) -> f64 {
        match self {
            Experiment::PosteriorSampling => 5.0,
            _ => 3.0,
        }
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
                format!("unknown experiment `{s}` (expected one of {})", names.join(", "))
            })
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_GRID_COUNT: usize = 101;

fn default_count() -> usize {
    DEFAULT_GRID_COUNT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub min: f64,
    pub max: f64,
    #[serde(default = "default_count")]
    pub count: usize,
}

impl Grid {
    pub fn points(&self) -> Vec<f64> {
        let n = self.count - 1;
        (0..self.count)
            .map(|k| {
                if k == n {
                    self.max
                } else {
                    self.min + (self.max - self.min) * k as f64 / n as f64
                }
            })
            .collect()
    }

    fn validate(&self) -> Result<(), String> {
        if self.count < 2 {
            return Err(format!("grid.count must be >= 2, got {}", self.count));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(format!("grid needs finite min < max, got [{}, {}]", self.min, self.max));
        }
        Ok(())
    }
}

/// A scalar or a vector input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputPoint {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl InputPoint {
    fn to_vec(&self) -> Vec<f64> {
        match self {
            InputPoint::Scalar(v) => vec![*v],
            InputPoint::Vector(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineDataset {
    pub train_x: Vec<InputPoint>,
    pub train_y: Vec<f64>,
}

/// Training data: the preset `"heaviside6"` or inline pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum DatasetConfig {
    Preset(String),
    Inline(InlineDataset),
}

impl<'de> Deserialize<'de> for DatasetConfig {
    // Dispatch by JSON shape so errors inside the inline form name the key.
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::String(s) if s == "heaviside6" => Ok(DatasetConfig::Preset(s)),
            serde_json::Value::String(s) => Err(D::Error::custom(format!(
                "unknown dataset preset `{s}` (expected `heaviside6`)"
            ))),
            serde_json::Value::Object(_) => serde_json::from_value(v).map(DatasetConfig::Inline).map_err(D::Error::custom),
            _ => Err(D::Error::custom("dataset must be a preset name or an object")),
        }
    }
}

impl DatasetConfig {
    /// Dataset with the given test inputs appended.
    pub fn build(&self, test_x: &[Vec<f64>]) -> crate::Result<Dataset> {
        match self {
            DatasetConfig::Preset(_) => {
                let train: Vec<Vec<f64>> = crate::gp::HEAVISIDE6_INPUTS.iter().map(|&v| vec![v]).collect();
                let y: Vec<f64> = crate::gp::HEAVISIDE6_INPUTS
                    .iter()
                    .map(|&v| if v >= 0.0 { 1.0 } else { 0.0 })
                    .collect();
                Dataset::from_points(&train, &y, test_x)
            }
            DatasetConfig::Inline(d) => {
                let train: Vec<Vec<f64>> = d.train_x.iter().map(InputPoint::to_vec).collect();
                Dataset::from_points(&train, &d.train_y, test_x)
            }
        }
    }
}

fn default_widths() -> Vec<usize> {
    vec![32, 64, 128, 256]
}
fn default_tail_samples() -> u64 {
    1_000_000
}
fn default_batch() -> u64 {
    100_000
}

/// Prior tail sampling across widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailSampling {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_tail_samples")]
    pub n_samples: u64,
    #[serde(default = "default_batch")]
    pub batch: u64,
}

impl Default for TailSampling {
    fn default() -> Self {
        Self {
            widths: default_widths(),
            n_samples: default_tail_samples(),
            batch: default_batch(),
        }
    }
}

fn default_bins() -> usize {
    60
}

/// Posterior sampling regimes. A regime's `seed` is an offset added to the
/// top-level seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorSampling {
    pub regimes: Vec<NamedRegime>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedRegime {
    pub name: String,
    pub config: MalaConfig,
}

impl Default for PosteriorSampling {
    fn default() -> Self {
        Self {
            regimes: vec![
                NamedRegime {
                    name: "tempered".into(),
                    config: MalaConfig::tempered(128, 0),
                },
                NamedRegime {
                    name: "standard".into(),
                    config: MalaConfig::standard(128, 1),
                },
            ],
            histogram_bins: default_bins(),
        }
    }
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: Option<Experiment>,
    pub network: NetworkSpec,
    /// Activations to sweep; defaults to the network's own.
    #[serde(default)]
    pub activations: Vec<ActivationKind>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub grid: Option<Grid>,
    #[serde(default)]
    pub x_test: Option<f64>,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub sampler: Option<TailSampling>,
    #[serde(default)]
    pub mala: Option<PosteriorSampling>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

/// Failure of an experiment run, mapped to the process exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    Config(String),
    NotConverged(String),
    Sampler(String),
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::NotConverged(_) => 3,
            RunError::Sampler(_) => 4,
            RunError::Io(_) => 1,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "config error: {m}"),
            RunError::NotConverged(m) => write!(f, "numerical failure: {m}"),
            RunError::Sampler(m) => write!(f, "sampler failure: {m}"),
            RunError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<LdpError> for RunError {
    fn from(e: LdpError) -> Self {
        match e {
            LdpError::InvalidArgument(_) | LdpError::DimensionMismatch(_) | LdpError::NonFiniteInput(_) => {
                RunError::Config(e.to_string())
            }
            LdpError::NonFiniteGradient { .. } => RunError::Sampler(e.to_string()),
            _ => RunError::NotConverged(e.to_string()),
        }
    }
}

impl ExperimentConfig {
    /// Parses strict JSON; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                RunError::Config(e.inner().to_string())
            } else {
                RunError::Config(format!("at `{path}`: {}", e.inner()))
            }
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn grid_for(&self, exp: Experiment) -> Grid {
        self.grid.clone().unwrap_or_else(|| exp.default_grid())
    }

    pub fn x_test_for(&self, exp: Experiment) -> f64 {
        self.x_test.unwrap_or_else(|| exp.default_x_test())
    }

    pub fn activations(&self) -> Vec<ActivationKind> {
        if self.activations.is_empty() {
            vec![self.network.activation]
        } else {
            self.activations.clone()
        }
    }

    pub fn spec_for(&self, act: ActivationKind) -> NetworkSpec {
        NetworkSpec {
            activation: act,
            ..self.network.clone()
        }
    }

    /// Checks the parts every experiment relies on plus the ones `exp` needs.
    pub fn validate(&self, exp: Experiment) -> Result<(), RunError> {
        if let Some(e) = self.experiment {
            if e != exp {
                return Err(RunError::Config(format!(
                    "config is for experiment `{e}` but `{exp}` was requested"
                )));
            }
        }
        self.network.validate()?;
        for a in &self.activations {
            a.validate()?;
        }
        self.optimizer.validate()?;
        self.grid_for(exp).validate().map_err(RunError::Config)?;
        if !self.x_test_for(exp).is_finite() {
            return Err(RunError::Config("x_test must be finite".into()));
        }
        if self.network.d_in != 1 {
            return Err(RunError::Config("experiments use scalar inputs (network.d_in = 1)".into()));
        }
        let needs_data = matches!(
            exp,
            Experiment::PosteriorRate
                | Experiment::MapCurve
                | Experiment::PosteriorVsNngp
                | Experiment::MapVsNngp
                | Experiment::PosteriorSampling
        );
        if needs_data && self.dataset.is_none() {
            return Err(RunError::Config(format!("experiment `{exp}` needs a `dataset`")));
        }
        if let Some(d) = &self.dataset {
            d.build(&[])?;
        }
        if let Some(s) = &self.sampler {
            if s.widths.is_empty() || s.widths.contains(&0) {
                return Err(RunError::Config("sampler.widths must be nonempty and positive".into()));
            }
            if s.n_samples == 0 || s.batch == 0 {
                return Err(RunError::Config("sampler.n_samples and sampler.batch must be >= 1".into()));
            }
        }
        if let Some(m) = &self.mala {
            if m.regimes.is_empty() {
                return Err(RunError::Config("mala.regimes must be nonempty".into()));
            }
            if m.histogram_bins == 0 {
                return Err(RunError::Config("mala.histogram_bins must be >= 1".into()));
            }
            for r in &m.regimes {
                r.config.validate().map_err(|e| RunError::Config(format!("regime `{}`: {e}", r.name)))?;
            }
        }
        if exp == Experiment::Oracle {
            match self.network.activation {
                ActivationKind::Linear { .. } => {}
                _ => return Err(RunError::Config("oracle needs a linear activation".into())),
            }
            if self.network.bias_variance != 0.0 {
                return Err(RunError::Config("oracle needs network.bias_variance = 0".into()));
            }
        }
        Ok(())
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    /// Grid points or checks that failed; nonempty means exit code 3.
    pub failures: Vec<String>,
}

/// Runs `exp` writing into `out`.
pub fn run(exp: Experiment, cfg: &ExperimentConfig, out: &Path) -> Result<RunReport, RunError> {
    cfg.validate(exp)?;
    let mut sink = Sink::new(out, cfg.hash(), cfg.seed, exp.name())?;
    let failures = match exp {
        Experiment::PriorRate | Experiment::PosteriorRate | Experiment::Rate => sweeps::rate_curves(exp, cfg, &mut sink)?,
        Experiment::PriorVsNngp => sweeps::prior_vs_nngp(cfg, &mut sink)?,
        Experiment::PosteriorVsNngp => sweeps::posterior_vs_nngp(cfg, &mut sink)?,
        Experiment::MapCurve | Experiment::MapVsNngp => sweeps::map_curve(exp, cfg, &mut sink)?,
        Experiment::PriorTails => sampling::prior_tails(cfg, &mut sink)?,
        Experiment::PosteriorSampling => sampling::posterior_sampling(cfg, &mut sink)?,
        Experiment::Oracle => oracle::run(cfg, &mut sink)?,
    };
    Ok(RunReport {
        files: sink.written().to_vec(),
        failures,
    })
}
