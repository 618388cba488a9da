//! JSON experiment configuration. One file drives every subcommand; each
//! command reads the blocks it needs and ignores the rest. Command-line
//! flags override file values (see [`Overrides`]).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use supermarket::meanfield::{default_truncation, IntegratorConfig};
use supermarket::simulator::SimConfig;
use supermarket::stein::SteinConfig;

use crate::error::{HarnessError, Result};
use crate::initial::InitialCondition;

/// Truncation level: a fixed `n` or `"auto"` (`ceil(3 ln M / ln(1/λ))`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Truncation {
    #[default]
    Auto,
    Fixed(usize),
}

impl Truncation {
    pub fn resolve(&self, lambda: f64, servers: Option<usize>) -> Result<usize> {
        match (*self, servers) {
            (Truncation::Fixed(n), _) => Ok(n),
            (Truncation::Auto, Some(m)) => Ok(default_truncation(m, lambda)),
            (Truncation::Auto, None) => Err(HarnessError::config(
                "n = \"auto\" needs a server count M; pass --n or --M",
            )),
        }
    }
}

impl FromStr for Truncation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Truncation::Auto);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("n must be at least 1".into()),
            Ok(n) => Ok(Truncation::Fixed(n)),
            Err(_) => Err(format!("expected a positive integer or \"auto\", got {s:?}")),
        }
    }
}

impl fmt::Display for Truncation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Truncation::Auto => f.write_str("auto"),
            Truncation::Fixed(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for Truncation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Truncation::Auto => s.serialize_str("auto"),
            Truncation::Fixed(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Truncation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(0) => Err(serde::de::Error::custom("n must be at least 1")),
            Raw::Num(n) => usize::try_from(n)
                .map(Truncation::Fixed)
                .map_err(serde::de::Error::custom),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Accepts either a single value or a list.
fn one_or_many<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw<T> {
        One(T),
        Many(Vec<T>),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::One(v) => vec![v],
        Raw::Many(v) => v,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format {other:?} (csv or json)")),
        }
    }
}

/// Simulation window; `null` fields use the simulator's defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub warmup_time: Option<f64>,
    pub horizon_time: Option<f64>,
    pub batches: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            warmup_time: d.warmup_time,
            horizon_time: d.horizon_time,
            batches: d.batches,
        }
    }
}

impl SimSettings {
    pub fn sim_config(&self, seed: u64, stream: u64, n_report: usize) -> SimConfig {
        SimConfig {
            seed,
            stream,
            warmup_time: self.warmup_time,
            horizon_time: self.horizon_time,
            batches: self.batches,
            n_report,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteinSettings {
    pub samples: usize,
    pub max_samples: usize,
}

impl Default for SteinSettings {
    fn default() -> Self {
        let d = SteinConfig::default();
        Self {
            samples: d.samples,
            max_samples: d.max_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(deserialize_with = "one_or_many")]
    pub lambda: Vec<f64>,
    #[serde(rename = "M", deserialize_with = "one_or_many")]
    pub servers: Vec<usize>,
    pub n: Truncation,
    pub seed: u64,
    pub replications: usize,
    pub sim: SimSettings,
    pub integrator: IntegratorConfig,
    pub stein: SteinSettings,
    /// Perturbation sizes for `perturb-check`.
    #[serde(deserialize_with = "one_or_many")]
    pub epsilon: Vec<f64>,
    /// Initial condition string, see [`InitialCondition`].
    pub x0: String,
    /// Number of random initial conditions per `(λ, n)` in sweeps.
    pub probes: usize,
    /// Uniform output grid for trajectory CSVs; `null` writes solver steps.
    pub grid: Option<usize>,
    pub output_dir: PathBuf,
    pub format: Format,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            lambda: vec![0.7],
            servers: vec![16, 64, 256, 1024],
            n: Truncation::Auto,
            seed: 1,
            replications: 8,
            sim: SimSettings::default(),
            integrator: IntegratorConfig::default(),
            stein: SteinSettings::default(),
            epsilon: vec![1e-3, 1e-4],
            x0: "random".into(),
            probes: 10,
            grid: None,
            output_dir: PathBuf::from("."),
            format: Format::Csv,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks the invariants every command relies on.
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_empty() {
            return Err(HarnessError::config("lambda list is empty"));
        }
        if let Some(l) = self.lambda.iter().find(|l| !(l.is_finite() && **l > 0.0 && **l < 1.0)) {
            return Err(HarnessError::config(format!("lambda must lie in (0, 1), got {l}")));
        }
        if self.servers.is_empty() {
            return Err(HarnessError::config("M list is empty"));
        }
        if self.servers.contains(&0) {
            return Err(HarnessError::config("M must be at least 1"));
        }
        let mut sorted = self.servers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.servers.len() {
            return Err(HarnessError::config("M values must be distinct"));
        }
        if self.replications == 0 {
            return Err(HarnessError::config("replications must be at least 1"));
        }
        if self.epsilon.is_empty() {
            return Err(HarnessError::config("epsilon list is empty"));
        }
        if let Some(e) = self.epsilon.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return Err(HarnessError::config(format!("epsilon must be positive, got {e}")));
        }
        if self.probes == 0 {
            return Err(HarnessError::config("probes must be at least 1"));
        }
        if self.grid == Some(0) || self.grid == Some(1) {
            return Err(HarnessError::config("grid needs at least 2 points"));
        }
        if self.stein.samples == 0 || self.stein.max_samples < self.stein.samples {
            return Err(HarnessError::config(
                "stein.samples must be positive and at most stein.max_samples",
            ));
        }
        self.integrator.validate()?;
        // the window check needs a model; any valid one will do
        let probe = supermarket::ModelParams::new(self.lambda[0], self.servers[0])?;
        self.sim.sim_config(self.seed, 0, 1).resolve(&probe)?;
        self.x0.parse::<InitialCondition>().map_err(HarnessError::config)?;
        Ok(())
    }

    /// Extra requirements of the rate study: increasing `M` values, at least
    /// two of them, all `>= 3` so that `ln ln M` is defined and nonzero.
    pub fn validate_rate_study(&self) -> Result<()> {
        self.validate()?;
        if self.servers.len() < 2 {
            return Err(HarnessError::config("a rate study needs at least two M values"));
        }
        if self.servers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::config("M values must be increasing"));
        }
        if self.servers[0] < 3 {
            return Err(HarnessError::config("rate study M values must be at least 3"));
        }
        Ok(())
    }

    pub fn stein_config(&self) -> SteinConfig {
        SteinConfig {
            integrator: self.integrator,
            samples: self.stein.samples,
            max_samples: self.stein.max_samples,
        }
    }

    pub fn initial_condition(&self) -> Result<InitialCondition> {
        self.x0.parse().map_err(HarnessError::config)
    }
}

/// Values given on the command line, applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub lambda: Option<Vec<f64>>,
    pub servers: Option<Vec<usize>>,
    pub n: Option<Truncation>,
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub x0: Option<String>,
    pub grid: Option<usize>,
    pub format: Option<Format>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = &self.lambda {
            cfg.lambda = v.clone();
        }
        if let Some(v) = &self.servers {
            cfg.servers = v.clone();
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.replications {
            cfg.replications = v;
        }
        if let Some(v) = &self.x0 {
            cfg.x0 = v.clone();
        }
        if let Some(v) = self.grid {
            cfg.grid = Some(v);
        }
        if let Some(v) = self.format {
            cfg.format = v;
        }
    }
}
