//! Run configuration: a TOML file with one table per stage.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use infoq_core::{BitSet, CostKind, SensitivityTable, SmiConfig, SolverStrategy};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub smi: SmiConfig,
    #[serde(default)]
    pub observers: ObserverConfig,
    #[serde(default)]
    pub allocate: AllocateConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub model: PathBuf,
    pub dataset: PathBuf,
    /// Precomputed embeddings replacing the PCA front-end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(default = "default_calibration")]
    pub calibration: usize,
}

fn default_calibration() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits: Vec<u8>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: (2..=8).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverConfig {
    pub b_low: u8,
    pub tau: f64,
    pub min_samples: usize,
    /// Observer sets from an earlier run; skips the sweep in `analyze`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        ObserverConfig {
            b_low: 2,
            tau: 0.7,
            min_samples: 3,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocateConfig {
    pub alpha: f64,
    pub cost: CostKind,
    pub budgets: Vec<Budget>,
    pub penalty: bool,
    pub solver: Solver,
    /// Sensitivity table to allocate from; defaults to the one in the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
}

impl Default for AllocateConfig {
    fn default() -> Self {
        AllocateConfig {
            alpha: 1.0,
            cost: CostKind::ModelSize,
            budgets: vec![Budget::Uniform(4)],
            penalty: true,
            solver: Solver::Auto,
            table: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    Auto,
    Dp,
    Exhaustive,
}

impl From<Solver> for SolverStrategy {
    fn from(s: Solver) -> Self {
        match s {
            Solver::Auto => SolverStrategy::Auto,
            Solver::Dp => SolverStrategy::Dp,
            Solver::Exhaustive => SolverStrategy::Exhaustive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub random_configs: usize,
    pub uniform_baselines: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            random_configs: 20,
            uniform_baselines: true,
        }
    }
}

/// A budget in bits or bit-operations, or the cost of a uniform
/// configuration written `"uniform:N"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Absolute(f64),
    Uniform(u8),
}

impl Budget {
    /// Resolves against the cost columns of a sensitivity table. Under the
    /// size model activations sit at the widest bit width, so only `b_w` is uniform.
    pub fn resolve(&self, table: &SensitivityTable, kind: CostKind) -> f64 {
        match *self {
            Budget::Absolute(v) => v,
            Budget::Uniform(b) => {
                let b = b as u128;
                let total: u128 = match kind {
                    CostKind::ModelSize => table.params.iter().map(|&p| p as u128 * b).sum(),
                    CostKind::Bitops => table.macs.iter().map(|&m| m as u128 * b * b).sum(),
                };
                total as f64
            }
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Absolute(v) => write!(f, "{v}"),
            Budget::Uniform(b) => write!(f, "uniform:{b}"),
        }
    }
}

impl FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(rest) = s.strip_prefix("uniform:") {
            let b: u8 = rest.trim().parse().map_err(|_| format!("bad bit width in budget {s:?}"))?;
            if !(2..=8).contains(&b) {
                return Err(format!("budget {s:?}: bit width must lie in [2, 8]"));
            }
            return Ok(Budget::Uniform(b));
        }
        let v: f64 = s.trim().parse().map_err(|_| format!("budget {s:?} is neither a number nor uniform:N"))?;
        if !(v.is_finite() && v > 0.0) {
            return Err(format!("budget {s:?} must be positive"));
        }
        Ok(Budget::Absolute(v))
    }
}

impl Serialize for Budget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Budget::Absolute(v) => s.serialize_f64(*v),
            Budget::Uniform(_) => s.serialize_str(&self.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Float(f64),
            Text(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Int(v) => v.to_string(),
            Raw::Float(v) => v.to_string(),
            Raw::Text(t) => t,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Any failure to read, parse or validate a config file.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    /// Parses and validates; relative paths are taken from the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_inner(path).map_err(|e| ConfigError(format!("{e:#}")).into())
    }

    /// Re-validates after command-line overrides.
    pub fn checked(self) -> Result<Self> {
        self.validate().map_err(|e| ConfigError(format!("{e:#}")))?;
        Ok(self)
    }

    fn load_inner(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.model);
        fix(&mut self.data.dataset);
        for p in [&mut self.data.embeddings, &mut self.observers.file, &mut self.allocate.table]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn bitset(&self) -> Result<BitSet> {
        Ok(BitSet::new(self.quant.bits.clone())?)
    }

    pub fn validate(&self) -> Result<()> {
        self.bitset()?;
        if self.data.calibration < 8 {
            bail!("data.calibration must be at least 8, got {}", self.data.calibration);
        }
        let s = &self.smi;
        if s.k == 0 || s.projections == 0 || s.embed_dim == 0 || s.max_samples <= s.k {
            bail!("smi parameters out of range: k, projections and embed_dim must be positive and max_samples > k");
        }
        let o = &self.observers;
        if !(2..8).contains(&o.b_low) {
            bail!("observers.b_low must lie in [2, 7], got {}", o.b_low);
        }
        if !(o.tau > 0.0 && o.tau < 1.0) {
            bail!("observers.tau must lie in (0, 1), got {}", o.tau);
        }
        if o.min_samples < 3 {
            bail!("observers.min_samples must be at least 3, got {}", o.min_samples);
        }
        let a = &self.allocate;
        if !(a.alpha.is_finite() && a.alpha >= 0.0) {
            bail!("allocate.alpha must be nonnegative, got {}", a.alpha);
        }
        if a.budgets.is_empty() {
            bail!("allocate.budgets is empty");
        }
        Ok(())
    }

    /// Checks that the input files exist before a stage starts.
    pub fn check_inputs(&self) -> Result<()> {
        let mut paths = vec![&self.data.model, &self.data.dataset];
        paths.extend(self.data.embeddings.as_ref());
        for p in paths {
            if !p.exists() {
                bail!("input file {} does not exist", p.display());
            }
        }
        Ok(())
    }
}
