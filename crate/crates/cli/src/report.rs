//! The run report and the standalone artifacts written beside it.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use infoq_core::observers::{CorrelationRecord, Sweep};
use infoq_core::sensitivity::{BaselineInfo, DeltaRecord};
use infoq_core::{ActRangeTable, BitConfig, CostKind, LayerId, ObserverSets, SensitivityTable, SolverKind};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::{RunConfig, Solver};

pub const SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const OBSERVERS_FILE: &str = "observers.json";
pub const CORRELATIONS_FILE: &str = "observer_correlations.csv";
pub const TABLE_FILE: &str = "sensitivity_table.json";
pub const ALLOCATIONS_FILE: &str = "allocations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: RunConfig,
    #[serde(default)]
    pub stages: Stages,
    /// Wall-clock seconds per stage.
    #[serde(default)]
    pub timings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stages {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranges: Option<ActRangeTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observers: Option<ObserverStage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisStage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub allocations: Option<AllocationSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<Evaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverStage {
    pub sweep: Sweep,
    pub correlations: Vec<CorrelationRecord>,
    pub sets: ObserverSets,
    pub forward_passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisStage {
    pub observers: ObserverSets,
    pub baseline: BaselineInfo,
    pub table: SensitivityTable,
    pub deltas: Vec<DeltaRecord>,
    pub warnings: Vec<String>,
    pub forward_passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSet {
    pub cost: CostKind,
    pub alpha: f64,
    pub solver: Solver,
    pub entries: Vec<AllocationEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationEntry {
    /// The budget as written in the config.
    pub spec: String,
    pub budget: f64,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_cost: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub infoq: Option<Allocation>,
    /// Same budget, scores negated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reversed: Option<Allocation>,
}

/// An allocation result without its solve time, so files compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub config: BitConfig,
    pub objective: f64,
    pub cost: f64,
    pub solver: SolverKind,
    pub gap_bound: f64,
}

impl From<&infoq_core::AllocationResult> for Allocation {
    fn from(r: &infoq_core::AllocationResult) -> Self {
        Allocation {
            config: r.config.clone(),
            objective: r.objective,
            cost: r.cost,
            solver: r.solver,
            gap_bound: r.gap_bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub float_accuracy: f64,
    pub uniform: Vec<UniformAccuracy>,
    pub budgets: Vec<BudgetAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformAccuracy {
    pub bits: u8,
    pub cost: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAccuracy {
    pub spec: String,
    pub budget: f64,
    pub infoq: f64,
    pub reversed: f64,
    pub random_mean: f64,
    pub random: Vec<f64>,
}

impl Report {
    pub fn new(config: RunConfig) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            stages: Stages::default(),
            timings: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Report = read_json(path)?;
        if r.schema_version != SCHEMA_VERSION {
            bail!(
                "{} has schema version {}, this build reads {SCHEMA_VERSION}",
                path.display(),
                r.schema_version
            );
        }
        Ok(r)
    }

    /// The existing report in `dir` under the same config, or a fresh one.
    pub fn open(dir: &Path, config: &RunConfig) -> Result<Self> {
        let path = dir.join(REPORT_FILE);
        if path.exists() {
            let mut r = Report::load(&path)?;
            if r.config != *config {
                log::info!("config changed since {}; starting a new report", path.display());
                return Ok(Report::new(config.clone()));
            }
            r.config = config.clone();
            return Ok(r);
        }
        Ok(Report::new(config.clone()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(REPORT_FILE), self)
    }

    pub fn analysis(&self) -> Result<&AnalysisStage> {
        self.stages.analysis.as_ref().context("report has no analysis section; run `infoq analyze` first")
    }

    pub fn observer_stage(&self) -> Result<&ObserverStage> {
        self.stages.observers.as_ref().context("report has no observers section; run `infoq observers` first")
    }

    pub fn allocations(&self) -> Result<&AllocationSet> {
        self.stages.allocations.as_ref().context("report has no allocations section; run `infoq allocate` first")
    }

    pub fn evaluation(&self) -> Result<&Evaluation> {
        self.stages.evaluation.as_ref().context("report has no evaluation section; run `infoq evaluate` first")
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Observer membership flags per candidate, for the correlation CSV.
pub fn membership(sets: &ObserverSets, layer: LayerId) -> (bool, bool) {
    (sets.xl.contains(&layer), sets.ly.contains(&layer))
}
