//! The pipeline stages behind each subcommand. Every stage reads its inputs
//! from the config or the output directory and records itself in the report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use infoq_core::model::load_samples;
use infoq_core::observers::correlations;
use infoq_core::sensitivity::PerturbKind;
use infoq_core::{
    allocator, calibrate_activation_ranges, compute_all, evaluate_accuracy, load_dataset, load_model,
    perturbation_sweep, select_observers, solve_with, AllocationProblem, BitConfig, Calibration, CostModel,
    Dataset, ModelGraph, ObserverSets, Probe, SensitivityTable,
};

use crate::config::RunConfig;
use crate::plot;
use crate::report::{
    read_json, write_json, Allocation, AllocationEntry, AllocationSet, AnalysisStage, BudgetAccuracy, Evaluation,
    ObserverStage, Report, Status, UniformAccuracy, ALLOCATIONS_FILE, OBSERVERS_FILE, TABLE_FILE,
};

pub struct Workspace {
    pub config: RunConfig,
    pub out: PathBuf,
}

/// Model, data and calibration loaded once per stage.
struct Inputs {
    model: ModelGraph,
    data: Dataset,
    calib: Calibration,
}

impl Workspace {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        let out = out.into();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Workspace { config, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn report(&self) -> Result<Report> {
        Report::open(&self.out, &self.config)
    }

    fn inputs(&self) -> Result<Inputs> {
        self.config.check_inputs()?;
        let d = &self.config.data;
        let model = load_model(&d.model).with_context(|| format!("loading model {}", d.model.display()))?;
        let data = load_dataset(&d.dataset).with_context(|| format!("loading dataset {}", d.dataset.display()))?;
        let calib = match &d.embeddings {
            Some(p) => {
                let emb = load_samples(p).with_context(|| format!("loading embeddings {}", p.display()))?;
                Calibration::with_embeddings(&data, &emb, d.calibration, self.config.seed)?
            }
            None => Calibration::with_pca(&data, d.calibration, self.config.smi.embed_dim, self.config.seed)?,
        };
        Ok(Inputs { model, data, calib })
    }

    /// Perturbation sweep and observer selection.
    pub fn observers(&self) -> Result<ObserverSets> {
        let start = Instant::now();
        let mut report = self.report()?;
        let inp = self.inputs()?;
        let ranges = calibrate_activation_ranges(&inp.model, inp.calib.inputs()).context("calibrating ranges")?;
        let probe = Probe::new(&inp.calib, self.config.smi, self.config.seed)?;
        let o = &self.config.observers;
        let sweep = perturbation_sweep(&inp.model, &ranges, &probe, &inp.data, o.b_low).context("observer sweep")?;
        let corr = correlations(&sweep.records, o.min_samples);
        let forward_passes = probe.forward_count();
        report.stages.ranges = Some(ranges);
        // Persist the sweep even when selection fails, so the correlations can be inspected.
        let selected = select_observers(&sweep.records, o.tau, o.min_samples);
        plot::write_correlations(&self.path(crate::report::CORRELATIONS_FILE), &corr, selected.as_ref().ok())?;
        let sets = selected.context("selecting observers")?;
        log::info!("observers: xl {:?}, ly {:?}", sets.xl, sets.ly);
        write_json(&self.path(OBSERVERS_FILE), &sets)?;
        report.stages.observers = Some(ObserverStage {
            sweep,
            correlations: corr,
            sets: sets.clone(),
            forward_passes,
        });
        report.timings.insert("observers".into(), start.elapsed().as_secs_f64());
        report.save(&self.out)?;
        Ok(sets)
    }

    fn load_observers(&self) -> Result<ObserverSets> {
        let path = match &self.config.observers.file {
            Some(p) => p.clone(),
            None => self.path(OBSERVERS_FILE),
        };
        if !path.exists() {
            bail!("no observer sets at {}; run `infoq observers` first or set observers.file", path.display());
        }
        read_json(&path)
    }

    /// Sensitivity scores for every quantizable layer and bit width.
    pub fn analyze(&self) -> Result<SensitivityTable> {
        let start = Instant::now();
        let sets = self.load_observers()?;
        let mut report = self.report()?;
        let inp = self.inputs()?;
        let ranges = calibrate_activation_ranges(&inp.model, inp.calib.inputs()).context("calibrating ranges")?;
        let probe = Probe::new(&inp.calib, self.config.smi, self.config.seed)?;
        let bitset = self.config.bitset()?;
        let a = compute_all(&inp.model, &ranges, &probe, &sets, &bitset, self.config.allocate.penalty)
            .context("sensitivity analysis")?;
        for w in &a.warnings {
            log::warn!("{w}");
        }
        write_json(&self.path(TABLE_FILE), &a.table)?;
        plot::write_table_matrix(&a.table, PerturbKind::Weight, &self.path("sensitivity_weight.csv"))?;
        plot::write_table_matrix(&a.table, PerturbKind::Activation, &self.path("sensitivity_activation.csv"))?;
        report.stages.ranges = Some(ranges);
        report.stages.analysis = Some(AnalysisStage {
            observers: sets,
            baseline: a.baseline,
            table: a.table.clone(),
            deltas: a.deltas,
            warnings: a.warnings,
            forward_passes: a.forward_passes,
        });
        report.timings.insert("analyze".into(), start.elapsed().as_secs_f64());
        report.save(&self.out)?;
        Ok(a.table)
    }

    fn load_table(&self) -> Result<SensitivityTable> {
        let path = match &self.config.allocate.table {
            Some(p) => p.clone(),
            None => self.path(TABLE_FILE),
        };
        if !path.exists() {
            bail!("no sensitivity table at {}; run `infoq analyze` first or set allocate.table", path.display());
        }
        let t: SensitivityTable = read_json(&path)?;
        t.validate()?;
        Ok(t)
    }

    /// One allocation per budget. Infeasible budgets are recorded and the
    /// rest still solved; the stage fails only when none is feasible.
    pub fn allocate(&self) -> Result<AllocationSet> {
        let start = Instant::now();
        let table = self.load_table()?;
        let set = allocate_table(&self.config, &table)?;
        write_json(&self.path(ALLOCATIONS_FILE), &set)?;
        let mut report = self.report()?;
        report.stages.allocations = Some(set.clone());
        report.timings.insert("allocate".into(), start.elapsed().as_secs_f64());
        report.save(&self.out)?;
        if set.entries.iter().all(|e| e.status == Status::Infeasible) {
            let e = &set.entries[0];
            let err = infoq_core::Error::Infeasible {
                budget: e.budget,
                min_cost: e.min_cost.unwrap_or(f64::NAN),
            };
            return Err(err).context("every budget is infeasible");
        }
        Ok(set)
    }

    /// PTQ accuracy of each allocation against uniform, reversed and random baselines.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let start = Instant::now();
        let path = self.path(ALLOCATIONS_FILE);
        if !path.exists() {
            bail!("no allocations at {}; run `infoq allocate` first", path.display());
        }
        let set: AllocationSet = read_json(&path)?;
        let table = self.load_table()?;
        let mut report = self.report()?;
        let inp = self.inputs()?;
        let ranges = calibrate_activation_ranges(&inp.model, inp.calib.inputs()).context("calibrating ranges")?;
        let acc = |cfg: &BitConfig| evaluate_accuracy(&inp.model, cfg, &ranges, &inp.data);
        let float_accuracy = infoq_core::quant::accuracy(&inp.model, &inp.data)?;
        let cost_model = CostModel::from_table(&table, set.cost);
        let mut uniform = Vec::new();
        if self.config.evaluate.uniform_baselines {
            for &b in table.bits.bits() {
                let cfg = uniform_config(&table, set.cost, b);
                uniform.push(UniformAccuracy {
                    bits: b,
                    cost: infoq_core::cost_of_config(&cfg, &cost_model)?,
                    accuracy: acc(&cfg)?,
                });
            }
        }
        let mut budgets = Vec::new();
        for e in &set.entries {
            let (Some(infoq), Some(reversed)) = (&e.infoq, &e.reversed) else {
                continue;
            };
            let problem = problem(&self.config, &table, e.budget, false);
            let random: Vec<f64> = allocator::random_feasible_configs(
                &problem,
                self.config.evaluate.random_configs,
                self.config.seed,
            )?
            .iter()
            .map(&acc)
            .collect::<infoq_core::Result<_>>()?;
            let random_mean = if random.is_empty() {
                f64::NAN
            } else {
                random.iter().sum::<f64>() / random.len() as f64
            };
            budgets.push(BudgetAccuracy {
                spec: e.spec.clone(),
                budget: e.budget,
                infoq: acc(&infoq.config)?,
                reversed: acc(&reversed.config)?,
                random_mean,
                random,
            });
        }
        let ev = Evaluation {
            float_accuracy,
            uniform,
            budgets,
        };
        report.stages.evaluation = Some(ev.clone());
        report.timings.insert("evaluate".into(), start.elapsed().as_secs_f64());
        report.save(&self.out)?;
        Ok(ev)
    }

    /// Every stage in order, then the plot data.
    pub fn run(&self) -> Result<Report> {
        self.observers()?;
        self.analyze()?;
        self.allocate()?;
        self.evaluate()?;
        let report = Report::load(&self.path(crate::report::REPORT_FILE))?;
        plot::write_all(&report, &self.out)?;
        Ok(report)
    }
}

fn uniform_config(table: &SensitivityTable, cost: infoq_core::CostKind, b: u8) -> BitConfig {
    let act = match cost {
        infoq_core::CostKind::ModelSize => table.bits.max(),
        infoq_core::CostKind::Bitops => b,
    };
    BitConfig::new(
        table
            .layers
            .iter()
            .map(|&l| (l, infoq_core::LayerBits::new(b, act)))
            .collect(),
    )
}

fn problem(cfg: &RunConfig, table: &SensitivityTable, budget: f64, reversed: bool) -> AllocationProblem {
    AllocationProblem {
        table: table.clone(),
        alpha: cfg.allocate.alpha,
        cost: cfg.allocate.cost,
        budget,
        reversed,
    }
}

/// Solves every configured budget against `table`; needs no model.
pub fn allocate_table(cfg: &RunConfig, table: &SensitivityTable) -> Result<AllocationSet> {
    let a = &cfg.allocate;
    let mut entries = Vec::new();
    for spec in &a.budgets {
        let budget = spec.resolve(table, a.cost);
        let solve = |reversed| solve_with(&problem(cfg, table, budget, reversed), a.solver.into());
        let entry = match solve(false) {
            Ok(r) => {
                let rev = solve(true).context("reversed allocation")?;
                log::info!("budget {spec}: objective {:.6}, cost {}", r.objective, r.cost);
                AllocationEntry {
                    spec: spec.to_string(),
                    budget,
                    status: Status::Ok,
                    min_cost: None,
                    infoq: Some(Allocation::from(&r)),
                    reversed: Some(Allocation::from(&rev)),
                }
            }
            Err(infoq_core::Error::Infeasible { min_cost, .. }) => {
                log::warn!("budget {spec} ({budget}) is infeasible; minimum cost is {min_cost}");
                AllocationEntry {
                    spec: spec.to_string(),
                    budget,
                    status: Status::Infeasible,
                    min_cost: Some(min_cost),
                    infoq: None,
                    reversed: None,
                }
            }
            Err(e) => return Err(e).with_context(|| format!("allocating budget {spec}")),
        };
        entries.push(entry);
    }
    Ok(AllocationSet {
        cost: a.cost,
        alpha: a.alpha,
        solver: a.solver,
        entries,
    })
}

/// Writes the reference fixture and a config that points at it.
pub fn write_fixture(dir: &Path, fixture: &infoq_core::fixture::FixtureConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (model, data) = infoq_core::fixture::reference_fixture(fixture)?;
    infoq_core::model::save_model(&model, dir.join("model.json"))?;
    infoq_core::model::save_dataset(&data, dir.join("dataset.json"))?;
    let cfg = format!(
        "seed = {}\n\n[data]\nmodel = \"model.json\"\ndataset = \"dataset.json\"\ncalibration = 512\n\n\
         [quant]\nbits = [2, 3, 4, 5, 6, 7, 8]\n\n\
         [smi]\nk = 3\nprojections = 64\nmax_samples = 2048\nembed_dim = 32\n\n\
         [observers]\nb_low = 2\ntau = 0.7\nmin_samples = 3\n\n\
         [allocate]\nalpha = 1.0\ncost = \"model-size\"\nbudgets = [\"uniform:3\", \"uniform:4\", \"uniform:8\"]\n\
         penalty = true\nsolver = \"auto\"\n\n\
         [evaluate]\nrandom_configs = 20\n",
        fixture.seed
    );
    let path = dir.join("infoq.toml");
    std::fs::write(&path, cfg).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
