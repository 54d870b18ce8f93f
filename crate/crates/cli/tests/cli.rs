use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use infoq_cli::pipeline::allocate_table;
use infoq_cli::report::{AllocationSet, Report, Status, ALLOCATIONS_FILE, TABLE_FILE};
use infoq_cli::{RunConfig, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_INFEASIBLE};
use infoq_core::{brute_force_solve, AllocationProblem, CostKind, LayerBits, ObserverSets, SensitivityTable, SolverStrategy};

const SMALL: &str = r#"seed = 7

[data]
model = "model.json"
dataset = "dataset.json"
calibration = 160

[quant]
bits = [2, 4, 8]

[smi]
projections = 8
embed_dim = 8

[allocate]
budgets = ["uniform:3", "uniform:8"]
"#;

fn infoq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infoq")).args(args).output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(noise: Option<&str>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let fx = root.join("fx");
        let mut args = vec!["fixture", "--out", s(&fx), "--samples", "400"];
        if let Some(n) = noise {
            args.extend(["--noise", n]);
        }
        ok(infoq(&args));
        Fixture { _dir: dir, root }
    }

    fn config(&self, name: &str, extra: &str) -> PathBuf {
        let p = self.root.join("fx").join(name);
        std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
        p
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// One full small run, shared by the tests that only read its outputs.
fn base() -> &'static (Fixture, PathBuf) {
    static BASE: OnceLock<(Fixture, PathBuf)> = OnceLock::new();
    BASE.get_or_init(|| {
        let fx = Fixture::new(None);
        let cfg = fx.config("small.toml", "");
        let out = fx.out("run1");
        ok(infoq(&["run", "--config", s(&cfg), "--out", s(&out), "--workers", "1"]));
        (fx, out)
    })
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn full_run_writes_every_artifact() {
    let (_, out) = base();
    for f in [
        "report.json",
        "observers.json",
        "observer_correlations.csv",
        "sensitivity_table.json",
        "allocations.json",
        "sensitivity.csv",
        "scatter.csv",
        "accuracy.csv",
        "allocation.csv",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report = Report::load(&out.join("report.json")).unwrap();
    assert_eq!(report.schema_version, 1);
    for stage in ["observers", "analyze", "allocate", "evaluate"] {
        assert!(report.timings.contains_key(stage), "{stage} untimed");
    }
    let table = &report.analysis().unwrap().table;
    assert_eq!(csv_rows(&out.join("sensitivity.csv")).len(), table.layers.len() * table.bits.len() * 2);
    let pairs: usize = report.observer_stage().unwrap().sweep.records.iter().map(|r| r.deltas.len()).sum();
    assert_eq!(csv_rows(&out.join("scatter.csv")).len(), pairs);
    let a = report.analysis().unwrap();
    assert_eq!(a.forward_passes, 1 + 2 * table.layers.len() * table.bits.len());
}

#[test]
fn rerun_with_other_worker_count_is_byte_identical() {
    let (fx, out) = base();
    let cfg = fx.root.join("fx").join("small.toml");
    let again = fx.out("run2");
    ok(infoq(&["run", "--config", s(&cfg), "--out", s(&again), "--workers", "3"]));
    for f in ["sensitivity_table.json", "allocations.json", "observers.json", "sensitivity.csv", "scatter.csv"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn loose_and_tight_budgets() {
    let (_, out) = base();
    let report = Report::load(&out.join("report.json")).unwrap();
    let set = report.allocations().unwrap();
    let table = &report.analysis().unwrap().table;
    let tight = set.entries.iter().find(|e| e.spec == "uniform:3").unwrap();
    let loose = set.entries.iter().find(|e| e.spec == "uniform:8").unwrap();
    let l = loose.infoq.as_ref().unwrap();
    assert!(l.config.iter().all(|(_, b)| b == LayerBits::uniform(8)));
    assert_eq!(l.objective, 0.0);
    let t = tight.infoq.as_ref().unwrap();
    assert!(t.cost <= tight.budget);
    let bits: Vec<u8> = t.config.iter().map(|(_, b)| b.weight).collect();
    assert!(bits.iter().any(|&b| b < 8) && bits.iter().any(|&b| b > 3), "{bits:?}");
    let p = AllocationProblem {
        table: table.clone(),
        alpha: set.alpha,
        cost: set.cost,
        budget: tight.budget,
        reversed: false,
    };
    let brute = brute_force_solve(&p).unwrap();
    assert_eq!(brute.objective, t.objective);
    assert_eq!(brute.config, t.config);
}

#[test]
fn eight_bit_accuracy_tracks_float() {
    let (_, out) = base();
    let report = Report::load(&out.join("report.json")).unwrap();
    let ev = report.evaluation().unwrap();
    let u8 = ev.uniform.iter().find(|u| u.bits == 8).unwrap();
    assert!((u8.accuracy - ev.float_accuracy).abs() <= 0.01);
    for b in &ev.budgets {
        assert_eq!(b.random.len(), 20);
    }
}

#[test]
fn report_table_reproduces_its_allocations() {
    let (_, out) = base();
    let report = Report::load(&out.join("report.json")).unwrap();
    let again = allocate_table(&report.config, &report.analysis().unwrap().table).unwrap();
    assert_eq!(&again, report.allocations().unwrap());
    let text = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<Report>(&text).unwrap(), report);
}

#[test]
fn allocate_needs_only_the_table() {
    let (_, out) = base();
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(out.join(TABLE_FILE), dir.path().join("table.json")).unwrap();
    let cfg = dir.path().join("alloc.toml");
    let text = SMALL.replace(
        "[allocate]\n",
        "[allocate]\ntable = \"table.json\"\n",
    );
    std::fs::write(&cfg, text).unwrap();
    assert!(!dir.path().join("model.json").exists());
    let fresh = dir.path().join("out");
    ok(infoq(&["allocate", "--config", s(&cfg), "--out", s(&fresh)]));
    assert_eq!(std::fs::read(out.join(ALLOCATIONS_FILE)).unwrap(), std::fs::read(fresh.join(ALLOCATIONS_FILE)).unwrap());
}

#[test]
fn infeasible_budgets_are_reported_per_entry() {
    let (_, out) = base();
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(out.join(TABLE_FILE), dir.path().join("table.json")).unwrap();
    let write = |budgets: &str| {
        let cfg = dir.path().join("alloc.toml");
        let text = SMALL
            .replace("budgets = [\"uniform:3\", \"uniform:8\"]", &format!("budgets = {budgets}"))
            .replace("[allocate]\n", "[allocate]\ntable = \"table.json\"\n");
        std::fs::write(&cfg, text).unwrap();
        cfg
    };
    let partial = dir.path().join("partial");
    ok(infoq(&["allocate", "--config", s(&write("[10, \"uniform:4\"]")), "--out", s(&partial)]));
    let set: AllocationSet = serde_json::from_slice(&std::fs::read(partial.join(ALLOCATIONS_FILE)).unwrap()).unwrap();
    assert_eq!(set.entries[0].status, Status::Infeasible);
    assert!(set.entries[0].min_cost.unwrap() > 10.0);
    assert_eq!(set.entries[1].status, Status::Ok);

    let none = dir.path().join("none");
    let r = infoq(&["allocate", "--config", s(&write("[10, 20]")), "--out", s(&none)]);
    assert_eq!(r.status.code(), Some(EXIT_INFEASIBLE));
    assert!(String::from_utf8_lossy(&r.stderr).contains("infeasible"));
}

#[test]
fn penalty_off_scales_by_bits() {
    let (fx, out) = base();
    let cfg = fx.config(
        "raw.toml",
        &format!("penalty = false\n\n[observers]\nfile = \"{}\"\n", s(&out.join("observers.json"))),
    );
    let raw_out = fx.out("raw");
    ok(infoq(&["analyze", "--config", s(&cfg), "--out", s(&raw_out)]));
    let read = |p: &Path| -> SensitivityTable { serde_json::from_slice(&std::fs::read(p.join(TABLE_FILE)).unwrap()).unwrap() };
    let (pen, raw) = (read(out), read(&raw_out));
    assert!(pen.penalty && !raw.penalty);
    for (i, &b) in pen.bits.bits().iter().enumerate() {
        for l in 0..pen.layers.len() {
            assert_eq!(pen.weight[l][i] * b as f64, raw.weight[l][i]);
            assert_eq!(pen.activation[l][i] * b as f64, raw.activation[l][i]);
        }
    }
}

#[test]
fn plotdata_names_missing_sections() {
    let (fx, out) = base();
    let cfg = fx.config("partial.toml", "");
    let partial = fx.out("partial");
    std::fs::create_dir_all(&partial).unwrap();
    std::fs::copy(out.join("observers.json"), partial.join("observers.json")).unwrap();
    ok(infoq(&["analyze", "--config", s(&cfg), "--out", s(&partial)]));
    let r = infoq(&["plotdata", "--out", s(&partial)]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("allocations") && err.contains("evaluation"), "{err}");
}

#[test]
fn thresholds_shrink_observer_sets() {
    let (fx, out) = base();
    let cfg = fx.config("loose.toml", "\n[observers]\ntau = 0.3\n");
    let loose_out = fx.out("loose");
    ok(infoq(&["observers", "--config", s(&cfg), "--out", s(&loose_out)]));
    let read = |p: &Path| -> ObserverSets { serde_json::from_slice(&std::fs::read(p.join("observers.json")).unwrap()).unwrap() };
    let (strict, loose) = (read(out), read(&loose_out));
    assert!(strict.xl.is_subset(&loose.xl));
    assert!(strict.ly.is_subset(&loose.ly));
    // Same seed, same sets.
    let again = fx.out("strict-again");
    let cfg7 = fx.root.join("fx").join("small.toml");
    ok(infoq(&["observers", "--config", s(&cfg7), "--out", s(&again)]));
    assert_eq!(read(&again), strict);
}

#[test]
fn unreachable_threshold_fails_with_guidance() {
    let fx = Fixture::new(Some("2.0"));
    let cfg = fx.config("strict.toml", "\n[observers]\ntau = 0.99\nmin_samples = 6\n");
    let out = fx.out("strict");
    let r = infoq(&["observers", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(EXIT_DEGENERATE));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("lower the threshold"), "{err}");
    // The sweep is still written, and confirms no candidate reached 0.99.
    let rows = csv_rows(&out.join("observer_correlations.csv"));
    assert!(!rows.is_empty());
    let peak = rows
        .iter()
        .flat_map(|r| [&r[1], &r[2]])
        .filter_map(|v| v.parse::<f64>().ok())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(peak > 0.0 && peak < 0.99, "{peak}");
}

#[test]
fn config_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, format!("{SMALL}\n[smi]\nprojectons = 3\n")).unwrap();
    let r = infoq(&["observers", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(EXIT_CONFIG));
    std::fs::write(&cfg, SMALL.replace("bits = [2, 4, 8]", "bits = [1, 8]")).unwrap();
    let r = infoq(&["analyze", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(EXIT_CONFIG));
    let r = infoq(&["analyze", "--config", s(&dir.path().join("absent.toml"))]);
    assert_eq!(r.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn missing_inputs_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let r = infoq(&["observers", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("does not exist"));
}

#[test]
fn config_round_trips_through_toml() {
    let (fx, _) = base();
    let cfg = RunConfig::load(&fx.root.join("fx").join("infoq.toml")).unwrap();
    assert_eq!(cfg.allocate.cost, CostKind::ModelSize);
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    let _ = SolverStrategy::from(cfg.allocate.solver);
}
