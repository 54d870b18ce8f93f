//! Tidy CSV exports, one row per observation.

use std::path::Path;

use anyhow::{bail, Context, Result};
use infoq_core::observers::CorrelationRecord;
use infoq_core::sensitivity::PerturbKind;
use infoq_core::{ObserverSets, SensitivityTable};

use crate::report::{membership, Report};

pub const SENSITIVITY_CSV: &str = "sensitivity.csv";
pub const SCATTER_CSV: &str = "scatter.csv";
pub const ACCURACY_CSV: &str = "accuracy.csv";
pub const ALLOCATION_CSV: &str = "allocation.csv";

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-candidate coefficients; membership columns stay empty when selection failed.
pub fn write_correlations(path: &Path, records: &[CorrelationRecord], sets: Option<&ObserverSets>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["layer", "rho_xl", "rho_ly", "samples", "in_xl", "in_ly"])?;
    for r in records {
        let (xl, ly) = match sets {
            Some(s) => {
                let (a, b) = membership(s, r.layer);
                (a.to_string(), b.to_string())
            }
            None => (String::new(), String::new()),
        };
        w.write_record([r.layer.to_string(), opt(r.rho_xl), opt(r.rho_ly), r.samples.to_string(), xl, ly])?;
    }
    w.flush()?;
    Ok(())
}

/// One matrix per kind: a row per layer, a column per bit width.
pub fn write_table_matrix(table: &SensitivityTable, kind: PerturbKind, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["layer".to_string()];
    header.extend(table.bits.bits().iter().map(|b| format!("b{b}")));
    w.write_record(&header)?;
    let rows = match kind {
        PerturbKind::Weight => &table.weight,
        PerturbKind::Activation => &table.activation,
    };
    for (layer, row) in table.layers.iter().zip(rows) {
        let mut rec = vec![layer.to_string()];
        rec.extend(row.iter().map(|s| s.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sensitivity(report: &Report, path: &Path) -> Result<usize> {
    let t = &report.analysis()?.table;
    let mut w = writer(path)?;
    w.write_record(["layer", "bits", "kind", "score"])?;
    let mut rows = 0;
    for (i, &layer) in t.layers.iter().enumerate() {
        for &b in t.bits.bits() {
            for kind in [PerturbKind::Weight, PerturbKind::Activation] {
                let s = t.get(kind, i, b).expect("table shape validated");
                w.write_record([layer.to_string(), b.to_string(), kind.as_str().to_string(), s.to_string()])?;
                rows += 1;
            }
        }
    }
    w.flush()?;
    Ok(rows)
}

pub fn write_scatter(report: &Report, path: &Path) -> Result<usize> {
    let sweep = &report.observer_stage()?.sweep;
    let mut w = writer(path)?;
    w.write_record(["perturbed_layer", "observer", "delta_acc", "delta_xl", "delta_ly"])?;
    let mut rows = 0;
    for r in &sweep.records {
        for (j, d) in &r.deltas {
            w.write_record([
                r.layer.to_string(),
                j.to_string(),
                r.delta_acc.to_string(),
                d.xl.to_string(),
                d.ly.to_string(),
            ])?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

pub fn write_accuracy(report: &Report, path: &Path) -> Result<usize> {
    let ev = report.evaluation()?;
    let alloc = report.allocations()?;
    let mut w = writer(path)?;
    w.write_record(["method", "budget_spec", "budget", "cost", "replicate", "accuracy"])?;
    let mut rows = 1;
    w.write_record(["float", "", "", "", "", &ev.float_accuracy.to_string()])?;
    for u in &ev.uniform {
        let name = format!("uniform:{}", u.bits);
        w.write_record(["uniform", &name, "", &u.cost.to_string(), "", &u.accuracy.to_string()])?;
        rows += 1;
    }
    for b in &ev.budgets {
        let entry = alloc.entries.iter().find(|e| e.spec == b.spec);
        let cost = |rev: bool| {
            entry
                .and_then(|e| if rev { e.reversed.as_ref() } else { e.infoq.as_ref() })
                .map(|a| a.cost.to_string())
                .unwrap_or_default()
        };
        let budget = b.budget.to_string();
        w.write_record(["infoq", &b.spec, &budget, &cost(false), "", &b.infoq.to_string()])?;
        w.write_record(["reversed", &b.spec, &budget, &cost(true), "", &b.reversed.to_string()])?;
        w.write_record(["random-mean", &b.spec, &budget, "", "", &b.random_mean.to_string()])?;
        rows += 3;
        for (i, a) in b.random.iter().enumerate() {
            w.write_record(["random", &b.spec, &budget, "", &i.to_string(), &a.to_string()])?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

pub fn write_allocation(report: &Report, path: &Path) -> Result<usize> {
    let alloc = report.allocations()?;
    let mut w = writer(path)?;
    w.write_record(["budget_spec", "method", "layer", "weight_bits", "activation_bits"])?;
    let mut rows = 0;
    for e in &alloc.entries {
        for (method, a) in [("infoq", &e.infoq), ("reversed", &e.reversed)] {
            let Some(a) = a else { continue };
            for (layer, b) in a.config.iter() {
                w.write_record([
                    e.spec.clone(),
                    method.to_string(),
                    layer.to_string(),
                    b.weight.to_string(),
                    b.activation.to_string(),
                ])?;
                rows += 1;
            }
        }
    }
    w.flush()?;
    Ok(rows)
}

/// All four bundles. Missing report sections are named together before anything is written.
pub fn write_all(report: &Report, out: &Path) -> Result<()> {
    let s = &report.stages;
    let missing: Vec<&str> = [
        ("observers", s.observers.is_none()),
        ("analysis", s.analysis.is_none()),
        ("allocations", s.allocations.is_none()),
        ("evaluation", s.evaluation.is_none()),
    ]
    .into_iter()
    .filter_map(|(name, absent)| absent.then_some(name))
    .collect();
    if !missing.is_empty() {
        bail!("report is missing section(s): {}", missing.join(", "));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_sensitivity(report, &out.join(SENSITIVITY_CSV))?;
    write_scatter(report, &out.join(SCATTER_CSV))?;
    write_accuracy(report, &out.join(ACCURACY_CSV))?;
    write_allocation(report, &out.join(ALLOCATION_CSV))?;
    Ok(())
}
