//! Data-driven observer selection: perturb one layer at a time, then keep the
//! block outputs whose information change tracks the accuracy drop.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::info::pearson;
use crate::model::{LayerId, ModelGraph};
use crate::probe::Probe;
use crate::quant::{accuracy, apply_config, ActRangeTable, BitConfig, LayerBits};

pub const DEFAULT_TAU: f64 = 0.7;
pub const DEFAULT_MIN_SAMPLES: usize = 3;

/// Information change at one candidate layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoDelta {
    pub xl: f64,
    pub ly: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub layer: LayerId,
    pub delta_acc: f64,
    /// Only candidates downstream of `layer`.
    pub deltas: BTreeMap<LayerId, InfoDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub b_low: u8,
    pub candidates: Vec<LayerId>,
    pub baseline_accuracy: f64,
    pub baseline: BTreeMap<LayerId, InfoDelta>,
    pub records: Vec<PerturbationRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub layer: LayerId,
    /// `None` when fewer than the minimum pairs exist or a side is constant.
    pub rho_xl: Option<f64>,
    pub rho_ly: Option<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverSets {
    pub xl: BTreeSet<LayerId>,
    pub ly: BTreeSet<LayerId>,
    pub tau: f64,
}

/// Clamped SMI; a degenerate (constant) activation carries no information.
pub(crate) fn info_value(v: Option<f64>) -> f64 {
    v.unwrap_or(0.0).max(0.0)
}

/// Quantizes each layer alone to `b_low` (weights and activations) and
/// records the accuracy drop and the SMI change at every downstream candidate.
pub fn perturbation_sweep(
    model: &ModelGraph,
    ranges: &ActRangeTable,
    probe: &Probe<'_>,
    eval: &Dataset,
    b_low: u8,
) -> Result<Sweep> {
    let candidates = model.block_outputs();
    let base_cfg = BitConfig::uniform(model.quantizable(), 8);
    let base_view = apply_config(model, &base_cfg, ranges)?;
    let baseline_accuracy = accuracy(&base_view, eval)?;
    let base = probe.measure(&base_view, &candidates, &candidates)?;
    let baseline: BTreeMap<LayerId, InfoDelta> = candidates
        .iter()
        .map(|&j| {
            (
                j,
                InfoDelta {
                    xl: info_value(base.xl[&j]),
                    ly: info_value(base.ly[&j]),
                },
            )
        })
        .collect();

    let records = model
        .quantizable()
        .par_iter()
        .map(|&i| {
            let cfg = base_cfg.clone().with(i, LayerBits::uniform(b_low));
            let view = apply_config(model, &cfg, ranges)?;
            let acc = accuracy(&view, eval)?;
            let downstream: Vec<LayerId> = candidates.iter().copied().filter(|&j| j > i).collect();
            let m = probe.measure(&view, &downstream, &downstream)?;
            let deltas = downstream
                .iter()
                .map(|&j| {
                    let b = baseline[&j];
                    (
                        j,
                        InfoDelta {
                            xl: (info_value(m.xl[&j]) - b.xl).abs(),
                            ly: (info_value(m.ly[&j]) - b.ly).abs(),
                        },
                    )
                })
                .collect();
            Ok(PerturbationRecord {
                layer: i,
                delta_acc: baseline_accuracy - acc,
                deltas,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Sweep {
        b_low,
        candidates,
        baseline_accuracy,
        baseline,
        records,
    })
}

fn checked_rho(x: &[f64], y: &[f64], min_samples: usize) -> Option<f64> {
    if x.len() < min_samples.max(3) {
        return None;
    }
    pearson(x, y).ok()
}

/// Correlation between ΔI and ΔAcc at every candidate appearing in `records`.
pub fn correlations(records: &[PerturbationRecord], min_samples: usize) -> Vec<CorrelationRecord> {
    let layers: BTreeSet<LayerId> = records.iter().flat_map(|r| r.deltas.keys().copied()).collect();
    layers
        .into_iter()
        .map(|j| {
            let (mut xl, mut ly, mut acc) = (Vec::new(), Vec::new(), Vec::new());
            for r in records {
                if let Some(d) = r.deltas.get(&j) {
                    xl.push(d.xl);
                    ly.push(d.ly);
                    acc.push(r.delta_acc);
                }
            }
            CorrelationRecord {
                layer: j,
                rho_xl: checked_rho(&xl, &acc, min_samples),
                rho_ly: checked_rho(&ly, &acc, min_samples),
                samples: acc.len(),
            }
        })
        .collect()
}

/// `O_XL` keeps every candidate with `|ρ_XL| > τ`. `O_LY` scans backward from
/// the last candidate and stops at the first one that fails.
pub fn select_observers(records: &[PerturbationRecord], tau: f64, min_samples: usize) -> Result<ObserverSets> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no perturbation records".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {tau} outside (0, 1)")));
    }
    let corr = correlations(records, min_samples);
    let passes = |rho: Option<f64>| rho.is_some_and(|r| r.abs() > tau);
    let xl: BTreeSet<LayerId> = corr
        .iter()
        .filter(|c| passes(c.rho_xl))
        .map(|c| c.layer)
        .collect();
    let ly: BTreeSet<LayerId> = corr
        .iter()
        .rev()
        .take_while(|c| passes(c.rho_ly))
        .map(|c| c.layer)
        .collect();
    if xl.is_empty() && ly.is_empty() {
        return Err(Error::NoObservers { tau });
    }
    Ok(ObserverSets {
        xl,
        ly,
        tau,
    })
}
