//! Per-layer sensitivity scores from the SMI change at downstream observers.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_macs, count_params, LayerId, ModelGraph};
use crate::observers::{info_value, ObserverSets};
use crate::probe::Probe;
use crate::quant::{apply_config, ActRangeTable, BitConfig, BitSet, LayerBits, MAX_BITS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineInfo {
    pub xl: BTreeMap<LayerId, f64>,
    pub ly: BTreeMap<LayerId, f64>,
    pub seed: u64,
    pub calibration_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    Weight,
    Activation,
}

impl PerturbKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PerturbKind::Weight => "weight",
            PerturbKind::Activation => "activation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub layer: LayerId,
    pub bits: u8,
    pub kind: PerturbKind,
    pub xl: BTreeMap<LayerId, f64>,
    pub ly: BTreeMap<LayerId, f64>,
}

/// A score together with the reason it was forced to zero, if any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub no_observers: bool,
}

/// Scores indexed `[layer][bit]` in the order of `layers` and `bits`.
/// Parameter and MAC counts travel with the table so allocation needs no model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub layers: Vec<LayerId>,
    pub bits: BitSet,
    pub penalty: bool,
    pub weight: Vec<Vec<f64>>,
    pub activation: Vec<Vec<f64>>,
    pub params: Vec<u64>,
    pub macs: Vec<u64>,
}

impl SensitivityTable {
    pub fn get(&self, kind: PerturbKind, layer_index: usize, bits: u8) -> Option<f64> {
        let b = self.bits.bits().iter().position(|&x| x == bits)?;
        let rows = match kind {
            PerturbKind::Weight => &self.weight,
            PerturbKind::Activation => &self.activation,
        };
        rows.get(layer_index).map(|r| r[b])
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layers.len();
        let nb = self.bits.len();
        let shaped = |rows: &Vec<Vec<f64>>| rows.len() == l && rows.iter().all(|r| r.len() == nb);
        if l == 0 || !shaped(&self.weight) || !shaped(&self.activation) {
            return Err(Error::InvalidArgument("sensitivity table is ragged or empty".into()));
        }
        if self.params.len() != l || self.macs.len() != l {
            return Err(Error::InvalidArgument("sensitivity table cost columns do not match layers".into()));
        }
        if self
            .weight
            .iter()
            .chain(&self.activation)
            .flatten()
            .any(|&s| !(s.is_finite() && s >= 0.0))
        {
            return Err(Error::InvalidArgument("sensitivity scores must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub baseline: BaselineInfo,
    pub table: SensitivityTable,
    pub deltas: Vec<DeltaRecord>,
    pub warnings: Vec<String>,
    pub forward_passes: usize,
}

fn all_8bit(model: &ModelGraph) -> BitConfig {
    BitConfig::uniform(model.quantizable(), MAX_BITS)
}

pub fn compute_baseline(
    model: &ModelGraph,
    ranges: &ActRangeTable,
    probe: &Probe<'_>,
    observers: &ObserverSets,
) -> Result<BaselineInfo> {
    if observers.xl.is_empty() && observers.ly.is_empty() {
        return Err(Error::NoObservers { tau: observers.tau });
    }
    let xl: Vec<LayerId> = observers.xl.iter().copied().collect();
    let ly: Vec<LayerId> = observers.ly.iter().copied().collect();
    let view = apply_config(model, &all_8bit(model), ranges)?;
    let m = probe.measure(&view, &xl, &ly)?;
    let unwrap = |vals: BTreeMap<LayerId, Option<f64>>| {
        vals.into_iter()
            .map(|(l, v)| match v {
                Some(v) => Ok((l, v.max(0.0))),
                None => Err(Error::DegenerateObserver {
                    layer: l,
                    msg: "activations are constant on the calibration batch".into(),
                }),
            })
            .collect::<Result<BTreeMap<_, _>>>()
    };
    Ok(BaselineInfo {
        xl: unwrap(m.xl)?,
        ly: unwrap(m.ly)?,
        seed: probe.seed(),
        calibration_size: probe.calibration().len(),
    })
}

/// Normalized change in information at the observers downstream of `layer`,
/// divided by `bits` when `penalty` is set.
///
/// The unpenalized value is rounded through the penalized one, so that
/// `score(.., true) * bits == score(.., false)` holds exactly.
pub fn score(
    layer: LayerId,
    bits: u8,
    baseline: &BaselineInfo,
    delta_xl: &BTreeMap<LayerId, f64>,
    delta_ly: &BTreeMap<LayerId, f64>,
    penalty: bool,
) -> Result<Score> {
    let downstream = |m: &BTreeMap<LayerId, f64>| -> Vec<LayerId> { m.keys().copied().filter(|&j| j > layer).collect() };
    let (xl, ly) = (downstream(&baseline.xl), downstream(&baseline.ly));
    if xl.is_empty() && ly.is_empty() {
        return Ok(Score {
            value: 0.0,
            no_observers: true,
        });
    }
    let delta = |m: &BTreeMap<LayerId, f64>, j: LayerId| -> Result<f64> {
        m.get(&j).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("missing delta for observer {j} of layer {layer}"))
        })
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for &j in &xl {
        num += delta(delta_xl, j)?;
        den += baseline.xl[&j];
    }
    for &k in &ly {
        num += delta(delta_ly, k)?;
        den += baseline.ly[&k];
    }
    if den <= 0.0 {
        return Err(Error::Degenerate(format!(
            "baseline information at the observers downstream of layer {layer} is zero"
        )));
    }
    let penalized = (num / den) / bits as f64;
    Ok(Score {
        value: if penalty { penalized } else { penalized * bits as f64 },
        no_observers: false,
    })
}

/// Runs every (layer, bits, kind) perturbation on the calibration batch:
/// one forward pass for the baseline plus one per run.
pub fn compute_all(
    model: &ModelGraph,
    ranges: &ActRangeTable,
    probe: &Probe<'_>,
    observers: &ObserverSets,
    bitset: &BitSet,
    penalty: bool,
) -> Result<Analysis> {
    let start = probe.forward_count();
    let baseline = compute_baseline(model, ranges, probe, observers)?;
    let layers = model.quantizable().to_vec();
    let base_cfg = all_8bit(model);

    let runs: Vec<(usize, usize, PerturbKind)> = (0..layers.len())
        .flat_map(|li| {
            (0..bitset.len()).flat_map(move |bi| {
                [PerturbKind::Weight, PerturbKind::Activation]
                    .into_iter()
                    .map(move |k| (li, bi, k))
            })
        })
        .collect();

    let deltas: Vec<DeltaRecord> = runs
        .par_iter()
        .map(|&(li, bi, kind)| {
            let (layer, bits) = (layers[li], bitset.bits()[bi]);
            let lb = match kind {
                PerturbKind::Weight => LayerBits::new(bits, MAX_BITS),
                PerturbKind::Activation => LayerBits::new(MAX_BITS, bits),
            };
            let view = apply_config(model, &base_cfg.clone().with(layer, lb), ranges)?;
            let xl: Vec<LayerId> = baseline.xl.keys().copied().filter(|&j| j > layer).collect();
            let ly: Vec<LayerId> = baseline.ly.keys().copied().filter(|&j| j > layer).collect();
            let m = probe.measure(&view, &xl, &ly)?;
            let diff = |vals: BTreeMap<LayerId, Option<f64>>, base: &BTreeMap<LayerId, f64>| {
                vals.into_iter()
                    .map(|(j, v)| (j, (info_value(v) - base[&j]).abs()))
                    .collect::<BTreeMap<_, _>>()
            };
            Ok(DeltaRecord {
                layer,
                bits,
                kind,
                xl: diff(m.xl, &baseline.xl),
                ly: diff(m.ly, &baseline.ly),
            })
        })
        .collect::<Result<_>>()?;

    let nb = bitset.len();
    let mut weight = vec![vec![0.0; nb]; layers.len()];
    let mut activation = vec![vec![0.0; nb]; layers.len()];
    let mut unobserved = BTreeSet::new();
    for (d, &(li, bi, kind)) in deltas.iter().zip(&runs) {
        let s = score(d.layer, d.bits, &baseline, &d.xl, &d.ly, penalty)?;
        if s.no_observers {
            unobserved.insert(d.layer);
        }
        match kind {
            PerturbKind::Weight => weight[li][bi] = s.value,
            PerturbKind::Activation => activation[li][bi] = s.value,
        }
    }
    let warnings: Vec<String> = unobserved
        .into_iter()
        .map(|l| format!("layer {l} has no downstream observers; its scores are 0"))
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }

    let params = count_params(model);
    let macs = count_macs(model);
    let table = SensitivityTable {
        params: layers.iter().map(|l| params[l]).collect(),
        macs: layers.iter().map(|l| macs[l]).collect(),
        layers,
        bits: bitset.clone(),
        penalty,
        weight,
        activation,
    };
    Ok(Analysis {
        baseline,
        table,
        deltas,
        warnings,
        forward_passes: probe.forward_count() - start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn baseline(xl: &[(LayerId, f64)], ly: &[(LayerId, f64)]) -> BaselineInfo {
        BaselineInfo {
            xl: xl.iter().copied().collect(),
            ly: ly.iter().copied().collect(),
            seed: 0,
            calibration_size: 0,
        }
    }

    #[test]
    fn hand_computed_scores() {
        let b = baseline(&[(5, 1.5)], &[(9, 0.5)]);
        let dx: BTreeMap<_, _> = [(5, 0.3)].into();
        let dy: BTreeMap<_, _> = [(9, 0.1)].into();
        let s = score(2, 4, &b, &dx, &dy, true).unwrap();
        assert!((s.value - 0.05).abs() < 1e-12);
        let s = score(2, 4, &b, &dx, &dy, false).unwrap();
        assert!((s.value - 0.2).abs() < 1e-12);
    }

    #[test]
    fn only_downstream_observers_count() {
        let b = baseline(&[(1, 100.0), (5, 2.0)], &[]);
        let dx: BTreeMap<_, _> = [(1, 50.0), (5, 1.0)].into();
        let s = score(3, 1, &b, &dx, &BTreeMap::new(), true).unwrap();
        assert_eq!(s.value, 0.5);
        let s = score(7, 2, &b, &dx, &BTreeMap::new(), true).unwrap();
        assert!(s.no_observers);
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn zero_denominator_is_an_error() {
        let b = baseline(&[(5, 0.0)], &[]);
        let dx: BTreeMap<_, _> = [(5, 0.0)].into();
        assert!(score(1, 4, &b, &dx, &BTreeMap::new(), true).is_err());
    }
}
