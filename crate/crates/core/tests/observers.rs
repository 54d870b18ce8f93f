use std::collections::BTreeMap;

use infoq_core::fixture::{reference_fixture, FixtureConfig};
use infoq_core::observers::{correlations, InfoDelta};
use infoq_core::quant::accuracy;
use infoq_core::seed::{self, tag};
use infoq_core::{
    apply_config, calibrate_activation_ranges, pearson, perturbation_sweep, select_observers, smi, BitConfig,
    Calibration, Error, LayerBits, LayerId, Network, PerturbationRecord, Probe, ProjectionSet, SampleMatrix,
    SmiConfig, SmiTarget,
};
use proptest::prelude::*;

fn rec(layer: LayerId, acc: f64, d: &[(LayerId, f64, f64)]) -> PerturbationRecord {
    PerturbationRecord {
        layer,
        delta_acc: acc,
        deltas: d.iter().map(|&(j, xl, ly)| (j, InfoDelta { xl, ly })).collect(),
    }
}

/// Ten perturbed layers, candidates 10..=15. The last three candidates track
/// ΔAcc exactly in ΔI_LY; the rest carry alternating noise.
fn tracked_suffix() -> Vec<PerturbationRecord> {
    let acc: Vec<f64> = (0..10).map(|i| 0.01 * ((i * 7) % 10) as f64).collect();
    (0..10)
        .map(|i| {
            let d: Vec<(LayerId, f64, f64)> = (10..16)
                .map(|j| {
                    let noise = if (i + j) % 2 == 0 { 0.3 } else { 0.1 } * ((i * j) % 3) as f64;
                    let ly = if j >= 13 { acc[i] } else { noise };
                    (j, noise, ly)
                })
                .collect();
            rec(i, acc[i], &d)
        })
        .collect()
}

#[test]
fn exact_tracking_suffix_is_selected() {
    let sets = select_observers(&tracked_suffix(), 0.7, 3).unwrap();
    assert_eq!(sets.ly.iter().copied().collect::<Vec<_>>(), vec![13, 14, 15]);
    for c in correlations(&tracked_suffix(), 3) {
        if c.layer >= 13 {
            assert_eq!(c.rho_ly, Some(1.0));
        }
    }
}

#[test]
fn backward_scan_stops_at_first_failure() {
    // Candidate 20: |ρ| = 0.5; candidate 21: |ρ| = 0.9; candidate 19: ρ = 1.
    let acc = [0.0, 1.0, 2.0, 3.0, 4.0];
    let at_05 = [2.0, 1.0, 0.0, 4.0, 3.0];
    let records: Vec<PerturbationRecord> = (0..5)
        .map(|i| {
            let ly_21 = acc[i] + [0.0, 1.2, -0.1, -1.2, 0.3][i];
            rec(i, acc[i], &[(19, 0.0, acc[i]), (20, 0.0, at_05[i]), (21, 0.0, ly_21)])
        })
        .collect();
    let c = correlations(&records, 3);
    let r20 = c[1].rho_ly.unwrap();
    let r21 = c[2].rho_ly.unwrap();
    let xs: Vec<f64> = acc.to_vec();
    assert!((r20 - 0.5).abs() < 1e-12, "{r20}");
    assert!(r21 > 0.7 && (r21 - pearson(&records.iter().map(|r| r.deltas[&21].ly).collect::<Vec<_>>(), &xs).unwrap()).abs() < 1e-15);
    let sets = select_observers(&records, 0.7, 3).unwrap_or_else(|e| panic!("{e}"));
    assert_eq!(sets.ly.iter().copied().collect::<Vec<_>>(), vec![21]);
}

#[test]
fn sample_floor_skips_xl_and_stops_ly() {
    // Candidate 9 appears in only two records; candidate 8 in four.
    let records = vec![
        rec(0, 0.1, &[(8, 0.1, 0.1), (9, 0.1, 0.1)]),
        rec(1, 0.2, &[(8, 0.2, 0.2), (9, 0.2, 0.2)]),
        rec(2, 0.4, &[(8, 0.4, 0.4)]),
        rec(3, 0.8, &[(8, 0.8, 0.8)]),
    ];
    let c = correlations(&records, 3);
    assert_eq!((c[0].samples, c[1].samples), (4, 2));
    assert!(c[1].rho_xl.is_none() && c[1].rho_ly.is_none());
    let sets = select_observers(&records, 0.7, 3).unwrap();
    assert_eq!(sets.xl.iter().copied().collect::<Vec<_>>(), vec![8]);
    assert!(sets.ly.is_empty(), "an invalid last candidate ends the backward scan");
    // Two pairs never define a coefficient, whatever the floor.
    assert_eq!(select_observers(&records, 0.7, 2).unwrap(), sets);
    // Raising it above every count leaves nothing.
    assert!(matches!(select_observers(&records, 0.7, 5), Err(Error::NoObservers { .. })));
}

#[test]
fn uncorrelated_records_have_no_observers() {
    let records: Vec<PerturbationRecord> = (0..4)
        .map(|i| rec(i, [0.1, 0.2, 0.3, 0.4][i], &[(9, [1.0, -1.0, -1.0, 1.0][i], [1.0, -1.0, -1.0, 1.0][i])]))
        .collect();
    assert!(correlations(&records, 3)[0].rho_ly.unwrap().abs() < 1e-12);
    assert!(matches!(select_observers(&records, 0.7, 3), Err(Error::NoObservers { tau }) if tau == 0.7));
}

fn random_records(seed_values: &[u8]) -> Vec<PerturbationRecord> {
    let n = 8;
    (0..n)
        .map(|i| {
            let acc = seed_values[i % seed_values.len()] as f64 / 255.0;
            let d: Vec<(LayerId, f64, f64)> = (i + 1..n + 4)
                .map(|j| {
                    let a = seed_values[(i * 7 + j) % seed_values.len()] as f64 / 255.0;
                    let b = seed_values[(i * 3 + j * 5) % seed_values.len()] as f64 / 255.0;
                    (j, a + acc * (j % 2) as f64, b + acc * (j % 3 == 0) as u8 as f64)
                })
                .collect();
            rec(i, acc, &d)
        })
        .collect()
}

proptest! {
    #[test]
    fn higher_thresholds_shrink_sets(values in prop::collection::vec(any::<u8>(), 16..64), lo in 0.05f64..0.5, gap in 0.0f64..0.45) {
        let records = random_records(&values);
        let hi = lo + gap;
        let (a, b) = (select_observers(&records, lo, 3), select_observers(&records, hi, 3));
        if let Ok(strict) = &b {
            let loose = a.as_ref().expect("a lower threshold keeps every observer");
            prop_assert!(strict.xl.is_subset(&loose.xl));
            prop_assert!(strict.ly.is_subset(&loose.ly));
            // A suffix of a suffix: every loose member above the strict minimum is kept.
            if let Some(&first) = strict.ly.iter().next() {
                prop_assert!(loose.ly.iter().filter(|&&l| l >= first).all(|l| strict.ly.contains(l)));
            }
        }
    }

    #[test]
    fn selected_members_beat_threshold(values in prop::collection::vec(any::<u8>(), 16..64), tau in 0.1f64..0.9) {
        let records = random_records(&values);
        if let Ok(sets) = select_observers(&records, tau, 3) {
            for (members, ly) in [(&sets.xl, false), (&sets.ly, true)] {
                for &j in members {
                    let (xs, acc): (Vec<f64>, Vec<f64>) = records
                        .iter()
                        .filter_map(|r| r.deltas.get(&j).map(|d| (if ly { d.ly } else { d.xl }, r.delta_acc)))
                        .unzip();
                    prop_assert!(xs.len() >= 3);
                    prop_assert!(pearson(&xs, &acc).unwrap().abs() > tau);
                }
            }
            prop_assert_eq!(select_observers(&records, tau, 3).unwrap(), sets);
        }
    }
}

#[test]
fn sweep_matches_scripted_rerun() {
    let cfg = FixtureConfig {
        samples: 300,
        ..FixtureConfig::default()
    };
    let (model, data) = reference_fixture(&cfg).unwrap();
    let calib = Calibration::with_pca(&data, 160, 8, 7).unwrap();
    let ranges = calibrate_activation_ranges(&model, calib.inputs()).unwrap();
    let smi_cfg = SmiConfig {
        projections: 6,
        max_samples: 1000,
        ..SmiConfig::default()
    };
    let probe = Probe::new(&calib, smi_cfg, 7).unwrap();
    let sweep = perturbation_sweep(&model, &ranges, &probe, &data, 2).unwrap();
    assert_eq!(probe.forward_count(), 1 + model.quantizable().len());

    let measure = |cfg: &BitConfig, j: LayerId| -> (f64, f64) {
        let view = apply_config(&model, cfg, &ranges).unwrap();
        let act = SampleMatrix::from_tensor(&view.forward(calib.inputs(), &[j]).unwrap().taps[&j]).unwrap();
        let emb = calib.embedding();
        let pxl = ProjectionSet::generate(6, emb.cols(), Some(act.cols()), seed::derive(7, &[tag::SMI_XL, j as u64])).unwrap();
        let ply = ProjectionSet::generate(6, act.cols(), None, seed::derive(7, &[tag::SMI_LY, j as u64])).unwrap();
        let clamp = |r: Result<infoq_core::MiEstimate, Error>| match r {
            Ok(e) => e.value.max(0.0),
            Err(Error::Degenerate(_)) => 0.0,
            Err(e) => panic!("{e}"),
        };
        (
            clamp(smi(emb, SmiTarget::Continuous(&act), &pxl, 3)),
            clamp(smi(&act, SmiTarget::Labels(calib.labels()), &ply, 3)),
        )
    };
    let q = model.quantizable();
    let base_cfg = BitConfig::uniform(q, 8);
    let base_acc = accuracy(&apply_config(&model, &base_cfg, &ranges).unwrap(), &data).unwrap();
    assert_eq!(sweep.baseline_accuracy, base_acc);
    let base: BTreeMap<LayerId, (f64, f64)> = sweep.candidates.iter().map(|&j| (j, measure(&base_cfg, j))).collect();
    for r in &sweep.records {
        let cfg = base_cfg.clone().with(r.layer, LayerBits::uniform(2));
        let acc = accuracy(&apply_config(&model, &cfg, &ranges).unwrap(), &data).unwrap();
        assert_eq!(r.delta_acc, base_acc - acc);
        let expected: Vec<LayerId> = sweep.candidates.iter().copied().filter(|&j| j > r.layer).collect();
        assert_eq!(r.deltas.keys().copied().collect::<Vec<_>>(), expected);
        for (&j, d) in &r.deltas {
            let (xl, ly) = measure(&cfg, j);
            assert_eq!(d.xl, (xl - base[&j].0).abs(), "xl at {j} after perturbing {}", r.layer);
            assert_eq!(d.ly, (ly - base[&j].1).abs(), "ly at {j} after perturbing {}", r.layer);
        }
    }
    assert_eq!(sweep.records.len(), q.len());
    assert_eq!(sweep.candidates.last().copied(), Some(model.output_layer()));
}

#[test]
fn eight_bit_sweep_is_exactly_zero() {
    let cfg = FixtureConfig {
        samples: 200,
        ..FixtureConfig::default()
    };
    let (model, data) = reference_fixture(&cfg).unwrap();
    let calib = Calibration::with_pca(&data, 128, 8, 3).unwrap();
    let ranges = calibrate_activation_ranges(&model, calib.inputs()).unwrap();
    let smi_cfg = SmiConfig {
        projections: 4,
        ..SmiConfig::default()
    };
    let probe = Probe::new(&calib, smi_cfg, 3).unwrap();
    let sweep = perturbation_sweep(&model, &ranges, &probe, &data, 8).unwrap();
    for r in &sweep.records {
        assert_eq!(r.delta_acc, 0.0);
        assert!(r.deltas.values().all(|d| d.xl == 0.0 && d.ly == 0.0));
    }
}
