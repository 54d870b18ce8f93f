//! Shared inputs for the benchmarks.

use infoq_core::fixture::{reference_fixture, FixtureConfig};
use infoq_core::{BitSet, Dataset, ModelGraph, SampleMatrix, SensitivityTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(n: usize, d: usize, seed: u64) -> SampleMatrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
    SampleMatrix::new(n, d, v).expect("shape matches")
}

/// `y = x + noise`, column by column.
pub fn correlated(x: &SampleMatrix, seed: u64) -> SampleMatrix {
    let noise = gaussian(x.rows(), x.cols(), seed);
    let v = x.values().iter().zip(noise.values()).map(|(a, b)| a + 0.5 * b).collect();
    SampleMatrix::new(x.rows(), x.cols(), v).expect("shape matches")
}

pub fn fixture(samples: usize) -> (ModelGraph, Dataset) {
    let cfg = FixtureConfig {
        samples,
        ..FixtureConfig::default()
    };
    reference_fixture(&cfg).expect("fixture builds")
}

pub fn random_table(layers: usize, bits: &[u8], seed: u64) -> SensitivityTable {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let bits = BitSet::new(bits.to_vec()).expect("valid bit set");
    let top = bits.max();
    let rows = |r: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..layers)
            .map(|_| bits.bits().iter().map(|&b| if b == top { 0.0 } else { r.random::<f64>() / b as f64 }).collect())
            .collect()
    };
    let weight = rows(&mut r);
    let activation = rows(&mut r);
    SensitivityTable {
        layers: (0..layers).collect(),
        bits: bits.clone(),
        penalty: true,
        weight,
        activation,
        params: (0..layers).map(|_| r.random_range(100..200_000)).collect(),
        macs: (0..layers).map(|_| r.random_range(10_000..20_000_000)).collect(),
    }
}
