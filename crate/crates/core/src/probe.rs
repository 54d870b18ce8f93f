//! Information measurements on a fixed calibration batch.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::info::{fit_compressor, smi, Compressor, ProjectionSet, SampleMatrix, SmiTarget};
use crate::model::{LayerId, Network};
use crate::quant::forward_batched;
use crate::seed::{self, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmiConfig {
    pub k: usize,
    pub projections: usize,
    /// Rows per SMI call; larger calibration batches are subsampled once.
    pub max_samples: usize,
    pub embed_dim: usize,
}

impl Default for SmiConfig {
    fn default() -> Self {
        SmiConfig {
            k: 3,
            projections: 64,
            max_samples: 2048,
            embed_dim: 32,
        }
    }
}

/// The fixed batch every measurement runs on, with its input embedding.
#[derive(Debug, Clone)]
pub struct Calibration {
    inputs: Tensor,
    labels: Vec<u32>,
    embedding: SampleMatrix,
    compressor: Compressor,
}

/// Row indices of a seeded uniform subset, in ascending order.
pub fn sample_rows(n: usize, size: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..n).collect();
    if size >= n {
        return rows;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[stream]));
    rows.shuffle(&mut rng);
    rows.truncate(size);
    rows.sort_unstable();
    rows
}

impl Calibration {
    pub fn new(inputs: Tensor, labels: Vec<u32>, embedding: SampleMatrix, compressor: Compressor) -> Result<Self> {
        if inputs.rows() != labels.len() || embedding.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "calibration parts disagree: {} inputs, {} labels, {} embeddings",
                inputs.rows(),
                labels.len(),
                embedding.rows()
            )));
        }
        Ok(Calibration {
            inputs,
            labels,
            embedding,
            compressor,
        })
    }

    /// Draws `size` rows and embeds them with PCA fitted on those rows.
    pub fn with_pca(data: &Dataset, size: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        let rows = sample_rows(data.len(), size, seed, tag::CALIBRATION);
        let sub = data.subset(&rows);
        let flat = SampleMatrix::from_tensor(sub.inputs())?;
        let compressor = fit_compressor(&flat, embed_dim)?;
        let embedding = compressor.compress(&flat)?;
        Calibration::new(sub.inputs().clone(), sub.labels().to_vec(), embedding, compressor)
    }

    /// Draws `size` rows; `embeddings` are row-aligned with `data`.
    pub fn with_embeddings(data: &Dataset, embeddings: &SampleMatrix, size: usize, seed: u64) -> Result<Self> {
        if embeddings.rows() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "{} embeddings for {} samples",
                embeddings.rows(),
                data.len()
            )));
        }
        let rows = sample_rows(data.len(), size, seed, tag::CALIBRATION);
        let sub = data.subset(&rows);
        let embedding = embeddings.select_rows(&rows)?;
        let compressor = Compressor::precomputed(embedding.cols());
        Calibration::new(sub.inputs().clone(), sub.labels().to_vec(), embedding, compressor)
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn embedding(&self) -> &SampleMatrix {
        &self.embedding
    }

    pub fn compressor(&self) -> &Compressor {
        &self.compressor
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// SMI at a set of layers after one forward pass. `None` marks a layer whose
/// activations are constant on the batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Measurement {
    pub xl: BTreeMap<LayerId, Option<f64>>,
    pub ly: BTreeMap<LayerId, Option<f64>>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Side {
    Input,
    Label,
}

/// Runs networks on the calibration batch and estimates `SMI(X_E; L_j)`
/// and `SMI(L_j; Y)`. Directions depend only on the seed and the layer, so
/// every network measured through one probe sees the same projections.
pub struct Probe<'c> {
    calib: &'c Calibration,
    cfg: SmiConfig,
    seed: u64,
    rows: Vec<usize>,
    embedding: SampleMatrix,
    labels: Vec<u32>,
    projections: Mutex<BTreeMap<(Side, LayerId), Arc<ProjectionSet>>>,
    forwards: AtomicUsize,
}

impl<'c> Probe<'c> {
    pub fn new(calib: &'c Calibration, cfg: SmiConfig, seed: u64) -> Result<Self> {
        if cfg.k == 0 || cfg.projections == 0 || cfg.max_samples < 2 {
            return Err(Error::InvalidArgument(format!("invalid SMI settings {cfg:?}")));
        }
        let rows = sample_rows(calib.len(), cfg.max_samples, seed, tag::SUBSAMPLE);
        let embedding = calib.embedding().select_rows(&rows)?;
        let labels = rows.iter().map(|&r| calib.labels()[r]).collect();
        Ok(Probe {
            calib,
            cfg,
            seed,
            rows,
            embedding,
            labels,
            projections: Mutex::new(BTreeMap::new()),
            forwards: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &SmiConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn calibration(&self) -> &Calibration {
        self.calib
    }

    /// Forward passes run through this probe so far.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    fn projection(&self, side: Side, layer: LayerId, width: usize) -> Result<Arc<ProjectionSet>> {
        if let Some(p) = self.projections.lock().expect("projection cache").get(&(side, layer)) {
            return Ok(Arc::clone(p));
        }
        let p = Arc::new(match side {
            Side::Input => ProjectionSet::generate(
                self.cfg.projections,
                self.embedding.cols(),
                Some(width),
                seed::derive(self.seed, &[tag::SMI_XL, layer as u64]),
            )?,
            Side::Label => ProjectionSet::generate(
                self.cfg.projections,
                width,
                None,
                seed::derive(self.seed, &[tag::SMI_LY, layer as u64]),
            )?,
        });
        let mut cache = self.projections.lock().expect("projection cache");
        Ok(Arc::clone(cache.entry((side, layer)).or_insert(p)))
    }

    fn estimate(&self, side: Side, layer: LayerId, act: &SampleMatrix) -> Result<Option<f64>> {
        let proj = self.projection(side, layer, act.cols())?;
        let r = match side {
            Side::Input => smi(&self.embedding, SmiTarget::Continuous(act), &proj, self.cfg.k),
            Side::Label => smi(act, SmiTarget::Labels(&self.labels), &proj, self.cfg.k),
        };
        match r {
            Ok(e) => Ok(Some(e.value)),
            Err(Error::Degenerate(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// One forward pass of `net`, then SMI at each requested layer.
    pub fn measure(&self, net: &(impl Network + ?Sized), xl: &[LayerId], ly: &[LayerId]) -> Result<Measurement> {
        let mut taps: Vec<LayerId> = xl.iter().chain(ly).copied().collect();
        taps.sort_unstable();
        taps.dedup();
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let out = forward_batched(net, self.calib.inputs(), &taps)?;
        let acts: BTreeMap<LayerId, SampleMatrix> = out
            .taps
            .iter()
            .map(|(&l, t)| Ok((l, SampleMatrix::from_tensor(&t.select_rows(&self.rows))?)))
            .collect::<Result<_>>()?;

        let jobs: Vec<(Side, LayerId)> = xl
            .iter()
            .map(|&l| (Side::Input, l))
            .chain(ly.iter().map(|&l| (Side::Label, l)))
            .collect();
        let values: Vec<Result<Option<f64>>> = jobs
            .par_iter()
            .map(|&(side, l)| self.estimate(side, l, &acts[&l]))
            .collect();
        let mut m = Measurement::default();
        for (&(side, l), v) in jobs.iter().zip(values) {
            let v = v?;
            match side {
                Side::Input => m.xl.insert(l, v),
                Side::Label => m.ly.insert(l, v),
            };
        }
        Ok(m)
    }
}
