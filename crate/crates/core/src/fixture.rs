//! Seeded reference fixtures: a small residual CNN and a synthetic
//! 10-class blob dataset. Nothing is trained. Convolutions are perturbed
//! channel-routing kernels, batchnorm statistics are measured on generated
//! data, and the classifier head is a linear discriminant fitted in closed
//! form on the final features.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::Result;
use crate::model::{LayerId, LayerKind, LayerSpec, ModelGraph, Network, TensorId};
use crate::seed::{self, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureConfig {
    pub seed: u64,
    pub classes: usize,
    pub side: usize,
    pub samples: usize,
    /// Samples used to set batchnorm statistics and class centroids.
    pub fit_samples: usize,
    pub noise: f32,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            seed: 42,
            classes: 10,
            side: 16,
            samples: 2048,
            fit_samples: 1024,
            noise: 1.0,
        }
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed::derive(seed, &[tag::FIXTURE, stream]))
}

/// Per-class prototype images: a few signed Gaussian blobs at fixed spots.
fn class_prototypes(cfg: &FixtureConfig) -> Vec<Vec<f32>> {
    let mut r = rng(cfg.seed, 6);
    let s = cfg.side;
    (0..cfg.classes)
        .map(|_| {
            let blobs: Vec<(f32, f32, f32)> = (0..3)
                .map(|i| {
                    let cx = r.random::<f32>() * s as f32;
                    let cy = r.random::<f32>() * s as f32;
                    let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                    (cx, cy, sign)
                })
                .collect();
            let sigma = s as f32 / 8.0;
            let mut img: Vec<f32> = (0..s * s)
                .map(|p| {
                    let (x, y) = ((p % s) as f32, (p / s) as f32);
                    blobs
                        .iter()
                        .map(|&(cx, cy, sg)| sg * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp())
                        .sum()
                })
                .collect();
            let peak = img.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
            img.iter_mut().for_each(|v| *v /= peak);
            img
        })
        .collect()
}

/// Each sample is its class prototype plus pixel noise.
fn sample_images(cfg: &FixtureConfig, n: usize, stream: u64) -> Result<Dataset> {
    let mut r = rng(cfg.seed, stream);
    let protos = class_prototypes(cfg);
    let noise = Normal::new(0.0f32, cfg.noise).expect("finite noise");
    let mut data = Vec::with_capacity(n * cfg.side * cfg.side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % cfg.classes;
        labels.push(c as u32);
        data.extend(protos[c].iter().map(|&v| v + noise.sample(&mut r)));
    }
    Dataset::new(Tensor::new(vec![n, 1, cfg.side, cfg.side], data)?, labels, cfg.classes)
}

struct Builder {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    tensors: BTreeMap<TensorId, Tensor>,
    quantizable: Vec<LayerId>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(input_shape: Vec<usize>, rng: ChaCha8Rng) -> Self {
        Builder {
            input_shape,
            layers: Vec::new(),
            tensors: BTreeMap::new(),
            quantizable: Vec::new(),
            rng,
        }
    }

    fn tensor(&mut self, t: Tensor) -> TensorId {
        let id = self.tensors.len();
        self.tensors.insert(id, t);
        id
    }

    fn push(&mut self, spec: LayerSpec) -> LayerId {
        let id = spec.id;
        if spec.kind.has_weights() {
            self.quantizable.push(id);
        }
        self.layers.push(spec);
        id
    }

    fn next_id(&self) -> LayerId {
        self.layers.len()
    }

    fn inputs_of(&self, from: Option<LayerId>) -> Vec<LayerId> {
        from.map_or_else(Vec::new, |f| vec![f])
    }

    fn he(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let d = Normal::new(0.0f32, std).expect("finite std");
        Tensor::new(shape, (0..n).map(|_| d.sample(&mut self.rng)).collect()).expect("finite weights")
    }

    fn conv(&mut self, from: Option<LayerId>, ic: usize, oc: usize, k: usize, depthwise: bool) -> LayerId {
        let (wshape, fan_in) = if depthwise {
            (vec![oc, 1, k, k], k * k)
        } else {
            (vec![oc, ic, k, k], ic * k * k)
        };
        let w = self.he(wshape, fan_in);
        let b = Tensor::new(vec![oc], vec![0.01; oc]).expect("finite bias");
        let (w, b) = (self.tensor(w), self.tensor(b));
        let kind = if depthwise {
            LayerKind::DepthwiseConv2d
        } else {
            LayerKind::Conv2d
        };
        let spec = LayerSpec::new(self.next_id(), kind, self.inputs_of(from))
            .with_weights(vec![w, b])
            .with_padding(k / 2);
        self.push(spec)
    }

    fn simple(&mut self, kind: LayerKind, inputs: Vec<LayerId>) -> LayerId {
        let spec = LayerSpec::new(self.next_id(), kind, inputs);
        self.push(spec)
    }

    fn max_pool(&mut self, from: LayerId) -> LayerId {
        let spec = LayerSpec::new(self.next_id(), LayerKind::MaxPool, vec![from]).with_kernel(2);
        self.push(spec)
    }

    /// Graph of everything built so far, with the newest layer as output.
    fn graph(&self) -> Result<ModelGraph> {
        ModelGraph::new(
            self.input_shape.clone(),
            self.layers.clone(),
            self.tensors.clone(),
            self.quantizable.clone(),
        )
    }

    /// Batchnorm whose statistics normalize `from` on `fit` inputs.
    fn batchnorm(&mut self, from: LayerId, fit: &Tensor) -> Result<LayerId> {
        let out = self.graph()?.logits(fit)?;
        let c = out.shape()[1];
        let inner: usize = out.shape()[2..].iter().product();
        let n = out.rows();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                mean[ch] += out.data()[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let count = (n * inner) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                var[ch] += out.data()[base..base + inner]
                    .iter()
                    .map(|&v| (v as f64 - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let f = |v: Vec<f64>| Tensor::new(vec![c], v.into_iter().map(|x| x as f32).collect()).expect("finite stats");
        let ids = [
            self.tensor(f(vec![1.0; c])),
            self.tensor(f(vec![0.2; c])),
            self.tensor(f(mean)),
            self.tensor(f(var)),
        ];
        let spec = LayerSpec::new(self.next_id(), LayerKind::Batchnorm, vec![from]).with_weights(ids.to_vec());
        Ok(self.push(spec))
    }

    /// Linear discriminant head over the features of `from`: class means
    /// and a pooled within-class covariance with a ridge.
    fn lda_head(&mut self, from: LayerId, fit: &Dataset) -> Result<LayerId> {
        let feats = self.graph()?.logits(fit.inputs())?;
        let (n, d) = (feats.rows(), feats.row_len());
        let k = fit.class_count();
        let mut means = vec![vec![0.0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in fit.labels().iter().enumerate() {
            counts[l as usize] += 1;
            for (m, &v) in means[l as usize].iter_mut().zip(feats.row(i)) {
                *m += v as f64;
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= c.max(1) as f64);
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for (i, &l) in fit.labels().iter().enumerate() {
            let r: Vec<f64> = feats.row(i).iter().zip(&means[l as usize]).map(|(&v, m)| v as f64 - m).collect();
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += r[a] * r[b];
                }
            }
        }
        cov /= n as f64;
        let ridge = 0.1 * cov.trace() / d as f64 + 1e-9;
        for a in 0..d {
            cov[(a, a)] += ridge;
        }
        let chol = cov.cholesky().expect("ridge keeps the covariance positive definite");
        let mut rows = Vec::with_capacity(k);
        let mut offsets = Vec::with_capacity(k);
        for m in &means {
            let mu = DVector::from_column_slice(m);
            let row = chol.solve(&mu);
            offsets.push(-0.5 * row.dot(&mu));
            rows.push(row);
        }
        // Remove the class-common part so logits stay small; argmax is unchanged.
        let row_mean = rows.iter().fold(DVector::zeros(d), |acc, r| acc + r) / k as f64;
        let offset_mean = offsets.iter().sum::<f64>() / k as f64;
        let w: Vec<f32> = rows.iter().flat_map(|r| (r - &row_mean).iter().map(|&v| v as f32).collect::<Vec<_>>()).collect();
        let b: Vec<f32> = offsets.iter().map(|o| (o - offset_mean) as f32).collect();
        let w = self.tensor(Tensor::new(vec![k, d], w)?);
        let b = self.tensor(Tensor::new(vec![k], b)?);
        let spec = LayerSpec::new(self.next_id(), LayerKind::FullyConnected, vec![from]).with_weights(vec![w, b]);
        let id = self.push(spec);
        // The head stays in float; nothing downstream could observe it.
        self.quantizable.retain(|&l| l != id);
        Ok(id)
    }

    /// Stem whose filters come in sign-flipped pairs of smoothing and
    /// gradient kernels, so the following ReLU keeps both polarities.
    fn signed_stem(&mut self) -> LayerId {
        const BASE: [[f32; 9]; 2] = [
            [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
        ];
        let mut data = Vec::with_capacity(4 * 9);
        for k in &BASE {
            for sign in [1.0, -1.0] {
                data.extend(k.iter().map(|&v| sign * v / 9.0));
            }
        }
        let w = self.tensor(Tensor::new(vec![4, 1, 3, 3], data).expect("finite weights"));
        let b = self.tensor(Tensor::new(vec![4], vec![0.0; 4]).expect("finite bias"));
        let spec = LayerSpec::new(self.next_id(), LayerKind::Conv2d, vec![])
            .with_weights(vec![w, b])
            .with_padding(1);
        self.push(spec)
    }

    /// Convolution close to a channel-routing identity: output `o` copies
    /// input `o % ic` at the kernel centre, plus `eps`-scaled random taps.
    fn mixing(&mut self, from: LayerId, ic: usize, oc: usize, k: usize, depthwise: bool, eps: f32) -> LayerId {
        let id = self.conv(Some(from), ic, oc, k, depthwise);
        let wid = self.layers[id].weights[0];
        let t = self.tensors.get_mut(&wid).expect("weight tensor");
        let per_out = t.len() / oc;
        let centre = (k / 2) * k + k / 2;
        for o in 0..oc {
            let src = if depthwise { 0 } else { o % ic };
            for (j, v) in t.data_mut()[o * per_out..(o + 1) * per_out].iter_mut().enumerate() {
                *v *= eps;
                if j == src * k * k + centre {
                    *v += 1.0;
                }
            }
        }
        id
    }
}

/// The reference network: a signed stem, one residual block, pooling stages
/// with standard, depthwise and pointwise convolutions, and a linear
/// discriminant head over the flattened features. Seven quantizable layers;
/// the head is kept in float.
pub fn reference_model(cfg: &FixtureConfig) -> Result<ModelGraph> {
    let fit = sample_images(cfg, cfg.fit_samples, 3)?;
    let x = fit.inputs();
    let mut b = Builder::new(vec![1, cfg.side, cfg.side], rng(cfg.seed, 4));

    let c0 = b.signed_stem();
    let eps = 0.3;
    let r1 = b.simple(LayerKind::Relu, vec![c0]);
    let c2 = b.mixing(r1, 4, 4, 3, false, eps);
    let n3 = b.batchnorm(c2, x)?;
    let r4 = b.simple(LayerKind::Relu, vec![n3]);
    let c5 = b.mixing(r4, 4, 4, 3, false, eps);
    let n6 = b.batchnorm(c5, x)?;
    let a7 = b.simple(LayerKind::Add, vec![r1, n6]);
    let r8 = b.simple(LayerKind::Relu, vec![a7]);
    let p9 = b.max_pool(r8);
    let c10 = b.mixing(p9, 4, 8, 3, false, eps);
    let r11 = b.simple(LayerKind::Relu, vec![c10]);
    let d12 = b.mixing(r11, 8, 8, 3, true, eps);
    let r13 = b.simple(LayerKind::Relu, vec![d12]);
    let c14 = b.mixing(r13, 8, 8, 1, false, eps);
    let r15 = b.simple(LayerKind::Relu, vec![c14]);
    let p16 = b.max_pool(r15);
    let c17 = b.mixing(p16, 8, 24, 3, false, eps);
    let r18 = b.simple(LayerKind::Relu, vec![c17]);
    let f19 = b.simple(LayerKind::Flatten, vec![r18]);
    b.lda_head(f19, &fit)?;
    b.graph()
}

pub fn reference_dataset(cfg: &FixtureConfig) -> Result<Dataset> {
    sample_images(cfg, cfg.samples, 2)
}

pub fn reference_fixture(cfg: &FixtureConfig) -> Result<(ModelGraph, Dataset)> {
    Ok((reference_model(cfg)?, reference_dataset(cfg)?))
}

/// A small hand-shaped residual graph: eight layers, one add, six
/// quantizable layers, input `[1, 6, 6]`, three classes.
pub fn residual_toy(seed: u64) -> Result<ModelGraph> {
    let mut b = Builder::new(vec![1, 6, 6], rng(seed, 5));
    let c0 = b.conv(None, 1, 2, 3, false);
    let c1 = b.conv(Some(c0), 2, 2, 3, false);
    let a2 = b.simple(LayerKind::Add, vec![c0, c1]);
    let c3 = b.conv(Some(a2), 2, 2, 3, false);
    let d4 = b.conv(Some(c3), 2, 2, 3, true);
    let g5 = b.simple(LayerKind::GlobalAvgPool, vec![d4]);
    let w6 = b.he(vec![4, 2], 2);
    let w6 = b.tensor(w6);
    let f6 = b.push(LayerSpec::new(6, LayerKind::FullyConnected, vec![g5]).with_weights(vec![w6]));
    let w7 = b.he(vec![3, 4], 4);
    let w7 = b.tensor(w7);
    let bias7 = b.tensor(Tensor::new(vec![3], vec![0.0; 3])?);
    b.push(LayerSpec::new(7, LayerKind::FullyConnected, vec![f6]).with_weights(vec![w7, bias7]));
    b.graph()
}
