//! Deterministic forward execution. Loops run in row-major order with a
//! fixed accumulation order, so identical inputs give bit-identical outputs.

use std::collections::{BTreeMap, BTreeSet};

use super::{LayerId, LayerKind, LayerSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Batched activations at the tap point of each requested layer.
    pub taps: BTreeMap<LayerId, Tensor>,
}

/// Anything that can run a batch through a model graph.
pub trait Network: Sync {
    fn graph(&self) -> &ModelGraph;

    fn forward(&self, batch: &Tensor, taps: &[LayerId]) -> Result<ForwardOutput>;

    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch, &[])?.logits)
    }
}

impl Network for ModelGraph {
    fn graph(&self) -> &ModelGraph {
        self
    }

    fn forward(&self, batch: &Tensor, taps: &[LayerId]) -> Result<ForwardOutput> {
        run_graph(self, batch, taps, &NoHooks)
    }
}

/// Interception points used by quantized views.
pub(crate) trait Hooks {
    /// Replacement for the primary weight tensor of `layer`.
    fn weight(&self, _layer: LayerId) -> Option<&Tensor> {
        None
    }

    /// Applied in place to the batched output of `layer`.
    fn post(&self, _layer: LayerId, _out: &mut [f32]) {}
}

struct NoHooks;
impl Hooks for NoHooks {}

pub(crate) fn run_graph(
    g: &ModelGraph,
    batch: &Tensor,
    taps: &[LayerId],
    hooks: &dyn Hooks,
) -> Result<ForwardOutput> {
    let n_layers = g.layers().len();
    if batch.shape().len() != g.input_shape().len() + 1 || &batch.shape()[1..] != g.input_shape() {
        let mut expected = vec![batch.shape()[0]];
        expected.extend_from_slice(g.input_shape());
        return Err(Error::Shape {
            layer: 0,
            expected,
            actual: batch.shape().to_vec(),
        });
    }
    if let Some(&bad) = taps.iter().find(|&&t| t >= n_layers) {
        return Err(Error::InvalidArgument(format!("tap {bad} is not a layer id")));
    }
    let n = batch.rows();
    let keep: BTreeSet<LayerId> = taps.iter().map(|&t| g.tap_point(t)).collect();
    let last_use: Vec<LayerId> = (0..n_layers)
        .map(|i| g.consumers(i).iter().copied().max().unwrap_or(i))
        .collect();

    let mut outputs: Vec<Option<Vec<f32>>> = vec![None; n_layers];
    for layer in g.layers() {
        let id = layer.id;
        let in_shape: &[usize] = match layer.inputs.first() {
            Some(&src) => g.output_shape(src),
            None => g.input_shape(),
        };
        let input = |slot: usize| -> &[f32] {
            match layer.inputs.get(slot) {
                Some(&src) => outputs[src].as_deref().expect("input freed before last use"),
                None => batch.data(),
            }
        };
        let out_shape = g.output_shape(id);
        let mut out = match layer.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
                let w = hooks.weight(id).unwrap_or_else(|| g.tensor(layer.weights[0]));
                let bias = layer.weights.get(1).map(|&b| g.tensor(b).data());
                conv2d(
                    input(0),
                    n,
                    in_shape,
                    w,
                    bias,
                    layer,
                    out_shape,
                    layer.kind == LayerKind::DepthwiseConv2d,
                )
            }
            LayerKind::FullyConnected => {
                let w = hooks.weight(id).unwrap_or_else(|| g.tensor(layer.weights[0]));
                let bias = layer.weights.get(1).map(|&b| g.tensor(b).data());
                fully_connected(input(0), n, w, bias)
            }
            LayerKind::Batchnorm => {
                let stats: Vec<&[f32]> = layer.weights.iter().map(|&t| g.tensor(t).data()).collect();
                batchnorm(input(0), n, in_shape, &stats, layer.eps())
            }
            LayerKind::Relu => input(0).iter().map(|&v| v.max(0.0)).collect(),
            LayerKind::Relu6 => input(0).iter().map(|&v| v.clamp(0.0, 6.0)).collect(),
            LayerKind::Flatten => input(0).to_vec(),
            LayerKind::MaxPool => max_pool(input(0), n, in_shape, layer, out_shape),
            LayerKind::GlobalAvgPool => global_avg_pool(input(0), n, in_shape),
            LayerKind::Add => {
                let mut acc = input(0).to_vec();
                for slot in 1..layer.inputs.len() {
                    for (a, &b) in acc.iter_mut().zip(input(slot)) {
                        *a += b;
                    }
                }
                acc
            }
        };
        hooks.post(id, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Layer {
                layer: id,
                msg: "produced non-finite activations".into(),
            });
        }
        outputs[id] = Some(out);
        for &src in &layer.inputs {
            if last_use[src] == id && !keep.contains(&src) {
                outputs[src] = None;
            }
        }
    }

    let batched = |id: LayerId, data: Vec<f32>| {
        let mut shape = vec![n];
        shape.extend_from_slice(g.output_shape(id));
        Tensor::from_parts(shape, data)
    };
    let mut tapped = BTreeMap::new();
    for &t in taps {
        let p = g.tap_point(t);
        let data = outputs[p].clone().expect("tap output retained");
        tapped.insert(t, batched(p, data));
    }
    let out_id = g.output_layer();
    let logits = batched(out_id, outputs[out_id].take().expect("output computed"));
    Ok(ForwardOutput {
        logits,
        taps: tapped,
    })
}

#[allow(clippy::too_many_arguments)]
fn conv2d(
    x: &[f32],
    n: usize,
    in_shape: &[usize],
    w: &Tensor,
    bias: Option<&[f32]>,
    layer: &LayerSpec,
    out_shape: &[usize],
    depthwise: bool,
) -> Vec<f32> {
    let (c, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let ws = w.shape();
    let (oc, ic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let stride = layer.stride();
    let pad = layer.padding() as isize;
    let wdata = w.data();
    let in_plane = h * wd;
    let mut out = vec![0.0f32; n * oc * oh * ow];
    for s in 0..n {
        let xs = &x[s * c * in_plane..(s + 1) * c * in_plane];
        let os = &mut out[s * oc * oh * ow..(s + 1) * oc * oh * ow];
        for o in 0..oc {
            let b = bias.map_or(0.0, |b| b[o]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..ic {
                        let chan = if depthwise { o } else { ci };
                        let plane = &xs[chan * in_plane..(chan + 1) * in_plane];
                        let kbase = (o * ic + ci) * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * wd..(iy as usize + 1) * wd];
                            let krow = &wdata[kbase + ky * kw..kbase + (ky + 1) * kw];
                            for (kx, &kv) in krow.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += kv * row[ix as usize];
                            }
                        }
                    }
                    os[(o * oh + oy) * ow + ox] = acc + b;
                }
            }
        }
    }
    out
}

fn fully_connected(x: &[f32], n: usize, w: &Tensor, bias: Option<&[f32]>) -> Vec<f32> {
    let (outs, ins) = (w.shape()[0], w.shape()[1]);
    let wdata = w.data();
    let mut out = Vec::with_capacity(n * outs);
    for s in 0..n {
        let xs = &x[s * ins..(s + 1) * ins];
        for o in 0..outs {
            let row = &wdata[o * ins..(o + 1) * ins];
            let mut acc = 0.0f32;
            for (&a, &b) in row.iter().zip(xs) {
                acc += a * b;
            }
            out.push(acc + bias.map_or(0.0, |b| b[o]));
        }
    }
    out
}

fn batchnorm(x: &[f32], n: usize, shape: &[usize], stats: &[&[f32]], eps: f32) -> Vec<f32> {
    let (gamma, beta, mean, var) = (stats[0], stats[1], stats[2], stats[3]);
    let c = shape[0];
    let inner: usize = shape[1..].iter().product();
    let mut out = Vec::with_capacity(x.len());
    for s in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let base = (s * c + ch) * inner;
            for &v in &x[base..base + inner] {
                out.push((v - mean[ch]) * inv * gamma[ch] + beta[ch]);
            }
        }
    }
    out
}

fn max_pool(x: &[f32], n: usize, in_shape: &[usize], layer: &LayerSpec, out_shape: &[usize]) -> Vec<f32> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let k = layer.kernel.unwrap_or(2);
    let stride = layer.stride();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks_exact(h * w).take(n * c) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..k {
                    let row = &plane[(oy * stride + ky) * w..];
                    for kx in 0..k {
                        m = m.max(row[ox * stride + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn global_avg_pool(x: &[f32], n: usize, in_shape: &[usize]) -> Vec<f32> {
    let plane: usize = in_shape[1..].iter().product();
    x.chunks_exact(plane)
        .take(n * in_shape[0])
        .map(|p| p.iter().sum::<f32>() / plane as f32)
        .collect()
}
