//! Small feed-forward graphs: layer specs, validation and shape inference.

mod exec;
mod io;
mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use exec::{ForwardOutput, Network};
pub(crate) use exec::{run_graph, Hooks};
pub use io::{
    load_dataset, load_model, load_samples, save_dataset, save_model, save_model_packed,
    save_samples,
};
pub use stats::{count_macs, count_params};

pub type LayerId = usize;
pub type TensorId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    FullyConnected,
    Relu,
    Relu6,
    Batchnorm,
    MaxPool,
    GlobalAvgPool,
    Add,
    Flatten,
}

impl LayerKind {
    pub fn has_weights(self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::FullyConnected
        )
    }

    pub fn is_activation(self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::Relu6)
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::MaxPool | LayerKind::GlobalAvgPool)
    }
}

/// One node of the graph. Weighted layers list `[weight, bias?]` in
/// `weights`; batchnorm lists `[gamma, beta, mean, var]`. An empty `inputs`
/// list means the layer reads the model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub id: LayerId,
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<LayerId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<TensorId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_shape: Option<Vec<usize>>,
}

impl LayerSpec {
    pub fn new(id: LayerId, kind: LayerKind, inputs: Vec<LayerId>) -> Self {
        LayerSpec {
            id,
            kind,
            inputs,
            weights: Vec::new(),
            stride: None,
            padding: None,
            kernel: None,
            eps: None,
            output_shape: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<TensorId>) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = Some(stride);
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = Some(padding);
        self
    }

    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.kernel = Some(kernel);
        self
    }

    pub fn with_eps(mut self, eps: f32) -> Self {
        self.eps = Some(eps);
        self
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(match self.kind {
            LayerKind::MaxPool => self.kernel.unwrap_or(2),
            _ => 1,
        })
    }

    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(0)
    }

    pub fn eps(&self) -> f32 {
        self.eps.unwrap_or(1e-5)
    }
}

/// A validated model: topologically ordered layers, their tensors, and the
/// derived per-layer output shapes and activation tap points.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    tensors: BTreeMap<TensorId, Tensor>,
    quantizable: Vec<LayerId>,
    shapes: Vec<Vec<usize>>,
    consumers: Vec<Vec<LayerId>>,
    tap_of: Vec<LayerId>,
}

impl ModelGraph {
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        tensors: BTreeMap<TensorId, Tensor>,
        quantizable: Vec<LayerId>,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Format(format!(
                "input shape must be nonempty with positive dims, got {input_shape:?}"
            )));
        }
        if layers.is_empty() {
            return Err(Error::Format("model has no layers".into()));
        }
        let n = layers.len();
        let mut consumers = vec![Vec::new(); n];
        for (pos, layer) in layers.iter().enumerate() {
            if layer.id != pos {
                return Err(Error::Layer {
                    layer: layer.id,
                    msg: format!("layer ids must be dense and ordered; expected id {pos}"),
                });
            }
            for &src in &layer.inputs {
                if src == layer.id {
                    return Err(Error::Layer {
                        layer: layer.id,
                        msg: "cyclic reference: layer consumes its own output".into(),
                    });
                }
                if src > layer.id {
                    return Err(Error::Layer {
                        layer: layer.id,
                        msg: format!(
                            "topological order violated: input layer {src} does not precede it"
                        ),
                    });
                }
                consumers[src].push(layer.id);
            }
            for &t in &layer.weights {
                if !tensors.contains_key(&t) {
                    return Err(Error::Layer {
                        layer: layer.id,
                        msg: format!("references unknown tensor {t}"),
                    });
                }
            }
        }

        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(n);
        for layer in &layers {
            let in_shapes: Vec<&[usize]> = if layer.inputs.is_empty() {
                vec![&input_shape[..]]
            } else {
                layer.inputs.iter().map(|&i| &shapes[i][..]).collect()
            };
            let out = infer_shape(layer, &in_shapes, &tensors)?;
            if let Some(declared) = &layer.output_shape {
                if declared != &out {
                    return Err(Error::Shape {
                        layer: layer.id,
                        expected: declared.clone(),
                        actual: out,
                    });
                }
            }
            shapes.push(out);
        }

        let sinks: Vec<LayerId> = (0..n).filter(|&i| consumers[i].is_empty()).collect();
        if sinks != [n - 1] {
            return Err(Error::Format(format!(
                "model must have a single output layer (the last); layers without consumers: {sinks:?}"
            )));
        }

        let mut q = quantizable.clone();
        q.sort_unstable();
        q.dedup();
        if q.len() != quantizable.len() {
            return Err(Error::Format("duplicate ids in quantizable list".into()));
        }
        for &id in &q {
            match layers.get(id) {
                Some(l) if l.kind.has_weights() => {}
                Some(_) => {
                    return Err(Error::Layer {
                        layer: id,
                        msg: "listed as quantizable but has no weights".into(),
                    })
                }
                None => {
                    return Err(Error::Format(format!(
                        "quantizable id {id} does not name a layer"
                    )))
                }
            }
        }

        let tap_of = (0..n).map(|i| resolve_tap(i, &layers, &consumers)).collect();

        Ok(ModelGraph {
            input_shape,
            layers,
            tensors,
            quantizable: q,
            shapes,
            consumers,
            tap_of,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: LayerId) -> &LayerSpec {
        &self.layers[id]
    }

    pub fn tensors(&self) -> &BTreeMap<TensorId, Tensor> {
        &self.tensors
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[&id]
    }

    pub fn quantizable(&self) -> &[LayerId] {
        &self.quantizable
    }

    /// Per-sample output shape of a layer.
    pub fn output_shape(&self, id: LayerId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn consumers(&self, id: LayerId) -> &[LayerId] {
        &self.consumers[id]
    }

    pub fn output_layer(&self) -> LayerId {
        self.layers.len() - 1
    }

    /// The layer whose output is observed when `id` is tapped: `id` itself,
    /// or the end of a single-consumer chain of batchnorm layers closed by
    /// a relu/relu6 that directly follows it.
    pub fn tap_point(&self, id: LayerId) -> LayerId {
        self.tap_of[id]
    }

    /// Width of the flattened activation seen at the tap point of `id`.
    pub fn tap_width(&self, id: LayerId) -> usize {
        self.shapes[self.tap_of[id]].iter().product()
    }

    /// Block outputs: add layers, pooling layers and the final
    /// fully-connected layer.
    pub fn block_outputs(&self) -> Vec<LayerId> {
        let last_fc = self
            .layers
            .iter()
            .rev()
            .find(|l| l.kind == LayerKind::FullyConnected)
            .map(|l| l.id);
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::Add || l.kind.is_pool() || Some(l.id) == last_fc)
            .map(|l| l.id)
            .collect()
    }
}

fn resolve_tap(id: LayerId, layers: &[LayerSpec], consumers: &[Vec<LayerId>]) -> LayerId {
    if layers[id].kind.is_activation() {
        return id;
    }
    let mut cur = id;
    loop {
        let [next] = consumers[cur][..] else {
            break;
        };
        let layer = &layers[next];
        if layer.inputs.len() != 1 {
            break;
        }
        match layer.kind {
            LayerKind::Batchnorm => cur = next,
            LayerKind::Relu | LayerKind::Relu6 => return next,
            _ => break,
        }
    }
    // A batchnorm chain without a closing nonlinearity is not followed.
    id
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize, layer: LayerId) -> Result<usize> {
    let padded = size + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return Err(Error::Layer {
            layer,
            msg: format!("window {kernel} (stride {stride}) does not fit extent {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

fn expect_shape(layer: LayerId, actual: &[usize], expected: &[usize]) -> Result<()> {
    if actual != expected {
        return Err(Error::Shape {
            layer,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}

fn infer_shape(
    layer: &LayerSpec,
    inputs: &[&[usize]],
    tensors: &BTreeMap<TensorId, Tensor>,
) -> Result<Vec<usize>> {
    let id = layer.id;
    let err = |msg: String| Error::Layer { layer: id, msg };
    let arity_ok = match layer.kind {
        LayerKind::Add => layer.inputs.len() >= 2,
        _ => layer.inputs.len() <= 1,
    };
    if !arity_ok {
        return Err(err(format!(
            "{:?} cannot take {} inputs",
            layer.kind,
            layer.inputs.len()
        )));
    }
    let x = inputs[0];
    let weight = |i: usize| tensors[&layer.weights[i]].shape();
    let check_weights = |min: usize, max: usize| -> Result<()> {
        let n = layer.weights.len();
        if n < min || n > max {
            return Err(err(format!(
                "{:?} needs {min}..={max} weight tensors, got {n}",
                layer.kind
            )));
        }
        Ok(())
    };
    let check_bias = |channels: usize| -> Result<()> {
        if let Some(&b) = layer.weights.get(1) {
            let shape = tensors[&b].shape();
            if shape != [channels] {
                return Err(Error::Tensor {
                    tensor: b,
                    msg: format!("bias shape {shape:?} does not match {channels} outputs"),
                });
            }
        }
        Ok(())
    };

    match layer.kind {
        LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
            check_weights(1, 2)?;
            let w = weight(0);
            if x.len() != 3 || w.len() != 4 {
                return Err(err(format!(
                    "convolution needs a [C,H,W] input and 4-d kernel, got {x:?} and {w:?}"
                )));
            }
            let (oc, ic) = (w[0], w[1]);
            if layer.kind == LayerKind::Conv2d {
                if ic != x[0] {
                    return Err(Error::Tensor {
                        tensor: layer.weights[0],
                        msg: format!("kernel expects {ic} input channels, input has {}", x[0]),
                    });
                }
            } else if ic != 1 || oc != x[0] {
                return Err(Error::Tensor {
                    tensor: layer.weights[0],
                    msg: format!("depthwise kernel must be [{}, 1, kh, kw], got {w:?}", x[0]),
                });
            }
            check_bias(oc)?;
            let (s, p) = (layer.stride(), layer.padding());
            Ok(vec![
                oc,
                conv_out(x[1], w[2], s, p, id)?,
                conv_out(x[2], w[3], s, p, id)?,
            ])
        }
        LayerKind::FullyConnected => {
            check_weights(1, 2)?;
            let w = weight(0);
            if x.len() != 1 || w.len() != 2 || w[1] != x[0] {
                return Err(Error::Tensor {
                    tensor: layer.weights[0],
                    msg: format!("fully-connected weight {w:?} does not accept input {x:?}"),
                });
            }
            check_bias(w[0])?;
            Ok(vec![w[0]])
        }
        LayerKind::Batchnorm => {
            check_weights(4, 4)?;
            if x.is_empty() {
                return Err(err("batchnorm needs a channel dimension".into()));
            }
            for &t in &layer.weights {
                let shape = tensors[&t].shape();
                if shape != [x[0]] {
                    return Err(Error::Tensor {
                        tensor: t,
                        msg: format!("batchnorm statistic shape {shape:?}, expected [{}]", x[0]),
                    });
                }
            }
            if tensors[&layer.weights[3]].data().iter().any(|&v| v < 0.0) {
                return Err(Error::Tensor {
                    tensor: layer.weights[3],
                    msg: "negative running variance".into(),
                });
            }
            Ok(x.to_vec())
        }
        LayerKind::Relu | LayerKind::Relu6 | LayerKind::Flatten => {
            check_weights(0, 0)?;
            if layer.kind == LayerKind::Flatten {
                Ok(vec![x.iter().product()])
            } else {
                Ok(x.to_vec())
            }
        }
        LayerKind::MaxPool => {
            check_weights(0, 0)?;
            if x.len() != 3 {
                return Err(err(format!("max-pool needs a [C,H,W] input, got {x:?}")));
            }
            let k = layer.kernel.unwrap_or(2);
            let s = layer.stride();
            Ok(vec![x[0], conv_out(x[1], k, s, 0, id)?, conv_out(x[2], k, s, 0, id)?])
        }
        LayerKind::GlobalAvgPool => {
            check_weights(0, 0)?;
            if x.len() != 3 {
                return Err(err(format!(
                    "global-avg-pool needs a [C,H,W] input, got {x:?}"
                )));
            }
            Ok(vec![x[0]])
        }
        LayerKind::Add => {
            check_weights(0, 0)?;
            for other in &inputs[1..] {
                expect_shape(id, other, x)?;
            }
            Ok(x.to_vec())
        }
    }
}
