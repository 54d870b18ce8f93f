use std::collections::BTreeMap;

use super::{LayerId, LayerKind, ModelGraph};

/// Parameter count per layer: the sum of all tensor sizes a layer owns.
pub fn count_params(model: &ModelGraph) -> BTreeMap<LayerId, u64> {
    model
        .layers()
        .iter()
        .map(|l| {
            let n: usize = l.weights.iter().map(|&t| model.tensor(t).len()).sum();
            (l.id, n as u64)
        })
        .collect()
}

/// Multiply-accumulate count per layer for one sample. Only convolutions
/// and fully-connected layers contribute; counts depend on shapes alone.
pub fn count_macs(model: &ModelGraph) -> BTreeMap<LayerId, u64> {
    model
        .layers()
        .iter()
        .map(|l| {
            let macs = match l.kind {
                LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
                    let w = model.tensor(l.weights[0]).shape();
                    let out = model.output_shape(l.id);
                    // w[1] is 1 for depthwise, giving the per-channel kernel volume.
                    (out[1] * out[2] * w[1] * w[2] * w[3] * out[0]) as u64
                }
                LayerKind::FullyConnected => {
                    let w = model.tensor(l.weights[0]).shape();
                    (w[0] * w[1]) as u64
                }
                _ => 0,
            };
            (l.id, macs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;
    use crate::tensor::Tensor;

    #[test]
    fn fc_10_to_5_with_bias() {
        let mut tensors = BTreeMap::new();
        tensors.insert(0, Tensor::zeros(vec![5, 10]));
        tensors.insert(1, Tensor::zeros(vec![5]));
        let layers = vec![LayerSpec::new(0, LayerKind::FullyConnected, vec![]).with_weights(vec![0, 1])];
        let g = ModelGraph::new(vec![10], layers, tensors, vec![0]).unwrap();
        assert_eq!(count_params(&g)[&0], 55);
        assert_eq!(count_macs(&g)[&0], 50);
    }

    #[test]
    fn conv_3x3_single_channel_8x8_output() {
        let mut tensors = BTreeMap::new();
        tensors.insert(0, Tensor::zeros(vec![1, 1, 3, 3]));
        tensors.insert(1, Tensor::zeros(vec![1]));
        let layers = vec![
            LayerSpec::new(0, LayerKind::Conv2d, vec![]).with_weights(vec![0, 1]).with_padding(1),
            LayerSpec::new(1, LayerKind::MaxPool, vec![0]).with_kernel(2),
        ];
        let g = ModelGraph::new(vec![1, 8, 8], layers, tensors, vec![0]).unwrap();
        assert_eq!(g.output_shape(0), &[1, 8, 8]);
        assert_eq!(count_params(&g)[&0], 10);
        assert_eq!(count_macs(&g)[&0], 576);
        assert_eq!(count_params(&g)[&1], 0);
        assert_eq!(count_macs(&g)[&1], 0);
    }

    #[test]
    fn depthwise_uses_per_channel_volume() {
        let mut tensors = BTreeMap::new();
        tensors.insert(0, Tensor::zeros(vec![4, 1, 3, 3]));
        let layers = vec![LayerSpec::new(0, LayerKind::DepthwiseConv2d, vec![])
            .with_weights(vec![0])
            .with_padding(1)];
        let g = ModelGraph::new(vec![4, 5, 5], layers, tensors, vec![0]).unwrap();
        assert_eq!(count_macs(&g)[&0], 25 * 9 * 4);
    }
}
