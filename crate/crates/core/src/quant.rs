//! Uniform fake quantization of weights and activations, per-layer bit
//! configurations, and quantized views over a model graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{run_graph, ForwardOutput, Hooks, LayerId, ModelGraph, Network};
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Rows per forward pass when sweeping a whole dataset.
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BitSet(Vec<u8>);

impl BitSet {
    /// Sorts and validates; duplicates and widths outside 2..=8 are rejected.
    pub fn new(mut bits: Vec<u8>) -> Result<Self> {
        bits.sort_unstable();
        if bits.is_empty() {
            return Err(Error::InvalidArgument("bit set is empty".into()));
        }
        if bits.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!("duplicate bit width in {bits:?}")));
        }
        if let Some(b) = bits.iter().find(|b| !(MIN_BITS..=MAX_BITS).contains(b)) {
            return Err(Error::InvalidArgument(format!(
                "bit width {b} outside [{MIN_BITS}, {MAX_BITS}]"
            )));
        }
        Ok(BitSet(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn contains(&self, b: u8) -> bool {
        self.0.binary_search(&b).is_ok()
    }

    pub fn min(&self) -> u8 {
        self.0[0]
    }

    pub fn max(&self) -> u8 {
        self.0[self.0.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TryFrom<Vec<u8>> for BitSet {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        BitSet::new(v)
    }
}

impl From<BitSet> for Vec<u8> {
    fn from(b: BitSet) -> Self {
        b.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerBits {
    pub weight: u8,
    pub activation: u8,
}

impl LayerBits {
    pub fn new(weight: u8, activation: u8) -> Self {
        LayerBits { weight, activation }
    }

    pub fn uniform(b: u8) -> Self {
        LayerBits::new(b, b)
    }
}

/// Bit widths for every quantizable layer of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitConfig(BTreeMap<LayerId, LayerBits>);

impl BitConfig {
    pub fn new(bits: BTreeMap<LayerId, LayerBits>) -> Self {
        BitConfig(bits)
    }

    pub fn uniform(layers: &[LayerId], b: u8) -> Self {
        BitConfig(layers.iter().map(|&l| (l, LayerBits::uniform(b))).collect())
    }

    pub fn with(mut self, layer: LayerId, bits: LayerBits) -> Self {
        self.0.insert(layer, bits);
        self
    }

    pub fn get(&self, layer: LayerId) -> Option<LayerBits> {
        self.0.get(&layer).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (LayerId, LayerBits)> + '_ {
        self.0.iter().map(|(&l, &b)| (l, b))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks coverage of exactly `layers`, and optionally membership in `bitset`.
    pub fn validate(&self, layers: &[LayerId], bitset: Option<&BitSet>) -> Result<()> {
        let keys: Vec<LayerId> = self.0.keys().copied().collect();
        let mut want = layers.to_vec();
        want.sort_unstable();
        if keys != want {
            return Err(Error::InvalidArgument(format!(
                "bit config covers layers {keys:?}, model quantizes {want:?}"
            )));
        }
        for (l, b) in self.iter() {
            for w in [b.weight, b.activation] {
                let ok = match bitset {
                    Some(set) => set.contains(w),
                    None => (MIN_BITS..=MAX_BITS).contains(&w),
                };
                if !ok {
                    return Err(Error::InvalidArgument(format!(
                        "layer {l}: bit width {w} not allowed"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub bits: u8,
    pub mode: QuantMode,
    /// Inputs are clipped to this interval before quantization.
    pub clip: (f32, f32),
}

fn check_bits(bits: u8) {
    assert!(
        (MIN_BITS..=MAX_BITS).contains(&bits),
        "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
    );
}

impl QuantParams {
    /// Symmetric per-tensor parameters for weights with the given `max|w|`.
    pub fn symmetric(max_abs: f32, bits: u8) -> Self {
        check_bits(bits);
        let qmax = ((1i32 << (bits - 1)) - 1) as f32;
        let scale = if max_abs == 0.0 { 1.0 } else { max_abs / qmax };
        QuantParams {
            scale,
            zero_point: 0,
            bits,
            mode: QuantMode::Symmetric,
            clip: (-max_abs, max_abs),
        }
    }

    /// Asymmetric parameters over a calibrated range. The grid is laid over
    /// the range widened to contain zero, so zero stays exactly representable.
    pub fn asymmetric(min: f32, max: f32, bits: u8) -> Self {
        check_bits(bits);
        assert!(min <= max, "activation range ({min}, {max}) is inverted");
        let levels = ((1u32 << bits) - 1) as f32;
        if min == max {
            return QuantParams {
                scale: 1.0,
                zero_point: 0,
                bits,
                mode: QuantMode::Asymmetric,
                clip: (min, max),
            };
        }
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        let scale = (hi - lo) / levels;
        let zero_point = (-lo / scale).round_ties_even().clamp(0.0, levels) as i32;
        QuantParams {
            scale,
            zero_point,
            bits,
            mode: QuantMode::Asymmetric,
            clip: (min, max),
        }
    }

    pub fn qmin(&self) -> i32 {
        match self.mode {
            QuantMode::Symmetric => -((1i32 << (self.bits - 1)) - 1),
            QuantMode::Asymmetric => 0,
        }
    }

    pub fn qmax(&self) -> i32 {
        match self.mode {
            QuantMode::Symmetric => (1i32 << (self.bits - 1)) - 1,
            QuantMode::Asymmetric => (1i32 << self.bits) - 1,
        }
    }

    /// Quantize then dequantize one value.
    pub fn apply(&self, x: f32) -> f32 {
        let (lo, hi) = self.clip;
        if lo == hi {
            return lo;
        }
        let (qmin, qmax) = (self.qmin() as f32, self.qmax() as f32);
        let zp = self.zero_point as f32;
        let x = x.clamp(lo, hi);
        let q = ((x / self.scale).round_ties_even() + zp).clamp(qmin, qmax);
        let y = (q - zp) * self.scale;
        match self.mode {
            // qmax·scale may land one ulp beyond max|w|.
            QuantMode::Symmetric => y.clamp(lo, hi),
            QuantMode::Asymmetric => y,
        }
    }

    pub fn apply_slice(&self, values: &mut [f32]) {
        for v in values {
            *v = self.apply(*v);
        }
    }
}

pub fn quantize_weights(t: &Tensor, bits: u8) -> Tensor {
    let p = QuantParams::symmetric(t.max_abs(), bits);
    let mut out = t.clone();
    p.apply_slice(out.data_mut());
    out
}

pub fn fake_quant_activation(t: &Tensor, bits: u8, range: (f32, f32)) -> Tensor {
    let p = QuantParams::asymmetric(range.0, range.1, bits);
    let mut out = t.clone();
    p.apply_slice(out.data_mut());
    out
}

/// Calibrated `(min, max)` of float activations at every layer's tap point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActRangeTable(BTreeMap<LayerId, (f32, f32)>);

impl ActRangeTable {
    pub fn new(ranges: BTreeMap<LayerId, (f32, f32)>) -> Result<Self> {
        for (&l, &(lo, hi)) in &ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidArgument(format!(
                    "layer {l}: invalid range ({lo}, {hi})"
                )));
            }
        }
        Ok(ActRangeTable(ranges))
    }

    pub fn get(&self, layer: LayerId) -> Option<(f32, f32)> {
        self.0.get(&layer).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (LayerId, (f32, f32))> + '_ {
        self.0.iter().map(|(&l, &r)| (l, r))
    }
}

fn row_chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n.div_ceil(CHUNK)).map(move |c| (c * CHUNK..((c + 1) * CHUNK).min(n)).collect())
}

/// Runs `net` over `inputs` in row chunks, merging the outputs.
pub fn forward_batched(net: &(impl Network + ?Sized), inputs: &Tensor, taps: &[LayerId]) -> Result<ForwardOutput> {
    if inputs.rows() <= CHUNK {
        return net.forward(inputs, taps);
    }
    let mut logits = Vec::new();
    let mut tapped: BTreeMap<LayerId, Vec<f32>> = BTreeMap::new();
    let mut shapes: BTreeMap<LayerId, Vec<usize>> = BTreeMap::new();
    let mut logit_shape = Vec::new();
    for rows in row_chunks(inputs.rows()) {
        let out = net.forward(&inputs.select_rows(&rows), taps)?;
        logit_shape = out.logits.shape().to_vec();
        logits.extend_from_slice(out.logits.data());
        for (l, t) in out.taps {
            tapped.entry(l).or_default().extend_from_slice(t.data());
            shapes.insert(l, t.shape().to_vec());
        }
    }
    let n = inputs.rows();
    let rebatch = |mut shape: Vec<usize>, data: Vec<f32>| {
        shape[0] = n;
        Tensor::from_parts(shape, data)
    };
    Ok(ForwardOutput {
        logits: rebatch(logit_shape, logits),
        taps: tapped
            .into_iter()
            .map(|(l, d)| (l, rebatch(shapes.remove(&l).expect("shape recorded"), d)))
            .collect(),
    })
}

pub fn calibrate_activation_ranges(model: &ModelGraph, inputs: &Tensor) -> Result<ActRangeTable> {
    if inputs.rows() == 0 || inputs.is_empty() {
        return Err(Error::InvalidArgument("calibration subset is empty".into()));
    }
    let all: Vec<LayerId> = (0..model.layers().len()).collect();
    let mut ranges: BTreeMap<LayerId, (f32, f32)> = BTreeMap::new();
    for rows in row_chunks(inputs.rows()) {
        let out = model.forward(&inputs.select_rows(&rows), &all)?;
        for (l, t) in out.taps {
            let (lo, hi) = t.min_max();
            let e = ranges.entry(l).or_insert((lo, hi));
            *e = (e.0.min(lo), e.1.max(hi));
        }
    }
    ActRangeTable::new(ranges)
}

/// A model whose quantizable layers run with fake-quantized weights and
/// activations. The underlying graph is shared, never modified.
#[derive(Debug, Clone)]
pub struct QuantizedView<'a> {
    model: &'a ModelGraph,
    weights: BTreeMap<LayerId, Tensor>,
    activations: BTreeMap<LayerId, QuantParams>,
}

impl<'a> QuantizedView<'a> {
    pub fn model(&self) -> &'a ModelGraph {
        self.model
    }
}

impl Hooks for QuantizedView<'_> {
    fn weight(&self, layer: LayerId) -> Option<&Tensor> {
        self.weights.get(&layer)
    }

    fn post(&self, layer: LayerId, out: &mut [f32]) {
        if let Some(p) = self.activations.get(&layer) {
            p.apply_slice(out);
        }
    }
}

impl Network for QuantizedView<'_> {
    fn graph(&self) -> &ModelGraph {
        self.model
    }

    fn forward(&self, batch: &Tensor, taps: &[LayerId]) -> Result<ForwardOutput> {
        run_graph(self.model, batch, taps, self)
    }
}

/// Weights of each quantizable layer are quantized to `b_w`; the activation
/// at its tap point passes through an asymmetric quantizer at `b_a`.
pub fn apply_config<'a>(
    model: &'a ModelGraph,
    config: &BitConfig,
    ranges: &ActRangeTable,
) -> Result<QuantizedView<'a>> {
    config.validate(model.quantizable(), None)?;
    let mut weights = BTreeMap::new();
    let mut activations = BTreeMap::new();
    for (l, bits) in config.iter() {
        let w = model.tensor(model.layer(l).weights[0]);
        weights.insert(l, quantize_weights(w, bits.weight));
        let tap = model.tap_point(l);
        let (lo, hi) = ranges.get(tap).ok_or_else(|| Error::Layer {
            layer: l,
            msg: format!("no calibrated activation range for tap point {tap}"),
        })?;
        activations.insert(tap, QuantParams::asymmetric(lo, hi, bits.activation));
    }
    Ok(QuantizedView {
        model,
        weights,
        activations,
    })
}

/// Row-wise argmax; ties go to the lowest index.
pub fn predictions(logits: &Tensor) -> Vec<u32> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// Top-1 accuracy of any network on a dataset.
pub fn accuracy(net: &(impl Network + ?Sized), dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let logits = forward_batched(net, dataset.inputs(), &[])?.logits;
    let hits = predictions(&logits)
        .iter()
        .zip(dataset.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

pub fn evaluate_accuracy(
    model: &ModelGraph,
    config: &BitConfig,
    ranges: &ActRangeTable,
    dataset: &Dataset,
) -> Result<f64> {
    accuracy(&apply_config(model, config, ranges)?, dataset)
}
