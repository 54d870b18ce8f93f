//! Model container and sample-file formats.
//!
//! A model is a UTF-8 JSON manifest plus a blob of little-endian f32 values,
//! tensors concatenated in manifest order. The manifest either references a
//! separate blob file (`"blob": "name.bin"`) or is packed into one file as
//! `MAGIC | u64 LE manifest length | manifest | blob`.
//!
//! Datasets and embedding files use a JSON sidecar giving the shape plus an
//! f32 blob of inputs and, for datasets, a u32 blob of labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LayerSpec, ModelGraph, TensorId};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::info::SampleMatrix;
use crate::tensor::Tensor;

const MODEL_FORMAT: &str = "infoq-model";
const SAMPLES_FORMAT: &str = "infoq-samples";
const FORMAT_VERSION: u32 = 1;
const PACKED_MAGIC: &[u8; 8] = b"INFQMDL1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    input_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blob: Option<String>,
    tensors: Vec<TensorEntry>,
    layers: Vec<LayerSpec>,
    quantizable: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    id: TensorId,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleSidecar {
    format: String,
    version: u32,
    shape: Vec<usize>,
    inputs: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_count: Option<usize>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn f32s_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn f32s_to_le(values: &[f32], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (manifest_bytes, blob): (&[u8], Vec<u8>) = if bytes.starts_with(PACKED_MAGIC) {
        if bytes.len() < 16 {
            return Err(Error::Format("packed container truncated before header".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format(format!("manifest length {len} exceeds file size")))?;
        (&bytes[16..end], bytes[end..].to_vec())
    } else {
        (&bytes[..], Vec::new())
    };
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.format != MODEL_FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "expected {MODEL_FORMAT} v{FORMAT_VERSION}, found {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob = match (&manifest.blob, bytes.starts_with(PACKED_MAGIC)) {
        (Some(name), false) => read(&sibling(path, name))?,
        (None, true) => blob,
        (Some(_), true) => {
            return Err(Error::Format("packed container must not reference a blob file".into()))
        }
        (None, false) => return Err(Error::Format("manifest names no blob file".into())),
    };

    let mut tensors = BTreeMap::new();
    let mut expected_offset = 0u64;
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(Error::Tensor {
                tensor: entry.id,
                msg: format!(
                    "offset {} breaks manifest-order concatenation (expected {expected_offset})",
                    entry.offset
                ),
            });
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * count;
        if end > blob.len() {
            return Err(Error::Tensor {
                tensor: entry.id,
                msg: format!("bytes {start}..{end} exceed blob of {} bytes", blob.len()),
            });
        }
        let tensor = Tensor::new(entry.shape.clone(), f32s_from_le(&blob[start..end]))
            .map_err(|e| Error::Tensor {
                tensor: entry.id,
                msg: e.to_string(),
            })?;
        if tensors.insert(entry.id, tensor).is_some() {
            return Err(Error::Tensor {
                tensor: entry.id,
                msg: "duplicate tensor id".into(),
            });
        }
        expected_offset = end as u64;
    }
    if expected_offset as usize != blob.len() {
        return Err(Error::Format(format!(
            "blob holds {} bytes but manifest accounts for {expected_offset}",
            blob.len()
        )));
    }
    ModelGraph::new(manifest.input_shape, manifest.layers, tensors, manifest.quantizable)
}

fn manifest_and_blob(model: &ModelGraph, blob_name: Option<String>) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (&id, t) in model.tensors() {
        entries.push(TensorEntry {
            id,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        f32s_to_le(t.data(), &mut blob);
    }
    let layers = model.layers().to_vec();
    let manifest = Manifest {
        format: MODEL_FORMAT.into(),
        version: FORMAT_VERSION,
        input_shape: model.input_shape().to_vec(),
        blob: blob_name,
        tensors: entries,
        layers,
        quantizable: model.quantizable().to_vec(),
    };
    (manifest, blob)
}

/// Writes `path` (JSON manifest) and a sibling `<stem>.bin` blob.
pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let blob_name = format!("{}.bin", stem(path));
    let (manifest, blob) = manifest_and_blob(model, Some(blob_name.clone()));
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write(path, &json)?;
    write(&sibling(path, &blob_name), &blob)
}

/// Writes a single self-contained container file.
pub fn save_model_packed(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let (manifest, blob) = manifest_and_blob(model, None);
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut bytes = Vec::with_capacity(16 + json.len() + blob.len());
    bytes.extend_from_slice(PACKED_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&blob);
    write(path.as_ref(), &bytes)
}

fn load_sidecar(path: &Path) -> Result<(SampleSidecar, Tensor)> {
    let sidecar: SampleSidecar = serde_json::from_slice(&read(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if sidecar.format != SAMPLES_FORMAT || sidecar.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "expected {SAMPLES_FORMAT} v{FORMAT_VERSION}, found {} v{}",
            sidecar.format, sidecar.version
        )));
    }
    let bytes = read(&sibling(path, &sidecar.inputs))?;
    let count: usize = sidecar.shape.iter().product();
    if bytes.len() != 4 * count {
        return Err(Error::Format(format!(
            "input blob has {} bytes, shape {:?} needs {}",
            bytes.len(),
            sidecar.shape,
            4 * count
        )));
    }
    let inputs = Tensor::new(sidecar.shape.clone(), f32s_from_le(&bytes))?;
    Ok((sidecar, inputs))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let (sidecar, inputs) = load_sidecar(path)?;
    let (Some(labels_name), Some(class_count)) = (&sidecar.labels, sidecar.class_count) else {
        return Err(Error::Format(format!(
            "{}: dataset sidecar needs labels and class_count",
            path.display()
        )));
    };
    let bytes = read(&sibling(path, labels_name))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("label blob length is not a multiple of 4".into()));
    }
    let labels = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Dataset::new(inputs, labels, class_count)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = stem(path);
    let inputs_name = format!("{s}.inputs.bin");
    let labels_name = format!("{s}.labels.bin");
    let sidecar = SampleSidecar {
        format: SAMPLES_FORMAT.into(),
        version: FORMAT_VERSION,
        shape: dataset.inputs().shape().to_vec(),
        inputs: inputs_name.clone(),
        labels: Some(labels_name.clone()),
        class_count: Some(dataset.class_count()),
    };
    let mut blob = Vec::new();
    f32s_to_le(dataset.inputs().data(), &mut blob);
    write(&sibling(path, &inputs_name), &blob)?;
    let labels: Vec<u8> = dataset.labels().iter().flat_map(|l| l.to_le_bytes()).collect();
    write(&sibling(path, &labels_name), &labels)?;
    write(path, &serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"))
}

/// Loads an unlabeled sample file (e.g. precomputed embeddings) as an
/// `N × d` matrix, flattening trailing dimensions.
pub fn load_samples(path: impl AsRef<Path>) -> Result<SampleMatrix> {
    let (_, inputs) = load_sidecar(path.as_ref())?;
    SampleMatrix::from_tensor(&inputs)
}

pub fn save_samples(samples: &SampleMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let inputs_name = format!("{}.inputs.bin", stem(path));
    let sidecar = SampleSidecar {
        format: SAMPLES_FORMAT.into(),
        version: FORMAT_VERSION,
        shape: vec![samples.rows(), samples.cols()],
        inputs: inputs_name.clone(),
        labels: None,
        class_count: None,
    };
    let mut blob = Vec::new();
    f32s_to_le(samples.values(), &mut blob);
    write(&sibling(path, &inputs_name), &blob)?;
    write(path, &serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKind;

    fn tiny() -> ModelGraph {
        let mut tensors = BTreeMap::new();
        tensors.insert(0, Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        tensors.insert(1, Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        let layers = vec![LayerSpec::new(0, LayerKind::FullyConnected, vec![]).with_weights(vec![0, 1])];
        ModelGraph::new(vec![2], layers, tensors, vec![0]).unwrap()
    }

    #[test]
    fn both_container_layouts_load() {
        let dir = tempfile::tempdir().unwrap();
        let g = tiny();
        save_model(&g, dir.path().join("m.json")).unwrap();
        save_model_packed(&g, dir.path().join("m.infoq")).unwrap();
        assert_eq!(load_model(dir.path().join("m.json")).unwrap(), g);
        assert_eq!(load_model(dir.path().join("m.infoq")).unwrap(), g);
    }

    #[test]
    fn truncated_blob_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&tiny(), &path).unwrap();
        let blob = dir.path().join("m.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Tensor { tensor: 1, .. }), "{err}");
    }

    #[test]
    fn malformed_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(&path, b"{ not json").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));
        fs::write(&path, br#"{"format":"other","version":1}"#).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = Tensor::new(vec![3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let ds = Dataset::new(inputs, vec![0, 2, 1], 3).unwrap();
        let path = dir.path().join("d.json");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        let samples = load_samples(&path).unwrap();
        assert_eq!(samples.rows(), 3);
        assert_eq!(samples.cols(), 2);
    }
}
