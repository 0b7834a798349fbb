//! `.fma` archives: one file holding named tensors plus JSON metadata.
//!
//! Layout, all little-endian:
//!
//! ```text
//! [u64 manifest length][manifest: UTF-8 JSON][payload bytes]
//! ```
//!
//! The manifest is `{"entries": {name: {dtype, shape, byte_offset,
//! byte_length}}, "metadata": {...}}`. Offsets are relative to the start of
//! the payload. Entries are written in name order, back to back. Network
//! archives carry the layer list in `metadata`, so a single file describes a
//! runnable network.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::LabeledDataset;
use crate::netcore::{LayerSpec, NetworkGraph};
use crate::tensor::{Precision, Tensor};

pub const FORMAT_VERSION: &str = "fma-1";

const MANIFEST: &str = "<manifest>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryInfo {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub entries: BTreeMap<String, EntryInfo>,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub format_version: String,
    #[serde(flatten)]
    pub content: Content,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Content {
    Network {
        input_shape: Vec<usize>,
        precision: Precision,
        layers: Vec<LayerSpec>,
    },
    Dataset {
        num_classes: usize,
    },
}

/// Typed entry values.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl ArrayData {
    fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::I64(_) => DType::I64,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => ArrayData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::I64 => ArrayData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        }
    }

    fn into_f64(self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.into_iter().map(f64::from).collect(),
            ArrayData::F64(v) => v,
            ArrayData::I64(v) => v.into_iter().map(|x| x as f64).collect(),
        }
    }
}

/// A decoded archive.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub metadata: Metadata,
    pub entries: BTreeMap<String, (Vec<usize>, ArrayData)>,
}

/// Serialize entries and metadata into the container layout.
pub fn encode(metadata: &Metadata, entries: &BTreeMap<String, (Vec<usize>, ArrayData)>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut infos = BTreeMap::new();
    for (name, (shape, data)) in entries {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::format(name, "shape does not match value count"));
        }
        let offset = payload.len() as u64;
        data.write_le(&mut payload);
        infos.insert(
            name.clone(),
            EntryInfo {
                dtype: data.dtype(),
                shape: shape.clone(),
                byte_offset: offset,
                byte_length: payload.len() as u64 - offset,
            },
        );
    }
    let manifest = ArchiveManifest {
        entries: infos,
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::format(MANIFEST, e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse and validate the manifest, returning it with the payload slice.
pub fn decode_manifest(bytes: &[u8]) -> Result<(ArchiveManifest, &[u8])> {
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::format(MANIFEST, "file shorter than the length header"))?;
    let len = u64::from_le_bytes(header);
    let rest = &bytes[8..];
    if len > rest.len() as u64 {
        return Err(Error::format(MANIFEST, format!("declares {len} bytes, {} available", rest.len())));
    }
    let (json, payload) = rest.split_at(len as usize);
    let manifest: ArchiveManifest =
        serde_json::from_slice(json).map_err(|e| Error::format(MANIFEST, e.to_string()))?;
    if manifest.metadata.format_version != FORMAT_VERSION {
        return Err(Error::format(
            MANIFEST,
            format!(
                "format version `{}`, expected `{FORMAT_VERSION}`",
                manifest.metadata.format_version
            ),
        ));
    }

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.entries.len());
    for (name, info) in &manifest.entries {
        let numel = info
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::format(name, "shape overflows"))?;
        if numel.checked_mul(info.dtype.size() as u64) != Some(info.byte_length) {
            return Err(Error::format(
                name,
                format!(
                    "shape {:?} of {:?} needs {} bytes, manifest says {}",
                    info.shape,
                    info.dtype,
                    numel.saturating_mul(info.dtype.size() as u64),
                    info.byte_length
                ),
            ));
        }
        let end = info
            .byte_offset
            .checked_add(info.byte_length)
            .ok_or_else(|| Error::format(name, "offset overflows"))?;
        if end > payload.len() as u64 {
            return Err(Error::format(
                name,
                format!("ends at byte {end}, payload is truncated at {}", payload.len()),
            ));
        }
        spans.push((info.byte_offset, end, name));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        let ((_, end_a, a), (start_b, _, b)) = (pair[0], pair[1]);
        if start_b < end_a {
            return Err(Error::format(b, format!("overlaps entry `{a}`")));
        }
    }
    Ok((manifest, payload))
}

pub fn decode(bytes: &[u8]) -> Result<Archive> {
    let (manifest, payload) = decode_manifest(bytes)?;
    let entries = manifest
        .entries
        .into_iter()
        .map(|(name, info)| {
            let start = info.byte_offset as usize;
            let raw = &payload[start..start + info.byte_length as usize];
            (name, (info.shape, ArrayData::read_le(info.dtype, raw)))
        })
        .collect();
    Ok(Archive {
        metadata: manifest.metadata,
        entries,
    })
}

pub fn encode_network(net: &NetworkGraph) -> Result<Vec<u8>> {
    let metadata = Metadata {
        format_version: FORMAT_VERSION.into(),
        content: Content::Network {
            input_shape: net.input_shape().to_vec(),
            precision: net.precision(),
            layers: net.layers().to_vec(),
        },
    };
    let entries = net
        .weights()
        .iter()
        .map(|(name, t)| {
            let data = match net.precision() {
                Precision::F32 => ArrayData::F32(t.data().iter().map(|&v| v as f32).collect()),
                Precision::F64 => ArrayData::F64(t.data().to_vec()),
            };
            (name.clone(), (t.shape().to_vec(), data))
        })
        .collect();
    encode(&metadata, &entries)
}

pub fn decode_network(bytes: &[u8]) -> Result<NetworkGraph> {
    let archive = decode(bytes)?;
    let Content::Network {
        input_shape,
        precision,
        layers,
    } = archive.metadata.content
    else {
        return Err(Error::format(MANIFEST, "archive holds a dataset, not a network"));
    };
    let expected = match precision {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    };
    let mut weights = BTreeMap::new();
    for (name, (shape, data)) in archive.entries {
        if data.dtype() != expected {
            return Err(Error::format(
                &name,
                format!("dtype {:?} in a {precision:?} network", data.dtype()),
            ));
        }
        weights.insert(name, Tensor::new(shape, data.into_f64())?);
    }
    NetworkGraph::new(input_shape, layers, weights, precision)
}

pub fn save_network(net: &NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_network(net)?)?;
    Ok(())
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    decode_network(&fs::read(path)?)
}

pub fn encode_dataset(dataset: &LabeledDataset) -> Result<Vec<u8>> {
    let metadata = Metadata {
        format_version: FORMAT_VERSION.into(),
        content: Content::Dataset {
            num_classes: dataset.num_classes(),
        },
    };
    let inputs = dataset.inputs();
    let mut entries = BTreeMap::new();
    entries.insert(
        "inputs".to_string(),
        (
            inputs.shape().to_vec(),
            ArrayData::F32(inputs.data().iter().map(|&v| v as f32).collect()),
        ),
    );
    entries.insert(
        "labels".to_string(),
        (
            vec![dataset.len()],
            ArrayData::I64(dataset.labels().iter().map(|&l| l as i64).collect()),
        ),
    );
    encode(&metadata, &entries)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut archive = decode(bytes)?;
    let Content::Dataset { num_classes } = archive.metadata.content else {
        return Err(Error::format(MANIFEST, "archive holds a network, not a dataset"));
    };
    let (shape, inputs) = archive
        .entries
        .remove("inputs")
        .ok_or_else(|| Error::format("inputs", "missing required entry"))?;
    let (label_shape, labels) = archive
        .entries
        .remove("labels")
        .ok_or_else(|| Error::format("labels", "missing required entry"))?;
    let ArrayData::F32(inputs) = inputs else {
        return Err(Error::format("inputs", "expected f32 values"));
    };
    let ArrayData::I64(labels) = labels else {
        return Err(Error::format("labels", "expected i64 values"));
    };
    if label_shape.len() != 1 {
        return Err(Error::format("labels", format!("expected a 1-D shape, got {label_shape:?}")));
    }
    let labels = labels
        .into_iter()
        .map(|l| {
            usize::try_from(l)
                .ok()
                .filter(|&l| l < num_classes)
                .ok_or_else(|| Error::Validation(format!("label {l} outside [0, {num_classes})")))
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs = Tensor::new(shape, inputs.into_iter().map(f64::from).collect())?;
    LabeledDataset::new(inputs, labels, num_classes)
}

pub fn save_dataset(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(dataset)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    decode_dataset(&fs::read(path)?)
}
