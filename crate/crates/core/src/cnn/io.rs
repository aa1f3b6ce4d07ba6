//! Weight file format `AMFCW1`: 6-byte magic, u32 LE header length, UTF-8
//! JSON header (architecture, array manifest with shapes and byte offsets,
//! training meta), then the raw little-endian f64 arrays in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureSpec, TrainedModel, TrainingMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::fnv1a64;

pub(crate) const MAGIC: &[u8; 6] = b"AMFCW1";

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    spec: ArchitectureSpec,
    arrays: Vec<ArrayEntry>,
    meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
    len: u64,
}

/// The model's arrays in canonical manifest order.
fn array_list(model: &TrainedModel) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out = Vec::new();
    for (l, (w, b)) in model.conv_weights.iter().zip(&model.conv_bias).enumerate() {
        out.push((format!("conv{l}.weight"), w.shape().to_vec(), w.data()));
        out.push((format!("conv{l}.bias"), vec![b.len()], b.as_slice()));
    }
    for (j, (w, b)) in model.fc_weights.iter().zip(&model.fc_bias).enumerate() {
        out.push((format!("fc{j}.weight"), w.shape().to_vec(), w.data()));
        out.push((format!("fc{j}.bias"), vec![b.len()], b.as_slice()));
    }
    out
}

pub(crate) fn write_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Serialize a model to its byte representation.
pub fn model_to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, data) in array_list(model) {
        arrays.push(ArrayEntry {
            name,
            shape,
            byte_offset: payload.len() as u64,
            len: data.len() as u64,
        });
        write_f64s(&mut payload, data);
    }
    let header = serde_json::to_vec(&WeightsHeader {
        spec: model.spec.clone(),
        arrays,
        meta: model.meta.clone(),
    })
    .map_err(|e| Error::Format(format!("header encode: {e}")))?;

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse a model from its byte representation.
pub fn model_from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let (header, payload) = split_container(bytes, MAGIC, "weights")?;
    let header: WeightsHeader = serde_json::from_slice(header)
        .map_err(|e| Error::Format(format!("weights header: {e}")))?;

    let mut offset = 0u64;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let expect: usize = entry.shape.iter().product();
        if expect as u64 != entry.len {
            return Err(Error::Format(format!(
                "array {:?}: declared length {} does not match shape {:?}",
                entry.name, entry.len, entry.shape
            )));
        }
        if entry.byte_offset != offset {
            return Err(Error::Format(format!(
                "array {:?}: unexpected byte offset {} (expected {offset})",
                entry.name, entry.byte_offset
            )));
        }
        let nbytes = entry.len as usize * 8;
        let slice = payload
            .get(offset as usize..offset as usize + nbytes)
            .ok_or_else(|| Error::Format(format!("array {:?}: payload truncated", entry.name)))?;
        arrays.push(read_f64s(slice));
        offset += nbytes as u64;
    }
    if offset as usize != payload.len() {
        return Err(Error::Format(format!(
            "trailing payload bytes: expected {}, file has {}",
            offset,
            payload.len()
        )));
    }

    let spec = header.spec;
    let n_conv = spec.conv_layers.len();
    let n_fc = spec.fc_layers.len();
    if header.arrays.len() != 2 * (n_conv + n_fc) {
        return Err(Error::Format(format!(
            "expected {} arrays for the declared spec, found {}",
            2 * (n_conv + n_fc),
            header.arrays.len()
        )));
    }
    let mut iter = header.arrays.iter().zip(arrays);
    let mut take = |want_name: String| -> Result<(Vec<usize>, Vec<f64>)> {
        let (entry, data) = iter.next().expect("count checked above");
        if entry.name != want_name {
            return Err(Error::Format(format!(
                "expected array {want_name:?}, found {:?}",
                entry.name
            )));
        }
        Ok((entry.shape.clone(), data))
    };

    let mut conv_weights = Vec::new();
    let mut conv_bias = Vec::new();
    for l in 0..n_conv {
        let (shape, data) = take(format!("conv{l}.weight"))?;
        conv_weights.push(Tensor::new(shape, data)?);
        let (_, bias) = take(format!("conv{l}.bias"))?;
        conv_bias.push(bias);
    }
    let mut fc_weights = Vec::new();
    let mut fc_bias = Vec::new();
    for j in 0..n_fc {
        let (shape, data) = take(format!("fc{j}.weight"))?;
        fc_weights.push(Tensor::new(shape, data)?);
        let (_, bias) = take(format!("fc{j}.bias"))?;
        fc_bias.push(bias);
    }

    let model = TrainedModel {
        spec,
        conv_weights,
        conv_bias,
        fc_weights,
        fc_bias,
        meta: header.meta,
    };
    model
        .validate()
        .map_err(|e| Error::Format(format!("loaded model invalid: {e}")))?;
    Ok(model)
}

/// Strip magic + header-length framing, returning (header, payload).
pub(crate) fn split_container<'a>(
    bytes: &'a [u8],
    magic: &[u8; 6],
    what: &str,
) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < magic.len() + 4 || &bytes[..magic.len()] != magic {
        return Err(Error::Format(format!("not a {what} file (bad magic)")));
    }
    let header_len =
        u32::from_le_bytes(bytes[magic.len()..magic.len() + 4].try_into().unwrap()) as usize;
    let header_start = magic.len() + 4;
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Format(format!("{what} header truncated")));
    }
    Ok((&bytes[header_start..payload_start], &bytes[payload_start..]))
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

impl TrainedModel {
    /// FNV-1a hash of the weight payload in canonical order; identifies the
    /// model in bank provenance records.
    pub fn weights_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for (_, _, data) in array_list(self) {
            write_f64s(&mut bytes, data);
        }
        fnv1a64(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::ConvLayerSpec;

    fn model() -> TrainedModel {
        let spec = ArchitectureSpec {
            input_h: 8,
            conv_layers: vec![
                ConvLayerSpec {
                    out_channels: 3,
                    kernel: 3,
                    pool_after: true,
                },
                ConvLayerSpec {
                    out_channels: 2,
                    kernel: 1,
                    pool_after: false,
                },
            ],
            fc_layers: vec![6, 2],
        };
        TrainedModel::init(spec, 77).unwrap()
    }

    #[test]
    fn round_trip_is_field_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.amfcw");
        let m = model();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(m, back);
        // Byte-identical re-serialization.
        assert_eq!(model_to_bytes(&m).unwrap(), model_to_bytes(&back).unwrap());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = model_to_bytes(&model()).unwrap();
        bytes[0] = b'X';
        match model_from_bytes(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = model_to_bytes(&model()).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(model_from_bytes(cut), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_declared_length_names_the_array() {
        let m = model();
        let bytes = model_to_bytes(&m).unwrap();
        // Tamper with the header: change conv0.weight's declared len.
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
        let tampered = header.replacen("\"len\":27", "\"len\":28", 1);
        assert_ne!(header, tampered, "expected conv0.weight len 27 in header");
        let mut out = bytes[..6].to_vec();
        out.extend_from_slice(&(tampered.len() as u32).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[10 + header_len..]);
        match model_from_bytes(&out) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("conv0.weight"), "{msg}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn hash_tracks_weight_changes() {
        let m = model();
        let mut m2 = m.clone();
        let h1 = m.weights_hash();
        assert_eq!(h1, m2.weights_hash());
        m2.fc_bias[0][0] += 1.0;
        assert_ne!(h1, m2.weights_hash());
    }
}
