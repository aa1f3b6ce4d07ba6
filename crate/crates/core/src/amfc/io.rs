//! AMFC model file format `AMFCM1`: 6-byte magic, u32 LE header length, JSON
//! header (head kind + dims, preprocessing side, bank reference), then the
//! head's f64 LE arrays. The bank is either embedded inline (length-prefixed
//! `AMFCB1` block before the arrays) or referenced by path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AmfcModel, ClassifierHead, GaussianNbHead, KnnHead, MlpHead};
use crate::cnn::io::{read_f64s, split_container, write_f64s};
use crate::error::{Error, Result};
use crate::featurespace::{bank_from_bytes, bank_to_bytes, load_bank};
use crate::tensor::Tensor;

pub(crate) const MAGIC: &[u8; 6] = b"AMFCM1";

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    head: HeadMeta,
    input_h: usize,
    bank: BankRef,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HeadMeta {
    Mlp {
        sizes: Vec<usize>,
    },
    Knn {
        k: usize,
        count: usize,
        dim: usize,
        classes: usize,
    },
    GaussianNb {
        classes: usize,
        dim: usize,
        var_floor: f64,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "storage", rename_all = "snake_case")]
enum BankRef {
    Inline,
    Path { path: String },
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
    len: u64,
}

fn head_arrays(head: &ClassifierHead) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    match head {
        ClassifierHead::Mlp(h) => {
            let mut out = Vec::new();
            for (j, (w, b)) in h.weights.iter().zip(&h.bias).enumerate() {
                out.push((format!("mlp.w{j}"), w.shape().to_vec(), w.data().to_vec()));
                out.push((format!("mlp.b{j}"), vec![b.len()], b.clone()));
            }
            out
        }
        ClassifierHead::Knn(h) => {
            let dim = h.train_z[0].len();
            let mut z = Vec::with_capacity(h.train_z.len() * dim);
            for row in &h.train_z {
                z.extend_from_slice(row);
            }
            vec![
                ("knn.z".into(), vec![h.train_z.len(), dim], z),
                (
                    "knn.labels".into(),
                    vec![h.labels.len()],
                    h.labels.iter().map(|&l| l as f64).collect(),
                ),
            ]
        }
        ClassifierHead::GaussianNb(h) => {
            let (classes, dim) = (h.priors.len(), h.means[0].len());
            let flat = |m: &Vec<Vec<f64>>| -> Vec<f64> {
                m.iter().flat_map(|r| r.iter().copied()).collect()
            };
            vec![
                ("nb.priors".into(), vec![classes], h.priors.clone()),
                ("nb.means".into(), vec![classes, dim], flat(&h.means)),
                ("nb.vars".into(), vec![classes, dim], flat(&h.vars)),
            ]
        }
    }
}

/// Serialize an AMFC model. With `bank_path` the bank is stored as a path
/// reference; otherwise its bytes are embedded inline.
pub fn amfc_model_to_bytes(model: &AmfcModel, bank_path: Option<&str>) -> Result<Vec<u8>> {
    let head_meta = match &model.head {
        ClassifierHead::Mlp(h) => HeadMeta::Mlp {
            sizes: h.sizes.clone(),
        },
        ClassifierHead::Knn(h) => HeadMeta::Knn {
            k: h.k,
            count: h.train_z.len(),
            dim: h.train_z[0].len(),
            classes: h.classes,
        },
        ClassifierHead::GaussianNb(h) => HeadMeta::GaussianNb {
            classes: h.priors.len(),
            dim: h.means[0].len(),
            var_floor: h.var_floor,
        },
    };
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    let bank_block = match bank_path {
        Some(_) => None,
        None => Some(bank_to_bytes(&model.bank)?),
    };
    if let Some(block) = &bank_block {
        payload.extend_from_slice(&(block.len() as u64).to_le_bytes());
        payload.extend_from_slice(block);
    }
    let arrays_start = payload.len() as u64;
    for (name, shape, data) in head_arrays(&model.head) {
        arrays.push(ArrayEntry {
            name,
            shape,
            byte_offset: payload.len() as u64 - arrays_start,
            len: data.len() as u64,
        });
        write_f64s(&mut payload, &data);
    }
    let header = ModelHeader {
        head: head_meta,
        input_h: model.input_h,
        bank: match bank_path {
            Some(p) => BankRef::Path {
                path: p.to_string(),
            },
            None => BankRef::Inline,
        },
        arrays,
    };
    let header = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("model header encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse an AMFC model. `bank_override` wins over whatever the file records;
/// `base_dir` anchors relative bank path references.
pub fn amfc_model_from_bytes(
    bytes: &[u8],
    bank_override: Option<&Path>,
    base_dir: Option<&Path>,
) -> Result<AmfcModel> {
    let (header, payload) = split_container(bytes, MAGIC, "amfc model")?;
    let header: ModelHeader =
        serde_json::from_slice(header).map_err(|e| Error::Format(format!("model header: {e}")))?;

    let (bank_inline, arrays_section) = match header.bank {
        BankRef::Inline => {
            let len_bytes: [u8; 8] = payload
                .get(..8)
                .ok_or_else(|| Error::Format("missing inline bank length".into()))?
                .try_into()
                .unwrap();
            let bank_len = u64::from_le_bytes(len_bytes) as usize;
            let block = payload
                .get(8..8 + bank_len)
                .ok_or_else(|| Error::Format("inline bank truncated".into()))?;
            (Some(block), &payload[8 + bank_len..])
        }
        BankRef::Path { ref path } => {
            if bank_override.is_none() {
                let resolved = match base_dir {
                    Some(dir) => dir.join(path),
                    None => Path::new(path).to_path_buf(),
                };
                let bank = load_bank(&resolved)?;
                return finish_model(&header, payload, bank);
            }
            (None, payload)
        }
    };

    let bank = match bank_override {
        Some(p) => load_bank(p)?,
        None => bank_from_bytes(bank_inline.expect("inline handled above"))?,
    };
    finish_model(&header, arrays_section, bank)
}

fn finish_model(
    header: &ModelHeader,
    arrays_section: &[u8],
    bank: crate::featurespace::LayerSpaceBank,
) -> Result<AmfcModel> {
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
                "array {:?}: unexpected offset",
                entry.name
            )));
        }
        let nbytes = expect * 8;
        let slice = arrays_section
            .get(offset as usize..offset as usize + nbytes)
            .ok_or_else(|| Error::Format(format!("array {:?}: payload truncated", entry.name)))?;
        arrays.push(read_f64s(slice));
        offset += nbytes as u64;
    }
    if offset as usize != arrays_section.len() {
        return Err(Error::Format("trailing bytes after head arrays".into()));
    }

    let mut arrays = arrays.into_iter();
    let mut next = |want: &str, got: Option<&ArrayEntry>| -> Result<Vec<f64>> {
        match got {
            Some(e) if e.name == want => Ok(arrays.next().expect("aligned with header")),
            Some(e) => Err(Error::Format(format!(
                "expected array {want:?}, found {:?}",
                e.name
            ))),
            None => Err(Error::Format(format!("missing array {want:?}"))),
        }
    };
    let mut entries = header.arrays.iter();

    let head = match &header.head {
        HeadMeta::Mlp { sizes } => {
            if sizes.len() < 2 {
                return Err(Error::Format(format!("bad mlp sizes {sizes:?}")));
            }
            let mut weights = Vec::new();
            let mut bias = Vec::new();
            for (j, w) in sizes.windows(2).enumerate() {
                let data = next(&format!("mlp.w{j}"), entries.next())?;
                if data.len() != w[0] * w[1] {
                    return Err(Error::Format(format!("mlp.w{j}: wrong element count")));
                }
                weights.push(Tensor::new(vec![w[1], w[0]], data)?);
                let b = next(&format!("mlp.b{j}"), entries.next())?;
                if b.len() != w[1] {
                    return Err(Error::Format(format!("mlp.b{j}: wrong element count")));
                }
                bias.push(b);
            }
            ClassifierHead::Mlp(MlpHead {
                sizes: sizes.clone(),
                weights,
                bias,
            })
        }
        HeadMeta::Knn {
            k,
            count,
            dim,
            classes,
        } => {
            let z = next("knn.z", entries.next())?;
            if z.len() != count * dim {
                return Err(Error::Format("knn.z: wrong element count".into()));
            }
            let labels_f = next("knn.labels", entries.next())?;
            if labels_f.len() != *count {
                return Err(Error::Format("knn.labels: wrong element count".into()));
            }
            let mut labels = Vec::with_capacity(*count);
            for v in labels_f {
                let l = v as usize;
                if l as f64 != v || l >= *classes {
                    return Err(Error::Format(format!("knn label {v} invalid")));
                }
                labels.push(l);
            }
            if *k == 0 || *k > *count {
                return Err(Error::Format(format!("knn k={k} out of range")));
            }
            ClassifierHead::Knn(KnnHead {
                k: *k,
                train_z: z.chunks_exact(*dim).map(|c| c.to_vec()).collect(),
                labels,
                classes: *classes,
            })
        }
        HeadMeta::GaussianNb {
            classes,
            dim,
            var_floor,
        } => {
            let priors = next("nb.priors", entries.next())?;
            let means = next("nb.means", entries.next())?;
            let vars = next("nb.vars", entries.next())?;
            if priors.len() != *classes
                || means.len() != classes * dim
                || vars.len() != classes * dim
            {
                return Err(Error::Format("nb arrays: wrong element count".into()));
            }
            if vars.iter().any(|&v| v.is_nan() || v <= 0.0) {
                return Err(Error::Format("nb variances must be positive".into()));
            }
            ClassifierHead::GaussianNb(GaussianNbHead {
                priors,
                means: means.chunks_exact(*dim).map(|c| c.to_vec()).collect(),
                vars: vars.chunks_exact(*dim).map(|c| c.to_vec()).collect(),
                var_floor: *var_floor,
            })
        }
    };
    if entries.next().is_some() {
        return Err(Error::Format("unexpected extra arrays in header".into()));
    }

    let model = AmfcModel::new(bank, head)?;
    if model.input_h != header.input_h {
        return Err(Error::Format(format!(
            "header input_h {} does not match the bank's {}",
            header.input_h, model.input_h
        )));
    }
    Ok(model)
}

pub fn save_amfc_model(model: &AmfcModel, path: &Path, bank_path: Option<&str>) -> Result<()> {
    std::fs::write(path, amfc_model_to_bytes(model, bank_path)?).map_err(|e| Error::io(path, e))
}

pub fn load_amfc_model(path: &Path, bank_override: Option<&Path>) -> Result<AmfcModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    amfc_model_from_bytes(&bytes, bank_override, path.parent())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amfc::{fit_head, project_dataset, HeadHyper, HeadKind};
    use crate::cnn::{ArchitectureSpec, TrainedModel};
    use crate::data::synth_corpus;
    use crate::featurespace::{build_bank, save_bank, SelectionMode};

    fn fixture() -> (AmfcModel, AmfcModel, AmfcModel) {
        let spec = ArchitectureSpec {
            input_h: 8,
            conv_layers: vec![crate::cnn::ConvLayerSpec {
                out_channels: 2,
                kernel: 3,
                pool_after: false,
            }],
            fc_layers: vec![2],
        };
        let cnn = TrainedModel::init(spec, 3).unwrap();
        let ds = synth_corpus(2, 8, 8, 1, 0.05, 4).unwrap();
        let bank = build_bank(&cnn, ds.images(), 8, &[9], SelectionMode::FirstRanked, 5).unwrap();
        let train = project_dataset(&bank, &ds).unwrap();
        let hyper = HeadHyper {
            mlp_hidden: vec![6],
            mlp_max_epochs: 3,
            ..Default::default()
        };
        let mlp = fit_head(HeadKind::Mlp, &train, &train, &hyper).unwrap();
        let knn = fit_head(HeadKind::Knn, &train, &train, &hyper).unwrap();
        let nb = fit_head(HeadKind::GaussianNb, &train, &train, &hyper).unwrap();
        (
            AmfcModel::new(bank.clone(), mlp).unwrap(),
            AmfcModel::new(bank.clone(), knn).unwrap(),
            AmfcModel::new(bank, nb).unwrap(),
        )
    }

    #[test]
    fn inline_round_trip_every_head_kind() {
        let (mlp, knn, nb) = fixture();
        for model in [&mlp, &knn, &nb] {
            let bytes = amfc_model_to_bytes(model, None).unwrap();
            let back = amfc_model_from_bytes(&bytes, None, None).unwrap();
            assert_eq!(*model, back);
            assert_eq!(bytes, amfc_model_to_bytes(&back, None).unwrap());
        }
    }

    #[test]
    fn path_reference_and_override() {
        let dir = tempfile::tempdir().unwrap();
        let (model, _, _) = fixture();
        let bank_path = dir.path().join("bank.amfcb");
        save_bank(&model.bank, &bank_path).unwrap();
        let model_path = dir.path().join("head.amfcm");
        save_amfc_model(&model, &model_path, Some("bank.amfcb")).unwrap();

        // Resolved relative to the model file's directory.
        let back = load_amfc_model(&model_path, None).unwrap();
        assert_eq!(model, back);

        // Explicit override takes precedence.
        let back = load_amfc_model(&model_path, Some(&bank_path)).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn corruption_is_rejected() {
        let (model, _, _) = fixture();
        let bytes = amfc_model_to_bytes(&model, None).unwrap();
        let mut bad = bytes.clone();
        bad[2] = b'_';
        assert!(matches!(
            amfc_model_from_bytes(&bad, None, None),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            amfc_model_from_bytes(&bytes[..bytes.len() - 3], None, None),
            Err(Error::Format(_))
        ));
    }
}
