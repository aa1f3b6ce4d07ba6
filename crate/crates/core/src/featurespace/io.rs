//! Bank file format `AMFCB1`: 6-byte magic, u32 LE header length, JSON header
//! (layer count, per-layer {n, p, h_in}, provenance), then per layer the mean
//! (n f64 LE), basis (p*n f64 LE row-major) and eigenvalues (p f64 LE).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpace, LayerSpaceBank, Provenance};
use crate::cnn::io::{read_f64s, split_container, write_f64s};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) const MAGIC: &[u8; 6] = b"AMFCB1";

#[derive(Serialize, Deserialize)]
struct BankHeader {
    layers: usize,
    spaces: Vec<SpaceEntry>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct SpaceEntry {
    layer: usize,
    n: usize,
    p: usize,
    h_in: usize,
}

pub fn bank_to_bytes(bank: &LayerSpaceBank) -> Result<Vec<u8>> {
    bank.validate()?;
    let header = BankHeader {
        layers: bank.spaces.len(),
        spaces: bank
            .spaces
            .iter()
            .map(|s| SpaceEntry {
                layer: s.layer,
                n: s.n,
                p: s.p,
                h_in: s.h_in,
            })
            .collect(),
        provenance: bank.provenance.clone(),
    };
    let header = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("bank header encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for s in &bank.spaces {
        write_f64s(&mut out, &s.mean);
        write_f64s(&mut out, s.basis.data());
        write_f64s(&mut out, &s.eigenvalues);
    }
    Ok(out)
}

pub fn bank_from_bytes(bytes: &[u8]) -> Result<LayerSpaceBank> {
    let (header, payload) = split_container(bytes, MAGIC, "bank")?;
    let header: BankHeader =
        serde_json::from_slice(header).map_err(|e| Error::Format(format!("bank header: {e}")))?;
    if header.layers != header.spaces.len() {
        return Err(Error::Format(format!(
            "header declares {} layers but lists {} spaces",
            header.layers,
            header.spaces.len()
        )));
    }
    let expect: usize = header
        .spaces
        .iter()
        .map(|s| (s.n + s.p * s.n + s.p) * 8)
        .sum();
    if payload.len() != expect {
        return Err(Error::Format(format!(
            "bank payload is {} bytes, header requires {expect}",
            payload.len()
        )));
    }
    let mut offset = 0usize;
    let mut take = |len: usize| {
        let out = read_f64s(&payload[offset..offset + len * 8]);
        offset += len * 8;
        out
    };
    let mut spaces = Vec::with_capacity(header.spaces.len());
    for e in &header.spaces {
        let mean = take(e.n);
        let basis = Tensor::new(vec![e.p, e.n], take(e.p * e.n))?;
        let eigenvalues = take(e.p);
        spaces.push(LayerSpace {
            layer: e.layer,
            mean,
            basis,
            eigenvalues,
            n: e.n,
            p: e.p,
            h_in: e.h_in,
        });
    }
    let bank = LayerSpaceBank {
        spaces,
        provenance: header.provenance,
    };
    bank.validate()
        .map_err(|e| Error::Format(format!("loaded bank invalid: {e}")))?;
    Ok(bank)
}

pub fn save_bank(bank: &LayerSpaceBank, path: &Path) -> Result<()> {
    std::fs::write(path, bank_to_bytes(bank)?).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: &Path) -> Result<LayerSpaceBank> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    bank_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_bank() -> LayerSpaceBank {
        // Hand-made 2-space chain: 4 -> 4 -> 1 with orthonormal bases.
        let s1 = LayerSpace {
            layer: 1,
            mean: vec![0.5, 0.25, 0.0, -0.5],
            basis: Tensor::new(
                vec![4, 4],
                vec![
                    1.0, 0.0, 0.0, 0.0, //
                    0.0, 1.0, 0.0, 0.0, //
                    0.0, 0.0, 1.0, 0.0, //
                    0.0, 0.0, 0.0, 1.0,
                ],
            )
            .unwrap(),
            eigenvalues: vec![4.0, 3.0, 2.0, 1.0],
            n: 4,
            p: 4,
            h_in: 2,
        };
        let s2 = LayerSpace {
            layer: 2,
            mean: vec![0.0; 4],
            basis: Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.5, 0.5]).unwrap(),
            eigenvalues: vec![1.5],
            n: 4,
            p: 1,
            h_in: 2,
        };
        LayerSpaceBank {
            spaces: vec![s1, s2],
            provenance: Provenance {
                m: 10,
                seed: 99,
                scenario: "first_ranked".into(),
                model_hash: 0xdead_beef,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.amfcb");
        let bank = small_bank();
        save_bank(&bank, &path).unwrap();
        let back = load_bank(&path).unwrap();
        assert_eq!(bank, back);
        assert_eq!(bank_to_bytes(&bank).unwrap(), bank_to_bytes(&back).unwrap());
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = bank_to_bytes(&small_bank()).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'Z';
        assert!(matches!(bank_from_bytes(&bad_magic), Err(Error::Format(_))));

        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(bank_from_bytes(truncated), Err(Error::Format(_))));
    }

    #[test]
    fn layer_count_mismatch_is_rejected() {
        let bytes = bank_to_bytes(&small_bank()).unwrap();
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
        let tampered = header.replacen("\"layers\":2", "\"layers\":3", 1);
        assert_ne!(header, tampered);
        let mut out = bytes[..6].to_vec();
        out.extend_from_slice(&(tampered.len() as u32).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[10 + header_len..]);
        match bank_from_bytes(&out) {
            Err(Error::Format(msg)) => assert!(msg.contains("layers"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
