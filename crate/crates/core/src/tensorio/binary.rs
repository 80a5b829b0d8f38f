//! `ESEQ` and `CBNK` containers.
//!
//! Layout of both: 4 magic bytes, a little-endian `u32` header length, a
//! UTF-8 JSON header of that length, then the float32 little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CenterBank, EmbeddingSequence};
use crate::error::{KwsError, Result};

const ESEQ_MAGIC: &[u8; 4] = b"ESEQ";
const CBNK_MAGIC: &[u8; 4] = b"CBNK";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EseqHeader {
    t: usize,
    d: usize,
    hop_seconds: f64,
    label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CbnkHeader {
    d: usize,
    n_kw: usize,
    n_pos: usize,
    n_c: usize,
    keyword_names: Vec<String>,
}

fn encode<H: Serialize>(magic: &[u8; 4], header: &H, payload: &[f32]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serialization is infallible");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode<'a, H: Deserialize<'a>>(
    magic: &[u8; 4],
    bytes: &'a [u8],
    what: &str,
) -> Result<(H, &'a [u8])> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(KwsError::Format(format!(
            "{what}: missing {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let rest = &bytes[8..];
    if rest.len() < header_len {
        return Err(KwsError::Format(format!(
            "{what}: header length {header_len} exceeds file size"
        )));
    }
    let header = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| KwsError::Format(format!("{what}: bad JSON header: {e}")))?;
    Ok((header, &rest[header_len..]))
}

fn decode_payload(bytes: &[u8], expected_values: usize, what: &str) -> Result<Vec<f32>> {
    if bytes.len() != expected_values * 4 {
        return Err(KwsError::Format(format!(
            "{what}: payload has {} bytes, header implies {}",
            bytes.len(),
            expected_values * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn encode_embedding_sequence(seq: &EmbeddingSequence) -> Vec<u8> {
    let header = EseqHeader {
        t: seq.len(),
        d: seq.dim(),
        hop_seconds: seq.hop_seconds(),
        label: seq.label().map(str::to_owned),
    };
    encode(ESEQ_MAGIC, &header, seq.as_slice())
}

pub(crate) fn decode_embedding_sequence(bytes: &[u8]) -> Result<EmbeddingSequence> {
    let (h, payload): (EseqHeader, _) = decode(ESEQ_MAGIC, bytes, "ESEQ")?;
    if h.t == 0 || h.d == 0 {
        return Err(KwsError::Format(format!("ESEQ: empty shape {}x{}", h.t, h.d)));
    }
    let data = decode_payload(payload, h.t * h.d, "ESEQ")?;
    EmbeddingSequence::new(data, h.d, h.hop_seconds, h.label)
}

pub(crate) fn encode_center_bank(bank: &CenterBank) -> Vec<u8> {
    let header = CbnkHeader {
        d: bank.dim(),
        n_kw: bank.n_kw(),
        n_pos: bank.n_pos(),
        n_c: bank.n_c(),
        keyword_names: bank.keyword_names().to_vec(),
    };
    encode(CBNK_MAGIC, &header, bank.as_slice())
}

pub(crate) fn decode_center_bank(bytes: &[u8]) -> Result<CenterBank> {
    let (h, payload): (CbnkHeader, _) = decode(CBNK_MAGIC, bytes, "CBNK")?;
    if h.keyword_names.len() != h.n_kw {
        return Err(KwsError::Format(format!(
            "CBNK: header declares {} keywords but names {}",
            h.n_kw,
            h.keyword_names.len()
        )));
    }
    let data = decode_payload(payload, h.n_kw * h.n_pos * h.n_c * h.d, "CBNK")?;
    CenterBank::new(data, h.d, h.n_pos, h.n_c, h.keyword_names)
}

pub fn read_embedding_sequence(path: impl AsRef<Path>) -> Result<EmbeddingSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| KwsError::io(path, e))?;
    decode_embedding_sequence(&bytes)
}

pub fn write_embedding_sequence(seq: &EmbeddingSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embedding_sequence(seq)).map_err(|e| KwsError::io(path, e))
}

pub fn read_center_bank(path: impl AsRef<Path>) -> Result<CenterBank> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| KwsError::io(path, e))?;
    decode_center_bank(&bytes)
}

pub fn write_center_bank(bank: &CenterBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_center_bank(bank)).map_err(|e| KwsError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_sequence() {
        let seq = EmbeddingSequence::new(vec![0.5], 1, 0.016, None).unwrap();
        let back = decode_embedding_sequence(&encode_embedding_sequence(&seq)).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.row(0), &[0.5]);
    }

    #[test]
    fn header_layout() {
        let seq = EmbeddingSequence::new(vec![1.0, 2.0], 2, 0.016, Some("cash".into())).unwrap();
        let bytes = encode_embedding_sequence(&seq);
        assert_eq!(&bytes[..4], b"ESEQ");
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(header["t"], 1);
        assert_eq!(header["d"], 2);
        assert_eq!(header["label"], "cash");
        assert_eq!(&bytes[8 + n..8 + n + 4], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 8 + n + 8);
    }

    #[test]
    fn short_payload_is_format_error() {
        let seq = EmbeddingSequence::new(vec![1.0; 12], 4, 0.016, None).unwrap();
        let mut bytes = encode_embedding_sequence(&seq);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            decode_embedding_sequence(&bytes),
            Err(KwsError::Format(_))
        ));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        assert!(matches!(
            decode_embedding_sequence(b"CBNK\0\0\0\0"),
            Err(KwsError::Format(_))
        ));
    }

    #[test]
    fn bank_missing_keyword_name() {
        let hdr = br#"{"d":2,"n_kw":2,"n_pos":1,"n_c":1,"keyword_names":["a"]}"#;
        let mut bytes = b"CBNK".to_vec();
        bytes.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
        bytes.extend_from_slice(hdr);
        for v in [1.0f32, 0.0, 0.0, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode_center_bank(&bytes), Err(KwsError::Format(_))));
    }

    #[test]
    fn bank_cell_count_mismatch() {
        let hdr = br#"{"d":2,"n_kw":1,"n_pos":1,"n_c":2,"keyword_names":["a"]}"#;
        let mut bytes = b"CBNK".to_vec();
        bytes.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
        bytes.extend_from_slice(hdr);
        for v in [1.0f32, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode_center_bank(&bytes), Err(KwsError::Format(_))));
    }

    #[test]
    fn bank_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.cbnk");
        let bank = CenterBank::new(
            vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8, -0.8, 0.6],
            2,
            2,
            2,
            vec!["yes".into()],
        )
        .unwrap();
        write_center_bank(&bank, &path).unwrap();
        assert_eq!(read_center_bank(&path).unwrap(), bank);
    }

    proptest! {
        #[test]
        fn eseq_round_trip_is_bit_exact(
            t in 1usize..6,
            d in 1usize..6,
            seed in proptest::collection::vec(-1e30f32..1e30f32, 36),
            hop in 1e-4f64..1.0,
        ) {
            let data: Vec<f32> = seed.into_iter().take(t * d).collect();
            prop_assume!(data.len() == t * d);
            let seq = EmbeddingSequence::new(data, d, hop, Some("k".into())).unwrap();
            let back = decode_embedding_sequence(&encode_embedding_sequence(&seq)).unwrap();
            let bits = |s: &EmbeddingSequence| s.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&seq));
            prop_assert_eq!(back.hop_seconds(), hop);
        }
    
        #[test]
        fn cbnk_round_trip_is_bit_exact(
            raw in proptest::collection::vec(-100f32..100f32, 24),
        ) {
            prop_assume!(raw.chunks(3).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
            let bank = CenterBank::new(raw, 3, 2, 2, vec!["a".into(), "b".into()]).unwrap();
            let once = decode_center_bank(&encode_center_bank(&bank)).unwrap();
            let twice = decode_center_bank(&encode_center_bank(&once)).unwrap();
            let bits = |b: &CenterBank| b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&once), bits(&bank));
            prop_assert_eq!(bits(&twice), bits(&bank));
        }
    }
}
