//! Self-describing model checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian u32 format version, a u32
//! length-prefixed JSON header (architecture config, train step counter,
//! vocabulary, and a manifest of parameter names and shapes), then the
//! parameter groups as flat little-endian 32-bit float arrays in manifest
//! order. Reading a file and writing it back is byte-identical.

use crate::corpus::Vocabulary;
use crate::error::Error;
use crate::tensor::Array;
use crate::wm_model::{ModelConfig, WatermarkModel};
use crate::Result;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

const MAGIC: &[u8; 8] = b"TXMKCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    train_steps: u64,
    vocab: Vec<String>,
    manifest: Vec<ManifestEntry>,
}

/// Writes the model and its vocabulary.
pub fn save(model: &WatermarkModel, vocab: &Vocabulary, mut w: impl Write) -> Result<()> {
    let manifest: Vec<ManifestEntry> = model
        .params()
        .iter()
        .map(|(name, a)| ManifestEntry { name: name.to_string(), rows: a.rows, cols: a.cols })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        train_steps: model.train_steps,
        vocab: vocab.tokens().to_vec(),
        manifest,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, array) in model.params().iter() {
        for &v in &array.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint back into a model and vocabulary.
pub fn load(mut r: impl Read) -> Result<(WatermarkModel, Vocabulary)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    r.read_exact(&mut u32buf)?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }

    let mut model = WatermarkModel::new(header.config)?;
    model.train_steps = header.train_steps;
    if header.manifest.len() != model.params().len() {
        return Err(Error::CheckpointFormat(format!(
            "manifest has {} parameter groups, model expects {}",
            header.manifest.len(),
            model.params().len()
        )));
    }
    for (i, entry) in header.manifest.iter().enumerate() {
        let expected = model.params().get(i);
        if model.params().name(i) != entry.name
            || expected.rows != entry.rows
            || expected.cols != entry.cols
        {
            return Err(Error::CheckpointFormat(format!(
                "manifest entry {i} ({} {}x{}) does not match model layout ({} {}x{})",
                entry.name,
                entry.rows,
                entry.cols,
                model.params().name(i),
                expected.rows,
                expected.cols
            )));
        }
        let n = entry.rows * entry.cols;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        *model.params_mut().get_mut(i) = Array::from_vec(entry.rows, entry.cols, data);
    }
    let vocab = Vocabulary::from_tokens(header.vocab)?;
    Ok((model, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::wm_model::ModelConfig;

    fn fixture() -> (WatermarkModel, Vocabulary) {
        let cfg = ModelConfig {
            vocab_size: 12,
            msg_len: 4,
            d_model: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ff_width: 16,
            ext_width: 8,
            ext_heads: 2,
            ext_layers: 1,
            ext_ff: 16,
            max_len: 10,
            seed: 77,
        };
        let model = WatermarkModel::new(cfg).unwrap();
        let texts: Vec<String> = vec!["a b c d e f g h".into()];
        let vocab = build_vocabulary(&texts, 12).unwrap();
        (model, vocab)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (model, vocab) = fixture();
        let mut first = Vec::new();
        save(&model, &vocab, &mut first).unwrap();
        let (loaded, loaded_vocab) = load(first.as_slice()).unwrap();
        assert_eq!(loaded_vocab, vocab);
        let mut second = Vec::new();
        save(&loaded, &loaded_vocab, &mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn loaded_parameters_match_f32_image() {
        let (model, vocab) = fixture();
        let mut buf = Vec::new();
        save(&model, &vocab, &mut buf).unwrap();
        let (loaded, _) = load(buf.as_slice()).unwrap();
        for ((n1, a), (n2, b)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(n1, n2);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32, *y as f32);
                assert_eq!(*y, (*x as f32) as f64);
            }
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let (model, vocab) = fixture();
        let mut buf = Vec::new();
        save(&model, &vocab, &mut buf).unwrap();
        buf[8] = 99; // version field
        assert!(matches!(load(buf.as_slice()), Err(Error::CheckpointVersion { found: 99, .. })));
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOTACKPT\x01\x00\x00\x00".to_vec();
        assert!(matches!(load(buf.as_slice()), Err(Error::CheckpointFormat(_))));
    }
}
