//! Checkpoint format: a versioned magic string, a JSON header describing
//! the model configuration, vocabulary, and parameter manifest, then every
//! parameter's raw little-endian 64-bit floats concatenated in manifest
//! order.
//!
//! Layout on disk:
//!
//! ```text
//! "COMPETESMOE-CKPT-V1\n"          magic (20 bytes)
//! u64 LE                            header byte length
//! header JSON                       config, vocab bytes, step, manifest
//! f64 LE × total                    payloads in manifest order
//! ```
//!
//! Saving is deterministic: equal models produce byte-identical files, so
//! bitwise trajectory comparisons can diff checkpoints directly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::ParameterStore;

pub const MAGIC: &[u8] = b"COMPETESMOE-CKPT-V1\n";

/// One manifest entry; payload order follows manifest order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    /// Ascending byte values backing vocabulary ids, when known.
    vocab_bytes: Option<Vec<u8>>,
    /// Training step the checkpoint was taken at.
    step: u64,
    params: Vec<ManifestEntry>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab_bytes: Option<Vec<u8>>,
    pub step: u64,
    pub params: ParameterStore,
}

impl Checkpoint {
    /// Rebuild the model. The parameter store already matches the config
    /// (validated at load), so no re-initialization happens.
    pub fn into_model(self) -> Model {
        Model { config: self.config, params: self.params }
    }
}

/// Write a model (plus its vocabulary and the step it was taken at).
pub fn save(path: &Path, model: &Model, vocab_bytes: Option<&[u8]>, step: u64) -> Result<()> {
    let manifest: Vec<ManifestEntry> = model
        .params
        .iter()
        .map(|(name, p)| ManifestEntry {
            name: name.clone(),
            shape: p.shape.clone(),
            trainable: p.trainable,
        })
        .collect();
    let header = Header {
        config: model.config.clone(),
        vocab_bytes: vocab_bytes.map(<[u8]>::to_vec),
        step,
        params: manifest,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let io = |e: std::io::Error| Error::Checkpoint(format!("{}: {e}", path.display()));
    file.write_all(MAGIC).map_err(io)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io)?;
    file.write_all(&header_json).map_err(io)?;
    for (_, param) in model.params.iter() {
        for v in &param.data {
            file.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    file.flush().map_err(io)?;
    Ok(())
}

/// Read a checkpoint, validating magic, manifest arity, and payload size.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let io = |e: std::io::Error| Error::Checkpoint(format!("{}: {e}", path.display()));

    let mut magic = vec![0u8; MAGIC.len()];
    file.read_exact(&mut magic).map_err(io)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic {:?})",
            path.display(),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(io)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(io)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(io)?;
    let total: usize = header.params.iter().map(|m| m.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: payload is {} bytes, manifest promises {}",
            path.display(),
            payload.len(),
            total * 8
        )));
    }

    let mut params = ParameterStore::new();
    let mut offset = 0usize;
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        offset += n * 8;
        params.insert_with(entry.name.clone(), data, entry.shape.clone(), entry.trainable);
    }

    header.config.validate().map_err(|e| {
        Error::Checkpoint(format!("{}: header config invalid: {e}", path.display()))
    })?;
    Ok(Checkpoint {
        config: header.config,
        vocab_bytes: header.vocab_bytes,
        step: header.step,
        params,
    })
}

/// FNV-1a digest of a file — a cheap stable checksum for comparing
/// checkpoints across runs.
pub fn file_digest(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    Ok(hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            vocab_size: 17,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            n_experts: 3,
            top_k: 2,
            context: 16,
            ..ModelConfig::nano()
        };
        Model::init(&cfg, seed).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model(3);
        save(&path, &model, Some(b"abcdefghijklmnopq"), 123).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.step, 123);
        assert_eq!(ck.vocab_bytes.as_deref(), Some(&b"abcdefghijklmnopq"[..]));
        assert_eq!(ck.config, model.config);
        assert_eq!(ck.params.len(), model.params.len());
        for ((name_a, a), (name_b, b)) in ck.params.iter().zip(model.params.iter()) {
            assert_eq!(name_a, name_b);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.data, b.data, "payload of {name_a} changed");
        }
    }

    #[test]
    fn equal_models_produce_byte_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save(&p1, &small_model(9), None, 0).unwrap();
        save(&p2, &small_model(9), None, 0).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(file_digest(&p1).unwrap(), file_digest(&p2).unwrap());
        let p3 = dir.path().join("c.ckpt");
        save(&p3, &small_model(10), None, 0).unwrap();
        assert_ne!(file_digest(&p1).unwrap(), file_digest(&p3).unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &small_model(1), None, 7).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let garbled = dir.path().join("garbled.ckpt");
        std::fs::write(&garbled, b"NOT-A-CHECKPOINT-FILE-AT-ALL").unwrap();
        let err = load(&garbled).unwrap_err();
        assert!(err.to_string().contains("magic"), "got: {err}");

        let clipped = dir.path().join("clipped.ckpt");
        std::fs::write(&clipped, &bytes[..bytes.len() - 16]).unwrap();
        let err = load(&clipped).unwrap_err();
        assert!(err.to_string().contains("payload"), "got: {err}");
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn loaded_checkpoint_rebuilds_a_working_model() {
        use crate::model::LayerMode;
        use crate::tensor::Tape;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model(5);
        save(&path, &model, None, 0).unwrap();
        let rebuilt = load(&path).unwrap().into_model();

        let modes = vec![LayerMode::Routed; 2];
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let binds = m.params.bind(&mut tape).unwrap();
            let out = m.forward_single(&mut tape, &binds, &[1, 2, 3], &modes).unwrap();
            tape.data(out.logits).to_vec()
        };
        assert_eq!(run(&model), run(&rebuilt));
    }
}
