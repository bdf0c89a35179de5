//! Binary checkpoint container.
//!
//! Layout (all integers `u32` little-endian):
//!
//! ```text
//! magic "PGTCKPT\0" | version
//! header length | header (UTF-8 key=value lines: model config, phase,
//!                         epoch, dev_accuracy, vocab_hash)
//! token count | (length | UTF-8 bytes) per vocabulary token
//! tensor count | per tensor: name length | name | rank | dims | f32 LE values
//! ```

use std::io::{Read, Write};

use super::{InflectionModel, ModelConfig, ModelParameters};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PGTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training metadata stored next to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub phase: String,
    pub epoch: usize,
    pub dev_accuracy: f64,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    put_u32(w, b.len())?;
    w.write_all(b)?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &InflectionModel<f32>, meta: &CheckpointHeader) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;

    let mut header = String::new();
    for (k, v) in model.config.to_pairs() {
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str(&format!("phase={}\n", meta.phase));
    header.push_str(&format!("epoch={}\n", meta.epoch));
    header.push_str(&format!("dev_accuracy={}\n", meta.dev_accuracy));
    header.push_str(&format!("vocab_hash={}\n", model.vocab.hash()));
    put_bytes(&mut w, header.as_bytes())?;

    put_u32(&mut w, model.vocab.len())?;
    for tok in model.vocab.tokens() {
        put_bytes(&mut w, tok.as_bytes())?;
    }

    put_u32(&mut w, model.params.len())?;
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        put_bytes(&mut w, name.as_bytes())?;
        put_u32(&mut w, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut w, d)?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<usize> {
        let mut b = [0u8; 4];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        Ok(u32::from_le_bytes(b) as usize)
    }

    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()?;
        let mut b = vec![0u8; n];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        Ok(b)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

/// Reads a checkpoint. With `expected_vocab_hash`, a checkpoint built on a
/// different vocabulary is rejected.
pub fn read_checkpoint<R: Read>(
    input: R,
    expected_vocab_hash: Option<&str>,
) -> Result<(InflectionModel<f32>, CheckpointHeader)> {
    let mut r = Reader { inner: input };
    let mut magic = [0u8; 8];
    r.inner
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }

    let header = r.string()?;
    let pairs: Vec<(&str, &str)> = header.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| {
        pairs
            .iter()
            .find(|(key, _)| *key == k)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Checkpoint(format!("header lacks {k}")))
    };
    let config = ModelConfig::from_pairs(pairs.iter().copied())?;
    let meta = CheckpointHeader {
        phase: get("phase")?.to_string(),
        epoch: get("epoch")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad epoch".into()))?,
        dev_accuracy: get("dev_accuracy")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad dev_accuracy".into()))?,
    };
    let stored_hash = get("vocab_hash")?.to_string();

    let n_tokens = r.u32()?;
    let tokens = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_tokens(tokens)?;
    if vocab.hash() != stored_hash {
        return Err(Error::VocabularyMismatch {
            expected: stored_hash,
            found: vocab.hash(),
        });
    }
    if let Some(expected) = expected_vocab_hash {
        if expected != stored_hash {
            return Err(Error::VocabularyMismatch {
                expected: expected.to_string(),
                found: stored_hash,
            });
        }
    }

    let n_tensors = r.u32()?;
    let mut named = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        r.inner
            .read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("truncated tensor {name}: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        named.push((name, Tensor::from_vec(&shape, data)));
    }
    let params = ModelParameters::from_parts(&config, named)?;
    Ok((InflectionModel::new(config, vocab, params)?, meta))
}
