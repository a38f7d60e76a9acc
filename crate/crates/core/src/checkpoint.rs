//! Binary model files.
//!
//! Layout: the magic `ALDMN1`, a length-prefixed JSON header (model sizes, training
//! configuration, vocabulary, label names), a tensor count, then each tensor as
//! name length, name bytes, rank, extents and values. Integers are little-endian
//! `u32`, values little-endian `f32`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 6] = b"ALDMN1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    pub labels: LabelSet,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vec<String>,
    min_count: usize,
    labels: Vec<String>,
}

/// Rounds every parameter to the nearest `f32`, the precision kept on disk.
pub fn round_to_storage(model: &mut Model) {
    for t in model.store.values_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config.clone(),
            train: self.train.clone(),
            vocab: self.vocab.tokens().to_vec(),
            min_count: self.vocab.min_count(),
            labels: self.labels.names().to_vec(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 8 * self.model.store.total_elements());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        put_u32(&mut out, self.model.store.len())?;
        for (name, t) in self.model.store.iter() {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &e in t.shape() {
                put_u32(&mut out, e)?;
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a model file (bad magic)".into()));
        }
        let len = r.u32()?;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let vocab = Vocabulary::from_tokens(header.vocab, header.min_count)?;
        let labels = LabelSet::new(header.labels)?;
        if vocab.len() != header.model.vocab_size || labels.len() != header.model.num_classes {
            return Err(Error::Checkpoint("header sizes disagree with vocabulary or labels".into()));
        }
        // parameters are overwritten below; the seed only fixes shapes
        let mut model = Model::new(header.model, 0.1, &mut ChaCha8Rng::seed_from_u64(0));
        let count = r.u32()?;
        if count != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{count} tensors stored, model has {}",
                model.store.len()
            )));
        }
        for _ in 0..count {
            let n = r.u32()?;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let tensor = Tensor::new(shape, data)?;
            model.store.set(&name, tensor)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        Ok(Checkpoint {
            model,
            train: header.train,
            vocab,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}
