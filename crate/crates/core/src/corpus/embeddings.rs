use std::path::Path;

use rand::Rng;

use super::{Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[|V| × d]` word vectors. Row [`PAD`] is all-zero and is never updated.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub trainable: bool,
}

/// Fills a table for `vocab`: rows found in the whitespace-separated vector file
/// (`token v1 .. vd` per line) are copied, every other row except `<pad>` is drawn
/// uniformly from `[-init_range, init_range]`. Without a file the whole table is random.
pub fn load_embeddings<R: Rng + ?Sized>(
    path: Option<&Path>,
    vocab: &Vocabulary,
    dim: usize,
    init_range: f64,
    trainable: bool,
    rng: &mut R,
) -> Result<EmbeddingTable> {
    let mut matrix = Tensor::uniform(&[vocab.len(), dim], init_range, rng);
    matrix.data_mut()[PAD * dim..(PAD + 1) * dim].fill(0.0);
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut covered = 0usize;
        for (i, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: format!("bad vector component: {e}"),
                })?;
            if values.len() != dim {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("vector has {} components, expected {}", values.len(), dim),
                });
            }
            match vocab.lookup(token) {
                Some(id) if id != PAD => {
                    matrix.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
                    covered += 1;
                }
                _ => {}
            }
        }
        log::info!("embeddings cover {covered} of {} vocabulary entries", vocab.len());
    }
    Ok(EmbeddingTable { matrix, trainable })
}
