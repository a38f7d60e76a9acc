use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Conversation, LabelSet, Vocabulary, PAD};
use crate::error::{Error, Result};

/// One classification target: an utterance with the preceding utterances of its
/// conversation, oldest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub current: Vec<usize>,
    pub history: Vec<Vec<usize>>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct BatchOptions {
    pub batch_size: usize,
    /// Preceding utterances kept per example; `None` keeps the whole conversation.
    pub history_window: Option<usize>,
    /// Longer utterances lose their rightmost tokens.
    pub max_len: usize,
    /// `None` keeps corpus order.
    pub shuffle_seed: Option<u64>,
}

/// Padded token indices for a group of examples.
///
/// `current` is `[len × max_len]`, `history` is `[len × history_slots × max_len]`,
/// both filled with [`PAD`] past each utterance's length. History slot `j` of
/// example `i` is in use iff `j < history_counts[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub max_len: usize,
    pub history_slots: usize,
    pub current: Vec<usize>,
    pub lengths: Vec<usize>,
    pub history: Vec<usize>,
    pub history_lengths: Vec<usize>,
    pub history_counts: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&EncodedExample]) -> Self {
        let history_slots = examples.iter().map(|e| e.history.len()).max().unwrap_or(0);
        let max_len = examples
            .iter()
            .flat_map(|e| std::iter::once(e.current.len()).chain(e.history.iter().map(Vec::len)))
            .max()
            .unwrap_or(0);
        let n = examples.len();
        let mut batch = Batch {
            max_len,
            history_slots,
            current: vec![PAD; n * max_len],
            lengths: Vec::with_capacity(n),
            history: vec![PAD; n * history_slots * max_len],
            history_lengths: vec![0; n * history_slots],
            history_counts: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
        };
        for (i, ex) in examples.iter().enumerate() {
            batch.current[i * max_len..i * max_len + ex.current.len()].copy_from_slice(&ex.current);
            batch.lengths.push(ex.current.len());
            for (j, h) in ex.history.iter().enumerate() {
                let base = (i * history_slots + j) * max_len;
                batch.history[base..base + h.len()].copy_from_slice(h);
                batch.history_lengths[i * history_slots + j] = h.len();
            }
            batch.history_counts.push(ex.history.len());
            batch.labels.push(ex.label);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Unpadded tokens of example `i`'s current utterance.
    pub fn current_tokens(&self, i: usize) -> &[usize] {
        &self.current[i * self.max_len..i * self.max_len + self.lengths[i]]
    }

    /// Unpadded tokens of history slot `j` of example `i` (empty when unused).
    pub fn history_tokens(&self, i: usize, j: usize) -> &[usize] {
        let base = (i * self.history_slots + j) * self.max_len;
        &self.history[base..base + self.history_lengths[i * self.history_slots + j]]
    }
}

/// One example per utterance. With `labels` set every utterance must carry a
/// known label; without it labels are recorded as 0 (inference).
pub fn encode_examples(
    conversations: &[Conversation],
    vocab: &Vocabulary,
    labels: Option<&LabelSet>,
    history_window: Option<usize>,
    max_len: usize,
) -> Result<Vec<EncodedExample>> {
    if max_len == 0 {
        return Err(Error::Config("max utterance length must be at least 1".into()));
    }
    let mut out = Vec::new();
    for conv in conversations {
        let encoded: Vec<Vec<usize>> = conv
            .utterances
            .iter()
            .map(|u| {
                let mut ids = vocab.encode(&u.tokens);
                ids.truncate(max_len);
                ids
            })
            .collect();
        for (k, u) in conv.utterances.iter().enumerate() {
            let label = match labels {
                Some(set) => {
                    let name = u.label.as_deref().ok_or_else(|| {
                        Error::Data(format!("{}: utterance {} has no act label", conv.id, k + 1))
                    })?;
                    set.id(name)?
                }
                None => 0,
            };
            let start = history_window.map_or(0, |w| k.saturating_sub(w));
            out.push(EncodedExample {
                current: encoded[k].clone(),
                history: encoded[start..k].to_vec(),
                label,
            });
        }
    }
    Ok(out)
}

/// Groups examples into batches of `batch_size` (the last one may be partial),
/// after an optional seeded shuffle.
pub fn batch_examples(
    examples: &[EncodedExample],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&EncodedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&refs)
        })
        .collect())
}

pub fn make_batches(
    conversations: &[Conversation],
    vocab: &Vocabulary,
    labels: &LabelSet,
    options: &BatchOptions,
) -> Result<Vec<Batch>> {
    let examples = encode_examples(
        conversations,
        vocab,
        Some(labels),
        options.history_window,
        options.max_len,
    )?;
    batch_examples(&examples, options.batch_size, options.shuffle_seed)
}
