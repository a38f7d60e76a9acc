//! Conversation corpora: the on-disk format, tokenization, vocabulary, embeddings
//! and padded mini-batches.
//!
//! A corpus file is UTF-8 text with one utterance per line,
//! `speaker<TAB>act_label<TAB>raw text`, and one blank line between conversations.

mod batch;
mod embeddings;
mod tokenize;
mod vocab;

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use batch::{batch_examples, encode_examples, make_batches, Batch, BatchOptions, EncodedExample};
pub use embeddings::{load_embeddings, EmbeddingTable};
pub use tokenize::normalize_and_tokenize;
pub use vocab::{build_vocab, Vocabulary, PAD, UNK};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: String,
    pub tokens: Vec<String>,
    /// `None` in inference mode.
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

/// Frozen, ordered set of act labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate label {n:?}")));
            }
        }
        Ok(LabelSet { names, index })
    }

    /// Sorted set of every label that occurs in `conversations`.
    pub fn collect(conversations: &[Conversation]) -> Self {
        let set: BTreeSet<&str> = conversations
            .iter()
            .flat_map(|c| c.utterances.iter().filter_map(|u| u.label.as_deref()))
            .collect();
        let names: Vec<String> = set.into_iter().map(str::to_string).collect();
        LabelSet::new(names).expect("labels from a set are unique")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown act label {name:?}")))
    }
}

/// A parsed corpus together with its label set.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub conversations: Vec<Conversation>,
    pub labels: LabelSet,
}

/// Parses corpus text. With `require_labels` every line needs a non-empty label;
/// otherwise an empty label column (or a two-column line) means "unlabelled".
///
/// Utterances that normalize to no tokens are dropped with a warning.
pub fn parse_conversations(text: &str, require_labels: bool) -> Result<Vec<Conversation>> {
    let mut conversations = Vec::new();
    let mut current: Vec<Utterance> = Vec::new();
    let flush = |current: &mut Vec<Utterance>, conversations: &mut Vec<Conversation>| {
        if !current.is_empty() {
            let id = format!("conv{:05}", conversations.len() + 1);
            conversations.push(Conversation {
                id,
                utterances: std::mem::take(current),
            });
        }
    };
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            flush(&mut current, &mut conversations);
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, '\t').collect();
        let (speaker, label, raw) = match fields.as_slice() {
            [s, l, r] => (*s, *l, *r),
            [s, r] if !require_labels => (*s, "", *r),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "expected speaker<TAB>act_label<TAB>text".into(),
                })
            }
        };
        let label = label.trim();
        if require_labels && label.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "missing act label".into(),
            });
        }
        let tokens = normalize_and_tokenize(raw);
        if tokens.is_empty() {
            log::warn!("line {line_no}: utterance has no tokens after normalization, dropped");
            continue;
        }
        current.push(Utterance {
            speaker: speaker.trim().to_string(),
            tokens,
            label: (!label.is_empty()).then(|| label.to_string()),
        });
    }
    flush(&mut current, &mut conversations);
    Ok(conversations)
}

/// Reads a labelled corpus file and collects its label set.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let conversations = parse_conversations(&text, true)?;
    if conversations.is_empty() {
        return Err(Error::Data(format!("{}: no conversations", path.display())));
    }
    let labels = LabelSet::collect(&conversations);
    Ok(Corpus {
        conversations,
        labels,
    })
}

/// Serializes conversations in the corpus format (tokens joined by single spaces).
pub fn format_conversations(conversations: &[Conversation]) -> String {
    let mut out = String::new();
    for (i, conv) in conversations.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for u in &conv.utterances {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                u.speaker,
                u.label.as_deref().unwrap_or(""),
                u.tokens.join(" ")
            );
        }
    }
    out
}

pub fn write_corpus(path: &Path, conversations: &[Conversation]) -> Result<()> {
    std::fs::write(path, format_conversations(conversations)).map_err(|e| Error::io(path, e))
}

/// Deterministically holds out `fraction` of the conversations (at least one when
/// there are two or more). Returns `(train, held_out)`, each in original order.
pub fn split_conversations(
    conversations: &[Conversation],
    fraction: f64,
    seed: u64,
) -> (Vec<Conversation>, Vec<Conversation>) {
    let n = conversations.len();
    let mut held = ((n as f64) * fraction).round() as usize;
    if n >= 2 && fraction > 0.0 {
        held = held.clamp(1, n - 1);
    } else {
        held = held.min(n.saturating_sub(1));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_held = vec![false; n];
    for &i in &order[..held] {
        is_held[i] = true;
    }
    let mut train = Vec::with_capacity(n - held);
    let mut valid = Vec::with_capacity(held);
    for (conv, held) in conversations.iter().zip(is_held) {
        if held {
            valid.push(conv.clone());
        } else {
            train.push(conv.clone());
        }
    }
    (train, valid)
}
