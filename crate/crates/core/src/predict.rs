//! Online prediction with a rolling per-conversation history.

use std::collections::VecDeque;

use crate::checkpoint::Checkpoint;
use crate::corpus::{normalize_and_tokenize, Batch, EncodedExample, UNK};
use crate::error::Result;

pub struct Predictor<'a> {
    checkpoint: &'a Checkpoint,
    history: VecDeque<Vec<usize>>,
}

impl<'a> Predictor<'a> {
    pub fn new(checkpoint: &'a Checkpoint) -> Self {
        Predictor {
            checkpoint,
            history: VecDeque::new(),
        }
    }

    /// Starts a new conversation.
    pub fn reset(&mut self) {
        self.history.clear();
    }

    /// Labels `text` given the utterances seen since the last reset, then adds it to
    /// the history. Text with no tokens after normalization is read as one `<unk>`.
    pub fn push(&mut self, text: &str) -> Result<&'a str> {
        let ckpt = self.checkpoint;
        let mut ids = ckpt.vocab.encode(&normalize_and_tokenize(text));
        ids.truncate(ckpt.train.max_utterance_len);
        if ids.is_empty() {
            ids.push(UNK);
        }
        let example = EncodedExample {
            current: ids.clone(),
            history: self.history.iter().cloned().collect(),
            label: 0,
        };
        let predicted = ckpt.model.predict_batch(&Batch::from_examples(&[&example]))?[0];
        self.history.push_back(ids);
        if let Some(w) = ckpt.train.history_window {
            while self.history.len() > w {
                self.history.pop_front();
            }
        }
        Ok(ckpt.labels.name(predicted))
    }
}

/// The text column of a prediction input line: the third TAB field, else the
/// second, else the whole line.
pub fn utterance_text(line: &str) -> &str {
    let fields: Vec<&str> = line.splitn(3, '\t').collect();
    fields.last().copied().unwrap_or("")
}
