//! The full classifier: word embeddings, hierarchical encoder, episodic memory and
//! the softmax act head, evaluated over a whole [`Batch`] at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, EmbeddingTable, PAD};
use crate::encoder::{encode_history, step_masks, GruCell, PyramidEncoder};
use crate::error::{Error, Result};
use crate::memory::{EpisodicMemory, Facts};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::training::classifier::{predict, Classifier};

/// Architecture sizes stored with a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub attention_dim: usize,
    pub pyramid_layers: usize,
    pub memory_passes: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: ParamId,
    pub encoder: PyramidEncoder,
    pub history: GruCell,
    pub memory: EpisodicMemory,
    pub classifier: Classifier,
}

/// Inverted dropout with its own seeded stream.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - self.rate);
        let mut mask = Tensor::zeros(tape.shape(x));
        for m in mask.data_mut() {
            if self.rng.gen::<f64>() >= self.rate {
                *m = scale;
            }
        }
        let mask = tape.constant(mask);
        Ok(tape.mul(x, mask)?)
    }
}

/// Every utterance of a batch as one row: rows `0..B` are the current utterances,
/// followed by each example's history utterances, oldest first.
#[derive(Clone, Debug)]
pub struct Layout {
    pub batch: usize,
    pub steps: usize,
    pub lengths: Vec<usize>,
    pub owner: Vec<usize>,
    /// `[steps][rows]` token ids, [`PAD`] past each length.
    pub step_ids: Vec<Vec<usize>>,
    /// Utterance rows of each example's history.
    pub history_rows: Vec<Vec<usize>>,
    pub history_slots: usize,
    pub labels: Vec<usize>,
}

impl Layout {
    pub fn new(batch: &Batch) -> Result<Self> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let mut utterances: Vec<&[usize]> = (0..n).map(|i| batch.current_tokens(i)).collect();
        let mut owner: Vec<usize> = (0..n).collect();
        let mut history_rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut rows = Vec::with_capacity(batch.history_counts[i]);
            for j in 0..batch.history_counts[i] {
                rows.push(utterances.len());
                utterances.push(batch.history_tokens(i, j));
                owner.push(i);
            }
            history_rows.push(rows);
        }
        if let Some(u) = utterances.iter().position(|u| u.is_empty()) {
            return Err(Error::Data(format!("utterance {u} of the batch has no tokens")));
        }
        let steps = batch.max_len;
        let step_ids = (0..steps)
            .map(|t| utterances.iter().map(|u| u.get(t).copied().unwrap_or(PAD)).collect())
            .collect();
        Ok(Layout {
            batch: n,
            steps,
            lengths: utterances.iter().map(|u| u.len()).collect(),
            owner,
            step_ids,
            history_rows,
            history_slots: batch.history_slots,
            labels: batch.labels.clone(),
        })
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }
}

/// Handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// Per-step embedded (and perturbed) inputs `[rows × d]`, before dropout.
    pub embedded: Vec<Var>,
    pub logits: Var,
    /// Attention weights `[B × K]`, one per memory pass.
    pub attention: Vec<Var>,
    pub fact_slots: usize,
    pub fact_mask: Vec<bool>,
    /// Number of facts from the current utterance, per example.
    pub utterance_facts: Vec<usize>,
}

impl Model {
    /// A freshly initialized model with a random embedding table.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, init_range: f64, rng: &mut R) -> Self {
        let mut table = Tensor::uniform(&[config.vocab_size, config.dim], init_range, rng);
        table.data_mut()[PAD * config.dim..(PAD + 1) * config.dim].fill(0.0);
        Self::build(config, table, init_range, rng)
    }

    /// A freshly initialized model around a prepared embedding table.
    pub fn with_embeddings<R: Rng + ?Sized>(
        config: ModelConfig,
        table: &EmbeddingTable,
        init_range: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if table.matrix.shape() != [config.vocab_size, config.dim] {
            return Err(Error::Config(format!(
                "embedding table has shape {:?}, expected [{}, {}]",
                table.matrix.shape(),
                config.vocab_size,
                config.dim
            )));
        }
        Ok(Self::build(config, table.matrix.clone(), init_range, rng))
    }

    fn build<R: Rng + ?Sized>(config: ModelConfig, table: Tensor, range: f64, rng: &mut R) -> Self {
        let d = config.dim;
        let mut store = ParamStore::new();
        let embedding = store.add("embedding", table);
        let encoder = PyramidEncoder::new(&mut store, config.pyramid_layers, d, d, range, rng);
        let history = GruCell::new(&mut store, "history", d, d, range, rng);
        let memory = EpisodicMemory::new(&mut store, d, config.attention_dim, range, rng);
        let classifier = Classifier::new(&mut store, d, config.num_classes, range, rng);
        Model {
            config,
            store,
            embedding,
            encoder,
            history,
            memory,
            classifier,
        }
    }

    /// Records the whole network on `tape`. `perturbation`, when given, holds one
    /// `[rows × d]` tensor per step added to the embedded inputs; rows past an
    /// utterance's length are ignored.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layout: &Layout,
        mut dropout: Option<&mut Dropout>,
        perturbation: Option<&[Tensor]>,
    ) -> Result<Forward> {
        let d = self.config.dim;
        let rows = layout.rows();
        if let Some(r) = perturbation {
            if r.len() != layout.steps || r.iter().any(|t| t.shape() != [rows, d]) {
                return Err(TensorError::Invalid {
                    op: "perturbation",
                    msg: format!("expected {} tensors of shape [{rows}, {d}]", layout.steps),
                }
                .into());
            }
        }
        let mut embedded = Vec::with_capacity(layout.steps);
        let mut inputs = Vec::with_capacity(layout.steps);
        for t in 0..layout.steps {
            let mut e = tape.gather_rows(p[self.embedding], &layout.step_ids[t])?;
            if let Some(r) = perturbation {
                let mut r = r[t].clone();
                for (u, &len) in layout.lengths.iter().enumerate() {
                    if t >= len {
                        r.data_mut()[u * d..(u + 1) * d].fill(0.0);
                    }
                }
                let r = tape.constant(r);
                e = tape.add(e, r)?;
            }
            embedded.push(e);
            inputs.push(match dropout.as_deref_mut() {
                Some(drop) => drop.apply(tape, e)?,
                None => e,
            });
        }

        let encoded = self.encoder.encode(tape, p, &inputs, &layout.lengths)?;
        let top_steps = encoded.states.len();
        let b = layout.batch;
        let counts: Vec<usize> = layout.history_rows.iter().map(Vec::len).collect();
        let mut history = Vec::new();
        if layout.history_slots > 0 {
            let summaries = (0..layout.history_slots)
                .map(|j| {
                    let idx: Vec<usize> = layout.history_rows.iter().map(|h| h.get(j).copied().unwrap_or(0)).collect();
                    tape.gather_rows(encoded.summary, &idx)
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let masks = step_masks(tape, &counts, layout.history_slots, d);
            history = encode_history(tape, p, &self.history, &summaries, &masks)?;
        }

        let utterance_facts: Vec<usize> = encoded.lengths[..b].to_vec();
        let slots = (0..b).map(|i| utterance_facts[i] + counts[i]).max().unwrap_or(0);
        let mut index = Vec::with_capacity(b * slots);
        let mut mask = Vec::with_capacity(b * slots);
        for i in 0..b {
            for k in 0..slots {
                let (row, live) = if k < utterance_facts[i] {
                    (k * rows + i, true)
                } else if k - utterance_facts[i] < counts[i] {
                    (top_steps * rows + (k - utterance_facts[i]) * b + i, true)
                } else {
                    (0, false)
                };
                index.push(row);
                mask.push(live);
            }
        }
        let mut parts = encoded.states.clone();
        parts.extend(history);
        let table = tape.concat(&parts, 0)?;
        let fact_rows = tape.gather_rows(table, &index)?;
        let facts = Facts::from_rows(tape, fact_rows, b, slots, mask)?;

        let episodes = self
            .memory
            .run_episodes(tape, p, &facts, self.config.memory_passes)?;
        let mut joined = tape.concat(&[episodes.question_rows, episodes.memory], 1)?;
        if let Some(drop) = dropout {
            joined = drop.apply(tape, joined)?;
        }
        let logits = self.classifier.logits(tape, p, joined)?;
        Ok(Forward {
            embedded,
            logits,
            attention: episodes.attention,
            fact_slots: slots,
            fact_mask: facts.mask,
            utterance_facts,
        })
    }

    /// Class probabilities `[B × C]` with dropout off.
    pub fn probabilities(&self, batch: &Batch) -> Result<Tensor> {
        let layout = Layout::new(batch)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &p, &layout, None, None)?;
        let probs = predict(&mut tape, out.logits)?;
        Ok(tape.value(probs).clone())
    }

    /// Arg-max class per example.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<usize>> {
        let probs = self.probabilities(batch)?;
        Ok(argmax_rows(&probs))
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode_examples, parse_conversations, LabelSet};
    use crate::training::classifier::nll_loss;

    fn micro() -> (Model, Vec<Batch>, Vec<crate::corpus::EncodedExample>) {
        let text = "a\tq\thow are you ?\nb\tans\ti am fine thanks\na\tst\tthe trip was long and the city was nice\nb\tbc\tyeah\n\n\
a\tq\twhere are you ?\nb\tans\tat home\n";
        let convs = parse_conversations(text, true).unwrap();
        let vocab = build_vocab(&convs, 1).unwrap();
        let labels = LabelSet::collect(&convs);
        let examples = encode_examples(&convs, &vocab, Some(&labels), Some(2), 118).unwrap();
        let config = ModelConfig {
            vocab_size: vocab.len(),
            num_classes: labels.len(),
            dim: 6,
            attention_dim: 5,
            pyramid_layers: 2,
            memory_passes: 3,
        };
        let model = Model::new(config, 0.3, &mut ChaCha8Rng::seed_from_u64(3));
        let batches = crate::corpus::batch_examples(&examples, 6, None).unwrap();
        (model, batches, examples)
    }

    #[test]
    fn layout_lists_current_then_history_rows() {
        let (_, batches, _) = micro();
        let l = Layout::new(&batches[0]).unwrap();
        assert_eq!(l.batch, 6);
        // histories: 0, 1, 2, 2, 0, 1
        assert_eq!(l.rows(), 6 + 6);
        assert_eq!(l.history_rows[2], vec![7, 8]);
        assert_eq!(l.owner[7], 2);
        assert_eq!(l.step_ids.len(), batches[0].max_len);
    }

    #[test]
    fn forward_shapes_and_normalized_attention() {
        let (model, batches, _) = micro();
        let layout = Layout::new(&batches[0]).unwrap();
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let out = model.forward(&mut tape, &p, &layout, None, None).unwrap();
        assert_eq!(tape.shape(out.logits), [6, 4]);
        assert_eq!(out.attention.len(), 3);
        for a in &out.attention {
            for (row, m) in tape.value(*a).data().chunks(out.fact_slots).zip(out.fact_mask.chunks(out.fact_slots)) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (w, live) in row.iter().zip(m) {
                    if !live {
                        assert_eq!(*w, 0.0);
                    }
                }
            }
        }
        // the long utterance (9 tokens) gives ⌈9/2⌉ facts, plus 2 history facts
        assert_eq!(out.utterance_facts[2], 5);
        assert_eq!(out.fact_slots, 7);
    }

    #[test]
    fn batching_does_not_change_predictions() {
        let (model, batches, examples) = micro();
        let together = model.probabilities(&batches[0]).unwrap();
        for (i, ex) in examples.iter().enumerate() {
            let alone = model.probabilities(&Batch::from_examples(&[ex])).unwrap();
            for (x, y) in alone.data().iter().zip(together.row(i)) {
                assert!((x - y).abs() < 1e-12, "example {i}");
            }
        }
    }

    #[test]
    fn zero_perturbation_matches_plain_lookup() {
        let (model, batches, _) = micro();
        let layout = Layout::new(&batches[0]).unwrap();
        let zeros: Vec<Tensor> = (0..layout.steps).map(|_| Tensor::zeros(&[layout.rows(), 6])).collect();
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let a = model.forward(&mut tape, &p, &layout, None, None).unwrap();
        let b = model.forward(&mut tape, &p, &layout, None, Some(&zeros)).unwrap();
        assert_eq!(tape.value(a.logits), tape.value(b.logits));
        let bad = vec![Tensor::zeros(&[1, 6])];
        assert!(model.forward(&mut tape, &p, &layout, None, Some(&bad)).is_err());
    }

    #[test]
    fn pad_positions_ignore_perturbation() {
        let (model, batches, _) = micro();
        let layout = Layout::new(&batches[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<Tensor> = (0..layout.steps)
            .map(|t| {
                let mut r = Tensor::uniform(&[layout.rows(), 6], 1.0, &mut rng);
                for (u, &len) in layout.lengths.iter().enumerate() {
                    if t < len {
                        r.data_mut()[u * 6..(u + 1) * 6].fill(0.0);
                    }
                }
                r
            })
            .collect();
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let a = model.forward(&mut tape, &p, &layout, None, None).unwrap();
        let b = model.forward(&mut tape, &p, &layout, None, Some(&noise)).unwrap();
        assert_eq!(tape.value(a.logits), tape.value(b.logits));
        for (t, e) in b.embedded.iter().enumerate() {
            for (u, &len) in layout.lengths.iter().enumerate() {
                if t >= len {
                    assert!(tape.value(*e).row(u).iter().all(|v| *v == 0.0));
                }
            }
        }
    }

    #[test]
    fn gradient_reaches_question_and_embedded_inputs() {
        let (model, batches, _) = micro();
        let layout = Layout::new(&batches[0]).unwrap();
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let out = model.forward(&mut tape, &p, &layout, None, None).unwrap();
        let loss = nll_loss(&mut tape, out.logits, &layout.labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gq = grads.get(p[model.memory.question]);
        assert!(gq.data().iter().any(|g| *g != 0.0));
        let live = out.embedded.iter().any(|e| grads.get(*e).data().iter().any(|g| *g != 0.0));
        assert!(live);
    }

    #[test]
    fn dropout_is_seeded() {
        let (model, batches, _) = micro();
        let layout = Layout::new(&batches[0]).unwrap();
        let run = |seed| {
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let mut drop = Dropout::new(0.5, seed);
            let out = model.forward(&mut tape, &p, &layout, Some(&mut drop), None).unwrap();
            tape.value(out.logits).clone()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }
}
