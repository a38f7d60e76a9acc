use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::adversarial::adversarial_perturbation;
use super::classifier::nll_loss;
use super::config::{LossReduction, TrainConfig};
use crate::corpus::{Batch, PAD};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Dropout, Forward, Layout, Model};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Outcome of one [`Trainer::train_step`]. Losses are summed over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub clean_loss: f64,
    pub adversarial_loss: f64,
    pub total: f64,
    pub correct: usize,
    pub examples: usize,
}

impl LossReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.examples as f64
    }
}

/// Optimizer state plus the stream that seeds per-step dropout masks.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam,
    rng: ChaCha8Rng,
}

struct Pass {
    loss: f64,
    logits: Tensor,
    param_grads: Vec<Tensor>,
    input_grads: Vec<Tensor>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        let adam = Adam::new(config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d20f);
        Trainer { config, adam, rng }
    }

    fn pass(&mut self, model: &Model, layout: &Layout, perturbation: Option<&[Tensor]>) -> Result<Pass> {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let mut dropout = Dropout::new(self.config.dropout, self.rng.gen());
        let drop = (self.config.dropout > 0.0).then_some(&mut dropout);
        let out = model.forward(&mut tape, &p, layout, drop, perturbation)?;
        let loss = nll_loss(&mut tape, out.logits, &layout.labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is {value} after {} optimizer steps",
                self.adam.steps()
            )));
        }
        let objective = match self.config.loss_reduction {
            LossReduction::Sum => loss,
            LossReduction::Mean => tape.affine(loss, 1.0 / layout.batch as f64, 0.0),
        };
        let grads = tape.backward(objective)?;
        Ok(Pass {
            loss: value,
            logits: tape.value(out.logits).clone(),
            param_grads: p.vars().iter().map(|v| grads.get(*v)).collect(),
            input_grads: input_grads(&grads, &out),
        })
    }

    /// Clean pass, adversarial pass on perturbed embeddings, then one Adam update
    /// on the combined gradient.
    pub fn train_step(&mut self, model: &mut Model, batch: &Batch) -> Result<LossReport> {
        let layout = Layout::new(batch)?;
        let clean = self.pass(model, &layout, None)?;
        let mut grads = clean.param_grads;
        let mut adversarial_loss = 0.0;
        let weight = self.config.adv_weight;
        if self.config.epsilon > 0.0 && weight > 0.0 {
            let r = adversarial_perturbation(
                &layout,
                &clean.input_grads,
                model.config.dim,
                self.config.epsilon,
                self.config.adv_sign,
            );
            let adv = self.pass(model, &layout, Some(&r))?;
            adversarial_loss = adv.loss;
            for (g, a) in grads.iter_mut().zip(&adv.param_grads) {
                for (x, y) in g.data_mut().iter_mut().zip(a.data()) {
                    *x += weight * y;
                }
            }
        }
        let dim = model.config.dim;
        grads[model.embedding.index()].data_mut()[PAD * dim..(PAD + 1) * dim].fill(0.0);
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {}",
                model.store.name(model.store.ids().nth(bad).expect("index in range"))
            )));
        }
        let trainable: Vec<bool> = model
            .store
            .ids()
            .map(|id| id != model.embedding || self.config.trainable_embeddings)
            .collect();
        self.adam.update(model.store.values_mut(), &grads, &trainable);
        let predicted = argmax_rows(&clean.logits);
        let correct = predicted.iter().zip(&layout.labels).filter(|(a, b)| a == b).count();
        Ok(LossReport {
            clean_loss: clean.loss,
            adversarial_loss,
            total: clean.loss + weight * adversarial_loss,
            correct,
            examples: layout.batch,
        })
    }
}

pub(crate) fn input_grads(grads: &Gradients, out: &Forward) -> Vec<Tensor> {
    out.embedded.iter().map(|e: &Var| grads.get(*e)).collect()
}
