use std::fmt::Write as _;
use std::time::Instant;

use super::classifier::nll_loss;
use super::config::TrainConfig;
use super::step::Trainer;
use crate::corpus::{batch_examples, Batch, EncodedExample};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Layout, Model};
use crate::tensor::Tape;

/// Summed loss and hit count over a set of examples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSummary {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

impl LossSummary {
    pub fn mean_loss(&self) -> f64 {
        self.loss / self.count.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count.max(1) as f64
    }
}

/// Loss and accuracy with dropout off.
pub fn evaluate_loss(model: &Model, batches: &[Batch]) -> Result<LossSummary> {
    let mut total = LossSummary::default();
    for batch in batches {
        let layout = Layout::new(batch)?;
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let out = model.forward(&mut tape, &p, &layout, None, None)?;
        let loss = nll_loss(&mut tape, out.logits, &layout.labels)?;
        total.loss += tape.value(loss).item();
        let predicted = argmax_rows(tape.value(out.logits));
        total.correct += predicted.iter().zip(&layout.labels).filter(|(a, b)| a == b).count();
        total.count += layout.batch;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stopped {
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Runs `epoch(state, n)` for `n = 1..=max_epochs`, each returning a validation
/// loss. Stops once `patience` consecutive epochs fail to beat the best loss and
/// leaves `state` at its snapshot from the best epoch.
pub fn run_with_early_stopping<S, F>(max_epochs: usize, patience: usize, state: &mut S, mut epoch: F) -> Result<Stopped>
where
    S: Clone,
    F: FnMut(&mut S, usize) -> Result<f64>,
{
    let mut best: Option<(f64, usize, S)> = None;
    let mut epochs_run = 0;
    for n in 1..=max_epochs {
        let loss = epoch(state, n)?;
        epochs_run = n;
        match &best {
            Some((b, _, _)) if loss >= *b => {}
            _ => best = Some((loss, n, state.clone())),
        }
        let best_epoch = best.as_ref().map_or(n, |b| b.1);
        if n - best_epoch >= patience {
            break;
        }
    }
    let (_, best_epoch, snapshot) = best.ok_or_else(|| Error::Config("at least one epoch is required".into()))?;
    *state = snapshot;
    Ok(Stopped { best_epoch, epochs_run })
}

/// One row of the epoch log. Losses are per-example means.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub clean_loss: f64,
    pub adv_loss: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,clean_loss,adv_loss,valid_loss,valid_accuracy,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.clean_loss, self.adv_loss, self.valid_loss, self.valid_accuracy, self.seconds
        )
    }
}

pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(EpochRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub stopped: Stopped,
}

impl FitResult {
    pub fn log_csv(&self) -> String {
        epoch_log_csv(&self.log)
    }
}

/// Trains with per-epoch reshuffling and early stopping on validation loss.
pub fn fit(model: Model, train: &[EncodedExample], valid: &[EncodedExample], config: &TrainConfig) -> Result<FitResult> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    config.validate()?;
    let valid_batches = batch_examples(valid, config.batch_size, None)?;
    let mut trainer = Trainer::new(config.clone());
    let mut log = Vec::new();
    let mut model = model;
    let stopped = run_with_early_stopping(config.epochs, config.patience, &mut model, |model, epoch| {
        let start = Instant::now();
        let seed = config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64);
        let batches = batch_examples(train, config.batch_size, Some(seed))?;
        let (mut clean, mut adv) = (0.0, 0.0);
        for batch in &batches {
            let report = trainer.train_step(model, batch)?;
            clean += report.clean_loss;
            adv += report.adversarial_loss;
        }
        let v = evaluate_loss(model, &valid_batches)?;
        let record = EpochRecord {
            epoch,
            clean_loss: clean / train.len() as f64,
            adv_loss: adv / train.len() as f64,
            valid_loss: v.mean_loss(),
            valid_accuracy: v.accuracy(),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: clean {:.4} adv {:.4} valid {:.4} acc {:.4}",
            record.clean_loss,
            record.adv_loss,
            record.valid_loss,
            record.valid_accuracy
        );
        log.push(record);
        Ok(v.mean_loss())
    })?;
    Ok(FitResult { model, log, stopped })
}
