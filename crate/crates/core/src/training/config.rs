use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-example losses are combined before differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    Mean,
    Sum,
}

/// Direction of the adversarial step relative to the log-likelihood gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvSign {
    /// `r = −ε·g/‖g‖`: moves against the log-likelihood, raising the loss.
    WorstCase,
    /// `r = +ε·g/‖g‖`.
    Verbatim,
}

/// Every training hyperparameter. Read from flat JSON; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub memory_passes: usize,
    pub dim: usize,
    pub attention_dim: usize,
    pub dropout: f64,
    pub epsilon: f64,
    pub pyramid_layers: usize,
    /// `null` keeps the whole preceding conversation.
    pub history_window: Option<usize>,
    pub min_count: usize,
    pub init_range: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub adv_weight: f64,
    pub max_utterance_len: usize,
    pub valid_fraction: f64,
    pub loss_reduction: LossReduction,
    pub adv_sign: AdvSign,
    pub trainable_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 0.01,
            epochs: 45,
            patience: 5,
            memory_passes: 3,
            dim: 200,
            attention_dim: 200,
            dropout: 0.2,
            epsilon: 3.0,
            pyramid_layers: 2,
            history_window: Some(5),
            min_count: 2,
            init_range: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 1,
            adv_weight: 1.0,
            max_utterance_len: 118,
            valid_fraction: 0.1,
            loss_reduction: LossReduction::Mean,
            adv_sign: AdvSign::WorstCase,
            trainable_embeddings: true,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("patience", self.patience),
            ("memory_passes", self.memory_passes),
            ("dim", self.dim),
            ("attention_dim", self.attention_dim),
            ("pyramid_layers", self.pyramid_layers),
            ("min_count", self.min_count),
            ("max_utterance_len", self.max_utterance_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        check(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive")?;
        check((0.0..1.0).contains(&self.dropout), "dropout must be in [0, 1)")?;
        check(self.epsilon >= 0.0 && self.epsilon.is_finite(), "epsilon must be non-negative")?;
        check(self.adv_weight >= 0.0 && self.adv_weight.is_finite(), "adv_weight must be non-negative")?;
        check(self.init_range > 0.0, "init_range must be positive")?;
        check((0.0..1.0).contains(&self.adam_beta1), "adam_beta1 must be in [0, 1)")?;
        check((0.0..1.0).contains(&self.adam_beta2), "adam_beta2 must be in [0, 1)")?;
        check(self.adam_eps > 0.0, "adam_eps must be positive")?;
        check((0.0..1.0).contains(&self.valid_fraction), "valid_fraction must be in [0, 1)")?;
        Ok(())
    }
}
