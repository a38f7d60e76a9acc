//! Finite-difference check of the whole-model gradient of `ℒ + ℒ_adv`, with the
//! adversarial perturbation held fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Batch, EncodedExample};
use crate::error::Result;
use crate::model::{Layout, Model, ModelConfig};
use crate::tensor::{Tape, Tensor};
use crate::training::classifier::nll_loss;
use crate::training::{adversarial_perturbation, AdvSign};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub dim: usize,
    pub attention_dim: usize,
    pub vocab_size: usize,
    pub classes: usize,
    pub memory_passes: usize,
    pub pyramid_layers: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    pub step: f64,
    pub init_range: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 1,
            dim: 8,
            attention_dim: 8,
            vocab_size: 20,
            classes: 3,
            memory_passes: 2,
            pyramid_layers: 2,
            batch_size: 4,
            epsilon: 3.0,
            step: 1e-5,
            init_range: 0.3,
        }
    }
}

/// Worst relative error per checked tensor.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tensors: Vec<(String, f64)>,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.1).fold(0.0, f64::max)
    }
}

/// Below this magnitude a central difference with step 1e-5 is dominated by
/// round-off (about `|loss|·ε_mach/h ≈ 1e-10`), so errors are measured against it.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn micro_batch(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Batch {
    let utterance = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.gen_range(1..=5);
        (0..len).map(|_| rng.gen_range(1..opts.vocab_size)).collect()
    };
    let examples: Vec<EncodedExample> = (0..opts.batch_size)
        .map(|i| EncodedExample {
            current: utterance(rng),
            history: (0..i % 3).map(|_| utterance(rng)).collect(),
            label: rng.gen_range(0..opts.classes),
        })
        .collect();
    let refs: Vec<&EncodedExample> = examples.iter().collect();
    Batch::from_examples(&refs)
}

/// Clean plus adversarial loss; `delta` shifts the embedded inputs of both passes.
fn total_loss(model: &Model, layout: &Layout, r: &[Tensor], delta: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let clean = model.forward(&mut tape, &p, layout, None, Some(delta))?;
    let l1 = nll_loss(&mut tape, clean.logits, &layout.labels)?;
    let shifted: Vec<Tensor> = r
        .iter()
        .zip(delta)
        .map(|(a, b)| Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()))
        .collect::<std::result::Result<_, _>>()?;
    let adv = model.forward(&mut tape, &p, layout, None, Some(&shifted))?;
    let l2 = nll_loss(&mut tape, adv.logits, &layout.labels)?;
    Ok(tape.value(l1).item() + tape.value(l2).item())
}

/// Compares analytic and central-difference gradients for every parameter tensor
/// and for the embedded inputs on a micro model.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let config = ModelConfig {
        vocab_size: opts.vocab_size,
        num_classes: opts.classes,
        dim: opts.dim,
        attention_dim: opts.attention_dim,
        pyramid_layers: opts.pyramid_layers,
        memory_passes: opts.memory_passes,
    };
    let mut model = Model::new(config, opts.init_range, &mut rng);
    let batch = micro_batch(opts, &mut rng);
    let layout = Layout::new(&batch)?;
    let d = opts.dim;
    let zeros: Vec<Tensor> = (0..layout.steps).map(|_| Tensor::zeros(&[layout.rows(), d])).collect();

    // r from the clean input gradient, then frozen
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let out = model.forward(&mut tape, &p, &layout, None, None)?;
    let loss = nll_loss(&mut tape, out.logits, &layout.labels)?;
    let grads = tape.backward(loss)?;
    let input_grads: Vec<Tensor> = out.embedded.iter().map(|e| grads.get(*e)).collect();
    let r = adversarial_perturbation(&layout, &input_grads, d, opts.epsilon, AdvSign::WorstCase);

    // analytic gradient of the total
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let clean = model.forward(&mut tape, &p, &layout, None, None)?;
    let l1 = nll_loss(&mut tape, clean.logits, &layout.labels)?;
    let adv = model.forward(&mut tape, &p, &layout, None, Some(&r))?;
    let l2 = nll_loss(&mut tape, adv.logits, &layout.labels)?;
    let total = tape.add(l1, l2)?;
    let grads = tape.backward(total)?;
    let param_grads: Vec<Tensor> = p.vars().iter().map(|v| grads.get(*v)).collect();
    let input_grads: Vec<Tensor> = clean
        .embedded
        .iter()
        .zip(&adv.embedded)
        .map(|(a, b)| {
            let (ga, gb) = (grads.get(*a), grads.get(*b));
            let sum = ga.data().iter().zip(gb.data()).map(|(x, y)| x + y).collect();
            Tensor::new(ga.shape().to_vec(), sum).expect("same shape")
        })
        .collect();

    let h = opts.step;
    let mut report = GradcheckReport {
        tensors: Vec::new(),
        checked: 0,
    };
    let ids: Vec<_> = model.store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..model.store.get(id).numel() {
            let orig = model.store.get(id).data()[k];
            model.store.get_mut(id).data_mut()[k] = orig + h;
            let plus = total_loss(&model, &layout, &r, &zeros)?;
            model.store.get_mut(id).data_mut()[k] = orig - h;
            let minus = total_loss(&model, &layout, &r, &zeros)?;
            model.store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(param_grads[i].data()[k], numeric));
            report.checked += 1;
        }
        report.tensors.push((model.store.name(id).to_string(), worst));
    }

    let mut worst = 0.0f64;
    for t in 0..layout.steps {
        for u in 0..layout.rows() {
            if t >= layout.lengths[u] {
                continue;
            }
            for j in 0..d {
                let mut delta = zeros.clone();
                delta[t].data_mut()[u * d + j] = h;
                let plus = total_loss(&model, &layout, &r, &delta)?;
                delta[t].data_mut()[u * d + j] = -h;
                let minus = total_loss(&model, &layout, &r, &delta)?;
                let numeric = (plus - minus) / (2.0 * h);
                worst = worst.max(relative_error(input_grads[t].data()[u * d + j], numeric));
                report.checked += 1;
            }
        }
    }
    report.tensors.push(("embedded inputs".to_string(), worst));
    Ok(report)
}
