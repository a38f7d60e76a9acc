//! Acceptance criteria 1-10. Each test prints one PASS/FAIL line to standard error
//! (bypassing the test harness capture) and then asserts the same condition.

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use dialogue_act::checkpoint::Checkpoint;
use dialogue_act::corpus::{
    batch_examples, build_vocab, encode_examples, split_conversations, Batch, Conversation, EncodedExample, LabelSet,
    Vocabulary,
};
use dialogue_act::encoder::PyramidEncoder;
use dialogue_act::eval::predict_examples;
use dialogue_act::gradcheck::{gradcheck, GradcheckOptions};
use dialogue_act::model::{Layout, Model, ModelConfig};
use dialogue_act::params::ParamStore;
use dialogue_act::synth::{inject_noise, is_context_dependent, synth_corpus};
use dialogue_act::tensor::{Tape, Tensor};
use dialogue_act::training::classifier::{nll_loss, predict};
use dialogue_act::training::{
    adversarial_perturbation, fit, run_with_early_stopping, Adam, AdvSign, TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: usize, title: &str, pass: bool, detail: &str) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance {id:>2} {verdict}  {title}: {detail}");
    pass
}

const DIM: usize = 16;

struct Data {
    vocab: Vocabulary,
    labels: LabelSet,
    train: Vec<EncodedExample>,
    held: Vec<EncodedExample>,
    train_cd: Vec<bool>,
    held_cd: Vec<bool>,
}

fn context_flags(convs: &[Conversation]) -> Vec<bool> {
    convs
        .iter()
        .flat_map(|c| c.utterances.iter().map(|u| is_context_dependent(u.label.as_deref().unwrap())))
        .collect()
}

fn synth_data(seed: u64, window: Option<usize>) -> Data {
    let convs = synth_corpus(seed, 200, 6).unwrap();
    let (train, held) = split_conversations(&convs, 0.2, seed);
    let vocab = build_vocab(&train, 2).unwrap();
    let labels = LabelSet::collect(&convs);
    let encode = |c: &[Conversation]| encode_examples(c, &vocab, Some(&labels), window, 118).unwrap();
    Data {
        train: encode(&train),
        held: encode(&held),
        train_cd: context_flags(&train),
        held_cd: context_flags(&held),
        vocab,
        labels,
    }
}

fn small_config(data: &Data, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: data.vocab.len(),
        num_classes: data.labels.len(),
        dim: DIM,
        attention_dim: DIM,
        pyramid_layers: layers,
        memory_passes: 3,
    }
}

fn train_config(seed: u64, epsilon: f64, window: Option<usize>, layers: usize) -> TrainConfig {
    TrainConfig {
        dim: DIM,
        attention_dim: DIM,
        batch_size: 32,
        epsilon,
        seed,
        history_window: window,
        pyramid_layers: layers,
        ..TrainConfig::default()
    }
}

/// Accuracy over the examples whose flag is set (all examples when `mask` is `None`).
fn accuracy(model: &Model, examples: &[EncodedExample], mask: Option<&[bool]>) -> f64 {
    let (pred, _) = predict_examples(model, examples, 256, false).unwrap();
    let (mut hit, mut n) = (0, 0);
    for (i, (p, e)) in pred.iter().zip(examples).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            n += 1;
            hit += usize::from(*p == e.label);
        }
    }
    hit as f64 / n as f64
}

#[test]
fn criterion_01_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let r = gradcheck(&GradcheckOptions::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = r.max_rel_error();
    // every parameter tensor plus the embedded inputs
    let expected = {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = ModelConfig {
            vocab_size: 20,
            num_classes: 3,
            dim: 8,
            attention_dim: 8,
            pyramid_layers: 2,
            memory_passes: 2,
        };
        Model::new(config, 0.1, &mut rng).store.len() + 1
    };
    let pass = worst < 1e-4 && secs < 60.0 && r.tensors.len() == expected;
    let detail = format!(
        "max rel. error {worst:.2e} over {} entries in {} tensors, {secs:.1}s",
        r.checked,
        r.tensors.len()
    );
    assert!(report(1, "gradient check", pass, &detail), "{:?}", r.tensors);
}

#[test]
fn criterion_02_fact_count_law() {
    let _g = serial();
    let start = Instant::now();
    let mut mismatches = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for layers in 1..=3usize {
        let mut store = ParamStore::new();
        let enc = PyramidEncoder::new(&mut store, layers, 2, 2, 0.1, &mut rng);
        let lengths: Vec<usize> = (1..=64).collect();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let inputs: Vec<_> = (0..64)
            .map(|_| tape.constant(Tensor::uniform(&[64, 2], 1.0, &mut rng)))
            .collect();
        let out = enc.encode(&mut tape, &p, &inputs, &lengths).unwrap();
        for (t, &got) in lengths.iter().zip(&out.lengths) {
            let want = (t + (1 << (layers - 1)) - 1) >> (layers - 1);
            let live_steps = (0..out.states.len())
                .filter(|&s| tape.value(out.states[s]).row(t - 1).iter().any(|v| *v != 0.0))
                .count();
            if got != want || live_steps != want {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 1.0;
    let detail = format!("{mismatches} mismatches over T in 1..=64, N in 1..=3, {secs:.3}s");
    assert!(report(2, "fact count law", pass, &detail));
}

fn random_batch(rng: &mut ChaCha8Rng, vocab: usize, classes: usize, n: usize) -> Batch {
    let utterance = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.gen_range(1..=9);
        (0..len).map(|_| rng.gen_range(1..vocab)).collect()
    };
    let examples: Vec<EncodedExample> = (0..n)
        .map(|_| {
            let h = rng.gen_range(0..=5);
            EncodedExample {
                current: utterance(rng),
                history: (0..h).map(|_| utterance(rng)).collect(),
                label: rng.gen_range(0..classes),
            }
        })
        .collect();
    let refs: Vec<&EncodedExample> = examples.iter().collect();
    Batch::from_examples(&refs)
}

#[test]
fn criterion_03_normalization() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_alpha, mut worst_p, mut masked_mass) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let config = ModelConfig {
            vocab_size: 12,
            num_classes: rng.gen_range(2..6),
            dim: 4,
            attention_dim: 3,
            pyramid_layers: rng.gen_range(1..=3),
            memory_passes: 3,
        };
        let range = rng.gen_range(0.05..2.0);
        let model = Model::new(config.clone(), range, &mut rng);
        let batch = random_batch(&mut rng, 12, config.num_classes, 3);
        let layout = Layout::new(&batch).unwrap();
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let out = model.forward(&mut tape, &p, &layout, None, None).unwrap();
        let k = out.fact_slots;
        for a in &out.attention {
            for (row, mask) in tape.value(*a).data().chunks(k).zip(out.fact_mask.chunks(k)) {
                worst_alpha = worst_alpha.max((row.iter().sum::<f64>() - 1.0).abs());
                for (w, live) in row.iter().zip(mask) {
                    if !live {
                        masked_mass += w.abs();
                    }
                }
            }
        }
        let probs = predict(&mut tape, out.logits).unwrap();
        for row in tape.value(probs).data().chunks(config.num_classes) {
            worst_p = worst_p.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let pass = worst_alpha < 1e-9 && worst_p < 1e-9 && masked_mass == 0.0;
    let detail = format!(
        "1000 fixtures: max |Σα−1| {worst_alpha:.1e}, max |Σp−1| {worst_p:.1e}, masked mass {masked_mass}"
    );
    assert!(report(3, "normalization", pass, &detail));
}

/// Summed NLL of `batch` with the embedded inputs shifted by `r`.
fn perturbed_loss(model: &Model, layout: &Layout, r: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let out = model.forward(&mut tape, &p, layout, None, Some(r)).unwrap();
    let loss = nll_loss(&mut tape, out.logits, &layout.labels).unwrap();
    tape.value(loss).item()
}

fn input_gradients(model: &Model, layout: &Layout) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let out = model.forward(&mut tape, &p, layout, None, None).unwrap();
    let loss = nll_loss(&mut tape, out.logits, &layout.labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    out.embedded.iter().map(|e| grads.get(*e)).collect()
}

fn live_norm(layout: &Layout, r: &[Tensor], example: usize) -> f64 {
    let mut s = 0.0;
    for (t, rt) in r.iter().enumerate() {
        for u in 0..layout.rows() {
            if layout.owner[u] == example && t < layout.lengths[u] {
                s += rt.row(u).iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    s.sqrt()
}

#[test]
fn criterion_04_adversarial_geometry() {
    let _g = serial();
    // norm constraint on random models
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_norm = 0.0f64;
    let mut checked = 0;
    for _ in 0..200 {
        let config = ModelConfig {
            vocab_size: 12,
            num_classes: 3,
            dim: 4,
            attention_dim: 4,
            pyramid_layers: 2,
            memory_passes: 2,
        };
        let model = Model::new(config, 0.5, &mut rng);
        let batch = random_batch(&mut rng, 12, 3, 4);
        let layout = Layout::new(&batch).unwrap();
        let g = input_gradients(&model, &layout);
        let eps = rng.gen_range(0.01..5.0);
        let r = adversarial_perturbation(&layout, &g, 4, eps, AdvSign::WorstCase);
        for b in 0..layout.batch {
            if live_norm(&layout, &g, b) > 0.0 {
                worst_norm = worst_norm.max((live_norm(&layout, &r, b) - eps).abs());
                checked += 1;
            }
        }
    }

    // worst-case versus random directions on a trained micro model
    let data = synth_data(4, Some(5));
    let mut model = Model::new(small_config(&data, 2), 0.1, &mut ChaCha8Rng::seed_from_u64(4));
    let mut trainer = Trainer::new(train_config(4, 0.0, Some(5), 2));
    for epoch in 0..8 {
        for batch in batch_examples(&data.train, 32, Some(epoch)).unwrap() {
            trainer.train_step(&mut model, &batch).unwrap();
        }
    }
    let eps = 1e-3;
    let mut wins = 0;
    for trial in 0..200 {
        let ex = &data.held[trial % data.held.len()];
        let layout = Layout::new(&Batch::from_examples(&[ex])).unwrap();
        let g = input_gradients(&model, &layout);
        let r_adv = adversarial_perturbation(&layout, &g, DIM, eps, AdvSign::WorstCase);
        let mut r_rand: Vec<Tensor> = g
            .iter()
            .map(|t| Tensor::uniform(t.shape(), 1.0, &mut rng))
            .collect();
        for (t, rt) in r_rand.iter_mut().enumerate() {
            for u in 0..layout.rows() {
                if t >= layout.lengths[u] {
                    rt.data_mut()[u * DIM..(u + 1) * DIM].fill(0.0);
                }
            }
        }
        let scale = eps / live_norm(&layout, &r_rand, 0);
        for rt in &mut r_rand {
            rt.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        if perturbed_loss(&model, &layout, &r_adv) >= perturbed_loss(&model, &layout, &r_rand) {
            wins += 1;
        }
    }
    let pass = worst_norm < 1e-6 && checked > 0 && wins >= 180;
    let detail = format!(
        "max |‖r‖−ε| {worst_norm:.1e} over {checked} examples; adversarial ≥ random in {wins}/200 trials"
    );
    assert!(report(4, "adversarial geometry", pass, &detail));
}

#[test]
fn criterion_05_adam_steps() {
    let _g = serial();
    // hand evaluation of the update rule for f(θ) = θ²/2, gradient θ
    let (lr, eps) = (0.01, 1e-8);
    let mut hand = Vec::new();
    let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=3 {
        let g = theta;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
        hand.push(theta);
    }
    let mut adam = Adam::new(lr, 0.9, 0.999, eps);
    let mut values = vec![Tensor::vector(vec![1.0])];
    let mut worst = 0.0f64;
    for want in &hand {
        let g = values[0].clone();
        adam.update(&mut values, &[g], &[true]);
        worst = worst.max((values[0].data()[0] - want).abs());
    }
    let pass = worst < 1e-10 && (hand[0] - 0.99).abs() < 1e-7;
    let detail = format!("θ = {:.10}, {:.10}, {:.10}; max deviation {worst:.1e}", hand[0], hand[1], hand[2]);
    assert!(report(5, "Adam steps", pass, &detail));
}

#[test]
fn criterion_06_memory_matters() {
    let _g = serial();
    let start = Instant::now();
    let full = synth_data(7, Some(5));
    let mut model = Model::new(small_config(&full, 2), 0.1, &mut ChaCha8Rng::seed_from_u64(7));
    let mut trainer = Trainer::new(train_config(7, 3.0, Some(5), 2));
    let (mut train_acc, mut held_cd, mut epochs) = (0.0, 0.0, 0);
    for epoch in 1..=300u64 {
        for batch in batch_examples(&full.train, 32, Some(epoch)).unwrap() {
            trainer.train_step(&mut model, &batch).unwrap();
        }
        epochs = epoch;
        train_acc = accuracy(&model, &full.train, None);
        held_cd = accuracy(&model, &full.held, Some(&full.held_cd));
        if train_acc >= 0.99 && held_cd >= 0.90 {
            break;
        }
    }

    let ablated = synth_data(7, Some(0));
    let mut model0 = Model::new(small_config(&ablated, 2), 0.1, &mut ChaCha8Rng::seed_from_u64(7));
    let mut trainer0 = Trainer::new(train_config(7, 3.0, Some(0), 2));
    let ablated_epochs = epochs.max(30);
    for epoch in 1..=ablated_epochs {
        for batch in batch_examples(&ablated.train, 32, Some(epoch)).unwrap() {
            trainer0.train_step(&mut model0, &batch).unwrap();
        }
    }
    let ablated_train_cd = accuracy(&model0, &ablated.train, Some(&ablated.train_cd));
    let ablated_held_cd = accuracy(&model0, &ablated.held, Some(&ablated.held_cd));
    let secs = start.elapsed().as_secs_f64();
    let pass = train_acc >= 0.99
        && held_cd >= 0.90
        && ablated_train_cd <= 0.60
        && ablated_held_cd <= 0.60
        && secs < 600.0;
    let detail = format!(
        "full: train {train_acc:.3}, held-out context-dependent {held_cd:.3} after {epochs} epochs; \
         no history: context-dependent train {ablated_train_cd:.3} / held-out {ablated_held_cd:.3}; {secs:.0}s"
    );
    assert!(report(6, "memory matters", pass, &detail));
}

#[test]
fn criterion_07_adversarial_vs_clean() {
    let _g = serial();
    let start = Instant::now();
    let (mut clean_sum, mut adv_sum) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in 1..=5u64 {
        let data = synth_data(seed, Some(5));
        let test_convs = inject_noise(&synth_corpus(seed + 100, 60, 6).unwrap(), 0.2, seed);
        let test = encode_examples(&test_convs, &data.vocab, Some(&data.labels), Some(5), 118).unwrap();
        let mut accs = [0.0; 2];
        for (i, eps) in [0.0, 3.0].into_iter().enumerate() {
            let config = TrainConfig {
                epochs: 30,
                ..train_config(seed, eps, Some(5), 2)
            };
            let model = Model::new(small_config(&data, 2), 0.1, &mut ChaCha8Rng::seed_from_u64(seed));
            let result = fit(model, &data.train, &data.held, &config).unwrap();
            accs[i] = accuracy(&result.model, &test, None);
        }
        clean_sum += accs[0];
        adv_sum += accs[1];
        per_seed.push(format!("{:.3}/{:.3}", accs[0], accs[1]));
    }
    let (clean, adv) = (clean_sum / 5.0, adv_sum / 5.0);
    let pass = adv >= clean;
    let detail = format!(
        "noisy-test accuracy clean {clean:.4} vs ε=3 {adv:.4} (per seed clean/adv: {}); {:.0}s",
        per_seed.join(" "),
        start.elapsed().as_secs_f64()
    );
    assert!(report(7, "adversarial vs clean", pass, &detail));
}

#[test]
fn criterion_08_early_stopping() {
    let _g = serial();
    let losses = [5.0, 4.0, 3.0, 3.1, 3.2, 3.3, 3.4, 3.5, 0.1, 0.1];
    let config = ModelConfig {
        vocab_size: 5,
        num_classes: 2,
        dim: 2,
        attention_dim: 2,
        pyramid_layers: 1,
        memory_passes: 1,
    };
    let mut model = Model::new(config, 0.1, &mut ChaCha8Rng::seed_from_u64(8));
    let mut snapshots = Vec::new();
    let stopped = run_with_early_stopping(45, 5, &mut model, |m, epoch| {
        // stand-in for one epoch of training: every epoch leaves distinct weights
        let b4 = m.classifier.b4;
        m.store.get_mut(b4).data_mut()[0] = epoch as f64;
        snapshots.push(m.store.clone());
        Ok(losses[epoch - 1])
    })
    .unwrap();
    let restored = model.store == snapshots[2];
    let pass = stopped.epochs_run == 8 && stopped.best_epoch == 3 && restored;
    let detail = format!(
        "stopped after epoch {}, best epoch {}, epoch-3 weights restored: {restored}",
        stopped.epochs_run, stopped.best_epoch
    );
    assert!(report(8, "early stopping", pass, &detail));
}

#[test]
fn criterion_09_determinism_and_persistence() {
    let _g = serial();
    let data = synth_data(9, Some(5));
    let config = TrainConfig {
        epochs: 3,
        ..train_config(9, 3.0, Some(5), 2)
    };
    let run = || {
        let model = Model::new(small_config(&data, 2), 0.1, &mut ChaCha8Rng::seed_from_u64(9));
        fit(model, &data.train, &data.held, &config).unwrap()
    };
    let (a, b) = (run(), run());
    let strip = |r: &dialogue_act::training::FitResult| -> Vec<String> {
        r.log
            .iter()
            .map(|e| {
                let row = e.csv_row();
                row[..row.rfind(',').unwrap()].to_string()
            })
            .collect()
    };
    let same_logs = strip(&a) == strip(&b) && a.model.store == b.model.store;

    let fixture: Vec<EncodedExample> = data.train.iter().chain(&data.held).cycle().take(1000).cloned().collect();
    let before = predict_examples(&a.model, &fixture, 128, false).unwrap().0;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint {
        model: a.model.clone(),
        train: config.clone(),
        vocab: data.vocab.clone(),
        labels: data.labels.clone(),
    }
    .save(&path)
    .unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let after = predict_examples(&loaded.model, &fixture, 128, false).unwrap().0;
    let agree = before.iter().zip(&after).filter(|(x, y)| x == y).count();
    let pass = same_logs && agree == fixture.len();
    let detail = format!("identical epoch logs: {same_logs}; argmax agreement after reload {agree}/1000");
    assert!(report(9, "determinism and persistence", pass, &detail));
}

#[test]
fn criterion_10_pyramid_depth() {
    let _g = serial();
    let start = Instant::now();
    let (mut one, mut two) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in 1..=5u64 {
        let data = synth_data(seed + 20, Some(5));
        let mut accs = [0.0; 2];
        for (i, layers) in [1usize, 2].into_iter().enumerate() {
            let config = TrainConfig {
                epochs: 30,
                ..train_config(seed, 0.0, Some(5), layers)
            };
            let model = Model::new(small_config(&data, layers), 0.1, &mut ChaCha8Rng::seed_from_u64(seed));
            let result = fit(model, &data.train, &data.held, &config).unwrap();
            accs[i] = accuracy(&result.model, &data.held, None);
        }
        one += accs[0];
        two += accs[1];
        per_seed.push(format!("{:.3}/{:.3}", accs[0], accs[1]));
    }
    let (one, two) = (one / 5.0, two / 5.0);
    let pass = two >= one - 0.02;
    let detail = format!(
        "held-out accuracy N=1 {one:.4} vs N=2 {two:.4} (per seed N1/N2: {}); {:.0}s",
        per_seed.join(" "),
        start.elapsed().as_secs_f64()
    );
    assert!(report(10, "pyramid depth", pass, &detail));
}
