use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dialogue_act::checkpoint::{round_to_storage, Checkpoint};
use dialogue_act::convert::{convert_files, load_label_map, SourceFormat};
use dialogue_act::corpus::{
    build_vocab, encode_examples, load_corpus, load_embeddings, parse_conversations, split_conversations,
    write_corpus, LabelSet,
};
use dialogue_act::eval::{confusion_matrix, predict_examples};
use dialogue_act::gradcheck::{gradcheck, GradcheckOptions};
use dialogue_act::model::{Model, ModelConfig};
use dialogue_act::predict::{utterance_text, Predictor};
use dialogue_act::synth::{inject_noise, synth_corpus};
use dialogue_act::training::{fit, TrainConfig};
use dialogue_act::{Error, Result};

/// Dialogue act classification with an episodic memory network.
#[derive(Parser)]
#[command(name = "dact", version)]
struct Cli {
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Swda,
    Maptask,
}

#[derive(Subcommand)]
enum Command {
    /// Convert native SwDA CSV or MapTask files into the conversation format.
    Convert {
        #[arg(long, value_enum)]
        format: Format,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// TAB-separated `raw_tag label` lines.
        #[arg(long)]
        label_map: Option<PathBuf>,
    },
    /// Train a model and save a checkpoint plus an epoch log.
    Train {
        /// Flat JSON training configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        /// Validation corpus; without it a fraction of the training set is held out.
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Epoch log CSV (default: `<out>.epochs.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Word vectors, `token v1 .. vd` per line.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Score a labelled corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON (default: standard output).
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        confusion: Option<PathBuf>,
        /// Per-fact attention weights for every pass.
        #[arg(long)]
        emit_attention: Option<PathBuf>,
    },
    /// Label utterances read from standard input; a blank line starts a new conversation.
    Predict {
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a micro model.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Generate the synthetic act-grammar corpus.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        conversations: usize,
        #[arg(long, default_value_t = 6)]
        acts: usize,
        /// Fraction of tokens replaced by filler words.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Writes a line to standard output; a closed pipe (`dact eval | head`) is not an error.
fn say(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train(
    config: Option<&Path>,
    train: &Path,
    valid: Option<&Path>,
    out: &Path,
    log_path: Option<&Path>,
    embeddings: Option<&Path>,
) -> Result<()> {
    let config = match config {
        Some(p) => TrainConfig::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TrainConfig::default(),
    };
    let corpus = load_corpus(train)?;
    let (train_convs, valid_convs) = match valid {
        Some(p) => (corpus.conversations, load_corpus(p)?.conversations),
        None => split_conversations(&corpus.conversations, config.valid_fraction, config.seed),
    };
    if valid_convs.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let all: Vec<_> = train_convs.iter().chain(&valid_convs).cloned().collect();
    let labels = LabelSet::collect(&all);
    let vocab = build_vocab(&train_convs, config.min_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let table = load_embeddings(
        embeddings,
        &vocab,
        config.dim,
        config.init_range,
        config.trainable_embeddings,
        &mut rng,
    )?;
    let model_config = ModelConfig {
        vocab_size: vocab.len(),
        num_classes: labels.len(),
        dim: config.dim,
        attention_dim: config.attention_dim,
        pyramid_layers: config.pyramid_layers,
        memory_passes: config.memory_passes,
    };
    let model = Model::with_embeddings(model_config, &table, config.init_range, &mut rng)?;
    let encode = |convs| encode_examples(convs, &vocab, Some(&labels), config.history_window, config.max_utterance_len);
    let (tr, va) = (encode(&train_convs)?, encode(&valid_convs)?);
    log::info!("{} training and {} validation examples, vocabulary {}", tr.len(), va.len(), vocab.len());
    let result = fit(model, &tr, &va, &config)?;
    let mut model = result.model.clone();
    round_to_storage(&mut model);
    Checkpoint {
        model,
        train: config,
        vocab,
        labels,
    }
    .save(out)?;
    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".epochs.csv");
        PathBuf::from(p)
    });
    write_file(&log_path, &result.log_csv())?;
    say(&format!(
        "best epoch {} of {}, validation loss {:.4}",
        result.stopped.best_epoch,
        result.stopped.epochs_run,
        result.log[result.stopped.best_epoch - 1].valid_loss
    ))
}

fn eval(model: &Path, data: &Path, metrics: Option<&Path>, confusion: Option<&Path>, attention: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(model)?;
    let text = std::fs::read_to_string(data).map_err(|e| Error::io(data, e))?;
    let convs = parse_conversations(&text, true)?;
    let examples = encode_examples(
        &convs,
        &ckpt.vocab,
        Some(&ckpt.labels),
        ckpt.train.history_window,
        ckpt.train.max_utterance_len,
    )?;
    let (predictions, attention_csv) = predict_examples(&ckpt.model, &examples, ckpt.train.batch_size, attention.is_some())?;
    let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let report = confusion_matrix(&predictions, &gold, &ckpt.labels)?;
    let json = serde_json::to_string_pretty(&report.metrics_json()).expect("metrics serialize");
    match metrics {
        Some(p) => {
            write_file(p, &json)?;
            say(&format!("accuracy {:.4} over {} utterances", report.accuracy, report.total()))?;
        }
        None => say(&json)?,
    }
    if let Some(p) = confusion {
        write_file(p, &report.confusion_csv()?)?;
    }
    if let (Some(p), Some(csv)) = (attention, attention_csv) {
        write_file(p, &csv)?;
    }
    Ok(())
}

fn predict(model: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(model)?;
    let mut predictor = Predictor::new(&ckpt);
    for line in std::io::stdin().lock().lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            predictor.reset();
            continue;
        }
        let label = predictor.push(utterance_text(&line))?;
        say(label)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert {
            format,
            input,
            out,
            label_map,
        } => {
            let map = label_map.as_deref().map(load_label_map).transpose()?;
            let format = match format {
                Format::Swda => SourceFormat::Swda,
                Format::Maptask => SourceFormat::MapTask,
            };
            let inputs: Vec<&Path> = input.iter().map(PathBuf::as_path).collect();
            let convs = convert_files(format, &inputs, map.as_ref())?;
            write_corpus(&out, &convs)?;
            let n: usize = convs.iter().map(|c| c.utterances.len()).sum();
            say(&format!("{} conversations, {n} utterances", convs.len()))
        }
        Command::Train {
            config,
            train: path,
            valid,
            out,
            log,
            embeddings,
        } => train(
            config.as_deref(),
            &path,
            valid.as_deref(),
            &out,
            log.as_deref(),
            embeddings.as_deref(),
        ),
        Command::Eval {
            model,
            data,
            metrics,
            confusion,
            emit_attention,
        } => eval(&model, &data, metrics.as_deref(), confusion.as_deref(), emit_attention.as_deref()),
        Command::Predict { model } => predict(&model),
        Command::Gradcheck { seed } => {
            let report = gradcheck(&GradcheckOptions {
                seed,
                ..GradcheckOptions::default()
            })?;
            for (name, err) in &report.tensors {
                say(&format!("{name:<28} {err:.3e}"))?;
            }
            let worst = report.max_rel_error();
            say(&format!("max relative error {worst:.3e} over {} entries", report.checked))?;
            if worst < 1e-4 {
                Ok(())
            } else {
                Err(Error::Numeric(format!("gradient check failed: {worst:.3e} >= 1e-4")))
            }
        }
        Command::Synth {
            seed,
            conversations,
            acts,
            noise,
            out,
        } => {
            if !(0.0..=1.0).contains(&noise) {
                return Err(Error::Config("noise must be in [0, 1]".into()));
            }
            let mut convs = synth_corpus(seed, conversations, acts)?;
            if noise > 0.0 {
                convs = inject_noise(&convs, noise, seed.wrapping_add(1));
            }
            write_corpus(&out, &convs)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
