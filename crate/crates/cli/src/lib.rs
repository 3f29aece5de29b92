//! Command-line front end: vocabulary building, batch preparation, training,
//! translation, evaluation and gradient checking behind one binary.
//!
//! Directory conventions shared between subcommands:
//!
//! ```text
//! make-batches --out D    D/batches.tsv, D/src.vocab, D/tgt.vocab
//! train --out M           M/model.ckpt, M/train.log, M/src.vocab, M/tgt.vocab,
//!                         M/src.emb, M/tgt.emb (binary embedding caches)
//! ```
//!
//! `translate` and `eval` look for vocabularies and embeddings next to the
//! checkpoint unless given explicitly.

use std::fs::{self, File};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use grumt::corpus::{
    self, build_vocabulary, encode, encode_parallel, make_batches, read_batches, read_parallel,
    read_sentences, render, Side, Vocabulary, DEFAULT_BATCH_SIZE, DEFAULT_MAX_LEN,
    DEFAULT_VOCAB_SIZE,
};
use grumt::embeddings::{load_embeddings, EmbeddingTable};
use grumt::gradcheck::{self, DEFAULT_INSTANCES, DEFAULT_THRESHOLD};
use grumt::training::{
    embedding_seed, partial_path, train_with, Checkpoint, TrainEvent, TrainingConfig,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
use grumt::translator::{Averaging, PrefixMode, Translator};

pub const BATCHES_FILE: &str = "batches.tsv";
pub const SOURCE_VOCAB_FILE: &str = "src.vocab";
pub const TARGET_VOCAB_FILE: &str = "tgt.vocab";
pub const SOURCE_EMB_FILE: &str = "src.emb";
pub const TARGET_EMB_FILE: &str = "tgt.emb";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.log";

#[derive(Parser, Debug)]
#[command(name = "grumt", about = "Stacked-GRU next-word translation model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a frequency-ranked vocabulary from a tokenized text file.
    BuildVocab {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a parallel corpus and group it into equal-shape batches.
    MakeBatches {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        src_vocab: PathBuf,
        #[arg(long)]
        tgt_vocab: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
        batch_size: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on prepared batches.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by make-batches.
        #[arg(long)]
        batches: PathBuf,
        #[arg(long)]
        src_emb: PathBuf,
        #[arg(long)]
        tgt_emb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate sentences read from standard input, one per line.
    Translate {
        #[command(flatten)]
        model: ModelArgs,
        /// Beam width; 1 decodes greedily.
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
    },
    /// Next-word accuracy on a parallel corpus.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        /// Average per sentence instead of per target position.
        #[arg(long)]
        sentence_average: bool,
    },
    /// Compare the GRU backward pass with numeric derivatives.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    model: PathBuf,
    /// Defaults to src.vocab next to the checkpoint; likewise below.
    #[arg(long)]
    src_vocab: Option<PathBuf>,
    #[arg(long)]
    tgt_vocab: Option<PathBuf>,
    #[arg(long)]
    src_emb: Option<PathBuf>,
    #[arg(long)]
    tgt_emb: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Correct,
    SelfFed,
}

fn version() -> String {
    format!(
        "{} (checkpoint format {} v{CHECKPOINT_VERSION})",
        env!("CARGO_PKG_VERSION"),
        String::from_utf8_lossy(CHECKPOINT_MAGIC)
    )
}

/// Runs one invocation. `argv` excludes the program name. Returns the
/// process exit status; failures print a single diagnostic line to `err`.
pub fn dispatch<I, S>(
    argv: I,
    stdin: &mut dyn BufRead,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = std::iter::once("grumt".into()).chain(argv.into_iter().map(Into::into));
    let matches = Cli::command().version(version()).try_get_matches_from(args);
    let cli = match matches.and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(out, "{}", e.render());
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        2
                    } else {
                        0
                    }
                }
                _ => {
                    // clap's message runs up to the first blank line; the
                    // usage and hint after it are dropped.
                    let text = e.render().to_string();
                    let message: Vec<&str> = text
                        .lines()
                        .take_while(|l| !l.trim().is_empty())
                        .map(str::trim)
                        .collect();
                    let _ = writeln!(err, "{}", message.join(" "));
                    2
                }
            };
        }
    };
    match run(cli.command, stdin, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}

fn run(command: Command, stdin: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match command {
        Command::BuildVocab { input, size, out: dest } => {
            let lines = read_sentences(&input)?;
            let vocab = build_vocabulary(&lines, size)?;
            write_atomic(&dest, |w| Ok(vocab.write(w)?))?;
            writeln!(err, "{} tokens ranked, {} ids", vocab.ranked_len(), vocab.id_count())?;
        }
        Command::MakeBatches {
            src,
            tgt,
            src_vocab,
            tgt_vocab,
            batch_size,
            max_len,
            out: dir,
        } => {
            let sv = Vocabulary::read(&src_vocab)?;
            let tv = Vocabulary::read(&tgt_vocab)?;
            let lines = read_parallel(&src, &tgt)?;
            let batching = make_batches(encode_parallel(&lines, &sv, &tv), batch_size, max_len)?;
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            write_atomic(&dir.join(SOURCE_VOCAB_FILE), |w| Ok(sv.write(w)?))?;
            write_atomic(&dir.join(TARGET_VOCAB_FILE), |w| Ok(tv.write(w)?))?;
            write_atomic(&dir.join(BATCHES_FILE), |w| {
                Ok(corpus::write_batches(&batching.batches, w)?)
            })?;
            writeln!(err, "{batching}")?;
        }
        Command::Train {
            config,
            batches,
            src_emb,
            tgt_emb,
            out: dir,
            seed,
            resume,
        } => train(&config, &batches, &src_emb, &tgt_emb, &dir, seed, resume.as_deref(), err)?,
        Command::Translate { model, beam, max_len } => {
            if beam == 0 {
                bail!("--beam must be at least 1");
            }
            let loaded = LoadedModel::open(&model)?;
            let translator = loaded.translator()?;
            for line in stdin.lines() {
                let source = encode(&line?, &loaded.source_vocab, Side::Source);
                let ids = if beam == 1 {
                    translator.greedy_decode(&source, max_len)?.0
                } else {
                    translator
                        .beam_decode(&source, beam, max_len)?
                        .into_iter()
                        .next()
                        .map(|h| h.emitted_ids)
                        .unwrap_or_default()
                };
                writeln!(out, "{}", render(&ids, &loaded.target_vocab))?;
            }
        }
        Command::Eval {
            model,
            mode,
            src,
            tgt,
            sentence_average,
        } => {
            let loaded = LoadedModel::open(&model)?;
            let translator = loaded.translator()?;
            let lines = read_parallel(&src, &tgt)?;
            let dataset = encode_parallel(&lines, &loaded.source_vocab, &loaded.target_vocab);
            let mode = match mode {
                Mode::Correct => PrefixMode::Correct,
                Mode::SelfFed => PrefixMode::SelfFed,
            };
            let averaging = if sentence_average {
                Averaging::Sentence
            } else {
                Averaging::Token
            };
            writeln!(out, "{}", translator.next_word_accuracy(&dataset, mode, averaging)?)?;
        }
        Command::Gradcheck {
            seed,
            instances,
            threshold,
        } => {
            let report = gradcheck::run(seed, instances, threshold)?;
            writeln!(out, "{report}")?;
            return Ok(if report.passed() { 0 } else { 1 });
        }
    }
    Ok(0)
}

/// Writes `path.partial`, then renames it over `path`; on failure the
/// partial file is removed.
fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let tmp = partial_path(path);
    let result = (|| {
        let file = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.flush()?;
        drop(w);
        fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn train(
    config_path: &Path,
    batch_dir: &Path,
    src_emb: &Path,
    tgt_emb: &Path,
    dir: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
    err: &mut dyn Write,
) -> Result<()> {
    let mut config = TrainingConfig::read(config_path)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    match (&resume, seed) {
        (Some(ck), Some(s)) if ck.seed != s => {
            bail!("--seed {s} differs from the checkpoint seed {}", ck.seed)
        }
        (Some(ck), _) => config.seed = ck.seed,
        (None, Some(s)) => config.seed = s,
        (None, None) => {}
    }
    let source_vocab = Vocabulary::read(batch_dir.join(SOURCE_VOCAB_FILE))?;
    let target_vocab = Vocabulary::read(batch_dir.join(TARGET_VOCAB_FILE))?;
    let batches = read_batches(&batch_dir.join(BATCHES_FILE))?;
    for batch in &batches {
        for (s, t) in batch.pairs() {
            s.validate(&source_vocab)?;
            t.validate(&target_vocab)?;
        }
    }
    if let Some(first) = batches.first() {
        if first.len() != config.batch_size {
            writeln!(
                err,
                "warning: config batch_size {} ignored; batches in {} hold {} pairs",
                config.batch_size,
                batch_dir.display(),
                first.len()
            )?;
        }
    }
    let dim = config.embedding_dim;
    let source = load_embeddings(src_emb, &source_vocab, dim, embedding_seed(config.seed, Side::Source))?;
    let target = load_embeddings(tgt_emb, &target_vocab, dim, embedding_seed(config.seed, Side::Target))?;
    writeln!(
        err,
        "{} batches; embeddings found for {}/{} source and {}/{} target ids",
        batches.len(),
        source.found(),
        source.rows(),
        target.found(),
        target.rows()
    )?;

    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join(SOURCE_VOCAB_FILE), |w| Ok(source_vocab.write(w)?))?;
    write_atomic(&dir.join(TARGET_VOCAB_FILE), |w| Ok(target_vocab.write(w)?))?;
    write_atomic(&dir.join(SOURCE_EMB_FILE), |w| Ok(source.write_cache(w)?))?;
    write_atomic(&dir.join(TARGET_EMB_FILE), |w| Ok(target.write_cache(w)?))?;

    // The log grows in train.log.partial and replaces train.log when the run
    // finishes; a resumed run continues the existing log.
    let log_path = dir.join(LOG_FILE);
    let log_tmp = partial_path(&log_path);
    if resume.is_some() && log_path.exists() {
        fs::copy(&log_path, &log_tmp).with_context(|| format!("copying {}", log_path.display()))?;
    } else {
        File::create(&log_tmp).with_context(|| format!("creating {}", log_tmp.display()))?;
    }
    let mut log = BufWriter::new(
        fs::OpenOptions::new()
            .append(true)
            .open(&log_tmp)
            .with_context(|| format!("opening {}", log_tmp.display()))?,
    );
    let model_path = dir.join(MODEL_FILE);
    let mut epoch_loss = (0.0f64, 0usize);
    let outcome = train_with::<f32, _>(&config, &batches, &source, &target, resume.as_ref(), |ev| {
        match ev {
            TrainEvent::Batch(record) => {
                writeln!(log, "{}", record.csv())?;
                epoch_loss.0 += record.loss;
                epoch_loss.1 += 1;
                if record.batch + 1 == batches.len() {
                    let _ = writeln!(
                        err,
                        "epoch {} mean loss {:.6}",
                        record.epoch,
                        epoch_loss.0 / epoch_loss.1 as f64
                    );
                    epoch_loss = (0.0, 0);
                }
            }
            TrainEvent::Checkpoint {
                params,
                optimizer,
                cursor,
            } => {
                log.flush()?;
                Checkpoint {
                    params: params.clone(),
                    velocity: optimizer.velocity.clone(),
                    seed: config.seed,
                    cursor,
                }
                .save(&model_path)?;
            }
        }
        Ok(())
    });
    log.flush()?;
    drop(log);
    outcome?;
    fs::rename(&log_tmp, &log_path).with_context(|| format!("writing {}", log_path.display()))?;
    Ok(())
}

struct LoadedModel {
    checkpoint: Checkpoint,
    source_vocab: Vocabulary,
    target_vocab: Vocabulary,
    source: EmbeddingTable,
    target: EmbeddingTable,
}

impl LoadedModel {
    fn open(args: &ModelArgs) -> Result<Self> {
        let checkpoint = Checkpoint::load(&args.model)?;
        let dir = args.model.parent().unwrap_or(Path::new("."));
        let pick = |given: &Option<PathBuf>, name: &str| given.clone().unwrap_or_else(|| dir.join(name));
        let source_vocab = Vocabulary::read(pick(&args.src_vocab, SOURCE_VOCAB_FILE))?;
        let target_vocab = Vocabulary::read(pick(&args.tgt_vocab, TARGET_VOCAB_FILE))?;
        let dim = checkpoint.shape().input_size;
        let seed = checkpoint.seed;
        let source = load_embeddings(
            pick(&args.src_emb, SOURCE_EMB_FILE),
            &source_vocab,
            dim,
            embedding_seed(seed, Side::Source),
        )?;
        let target = load_embeddings(
            pick(&args.tgt_emb, TARGET_EMB_FILE),
            &target_vocab,
            dim,
            embedding_seed(seed, Side::Target),
        )?;
        Ok(LoadedModel {
            checkpoint,
            source_vocab,
            target_vocab,
            source,
            target,
        })
    }

    fn translator(&self) -> Result<Translator<'_, f32>> {
        Ok(Translator::new(&self.checkpoint.params, &self.source, &self.target)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = dispatch(args.iter().copied(), &mut &b""[..], &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn help_lists_every_subcommand() {
        let (code, out, _) = call(&["--help"]);
        assert_eq!(code, 0);
        for sub in ["build-vocab", "make-batches", "train", "translate", "eval", "gradcheck"] {
            assert!(out.contains(sub), "{sub} missing from help");
        }
    }

    #[test]
    fn version_names_checkpoint_format() {
        let (code, out, _) = call(&["--version"]);
        assert_eq!(code, 0);
        assert!(out.contains("GRUMT v1"), "{out}");
    }

    #[test]
    fn bad_invocations_give_one_line() {
        for args in [
            &["train"][..],
            &["frobnicate"][..],
            &["gradcheck", "--seed", "1", "--colour", "red"][..],
        ] {
            let (code, out, err) = call(args);
            assert_ne!(code, 0, "{args:?}");
            assert!(out.is_empty());
            assert_eq!(err.lines().count(), 1, "{err}");
        }
        let (_, _, err) = call(&["train"]);
        assert!(err.contains("--config"), "{err}");
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("v");
        let (code, _, err) = call(&[
            "build-vocab",
            "--input",
            "/nonexistent/corpus.txt",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
        assert!(err.contains("/nonexistent/corpus.txt"), "{err}");
        assert!(!out.exists() && !partial_path(&out).exists());
    }
}
