//! Command-line driver.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tagbert_core::corpus::{compute_stats, length_filter, sanitize, LengthPolicy, Sentence};
use tagbert_core::finetune::{self, Scheme, TaskSplits};
use tagbert_core::model::{count_params, Model};
use tagbert_core::numerics::Scalar;
use tagbert_core::pretrain::{self, evaluate_heldout, TrainEvent, TrainState};
use tagbert_core::syngen;
use tagbert_core::vocab::{build_subword_vocab, build_type_vocab, encode, SubwordVocab, TokenizedSentence, TypeVocab};

use crate::checkpoint::{self, Manifest};
use crate::config::RunConfig;
use crate::io::{self as cio, Format};
use crate::runlog::{truncate_lines, JsonLines};
use crate::shard::{read_shard, write_shard};
use crate::{Error, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Debug, Parser)]
#[command(name = "tagbert", version, about = "Supertag-supervised masked language model pretraining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set pretrain.batch_size=32`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Global seed; shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded numerics. Every code path is already sequential, so
    /// this only documents intent.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Deduplicate, filter and encode a corpus into shards.
    Prep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// File of normalized sentence keys to drop.
        #[arg(long)]
        exclude: Option<PathBuf>,
        /// Subword vocabulary; enables length filtering.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Type vocabulary; together with --vocab, enables shard output.
        #[arg(long)]
        types: Option<PathBuf>,
    },
    /// Build a subword vocabulary from a corpus.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for `--set vocab.size=N`.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Build a type vocabulary covering a share of tag occurrences.
    BuildTypevocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for `--set typevocab.coverage=Q`.
        #[arg(long)]
        coverage: Option<f64>,
    },
    /// Joint masked-LM and supertag pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory written by `prep`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Token-classification fine-tuning on CoNLL two-column data.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        validation: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value = "plain")]
        scheme: SchemeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out masked-LM perplexity and supertag accuracy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by `prep`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "heldout")]
        split: String,
    },
    /// Sample a synthetic categorial-grammar corpus.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of sentences.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
        /// Also write the grammar as JSON.
        #[arg(long)]
        grammar_out: Option<PathBuf>,
    },
    /// Print a checkpoint's parameter breakdown.
    Inspect {
        checkpoint: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Plain,
    Iob,
}

impl Common {
    fn resolve(&self, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
        let text = self.config.as_ref().map(fs::read_to_string).transpose()?;
        let mut c = RunConfig::resolve(text.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            c.set("seed", &s.to_string())?;
        }
        for (k, v) in extra {
            if let Some(v) = v {
                c.set(k, v)?;
            }
        }
        Ok(c)
    }
}

fn echo_config(dir: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG), config.to_text())?;
    Ok(())
}

/// Config echo for commands whose output is a single file.
fn echo_beside(file: &Path, config: &RunConfig) -> Result<()> {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config");
    if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(file.with_file_name(name), config.to_text())?;
    Ok(())
}

fn read_corpus(path: &Path, format: Format) -> Result<Vec<Sentence>> {
    let r = cio::ingest(BufReader::new(File::open(path)?), format)?;
    for d in &r.rejected {
        eprintln!("{}: {d}", path.display());
    }
    Ok(r.sentences)
}

fn read_subwords(path: &Path) -> Result<SubwordVocab> {
    Ok(SubwordVocab::from_text(&fs::read_to_string(path)?)?)
}

fn read_types(path: &Path) -> Result<TypeVocab> {
    Ok(TypeVocab::from_text(&fs::read_to_string(path)?)?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, n, out, format, grammar_out } => {
            let config = common.resolve(&[])?;
            if n == 0 {
                return Err(Error::Config("--n must be at least 1".into()));
            }
            let grammar = syngen::make_grammar(config.seed()?, &config.grammar()?)?;
            let sentences = grammar.sample(n, config.seed()?, config.length_range()?)?;
            cio::emit(BufWriter::new(File::create(&out)?), &sentences, format)?;
            if let Some(g) = grammar_out {
                let mut text = serde_json::to_string_pretty(&grammar)?;
                text.push('\n');
                fs::write(g, text)?;
            }
            echo_beside(&out, &config)
        }
        Command::BuildVocab { common, input, format, out, size } => {
            let config = common.resolve(&[("vocab.size", size.map(|s| s.to_string()))])?;
            let sentences = read_corpus(&input, format)?;
            let words = sentences.iter().flat_map(|s| s.words().iter().map(String::as_str));
            let vocab = build_subword_vocab(words, config.get("vocab.size")?)?;
            fs::write(&out, vocab.to_text())?;
            echo_beside(&out, &config)?;
            println!("{} subword entries", vocab.len());
            Ok(())
        }
        Command::BuildTypevocab { common, input, format, out, coverage } => {
            let config = common.resolve(&[("typevocab.coverage", coverage.map(|c| c.to_string()))])?;
            let sentences = read_corpus(&input, format)?;
            let stats = compute_stats(&sentences, None);
            let (types, report) = build_type_vocab(&stats, config.get("typevocab.coverage")?)?;
            fs::write(&out, types.to_text())?;
            echo_beside(&out, &config)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
        Command::Prep { common, input, format, out, exclude, vocab, types } => {
            let config = common.resolve(&[])?;
            prep(&config, &input, format, &out, exclude.as_deref(), vocab.as_deref(), types.as_deref())
        }
        Command::Pretrain { common, data, out, resume } => {
            let config = common.resolve(&[])?;
            match config.raw("model.dtype") {
                "f32" => pretrain_run::<f32>(&config, &data, &out, resume.as_deref()),
                "f64" => pretrain_run::<f64>(&config, &data, &out, resume.as_deref()),
                other => Err(Error::Config(format!("unsupported model.dtype {other:?}"))),
            }
        }
        Command::Eval { common, checkpoint: ckpt, data, split } => {
            let config = common.resolve(&[])?;
            let report = match Manifest::read(&ckpt)?.dtype.as_str() {
                "f32" => eval_run::<f32>(&config, &ckpt, &data, &split)?,
                "f64" => eval_run::<f64>(&config, &ckpt, &data, &split)?,
                other => return Err(Error::Format(format!("unsupported dtype {other:?}"))),
            };
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
        Command::Finetune { common, checkpoint: ckpt, vocab, train, validation, test, scheme, out } => {
            let config = common.resolve(&[])?;
            let paths = [train, validation, test];
            match Manifest::read(&ckpt)?.dtype.as_str() {
                "f32" => finetune_run::<f32>(&config, &ckpt, &vocab, &paths, scheme, &out),
                "f64" => finetune_run::<f64>(&config, &ckpt, &vocab, &paths, scheme, &out),
                other => Err(Error::Format(format!("unsupported dtype {other:?}"))),
            }
        }
        Command::Inspect { checkpoint: ckpt } => {
            let text = match Manifest::read(&ckpt)?.dtype.as_str() {
                "f32" => inspect::<f32>(&ckpt)?,
                "f64" => inspect::<f64>(&ckpt)?,
                other => return Err(Error::Format(format!("unsupported dtype {other:?}"))),
            };
            print!("{text}");
            Ok(())
        }
    }
}

fn prep(
    config: &RunConfig,
    input: &Path,
    format: Format,
    out: &Path,
    exclude: Option<&Path>,
    vocab: Option<&Path>,
    types: Option<&Path>,
) -> Result<()> {
    echo_config(out, config)?;
    let ingested = cio::ingest(BufReader::new(File::open(input)?), format)?;
    let mut rejected = String::new();
    for d in &ingested.rejected {
        rejected.push_str(&format!("{d}\n"));
    }
    fs::write(out.join("rejected.txt"), rejected)?;
    let keys = match exclude {
        Some(p) => cio::read_exclusion(BufReader::new(File::open(p)?))?,
        None => BTreeSet::new(),
    };
    let read = ingested.sentences.len();
    let mut sentences = sanitize(ingested.sentences, &keys);
    let sanitized = sentences.len();
    let subwords = vocab.map(read_subwords).transpose()?;
    if let Some(v) = &subwords {
        let policy = match config.opt::<f64>("corpus.tail_quantile")? {
            Some(q) => LengthPolicy::TailQuantile(q),
            None => LengthPolicy::MaxTokens(config.get("corpus.max_tokens")?),
        };
        sentences = length_filter(sentences, v, policy)?;
    }
    let stats = compute_stats(&sentences, subwords.as_ref());
    write_json(
        &out.join("stats.json"),
        &json!({
            "read": read,
            "rejected": ingested.rejected.len(),
            "after_sanitize": sanitized,
            "kept": sentences.len(),
            "stats": stats,
        }),
    )?;
    cio::emit(BufWriter::new(File::create(out.join("corpus.jsonl"))?), &sentences, Format::Jsonl)?;
    if let (Some(v), Some(tp)) = (&subwords, types) {
        let t = read_types(tp)?;
        fs::write(out.join("vocab.txt"), v.to_text())?;
        fs::write(out.join("types.txt"), t.to_text())?;
        let heldout: usize = config.get("corpus.heldout")?;
        if heldout >= sentences.len() {
            return Err(Error::Config(format!("corpus.heldout {heldout} leaves no training sentences")));
        }
        let encoded: Vec<TokenizedSentence> = sentences.iter().map(|s| encode(v, &t, s)).collect();
        let (train, held) = encoded.split_at(encoded.len() - heldout);
        write_shard(BufWriter::new(File::create(out.join("train.shard"))?), train, v.len(), t.len())?;
        if !held.is_empty() {
            write_shard(BufWriter::new(File::create(out.join("heldout.shard"))?), held, v.len(), t.len())?;
        }
    }
    println!("read {read}, kept {}", sentences.len());
    Ok(())
}

fn load_split(data: &Path, split: &str) -> Result<(crate::shard::ShardHeader, Vec<TokenizedSentence>)> {
    read_shard(BufReader::new(File::open(data.join(format!("{split}.shard")))?))
}

fn checkpoint_dir(run: &Path, name: &str) -> PathBuf {
    run.join("checkpoints").join(name)
}

fn pretrain_run<S: Scalar>(config: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    echo_config(out, config)?;
    let (header, train) = load_split(data, "train")?;
    let heldout = data.join("heldout.shard").exists().then(|| load_split(data, "heldout")).transpose()?;
    let model_config = config.model(header.vocab_size, header.type_vocab_size)?;
    let pc = config.pretrain()?;
    let (mut model, mut state) = match resume {
        Some(dir) => {
            let (m, s) = checkpoint::load::<S>(dir)?;
            if m.config() != &model_config {
                return Err(Error::Config("resumed checkpoint's model config differs from the run config".into()));
            }
            let s = s.ok_or_else(|| Error::Format(format!("{} has no optimizer state", dir.display())))?;
            (m, s)
        }
        None => {
            let m = Model::<S>::init(model_config, config.seed()?)?;
            let s = TrainState::fresh(&m);
            (m, s)
        }
    };
    let metrics_path = out.join("metrics.jsonl");
    let eval_path = out.join("eval.jsonl");
    if resume.is_some() {
        truncate_lines(&metrics_path, state.step as usize)?;
        truncate_lines(&eval_path, state.epoch)?;
    } else {
        for p in [&metrics_path, &eval_path] {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
    }
    let mut metrics = JsonLines::append(&metrics_path)?;
    let mut evals = JsonLines::append(&eval_path)?;
    let eval_cfg = config.eval()?;
    let summary = pretrain::train(&mut model, &train, &pc, &mut state, |event| {
        match event {
            TrainEvent::Step(m) => metrics.write(m).map_err(to_core)?,
            TrainEvent::EpochEnd { epoch, mean_joint_loss, model, state } => {
                metrics.flush().map_err(to_core)?;
                checkpoint::save(&checkpoint_dir(out, &format!("epoch-{:03}", epoch + 1)), model, Some(state)).map_err(to_core)?;
                let held = match &heldout {
                    Some((h, d)) => Some(evaluate_heldout(model, d, h.vocab_size, h.type_vocab_size, &eval_cfg)?),
                    None => None,
                };
                evals
                    .write(&json!({ "epoch": epoch + 1, "mean_joint_loss": mean_joint_loss, "heldout": held }))
                    .map_err(to_core)?;
                evals.flush().map_err(to_core)?;
                eprintln!("epoch {} mean joint loss {mean_joint_loss:.5}", epoch + 1);
            }
        }
        Ok(ControlFlow::Continue(()))
    })?;
    metrics.flush()?;
    checkpoint::save(&checkpoint_dir(out, "final"), &model, Some(&state))?;
    eprintln!("{} steps{}", summary.steps, if summary.finished { "" } else { " (stopped early)" });
    Ok(())
}

// Callback errors must be core errors; IO failures are carried as text.
fn to_core(e: Error) -> tagbert_core::Error {
    match e {
        Error::Core(c) => c,
        other => tagbert_core::Error::Invalid(other.to_string()),
    }
}

fn eval_run<S: Scalar>(config: &RunConfig, ckpt: &Path, data: &Path, split: &str) -> Result<pretrain::HeldoutReport> {
    let (model, _) = checkpoint::load::<S>(ckpt)?;
    let (h, d) = load_split(data, split)?;
    if h.vocab_size != model.config().vocab_size || h.type_vocab_size != model.config().type_vocab_size {
        return Err(Error::Config("shard vocabularies do not match the checkpoint".into()));
    }
    Ok(evaluate_heldout(&model, &d, h.vocab_size, h.type_vocab_size, &config.eval()?)?)
}

fn finetune_run<S: Scalar>(
    config: &RunConfig,
    ckpt: &Path,
    vocab: &Path,
    paths: &[PathBuf; 3],
    scheme: SchemeArg,
    out: &Path,
) -> Result<()> {
    echo_config(out, config)?;
    let (model, _) = checkpoint::load::<S>(ckpt)?;
    let vocab = read_subwords(vocab)?;
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries, checkpoint expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let mut parts = Vec::new();
    for p in paths {
        let r = cio::read_conll(BufReader::new(File::open(p)?))?;
        for d in &r.rejected {
            eprintln!("{}: {d}", p.display());
        }
        parts.push(r.sentences);
    }
    let [train, validation, test]: [Vec<Sentence>; 3] = parts.try_into().expect("three splits");
    let scheme = match scheme {
        SchemeArg::Plain => Scheme::Plain,
        SchemeArg::Iob => Scheme::Iob,
    };
    let splits = TaskSplits::new(train, validation, test, scheme)?;
    let fc = config.finetune()?;
    let mut log = JsonLines::append(&out.join("epochs.jsonl"))?;
    let mut log_err = None;
    let report = finetune::finetune(&model, &vocab, &splits, &fc, |e| {
        let rec = json!({
            "seed": e.seed,
            "epoch": e.epoch,
            "train_loss": e.train_loss,
            "validation_accuracy": e.validation.accuracy,
            "validation_f1": e.validation.spans.map(|s| s.f1),
        });
        match log.write(&rec) {
            Ok(()) => ControlFlow::Continue(()),
            Err(err) => {
                log_err = Some(err);
                ControlFlow::Break(())
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    log.flush()?;
    let scores = |s: &finetune::Scores| {
        json!({
            "accuracy": s.accuracy,
            "precision": s.spans.map(|x| x.precision),
            "recall": s.spans.map(|x| x.recall),
            "f1": s.spans.map(|x| x.f1),
        })
    };
    let runs: Vec<serde_json::Value> = report
        .runs
        .iter()
        .map(|r| {
            json!({
                "seed": r.seed,
                "best_epoch": r.best_epoch,
                "validation": r.validation.iter().map(scores).collect::<Vec<_>>(),
                "test": scores(&r.test),
            })
        })
        .collect();
    for r in &report.runs {
        checkpoint::save(&out.join(format!("seed-{}", r.seed)), &r.classifier.model, None)?;
    }
    let [tr, va, te] = report.truncated_words;
    let summary = json!({
        "labels": splits.train.label_set,
        "runs": runs,
        "mean_test_accuracy": report.mean_test_accuracy,
        "mean_test_f1": report.mean_test_f1,
        "truncated_words": { "train": tr, "validation": va, "test": te },
    });
    write_json(&out.join("report.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary["mean_test_accuracy"])?);
    Ok(())
}

fn inspect<S: Scalar>(ckpt: &Path) -> Result<String> {
    let (model, state) = checkpoint::load::<S>(ckpt)?;
    let mut text = checkpoint::describe(&model);
    let b = model.breakdown();
    let analytic = count_params(model.config());
    let core_total = b.total - b.other;
    text.push_str(&format!(
        "count_params     {} ({})\n",
        analytic.total,
        if analytic.total == core_total { "agrees" } else { "DISAGREES" }
    ));
    if let Some(s) = state {
        text.push_str(&format!("resume point     step {} epoch {} batch {}\n", s.step, s.epoch, s.batch_in_epoch));
    }
    Ok(text)
}
