use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use moodgen_core::corpus::{load_corpus, synthetic_records, CorpusSplit, SentimentLabel, SplitName, Vocabulary};
use moodgen_core::evaluation::{
    corpus_perplexity, export_human_eval, import_human_eval, sentiment_accuracy, EvalReport, GeneratorResponder, LabelMode, Responder,
    SentimentClassifier,
};
use moodgen_core::generator::DecodeMode;
use moodgen_core::model::ModelFamily;
use moodgen_core::trainer::{train_run, RunBundle, TrainRunConfig};

use crate::model::{discover, LoadedModel};
use crate::server;

#[derive(Parser)]
#[command(name = "moodgen", version, about = "Train, evaluate and serve sentiment-controlled dialogue generators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train one model family end to end and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to runs/<family>-<config fingerprint>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's thread count (1 gives the reproducible test mode).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Perplexity and sentiment accuracy of a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// JSON-lines corpus encoded with the run's vocabulary. Defaults to
        /// the corpus named by the run's config.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Vocabulary the corpus was prepared with; must equal the run's.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long, default_value_t = 1000)]
        n_sentiment: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "greedy")]
        mode: DecodeMode,
        #[arg(long, default_value = "assigned")]
        label_mode: LabelMode,
        /// Classifier checkpoint; defaults to the run's own.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Report path; defaults to <run>/eval-<split>.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interactive session on stdin/stdout. Type :q to quit.
    Chat {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "sample")]
        mode: DecodeMode,
    },
    /// Serve /v1/health, /v1/models and /v1/respond over HTTP.
    Serve {
        /// A run directory, or a directory of run directories.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Blinded CSV sheets for the two human-judgement settings.
    ExportHumanEval {
        /// Run directories to compare; all must share one vocabulary.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "sample")]
        mode: DecodeMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-model means from judged sheets (id,judge,value).
    ImportHumanEval {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        judgements: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic corpus as JSON lines.
    Synth {
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a complete config file for a family.
    Config {
        #[arg(long, default_value = "cgan-cvae")]
        family: ModelFamily,
        /// The small dimensions and step counts used for CPU runs.
        #[arg(long)]
        desk: bool,
    },
}

/// A failure and the exit status it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: error.into() }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<moodgen_core::Error>() {
            Some(moodgen_core::Error::Config(_)) => 2,
            _ => 1,
        };
        Self { code, error }
    }
}

type CmdResult = Result<(), Failure>;

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

pub fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Train { config, out, threads } => train(&config, out, threads),
        Command::Eval {
            run,
            corpus,
            vocab,
            split,
            n_sentiment,
            seed,
            mode,
            label_mode,
            classifier,
            out,
        } => eval(EvalArgs {
            run,
            corpus,
            vocab,
            split,
            n_sentiment,
            seed,
            mode,
            label_mode,
            classifier,
            out,
        }),
        Command::Chat { run, seed, mode } => {
            let model = LoadedModel::load("chat", &run).map_err(Failure::usage)?;
            let stdin = std::io::stdin();
            chat(&model, &mut stdin.lock(), &mut std::io::stdout(), seed, mode)?;
            Ok(())
        }
        Command::Serve { runs, host, port } => serve(&runs, &host, port),
        Command::ExportHumanEval {
            runs,
            split,
            n,
            seed,
            mode,
            out,
        } => export(&runs, split, n, seed, mode, &out),
        Command::ImportHumanEval { key, judgements, out } => {
            let summary = import_human_eval(&key, &judgements)?;
            let text = serde_json::to_string_pretty(&summary)?;
            println!("{text}");
            if let Some(path) = out {
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Synth { pairs, seed, out } => {
            let records = synthetic_records(seed, pairs).map_err(Failure::usage)?;
            let mut text = String::new();
            for r in &records {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
            Ok(())
        }
        Command::Config { family, desk } => {
            let cfg = if desk {
                TrainRunConfig::desk(family)
            } else {
                TrainRunConfig {
                    model_family: family,
                    ..TrainRunConfig::default()
                }
            };
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn train(config: &Path, out: Option<PathBuf>, threads: Option<usize>) -> CmdResult {
    let mut cfg = TrainRunConfig::load(config).map_err(Failure::usage)?;
    if threads.is_some() {
        cfg.threads = threads;
    }
    cfg.validate().map_err(Failure::usage)?;
    let corpus = cfg.load_corpus().context("loading corpus")?;
    let out = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-{}", cfg.model_family, cfg.fingerprint())));
    eprintln!(
        "training {} on {} examples (vocabulary {}) into {}",
        cfg.model_family,
        corpus.train.len(),
        corpus.vocab.len(),
        out.display()
    );
    let outcome = train_run(&cfg, &corpus, Some(&out))?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    Ok(())
}

pub struct EvalArgs {
    pub run: PathBuf,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub split: SplitName,
    pub n_sentiment: usize,
    pub seed: u64,
    pub mode: DecodeMode,
    pub label_mode: LabelMode,
    pub classifier: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn check_vocab(run: &Vocabulary, other: &Vocabulary, what: &str) -> CmdResult {
    if run != other {
        return Err(Failure::usage(anyhow!(
            "vocabulary mismatch: the checkpoint has {} tokens, {what} has {}{}",
            run.len(),
            other.len(),
            if run.len() == other.len() { " in a different order" } else { "" }
        )));
    }
    Ok(())
}

/// The evaluation corpus, encoded with the run's vocabulary.
fn eval_corpus(bundle: &RunBundle, corpus: Option<&Path>, vocab: Option<&Path>) -> Result<CorpusSplit, Failure> {
    if let Some(path) = vocab {
        let v = Vocabulary::load(path).map_err(Failure::usage)?;
        check_vocab(&bundle.vocab, &v, &path.display().to_string())?;
    }
    match corpus {
        Some(path) => Ok(load_corpus(path, Some(&bundle.vocab), &bundle.config.ingest())?),
        None => {
            let c = bundle.config.load_corpus()?;
            check_vocab(&bundle.vocab, &c.vocab, "the configured corpus")?;
            Ok(c)
        }
    }
}

fn eval(a: EvalArgs) -> CmdResult {
    let bundle = RunBundle::load(&a.run).map_err(Failure::usage)?;
    let corpus = eval_corpus(&bundle, a.corpus.as_deref(), a.vocab.as_deref())?;
    let examples = corpus.split(a.split);
    if examples.is_empty() {
        return Err(Failure::usage(anyhow!("the {} split is empty", a.split)));
    }
    let loaded;
    let clf: &SentimentClassifier = match (&a.classifier, &bundle.classifier) {
        (Some(dir), _) => {
            loaded = SentimentClassifier::load(dir).map_err(Failure::usage)?;
            &loaded
        }
        (None, Some(c)) => c,
        (None, None) => {
            return Err(Failure::usage(anyhow!(
                "{} has no classifier checkpoint; pass --classifier or train with classifier_steps > 0",
                a.run.display()
            )))
        }
    };
    if clf.cfg.vocab_size != bundle.vocab.len() {
        return Err(Failure::usage(anyhow!(
            "vocabulary mismatch: classifier has {} tokens, checkpoint has {}",
            clf.cfg.vocab_size,
            bundle.vocab.len()
        )));
    }
    let ppl = corpus_perplexity(&bundle.generator, examples)?;
    let responder = GeneratorResponder {
        generator: &bundle.generator,
        max_len: bundle.config.sample_max_len,
        mode: a.mode,
    };
    let acc = sentiment_accuracy(&responder, examples, clf, a.n_sentiment, a.seed, a.label_mode)?;
    let report = EvalReport::new(bundle.family.as_str(), &a.split.to_string(), &ppl, &acc, bundle.config.fingerprint());
    let out = a.out.unwrap_or_else(|| a.run.join(format!("eval-{}.json", a.split)));
    fs::write(&out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    println!("perplexity {:.4} ({})", report.perplexity, report.perplexity_kind);
    println!(
        "sentiment accuracy {:.4} (n={}, {} labels)",
        report.sentiment_accuracy,
        report.n_examples,
        serde_json::to_value(report.label_mode)?.as_str().unwrap_or("?")
    );
    eprintln!("report written to {}", out.display());
    Ok(())
}

fn prompt<R: BufRead, W: Write>(input: &mut R, output: &mut W, text: &str) -> anyhow::Result<Option<String>> {
    write!(output, "{text}")?;
    output.flush()?;
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    Ok(Some(line.trim().to_string()))
}

/// Reads a history line and a sentiment, prints the reply and the
/// classifier's verdict. Returns on `:q` or end of input. Turn `k` decodes
/// with seed `seed + k`, so a scripted session replays exactly.
pub fn chat<R: BufRead, W: Write>(model: &LoadedModel, input: &mut R, output: &mut W, seed: u64, mode: DecodeMode) -> anyhow::Result<()> {
    let mut turn = 0u64;
    loop {
        let Some(line) = prompt(input, output, "you> ")? else { return Ok(()) };
        if line == ":q" {
            return Ok(());
        }
        let Some(history) = model.encode_history(&line) else { continue };
        let y = loop {
            let Some(s) = prompt(input, output, "sentiment [positive/negative]> ")? else { return Ok(()) };
            if s == ":q" {
                return Ok(());
            }
            match s.as_str() {
                "p" | "+" => break SentimentLabel::Positive,
                "n" | "-" => break SentimentLabel::Negative,
                other => {
                    if let Some(y) = SentimentLabel::parse(other) {
                        break y;
                    }
                    writeln!(output, "please answer positive or negative")?;
                }
            }
        };
        let reply = model.reply(&history, y, mode, seed.wrapping_add(turn))?;
        turn += 1;
        writeln!(output, "bot> {}", reply.response)?;
        match reply.verdict {
            Some(v) => writeln!(output, "     classifier: {} ({:.3})", v.label, v.probability)?,
            None => writeln!(output, "     classifier: unavailable")?,
        }
    }
}

fn serve(runs: &Path, host: &str, port: u16) -> CmdResult {
    let models = discover(runs).map_err(Failure::usage)?;
    for m in &models {
        eprintln!("loaded {} ({})", m.id, m.family());
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, server::router(models))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}

fn export(runs: &[PathBuf], split: SplitName, n: usize, seed: u64, mode: DecodeMode, out: &Path) -> CmdResult {
    let bundles: Vec<RunBundle> = runs.iter().map(|d| RunBundle::load(d)).collect::<Result<_, _>>().map_err(Failure::usage)?;
    let first = &bundles[0];
    for (b, dir) in bundles.iter().zip(runs).skip(1) {
        check_vocab(&first.vocab, &b.vocab, &dir.display().to_string())?;
    }
    let corpus = eval_corpus(first, None, None)?;
    let names: Vec<String> = runs
        .iter()
        .map(|d| d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| d.display().to_string()))
        .collect();
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
        bail_usage(format!("two runs share the directory name {dup:?}"))?;
    }
    let responders: Vec<GeneratorResponder<'_>> = bundles
        .iter()
        .map(|b| GeneratorResponder {
            generator: &b.generator,
            max_len: b.config.sample_max_len,
            mode,
        })
        .collect();
    let models: Vec<(String, &dyn Responder)> = names.into_iter().zip(responders.iter().map(|r| r as &dyn Responder)).collect();
    let e = export_human_eval(&models, corpus.split(split), &corpus.vocab, n, seed, out)?;
    println!("{}", e.quality_sheet.display());
    println!("{}", e.sentiment_sheet.display());
    println!("{}", e.key.display());
    Ok(())
}

fn bail_usage(msg: String) -> CmdResult {
    Err(Failure::usage(anyhow!(msg)))
}
