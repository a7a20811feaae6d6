use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use vpkl::checkpoint::Checkpoint;
use vpkl::dsp::MelConfig;
use vpkl::experiment::{self, ExperimentError, Model, TaggerSource, TrainRequest};
use vpkl::featurize::{featurize, FeaturizeConfig};
use vpkl::manifest::Dataset;
use vpkl::results::{self, AttentionHeader, LogLine};
use vpkl_core::attention::argmax_prefix;
use vpkl_core::corpus::{generate_corpus, CorpusConfig, KeywordId, Split};
use vpkl_core::encoders::{embed_audio, embed_vision, ModelConfig};
use vpkl_core::eval::{published_alpha, score_pair};
use vpkl_core::sampling::NegativesExclude;
use vpkl_core::train::{ModelKind, TrainConfig, TrainError};

/// An error caused by the invocation rather than the data.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "vpkl", version, about = "Visually prompted keyword localisation toolkit")]
struct Cli {
    /// Seed for all random choices; defaults to $VPKL_SEED, then 0.
    #[arg(long, global = true, env = "VPKL_SEED")]
    seed: Option<u64>,

    /// Repeat for more log output (also honours RUST_LOG).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("unknown model {s:?} (expected davenet, contrastive or locattn)"))
}

#[derive(Debug, Clone, Copy)]
enum Alpha {
    Value(f64),
    Published,
}

fn parse_alpha(s: &str) -> Result<Alpha, String> {
    if s == "published" {
        return Ok(Alpha::Published);
    }
    match s.parse::<f64>() {
        Ok(a) if !a.is_nan() => Ok(Alpha::Value(a)),
        _ => Err(format!("invalid threshold {s:?} (expected a number or \"published\")")),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?} (expected train, dev or test)"))
}

fn parse_rule(s: &str) -> Result<NegativesExclude, String> {
    match s {
        "all" => Ok(NegativesExclude::All),
        "sampled_only" => Ok(NegativesExclude::SampledOnly),
        _ => Err(format!("unknown rule {s:?} (expected all or sampled_only)")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired corpus.
    GenData {
        /// Corpus configuration JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute log-mel features for the captions of a manifest.
    Featurize {
        #[arg(long)]
        wav_dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 1024)]
        frames: usize,
        #[arg(long, default_value_t = 40)]
        bins: usize,
    },
    /// Train a model and write its best-validation checkpoint.
    Train {
        #[arg(long, value_parser = parse_model)]
        model: ModelKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ideal")]
        tagger_source: TaggerSource,
        /// Keyword names to sample episodes for, one per line or a JSON list.
        #[arg(long)]
        vocab_file: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        dedupe_loss_terms: bool,
        #[arg(long, value_parser = parse_rule)]
        negatives_exclude: Option<NegativesExclude>,
        /// Encoder configuration JSON.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Training log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Record `wall_time_s` as 0 so logs are byte-comparable.
        #[arg(long)]
        no_wall_time: bool,
    },
    /// Tune the detection threshold on the development split and print it.
    TuneThreshold {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vocab_file: Option<PathBuf>,
    },
    /// Evaluate detection and localisation at a fixed threshold.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// A number, or `published` for the real-data default of the model.
        #[arg(long, allow_negative_numbers = true, value_parser = parse_alpha)]
        alpha: Alpha,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        vocab_file: Option<PathBuf>,
    },
    /// Export the frame attention of one query against one utterance.
    Localise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// A query id, or an image id to use the whole image.
        #[arg(long)]
        query: String,
        #[arg(long)]
        utterance: String,
        #[arg(long)]
        emit_attention: PathBuf,
    },
    /// Score with the random baseline.
    BaselineRandom {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        vocab_file: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Keyword ids named in a vocabulary file.
fn read_vocab(ds: &Dataset, path: &Path) -> Result<BTreeSet<KeywordId>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let names: Vec<String> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect()
    };
    let mut ids = BTreeSet::new();
    for n in &names {
        let id = ds
            .keyword_by_name(n)
            .ok_or_else(|| anyhow!("{}: keyword {n:?} is not in the dataset vocabulary", path.display()))?;
        ids.insert(id);
    }
    if ids.is_empty() {
        bail!("{}: no keywords listed", path.display());
    }
    Ok(ids)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn checkpoint_dataset(ck: &Checkpoint, data: Option<PathBuf>) -> Result<Dataset> {
    let dir = data
        .or_else(|| ck.header.data_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| usage("--data is required: the checkpoint does not record a dataset"))?;
    let ds = load_dataset(&dir)?;
    if ds.corpus_id != ck.header.corpus_id {
        log::warn!(
            "checkpoint was trained on {} but {} holds {}",
            ck.header.corpus_id,
            dir.display(),
            ds.corpus_id
        );
    }
    Ok(ds)
}

/// Keywords to evaluate: the vocabulary file if given, else the training vocabulary.
fn eval_keywords(ck: &Checkpoint, ds: &Dataset, vocab_file: Option<&Path>) -> Result<BTreeSet<KeywordId>> {
    match vocab_file {
        Some(p) => read_vocab(ds, p),
        None => Ok(ck.header.vocabulary.iter().copied().collect()),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenData { config, out } => {
            let mut cfg: CorpusConfig = match &config {
                Some(p) => read_json(p).map_err(|e| usage(format!("{e:#}")))?,
                None => CorpusConfig::default(),
            };
            if cli.seed.is_some() || config.is_none() {
                cfg.seed = seed;
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let corpus = generate_corpus(&cfg)?;
            let ds = Dataset::from_corpus(&corpus);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            ds.save(&out)?;
            let mut text = serde_json::to_string_pretty(&cfg)?;
            text.push('\n');
            fs::write(out.join("corpus.json"), text)?;
            println!(
                "{}: {} train, {} dev, {} test examples; {} dev and {} test queries",
                ds.corpus_id,
                ds.train.examples.len(),
                ds.dev.examples.len(),
                ds.test.examples.len(),
                ds.dev.queries.len(),
                ds.test.queries.len()
            );
        }
        Command::Featurize { wav_dir, manifest, sample_rate, frames, bins } => {
            let cfg = FeaturizeConfig {
                mel: MelConfig { n_bins: bins, ..MelConfig::default() },
                sample_rate,
                target_frames: frames,
            };
            let n = featurize(&wav_dir, &manifest, &cfg)?;
            println!("featurized {n} captions into {}", manifest.display());
        }
        Command::Train {
            model,
            data,
            out,
            tagger_source,
            vocab_file,
            lr,
            batch_size,
            max_epochs,
            patience,
            dedupe_loss_terms,
            negatives_exclude,
            model_config,
            log,
            no_wall_time,
        } => {
            let ds = load_dataset(&data)?;
            let defaults = TrainConfig::default();
            let max_epochs = max_epochs.unwrap_or(defaults.max_epochs);
            let tc = TrainConfig {
                model,
                learning_rate: lr.unwrap_or(defaults.learning_rate),
                batch_size: batch_size.unwrap_or(defaults.batch_size),
                max_epochs,
                patience: patience.unwrap_or(defaults.patience.min(max_epochs)),
                seed,
                dedupe_loss_terms,
                negatives_exclude: negatives_exclude.unwrap_or(defaults.negatives_exclude),
                ..defaults
            };
            tc.validate().map_err(|e| usage(e.to_string()))?;
            let mut req = TrainRequest::new(&ds, tc)?;
            req.tagger = tagger_source;
            if let Some(p) = &model_config {
                let mc: ModelConfig = read_json(p).map_err(|e| usage(format!("{e:#}")))?;
                if mc.audio.n_bins != req.model.audio.n_bins || mc.vision.in_channels != req.model.vision.in_channels {
                    return Err(usage(format!(
                        "{} expects {} bins and {} channels; the dataset has {} and {}",
                        p.display(),
                        mc.audio.n_bins,
                        mc.vision.in_channels,
                        req.model.audio.n_bins,
                        req.model.vision.in_channels
                    )));
                }
                mc.validate().map_err(|e| usage(e.to_string()))?;
                req.model = mc;
            }
            if let Some(p) = &vocab_file {
                req.vocabulary = read_vocab(&ds, p)?;
            }
            let log_path = log.unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", out.display())));
            let mut log_file =
                fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
            let start = Instant::now();
            let mut write_err = None;
            let result = experiment::train_model(&ds, &req, &mut |r| {
                let wall = if no_wall_time { 0.0 } else { start.elapsed().as_secs_f64() };
                let line = LogLine::new(r, wall);
                eprintln!(
                    "epoch {:>3}  loss {:.6}  val {:.4}  {:.1}s",
                    r.epoch,
                    r.mean_loss,
                    r.val_accuracy,
                    start.elapsed().as_secs_f64()
                );
                if let Err(e) = writeln!(log_file, "{}", line.to_json()).and_then(|_| log_file.flush()) {
                    write_err.get_or_insert(e);
                }
            });
            if let Some(e) = write_err {
                return Err(anyhow!(e).context(format!("writing {}", log_path.display())));
            }
            let outcome = match result {
                Ok(o) => o,
                Err(ExperimentError::Train(TrainError::Diverged { epoch, step, last_finite })) => {
                    let rescue = PathBuf::from(format!("{}.last-finite", out.display()));
                    let partial = vpkl_core::train::TrainOutcome {
                        optimizer: vpkl_core::train::AdamState::new(&last_finite),
                        params: last_finite,
                        best_epoch: epoch,
                        best_val_accuracy: f64::NAN,
                        log: Vec::new(),
                        steps: Vec::new(),
                    };
                    experiment::checkpoint_for(&ds, &req, &partial, Some(data.display().to_string()))
                        .save(&rescue)?;
                    bail!(
                        "loss diverged at epoch {epoch}, step {step}; last finite parameters saved to {}",
                        rescue.display()
                    );
                }
                Err(e) => return Err(e.into()),
            };
            let ck = experiment::checkpoint_for(&ds, &req, &outcome, Some(data.display().to_string()));
            ck.save(&out)?;
            println!(
                "best epoch {} of {}: validation accuracy {}; checkpoint {}",
                outcome.best_epoch,
                outcome.log.len(),
                outcome.best_val_accuracy,
                out.display()
            );
        }
        Command::TuneThreshold { ckpt, data, vocab_file } => {
            let ck = load_checkpoint(&ckpt)?;
            let ds = checkpoint_dataset(&ck, data)?;
            let keywords = eval_keywords(&ck, &ds, vocab_file.as_deref())?;
            let th = experiment::tune(&Model::from_checkpoint(&ck), &ds, Some(&keywords))?;
            eprintln!("development detection F1 {}", th.f1);
            println!("{}", th.alpha);
        }
        Command::Eval { ckpt, data, alpha, out, split, vocab_file } => {
            let ck = load_checkpoint(&ckpt)?;
            let ds = checkpoint_dataset(&ck, data)?;
            let keywords = eval_keywords(&ck, &ds, vocab_file.as_deref())?;
            let alpha = match alpha {
                Alpha::Value(a) => a,
                Alpha::Published => published_alpha(ck.header.model),
            };
            let ev = experiment::evaluate(&Model::from_checkpoint(&ck), &ds, split, alpha, Some(&keywords))?;
            results::write_evaluation(&out, &ds, split.name(), &ev.outcomes, &ev.report)
                .with_context(|| format!("writing results to {}", out.display()))?;
            print_report(&ev.report);
        }
        Command::Localise { ckpt, data, query, utterance, emit_attention } => {
            let ck = load_checkpoint(&ckpt)?;
            let ds = checkpoint_dataset(&ck, data)?;
            localise(&ck, &ds, &query, &utterance, &emit_attention)?;
        }
        Command::BaselineRandom { data, alpha, out, split, vocab_file } => {
            let ds = load_dataset(&data)?;
            let keywords = match &vocab_file {
                Some(p) => Some(read_vocab(&ds, p)?),
                None => None,
            };
            let ev = experiment::random_baseline(&ds, split, alpha, seed, keywords.as_ref())?;
            if let Some(dir) = &out {
                results::write_evaluation(dir, &ds, split.name(), &ev.outcomes, &ev.report)
                    .with_context(|| format!("writing results to {}", dir.display()))?;
            }
            print_report(&ev.report);
        }
    }
    Ok(())
}

fn print_report(r: &vpkl_core::eval::MetricsReport) {
    for (name, c) in [("detection", &r.detection), ("localisation", &r.localisation)] {
        println!(
            "{name:<12} P {:.4}  R {:.4}  F1 {:.4}  (tp {}, fp {}, fn {})",
            c.precision(),
            c.recall(),
            c.f1(),
            c.tp,
            c.fp,
            c.fn_
        );
    }
}

fn localise(ck: &Checkpoint, ds: &Dataset, query: &str, utterance: &str, out: &Path) -> Result<()> {
    let examples = || Split::ALL.into_iter().flat_map(|s| ds.split(s).examples.iter());
    let (pixels, keyword) = match Split::ALL
        .into_iter()
        .flat_map(|s| ds.split(s).queries.iter())
        .find(|q| q.id == query)
    {
        Some(q) => (q.pixels.tensor().clone(), Some(ds.keyword_name(q.keyword))),
        None => match examples().find(|e| e.image.id == query) {
            Some(e) => (e.image.pixels.tensor().clone(), None),
            None => bail!("no query or image with id {query:?}"),
        },
    };
    let caption = &examples()
        .find(|e| e.caption.id == utterance)
        .ok_or_else(|| anyhow!("no utterance with id {utterance:?}"))?
        .caption;
    let model = Model::from_checkpoint(ck);
    let ev = embed_vision(&model.config, &model.params, &pixels)?;
    let ea = embed_audio(&model.config, &model.params, &caption.features)?;
    let s = score_pair(model.kind, &ev.rows, &ea.rows)?;
    let predicted = argmax_prefix(&s.a_audio, caption.n_valid);
    let header = AttentionHeader {
        utterance_id: caption.id.clone(),
        query_id: query.to_string(),
        query_keyword: keyword,
        predicted_frame: predicted,
        n_valid_frames: caption.n_valid,
        score: s.score,
    };
    results::write_attention(out, &s.a_audio[..caption.n_valid], &header)
        .with_context(|| format!("writing {}", out.display()))?;
    match predicted {
        Some(f) => println!("predicted frame {f}, score {}", s.score),
        None => println!("no valid frames, score {}", s.score),
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|c| {
        c.is::<UsageError>() || c.downcast_ref::<ExperimentError>().is_some_and(ExperimentError::is_usage)
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
