//! Training, threshold tuning and evaluation over a loaded dataset.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vpkl_core::corpus::{CaptionRecord, CorpusSplit, KeywordId, KeywordQuery, Split};
use vpkl_core::encoders::{init_parameters, ModelConfig, ParamSet};
use vpkl_core::eval::{self, EvalError, EvalOutcome, MetricsReport, ScoredPair, Threshold};
use vpkl_core::rng::rng_for;
use vpkl_core::sampling::{
    build_keyword_index, sample_validation_triplets, KeywordSource, SamplingError, ValidationTriplet,
};
use vpkl_core::train::{self, EpochRecord, ModelKind, TrainConfig, TrainData, TrainError, TrainOutcome};

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointInfo, CheckpointMetrics};
use crate::manifest::{Dataset, ManifestError};

const TRIPLET_STREAM: u64 = 700;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaggerSource {
    /// Keywords from the transcripts, as a perfect tagger would report them.
    #[default]
    Ideal,
    Simulated,
}

impl TaggerSource {
    pub fn name(self) -> &'static str {
        match self {
            TaggerSource::Ideal => "ideal",
            TaggerSource::Simulated => "simulated",
        }
    }

    pub fn keyword_source(self) -> KeywordSource {
        match self {
            TaggerSource::Ideal => KeywordSource::Transcripts,
            TaggerSource::Simulated => KeywordSource::TaggerTags,
        }
    }
}

impl fmt::Display for TaggerSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaggerSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ideal" => Ok(TaggerSource::Ideal),
            "simulated" => Ok(TaggerSource::Simulated),
            _ => Err(format!("unknown tagger source {s:?} (expected ideal or simulated)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl ExperimentError {
    /// Whether the failure stems from how the tool was invoked.
    pub fn is_usage(&self) -> bool {
        matches!(self, ExperimentError::Usage(_) | ExperimentError::Train(TrainError::Config(_)))
    }
}

/// A trained (or freshly initialised) model ready for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Self {
            kind: ck.header.model,
            config: ck.header.model_config.clone(),
            params: ck.params.clone(),
        }
    }
}

/// The default encoders, resized to the dataset's feature width and channels.
pub fn model_config_for(ds: &Dataset) -> Result<ModelConfig, ExperimentError> {
    let ex = ds
        .train
        .examples
        .first()
        .ok_or_else(|| ExperimentError::Data("training split is empty".into()))?;
    let mut cfg = ModelConfig::default();
    cfg.audio.n_bins = ex.caption.features.shape()[1];
    cfg.vision.in_channels = ex.image.pixels.channels();
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRequest {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub tagger: TaggerSource,
    /// Keywords episodes are sampled for.
    pub vocabulary: BTreeSet<KeywordId>,
}

impl TrainRequest {
    pub fn new(ds: &Dataset, train: TrainConfig) -> Result<Self, ExperimentError> {
        Ok(Self {
            train,
            model: model_config_for(ds)?,
            tagger: TaggerSource::Ideal,
            vocabulary: ds.keyword_ids(),
        })
    }
}

/// Development triplets over the given vocabulary, keyed by the training seed.
pub fn validation_triplets(
    ds: &Dataset,
    vocabulary: &BTreeSet<KeywordId>,
    cfg: &TrainConfig,
) -> Result<Vec<ValidationTriplet>, ExperimentError> {
    let index = build_keyword_index(&ds.dev.examples, KeywordSource::Transcripts, vocabulary)?;
    Ok(sample_validation_triplets(
        &index,
        cfg.negatives_exclude,
        &mut rng_for(cfg.seed, &[TRIPLET_STREAM]),
    )?)
}

pub fn train_model(
    ds: &Dataset,
    req: &TrainRequest,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, ExperimentError> {
    let unknown: Vec<KeywordId> = req.vocabulary.difference(&ds.keyword_ids()).copied().collect();
    if !unknown.is_empty() {
        return Err(ExperimentError::Usage(format!("vocabulary ids {unknown:?} are not in the dataset")));
    }
    let index = build_keyword_index(&ds.train.examples, req.tagger.keyword_source(), &req.vocabulary)?;
    let triplets = validation_triplets(ds, &req.vocabulary, &req.train)?;
    let data = TrainData {
        train: &ds.train.examples,
        index: &index,
        dev: &ds.dev.examples,
        triplets: &triplets,
    };
    let init = init_parameters(&req.model, req.train.seed);
    Ok(train::train(&req.train, &req.model, init, &data, on_epoch)?)
}

pub fn checkpoint_for(ds: &Dataset, req: &TrainRequest, out: &TrainOutcome, data_dir: Option<String>) -> Checkpoint {
    let info = CheckpointInfo {
        model: req.train.model,
        model_config: req.model.clone(),
        train_config: req.train.clone(),
        tagger_source: req.tagger,
        vocabulary: req.vocabulary.iter().copied().collect(),
        corpus_id: ds.corpus_id.clone(),
        data_dir,
        metrics: CheckpointMetrics {
            best_epoch: out.best_epoch,
            best_val_accuracy: out.best_val_accuracy,
            epochs_run: out.log.len(),
        },
    };
    Checkpoint::new(info, out.params.clone(), out.optimizer.clone())
}

/// Queries of a split restricted to `keywords`, with every utterance.
pub fn evaluation_set(split: &CorpusSplit, keywords: Option<&BTreeSet<KeywordId>>) -> (Vec<KeywordQuery>, Vec<CaptionRecord>) {
    let queries = split
        .queries
        .iter()
        .filter(|q| keywords.is_none_or(|k| k.contains(&q.keyword)))
        .cloned()
        .collect();
    let utterances = split.examples.iter().map(|e| e.caption.clone()).collect();
    (queries, utterances)
}

/// Scores of every (query, utterance) pair of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSplit {
    pub queries: Vec<KeywordQuery>,
    pub utterances: Vec<CaptionRecord>,
    pub scored: Vec<ScoredPair>,
}

impl ScoredSplit {
    pub fn outcomes(&self, alpha: f64) -> Vec<EvalOutcome> {
        eval::outcomes(&self.scored, &self.queries, &self.utterances, alpha)
    }

    pub fn truth(&self) -> Vec<bool> {
        self.scored
            .iter()
            .map(|p| self.utterances[p.utterance].spans_of(self.queries[p.query].keyword).next().is_some())
            .collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.scored.iter().map(|p| p.score).collect()
    }
}

pub fn score_split(
    model: &Model,
    split: &CorpusSplit,
    keywords: Option<&BTreeSet<KeywordId>>,
) -> Result<ScoredSplit, ExperimentError> {
    let (queries, utterances) = evaluation_set(split, keywords);
    if queries.is_empty() || utterances.is_empty() {
        return Err(ExperimentError::Data(format!(
            "{} split has {} queries and {} utterances to evaluate",
            split.split.name(),
            queries.len(),
            utterances.len()
        )));
    }
    eval::require_alignments(&utterances)?;
    let scored = eval::score_all(model.kind, &model.config, &model.params, &queries, &utterances)?;
    Ok(ScoredSplit { queries, utterances, scored })
}

/// Detection threshold maximising development F1.
pub fn tune(model: &Model, ds: &Dataset, keywords: Option<&BTreeSet<KeywordId>>) -> Result<Threshold, ExperimentError> {
    let s = score_split(model, &ds.dev, keywords)?;
    Ok(eval::tune_threshold(&s.scores(), &s.truth())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub outcomes: Vec<EvalOutcome>,
    pub report: MetricsReport,
}

impl Evaluation {
    pub fn from_outcomes(outcomes: Vec<EvalOutcome>, alpha: f64) -> Self {
        let report = eval::metrics(&outcomes, alpha);
        Self { outcomes, report }
    }
}

pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    split: Split,
    alpha: f64,
    keywords: Option<&BTreeSet<KeywordId>>,
) -> Result<Evaluation, ExperimentError> {
    let s = score_split(model, ds.split(split), keywords)?;
    Ok(Evaluation::from_outcomes(s.outcomes(alpha), alpha))
}

pub fn random_baseline(
    ds: &Dataset,
    split: Split,
    alpha: f64,
    seed: u64,
    keywords: Option<&BTreeSet<KeywordId>>,
) -> Result<Evaluation, ExperimentError> {
    let (queries, utterances) = evaluation_set(ds.split(split), keywords);
    eval::require_alignments(&utterances)?;
    let q: Vec<(String, KeywordId)> = queries.iter().map(|q| (q.id.clone(), q.keyword)).collect();
    Ok(Evaluation::from_outcomes(eval::random_baseline(&q, &utterances, alpha, seed), alpha))
}

/// Everything one train → tune → test run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub kind: ModelKind,
    pub threshold: Threshold,
    pub training: TrainOutcome,
    pub test: Evaluation,
}

impl RunSummary {
    pub fn detection_f1(&self) -> f64 {
        self.test.report.detection.f1()
    }

    pub fn localisation_f1(&self) -> f64 {
        self.test.report.localisation.f1()
    }
}

/// Trains, tunes α on dev and evaluates on test, all restricted to
/// `eval_keywords` when given.
pub fn run(
    ds: &Dataset,
    req: &TrainRequest,
    eval_keywords: Option<&BTreeSet<KeywordId>>,
) -> Result<RunSummary, ExperimentError> {
    let training = train_model(ds, req, &mut |r| {
        log::info!(
            "{} epoch {}: loss {:.5}, val {:.4}",
            req.train.model.name(),
            r.epoch,
            r.mean_loss,
            r.val_accuracy
        )
    })?;
    let model = Model {
        kind: req.train.model,
        config: req.model.clone(),
        params: training.params.clone(),
    };
    let threshold = tune(&model, ds, eval_keywords)?;
    let test = evaluate(&model, ds, Split::Test, threshold.alpha, eval_keywords)?;
    Ok(RunSummary { kind: req.train.model, threshold, training, test })
}
