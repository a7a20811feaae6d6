//! Detection and localisation scoring, threshold tuning and reports.
//!
//! A pair is one (query, utterance). It is detected when its score exceeds
//! α; it is a localisation hit when it is detected, the utterance contains the
//! query keyword and the attention argmax over valid frames falls inside one
//! of that keyword's spans.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::attention::{argmax_prefix, cosine, AttentionOutput};
use crate::corpus::{CaptionRecord, KeywordId, KeywordQuery};
use crate::encoders::{embed_audio, embed_vision, ModelConfig, ParamSet};
use crate::rng::rng_for;
use crate::tensor::{Tensor, TensorError};
use crate::train::ModelKind;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("utterance {0} has no alignments")]
    MissingAlignments(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Score and frame weights for one (image embedding, audio embedding) pair.
/// Thresholds reported for the full-scale real-data models, kept as defaults
/// when no development set is available for tuning.
pub fn published_alpha(kind: ModelKind) -> f64 {
    match kind {
        ModelKind::Davenet => 0.85,
        ModelKind::Contrastive => 0.55,
        ModelKind::LocAttn => 0.5885,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub score: f64,
    pub a_audio: Vec<f64>,
}

/// Cosine of the two context vectors, or `tanh` of the pooled similarity
/// for the retrieval baseline.
pub fn score_from_attention(kind: ModelKind, att: &AttentionOutput) -> f64 {
    match kind {
        ModelKind::Davenet => libm::tanh(att.pooled),
        ModelKind::Contrastive | ModelKind::LocAttn => cosine(&att.c_audio, &att.c_vision),
    }
}

pub fn score_pair(kind: ModelKind, e_vision: &Tensor, e_audio: &Tensor) -> Result<PairScore, TensorError> {
    let att = AttentionOutput::from_rows(e_vision, e_audio)?;
    Ok(PairScore {
        score: score_from_attention(kind, &att),
        a_audio: att.a_audio,
    })
}

/// Embeds `pixels` and `features` and scores the pair.
pub fn detection_score(
    kind: ModelKind,
    config: &ModelConfig,
    params: &ParamSet,
    pixels: &Tensor,
    features: &Tensor,
) -> Result<f64, TensorError> {
    let ev = embed_vision(config, params, pixels)?;
    let ea = embed_audio(config, params, features)?;
    Ok(score_pair(kind, &ev.rows, &ea.rows)?.score)
}

/// Model output for every (query, utterance) pair, query-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub query: usize,
    pub utterance: usize,
    pub score: f64,
    pub predicted_frame: Option<usize>,
}

pub fn score_all(
    kind: ModelKind,
    config: &ModelConfig,
    params: &ParamSet,
    queries: &[KeywordQuery],
    utterances: &[CaptionRecord],
) -> Result<Vec<ScoredPair>, EvalError> {
    let q_emb = queries
        .iter()
        .map(|q| embed_vision(config, params, q.pixels.tensor()))
        .collect::<Result<Vec<_>, _>>()?;
    let u_emb = utterances
        .iter()
        .map(|u| embed_audio(config, params, &u.features))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity(queries.len() * utterances.len());
    for (qi, qe) in q_emb.iter().enumerate() {
        for (ui, ue) in u_emb.iter().enumerate() {
            let s = score_pair(kind, &qe.rows, &ue.rows)?;
            out.push(ScoredPair {
                query: qi,
                utterance: ui,
                score: s.score,
                predicted_frame: argmax_prefix(&s.a_audio, utterances[ui].n_valid),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub query_id: String,
    pub utterance_id: String,
    pub keyword: KeywordId,
    pub score: f64,
    pub detected: bool,
    pub predicted_frame: Option<usize>,
    pub truth_contains: bool,
    /// The span holding the prediction when hit, otherwise the first span.
    pub truth_span: Option<(usize, usize)>,
    pub localisation_hit: bool,
}

pub fn make_outcome(
    query_id: &str,
    keyword: KeywordId,
    utterance: &CaptionRecord,
    score: f64,
    predicted_frame: Option<usize>,
    alpha: f64,
) -> EvalOutcome {
    let spans: Vec<(usize, usize)> = utterance.spans_of(keyword).collect();
    let detected = score > alpha;
    let containing = predicted_frame.and_then(|f| spans.iter().copied().find(|&(s, e)| s <= f && f < e));
    let localisation_hit = detected && containing.is_some();
    EvalOutcome {
        query_id: query_id.into(),
        utterance_id: utterance.id.clone(),
        keyword,
        score,
        detected,
        predicted_frame,
        truth_contains: !spans.is_empty(),
        truth_span: containing.or(spans.first().copied()),
        localisation_hit,
    }
}

pub fn outcomes(
    scored: &[ScoredPair],
    queries: &[KeywordQuery],
    utterances: &[CaptionRecord],
    alpha: f64,
) -> Vec<EvalOutcome> {
    scored
        .iter()
        .map(|p| {
            let q = &queries[p.query];
            make_outcome(&q.id, q.keyword, &utterances[p.utterance], p.score, p.predicted_frame, alpha)
        })
        .collect()
}

/// Confusion counts. `tn` is only meaningful for detection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR/(P+R)`, evaluated as `2TP/(2TP+FP+FN)` so that it is the
    /// correctly rounded ratio of the counts. Zero when `P + R = 0`.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `(TP + TN) / pairs`.
    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn detection_counts(o: &EvalOutcome) -> Counts {
    let mut c = Counts::default();
    match (o.detected, o.truth_contains) {
        (true, true) => c.tp = 1,
        (true, false) => c.fp = 1,
        (false, true) => c.fn_ = 1,
        (false, false) => c.tn = 1,
    }
    c
}

/// TP = hit; FP = detected without a hit; FN = present without a hit.
pub fn localisation_counts(o: &EvalOutcome) -> Counts {
    let mut c = Counts::default();
    if o.localisation_hit {
        c.tp = 1;
    } else {
        if o.detected {
            c.fp = 1;
        }
        if o.truth_contains {
            c.fn_ = 1;
        }
        if !o.detected && !o.truth_contains {
            c.tn = 1;
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeywordReport {
    pub keyword: KeywordId,
    pub pairs: usize,
    /// Pairs whose utterance contains the keyword.
    pub occurrences: usize,
    pub detection: Counts,
    pub localisation: Counts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub alpha: f64,
    /// Micro-aggregated over all pairs.
    pub detection: Counts,
    pub localisation: Counts,
    /// Ascending keyword id.
    pub per_keyword: Vec<KeywordReport>,
}

pub fn metrics(outcomes: &[EvalOutcome], alpha: f64) -> MetricsReport {
    let mut detection = Counts::default();
    let mut localisation = Counts::default();
    let mut per: BTreeMap<KeywordId, KeywordReport> = BTreeMap::new();
    for o in outcomes {
        let (d, l) = (detection_counts(o), localisation_counts(o));
        detection.add(&d);
        localisation.add(&l);
        let row = per.entry(o.keyword).or_insert_with(|| KeywordReport {
            keyword: o.keyword,
            pairs: 0,
            occurrences: 0,
            detection: Counts::default(),
            localisation: Counts::default(),
        });
        row.pairs += 1;
        row.occurrences += usize::from(o.truth_contains);
        row.detection.add(&d);
        row.localisation.add(&l);
    }
    MetricsReport {
        alpha,
        detection,
        localisation,
        per_keyword: per.into_values().collect(),
    }
}

/// One row of the per-keyword plot data.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordRow {
    pub keyword: KeywordId,
    pub detection_accuracy: f64,
    pub localisation_f1: f64,
    pub occurrences: usize,
    /// Keywords that never occur are kept as warning rows at the end.
    pub excluded: bool,
}

/// Rows sorted by detection accuracy, descending; ties by keyword id.
pub fn per_keyword_report(outcomes: &[EvalOutcome]) -> Vec<KeywordRow> {
    let report = metrics(outcomes, f64::NAN);
    let mut rows: Vec<KeywordRow> = report
        .per_keyword
        .iter()
        .map(|k| KeywordRow {
            keyword: k.keyword,
            detection_accuracy: k.detection.accuracy(),
            localisation_f1: k.localisation.f1(),
            occurrences: k.occurrences,
            excluded: k.occurrences == 0,
        })
        .collect();
    for r in rows.iter().filter(|r| r.excluded) {
        log::warn!("keyword {} never occurs in the evaluated utterances", r.keyword);
    }
    rows.sort_by(|a, b| {
        a.excluded
            .cmp(&b.excluded)
            .then(b.detection_accuracy.total_cmp(&a.detection_accuracy))
            .then(a.keyword.cmp(&b.keyword))
    });
    rows
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub alpha: f64,
    pub f1: f64,
}

/// Maximises detection F1 over `{min − 1}` and the midpoints between
/// consecutive distinct scores; ties go to the largest α.
pub fn tune_threshold(scores: &[f64], truth: &[bool]) -> Result<Threshold, EvalError> {
    if scores.len() != truth.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: truth.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty("no development pairs"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = truth.iter().filter(|&&t| t).count();

    // Suffix counts: detected pairs are exactly those from a sorted index on.
    let f1_from = |start: usize, pos_above: usize| {
        let detected = scores.len() - start;
        Counts {
            tp: pos_above,
            fp: detected - pos_above,
            fn_: positives - pos_above,
            tn: 0,
        }
        .f1()
    };
    let lowest = scores[order[0]];
    let mut best = Threshold {
        alpha: lowest - 1.0,
        f1: f1_from(0, positives),
    };
    let mut pos_above = positives;
    for k in 1..order.len() {
        pos_above -= usize::from(truth[order[k - 1]]);
        let (lo, hi) = (scores[order[k - 1]], scores[order[k]]);
        if lo == hi {
            continue;
        }
        let mut alpha = lo + (hi - lo) / 2.0;
        if alpha >= hi {
            alpha = lo;
        }
        let f1 = f1_from(k, pos_above);
        if f1 >= best.f1 {
            best = Threshold { alpha, f1 };
        }
    }
    Ok(best)
}

/// Scores `U(−1, 1)` and frame weights `U(0, 1)` per pair, drawn in
/// query-major order from one seeded stream.
pub fn random_baseline(
    queries: &[(String, KeywordId)],
    utterances: &[CaptionRecord],
    alpha: f64,
    seed: u64,
) -> Vec<EvalOutcome> {
    let mut rng = rng_for(seed, &[900]);
    let mut out = Vec::with_capacity(queries.len() * utterances.len());
    let mut weights = vec![];
    for (qid, keyword) in queries {
        for u in utterances {
            let score = rng.random_range(-1.0..1.0);
            weights.clear();
            weights.extend((0..u.features.shape()[0]).map(|_| rng.random::<f64>()));
            let frame = argmax_prefix(&weights, u.n_valid);
            out.push(make_outcome(qid, *keyword, u, score, frame, alpha));
        }
    }
    out
}

/// Checks the alignments needed for localisation truth.
pub fn require_alignments(utterances: &[CaptionRecord]) -> Result<(), EvalError> {
    match utterances.iter().find(|u| u.alignments.is_empty()) {
        Some(u) => Err(EvalError::MissingAlignments(u.id.clone())),
        None => Ok(()),
    }
}
