//! Result files: metric CSVs, per-pair outcomes, the training log and
//! attention exports.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vpkl_core::eval::{per_keyword_report, Counts, EvalOutcome, MetricsReport};
use vpkl_core::train::EpochRecord;

use crate::manifest::Dataset;

pub const COUNTS_HEADER: &str = "keyword,tp,fp,fn,precision,recall,f1";

fn counts_row(out: &mut String, name: &str, c: &Counts) {
    writeln!(
        out,
        "{name},{},{},{},{},{},{}",
        c.tp,
        c.fp,
        c.fn_,
        c.precision(),
        c.recall(),
        c.f1()
    )
    .expect("writing to a string");
}

/// Per-keyword rows in id order, then the micro-aggregated `all` row.
pub fn counts_csv(ds: &Dataset, report: &MetricsReport, localisation: bool) -> String {
    let mut out = String::from(COUNTS_HEADER);
    out.push('\n');
    for k in &report.per_keyword {
        let c = if localisation { &k.localisation } else { &k.detection };
        counts_row(&mut out, &ds.keyword_name(k.keyword), c);
    }
    counts_row(
        &mut out,
        "all",
        if localisation { &report.localisation } else { &report.detection },
    );
    out
}

pub fn per_keyword_csv(ds: &Dataset, outcomes: &[EvalOutcome]) -> String {
    let mut out = String::from("keyword,detection_accuracy,localisation_f1,occurrences,status\n");
    for r in per_keyword_report(outcomes) {
        writeln!(
            out,
            "{},{},{},{},{}",
            ds.keyword_name(r.keyword),
            r.detection_accuracy,
            r.localisation_f1,
            r.occurrences,
            if r.excluded { "excluded: no occurrences" } else { "ok" }
        )
        .expect("writing to a string");
    }
    out
}

#[derive(Serialize)]
struct OutcomeLine<'a> {
    query_id: &'a str,
    utterance_id: &'a str,
    keyword: String,
    score: f64,
    detected: bool,
    predicted_frame: Option<usize>,
    truth_contains: bool,
    truth_span: Option<[usize; 2]>,
    localisation_hit: bool,
}

pub fn outcomes_jsonl(ds: &Dataset, outcomes: &[EvalOutcome]) -> String {
    let mut out = String::new();
    for o in outcomes {
        let line = OutcomeLine {
            query_id: &o.query_id,
            utterance_id: &o.utterance_id,
            keyword: ds.keyword_name(o.keyword),
            score: o.score,
            detected: o.detected,
            predicted_frame: o.predicted_frame,
            truth_contains: o.truth_contains,
            truth_span: o.truth_span.map(|(s, e)| [s, e]),
            localisation_hit: o.localisation_hit,
        };
        out.push_str(&serde_json::to_string(&line).expect("outcome serializes"));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct Aggregate {
    precision: f64,
    recall: f64,
    f1: f64,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
}

impl From<&Counts> for Aggregate {
    fn from(c: &Counts) -> Self {
        Self { precision: c.precision(), recall: c.recall(), f1: c.f1(), tp: c.tp, fp: c.fp, fn_: c.fn_ }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    alpha: f64,
    split: &'a str,
    pairs: usize,
    detection: Aggregate,
    localisation: Aggregate,
}

pub fn summary_json(report: &MetricsReport, split: &str, pairs: usize) -> String {
    let s = Summary {
        alpha: report.alpha,
        split,
        pairs,
        detection: (&report.detection).into(),
        localisation: (&report.localisation).into(),
    };
    let mut text = serde_json::to_string_pretty(&s).expect("summary serializes");
    text.push('\n');
    text
}

/// Writes `detection.csv`, `localisation.csv`, `per_keyword.csv`,
/// `outcomes.jsonl` and `metrics.json` into `dir`.
pub fn write_evaluation(dir: &Path, ds: &Dataset, split: &str, outcomes: &[EvalOutcome], report: &MetricsReport) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let files = [
        ("detection.csv", counts_csv(ds, report, false)),
        ("localisation.csv", counts_csv(ds, report, true)),
        ("per_keyword.csv", per_keyword_csv(ds, outcomes)),
        ("outcomes.jsonl", outcomes_jsonl(ds, outcomes)),
        ("metrics.json", summary_json(report, split, outcomes.len())),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogLine {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    pub wall_time_s: f64,
}

impl LogLine {
    pub fn new(r: &EpochRecord, wall_time_s: f64) -> Self {
        Self { epoch: r.epoch, mean_loss: r.mean_loss, val_accuracy: r.val_accuracy, wall_time_s }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log line serializes")
    }
}

#[derive(Serialize)]
pub struct AttentionHeader {
    pub utterance_id: String,
    pub query_id: String,
    pub query_keyword: Option<String>,
    pub predicted_frame: Option<usize>,
    pub n_valid_frames: usize,
    pub score: f64,
}

/// Sidecar header path: `attention.csv` gets `attention.json`.
pub fn attention_header_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn write_attention(csv: &Path, weights: &[f64], header: &AttentionHeader) -> io::Result<()> {
    let mut out = String::from("frame_index,weight\n");
    for (i, w) in weights.iter().enumerate() {
        writeln!(out, "{i},{w}").expect("writing to a string");
    }
    fs::write(csv, out)?;
    let mut json = serde_json::to_string_pretty(header).expect("header serializes");
    json.push('\n');
    fs::write(attention_header_path(csv), json)
}
