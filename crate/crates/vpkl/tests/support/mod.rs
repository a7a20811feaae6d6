#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use vpkl_core::corpus::{Alignment, CaptionRecord, Token};
use vpkl_core::eval::{make_outcome, metrics, Counts, MetricsReport};
use vpkl_core::tensor::Tensor;

#[derive(Debug, Deserialize)]
pub struct Fixture {
    pub description: String,
    pub alpha: f64,
    pub utterances: Vec<FixtureUtterance>,
    pub pairs: Vec<FixturePair>,
    pub expected: Expected,
}

#[derive(Debug, Deserialize)]
pub struct FixtureUtterance {
    pub id: String,
    pub n_valid: usize,
    pub spans: Vec<(String, usize, usize)>,
}

#[derive(Debug, Deserialize)]
pub struct FixturePair {
    pub query: String,
    pub keyword: String,
    pub utterance: String,
    pub score: f64,
    pub predicted_frame: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct Expected {
    pub detection: BTreeMap<String, ExpectedRow>,
    pub localisation: BTreeMap<String, ExpectedRow>,
}

#[derive(Debug, Deserialize)]
pub struct ExpectedRow {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: String,
    pub recall: String,
    pub f1: String,
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics")
}

pub fn fixture_paths() -> Vec<PathBuf> {
    let mut paths: Vec<PathBuf> = fs::read_dir(fixture_dir())
        .expect("fixture directory")
        .map(|e| e.expect("directory entry").path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
}

/// `"a/b"` or `"a"` as the nearest double.
pub fn fraction(s: &str) -> f64 {
    match s.split_once('/') {
        Some((a, b)) => a.trim().parse::<u64>().expect("numerator") as f64 / b.trim().parse::<u64>().expect("denominator") as f64,
        None => s.trim().parse::<u64>().expect("integer") as f64,
    }
}

fn keyword_id(name: &str) -> u32 {
    match Token::parse(name) {
        Some(Token::Keyword(k)) => k,
        _ => panic!("not a keyword name: {name}"),
    }
}

fn caption(u: &FixtureUtterance) -> CaptionRecord {
    let alignments: Vec<Alignment> = u
        .spans
        .iter()
        .map(|(name, start, end)| Alignment { token: Token::Keyword(keyword_id(name)), start: *start, end: *end })
        .collect();
    CaptionRecord {
        id: u.id.clone(),
        features: Tensor::zeros([u.n_valid, 1]),
        n_valid: u.n_valid,
        transcript: alignments.iter().map(|a| a.token).collect(),
        alignments,
    }
}

pub fn load(path: &Path) -> Fixture {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn report(f: &Fixture) -> MetricsReport {
    let utterances: BTreeMap<&str, CaptionRecord> = f.utterances.iter().map(|u| (u.id.as_str(), caption(u))).collect();
    let outcomes: Vec<_> = f
        .pairs
        .iter()
        .map(|p| {
            let u = &utterances[p.utterance.as_str()];
            make_outcome(&p.query, keyword_id(&p.keyword), u, p.score, p.predicted_frame, f.alpha)
        })
        .collect();
    metrics(&outcomes, f.alpha)
}

fn compare(label: &str, got: &Counts, want: &ExpectedRow) -> Result<(), String> {
    let checks = [
        ("precision", got.precision(), fraction(&want.precision)),
        ("recall", got.recall(), fraction(&want.recall)),
        ("f1", got.f1(), fraction(&want.f1)),
    ];
    if (got.tp, got.fp, got.fn_) != (want.tp, want.fp, want.fn_) {
        return Err(format!(
            "{label}: counts {}/{}/{}, expected {}/{}/{}",
            got.tp, got.fp, got.fn_, want.tp, want.fp, want.fn_
        ));
    }
    for (name, g, w) in checks {
        if g != w {
            return Err(format!("{label}: {name} {g}, expected {w}"));
        }
    }
    Ok(())
}

/// Reproduces every expected row exactly and checks localisation TP never
/// exceeds detection TP. Returns the number of rows compared.
pub fn check(path: &Path) -> Result<usize, String> {
    let f = load(path);
    let r = report(&f);
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut rows = 0;
    for (task, expected, all, per) in [
        ("detection", &f.expected.detection, &r.detection, r.per_keyword.iter().map(|k| (k.keyword, k.detection)).collect::<Vec<_>>()),
        ("localisation", &f.expected.localisation, &r.localisation, r.per_keyword.iter().map(|k| (k.keyword, k.localisation)).collect()),
    ] {
        if expected.len() != per.len() + 1 {
            return Err(format!("{name} {task}: {} expected rows for {} keywords", expected.len(), per.len()));
        }
        for (key, want) in expected {
            let got = if key == "all" {
                *all
            } else {
                let id = keyword_id(key);
                per.iter().find(|(k, _)| *k == id).map(|(_, c)| *c).ok_or_else(|| format!("{name}: no pairs for {key}"))?
            };
            compare(&format!("{name} {task} {key}"), &got, want)?;
            rows += 1;
        }
    }
    for k in r.per_keyword.iter() {
        if k.localisation.tp > k.detection.tp {
            return Err(format!("{name}: localisation TP above detection TP for keyword {}", k.keyword));
        }
    }
    Ok(rows)
}
