//! Acceptance harness: one `criterion N: PASS|FAIL` line per criterion.
//! Pass criterion numbers as arguments to run a subset.

#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use vpkl::experiment::{self, RunSummary, TaggerSource, TrainRequest};
use vpkl::manifest::Dataset;
use vpkl_core::corpus::{generate_corpus, CorpusConfig, KeywordId};
use vpkl_core::eval::{Counts, MetricsReport};
use vpkl_core::train::{ModelKind, TrainConfig};

const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 8;
/// Budget for the 3× vocabulary comparison, which has no runtime bound.
const SCALING_EPOCHS: usize = 40;
const LEARNING_RATE: f64 = 3e-3;
const BASE_VOCAB: usize = 12;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failed = Vec::new();
    let mut instances = 0;
    let cases = common::gradient_cases();
    for case in &cases {
        let r = common::run_case(case, 100, 0);
        instances += r.checked;
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, r.name);
        }
        if !r.passed() || r.checked < 100 {
            failed.push(r.name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        failed.is_empty() && secs < 60.0,
        format!(
            "{} cases, {instances} instances, worst rel. error {:.2e} ({}), {secs:.1}s{}",
            cases.len(),
            worst.0,
            worst.1,
            if failed.is_empty() { String::new() } else { format!(", failing {failed:?}") }
        ),
    )
}

fn brute_force() -> Verdict {
    let dev = common::oracle_deviation(300, 7);
    match common::check_metric_counts(500, 7) {
        Ok(n) => Verdict::new(
            dev <= 1e-12,
            format!("max value deviation {dev:.2e} over 300 instances, counts exact on {n} instances"),
        ),
        Err(e) => Verdict::new(false, format!("count mismatch: {e}")),
    }
}

fn invariants() -> Verdict {
    match common::check_attention_invariants(1000, 11) {
        Ok(n) => Verdict::new(n >= 1000, format!("transpose and permutation identities exact on {n} instances")),
        Err(e) => Verdict::new(false, e),
    }
}

fn sampling() -> Verdict {
    let v = common::check_episode_constraints(10_000, 5);
    Verdict::new(
        v.episodes == 10_000 && v.positive_share == 0 && v.negative_disjoint == 0 && v.structure == 0,
        format!(
            "{} episodes: {} positive-share, {} negative-disjoint, {} structural violations",
            v.episodes, v.positive_share, v.negative_disjoint, v.structure
        ),
    )
}

fn random_baseline() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, alpha) in [-0.5, 0.0, 0.3, 0.8].into_iter().enumerate() {
        let c = common::random_baseline_monte_carlo(alpha, 10_000, 100 + i as u64);
        pass &= c.within_3_sigma();
        parts.push(format!(
            "a={alpha}: recall {:.4} vs {:.4}, in-span {:.4} vs {:.4}",
            c.recall, c.expected_recall, c.in_span, c.expected_in_span
        ));
    }
    Verdict::new(pass, format!("10000 trials each; {}", parts.join("; ")))
}

fn dataset(vocab_size: usize, seed: u64) -> Dataset {
    let cfg = CorpusConfig { vocab_size, seed, ..CorpusConfig::default() };
    Dataset::from_corpus(&generate_corpus(&cfg).expect("default corpus generates"))
}

fn train(
    ds: &Dataset,
    kind: ModelKind,
    epochs: usize,
    seed: u64,
    tagger: TaggerSource,
    vocabulary: Option<&BTreeSet<KeywordId>>,
    eval_keywords: Option<&BTreeSet<KeywordId>>,
) -> RunSummary {
    let tc = TrainConfig {
        model: kind,
        learning_rate: LEARNING_RATE,
        max_epochs: epochs,
        patience: epochs,
        seed,
        ..TrainConfig::default()
    };
    let mut req = TrainRequest::new(ds, tc).expect("default model config");
    req.tagger = tagger;
    if let Some(v) = vocabulary {
        req.vocabulary = v.clone();
    }
    let start = Instant::now();
    let r = experiment::run(ds, &req, eval_keywords).expect("training run");
    eprintln!(
        "  {} seed {seed} ({}, {} keywords, {epochs} epochs): detection F1 {:.4}, localisation F1 {:.4}, {:.0}s",
        kind.name(),
        tagger.name(),
        req.vocabulary.len(),
        r.detection_f1(),
        r.localisation_f1(),
        start.elapsed().as_secs_f64()
    );
    r
}

#[derive(Default)]
struct Runs {
    davenet: Vec<RunSummary>,
    contrastive: Vec<RunSummary>,
    locattn: Vec<RunSummary>,
    tagger: Vec<RunSummary>,
    wide_davenet: Vec<RunSummary>,
    narrow_locattn: Vec<RunSummary>,
    wide_locattn: Vec<RunSummary>,
    ordering_secs: f64,
}

impl Runs {
    fn all(&self) -> impl Iterator<Item = &RunSummary> {
        [&self.davenet, &self.contrastive, &self.locattn, &self.tagger, &self.wide_davenet, &self.narrow_locattn, &self.wide_locattn]
            .into_iter()
            .flatten()
    }
}

fn mean(runs: &[RunSummary], f: impl Fn(&RunSummary) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

fn ordering(runs: &mut Runs) -> Verdict {
    let start = Instant::now();
    for seed in SEEDS {
        let ds = dataset(BASE_VOCAB, seed);
        runs.davenet.push(train(&ds, ModelKind::Davenet, EPOCHS, seed, TaggerSource::Ideal, None, None));
        runs.contrastive.push(train(&ds, ModelKind::Contrastive, EPOCHS, seed, TaggerSource::Ideal, None, None));
        runs.locattn.push(train(&ds, ModelKind::LocAttn, EPOCHS, seed, TaggerSource::Ideal, None, None));
    }
    runs.ordering_secs = start.elapsed().as_secs_f64();
    let det = |r: &RunSummary| r.detection_f1();
    let loc = |r: &RunSummary| r.localisation_f1();
    let (d0, d1, d2) = (mean(&runs.davenet, det), mean(&runs.contrastive, det), mean(&runs.locattn, det));
    let (l0, l1, l2) = (mean(&runs.davenet, loc), mean(&runs.contrastive, loc), mean(&runs.locattn, loc));
    let pass = l0 < l1 && l1 < l2 && d0 <= d1 && d1 <= d2 && runs.ordering_secs < 900.0;
    let soft = if d2 >= 0.85 && l2 >= 0.75 { "met" } else { "missed" };
    Verdict::new(
        pass,
        format!(
            "mean detection F1 {d0:.4} <= {d1:.4} <= {d2:.4}; mean localisation F1 {l0:.4} < {l1:.4} < {l2:.4}; \
             soft targets (0.85, 0.75) {soft}; {:.0}s",
            runs.ordering_secs
        ),
    )
}

fn vocabulary_scaling(runs: &mut Runs) -> Verdict {
    let base: BTreeSet<KeywordId> = (0..BASE_VOCAB as KeywordId).collect();
    let mut holds = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let ds = dataset(3 * BASE_VOCAB, seed);
        let narrow = train(&ds, ModelKind::LocAttn, SCALING_EPOCHS, seed, TaggerSource::Ideal, Some(&base), Some(&base));
        let wide = train(&ds, ModelKind::LocAttn, SCALING_EPOCHS, seed, TaggerSource::Ideal, None, Some(&base));
        let davenet = train(&ds, ModelKind::Davenet, SCALING_EPOCHS, seed, TaggerSource::Ideal, None, Some(&base));
        let (n, w, d) = (narrow.localisation_f1(), wide.localisation_f1(), davenet.localisation_f1());
        if d < w && w < n {
            holds += 1;
        }
        parts.push(format!(
            "seed {seed}: {d:.4} < {w:.4} < {n:.4} (detection {:.4}, {:.4}, {:.4})",
            davenet.detection_f1(),
            wide.detection_f1(),
            narrow.detection_f1()
        ));
        runs.narrow_locattn.push(narrow);
        runs.wide_locattn.push(wide);
        runs.wide_davenet.push(davenet);
    }
    Verdict::new(
        holds == SEEDS.len(),
        format!(
            "DAVEnet < {}-keyword locattn < {BASE_VOCAB}-keyword locattn on localisation F1 over the first {BASE_VOCAB} keywords, {holds}/{} seeds; {}",
            3 * BASE_VOCAB,
            SEEDS.len(),
            parts.join("; ")
        ),
    )
}

fn noisy_tagger(runs: &mut Runs) -> Verdict {
    let mut holds = 0;
    let mut parts = Vec::new();
    for (i, seed) in SEEDS.into_iter().enumerate() {
        let ds = dataset(BASE_VOCAB, seed);
        let noisy = train(&ds, ModelKind::LocAttn, EPOCHS, seed, TaggerSource::Simulated, None, None);
        let (d, t, ideal) = (
            runs.davenet[i].localisation_f1(),
            noisy.localisation_f1(),
            runs.locattn[i].localisation_f1(),
        );
        if d < t && t < ideal {
            holds += 1;
        }
        parts.push(format!(
            "seed {seed}: {d:.4} < {t:.4} < {ideal:.4} (detection {:.4}, {:.4}, {:.4})",
            runs.davenet[i].detection_f1(),
            noisy.detection_f1(),
            runs.locattn[i].detection_f1()
        ));
        runs.tagger.push(noisy);
    }
    Verdict::new(
        holds == SEEDS.len(),
        format!(
            "DAVEnet < simulated-tagger locattn < ideal locattn on localisation F1, {holds}/{} seeds; {}",
            SEEDS.len(),
            parts.join("; ")
        ),
    )
}

fn subset_law(c_det: &Counts, c_loc: &Counts) -> bool {
    c_loc.tp <= c_det.tp
        && c_loc.precision() <= c_det.precision()
        && c_loc.recall() <= c_det.recall()
        && c_loc.f1() <= c_det.f1()
}

fn report_obeys_subset_law(r: &MetricsReport) -> bool {
    subset_law(&r.detection, &r.localisation) && r.per_keyword.iter().all(|k| subset_law(&k.detection, &k.localisation))
}

fn protocol(runs: &Runs) -> Verdict {
    let mut rows = 0;
    let paths = support::fixture_paths();
    for p in &paths {
        match support::check(p) {
            Ok(n) => rows += n,
            Err(e) => return Verdict::new(false, e),
        }
    }
    let checked: Vec<bool> = runs.all().map(|r| report_obeys_subset_law(&r.test.report)).collect();
    let bad = checked.iter().filter(|ok| !**ok).count();
    Verdict::new(
        !paths.is_empty() && bad == 0,
        format!(
            "{} fixtures, {rows} rows exact; localisation <= detection on {}/{} runs",
            paths.len(),
            checked.len() - bad,
            checked.len()
        ),
    )
}

const TINY_CORPUS: &str = r#"{"vocab_size": 6, "max_keywords": 2, "n_train": 60, "n_dev": 20, "n_test": 20, "queries_per_keyword": 2}"#;

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vpkl"))
        .args(args)
        .env_remove("VPKL_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("vpkl {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn pipeline(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |rel: &str| root.join(rel).to_str().expect("utf-8 path").to_owned();
    fs::write(root.join("tiny.json"), TINY_CORPUS).map_err(|e| e.to_string())?;
    cli(&["gen-data", "--config", &p("tiny.json"), "--out", &p("data"), "--seed", "4"])?;
    cli(&[
        "train", "--model", "locattn", "--data", &p("data"), "--out", &p("m.ckpt"), "--max-epochs", "2", "--seed", "4",
        "--no-wall-time",
    ])?;
    cli(&["eval", "--ckpt", &p("m.ckpt"), "--alpha", "0.2", "--out", &p("eval")])?;
    cli(&["baseline-random", "--data", &p("data"), "--alpha", "0", "--out", &p("random"), "--seed", "4"])?;
    let files = [
        "m.ckpt.log.jsonl",
        "eval/detection.csv",
        "eval/localisation.csv",
        "eval/per_keyword.csv",
        "eval/outcomes.jsonl",
        "random/detection.csv",
        "random/localisation.csv",
    ];
    files
        .iter()
        .map(|f| fs::read(root.join(f)).map(|b| (f.to_string(), b)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().expect("temp dir");
    let b = tempfile::tempdir().expect("temp dir");
    match (pipeline(a.path()), pipeline(b.path())) {
        (Ok(x), Ok(y)) => {
            let differing: Vec<&str> = x.iter().zip(&y).filter(|(l, r)| l.1 != r.1).map(|(l, _)| l.0.as_str()).collect();
            Verdict::new(
                differing.is_empty(),
                if differing.is_empty() {
                    format!("{} files byte-identical across two runs", x.len())
                } else {
                    format!("differing: {differing:?}")
                },
            )
        }
        (Err(e), _) | (_, Err(e)) => Verdict::new(false, e),
    }
}

fn main() {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut runs = Runs::default();
    let mut failed = 0;
    let mut emit = |n: u32, v: Verdict| {
        println!("criterion {n}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed += 1;
        }
    };
    let simple: [(u32, fn() -> Verdict); 5] =
        [(1, gradient_oracle), (2, brute_force), (3, invariants), (4, sampling), (5, random_baseline)];
    for (n, f) in simple {
        if run(n) {
            emit(n, f());
        }
    }
    let needs_ordering = run(6) || run(8) || run(9);
    if needs_ordering {
        let v = ordering(&mut runs);
        if run(6) {
            emit(6, v);
        }
    }
    if run(7) || run(9) {
        let v = vocabulary_scaling(&mut runs);
        if run(7) {
            emit(7, v);
        }
    }
    if run(8) || run(9) {
        let v = noisy_tagger(&mut runs);
        if run(8) {
            emit(8, v);
        }
    }
    if run(9) {
        emit(9, protocol(&runs));
    }
    if run(10) {
        emit(10, determinism());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
