//! Shared generators, brute-force references and property runners for the
//! integration suites and the acceptance harness.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use vpkl_core::attention::{localising_attention, matchmap, pooled_similarity};
use vpkl_core::corpus::{
    generate_corpus, Alignment, CaptionRecord, CorpusConfig, ImageRecord, KeywordId, PairedExample, Split, Token,
};
use vpkl_core::encoders::{init_parameters, AudioEncoderConfig, BoundParams, Conv1dSpec, Conv2dSpec, ModelConfig, VisionEncoderConfig};
use vpkl_core::eval::{self, Counts, EvalOutcome};
use vpkl_core::gradcheck::{gradient_check_many, DEFAULT_STEP};
use vpkl_core::image::PixelGrid;
use vpkl_core::losses::{
    contrastive_davenet_loss, davenet_triplet_loss, episode_contexts, localisation_attention_loss, EpisodeVars, Impostors,
    PairVars,
};
use vpkl_core::rng::{rng_for, StdRng};
use vpkl_core::sampling::{build_keyword_index, sample_episode, KeywordSource, NegativesExclude, SampledEpisodeRefs};
use vpkl_core::train::{episode_loss, ModelKind, TrainError};
use vpkl_core::{Graph, ReduceKind, Tensor, TensorError, Var};

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>;

pub const REL_TOLERANCE: f64 = 1e-4;
/// Instances closer than this to a ReLU kink or max tie are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn uniform(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Multiples of 1/8 in [-1, 1]: small sums of products are exact.
pub fn dyadic(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-8..=8) as f64 / 8.0).collect()).unwrap()
}

fn dims(rng: &mut StdRng, n: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=hi)).collect()
}

/// A scalar-valued graph and the leaf values it is checked at.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

/// Wraps a tensor-valued op into `Σ w ⊙ op(inputs)` with fixed random `w`.
fn projected<F>(rng: &mut StdRng, inputs: Vec<Tensor>, op: F) -> Instance
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + 'static,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = op(&mut g, &vars).expect("generator produces valid shapes");
    let w = uniform(rng, g.shape(out));
    Instance {
        inputs,
        build: Box::new(move |g, v| {
            let y = op(g, v)?;
            let c = g.constant(w.clone());
            let m = g.mul(y, c)?;
            g.sum_all(m)
        }),
    }
}

pub struct GradCase {
    pub name: &'static str,
    pub generate: fn(&mut StdRng) -> Instance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub checked: usize,
    pub redrawn: usize,
    pub max_rel_error: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE
    }
}

/// Checks `instances` draws of `case` away from kinks.
pub fn run_case(case: &GradCase, instances: usize, seed: u64) -> CaseReport {
    let mut rng = rng_for(seed, &[case.name.len() as u64, case.name.bytes().map(u64::from).sum()]);
    let mut report = CaseReport {
        name: case.name,
        checked: 0,
        redrawn: 0,
        max_rel_error: 0.0,
    };
    while report.checked < instances {
        let inst = (case.generate)(&mut rng);
        let r = gradient_check_many(&inst.build, &inst.inputs, DEFAULT_STEP)
            .unwrap_or_else(|e| panic!("{}: {e}", case.name));
        if r.kink_margin < KINK_MARGIN {
            report.redrawn += 1;
            assert!(report.redrawn < 50 * instances, "{}: too many instances near kinks", case.name);
            continue;
        }
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
    }
    report
}

fn pair_inputs(rng: &mut StdRng, pairs: usize) -> Vec<Tensor> {
    let d = rng.random_range(2..=4);
    let mut out = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let n = rng.random_range(2..=5);
        let m = rng.random_range(2..=4);
        out.push(uniform(rng, &[n, d]));
        out.push(uniform(rng, &[m, d]));
    }
    out
}

fn pair_vars(v: &[Var]) -> Vec<PairVars> {
    v.chunks(2).map(|c| PairVars { audio: c[0], vision: c[1] }).collect()
}

fn episode_vars(v: &[Var]) -> EpisodeVars {
    let p = pair_vars(v);
    EpisodeVars {
        anchor: p[0],
        positive: p[1],
        negatives: p[2..].to_vec(),
    }
}

fn loss_err(e: vpkl_core::losses::LossError) -> TensorError {
    match e {
        vpkl_core::losses::LossError::Tensor(t) => t,
        other => TensorError::Config(other.to_string()),
    }
}

fn train_err(e: TrainError) -> TensorError {
    match e {
        TrainError::Tensor(t) => t,
        other => TensorError::Config(other.to_string()),
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        audio: AudioEncoderConfig {
            n_bins: 3,
            layers: vec![Conv1dSpec { width: 3, channels: 4, dilation: 2 }],
            embed_dim: 3,
        },
        vision: VisionEncoderConfig {
            in_channels: 2,
            layers: vec![Conv2dSpec { kernel: 3, channels: 4, stride: 2 }],
            embed_dim: 3,
        },
    }
}

pub fn bare_example(id: usize, features: Tensor, pixels: Tensor) -> PairedExample {
    let n = features.shape()[0];
    PairedExample {
        caption: CaptionRecord {
            id: format!("c{id}"),
            features,
            n_valid: n,
            transcript: vec![],
            alignments: vec![],
        },
        image: ImageRecord {
            id: format!("i{id}"),
            pixels: PixelGrid::from_tensor(pixels).unwrap(),
            true_tags: BTreeSet::new(),
            tagger_tags: BTreeSet::new(),
            boxes: vec![],
        },
    }
}

/// Loss of one episode of random examples as a function of every model
/// parameter.
fn end_to_end(rng: &mut StdRng, kind: ModelKind) -> Instance {
    let cfg = tiny_model();
    let examples: Vec<PairedExample> = (0..5)
        .map(|i| bare_example(i, uniform(rng, &[6, 3]), uniform(rng, &[4, 4, 2])))
        .collect();
    let ep = SampledEpisodeRefs {
        anchor: 0,
        keyword: 0,
        positive: 1,
        negatives: vec![2, 3, 4],
    };
    let dedupe = rng.random_bool(0.5);
    // Random biases keep dead pixels from sharing an embedding, which would
    // tie the matchmap maxima exactly.
    let params = init_parameters(&cfg, rng.random());
    let inputs = params
        .tensors
        .iter()
        .map(|t| {
            let mut t = uniform(rng, t.shape());
            if t.rank() == 1 {
                t.data_mut().iter_mut().for_each(|b| *b = 0.5 + 0.5 * *b);
            }
            t
        })
        .collect();
    Instance {
        inputs,
        build: Box::new(move |g, v| {
            let bound = BoundParams { vars: v.to_vec() };
            episode_loss(g, kind, &cfg, &bound, &examples, &ep, dedupe).map_err(train_err)
        }),
    }
}

pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "matmul",
            generate: |r| {
                let d = dims(r, 3, 5);
                let inputs = vec![uniform(r, &[d[0], d[1]]), uniform(r, &[d[1], d[2]])];
                projected(r, inputs, |g, v| g.matmul(v[0], v[1]))
            },
        },
        GradCase {
            name: "matmul_nt",
            generate: |r| {
                let d = dims(r, 3, 5);
                let inputs = vec![uniform(r, &[d[0], d[1]]), uniform(r, &[d[2], d[1]])];
                projected(r, inputs, |g, v| g.matmul_nt(v[0], v[1]))
            },
        },
        GradCase {
            name: "transpose",
            generate: |r| {
                let d = dims(r, 2, 8);
                let inputs = vec![uniform(r, &d)];
                projected(r, inputs, |g, v| g.transpose(v[0]))
            },
        },
        GradCase {
            name: "add_bias",
            generate: |r| {
                let rank = r.random_range(1..=3);
                let d = dims(r, rank, 5);
                let inputs = vec![uniform(r, &d), uniform(r, &[d[rank - 1]])];
                projected(r, inputs, |g, v| g.add_bias(v[0], v[1]))
            },
        },
        GradCase {
            name: "conv1d_same",
            generate: |r| {
                let (n, cin, cout) = (r.random_range(1..=8), r.random_range(1..=3), r.random_range(1..=3));
                let width = [1, 3, 5][r.random_range(0..3)];
                let dilation = r.random_range(1..=3);
                let inputs = vec![uniform(r, &[n, cin]), uniform(r, &[width, cin, cout])];
                projected(r, inputs, move |g, v| g.conv1d_same(v[0], v[1], dilation))
            },
        },
        GradCase {
            name: "conv2d_same",
            generate: |r| {
                let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
                let (cin, cout) = (r.random_range(1..=2), r.random_range(1..=2));
                let (kh, kw) = ([1, 3][r.random_range(0..2)], [1, 3][r.random_range(0..2)]);
                let stride = r.random_range(1..=2);
                let inputs = vec![uniform(r, &[h, w, cin]), uniform(r, &[kh, kw, cin, cout])];
                projected(r, inputs, move |g, v| g.conv2d_same(v[0], v[1], stride))
            },
        },
        GradCase {
            name: "relu",
            generate: |r| {
                let d = dims(r, 2, 6);
                let inputs = vec![uniform(r, &d)];
                projected(r, inputs, |g, v| g.relu(v[0]))
            },
        },
        GradCase {
            name: "tanh",
            generate: |r| {
                let d = dims(r, 2, 6);
                let inputs = vec![uniform(r, &d)];
                projected(r, inputs, |g, v| g.tanh(v[0]))
            },
        },
        GradCase {
            name: "square",
            generate: |r| {
                let d = dims(r, 2, 6);
                let inputs = vec![uniform(r, &d)];
                projected(r, inputs, |g, v| g.square(v[0]))
            },
        },
        GradCase {
            name: "reduce_max",
            generate: |r| reduce_case(r, ReduceKind::Max),
        },
        GradCase {
            name: "reduce_mean",
            generate: |r| reduce_case(r, ReduceKind::Mean),
        },
        GradCase {
            name: "reduce_sum",
            generate: |r| reduce_case(r, ReduceKind::Sum),
        },
        GradCase {
            name: "mul",
            generate: |r| {
                let d = dims(r, 2, 6);
                let inputs = vec![uniform(r, &d), uniform(r, &d)];
                projected(r, inputs, |g, v| g.mul(v[0], v[1]))
            },
        },
        GradCase {
            name: "mul_rows",
            generate: |r| {
                let d = dims(r, 2, 6);
                let inputs = vec![uniform(r, &[d[0]]), uniform(r, &d)];
                projected(r, inputs, |g, v| g.mul(v[0], v[1]))
            },
        },
        GradCase {
            name: "add",
            generate: |r| {
                let d = dims(r, 2, 6);
                let inputs = vec![uniform(r, &d), uniform(r, &d)];
                projected(r, inputs, |g, v| g.add(v[0], v[1]))
            },
        },
        GradCase {
            name: "sub",
            generate: |r| {
                let d = dims(r, 2, 6);
                let inputs = vec![uniform(r, &d), uniform(r, &d)];
                projected(r, inputs, |g, v| g.sub(v[0], v[1]))
            },
        },
        GradCase {
            name: "scale",
            generate: |r| {
                let d = dims(r, 2, 6);
                let c = r.random_range(-3.0..3.0);
                let inputs = vec![uniform(r, &d)];
                projected(r, inputs, move |g, v| g.scale(v[0], c))
            },
        },
        GradCase {
            name: "add_scalar",
            generate: |r| {
                let d = dims(r, 2, 6);
                let c = r.random_range(-3.0..3.0);
                let inputs = vec![uniform(r, &d)];
                projected(r, inputs, move |g, v| g.add_scalar(v[0], c))
            },
        },
        GradCase {
            name: "cosine_similarity",
            generate: |r| {
                let n = r.random_range(1..=8);
                let inputs = vec![uniform(r, &[n]), uniform(r, &[n])];
                projected(r, inputs, |g, v| g.cosine_similarity(v[0], v[1]))
            },
        },
        GradCase {
            name: "sum_all",
            generate: |r| {
                let d = dims(r, 3, 4);
                let inputs = vec![uniform(r, &d)];
                projected(r, inputs, |g, v| g.sum_all(v[0]))
            },
        },
        GradCase {
            name: "reshape",
            generate: |r| {
                let d = dims(r, 3, 4);
                let flat = vec![d[0] * d[1], d[2]];
                let inputs = vec![uniform(r, &d)];
                projected(r, inputs, move |g, v| g.reshape(v[0], &flat))
            },
        },
        GradCase {
            name: "squared_error",
            generate: |r| {
                let t = r.random_range(-1.0..1.0);
                let inputs = vec![uniform(r, &[])];
                projected(r, inputs, move |g, v| g.squared_error(v[0], t))
            },
        },
        GradCase {
            name: "add_all",
            generate: |r| {
                let k = r.random_range(1..=5);
                let inputs = (0..k).map(|_| uniform(r, &[])).collect();
                projected(r, inputs, |g, v| g.add_all(v))
            },
        },
        GradCase {
            name: "pooled_similarity",
            generate: |r| {
                let inputs = pair_inputs(r, 1);
                projected(r, inputs, |g, v| {
                    let mm = matchmap(g, v[1], v[0])?;
                    pooled_similarity(g, mm)
                })
            },
        },
        GradCase {
            name: "localising_attention",
            generate: |r| {
                let inputs = pair_inputs(r, 1);
                let w: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
                Instance {
                    inputs,
                    build: Box::new(move |g, v| {
                        let att = localising_attention(g, v[1], v[0])?;
                        let mut terms = Vec::new();
                        for (x, &wi) in [att.a_audio, att.a_vision, att.c_audio, att.c_vision].into_iter().zip(&w) {
                            let s = g.sum_all(x)?;
                            let sq = g.square(s)?;
                            terms.push(g.scale(sq, wi)?);
                        }
                        g.add_all(&terms)
                    }),
                }
            },
        },
        GradCase {
            name: "contrastive_davenet_loss",
            generate: |r| Instance {
                inputs: pair_inputs(r, 5),
                build: Box::new(|g, v| contrastive_davenet_loss(g, &episode_vars(v)).map_err(loss_err)),
            },
        },
        GradCase {
            name: "localisation_attention_loss",
            generate: |r| {
                let dedupe = r.random_bool(0.5);
                Instance {
                    inputs: pair_inputs(r, 5),
                    build: Box::new(move |g, v| {
                        let c = episode_contexts(g, &episode_vars(v)).map_err(loss_err)?;
                        localisation_attention_loss(g, &c, dedupe).map_err(loss_err)
                    }),
                }
            },
        },
        GradCase {
            name: "davenet_triplet_loss",
            generate: |r| {
                let b = r.random_range(2..=4);
                let imps: Vec<Impostors> = (0..b)
                    .map(|i| {
                        let mut other = || (i + r.random_range(1..b)) % b;
                        Impostors { caption: other(), image: other() }
                    })
                    .collect();
                let margin = r.random_range(0.1..1.0);
                Instance {
                    inputs: pair_inputs(r, b),
                    build: Box::new(move |g, v| davenet_triplet_loss(g, &pair_vars(v), &imps, margin).map_err(loss_err)),
                }
            },
        },
        GradCase {
            name: "locattn_end_to_end",
            generate: |r| end_to_end(r, ModelKind::LocAttn),
        },
        GradCase {
            name: "contrastive_end_to_end",
            generate: |r| end_to_end(r, ModelKind::Contrastive),
        },
    ]
}

fn reduce_case(r: &mut StdRng, kind: ReduceKind) -> Instance {
    let rank = r.random_range(1..=3);
    let d = dims(r, rank, 5);
    let axis = r.random_range(0..rank);
    let inputs = vec![uniform(r, &d)];
    projected(r, inputs, move |g, v| g.reduce(v[0], axis, kind))
}

// Nested-loop references.

pub fn naive_matchmap(v: &Tensor, a: &Tensor) -> Vec<Vec<f64>> {
    let (m, n, d) = (v.shape()[0], a.shape()[0], v.shape()[1]);
    let mut out = vec![vec![0.0; n]; m];
    for (j, row) in out.iter_mut().enumerate() {
        for (i, cell) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in 0..d {
                s += v.get(&[j, k]).unwrap() * a.get(&[i, k]).unwrap();
            }
            *cell = s;
        }
    }
    out
}

pub fn naive_pooled(v: &Tensor, a: &Tensor) -> f64 {
    let mm = naive_matchmap(v, a);
    let n = mm[0].len();
    let mut total = 0.0;
    for i in 0..n {
        let mut best = f64::NEG_INFINITY;
        for row in &mm {
            if row[i] > best {
                best = row[i];
            }
        }
        total += best;
    }
    total / n as f64
}

#[derive(Debug, Clone)]
pub struct NaiveAttention {
    pub a_audio: Vec<f64>,
    pub a_vision: Vec<f64>,
    pub c_audio: Vec<f64>,
    pub c_vision: Vec<f64>,
}

pub fn naive_attention(v: &Tensor, a: &Tensor) -> NaiveAttention {
    let mm = naive_matchmap(v, a);
    let (m, n, d) = (v.shape()[0], a.shape()[0], v.shape()[1]);
    let mut a_audio = vec![f64::NEG_INFINITY; n];
    let mut a_vision = vec![f64::NEG_INFINITY; m];
    for j in 0..m {
        for i in 0..n {
            a_audio[i] = a_audio[i].max(mm[j][i]);
            a_vision[j] = a_vision[j].max(mm[j][i]);
        }
    }
    let mut c_audio = vec![0.0; d];
    let mut c_vision = vec![0.0; d];
    for k in 0..d {
        for i in 0..n {
            c_audio[k] += a_audio[i] * a.get(&[i, k]).unwrap();
        }
        for j in 0..m {
            c_vision[k] += a_vision[j] * v.get(&[j, k]).unwrap();
        }
    }
    NaiveAttention { a_audio, a_vision, c_audio, c_vision }
}

pub fn naive_cosine(x: &[f64], y: &[f64]) -> f64 {
    let (mut d, mut nx, mut ny) = (0.0, 0.0, 0.0);
    for k in 0..x.len() {
        d += x[k] * y[k];
        nx += x[k] * x[k];
        ny += y[k] * y[k];
    }
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    d / (nx.sqrt() * ny.sqrt() + 1e-8)
}

/// `(audio, vision)` of the anchor, positive and three negatives.
pub type NaiveEpisode = [(Tensor, Tensor); 5];

pub fn naive_contrastive_loss(ep: &NaiveEpisode) -> f64 {
    let s = |v: &Tensor, a: &Tensor| naive_pooled(v, a);
    let (a, v) = (&ep[0].0, &ep[0].1);
    let mut l = 2.0 * (s(v, a) - 1.0).powi(2);
    l += (s(v, &ep[1].0) - 1.0).powi(2);
    l += (s(&ep[1].1, a) - 1.0).powi(2);
    for neg in &ep[2..] {
        l += (s(v, &neg.0) + 1.0).powi(2);
        l += (s(&neg.1, a) + 1.0).powi(2);
    }
    l
}

pub fn naive_locattn_loss(ep: &NaiveEpisode, dedupe: bool) -> f64 {
    let (a, v) = (&ep[0].0, &ep[0].1);
    let anchor = naive_attention(v, a);
    let (ca, cv) = (anchor.c_audio, anchor.c_vision);
    let ca_pos = naive_attention(v, &ep[1].0).c_audio;
    let fixed = (naive_cosine(&ca, &cv) - 1.0).powi(2)
        + (naive_cosine(&ca, &ca_pos) - 1.0).powi(2)
        + (naive_cosine(&cv, &ca) - 1.0).powi(2)
        + (naive_cosine(&cv, &ca_pos) - 1.0).powi(2);
    let mut l = if dedupe { fixed } else { 0.0 };
    for neg in &ep[2..] {
        if !dedupe {
            l += fixed;
        }
        let ca_neg = naive_attention(v, &neg.0).c_audio;
        let cv_neg = naive_attention(&neg.1, a).c_vision;
        l += (naive_cosine(&ca, &ca_neg) + 1.0).powi(2);
        l += (naive_cosine(&cv, &cv_neg) + 1.0).powi(2);
    }
    l
}

pub fn naive_triplet_loss(pairs: &[(Tensor, Tensor)], imps: &[Impostors], margin: f64) -> f64 {
    let mut l = 0.0;
    for (i, (a, v)) in pairs.iter().enumerate() {
        let paired = naive_pooled(v, a);
        let imp_caption = naive_pooled(v, &pairs[imps[i].caption].0);
        let imp_image = naive_pooled(&pairs[imps[i].image].1, a);
        l += (imp_caption - paired + margin).max(0.0);
        l += (imp_image - paired + margin).max(0.0);
    }
    l
}

/// Detection and localisation counts straight from the definitions.
pub fn naive_counts(
    pairs: &[(f64, Option<usize>, Vec<(usize, usize)>)],
    alpha: f64,
) -> (Counts, Counts) {
    let (mut det, mut loc) = (Counts::default(), Counts::default());
    for (score, frame, spans) in pairs {
        let detected = *score > alpha;
        let present = !spans.is_empty();
        let mut inside = false;
        if let Some(f) = frame {
            for &(s, e) in spans {
                if s <= *f && *f < e {
                    inside = true;
                }
            }
        }
        let hit = detected && inside;
        if detected && present {
            det.tp += 1;
        }
        if detected && !present {
            det.fp += 1;
        }
        if !detected && present {
            det.fn_ += 1;
        }
        if !detected && !present {
            det.tn += 1;
        }
        if hit {
            loc.tp += 1;
        }
        if detected && !hit {
            loc.fp += 1;
        }
        if present && !hit {
            loc.fn_ += 1;
        }
        if !detected && !present {
            loc.tn += 1;
        }
    }
    (det, loc)
}

/// Utterance with the given keyword spans, `n_valid` valid frames and
/// `frames` total.
pub fn utterance(id: &str, spans: &[(KeywordId, usize, usize)], n_valid: usize, frames: usize) -> CaptionRecord {
    CaptionRecord {
        id: id.into(),
        features: Tensor::zeros(vec![frames, 1]),
        n_valid,
        transcript: spans.iter().map(|s| Token::Keyword(s.0)).collect(),
        alignments: spans
            .iter()
            .map(|&(k, start, end)| Alignment { token: Token::Keyword(k), start, end })
            .collect(),
    }
}

/// Checks metric counts against [`naive_counts`] on random outcome sets.
/// Returns the number of instances compared.
pub fn check_metric_counts(instances: usize, seed: u64) -> Result<usize, String> {
    let mut rng = rng_for(seed, &[41]);
    for t in 0..instances {
        let alpha = rng.random_range(-1.0..1.0);
        let n_utt = rng.random_range(1..=6);
        let keywords: u32 = rng.random_range(1..=4);
        let utts: Vec<CaptionRecord> = (0..n_utt)
            .map(|u| {
                let n_valid = rng.random_range(10..=40);
                let mut spans = vec![];
                for k in 0..keywords {
                    for _ in 0..rng.random_range(0..=2) {
                        let s = rng.random_range(0..n_valid - 5);
                        spans.push((k, s, s + rng.random_range(1..=5)));
                    }
                }
                utterance(&format!("u{u}"), &spans, n_valid, 48)
            })
            .collect();
        let mut outcomes: Vec<EvalOutcome> = vec![];
        let mut raw = vec![];
        for q in 0..rng.random_range(1..=5) {
            let k = rng.random_range(0..keywords);
            for u in &utts {
                let score = rng.random_range(-1.0..1.0);
                let frame = if rng.random_bool(0.9) { Some(rng.random_range(0..u.n_valid)) } else { None };
                outcomes.push(eval::make_outcome(&format!("q{q}"), k, u, score, frame, alpha));
                raw.push((score, frame, u.spans_of(k).collect::<Vec<_>>()));
            }
        }
        let report = eval::metrics(&outcomes, alpha);
        let (det, loc) = naive_counts(&raw, alpha);
        if report.detection != det || report.localisation != loc {
            return Err(format!(
                "instance {t}: detection {:?} vs {det:?}, localisation {:?} vs {loc:?}",
                report.detection, report.localisation
            ));
        }
        for kr in &report.per_keyword {
            let sel: Vec<_> = outcomes
                .iter()
                .zip(&raw)
                .filter(|(o, _)| o.keyword == kr.keyword)
                .map(|(_, r)| r.clone())
                .collect();
            let (d, l) = naive_counts(&sel, alpha);
            if kr.detection != d || kr.localisation != l {
                return Err(format!("instance {t}: keyword {} counts differ", kr.keyword));
            }
        }
    }
    Ok(instances)
}

pub fn random_episode(rng: &mut StdRng) -> NaiveEpisode {
    let inputs = pair_inputs(rng, 5);
    let mut it = inputs.chunks(2).map(|c| (c[0].clone(), c[1].clone()));
    std::array::from_fn(|_| it.next().unwrap())
}

fn graph_episode(g: &mut Graph, ep: &NaiveEpisode) -> EpisodeVars {
    let vars: Vec<Var> = ep.iter().flat_map(|(a, v)| [g.constant(a.clone()), g.constant(v.clone())]).collect();
    episode_vars(&vars)
}

pub fn graph_contrastive_loss(ep: &NaiveEpisode) -> f64 {
    let mut g = Graph::new();
    let vars = graph_episode(&mut g, ep);
    let l = contrastive_davenet_loss(&mut g, &vars).unwrap();
    g.value(l).item().unwrap()
}

pub fn graph_locattn_loss(ep: &NaiveEpisode, dedupe: bool) -> f64 {
    let mut g = Graph::new();
    let vars = graph_episode(&mut g, ep);
    let c = episode_contexts(&mut g, &vars).unwrap();
    let l = localisation_attention_loss(&mut g, &c, dedupe).unwrap();
    g.value(l).item().unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation of matchmap, pooled similarity, attention and the
/// three losses from the nested-loop references.
pub fn oracle_deviation(instances: usize, seed: u64) -> f64 {
    let mut rng = rng_for(seed, &[42]);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let ep = random_episode(&mut rng);
        let (a, v) = &ep[0];
        let mut g = Graph::new();
        let (va, vv) = (g.constant(a.clone()), g.constant(v.clone()));
        let mm = matchmap(&mut g, vv, va).unwrap();
        let pooled = pooled_similarity(&mut g, mm).unwrap();
        let att = localising_attention(&mut g, vv, va).unwrap();
        let flat: Vec<f64> = naive_matchmap(v, a).concat();
        worst = worst.max(max_abs_diff(g.value(mm).data(), &flat));
        worst = worst.max((g.value(pooled).item().unwrap() - naive_pooled(v, a)).abs());
        let n = naive_attention(v, a);
        worst = worst.max(max_abs_diff(g.value(att.a_audio).data(), &n.a_audio));
        worst = worst.max(max_abs_diff(g.value(att.a_vision).data(), &n.a_vision));
        worst = worst.max(max_abs_diff(g.value(att.c_audio).data(), &n.c_audio));
        worst = worst.max(max_abs_diff(g.value(att.c_vision).data(), &n.c_vision));
        let inference = vpkl_core::attention::AttentionOutput::from_rows(v, a).unwrap();
        worst = worst.max(max_abs_diff(&inference.c_audio, &n.c_audio));
        worst = worst.max((inference.pooled - naive_pooled(v, a)).abs());

        worst = worst.max((graph_contrastive_loss(&ep) - naive_contrastive_loss(&ep)).abs());
        for dedupe in [false, true] {
            worst = worst.max((graph_locattn_loss(&ep, dedupe) - naive_locattn_loss(&ep, dedupe)).abs());
        }
        let pairs: Vec<(Tensor, Tensor)> = ep.to_vec();
        let imps: Vec<Impostors> = (0..5).map(|i| Impostors { caption: (i + 1) % 5, image: (i + 3) % 5 }).collect();
        let margin = rng.random_range(0.0..2.0);
        let mut g = Graph::new();
        let vars: Vec<Var> = pairs.iter().flat_map(|(a, v)| [g.constant(a.clone()), g.constant(v.clone())]).collect();
        let l = davenet_triplet_loss(&mut g, &pair_vars(&vars), &imps, margin).unwrap();
        worst = worst.max((g.value(l).item().unwrap() - naive_triplet_loss(&pairs, &imps, margin)).abs());
    }
    worst
}

fn permuted_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let data = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    Tensor::new(vec![perm.len(), d], data).unwrap()
}

fn permutation(rng: &mut StdRng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    vpkl_core::rng::shuffle(&mut p, rng);
    p
}

fn argmax_first(x: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

/// Transpose identity, permutation invariance of the pooled similarity and
/// argmax invariance under increasing maps, each checked for exact
/// equality on `instances` random draws.
pub fn check_attention_invariants(instances: usize, seed: u64) -> Result<usize, String> {
    let mut rng = rng_for(seed, &[43]);
    let transforms: [fn(f64) -> f64; 4] = [|x| 4.0 * x, |x| x - 0.25, f64::exp, |x| x * x * x];
    for t in 0..instances {
        let (m, n, d) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let (v, a) = (uniform(&mut rng, &[m, d]), uniform(&mut rng, &[n, d]));

        let mut g = Graph::new();
        let (vv, va) = (g.constant(v.clone()), g.constant(a.clone()));
        let att = localising_attention(&mut g, vv, va).unwrap();
        let over_frames = g.reduce(att.matchmap, 1, ReduceKind::Max).unwrap();
        if g.value(att.a_vision) != g.value(over_frames) {
            return Err(format!("instance {t}: a_vision differs from the frame-axis max"));
        }
        let swapped = matchmap(&mut g, va, vv).unwrap();
        let back = g.transpose(swapped).unwrap();
        if g.value(back) != g.value(att.matchmap) {
            return Err(format!("instance {t}: matchmap(a, v) is not the transpose of matchmap(v, a)"));
        }
        let roles = localising_attention(&mut g, va, vv).unwrap();
        if g.value(roles.a_vision) != g.value(att.a_audio) {
            return Err(format!("instance {t}: swapping roles does not swap the weights"));
        }

        // Pixel order only affects the max, so arbitrary values work.
        let pv = permuted_rows(&v, &permutation(&mut rng, m));
        if naive_pooled_graph(&pv, &a) != naive_pooled_graph(&v, &a) {
            return Err(format!("instance {t}: pooled similarity changed under a pixel permutation"));
        }
        // Frame order changes the mean's summation order; dyadic values keep it exact.
        let (dv, da) = (dyadic(&mut rng, &[m, d]), dyadic(&mut rng, &[n, d]));
        let pdv = permuted_rows(&dv, &permutation(&mut rng, m));
        let pda = permuted_rows(&da, &permutation(&mut rng, n));
        if naive_pooled_graph(&pdv, &pda) != naive_pooled_graph(&dv, &da) {
            return Err(format!("instance {t}: pooled similarity changed under a frame and pixel permutation"));
        }

        let mm = g.value(att.matchmap).clone();
        let base = argmax_first(g.value(att.a_audio).data());
        for f in transforms {
            let mapped: Vec<f64> = mm.data().iter().map(|&x| f(x)).collect();
            let mut col_max = vec![f64::NEG_INFINITY; n];
            for j in 0..m {
                for i in 0..n {
                    col_max[i] = col_max[i].max(mapped[j * n + i]);
                }
            }
            let got = argmax_first(&col_max);
            // A rounding collision may merge the maximum with a runner-up.
            if got != base && col_max[got] != col_max[base] {
                return Err(format!("instance {t}: argmax moved from {base} to {got} under an increasing map"));
            }
        }
    }
    Ok(instances)
}

fn naive_pooled_graph(v: &Tensor, a: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (vv, va) = (g.constant(v.clone()), g.constant(a.clone()));
    let mm = matchmap(&mut g, vv, va).unwrap();
    let p = pooled_similarity(&mut g, mm).unwrap();
    g.value(p).item().unwrap()
}

/// Small corpus used by the sampling properties.
pub fn sampling_corpus(seed: u64) -> CorpusConfig {
    CorpusConfig {
        n_train: 400,
        n_dev: 40,
        n_test: 40,
        seed,
        ..CorpusConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EpisodeViolations {
    pub episodes: usize,
    pub positive_share: usize,
    pub negative_disjoint: usize,
    pub structure: usize,
}

/// Samples `episodes` episodes under the ideal source, cycling through the
/// anchors, and counts property violations against ground truth.
pub fn check_episode_constraints(episodes: usize, seed: u64) -> EpisodeViolations {
    let cfg = sampling_corpus(seed);
    let corpus = generate_corpus(&cfg).unwrap();
    let train = &corpus.split(Split::Train).examples;
    let vocab: BTreeSet<KeywordId> = (0..cfg.vocab_size as KeywordId).collect();
    let index = build_keyword_index(train, KeywordSource::Transcripts, &vocab).unwrap();
    let truth = |i: usize| train[i].caption.keywords();
    let mut rng = rng_for(seed, &[44]);
    let mut out = EpisodeViolations::default();
    for e in 0..episodes {
        let anchor = index.anchors[e % index.anchors.len()];
        let ep = sample_episode(&index, anchor, NegativesExclude::All, &mut rng).unwrap();
        out.episodes += 1;
        let (ka, kp) = (truth(ep.anchor), truth(ep.positive));
        if !(ka.contains(&ep.keyword) && kp.contains(&ep.keyword)) {
            out.positive_share += 1;
        }
        for &n in &ep.negatives {
            if !truth(n).is_disjoint(&ka) {
                out.negative_disjoint += 1;
            }
        }
        let distinct: BTreeSet<usize> = ep.negatives.iter().copied().collect();
        if ep.positive == ep.anchor
            || ep.negatives.len() != 3
            || distinct.len() != 3
            || distinct.contains(&ep.anchor)
            || train[ep.anchor].image.true_tags != ka
        {
            out.structure += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineCheck {
    pub alpha: f64,
    pub trials: usize,
    pub recall: f64,
    pub expected_recall: f64,
    pub recall_sigma: f64,
    pub in_span: f64,
    pub expected_in_span: f64,
    pub in_span_sigma: f64,
}

impl BaselineCheck {
    pub fn within_3_sigma(&self) -> bool {
        (self.recall - self.expected_recall).abs() <= 3.0 * self.recall_sigma
            && (self.in_span - self.expected_in_span).abs() <= 3.0 * self.in_span_sigma
    }
}

/// Monte Carlo of the random baseline over `trials` utterances that each
/// contain the query keyword once.
pub fn random_baseline_monte_carlo(alpha: f64, trials: usize, seed: u64) -> BaselineCheck {
    let (n_valid, span) = (100usize, 25usize);
    let utts: Vec<CaptionRecord> = (0..trials)
        .map(|i| {
            let s = (i * 7) % (n_valid - span);
            utterance(&format!("u{i}"), &[(0, s, s + span)], n_valid, 128)
        })
        .collect();
    let out = eval::random_baseline(&[("q0".into(), 0)], &utts, alpha, seed);
    let detected = out.iter().filter(|o| o.detected).count();
    let in_span = out
        .iter()
        .filter(|o| o.predicted_frame.zip(o.truth_span).is_some_and(|(f, (s, e))| s <= f && f < e))
        .count();
    let n = trials as f64;
    let p = (1.0 - alpha) / 2.0;
    let q = span as f64 / n_valid as f64;
    BaselineCheck {
        alpha,
        trials,
        recall: detected as f64 / n,
        expected_recall: p,
        recall_sigma: (p * (1.0 - p) / n).sqrt(),
        in_span: in_span as f64 / n,
        expected_in_span: q,
        in_span_sigma: (q * (1.0 - q) / n).sqrt(),
    }
}

/// Few-keyword corpus small enough to train on in a test.
pub fn training_corpus(seed: u64) -> vpkl_core::corpus::Corpus {
    let cfg = CorpusConfig {
        vocab_size: 6,
        max_keywords: 2,
        n_train: 80,
        n_dev: 30,
        n_test: 30,
        queries_per_keyword: 3,
        seed,
        ..CorpusConfig::default()
    };
    generate_corpus(&cfg).unwrap()
}

pub struct Prepared {
    pub corpus: vpkl_core::corpus::Corpus,
    pub index: vpkl_core::sampling::KeywordIndex,
    pub triplets: Vec<vpkl_core::sampling::ValidationTriplet>,
}

impl Prepared {
    pub fn new(seed: u64) -> Self {
        let corpus = training_corpus(seed);
        let vocab: BTreeSet<KeywordId> = corpus.keywords.iter().map(|k| k.id).collect();
        let index = build_keyword_index(&corpus.split(Split::Train).examples, KeywordSource::Transcripts, &vocab).unwrap();
        let dev = build_keyword_index(&corpus.split(Split::Dev).examples, KeywordSource::Transcripts, &vocab).unwrap();
        let triplets =
            vpkl_core::sampling::sample_validation_triplets(&dev, NegativesExclude::All, &mut rng_for(seed, &[45])).unwrap();
        Self { corpus, index, triplets }
    }

    pub fn data(&self) -> vpkl_core::train::TrainData<'_> {
        vpkl_core::train::TrainData {
            train: &self.corpus.split(Split::Train).examples,
            index: &self.index,
            dev: &self.corpus.split(Split::Dev).examples,
            triplets: &self.triplets,
        }
    }
}
