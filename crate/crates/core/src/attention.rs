//! Matchmaps, pooled similarity and localising attention.
//!
//! A matchmap is the `M × N` grid of dot products between every pixel
//! embedding (rows) and every frame embedding (columns). Frame weights are
//! the per-frame maxima over pixels, pixel weights the per-pixel maxima over
//! frames; each weights its own embeddings into a summed context vector.
//! Weights are the raw maxima, with no normalisation.

use alloc::vec;
use alloc::vec::Vec;

use crate::encoders::EmbeddingSequence;
use crate::graph::{dot, Graph, ReduceKind, Var};
use crate::tensor::{shape_err, Tensor, TensorError};

/// Graph nodes produced by [`localising_attention`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub matchmap: Var,
    pub a_audio: Var,
    pub a_vision: Var,
    pub c_audio: Var,
    pub c_vision: Var,
}

/// `e_vision[M×D]`, `e_audio[N×D]` → matchmap `[M×N]`.
pub fn matchmap(g: &mut Graph, e_vision: Var, e_audio: Var) -> Result<Var, TensorError> {
    g.matmul_nt(e_vision, e_audio)
}

/// Max over the pixel axis, then mean over the frame axis.
pub fn pooled_similarity(g: &mut Graph, mm: Var) -> Result<Var, TensorError> {
    let per_frame = g.reduce(mm, 0, ReduceKind::Max)?;
    g.reduce(per_frame, 0, ReduceKind::Mean)
}

pub fn localising_attention(g: &mut Graph, e_vision: Var, e_audio: Var) -> Result<AttentionVars, TensorError> {
    let mm = matchmap(g, e_vision, e_audio)?;
    let a_audio = g.reduce(mm, 0, ReduceKind::Max)?;
    // Vision-oriented view: frames first; reduce over the frame axis.
    let mm_vision = g.transpose(mm)?;
    let a_vision = g.reduce(mm_vision, 0, ReduceKind::Max)?;
    let weighted_audio = g.mul(a_audio, e_audio)?;
    let c_audio = g.reduce(weighted_audio, 0, ReduceKind::Sum)?;
    let weighted_vision = g.mul(a_vision, e_vision)?;
    let c_vision = g.reduce(weighted_vision, 0, ReduceKind::Sum)?;
    Ok(AttentionVars {
        matchmap: mm,
        a_audio,
        a_vision,
        c_audio,
        c_vision,
    })
}

/// Attention outputs computed outside a graph, for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub a_audio: Vec<f64>,
    pub a_vision: Vec<f64>,
    pub c_audio: Vec<f64>,
    pub c_vision: Vec<f64>,
    /// Mean over frames of `a_audio`, i.e. the pooled similarity.
    pub pooled: f64,
}

impl AttentionOutput {
    pub fn compute(e_vision: &EmbeddingSequence, e_audio: &EmbeddingSequence) -> Result<Self, TensorError> {
        Self::from_rows(&e_vision.rows, &e_audio.rows)
    }

    pub fn from_rows(e_vision: &Tensor, e_audio: &Tensor) -> Result<Self, TensorError> {
        let (vs, au) = (e_vision.shape(), e_audio.shape());
        if vs.len() != 2 || au.len() != 2 || vs[1] != au[1] {
            return Err(shape_err("localising_attention", vs, au));
        }
        let (m, n, d) = (vs[0], au[0], vs[1]);
        let mut a_audio = vec![f64::NEG_INFINITY; n];
        let mut a_vision = vec![f64::NEG_INFINITY; m];
        for j in 0..m {
            let vrow = e_vision.row(j);
            for i in 0..n {
                let s = dot(vrow, e_audio.row(i));
                if s > a_audio[i] {
                    a_audio[i] = s;
                }
                if s > a_vision[j] {
                    a_vision[j] = s;
                }
            }
        }
        let weighted_sum = |w: &[f64], e: &Tensor| {
            let mut c = vec![0.0; d];
            for (r, &wr) in w.iter().enumerate() {
                c.iter_mut().zip(e.row(r)).for_each(|(a, b)| *a += wr * b);
            }
            c
        };
        let c_audio = weighted_sum(&a_audio, e_audio);
        let c_vision = weighted_sum(&a_vision, e_vision);
        let pooled = a_audio.iter().sum::<f64>() / n as f64;
        Ok(Self {
            a_audio,
            a_vision,
            c_audio,
            c_vision,
            pooled,
        })
    }
}

/// Plain cosine with the same ε guard as the graph op.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(dot(a, a));
    let nb = libm::sqrt(dot(b, b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb + crate::graph::COSINE_EPS)
    }
}

/// Index of the largest of the first `limit` weights, lowest index on ties.
pub fn argmax_prefix(weights: &[f64], limit: usize) -> Option<usize> {
    let limit = limit.min(weights.len());
    let mut best: Option<usize> = None;
    for i in 0..limit {
        if best.is_none_or(|b| weights[i] > weights[b]) {
            best = Some(i);
        }
    }
    best
}
