//! Training objectives: the retrieval margin loss, the keyword-contrastive
//! matchmap loss and the context-vector loss of the localising attention
//! model. Scalar MSE is `(x − t)²`, positives target 1 and negatives −1.

use alloc::vec::Vec;

use thiserror::Error;

use crate::attention::{localising_attention, matchmap, pooled_similarity};
use crate::graph::{Graph, Var};
use crate::tensor::TensorError;

pub const NEGATIVES_PER_EPISODE: usize = 3;
pub const POSITIVE_TARGET: f64 = 1.0;
pub const NEGATIVE_TARGET: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("episode must have exactly {NEGATIVES_PER_EPISODE} negatives, got {0}")]
    Episode(usize),
    #[error("margin ranking needs a batch of at least 2 pairs, got {0}")]
    Batch(usize),
    #[error("impostor index {index} out of range for batch of {len}")]
    Impostor { index: usize, len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `(e_audio, e_vision)` graph nodes of one image/caption pair.
#[derive(Debug, Clone, Copy)]
pub struct PairVars {
    pub audio: Var,
    pub vision: Var,
}

/// Anchor, keyword-sharing positive and keyword-disjoint negatives.
#[derive(Debug, Clone)]
pub struct EpisodeVars {
    pub anchor: PairVars,
    pub positive: PairVars,
    pub negatives: Vec<PairVars>,
}

impl EpisodeVars {
    fn check(&self) -> Result<(), LossError> {
        if self.negatives.len() != NEGATIVES_PER_EPISODE {
            return Err(LossError::Episode(self.negatives.len()));
        }
        Ok(())
    }
}

fn pooled(g: &mut Graph, e_vision: Var, e_audio: Var) -> Result<Var, TensorError> {
    let mm = matchmap(g, e_vision, e_audio)?;
    pooled_similarity(g, mm)
}

/// `2·MSE(S(v,a),1) + MSE(S(v,a⁺),1) + MSE(S(a,v⁺),1)
///  + Σᵢ [MSE(S(v,aᵢ⁻),−1) + MSE(S(a,vᵢ⁻),−1)]`
/// with `S` the pooled matchmap similarity.
pub fn contrastive_davenet_loss(g: &mut Graph, ep: &EpisodeVars) -> Result<Var, LossError> {
    ep.check()?;
    let (a, v) = (ep.anchor.audio, ep.anchor.vision);
    let mut terms = Vec::with_capacity(9);

    let s = pooled(g, v, a)?;
    let e = g.squared_error(s, POSITIVE_TARGET)?;
    terms.push(g.scale(e, 2.0)?);

    let s = pooled(g, v, ep.positive.audio)?;
    terms.push(g.squared_error(s, POSITIVE_TARGET)?);
    let s = pooled(g, ep.positive.vision, a)?;
    terms.push(g.squared_error(s, POSITIVE_TARGET)?);

    for neg in &ep.negatives {
        let s = pooled(g, v, neg.audio)?;
        terms.push(g.squared_error(s, NEGATIVE_TARGET)?);
        let s = pooled(g, neg.vision, a)?;
        terms.push(g.squared_error(s, NEGATIVE_TARGET)?);
    }
    Ok(g.add_all(&terms)?)
}

/// Context vectors of one episode under the pair substitutions of the
/// localising attention model.
#[derive(Debug, Clone)]
pub struct EpisodeContexts {
    /// From (anchor audio, anchor image).
    pub c_audio: Var,
    pub c_vision: Var,
    /// From (positive audio, anchor image).
    pub c_audio_pos: Var,
    /// From (negative audio i, anchor image).
    pub c_audio_neg: Vec<Var>,
    /// From (anchor audio, negative image i).
    pub c_vision_neg: Vec<Var>,
}

pub fn episode_contexts(g: &mut Graph, ep: &EpisodeVars) -> Result<EpisodeContexts, LossError> {
    ep.check()?;
    let (a, v) = (ep.anchor.audio, ep.anchor.vision);
    let anchor = localising_attention(g, v, a)?;
    let pos = localising_attention(g, v, ep.positive.audio)?;
    let mut c_audio_neg = Vec::with_capacity(NEGATIVES_PER_EPISODE);
    let mut c_vision_neg = Vec::with_capacity(NEGATIVES_PER_EPISODE);
    for neg in &ep.negatives {
        c_audio_neg.push(localising_attention(g, v, neg.audio)?.c_audio);
        c_vision_neg.push(localising_attention(g, neg.vision, a)?.c_vision);
    }
    Ok(EpisodeContexts {
        c_audio: anchor.c_audio,
        c_vision: anchor.c_vision,
        c_audio_pos: pos.c_audio,
        c_audio_neg,
        c_vision_neg,
    })
}

/// `Σᵢ [MSE(cos(c_a,c_v),1) + MSE(cos(c_a,c_a⁺),1) + MSE(cos(c_a,c_aᵢ⁻),−1)
///    + MSE(cos(c_v,c_a),1) + MSE(cos(c_v,c_a⁺),1) + MSE(cos(c_v,c_vᵢ⁻),−1)]`.
///
/// Terms that do not depend on `i` sit inside the sum and so count three
/// times; `dedupe` counts them once instead.
pub fn localisation_attention_loss(g: &mut Graph, c: &EpisodeContexts, dedupe: bool) -> Result<Var, LossError> {
    if c.c_audio_neg.len() != NEGATIVES_PER_EPISODE || c.c_vision_neg.len() != NEGATIVES_PER_EPISODE {
        return Err(LossError::Episode(c.c_audio_neg.len().min(c.c_vision_neg.len())));
    }
    let fixed_pairs = [
        (c.c_audio, c.c_vision),
        (c.c_audio, c.c_audio_pos),
        (c.c_vision, c.c_audio),
        (c.c_vision, c.c_audio_pos),
    ];
    let mut fixed = Vec::with_capacity(4);
    for (x, y) in fixed_pairs {
        let s = g.cosine_similarity(x, y)?;
        fixed.push(g.squared_error(s, POSITIVE_TARGET)?);
    }
    let fixed_sum = g.add_all(&fixed)?;

    let mut terms = Vec::with_capacity(2 * NEGATIVES_PER_EPISODE + 3);
    if dedupe {
        terms.push(fixed_sum);
    }
    for i in 0..NEGATIVES_PER_EPISODE {
        if !dedupe {
            terms.push(fixed_sum);
        }
        let s = g.cosine_similarity(c.c_audio, c.c_audio_neg[i])?;
        terms.push(g.squared_error(s, NEGATIVE_TARGET)?);
        let s = g.cosine_similarity(c.c_vision, c.c_vision_neg[i])?;
        terms.push(g.squared_error(s, NEGATIVE_TARGET)?);
    }
    Ok(g.add_all(&terms)?)
}

/// Which batch members serve as impostors for anchor `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Impostors {
    pub caption: usize,
    pub image: usize,
}

/// `Σᵢ max(0, S(vᵢ, a_imp) − S(vᵢ, aᵢ) + η) + max(0, S(v_imp, aᵢ) − S(vᵢ, aᵢ) + η)`.
pub fn davenet_triplet_loss(g: &mut Graph, pairs: &[PairVars], impostors: &[Impostors], margin: f64) -> Result<Var, LossError> {
    if pairs.len() < 2 {
        return Err(LossError::Batch(pairs.len()));
    }
    if impostors.len() != pairs.len() {
        return Err(LossError::Batch(impostors.len()));
    }
    let mut terms = Vec::with_capacity(2 * pairs.len());
    for (p, imp) in pairs.iter().zip(impostors) {
        for index in [imp.caption, imp.image] {
            if index >= pairs.len() {
                return Err(LossError::Impostor { index, len: pairs.len() });
            }
        }
        let paired = pooled(g, p.vision, p.audio)?;
        let imp_caption = pooled(g, p.vision, pairs[imp.caption].audio)?;
        let imp_image = pooled(g, pairs[imp.image].vision, p.audio)?;
        for imp_s in [imp_caption, imp_image] {
            let d = g.sub(imp_s, paired)?;
            let d = g.add_scalar(d, margin)?;
            terms.push(g.relu(d)?);
        }
    }
    Ok(g.add_all(&terms)?)
}
