//! Keyword indices and episode sampling.
//!
//! Keyword sets come either from caption transcripts (an ideal tagger) or
//! from the simulated visual tagger, intersected with the active vocabulary.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::corpus::{KeywordId, PairedExample};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SamplingError {
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("example {0} has no vocabulary keyword and cannot anchor an episode")]
    NotAnAnchor(usize),
    #[error("no other example shares a keyword with anchor {anchor} (keywords {keywords:?})")]
    NoPositive { anchor: usize, keywords: Vec<KeywordId> },
    #[error("only {available} negatives disjoint from keyword {keyword} for anchor {anchor}, need {needed}")]
    NotEnoughNegatives {
        anchor: usize,
        keyword: KeywordId,
        available: usize,
        needed: usize,
    },
    #[error("no eligible validation anchors")]
    NoTriplets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeywordSource {
    Transcripts,
    TaggerTags,
}

/// Which keywords a negative must avoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum NegativesExclude {
    SampledOnly,
    #[default]
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeywordIndex {
    pub source: KeywordSource,
    pub vocabulary: BTreeSet<KeywordId>,
    /// Keyword → example positions containing it, ascending.
    pub postings: BTreeMap<KeywordId, Vec<usize>>,
    /// Keyword set of every example under the source, restricted to the vocabulary.
    pub keyword_sets: Vec<BTreeSet<KeywordId>>,
    /// Examples with at least one vocabulary keyword.
    pub anchors: Vec<usize>,
}

pub fn build_keyword_index(
    examples: &[PairedExample],
    source: KeywordSource,
    vocabulary: &BTreeSet<KeywordId>,
) -> Result<KeywordIndex, SamplingError> {
    if vocabulary.is_empty() {
        return Err(SamplingError::EmptyVocabulary);
    }
    let keyword_sets: Vec<BTreeSet<KeywordId>> = examples
        .iter()
        .map(|e| {
            let raw = match source {
                KeywordSource::Transcripts => e.caption.keywords(),
                KeywordSource::TaggerTags => e.image.tagger_tags.clone(),
            };
            raw.intersection(vocabulary).copied().collect()
        })
        .collect();
    Ok(KeywordIndex::from_sets(source, vocabulary.clone(), keyword_sets))
}

impl KeywordIndex {
    pub fn from_sets(source: KeywordSource, vocabulary: BTreeSet<KeywordId>, keyword_sets: Vec<BTreeSet<KeywordId>>) -> Self {
        let mut postings: BTreeMap<KeywordId, Vec<usize>> = BTreeMap::new();
        for (i, set) in keyword_sets.iter().enumerate() {
            for &k in set {
                postings.entry(k).or_default().push(i);
            }
        }
        let anchors = (0..keyword_sets.len()).filter(|&i| !keyword_sets[i].is_empty()).collect();
        Self {
            source,
            vocabulary,
            postings,
            keyword_sets,
            anchors,
        }
    }

    pub fn len(&self) -> usize {
        self.keyword_sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyword_sets.is_empty()
    }

    fn is_negative_for(&self, candidate: usize, anchor: usize, keyword: KeywordId, rule: NegativesExclude) -> bool {
        candidate != anchor
            && match rule {
                NegativesExclude::All => self.keyword_sets[candidate].is_disjoint(&self.keyword_sets[anchor]),
                NegativesExclude::SampledOnly => !self.keyword_sets[candidate].contains(&keyword),
            }
    }

    /// Keywords of `anchor` shared by at least one other example.
    fn positive_keywords(&self, anchor: usize) -> Vec<KeywordId> {
        self.keyword_sets[anchor]
            .iter()
            .copied()
            .filter(|k| self.postings.get(k).is_some_and(|p| p.len() > 1))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledEpisodeRefs {
    pub anchor: usize,
    pub keyword: KeywordId,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Draws `count` distinct negatives uniformly; rejection sampling first, full
/// enumeration when candidates are scarce.
fn draw_negatives<R: Rng + ?Sized>(
    index: &KeywordIndex,
    anchor: usize,
    keyword: KeywordId,
    rule: NegativesExclude,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>, SamplingError> {
    let n = index.len();
    let mut chosen: Vec<usize> = Vec::with_capacity(count);
    for _ in 0..64 * count {
        if chosen.len() == count {
            return Ok(chosen);
        }
        let c = rng.random_range(0..n);
        if !chosen.contains(&c) && index.is_negative_for(c, anchor, keyword, rule) {
            chosen.push(c);
        }
    }
    if chosen.len() == count {
        return Ok(chosen);
    }
    let mut pool: Vec<usize> = (0..n)
        .filter(|&c| !chosen.contains(&c) && index.is_negative_for(c, anchor, keyword, rule))
        .collect();
    let missing = count - chosen.len();
    if pool.len() < missing {
        return Err(SamplingError::NotEnoughNegatives {
            anchor,
            keyword,
            available: pool.len() + chosen.len(),
            needed: count,
        });
    }
    for _ in 0..missing {
        let i = rng.random_range(0..pool.len());
        chosen.push(pool.swap_remove(i));
    }
    Ok(chosen)
}

fn sample_with<R: Rng + ?Sized>(
    index: &KeywordIndex,
    anchor: usize,
    n_negatives: usize,
    rule: NegativesExclude,
    rng: &mut R,
) -> Result<SampledEpisodeRefs, SamplingError> {
    if index.keyword_sets.get(anchor).is_none_or(|s| s.is_empty()) {
        return Err(SamplingError::NotAnAnchor(anchor));
    }
    let candidates = index.positive_keywords(anchor);
    if candidates.is_empty() {
        return Err(SamplingError::NoPositive {
            anchor,
            keywords: index.keyword_sets[anchor].iter().copied().collect(),
        });
    }
    let keyword = candidates[rng.random_range(0..candidates.len())];
    let posting = &index.postings[&keyword];
    let others = posting.len() - 1;
    let mut pick = rng.random_range(0..others);
    if posting[pick] >= anchor && posting.contains(&anchor) {
        // Skip over the anchor's own slot.
        let own = posting.binary_search(&anchor).expect("anchor is listed");
        if pick >= own {
            pick += 1;
        }
    }
    let positive = posting[pick];
    let negatives = draw_negatives(index, anchor, keyword, rule, n_negatives, rng)?;
    Ok(SampledEpisodeRefs {
        anchor,
        keyword,
        positive,
        negatives,
    })
}

/// Anchor plus a keyword-sharing positive and three negatives.
pub fn sample_episode<R: Rng + ?Sized>(
    index: &KeywordIndex,
    anchor: usize,
    rule: NegativesExclude,
    rng: &mut R,
) -> Result<SampledEpisodeRefs, SamplingError> {
    sample_with(index, anchor, crate::losses::NEGATIVES_PER_EPISODE, rule, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// One positive and one negative per eligible anchor; anchors without a
/// valid positive or negative are skipped.
pub fn sample_validation_triplets<R: Rng + ?Sized>(
    index: &KeywordIndex,
    rule: NegativesExclude,
    rng: &mut R,
) -> Result<Vec<ValidationTriplet>, SamplingError> {
    let mut out = Vec::new();
    for &anchor in &index.anchors {
        match sample_with(index, anchor, 1, rule, rng) {
            Ok(ep) => out.push(ValidationTriplet {
                anchor,
                positive: ep.positive,
                negative: ep.negatives[0],
            }),
            Err(SamplingError::NoPositive { .. } | SamplingError::NotEnoughNegatives { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(SamplingError::NoTriplets);
    }
    Ok(out)
}
