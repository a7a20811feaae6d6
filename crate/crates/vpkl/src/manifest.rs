//! Per-split manifests and the on-disk dataset layout.
//!
//! A dataset directory holds `train.json`, `dev.json` and `test.json`,
//! with feature matrices under `features/` and pixel grids under `pixels/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use vpkl_core::corpus::{
    Alignment, CaptionRecord, Corpus, CorpusConfig, CorpusSplit, GlyphBox, ImageRecord, KeywordId, KeywordQuery,
    PairedExample, Split, Token,
};
use vpkl_core::image::PixelGrid;

use crate::format::{self, FormatError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
    #[error("{path}: malformed JSON: {cause}")]
    Json { path: PathBuf, cause: serde_json::Error },
    #[error("{path}: schema version {found}, this build reads {SCHEMA_VERSION}")]
    Schema { path: PathBuf, found: u32 },
    #[error("{path}: content hash mismatch (recorded {recorded}, computed {computed})")]
    Hash { path: PathBuf, recorded: String, computed: String },
    #[error("{path}: {cause}")]
    Format { path: PathBuf, cause: FormatError },
    #[error("integrity: {0}")]
    Integrity(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |cause| ManifestError::Io { path: path.to_path_buf(), cause }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: KeywordId,
    pub name: String,
}

/// `(token, start_frame, end_frame)`, end exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentEntry(pub String, pub usize, pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub id: String,
    /// Relative to the dataset directory; empty until featurized.
    pub feature_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_sha256: Option<String>,
    pub n_valid: usize,
    pub transcript: Vec<String>,
    pub alignments: Vec<AlignmentEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub keyword: KeywordId,
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub pixel_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_sha256: Option<String>,
    pub true_tags: Vec<KeywordId>,
    pub tagger_tags: Vec<KeywordId>,
    pub crop_boxes: Vec<CropBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub caption_id: String,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub id: String,
    pub keyword: KeywordId,
    pub image_id: String,
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub corpus_id: String,
    pub split: Split,
    pub vocabulary: Vec<VocabEntry>,
    pub captions: Vec<CaptionEntry>,
    pub images: Vec<ImageEntry>,
    pub pairs: Vec<PairEntry>,
    #[serde(default)]
    pub queries: Vec<QueryEntry>,
    #[serde(default)]
    pub content_hash: String,
}

impl Manifest {
    /// SHA-256 of the compact JSON encoding with an empty hash field.
    pub fn compute_hash(&self) -> String {
        let mut bare = self.clone();
        bare.content_hash.clear();
        sha256_hex(&serde_json::to_vec(&bare).expect("manifest serializes"))
    }

    pub fn seal(&mut self) {
        self.content_hash = self.compute_hash();
    }

    pub fn save(&mut self, path: &Path) -> Result<(), ManifestError> {
        self.seal();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        Self::load_checked(path, true)
    }

    /// Like [`Manifest::load`], but accepts a hand-written manifest whose
    /// `content_hash` is still empty.
    pub fn load_allow_unsealed(path: &Path) -> Result<Self, ManifestError> {
        Self::load_checked(path, false)
    }

    fn load_checked(path: &Path, require_seal: bool) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|cause| ManifestError::Json {
            path: path.to_path_buf(),
            cause,
        })?;
        let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(ManifestError::Schema { path: path.to_path_buf(), found });
        }
        let m: Manifest = serde_json::from_value(value).map_err(|cause| ManifestError::Json {
            path: path.to_path_buf(),
            cause,
        })?;
        let computed = m.compute_hash();
        if (require_seal || !m.content_hash.is_empty()) && computed != m.content_hash {
            return Err(ManifestError::Hash {
                path: path.to_path_buf(),
                recorded: m.content_hash,
                computed,
            });
        }
        m.check_integrity()?;
        Ok(m)
    }

    /// Unique ids, pairs and queries that resolve, tags inside the vocabulary.
    pub fn check_integrity(&self) -> Result<(), ManifestError> {
        let fail = |m: String| Err(ManifestError::Integrity(format!("{} split: {m}", self.split.name())));
        let vocab: BTreeSet<KeywordId> = self.vocabulary.iter().map(|v| v.id).collect();
        if vocab.len() != self.vocabulary.len() {
            return fail("duplicate vocabulary ids".into());
        }
        let mut captions = BTreeSet::new();
        for c in &self.captions {
            if !captions.insert(c.id.as_str()) {
                return fail(format!("duplicate caption id {}", c.id));
            }
            let featurized = !c.feature_path.is_empty();
            if let Some(a) = c.alignments.iter().find(|a| a.1 >= a.2 || (featurized && a.2 > c.n_valid)) {
                return fail(format!("caption {} has alignment {:?} outside [0, {})", c.id, a, c.n_valid));
            }
        }
        let mut images = BTreeSet::new();
        for i in &self.images {
            if !images.insert(i.id.as_str()) {
                return fail(format!("duplicate image id {}", i.id));
            }
            let tags = i.true_tags.iter().chain(&i.tagger_tags).chain(i.crop_boxes.iter().map(|b| &b.keyword));
            if let Some(k) = tags.into_iter().find(|k| !vocab.contains(k)) {
                return fail(format!("image {} refers to keyword {k} outside the vocabulary", i.id));
            }
        }
        for p in &self.pairs {
            if !captions.contains(p.caption_id.as_str()) || !images.contains(p.image_id.as_str()) {
                return fail(format!("pair ({}, {}) refers to a missing record", p.caption_id, p.image_id));
            }
        }
        for q in &self.queries {
            if !images.contains(q.image_id.as_str()) || !vocab.contains(&q.keyword) || q.side == 0 {
                return fail(format!("query {} is invalid", q.id));
            }
        }
        Ok(())
    }

    pub fn vocabulary_map(&self) -> BTreeMap<String, KeywordId> {
        self.vocabulary.iter().map(|v| (v.name.clone(), v.id)).collect()
    }
}

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.json", split.name()))
}

/// All three splits of one corpus, loaded into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub corpus_id: String,
    pub vocabulary: Vec<VocabEntry>,
    pub train: CorpusSplit,
    pub dev: CorpusSplit,
    pub test: CorpusSplit,
}

pub fn corpus_id(config: &CorpusConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    format!(
        "synthetic-v{}-seed{}-{}",
        config.vocab_size,
        config.seed,
        &sha256_hex(&json)[..12]
    )
}

impl Dataset {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self {
            corpus_id: corpus_id(&corpus.config),
            vocabulary: corpus
                .keywords
                .iter()
                .map(|k| VocabEntry { id: k.id, name: k.name.clone() })
                .collect(),
            train: corpus.split(Split::Train).clone(),
            dev: corpus.split(Split::Dev).clone(),
            test: corpus.split(Split::Test).clone(),
        }
    }

    pub fn split(&self, split: Split) -> &CorpusSplit {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn keyword_ids(&self) -> BTreeSet<KeywordId> {
        self.vocabulary.iter().map(|v| v.id).collect()
    }

    pub fn keyword_by_name(&self, name: &str) -> Option<KeywordId> {
        self.vocabulary.iter().find(|v| v.name == name).map(|v| v.id)
    }

    pub fn keyword_name(&self, id: KeywordId) -> String {
        self.vocabulary
            .iter()
            .find(|v| v.id == id)
            .map(|v| v.name.clone())
            .unwrap_or_else(|| vpkl_core::corpus::keyword_name(id))
    }

    /// Writes manifests plus one tensor file per caption and image.
    pub fn save(&self, dir: &Path) -> Result<(), ManifestError> {
        for sub in ["features", "pixels"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        for split in Split::ALL {
            let mut m = self.write_split(dir, self.split(split))?;
            m.save(&manifest_path(dir, split))?;
        }
        Ok(())
    }

    fn write_split(&self, dir: &Path, s: &CorpusSplit) -> Result<Manifest, ManifestError> {
        let mut m = Manifest {
            schema_version: SCHEMA_VERSION,
            corpus_id: self.corpus_id.clone(),
            split: s.split,
            vocabulary: self.vocabulary.clone(),
            captions: Vec::with_capacity(s.examples.len()),
            images: Vec::with_capacity(s.examples.len()),
            pairs: Vec::with_capacity(s.examples.len()),
            queries: Vec::new(),
            content_hash: String::new(),
        };
        let put = |rel: String, t: &vpkl_core::Tensor| -> Result<(String, String), ManifestError> {
            let bytes = format::to_bytes(t);
            let path = dir.join(&rel);
            fs::write(&path, &bytes).map_err(io_err(&path))?;
            Ok((rel, sha256_hex(&bytes)))
        };
        for e in &s.examples {
            let c = &e.caption;
            let (feature_path, sha) = put(format!("features/{}.vpkf", c.id), &c.features)?;
            m.captions.push(CaptionEntry {
                id: c.id.clone(),
                feature_path,
                feature_sha256: Some(sha),
                n_valid: c.n_valid,
                transcript: c.transcript.iter().map(|t| self.token_name(*t)).collect(),
                alignments: c
                    .alignments
                    .iter()
                    .map(|a| AlignmentEntry(self.token_name(a.token), a.start, a.end))
                    .collect(),
            });
            let i = &e.image;
            let (pixel_path, sha) = put(format!("pixels/{}.vpkf", i.id), i.pixels.tensor())?;
            m.images.push(ImageEntry {
                id: i.id.clone(),
                pixel_path,
                pixel_sha256: Some(sha),
                true_tags: i.true_tags.iter().copied().collect(),
                tagger_tags: i.tagger_tags.iter().copied().collect(),
                crop_boxes: i
                    .boxes
                    .iter()
                    .map(|b| CropBox { keyword: b.keyword, top: b.top, left: b.left, size: b.size })
                    .collect(),
            });
            m.pairs.push(PairEntry { caption_id: c.id.clone(), image_id: i.id.clone() });
        }
        m.queries = s
            .queries
            .iter()
            .map(|q| QueryEntry {
                id: q.id.clone(),
                keyword: q.keyword,
                image_id: q.image_id.clone(),
                top: q.crop.0,
                left: q.crop.1,
                side: q.crop.2,
            })
            .collect();
        Ok(m)
    }

    fn token_name(&self, t: Token) -> String {
        match t {
            Token::Keyword(k) => self.keyword_name(k),
            Token::Filler(_) => t.name(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self, ManifestError> {
        let mut manifests = Vec::with_capacity(3);
        for split in Split::ALL {
            let path = manifest_path(dir, split);
            let m = Manifest::load(&path)?;
            if m.split != split {
                return Err(ManifestError::Integrity(format!(
                    "{} declares split {}",
                    path.display(),
                    m.split.name()
                )));
            }
            manifests.push(m);
        }
        let first = &manifests[0];
        if manifests.iter().any(|m| m.corpus_id != first.corpus_id || m.vocabulary != first.vocabulary) {
            return Err(ManifestError::Integrity("splits disagree on corpus id or vocabulary".into()));
        }
        let mut seen = BTreeSet::new();
        for m in &manifests {
            for id in m.captions.iter().map(|c| &c.id).chain(m.images.iter().map(|i| &i.id)) {
                if !seen.insert(id.clone()) {
                    return Err(ManifestError::Integrity(format!("record {id} appears in more than one split")));
                }
            }
        }
        let mut splits = manifests
            .iter()
            .map(|m| load_split(dir, m))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter();
        Ok(Self {
            corpus_id: first.corpus_id.clone(),
            vocabulary: first.vocabulary.clone(),
            train: splits.next().expect("three splits"),
            dev: splits.next().expect("three splits"),
            test: splits.next().expect("three splits"),
        })
    }
}

fn read_checked(dir: &Path, rel: &str, sha: Option<&str>) -> Result<vpkl_core::Tensor, ManifestError> {
    let path = dir.join(rel);
    if rel.is_empty() {
        return Err(ManifestError::Integrity(format!(
            "{}: record has no tensor file yet",
            dir.display()
        )));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if let Some(expected) = sha {
        let computed = sha256_hex(&bytes);
        if computed != expected {
            return Err(ManifestError::Hash { path, recorded: expected.into(), computed });
        }
    }
    format::from_bytes(&bytes).map_err(|cause| ManifestError::Format { path, cause })
}

fn parse_token(vocab: &BTreeMap<String, KeywordId>, s: &str) -> Token {
    match vocab.get(s) {
        Some(&k) => Token::Keyword(k),
        None => Token::parse(s).unwrap_or(Token::Filler(u32::MAX)),
    }
}

/// Reads the tensors behind one manifest and rebuilds the in-memory split.
pub fn load_split(dir: &Path, m: &Manifest) -> Result<CorpusSplit, ManifestError> {
    let vocab = m.vocabulary_map();
    let captions: BTreeMap<&str, &CaptionEntry> = m.captions.iter().map(|c| (c.id.as_str(), c)).collect();
    let images: BTreeMap<&str, &ImageEntry> = m.images.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut loaded_images: BTreeMap<String, PixelGrid> = BTreeMap::new();
    let mut examples = Vec::with_capacity(m.pairs.len());
    for p in &m.pairs {
        let c = captions[p.caption_id.as_str()];
        let i = images[p.image_id.as_str()];
        let features = read_checked(dir, &c.feature_path, c.feature_sha256.as_deref())?;
        if features.rank() != 2 || c.n_valid > features.shape()[0] {
            return Err(ManifestError::Integrity(format!(
                "caption {} features have shape {:?} with n_valid {}",
                c.id,
                features.shape(),
                c.n_valid
            )));
        }
        let pixels = read_checked(dir, &i.pixel_path, i.pixel_sha256.as_deref())?;
        let pixels = PixelGrid::from_tensor(pixels)
            .ok_or_else(|| ManifestError::Integrity(format!("image {} pixels are not H×W×C", i.id)))?;
        loaded_images.insert(i.id.clone(), pixels.clone());
        let caption = CaptionRecord {
            id: c.id.clone(),
            features,
            n_valid: c.n_valid,
            transcript: c.transcript.iter().map(|t| parse_token(&vocab, t)).collect(),
            alignments: c
                .alignments
                .iter()
                .map(|a| Alignment { token: parse_token(&vocab, &a.0), start: a.1, end: a.2 })
                .collect(),
        };
        let image = ImageRecord {
            id: i.id.clone(),
            pixels,
            true_tags: i.true_tags.iter().copied().collect(),
            tagger_tags: i.tagger_tags.iter().copied().collect(),
            boxes: i
                .crop_boxes
                .iter()
                .map(|b| GlyphBox { keyword: b.keyword, top: b.top, left: b.left, size: b.size })
                .collect(),
        };
        examples.push(PairedExample { caption, image });
    }
    let mut queries = Vec::with_capacity(m.queries.len());
    for q in &m.queries {
        let source = match loaded_images.get(&q.image_id) {
            Some(p) => p.clone(),
            None => {
                let i = images[q.image_id.as_str()];
                let t = read_checked(dir, &i.pixel_path, i.pixel_sha256.as_deref())?;
                PixelGrid::from_tensor(t)
                    .ok_or_else(|| ManifestError::Integrity(format!("image {} pixels are not H×W×C", i.id)))?
            }
        };
        let pixels = source
            .crop(q.top, q.left, q.side, q.side)
            .ok_or_else(|| ManifestError::Integrity(format!("query {} crop leaves the image", q.id)))?;
        queries.push(KeywordQuery {
            id: q.id.clone(),
            keyword: q.keyword,
            image_id: q.image_id.clone(),
            crop: (q.top, q.left, q.side),
            pixels,
        });
    }
    Ok(CorpusSplit { split: m.split, examples, queries })
}
