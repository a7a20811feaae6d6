//! Procedural paired image/utterance corpus with exact keyword spans.
//!
//! Utterances are built directly in log-mel feature space: each keyword owns
//! a fixed spectro-temporal template and each image glyph a fixed pixel
//! patch, so every caption/image pair has ground-truth alignments and tags.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::image::PixelGrid;
use crate::rng::{gaussian, rng_for, StdRng};
use crate::tensor::Tensor;

pub type KeywordId = u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("invalid corpus configuration: {0}")]
    Config(String),
    #[error("utterance needs {needed} frames but only {available} are available")]
    Length { needed: usize, available: usize },
    #[error("could not place {count} glyphs of size {glyph} on a {canvas}x{canvas} canvas; use a larger canvas")]
    Placement {
        count: usize,
        glyph: usize,
        canvas: usize,
    },
    #[error("could not draw distinguishable templates within the retry budget; lower the margin")]
    Templates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|sp| sp.name() == s)
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

/// Generation parameters. Defaults are the desk-scale synthetic setting.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_bins: usize,
    pub n_frames: usize,
    pub image_side: usize,
    pub channels: usize,
    pub glyph_size: usize,
    pub min_keyword_frames: usize,
    pub max_keyword_frames: usize,
    pub n_fillers: usize,
    pub min_filler_frames: usize,
    pub max_filler_frames: usize,
    pub min_keywords: usize,
    pub max_keywords: usize,
    pub noise_sigma: f64,
    pub background_amplitude: f64,
    pub template_margin: f64,
    pub queries_per_keyword: usize,
    pub query_margin: usize,
    pub tagger_precision: f64,
    pub tagger_recall: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 12,
            n_train: 2000,
            n_dev: 300,
            n_test: 300,
            n_bins: 13,
            n_frames: 256,
            image_side: 32,
            channels: 3,
            glyph_size: 8,
            min_keyword_frames: 20,
            max_keyword_frames: 40,
            n_fillers: 24,
            min_filler_frames: 8,
            max_filler_frames: 20,
            min_keywords: 1,
            max_keywords: 3,
            noise_sigma: 0.3,
            background_amplitude: 0.3,
            template_margin: 0.5,
            queries_per_keyword: 10,
            query_margin: 4,
            tagger_precision: 0.7,
            tagger_recall: 0.7,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: String| Err(CorpusError::Config(m));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return fail("split counts must be at least 1".into());
        }
        if self.min_keywords == 0 || self.min_keywords > self.max_keywords || self.max_keywords > self.vocab_size {
            return fail(format!(
                "keywords per example must satisfy 1 <= {} <= {} <= vocab",
                self.min_keywords, self.max_keywords
            ));
        }
        if self.min_keyword_frames == 0 || self.min_keyword_frames > self.max_keyword_frames {
            return fail("invalid keyword duration range".into());
        }
        if self.n_fillers == 0 || self.min_filler_frames == 0 || self.min_filler_frames > self.max_filler_frames {
            return fail("invalid filler configuration".into());
        }
        if self.n_bins == 0 || self.n_frames == 0 || self.channels == 0 {
            return fail("feature and image extents must be positive".into());
        }
        if self.glyph_size == 0 || self.glyph_size > self.image_side {
            return fail("glyph must fit on the canvas".into());
        }
        if self.glyph_size + 2 * self.query_margin > self.image_side {
            return fail("query crop (glyph plus margins) must fit on the canvas".into());
        }
        if !(self.tagger_precision > 0.0 && self.tagger_precision <= 1.0)
            || !(self.tagger_recall > 0.0 && self.tagger_recall <= 1.0)
        {
            return fail("tagger precision and recall must lie in (0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    /// Side of every query crop.
    pub fn query_side(&self) -> usize {
        self.glyph_size + 2 * self.query_margin
    }
}

pub fn keyword_name(id: KeywordId) -> String {
    format!("kw{id:02}")
}

/// One learnable keyword: its acoustic template and its visual glyph.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordSpec {
    pub id: KeywordId,
    pub name: String,
    /// `T_k × B`.
    pub audio_template: Tensor,
    /// `G × G × C`.
    pub glyph: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Keyword(KeywordId),
    Filler(u32),
}

impl Token {
    pub fn name(self) -> String {
        match self {
            Token::Keyword(k) => keyword_name(k),
            Token::Filler(f) => format!("_f{f:02}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if let Some(rest) = s.strip_prefix("kw") {
            rest.parse().ok().map(Token::Keyword)
        } else if let Some(rest) = s.strip_prefix("_f") {
            rest.parse().ok().map(Token::Filler)
        } else {
            None
        }
    }
}

/// `[start, end)` frame span of one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub token: Token,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub id: String,
    /// `N × B`, zero beyond `n_valid`.
    pub features: Tensor,
    pub n_valid: usize,
    pub transcript: Vec<Token>,
    pub alignments: Vec<Alignment>,
}

impl CaptionRecord {
    pub fn keywords(&self) -> BTreeSet<KeywordId> {
        self.transcript
            .iter()
            .filter_map(|t| match t {
                Token::Keyword(k) => Some(*k),
                Token::Filler(_) => None,
            })
            .collect()
    }

    /// Spans of every occurrence of `keyword`.
    pub fn spans_of(&self, keyword: KeywordId) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.alignments
            .iter()
            .filter(move |a| a.token == Token::Keyword(keyword))
            .map(|a| (a.start, a.end))
    }
}

/// Square placement box of a rendered glyph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlyphBox {
    pub keyword: KeywordId,
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl GlyphBox {
    pub fn overlaps(&self, other: &GlyphBox) -> bool {
        self.top < other.top + other.size
            && other.top < self.top + self.size
            && self.left < other.left + other.size
            && other.left < self.left + self.size
    }

    /// Intersection over union of two boxes.
    pub fn iou(&self, other: &GlyphBox) -> f64 {
        let h = (self.top + self.size).min(other.top + other.size).saturating_sub(self.top.max(other.top));
        let w = (self.left + self.size)
            .min(other.left + other.size)
            .saturating_sub(self.left.max(other.left));
        let inter = (h * w) as f64;
        let union = (self.size * self.size + other.size * other.size) as f64 - inter;
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: PixelGrid,
    pub true_tags: BTreeSet<KeywordId>,
    pub tagger_tags: BTreeSet<KeywordId>,
    pub boxes: Vec<GlyphBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub caption: CaptionRecord,
    pub image: ImageRecord,
}

/// An image crop depicting one target keyword.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordQuery {
    pub id: String,
    pub keyword: KeywordId,
    pub image_id: String,
    /// `(top, left, side)` of the crop within the source image.
    pub crop: (usize, usize, usize),
    pub pixels: PixelGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub split: Split,
    pub examples: Vec<PairedExample>,
    pub queries: Vec<KeywordQuery>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub keywords: Vec<KeywordSpec>,
    pub fillers: Vec<Tensor>,
    pub splits: Vec<CorpusSplit>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &CorpusSplit {
        self.splits
            .iter()
            .find(|s| s.split == split)
            .expect("corpus holds every split")
    }
}

/// Draws one template made of held "syllable" vectors with a smooth envelope.
fn draw_template(rng: &mut StdRng, frames: usize, bins: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames * bins);
    let mut t = 0;
    while t < frames {
        let len = rng.random_range(5..=10).min(frames - t);
        let v: Vec<f64> = (0..bins).map(|_| gaussian(rng)).collect();
        for s in 0..len {
            let env = 0.6 + 0.4 * libm::sin(core::f64::consts::PI * (s as f64 + 0.5) / len as f64);
            data.extend(v.iter().map(|x| x * env));
        }
        t += len;
    }
    Tensor::matrix(frames, bins, data).expect("template extents are positive")
}

/// RMS difference over the common prefix of two templates.
pub fn template_distance(a: &Tensor, b: &Tensor) -> f64 {
    let bins = a.shape()[1];
    let len = a.shape()[0].min(b.shape()[0]) * bins;
    let sq: f64 = a.data()[..len]
        .iter()
        .zip(&b.data()[..len])
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    libm::sqrt(sq / len as f64)
}

fn draw_glyph(rng: &mut StdRng, size: usize, channels: usize) -> Tensor {
    let color: Vec<f64> = (0..channels)
        .map(|_| {
            let mag = rng.random_range(1.0..2.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let mut data = Vec::with_capacity(size * size * channels);
    for _ in 0..size * size {
        let on = rng.random_bool(0.5);
        data.extend(color.iter().map(|c| if on { *c } else { -0.5 * c }));
    }
    Tensor::new(vec![size, size, channels], data).expect("glyph extents are positive")
}

/// Builds keyword and filler inventories for a configuration.
pub fn build_inventory(config: &CorpusConfig) -> Result<(Vec<KeywordSpec>, Vec<Tensor>), CorpusError> {
    config.validate()?;
    let mut keywords: Vec<KeywordSpec> = Vec::with_capacity(config.vocab_size);
    for k in 0..config.vocab_size as u64 {
        let mut rng = rng_for(config.seed, &[100, k]);
        let mut accepted = None;
        for _ in 0..100 {
            let frames = rng.random_range(config.min_keyword_frames..=config.max_keyword_frames);
            let tpl = draw_template(&mut rng, frames, config.n_bins);
            if keywords
                .iter()
                .all(|other| template_distance(&tpl, &other.audio_template) >= config.template_margin)
            {
                accepted = Some(tpl);
                break;
            }
        }
        let audio_template = accepted.ok_or(CorpusError::Templates)?;
        let glyph = draw_glyph(&mut rng, config.glyph_size, config.channels);
        keywords.push(KeywordSpec {
            id: k as KeywordId,
            name: keyword_name(k as KeywordId),
            audio_template,
            glyph,
        });
    }
    let fillers = (0..config.n_fillers as u64)
        .map(|f| {
            let mut rng = rng_for(config.seed, &[200, f]);
            let frames = rng.random_range(config.min_filler_frames..=config.max_filler_frames);
            draw_template(&mut rng, frames, config.n_bins)
        })
        .collect();
    Ok((keywords, fillers))
}

/// Concatenates token templates, adds Gaussian noise on the occupied frames
/// and zero-pads to `n_frames`.
pub fn render_utterance(
    id: String,
    segments: &[(Token, &Tensor)],
    n_frames: usize,
    noise_sigma: f64,
    rng: &mut StdRng,
) -> Result<CaptionRecord, CorpusError> {
    let bins = segments.first().map_or(1, |(_, t)| t.shape()[1]);
    let needed: usize = segments.iter().map(|(_, t)| t.shape()[0]).sum();
    if needed > n_frames {
        return Err(CorpusError::Length {
            needed,
            available: n_frames,
        });
    }
    let mut data = vec![0.0; n_frames * bins];
    let mut alignments = Vec::with_capacity(segments.len());
    let mut cursor = 0;
    for (token, tpl) in segments {
        let len = tpl.shape()[0];
        data[cursor * bins..(cursor + len) * bins].copy_from_slice(tpl.data());
        alignments.push(Alignment {
            token: *token,
            start: cursor,
            end: cursor + len,
        });
        cursor += len;
    }
    if noise_sigma > 0.0 {
        for v in &mut data[..cursor * bins] {
            *v += noise_sigma * gaussian(rng);
        }
    }
    Ok(CaptionRecord {
        id,
        features: Tensor::matrix(n_frames, bins, data).map_err(|e| CorpusError::Config(format!("{e}")))?,
        n_valid: cursor,
        transcript: segments.iter().map(|(t, _)| *t).collect(),
        alignments,
    })
}

/// Composites glyphs at random non-overlapping positions over a smooth
/// random texture.
pub fn render_image(
    id: String,
    keywords: &[&KeywordSpec],
    config: &CorpusConfig,
    rng: &mut StdRng,
) -> Result<ImageRecord, CorpusError> {
    let (side, c, g) = (config.image_side, config.channels, config.glyph_size);
    let mut data = vec![0.0; side * side * c];
    let amp = config.background_amplitude;
    if amp > 0.0 {
        for ch in 0..c {
            let (fy, fx) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6));
            let (py, px) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
            for i in 0..side {
                for j in 0..side {
                    let tex = libm::sin(fy * i as f64 + py) * libm::cos(fx * j as f64 + px);
                    data[(i * side + j) * c + ch] = amp * (tex + 0.3 * gaussian(rng));
                }
            }
        }
    }
    let mut boxes: Vec<GlyphBox> = Vec::with_capacity(keywords.len());
    for kw in keywords {
        let mut placed = None;
        for _ in 0..200 {
            let candidate = GlyphBox {
                keyword: kw.id,
                top: rng.random_range(0..=side - g),
                left: rng.random_range(0..=side - g),
                size: g,
            };
            if boxes.iter().all(|b| !b.overlaps(&candidate)) {
                placed = Some(candidate);
                break;
            }
        }
        let b = placed.ok_or(CorpusError::Placement {
            count: keywords.len(),
            glyph: g,
            canvas: side,
        })?;
        let gd = kw.glyph.data();
        for i in 0..g {
            let dst = ((b.top + i) * side + b.left) * c;
            data[dst..dst + g * c].copy_from_slice(&gd[i * g * c..(i + 1) * g * c]);
        }
        boxes.push(b);
    }
    let pixels = PixelGrid::from_tensor(
        Tensor::new(vec![side, side, c], data).map_err(|e| CorpusError::Config(format!("{e}")))?,
    )
    .expect("rank-3 pixel tensor");
    Ok(ImageRecord {
        id,
        pixels,
        true_tags: keywords.iter().map(|k| k.id).collect(),
        tagger_tags: BTreeSet::new(),
        boxes,
    })
}

/// Noisy visual tagger: keeps each true tag with probability `recall` and
/// adds false tags so that expected precision is about `precision`.
pub fn simulate_tagger(
    true_tags: &BTreeSet<KeywordId>,
    vocab_size: usize,
    precision: f64,
    recall: f64,
    rng: &mut StdRng,
) -> BTreeSet<KeywordId> {
    let mut out: BTreeSet<KeywordId> = true_tags
        .iter()
        .copied()
        .filter(|_| recall >= 1.0 || rng.random_bool(recall))
        .collect();
    let others: Vec<KeywordId> = (0..vocab_size as KeywordId).filter(|k| !true_tags.contains(k)).collect();
    if precision < 1.0 && !others.is_empty() {
        let expected_false = recall * true_tags.len() as f64 * (1.0 - precision) / precision;
        let p_false = (expected_false / others.len() as f64).min(1.0);
        for k in others {
            if rng.random_bool(p_false) {
                out.insert(k);
            }
        }
    }
    out
}

/// Picks `1..=max` distinct keywords for one example.
fn sample_keywords(config: &CorpusConfig, rng: &mut StdRng) -> Vec<KeywordId> {
    let count = rng.random_range(config.min_keywords..=config.max_keywords);
    let mut pool: Vec<KeywordId> = (0..config.vocab_size as KeywordId).collect();
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let i = rng.random_range(0..pool.len());
        chosen.push(pool.swap_remove(i));
    }
    chosen
}

/// Generates one paired example from its own derived stream.
pub fn generate_example(
    config: &CorpusConfig,
    keywords: &[KeywordSpec],
    fillers: &[Tensor],
    split: Split,
    index: usize,
) -> Result<PairedExample, CorpusError> {
    let mut rng = rng_for(config.seed, &[split.stream(), index as u64]);
    let chosen = sample_keywords(config, &mut rng);

    let mut segments: Vec<(Token, &Tensor)> = Vec::new();
    let filler = |rng: &mut StdRng| {
        let f = rng.random_range(0..fillers.len());
        (Token::Filler(f as u32), &fillers[f])
    };
    if rng.random_bool(0.5) {
        segments.push(filler(&mut rng));
    }
    for (i, &k) in chosen.iter().enumerate() {
        if i > 0 {
            segments.push(filler(&mut rng));
        }
        segments.push((Token::Keyword(k), &keywords[k as usize].audio_template));
    }
    if rng.random_bool(0.5) {
        segments.push(filler(&mut rng));
    }
    let stem = format!("{}-{index:05}", split.name());
    let caption = render_utterance(
        format!("{stem}-cap"),
        &segments,
        config.n_frames,
        config.noise_sigma,
        &mut rng,
    )?;

    let specs: Vec<&KeywordSpec> = chosen.iter().map(|&k| &keywords[k as usize]).collect();
    let mut image = render_image(format!("{stem}-img"), &specs, config, &mut rng)?;
    image.tagger_tags = simulate_tagger(
        &image.true_tags,
        config.vocab_size,
        config.tagger_precision,
        config.tagger_recall,
        &mut rng,
    );
    Ok(PairedExample { caption, image })
}

/// Query crop around `b`, widened by the configured margin and shifted to
/// stay on the canvas.
pub fn query_crop(config: &CorpusConfig, b: &GlyphBox) -> (usize, usize, usize) {
    let side = config.query_side();
    let max_origin = config.image_side - side;
    let top = b.top.saturating_sub(config.query_margin).min(max_origin);
    let left = b.left.saturating_sub(config.query_margin).min(max_origin);
    (top, left, side)
}

/// Builds up to `queries_per_keyword` crops per keyword from a split,
/// drawing source images at random.
pub fn build_queries(config: &CorpusConfig, split: Split, examples: &[PairedExample]) -> Vec<KeywordQuery> {
    let mut queries = Vec::new();
    for k in 0..config.vocab_size as KeywordId {
        let mut sources: Vec<usize> = examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.image.true_tags.contains(&k))
            .map(|(i, _)| i)
            .collect();
        let mut rng = rng_for(config.seed, &[300, split.stream(), k as u64]);
        crate::rng::shuffle(&mut sources, &mut rng);
        sources.truncate(config.queries_per_keyword);
        sources.sort_unstable();
        for (n, i) in sources.into_iter().enumerate() {
            let image = &examples[i].image;
            let b = image
                .boxes
                .iter()
                .find(|b| b.keyword == k)
                .expect("true tags match placed boxes");
            let crop = query_crop(config, b);
            let pixels = image
                .pixels
                .crop(crop.0, crop.1, crop.2, crop.2)
                .expect("crop lies on the canvas");
            queries.push(KeywordQuery {
                id: format!("q-{}-{}-{n:02}", split.name(), keyword_name(k)),
                keyword: k,
                image_id: image.id.clone(),
                crop,
                pixels,
            });
        }
    }
    queries
}

/// Generates all three splits plus dev/test queries. Deterministic per seed.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus, CorpusError> {
    let (keywords, fillers) = build_inventory(config)?;
    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        let count = match split {
            Split::Train => config.n_train,
            Split::Dev => config.n_dev,
            Split::Test => config.n_test,
        };
        let examples = (0..count)
            .map(|i| generate_example(config, &keywords, &fillers, split, i))
            .collect::<Result<Vec<_>, _>>()?;
        let queries = if split == Split::Train {
            Vec::new()
        } else {
            build_queries(config, split, &examples)
        };
        splits.push(CorpusSplit {
            split,
            examples,
            queries,
        });
    }
    Ok(Corpus {
        config: config.clone(),
        keywords,
        fillers,
        splits,
    })
}
