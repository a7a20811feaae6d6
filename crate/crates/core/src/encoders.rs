//! Audio and vision encoders mapping features to embedding sequences.
//!
//! The audio branch is a stack of same-padded dilated temporal convolutions
//! (output length equals input length); the vision branch a strided 2-D
//! convolution stack whose output grid is flattened row-major into `M` rows.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::rng::rng_for;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Conv1dSpec {
    pub width: usize,
    pub channels: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AudioEncoderConfig {
    pub n_bins: usize,
    /// Hidden layers; each is followed by a ReLU.
    pub layers: Vec<Conv1dSpec>,
    pub embed_dim: usize,
}

impl AudioEncoderConfig {
    /// Frames on either side of `t` that can influence the embedding at `t`.
    pub fn receptive_radius(&self) -> usize {
        self.layers.iter().map(|l| (l.width / 2) * l.dilation).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Conv2dSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VisionEncoderConfig {
    pub in_channels: usize,
    pub layers: Vec<Conv2dSpec>,
    pub embed_dim: usize,
}

impl VisionEncoderConfig {
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub audio: AudioEncoderConfig,
    pub vision: VisionEncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = 16;
        Self {
            audio: AudioEncoderConfig {
                n_bins: 13,
                layers: vec![
                    Conv1dSpec { width: 5, channels: 16, dilation: 1 },
                    Conv1dSpec { width: 3, channels: 16, dilation: 2 },
                    Conv1dSpec { width: 3, channels: 16, dilation: 4 },
                ],
                embed_dim: d,
            },
            vision: VisionEncoderConfig {
                in_channels: 3,
                layers: vec![
                    Conv2dSpec { kernel: 3, channels: 16, stride: 2 },
                    Conv2dSpec { kernel: 3, channels: 16, stride: 2 },
                ],
                embed_dim: d,
            },
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.audio.embed_dim
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.audio.embed_dim != self.vision.embed_dim || self.audio.embed_dim == 0 {
            return Err(TensorError::Config(format!(
                "audio and vision embedding dims must match and be positive ({} vs {})",
                self.audio.embed_dim, self.vision.embed_dim
            )));
        }
        if self.audio.layers.iter().any(|l| l.width % 2 == 0 || l.dilation == 0 || l.channels == 0) {
            return Err(TensorError::Config("audio layers need odd widths and positive dilation".into()));
        }
        if self.vision.layers.iter().any(|l| l.kernel % 2 == 0 || l.stride == 0 || l.channels == 0) {
            return Err(TensorError::Config("vision layers need odd kernels and positive stride".into()));
        }
        Ok(())
    }

    /// Parameter shapes in storage order, with their fan-in.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut cin = self.audio.n_bins;
        for (i, l) in self.audio.layers.iter().enumerate() {
            out.push((format!("audio.conv{i}.weight"), vec![l.width, cin, l.channels], l.width * cin));
            out.push((format!("audio.conv{i}.bias"), vec![l.channels], 0));
            cin = l.channels;
        }
        out.push(("audio.proj.weight".into(), vec![1, cin, self.audio.embed_dim], cin));
        out.push(("audio.proj.bias".into(), vec![self.audio.embed_dim], 0));

        let mut cin = self.vision.in_channels;
        for (i, l) in self.vision.layers.iter().enumerate() {
            out.push((
                format!("vision.conv{i}.weight"),
                vec![l.kernel, l.kernel, cin, l.channels],
                l.kernel * l.kernel * cin,
            ));
            out.push((format!("vision.conv{i}.bias"), vec![l.channels], 0));
            cin = l.channels;
        }
        out.push(("vision.proj.weight".into(), vec![1, 1, cin, self.vision.embed_dim], cin));
        out.push(("vision.proj.bias".into(), vec![self.vision.embed_dim], 0));
        out
    }

    fn vision_offset(&self) -> usize {
        2 * (self.audio.layers.len() + 1)
    }
}

/// Named model parameters in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Checks names and shapes against a configuration.
    pub fn matches(&self, config: &ModelConfig) -> bool {
        let layout = config.layout();
        layout.len() == self.len()
            && layout
                .iter()
                .zip(self.names.iter().zip(&self.tensors))
                .all(|((n, s, _), (name, t))| n == name && s.as_slice() == t.shape())
    }
}

/// Fan-in scaled uniform initialisation, `U(−a, a)` with `a = sqrt(6 / fan_in)`
/// (variance `2 / fan_in`); biases start at zero.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> ParamSet {
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (i, (name, shape, fan_in)) in config.layout().into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let data = if fan_in == 0 {
            vec![0.0; n]
        } else {
            let bound = libm::sqrt(6.0 / fan_in as f64);
            let mut rng = rng_for(seed, &[500, i as u64]);
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        names.push(name);
        tensors.push(Tensor::new(shape, data).expect("layout shapes are positive"));
    }
    ParamSet { names, tensors }
}

/// Parameters registered as leaves of one graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &ParamSet, trainable: bool) -> Self {
        let vars = params.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        Self { vars }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Vision,
}

/// `T × D` embeddings: one row per frame or per spatial position.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub rows: Tensor,
    pub modality: Modality,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }
}

/// `features[N×B]` → embeddings `[N×D]`.
pub fn encode_audio(g: &mut Graph, config: &ModelConfig, params: &BoundParams, features: Var) -> Result<Var, TensorError> {
    let shape = g.shape(features);
    if shape.len() != 2 || shape[1] != config.audio.n_bins {
        return Err(TensorError::Config(format!(
            "audio features must be N x {}, got {:?}",
            config.audio.n_bins, shape
        )));
    }
    let mut x = features;
    for (i, l) in config.audio.layers.iter().enumerate() {
        let y = g.conv1d_same(x, params.vars[2 * i], l.dilation)?;
        let y = g.add_bias(y, params.vars[2 * i + 1])?;
        x = g.relu(y)?;
    }
    let p = 2 * config.audio.layers.len();
    let y = g.conv1d_same(x, params.vars[p], 1)?;
    g.add_bias(y, params.vars[p + 1])
}

/// `pixels[H×W×C]` → embeddings `[(H/s)(W/s) × D]`, row-major over the grid.
pub fn encode_vision(g: &mut Graph, config: &ModelConfig, params: &BoundParams, pixels: Var) -> Result<Var, TensorError> {
    let shape = g.shape(pixels).to_vec();
    let s = config.vision.total_stride();
    if shape.len() != 3 || shape[2] != config.vision.in_channels {
        return Err(TensorError::Config(format!(
            "image must be H x W x {}, got {:?}",
            config.vision.in_channels, shape
        )));
    }
    if shape[0] % s != 0 || shape[1] % s != 0 {
        return Err(TensorError::Config(format!(
            "canvas {}x{} is not divisible by total stride {s}",
            shape[0], shape[1]
        )));
    }
    let off = config.vision_offset();
    let mut x = pixels;
    for (i, l) in config.vision.layers.iter().enumerate() {
        let y = g.conv2d_same(x, params.vars[off + 2 * i], l.stride)?;
        let y = g.add_bias(y, params.vars[off + 2 * i + 1])?;
        x = g.relu(y)?;
    }
    let p = off + 2 * config.vision.layers.len();
    let y = g.conv2d_same(x, params.vars[p], 1)?;
    let y = g.add_bias(y, params.vars[p + 1])?;
    let m = (shape[0] / s) * (shape[1] / s);
    g.reshape(y, &[m, config.embed_dim()])
}

/// Inference-only audio embedding.
pub fn embed_audio(config: &ModelConfig, params: &ParamSet, features: &Tensor) -> Result<EmbeddingSequence, TensorError> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let x = g.constant(features.clone());
    let y = encode_audio(&mut g, config, &bound, x)?;
    Ok(EmbeddingSequence {
        rows: g.value(y).clone(),
        modality: Modality::Audio,
    })
}

/// Inference-only vision embedding.
pub fn embed_vision(config: &ModelConfig, params: &ParamSet, pixels: &Tensor) -> Result<EmbeddingSequence, TensorError> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let x = g.constant(pixels.clone());
    let y = encode_vision(&mut g, config, &bound, x)?;
    Ok(EmbeddingSequence {
        rows: g.value(y).clone(),
        modality: Modality::Vision,
    })
}
