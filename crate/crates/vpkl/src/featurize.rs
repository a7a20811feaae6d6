//! Real-audio path: WAV files to padded log-mel feature files.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::dsp::{self, DspError, MelConfig};
use crate::format;
use crate::manifest::{sha256_hex, Manifest, ManifestError};

#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("{path}: sample rate {found} Hz, expected {expected} Hz")]
    Rate { path: String, found: u32, expected: u32 },
    #[error("{path}: {cause}")]
    Io { path: String, cause: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturizeConfig {
    pub mel: MelConfig,
    pub sample_rate: u32,
    pub target_frames: usize,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        Self { mel: MelConfig::default(), sample_rate: 16000, target_frames: dsp::TARGET_FRAMES }
    }
}

/// Featurizes `<wav_dir>/<caption id>.wav` for every caption of the
/// manifest, writes `features/<id>.vpkf` next to it and re-seals it.
/// Returns the number of captions processed.
pub fn featurize(wav_dir: &Path, manifest_path: &Path, cfg: &FeaturizeConfig) -> Result<usize, FeaturizeError> {
    let mut m = Manifest::load_allow_unsealed(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let feat_dir = root.join("features");
    fs::create_dir_all(&feat_dir).map_err(|cause| FeaturizeError::Io {
        path: feat_dir.display().to_string(),
        cause,
    })?;
    for c in m.captions.iter_mut() {
        let wav = wav_dir.join(format!("{}.wav", c.id));
        let (samples, rate) = dsp::load_wav_pcm16(&wav)?;
        if rate != cfg.sample_rate {
            return Err(FeaturizeError::Rate {
                path: wav.display().to_string(),
                found: rate,
                expected: cfg.sample_rate,
            });
        }
        let spec = dsp::log_mel_spectrogram(&samples, rate, &cfg.mel)?;
        let spec = dsp::pad_or_truncate(&spec, cfg.target_frames);
        let n_valid = spec.n_valid;
        c.alignments.retain(|a| {
            let keep = a.2 <= n_valid;
            if !keep {
                log::warn!("{}: dropping alignment {} [{}, {}) beyond frame {n_valid}", c.id, a.0, a.1, a.2);
            }
            keep
        });
        let bytes = format::to_bytes(&spec.frames);
        let rel = format!("features/{}.vpkf", c.id);
        let out = root.join(&rel);
        fs::write(&out, &bytes).map_err(|cause| FeaturizeError::Io { path: out.display().to_string(), cause })?;
        c.feature_path = rel;
        c.feature_sha256 = Some(sha256_hex(&bytes));
        c.n_valid = spec.n_valid;
    }
    m.save(manifest_path)?;
    Ok(m.captions.len())
}
