//! Waveform IO and the log-mel frontend.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;
use vpkl_core::corpus::Alignment;
use vpkl_core::Tensor;

pub const LOG_FLOOR: f64 = 1e-10;
pub const TARGET_FRAMES: usize = 1024;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("input of {samples} samples is shorter than one {window}-sample window")]
    FrameCount { samples: usize, window: usize },
    #[error("sample rate {0} Hz is below the 8 kHz minimum")]
    SampleRate(u32),
    #[error("invalid frontend configuration: {0}")]
    Config(String),
}

/// Reads a RIFF/WAVE file holding 16-bit mono PCM, scaled into `[-1, 1)`.
pub fn load_wav_pcm16(path: &Path) -> Result<(Vec<f64>, u32), DspError> {
    let fail = |detail: String| DspError::Format {
        path: path.display().to_string(),
        detail,
    };
    let reader = hound::WavReader::open(path).map_err(|e| fail(format!("RIFF/WAVE parse failed: {e}")))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 || spec.channels != 1 {
        return Err(fail(format!(
            "fmt chunk declares {:?} {}-bit with {} channel(s) at {} Hz; need 16-bit integer PCM, mono",
            spec.sample_format, spec.bits_per_sample, spec.channels, spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| fail(format!("data chunk: {e}")))?;
    Ok((samples, spec.sample_rate))
}

/// Writes samples in `[-1, 1]` as 16-bit mono PCM, rounding to the nearest code.
pub fn write_wav_pcm16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), DspError> {
    let fail = |e: hound::Error| DspError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(fail)?;
    for &s in samples {
        let code = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(code).map_err(fail)?;
    }
    w.finalize().map_err(fail)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub window_s: f64,
    pub hop_s: f64,
    pub n_bins: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            window_s: 0.025,
            hop_s: 0.010,
            n_bins: 40,
        }
    }
}

impl MelConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_s * sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_s * sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// `N × B`.
    pub frames: Tensor,
    pub sample_rate: u32,
    pub hop_s: f64,
    pub window_s: f64,
    pub n_valid: usize,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_bins(&self) -> usize {
        self.frames.shape()[1]
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

pub fn frame_count(samples: usize, window: usize, hop: usize) -> Option<usize> {
    (samples >= window && hop > 0).then(|| 1 + (samples - window) / hop)
}

/// `n_bins + 2` equally spaced mel points from 0 Hz to Nyquist, in Hz.
pub fn mel_edges(n_bins: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_bins + 1) as f64))
        .collect()
}

/// Triangular HTK filters evaluated at the FFT bin frequencies;
/// one row of `n_fft / 2 + 1` weights per mel bin.
pub fn mel_filterbank(n_bins: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let edges = mel_edges(n_bins, sample_rate);
    let n_freq = n_fft / 2 + 1;
    (0..n_bins)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_freq)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

pub fn log_mel_spectrogram(samples: &[f64], sample_rate: u32, config: &MelConfig) -> Result<MelSpectrogram, DspError> {
    if sample_rate < 8000 {
        return Err(DspError::SampleRate(sample_rate));
    }
    let window = config.window_samples(sample_rate);
    let hop = config.hop_samples(sample_rate);
    if window == 0 || hop == 0 || config.n_bins == 0 {
        return Err(DspError::Config(format!(
            "window {window}, hop {hop} samples and {} bins must all be positive",
            config.n_bins
        )));
    }
    let n_frames = frame_count(samples.len(), window, hop).ok_or(DspError::FrameCount {
        samples: samples.len(),
        window,
    })?;
    let n_fft = window.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let bank = mel_filterbank(config.n_bins, n_fft, sample_rate);
    let win = hann(window);

    let mut out = Vec::with_capacity(n_frames * config.n_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    for t in 0..n_frames {
        let frame = &samples[t * hop..t * hop + window];
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(if i < window { frame[i] * win[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        out.extend(
            bank.iter()
                .map(|row| (row.iter().zip(&power).map(|(w, p)| w * p).sum::<f64>() + LOG_FLOOR).ln()),
        );
    }
    Ok(MelSpectrogram {
        frames: Tensor::matrix(n_frames, config.n_bins, out).map_err(|e| DspError::Config(e.to_string()))?,
        sample_rate,
        hop_s: config.hop_s,
        window_s: config.window_s,
        n_valid: n_frames,
    })
}

/// Zero-pads or truncates to exactly `target` frames, keeping the head.
pub fn pad_or_truncate(spec: &MelSpectrogram, target: usize) -> MelSpectrogram {
    let bins = spec.n_bins();
    let keep = spec.n_frames().min(target);
    let mut data = spec.frames.data()[..keep * bins].to_vec();
    data.resize(target * bins, 0.0);
    MelSpectrogram {
        frames: Tensor::matrix(target, bins, data).expect("target and bins are positive"),
        n_valid: spec.n_valid.min(target),
        ..spec.clone()
    }
}

/// Keeps the alignments that end within `n_valid` frames and logs the rest.
pub fn clip_alignments(id: &str, alignments: &[Alignment], n_valid: usize) -> Vec<Alignment> {
    let (kept, dropped): (Vec<Alignment>, Vec<Alignment>) = alignments.iter().partition(|a| a.end <= n_valid);
    for a in &dropped {
        log::warn!(
            "{id}: dropping alignment {} [{}, {}) beyond frame {n_valid}",
            a.token.name(),
            a.start,
            a.end
        );
    }
    kept
}
