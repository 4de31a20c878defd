//! Log-Mel front end: pre-emphasis, Hamming-windowed STFT power, HTK Mel
//! filterbank, natural-log compression and fixed-length segmentation.

mod mel;
mod norm;
mod stft;
pub mod wav;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub use mel::{hz_to_mel, mel_to_hz, MelFilterbank};
pub use norm::{FeatureNorm, NormMode};
pub use stft::{hamming_window, stft_power};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("audio clip is empty")]
    EmptyClip,
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("clip has {len} samples, need at least one window of {need}")]
    TooShort { len: usize, need: usize },
    #[error("invalid Mel range {fmin_hz}..{fmax_hz} Hz (Nyquist {nyquist_hz} Hz)")]
    InvalidFrequencyRange {
        fmin_hz: f64,
        fmax_hz: f64,
        nyquist_hz: f64,
    },
    #[error("clip sample rate {got} Hz does not match configured {expected} Hz")]
    SampleRateMismatch { got: u32, expected: u32 },
    #[error("invalid front-end config: {0}")]
    InvalidConfig(String),
}

/// Mono PCM audio with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, DspError> {
        if samples.is_empty() {
            return Err(DspError::EmptyClip);
        }
        if sample_rate_hz == 0 {
            return Err(DspError::InvalidSampleRate);
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Front-end settings. Defaults: 16 kHz, pre-emphasis 0.97, 20 ms Hamming
/// window, 10 ms hop, 512-point FFT, 32 Mel bands over 0-8 kHz, 128-frame
/// segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    pub sample_rate_hz: u32,
    pub pre_emphasis: f64,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
    pub segment_frames: usize,
    /// A trailing partial segment is zero-padded when it has at least this
    /// many frames, otherwise dropped.
    pub min_tail_frames: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            pre_emphasis: 0.97,
            win_ms: 20.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: 32,
            fmin_hz: 0.0,
            fmax_hz: 8_000.0,
            log_floor: 1e-10,
            segment_frames: 128,
            min_tail_frames: 64,
        }
    }
}

impl DspConfig {
    pub fn win_len(&self) -> usize {
        (self.sample_rate_hz as f64 * self.win_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate_hz as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: &str| Err(DspError::InvalidConfig(m.to_string()));
        if self.sample_rate_hz == 0 {
            return Err(DspError::InvalidSampleRate);
        }
        if self.win_len() == 0 || self.hop_len() == 0 {
            return bad("window and hop must span at least one sample");
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < self.win_len() {
            return bad("n_fft must be a power of two no smaller than the window");
        }
        if self.n_mels == 0 || self.segment_frames == 0 {
            return bad("n_mels and segment_frames must be positive");
        }
        if self.min_tail_frames == 0 || self.min_tail_frames > self.segment_frames {
            return bad("min_tail_frames must be in 1..=segment_frames");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    /// Stable digest of every setting, threaded through feature caches and
    /// checkpoints so artifacts from different front ends are never mixed.
    pub fn hash(&self) -> u64 {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Row-major real matrix (frames x bins, or frames x bands).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// First-order high-pass: `y[0] = x[0]`, `y[n] = x[n] - alpha * x[n-1]`.
pub fn pre_emphasis(clip: &AudioClip, alpha: f64) -> AudioClip {
    let x = &clip.samples;
    let mut y = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        y.push(first);
    }
    for n in 1..x.len() {
        y.push(x[n] - alpha * x[n - 1]);
    }
    AudioClip {
        samples: y,
        sample_rate_hz: clip.sample_rate_hz,
    }
}

/// `ln(max(fb . power_frame, floor))` for every frame; frames x bands.
pub fn log_mel(power: &Matrix, fb: &MelFilterbank, floor: f64) -> Matrix {
    let mut out = fb.apply(power);
    for v in &mut out.data {
        *v = v.max(floor).ln();
    }
    out
}

/// One fixed-length feature block, band-major: `data[band * frames + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub n_mels: usize,
    pub frames: usize,
    pub data: Vec<f32>,
}

/// Cuts `frames x bands` features into non-overlapping `seg_len`-frame blocks
/// transposed to `bands x seg_len`. A trailing remainder of at least
/// `min_tail` frames is zero-padded; shorter remainders are dropped.
pub fn segment(features: &Matrix, seg_len: usize, min_tail: usize) -> Vec<Segment> {
    let bands = features.cols;
    let mut out = Vec::new();
    let mut start = 0;
    while start < features.rows {
        let avail = (features.rows - start).min(seg_len);
        if avail < seg_len && avail < min_tail {
            break;
        }
        let mut data = vec![0.0f32; bands * seg_len];
        for t in 0..avail {
            for (b, &v) in features.row(start + t).iter().enumerate() {
                data[b * seg_len + t] = v as f32;
            }
        }
        out.push(Segment {
            n_mels: bands,
            frames: seg_len,
            data,
        });
        start += seg_len;
    }
    out
}

/// Full clip-to-segments pipeline with the filterbank built once.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    cfg: DspConfig,
    filterbank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(cfg: DspConfig) -> Result<Self, DspError> {
        cfg.validate()?;
        let filterbank = MelFilterbank::new(cfg.n_mels, cfg.n_fft, cfg.sample_rate_hz, cfg.fmin_hz, cfg.fmax_hz)?;
        Ok(Self { cfg, filterbank })
    }

    pub fn config(&self) -> &DspConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Frames x bands log-Mel features of a whole clip.
    pub fn log_mel_frames(&self, clip: &AudioClip) -> Result<Matrix, DspError> {
        if clip.sample_rate_hz != self.cfg.sample_rate_hz {
            return Err(DspError::SampleRateMismatch {
                got: clip.sample_rate_hz,
                expected: self.cfg.sample_rate_hz,
            });
        }
        let emphasized = pre_emphasis(clip, self.cfg.pre_emphasis);
        let power = stft_power(&emphasized, self.cfg.win_len(), self.cfg.hop_len(), self.cfg.n_fft)?;
        Ok(log_mel(&power, &self.filterbank, self.cfg.log_floor))
    }

    pub fn segments(&self, clip: &AudioClip) -> Result<Vec<Segment>, DspError> {
        let frames = self.log_mel_frames(clip)?;
        Ok(segment(&frames, self.cfg.segment_frames, self.cfg.min_tail_frames))
    }
}

/// Batched model input `x` of shape `(b, c, f, d)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramBatch {
    pub batch: usize,
    pub channels: usize,
    pub n_mels: usize,
    pub frames: usize,
    pub data: Vec<f32>,
}

impl SpectrogramBatch {
    /// Stacks single-channel segments; all must share one shape.
    pub fn from_segments<'a>(segments: impl IntoIterator<Item = &'a Segment>) -> Result<Self, DspError> {
        let mut batch = 0;
        let mut dims = None;
        let mut data = Vec::new();
        for seg in segments {
            match dims {
                None => dims = Some((seg.n_mels, seg.frames)),
                Some(d) if d != (seg.n_mels, seg.frames) => {
                    return Err(DspError::InvalidConfig("segments differ in shape".into()))
                }
                _ => {}
            }
            data.extend_from_slice(&seg.data);
            batch += 1;
        }
        let (n_mels, frames) = dims.ok_or_else(|| DspError::InvalidConfig("empty batch".into()))?;
        Ok(Self {
            batch,
            channels: 1,
            n_mels,
            frames,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.n_mels, self.frames]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(self.shape().to_vec(), self.data.iter().map(|&v| T::of(v as f64)).collect())
            .expect("batch data matches its shape")
    }
}
