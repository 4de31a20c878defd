use serde::{Deserialize, Serialize};

use super::{DspError, Segment};

/// Standardization statistics fitted on training segments only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FeatureNorm {
    /// One mean/std over every value.
    Global { mean: f64, std: f64 },
    /// One mean/std per Mel band.
    PerBand { mean: Vec<f64>, std: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    None,
    #[default]
    Global,
    PerBand,
}

const MIN_STD: f64 = 1e-8;

impl FeatureNorm {
    pub fn fit<'a>(mode: NormMode, segments: impl IntoIterator<Item = &'a Segment>) -> Result<Option<Self>, DspError> {
        let mut segs = segments.into_iter().peekable();
        let n_mels = match segs.peek() {
            Some(s) => s.n_mels,
            None => return Err(DspError::InvalidConfig("cannot fit normalization on zero segments".into())),
        };
        let mut sum = vec![0.0f64; n_mels];
        let mut sq = vec![0.0f64; n_mels];
        let mut count = 0usize;
        for seg in segs {
            if seg.n_mels != n_mels {
                return Err(DspError::InvalidConfig("segments differ in band count".into()));
            }
            for (b, row) in seg.data.chunks(seg.frames).enumerate() {
                for &v in row {
                    sum[b] += v as f64;
                    sq[b] += (v as f64) * (v as f64);
                }
            }
            count += seg.frames;
        }
        let stats = |s: f64, q: f64, n: f64| {
            let mean = s / n;
            (mean, (q / n - mean * mean).max(0.0).sqrt().max(MIN_STD))
        };
        Ok(match mode {
            NormMode::None => None,
            NormMode::Global => {
                let n = (count * n_mels) as f64;
                let (mean, std) = stats(sum.iter().sum(), sq.iter().sum(), n);
                Some(Self::Global { mean, std })
            }
            NormMode::PerBand => {
                let (mean, std) = sum.iter().zip(&sq).map(|(&s, &q)| stats(s, q, count as f64)).unzip();
                Some(Self::PerBand { mean, std })
            }
        })
    }

    pub fn apply(&self, seg: &mut Segment) -> Result<(), DspError> {
        match self {
            Self::Global { mean, std } => {
                for v in &mut seg.data {
                    *v = ((*v as f64 - mean) / std) as f32;
                }
            }
            Self::PerBand { mean, std } => {
                if mean.len() != seg.n_mels {
                    return Err(DspError::InvalidConfig(format!(
                        "normalization has {} bands, segment has {}",
                        mean.len(),
                        seg.n_mels
                    )));
                }
                for (b, row) in seg.data.chunks_mut(seg.frames).enumerate() {
                    for v in row {
                        *v = ((*v as f64 - mean[b]) / std[b]) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}
