use super::{DspError, Matrix};

/// HTK Mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with centers equally spaced on the Mel scale. Each
/// triangle rises from the previous center to 1 at its own center and falls
/// to 0 at the next; weights are evaluated at the FFT bin frequencies and
/// are not area-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// n_mels x n_bins, row-major.
    pub weights: Vec<f64>,
    /// n_mels + 2 edge frequencies; filter `m` spans `edges[m]..edges[m + 2]`.
    edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate_hz: u32, fmin_hz: f64, fmax_hz: f64) -> Result<Self, DspError> {
        let nyquist_hz = sample_rate_hz as f64 / 2.0;
        if n_mels == 0 || n_fft == 0 {
            return Err(DspError::InvalidConfig("n_mels and n_fft must be positive".into()));
        }
        if !(fmin_hz >= 0.0 && fmin_hz < fmax_hz && fmax_hz <= nyquist_hz) {
            return Err(DspError::InvalidFrequencyRange {
                fmin_hz,
                fmax_hz,
                nyquist_hz,
            });
        }
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin_hz), hz_to_mel(fmax_hz));
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate_hz as f64 / n_fft as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        Ok(Self {
            n_mels,
            n_bins,
            fmin_hz,
            fmax_hz,
            weights,
            edges_hz,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.n_mels + 1]
    }

    /// Band energies, frames x n_mels.
    pub fn apply(&self, power: &Matrix) -> Matrix {
        assert_eq!(power.cols, self.n_bins, "power spectrum width must equal filterbank bins");
        let mut out = Matrix::zeros(power.rows, self.n_mels);
        for f in 0..power.rows {
            let frame = power.row(f);
            for m in 0..self.n_mels {
                out.data[f * self.n_mels + m] = self.row(m).iter().zip(frame).map(|(w, p)| w * p).sum();
            }
        }
        out
    }
}
