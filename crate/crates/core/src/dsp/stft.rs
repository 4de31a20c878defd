use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioClip, DspError, Matrix};

/// Periodic Hamming window `0.54 - 0.46 cos(2 pi n / N)`.
pub fn hamming_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Power spectrogram, frames x (n_fft/2 + 1). Each frame is a Hamming-
/// windowed slice of `win_len` samples zero-padded to `n_fft`. Frames start
/// every `hop_len` samples; there is no padding at either end.
pub fn stft_power(clip: &AudioClip, win_len: usize, hop_len: usize, n_fft: usize) -> Result<Matrix, DspError> {
    let len = clip.samples.len();
    if len < win_len {
        return Err(DspError::TooShort { len, need: win_len });
    }
    let frames = 1 + (len - win_len) / hop_len;
    let bins = n_fft / 2 + 1;
    let window = hamming_window(win_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Matrix::zeros(frames, bins);
    for f in 0..frames {
        let slice = &clip.samples[f * hop_len..f * hop_len + win_len];
        for (b, (s, w)) in buf.iter_mut().zip(slice.iter().zip(&window)) {
            *b = Complex::new(s * w, 0.0);
        }
        buf[win_len..].fill(Complex::new(0.0, 0.0));
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (o, c) in out.data[f * bins..(f + 1) * bins].iter_mut().zip(&buf) {
            *o = c.norm_sqr();
        }
    }
    Ok(out)
}
