//! 16-bit PCM mono RIFF/WAVE reading and writing.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::AudioClip;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a RIFF/WAVE file")]
    NotWave,
    #[error("truncated WAV: {0}")]
    Truncated(&'static str),
    #[error("unsupported WAV encoding: {0}")]
    Unsupported(String),
    #[error("WAV has no samples")]
    Empty,
}

const PCM_FORMAT: u16 = 1;

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a mono 16-bit PCM WAV; samples are scaled to `[-1, 1)`.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioClip, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::NotWave);
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or(WavError::Truncated("chunk extends past end of file"))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(WavError::Truncated("fmt chunk shorter than 16 bytes"));
                }
                format = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => data = Some(&bytes[body..end]),
            _ => {}
        }
        // chunks are word aligned
        pos = end + (size & 1);
    }
    let (fmt_tag, channels, sample_rate, bits) = format.ok_or(WavError::Truncated("missing fmt chunk"))?;
    if fmt_tag != PCM_FORMAT {
        return Err(WavError::Unsupported(format!("format tag {fmt_tag:#06x}, expected PCM (1)")));
    }
    if channels != 1 {
        return Err(WavError::Unsupported(format!("{channels} channels, expected mono")));
    }
    if bits != 16 {
        return Err(WavError::Unsupported(format!("{bits} bits per sample, expected 16")));
    }
    if sample_rate == 0 {
        return Err(WavError::Unsupported("sample rate 0".into()));
    }
    let data = data.ok_or(WavError::Truncated("missing data chunk"))?;
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    if samples.is_empty() {
        return Err(WavError::Empty);
    }
    Ok(AudioClip {
        samples,
        sample_rate_hz: sample_rate,
    })
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, WavError> {
    parse_wav(&fs::read(path)?)
}

/// Encodes a clip as 16-bit PCM mono, clamping to the representable range.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), WavError> {
    fs::write(path, encode_wav(clip))?;
    Ok(())
}
