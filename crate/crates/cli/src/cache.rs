//! Flat binary feature cache, little-endian:
//!
//! ```text
//! magic "SSWFEAT\0" | version u32 | dsp config hash u64 | n_mels u32 | frames u32
//! 3 name tables (labels, speakers, clips): count u32, then (len u32, utf-8)*
//! segment count u32, then per segment:
//!   clip u32 | label u32 | speaker u32 | n_mels*frames f32, band-major
//! ```

use std::path::Path;

use speech_swin::dsp::Segment;
use speech_swin::train::{LabeledDataset, LabeledItem};

use crate::CliError;

const MAGIC: &[u8; 8] = b"SSWFEAT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CachedSegment {
    pub clip: u32,
    pub label: u32,
    pub speaker: u32,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub config_hash: u64,
    pub n_mels: usize,
    pub frames: usize,
    pub labels: Vec<String>,
    pub speakers: Vec<String>,
    pub clips: Vec<String>,
    pub segments: Vec<CachedSegment>,
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Data(format!("corrupt feature cache: {}", msg.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn names(&mut self) -> Result<Vec<String>, CliError> {
        let n = self.u32()?;
        (0..n)
            .map(|_| {
                let len = self.u32()? as usize;
                String::from_utf8(self.take(len)?.to_vec()).map_err(|_| corrupt("name is not UTF-8"))
            })
            .collect()
    }
}

fn put_names(out: &mut Vec<u8>, names: &[String]) {
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for n in names {
        out.extend_from_slice(&(n.len() as u32).to_le_bytes());
        out.extend_from_slice(n.as_bytes());
    }
}

impl FeatureCache {
    pub fn to_bytes(&self) -> Vec<u8> {
        let block = self.n_mels * self.frames;
        let mut out = Vec::with_capacity(64 + self.segments.len() * (12 + 4 * block));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.n_mels as u32).to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        put_names(&mut out, &self.labels);
        put_names(&mut out, &self.speakers);
        put_names(&mut out, &self.clips);
        out.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for s in &self.segments {
            out.extend_from_slice(&s.clip.to_le_bytes());
            out.extend_from_slice(&s.label.to_le_bytes());
            out.extend_from_slice(&s.speaker.to_le_bytes());
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| corrupt("bad magic"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let config_hash = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let n_mels = r.u32()? as usize;
        let frames = r.u32()? as usize;
        let labels = r.names()?;
        let speakers = r.names()?;
        let clips = r.names()?;
        let count = r.u32()? as usize;
        let block = n_mels * frames;
        let mut segments = Vec::with_capacity(count.min(bytes.len() / (12 + 4 * block).max(1)));
        for _ in 0..count {
            let (clip, label, speaker) = (r.u32()?, r.u32()?, r.u32()?);
            if clip as usize >= clips.len() || label as usize >= labels.len() || speaker as usize >= speakers.len() {
                return Err(corrupt("segment refers to an unknown clip, label or speaker"));
            }
            let data = r
                .take(4 * block)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            segments.push(CachedSegment {
                clip,
                label,
                speaker,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            config_hash,
            n_mels,
            frames,
            labels,
            speakers,
            clips,
            segments,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Rejects caches built under different front-end settings.
    pub fn check_hash(&self, expected: u64) -> Result<(), CliError> {
        if self.config_hash != expected {
            return Err(CliError::Config(format!(
                "feature cache was built with DSP config {:016x}, this run uses {expected:016x}",
                self.config_hash
            )));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<LabeledDataset, CliError> {
        let items = self
            .segments
            .iter()
            .map(|s| LabeledItem {
                features: Segment {
                    n_mels: self.n_mels,
                    frames: self.frames,
                    data: s.data.clone(),
                },
                label: s.label as usize,
                speaker: s.speaker,
                clip: s.clip,
            })
            .collect();
        LabeledDataset::new(items, self.labels.len()).map_err(|e| CliError::Data(e.to_string()))
    }
}
