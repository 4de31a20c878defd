use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Confusion, TrainError};
use crate::dsp::{AudioClip, FeatureExtractor, Segment};

/// One fixed-length segment with its labels. Segments cut from the same
/// clip share `clip`, `label` and `speaker`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledItem {
    pub features: Segment,
    pub label: usize,
    pub speaker: u32,
    pub clip: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub items: Vec<LabeledItem>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(items: Vec<LabeledItem>, classes: usize) -> Result<Self, TrainError> {
        if let Some(bad) = items.iter().find(|it| it.label >= classes) {
            return Err(TrainError::Label {
                label: bad.label,
                classes,
            });
        }
        let mut owners: BTreeMap<u32, (usize, u32)> = BTreeMap::new();
        for it in &items {
            let owner = owners.entry(it.clip).or_insert((it.label, it.speaker));
            if *owner != (it.label, it.speaker) {
                return Err(TrainError::Invalid(format!(
                    "clip {} has segments with different labels or speakers",
                    it.clip
                )));
            }
        }
        Ok(Self { items, classes })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Sorted distinct speaker ids.
    pub fn speakers(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.items.iter().map(|it| it.speaker).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&LabeledItem> {
        indices.iter().map(|&i| &self.items[i]).collect()
    }
}

/// One leave-one-speaker-out fold as indices into the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub test_speaker: u32,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fold `i` holds out the `i`-th speaker in ascending id order.
pub fn loso_splits(ds: &LabeledDataset) -> Result<Vec<Fold>, TrainError> {
    let speakers = ds.speakers();
    if speakers.len() < 2 {
        return Err(TrainError::Invalid(format!(
            "leave-one-speaker-out needs at least 2 speakers, found {}",
            speakers.len()
        )));
    }
    Ok(speakers
        .iter()
        .enumerate()
        .map(|(index, &spk)| {
            let (test, train) = (0..ds.len()).partition(|&i| ds.items[i].speaker == spk);
            Fold {
                index,
                test_speaker: spk,
                train,
                test,
            }
        })
        .collect())
}

/// Synthetic labeled recording.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub audio: AudioClip,
    pub label: usize,
    pub speaker: u32,
    pub clip: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub per_class: usize,
    pub classes: usize,
    pub speakers: u32,
    pub seconds: f64,
    pub sample_rate_hz: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            per_class: 16,
            classes: 4,
            speakers: 4,
            seconds: 2.0,
            sample_rate_hz: 16_000,
            seed: 0,
        }
    }
}

pub const MAX_SYNTH_CLASSES: usize = 8;

/// Tone frequency of synthetic class `c`.
pub fn synth_tone_hz(class: usize) -> f64 {
    300.0 * (class + 1) as f64
}

/// Class `c` is a sine at [`synth_tone_hz`] with random phase and amplitude
/// plus white noise. Speakers are assigned round-robin within each class so
/// every speaker sees every class equally often.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<SynthClip>, TrainError> {
    if spec.classes == 0 || spec.classes > MAX_SYNTH_CLASSES {
        return Err(TrainError::Invalid(format!(
            "synthetic class count must be in 1..={MAX_SYNTH_CLASSES}, got {}",
            spec.classes
        )));
    }
    if spec.speakers == 0 || spec.per_class == 0 || spec.seconds <= 0.0 {
        return Err(TrainError::Invalid("synthetic dataset needs speakers, clips and duration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 0.01).expect("valid std");
    let sr = spec.sample_rate_hz as f64;
    let len = (spec.seconds * sr).round() as usize;
    let mut out = Vec::with_capacity(spec.per_class * spec.classes);
    for class in 0..spec.classes {
        let freq = synth_tone_hz(class);
        for i in 0..spec.per_class {
            let amp = rng.gen_range(0.3..0.6);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let samples = (0..len)
                .map(|n| amp * (2.0 * PI * freq * n as f64 / sr + phase).sin() + noise.sample(&mut rng))
                .map(|s: f64| s.clamp(-1.0, 1.0))
                .collect();
            let audio = AudioClip::new(samples, spec.sample_rate_hz)?;
            out.push(SynthClip {
                audio,
                label: class,
                speaker: (i as u32) % spec.speakers,
                clip: out.len() as u32,
            });
        }
    }
    Ok(out)
}

/// Runs the front end over labeled clips.
pub fn featurize(extractor: &FeatureExtractor, clips: &[SynthClip], classes: usize) -> Result<LabeledDataset, TrainError> {
    let mut items = Vec::new();
    for c in clips {
        for seg in extractor.segments(&c.audio)? {
            items.push(LabeledItem {
                features: seg,
                label: c.label,
                speaker: c.speaker,
                clip: c.clip,
            });
        }
    }
    LabeledDataset::new(items, classes)
}

/// Band means over all frames of a segment.
fn band_means(seg: &Segment) -> Vec<f64> {
    seg.data
        .chunks(seg.frames)
        .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() / seg.frames as f64)
        .collect()
}

/// Baseline classifier: each test segment goes to the class whose mean
/// band-mean vector over the training segments is nearest in Euclidean
/// distance.
pub fn nearest_centroid(train: &[&LabeledItem], test: &[&LabeledItem], classes: usize) -> Result<Confusion, TrainError> {
    let first = train.first().ok_or_else(|| TrainError::Invalid("empty training set".into()))?;
    let bands = first.features.n_mels;
    let mut sums = vec![vec![0.0; bands]; classes];
    let mut counts = vec![0usize; classes];
    for it in train {
        for (s, v) in sums[it.label].iter_mut().zip(band_means(&it.features)) {
            *s += v;
        }
        counts[it.label] += 1;
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let mut confusion = Confusion::new(classes);
    for it in test {
        let m = band_means(&it.features);
        let dist = |c: &Vec<f64>| c.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut best: Option<(usize, f64)> = None;
        for (class, c) in centroids.iter().enumerate() {
            if let Some(c) = c {
                let d = dist(c);
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((class, d));
                }
            }
        }
        confusion.record(it.label, best.expect("at least one centroid").0);
    }
    Ok(confusion)
}
