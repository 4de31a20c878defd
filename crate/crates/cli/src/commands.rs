use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use speech_swin::dsp::wav::{read_wav, write_wav};
use speech_swin::dsp::{DspError, FeatureExtractor, Segment, SpectrogramBatch};
use speech_swin::model::{read_checkpoint, write_checkpoint, Checkpoint};
use speech_swin::train::{
    compute_metrics, evaluate, loso_splits, synth_dataset, train_fold, Confusion, EpochRecord, EvalReport,
    LabeledItem, Split, SynthSpec, Vote,
};

use crate::cache::{CachedSegment, FeatureCache};
use crate::config::RunConfig;
use crate::images::{write_matrix, write_pgm};
use crate::manifest::Manifest;
use crate::CliError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    write_text(path, &(text + "\n"))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))
}

fn extractor(cfg: &RunConfig) -> Result<FeatureExtractor, CliError> {
    FeatureExtractor::new(cfg.dsp.clone()).map_err(|e| CliError::Config(e.to_string()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn save_checkpoint(path: &Path, ckpt: &Checkpoint<f32>) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, ckpt).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn check_dsp_hash(what: &Path, found: u64, expected: u64) -> Result<(), CliError> {
    if found != expected {
        return Err(CliError::Config(format!(
            "{} was produced with DSP config {found:016x}, this run uses {expected:016x}",
            what.display()
        )));
    }
    Ok(())
}

fn safe_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub classes: usize,
    pub per_class: usize,
    pub speakers: u32,
    pub seconds: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 16,
            speakers: 4,
            seconds: 2.0,
        }
    }
}

/// Writes `wav/clip_NNNNN.wav` files and `manifest.csv` under `out`.
/// Returns the number of clips.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, opts: &SynthOptions) -> Result<usize, CliError> {
    let spec = SynthSpec {
        per_class: opts.per_class,
        classes: opts.classes,
        speakers: opts.speakers,
        seconds: opts.seconds,
        sample_rate_hz: cfg.dsp.sample_rate_hz,
        seed: cfg.seed,
    };
    let clips = synth_dataset(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let wav_dir = out.join("wav");
    create_dir(&wav_dir)?;
    let mut rows = Vec::with_capacity(clips.len());
    for c in &clips {
        let name = format!("clip_{:05}", c.clip);
        let rel = format!("wav/{name}.wav");
        let path = out.join(&rel);
        write_wav(&path, &c.audio).map_err(|e| io_err(&path, e))?;
        rows.push((rel, format!("class{}", c.label), format!("spk{:03}", c.speaker), name));
    }
    Manifest::write(&out.join("manifest.csv"), &rows)?;
    Ok(clips.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractSummary {
    pub clips: usize,
    pub segments: usize,
    /// Segment count per label name.
    pub per_class: Vec<(String, usize)>,
}

/// Extracts every manifest entry into a feature cache. Clips are processed
/// in parallel but written in manifest order. Clips too short for a single
/// segment are skipped with a warning; unreadable ones fail the command.
pub fn cmd_extract(cfg: &RunConfig, manifest: &Path, out: &Path, jobs: usize) -> Result<ExtractSummary, CliError> {
    let fx = extractor(cfg)?;
    let m = Manifest::load(manifest)?;
    let results: Vec<Result<Vec<Segment>, String>> = pool(jobs)?.install(|| {
        m.entries
            .par_iter()
            .map(|entry| {
                let clip = read_wav(&entry.path).map_err(|e| format!("{}: {e}", entry.path.display()))?;
                match fx.segments(&clip) {
                    Ok(segs) => Ok(segs),
                    Err(DspError::TooShort { .. }) => Ok(Vec::new()),
                    Err(e) => Err(format!("{}: {e}", entry.path.display())),
                }
            })
            .collect()
    });
    let failures: Vec<&String> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("error: {f}");
        }
        return Err(CliError::Data(format!("{} of {} files could not be processed", failures.len(), results.len())));
    }

    let mut segments = Vec::new();
    let mut per_class = vec![0usize; m.labels.len()];
    for (entry, segs) in m.entries.iter().zip(results) {
        let segs = segs.expect("failures handled");
        if segs.is_empty() {
            eprintln!("warning: {} is too short for one segment, skipped", entry.path.display());
        }
        per_class[entry.label] += segs.len();
        segments.extend(segs.into_iter().map(|s| CachedSegment {
            clip: entry.clip as u32,
            label: entry.label as u32,
            speaker: entry.speaker as u32,
            data: s.data,
        }));
    }
    let cache = FeatureCache {
        config_hash: cfg.dsp.hash(),
        n_mels: cfg.dsp.n_mels,
        frames: cfg.dsp.segment_frames,
        labels: m.labels.clone(),
        speakers: m.speakers.clone(),
        clips: m.clips.clone(),
        segments,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    cache.write(out)?;
    Ok(ExtractSummary {
        clips: m.entries.len(),
        segments: cache.segments.len(),
        per_class: m.labels.into_iter().zip(per_class).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOptions {
    /// Train only this fold index.
    pub fold: Option<usize>,
    pub jobs: usize,
    /// Print per-epoch progress to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub speaker: String,
    pub dir: PathBuf,
    pub train_segments: usize,
    pub test_segments: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub folds: Vec<FoldSummary>,
    /// Sum of the per-fold test confusions.
    pub pooled: EvalReport,
    #[serde(skip)]
    pub table: String,
}

fn load_cache(cfg: &RunConfig, path: &Path) -> Result<FeatureCache, CliError> {
    let cache = FeatureCache::read(path)?;
    cache.check_hash(cfg.dsp.hash())?;
    if cache.n_mels != cfg.model.n_mels || cache.frames != cfg.model.frames {
        return Err(CliError::Config(format!(
            "cache holds {}x{} segments, model expects {}x{}",
            cache.n_mels, cache.frames, cfg.model.n_mels, cfg.model.frames
        )));
    }
    Ok(cache)
}

/// Leave-one-speaker-out training. Each fold writes `checkpoint.bin`,
/// `log.jsonl`, `report.txt` and `report.json` into its own directory, and
/// `summary.txt`/`summary.json` pool the test confusions of all folds.
pub fn cmd_train(cfg: &RunConfig, cache_path: &Path, out: &Path, opts: &TrainOptions) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let cache = load_cache(cfg, cache_path)?;
    let classes = cache.labels.len();
    if cfg.model.num_classes != classes {
        return Err(CliError::Config(format!(
            "model has {} classes, the cache has {classes} labels",
            cfg.model.num_classes
        )));
    }
    let ds = cache.dataset()?;
    let mut folds = loso_splits(&ds).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(f) = opts.fold {
        if f >= folds.len() {
            return Err(CliError::Usage(format!("fold {f} does not exist, there are {}", folds.len())));
        }
        folds = vec![folds.swap_remove(f)];
    }
    create_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;

    let dsp_hash = cfg.dsp.hash();
    let results: Vec<Result<FoldSummary, CliError>> = pool(opts.jobs)?.install(|| {
        folds
            .par_iter()
            .map(|fold| {
                let speaker = &cache.speakers[fold.test_speaker as usize];
                let dir = out.join(format!("fold{}_{}", fold.index, safe_name(speaker)));
                create_dir(&dir)?;
                let train = ds.subset(&fold.train);
                let test = ds.subset(&fold.test);
                let mut progress = |r: &EpochRecord| {
                    if opts.verbose {
                        let split = match r.split {
                            Split::Train => "train",
                            Split::Test => "test",
                        };
                        eprintln!(
                            "fold {} epoch {} {split}: loss {:.4} war {:.4} uar {:.4}",
                            r.fold, r.epoch, r.loss, r.war, r.uar
                        );
                    }
                };
                let trained = train_fold(
                    &cfg.model,
                    &cfg.train,
                    classes,
                    &train,
                    Some(&test),
                    cfg.seed,
                    fold.index,
                    &mut progress,
                )
                .map_err(|e| CliError::Data(format!("fold {}: {e}", fold.index)))?;

                let mut log = String::new();
                for rec in &trained.log {
                    log.push_str(&serde_json::to_string(rec).map_err(|e| io_err(&dir, e))?);
                    log.push('\n');
                }
                write_text(&dir.join("log.jsonl"), &log)?;
                let ckpt = Checkpoint::new(&trained.model, dsp_hash, trained.normalization.clone());
                save_checkpoint(&dir.join("checkpoint.bin"), &ckpt)?;
                let report = evaluate(
                    &trained.model,
                    trained.normalization.as_ref(),
                    &test,
                    cfg.train.vote,
                    cfg.train.eval_batch_size,
                )
                .map_err(|e| CliError::Data(format!("fold {}: {e}", fold.index)))?;
                write_text(&dir.join("report.txt"), &report.to_table())?;
                write_json(&dir.join("report.json"), &report)?;
                Ok(FoldSummary {
                    fold: fold.index,
                    speaker: speaker.clone(),
                    dir,
                    train_segments: train.len(),
                    test_segments: test.len(),
                    report,
                })
            })
            .collect()
    });
    let folds = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut pooled = Confusion::new(classes);
    for f in &folds {
        pooled.merge(&f.report.confusion).map_err(|e| CliError::Data(e.to_string()))?;
    }
    let pooled = compute_metrics(&pooled).map_err(|e| CliError::Data(e.to_string()))?;
    let mut table = String::from("fold  speaker           WAR     UAR\n");
    for f in &folds {
        table.push_str(&format!("{:<5} {:<16} {:.4}  {:.4}\n", f.fold, f.speaker, f.report.war, f.report.uar));
    }
    table.push_str("\npooled\n");
    table.push_str(&pooled.to_table());
    let summary = TrainSummary { folds, pooled, table };
    write_text(&out.join("summary.txt"), &summary.table)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalOptions {
    pub vote: Vote,
    /// Speaker names to keep; empty keeps everyone.
    pub speakers: Vec<String>,
}

/// Scores a checkpoint on a cache and writes `report.txt`/`report.json`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    cache_path: &Path,
    out: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport, CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    check_dsp_hash(checkpoint, ckpt.meta.dsp_hash, cfg.dsp.hash())?;
    let cache = FeatureCache::read(cache_path)?;
    cache.check_hash(ckpt.meta.dsp_hash)?;
    let (model, meta) = ckpt.into_model().map_err(|e| CliError::Data(e.to_string()))?;
    if model.config().num_classes != cache.labels.len() {
        return Err(CliError::Config(format!(
            "checkpoint has {} classes, the cache has {} labels",
            model.config().num_classes,
            cache.labels.len()
        )));
    }
    let mut keep = Vec::new();
    for name in &opts.speakers {
        match cache.speakers.iter().position(|s| s == name) {
            Some(i) => keep.push(i as u32),
            None => return Err(CliError::Usage(format!("speaker {name} is not in the cache"))),
        }
    }
    let ds = cache.dataset()?;
    let items: Vec<&LabeledItem> = ds
        .items
        .iter()
        .filter(|it| keep.is_empty() || keep.contains(&it.speaker))
        .collect();
    if items.is_empty() {
        return Err(CliError::Data("nothing to evaluate".into()));
    }
    let report = evaluate(&model, meta.normalization.as_ref(), &items, opts.vote, cfg.train.eval_batch_size)
        .map_err(|e| CliError::Data(e.to_string()))?;
    create_dir(out)?;
    write_text(&out.join("report.txt"), &report.to_table())?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureMapEntry {
    pub segment: usize,
    /// Model part (input split) index, absent for input spectrograms.
    pub part: Option<usize>,
    /// Stage index, absent for input spectrograms.
    pub stage: Option<usize>,
    pub height: usize,
    pub width: usize,
    /// File stem; `.pgm` and `.txt` share it.
    pub name: String,
}

/// Writes the log-Mel input and the channel-mean map after every stage for
/// each segment of one recording, as PGM images plus exact text dumps, and
/// an `index.json` listing them.
pub fn cmd_featuremaps(cfg: &RunConfig, checkpoint: &Path, wav: &Path, out: &Path) -> Result<Vec<FeatureMapEntry>, CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    check_dsp_hash(checkpoint, ckpt.meta.dsp_hash, cfg.dsp.hash())?;
    let (model, meta) = ckpt.into_model().map_err(|e| CliError::Data(e.to_string()))?;
    let clip = read_wav(wav).map_err(|e| CliError::Data(format!("{}: {e}", wav.display())))?;
    let mut segments = extractor(cfg)?
        .segments(&clip)
        .map_err(|e| CliError::Data(format!("{}: {e}", wav.display())))?;
    if segments.is_empty() {
        return Err(CliError::Data(format!("{} is too short for one segment", wav.display())));
    }
    create_dir(out)?;
    let mut entries = Vec::new();
    for (b, seg) in segments.iter().enumerate() {
        let name = format!("seg{b}_input");
        write_pgm(&out.join(format!("{name}.pgm")), seg.n_mels, seg.frames, &seg.data)?;
        write_matrix(&out.join(format!("{name}.txt")), seg.n_mels, seg.frames, &seg.data)?;
        entries.push(FeatureMapEntry {
            segment: b,
            part: None,
            stage: None,
            height: seg.n_mels,
            width: seg.frames,
            name,
        });
    }
    if let Some(norm) = &meta.normalization {
        for seg in &mut segments {
            norm.apply(seg).map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    let batch = SpectrogramBatch::from_segments(&segments).map_err(|e| CliError::Data(e.to_string()))?;
    let maps = model.feature_maps(&batch).map_err(|e| CliError::Data(e.to_string()))?;
    for (stage, map) in maps.iter().enumerate() {
        let [bs, parts, h, w] = <[usize; 4]>::try_from(map.shape()).expect("feature maps are 4-d");
        for b in 0..bs {
            for n in 0..parts {
                let start = ((b * parts + n) * h) * w;
                let values = &map.data()[start..start + h * w];
                let name = format!("seg{b}_part{n}_stage{}", stage + 1);
                write_pgm(&out.join(format!("{name}.pgm")), h, w, values)?;
                write_matrix(&out.join(format!("{name}.txt")), h, w, values)?;
                entries.push(FeatureMapEntry {
                    segment: b,
                    part: Some(n),
                    stage: Some(stage + 1),
                    height: h,
                    width: w,
                    name,
                });
            }
        }
    }
    write_json(&out.join("index.json"), &entries)?;
    Ok(entries)
}
