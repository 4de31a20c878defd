use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Deserialize)]
struct Row {
    path: String,
    label: String,
    speaker: String,
    clip: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub speaker: usize,
    pub clip: usize,
}

/// Labeled recordings. Label, speaker and clip names are mapped to indices
/// by sorted name, so row order does not matter.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub labels: Vec<String>,
    pub speakers: Vec<String>,
    pub clips: Vec<String>,
}

fn index_of(names: &[String], name: &str) -> usize {
    names.binary_search_by(|n| n.as_str().cmp(name)).expect("name was collected")
}

impl Manifest {
    /// Reads a CSV manifest with header `path,label,speaker,clip`. Relative
    /// paths resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut rows = Vec::new();
        for (line, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| CliError::Data(format!("manifest row {}: {e}", line + 2)))?;
            rows.push(row);
        }
        let collect = |f: fn(&Row) -> &str| -> Vec<String> {
            rows.iter().map(|r| f(r).to_string()).collect::<BTreeSet<_>>().into_iter().collect()
        };
        let labels = collect(|r| &r.label);
        let speakers = collect(|r| &r.speaker);
        let clips = collect(|r| &r.clip);
        if clips.len() != rows.len() {
            return Err(CliError::Data("clip ids in the manifest must be unique".into()));
        }
        let mut entries = Vec::with_capacity(rows.len());
        for r in &rows {
            let p = base.join(&r.path);
            if !p.is_file() {
                return Err(CliError::Data(format!("manifest entry {} does not exist", p.display())));
            }
            entries.push(ManifestEntry {
                path: p,
                label: index_of(&labels, &r.label),
                speaker: index_of(&speakers, &r.speaker),
                clip: index_of(&clips, &r.clip),
            });
        }
        Ok(Self {
            entries,
            labels,
            speakers,
            clips,
        })
    }

    pub fn write(path: &Path, rows: &[(String, String, String, String)]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
        w.write_record(["path", "label", "speaker", "clip"]).map_err(io)?;
        for (p, l, s, c) in rows {
            w.write_record([p, l, s, c]).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}
