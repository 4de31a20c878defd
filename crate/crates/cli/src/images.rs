use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

/// Binary 8-bit PGM of a `rows x cols` row-major matrix, min-max scaled.
/// The first row is drawn at the bottom so low frequencies sit low.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f32]) -> Result<(), CliError> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in (0..rows).rev() {
        for &v in &values[r * cols..(r + 1) * cols] {
            let level = if span > 0.0 { ((v - lo) / span * 255.0).round() } else { 0.0 };
            out.push(level as u8);
        }
    }
    std::fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Whitespace-separated matrix, one row per line, every value printed in
/// its shortest round-trip form.
pub fn write_matrix(path: &Path, rows: usize, cols: usize, values: &[f32]) -> Result<(), CliError> {
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    std::fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f32>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse::<f32>().map_err(|e| CliError::Data(format!("{}: {e}", path.display()))))
                .collect()
        })
        .collect()
}
