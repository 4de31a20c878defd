use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::TrainError;

/// Square count matrix, rows are true classes and columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self, TrainError> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(TrainError::Invalid("confusion matrix must be square".into()));
        }
        Ok(Self { counts: rows })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<(), TrainError> {
        if other.classes() != self.classes() {
            return Err(TrainError::Invalid("cannot merge confusions of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub war: f64,
    pub uar: f64,
}

impl EvalReport {
    /// Fixed-width text table followed by the two recalls.
    pub fn to_table(&self) -> String {
        let k = self.confusion.classes();
        let width = self.confusion.rows().iter().flatten().map(|v| v.to_string().len()).max().unwrap_or(1).max(4);
        let mut out = format!("{:>6}", "true\\pred");
        for c in 0..k {
            let _ = write!(out, " {c:>width$}");
        }
        out.push('\n');
        for (r, row) in self.confusion.rows().iter().enumerate() {
            let _ = write!(out, "{r:>9}");
            for v in row {
                let _ = write!(out, " {v:>width$}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "WAR {:.4}\nUAR {:.4}", self.war, self.uar);
        out
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Non-negative fraction kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Ratio {
    num: u128,
    den: u128,
}

impl Ratio {
    fn new(num: u128, den: u128) -> Self {
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    fn checked_add(self, o: Ratio) -> Option<Ratio> {
        let g = gcd(self.den, o.den);
        let den = (self.den / g).checked_mul(o.den)?;
        let num = self.num.checked_mul(o.den / g)?.checked_add(o.num.checked_mul(self.den / g)?)?;
        Some(Ratio::new(num, den))
    }

    fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// WAR is overall accuracy; UAR averages recall over classes that have test
/// support. Both are formed as exact fractions before the final division,
/// so equal class supports give bit-identical values.
pub fn compute_metrics(confusion: &Confusion) -> Result<EvalReport, TrainError> {
    let total = confusion.total();
    if total == 0 {
        return Err(TrainError::Invalid("confusion matrix is empty".into()));
    }
    let rows = confusion.rows();
    let trace: u64 = (0..rows.len()).map(|c| rows[c][c]).sum();
    let war = Ratio::new(trace as u128, total as u128).to_f64();

    let recalls: Vec<(u64, u64)> = rows
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let support: u64 = row.iter().sum();
            (support > 0).then_some((row[c], support))
        })
        .collect();
    let present = recalls.len() as u128;
    let exact = recalls.iter().try_fold(Ratio::new(0, 1), |acc, &(hit, n)| {
        acc.checked_add(Ratio::new(hit as u128, n as u128))
    });
    let uar = match exact.and_then(|s| Some(Ratio::new(s.num, s.den.checked_mul(present)?))) {
        Some(r) => r.to_f64(),
        None => recalls.iter().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / present as f64,
    };
    Ok(EvalReport {
        confusion: confusion.clone(),
        war,
        uar,
    })
}
