//! Per-epoch metric rows, written as CSV with a newline-delimited JSON
//! mirror carrying the same fields.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,phase,head,top1_err,top5_err,ce,loss_total,loss_kl,lr,train_flops";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Test => "test",
        }
    }
}

/// One head (branch, teacher, ensemble, ...) at one epoch. Error rates are
/// percentages; loss values are batch means averaged over the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub head: String,
    pub top1_err: f64,
    pub top5_err: f64,
    pub ce: f64,
    /// NaN on test rows.
    #[serde(with = "nan_as_null")]
    pub loss_total: f64,
    #[serde(with = "nan_as_null")]
    pub loss_kl: f64,
    pub lr: f64,
    /// Cumulative training FLOPs at the end of this epoch.
    pub train_flops: u64,
}

// JSON has no NaN; it is written as null and read back as NaN.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl MetricsRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase.as_str(),
            self.head,
            self.top1_err,
            self.top5_err,
            self.ce,
            self.loss_total,
            self.loss_kl,
            self.lr,
            self.train_flops
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 10 {
            return Err(Error::Data(format!("metrics row needs 10 fields, got {}: {line:?}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::Data(format!("bad number {:?} in metrics row", f[i])))
        };
        let phase = match f[1] {
            "train" => Phase::Train,
            "test" => Phase::Test,
            p => return Err(Error::Data(format!("unknown phase {p:?}"))),
        };
        Ok(MetricsRecord {
            epoch: f[0].parse().map_err(|_| Error::Data(format!("bad epoch {:?}", f[0])))?,
            phase,
            head: f[2].to_string(),
            top1_err: num(3)?,
            top5_err: num(4)?,
            ce: num(5)?,
            loss_total: num(6)?,
            loss_kl: num(7)?,
            lr: num(8)?,
            train_flops: f[9].parse().map_err(|_| Error::Data(format!("bad flops {:?}", f[9])))?,
        })
    }
}

/// Append-only writer for `<stem>.csv` and `<stem>.ndjson`.
pub struct MetricsWriter {
    csv: File,
    json: File,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
}

impl MetricsWriter {
    /// Opens (creating if needed) both files; the CSV header is written only
    /// to a new or empty file.
    pub fn open(dir: &Path, stem: &str) -> Result<Self> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.ndjson"));
        let fresh = std::fs::metadata(&csv_path).map(|m| m.len() == 0).unwrap_or(true);
        let mut csv = OpenOptions::new().create(true).append(true).open(&csv_path)?;
        let json = OpenOptions::new().create(true).append(true).open(&json_path)?;
        if fresh {
            writeln!(csv, "{CSV_HEADER}")?;
        }
        Ok(MetricsWriter { csv, json, csv_path, json_path })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        writeln!(self.csv, "{}", r.to_csv())?;
        writeln!(self.json, "{}", serde_json::to_string(r).expect("record serialises"))?;
        Ok(())
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim_end() != CSV_HEADER {
                return Err(Error::Data(format!("{}: unexpected header {line:?}", path.display())));
            }
            continue;
        }
        if !line.trim().is_empty() {
            out.push(MetricsRecord::from_csv(&line)?);
        }
    }
    Ok(out)
}

pub fn read_ndjson(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Test-phase record of `head` at the last epoch present.
pub fn final_test<'a>(records: &'a [MetricsRecord], head: &str) -> Option<&'a MetricsRecord> {
    records.iter().rev().find(|r| r.phase == Phase::Test && r.head == head)
}

/// Numbers of top-1 and top-k misses of row-major `scores` against labels.
pub fn topk_errors(scores: &[f32], classes: usize, labels: &[usize], k: usize) -> (usize, usize) {
    let mut wrong1 = 0;
    let mut wrongk = 0;
    for (row, &y) in scores.chunks_exact(classes).zip(labels) {
        // Rank of the true class: entries strictly greater, plus equal
        // entries at lower indices (ties break to the lowest index).
        let sy = row[y];
        let rank = row.iter().enumerate().filter(|&(j, &v)| v > sy || (v == sy && j < y)).count();
        if rank >= 1 {
            wrong1 += 1;
        }
        if rank >= k {
            wrongk += 1;
        }
    }
    (wrong1, wrongk)
}
