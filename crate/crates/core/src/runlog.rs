//! Line-delimited training and evaluation logs.
//!
//! Every training loop in this crate reports progress as a flat stream of
//! `(step, name, value)` records. The on-disk form is JSON-lines so logs can
//! be tailed, diffed, and consumed by the CLI plotting command without a
//! bespoke parser.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One logged scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub step: u64,
    pub name: String,
    pub value: f64,
}

impl Entry {
    pub fn new(step: u64, name: &str, value: f64) -> Self {
        Entry {
            step,
            name: name.to_string(),
            value,
        }
    }
}

/// Write a full log to `path`, one JSON object per line.
pub fn write_jsonl(path: &Path, entries: &[Entry]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = Vec::with_capacity(entries.len() * 48);
    for entry in entries {
        let line = serde_json::to_string(entry)
            .map_err(|e| Error::Format(format!("log entry encode: {e}")))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Read a log written by [`write_jsonl`].
pub fn read_jsonl(path: &Path) -> Result<Vec<Entry>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: Entry = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Extract one named series as `(step, value)` pairs in log order.
pub fn series(entries: &[Entry], name: &str) -> Vec<(u64, f64)> {
    entries
        .iter()
        .filter(|e| e.name == name)
        .map(|e| (e.step, e.value))
        .collect()
}

/// Trailing moving average over a step window: element `i` of the result
/// averages every sample whose step lies in `(step_i - window, step_i]`.
pub fn moving_average_by_step(points: &[(u64, f64)], window: u64) -> Vec<(u64, f64)> {
    assert!(window > 0, "moving average window must be positive");
    let mut out = Vec::with_capacity(points.len());
    for (i, &(step, _)) in points.iter().enumerate() {
        let lo = step.saturating_sub(window - 1);
        let mut sum = 0.0;
        let mut n = 0usize;
        for &(s, v) in &points[..=i] {
            if s >= lo {
                sum += v;
                n += 1;
            }
        }
        out.push((step, sum / n as f64));
    }
    out
}

/// Average several series that share the same step grid (pointwise mean).
pub fn mean_series(series: &[Vec<(u64, f64)>]) -> Result<Vec<(u64, f64)>> {
    let first = series
        .first()
        .ok_or_else(|| Error::argument("mean_series: no series given"))?;
    for s in series {
        if s.len() != first.len() || s.iter().zip(first).any(|(a, b)| a.0 != b.0) {
            return Err(Error::argument(
                "mean_series: step grids differ across series",
            ));
        }
    }
    Ok(first
        .iter()
        .enumerate()
        .map(|(i, &(step, _))| {
            let sum: f64 = series.iter().map(|s| s[i].1).sum();
            (step, sum / series.len() as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let entries = vec![
            Entry::new(0, "loss", 1.5),
            Entry::new(0, "cosine", 0.1),
            Entry::new(10, "loss", 0.75),
        ];
        write_jsonl(&path, &entries).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), entries);
        assert_eq!(series(&entries, "loss"), vec![(0, 1.5), (10, 0.75)]);
    }

    #[test]
    fn moving_average_windows_by_step_distance() {
        let pts = vec![(100, 1.0), (200, 2.0), (300, 3.0), (400, 4.0)];
        let ma = moving_average_by_step(&pts, 200);
        // Window 200 keeps the current and previous sample (steps 100 apart).
        assert_eq!(ma[0], (100, 1.0));
        assert_eq!(ma[1], (200, 1.5));
        assert_eq!(ma[2], (300, 2.5));
        assert_eq!(ma[3], (400, 3.5));
    }

    #[test]
    fn mean_series_requires_matching_grids() {
        let a = vec![(0, 1.0), (10, 3.0)];
        let b = vec![(0, 3.0), (10, 5.0)];
        let m = mean_series(&[a.clone(), b]).unwrap();
        assert_eq!(m, vec![(0, 2.0), (10, 4.0)]);
        let c = vec![(0, 3.0), (20, 5.0)];
        assert!(mean_series(&[a, c]).is_err());
    }
}
