use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::env::Split;

pub const METRICS_HEADER: &str = "iteration,wall_clock_s,split,phase,mean_reward,group_count,memory_changed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Attempt1,
    Attempt2,
    Deploy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub wall_clock_s: f64,
    pub split: Split,
    pub phase: Phase,
    pub mean_reward: f64,
    pub group_count: usize,
    pub memory_changed: bool,
}

/// Append-only CSV sink; the header is written on creation.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<File> {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(MetricsWriter::new(f))
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(inner: W) -> Self {
        MetricsWriter { inner: csv::WriterBuilder::new().has_headers(true).from_writer(inner) }
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<(), HarnessError> {
        self.inner.serialize(row)?;
        self.inner.flush().map_err(|e| HarnessError::Csv(e.into()))
    }

    pub fn into_inner(self) -> W {
        self.inner.into_inner().unwrap_or_else(|_| panic!("metrics writer flush failed"))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(HarnessError::Invalid(format!("{}: unexpected metrics header {:?}", path.display(), header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

/// Trailing moving average: `out[i] = mean(series[max(0, i−window+1) ..= i])`.
///
/// # Panics
///
/// When `window` is zero.
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "smoothing window must be at least 1");
    (0..series.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let slice = &series[lo..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth(&[3.0; 7], 5), vec![3.0; 7]);
        assert_eq!(*smooth(&[0.0, 0.0, 0.0, 0.0, 5.0], 5).last().unwrap(), 1.0);
        assert_eq!(smooth(&[0.42], 5), vec![0.42]);
        assert!(smooth(&[], 5).is_empty());
        assert_eq!(smooth(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn csv_header_and_round_trip() {
        let row = MetricsRow {
            iteration: 5,
            wall_clock_s: 1.5,
            split: Split::Eval,
            phase: Phase::Deploy,
            mean_reward: 0.25,
            group_count: 20,
            memory_changed: false,
        };
        let mut w = MetricsWriter::new(Vec::new());
        w.write(&row).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(text.lines().next(), Some(METRICS_HEADER));
        assert_eq!(text.lines().nth(1), Some("5,1.5,eval,deploy,0.25,20,false"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, &text).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), vec![row]);
    }
}
