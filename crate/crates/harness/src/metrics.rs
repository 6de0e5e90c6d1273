//! JSONL metrics. Wall-clock times go to a separate timing file so the
//! metrics stream itself is reproducible byte for byte.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{ensure, Result};
use draft_lab_core::finetune::MetricsRecord;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reward_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reward_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl_mean: Option<f64>,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    pub lr: f64,
}

impl From<&MetricsRecord> for MetricsLine {
    fn from(m: &MetricsRecord) -> Self {
        MetricsLine {
            step: m.step,
            reward_mean: m.reward_mean,
            reward_std: m.reward_std,
            kl_mean: m.kl_mean,
            grad_norm: m.grad_norm,
            loss: m.loss,
            lr: m.lr,
        }
    }
}

#[derive(Serialize)]
struct TimingLine {
    step: u64,
    wall_ms: f64,
}

pub struct MetricsWriter {
    path: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates `<dir>/<stem>.jsonl` and `<dir>/<stem>.timing.jsonl`.
    pub fn create(dir: &Path, stem: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{stem}.jsonl"));
        let metrics = BufWriter::new(File::create(&path)?);
        let timing = BufWriter::new(File::create(dir.join(format!("{stem}.timing.jsonl")))?);
        Ok(MetricsWriter { path, metrics, timing })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, m: &MetricsRecord) -> Result<()> {
        let line = MetricsLine::from(m);
        let finite = [Some(line.grad_norm), Some(line.lr), line.reward_mean, line.reward_std, line.loss, line.kl_mean]
            .into_iter()
            .flatten()
            .all(f64::is_finite);
        ensure!(finite, "non-finite metrics at step {}", m.step);
        serde_json::to_writer(&mut self.metrics, &line)?;
        self.metrics.write_all(b"\n")?;
        serde_json::to_writer(
            &mut self.timing,
            &TimingLine {
                step: m.step,
                wall_ms: m.wall_ms,
            },
        )?;
        self.timing.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, wall: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            reward_mean: Some(-1.5),
            reward_std: Some(0.25),
            kl_mean: None,
            grad_norm: 3.0,
            loss: None,
            lr: 4e-4,
            wall_ms: wall,
        }
    }

    #[test]
    fn wall_clock_stays_out_of_the_metrics_stream() {
        let dir = tempfile::tempdir().unwrap();
        for (sub, wall) in [("a", 1.0), ("b", 99.0)] {
            let mut w = MetricsWriter::create(&dir.path().join(sub), "m").unwrap();
            w.write(&rec(1, wall)).unwrap();
            w.write(&rec(2, wall)).unwrap();
            w.finish().unwrap();
        }
        let a = fs::read(dir.path().join("a/m.jsonl")).unwrap();
        let b = fs::read(dir.path().join("b/m.jsonl")).unwrap();
        assert_eq!(a, b);
        let back = read_metrics(&dir.path().join("a/m.jsonl")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], MetricsLine::from(&rec(2, 0.0)));
    }

    #[test]
    fn non_finite_records_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path(), "m").unwrap();
        let mut r = rec(1, 0.0);
        r.grad_norm = f64::INFINITY;
        assert!(w.write(&r).is_err());
    }
}
