//! Per-step metric records and their CSV / JSON exports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

/// Run metadata. `wall_clock_secs` is the only field allowed to differ
/// between two runs of the same config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

/// Ordered `(step, metric, value)` records. Steps never decrease and every
/// value is finite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    records: Vec<MetricRecord>,
    pub metadata: RunMetadata,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, step: u64, metric: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(LiftError::Precondition(format!(
                "metric {metric} at step {step} is not finite ({value})"
            )));
        }
        if let Some(last) = self.records.last() {
            if step < last.step {
                return Err(LiftError::Precondition(format!(
                    "metric {metric} recorded at step {step} after step {}",
                    last.step
                )));
            }
        }
        self.records.push(MetricRecord {
            step,
            metric: metric.to_string(),
            value,
        });
        Ok(())
    }

    /// Appends `other`'s records; its first step must not precede our last.
    pub fn append(&mut self, other: MetricsLog) -> Result<()> {
        for r in other.records {
            self.record(r.step, &r.metric, r.value)?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn series(&self, metric: &str) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn last(&self, metric: &str) -> Option<f64> {
        self.records.iter().rev().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn min(&self, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| r.value)
            .reduce(f64::min)
    }

    /// Writes `step,metric,value` rows. Values use Rust's shortest round-trip
    /// formatting, so identical logs give identical bytes.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "metric", "value"])?;
        for r in &self.records {
            w.write_record([r.step.to_string(), r.metric.clone(), format!("{:?}", r.value)])?;
        }
        w.flush().map_err(|e| LiftError::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<MetricsLog> {
        let mut r = csv::Reader::from_path(path)?;
        let mut log = MetricsLog::new();
        for row in r.deserialize() {
            let rec: MetricRecord = row?;
            log.record(rec.step, &rec.metric, rec.value)?;
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_backwards_steps() {
        let mut log = MetricsLog::new();
        log.record(1, "loss", 1.0).unwrap();
        assert!(log.record(2, "loss", f64::INFINITY).is_err());
        assert!(log.record(0, "loss", 1.0).is_err());
        log.record(1, "grad_norm", 0.5).unwrap();
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut log = MetricsLog::new();
        log.record(0, "val_loss", 0.1 + 0.2).unwrap();
        log.record(3, "loss", 1e-300).unwrap();
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,metric,value\n0,val_loss,0.30000000000000004\n"));
        let back = MetricsLog::read_csv(&path).unwrap();
        assert_eq!(back.records(), log.records());
    }

    #[test]
    fn series_helpers() {
        let mut log = MetricsLog::new();
        for (s, v) in [(1, 3.0), (2, 1.0), (3, 2.0)] {
            log.record(s, "x", v).unwrap();
        }
        assert_eq!(log.min("x"), Some(1.0));
        assert_eq!(log.last("x"), Some(2.0));
        assert_eq!(log.series("x").len(), 3);
        assert_eq!(log.last("y"), None);
    }
}
