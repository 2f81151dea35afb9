//! Line-delimited JSON metrics and fixed-size training windows.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;

/// Running sums for the current window. Serializable so a resumed run
/// continues the window it was interrupted in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowAccumulator {
    pub size: u64,
    pub start: u64,
    pub count: u64,
    pub loss_sum: f64,
    pub grad_norm_sum: f64,
    pub extra_sums: BTreeMap<String, f64>,
}

/// One closed window: means over exactly `size` consecutive steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub kind: String,
    pub run: String,
    /// Number of steps completed when the window closed.
    pub step: u64,
    pub window_start: u64,
    pub window_steps: u64,
    pub window_loss: f64,
    pub window_grad_norm: f64,
    pub lr: f64,
    #[serde(flatten)]
    pub extra: BTreeMap<String, f64>,
}

impl WindowAccumulator {
    pub fn new(size: u64) -> Self {
        assert!(size > 0);
        Self { size, start: 0, count: 0, loss_sum: 0.0, grad_norm_sum: 0.0, extra_sums: BTreeMap::new() }
    }

    /// Adds step `step`'s values; returns the record when this step closes
    /// the window.
    pub fn push(
        &mut self,
        run: &str,
        step: u64,
        loss: f64,
        grad_norm: f64,
        lr: f64,
        extra: &[(&str, f64)],
    ) -> Option<WindowRecord> {
        if self.count == 0 {
            self.start = step;
        }
        self.count += 1;
        self.loss_sum += loss;
        self.grad_norm_sum += grad_norm;
        for (k, v) in extra {
            *self.extra_sums.entry((*k).to_string()).or_insert(0.0) += v;
        }
        if self.count < self.size {
            return None;
        }
        let n = self.count as f64;
        let rec = WindowRecord {
            kind: "train".into(),
            run: run.into(),
            step: step + 1,
            window_start: self.start,
            window_steps: self.count,
            window_loss: self.loss_sum / n,
            window_grad_norm: self.grad_norm_sum / n,
            lr,
            extra: self.extra_sums.iter().map(|(k, v)| (k.clone(), v / n)).collect(),
        };
        *self = Self::new(self.size);
        Some(rec)
    }
}

/// Ordered collection of JSON records, one per line when written.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<Value>,
}

impl MetricsLog {
    pub fn push<S: Serialize>(&mut self, record: &S) {
        self.records.push(serde_json::to_value(record).expect("record serializes"));
    }

    pub fn windows(&self) -> Vec<WindowRecord> {
        self.records
            .iter()
            .filter(|r| r.get("kind").and_then(Value::as_str) == Some("train"))
            .filter_map(|r| serde_json::from_value(r.clone()).ok())
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("value serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn extend(&mut self, other: &MetricsLog) {
        self.records.extend(other.records.iter().cloned());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_are_complete_and_disjoint() {
        let mut acc = WindowAccumulator::new(50);
        let mut recs = Vec::new();
        for s in 0..173u64 {
            if let Some(r) = acc.push("t", s, s as f64, 1.0, 0.1, &[("x", 2.0)]) {
                recs.push(r);
            }
        }
        assert_eq!(recs.len(), 173 / 50);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.window_start, 50 * i as u64);
            assert_eq!(r.window_steps, 50);
            assert_eq!(r.step, 50 * (i as u64 + 1));
            assert_eq!(r.window_loss, r.window_start as f64 + 24.5);
            assert_eq!(r.extra["x"], 2.0);
        }
        assert_eq!(acc.count, 23);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut acc = WindowAccumulator::new(2);
        let mut log = MetricsLog::default();
        for s in 0..4 {
            if let Some(r) = acc.push("run", s, 0.5, 0.25, 1e-4, &[]) {
                log.push(&r);
            }
        }
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        let first: WindowRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.window_loss, 0.5);
        assert_eq!(log.windows().len(), 2);
    }
}
