//! Append-only training metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::error::{AfmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub phase: String,
    /// Step or epoch, monotone within a phase.
    pub step: u64,
    pub values: BTreeMap<String, f64>,
    /// Milliseconds since the log was created.
    pub wall_clock_ms: u64,
}

/// Ordered metric records. Steps never decrease within a phase.
#[derive(Debug, Clone)]
pub struct MetricsLog {
    pub run_id: String,
    records: Vec<MetricsRecord>,
    last_step: BTreeMap<String, u64>,
    start: Instant,
}

impl MetricsLog {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            records: Vec::new(),
            last_step: BTreeMap::new(),
            start: Instant::now(),
        }
    }

    pub fn push(&mut self, phase: &str, step: u64, values: &[(&str, f64)]) -> Result<()> {
        if let Some(&prev) = self.last_step.get(phase) {
            if step < prev {
                return Err(AfmError::State(format!(
                    "metrics for phase `{phase}` went back from step {prev} to {step}"
                )));
            }
        }
        self.last_step.insert(phase.to_string(), step);
        self.records.push(MetricsRecord {
            phase: phase.to_string(),
            step,
            values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            wall_clock_ms: self.start.elapsed().as_millis() as u64,
        });
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn phase_records<'a>(&'a self, phase: &'a str) -> impl Iterator<Item = &'a MetricsRecord> + 'a {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    /// Every metric name used by any record, sorted.
    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.records.iter().flat_map(|r| r.values.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    }
}
