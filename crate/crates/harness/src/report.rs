//! Experiment reports: per-run records, per-policy aggregate tables,
//! and emission as an aligned text table or a structured JSON file.

use crate::plan::ExperimentPlan;
use d2sdk_core::trainer::Policy;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One training run's outcome: target accuracy under every selection
/// policy, plus the protocol counters that prove how the target was used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Variant name, or a sweep point like "lambda=0.1".
    pub label: String,
    /// Target domain id (the held-out domain, or the mixed target's id).
    pub held_out: usize,
    pub seed: u64,
    /// Target accuracy of the final epoch's weights.
    pub last_epoch_acc: f64,
    /// Target accuracy at the best source-validation epoch.
    pub validation_best_acc: f64,
    /// Best target accuracy over all epochs (oracle; reporting only).
    pub test_best_acc: f64,
    pub best_val_epoch: usize,
    pub best_test_epoch: usize,
    /// Source-validation accuracy at the final epoch.
    pub final_val_acc: f64,
    pub target_gradient_reads: u64,
    pub target_selection_reads: u64,
    pub target_reporting_reads: u64,
}

impl RunRecord {
    pub fn policy_acc(&self, policy: Policy) -> f64 {
        match policy {
            Policy::LastEpoch => self.last_epoch_acc,
            Policy::ValidationBest => self.validation_best_acc,
            Policy::TestBest => self.test_best_acc,
        }
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl AggregateCell {
    pub fn from_values(values: &[f64]) -> AggregateCell {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        AggregateCell { mean, std, n }
    }
}

/// One table row: a label's per-held-out-domain cells plus their
/// arithmetic average, under one selection policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub policy: String,
    /// (held-out domain id, cell), ordered by domain id.
    pub cells: Vec<(usize, AggregateCell)>,
    /// Mean of the per-domain means; std is the mean of per-domain stds.
    pub average: AggregateCell,
}

/// Test-best minus last-epoch target accuracy, summarizing how much the
/// oracle policy could have gained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub label: String,
    pub mean_gap: f64,
    pub min_gap: f64,
    pub max_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub title: String,
    pub plan: ExperimentPlan,
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<AggregateRow>,
    pub gaps: Vec<GapRow>,
    pub notes: Vec<String>,
    pub wall_clock_secs: f64,
}

fn label_order(records: &[RunRecord]) -> Vec<String> {
    let mut labels = Vec::new();
    for r in records {
        if !labels.contains(&r.label) {
            labels.push(r.label.clone());
        }
    }
    labels
}

fn domain_order(records: &[RunRecord]) -> Vec<usize> {
    let mut ids: Vec<usize> = records.iter().map(|r| r.held_out).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Aggregate records into per-policy rows. Records must already be in
/// their final sorted order; label order in the table follows first
/// appearance.
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let labels = label_order(records);
    let domains = domain_order(records);
    let mut rows = Vec::new();
    for policy in Policy::ALL {
        for label in &labels {
            let mut cells = Vec::new();
            for &dom in &domains {
                let values: Vec<f64> = records
                    .iter()
                    .filter(|r| &r.label == label && r.held_out == dom)
                    .map(|r| r.policy_acc(policy))
                    .collect();
                if !values.is_empty() {
                    cells.push((dom, AggregateCell::from_values(&values)));
                }
            }
            if cells.is_empty() {
                continue;
            }
            let mean = cells.iter().map(|(_, c)| c.mean).sum::<f64>() / cells.len() as f64;
            let std = cells.iter().map(|(_, c)| c.std).sum::<f64>() / cells.len() as f64;
            let n = cells.iter().map(|(_, c)| c.n).sum();
            rows.push(AggregateRow {
                label: label.clone(),
                policy: policy.name().to_string(),
                average: AggregateCell { mean, std, n },
                cells,
            });
        }
    }
    rows
}

/// Per-label gap statistics between the oracle and last-epoch policies.
pub fn gap_rows(records: &[RunRecord]) -> Vec<GapRow> {
    label_order(records)
        .into_iter()
        .map(|label| {
            let gaps: Vec<f64> = records
                .iter()
                .filter(|r| r.label == label)
                .map(|r| r.test_best_acc - r.last_epoch_acc)
                .collect();
            GapRow {
                label,
                mean_gap: gaps.iter().sum::<f64>() / gaps.len() as f64,
                min_gap: gaps.iter().cloned().fold(f64::INFINITY, f64::min),
                max_gap: gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

impl ExperimentReport {
    /// Assemble a report: sorts records by (label, held-out, seed) and
    /// derives the aggregate tables.
    pub fn new(
        title: &str,
        plan: ExperimentPlan,
        mut records: Vec<RunRecord>,
        notes: Vec<String>,
        wall_clock_secs: f64,
    ) -> ExperimentReport {
        records.sort_by(|a, b| {
            a.label
                .cmp(&b.label)
                .then(a.held_out.cmp(&b.held_out))
                .then(a.seed.cmp(&b.seed))
        });
        let aggregates = aggregate(&records);
        let gaps = gap_rows(&records);
        ExperimentReport {
            title: title.to_string(),
            plan,
            records,
            aggregates,
            gaps,
            notes,
            wall_clock_secs,
        }
    }

    /// JSON with the wall clock zeroed: equal for any two runs of the
    /// same deterministic plan.
    pub fn canonical_json(&self) -> Result<String, ReportError> {
        let mut clone = self.clone();
        clone.wall_clock_secs = 0.0;
        Ok(serde_json::to_string(&clone)?)
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table. Accuracy means and stds are printed at full
    /// precision so the table agrees with the structured records to
    /// better than 1e-12.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "== {} ==", self.title);
        let _ = writeln!(
            out,
            "seeds: {:?}  epochs: {}  wall_clock_secs: {:.1}",
            self.plan.seeds, self.plan.optim.epochs, self.wall_clock_secs
        );
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        let domains = domain_order(&self.records);
        let label_w = self
            .aggregates
            .iter()
            .map(|r| r.label.len())
            .chain(["label".len()])
            .max()
            .unwrap_or(5)
            + 2;
        let cell_w = 38;
        for policy in Policy::ALL {
            let rows: Vec<&AggregateRow> = self
                .aggregates
                .iter()
                .filter(|r| r.policy == policy.name())
                .collect();
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(out, "\npolicy: {}", policy.name());
            let mut header = format!("{:<label_w$}", "label");
            for &d in &domains {
                let col = format!("held_out:{d}");
                let _ = write!(header, "{col:<cell_w$}");
            }
            let _ = write!(header, "Ave.");
            let _ = writeln!(out, "{header}");
            for row in rows {
                let mut line = format!("{:<label_w$}", row.label);
                for &d in &domains {
                    let cell = match row.cells.iter().find(|(dom, _)| *dom == d) {
                        Some((_, c)) => format!("{:.15}±{:.15}", c.mean, c.std),
                        None => "-".to_string(),
                    };
                    let _ = write!(line, "{cell:<cell_w$}");
                }
                let _ = write!(
                    line,
                    "{:.15}±{:.15}",
                    row.average.mean, row.average.std
                );
                let _ = writeln!(out, "{line}");
            }
        }
        if !self.gaps.is_empty() {
            let _ = writeln!(out, "\ntest-best minus last-epoch gaps");
            let _ = writeln!(
                out,
                "{:<label_w$}{:<24}{:<24}{:<24}",
                "label", "mean", "min", "max"
            );
            for g in &self.gaps {
                let _ = writeln!(
                    out,
                    "{:<label_w$}{:<24.15}{:<24.15}{:<24.15}",
                    g.label, g.mean_gap, g.min_gap, g.max_gap
                );
            }
        }
        let _ = writeln!(
            out,
            "\n# plan: {}",
            serde_json::to_string(&self.plan).unwrap_or_else(|_| "<unserializable>".into())
        );
        out
    }

    /// Write `<stem>.txt` and `<stem>.json` under `dir`.
    pub fn emit(&self, dir: &Path, stem: &str) -> Result<(), ReportError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        let mut body = self.to_json()?;
        body.push('\n');
        std::fs::write(dir.join(format!("{stem}.json")), body)?;
        Ok(())
    }
}
