//! Per-epoch metrics rows, the versioned CSV schema and pseudo-label
//! precision/recall by voting threshold.

use std::fmt::Write as _;

use semppl_core::plqueue::VoteRecord;

use crate::error::{HarnessError, Result};

pub const METRICS_VERSION_LINE: &str = "# semppl-metrics v1";
/// Thresholds 0..=16 on the winning vote count.
pub const THRESHOLDS: usize = 17;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelReport {
    pub total: usize,
    pub correct: usize,
    pub precision: [f64; THRESHOLDS],
    pub recall: [f64; THRESHOLDS],
    /// Set where no record reached the threshold; precision is then 1.
    pub empty: [bool; THRESHOLDS],
}

impl PseudoLabelReport {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Tallies `(winning count, correct)` pairs. Recall at `t` is the number of
/// correct records with count ≥ `t` over all records.
pub fn report_from_counts(pairs: impl IntoIterator<Item = (usize, bool)>) -> PseudoLabelReport {
    let mut selected = [0usize; THRESHOLDS];
    let mut hits = [0usize; THRESHOLDS];
    let (mut total, mut correct) = (0, 0);
    for (count, ok) in pairs {
        total += 1;
        correct += usize::from(ok);
        for t in 0..THRESHOLDS.min(count + 1) {
            selected[t] += 1;
            hits[t] += usize::from(ok);
        }
    }
    let mut precision = [1.0; THRESHOLDS];
    let mut recall = [0.0; THRESHOLDS];
    let mut empty = [false; THRESHOLDS];
    for t in 0..THRESHOLDS {
        if selected[t] == 0 {
            empty[t] = true;
        } else {
            precision[t] = hits[t] as f64 / selected[t] as f64;
        }
        if total > 0 {
            recall[t] = hits[t] as f64 / total as f64;
        }
    }
    PseudoLabelReport {
        total,
        correct,
        precision,
        recall,
        empty,
    }
}

/// Precision and recall of vote winners against `truth[datum]`.
pub fn pseudo_label_report<S>(
    records: &[VoteRecord<S>],
    truth: impl Fn(usize) -> usize,
) -> PseudoLabelReport {
    report_from_counts(records.iter().map(|r| (r.count, r.label == truth(r.datum))))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_augm: f64,
    pub loss_sempos: f64,
    pub inv_augm: f64,
    pub inv_sempos: f64,
    pub pl_accuracy: f64,
    pub precision: [f64; THRESHOLDS],
    pub recall: [f64; THRESHOLDS],
    pub fallbacks: usize,
    pub probe_linear: Option<f64>,
    pub probe_knn: Option<f64>,
}

pub fn header() -> String {
    let mut cols: Vec<String> = [
        "epoch",
        "lr",
        "loss_total",
        "loss_augm",
        "loss_sempos",
        "inv_augm",
        "inv_sempos",
        "pl_accuracy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((0..THRESHOLDS).map(|t| format!("precision_t{t}")));
    cols.extend((0..THRESHOLDS).map(|t| format!("recall_t{t}")));
    cols.extend(
        ["fallbacks", "probe_linear", "probe_knn"]
            .iter()
            .map(|s| s.to_string()),
    );
    cols.join(",")
}

// `{:?}` on f64 prints the shortest round-tripping form.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            num(self.lr),
            num(self.loss_total),
            num(self.loss_augm),
            num(self.loss_sempos),
            num(self.inv_augm),
            num(self.inv_sempos),
            num(self.pl_accuracy)
        );
        for v in self.precision.iter().chain(&self.recall) {
            let _ = write!(s, ",{}", num(*v));
        }
        let _ = write!(
            s,
            ",{},{},{}",
            self.fallbacks,
            opt(self.probe_linear),
            opt(self.probe_knn)
        );
        s
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        let expected = 8 + 2 * THRESHOLDS + 3;
        if fields.len() != expected {
            return Err(HarnessError::Metrics(format!(
                "expected {expected} fields, got {}",
                fields.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| {
                HarnessError::Metrics(format!("field {} is not a number: {:?}", i + 1, fields[i]))
            })
        };
        let o = |i: usize| -> Result<Option<f64>> {
            if fields[i].is_empty() {
                Ok(None)
            } else {
                f(i).map(Some)
            }
        };
        let mut precision = [0.0; THRESHOLDS];
        let mut recall = [0.0; THRESHOLDS];
        for t in 0..THRESHOLDS {
            precision[t] = f(8 + t)?;
            recall[t] = f(8 + THRESHOLDS + t)?;
        }
        let base = 8 + 2 * THRESHOLDS;
        Ok(Self {
            epoch: f(0)? as usize,
            lr: f(1)?,
            loss_total: f(2)?,
            loss_augm: f(3)?,
            loss_sempos: f(4)?,
            inv_augm: f(5)?,
            inv_sempos: f(6)?,
            pl_accuracy: f(7)?,
            precision,
            recall,
            fallbacks: f(base)? as usize,
            probe_linear: o(base + 1)?,
            probe_knn: o(base + 2)?,
        })
    }
}

pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_VERSION_LINE}\n{}\n", header());
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_VERSION_LINE) {
        return Err(HarnessError::Metrics(
            "missing or unsupported version line".into(),
        ));
    }
    if lines.next() != Some(header().as_str()) {
        return Err(HarnessError::Metrics("unexpected column header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(MetricsRow::from_csv)
        .collect()
}
