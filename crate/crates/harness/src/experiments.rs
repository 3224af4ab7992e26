//! Paired oracle runs and ablation grids.

use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};
use crate::trainer::Trainer;

/// Final numbers of one finished run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub epochs: usize,
    pub probe_linear: Option<f64>,
    pub probe_knn: Option<f64>,
    /// Pseudo-label accuracy of the last epoch.
    pub pl_accuracy: f64,
    /// Share of anchors, over the whole run, whose semantic-positive label
    /// was their true label.
    pub semantic_label_accuracy: f64,
    pub view_digest: u64,
}

/// Trains `config` to completion with `f64` arithmetic.
pub fn run_to_end(config: &TrainConfig) -> Result<RunOutcome> {
    let mut trainer = Trainer::<f64>::new(config.clone())?;
    trainer.run()?;
    Ok(outcome(&trainer))
}

pub fn outcome(trainer: &Trainer<f64>) -> RunOutcome {
    let last = trainer.metrics().last();
    let (correct, total) = trainer
        .diagnostics()
        .iter()
        .fold((0u64, 0u64), |(c, t), d| {
            (c + d.semantic_label_correct, t + d.semantic_label_total)
        });
    RunOutcome {
        seed: trainer.config().train.seed,
        epochs: trainer.epoch(),
        probe_linear: last.and_then(|r| r.probe_linear),
        probe_knn: last.and_then(|r| r.probe_knn),
        pl_accuracy: last.map_or(0.0, |r| r.pl_accuracy),
        semantic_label_accuracy: if total == 0 {
            1.0
        } else {
            correct as f64 / total as f64
        },
        view_digest: trainer.view_digest(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub semppl: RunOutcome,
    pub oracle: RunOutcome,
    /// Both runs hashed the same view stream.
    pub views_match: bool,
}

/// Two runs with the same seeds, differing only in `oracle_mode`.
pub fn run_oracle(config: &TrainConfig) -> Result<OracleReport> {
    let mut plain = config.clone();
    plain.train.oracle_mode = false;
    let mut oracle = config.clone();
    oracle.train.oracle_mode = true;
    let semppl = run_to_end(&plain)?;
    let oracle = run_to_end(&oracle)?;
    Ok(OracleReport {
        views_match: semppl.view_digest == oracle.view_digest,
        semppl,
        oracle,
    })
}

/// A dimension an ablation grid can sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKey {
    SemanticPositives,
    Epochs,
    Voting,
    Neighbors,
    QueueCapacity,
    Alpha,
}

impl GridKey {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "P" | "p" | "num_semantic_positives" => Self::SemanticPositives,
            "epochs" => Self::Epochs,
            "voting" | "voting_enabled" => Self::Voting,
            "k" | "knn_k" => Self::Neighbors,
            "C" | "c" | "queue_capacity" => Self::QueueCapacity,
            "alpha" => Self::Alpha,
            other => {
                return Err(HarnessError::Grid(format!(
                    "unknown grid dimension {other:?} (expected P, epochs, voting, k, C or alpha)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SemanticPositives => "P",
            Self::Epochs => "epochs",
            Self::Voting => "voting",
            Self::Neighbors => "k",
            Self::QueueCapacity => "C",
            Self::Alpha => "alpha",
        }
    }

    fn config_key(self) -> &'static str {
        match self {
            Self::SemanticPositives => "loss.num_semantic_positives",
            Self::Epochs => "train.epochs",
            Self::Voting => "train.voting_enabled",
            Self::Neighbors => "train.knn_k",
            Self::QueueCapacity => "train.queue_capacity",
            Self::Alpha => "loss.alpha",
        }
    }

    fn normalize(self, raw: &str) -> Result<String> {
        let bad = || HarnessError::Grid(format!("{}: cannot parse value {raw:?}", self.name()));
        Ok(match self {
            Self::Voting => match raw {
                "on" | "true" | "1" => "true".into(),
                "off" | "false" | "0" => "false".into(),
                _ => return Err(bad()),
            },
            Self::Alpha => {
                let v: f64 = raw.parse().map_err(|_| bad())?;
                format!("{v:?}")
            }
            _ => raw.parse::<usize>().map_err(|_| bad())?.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub dims: Vec<(GridKey, Vec<String>)>,
}

impl GridSpec {
    /// Parses `name=v1,v2,...` items, one per dimension.
    pub fn parse<I: AsRef<str>>(items: &[I]) -> Result<Self> {
        if items.is_empty() {
            return Err(HarnessError::Grid("the grid has no dimensions".into()));
        }
        let mut dims: Vec<(GridKey, Vec<String>)> = Vec::new();
        for item in items {
            let item = item.as_ref();
            let (name, values) = item.split_once('=').ok_or_else(|| {
                HarnessError::Grid(format!("expected name=v1,v2,... but got {item:?}"))
            })?;
            let key = GridKey::parse(name.trim())?;
            if dims.iter().any(|(k, _)| *k == key) {
                return Err(HarnessError::Grid(format!(
                    "dimension {} given twice",
                    key.name()
                )));
            }
            let values: Vec<String> = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(|v| key.normalize(v))
                .collect::<Result<_>>()?;
            if values.is_empty() {
                return Err(HarnessError::Grid(format!(
                    "dimension {} has no values",
                    key.name()
                )));
            }
            dims.push((key, values));
        }
        Ok(Self { dims })
    }

    /// Every cell of the cartesian product, first dimension slowest.
    pub fn cells(&self) -> Vec<Vec<(GridKey, String)>> {
        let mut cells = vec![Vec::new()];
        for (key, values) in &self.dims {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut next = cell.clone();
                        next.push((*key, v.clone()));
                        next
                    })
                })
                .collect();
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: Vec<(GridKey, String)>,
    pub outcome: RunOutcome,
}

/// The configuration of one grid cell.
pub fn cell_config(base: &TrainConfig, cell: &[(GridKey, String)]) -> Result<TrainConfig> {
    let overrides: Vec<(String, String)> = cell
        .iter()
        .map(|(k, v)| (k.config_key().to_string(), v.clone()))
        .collect();
    base.with_overrides(&overrides)
}

/// Runs every cell in order with the base seed; `progress` sees each row
/// as it completes.
pub fn run_ablation(
    base: &TrainConfig,
    grid: &GridSpec,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let cells = grid.cells();
    let configs: Vec<TrainConfig> = cells
        .iter()
        .map(|c| cell_config(base, c))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, config) in cells.into_iter().zip(configs) {
        let row = AblationRow {
            cell,
            outcome: run_to_end(&config)?,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn render_ablation_csv(grid: &GridSpec, rows: &[AblationRow]) -> String {
    let mut out: String = grid
        .dims
        .iter()
        .map(|(k, _)| format!("{},", k.name()))
        .collect();
    out.push_str("seed,probe_linear,probe_knn,pl_accuracy\n");
    for row in rows {
        for (_, v) in &row.cell {
            out.push_str(v);
            out.push(',');
        }
        let o = &row.outcome;
        out.push_str(&format!(
            "{},{},{},{:?}\n",
            o.seed,
            opt(o.probe_linear),
            opt(o.probe_knn),
            o.pl_accuracy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_product_order() {
        let g = GridSpec::parse(&["k=1,2", "voting=on,off"]).unwrap();
        let cells: Vec<Vec<String>> = g
            .cells()
            .iter()
            .map(|c| c.iter().map(|(_, v)| v.clone()).collect())
            .collect();
        assert_eq!(
            cells,
            vec![
                vec!["1", "true"],
                vec!["1", "false"],
                vec!["2", "true"],
                vec!["2", "false"]
            ]
        );
    }

    #[test]
    fn empty_dimension_is_named() {
        let e = GridSpec::parse(&["alpha="]).unwrap_err();
        assert!(e.to_string().contains("alpha"), "{e}");
        assert_eq!(e.exit_code(), 2);
        assert!(GridSpec::parse::<&str>(&[]).is_err());
        assert!(GridSpec::parse(&["nope=1"]).is_err());
        assert!(GridSpec::parse(&["k=1", "k=2"]).is_err());
    }

    #[test]
    fn cells_map_to_config_keys() {
        let base = TrainConfig::default();
        let g = GridSpec::parse(&["P=1", "C=600", "alpha=0", "k=3", "voting=off", "epochs=20"])
            .unwrap();
        let c = cell_config(&base, &g.cells()[0]).unwrap();
        assert_eq!(c.loss.num_semantic_positives, 1);
        assert_eq!(c.queue_capacity(), 600);
        assert_eq!(c.loss.alpha, 0.0);
        assert_eq!(c.train.knn_k, 3);
        assert!(!c.train.voting_enabled);
        assert_eq!(c.train.epochs, 20);
    }
}
