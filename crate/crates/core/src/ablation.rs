//! Train every model variant under one seed and compare test NDCG.

use std::fmt::Write;

use crate::dataset::PreparedData;
use crate::error::Result;
use crate::evaluator::{evaluate, EvalReport};
use crate::trainer::{train, Ablation, TrainConfig};

pub const TABLE_METRICS: [&str; 2] = ["ndcg@5", "ndcg@10"];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Ablation,
    pub best_epoch: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub dataset: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn value(&self, variant: Ablation, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .map(|r| r.report.metric(metric))
    }

    /// Every reported metric is finite and inside `[0, 1]`.
    pub fn is_well_formed(&self) -> bool {
        self.rows
            .iter()
            .flat_map(|r| r.report.metrics.values())
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Fixed-width text table: one row per variant, NDCG@5 and NDCG@10 columns.
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "dataset: {}", self.dataset).expect("string write");
        writeln!(out, "{:<8} {:>9} {:>9}", "variant", "NDCG@5", "NDCG@10").expect("string write");
        for r in &self.rows {
            writeln!(
                out,
                "{:<8} {:>9.4} {:>9.4}",
                r.variant.name(),
                r.report.metric(TABLE_METRICS[0]),
                r.report.metric(TABLE_METRICS[1])
            )
            .expect("string write");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,variant,ndcg@5,ndcg@10\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{}",
                self.dataset,
                r.variant.name(),
                r.report.metric(TABLE_METRICS[0]),
                r.report.metric(TABLE_METRICS[1])
            )
            .expect("string write");
        }
        out
    }
}

/// Train and test-evaluate each variant with `base` otherwise unchanged.
pub fn run_ablation(
    data: &PreparedData,
    base: &TrainConfig,
    dataset: &str,
    mut on_variant: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    for variant in Ablation::ALL {
        let config = TrainConfig {
            ablation: variant,
            ..base.clone()
        };
        let outcome = train(data, &config)?;
        let mut report = evaluate(&outcome.model, &outcome.params, &data.test, None)?;
        report.metadata.variant = variant.name().to_owned();
        report.metadata.seed = config.seed;
        report.metadata.config_hash = config.hash();
        report.metadata.dataset = dataset.to_owned();
        let row = AblationRow {
            variant,
            best_epoch: outcome.log.best_epoch,
            report,
        };
        on_variant(&row);
        rows.push(row);
    }
    Ok(AblationTable {
        dataset: dataset.to_owned(),
        rows,
    })
}
