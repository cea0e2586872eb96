//! Full-ranking Recall@N / NDCG@N, sequence-length buckets, and report
//! serialization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{ParamSet, Tape};

pub const RECALL_CUTOFFS: [usize; 3] = [1, 5, 10];
pub const NDCG_CUTOFFS: [usize; 2] = [5, 10];
pub const DEFAULT_BUCKET_EDGES: [usize; 4] = [5, 10, 20, 50];
/// Users scored per forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;

fn position(ranked: &[u32], target: u32) -> Result<Option<usize>> {
    if ranked.is_empty() {
        return Err(Error::EmptyRanking);
    }
    Ok(ranked.iter().position(|&i| i == target).map(|p| p + 1))
}

/// 1 if `target` is among the first `n` ranked items.
pub fn recall_at_n(ranked: &[u32], target: u32, n: usize) -> Result<f64> {
    Ok(match position(ranked, target)? {
        Some(r) if r <= n => 1.0,
        _ => 0.0,
    })
}

/// `1 / log2(rank + 1)` when the 1-based rank is within `n`, else 0.
pub fn ndcg_at_n(ranked: &[u32], target: u32, n: usize) -> Result<f64> {
    Ok(match position(ranked, target)? {
        Some(r) if r <= n => ndcg_from_rank(r),
        _ => 0.0,
    })
}

pub fn ndcg_from_rank(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Items `1..=len` ordered by descending score, ties by ascending index.
pub fn rank_items(scores: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (1..=scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize - 1]
            .partial_cmp(&scores[a as usize - 1])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// 1-based rank of `target` under [`rank_items`] ordering without sorting.
pub fn rank_of(scores: &[f64], target: u32) -> usize {
    let t = target as usize - 1;
    let st = scores[t];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > st || (s == st && j < t))
        .count()
}

/// Accumulates per-user ranks into mean metrics.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    sums: BTreeMap<String, f64>,
    users: usize,
}

impl MetricAccumulator {
    pub fn add_rank(&mut self, rank: usize) {
        self.users += 1;
        for n in RECALL_CUTOFFS {
            *self.sums.entry(format!("recall@{n}")).or_default() += if rank <= n { 1.0 } else { 0.0 };
        }
        for n in NDCG_CUTOFFS {
            *self.sums.entry(format!("ndcg@{n}")).or_default() += if rank <= n { ndcg_from_rank(rank) } else { 0.0 };
        }
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for n in RECALL_CUTOFFS {
            out.insert(format!("recall@{n}"), 0.0);
        }
        for n in NDCG_CUTOFFS {
            out.insert(format!("ndcg@{n}"), 0.0);
        }
        if self.users > 0 {
            for (k, v) in &self.sums {
                out.insert(k.clone(), v / self.users as f64);
            }
        }
        out
    }
}

/// Half-open length range `[lo, hi)`; `hi = None` is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl Bucket {
    pub fn contains(&self, len: usize) -> bool {
        len >= self.lo && self.hi.is_none_or(|h| len < h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("[{},{})", self.lo, h),
            None => format!("[{},inf)", self.lo),
        }
    }
}

/// `[e0,e1), …, [e_last,∞)` from ascending edges; lengths below `e0` get a
/// leading `[0,e0)` bucket.
pub fn buckets_from_edges(edges: &[usize]) -> Result<Vec<Bucket>> {
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "bucket edges must be ascending and nonempty, got {edges:?}"
        )));
    }
    let mut out = Vec::with_capacity(edges.len() + 1);
    if edges[0] > 0 {
        out.push(Bucket {
            lo: 0,
            hi: Some(edges[0]),
        });
    }
    for (i, &lo) in edges.iter().enumerate() {
        out.push(Bucket {
            lo,
            hi: edges.get(i + 1).copied(),
        });
    }
    Ok(out)
}

pub fn parse_bucket_edges(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad bucket edge `{s}`")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub range: String,
    pub bucket: Bucket,
    pub users: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub dataset: String,
    pub variant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub users: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub buckets: Vec<BucketReport>,
    pub metadata: RunMetadata,
}

impl EvalReport {
    /// Per-user ranks to a report. `lengths[i]` is the bucketing length of user `i`.
    pub fn from_ranks(ranks: &[usize], lengths: &[usize], buckets: Option<&[Bucket]>) -> Self {
        let mut all = MetricAccumulator::default();
        for &r in ranks {
            all.add_rank(r);
        }
        let mut reports = Vec::new();
        if let Some(buckets) = buckets {
            for b in buckets {
                let mut acc = MetricAccumulator::default();
                for (&r, &len) in ranks.iter().zip(lengths) {
                    if b.contains(len) {
                        acc.add_rank(r);
                    }
                }
                // an empty leading underflow bucket carries no information
                if acc.users() == 0 && b.lo == 0 {
                    continue;
                }
                reports.push(BucketReport {
                    range: b.label(),
                    bucket: *b,
                    users: acc.users(),
                    metrics: acc.metrics(),
                });
            }
        }
        Self {
            users: all.users(),
            metrics: all.metrics(),
            buckets: reports,
            metadata: RunMetadata::default(),
        }
    }

    pub fn metric(&self, name: &str) -> f64 {
        self.metrics.get(name).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> String {
        let mut cols = vec![
            "dataset".to_string(),
            "variant".into(),
            "seed".into(),
            "config_hash".into(),
            "users".into(),
        ];
        cols.extend(RECALL_CUTOFFS.iter().map(|n| format!("recall@{n}")));
        cols.extend(NDCG_CUTOFFS.iter().map(|n| format!("ndcg@{n}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let m = &self.metadata;
        let mut cols = vec![
            m.dataset.clone(),
            m.variant.clone(),
            m.seed.to_string(),
            m.config_hash.clone(),
            self.users.to_string(),
        ];
        for n in RECALL_CUTOFFS {
            cols.push(self.metric(&format!("recall@{n}")).to_string());
        }
        for n in NDCG_CUTOFFS {
            cols.push(self.metric(&format!("ndcg@{n}")).to_string());
        }
        cols.join(",")
    }
}

/// Rank of each example's target under the model, in example order.
pub fn model_ranks(model: &Model, params: &ParamSet, examples: &[Example], filter_seen: bool) -> Result<Vec<usize>> {
    let mut ranks = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, params, &batch)?;
        let logits = tape.value(fwd.logits);
        for (row, ex) in chunk.iter().enumerate() {
            let mut scores = logits.row(row).to_vec();
            if filter_seen {
                for &i in &ex.history {
                    if i != ex.target {
                        scores[i as usize - 1] = f64::NEG_INFINITY;
                    }
                }
            }
            ranks.push(rank_of(&scores, ex.target));
        }
    }
    Ok(ranks)
}

/// Evaluate on held-out examples; `buckets` adds per-length sub-reports.
pub fn evaluate(
    model: &Model,
    params: &ParamSet,
    examples: &[Example],
    buckets: Option<&[Bucket]>,
) -> Result<EvalReport> {
    let ranks = model_ranks(model, params, examples, model.config.filter_seen)?;
    let lengths: Vec<usize> = examples.iter().map(|e| e.seq_len).collect();
    Ok(EvalReport::from_ranks(&ranks, &lengths, buckets))
}
