//! Leave-one-out ranking metrics and interest-spread diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataio::{BehaviorGraph, Dataset};
use crate::error::{CkmlError, Result};
use crate::model::Embeddings;
use crate::numerics::Matrix;

/// 1-based rank of `scores[positive]`; ties count against the positive.
pub fn rank_positive(scores: &[f64], positive: usize) -> Result<usize> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(CkmlError::Numeric(format!("non-finite score for candidate {i}")));
    }
    let p = scores[positive];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > p || (s == p && i != positive))
        .count();
    Ok(1 + ahead)
}

pub fn hr_ndcg_at_n(rank: usize, n: usize) -> (f64, f64) {
    if rank <= n {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMetrics {
    pub behavior: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub mean: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterestDistance {
    pub per_item: Vec<f64>,
    pub summary: DistanceSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub behaviors: Vec<BehaviorMetrics>,
    pub interest_distance: Option<DistanceSummary>,
}

impl MetricsReport {
    pub fn for_behavior(&self, behavior: usize) -> Option<&BehaviorMetrics> {
        self.behaviors.iter().find(|m| m.behavior == behavior)
    }

    /// JSON-lines records for this evaluation.
    pub fn to_jsonl(&self, epoch: usize) -> Vec<String> {
        let mut out: Vec<String> = self
            .behaviors
            .iter()
            .map(|m| {
                json!({"epoch": epoch, "behavior": m.behavior, "hr": m.hr, "ndcg": m.ndcg, "users": m.users})
                    .to_string()
            })
            .collect();
        if let Some(d) = &self.interest_distance {
            out.push(
                json!({"metric": "interest_distance", "mean": d.mean, "p10": d.p10, "p50": d.p50, "p90": d.p90})
                    .to_string(),
            );
        }
        out
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CkmlError::Config(format!("thread pool: {e}")))
}

/// Ranks each held-out target positive among its negatives. With
/// `all_behaviors`, every behavior's representations rank the same
/// candidates; otherwise only the target behavior is reported.
pub fn evaluate(
    emb: &Embeddings,
    dataset: &Dataset,
    n: usize,
    all_behaviors: bool,
    workers: usize,
) -> Result<MetricsReport> {
    if n == 0 {
        return Err(CkmlError::Config("N must be at least 1".into()));
    }
    if dataset.eval_negatives.is_empty() && !dataset.test_positive.is_empty() {
        return Err(CkmlError::data("dataset has no evaluation negatives"));
    }
    let users: Vec<(usize, usize, &[usize])> = dataset
        .test_positive
        .iter()
        .map(|(&u, pos)| {
            dataset
                .eval_negatives
                .get(&u)
                .map(|negs| (u, pos.item, negs.as_slice()))
                .ok_or_else(|| CkmlError::data(format!("missing evaluation negatives for user {u}")))
        })
        .collect::<Result<_>>()?;
    let behaviors: Vec<usize> =
        if all_behaviors { (0..dataset.dims.behaviors).collect() } else { vec![dataset.target_behavior] };

    let pool = pool(workers)?;
    let mut out = Vec::with_capacity(behaviors.len());
    for &k in &behaviors {
        let per_user: Vec<Result<(f64, f64)>> = pool.install(|| {
            users
                .par_iter()
                .map(|&(u, pos, negs)| {
                    let scores: Vec<f64> =
                        std::iter::once(pos).chain(negs.iter().copied()).map(|i| emb.score(k, u, i)).collect();
                    rank_positive(&scores, 0).map(|r| hr_ndcg_at_n(r, n))
                })
                .collect()
        });
        let (mut hr, mut ndcg) = (0.0, 0.0);
        for r in per_user {
            let (h, g) = r?;
            hr += h;
            ndcg += g;
        }
        let count = users.len();
        let denom = count.max(1) as f64;
        out.push(BehaviorMetrics { behavior: k, hr: hr / denom, ndcg: ndcg / denom, users: count });
    }
    Ok(MetricsReport { n, behaviors: out, interest_distance: None })
}

/// Fraction of training edges (u, p) of `graph` whose item ranks within the
/// top `n` among p and every item u has not interacted with.
pub fn training_hit_rate(emb: &Embeddings, graph: &BehaviorGraph, n: usize, workers: usize) -> Result<f64> {
    let n_items = graph.n_items();
    let k = graph.behavior;
    let pool = pool(workers)?;
    let users: Vec<usize> = (0..graph.n_users()).filter(|&u| !graph.items_of(u).is_empty()).collect();
    let per_user: Vec<Result<(usize, usize)>> = pool.install(|| {
        users
            .par_iter()
            .map(|&u| {
                let positives = graph.items_of(u);
                let scores: Vec<f64> = (0..n_items).map(|i| emb.score(k, u, i)).collect();
                if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
                    return Err(CkmlError::Numeric(format!("non-finite score for user {u}, item {i}")));
                }
                let negatives: Vec<f64> =
                    (0..n_items).filter(|i| positives.binary_search(i).is_err()).map(|i| scores[i]).collect();
                let hits = positives
                    .iter()
                    .filter(|&&p| negatives.iter().filter(|&&s| s >= scores[p]).count() < n)
                    .count();
                Ok((hits, positives.len()))
            })
            .collect()
    });
    let (mut hits, mut total) = (0, 0);
    for r in per_user {
        let (h, t) = r?;
        hits += h;
        total += t;
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

/// Per row of `stacks` (N*·width columns): mean Euclidean distance over all
/// unordered pairs of its interest vectors.
pub fn interest_center_distance(stacks: &Matrix, width: usize) -> Result<InterestDistance> {
    if width == 0 || stacks.cols() % width != 0 {
        return Err(CkmlError::Shape(format!("{} columns are not a multiple of width {width}", stacks.cols())));
    }
    let n_star = stacks.cols() / width;
    if n_star < 2 {
        return Err(CkmlError::Config(format!("interest distance needs at least 2 interests, got {n_star}")));
    }
    if stacks.rows() == 0 {
        return Err(CkmlError::data("no rows to summarize"));
    }
    let pairs = (n_star * (n_star - 1) / 2) as f64;
    let per_item: Vec<f64> = (0..stacks.rows())
        .map(|r| {
            let row = stacks.row(r);
            let mut total = 0.0;
            for a in 0..n_star {
                for b in a + 1..n_star {
                    let sq: f64 = (0..width)
                        .map(|j| {
                            let d = row[a * width + j] - row[b * width + j];
                            d * d
                        })
                        .sum();
                    total += sq.sqrt();
                }
            }
            total / pairs
        })
        .collect();
    let mut sorted = per_item.clone();
    sorted.sort_by(f64::total_cmp);
    let summary = DistanceSummary {
        mean: per_item.iter().sum::<f64>() / per_item.len() as f64,
        p10: percentile(&sorted, 0.1),
        p50: percentile(&sorted, 0.5),
        p90: percentile(&sorted, 0.9),
    };
    Ok(InterestDistance { per_item, summary })
}
