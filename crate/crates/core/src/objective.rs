//! Layer aggregation, interaction and relation scoring, and the joint loss.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::config::InterestLayout;
use crate::numerics::softplus;
use crate::numerics::tape::{Tape, Var};

/// Sum of the per-layer (specific ‖ correlated shared) outputs.
pub fn aggregate_final(tape: &mut Tape, layer_outputs: &[Var]) -> Var {
    assert!(!layer_outputs.is_empty(), "at least one propagation layer");
    tape.sum_all(layer_outputs)
}

/// Max over interests of the interest-wise inner products. Both slices are
/// N*·d* stacks; `interests` limits the max to a contiguous interest range.
pub fn score_interaction(user: &[f64], item: &[f64], width: usize, interests: std::ops::Range<usize>) -> f64 {
    interests
        .map(|s| {
            let span = s * width..(s + 1) * width;
            user[span.clone()].iter().zip(&item[span]).map(|(a, b)| a * b).sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Batched scores: row b is the score of (users[b], items[b]).
pub fn score_batch(
    tape: &mut Tape,
    user_final: Var,
    item_final: Var,
    users: Rc<[usize]>,
    items: Rc<[usize]>,
    layout: &InterestLayout,
    interests: std::ops::Range<usize>,
) -> Var {
    let b = users.len();
    let hu = tape.gather(user_final, users);
    let hi = tape.gather(item_final, items);
    let prod = tape.mul(hu, hi);
    let prod = tape.reshape(prod, b * layout.total(), layout.width);
    let dots = tape.row_sum(prod);
    let dots = tape.reshape(dots, b, layout.total());
    let dots = if interests.len() == layout.total() {
        dots
    } else {
        tape.slice_cols(dots, interests.start, interests.len())
    };
    tape.row_max(dots)
}

#[inline]
pub fn margin_bpr_loss(pos: f64, neg: f64) -> f64 {
    (1.0 - pos + neg).max(0.0)
}

#[inline]
pub fn relation_score(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// −ln σ(pos − neg) = softplus(neg − pos).
#[inline]
pub fn relation_bpr_loss(pos: f64, neg: f64) -> f64 {
    softplus(neg - pos)
}

/// Σ max(0, 1 − pos + neg) over a batch of n×1 scores.
pub fn margin_bpr_batch(tape: &mut Tape, pos: Var, neg: Var) -> Var {
    let diff = tape.sub(neg, pos);
    let shifted = tape.add_scalar(diff, 1.0);
    let hinge = tape.relu(shifted);
    tape.sum(hinge)
}

pub fn relation_bpr_batch(tape: &mut Tape, pos: Var, neg: Var) -> Var {
    let diff = tape.sub(neg, pos);
    let sp = tape.softplus(diff);
    tape.sum(sp)
}

/// Relation-reconstruction scores of (a, b) pairs from per-relation item
/// representations (n×1).
pub fn relation_score_batch(tape: &mut Tape, reps: Var, a: Rc<[usize]>, b: Rc<[usize]>) -> Var {
    let ya = tape.gather(reps, a);
    let yb = tape.gather(reps, b);
    let prod = tape.mul(ya, yb);
    tape.row_sum(prod)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub behavior: Vec<f64>,
    pub relation: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Unweighted margin loss per behavior.
    pub ranking: Vec<f64>,
    /// Unweighted relation-reconstruction loss summed over relations.
    pub relation: f64,
    /// ‖Θ‖²_F over the trainable parameters.
    pub regularization: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_ranking(&self, weights: &LossWeights) -> f64 {
        self.ranking.iter().zip(&weights.behavior).map(|(l, a)| a * l).sum()
    }

    /// Accumulates another batch's components (used for per-epoch totals).
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        if self.ranking.len() < other.ranking.len() {
            self.ranking.resize(other.ranking.len(), 0.0);
        }
        for (a, b) in self.ranking.iter_mut().zip(&other.ranking) {
            *a += b;
        }
        self.relation += other.relation;
        self.regularization += other.regularization;
        self.total += other.total;
    }
}

/// Σ_k α^k·L_k + β·Σ_r L_r + λ·‖Θ‖². `ranking[k]` / `relation[r]` are the
/// batch loss variables (absent when the batch is empty), `params` the
/// trainable arrays entering the penalty.
pub fn total_loss(
    tape: &mut Tape,
    ranking: &[Option<Var>],
    relation: &[Option<Var>],
    params: &[Var],
    weights: &LossWeights,
) -> (Var, LossBreakdown) {
    let mut terms = Vec::new();
    let mut breakdown = LossBreakdown { ranking: vec![0.0; ranking.len()], ..Default::default() };
    for (k, l) in ranking.iter().enumerate() {
        if let Some(v) = *l {
            breakdown.ranking[k] = tape.scalar(v);
            let alpha = weights.behavior.get(k).copied().unwrap_or(0.0);
            if alpha != 0.0 {
                terms.push(tape.scale(v, alpha));
            }
        }
    }
    let rel: Vec<Var> = relation.iter().flatten().copied().collect();
    if !rel.is_empty() {
        let s = tape.sum_all(&rel);
        breakdown.relation = tape.scalar(s);
        if weights.relation != 0.0 {
            terms.push(tape.scale(s, weights.relation));
        }
    }
    if !params.is_empty() {
        let squares: Vec<Var> = params.iter().map(|&p| tape.sum_squares(p)).collect();
        let s = tape.sum_all(&squares);
        breakdown.regularization = tape.scalar(s);
        if weights.l2 != 0.0 {
            terms.push(tape.scale(s, weights.l2));
        }
    }
    let total = if terms.is_empty() {
        tape.leaf(crate::numerics::Matrix::zeros(1, 1))
    } else {
        tape.sum_all(&terms)
    };
    breakdown.total = tape.scalar(total);
    (total, breakdown)
}
