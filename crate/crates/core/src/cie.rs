//! Coarse-grained interest extraction: per-relation propagation over the
//! item–item graphs, layer averaging, relation concatenation and the
//! projections into behavior-specific and shared interest blocks.

use std::rc::Rc;

use crate::config::{Aggregator, InterestLayout};
use crate::dataio::RelationGraph;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{Csr, Normalization};

/// Symmetric-degree normalized adjacency of a relation graph.
pub fn relation_adjacency(graph: &RelationGraph) -> Rc<Csr> {
    Rc::new(graph.adjacency.normalized(
        Normalization::SymmetricDegree,
        &graph.degrees,
        &graph.degrees,
    ))
}

/// Right-multiplies every `block`-wide chunk of each row by `weight`.
fn blockwise_matmul(tape: &mut Tape, x: Var, weight: Var, block: usize) -> Var {
    let (rows, cols) = tape.shape(x);
    let chunks = cols / block;
    let flat = tape.reshape(x, rows * chunks, block);
    let y = tape.matmul(flat, weight);
    tape.reshape(y, rows, cols)
}

/// One aggregation pass. `adjacency` maps `source` rows onto target rows;
/// `own` holds the targets' current rows (used by the self/residual terms).
/// Transforms act per `block`-wide chunk.
#[allow(clippy::too_many_arguments)]
pub fn aggregate(
    tape: &mut Tape,
    adjacency: &Rc<Csr>,
    source: Var,
    own: Var,
    kind: Aggregator,
    weights: &[Var],
    block: usize,
    slope: f64,
) -> Var {
    let neighbors = tape.spmm(adjacency.clone(), source);
    match kind {
        Aggregator::Light => neighbors,
        Aggregator::Gccf => {
            let s = tape.add(neighbors, own);
            blockwise_matmul(tape, s, weights[0], block)
        }
        Aggregator::Gcn => {
            let t = blockwise_matmul(tape, neighbors, weights[0], block);
            tape.leaky_relu(t, slope)
        }
        Aggregator::Ngcf => {
            let s = tape.add(neighbors, own);
            let a = blockwise_matmul(tape, s, weights[0], block);
            let p = tape.mul(neighbors, own);
            let b = blockwise_matmul(tape, p, weights[1], block);
            let t = tape.add(a, b);
            tape.leaky_relu(t, slope)
        }
    }
}

/// Layer outputs y^{r,0..=layers}; layer 0 is the item table itself.
/// `weights[l]` holds the aggregator weights of layer l+1.
pub fn propagate_relation_graph(
    tape: &mut Tape,
    items: Var,
    adjacency: &Rc<Csr>,
    layers: usize,
    kind: Aggregator,
    weights: &[Vec<Var>],
    slope: f64,
) -> Vec<Var> {
    let width = tape.shape(items).1;
    let mut out = vec![items];
    for l in 0..layers {
        let prev = out[l];
        let w = weights.get(l).map_or(&[][..], Vec::as_slice);
        out.push(aggregate(tape, adjacency, prev, prev, kind, w, width, slope));
    }
    out
}

pub fn average_layers(tape: &mut Tape, layers: &[Var]) -> Var {
    assert!(!layers.is_empty(), "need at least layer 0");
    let total = tape.sum_all(layers);
    tape.scale(total, 1.0 / layers.len() as f64)
}

/// Relation blocks concatenated in the given (relation-id) order.
pub fn concat_relations(tape: &mut Tape, reps: &[Var]) -> Var {
    tape.concat_cols(reps)
}

/// LeakyReLU(y*·W_s + b_s) for each (W_s, b_s), concatenated in order.
pub fn extract_interests(tape: &mut Tape, y_star: Var, projections: &[(Var, Var)], slope: f64) -> Var {
    let parts: Vec<Var> = projections
        .iter()
        .map(|&(w, b)| {
            let lin = tape.matmul(y_star, w);
            let lin = tape.add_row(lin, b);
            tape.leaky_relu(lin, slope)
        })
        .collect();
    tape.concat_cols(&parts)
}

/// Behavior-specific block for one behavior.
pub fn extract_specific_interests(
    tape: &mut Tape,
    y_star: Var,
    projections: &[(Var, Var)],
    slope: f64,
) -> Var {
    extract_interests(tape, y_star, projections, slope)
}

/// Shared block; the same output is attached to every behavior.
pub fn extract_shared_interests(
    tape: &mut Tape,
    y_star: Var,
    projections: &[(Var, Var)],
    slope: f64,
) -> Var {
    extract_interests(tape, y_star, projections, slope)
}

/// Specific block first, shared block second.
pub fn assemble_interest_embedding(tape: &mut Tape, specific: Option<Var>, shared: Option<Var>) -> Var {
    match (specific, shared) {
        (Some(s), Some(h)) => tape.concat_cols(&[s, h]),
        (Some(s), None) => s,
        (None, Some(h)) => h,
        (None, None) => panic!("interest embedding needs at least one block"),
    }
}

pub fn split_interest_embedding(
    tape: &mut Tape,
    stack: Var,
    layout: &InterestLayout,
) -> (Option<Var>, Option<Var>) {
    let spe = (layout.specific > 0).then(|| tape.slice_cols(stack, 0, layout.specific_cols()));
    let sha = (layout.shared > 0)
        .then(|| tape.slice_cols(stack, layout.specific_cols(), layout.shared_cols()));
    (spe, sha)
}

/// View of node stacks as one row per (node, interest).
pub fn interest_rows(tape: &mut Tape, stack: Var, layout: &InterestLayout) -> Var {
    let rows = tape.shape(stack).0;
    tape.reshape(stack, rows * layout.total(), layout.width)
}
