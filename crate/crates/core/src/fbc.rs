//! Fine-grained behavioral correlation: dynamic routing of every behavior
//! edge across interests, interest-level attention across behaviors, and
//! the residual layer update.

use std::rc::Rc;

use crate::cie::aggregate;
use crate::config::{Aggregator, InterestLayout};
use crate::dataio::BehaviorGraph;
use crate::error::{CkmlError, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{Csr, Matrix, Normalization};

/// Guard for the unit-normalizations in the coefficient update.
pub const NORM_EPS: f64 = 1e-12;

/// Immutable per-behavior graph structure used during propagation.
#[derive(Debug, Clone)]
pub struct BehaviorContext {
    pub n_users: usize,
    pub n_items: usize,
    pub edge_users: Rc<[usize]>,
    pub edge_items: Rc<[usize]>,
    /// Symmetric-degree normalized user→item adjacency (M×N).
    pub user_agg: Rc<Csr>,
    /// Its transpose (N×M).
    pub item_agg: Rc<Csr>,
    /// Row-mean user→item and item→user adjacencies.
    pub user_mean: Rc<Csr>,
    pub item_mean: Rc<Csr>,
    pub user_bucket: Rc<[usize]>,
    pub item_bucket: Rc<[usize]>,
}

/// Quantile bucket of each node's latest timestamp among nodes with edges.
fn time_buckets(latest: &[Option<u64>], buckets: usize) -> Vec<usize> {
    let mut seen: Vec<u64> = latest.iter().flatten().copied().collect();
    seen.sort_unstable();
    latest
        .iter()
        .map(|t| match t {
            Some(ts) => {
                let rank = seen.partition_point(|v| v < ts);
                (rank * buckets / seen.len()).min(buckets - 1)
            }
            None => 0,
        })
        .collect()
}

impl BehaviorContext {
    pub fn new(graph: &BehaviorGraph, buckets: usize) -> Self {
        let (m, n) = (graph.n_users(), graph.n_items());
        let user_deg = graph.user_adjacency.degrees();
        let item_deg = graph.item_adjacency.degrees();
        let user_agg = graph
            .user_adjacency
            .normalized(Normalization::SymmetricDegree, &user_deg, &item_deg);
        let item_agg = user_agg.transpose();
        let user_mean = graph.user_adjacency.normalized(Normalization::RowMean, &user_deg, &item_deg);
        let item_mean = graph.item_adjacency.normalized(Normalization::RowMean, &item_deg, &user_deg);
        let mut user_latest = vec![None; m];
        let mut item_latest = vec![None; n];
        for (&(u, i), &ts) in graph.edges.iter().zip(&graph.timestamps) {
            user_latest[u] = Some(user_latest[u].map_or(ts, |v: u64| v.max(ts)));
            item_latest[i] = Some(item_latest[i].map_or(ts, |v: u64| v.max(ts)));
        }
        BehaviorContext {
            n_users: m,
            n_items: n,
            edge_users: graph.edges.iter().map(|e| e.0).collect(),
            edge_items: graph.edges.iter().map(|e| e.1).collect(),
            user_agg: Rc::new(user_agg),
            item_agg: Rc::new(item_agg),
            user_mean: Rc::new(user_mean),
            item_mean: Rc::new(item_mean),
            user_bucket: time_buckets(&user_latest, buckets).into(),
            item_bucket: time_buckets(&item_latest, buckets).into(),
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edge_users.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RoutingConfig {
    pub layout: InterestLayout,
    pub temperature: f64,
    pub iterations: usize,
    pub aggregator: Aggregator,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct RoutingOutput {
    /// Final user/item outputs after the closing aggregation.
    pub users: Var,
    pub items: Var,
    /// Interest-wise embeddings of the last iteration, before aggregation.
    pub routed_users: Var,
    pub routed_items: Var,
    /// Normalized coefficient distribution (edges × interests) of each iteration.
    pub distributions: Vec<Var>,
}

fn ensure_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    let m = tape.value(v);
    if let Some(pos) = m.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(CkmlError::Numeric(format!(
            "non-finite {what} at row {} (col {})",
            pos / m.cols().max(1),
            pos % m.cols().max(1)
        )));
    }
    Ok(())
}

/// Weighted mean of the opposite side's interest rows, per node and interest.
/// `edge_rows` is (E·N*)×d*, `prob` is E×N*.
fn weighted_mean(
    tape: &mut Tape,
    edge_rows: Var,
    prob: Var,
    targets: &Rc<[usize]>,
    n_nodes: usize,
    layout: &InterestLayout,
) -> Var {
    let e = targets.len();
    let n_star = layout.total();
    let pcol = tape.reshape(prob, e * n_star, 1);
    let weighted = tape.mul_col(edge_rows, pcol);
    let weighted = tape.reshape(weighted, e, layout.stack_cols());
    let num = tape.scatter_add(weighted, targets.clone(), n_nodes);
    let num = tape.reshape(num, n_nodes * n_star, layout.width);
    let den = tape.scatter_add(prob, targets.clone(), n_nodes);
    let den = tape.reshape(den, n_nodes * n_star, 1);
    let mean = tape.div_col(num, den);
    tape.reshape(mean, n_nodes, layout.stack_cols())
}

fn unit_rows(tape: &mut Tape, stack: Var, layout: &InterestLayout) -> Var {
    let n = tape.shape(stack).0;
    let rows = tape.reshape(stack, n * layout.total(), layout.width);
    let unit = tape.row_normalize(rows, NORM_EPS);
    tape.reshape(unit, n, layout.stack_cols())
}

/// Interest allocation of one behavior graph on one layer.
///
/// `x` (users) and `g` (items) are node stacks of N*·d* columns; `time`
/// holds per-node offsets already gathered by bucket. `closing_weights` are the
/// closing aggregator's weights (empty for the light aggregator).
pub fn route_behavior_layer(
    tape: &mut Tape,
    ctx: &BehaviorContext,
    x: Var,
    g: Var,
    time: Option<(Var, Var)>,
    cfg: &RoutingConfig,
    closing_weights: &[Var],
) -> Result<RoutingOutput> {
    if !(cfg.temperature > 0.0) {
        return Err(CkmlError::Numeric(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    if cfg.iterations == 0 {
        return Err(CkmlError::Config("routing needs at least one iteration".into()));
    }
    let layout = cfg.layout;
    let (e, n_star, w) = (ctx.edge_count(), layout.total(), layout.width);

    // time-shifted inputs, uniform coefficients
    let (hu0, hi0) = match time {
        Some((tu, ti)) => (tape.add(x, tu), tape.add(g, ti)),
        None => (x, g),
    };
    let mut logits = tape.leaf(Matrix::filled(e, n_star, 1.0));
    let items_on_edges = tape.gather(hi0, ctx.edge_items.clone());
    let items_on_edges = tape.reshape(items_on_edges, e * n_star, w);
    let users_on_edges = tape.gather(hu0, ctx.edge_users.clone());
    let users_on_edges = tape.reshape(users_on_edges, e * n_star, w);
    let unit_items = unit_rows(tape, hi0, &layout);
    let unit_items_on_edges = tape.gather(unit_items, ctx.edge_items.clone());

    let mut distributions = Vec::with_capacity(cfg.iterations);
    let mut routed = None;
    for t in 1..=cfg.iterations {
        // coefficient distribution
        let scaled = tape.scale(logits, 1.0 / cfg.temperature);
        let prob = tape.row_softmax(scaled);
        distributions.push(prob);
        // interest-wise neighbor means
        let hu = weighted_mean(tape, items_on_edges, prob, &ctx.edge_users, ctx.n_users, &layout);
        let hi = weighted_mean(tape, users_on_edges, prob, &ctx.edge_items, ctx.n_items, &layout);
        routed = Some((hu, hi));
        // agreement update, skipped after the final iteration
        if t < cfg.iterations {
            let unit_users = unit_rows(tape, hu, &layout);
            let squashed = tape.tanh(unit_users);
            let squashed_on_edges = tape.gather(squashed, ctx.edge_users.clone());
            let prod = tape.mul(unit_items_on_edges, squashed_on_edges);
            let prod = tape.reshape(prod, e * n_star, w);
            let affinity = tape.row_sum(prod);
            let affinity = tape.reshape(affinity, e, n_star);
            logits = tape.add(logits, affinity);
        }
    }
    let (routed_users, routed_items) = routed.expect("at least one iteration");
    ensure_finite(tape, routed_users, "routed user embedding")?;
    ensure_finite(tape, routed_items, "routed item embedding")?;

    // closing aggregation
    let users = aggregate(tape, &ctx.user_agg, routed_items, routed_users, cfg.aggregator, closing_weights, w, cfg.slope);
    let items = aggregate(tape, &ctx.item_agg, routed_users, routed_items, cfg.aggregator, closing_weights, w, cfg.slope);
    Ok(RoutingOutput { users, items, routed_users, routed_items, distributions })
}

/// Propagation without interest allocation: every edge weighs equally, so
/// each node takes the plain mean of its neighbors before the closing
/// aggregation.
pub fn uniform_propagation(
    tape: &mut Tape,
    ctx: &BehaviorContext,
    x: Var,
    g: Var,
    cfg: &RoutingConfig,
    closing_weights: &[Var],
) -> RoutingOutput {
    let w = cfg.layout.width;
    let routed_users = tape.spmm(ctx.user_mean.clone(), g);
    let routed_items = tape.spmm(ctx.item_mean.clone(), x);
    let users = aggregate(tape, &ctx.user_agg, routed_items, routed_users, cfg.aggregator, closing_weights, w, cfg.slope);
    let items = aggregate(tape, &ctx.item_agg, routed_users, routed_items, cfg.aggregator, closing_weights, w, cfg.slope);
    RoutingOutput { users, items, routed_users, routed_items, distributions: Vec::new() }
}

/// Projections of one attention head, each (d*/H)×(d*/H).
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

#[derive(Debug, Clone)]
pub struct Correlated {
    /// Correlated shared block per behavior (rows × N_sha·d*).
    pub blocks: Vec<Var>,
    /// Attention weights per (behavior, head): (rows·N_sha)×K.
    pub weights: Vec<Vec<Var>>,
}

/// Multi-head attention across behaviors, applied per node and shared
/// interest, plus the residual sum over all behaviors' shared blocks.
pub fn correlate_shared(
    tape: &mut Tape,
    shared: &[Var],
    heads: &[HeadParams],
    layout: &InterestLayout,
) -> Result<Correlated> {
    let k_count = shared.len();
    assert!(k_count > 0);
    if heads.is_empty() || layout.width % heads.len() != 0 {
        return Err(CkmlError::Config(format!(
            "{} heads do not divide interest width {}",
            heads.len(),
            layout.width
        )));
    }
    let head_width = layout.width / heads.len();
    let rows = tape.shape(shared[0]).0;
    let r = rows * layout.shared;
    let per_interest: Vec<Var> = shared.iter().map(|&s| tape.reshape(s, r, layout.width)).collect();
    let residual = tape.sum_all(&per_interest);
    let inv_sqrt = 1.0 / (head_width as f64).sqrt();

    let mut head_outputs: Vec<Vec<Var>> = vec![Vec::with_capacity(heads.len()); k_count];
    let mut weights: Vec<Vec<Var>> = vec![Vec::with_capacity(heads.len()); k_count];
    for (h, p) in heads.iter().enumerate() {
        let qt = tape.transpose(p.query);
        let kt = tape.transpose(p.key);
        let vt = tape.transpose(p.value);
        let mut q = Vec::with_capacity(k_count);
        let mut kk = Vec::with_capacity(k_count);
        let mut v = Vec::with_capacity(k_count);
        for &x in &per_interest {
            let chunk = tape.slice_cols(x, h * head_width, head_width);
            q.push(tape.matmul(chunk, qt));
            kk.push(tape.matmul(chunk, kt));
            v.push(tape.matmul(chunk, vt));
        }
        for k in 0..k_count {
            let scores: Vec<Var> = (0..k_count)
                .map(|k2| {
                    let prod = tape.mul(q[k], kk[k2]);
                    let s = tape.row_sum(prod);
                    tape.scale(s, inv_sqrt)
                })
                .collect();
            let scores = tape.concat_cols(&scores);
            let lambda = tape.row_softmax(scores);
            let terms: Vec<Var> = (0..k_count)
                .map(|k2| {
                    let col = tape.slice_cols(lambda, k2, 1);
                    tape.mul_col(v[k2], col)
                })
                .collect();
            head_outputs[k].push(tape.sum_all(&terms));
            weights[k].push(lambda);
        }
    }
    let blocks = head_outputs
        .iter()
        .map(|hs| {
            let att = tape.concat_cols(hs);
            let out = tape.add(att, residual);
            tape.reshape(out, rows, layout.shared_cols())
        })
        .collect();
    Ok(Correlated { blocks, weights })
}

/// Next state = (specific ‖ correlated shared) + previous state. Returns the
/// concatenated layer output and the next state.
pub fn propagate_layer(
    tape: &mut Tape,
    specific: Option<Var>,
    correlated_shared: Option<Var>,
    previous: Var,
) -> (Var, Var) {
    let out = crate::cie::assemble_interest_embedding(tape, specific, correlated_shared);
    let next = tape.add(out, previous);
    (out, next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{build_behavior_graphs, InteractionRecord};

    fn graph(users: usize, items: usize, edges: &[(usize, usize)]) -> BehaviorGraph {
        let recs: Vec<_> = edges
            .iter()
            .enumerate()
            .map(|(t, &(user, item))| InteractionRecord { user, item, behavior: 0, timestamp: t as u64 })
            .collect();
        build_behavior_graphs(&recs, users, items, 1).remove(0)
    }

    fn cfg(specific: usize, shared: usize, width: usize, iterations: usize) -> RoutingConfig {
        RoutingConfig {
            layout: InterestLayout { specific, shared, width },
            temperature: 1.0,
            iterations,
            aggregator: Aggregator::Light,
            slope: 0.2,
        }
    }

    #[test]
    fn single_interest_equal_weight_mean() {
        let ctx = BehaviorContext::new(&graph(1, 2, &[(0, 0), (0, 1)]), 1);
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(1, 1, 0.0));
        let g = t.leaf(Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap());
        let out = route_behavior_layer(&mut t, &ctx, x, g, None, &cfg(0, 1, 1, 1), &[]).unwrap();
        assert!((t.value(out.routed_users)[(0, 0)] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn first_distribution_is_uniform() {
        let ctx = BehaviorContext::new(&graph(2, 3, &[(0, 0), (0, 2), (1, 1)]), 1);
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(2, 6, 0.3));
        let g = t.leaf(Matrix::filled(3, 6, -0.7));
        for tau in [0.1, 1.0, 20.0] {
            let c = RoutingConfig { temperature: tau, ..cfg(1, 2, 2, 2) };
            let out = route_behavior_layer(&mut t, &ctx, x, g, None, &c, &[]).unwrap();
            for v in t.value(out.distributions[0]).as_slice() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_bad_temperature_and_isolated_nodes_are_zero() {
        let ctx = BehaviorContext::new(&graph(2, 2, &[(0, 0)]), 1);
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(2, 2, 1.0));
        let g = t.leaf(Matrix::filled(2, 2, 1.0));
        let bad = RoutingConfig { temperature: 0.0, ..cfg(1, 1, 1, 1) };
        assert!(route_behavior_layer(&mut t, &ctx, x, g, None, &bad, &[]).is_err());
        let out = route_behavior_layer(&mut t, &ctx, x, g, None, &cfg(1, 1, 1, 2), &[]).unwrap();
        assert_eq!(t.value(out.users).row(1), &[0.0, 0.0]);
        assert_eq!(t.value(out.items).row(1), &[0.0, 0.0]);
    }

    #[test]
    fn zero_norm_embeddings_stay_finite() {
        let ctx = BehaviorContext::new(&graph(2, 2, &[(0, 0), (1, 1), (0, 1)]), 1);
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 4));
        let g = t.leaf(Matrix::zeros(2, 4));
        let out = route_behavior_layer(&mut t, &ctx, x, g, None, &cfg(1, 1, 2, 3), &[]).unwrap();
        assert!(t.value(out.users).all_finite());
        for d in &out.distributions {
            assert!(t.value(*d).all_finite());
        }
    }

    #[test]
    fn time_buckets_are_quantiles() {
        let b = time_buckets(&[Some(10), None, Some(30), Some(20), Some(40)], 2);
        assert_eq!(b, vec![0, 0, 1, 0, 1]);
        assert_eq!(time_buckets(&[Some(5), Some(5)], 4), vec![0, 0]);
    }

    #[test]
    fn attention_single_behavior() {
        let layout = InterestLayout { specific: 0, shared: 1, width: 2 };
        let mut t = Tape::new();
        let h = t.leaf(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let q = t.leaf(Matrix::filled(1, 1, 0.4));
        let k = t.leaf(Matrix::filled(1, 1, -1.1));
        let v = t.leaf(Matrix::filled(1, 1, 2.0));
        let heads = [HeadParams { query: q, key: k, value: v }; 2];
        let out = correlate_shared(&mut t, &[h], &heads, &layout).unwrap();
        // λ = 1, so output = V·h + h = 3h
        let expected: Vec<f64> = t.value(h).as_slice().iter().map(|x| 3.0 * x).collect();
        assert_eq!(t.value(out.blocks[0]).as_slice(), expected.as_slice());
    }

    #[test]
    fn attention_zero_inputs() {
        let layout = InterestLayout { specific: 1, shared: 2, width: 2 };
        let mut t = Tape::new();
        let z = t.leaf(Matrix::zeros(3, 4));
        let p = t.leaf(Matrix::filled(1, 1, 0.7));
        let heads = [HeadParams { query: p, key: p, value: p }; 2];
        let out = correlate_shared(&mut t, &[z, z], &heads, &layout).unwrap();
        for b in &out.blocks {
            assert_eq!(t.value(*b), &Matrix::zeros(3, 4));
        }
        assert!(correlate_shared(&mut t, &[z], &heads[..0], &layout).is_err());
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        // K=2, H=1, d*=2
        let layout = InterestLayout { specific: 0, shared: 1, width: 2 };
        let hs = [[0.3, -1.2], [0.8, 0.5]];
        let qm = [[0.5, 0.1], [-0.3, 0.9]];
        let km = [[1.1, -0.4], [0.2, 0.6]];
        let vm = [[0.7, 0.0], [0.3, -0.5]];
        let mut t = Tape::new();
        let h: Vec<Var> = hs.iter().map(|r| t.leaf(Matrix::from_vec(1, 2, r.to_vec()).unwrap())).collect();
        let leaf = |t: &mut Tape, m: [[f64; 2]; 2]| t.leaf(Matrix::from_rows(&[m[0].to_vec(), m[1].to_vec()]).unwrap());
        let heads = [HeadParams { query: leaf(&mut t, qm), key: leaf(&mut t, km), value: leaf(&mut t, vm) }];
        let out = correlate_shared(&mut t, &h, &heads, &layout).unwrap();
        let mv = |m: &[[f64; 2]; 2], x: &[f64; 2]| [m[0][0] * x[0] + m[0][1] * x[1], m[1][0] * x[0] + m[1][1] * x[1]];
        for k in 0..2 {
            let qk = mv(&qm, &hs[k]);
            let raw: Vec<f64> = (0..2)
                .map(|k2| {
                    let kk = mv(&km, &hs[k2]);
                    (qk[0] * kk[0] + qk[1] * kk[1]) / 2f64.sqrt()
                })
                .collect();
            let z = raw[0].exp() + raw[1].exp();
            let lam = [raw[0].exp() / z, raw[1].exp() / z];
            for j in 0..2 {
                let mut expected = hs[0][j] + hs[1][j];
                for k2 in 0..2 {
                    expected += lam[k2] * mv(&vm, &hs[k2])[j];
                }
                assert!((t.value(out.blocks[k])[(0, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn propagate_layer_residual() {
        let mut t = Tape::new();
        let spe = t.leaf(Matrix::zeros(2, 2));
        let sha = t.leaf(Matrix::zeros(2, 2));
        let prev = t.leaf(Matrix::filled(2, 4, 1.25));
        let (_, next) = propagate_layer(&mut t, Some(spe), Some(sha), prev);
        assert_eq!(t.value(next), t.value(prev));

        let spe = t.leaf(Matrix::filled(2, 2, 1.0));
        let sha = t.leaf(Matrix::filled(2, 2, 2.0));
        let zero = t.leaf(Matrix::zeros(2, 4));
        let (out, next) = propagate_layer(&mut t, Some(spe), Some(sha), zero);
        assert_eq!(t.value(next), t.value(out));
        assert_eq!(t.value(out).row(0), &[1.0, 1.0, 2.0, 2.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(rows: usize, cols: usize, seed: &[f64]) -> Matrix {
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|i| seed[i % seed.len()] * (1.0 + i as f64).sin()).collect())
                .unwrap()
        }

        proptest! {
            #[test]
            fn distributions_sum_to_one(
                edges in prop::collection::btree_set((0usize..4, 0usize..5), 1..12),
                n_star in 1usize..5,
                tau in 0.05f64..10.0,
                iterations in 1usize..4,
                vals in prop::collection::vec(-3.0f64..3.0, 2..16),
            ) {
                let edges: Vec<_> = edges.into_iter().collect();
                let ctx = BehaviorContext::new(&graph(4, 5, &edges), 1);
                let mut t = Tape::new();
                let x = t.leaf(matrix(4, n_star * 2, &vals));
                let g = t.leaf(matrix(5, n_star * 2, &vals[1..]));
                let c = RoutingConfig { temperature: tau, ..cfg(0, n_star, 2, iterations) };
                let out = route_behavior_layer(&mut t, &ctx, x, g, None, &c, &[]).unwrap();
                prop_assert_eq!(out.distributions.len(), iterations);
                for d in &out.distributions {
                    let m = t.value(*d);
                    for r in 0..m.rows() {
                        prop_assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn attention_weights_sum_to_one(
                behaviors in 1usize..5,
                shared in 1usize..3,
                heads in 1usize..3,
                vals in prop::collection::vec(-4.0f64..4.0, 1..20),
            ) {
                let width = 2 * heads;
                let layout = InterestLayout { specific: 0, shared, width };
                let mut t = Tape::new();
                let blocks: Vec<Var> = (0..behaviors)
                    .map(|k| t.leaf(matrix(3, shared * width, &vals[k % vals.len()..])))
                    .collect();
                let p: Vec<HeadParams> = (0..heads)
                    .map(|h| {
                        let m = |t: &mut Tape, o: usize| t.leaf(matrix(2, 2, &vals[(h + o) % vals.len()..]));
                        HeadParams { query: m(&mut t, 0), key: m(&mut t, 1), value: m(&mut t, 2) }
                    })
                    .collect();
                let out = correlate_shared(&mut t, &blocks, &p, &layout).unwrap();
                for per_head in &out.weights {
                    for w in per_head {
                        let m = t.value(*w);
                        prop_assert_eq!(m.shape(), (3 * shared, behaviors));
                        for r in 0..m.rows() {
                            prop_assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
