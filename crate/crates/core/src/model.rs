//! Trainable parameter set and the full forward pass: embeddings, interest
//! extraction, L behavior-propagation layers and final aggregation.

use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cie;
use crate::config::{InterestLayout, ModelConfig};
use crate::dataio::{Dataset, Dims};
use crate::error::{CkmlError, Result};
use crate::fbc::{self, BehaviorContext, HeadParams, RoutingConfig};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{Csr, Matrix};
use crate::objective::aggregate_final;

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zero,
}

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    active: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), active: Vec::new(), index: HashMap::new() }
    }

    fn register(&mut self, name: String, value: Matrix, active: bool) {
        assert!(!self.index.contains_key(&name), "parameter {name} registered twice");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.active.push(active);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.position(name).map(|i| &self.values[i])
    }

    /// Scalar count of the active parameters.
    pub fn active_size(&self) -> usize {
        self.values.iter().zip(&self.active).filter(|(_, a)| **a).map(|(v, _)| v.len()).sum()
    }

    /// Total squared Frobenius norm over the active parameters.
    pub fn active_norm_sq(&self) -> f64 {
        self.values.iter().zip(&self.active).filter(|(_, a)| **a).map(|(v, _)| v.frobenius_sq()).sum()
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Sparse structure shared by every forward pass over one dataset.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub behaviors: Vec<BehaviorContext>,
    pub relations: Vec<Rc<Csr>>,
}

impl GraphContext {
    pub fn new(dataset: &Dataset, time_buckets: usize) -> Self {
        GraphContext {
            behaviors: dataset.behavior_graphs.iter().map(|g| BehaviorContext::new(g, time_buckets)).collect(),
            relations: dataset.relation_graphs.iter().map(cie::relation_adjacency).collect(),
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// One leaf per registered parameter, in store order.
    pub params: Vec<Var>,
    /// Final user / item stacks per behavior (rows × N*·d*).
    pub user_final: Vec<Var>,
    pub item_final: Vec<Var>,
    /// Averaged relation-graph item representations y^r (absent without interest extraction).
    pub relation_reps: Vec<Var>,
    /// Layer-0 item interest stacks per behavior.
    pub item_interests: Vec<Var>,
}

/// Plain-value snapshot of the forward outputs used for evaluation.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub layout: InterestLayout,
    pub scored_interests: Range<usize>,
    pub user_final: Vec<Matrix>,
    pub item_final: Vec<Matrix>,
    pub item_interests: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: Dims,
    pub params: ParamStore,
}

impl Model {
    /// Registers and initializes every parameter from `seed`.
    pub fn new(config: &ModelConfig, dims: Dims, seed: u64) -> Result<Model> {
        config.validate()?;
        if dims.behaviors == 0 {
            return Err(CkmlError::Config("dataset declares no behaviors".into()));
        }
        if dims.relations == 0 && !config.no_cie {
            return Err(CkmlError::Config("interest extraction needs at least one relation".into()));
        }
        let layout = config.interest_layout();
        let (spe_on, sha_on) = config.active_blocks();
        let d = config.embedding_dim;
        let w = layout.width;
        let cie_on = !config.no_cie;
        let fbc_on = !config.no_fbc;
        let n_weights = config.aggregator.weight_count();

        let mut specs: Vec<(String, usize, usize, Init, bool)> = Vec::new();
        let mut add = |name: String, rows: usize, cols: usize, init: Init, active: bool| {
            specs.push((name, rows, cols, init, active));
        };
        add("emb/user".into(), dims.users, d, Init::Xavier, true);
        add("emb/item".into(), dims.items, d, Init::Xavier, true);
        for r in 0..dims.relations {
            for l in 0..config.relation_layers {
                for j in 0..n_weights {
                    add(format!("cie/r{r}/l{l}/w{j}"), d, d, Init::Xavier, cie_on);
                }
            }
        }
        let proj_rows = dims.relations * d;
        for k in 0..dims.behaviors {
            for s in 0..layout.specific {
                add(format!("cie/spe/k{k}/s{s}/w"), proj_rows, w, Init::Xavier, cie_on && spe_on);
                add(format!("cie/spe/k{k}/s{s}/b"), 1, w, Init::Zero, cie_on && spe_on);
            }
        }
        for s in 0..layout.shared {
            add(format!("cie/sha/s{s}/w"), proj_rows, w, Init::Xavier, cie_on && sha_on);
            add(format!("cie/sha/s{s}/b"), 1, w, Init::Zero, cie_on && sha_on);
        }
        for l in 0..config.behavior_layers {
            for j in 0..n_weights {
                add(format!("fbc/l{l}/agg/w{j}"), w, w, Init::Xavier, true);
            }
        }
        if layout.shared > 0 && config.heads > 0 && w % config.heads == 0 {
            let hw = w / config.heads;
            for l in 0..config.behavior_layers {
                for h in 0..config.heads {
                    for p in ["q", "k", "v"] {
                        add(format!("att/l{l}/h{h}/{p}"), hw, hw, Init::Xavier, fbc_on && sha_on);
                    }
                }
            }
        }
        for k in 0..dims.behaviors {
            for side in ["user", "item"] {
                let active = fbc_on && config.time_embedding;
                add(format!("time/k{k}/{side}"), config.time_buckets, layout.stack_cols(), Init::Zero, active);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, rows, cols, init, active) in specs {
            let value = match init {
                Init::Xavier => xavier(&mut rng, rows, cols),
                Init::Zero => Matrix::zeros(rows, cols),
            };
            params.register(name, value, active);
        }
        Ok(Model { config: config.clone(), dims, params })
    }

    pub fn layout(&self) -> InterestLayout {
        self.config.interest_layout()
    }

    /// Interests entering the score: all of them, or only the active block.
    pub fn scored_interests(&self) -> Range<usize> {
        let layout = self.layout();
        match self.config.active_blocks() {
            (true, true) => 0..layout.total(),
            (true, false) => 0..layout.specific,
            (false, true) => layout.specific..layout.total(),
            (false, false) => unreachable!("validated config"),
        }
    }

    /// Checks that the graph context matches the model dimensions.
    pub fn check_compatible(&self, dims: &Dims) -> Result<()> {
        if *dims != self.dims {
            return Err(CkmlError::Compat(format!(
                "model built for {} users / {} items / {} behaviors / {} relations, dataset has {} / {} / {} / {}",
                self.dims.users,
                self.dims.items,
                self.dims.behaviors,
                self.dims.relations,
                dims.users,
                dims.items,
                dims.behaviors,
                dims.relations
            )));
        }
        Ok(())
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self.params.position(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    /// Replaces inactive interest blocks of a node stack by zeros.
    fn mask_blocks(&self, tape: &mut Tape, stack: Var) -> Var {
        let layout = self.layout();
        let (spe_on, sha_on) = self.config.active_blocks();
        if (spe_on || layout.specific == 0) && (sha_on || layout.shared == 0) {
            return stack;
        }
        let rows = tape.shape(stack).0;
        let (spe, sha) = cie::split_interest_embedding(tape, stack, &layout);
        let spe = spe.map(|v| if spe_on { v } else { tape.leaf(Matrix::zeros(rows, layout.specific_cols())) });
        let sha = sha.map(|v| if sha_on { v } else { tape.leaf(Matrix::zeros(rows, layout.shared_cols())) });
        cie::assemble_interest_embedding(tape, spe, sha)
    }

    /// Builds the whole computation on `tape`.
    pub fn forward(&self, tape: &mut Tape, ctx: &GraphContext) -> Result<Forward> {
        let cfg = &self.config;
        let layout = self.layout();
        let (spe_on, sha_on) = cfg.active_blocks();
        let slope = cfg.leaky_slope;
        let n_weights = cfg.aggregator.weight_count();
        let k_count = self.dims.behaviors;
        if ctx.behaviors.len() != k_count || ctx.relations.len() != self.dims.relations {
            return Err(CkmlError::Compat("graph context does not match model dimensions".into()));
        }

        let params: Vec<Var> = self.params.values().iter().map(|m| tape.leaf(m.clone())).collect();
        let emb_user = self.var(&params, "emb/user");
        let emb_item = self.var(&params, "emb/item");
        let n_items = self.dims.items;

        // Layer-0 interest stacks
        let mut relation_reps = Vec::new();
        let item_interests: Vec<Var> = if cfg.no_cie {
            let g = self.mask_blocks(tape, emb_item);
            vec![g; k_count]
        } else {
            for (r, adj) in ctx.relations.iter().enumerate() {
                let weights: Vec<Vec<Var>> = (0..cfg.relation_layers)
                    .map(|l| (0..n_weights).map(|j| self.var(&params, &format!("cie/r{r}/l{l}/w{j}"))).collect())
                    .collect();
                let layers = cie::propagate_relation_graph(
                    tape,
                    emb_item,
                    adj,
                    cfg.relation_layers,
                    cfg.aggregator,
                    &weights,
                    slope,
                );
                relation_reps.push(cie::average_layers(tape, &layers));
            }
            let y_star = cie::concat_relations(tape, &relation_reps);
            let shared = if layout.shared == 0 {
                None
            } else if sha_on {
                let proj: Vec<(Var, Var)> = (0..layout.shared)
                    .map(|s| (self.var(&params, &format!("cie/sha/s{s}/w")), self.var(&params, &format!("cie/sha/s{s}/b"))))
                    .collect();
                Some(cie::extract_shared_interests(tape, y_star, &proj, slope))
            } else {
                Some(tape.leaf(Matrix::zeros(n_items, layout.shared_cols())))
            };
            (0..k_count)
                .map(|k| {
                    let specific = if layout.specific == 0 {
                        None
                    } else if spe_on {
                        let proj: Vec<(Var, Var)> = (0..layout.specific)
                            .map(|s| {
                                (
                                    self.var(&params, &format!("cie/spe/k{k}/s{s}/w")),
                                    self.var(&params, &format!("cie/spe/k{k}/s{s}/b")),
                                )
                            })
                            .collect();
                        Some(cie::extract_specific_interests(tape, y_star, &proj, slope))
                    } else {
                        Some(tape.leaf(Matrix::zeros(n_items, layout.specific_cols())))
                    };
                    cie::assemble_interest_embedding(tape, specific, shared)
                })
                .collect()
        };

        let x0 = self.mask_blocks(tape, emb_user);
        let mut users: Vec<Var> = vec![x0; k_count];
        let mut items: Vec<Var> = item_interests.clone();
        let mut user_layers: Vec<Vec<Var>> = vec![Vec::new(); k_count];
        let mut item_layers: Vec<Vec<Var>> = vec![Vec::new(); k_count];
        let routing = RoutingConfig {
            layout,
            temperature: cfg.temperature,
            iterations: cfg.routing_iterations,
            aggregator: cfg.aggregator,
            slope,
        };

        for l in 0..cfg.behavior_layers {
            let agg_weights: Vec<Var> =
                (0..n_weights).map(|j| self.var(&params, &format!("fbc/l{l}/agg/w{j}"))).collect();
            let mut routed_users = Vec::with_capacity(k_count);
            let mut routed_items = Vec::with_capacity(k_count);
            for (k, bctx) in ctx.behaviors.iter().enumerate() {
                let out = if cfg.no_fbc {
                    fbc::uniform_propagation(tape, bctx, users[k], items[k], &routing, &agg_weights)
                } else {
                    let time = if cfg.time_embedding {
                        let tu = self.var(&params, &format!("time/k{k}/user"));
                        let ti = self.var(&params, &format!("time/k{k}/item"));
                        let tu = tape.gather(tu, bctx.user_bucket.clone());
                        let ti = tape.gather(ti, bctx.item_bucket.clone());
                        Some((self.mask_blocks(tape, tu), self.mask_blocks(tape, ti)))
                    } else {
                        None
                    };
                    fbc::route_behavior_layer(tape, bctx, users[k], items[k], time, &routing, &agg_weights)?
                };
                routed_users.push(self.mask_blocks(tape, out.users));
                routed_items.push(self.mask_blocks(tape, out.items));
            }
            for (routed, states, layers) in
                [(&routed_users, &mut users, &mut user_layers), (&routed_items, &mut items, &mut item_layers)]
            {
                let split: Vec<(Option<Var>, Option<Var>)> =
                    routed.iter().map(|&v| cie::split_interest_embedding(tape, v, &layout)).collect();
                let shared_blocks: Option<Vec<Var>> = if layout.shared == 0 {
                    None
                } else if !sha_on {
                    Some(split.iter().map(|s| s.1.expect("shared block")).collect())
                } else if cfg.no_fbc {
                    let all: Vec<Var> = split.iter().map(|s| s.1.expect("shared block")).collect();
                    let total = tape.sum_all(&all);
                    Some(vec![total; k_count])
                } else {
                    let heads: Vec<HeadParams> = (0..cfg.heads)
                        .map(|h| HeadParams {
                            query: self.var(&params, &format!("att/l{l}/h{h}/q")),
                            key: self.var(&params, &format!("att/l{l}/h{h}/k")),
                            value: self.var(&params, &format!("att/l{l}/h{h}/v")),
                        })
                        .collect();
                    let blocks: Vec<Var> = split.iter().map(|s| s.1.expect("shared block")).collect();
                    Some(fbc::correlate_shared(tape, &blocks, &heads, &layout)?.blocks)
                };
                for k in 0..k_count {
                    let sha = shared_blocks.as_ref().map(|b| b[k]);
                    let (out, next) = fbc::propagate_layer(tape, split[k].0, sha, states[k]);
                    layers[k].push(out);
                    states[k] = next;
                }
            }
        }

        let user_final = user_layers.iter().map(|ls| aggregate_final(tape, ls)).collect();
        let item_final = item_layers.iter().map(|ls| aggregate_final(tape, ls)).collect();
        Ok(Forward { params, user_final, item_final, relation_reps, item_interests })
    }

    /// Runs the forward pass and copies out the values needed for scoring.
    pub fn embed(&self, ctx: &GraphContext) -> Result<Embeddings> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, ctx)?;
        let copy = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
        let out = Embeddings {
            layout: self.layout(),
            scored_interests: self.scored_interests(),
            user_final: copy(&f.user_final),
            item_final: copy(&f.item_final),
            item_interests: copy(&f.item_interests),
        };
        for m in out.user_final.iter().chain(&out.item_final) {
            if !m.all_finite() {
                return Err(CkmlError::Numeric("non-finite final representation".into()));
            }
        }
        Ok(out)
    }
}

impl Embeddings {
    pub fn score(&self, behavior: usize, user: usize, item: usize) -> f64 {
        crate::objective::score_interaction(
            self.user_final[behavior].row(user),
            self.item_final[behavior].row(item),
            self.layout.width,
            self.scored_interests.clone(),
        )
    }
}
