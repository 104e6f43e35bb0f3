//! Optimization loop, early stopping, checkpoints and full-model gradient
//! verification.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::HyperConfig;
use crate::dataio::{epoch_triples, relation_triples, Dataset, Dims};
use crate::error::{CkmlError, Result};
use crate::evaluator::{evaluate, interest_center_distance, MetricsReport};
use crate::model::{GraphContext, Model};
use crate::numerics::gradcheck::{finite_difference_gradcheck, GradientReport};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Matrix;
use crate::objective::{
    margin_bpr_batch, relation_bpr_batch, relation_score_batch, score_batch, total_loss, LossBreakdown, LossWeights,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKML";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F64: u8 = 2;

pub type Triple = (usize, usize, usize);

/// Ranking triples per behavior and relation triples per relation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub ranking: Vec<Vec<Triple>>,
    pub relation: Vec<Vec<Triple>>,
}

impl Batch {
    pub fn empty(behaviors: usize, relations: usize) -> Self {
        Batch { ranking: vec![Vec::new(); behaviors], relation: vec![Vec::new(); relations] }
    }

    pub fn is_empty(&self) -> bool {
        self.ranking.iter().chain(&self.relation).all(Vec::is_empty)
    }
}

/// Same parameters as [`Model::new`]; kept as the named entry point.
pub fn init_params(hyper: &HyperConfig, dims: Dims) -> Result<Model> {
    Model::new(&hyper.model, dims, hyper.train.seed)
}

pub fn loss_weights(hyper: &HyperConfig) -> LossWeights {
    LossWeights {
        behavior: hyper.train.behavior_weights.clone(),
        // no relation representations exist without interest extraction
        relation: if hyper.model.no_cie { 0.0 } else { hyper.train.relation_weight },
        l2: hyper.train.l2,
    }
}

fn columns(triples: &[Triple]) -> (Rc<[usize]>, Rc<[usize]>, Rc<[usize]>) {
    (
        triples.iter().map(|t| t.0).collect(),
        triples.iter().map(|t| t.1).collect(),
        triples.iter().map(|t| t.2).collect(),
    )
}

/// Builds the joint loss of `batch` on `tape`. Returns the loss variable,
/// its breakdown and the parameter leaves.
pub fn build_loss(
    model: &Model,
    tape: &mut Tape,
    ctx: &GraphContext,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown, Vec<Var>)> {
    let fwd = model.forward(tape, ctx)?;
    let layout = model.layout();
    let interests = model.scored_interests();
    let ranking: Vec<Option<Var>> = batch
        .ranking
        .iter()
        .enumerate()
        .map(|(k, triples)| {
            if triples.is_empty() {
                return None;
            }
            let (u, p, q) = columns(triples);
            let (uf, itf) = (fwd.user_final[k], fwd.item_final[k]);
            let pos = score_batch(tape, uf, itf, u.clone(), p, &layout, interests.clone());
            let neg = score_batch(tape, uf, itf, u, q, &layout, interests.clone());
            Some(margin_bpr_batch(tape, pos, neg))
        })
        .collect();
    let relation: Vec<Option<Var>> = if weights.relation == 0.0 || fwd.relation_reps.is_empty() {
        Vec::new()
    } else {
        batch
            .relation
            .iter()
            .enumerate()
            .map(|(r, triples)| {
                if triples.is_empty() {
                    return None;
                }
                let (a, p, q) = columns(triples);
                let pos = relation_score_batch(tape, fwd.relation_reps[r], a.clone(), p);
                let neg = relation_score_batch(tape, fwd.relation_reps[r], a, q);
                Some(relation_bpr_batch(tape, pos, neg))
            })
            .collect()
    };
    let active: Vec<Var> =
        fwd.params.iter().enumerate().filter(|(i, _)| model.params.is_active(*i)).map(|(_, &v)| v).collect();
    let (loss, breakdown) = total_loss(tape, &ranking, &relation, &active, weights);
    if !breakdown.total.is_finite() {
        return Err(CkmlError::Numeric(format!("non-finite loss {:?}", breakdown)));
    }
    Ok((loss, breakdown, fwd.params))
}

/// Loss breakdown and exact gradients for every registered parameter
/// (zero for inactive ones).
pub fn compute_gradients(
    model: &Model,
    ctx: &GraphContext,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let (loss, breakdown, leaves) = build_loss(model, &mut tape, ctx, batch, weights)?;
    let mut grads = tape.backward(loss);
    let out = leaves
        .iter()
        .zip(model.params.values())
        .enumerate()
        .map(|(i, (&v, value))| match grads.take(v) {
            Some(g) if model.params.is_active(i) => g,
            _ => Matrix::zeros(value.rows(), value.cols()),
        })
        .collect();
    Ok((breakdown, out))
}

/// Loss value only.
pub fn evaluate_loss(model: &Model, ctx: &GraphContext, batch: &Batch, weights: &LossWeights) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    Ok(build_loss(model, &mut tape, ctx, batch, weights)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Matrix> = model.params.values().iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros.clone(), second: zeros }
    }

    /// One bias-corrected update of the active parameters.
    pub fn update(&mut self, model: &mut Model, grads: &[Matrix], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let active: Vec<bool> = (0..model.params.len()).map(|i| model.params.is_active(i)).collect();
        for (i, value) in model.params.values_mut().iter_mut().enumerate() {
            if !active[i] {
                continue;
            }
            let g = grads[i].as_slice();
            let m = self.first[i].as_mut_slice();
            let v = self.second[i].as_mut_slice();
            for (j, x) in value.as_mut_slice().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Mutable training state over one dataset.
pub struct Trainer {
    pub hyper: HyperConfig,
    pub model: Model,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub ctx: GraphContext,
}

impl Trainer {
    pub fn new(dataset: &Dataset, hyper: &HyperConfig) -> Result<Trainer> {
        hyper.validate(Some(dataset.dims.behaviors))?;
        let model = init_params(hyper, dataset.dims)?;
        let adam = Adam::new(&model);
        Ok(Trainer { hyper: hyper.clone(), model, adam, epoch: 0, ctx: GraphContext::new(dataset, hyper.model.time_buckets) })
    }

    /// Epoch-local sampler; depends only on the seed and the epoch index so
    /// that resumed runs draw the same triples.
    fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.hyper.train.seed);
        rng.set_stream(self.epoch as u64 + 1);
        rng
    }

    /// Splits one epoch of triples into aligned minibatches.
    pub fn epoch_batches(&self, dataset: &Dataset) -> Vec<Batch> {
        let mut rng = self.epoch_rng();
        let ranking: Vec<Vec<Triple>> = dataset.behavior_graphs.iter().map(|g| epoch_triples(g, &mut rng)).collect();
        let relation: Vec<Vec<Triple>> = if loss_weights(&self.hyper).relation == 0.0 {
            vec![Vec::new(); dataset.relation_graphs.len()]
        } else {
            dataset.relation_graphs.iter().map(|g| relation_triples(g, &mut rng)).collect()
        };
        let bs = self.hyper.train.batch_size;
        let longest = ranking.iter().map(Vec::len).max().unwrap_or(0);
        let steps = longest.div_ceil(bs).max(1);
        let chunk = |v: &Vec<Triple>, s: usize| {
            let size = v.len().div_ceil(steps);
            v.iter().skip(s * size).take(size).copied().collect::<Vec<_>>()
        };
        (0..steps)
            .map(|s| Batch {
                ranking: ranking.iter().map(|v| chunk(v, s)).collect(),
                relation: relation.iter().map(|v| chunk(v, s)).collect(),
            })
            .collect()
    }

    pub fn learning_rate(&self) -> f64 {
        self.hyper.train.learning_rate * self.hyper.train.decay.powi(self.epoch as i32)
    }

    /// Applies one optimizer step on `batch` and returns its loss breakdown.
    pub fn step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let weights = loss_weights(&self.hyper);
        let (breakdown, grads) = compute_gradients(&self.model, &self.ctx, batch, &weights)?;
        let lr = self.learning_rate();
        self.adam.update(&mut self.model, &grads, lr);
        Ok(breakdown)
    }

    /// One pass over freshly sampled triples. Returns the summed breakdown.
    pub fn train_epoch(&mut self, dataset: &Dataset) -> Result<LossBreakdown> {
        let mut total = LossBreakdown::default();
        for batch in self.epoch_batches(dataset) {
            let b = self.step(&batch).map_err(|e| match e {
                CkmlError::Numeric(m) => CkmlError::Numeric(format!("epoch {}: {m}", self.epoch + 1)),
                other => other,
            })?;
            total.accumulate(&b);
        }
        self.epoch += 1;
        Ok(total)
    }

    /// Held-out metrics plus the layer-0 interest spread when defined.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<MetricsReport> {
        let emb = self.model.embed(&self.ctx)?;
        let eval = &self.hyper.eval;
        let mut report = evaluate(&emb, dataset, eval.top_n, eval.all_behaviors, self.hyper.train.workers)?;
        let layout = self.model.layout();
        if layout.total() >= 2 {
            let stack = &emb.item_interests[dataset.target_behavior];
            report.interest_distance = Some(interest_center_distance(stack, layout.width)?.summary);
        }
        Ok(report)
    }
}

pub fn loss_line(epoch: usize, b: &LossBreakdown) -> String {
    json!({
        "epoch": epoch,
        "loss": b.total,
        "ranking": b.ranking,
        "relation": b.relation,
        "regularization": b.regularization,
    })
    .to_string()
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Best checkpoint by validation NDCG (the last one without validation).
    pub checkpoint: Checkpoint,
    pub log: Vec<String>,
    pub best_epoch: usize,
    pub best_ndcg: Option<f64>,
    pub epochs_run: usize,
    /// Summed ranking loss of the first and last epochs.
    pub first_ranking: Option<f64>,
    pub last_ranking: Option<f64>,
}

/// Trains for up to `epochs`, validating every `eval_every` epochs and
/// stopping after `patience` validations without improvement.
pub fn fit(dataset: &Dataset, hyper: &HyperConfig) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(dataset, hyper)?;
    let validate = !dataset.eval_negatives.is_empty() && hyper.eval.eval_every > 0;
    let mut log = Vec::new();
    let mut best_ndcg = None;
    let mut best = Checkpoint::from_trainer(&trainer);
    let mut best_epoch = 0;
    let target = dataset.target_behavior;

    if validate {
        let report = trainer.evaluate(dataset)?;
        log.extend(report.to_jsonl(0));
        best_ndcg = report.for_behavior(target).map(|m| m.ndcg);
    }
    let mut stale = 0usize;
    let (mut first_ranking, mut last_ranking) = (None, None);
    while trainer.epoch < hyper.train.epochs {
        let breakdown = trainer.train_epoch(dataset)?;
        let epoch = trainer.epoch;
        let ranking = breakdown.weighted_ranking(&loss_weights(hyper));
        first_ranking.get_or_insert(ranking);
        last_ranking = Some(ranking);
        log::info!("epoch {epoch}: loss {:.6}", breakdown.total);
        log.push(loss_line(epoch, &breakdown));
        if validate && epoch % hyper.eval.eval_every == 0 {
            let report = trainer.evaluate(dataset)?;
            log.extend(report.to_jsonl(epoch));
            let ndcg = report.for_behavior(target).map_or(0.0, |m| m.ndcg);
            if best_ndcg.is_none_or(|b| ndcg > b) {
                best_ndcg = Some(ndcg);
                best = Checkpoint::from_trainer(&trainer);
                best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if stale >= hyper.train.patience {
                    log::info!("early stop at epoch {epoch}, best epoch {best_epoch}");
                    break;
                }
            }
        }
    }
    if !validate {
        best = Checkpoint::from_trainer(&trainer);
        best_epoch = trainer.epoch;
    }
    Ok(FitOutcome {
        checkpoint: best,
        log,
        best_epoch,
        best_ndcg,
        epochs_run: trainer.epoch,
        first_ranking,
        last_ranking,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    epoch: usize,
    rng_seed: u64,
    adam_step: u64,
    dims: Dims,
    config: HyperConfig,
}

/// Serializable snapshot of parameters, optimizer moments and progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hyper: HyperConfig,
    pub dims: Dims,
    pub epoch: usize,
    pub adam_step: u64,
    /// Parameters followed by "opt/m/…" and "opt/v/…" moments.
    pub entries: Vec<(String, Matrix)>,
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| CkmlError::Compat(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Checkpoint {
        let names = t.model.params.names();
        let mut entries: Vec<(String, Matrix)> =
            names.iter().cloned().zip(t.model.params.values().iter().cloned()).collect();
        for (prefix, moments) in [("opt/m/", &t.adam.first), ("opt/v/", &t.adam.second)] {
            entries.extend(names.iter().map(|n| format!("{prefix}{n}")).zip(moments.iter().cloned()));
        }
        Checkpoint { hyper: t.hyper.clone(), dims: t.model.dims, epoch: t.epoch, adam_step: t.adam.step, entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            epoch: self.epoch,
            rng_seed: self.hyper.train.seed,
            adam_step: self.adam_step,
            dims: self.dims,
            config: self.hyper.clone(),
        };
        let meta = toml::to_string(&meta).expect("checkpoint metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, m) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(2);
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            out.push(DTYPE_F64);
            for x in m.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = bytes;
        if &read_exact::<4>(&mut r)? != CHECKPOINT_MAGIC {
            return Err(CkmlError::Compat("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(read_exact(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(CkmlError::Compat(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        if meta_len > r.len() {
            return Err(CkmlError::Compat("truncated checkpoint metadata".into()));
        }
        let (meta, mut r) = r.split_at(meta_len);
        let meta = std::str::from_utf8(meta).map_err(|e| CkmlError::Compat(format!("metadata: {e}")))?;
        let meta: CheckpointMeta = toml::from_str(meta).map_err(|e| CkmlError::Compat(format!("metadata: {e}")))?;
        let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
            if len > r.len() {
                return Err(CkmlError::Compat("truncated entry name".into()));
            }
            let (name, rest) = r.split_at(len);
            r = rest;
            let name = String::from_utf8(name.to_vec()).map_err(|e| CkmlError::Compat(format!("entry name: {e}")))?;
            let rank = read_exact::<1>(&mut r)?[0];
            let dims: Vec<usize> =
                (0..rank).map(|_| read_exact::<8>(&mut r).map(|b| u64::from_le_bytes(b) as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [a, b] => (*a, *b),
                _ => return Err(CkmlError::Compat(format!("{name}: unsupported rank {rank}"))),
            };
            let dtype = read_exact::<1>(&mut r)?[0];
            let len = rows.checked_mul(cols).ok_or_else(|| CkmlError::Compat(format!("{name}: size overflow")))?;
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => (0..len).map(|_| read_exact::<8>(&mut r).map(f64::from_le_bytes)).collect::<Result<_>>()?,
                1 => (0..len)
                    .map(|_| read_exact::<4>(&mut r).map(|b| f32::from_le_bytes(b) as f64))
                    .collect::<Result<_>>()?,
                other => return Err(CkmlError::Compat(format!("{name}: unknown dtype tag {other}"))),
            };
            entries.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if !r.is_empty() {
            return Err(CkmlError::Compat(format!("{} trailing bytes after checkpoint entries", r.len())));
        }
        Ok(Checkpoint {
            hyper: meta.config,
            dims: meta.dims,
            epoch: meta.epoch,
            adam_step: meta.adam_step,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| CkmlError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CkmlError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| CkmlError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Rebuilds the trainer state on `dataset`; dimensions must match.
    pub fn restore(&self, dataset: &Dataset) -> Result<Trainer> {
        let mut model = Model::new(&self.hyper.model, self.dims, 0)?;
        model.check_compatible(&dataset.dims)?;
        let mut adam = Adam::new(&model);
        adam.step = self.adam_step;
        let lookup: std::collections::HashMap<&str, &Matrix> =
            self.entries.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let names = model.params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let fetch = |key: &str, like: &Matrix| -> Result<Matrix> {
                let m = lookup.get(key).ok_or_else(|| CkmlError::Compat(format!("checkpoint lacks {key}")))?;
                if m.shape() != like.shape() {
                    return Err(CkmlError::Compat(format!(
                        "{key}: checkpoint shape {:?}, model expects {:?}",
                        m.shape(),
                        like.shape()
                    )));
                }
                Ok((*m).clone())
            };
            let value = fetch(name, &model.params.values()[i])?;
            model.params.values_mut()[i] = value;
            adam.first[i] = fetch(&format!("opt/m/{name}"), &adam.first[i])?;
            adam.second[i] = fetch(&format!("opt/v/{name}"), &adam.second[i])?;
        }
        if lookup.len() != 3 * names.len() {
            return Err(CkmlError::Compat("checkpoint holds entries the model does not define".into()));
        }
        Ok(Trainer {
            hyper: self.hyper.clone(),
            model,
            adam,
            epoch: self.epoch,
            ctx: GraphContext::new(dataset, self.hyper.model.time_buckets),
        })
    }
}

/// Deterministic fixed batch for gradient checking: every edge of every
/// behavior and every relation edge, with seeded negatives.
pub fn gradcheck_batch(dataset: &Dataset, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch {
        ranking: dataset.behavior_graphs.iter().map(|g| epoch_triples(g, &mut rng)).collect(),
        relation: dataset.relation_graphs.iter().map(|g| relation_triples(g, &mut rng)).collect(),
    }
}

/// Central-difference check of every active parameter group. `hook`
/// scales the analytic gradient of one named group (fault injection).
pub fn gradient_check(
    model: &Model,
    ctx: &GraphContext,
    batch: &Batch,
    weights: &LossWeights,
    epsilon: f64,
    hook: Option<(&str, f64)>,
) -> Result<GradientReport> {
    let (_, mut grads) = compute_gradients(model, ctx, batch, weights)?;
    if let Some((name, factor)) = hook {
        let i = model
            .params
            .position(name)
            .ok_or_else(|| CkmlError::Config(format!("unknown parameter group {name}")))?;
        for g in grads[i].as_mut_slice() {
            *g *= factor;
        }
    }
    let active: Vec<usize> = (0..model.params.len()).filter(|&i| model.params.is_active(i)).collect();
    let names: Vec<String> = active.iter().map(|&i| model.params.names()[i].clone()).collect();
    let values: Vec<Matrix> = active.iter().map(|&i| model.params.values()[i].clone()).collect();
    let analytic: Vec<Matrix> = active.iter().map(|&i| grads[i].clone()).collect();
    let mut work = model.clone();
    finite_difference_gradcheck(&names, &values, &analytic, epsilon, |vals| {
        for (&i, v) in active.iter().zip(vals) {
            work.params.values_mut()[i].as_mut_slice().copy_from_slice(v.as_slice());
        }
        Ok(evaluate_loss(&work, ctx, batch, weights)?.total)
    })
}
