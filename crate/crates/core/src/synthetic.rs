//! Planted-interest generator for desk-scale multi-behavior datasets.
//!
//! Each planted interest owns a prototype vector and a disjoint slice of the
//! catalog. Shared interests are available to every behavior; specific
//! interests belong to exactly one. A user draws a sparse mixture per
//! behavior, blending a behavior-independent shared mixture (weight
//! `correlation`) with an independent per-behavior one, and samples items in
//! proportion to mixture × prototype affinity. Relations connect items of
//! the same interest.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Dims, InteractionRecord, ItemRelationRecord};
use crate::error::{CkmlError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub behaviors: usize,
    pub relations: usize,
    pub shared_interests: usize,
    pub specific_interests: usize,
    pub interactions_per_user: usize,
    /// Weight of the behavior-independent part of each user's mixture.
    pub correlation: f64,
    /// Planted interests drawn into each mixture.
    pub interests_per_user: usize,
    pub prototype_dim: usize,
    /// Affinity sharpness: weight of item i under a user's interest c is
    /// exp(sharpness · (cos(pref_{u,c}, v_i) − 1)).
    pub sharpness: f64,
    /// Gaussian jitter of each item vector v_i around its prototype.
    pub item_noise: f64,
    /// Gaussian jitter of each user's preference pref_{u,c} around proto_c.
    pub user_noise: f64,
    pub relation_edges_per_item: usize,
    pub target_behavior: Option<usize>,
    pub eval_negatives: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 200,
            items: 300,
            behaviors: 2,
            relations: 2,
            shared_interests: 2,
            specific_interests: 2,
            interactions_per_user: 12,
            correlation: 0.5,
            interests_per_user: 2,
            prototype_dim: 16,
            sharpness: 6.0,
            item_noise: 0.0,
            user_noise: 0.0,
            relation_edges_per_item: 3,
            target_behavior: None,
            eval_negatives: true,
        }
    }
}

/// Planted structure kept alongside a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Planted interest of each item.
    pub item_interest: Vec<usize>,
    /// `None` for shared interests, `Some(k)` for interests specific to behavior k.
    pub interest_owner: Vec<Option<usize>>,
}

impl GroundTruth {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# interest\towner (-1 = shared)\n");
        for (c, owner) in self.interest_owner.iter().enumerate() {
            let o = owner.map_or(-1, |k| k as i64);
            s.push_str(&format!("interest\t{c}\t{o}\n"));
        }
        s.push_str("# item\tinterest\n");
        for (i, c) in self.item_interest.iter().enumerate() {
            s.push_str(&format!("item\t{i}\t{c}\n"));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<GroundTruth> {
        let mut item_interest = Vec::new();
        let mut interest_owner = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || CkmlError::data_at("malformed ground-truth line", n + 1);
            if f.len() != 3 {
                return Err(bad());
            }
            let idx: usize = f[1].parse().map_err(|_| bad())?;
            let val: i64 = f[2].parse().map_err(|_| bad())?;
            match f[0] {
                "interest" if idx == interest_owner.len() => {
                    interest_owner.push(usize::try_from(val).ok())
                }
                "item" if idx == item_interest.len() && val >= 0 => item_interest.push(val as usize),
                _ => return Err(bad()),
            }
        }
        Ok(GroundTruth { item_interest, interest_owner })
    }

    /// Planted interests available under behavior `k`.
    pub fn pool(&self, k: usize) -> Vec<usize> {
        self.interest_owner
            .iter()
            .enumerate()
            .filter(|(_, o)| o.is_none() || **o == Some(k))
            .map(|(c, _)| c)
            .collect()
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CkmlError::Config(format!("synthetic: {m}")));
        if self.users == 0 || self.items == 0 || self.behaviors == 0 {
            return fail("users, items and behaviors must be positive");
        }
        if self.relations == 0 {
            return fail("at least one relation is required");
        }
        if self.interactions_per_user == 0 || self.interactions_per_user > self.items {
            return fail("interactions per user must lie in [1, items]");
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return fail("correlation must lie in [0, 1]");
        }
        if self.specific_interests == 0 && self.shared_interests == 0 {
            return fail("no planted interests");
        }
        let total = self.shared_interests + self.behaviors * self.specific_interests;
        if total > self.items {
            return fail("more planted interests than items");
        }
        if self.interests_per_user == 0 {
            return fail("interests per user must be positive");
        }
        if self.target_behavior.is_some_and(|t| t >= self.behaviors) {
            return fail("target behavior out of range");
        }
        if !(self.item_noise >= 0.0 && self.user_noise >= 0.0) {
            return fail("noise levels must be non-negative");
        }
        if self.prototype_dim == 0 {
            return fail("prototype dimension must be positive");
        }
        Ok(())
    }
}

fn sparse_mixture(pool: &[usize], picks: usize, n_total: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w = vec![0.0; n_total];
    if pool.is_empty() {
        return w;
    }
    let chosen: Vec<usize> = pool.choose_multiple(rng, picks.min(pool.len())).copied().collect();
    let raw: Vec<f64> = chosen.iter().map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    for (c, r) in chosen.iter().zip(raw) {
        w[*c] = r / total;
    }
    w
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit vector along `base` plus isotropic noise of scale `noise / √dim`.
fn jittered(base: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if noise == 0.0 {
        return base.to_vec();
    }
    let scale = noise / (base.len() as f64).sqrt();
    unit(
        base.iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(rng);
                x + scale * z
            })
            .collect(),
    )
}

pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k_count = config.behaviors;
    let n_interests = config.shared_interests + k_count * config.specific_interests;

    let interest_owner: Vec<Option<usize>> = (0..config.shared_interests)
        .map(|_| None)
        .chain((0..k_count).flat_map(|k| (0..config.specific_interests).map(move |_| Some(k))))
        .collect();

    let prototypes: Vec<Vec<f64>> = (0..n_interests)
        .map(|_| {
            let v: Vec<f64> = (0..config.prototype_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            unit(v)
        })
        .collect();

    // balanced random assignment: every interest owns at least one item
    let mut item_interest: Vec<usize> = (0..config.items).map(|i| i % n_interests).collect();
    item_interest.shuffle(&mut rng);
    let item_vecs: Vec<Vec<f64>> = item_interest
        .iter()
        .map(|&c| jittered(&prototypes[c], config.item_noise, &mut rng))
        .collect();

    let ground_truth = GroundTruth { item_interest: item_interest.clone(), interest_owner };
    let shared_pool: Vec<usize> = (0..config.shared_interests).collect();
    let mut records = Vec::new();
    for user in 0..config.users {
        // one preference per interest, reused by every behavior
        let prefs: Vec<Vec<f64>> = prototypes
            .iter()
            .map(|p| jittered(p, config.user_noise, &mut rng))
            .collect();
        let base = sparse_mixture(&shared_pool, config.interests_per_user, n_interests, &mut rng);
        let mut user_records = Vec::new();
        for k in 0..k_count {
            let pool = ground_truth.pool(k);
            let own = sparse_mixture(&pool, config.interests_per_user, n_interests, &mut rng);
            let rho = if shared_pool.is_empty() { 0.0 } else { config.correlation };
            let mix: Vec<f64> = base.iter().zip(&own).map(|(b, o)| rho * b + (1.0 - rho) * o).collect();
            // only interests in the mixture drive sampling
            let weights: Vec<(usize, f64)> = item_vecs
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let w: f64 = mix
                        .iter()
                        .enumerate()
                        .filter(|(_, m)| **m > 0.0)
                        .map(|(c, m)| m * (config.sharpness * (dot(&prefs[c], v) - 1.0)).exp())
                        .sum();
                    (i, w)
                })
                .collect();
            let chosen = weights
                .choose_multiple_weighted(&mut rng, config.interactions_per_user, |(_, w)| *w)
                .map_err(|e| CkmlError::Config(format!("synthetic sampling: {e}")))?;
            for &(item, _) in chosen {
                user_records.push((item, k));
            }
        }
        user_records.shuffle(&mut rng);
        for (pos, (item, behavior)) in user_records.into_iter().enumerate() {
            records.push(InteractionRecord { user, item, behavior, timestamp: pos as u64 + 1 });
        }
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_interests];
    for (i, &c) in item_interest.iter().enumerate() {
        members[c].push(i);
    }
    let mut relations = Vec::new();
    for relation in 0..config.relations {
        for item in 0..config.items {
            let peers: Vec<usize> = members[item_interest[item]]
                .iter()
                .copied()
                .filter(|&j| j != item)
                .collect();
            for &other in peers.choose_multiple(&mut rng, config.relation_edges_per_item) {
                relations.push(ItemRelationRecord { item_a: item, item_b: other, relation });
            }
        }
    }

    let dims = Dims {
        users: config.users,
        items: config.items,
        behaviors: config.behaviors,
        relations: config.relations,
    };
    let target = config.target_behavior.unwrap_or(k_count - 1);
    let mut ds = Dataset::from_records(dims, &records, &relations, target, seed, config.eval_negatives)?;
    ds.ground_truth = Some(ground_truth);
    Ok(ds)
}
