//! Hyperparameters and their validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CkmlError, Result};

/// Neighborhood aggregator used on relation graphs and for the final
/// aggregation of routed embeddings. All variants preserve width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    /// Degree-normalized neighbor sum, no transform.
    Light,
    /// (neighbors + self) · W, no activation.
    Gccf,
    /// LeakyReLU(neighbors · W).
    Gcn,
    /// LeakyReLU((neighbors + self) · W₁ + (neighbors ∘ self) · W₂).
    Ngcf,
}

impl Aggregator {
    pub fn weight_count(self) -> usize {
        match self {
            Aggregator::Light => 0,
            Aggregator::Gccf | Aggregator::Gcn => 1,
            Aggregator::Ngcf => 2,
        }
    }
}

impl FromStr for Aggregator {
    type Err = CkmlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(Aggregator::Light),
            "gccf" => Ok(Aggregator::Gccf),
            "gcn" => Ok(Aggregator::Gcn),
            "ngcf" => Ok(Aggregator::Ngcf),
            other => Err(CkmlError::Config(format!("unknown aggregator '{other}'"))),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Aggregator::Light => "light",
            Aggregator::Gccf => "gccf",
            Aggregator::Gcn => "gcn",
            Aggregator::Ngcf => "ngcf",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub specific_interests: usize,
    pub shared_interests: usize,
    pub temperature: f64,
    pub routing_iterations: usize,
    pub relation_layers: usize,
    pub behavior_layers: usize,
    pub heads: usize,
    pub aggregator: Aggregator,
    pub leaky_slope: f64,
    pub time_embedding: bool,
    pub time_buckets: usize,
    /// Random interest initialization instead of relation-graph extraction.
    pub no_cie: bool,
    /// Uniform allocation and behavior summation instead of routing and attention.
    pub no_fbc: bool,
    /// One unified interest of full width.
    pub no_mi: bool,
    pub shared_only: bool,
    pub specific_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 16,
            specific_interests: 2,
            shared_interests: 2,
            temperature: 1.0,
            routing_iterations: 2,
            relation_layers: 1,
            behavior_layers: 1,
            heads: 2,
            aggregator: Aggregator::Light,
            leaky_slope: 0.2,
            time_embedding: true,
            time_buckets: 4,
            no_cie: false,
            no_fbc: false,
            no_mi: false,
            shared_only: false,
            specific_only: false,
        }
    }
}

/// Resolved interest structure after ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterestLayout {
    pub specific: usize,
    pub shared: usize,
    pub width: usize,
}

impl InterestLayout {
    pub fn total(&self) -> usize {
        self.specific + self.shared
    }

    pub fn specific_cols(&self) -> usize {
        self.specific * self.width
    }

    pub fn shared_cols(&self) -> usize {
        self.shared * self.width
    }

    pub fn stack_cols(&self) -> usize {
        self.total() * self.width
    }
}

impl ModelConfig {
    pub fn interest_layout(&self) -> InterestLayout {
        if self.no_mi {
            return InterestLayout { specific: 0, shared: 1, width: self.embedding_dim };
        }
        let total = self.specific_interests + self.shared_interests;
        InterestLayout {
            specific: self.specific_interests,
            shared: self.shared_interests,
            width: self.embedding_dim.checked_div(total).unwrap_or(0),
        }
    }

    /// Whether specific/shared blocks take part in the model.
    pub fn active_blocks(&self) -> (bool, bool) {
        let layout = self.interest_layout();
        (
            layout.specific > 0 && !self.shared_only,
            layout.shared > 0 && !self.specific_only,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CkmlError::Config(m));
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be positive".into());
        }
        let layout = self.interest_layout();
        if layout.total() == 0 {
            return fail("at least one interest is required".into());
        }
        if self.embedding_dim % layout.total() != 0 {
            return fail(format!(
                "embedding_dim {} not divisible by interest count {}",
                self.embedding_dim,
                layout.total()
            ));
        }
        if self.shared_only && self.specific_only {
            return fail("shared_only and specific_only are exclusive".into());
        }
        let (spe, sha) = self.active_blocks();
        if !spe && !sha {
            return fail("ablation leaves no active interest block".into());
        }
        if sha && !self.no_fbc && (self.heads == 0 || layout.width % self.heads != 0) {
            return fail(format!(
                "heads {} must divide interest width {}",
                self.heads, layout.width
            ));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.routing_iterations == 0 {
            return fail("routing_iterations must be at least 1".into());
        }
        if self.behavior_layers == 0 {
            return fail("behavior_layers must be at least 1".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return fail("leaky_slope must lie in (0, 1)".into());
        }
        if self.time_buckets == 0 {
            return fail("time_buckets must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Ranking-loss weight per behavior; length must equal the behavior count.
    pub behavior_weights: Vec<f64>,
    pub relation_weight: f64,
    pub l2: f64,
    pub learning_rate: f64,
    /// Step size is learning_rate · decay^epoch.
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub patience: usize,
    pub deterministic: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            behavior_weights: Vec::new(),
            relation_weight: 0.1,
            l2: 1e-4,
            learning_rate: 1e-3,
            decay: 0.96,
            batch_size: 64,
            epochs: 100,
            seed: 0,
            patience: 20,
            deterministic: true,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, behaviors: Option<usize>) -> Result<()> {
        let fail = |m: String| Err(CkmlError::Config(m));
        if let Some(k) = behaviors {
            if self.behavior_weights.len() != k {
                return fail(format!(
                    "behavior_weights has {} entries, dataset has {k} behaviors",
                    self.behavior_weights.len()
                ));
            }
        }
        if self.behavior_weights.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return fail("behavior weights must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.relation_weight) {
            return fail("relation_weight must lie in [0, 1]".into());
        }
        if !(self.l2 >= 0.0) {
            return fail("l2 must be non-negative".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive".into());
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail("decay must lie in (0, 1]".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        if self.seed > i64::MAX as u64 {
            return fail(format!("seed {} exceeds the 63-bit range of config files", self.seed));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub top_n: usize,
    /// Validate every this many epochs (0 disables validation during fit).
    pub eval_every: usize,
    /// Report every behavior, not just the target one.
    pub all_behaviors: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { top_n: 10, eval_every: 1, all_behaviors: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl HyperConfig {
    pub fn validate(&self, behaviors: Option<usize>) -> Result<()> {
        self.model.validate()?;
        self.train.validate(behaviors)?;
        if self.eval.top_n == 0 {
            return Err(CkmlError::Config("top_n must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CkmlError::Config(e.to_string()))
    }
}
