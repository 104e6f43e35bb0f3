//! Command-line front end: `synth`, `train`, `eval`, `gradcheck`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, HyperConfig, ModelConfig, TrainConfig};
use crate::dataio::Dataset;
use crate::error::{CkmlError, Result};
use crate::evaluator::interest_center_distance;
use crate::model::{GraphContext, Model};
use crate::synthetic::{generate_synthetic, SynthConfig};
use crate::trainer::{fit, gradcheck_batch, gradient_check, loss_weights, Checkpoint};

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
const GRADCHECK_EPSILON: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "ckml", version, about = "Multi-behavior multi-interest recommender")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted interests.
    Synth(Common),
    /// Train a model and write a checkpoint plus JSONL metrics.
    Train(Common),
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest; defaults to the dataset described by --config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck(Common),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, action = ArgAction::Set)]
    pub deterministic: Option<bool>,
}

/// Where the data comes from and where outputs go. Relative paths resolve
/// against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset manifest; when absent the `synth` section generates one.
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { manifest: None, out: PathBuf::from("out"), synth: SynthConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CkmlError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| CkmlError::io(path, e))?;
        let mut cfg = RunConfig::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Behavior weights are checked against the synthetic behavior count
    /// when given; training additionally requires them to be present.
    pub fn validate(&self) -> Result<()> {
        let synthetic = self.data.manifest.is_none();
        let behaviors = (synthetic && !self.train.behavior_weights.is_empty()).then_some(self.data.synth.behaviors);
        self.hyper().validate(behaviors)?;
        if synthetic {
            self.data.synth.validate()?;
        }
        Ok(())
    }

    pub fn hyper(&self) -> HyperConfig {
        HyperConfig { model: self.model.clone(), train: self.train.clone(), eval: self.eval.clone() }
    }

    /// Applies command-line overrides and re-validates.
    pub fn apply(&mut self, common: &Common) -> Result<()> {
        if let Some(s) = common.seed {
            self.train.seed = s;
        }
        if let Some(w) = common.workers {
            self.train.workers = w;
        }
        if let Some(d) = common.deterministic {
            self.train.deterministic = d;
        }
        if let Some(out) = &common.out {
            self.data.out = std::path::absolute(out).map_err(|e| CkmlError::io(out, e))?;
        }
        self.validate()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.base_dir.join(&self.data.out)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data.manifest {
            Some(m) => Dataset::load(&self.base_dir.join(m)),
            None => generate_synthetic(&self.data.synth, self.train.seed),
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(common)?;
    Ok(cfg)
}

fn resolved_hyper(cfg: &RunConfig, dataset: &Dataset) -> Result<HyperConfig> {
    let hyper = cfg.hyper();
    hyper.validate(Some(dataset.dims.behaviors))?;
    Ok(hyper)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CkmlError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CkmlError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CkmlError::io(path, e))
}

fn jsonl(lines: &[String]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

pub fn cmd_synth(common: &Common) -> Result<PathBuf> {
    let cfg = load_config(common)?;
    let ds = generate_synthetic(&cfg.data.synth, cfg.train.seed)?;
    let manifest = ds.save(&cfg.out_dir())?;
    println!("{}", manifest.display());
    println!("hash {}", ds.content_hash());
    Ok(manifest)
}

pub fn cmd_train(common: &Common) -> Result<PathBuf> {
    let cfg = load_config(common)?;
    let dataset = cfg.load_dataset()?;
    let hyper = resolved_hyper(&cfg, &dataset)?;
    let outcome = fit(&dataset, &hyper)?;
    let out = cfg.out_dir();
    let ckpt = out.join("checkpoint.ckml");
    if let Some(dir) = ckpt.parent() {
        fs::create_dir_all(dir).map_err(|e| CkmlError::io(dir, e))?;
    }
    outcome.checkpoint.save(&ckpt)?;
    write_text(&out.join("metrics.jsonl"), &jsonl(&outcome.log))?;
    println!("checkpoint {} (epoch {})", ckpt.display(), outcome.best_epoch);
    if let Some(ndcg) = outcome.best_ndcg {
        println!("best ndcg@{} {ndcg:.6}", hyper.eval.top_n);
    }
    Ok(ckpt)
}

pub fn cmd_eval(common: &Common, checkpoint: &Path, manifest: Option<&Path>, n: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let dataset = match manifest {
        Some(m) => Dataset::load(m)?,
        None => cfg.load_dataset()?,
    };
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut trainer = ckpt.restore(&dataset)?;
    if let Some(n) = n {
        trainer.hyper.eval.top_n = n;
    }
    if let Some(w) = common.workers {
        trainer.hyper.train.workers = w;
    }
    trainer.hyper.validate(Some(dataset.dims.behaviors))?;
    let report = trainer.evaluate(&dataset)?;
    for m in &report.behaviors {
        println!(
            "behavior {}: HR@{n} {:.6}  NDCG@{n} {:.6}  users {}",
            m.behavior,
            m.hr,
            m.ndcg,
            m.users,
            n = report.n
        );
    }
    let out = cfg.out_dir();
    write_text(&out.join("eval.jsonl"), &jsonl(&report.to_jsonl(ckpt.epoch)))?;
    let layout = trainer.model.layout();
    if layout.total() >= 2 {
        let emb = trainer.model.embed(&trainer.ctx)?;
        let dist = interest_center_distance(&emb.item_interests[dataset.target_behavior], layout.width)?;
        let mut tsv = String::from("# item\tdistance\n");
        for (i, d) in dist.per_item.iter().enumerate() {
            tsv.push_str(&format!("{i}\t{d}\n"));
        }
        write_text(&out.join("interest_distance.tsv"), &tsv)?;
        let s = &dist.summary;
        println!("interest distance mean {:.6} p10 {:.6} p50 {:.6} p90 {:.6}", s.mean, s.p10, s.p50, s.p90);
    }
    Ok(())
}

/// Returns whether every group passed.
pub fn cmd_gradcheck(common: &Common) -> Result<bool> {
    let cfg = load_config(common)?;
    let dataset = cfg.load_dataset()?;
    let hyper = resolved_hyper(&cfg, &dataset)?;
    let model = Model::new(&hyper.model, dataset.dims, hyper.train.seed)?;
    let ctx = GraphContext::new(&dataset, hyper.model.time_buckets);
    let batch = gradcheck_batch(&dataset, hyper.train.seed);
    let report = gradient_check(&model, &ctx, &batch, &loss_weights(&hyper), GRADCHECK_EPSILON, None)?;
    println!("{report}");
    let pass = report.passes(GRADCHECK_THRESHOLD);
    for g in report.failing(GRADCHECK_THRESHOLD) {
        eprintln!("gradient mismatch in {}", g.name);
    }
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Synth(c) => cmd_synth(c).map(|_| 0),
        Command::Train(c) => cmd_train(c).map(|_| 0),
        Command::Eval { common, checkpoint, manifest, n } => {
            cmd_eval(common, checkpoint, manifest.as_deref(), *n).map(|_| 0)
        }
        Command::Gradcheck(c) => cmd_gradcheck(c).map(|pass| if pass { 0 } else { 1 }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[data]\nfoo = 1\n").is_err());
        assert!(RunConfig::parse("[trian]\nepochs = 1\n").is_err());
    }

    #[test]
    fn hyper_invariants_checked_at_parse() {
        assert!(RunConfig::parse("[model]\nembedding_dim = 10\n").is_err());
        assert!(RunConfig::parse("[train]\nbehavior_weights = [1.0]\n").is_err());
        assert!(RunConfig::parse("[train]\nbehavior_weights = [0.5, 1.0]\n").is_ok());
        assert!(RunConfig::parse("[data]\nmanifest = \"m.txt\"\n[train]\nbehavior_weights = [1.0]\n").is_ok());
    }

    #[test]
    fn overrides_apply_and_revalidate() {
        let mut cfg = RunConfig::default();
        let common = Common { seed: Some(7), workers: Some(3), deterministic: Some(false), ..Common::default() };
        cfg.apply(&common).unwrap();
        assert_eq!((cfg.train.seed, cfg.train.workers, cfg.train.deterministic), (7, 3, false));
        let bad = Common { workers: Some(0), ..Common::default() };
        assert!(cfg.apply(&bad).is_err());
    }

    #[test]
    fn cli_parses_flags() {
        let cli = Cli::try_parse_from(["ckml", "eval", "--checkpoint", "c.ckml", "--n", "5", "--deterministic", "true"])
            .unwrap();
        match cli.command {
            Command::Eval { n, common, .. } => {
                assert_eq!(n, Some(5));
                assert_eq!(common.deterministic, Some(true));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
