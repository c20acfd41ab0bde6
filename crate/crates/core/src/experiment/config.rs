//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::scorer::{Architecture, OptimizerKind};
use crate::training::{Regime, TrainConfig};
use crate::world::{PoolingMode, PoolingParams, RelevanceRule, WorldConfig};

/// Every accepted key with its default; `None` marks a required key.
const KEYS: &[(&str, Option<&str>)] = &[
    ("seeds", None),
    ("world.seed", None),
    ("world.n_docs", None),
    ("world.n_train", None),
    ("world.n_dev", None),
    ("world.n_test", None),
    ("world.feature_dim", None),
    ("world.latent_dim", None),
    ("world.n_topics", Some("0")),
    ("world.topic_spread", Some("1")),
    ("world.top_m", Some("5")),
    ("world.rel_threshold", Some("none")),
    ("world.min_rel", Some("1")),
    ("world.sigma_feat", Some("0.3")),
    ("pool.retriever", Some("feature_subset")),
    ("pool.subset_dims", Some("2")),
    ("pool.sigma", Some("1")),
    ("pool.seed", Some("1")),
    ("pool.depth", Some("10")),
    ("pool.budget", Some("1")),
    ("pool.mode", Some("deterministic")),
    ("sampler.sigma", Some("0.6")),
    ("sampler.seed", Some("1")),
    ("retrieve.depth", Some("100")),
    ("train.regime", Some("naive")),
    ("train.arch", Some("linear")),
    ("train.hidden", Some("16")),
    ("train.tau", Some("1")),
    ("train.eta", Some("0.5")),
    ("train.clamp", Some("20")),
    ("train.steps", Some("1000")),
    ("train.batch_size", Some("32")),
    ("train.negatives_per_positive", Some("1")),
    ("train.top_n", Some("50")),
    ("train.optimizer", Some("adam")),
    ("train.lr", Some("0.01")),
    ("train.beta1", Some("0.9")),
    ("train.beta2", Some("0.999")),
    ("train.eps", Some("1e-8")),
    ("train.eval_every", Some("0")),
    ("train.patience", Some("0")),
    ("eval.depth", Some("100")),
    ("eval.metrics", Some("mrr@10,mrr@100,ndcg@10,ndcg@100,recall@100")),
    ("output.dir", Some("out")),
];

/// Retriever used to build the judgement pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolerSpec {
    FeatureSubset { dims: usize },
    OracleNoisy { sigma: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub world: WorldConfig,
    pub pooler: PoolerSpec,
    pub pooling: PoolingParams,
    /// Noise and seed of the strong (hard-negative) retriever.
    pub sampler_sigma: f64,
    pub sampler_seed: u64,
    pub retrieve_depth: usize,
    pub arch: Architecture,
    /// `seed` is filled per run.
    pub train: TrainConfig,
    pub eval_depth: usize,
    pub metrics: Vec<(Metric, usize)>,
    pub output_dir: PathBuf,
    raw: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config(format!("line {}: unknown key `{key}`", i + 1)));
            }
            if raw.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Self::from_raw(raw)
    }

    /// A copy with one key replaced.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        let mut raw = self.raw.clone();
        raw.insert(key.to_string(), value.to_string());
        Self::from_raw(raw)
    }

    /// The value in effect for `key`, default included.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.raw.get(key).map(String::as_str).or_else(|| {
            KEYS.iter().find(|(k, _)| *k == key).and_then(|(_, d)| *d)
        })
    }

    /// Every `train.*` key with its effective value, one `key=value` per
    /// line.
    pub fn train_echo(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS.iter().filter(|(k, _)| k.starts_with("train.")) {
            let _ = writeln!(s, "{k}={}", self.get(k).unwrap_or(""));
        }
        s
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    fn from_raw(raw: BTreeMap<String, String>) -> Result<Self> {
        let r = Reader { raw: &raw };
        let seeds = parse_seeds(r.str("seeds")?)?;

        let relevance = match r.str("world.rel_threshold")? {
            "none" => RelevanceRule::TopM(r.parse("world.top_m")?),
            _ => RelevanceRule::Threshold(r.parse("world.rel_threshold")?),
        };
        let world = WorldConfig {
            n_docs: r.parse("world.n_docs")?,
            n_train: r.parse("world.n_train")?,
            n_dev: r.parse("world.n_dev")?,
            n_test: r.parse("world.n_test")?,
            feature_dim: r.parse("world.feature_dim")?,
            latent_dim: r.parse("world.latent_dim")?,
            n_topics: r.parse("world.n_topics")?,
            topic_spread: r.parse("world.topic_spread")?,
            relevance,
            min_rel: r.parse("world.min_rel")?,
            sigma_feat: r.parse("world.sigma_feat")?,
            seed: r.parse("world.seed")?,
        };
        world.validate()?;

        let pooler = match r.str("pool.retriever")? {
            "feature_subset" => PoolerSpec::FeatureSubset {
                dims: r.parse("pool.subset_dims")?,
            },
            "oracle_noisy" => PoolerSpec::OracleNoisy {
                sigma: r.parse("pool.sigma")?,
                seed: r.parse("pool.seed")?,
            },
            other => return Err(bad("pool.retriever", other, "feature_subset or oracle_noisy")),
        };
        if let PoolerSpec::FeatureSubset { dims } = pooler {
            if dims < 1 || dims > world.feature_dim {
                return Err(Error::Config(format!(
                    "pool.subset_dims = {dims} outside 1..={}",
                    world.feature_dim
                )));
            }
        }
        let budget = match r.str("pool.budget")? {
            "inf" => None,
            _ => Some(r.parse::<usize>("pool.budget")?),
        };
        let mode = match r.str("pool.mode")? {
            "deterministic" => PoolingMode::Deterministic,
            "stochastic" => PoolingMode::Stochastic {
                seed: r.parse("pool.seed")?,
            },
            other => return Err(bad("pool.mode", other, "deterministic or stochastic")),
        };
        let pooling = PoolingParams {
            depth: r.parse("pool.depth")?,
            budget,
            mode,
        };
        if pooling.depth < 1 || budget == Some(0) {
            return Err(Error::Config("pool.depth and pool.budget must be >= 1".into()));
        }

        let arch = match r.str("train.arch")? {
            "linear" => Architecture::Linear,
            "mlp" => Architecture::Mlp {
                hidden: r.parse("train.hidden")?,
            },
            other => return Err(bad("train.arch", other, "linear or mlp")),
        };
        let regime = match r.str("train.regime")? {
            "naive" => Regime::Naive,
            "cet" => Regime::Cet,
            "denoise" => Regime::Denoise {
                eta: r.parse("train.eta")?,
            },
            "mismatch" => Regime::Mismatch,
            other => return Err(bad("train.regime", other, "naive, cet, denoise or mismatch")),
        };
        let optimizer = match r.str("train.optimizer")? {
            "adam" => OptimizerKind::AdaptiveMoment {
                beta1: r.parse("train.beta1")?,
                beta2: r.parse("train.beta2")?,
                eps: r.parse("train.eps")?,
            },
            "sgd" => OptimizerKind::Sgd,
            other => return Err(bad("train.optimizer", other, "adam or sgd")),
        };
        let train = TrainConfig {
            regime,
            tau: r.parse("train.tau")?,
            steps: r.parse("train.steps")?,
            batch_size: r.parse("train.batch_size")?,
            negatives_per_positive: r.parse("train.negatives_per_positive")?,
            top_n: r.parse("train.top_n")?,
            seed: 0,
            optimizer,
            lr: r.parse("train.lr")?,
            clamp: r.parse("train.clamp")?,
            eval_every: r.parse("train.eval_every")?,
            patience: r.parse("train.patience")?,
            freeze_selection: false,
        };
        train.validate()?;
        crate::scorer::Optimizer::new(optimizer, train.lr)?;

        let retrieve_depth: usize = r.parse("retrieve.depth")?;
        let eval_depth: usize = r.parse("eval.depth")?;
        if eval_depth < 1 || train.top_n > retrieve_depth || eval_depth > retrieve_depth {
            return Err(Error::Config(format!(
                "retrieve.depth = {retrieve_depth} must cover train.top_n = {} and eval.depth = {eval_depth}",
                train.top_n
            )));
        }
        let metrics = parse_metrics(r.str("eval.metrics")?)?;
        let output_dir = PathBuf::from(r.str("output.dir")?);

        Ok(ExperimentConfig {
            seeds,
            world,
            pooler,
            pooling,
            sampler_sigma: r.parse("sampler.sigma")?,
            sampler_seed: r.parse("sampler.seed")?,
            retrieve_depth,
            arch,
            train,
            eval_depth,
            metrics,
            output_dir,
            raw,
        })
    }
}

struct Reader<'a> {
    raw: &'a BTreeMap<String, String>,
}

impl Reader<'_> {
    fn str(&self, key: &str) -> Result<&str> {
        if let Some(v) = self.raw.get(key) {
            return Ok(v);
        }
        match KEYS.iter().find(|(k, _)| *k == key) {
            Some((_, Some(d))) => Ok(d),
            _ => Err(Error::Config(format!("missing required key `{key}`"))),
        }
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
    }
}

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("key `{key}`: `{value}` is not {expected}"))
}

/// `1,2,5` or an inclusive range `1..10`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let err = || Error::Config(format!("bad seed list `{s}`"));
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| err())?, b.trim().parse().map_err(|_| err())?);
            if a > b {
                return Err(err());
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(part.parse().map_err(|_| err())?);
        }
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if seeds.is_empty() || sorted.len() != seeds.len() {
        return Err(err());
    }
    Ok(seeds)
}

/// `mrr@10,ndcg@100,...`
pub fn parse_metrics(s: &str) -> Result<Vec<(Metric, usize)>> {
    s.split(',')
        .map(|m| {
            let m = m.trim();
            let (name, k) = m
                .split_once('@')
                .ok_or_else(|| Error::Config(format!("metric `{m}` must look like name@k")))?;
            let metric =
                Metric::parse(name).ok_or_else(|| Error::Config(format!("unknown metric `{name}`")))?;
            let k: usize = k
                .parse()
                .ok()
                .filter(|k| *k >= 1)
                .ok_or_else(|| Error::Config(format!("bad cutoff in `{m}`")))?;
            Ok((metric, k))
        })
        .collect()
}
