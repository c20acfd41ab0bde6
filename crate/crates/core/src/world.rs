//! Synthetic full-information worlds and the pooling process that turns
//! them into biased labeled datasets.
//!
//! Documents and queries live in a shared latent space. True relevance is
//! decided on the latent coordinates; models only ever see noisy features.
//! The first `latent_dim` features are latent coordinates plus Gaussian
//! noise, the remaining ones are pure noise.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{
    quantize, Document, FeatureVector, GroundTruth, LabeledDataset, Query, RankedList,
    SelectionEntry, SelectionRecord,
};
use crate::error::{Error, Result};
use crate::retriever::Retriever;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RelevanceRule {
    /// The `m` documents with the highest latent similarity are relevant.
    TopM(usize),
    /// Documents whose latent similarity reaches the threshold are relevant.
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub n_docs: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    /// 0 draws latent vectors isotropically; otherwise each item is drawn
    /// around one of `n_topics` shared topic centres.
    pub n_topics: usize,
    pub topic_spread: f64,
    pub relevance: RelevanceRule,
    pub min_rel: usize,
    pub sigma_feat: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_docs: 2000,
            n_train: 200,
            n_dev: 25,
            n_test: 50,
            feature_dim: 16,
            latent_dim: 8,
            n_topics: 0,
            topic_spread: 1.0,
            relevance: RelevanceRule::TopM(5),
            min_rel: 1,
            sigma_feat: 0.3,
            seed: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_docs", self.n_docs),
            ("n_train", self.n_train),
            ("n_dev", self.n_dev),
            ("n_test", self.n_test),
            ("feature_dim", self.feature_dim),
            ("latent_dim", self.latent_dim),
            ("min_rel", self.min_rel),
        ];
        for (name, value) in counts {
            if value < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.latent_dim > self.feature_dim {
            return Err(Error::Config(format!(
                "latent_dim {} exceeds feature_dim {}",
                self.latent_dim, self.feature_dim
            )));
        }
        if self.min_rel > self.n_docs {
            return Err(Error::Config(format!(
                "min_rel {} exceeds n_docs {}",
                self.min_rel, self.n_docs
            )));
        }
        match self.relevance {
            RelevanceRule::TopM(m) if m < 1 || m > self.n_docs => {
                return Err(Error::Config(format!("top_m {m} outside 1..={}", self.n_docs)));
            }
            RelevanceRule::Threshold(t) if !t.is_finite() => {
                return Err(Error::Config("relevance threshold must be finite".into()));
            }
            _ => {}
        }
        if !(self.sigma_feat >= 0.0 && self.sigma_feat.is_finite()) {
            return Err(Error::Config("sigma_feat must be finite and >= 0".into()));
        }
        if !(self.topic_spread >= 0.0 && self.topic_spread.is_finite()) {
            return Err(Error::Config("topic_spread must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn n_queries(&self) -> usize {
        self.n_train + self.n_dev + self.n_test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Hidden latent coordinates. Only the oracle retriever and the world
/// generator look at these.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentSpace {
    docs: HashMap<String, Vec<f64>>,
    queries: HashMap<String, Vec<f64>>,
}

impl LatentSpace {
    pub fn new(docs: HashMap<String, Vec<f64>>, queries: HashMap<String, Vec<f64>>) -> Self {
        LatentSpace { docs, queries }
    }

    pub fn similarity(&self, query_id: &str, doc_id: &str) -> Result<f64> {
        let q = self.queries.get(query_id).ok_or_else(|| Error::UnknownId {
            kind: "query",
            id: query_id.to_string(),
        })?;
        let d = self.docs.get(doc_id).ok_or_else(|| Error::UnknownId {
            kind: "document",
            id: doc_id.to_string(),
        })?;
        Ok(dot(q, d))
    }

    pub fn doc(&self, doc_id: &str) -> Option<&[f64]> {
        self.docs.get(doc_id).map(Vec::as_slice)
    }

    pub fn query(&self, query_id: &str) -> Option<&[f64]> {
        self.queries.get(query_id).map(Vec::as_slice)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full-information state: corpus, query splits, complete relevance and,
/// once pooling ran, the selection record.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub corpus: Vec<Document>,
    pub train: Vec<Query>,
    pub dev: Vec<Query>,
    pub test: Vec<Query>,
    pub truth: GroundTruth,
    pub latent: Arc<LatentSpace>,
    pub selection: Option<SelectionRecord>,
    doc_index: HashMap<String, usize>,
    query_index: HashMap<String, (Split, usize)>,
}

impl World {
    /// Assembles a world from parts, e.g. after reading files back.
    pub fn from_parts(
        config: WorldConfig,
        corpus: Vec<Document>,
        train: Vec<Query>,
        dev: Vec<Query>,
        test: Vec<Query>,
        truth: GroundTruth,
        latent: LatentSpace,
    ) -> Result<Self> {
        let mut doc_index = HashMap::with_capacity(corpus.len());
        for (i, d) in corpus.iter().enumerate() {
            if d.features.len() != config.feature_dim {
                return Err(Error::Dimension {
                    expected: config.feature_dim,
                    actual: d.features.len(),
                });
            }
            if doc_index.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::Incompatible(format!("duplicate doc id {}", d.doc_id)));
            }
        }
        let mut query_index = HashMap::new();
        for (split, queries) in [(Split::Train, &train), (Split::Dev, &dev), (Split::Test, &test)] {
            for (i, q) in queries.iter().enumerate() {
                if q.features.len() != config.feature_dim {
                    return Err(Error::Dimension {
                        expected: config.feature_dim,
                        actual: q.features.len(),
                    });
                }
                if query_index.insert(q.query_id.clone(), (split, i)).is_some() {
                    return Err(Error::Incompatible(format!(
                        "duplicate query id {}",
                        q.query_id
                    )));
                }
            }
        }
        Ok(World {
            config,
            corpus,
            train,
            dev,
            test,
            truth,
            latent: Arc::new(latent),
            selection: None,
            doc_index,
            query_index,
        })
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.doc_index.get(doc_id).map(|&i| &self.corpus[i])
    }

    pub fn query(&self, query_id: &str) -> Option<&Query> {
        self.query_index
            .get(query_id)
            .map(|&(split, i)| &self.split(split)[i])
    }

    pub fn split_of(&self, query_id: &str) -> Option<Split> {
        self.query_index.get(query_id).map(|&(s, _)| s)
    }

    pub fn split(&self, split: Split) -> &[Query] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn all_queries(&self) -> impl Iterator<Item = &Query> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

fn id_width(n: usize) -> usize {
    n.to_string().len().max(1)
}

/// Draws a world. Identical configs give bit-identical worlds.
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, &["world"]);
    let t = config.latent_dim;

    let centres: Vec<Vec<f64>> = (0..config.n_topics)
        .map(|_| (0..t).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let norm = (1.0 + config.topic_spread * config.topic_spread).sqrt();

    let draw_latent = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let noise: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
        if centres.is_empty() {
            noise.into_iter().map(quantize).collect()
        } else {
            let c = &centres[rng.random_range(0..centres.len())];
            c.iter()
                .zip(noise)
                .map(|(c, g)| quantize((c + config.topic_spread * g) / norm))
                .collect()
        }
    };
    let draw_features = |rng: &mut rand_chacha::ChaCha8Rng, z: &[f64]| -> FeatureVector {
        let values = (0..config.feature_dim)
            .map(|i| {
                let eps: f64 = StandardNormal.sample(rng);
                let base = if i < t { z[i] } else { 0.0 };
                quantize(base + config.sigma_feat * eps)
            })
            .collect();
        FeatureVector::new(values).expect("finite features")
    };

    let dw = id_width(config.n_docs);
    let mut corpus = Vec::with_capacity(config.n_docs);
    let mut doc_latent = HashMap::with_capacity(config.n_docs);
    let mut doc_latent_ordered = Vec::with_capacity(config.n_docs);
    for i in 0..config.n_docs {
        let doc_id = format!("d{:0dw$}", i + 1);
        let z = draw_latent(&mut rng);
        let features = draw_features(&mut rng, &z);
        corpus.push(Document {
            doc_id: doc_id.clone(),
            features,
        });
        doc_latent_ordered.push(z.clone());
        doc_latent.insert(doc_id, z);
    }

    let qw = id_width(config.n_queries());
    let mut splits: [Vec<Query>; 3] = Default::default();
    let mut query_latent = HashMap::with_capacity(config.n_queries());
    let mut relevant = BTreeMap::new();
    let mut counter = 0;
    for (slot, n) in [config.n_train, config.n_dev, config.n_test].into_iter().enumerate() {
        for _ in 0..n {
            counter += 1;
            let query_id = format!("q{:0qw$}", counter);
            let z = draw_latent(&mut rng);
            let features = draw_features(&mut rng, &z);

            let mut sims: Vec<(f64, usize)> = doc_latent_ordered
                .iter()
                .enumerate()
                .map(|(i, d)| (dot(&z, d), i))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let n_rel = match config.relevance {
                RelevanceRule::TopM(m) => m.max(config.min_rel),
                RelevanceRule::Threshold(theta) => sims
                    .iter()
                    .take_while(|(s, _)| *s >= theta)
                    .count()
                    .max(config.min_rel),
            };
            let rel: BTreeSet<String> = sims[..n_rel]
                .iter()
                .map(|&(_, i)| corpus[i].doc_id.clone())
                .collect();
            relevant.insert(query_id.clone(), rel);
            splits[slot].push(Query {
                query_id: query_id.clone(),
                features,
            });
            query_latent.insert(query_id, z);
        }
    }
    let [train, dev, test] = splits;
    World::from_parts(
        config.clone(),
        corpus,
        train,
        dev,
        test,
        GroundTruth::new(relevant),
        LatentSpace::new(doc_latent, query_latent),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolingMode {
    /// The pool is the pooling retriever's top-`depth` documents.
    Deterministic,
    /// Each document enters the pool independently with a probability
    /// given by a logistic map of its standardized pooling score.
    Stochastic { seed: u64 },
}

/// Pool depth and label budget. `budget = None` labels every relevant
/// document found in the pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolingParams {
    pub depth: usize,
    pub budget: Option<usize>,
    pub mode: PoolingMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingOutcome {
    pub dataset: LabeledDataset,
    pub selection: SelectionRecord,
    /// Training queries whose pool held no relevant document.
    pub dropped: Vec<String>,
}

/// Per-query logistic selection probabilities:
/// `p = 1 / (1 + exp(-(score - mean) / std))` over the query's scores.
/// A query whose scores are all equal gets `p = 0.5` everywhere.
pub fn selection_probabilities(scores: &[(String, f64)]) -> Vec<(String, f64)> {
    let n = scores.len() as f64;
    let mean = scores.iter().map(|(_, s)| s).sum::<f64>() / n;
    let var = scores.iter().map(|(_, s)| (s - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    scores
        .iter()
        .map(|(d, s)| {
            let p = if std > 0.0 {
                1.0 / (1.0 + (-(s - mean) / std).exp())
            } else {
                0.5
            };
            (d.clone(), quantize(p))
        })
        .collect()
}

/// Pools the training queries with `pooler` and labels up to `budget`
/// relevant pooled documents per query, best pooling score first. Fills
/// `world.selection`.
pub fn simulate_pooling(
    world: &mut World,
    pooler: &Retriever,
    params: PoolingParams,
) -> Result<PoolingOutcome> {
    if params.depth < 1 {
        return Err(Error::Config("pool depth must be >= 1".into()));
    }
    if params.budget == Some(0) {
        return Err(Error::Config("label budget must be >= 1".into()));
    }
    let mut positives = BTreeMap::new();
    let mut selection = BTreeMap::new();
    let mut dropped = Vec::new();

    for query in &world.train {
        let ranked = pooler.retrieve(query, &world.corpus, world.corpus.len())?;
        let mut entries = BTreeMap::new();
        let mut pooled: Vec<&str> = Vec::new();
        match params.mode {
            PoolingMode::Deterministic => {
                for e in ranked.top(params.depth) {
                    entries.insert(
                        e.doc_id.clone(),
                        SelectionEntry {
                            selected: true,
                            p_sel: 1.0,
                        },
                    );
                    pooled.push(&e.doc_id);
                }
            }
            PoolingMode::Stochastic { seed } => {
                let scores: Vec<(String, f64)> = ranked
                    .entries()
                    .iter()
                    .map(|e| (e.doc_id.clone(), e.score))
                    .collect();
                let probs = selection_probabilities(&scores);
                let mut rng = rng::stream(seed, &["pool", &query.query_id]);
                for ((doc_id, p), e) in probs.into_iter().zip(ranked.entries()) {
                    let selected = rng.random::<f64>() < p;
                    if selected {
                        pooled.push(&e.doc_id);
                    }
                    entries.insert(doc_id, SelectionEntry { selected, p_sel: p });
                }
            }
        }
        // `pooled` is in pooling-score order already.
        let budget = params.budget.unwrap_or(usize::MAX);
        let labels: BTreeSet<String> = pooled
            .iter()
            .filter(|d| world.truth.is_relevant(&query.query_id, d))
            .take(budget)
            .map(|d| d.to_string())
            .collect();
        if labels.is_empty() {
            dropped.push(query.query_id.clone());
        } else {
            positives.insert(query.query_id.clone(), labels);
        }
        selection.insert(query.query_id.clone(), entries);
    }

    let selection = SelectionRecord::new(selection);
    world.selection = Some(selection.clone());
    Ok(PoolingOutcome {
        dataset: LabeledDataset::new(positives),
        selection,
        dropped,
    })
}

/// Fraction of the top-`top_n` candidates, labeled positives excluded, that
/// are truly relevant.
pub fn false_negative_rate(
    world: &World,
    dataset: &LabeledDataset,
    candidates: &RankedList,
    top_n: usize,
) -> Result<f64> {
    if top_n > candidates.len() {
        return Err(Error::Incompatible(format!(
            "top_n {top_n} exceeds candidate list length {}",
            candidates.len()
        )));
    }
    let qid = candidates.query_id();
    let (mut total, mut relevant) = (0usize, 0usize);
    for e in candidates.top(top_n) {
        if dataset.is_positive(qid, &e.doc_id) {
            continue;
        }
        total += 1;
        if world.truth.is_relevant(qid, &e.doc_id) {
            relevant += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedRate(format!(
            "query {qid}: no unlabeled candidates in top {top_n}"
        )));
    }
    Ok(relevant as f64 / total as f64)
}

/// Mean false-negative rate over the dataset's queries that have a run.
pub fn mean_false_negative_rate(
    world: &World,
    dataset: &LabeledDataset,
    run: &crate::data::Run,
    top_n: usize,
) -> Result<f64> {
    let mut rates = Vec::new();
    for qid in dataset.queries() {
        if let Some(list) = run.get(qid) {
            rates.push(false_negative_rate(world, dataset, list, top_n.min(list.len()))?);
        }
    }
    if rates.is_empty() {
        return Err(Error::UndefinedRate("no query with candidates".into()));
    }
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_dataset;

    fn small(seed: u64) -> WorldConfig {
        WorldConfig {
            n_docs: 120,
            n_train: 12,
            n_dev: 3,
            n_test: 4,
            feature_dim: 6,
            latent_dim: 4,
            relevance: RelevanceRule::TopM(4),
            seed,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(&small(3)).unwrap();
        let b = generate_world(&small(3)).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.train, b.train);
        assert_eq!(a.truth, b.truth);
        let c = generate_world(&small(4)).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn min_rel_is_enforced() {
        let cfg = WorldConfig {
            relevance: RelevanceRule::Threshold(1e9),
            min_rel: 3,
            ..small(1)
        };
        let w = generate_world(&cfg).unwrap();
        for q in w.all_queries() {
            assert_eq!(w.truth.relevant(&q.query_id).unwrap().len(), 3);
        }
    }

    #[test]
    fn top_m_gives_exact_count() {
        let cfg = WorldConfig {
            n_docs: 2000,
            n_train: 200,
            n_dev: 25,
            n_test: 25,
            relevance: RelevanceRule::TopM(5),
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        assert_eq!(w.all_queries().count(), 250);
        for q in w.all_queries() {
            assert_eq!(w.truth.relevant(&q.query_id).unwrap().len(), 5);
        }
    }

    #[test]
    fn infeasible_config_is_rejected() {
        let cfg = WorldConfig {
            min_rel: 500,
            ..small(1)
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
        let cfg = WorldConfig {
            latent_dim: 9,
            ..small(1)
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn feature_layout_follows_latent() {
        let cfg = WorldConfig {
            sigma_feat: 0.0,
            ..small(2)
        };
        let w = generate_world(&cfg).unwrap();
        let d = &w.corpus[0];
        let z = w.latent.doc(&d.doc_id).unwrap();
        assert_eq!(&d.features.as_slice()[..4], z);
        assert!(d.features.as_slice()[4..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn exhaustive_pooling_labels_everything() {
        let mut w = generate_world(&small(5)).unwrap();
        let pooler = Retriever::FeatureSubset { dims: 2 };
        let out = simulate_pooling(
            &mut w,
            &pooler,
            PoolingParams {
                depth: 120,
                budget: None,
                mode: PoolingMode::Deterministic,
            },
        )
        .unwrap();
        assert!(out.dropped.is_empty());
        for q in &w.train {
            assert_eq!(
                out.dataset.positives(&q.query_id),
                w.truth.relevant(&q.query_id)
            );
        }
        assert!(validate_dataset(&w, &out.dataset).unwrap().is_valid());
    }

    #[test]
    fn budget_one_labels_single_positive() {
        let mut w = generate_world(&small(6)).unwrap();
        let pooler = Retriever::FeatureSubset { dims: 2 };
        let out = simulate_pooling(
            &mut w,
            &pooler,
            PoolingParams {
                depth: 30,
                budget: Some(1),
                mode: PoolingMode::Deterministic,
            },
        )
        .unwrap();
        assert!(!out.dataset.is_empty());
        for q in out.dataset.queries() {
            assert_eq!(out.dataset.positives(q).unwrap().len(), 1);
        }
        assert_eq!(out.dataset.len() + out.dropped.len(), w.train.len());
    }

    #[test]
    fn fn_rate_edge_cases() {
        let w = generate_world(&small(7)).unwrap();
        let ds = LabeledDataset::default();
        let q = &w.train[0];
        let irrelevant: Vec<(String, f64)> = w
            .corpus
            .iter()
            .filter(|d| !w.truth.is_relevant(&q.query_id, &d.doc_id))
            .take(10)
            .map(|d| (d.doc_id.clone(), 1.0))
            .collect();
        let list = RankedList::from_scores(q.query_id.clone(), irrelevant).unwrap();
        assert_eq!(false_negative_rate(&w, &ds, &list, 10).unwrap(), 0.0);
        let empty = RankedList::from_scores(q.query_id.clone(), Vec::<(String, f64)>::new()).unwrap();
        assert!(matches!(
            false_negative_rate(&w, &ds, &empty, 0),
            Err(Error::UndefinedRate(_))
        ));
    }

    #[test]
    fn logistic_probabilities_are_centred() {
        let scores: Vec<(String, f64)> = (0..5).map(|i| (format!("d{i}"), i as f64)).collect();
        let p = selection_probabilities(&scores);
        assert!((p[2].1 - 0.5).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[0].1 < w[1].1));
        let flat = vec![("a".to_string(), 3.0), ("b".to_string(), 3.0)];
        assert!(selection_probabilities(&flat).iter().all(|(_, p)| *p == 0.5));
    }
}
