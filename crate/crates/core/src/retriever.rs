//! First-stage retrievers of controllable strength. They feed the judgement
//! pool and supply hard-negative candidates.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::data::{Document, Query, RankedList};
use crate::error::{Error, Result};
use crate::rng;
use crate::scorer::{pair_features, DifferentiableScorer};
use crate::world::{dot, LatentSpace, World};

#[derive(Debug, Clone)]
pub enum Retriever {
    /// True latent similarity plus Gaussian noise. The noise for a pair is
    /// keyed by `(seed, query_id, doc_id)`, so the retriever is a fixed
    /// ranking function.
    OracleNoisy {
        sigma: f64,
        seed: u64,
        latent: Arc<LatentSpace>,
    },
    /// Inner product over the first `dims` features only.
    FeatureSubset { dims: usize },
    Trained(DifferentiableScorer),
}

impl Retriever {
    pub fn oracle_noisy(world: &World, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("oracle noise sigma {sigma} must be >= 0")));
        }
        Ok(Retriever::OracleNoisy {
            sigma,
            seed,
            latent: Arc::clone(&world.latent),
        })
    }

    pub fn feature_subset(dims: usize, feature_dim: usize) -> Result<Self> {
        if dims < 1 || dims > feature_dim {
            return Err(Error::Config(format!(
                "feature subset size {dims} outside 1..={feature_dim}"
            )));
        }
        Ok(Retriever::FeatureSubset { dims })
    }

    pub fn score(&self, query: &Query, doc: &Document) -> Result<f64> {
        let (qf, df) = (query.features.as_slice(), doc.features.as_slice());
        if qf.len() != df.len() {
            return Err(Error::Dimension {
                expected: qf.len(),
                actual: df.len(),
            });
        }
        match self {
            Retriever::OracleNoisy { sigma, seed, latent } => {
                let sim = latent.similarity(&query.query_id, &doc.doc_id)?;
                if *sigma == 0.0 {
                    return Ok(sim);
                }
                let mut rng = rng::stream(*seed, &[&query.query_id, &doc.doc_id]);
                let eps: f64 = StandardNormal.sample(&mut rng);
                Ok(sim + sigma * eps)
            }
            Retriever::FeatureSubset { dims } => {
                if *dims > qf.len() {
                    return Err(Error::Dimension {
                        expected: *dims,
                        actual: qf.len(),
                    });
                }
                Ok(dot(&qf[..*dims], &df[..*dims]))
            }
            Retriever::Trained(scorer) => scorer.forward(&pair_features(query, doc)?),
        }
    }

    /// Scores the whole corpus and keeps the top `k`, ties by doc id.
    pub fn retrieve(&self, query: &Query, corpus: &[Document], k: usize) -> Result<RankedList> {
        let scores = corpus
            .iter()
            .map(|d| Ok((d.doc_id.as_str(), self.score(query, d)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(RankedList::from_scores(query.query_id.clone(), scores)?.truncated(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureVector;
    use crate::world::{generate_world, RelevanceRule, WorldConfig};

    fn world() -> World {
        generate_world(&WorldConfig {
            n_docs: 150,
            n_train: 5,
            n_dev: 1,
            n_test: 1,
            feature_dim: 6,
            latent_dim: 4,
            relevance: RelevanceRule::TopM(5),
            seed: 11,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn noise_free_oracle_ranks_by_similarity() {
        let w = world();
        let r = Retriever::oracle_noisy(&w, 0.0, 1).unwrap();
        let q = &w.train[0];
        let list = r.retrieve(q, &w.corpus, w.corpus.len()).unwrap();
        let sims: Vec<f64> = list
            .doc_ids()
            .map(|d| w.latent.similarity(&q.query_id, d).unwrap())
            .collect();
        assert!(sims.windows(2).all(|p| p[0] >= p[1]));
        let top: std::collections::BTreeSet<String> =
            list.top(5).iter().map(|e| e.doc_id.clone()).collect();
        assert_eq!(Some(&top), w.truth.relevant(&q.query_id));
    }

    #[test]
    fn full_subset_is_inner_product() {
        let q = Query {
            query_id: "q".into(),
            features: FeatureVector::new(vec![1.0, 2.0, 3.0]).unwrap(),
        };
        let d = Document {
            doc_id: "d".into(),
            features: FeatureVector::new(vec![0.5, -1.0, 2.0]).unwrap(),
        };
        let r = Retriever::feature_subset(3, 3).unwrap();
        assert_eq!(r.score(&q, &d).unwrap(), 0.5 - 2.0 + 6.0);
        let r = Retriever::feature_subset(1, 3).unwrap();
        assert_eq!(r.score(&q, &d).unwrap(), 0.5);
        assert!(Retriever::feature_subset(4, 3).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let q = Query {
            query_id: "q".into(),
            features: FeatureVector::new(vec![1.0, 2.0]).unwrap(),
        };
        let d = Document {
            doc_id: "d".into(),
            features: FeatureVector::new(vec![1.0]).unwrap(),
        };
        let r = Retriever::FeatureSubset { dims: 1 };
        assert!(matches!(r.score(&q, &d), Err(Error::Dimension { .. })));
    }

    #[test]
    fn retrieval_is_reproducible_and_prefix_closed() {
        let w = world();
        let r = Retriever::oracle_noisy(&w, 0.7, 9).unwrap();
        let q = &w.test[0];
        let full = r.retrieve(q, &w.corpus, w.corpus.len()).unwrap();
        assert_eq!(full, r.retrieve(q, &w.corpus, w.corpus.len()).unwrap());
        let mut ids: Vec<&str> = full.doc_ids().collect();
        ids.sort_unstable();
        let mut corpus_ids: Vec<&str> = w.corpus.iter().map(|d| d.doc_id.as_str()).collect();
        corpus_ids.sort_unstable();
        assert_eq!(ids, corpus_ids);
        for k in [1, 10, 50] {
            assert_eq!(r.retrieve(q, &w.corpus, k).unwrap().entries(), full.top(k));
        }
    }
}
