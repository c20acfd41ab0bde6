//! Pairwise losses, bias-correction weights, hard-negative sampling and the
//! training regimes: naive, coupled (relevance + selection model), denoising
//! and train/eval mismatch.
//!
//! The coupled regime trains a relevance model R and a selection model S on
//! the same triples. For a triple `(q, d_i, d_j)` the weights
//!
//! ```text
//! w_r = exp((S(q, d_j) - S(q, d_i)) / tau)
//! w_s = exp((R(q, d_j) - R(q, d_i)) / tau)
//! ```
//!
//! are computed from the current parameters of the *other* model and treated
//! as constants. R minimizes the batch mean of `w_r * CE(R_i, R_j)`, S the
//! batch mean of `w_s * CE(S_i, S_j)`, and both take one descent step per
//! batch from the same pre-update scores.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;

use crate::data::{format_sig9, GroundTruth, LabeledDataset, RankedList, Run, TrainingTriple};
use crate::error::{Error, Result};
use crate::eval;
use crate::rng;
use crate::scorer::{Architecture, DifferentiableScorer, Optimizer, OptimizerKind};
use crate::world::World;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log(e^{s_i} / (e^{s_i} + e^{s_j}))`, evaluated as `softplus(s_j - s_i)`.
pub fn pairwise_ce_loss(score_i: f64, score_j: f64) -> f64 {
    softplus(score_j - score_i)
}

/// Derivatives of [`pairwise_ce_loss`] with respect to `(score_i, score_j)`.
pub fn pairwise_ce_grad(score_i: f64, score_j: f64) -> (f64, f64) {
    let s = sigmoid(score_j - score_i);
    (-s, s)
}

/// Importance weight for one training triple, always within
/// `[e^-c, e^c]` for the clamp bound `c` it was built with.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BiasWeight(f64);

impl BiasWeight {
    pub const ONE: BiasWeight = BiasWeight(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::NonFinite(format!("bias weight {value}")));
        }
        Ok(BiasWeight(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn exp_ratio(score_i: f64, score_j: f64, tau: f64, clamp: f64) -> BiasWeight {
    debug_assert!(tau > 0.0);
    BiasWeight(((score_j - score_i) / tau).clamp(-clamp, clamp).exp())
}

/// Weight for the relevance model's loss, from selection-model scores.
/// Only the ratio of the two softmax terms survives, so the corpus-wide
/// normalizer is never computed.
pub fn bias_weight_wr(s_i: f64, s_j: f64, tau: f64, clamp: f64) -> BiasWeight {
    exp_ratio(s_i, s_j, tau, clamp)
}

/// Weight for the selection model's loss, from relevance-model scores.
pub fn bias_weight_ws(r_i: f64, r_j: f64, tau: f64, clamp: f64) -> BiasWeight {
    exp_ratio(r_i, r_j, tau, clamp)
}

pub fn weighted_pairwise_loss(score_i: f64, score_j: f64, w: BiasWeight) -> f64 {
    w.0 * pairwise_ce_loss(score_i, score_j)
}

/// Gradient of [`weighted_pairwise_loss`] with `w` held constant.
pub fn weighted_pairwise_grad(score_i: f64, score_j: f64, w: BiasWeight) -> (f64, f64) {
    let (gi, gj) = pairwise_ce_grad(score_i, score_j);
    (w.0 * gi, w.0 * gj)
}

/// Borrowed feature lookup for trainers. Carries features only: no
/// relevance, no selection.
#[derive(Debug, Clone)]
pub struct FeatureStore<'a> {
    docs: HashMap<&'a str, &'a [f64]>,
    queries: HashMap<&'a str, &'a [f64]>,
}

impl<'a> FeatureStore<'a> {
    pub fn new(docs: HashMap<&'a str, &'a [f64]>, queries: HashMap<&'a str, &'a [f64]>) -> Self {
        FeatureStore { docs, queries }
    }

    pub fn from_world(world: &'a World) -> Self {
        FeatureStore {
            docs: world
                .corpus
                .iter()
                .map(|d| (d.doc_id.as_str(), d.features.as_slice()))
                .collect(),
            queries: world
                .all_queries()
                .map(|q| (q.query_id.as_str(), q.features.as_slice()))
                .collect(),
        }
    }

    pub fn pair_features_into(&self, query_id: &str, doc_id: &str, out: &mut Vec<f64>) -> Result<()> {
        let q = self.queries.get(query_id).ok_or_else(|| Error::UnknownId {
            kind: "query",
            id: query_id.to_string(),
        })?;
        let d = self.docs.get(doc_id).ok_or_else(|| Error::UnknownId {
            kind: "document",
            id: doc_id.to_string(),
        })?;
        if q.len() != d.len() {
            return Err(Error::Dimension {
                expected: q.len(),
                actual: d.len(),
            });
        }
        out.clear();
        out.extend_from_slice(q);
        out.extend_from_slice(d);
        out.extend(q.iter().zip(d.iter()).map(|(a, b)| a * b));
        Ok(())
    }

    pub fn score(&self, scorer: &DifferentiableScorer, query_id: &str, doc_id: &str) -> Result<f64> {
        let mut buf = Vec::new();
        self.pair_features_into(query_id, doc_id, &mut buf)?;
        scorer.forward_slice(&buf)
    }

    pub fn pair_dim(&self) -> usize {
        self.docs.values().next().map_or(0, |d| 3 * d.len())
    }
}

/// Endless stream of training triples. One epoch visits every (query,
/// labeled positive) pair once in shuffled order and pairs each with `k_neg`
/// negatives drawn uniformly without replacement from the query's top
/// candidates minus its labeled positives.
#[derive(Debug, Clone)]
pub struct TripleSampler {
    units: Vec<(String, String)>,
    eligible: HashMap<String, Vec<String>>,
    k_neg: usize,
    rng: ChaCha8Rng,
    pending: VecDeque<TrainingTriple>,
    order: Vec<usize>,
    cursor: usize,
    skipped: Vec<String>,
    epoch: usize,
}

pub fn sample_triples(
    dataset: &LabeledDataset,
    candidates: &Run,
    top_n: usize,
    k_neg: usize,
    rng: ChaCha8Rng,
) -> Result<TripleSampler> {
    if top_n < 1 || k_neg < 1 {
        return Err(Error::Config("top_n and negatives per positive must be >= 1".into()));
    }
    let mut units = Vec::new();
    let mut eligible = HashMap::new();
    let mut skipped = Vec::new();
    for (qid, positives) in dataset.as_map() {
        let pool: Vec<String> = candidates
            .get(qid)
            .map(|list| {
                list.top(top_n)
                    .iter()
                    .filter(|e| !positives.contains(&e.doc_id))
                    .map(|e| e.doc_id.clone())
                    .collect()
            })
            .unwrap_or_default();
        if pool.is_empty() || positives.is_empty() {
            skipped.push(qid.clone());
            continue;
        }
        units.extend(positives.iter().map(|p| (qid.clone(), p.clone())));
        eligible.insert(qid.clone(), pool);
    }
    if units.is_empty() {
        return Err(Error::Incompatible(
            "no query has both a labeled positive and an eligible negative".into(),
        ));
    }
    let order = (0..units.len()).collect();
    Ok(TripleSampler {
        units,
        eligible,
        k_neg,
        rng,
        pending: VecDeque::new(),
        order,
        cursor: usize::MAX,
        skipped,
        epoch: 0,
    })
}

impl TripleSampler {
    /// Queries left out because no eligible negative remained.
    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    pub fn epochs_started(&self) -> usize {
        self.epoch
    }

    pub fn units(&self) -> usize {
        self.units.len()
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<TrainingTriple> {
        self.by_ref().take(size).collect()
    }
}

impl Iterator for TripleSampler {
    type Item = TrainingTriple;

    fn next(&mut self) -> Option<TrainingTriple> {
        while self.pending.is_empty() {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                self.epoch += 1;
            }
            let (qid, pos) = &self.units[self.order[self.cursor]];
            self.cursor += 1;
            let pool = &self.eligible[qid];
            let k = self.k_neg.min(pool.len());
            for i in index::sample(&mut self.rng, pool.len(), k) {
                self.pending.push_back(TrainingTriple {
                    query_id: qid.clone(),
                    pos_doc_id: pos.clone(),
                    neg_doc_id: pool[i].clone(),
                });
            }
        }
        self.pending.pop_front()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime {
    Naive,
    Cet,
    Denoise { eta: f64 },
    Mismatch,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Naive => "naive",
            Regime::Cet => "cet",
            Regime::Denoise { .. } => "denoise",
            Regime::Mismatch => "mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub tau: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub top_n: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Bound on the exponent of the bias weights.
    pub clamp: f64,
    /// Dev evaluation period in steps; 0 disables it.
    pub eval_every: usize,
    /// Stop after this many dev evaluations without improvement; 0 never
    /// stops early.
    pub patience: usize,
    /// Keep the selection model fixed during coupled training.
    pub freeze_selection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Naive,
            tau: 1.0,
            steps: 1000,
            batch_size: 32,
            negatives_per_positive: 1,
            top_n: 50,
            seed: 1,
            optimizer: OptimizerKind::adam(),
            lr: 1e-2,
            clamp: 20.0,
            eval_every: 0,
            patience: 0,
            freeze_selection: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be > 0", self.tau)));
        }
        if let Regime::Denoise { eta } = self.regime {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(Error::Config(format!("eta {eta} must lie in (0, 1]")));
            }
        }
        if self.top_n < 1 || self.batch_size < 1 || self.negatives_per_positive < 1 {
            return Err(Error::Config(
                "top_n, batch size and negatives per positive must be >= 1".into(),
            ));
        }
        if !(self.clamp > 0.0) {
            return Err(Error::Config("weight clamp must be > 0".into()));
        }
        Ok(())
    }

    fn expect(&self, allowed: &[&str]) -> Result<()> {
        self.validate()?;
        if allowed.contains(&self.regime.name()) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "regime {} cannot run here (expected {})",
                self.regime.name(),
                allowed.join(" or ")
            )))
        }
    }
}

/// Relevance and selection models with independent seeded inits.
pub fn init_models(arch: Architecture, pair_dim: usize, seed: u64) -> Result<(DifferentiableScorer, DifferentiableScorer)> {
    Ok((
        DifferentiableScorer::new(arch, pair_dim, rng::derive_seed(seed, &["relevance"]))?,
        DifferentiableScorer::new(arch, pair_dim, rng::derive_seed(seed, &["selection"]))?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss_r: f64,
    pub loss_s: Option<f64>,
    pub mean_w_r: f64,
    pub mean_w_s: Option<f64>,
    pub dev_mrr: Option<f64>,
}

pub fn log_to_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,loss_R,loss_S,mean_w_r,mean_w_s,dev_mrr\n");
    let opt = |v: Option<f64>| v.map(format_sig9).unwrap_or_default();
    for e in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.step,
            format_sig9(e.loss_r),
            opt(e.loss_s),
            format_sig9(e.mean_w_r),
            opt(e.mean_w_s),
            opt(e.dev_mrr)
        );
    }
    s
}

/// Dev queries used for periodic MRR@10 checks and early stopping.
#[derive(Debug, Clone, Copy)]
pub struct DevSet<'a> {
    pub candidates: &'a Run,
    pub truth: &'a GroundTruth,
    pub depth: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub relevance: DifferentiableScorer,
    pub selection: Option<DifferentiableScorer>,
    pub log: Vec<StepLog>,
    pub skipped_queries: Vec<String>,
    /// Denoising only: queries whose filtered pool shrank to the single
    /// lowest-scored candidate.
    pub fallback_queries: Vec<String>,
}

struct Model {
    scorer: DifferentiableScorer,
    optimizer: Optimizer,
    grad: Vec<f64>,
}

impl Model {
    fn new(scorer: DifferentiableScorer, config: &TrainConfig) -> Result<Self> {
        let grad = vec![0.0; scorer.params().len()];
        Ok(Model {
            scorer,
            optimizer: Optimizer::new(config.optimizer, config.lr)?,
            grad,
        })
    }
}

/// Step-wise trainer shared by every regime. Without a selection model all
/// weights are 1 and the loop is plain pairwise training.
pub struct Trainer<'a> {
    features: &'a FeatureStore<'a>,
    sampler: TripleSampler,
    relevance: Model,
    selection: Option<Model>,
    config: TrainConfig,
    step: usize,
    batch: Vec<TrainingTriple>,
    xi: Vec<f64>,
    xj: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        features: &'a FeatureStore<'a>,
        dataset: &LabeledDataset,
        candidates: &Run,
        relevance: DifferentiableScorer,
        selection: Option<DifferentiableScorer>,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(s) = &selection {
            if s.architecture() != relevance.architecture() || s.input_dim() != relevance.input_dim() {
                return Err(Error::Config(
                    "selection model must share the relevance model's architecture".into(),
                ));
            }
        }
        let sampler = sample_triples(
            dataset,
            candidates,
            config.top_n,
            config.negatives_per_positive,
            rng::stream(config.seed, &["triples"]),
        )?;
        Ok(Trainer {
            features,
            sampler,
            relevance: Model::new(relevance, config)?,
            selection: selection.map(|s| Model::new(s, config)).transpose()?,
            config: config.clone(),
            step: 0,
            batch: Vec::new(),
            xi: Vec::new(),
            xj: Vec::new(),
        })
    }

    pub fn relevance(&self) -> &DifferentiableScorer {
        &self.relevance.scorer
    }

    pub fn selection(&self) -> Option<&DifferentiableScorer> {
        self.selection.as_ref().map(|m| &m.scorer)
    }

    pub fn skipped(&self) -> &[String] {
        self.sampler.skipped()
    }

    /// Triples used by the most recent step.
    pub fn last_batch(&self) -> &[TrainingTriple] {
        &self.batch
    }

    /// Draws one batch, computes both weighted losses from the current
    /// parameters and updates each model once.
    pub fn step(&mut self) -> Result<StepLog> {
        self.batch = self.sampler.next_batch(self.config.batch_size);
        let scale = 1.0 / self.batch.len() as f64;
        let (tau, clamp) = (self.config.tau, self.config.clamp);
        self.relevance.grad.fill(0.0);
        if let Some(s) = &mut self.selection {
            s.grad.fill(0.0);
        }
        let (mut loss_r, mut loss_s, mut sum_wr, mut sum_ws) = (0.0, 0.0, 0.0, 0.0);

        for t in &self.batch {
            self.features.pair_features_into(&t.query_id, &t.pos_doc_id, &mut self.xi)?;
            self.features.pair_features_into(&t.query_id, &t.neg_doc_id, &mut self.xj)?;
            let r_i = self.relevance.scorer.forward_slice(&self.xi)?;
            let r_j = self.relevance.scorer.forward_slice(&self.xj)?;

            let w_r = match self.selection.as_mut() {
                Some(s) => {
                    let s_i = s.scorer.forward_slice(&self.xi)?;
                    let s_j = s.scorer.forward_slice(&self.xj)?;
                    let w_s = bias_weight_ws(r_i, r_j, tau, clamp);
                    let l = weighted_pairwise_loss(s_i, s_j, w_s);
                    if !l.is_finite() {
                        return Err(diverged(self.step, t, "selection", s_i, s_j));
                    }
                    loss_s += l;
                    sum_ws += w_s.value();
                    let (gi, gj) = weighted_pairwise_grad(s_i, s_j, w_s);
                    s.scorer.accumulate_grad(&self.xi, gi * scale, &mut s.grad)?;
                    s.scorer.accumulate_grad(&self.xj, gj * scale, &mut s.grad)?;
                    bias_weight_wr(s_i, s_j, tau, clamp)
                }
                None => BiasWeight::ONE,
            };
            let l = weighted_pairwise_loss(r_i, r_j, w_r);
            if !l.is_finite() {
                return Err(diverged(self.step, t, "relevance", r_i, r_j));
            }
            loss_r += l;
            sum_wr += w_r.value();
            let (gi, gj) = weighted_pairwise_grad(r_i, r_j, w_r);
            self.relevance.scorer.accumulate_grad(&self.xi, gi * scale, &mut self.relevance.grad)?;
            self.relevance.scorer.accumulate_grad(&self.xj, gj * scale, &mut self.relevance.grad)?;
        }

        let step = self.step;
        let m = &mut self.relevance;
        m.optimizer
            .step(m.scorer.params_mut(), &m.grad)
            .map_err(|e| with_step(e, step))?;
        let has_selection = self.selection.is_some();
        if let Some(s) = &mut self.selection {
            if !self.config.freeze_selection {
                s.optimizer
                    .step(s.scorer.params_mut(), &s.grad)
                    .map_err(|e| with_step(e, step))?;
            }
        }
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            loss_r: loss_r * scale,
            loss_s: has_selection.then_some(loss_s * scale),
            mean_w_r: sum_wr * scale,
            mean_w_s: has_selection.then_some(sum_ws * scale),
            dev_mrr: None,
        })
    }

    /// Runs the configured step budget, with optional dev evaluation and
    /// early stopping. With dev evaluation on, the best-scoring relevance
    /// model is returned.
    pub fn run(mut self, dev: Option<DevSet<'_>>) -> Result<TrainOutcome> {
        let mut log = Vec::with_capacity(self.config.steps);
        let mut best: Option<(f64, DifferentiableScorer, Option<DifferentiableScorer>)> = None;
        let mut stale = 0;
        for _ in 0..self.config.steps {
            let mut entry = self.step()?;
            if let (Some(dev), true) = (dev, self.config.eval_every > 0) {
                if entry.step % self.config.eval_every == 0 {
                    let mrr = dev_mrr(self.features, &self.relevance.scorer, dev)?;
                    entry.dev_mrr = Some(mrr);
                    if best.as_ref().is_none_or(|(b, _, _)| mrr > *b) {
                        best = Some((mrr, self.relevance.scorer.clone(), self.selection().cloned()));
                        stale = 0;
                    } else {
                        stale += 1;
                    }
                }
            }
            log.push(entry);
            if self.config.patience > 0 && stale >= self.config.patience {
                break;
            }
        }
        let skipped_queries = self.sampler.skipped().to_vec();
        let (relevance, selection) = match best {
            Some((_, r, s)) => (r, s),
            None => (self.relevance.scorer, self.selection.map(|m| m.scorer)),
        };
        Ok(TrainOutcome {
            relevance,
            selection,
            log,
            skipped_queries,
            fallback_queries: Vec::new(),
        })
    }
}

fn diverged(step: usize, t: &TrainingTriple, model: &str, si: f64, sj: f64) -> Error {
    Error::Training {
        step,
        detail: format!(
            "non-finite {model} loss on ({}, {}, {}) with scores ({si}, {sj})",
            t.query_id, t.pos_doc_id, t.neg_doc_id
        ),
    }
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::Training { detail, .. } => Error::Training { step, detail },
        other => other,
    }
}

fn dev_mrr(features: &FeatureStore<'_>, scorer: &DifferentiableScorer, dev: DevSet<'_>) -> Result<f64> {
    let mut run = Run::new();
    for (qid, list) in dev.candidates {
        run.insert(qid.clone(), eval::rerank_with(features, scorer, list, dev.depth)?);
    }
    Ok(eval::mrr_at_k(&run, dev.truth, 10)?.macro_avg)
}

/// Plain pairwise training: every weight is 1 and there is no selection
/// model.
pub fn naive_train(
    features: &FeatureStore<'_>,
    dataset: &LabeledDataset,
    candidates: &Run,
    relevance: DifferentiableScorer,
    config: &TrainConfig,
    dev: Option<DevSet<'_>>,
) -> Result<TrainOutcome> {
    config.expect(&["naive"])?;
    Trainer::new(features, dataset, candidates, relevance, None, config)?.run(dev)
}

/// Coupled training of the relevance and selection models.
pub fn coupled_train(
    features: &FeatureStore<'_>,
    dataset: &LabeledDataset,
    candidates: &Run,
    relevance: DifferentiableScorer,
    selection: DifferentiableScorer,
    config: &TrainConfig,
    dev: Option<DevSet<'_>>,
) -> Result<TrainOutcome> {
    config.expect(&["cet"])?;
    Trainer::new(features, dataset, candidates, relevance, Some(selection), config)?.run(dev)
}

/// Naive training on the weak (pooling) retriever's candidates. Evaluation
/// pairs the result with the strong retriever's candidates.
pub fn mismatch_train(
    features: &FeatureStore<'_>,
    dataset: &LabeledDataset,
    weak_candidates: &Run,
    relevance: DifferentiableScorer,
    config: &TrainConfig,
    dev: Option<DevSet<'_>>,
) -> Result<TrainOutcome> {
    config.expect(&["mismatch"])?;
    Trainer::new(features, dataset, weak_candidates, relevance, None, config)?.run(dev)
}

/// Removes candidates whose min-max normalized score under `teacher` is at
/// least `eta`. Returns the filtered run and the queries left with only
/// their single lowest-scored candidate.
pub fn denoise_candidates(
    features: &FeatureStore<'_>,
    dataset: &LabeledDataset,
    candidates: &Run,
    teacher: &DifferentiableScorer,
    top_n: usize,
    eta: f64,
) -> Result<(Run, Vec<String>)> {
    let mut filtered = Run::new();
    let mut fallback = Vec::new();
    for (qid, positives) in dataset.as_map() {
        let Some(list) = candidates.get(qid) else {
            continue;
        };
        let pool: Vec<_> = list
            .top(top_n)
            .iter()
            .filter(|e| !positives.contains(&e.doc_id))
            .collect();
        if pool.is_empty() {
            continue;
        }
        let scores = pool
            .iter()
            .map(|e| features.score(teacher, qid, &e.doc_id))
            .collect::<Result<Vec<_>>>()?;
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let mut kept: Vec<(String, f64)> = pool
            .iter()
            .zip(&scores)
            .filter(|(_, s)| {
                let norm = if range > 0.0 { (*s - lo) / range } else { 0.0 };
                norm < eta
            })
            .map(|(e, _)| (e.doc_id.clone(), e.score))
            .collect();
        // Min-max normalization always keeps the lowest candidate, so a
        // pool reduced to one document counts as a fallback.
        if kept.len() <= 1 {
            kept.clear();
            let (lowest, _) = pool
                .iter()
                .zip(&scores)
                .min_by(|a, b| a.1.total_cmp(b.1).then_with(|| a.0.doc_id.cmp(&b.0.doc_id)))
                .expect("non-empty pool");
            kept.push((lowest.doc_id.clone(), lowest.score));
            fallback.push(qid.clone());
        }
        filtered.insert(qid.clone(), RankedList::from_scores(qid.clone(), kept)?);
    }
    Ok((filtered, fallback))
}

/// Denoising baseline: train a naive teacher, drop candidates the teacher
/// scores in the top `1 - eta` of each query's normalized range, then train
/// a fresh model on what is left. The log holds the teacher's steps followed
/// by the student's.
pub fn denoise_train(
    features: &FeatureStore<'_>,
    dataset: &LabeledDataset,
    candidates: &Run,
    relevance: DifferentiableScorer,
    config: &TrainConfig,
    dev: Option<DevSet<'_>>,
) -> Result<TrainOutcome> {
    config.expect(&["denoise"])?;
    let Regime::Denoise { eta } = config.regime else {
        unreachable!("checked above");
    };
    let teacher_cfg = TrainConfig {
        regime: Regime::Naive,
        ..config.clone()
    };
    let teacher = Trainer::new(features, dataset, candidates, relevance.clone(), None, &teacher_cfg)?.run(dev)?;
    let (filtered, fallback) =
        denoise_candidates(features, dataset, candidates, &teacher.relevance, config.top_n, eta)?;
    let mut student = Trainer::new(features, dataset, &filtered, relevance, None, &teacher_cfg)?.run(dev)?;
    let offset = teacher.log.len();
    for e in &mut student.log {
        e.step += offset;
    }
    let mut log = teacher.log;
    log.append(&mut student.log);
    student.log = log;
    student.fallback_queries = fallback;
    Ok(student)
}

/// Dispatches on the configured regime. `selection` is only used by the
/// coupled regime.
pub fn train(
    features: &FeatureStore<'_>,
    dataset: &LabeledDataset,
    candidates: &Run,
    relevance: DifferentiableScorer,
    selection: DifferentiableScorer,
    config: &TrainConfig,
    dev: Option<DevSet<'_>>,
) -> Result<TrainOutcome> {
    match config.regime {
        Regime::Naive => naive_train(features, dataset, candidates, relevance, config, dev),
        Regime::Cet => coupled_train(features, dataset, candidates, relevance, selection, config, dev),
        Regime::Denoise { .. } => denoise_train(features, dataset, candidates, relevance, config, dev),
        Regime::Mismatch => mismatch_train(features, dataset, candidates, relevance, config, dev),
    }
}

/// Count of eligible negatives per dataset query, for diagnostics.
pub fn eligible_counts(dataset: &LabeledDataset, candidates: &Run, top_n: usize) -> BTreeMap<String, usize> {
    dataset
        .as_map()
        .iter()
        .map(|(qid, pos)| {
            let n = candidates.get(qid).map_or(0, |l| {
                l.top(top_n).iter().filter(|e| !pos.contains(&e.doc_id)).count()
            });
            (qid.clone(), n)
        })
        .collect()
}
