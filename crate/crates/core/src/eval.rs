//! Full-information evaluation: ranking metrics against complete relevance,
//! reranking, the selection-weight probe and a Monte Carlo check of the
//! inverse-propensity risk estimator.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;

use crate::data::{format_sig9, GroundTruth, RankedList, Run};
use crate::error::{Error, Result};
use crate::rng;
use crate::scorer::DifferentiableScorer;
use crate::training::{bias_weight_wr, pairwise_ce_loss, FeatureStore};
use crate::world::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Mrr,
    Ndcg,
    Recall,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Mrr => "mrr",
            Metric::Ndcg => "ndcg",
            Metric::Recall => "recall",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mrr" => Some(Metric::Mrr),
            "ndcg" => Some(Metric::Ndcg),
            "recall" => Some(Metric::Recall),
            _ => None,
        }
    }

    pub fn per_query(self, list: &RankedList, relevant: &BTreeSet<String>, k: usize) -> f64 {
        match self {
            Metric::Mrr => reciprocal_rank(list, relevant, k),
            Metric::Ndcg => ndcg(list, relevant, k),
            Metric::Recall => recall(list, relevant, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub metric: Metric,
    pub k: usize,
    pub per_query: Vec<(String, f64)>,
    pub macro_avg: f64,
    /// Queries without any relevant document (or absent from the truth);
    /// left out of the average.
    pub excluded: Vec<String>,
}

impl EvalResult {
    /// `metric,k,query_id,value` rows plus a final `macro` row.
    pub fn to_csv_rows(&self, out: &mut String) {
        for (qid, v) in &self.per_query {
            let _ = writeln!(out, "{},{},{},{}", self.metric.name(), self.k, qid, format_sig9(*v));
        }
        let _ = writeln!(
            out,
            "{},{},macro,{}",
            self.metric.name(),
            self.k,
            format_sig9(self.macro_avg)
        );
    }
}

pub const CSV_HEADER: &str = "metric,k,query_id,value\n";

pub fn reciprocal_rank(list: &RankedList, relevant: &BTreeSet<String>, k: usize) -> f64 {
    list.top(k)
        .iter()
        .position(|e| relevant.contains(&e.doc_id))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Binary-gain NDCG with `log2(rank + 1)` discount.
pub fn ndcg(list: &RankedList, relevant: &BTreeSet<String>, k: usize) -> f64 {
    let dcg: f64 = list
        .top(k)
        .iter()
        .enumerate()
        .filter(|(_, e)| relevant.contains(&e.doc_id))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(k))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

pub fn recall(list: &RankedList, relevant: &BTreeSet<String>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = list.top(k).iter().filter(|e| relevant.contains(&e.doc_id)).count();
    hits as f64 / relevant.len() as f64
}

pub fn evaluate(metric: Metric, run: &Run, truth: &GroundTruth, k: usize) -> Result<EvalResult> {
    if k < 1 {
        return Err(Error::Config("metric cutoff k must be >= 1".into()));
    }
    let mut per_query = Vec::with_capacity(run.len());
    let mut excluded = Vec::new();
    for (qid, list) in run {
        match truth.relevant(qid) {
            Some(rel) if !rel.is_empty() => per_query.push((qid.clone(), metric.per_query(list, rel, k))),
            _ => excluded.push(qid.clone()),
        }
    }
    let macro_avg = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|(_, v)| v).sum::<f64>() / per_query.len() as f64
    };
    Ok(EvalResult {
        metric,
        k,
        per_query,
        macro_avg,
        excluded,
    })
}

pub fn mrr_at_k(run: &Run, truth: &GroundTruth, k: usize) -> Result<EvalResult> {
    evaluate(Metric::Mrr, run, truth, k)
}

pub fn ndcg_at_k(run: &Run, truth: &GroundTruth, k: usize) -> Result<EvalResult> {
    evaluate(Metric::Ndcg, run, truth, k)
}

pub fn recall_at_k(run: &Run, truth: &GroundTruth, k: usize) -> Result<EvalResult> {
    evaluate(Metric::Recall, run, truth, k)
}

/// Rescores the top `k` candidates with `scorer`; ties by doc id.
pub fn rerank_with(
    features: &FeatureStore<'_>,
    scorer: &DifferentiableScorer,
    candidates: &RankedList,
    k: usize,
) -> Result<RankedList> {
    let qid = candidates.query_id();
    let scores = candidates
        .top(k)
        .iter()
        .map(|e| Ok((e.doc_id.as_str(), features.score(scorer, qid, &e.doc_id)?)))
        .collect::<Result<Vec<_>>>()?;
    RankedList::from_scores(qid, scores)
}

pub fn rerank_run(
    features: &FeatureStore<'_>,
    scorer: &DifferentiableScorer,
    candidates: &Run,
    k: usize,
) -> Result<Run> {
    candidates
        .iter()
        .map(|(qid, list)| Ok((qid.clone(), rerank_with(features, scorer, list, k)?)))
        .collect()
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    if x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Two-sided exact binomial p-value; `None` when every pair is tied.
    pub p_value: Option<f64>,
}

/// Exact two-sided sign test on paired samples `(a, b)`; a win means
/// `a > b`.
pub fn sign_test(pairs: &[(f64, f64)]) -> SignTest {
    let wins = pairs.iter().filter(|(a, b)| a > b).count();
    let losses = pairs.iter().filter(|(a, b)| a < b).count();
    let ties = pairs.len() - wins - losses;
    let n = wins + losses;
    let p_value = (n > 0).then(|| {
        let k = wins.min(losses);
        let tail: f64 = (0..=k).map(|i| binomial(n, i)).sum::<f64>() * 0.5f64.powi(n as i32);
        (2.0 * tail).min(1.0)
    });
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub doc_id: String,
    pub w_r: f64,
    pub r_truth: u8,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub query_id: String,
    pub anchor: String,
    pub rows: Vec<ProbeRow>,
    /// Spearman correlation between `w_r` and ground-truth relevance.
    pub spearman: Option<f64>,
}

impl ProbeResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("doc_id,w_r,r_truth,rank\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.doc_id, format_sig9(r.w_r), r.r_truth, r.rank);
        }
        s
    }
}

/// Pairs the selection-derived weight `w_r(q, anchor, d_j)` of every top
/// candidate `d_j` (the anchor itself skipped) with its true relevance.
#[allow(clippy::too_many_arguments)]
pub fn wr_relevance_probe(
    features: &FeatureStore<'_>,
    selection: &DifferentiableScorer,
    truth: &GroundTruth,
    candidates: &RankedList,
    anchor: &str,
    top_n: usize,
    tau: f64,
    clamp: f64,
) -> Result<ProbeResult> {
    let qid = candidates.query_id();
    let s_anchor = features.score(selection, qid, anchor)?;
    let mut rows = Vec::new();
    for e in candidates.top(top_n) {
        if e.doc_id == anchor {
            continue;
        }
        let s_j = features.score(selection, qid, &e.doc_id)?;
        rows.push(ProbeRow {
            doc_id: e.doc_id.clone(),
            w_r: bias_weight_wr(s_anchor, s_j, tau, clamp).value(),
            r_truth: u8::from(truth.is_relevant(qid, &e.doc_id)),
            rank: e.rank,
        });
    }
    let w: Vec<f64> = rows.iter().map(|r| r.w_r).collect();
    let r: Vec<f64> = rows.iter().map(|r| f64::from(r.r_truth)).collect();
    Ok(ProbeResult {
        query_id: qid.to_string(),
        anchor: anchor.to_string(),
        spearman: spearman(&w, &r),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpwCheck {
    pub full_risk: f64,
    pub ipw_mean: f64,
    pub ipw_std_error: f64,
    pub naive_mean: f64,
    pub naive_std_error: f64,
    pub n_resamples: usize,
    /// Relevant pairs with zero selection probability; no reweighting can
    /// recover them, so they are left out of every risk.
    pub positivity_violations: usize,
}

impl IpwCheck {
    pub fn gap(&self) -> f64 {
        (self.ipw_mean - self.full_risk).abs()
    }

    pub fn naive_gap(&self) -> f64 {
        (self.naive_mean - self.full_risk).abs()
    }
}

struct QueryTable {
    p: Vec<f64>,
    relevant: Vec<bool>,
    /// Loss for every (relevant i, any j), row-major over relevant docs.
    losses: Vec<Vec<f64>>,
    rel_index: Vec<usize>,
}

/// Monte Carlo check that inverse-propensity weighting recovers the
/// full-information pairwise risk from pooled labels.
///
/// Requires a stochastic selection record on `world`. Each resample redraws
/// the pool from the recorded probabilities, labels the selected relevant
/// documents and evaluates, per query,
///
/// ```text
/// naive = sum_{i labeled} sum_{j unlabeled} L(R_i, R_j)
/// ipw   = sum_{i labeled} sum_{j unlabeled} L(R_i, R_j) * (1 / p_i) * P(r_j = 0) / P(unlabeled_j)
/// ```
///
/// with the oracle probabilities, averaged over queries. The target is the
/// exhaustive `sum_{i relevant} sum_{j irrelevant} L(R_i, R_j)` averaged the
/// same way.
pub fn ipw_unbiasedness_check(
    world: &World,
    scorer: &DifferentiableScorer,
    n_resamples: usize,
    seed: u64,
) -> Result<IpwCheck> {
    let selection = world
        .selection
        .as_ref()
        .ok_or_else(|| Error::Incompatible("world has no selection record".into()))?;
    if n_resamples < 2 {
        return Err(Error::Config("need at least two resamples".into()));
    }
    let features = FeatureStore::from_world(world);
    let mut tables = Vec::new();
    let mut violations = 0;
    for (qid, entries) in selection.as_map() {
        let docs: Vec<&String> = entries.keys().collect();
        let scores = docs
            .iter()
            .map(|d| features.score(scorer, qid, d))
            .collect::<Result<Vec<_>>>()?;
        let p: Vec<f64> = docs.iter().map(|d| entries[*d].p_sel).collect();
        let relevant: Vec<bool> = docs.iter().map(|d| world.truth.is_relevant(qid, d)).collect();
        let mut rel_index = Vec::new();
        let mut losses = Vec::new();
        for i in 0..docs.len() {
            if !relevant[i] {
                continue;
            }
            if p[i] <= 0.0 {
                violations += docs.len() - 1;
                continue;
            }
            rel_index.push(i);
            losses.push(scores.iter().map(|&sj| pairwise_ce_loss(scores[i], sj)).collect());
        }
        tables.push(QueryTable {
            p,
            relevant,
            losses,
            rel_index,
        });
    }
    let n_q = tables.len() as f64;

    let mut full = 0.0;
    for t in &tables {
        for (row, _) in t.losses.iter().zip(&t.rel_index) {
            for (j, l) in row.iter().enumerate() {
                if !t.relevant[j] {
                    full += l;
                }
            }
        }
    }
    full /= n_q;

    let mut rng = rng::stream(seed, &["ipw-resample"]);
    let (mut ipw_vals, mut naive_vals) = (Vec::with_capacity(n_resamples), Vec::with_capacity(n_resamples));
    let mut labeled = Vec::new();
    for _ in 0..n_resamples {
        let (mut ipw, mut naive) = (0.0, 0.0);
        for t in &tables {
            labeled.clear();
            labeled.extend(
                t.p.iter()
                    .zip(&t.relevant)
                    .map(|(&p, &r)| rng.random::<f64>() < p && r),
            );
            for (row, &i) in t.losses.iter().zip(&t.rel_index) {
                if !labeled[i] {
                    continue;
                }
                let inv_p = 1.0 / t.p[i];
                for (j, l) in row.iter().enumerate() {
                    if labeled[j] {
                        continue;
                    }
                    naive += l;
                    // P(r_j = 0 | x_j) / P(unlabeled_j | x_j): 1 for
                    // irrelevant documents, 0 for relevant ones.
                    let irrelevant_given_unlabeled = if t.relevant[j] { 0.0 } else { 1.0 };
                    ipw += l * inv_p * irrelevant_given_unlabeled;
                }
            }
        }
        ipw_vals.push(ipw / n_q);
        naive_vals.push(naive / n_q);
    }
    let (ipw_mean, ipw_std_error) = mean_and_se(&ipw_vals);
    let (naive_mean, naive_std_error) = mean_and_se(&naive_vals);
    Ok(IpwCheck {
        full_risk: full,
        ipw_mean,
        ipw_std_error,
        naive_mean,
        naive_std_error,
        n_resamples,
        positivity_violations: violations,
    })
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
