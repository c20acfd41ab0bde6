//! Domain types shared by every stage: feature vectors, documents, queries,
//! relevance and selection records, labeled datasets, ranked lists and
//! training triples.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::world::World;

/// Formats a float with 9 significant digits, `%.9g` style.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() {
            "nan".to_string()
        } else if x.is_infinite() {
            if x > 0.0 { "inf" } else { "-inf" }.to_string()
        } else {
            "0".to_string()
        };
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-4..9).contains(&exp) {
        let mantissa = trim_fraction(mantissa);
        format!("{mantissa}e{exp}")
    } else {
        let decimals = (8 - exp).max(0) as usize;
        trim_fraction(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds to the value that survives a trip through [`format_sig9`].
pub fn quantize(x: f64) -> f64 {
    format_sig9(x).parse().expect("sig9 output parses")
}

/// Fixed-length vector of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {bad}")));
        }
        Ok(FeatureVector(values))
    }

    pub fn zeros(len: usize) -> Self {
        FeatureVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for FeatureVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub features: FeatureVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub query_id: String,
    pub features: FeatureVector,
}

/// Binary relevance, stored as the set of relevant documents per query.
/// Pairs that are absent are irrelevant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    relevant: BTreeMap<String, BTreeSet<String>>,
}

impl GroundTruth {
    pub fn new(relevant: BTreeMap<String, BTreeSet<String>>) -> Self {
        GroundTruth { relevant }
    }

    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> bool {
        self.relevant
            .get(query_id)
            .is_some_and(|docs| docs.contains(doc_id))
    }

    pub fn relevant(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.relevant.get(query_id)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.relevant.keys().map(String::as_str)
    }

    pub fn as_map(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.relevant
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionEntry {
    pub selected: bool,
    /// Probability of entering the judgement pool. 1 or 0 in deterministic
    /// pooling.
    pub p_sel: f64,
}

/// Which (query, document) pairs entered the judgement pool. Oracle data:
/// consumed by diagnostics, never handed to trainers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionRecord {
    entries: BTreeMap<String, BTreeMap<String, SelectionEntry>>,
}

impl SelectionRecord {
    pub fn new(entries: BTreeMap<String, BTreeMap<String, SelectionEntry>>) -> Self {
        SelectionRecord { entries }
    }

    /// Unrecorded pairs were not selected.
    pub fn get(&self, query_id: &str, doc_id: &str) -> SelectionEntry {
        self.entries
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(SelectionEntry {
                selected: false,
                p_sel: 0.0,
            })
    }

    pub fn is_selected(&self, query_id: &str, doc_id: &str) -> bool {
        self.get(query_id, doc_id).selected
    }

    pub fn query(&self, query_id: &str) -> Option<&BTreeMap<String, SelectionEntry>> {
        self.entries.get(query_id)
    }

    pub fn as_map(&self) -> &BTreeMap<String, BTreeMap<String, SelectionEntry>> {
        &self.entries
    }
}

/// The observed, biased view of the world: labeled positives per query.
/// Everything else is unlabeled; there are never explicit negatives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    positives: BTreeMap<String, BTreeSet<String>>,
}

impl LabeledDataset {
    pub fn new(positives: BTreeMap<String, BTreeSet<String>>) -> Self {
        LabeledDataset { positives }
    }

    pub fn positives(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.positives.get(query_id)
    }

    pub fn is_positive(&self, query_id: &str, doc_id: &str) -> bool {
        self.positives
            .get(query_id)
            .is_some_and(|d| d.contains(doc_id))
    }

    /// Explicitly labeled negatives. Always empty.
    pub fn negatives(&self, _query_id: &str) -> impl Iterator<Item = &str> {
        std::iter::empty()
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.positives.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn total_positives(&self) -> usize {
        self.positives.values().map(BTreeSet::len).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.positives
    }

    pub fn as_map_mut(&mut self) -> &mut BTreeMap<String, BTreeSet<String>> {
        &mut self.positives
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Scored candidates for one query, best first. Ranks are contiguous from
/// 1, scores never increase with rank and equal scores are ordered by
/// ascending doc id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    query_id: String,
    entries: Vec<RankedEntry>,
}

/// Ranked lists keyed by query id.
pub type Run = BTreeMap<String, RankedList>;

impl RankedList {
    /// Orders an unordered score map. Scores are quantized to the 9
    /// significant digits the run-file format keeps.
    pub fn from_scores<I, S>(query_id: impl Into<String>, scores: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut scored = Vec::new();
        for (doc_id, score) in scores {
            if !score.is_finite() {
                return Err(Error::NonFinite(format!("score {score}")));
            }
            scored.push((doc_id.into(), quantize(score)));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let entries = scored
            .into_iter()
            .enumerate()
            .map(|(i, (doc_id, score))| RankedEntry {
                doc_id,
                score,
                rank: i + 1,
            })
            .collect();
        Ok(RankedList {
            query_id: query_id.into(),
            entries,
        })
    }

    /// Accepts already-ranked entries, checking the ordering invariant.
    pub fn from_entries(query_id: impl Into<String>, entries: Vec<RankedEntry>) -> Result<Self> {
        let query_id = query_id.into();
        for (i, e) in entries.iter().enumerate() {
            if e.rank != i + 1 {
                return Err(Error::Incompatible(format!(
                    "query {query_id}: rank {} at position {}",
                    e.rank,
                    i + 1
                )));
            }
            if i > 0 {
                let prev = &entries[i - 1];
                let ordered = prev.score > e.score || (prev.score == e.score && prev.doc_id < e.doc_id);
                if !ordered {
                    return Err(Error::Incompatible(format!(
                        "query {query_id}: entries at ranks {} and {} out of order",
                        prev.rank, e.rank
                    )));
                }
            }
        }
        Ok(RankedList { query_id, entries })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self, k: usize) -> &[RankedEntry] {
        &self.entries[..k.min(self.entries.len())]
    }

    pub fn truncated(&self, k: usize) -> RankedList {
        RankedList {
            query_id: self.query_id.clone(),
            entries: self.top(k).to_vec(),
        }
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }
}

/// Pairwise training unit: a labeled positive and a sampled negative.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrainingTriple {
    pub query_id: String,
    pub pos_doc_id: String,
    pub neg_doc_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    LabeledIrrelevant { query_id: String, doc_id: String },
    LabeledUnselected { query_id: String, doc_id: String },
    EmptyPositives { query_id: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that every label is consistent with the world that produced it:
/// a labeled document must be relevant and selected, and every query in
/// the dataset must keep at least one positive. The selection check is
/// skipped when the world carries no selection record.
pub fn validate_dataset(world: &World, dataset: &LabeledDataset) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    for (query_id, docs) in dataset.as_map() {
        if world.query(query_id).is_none() {
            return Err(Error::UnknownId {
                kind: "query",
                id: query_id.clone(),
            });
        }
        if docs.is_empty() {
            report.violations.push(Violation::EmptyPositives {
                query_id: query_id.clone(),
            });
        }
        for doc_id in docs {
            if world.document(doc_id).is_none() {
                return Err(Error::UnknownId {
                    kind: "document",
                    id: doc_id.clone(),
                });
            }
            if !world.truth.is_relevant(query_id, doc_id) {
                report.violations.push(Violation::LabeledIrrelevant {
                    query_id: query_id.clone(),
                    doc_id: doc_id.clone(),
                });
            }
            if let Some(selection) = &world.selection {
                if !selection.is_selected(query_id, doc_id) {
                    report.violations.push(Violation::LabeledUnselected {
                        query_id: query_id.clone(),
                        doc_id: doc_id.clone(),
                    });
                }
            }
        }
    }
    Ok(report)
}
