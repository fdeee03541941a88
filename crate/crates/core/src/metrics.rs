//! Per-document measurements, NDCG, and per-iteration aggregation across
//! competitions.
//!
//! Fractions (`query_cover`, `frac_query`) are kept in `[0, 1]`; exported
//! reports are responsible for any percentage scaling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::competition::{CompetitionKind, CompetitionRecord, RoundRecord};
use crate::distill::{subtopic_similarity, DistilledSubtopicModel};
use crate::document::Document;
use crate::error::{Error, Result};
use crate::ranking::Ranking;
use crate::text::{cosine, tfidf_vector, CollectionStats, TermVector, TokenizerConfig};
use crate::Flagged;

/// Fraction of distinct query terms that occur in the document.
pub fn query_cover(query: &TermVector, doc: &TermVector) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::precondition("query cover of an empty query"));
    }
    let present = query.terms().filter(|t| doc.contains(t)).count();
    Ok(present as f64 / query.distinct() as f64)
}

/// Fraction of the document's token occurrences that are query terms.
pub fn frac_query(query: &TermVector, doc: &TermVector) -> Flagged<f64> {
    if doc.is_empty() {
        return Flagged::warn(0.0, "frac_query of an empty document");
    }
    let hits: u64 = query.terms().map(|t| u64::from(doc.tf(t))).sum();
    Flagged::ok(hits as f64 / doc.len() as f64)
}

/// Binary annotator labels per document, optionally per sub-topic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelevanceLabels {
    pub topic: BTreeMap<String, Vec<u8>>,
    pub subtopics: BTreeMap<String, BTreeMap<String, Vec<u8>>>,
}

impl RelevanceLabels {
    pub fn insert(&mut self, doc_id: impl Into<String>, labels: Vec<u8>) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::Validation("empty label list".into()));
        }
        self.topic.insert(doc_id.into(), labels);
        Ok(())
    }
}

/// Number of positive labels a document received.
pub fn avg_relevance_labels(labels: &RelevanceLabels, doc_id: &str) -> Result<f64> {
    labels
        .topic
        .get(doc_id)
        .map(|l| positive_labels(l))
        .ok_or_else(|| Error::Validation(format!("no relevance labels for `{doc_id}`")))
}

fn positive_labels(labels: &[u8]) -> f64 {
    labels.iter().filter(|&&l| l > 0).count() as f64
}

pub const MAX_VALIDITY_VOTES: u8 = 5;

/// Simulated spam-classifier score: 20 points per annotator who marked the
/// document valid.
pub fn spam_score(votes: u8) -> Result<u32> {
    if votes > MAX_VALIDITY_VOTES {
        return Err(Error::precondition(format!(
            "validity votes must be in 0..={MAX_VALIDITY_VOTES}, got {votes}"
        )));
    }
    Ok(20 * u32::from(votes))
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG@k (gain `2^g − 1`, discount `log2(rank + 1)`) for grades listed in
/// ranked order. The ideal ordering is derived from the same grades.
pub fn ndcg_of_ranked_grades(ranked: &[u32], k: usize) -> Flagged<f64> {
    let mut ideal = ranked.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    ndcg_with_ideal(ranked, &ideal, k)
}

fn ndcg_with_ideal(ranked: &[u32], ideal: &[u32], k: usize) -> Flagged<f64> {
    let ideal_dcg = dcg(ideal.iter().copied().take(k));
    if ideal_dcg == 0.0 {
        return Flagged::warn(0.0, "NDCG with no positive grades");
    }
    Flagged::ok(dcg(ranked.iter().copied().take(k)) / ideal_dcg)
}

/// NDCG@k of a ranking. Unjudged documents have grade 0; the ideal ordering
/// uses every judged grade.
pub fn ndcg_at_k(ranking: &Ranking, grades: &BTreeMap<String, u32>, k: usize) -> Flagged<f64> {
    let ranked: Vec<u32> = ranking
        .entries
        .iter()
        .map(|e| grades.get(&e.doc_id).copied().unwrap_or(0))
        .collect();
    let mut ideal: Vec<u32> = grades.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    ndcg_with_ideal(&ranked, &ideal, k.max(1))
}

/// Per-(query, iteration) values of one measure and their per-iteration mean
/// over queries.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub name: String,
    pub values: BTreeMap<(String, u32), f64>,
    /// Entry `i` is the mean over queries at iteration `i + 1`.
    pub iteration_means: Vec<f64>,
}

impl MetricSeries {
    pub fn from_values(name: impl Into<String>, values: BTreeMap<(String, u32), f64>) -> Self {
        let n_iter = values.keys().map(|(_, it)| *it).max().unwrap_or(0);
        Self::with_iterations(name, values, n_iter)
    }

    fn with_iterations(
        name: impl Into<String>,
        values: BTreeMap<(String, u32), f64>,
        n_iter: u32,
    ) -> Self {
        let mut sums = vec![(0.0, 0usize); n_iter as usize];
        for ((_, it), v) in &values {
            let slot = &mut sums[*it as usize - 1];
            slot.0 += v;
            slot.1 += 1;
        }
        let iteration_means = sums
            .into_iter()
            .map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
            .collect();
        MetricSeries {
            name: name.into(),
            values,
            iteration_means,
        }
    }

    pub fn query_ids(&self) -> BTreeSet<&str> {
        self.values.keys().map(|(q, _)| q.as_str()).collect()
    }

    /// Mean at a 1-based iteration.
    pub fn mean_at(&self, iteration: u32) -> Option<f64> {
        self.iteration_means
            .get(iteration.checked_sub(1)? as usize)
            .copied()
            .filter(|v| !v.is_nan())
    }
}

/// Averages a per-document measure over the documents of each
/// (query, iteration) cell, then over queries per iteration.
///
/// All records sharing a query id pool their documents into one cell. The
/// measure returns `None` for documents it is undefined on; those are skipped.
pub fn aggregate_by_iteration<F>(
    name: &str,
    records: &[CompetitionRecord],
    live_only: bool,
    mut measure: F,
) -> Result<MetricSeries>
where
    F: FnMut(&CompetitionRecord, &RoundRecord, &Document) -> Option<f64>,
{
    if records.is_empty() {
        return Err(Error::precondition("aggregation over no competitions"));
    }
    let n_iter = records[0].rounds.len();
    if let Some(r) = records.iter().find(|r| r.rounds.len() != n_iter) {
        return Err(Error::Validation(format!(
            "competition `{}` has {} iterations, expected {n_iter}",
            r.query_id,
            r.rounds.len()
        )));
    }
    let mut cells: BTreeMap<(String, u32), (f64, usize)> = BTreeMap::new();
    for record in records {
        for round in &record.rounds {
            for doc in &round.documents {
                if doc.planted || (live_only && !doc.live) {
                    continue;
                }
                if let Some(v) = measure(record, round, doc) {
                    let cell = cells
                        .entry((record.query_id.clone(), round.iteration))
                        .or_insert((0.0, 0));
                    cell.0 += v;
                    cell.1 += 1;
                }
            }
        }
    }
    let values = cells.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    Ok(MetricSeries::with_iterations(name, values, n_iter as u32))
}

/// The measures the analysis pipeline can compute per document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Measure {
    QueryCover,
    FracQuery,
    DocLength,
    CosineToPlanted,
    SubtopicSimilarity,
    RelevanceLabels,
}

impl Measure {
    pub const ALL: [Measure; 6] = [
        Measure::QueryCover,
        Measure::FracQuery,
        Measure::DocLength,
        Measure::CosineToPlanted,
        Measure::SubtopicSimilarity,
        Measure::RelevanceLabels,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::QueryCover => "query_cover",
            Measure::FracQuery => "frac_query",
            Measure::DocLength => "doc_length",
            Measure::CosineToPlanted => "cosine_to_planted",
            Measure::SubtopicSimilarity => "subtopic_similarity",
            Measure::RelevanceLabels => "relevance_labels",
        }
    }

    pub fn valid_names() -> String {
        Measure::ALL.map(Measure::name).join(", ")
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::config(
                "metrics",
                format!("unknown metric `{s}`; valid metrics: {}", Measure::valid_names()),
            )
        })
    }
}

/// Computes [`Measure`]s over competition records.
///
/// `cosine_to_planted` compares a document with its own competition's planted
/// document; competitions without one (e.g. control) are compared with every
/// planted document used for the same query, averaged. `subtopic_similarity`
/// uses the model of the competition's sub-topic, or averages over all models
/// of the query when the competition has none; averaging happens per document.
pub struct Analyzer {
    tokenizer: TokenizerConfig,
    collection: CollectionStats,
    models: Vec<DistilledSubtopicModel>,
    mu: f64,
    planted_by_query: BTreeMap<String, Vec<String>>,
}

impl Analyzer {
    /// Builds background statistics from every document in `records`, extended
    /// to cover the sub-topic models' terms.
    pub fn new(
        records: &[CompetitionRecord],
        tokenizer: TokenizerConfig,
        models: Vec<DistilledSubtopicModel>,
        mu: f64,
    ) -> Self {
        let vectors: Vec<TermVector> = records
            .iter()
            .flat_map(|r| r.rounds.iter())
            .flat_map(|round| round.documents.iter())
            .map(|d| TermVector::from_text(&d.text, &tokenizer, false))
            .collect();
        let collection = CollectionStats::from_documents(&vectors)
            .covering(models.iter().flat_map(|m| m.theta.terms()));
        let mut planted_by_query: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for r in records {
            for round in &r.rounds {
                for d in round.documents.iter().filter(|d| d.planted) {
                    let texts = planted_by_query.entry(r.query_id.clone()).or_default();
                    if !texts.contains(&d.text) {
                        texts.push(d.text.clone());
                    }
                }
            }
        }
        Analyzer {
            tokenizer,
            collection,
            models,
            mu,
            planted_by_query,
        }
    }

    pub fn collection(&self) -> &CollectionStats {
        &self.collection
    }

    fn terms(&self, text: &str) -> TermVector {
        TermVector::from_text(text, &self.tokenizer, false)
    }

    fn cosine_to(&self, doc: &TermVector, other: &str) -> Option<f64> {
        let a = tfidf_vector(doc, &self.collection).ok()?;
        let b = tfidf_vector(&self.terms(other), &self.collection).ok()?;
        Some(cosine(&a, &b))
    }

    pub fn measure(
        &self,
        measure: Measure,
        record: &CompetitionRecord,
        round: &RoundRecord,
        doc: &Document,
    ) -> Option<f64> {
        let terms = self.terms(&doc.text);
        match measure {
            Measure::QueryCover | Measure::FracQuery => {
                let query = TermVector::from_text(record.query_text(), &self.tokenizer, true);
                if query.is_empty() {
                    return None;
                }
                if measure == Measure::QueryCover {
                    query_cover(&query, &terms).ok()
                } else {
                    Some(frac_query(&query, &terms).value)
                }
            }
            Measure::DocLength => Some(terms.len() as f64),
            Measure::CosineToPlanted => {
                if let Some(p) = round.planted() {
                    return self.cosine_to(&terms, &p.text);
                }
                let texts = self.planted_by_query.get(&record.query_id)?;
                let sims: Vec<f64> = texts.iter().filter_map(|t| self.cosine_to(&terms, t)).collect();
                mean(&sims)
            }
            Measure::SubtopicSimilarity => {
                let for_query: Vec<&DistilledSubtopicModel> = self
                    .models
                    .iter()
                    .filter(|m| m.query_id.as_deref().is_none_or(|q| q == record.query_id))
                    .collect();
                let active: Vec<&DistilledSubtopicModel> = match &record.subtopic_id {
                    Some(s) => for_query
                        .iter()
                        .copied()
                        .filter(|m| m.subtopic_id.as_deref() == Some(s.as_str()))
                        .collect(),
                    None => for_query,
                };
                let sims: Vec<f64> = active
                    .iter()
                    .filter_map(|m| subtopic_similarity(&terms, m, &self.collection, self.mu).ok())
                    .collect();
                mean(&sims)
            }
            Measure::RelevanceLabels => doc.relevance_labels.as_deref().map(positive_labels),
        }
    }

    /// One series per (measure, competition kind), named `"{measure}:{kind}"`,
    /// over live documents.
    pub fn analyze(
        &self,
        records: &[CompetitionRecord],
        measures: &[Measure],
    ) -> Result<Vec<MetricSeries>> {
        let kinds: BTreeSet<CompetitionKind> = records.iter().map(|r| r.kind).collect();
        let mut out = Vec::new();
        for &measure in measures {
            for &kind in &kinds {
                let subset: Vec<CompetitionRecord> =
                    records.iter().filter(|r| r.kind == kind).cloned().collect();
                out.push(aggregate_by_iteration(
                    &format!("{}:{}", measure.name(), kind.name()),
                    &subset,
                    true,
                    |rec, round, doc| self.measure(measure, rec, round, doc),
                )?);
            }
        }
        Ok(out)
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}
