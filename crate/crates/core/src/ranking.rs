//! Rankers: query likelihood, the relevance-model (RM1) scorer, content
//! features and a linear feature ranker with coordinate-ascent training.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::document::Document;
use crate::error::{Error, Result};
use crate::metrics::{self, ndcg_of_ranked_grades};
use crate::text::{
    dirichlet_doc_model, CollectionStats, SmoothedDoc, TermVector, TokenizerConfig, UnigramModel,
};

pub const BM25_K1: f64 = 0.9;
pub const BM25_B: f64 = 0.4;

/// `Σ_w P_mle(w|q) · log P_dirichlet(w|d)`.
pub fn query_likelihood_score(
    query: &TermVector,
    doc: &TermVector,
    collection: &CollectionStats,
    mu: f64,
) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::precondition("query likelihood of an empty query"));
    }
    let smoothed = SmoothedDoc::new(doc, collection, mu)?;
    let qlen = query.len() as f64;
    Ok(query
        .iter()
        .map(|(t, c)| f64::from(c) / qlen * smoothed.log_prob(t))
        .sum())
}

/// Relevance model built from a set of documents judged relevant.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceModel {
    pub model: UnigramModel,
    pub source_doc_ids: Vec<String>,
    pub clipped_to: Option<usize>,
}

impl RelevanceModel {
    /// Keeps the `k` most probable terms and renormalizes.
    pub fn clipped(&self, k: usize) -> Result<Self> {
        Ok(RelevanceModel {
            model: clip_and_renormalize(&self.model, k)?,
            source_doc_ids: self.source_doc_ids.clone(),
            clipped_to: Some(k),
        })
    }
}

/// RM1: the uniform average of the documents' Dirichlet-smoothed models,
/// without interpolating the query model.
pub fn build_relevance_model(
    docs: &[(String, TermVector)],
    collection: &CollectionStats,
    mu: f64,
) -> Result<RelevanceModel> {
    if docs.is_empty() {
        return Err(Error::precondition("relevance model over an empty document set"));
    }
    let mut mass: BTreeMap<String, f64> = BTreeMap::new();
    for (_, doc) in docs {
        for (t, p) in dirichlet_doc_model(doc, collection, mu)?.iter() {
            *mass.entry(t.to_string()).or_insert(0.0) += p;
        }
    }
    let n = docs.len() as f64;
    Ok(RelevanceModel {
        model: UnigramModel::from_weights(mass.into_iter().map(|(t, m)| (t, m / n)))?,
        source_doc_ids: docs.iter().map(|(id, _)| id.clone()).collect(),
        clipped_to: None,
    })
}

/// Keeps the `k` highest-probability terms (ties by ascending term) and
/// renormalizes.
pub fn clip_and_renormalize(model: &UnigramModel, k: usize) -> Result<UnigramModel> {
    if k == 0 {
        return Err(Error::precondition("clip size must be at least 1"));
    }
    if k >= model.len() {
        return Ok(model.clone());
    }
    UnigramModel::from_weights(
        model
            .ranked_terms()
            .into_iter()
            .take(k)
            .map(|(t, p)| (t.to_string(), p)),
    )
}

/// Negative cross entropy `Σ_{w ∈ supp(model)} model(w) · log P_dirichlet(w|doc)`.
pub fn score_by_model(
    model: &UnigramModel,
    doc: &TermVector,
    collection: &CollectionStats,
    mu: f64,
) -> Result<f64> {
    if model.is_empty() {
        return Err(Error::precondition("scoring with an empty model"));
    }
    let smoothed = SmoothedDoc::new(doc, collection, mu)?;
    Ok(model.iter().map(|(t, p)| p * smoothed.log_prob(t)).sum())
}

/// Average over `docs` of the negative cross entropy between each document's
/// smoothed model and `doc`'s smoothed model.
pub fn score_by_doc_average(
    docs: &[TermVector],
    doc: &TermVector,
    collection: &CollectionStats,
    mu: f64,
) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::precondition("average cross entropy over an empty document set"));
    }
    let mut total = 0.0;
    for source in docs {
        total += score_by_model(&dirichlet_doc_model(source, collection, mu)?, doc, collection, mu)?;
    }
    Ok(total / docs.len() as f64)
}

/// Content features, in their fixed output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Feature {
    TfSum,
    TfMin,
    TfMax,
    TfMean,
    NormalizedTfSum,
    IdfSum,
    TfIdfSum,
    Bm25,
    LmDirichletScore,
    QueryCover,
    FracQuery,
    DocLength,
    SpamScore,
}

impl Feature {
    pub const ALL: [Feature; 13] = [
        Feature::TfSum,
        Feature::TfMin,
        Feature::TfMax,
        Feature::TfMean,
        Feature::NormalizedTfSum,
        Feature::IdfSum,
        Feature::TfIdfSum,
        Feature::Bm25,
        Feature::LmDirichletScore,
        Feature::QueryCover,
        Feature::FracQuery,
        Feature::DocLength,
        Feature::SpamScore,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::TfSum => "tf_sum",
            Feature::TfMin => "tf_min",
            Feature::TfMax => "tf_max",
            Feature::TfMean => "tf_mean",
            Feature::NormalizedTfSum => "normalized_tf_sum",
            Feature::IdfSum => "idf_sum",
            Feature::TfIdfSum => "tfidf_sum",
            Feature::Bm25 => "bm25",
            Feature::LmDirichletScore => "lm_dirichlet_score",
            Feature::QueryCover => "query_cover",
            Feature::FracQuery => "frac_query",
            Feature::DocLength => "doc_length",
            Feature::SpamScore => "spam_score",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config("features", format!("unknown feature `{s}`")))
    }
}

/// The ordered set of enabled features for a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSet(Vec<Feature>);

impl Default for FeatureSet {
    fn default() -> Self {
        FeatureSet(Feature::ALL.to_vec())
    }
}

impl FeatureSet {
    /// Enabled features, kept in canonical order regardless of input order.
    pub fn new(features: impl IntoIterator<Item = Feature>) -> Self {
        let mut v: Vec<_> = features.into_iter().collect();
        v.sort();
        v.dedup();
        FeatureSet(v)
    }

    pub fn features(&self) -> &[Feature] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<(Feature, f64)>,
}

impl FeatureVector {
    pub fn get(&self, feature: Feature) -> Option<f64> {
        self.values.iter().find(|(f, _)| *f == feature).map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Feature, f64)> + '_ {
        self.values.iter().copied()
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.iter().map(|(_, v)| *v).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Validity votes assumed for documents nobody annotated.
pub const DEFAULT_VALIDITY_VOTES: u8 = 5;

pub fn extract_features(
    query: &TermVector,
    doc_terms: &TermVector,
    doc: &Document,
    collection: &CollectionStats,
    enabled: &FeatureSet,
) -> Result<FeatureVector> {
    if query.is_empty() {
        return Err(Error::precondition("feature extraction for an empty query"));
    }
    let tfs: Vec<f64> = query.terms().map(|t| f64::from(doc_terms.tf(t))).collect();
    let dl = doc_terms.len() as f64;
    let tf_sum: f64 = tfs.iter().sum();
    let avgdl = collection.avg_doc_len();
    let votes = doc.validity_votes.unwrap_or(DEFAULT_VALIDITY_VOTES);

    let mut values = Vec::with_capacity(enabled.len());
    for &feature in enabled.features() {
        let v = match feature {
            Feature::TfSum => tf_sum,
            Feature::TfMin => tfs.iter().copied().fold(f64::INFINITY, f64::min),
            Feature::TfMax => tfs.iter().copied().fold(0.0, f64::max),
            Feature::TfMean => tf_sum / tfs.len() as f64,
            Feature::NormalizedTfSum => {
                if dl > 0.0 {
                    tf_sum / dl
                } else {
                    0.0
                }
            }
            Feature::IdfSum => query.terms().map(|t| collection.idf(t)).sum(),
            Feature::TfIdfSum => query
                .terms()
                .map(|t| f64::from(doc_terms.tf(t)) * collection.idf(t))
                .sum(),
            Feature::Bm25 => query
                .terms()
                .map(|t| {
                    let tf = f64::from(doc_terms.tf(t));
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let n = f64::from(collection.n_docs());
                    let df = f64::from(collection.df(t));
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    let norm = if avgdl > 0.0 { dl / avgdl } else { 1.0 };
                    idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
                })
                .sum(),
            Feature::LmDirichletScore => {
                query_likelihood_score(query, doc_terms, collection, crate::DEFAULT_MU)?
            }
            Feature::QueryCover => metrics::query_cover(query, doc_terms)?,
            Feature::FracQuery => metrics::frac_query(query, doc_terms).value,
            Feature::DocLength => dl,
            Feature::SpamScore => f64::from(metrics::spam_score(votes)?),
        };
        values.push((feature, v));
    }
    Ok(FeatureVector { values })
}

/// Weights of the linear feature ranker, keyed by feature name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinearRankerWeights(pub BTreeMap<String, f64>);

impl LinearRankerWeights {
    pub fn uniform(features: &FeatureSet) -> Self {
        let w = 1.0 / features.len().max(1) as f64;
        Self::from_values(features, &vec![w; features.len()])
    }

    /// Unit weight on one feature, zero elsewhere.
    pub fn single(features: &FeatureSet, feature: Feature) -> Self {
        LinearRankerWeights(
            features
                .features()
                .iter()
                .map(|f| (f.name().to_string(), if *f == feature { 1.0 } else { 0.0 }))
                .collect(),
        )
    }

    pub fn from_values(features: &FeatureSet, values: &[f64]) -> Self {
        LinearRankerWeights(
            features
                .features()
                .iter()
                .zip(values)
                .map(|(f, v)| (f.name().to_string(), *v))
                .collect(),
        )
    }

    /// Weights in `features` order.
    pub fn values(&self, features: &FeatureSet) -> Result<Vec<f64>> {
        self.check(features)?;
        Ok(features.features().iter().map(|f| self.0[f.name()]).collect())
    }

    pub fn check(&self, features: &FeatureSet) -> Result<()> {
        let expected: Vec<&str> = {
            let mut v: Vec<_> = features.features().iter().map(|f| f.name()).collect();
            v.sort_unstable();
            v
        };
        let actual: Vec<&str> = self.0.keys().map(String::as_str).collect();
        if expected != actual {
            return Err(Error::config(
                "weights",
                format!("weight keys {actual:?} do not match enabled features {expected:?}"),
            ));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        LinearRankerWeights(self.0.iter().map(|(k, v)| (k.clone(), v * c)).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("weights serialize");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn linear_score(features: &FeatureVector, weights: &LinearRankerWeights) -> Result<f64> {
    if features.len() != weights.0.len() {
        return Err(Error::config(
            "weights",
            format!("{} weights for {} features", weights.0.len(), features.len()),
        ));
    }
    features
        .iter()
        .map(|(f, v)| {
            weights
                .0
                .get(f.name())
                .map(|w| w * v)
                .ok_or_else(|| Error::config("weights", format!("no weight for feature `{f}`")))
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingEntry {
    pub doc_id: String,
    pub score: f64,
    /// Placed by an intervention rather than by score.
    pub forced: bool,
}

/// An ordered result list for one query (and iteration).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ranking {
    pub query_id: String,
    pub entries: Vec<RankingEntry>,
}

impl Ranking {
    /// Sorts `(doc_id, score)` pairs by descending score, ties by ascending id.
    pub fn from_scores(query_id: impl Into<String>, scores: Vec<(String, f64)>) -> Self {
        let mut entries: Vec<RankingEntry> = scores
            .into_iter()
            .map(|(doc_id, score)| RankingEntry {
                doc_id,
                score,
                forced: false,
            })
            .collect();
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
        Ranking {
            query_id: query_id.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self) -> Option<&RankingEntry> {
        self.entries.first()
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.doc_id.as_str()).collect()
    }

    /// 1-based rank of a document.
    pub fn rank_of(&self, doc_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.doc_id == doc_id).map(|i| i + 1)
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.rank_of(doc_id).is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    QueryLikelihood { mu: f64 },
    /// Negative cross entropy against a (biased) term distribution.
    Model { model: UnigramModel, mu: f64 },
    Linear {
        weights: LinearRankerWeights,
        features: FeatureSet,
    },
}

impl Scorer {
    pub fn score(
        &self,
        query: &TermVector,
        doc_terms: &TermVector,
        doc: &Document,
        collection: &CollectionStats,
    ) -> Result<f64> {
        match self {
            Scorer::QueryLikelihood { mu } => query_likelihood_score(query, doc_terms, collection, *mu),
            Scorer::Model { model, mu } => score_by_model(model, doc_terms, collection, *mu),
            Scorer::Linear { weights, features } => linear_score(
                &extract_features(query, doc_terms, doc, collection, features)?,
                weights,
            ),
        }
    }
}

/// Ranks documents under a scorer; ties resolve by ascending document id.
pub fn rank(
    query_id: &str,
    query_text: &str,
    docs: &[Document],
    scorer: &Scorer,
    tokenizer: &TokenizerConfig,
    collection: &CollectionStats,
) -> Result<Ranking> {
    if docs.is_empty() {
        return Err(Error::precondition("ranking an empty document list"));
    }
    let query = TermVector::from_text(query_text, tokenizer, true);
    let mut scores = Vec::with_capacity(docs.len());
    for doc in docs {
        let terms = TermVector::from_text(&doc.text, tokenizer, false);
        scores.push((doc.id().to_string(), scorer.score(&query, &terms, doc, collection)?));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some((dup, _)) = scores.iter().find(|(id, _)| !seen.insert(id.as_str())) {
        return Err(Error::Validation(format!("duplicate document id `{dup}` in ranking")));
    }
    Ok(Ranking::from_scores(query_id, scores))
}

/// Feature vectors and graded judgments for one training query.
#[derive(Debug, Clone)]
pub struct TrainingQuery {
    /// One row per document, in `FeatureSet` order.
    pub features: Vec<Vec<f64>>,
    pub grades: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    Trained,
    /// Every grade is equal; initial weights returned untouched.
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: LinearRankerWeights,
    pub metric: f64,
    pub status: TrainStatus,
}

/// Coordinate ascent over linear weights with random restarts.
#[derive(Debug, Clone)]
pub struct CoordinateAscent {
    pub restarts: usize,
    pub max_passes: usize,
    /// Smallest trial step; steps double up to `base_step · 2^(step_doublings-1)`.
    pub base_step: f64,
    pub step_doublings: u32,
    pub tolerance: f64,
}

impl Default for CoordinateAscent {
    fn default() -> Self {
        CoordinateAscent {
            restarts: 3,
            max_passes: 25,
            base_step: 0.01,
            step_doublings: 14,
            tolerance: 1e-9,
        }
    }
}

/// Scores rows with `weights` and returns grades in ranked order.
fn ranked_grades(query: &TrainingQuery, weights: &[f64]) -> Vec<u32> {
    let mut order: Vec<(usize, f64)> = query
        .features
        .iter()
        .enumerate()
        .map(|(i, row)| (i, row.iter().zip(weights).map(|(x, w)| x * w).sum()))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(i, _)| query.grades[i]).collect()
}

pub fn ndcg_metric(k: usize) -> impl Fn(&[u32]) -> f64 {
    move |ranked: &[u32]| ndcg_of_ranked_grades(ranked, k).value
}

/// Trains linear weights maximizing the mean of `metric` (a function of grades
/// in ranked order) over the training queries.
pub fn train_coordinate_ascent(
    training: &[TrainingQuery],
    features: &FeatureSet,
    metric: &dyn Fn(&[u32]) -> f64,
    params: &CoordinateAscent,
    rng: &mut dyn RngCore,
) -> Result<TrainOutcome> {
    if training.is_empty() {
        return Err(Error::precondition("coordinate ascent needs training queries"));
    }
    let dim = features.len();
    for (i, q) in training.iter().enumerate() {
        if q.features.len() < 2 || q.features.len() != q.grades.len() {
            return Err(Error::precondition(format!(
                "training query {i} needs >= 2 documents with one grade each"
            )));
        }
        if q.features.iter().any(|row| row.len() != dim) {
            return Err(Error::precondition(format!(
                "training query {i} has rows not matching {dim} features"
            )));
        }
    }
    let evaluate = |w: &[f64]| -> f64 {
        training.iter().map(|q| metric(&ranked_grades(q, w))).sum::<f64>() / training.len() as f64
    };

    let initial = vec![1.0 / dim as f64; dim];
    let initial_metric = evaluate(&initial);
    let first = training[0].grades[0];
    if training.iter().all(|q| q.grades.iter().all(|&g| g == first)) {
        log::warn!("all training grades are equal; returning initial weights");
        return Ok(TrainOutcome {
            weights: LinearRankerWeights::from_values(features, &initial),
            metric: initial_metric,
            status: TrainStatus::Degenerate,
        });
    }

    let normalize = |w: &mut Vec<f64>| -> bool {
        let l1: f64 = w.iter().map(|x| x.abs()).sum();
        if l1 == 0.0 || !l1.is_finite() {
            return false;
        }
        w.iter_mut().for_each(|x| *x /= l1);
        true
    };

    let mut best = initial.clone();
    let mut best_metric = initial_metric;
    for restart in 0..params.restarts.max(1) {
        let mut w = if restart == 0 {
            initial.clone()
        } else {
            let mut w: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            if !normalize(&mut w) {
                w = initial.clone();
            }
            w
        };
        let mut current = evaluate(&w);
        for _ in 0..params.max_passes {
            let mut improved = false;
            for i in 0..dim {
                let mut local_best: Option<(Vec<f64>, f64)> = None;
                for sign in [1.0, -1.0] {
                    for d in 0..params.step_doublings {
                        let mut trial = w.clone();
                        trial[i] += sign * params.base_step * f64::from(1u32 << d);
                        if !normalize(&mut trial) {
                            continue;
                        }
                        let m = evaluate(&trial);
                        let bar = local_best.as_ref().map_or(current, |(_, lm)| *lm);
                        if m > bar + params.tolerance {
                            local_best = Some((trial, m));
                        }
                    }
                }
                if let Some((trial, m)) = local_best {
                    w = trial;
                    current = m;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        if current > best_metric + params.tolerance {
            best = w;
            best_metric = current;
        }
    }
    Ok(TrainOutcome {
        weights: LinearRankerWeights::from_values(features, &best),
        metric: best_metric,
        status: TrainStatus::Trained,
    })
}

/// Picks the number of relevance-model expansion terms that best separates
/// pseudo-relevant from pseudo-non-relevant documents (NDCG@5 of the ranking
/// over both sets). Ties resolve to the smaller candidate.
pub fn select_expansion_terms(
    candidates: &[usize],
    relevant: &[(String, TermVector)],
    nonrelevant: &[(String, TermVector)],
    collection: &CollectionStats,
    mu: f64,
) -> Result<(usize, f64)> {
    let rm = build_relevance_model(relevant, collection, mu)?;
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(usize, f64)> = None;
    for k in sorted {
        let clipped = rm.clipped(k)?;
        let ndcg = pseudo_judged_ndcg(relevant, nonrelevant, |doc| {
            score_by_model(&clipped.model, doc, collection, mu)
        })?;
        if best.is_none_or(|(_, b)| ndcg > b + 1e-12) {
            best = Some((k, ndcg));
        }
    }
    best.ok_or_else(|| Error::precondition("no expansion-term candidates"))
}

/// NDCG@5 of the ranking of `relevant ∪ nonrelevant` induced by `score`,
/// with relevant documents graded 1.
pub fn pseudo_judged_ndcg(
    relevant: &[(String, TermVector)],
    nonrelevant: &[(String, TermVector)],
    score: impl Fn(&TermVector) -> Result<f64>,
) -> Result<f64> {
    let mut scored = Vec::new();
    let mut grades = BTreeMap::new();
    for (set, grade) in [(relevant, 1u32), (nonrelevant, 0)] {
        for (id, doc) in set {
            scored.push((id.clone(), score(doc)?));
            grades.insert(id.clone(), grade);
        }
    }
    let ranking = Ranking::from_scores("", scored);
    Ok(metrics::ndcg_at_k(&ranking, &grades, 5).value)
}
