//! Tokenization, term statistics and the smoothed language models every ranker
//! and metric is built from.
//!
//! Normalization: text is split into maximal runs of Unicode alphanumeric
//! characters; everything else (punctuation, whitespace, symbols) is a
//! separator. Numerals are kept as tokens. Tokens are optionally lowercased,
//! stemmed, and filtered against a stopword list whose scope is configurable.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_STOPWORDS: &str = include_str!("../resources/stopwords.txt");

/// Reduces a normalized token to a stem.
pub trait Stemmer: Send + Sync {
    fn stem(&self, token: &str) -> String;
}

/// Leaves tokens untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityStemmer;

impl Stemmer for IdentityStemmer {
    fn stem(&self, token: &str) -> String {
        token.to_string()
    }
}

/// Conservative plural stripper (`-ies` → `-y`, `-es` → `-e`, `-s` → ``).
///
/// Stems never end in a strippable suffix, so stemming is idempotent.
#[derive(Debug, Clone, Copy, Default)]
pub struct SuffixStemmer;

impl Stemmer for SuffixStemmer {
    fn stem(&self, token: &str) -> String {
        if token.chars().count() <= 3 {
            return token.to_string();
        }
        if let Some(base) = token.strip_suffix("ies") {
            if !base.ends_with('e') && !base.ends_with('a') {
                return format!("{base}y");
            }
            return token.to_string();
        }
        if let Some(base) = token.strip_suffix("es") {
            if !base.ends_with('a') && !base.ends_with('e') && !base.ends_with('o') {
                return format!("{base}e");
            }
            return token.to_string();
        }
        if let Some(base) = token.strip_suffix('s') {
            if !base.ends_with('u') && !base.ends_with('s') {
                return base.to_string();
            }
        }
        token.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StemmerKind {
    None,
    #[default]
    SuffixStripping,
}

impl StemmerKind {
    fn stemmer(self) -> &'static dyn Stemmer {
        match self {
            StemmerKind::None => &IdentityStemmer,
            StemmerKind::SuffixStripping => &SuffixStemmer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopwordScope {
    #[default]
    QueriesOnly,
    All,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub stemmer: StemmerKind,
    pub stopwords: BTreeSet<String>,
    pub stopword_scope: StopwordScope,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            lowercase: true,
            stemmer: StemmerKind::default(),
            stopwords: default_stopwords(),
            stopword_scope: StopwordScope::QueriesOnly,
        }
    }
}

impl TokenizerConfig {
    /// Lowercasing only: no stemming, no stopwords.
    pub fn plain() -> Self {
        TokenizerConfig {
            lowercase: true,
            stemmer: StemmerKind::None,
            stopwords: BTreeSet::new(),
            stopword_scope: StopwordScope::None,
        }
    }

    fn drops_stopwords(&self, is_query: bool) -> bool {
        match self.stopword_scope {
            StopwordScope::QueriesOnly => is_query,
            StopwordScope::All => true,
            StopwordScope::None => false,
        }
    }

    /// Normalizes one raw word into a term, or `None` if it is filtered out.
    fn term(&self, raw: &str, is_query: bool) -> Option<String> {
        let normalized: String = if self.lowercase {
            raw.chars()
                .flat_map(char::to_lowercase)
                .filter(|c| c.is_alphanumeric())
                .collect()
        } else {
            raw.to_string()
        };
        if normalized.is_empty() {
            return None;
        }
        let check_stop = self.drops_stopwords(is_query);
        if check_stop && self.stopwords.contains(&normalized) {
            return None;
        }
        let stemmed = self.stemmer.stemmer().stem(&normalized);
        if check_stop && self.stopwords.contains(&stemmed) {
            return None;
        }
        Some(stemmed)
    }
}

pub fn default_stopwords() -> BTreeSet<String> {
    parse_stopwords(DEFAULT_STOPWORDS)
}

fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Reads a stopword list: one term per line, UTF-8.
pub fn load_stopwords(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_stopwords(&text))
}

/// Byte spans of the raw alphanumeric words in `text`, in order.
pub fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            spans.push((s, i));
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

pub fn tokenize(text: &str, config: &TokenizerConfig, is_query: bool) -> Vec<String> {
    word_spans(text)
        .into_iter()
        .filter_map(|(s, e)| config.term(&text[s..e], is_query))
        .collect()
}

/// Cuts `text` right after its `max_terms`-th document term. Text with at most
/// `max_terms` terms is returned unchanged.
pub fn truncate_to_terms(text: &str, config: &TokenizerConfig, max_terms: usize) -> String {
    let mut seen = 0;
    for (s, e) in word_spans(text) {
        if config.term(&text[s..e], false).is_some() {
            seen += 1;
            if seen == max_terms {
                let rest = &text[e..];
                if tokenize(rest, config, false).is_empty() {
                    return text.to_string();
                }
                return text[..e].to_string();
            }
        }
    }
    text.to_string()
}

/// Bag-of-words counts for one text unit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TermVector {
    counts: BTreeMap<String, u32>,
    length: u64,
}

impl TermVector {
    pub fn from_terms<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut counts = BTreeMap::new();
        let mut length = 0;
        for t in terms {
            *counts.entry(t.into()).or_insert(0) += 1;
            length += 1;
        }
        TermVector { counts, length }
    }

    pub fn from_text(text: &str, config: &TokenizerConfig, is_query: bool) -> Self {
        Self::from_terms(tokenize(text, config, is_query))
    }

    /// Builds a vector from explicit counts; zero counts are dropped.
    pub fn from_counts<I, S>(counts: I) -> Self
    where
        I: IntoIterator<Item = (S, u32)>,
        S: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (t, c) in counts {
            if c > 0 {
                *map.entry(t.into()).or_insert(0) += c;
            }
        }
        let length = map.values().map(|&c| u64::from(c)).sum();
        TermVector { counts: map, length }
    }

    pub fn tf(&self, term: &str) -> u32 {
        self.counts.get(term).copied().unwrap_or(0)
    }

    pub fn len(&self) -> u64 {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.counts.contains_key(term)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.counts.iter().map(|(t, &c)| (t.as_str(), c))
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }

    pub fn counts(&self) -> &BTreeMap<String, u32> {
        &self.counts
    }

    /// Adds `n` occurrences of `term`.
    pub fn add(&mut self, term: &str, n: u32) {
        if n == 0 {
            return;
        }
        *self.counts.entry(term.to_string()).or_insert(0) += n;
        self.length += u64::from(n);
    }
}

pub fn build_term_vector<S: AsRef<str>>(terms: &[S]) -> TermVector {
    TermVector::from_terms(terms.iter().map(|t| t.as_ref().to_string()))
}

/// A probability distribution over terms. Stored probabilities are strictly
/// positive and, for a non-empty model, sum to one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnigramModel {
    probabilities: BTreeMap<String, f64>,
}

impl UnigramModel {
    /// Normalizes non-negative weights into a distribution. Non-positive and
    /// non-finite weights are dropped.
    pub fn from_weights<I, S>(weights: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut probabilities = BTreeMap::new();
        for (t, w) in weights {
            if w > 0.0 && w.is_finite() {
                *probabilities.entry(t.into()).or_insert(0.0) += w;
            }
        }
        let total: f64 = probabilities.values().sum();
        if probabilities.is_empty() || total <= 0.0 {
            return Err(Error::Degenerate("distribution has no positive mass".into()));
        }
        for p in probabilities.values_mut() {
            *p /= total;
        }
        Ok(UnigramModel { probabilities })
    }

    /// Takes probabilities as given, verifying they form a distribution.
    pub fn from_probabilities<I, S>(probs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut probabilities = BTreeMap::new();
        for (t, p) in probs {
            let t = t.into();
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Degenerate(format!("probability {p} for `{t}` is not positive")));
            }
            if probabilities.insert(t.clone(), p).is_some() {
                return Err(Error::Validation(format!("term `{t}` listed twice")));
            }
        }
        let total: f64 = probabilities.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Degenerate(format!("probabilities sum to {total}, not 1")));
        }
        Ok(UnigramModel { probabilities })
    }

    /// Maximum-likelihood estimate of a single term vector.
    pub fn mle(doc: &TermVector) -> Result<Self> {
        if doc.is_empty() {
            return Err(Error::Degenerate("maximum-likelihood model of an empty document".into()));
        }
        Self::from_weights(doc.iter().map(|(t, c)| (t, f64::from(c))))
    }

    pub fn prob(&self, term: &str) -> f64 {
        self.probabilities.get(term).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.probabilities.iter().map(|(t, &p)| (t.as_str(), p))
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.probabilities.keys().map(String::as_str)
    }

    pub fn total(&self) -> f64 {
        self.probabilities.values().sum()
    }

    pub fn entropy(&self) -> f64 {
        -self.probabilities.values().map(|p| p * p.ln()).sum::<f64>()
    }

    /// Terms ordered by descending probability, ties by ascending term.
    pub fn ranked_terms(&self) -> Vec<(&str, f64)> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }
}

/// Background statistics for smoothing and IDF.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CollectionStats {
    term_probabilities: UnigramModel,
    doc_frequencies: BTreeMap<String, u32>,
    n_docs: u32,
    total_terms: u64,
}

impl CollectionStats {
    pub fn from_documents<'a, I>(docs: I) -> Self
    where
        I: IntoIterator<Item = &'a TermVector>,
    {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut doc_frequencies: BTreeMap<String, u32> = BTreeMap::new();
        let mut n_docs = 0;
        let mut total_terms = 0;
        for doc in docs {
            n_docs += 1;
            total_terms += doc.len();
            for (t, c) in doc.iter() {
                *counts.entry(t.to_string()).or_insert(0) += u64::from(c);
                *doc_frequencies.entry(t.to_string()).or_insert(0) += 1;
            }
        }
        let term_probabilities =
            UnigramModel::from_weights(counts.into_iter().map(|(t, c)| (t, c as f64)))
                .unwrap_or_default();
        CollectionStats {
            term_probabilities,
            doc_frequencies,
            n_docs,
            total_terms,
        }
    }

    /// Returns stats in which every term of `terms` missing from the
    /// collection has been given one pseudo-occurrence in one extra pseudo
    /// document. Existing statistics are unchanged when nothing is missing.
    pub fn covering<'a, I>(&self, terms: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let missing: BTreeSet<&str> = terms
            .into_iter()
            .filter(|t| !self.doc_frequencies.contains_key(*t))
            .collect();
        if missing.is_empty() {
            return self.clone();
        }
        let total = self.total_terms as f64;
        let added = missing.len() as f64;
        let weights = self
            .term_probabilities
            .iter()
            .map(|(t, p)| (t.to_string(), p * total))
            .chain(missing.iter().map(|t| (t.to_string(), 1.0)));
        let mut doc_frequencies = self.doc_frequencies.clone();
        for t in &missing {
            doc_frequencies.insert(t.to_string(), 1);
        }
        CollectionStats {
            term_probabilities: UnigramModel::from_weights(weights)
                .expect("covering adds positive mass"),
            doc_frequencies,
            n_docs: self.n_docs + 1,
            total_terms: (total + added) as u64,
        }
    }

    pub fn term_probabilities(&self) -> &UnigramModel {
        &self.term_probabilities
    }

    pub fn prob(&self, term: &str) -> f64 {
        self.term_probabilities.prob(term)
    }

    /// Document frequency; unseen terms count as appearing in one document.
    pub fn df(&self, term: &str) -> u32 {
        self.doc_frequencies.get(term).copied().unwrap_or(1)
    }

    pub fn n_docs(&self) -> u32 {
        self.n_docs
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.n_docs == 0 {
            0.0
        } else {
            self.total_terms as f64 / f64::from(self.n_docs)
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df(term).min(self.n_docs.max(1));
        (f64::from(self.n_docs) / f64::from(df)).ln().max(0.0)
    }
}

/// Dirichlet-smoothed view of a document:
/// `P(w|d) = (tf(w;d) + mu·p(w|C)) / (|d| + mu)`.
#[derive(Debug, Clone, Copy)]
pub struct SmoothedDoc<'a> {
    doc: &'a TermVector,
    collection: &'a CollectionStats,
    mu: f64,
}

impl<'a> SmoothedDoc<'a> {
    pub fn new(doc: &'a TermVector, collection: &'a CollectionStats, mu: f64) -> Result<Self> {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::precondition(format!("smoothing mass must be finite and >= 0, got {mu}")));
        }
        if mu == 0.0 && doc.is_empty() {
            return Err(Error::Degenerate("mu = 0 with an empty document".into()));
        }
        if mu > 0.0 && doc.is_empty() && collection.term_probabilities().is_empty() {
            return Err(Error::Degenerate("empty document over an empty collection".into()));
        }
        Ok(SmoothedDoc {
            doc,
            collection,
            mu,
        })
    }

    pub fn prob(&self, term: &str) -> f64 {
        (f64::from(self.doc.tf(term)) + self.mu * self.collection.prob(term))
            / (self.doc.len() as f64 + self.mu)
    }

    pub fn log_prob(&self, term: &str) -> f64 {
        self.prob(term).ln()
    }
}

/// Materializes the smoothed model over doc terms ∪ collection vocabulary.
pub fn dirichlet_doc_model(
    doc: &TermVector,
    collection: &CollectionStats,
    mu: f64,
) -> Result<UnigramModel> {
    let smoothed = SmoothedDoc::new(doc, collection, mu)?;
    let vocab: BTreeSet<&str> = doc
        .terms()
        .chain(collection.term_probabilities().terms())
        .collect();
    UnigramModel::from_weights(vocab.into_iter().map(|t| (t, smoothed.prob(t))))
}

/// Sparse real-valued term vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector(pub BTreeMap<String, f64>);

impl SparseVector {
    pub fn get(&self, term: &str) -> f64 {
        self.0.get(term).copied().unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        SparseVector(self.0.iter().map(|(t, v)| (t.clone(), v * c)).collect())
    }
}

/// `tf(w;d) · ln(n_docs / df(w))`, omitting zero weights.
pub fn tfidf_vector(doc: &TermVector, collection: &CollectionStats) -> Result<SparseVector> {
    if collection.n_docs() == 0 {
        return Err(Error::precondition("TF-IDF over an empty collection"));
    }
    Ok(SparseVector(
        doc.iter()
            .map(|(t, c)| (t.to_string(), f64::from(c) * collection.idf(t)))
            .filter(|(_, w)| *w != 0.0)
            .collect(),
    ))
}

pub fn cosine(u: &SparseVector, v: &SparseVector) -> f64 {
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    let (small, large) = if u.0.len() <= v.0.len() { (u, v) } else { (v, u) };
    let dot: f64 = small.0.iter().map(|(t, x)| x * large.get(t)).sum();
    (dot / (nu * nv)).clamp(0.0, 1.0)
}
