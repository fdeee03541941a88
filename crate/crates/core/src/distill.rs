//! Sub-topic model distillation.
//!
//! A sub-topic's relevant documents are modeled as a token-level mixture of
//! a sub-topic specific distribution θ and the general topic model P(w|T):
//!
//! ```text
//! log L = Σ_d Σ_w tf(w;d) · log((1 − λ)·θ(w) + λ·P(w|T))
//! ```
//!
//! θ is fitted by EM starting from the sub-topic documents' maximum-likelihood
//! estimate, then clipped to its α most probable terms.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::{clip_and_renormalize, pseudo_judged_ndcg, score_by_model};
use crate::text::{CollectionStats, TermVector, UnigramModel};

/// Maximum-likelihood term distribution over all topic-relevant documents.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel(pub UnigramModel);

pub fn topic_model_mle(docs: &[TermVector]) -> Result<TopicModel> {
    let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
    for doc in docs {
        for (t, c) in doc.iter() {
            *counts.entry(t).or_insert(0.0) += f64::from(c);
        }
    }
    if counts.is_empty() {
        return Err(Error::precondition("topic model over documents with no terms"));
    }
    Ok(TopicModel(UnigramModel::from_weights(counts)?))
}

fn pooled_counts(docs: &[TermVector]) -> BTreeMap<&str, f64> {
    let mut counts = BTreeMap::new();
    for doc in docs {
        for (t, c) in doc.iter() {
            *counts.entry(t).or_insert(0.0) += f64::from(c);
        }
    }
    counts
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::precondition(format!("mixture weight must be in [0, 1), got {lambda}")));
    }
    Ok(())
}

pub fn mixture_log_likelihood(
    theta: &UnigramModel,
    topic: &TopicModel,
    lambda: f64,
    docs: &[TermVector],
) -> Result<f64> {
    log_likelihood(&pooled_counts(docs), theta, topic, lambda)
}

fn log_likelihood(
    counts: &BTreeMap<&str, f64>,
    theta: &UnigramModel,
    topic: &TopicModel,
    lambda: f64,
) -> Result<f64> {
    let mut ll = 0.0;
    for (&t, &c) in counts {
        let p = (1.0 - lambda) * theta.prob(t) + lambda * topic.0.prob(t);
        if p <= 0.0 {
            return Err(Error::Degenerate(format!("zero mixture probability for observed term `{t}`")));
        }
        ll += c * p.ln();
    }
    Ok(ll)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmControls {
    pub max_iters: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub tol: f64,
}

impl Default for EmControls {
    fn default() -> Self {
        EmControls {
            max_iters: 200,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub theta: UnigramModel,
    /// Log-likelihood of the initial estimate followed by one value per iteration.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
}

pub fn em_fit(
    subtopic_docs: &[TermVector],
    topic: &TopicModel,
    lambda: f64,
    controls: EmControls,
) -> Result<EmFit> {
    check_lambda(lambda)?;
    let counts = pooled_counts(subtopic_docs);
    if counts.is_empty() {
        return Err(Error::precondition("EM over sub-topic documents with no terms"));
    }
    let mut theta = UnigramModel::from_weights(counts.iter().map(|(t, c)| (*t, *c)))?;
    let mut ll = log_likelihood(&counts, &theta, topic, lambda)?;
    let mut trace = vec![ll];
    let mut iterations = 0;
    while iterations < controls.max_iters {
        // E-step: probability that an occurrence of w came from θ; M-step:
        // θ ∝ expected θ-generated counts.
        let expected = counts.iter().map(|(&t, &c)| {
            let own = (1.0 - lambda) * theta.prob(t);
            let background = lambda * topic.0.prob(t);
            let r = if background == 0.0 { 1.0 } else { own / (own + background) };
            (t, c * r)
        });
        theta = UnigramModel::from_weights(expected)?;
        iterations += 1;
        let next = log_likelihood(&counts, &theta, topic, lambda)?;
        trace.push(next);
        let gain = (next - ll) / ll.abs().max(f64::MIN_POSITIVE);
        ll = next;
        if gain < controls.tol {
            break;
        }
    }
    Ok(EmFit {
        theta,
        log_likelihoods: trace,
        iterations,
    })
}

/// θ clipped to its `alpha` most probable terms, with the mixture settings it
/// was fitted under.
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledSubtopicModel {
    pub theta: UnigramModel,
    pub lambda: f64,
    pub alpha: usize,
    pub topic_model_id: String,
    pub query_id: Option<String>,
    pub subtopic_id: Option<String>,
}

impl DistilledSubtopicModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = ModelFile {
            lambda: self.lambda,
            alpha: self.alpha,
            topic_model_id: self.topic_model_id.clone(),
            query_id: self.query_id.clone(),
            subtopic_id: self.subtopic_id.clone(),
            terms: self
                .theta
                .ranked_terms()
                .into_iter()
                .map(|(t, p)| (t.to_string(), p))
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file).expect("model serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        check_lambda(file.lambda)?;
        let theta = UnigramModel::from_probabilities(file.terms)?;
        Ok(DistilledSubtopicModel {
            theta,
            lambda: file.lambda,
            alpha: file.alpha,
            topic_model_id: file.topic_model_id,
            query_id: file.query_id,
            subtopic_id: file.subtopic_id,
        })
    }
}

/// On-disk layout: metadata plus `[term, probability]` pairs in descending
/// probability order.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    lambda: f64,
    alpha: usize,
    topic_model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subtopic_id: Option<String>,
    terms: Vec<(String, f64)>,
}

pub fn distill_with_topic(
    subtopic_docs: &[TermVector],
    topic: &TopicModel,
    topic_model_id: &str,
    lambda: f64,
    alpha: usize,
    controls: EmControls,
) -> Result<DistilledSubtopicModel> {
    if alpha == 0 {
        return Err(Error::precondition("alpha must be at least 1"));
    }
    let fit = em_fit(subtopic_docs, topic, lambda, controls)?;
    Ok(DistilledSubtopicModel {
        theta: clip_and_renormalize(&fit.theta, alpha)?,
        lambda,
        alpha,
        topic_model_id: topic_model_id.to_string(),
        query_id: None,
        subtopic_id: None,
    })
}

pub fn distill(
    subtopic_docs: &[TermVector],
    topic_docs: &[TermVector],
    lambda: f64,
    alpha: usize,
    controls: EmControls,
) -> Result<DistilledSubtopicModel> {
    let topic = topic_model_mle(topic_docs)?;
    distill_with_topic(subtopic_docs, &topic, "mle", lambda, alpha, controls)
}

/// Negative cross entropy between the distilled model and the document's
/// smoothed language model.
pub fn subtopic_similarity(
    doc: &TermVector,
    model: &DistilledSubtopicModel,
    collection: &CollectionStats,
    mu: f64,
) -> Result<f64> {
    score_by_model(&model.theta, doc, collection, mu)
}

/// Candidate grid for the mixture weight.
pub const DEFAULT_LAMBDAS: [f64; 4] = [0.1, 0.25, 0.5, 0.9];
pub const DEFAULT_ALPHAS: [usize; 4] = [10, 25, 50, 100];

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub alpha: usize,
    pub lambda: f64,
    pub ndcg: f64,
    /// Every evaluated `(alpha, lambda, ndcg)`, in evaluation order.
    pub evaluated: Vec<(usize, f64, f64)>,
}

/// Chooses `(alpha, lambda)` maximizing NDCG@5 of the similarity ranking over
/// the pseudo-judged documents: the distillation's own source documents are
/// relevant, `pseudo_nonrelevant` are not. Ties go to the smaller alpha, then
/// the smaller lambda.
#[allow(clippy::too_many_arguments)]
pub fn tune_hyperparams(
    candidate_alphas: &[usize],
    candidate_lambdas: &[f64],
    relevant: &[(String, TermVector)],
    pseudo_nonrelevant: &[(String, TermVector)],
    topic: &TopicModel,
    collection: &CollectionStats,
    mu: f64,
    controls: EmControls,
) -> Result<TuneOutcome> {
    if candidate_alphas.is_empty() || candidate_lambdas.is_empty() {
        return Err(Error::precondition("empty hyperparameter grid"));
    }
    let mut alphas = candidate_alphas.to_vec();
    alphas.sort_unstable();
    alphas.dedup();
    let mut lambdas = candidate_lambdas.to_vec();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();

    let source: Vec<TermVector> = relevant.iter().map(|(_, d)| d.clone()).collect();
    let mut evaluated = Vec::new();
    let mut best: Option<(usize, f64, f64)> = None;
    for &alpha in &alphas {
        for &lambda in &lambdas {
            let model = distill_with_topic(&source, topic, "", lambda, alpha, controls)?;
            let ndcg = pseudo_judged_ndcg(relevant, pseudo_nonrelevant, |doc| {
                subtopic_similarity(doc, &model, collection, mu)
            })?;
            evaluated.push((alpha, lambda, ndcg));
            if best.is_none_or(|(_, _, b)| ndcg > b + 1e-12) {
                best = Some((alpha, lambda, ndcg));
            }
        }
    }
    let (alpha, lambda, ndcg) = best.expect("grid is non-empty");
    Ok(TuneOutcome {
        alpha,
        lambda,
        ndcg,
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(pairs: &[(&str, u32)]) -> TermVector {
        TermVector::from_counts(pairs.iter().copied())
    }

    fn model(pairs: &[(&str, f64)]) -> UnigramModel {
        UnigramModel::from_weights(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn topic_mle_examples() {
        assert_eq!(topic_model_mle(&[tv(&[("a", 1)])]).unwrap().0, model(&[("a", 1.0)]));
        let m = topic_model_mle(&[tv(&[("a", 1)]), tv(&[("b", 1)])]).unwrap().0;
        assert_eq!((m.prob("a"), m.prob("b")), (0.5, 0.5));
        let m = topic_model_mle(&[tv(&[("a", 2), ("b", 1)]), tv(&[("b", 1)])]).unwrap().0;
        assert_eq!((m.prob("a"), m.prob("b")), (0.5, 0.5));
        assert!(topic_model_mle(&[TermVector::default()]).is_err());
    }

    #[test]
    fn likelihood_examples() {
        let docs = [tv(&[("a", 2)])];
        let topic = TopicModel(model(&[("a", 1.0)]));
        for lambda in [0.0, 0.3, 0.99] {
            let ll = mixture_log_likelihood(&model(&[("a", 1.0)]), &topic, lambda, &docs).unwrap();
            assert_eq!(ll, 0.0);
        }

        let docs = [tv(&[("a", 1), ("b", 1)])];
        let ll = mixture_log_likelihood(&model(&[("a", 1.0)]), &TopicModel(model(&[("b", 1.0)])), 0.5, &docs)
            .unwrap();
        assert!((ll - 2.0 * 0.5f64.ln()).abs() < 1e-15);

        let docs = [tv(&[("a", 3), ("b", 1)]), tv(&[("b", 2), ("c", 2)])];
        let mle = model(&[("a", 3.0), ("b", 3.0), ("c", 2.0)]);
        let t = TopicModel(model(&[("z", 1.0)]));
        let best = mixture_log_likelihood(&mle, &t, 0.0, &docs).unwrap();
        let expected = 3.0 * (3.0f64 / 8.0).ln() * 2.0 + 2.0 * (2.0f64 / 8.0).ln();
        assert!((best - expected).abs() < 1e-12);
        let other = model(&[("a", 0.3), ("b", 0.4), ("c", 0.3)]);
        assert!(mixture_log_likelihood(&other, &t, 0.0, &docs).unwrap() < best);

        let err = mixture_log_likelihood(&model(&[("a", 1.0)]), &t, 0.5, &[tv(&[("q", 1)])]);
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn em_without_background_is_mle() {
        let docs = [tv(&[("a", 3), ("b", 1)]), tv(&[("b", 2), ("c", 5)])];
        let topic = TopicModel(model(&[("a", 0.9), ("c", 0.1)]));
        let fit = em_fit(&docs, &topic, 0.0, EmControls::default()).unwrap();
        let mle = UnigramModel::from_weights([("a", 3.0), ("b", 3.0), ("c", 5.0)]).unwrap();
        for (t, p) in mle.iter() {
            assert!((fit.theta.prob(t) - p).abs() <= 1e-12);
        }
        assert!(fit.iterations <= 2);
    }

    #[test]
    fn em_forces_unshared_terms_into_theta() {
        let docs = [tv(&[("flag", 4), ("barbado", 6)])];
        let topic = TopicModel(model(&[("barbado", 0.8), ("history", 0.2)]));
        let fit = em_fit(&docs, &topic, 0.5, EmControls::default()).unwrap();
        assert!(fit.theta.prob("flag") >= 0.4);
        assert!((fit.theta.total() - 1.0).abs() < 1e-9);
        assert!(fit.log_likelihoods.windows(2).all(|w| w[1] >= w[0] - 1e-12 * w[0].abs()));
    }

    #[test]
    fn em_rejects_full_background_weight() {
        let docs = [tv(&[("a", 1)])];
        let topic = TopicModel(model(&[("a", 1.0)]));
        assert!(matches!(em_fit(&docs, &topic, 1.0, EmControls::default()), Err(Error::Precondition(_))));
        assert!(em_fit(&[], &topic, 0.5, EmControls::default()).is_err());
    }

    #[test]
    fn distill_clipping() {
        let sub = [tv(&[("flag", 5), ("blue", 3), ("gold", 2), ("island", 4)])];
        let topic_docs = [tv(&[("island", 10), ("history", 5)]), tv(&[("island", 3), ("gold", 1)])];
        let full = distill(&sub, &topic_docs, 0.5, 100, EmControls::default()).unwrap();
        let fit = em_fit(&sub, &topic_model_mle(&topic_docs).unwrap(), 0.5, EmControls::default()).unwrap();
        assert_eq!(full.theta, fit.theta);

        let one = distill(&sub, &topic_docs, 0.5, 1, EmControls::default()).unwrap();
        assert_eq!(one.theta.len(), 1);
        // "flag" never occurs in the topic docs and is the sub-topic's most frequent term.
        let top = fit.theta.ranked_terms()[0].0.to_string();
        assert_eq!(top, "flag");
        for alpha in 1..=4 {
            let m = distill(&sub, &topic_docs, 0.5, alpha, EmControls::default()).unwrap();
            assert!(m.theta.prob("flag") > 0.0);
            assert!((m.theta.total() - 1.0).abs() < 1e-9);
        }
        assert!(distill(&sub, &topic_docs, 0.5, 0, EmControls::default()).is_err());
    }

    #[test]
    fn similarity_examples() {
        let c = CollectionStats::from_documents([&tv(&[("a", 1), ("b", 1)])]);
        let doc = tv(&[("a", 2), ("b", 1)]);
        let theta_b = DistilledSubtopicModel {
            theta: model(&[("b", 1.0)]),
            lambda: 0.5,
            alpha: 1,
            topic_model_id: "t".into(),
            query_id: None,
            subtopic_id: None,
        };
        let s = subtopic_similarity(&doc, &theta_b, &c, 1.0).unwrap();
        assert!((s - 0.375f64.ln()).abs() < 1e-15);

        let theta = model(&[("a", 0.75), ("b", 0.25)]);
        let m = DistilledSubtopicModel { theta: theta.clone(), ..theta_b.clone() };
        let matched = tv(&[("a", 3), ("b", 1)]);
        let own = subtopic_similarity(&matched, &m, &c, 0.0).unwrap();
        assert!((own + theta.entropy()).abs() < 1e-12);
        for other in [tv(&[("a", 1), ("b", 1)]), tv(&[("a", 5), ("b", 1)]), tv(&[("a", 1), ("b", 3)])] {
            assert!(subtopic_similarity(&other, &m, &c, 0.0).unwrap() < own);
        }
        let more = tv(&[("a", 4), ("b", 1)]);
        assert!(subtopic_similarity(&more, &m, &c, 10.0).unwrap() > subtopic_similarity(&matched, &m, &c, 10.0).unwrap());
    }

    #[test]
    fn model_file_round_trip() {
        let m = DistilledSubtopicModel {
            theta: model(&[("flag", 0.6), ("blue", 0.3), ("gold", 0.1)]),
            lambda: 0.25,
            alpha: 10,
            topic_model_id: "167".into(),
            query_id: Some("167".into()),
            subtopic_id: Some("1".into()),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(DistilledSubtopicModel::load(&p).unwrap(), m);
    }

    fn ids(prefix: &str, docs: Vec<TermVector>) -> Vec<(String, TermVector)> {
        docs.into_iter().enumerate().map(|(i, d)| (format!("{prefix}{i}"), d)).collect()
    }

    #[test]
    fn tuning_ties_go_to_smallest() {
        let rel = ids("r", (0..5).map(|_| tv(&[("flag", 3)])).collect());
        let non = ids("n", (0..5).map(|_| tv(&[("beach", 3)])).collect());
        let all: Vec<TermVector> = rel.iter().chain(&non).map(|(_, d)| d.clone()).collect();
        let c = CollectionStats::from_documents(&all);
        let topic = topic_model_mle(&all).unwrap();
        let out = tune_hyperparams(&[50, 10], &[0.5, 0.1], &rel, &non, &topic, &c, 10.0, EmControls::default())
            .unwrap();
        assert_eq!((out.alpha, out.lambda, out.ndcg), (10, 0.1, 1.0));
        assert_eq!(out.evaluated.len(), 4);
    }

    #[test]
    fn tuning_prefers_small_alpha_when_general_terms_mislead() {
        // Pseudo-relevant docs: the distinctive term "flag", five general terms
        // once each, and per-document filler. Pseudo-non-relevant docs repeat
        // the general terms. A wide clip lets the general terms dominate.
        let general = ["g0", "g1", "g2", "g3", "g4"];
        let rel = ids(
            "r",
            (0..5)
                .map(|i| {
                    let mut d = TermVector::from_counts([("flag", 4)]);
                    for g in general {
                        d.add(g, 1);
                    }
                    for f in 0..20 {
                        d.add(&format!("filler{i}x{f}"), 1);
                    }
                    d
                })
                .collect(),
        );
        let non = ids(
            "n",
            (0..5)
                .map(|_| {
                    let mut d = TermVector::from_counts([("flag", 1)]);
                    for g in general {
                        d.add(g, 5);
                    }
                    d
                })
                .collect(),
        );
        let topic_docs: Vec<TermVector> = (0..5).map(|_| tv(&[("history", 30)])).collect();
        let topic = topic_model_mle(&topic_docs).unwrap();
        let mut everything: Vec<TermVector> = topic_docs.clone();
        everything.extend(rel.iter().chain(&non).map(|(_, d)| d.clone()));
        let c = CollectionStats::from_documents(&everything);
        let alphas = [30, 6, 1];
        let mu = 1.0;
        let out = tune_hyperparams(&alphas, &[0.1], &rel, &non, &topic, &c, mu, EmControls::default())
            .unwrap();

        // Oracle: exhaustive evaluation of every candidate, independent of the tuner.
        let source: Vec<TermVector> = rel.iter().map(|(_, d)| d.clone()).collect();
        let fit = em_fit(&source, &topic, 0.1, EmControls::default()).unwrap();
        let mut hits_at_5 = BTreeMap::new();
        for a in alphas {
            let theta = clip_and_renormalize(&fit.theta, a).unwrap();
            let score = |d: &TermVector| score_by_model(&theta, d, &c, mu).unwrap();
            let mut scored: Vec<(f64, &str, bool)> = rel
                .iter()
                .map(|(id, d)| (score(d), id.as_str(), true))
                .chain(non.iter().map(|(id, d)| (score(d), id.as_str(), false)))
                .collect();
            scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(y.1)));
            hits_at_5.insert(a, scored.iter().take(5).filter(|s| s.2).count());
        }
        assert_eq!(hits_at_5[&1], 5);
        assert!(hits_at_5[&6] < 5, "{hits_at_5:?}");
        assert_eq!((out.alpha, out.ndcg), (1, 1.0));
        assert!(out.evaluated.iter().any(|&(a, _, n)| a == 6 && n < 1.0));
    }
}
