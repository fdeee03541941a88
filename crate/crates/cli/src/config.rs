//! TOML batch configuration for `rankcomp simulate`.

use std::path::{Path, PathBuf};

use rankcomp_core::competition::{
    derive_seed, AgentKind, AgentSpec, BiasModel, CompetitionConfig, CompetitionKind, Intervention,
    RankerSpec, ReplayArchive,
};
use rankcomp_core::dataset::load_dataset;
use rankcomp_core::distill::DistilledSubtopicModel;
use rankcomp_core::ranking::{build_relevance_model, Feature, FeatureSet, LinearRankerWeights};
use rankcomp_core::synth::{generate, SynthParams};
use rankcomp_core::text::{load_stopwords, StemmerKind, StopwordScope};
use rankcomp_core::{CollectionStats, Document, Error, Result, TermVector, TokenizerConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub kind: CompetitionKind,
    #[serde(default = "default_iterations")]
    pub n_iterations: u32,
    #[serde(default = "default_ranking_size")]
    pub ranking_size: usize,
    #[serde(default = "default_max_terms")]
    pub max_doc_terms: usize,
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Dataset replay agents draw from.
    pub archive: Option<PathBuf>,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub ranker: RankerSection,
    #[serde(default)]
    pub intervention: InterventionSection,
    #[serde(default)]
    pub agents: Vec<AgentSection>,
    #[serde(default)]
    pub queries: Vec<QuerySection>,
    pub synthetic: Option<SynthSection>,
}

fn default_iterations() -> u32 {
    5
}
fn default_ranking_size() -> usize {
    5
}
fn default_max_terms() -> usize {
    150
}
fn default_mu() -> f64 {
    rankcomp_core::DEFAULT_MU
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    #[serde(default)]
    pub stemmer: StemmerKind,
    #[serde(default)]
    pub stopword_scope: StopwordScope,
    pub stopwords: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankerKind {
    #[default]
    QueryLikelihood,
    Linear,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankerSection {
    #[serde(default)]
    pub kind: RankerKind,
    pub weights: Option<PathBuf>,
    pub features: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionKind {
    #[default]
    None,
    Herding,
    Biasing,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSection {
    #[serde(default)]
    pub kind: InterventionKind,
    /// Distilled model used for every query without its own.
    pub model: Option<PathBuf>,
    /// Top-k clipping for relevance models built from `relevant_docs`.
    pub clip: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentType {
    Mimic,
    Static,
    Replay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    pub player_id: String,
    #[serde(rename = "type")]
    pub agent_type: AgentType,
    pub rate: Option<f64>,
    /// Index into the query's `docs` (defaults to the agent's position).
    pub doc: Option<usize>,
    pub live: Option<bool>,
    pub archived_player: Option<String>,
    pub archive_kind: Option<CompetitionKind>,
    pub validity_votes: Option<u8>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySection {
    pub query_id: String,
    #[serde(default)]
    pub query: String,
    #[serde(default)]
    pub topic_text: String,
    pub subtopic_id: Option<String>,
    pub kind: Option<CompetitionKind>,
    #[serde(default)]
    pub docs: Vec<String>,
    pub planted: Option<String>,
    pub bias_model: Option<PathBuf>,
    #[serde(default)]
    pub relevant_docs: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_queries: usize,
    #[serde(default)]
    pub seed: u64,
    pub topic_vocab: Option<usize>,
    pub planted_vocab: Option<usize>,
    pub initial_sentences: Option<usize>,
    pub initial_sentence_len: Option<usize>,
    pub planted_sentences: Option<usize>,
    pub planted_sentence_len: Option<usize>,
}

impl SynthSection {
    fn params(&self, n_docs: usize) -> SynthParams {
        let d = SynthParams::default();
        SynthParams {
            n_queries: self.n_queries,
            n_docs,
            topic_vocab: self.topic_vocab.unwrap_or(d.topic_vocab),
            planted_vocab: self.planted_vocab.unwrap_or(d.planted_vocab),
            initial_sentences: self.initial_sentences.unwrap_or(d.initial_sentences),
            initial_sentence_len: self.initial_sentence_len.unwrap_or(d.initial_sentence_len),
            planted_sentences: self.planted_sentences.unwrap_or(d.planted_sentences),
            planted_sentence_len: self.planted_sentence_len.unwrap_or(d.planted_sentence_len),
            ..d
        }
    }
}

/// A config resolved into engine inputs.
pub struct Resolved {
    pub configs: Vec<CompetitionConfig>,
    pub tokenizer: TokenizerConfig,
    pub archive: Option<ReplayArchive>,
    pub seed: u64,
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("byte {}", s.start))
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })
    }

    fn tokenizer(&self, base: &Path) -> Result<TokenizerConfig> {
        let mut tok = TokenizerConfig {
            stemmer: self.tokenizer.stemmer,
            stopword_scope: self.tokenizer.stopword_scope,
            ..TokenizerConfig::default()
        };
        if let Some(p) = &self.tokenizer.stopwords {
            tok.stopwords = load_stopwords(base.join(p))?;
        }
        Ok(tok)
    }

    fn ranker(&self, base: &Path) -> Result<RankerSpec> {
        match self.ranker.kind {
            RankerKind::QueryLikelihood => Ok(RankerSpec::QueryLikelihood),
            RankerKind::Linear => {
                let path = self
                    .ranker
                    .weights
                    .as_ref()
                    .ok_or_else(|| Error::config("ranker.weights", "required when ranker.kind = linear"))?;
                let features = match &self.ranker.features {
                    Some(names) => FeatureSet::new(
                        names
                            .iter()
                            .map(|n| n.parse::<Feature>())
                            .collect::<Result<Vec<_>>>()?,
                    ),
                    None => FeatureSet::default(),
                };
                Ok(RankerSpec::Linear {
                    weights: LinearRankerWeights::load(base.join(path))?,
                    features,
                })
            }
        }
    }

    fn queries(&self) -> Vec<QuerySection> {
        let mut out = self.queries.clone();
        if let Some(s) = &self.synthetic {
            let n_docs = self.agents.iter().filter_map(|a| a.doc).max().map_or(0, |m| m + 1);
            let n_docs = n_docs.max(self.agents.len());
            for q in generate(&s.params(n_docs), s.seed) {
                out.push(QuerySection {
                    query_id: q.query_id,
                    query: q.query,
                    docs: q.initial_texts,
                    planted: Some(q.planted_text),
                    ..QuerySection::default()
                });
            }
        }
        out
    }

    fn agents_for(&self, qi: usize, q: &QuerySection) -> Result<Vec<AgentSpec>> {
        self.agents
            .iter()
            .enumerate()
            .map(|(ai, a)| {
                let field = |name: &str| format!("agents[{ai}].{name}");
                let initial_text = match a.agent_type {
                    AgentType::Replay => String::new(),
                    _ => {
                        let idx = a.doc.unwrap_or(ai);
                        q.docs.get(idx).cloned().ok_or_else(|| {
                            Error::config(
                                format!("queries[{qi}].docs"),
                                format!("agent `{}` needs doc {idx}, query has {}", a.player_id, q.docs.len()),
                            )
                        })?
                    }
                };
                let kind = match a.agent_type {
                    AgentType::Mimic => AgentKind::Mimic {
                        rate: a.rate.ok_or_else(|| Error::config(field("rate"), "required for mimic agents"))?,
                    },
                    AgentType::Static => AgentKind::Static,
                    AgentType::Replay => AgentKind::Replay {
                        archived_player: a.archived_player.clone().ok_or_else(|| {
                            Error::config(field("archived_player"), "required for replay agents")
                        })?,
                        kind: a.archive_kind,
                    },
                };
                Ok(AgentSpec {
                    player_id: a.player_id.clone(),
                    live: a.live.unwrap_or(a.agent_type == AgentType::Mimic),
                    kind,
                    initial_text,
                    validity_votes: a.validity_votes,
                })
            })
            .collect()
    }

    /// Resolves queries, agents, models and seeds. `base` anchors relative
    /// paths; `seed_override` wins over the file's seed.
    pub fn resolve(&self, base: &Path, seed_override: Option<u64>) -> Result<Resolved> {
        let tokenizer = self.tokenizer(base)?;
        let ranker = self.ranker(base)?;
        let seed = seed_override.or(self.seed).unwrap_or(0);
        let archive = match &self.archive {
            Some(p) => Some(ReplayArchive::new(load_dataset(base.join(p))?)),
            None => None,
        };
        let queries = self.queries();
        if queries.is_empty() {
            return Err(Error::config("queries", "no queries configured"));
        }
        if self.agents.is_empty() {
            return Err(Error::config("agents", "no agents configured"));
        }
        let global_model = match &self.intervention.model {
            Some(p) => Some(DistilledSubtopicModel::load(base.join(p))?),
            None => None,
        };
        let background = background_stats(&queries, &tokenizer);

        let mut configs = Vec::with_capacity(queries.len());
        for (qi, q) in queries.iter().enumerate() {
            if q.query_id.is_empty() {
                return Err(Error::config(format!("queries[{qi}].query_id"), "must not be empty"));
            }
            let kind = q.kind.unwrap_or(self.kind);
            let intervention = match self.intervention.kind {
                InterventionKind::None => Intervention::None,
                InterventionKind::Herding => {
                    let text = q.planted.clone().filter(|t| !t.trim().is_empty()).ok_or_else(|| {
                        Error::config(
                            format!("queries[{qi}].planted"),
                            "required when intervention.kind = herding",
                        )
                    })?;
                    Intervention::Herding {
                        planted: Document::planted(text),
                    }
                }
                InterventionKind::Biasing => Intervention::Biasing {
                    model: self.bias_model(qi, q, base, global_model.as_ref(), &background, &tokenizer)?,
                },
            };
            let key = format!("{}/{}/{}", q.query_id, kind, q.subtopic_id.as_deref().unwrap_or("-"));
            configs.push(CompetitionConfig {
                query_id: q.query_id.clone(),
                query: q.query.clone(),
                topic_text: q.topic_text.clone(),
                subtopic_id: q.subtopic_id.clone(),
                kind,
                n_iterations: self.n_iterations,
                ranking_size: self.ranking_size,
                max_doc_terms: self.max_doc_terms,
                ranker: ranker.clone(),
                mu: self.mu,
                intervention,
                agents: self.agents_for(qi, q)?,
                seed: derive_seed(seed, &key),
            });
        }
        let mut keys = std::collections::BTreeSet::new();
        for c in &configs {
            if !keys.insert((c.query_id.clone(), c.kind, c.subtopic_id.clone())) {
                return Err(Error::config(
                    "queries",
                    format!("duplicate competition `{}` ({})", c.query_id, c.kind),
                ));
            }
        }
        Ok(Resolved {
            configs,
            tokenizer,
            archive,
            seed,
        })
    }

    fn bias_model(
        &self,
        qi: usize,
        q: &QuerySection,
        base: &Path,
        global: Option<&DistilledSubtopicModel>,
        background: &CollectionStats,
        tokenizer: &TokenizerConfig,
    ) -> Result<BiasModel> {
        if let Some(p) = &q.bias_model {
            return Ok(BiasModel::Distilled(DistilledSubtopicModel::load(base.join(p))?));
        }
        if !q.relevant_docs.is_empty() {
            let docs: Vec<(String, TermVector)> = q
                .relevant_docs
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("{}-rel{i}", q.query_id), TermVector::from_text(t, tokenizer, false)))
                .collect();
            let rm = build_relevance_model(&docs, background, self.mu)?;
            return Ok(BiasModel::Relevance(match self.intervention.clip {
                Some(k) => rm.clipped(k)?,
                None => rm,
            }));
        }
        global.cloned().map(BiasModel::Distilled).ok_or_else(|| {
            Error::config(
                format!("queries[{qi}].bias_model"),
                "required when intervention.kind = biasing (or set intervention.model or relevant_docs)",
            )
        })
    }
}

fn background_stats(queries: &[QuerySection], tokenizer: &TokenizerConfig) -> CollectionStats {
    let vectors: Vec<TermVector> = queries
        .iter()
        .flat_map(|q| q.docs.iter().chain(&q.relevant_docs).chain(q.planted.iter()))
        .map(|t| TermVector::from_text(t, tokenizer, false))
        .collect();
    CollectionStats::from_documents(&vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> SimConfig {
        toml::from_str(s).unwrap()
    }

    const BASE: &str = r#"
        seed = 3
        [[agents]]
        player_id = "m1"
        type = "mimic"
        rate = 0.5
        [[agents]]
        player_id = "s1"
        type = "static"
        [[queries]]
        query_id = "q1"
        query = "flag"
        docs = ["The flag is blue.", "Rum is made here."]
    "#;

    #[test]
    fn resolves_minimal_config() {
        let mut c = parse(BASE);
        c.ranking_size = 2;
        let r = c.resolve(Path::new("."), None).unwrap();
        assert_eq!(r.seed, 3);
        assert_eq!(r.configs.len(), 1);
        let cfg = &r.configs[0];
        assert_eq!(cfg.agents.len(), 2);
        assert!(cfg.agents[0].live && !cfg.agents[1].live);
        assert_eq!(cfg.agents[1].initial_text, "Rum is made here.");
        assert_eq!(c.resolve(Path::new("."), Some(9)).unwrap().seed, 9);
    }

    #[test]
    fn herding_without_planted_names_field() {
        let mut c = parse(BASE);
        c.intervention.kind = InterventionKind::Herding;
        let err = c.resolve(Path::new("."), None).err().unwrap();
        assert!(matches!(&err, Error::Config { field, .. } if field == "queries[0].planted"), "{err}");
    }

    #[test]
    fn mimic_needs_rate() {
        let c = parse(&BASE.replace("rate = 0.5", ""));
        let err = c.resolve(Path::new("."), None).err().unwrap();
        assert!(matches!(&err, Error::Config { field, .. } if field == "agents[0].rate"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<SimConfig>("bogus = 1").is_err());
    }

    #[test]
    fn synthetic_queries_fill_docs() {
        let mut c = parse(BASE);
        c.queries.clear();
        c.synthetic = Some(SynthSection {
            n_queries: 3,
            ..Default::default()
        });
        let r = c.resolve(Path::new("."), None).unwrap();
        assert_eq!(r.configs.len(), 3);
        assert!(r.configs.iter().all(|c| !c.agents[1].initial_text.is_empty()));
    }

    #[test]
    fn relevance_docs_build_bias_model() {
        let mut c = parse(BASE);
        c.intervention.kind = InterventionKind::Biasing;
        c.intervention.clip = Some(2);
        c.queries[0].relevant_docs = vec!["Trident trident gold.".into()];
        let r = c.resolve(Path::new("."), None).unwrap();
        match &r.configs[0].intervention {
            Intervention::Biasing { model } => assert_eq!(model.unigram().len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
