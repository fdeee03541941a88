//! Multi-round ranking competitions.
//!
//! Each round, every agent submits a document (revised after seeing the
//! previous round's ranking), documents are truncated to the term cap, the
//! ranker orders them, and an intervention may force a planted document to the
//! top (herding) or replace the ranker with a biased model (biasing).
//!
//! A competition is a pure function of its [`CompetitionConfig`] and the
//! [`SimulationContext`]: every agent draws from its own generator stream
//! derived from the config seed.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::DistilledSubtopicModel;
use crate::document::{Document, PLANTED_PLAYER};
use crate::error::{Error, Result};
use crate::ranking::{rank, FeatureSet, LinearRankerWeights, Ranking, RankingEntry, RelevanceModel, Scorer};
use crate::text::{truncate_to_terms, CollectionStats, TermVector, TokenizerConfig, UnigramModel};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompetitionKind {
    Control,
    Sth,
    Stb,
    Nrh,
    Dlh,
    Qth,
    #[default]
    Simulated,
}

impl CompetitionKind {
    pub const ALL: [CompetitionKind; 7] = [
        CompetitionKind::Control,
        CompetitionKind::Sth,
        CompetitionKind::Stb,
        CompetitionKind::Nrh,
        CompetitionKind::Dlh,
        CompetitionKind::Qth,
        CompetitionKind::Simulated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompetitionKind::Control => "control",
            CompetitionKind::Sth => "sth",
            CompetitionKind::Stb => "stb",
            CompetitionKind::Nrh => "nrh",
            CompetitionKind::Dlh => "dlh",
            CompetitionKind::Qth => "qth",
            CompetitionKind::Simulated => "simulated",
        }
    }

    /// Whether competitions of this kind may contain a planted document.
    pub fn allows_planted(self) -> bool {
        !matches!(self, CompetitionKind::Control | CompetitionKind::Stb)
    }
}

impl fmt::Display for CompetitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompetitionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CompetitionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("kind", format!("unknown competition kind `{s}`")))
    }
}

/// One iteration: the revealed ranking and every submitted document.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based.
    pub iteration: u32,
    pub ranking: Ranking,
    /// Sorted by player id.
    pub documents: Vec<Document>,
}

impl RoundRecord {
    pub fn document(&self, player_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.player_id == player_id)
    }

    pub fn planted(&self) -> Option<&Document> {
        self.documents.iter().find(|d| d.planted)
    }

    pub fn top_document(&self) -> Option<&Document> {
        self.document(&self.ranking.top()?.doc_id)
    }
}

/// Full trace of one query's match.
#[derive(Debug, Clone, PartialEq)]
pub struct CompetitionRecord {
    pub query_id: String,
    /// Query text; empty when only the topic description is known.
    pub query: String,
    pub topic_text: String,
    pub subtopic_id: Option<String>,
    pub kind: CompetitionKind,
    pub rounds: Vec<RoundRecord>,
}

impl CompetitionRecord {
    /// The text rankers and query-term metrics should treat as the query.
    pub fn query_text(&self) -> &str {
        if self.query.is_empty() {
            &self.topic_text
        } else {
            &self.query
        }
    }

    pub fn final_documents(&self) -> &[Document] {
        self.rounds.last().map_or(&[], |r| r.documents.as_slice())
    }

    /// Sort key used for deterministic ordering of record collections.
    pub fn key(&self) -> (&str, CompetitionKind, Option<&str>) {
        (&self.query_id, self.kind, self.subtopic_id.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentKind {
    /// Replaces each of its sentences, with probability `rate`, by a random
    /// sentence of the previous round's top-ranked document.
    Mimic { rate: f64 },
    /// Resubmits its initial document.
    Static,
    /// Resubmits an archived player's documents for the same query.
    Replay {
        archived_player: String,
        kind: Option<CompetitionKind>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub player_id: String,
    pub kind: AgentKind,
    /// Iteration-1 submission (unused by replay agents).
    pub initial_text: String,
    /// Whether this agent's documents enter the live-document analyses.
    pub live: bool,
    pub validity_votes: Option<u8>,
}

impl AgentSpec {
    pub fn mimic(player_id: impl Into<String>, rate: f64, initial_text: impl Into<String>) -> Self {
        AgentSpec {
            player_id: player_id.into(),
            kind: AgentKind::Mimic { rate },
            initial_text: initial_text.into(),
            live: true,
            validity_votes: None,
        }
    }

    pub fn fixed(player_id: impl Into<String>, initial_text: impl Into<String>) -> Self {
        AgentSpec {
            player_id: player_id.into(),
            kind: AgentKind::Static,
            initial_text: initial_text.into(),
            live: false,
            validity_votes: None,
        }
    }

    pub fn replay(player_id: impl Into<String>, archived_player: impl Into<String>) -> Self {
        AgentSpec {
            player_id: player_id.into(),
            kind: AgentKind::Replay {
                archived_player: archived_player.into(),
                kind: None,
            },
            initial_text: String::new(),
            live: false,
            validity_votes: None,
        }
    }

    fn initial_document(&self) -> Document {
        Document {
            live: self.live,
            validity_votes: self.validity_votes,
            ..Document::new(&self.player_id, &self.initial_text)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BiasModel {
    Relevance(RelevanceModel),
    Distilled(DistilledSubtopicModel),
}

impl BiasModel {
    pub fn unigram(&self) -> &UnigramModel {
        match self {
            BiasModel::Relevance(rm) => &rm.model,
            BiasModel::Distilled(d) => &d.theta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Intervention {
    None,
    /// Force this document to rank 1 in every round.
    Herding { planted: Document },
    /// Rank by negative cross entropy against this model.
    Biasing { model: BiasModel },
}

#[derive(Debug, Clone, PartialEq)]
pub enum RankerSpec {
    QueryLikelihood,
    Linear {
        weights: LinearRankerWeights,
        features: FeatureSet,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompetitionConfig {
    pub query_id: String,
    pub query: String,
    pub topic_text: String,
    pub subtopic_id: Option<String>,
    pub kind: CompetitionKind,
    pub n_iterations: u32,
    pub ranking_size: usize,
    pub max_doc_terms: usize,
    pub ranker: RankerSpec,
    /// Dirichlet mass for every language-model score.
    pub mu: f64,
    pub intervention: Intervention,
    pub agents: Vec<AgentSpec>,
    pub seed: u64,
}

impl CompetitionConfig {
    /// Five iterations, five-document rankings, 150-term documents,
    /// query-likelihood ranking with μ = 1000.
    pub fn new(query_id: impl Into<String>, query: impl Into<String>) -> Self {
        CompetitionConfig {
            query_id: query_id.into(),
            query: query.into(),
            topic_text: String::new(),
            subtopic_id: None,
            kind: CompetitionKind::Simulated,
            n_iterations: 5,
            ranking_size: 5,
            max_doc_terms: 150,
            ranker: RankerSpec::QueryLikelihood,
            mu: crate::DEFAULT_MU,
            intervention: Intervention::None,
            agents: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self, ctx: &SimulationContext) -> Result<()> {
        if self.n_iterations < 1 {
            return Err(Error::config("n_iterations", "must be at least 1"));
        }
        if self.ranking_size < 2 {
            return Err(Error::config("ranking_size", "must be at least 2"));
        }
        if self.max_doc_terms < 1 {
            return Err(Error::config("max_doc_terms", "must be at least 1"));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::config("mu", "must be positive"));
        }
        let planted_slots = usize::from(matches!(self.intervention, Intervention::Herding { .. }));
        if self.agents.len() + planted_slots != self.ranking_size {
            return Err(Error::config(
                "agents",
                format!(
                    "{} agents + {planted_slots} planted slot(s) != ranking_size {}",
                    self.agents.len(),
                    self.ranking_size
                ),
            ));
        }
        let mut ids = BTreeSet::new();
        for (i, agent) in self.agents.iter().enumerate() {
            if agent.player_id.is_empty() || agent.player_id == PLANTED_PLAYER {
                return Err(Error::config(format!("agents[{i}].player_id"), "empty or reserved"));
            }
            if !ids.insert(agent.player_id.as_str()) {
                return Err(Error::config(
                    format!("agents[{i}].player_id"),
                    format!("duplicate player `{}`", agent.player_id),
                ));
            }
            match &agent.kind {
                AgentKind::Mimic { rate } if !(0.0..=1.0).contains(rate) => {
                    return Err(Error::config(format!("agents[{i}].rate"), "must be in [0, 1]"));
                }
                AgentKind::Replay { .. } if ctx.archive.is_none() => {
                    return Err(Error::config(
                        format!("agents[{i}]"),
                        "replay agents need an archive",
                    ));
                }
                _ => {}
            }
            if agent.validity_votes.is_some_and(|v| v > crate::metrics::MAX_VALIDITY_VOTES) {
                return Err(Error::config(format!("agents[{i}].validity_votes"), "must be in 0..=5"));
            }
        }
        match &self.intervention {
            Intervention::Herding { planted } if planted.text.trim().is_empty() => {
                return Err(Error::config("intervention.planted", "herding needs a planted document"));
            }
            Intervention::Herding { .. } if !self.kind.allows_planted() => {
                return Err(Error::config(
                    "intervention",
                    format!("`{}` competitions cannot plant documents", self.kind),
                ));
            }
            Intervention::Biasing { model } if model.unigram().is_empty() => {
                return Err(Error::config("intervention.model", "biasing needs a non-empty model"));
            }
            _ => {}
        }
        if let RankerSpec::Linear { weights, features } = &self.ranker {
            weights.check(features)?;
        }
        Ok(())
    }

    fn scorer(&self) -> Scorer {
        match (&self.intervention, &self.ranker) {
            (Intervention::Biasing { model }, _) => Scorer::Model {
                model: model.unigram().clone(),
                mu: self.mu,
            },
            (_, RankerSpec::QueryLikelihood) => Scorer::QueryLikelihood { mu: self.mu },
            (_, RankerSpec::Linear { weights, features }) => Scorer::Linear {
                weights: weights.clone(),
                features: features.clone(),
            },
        }
    }
}

/// Archived competitions that replay agents draw their submissions from.
#[derive(Debug, Clone, Default)]
pub struct ReplayArchive {
    records: Vec<CompetitionRecord>,
}

impl ReplayArchive {
    pub fn new(records: Vec<CompetitionRecord>) -> Self {
        ReplayArchive { records }
    }

    pub fn records(&self) -> &[CompetitionRecord] {
        &self.records
    }

    fn find(&self, query_id: &str, kind: Option<CompetitionKind>) -> Option<&CompetitionRecord> {
        self.records
            .iter()
            .find(|r| r.query_id == query_id && kind.is_none_or(|k| r.kind == k))
    }
}

/// Everything a competition needs besides its config.
#[derive(Debug, Clone)]
pub struct SimulationContext {
    pub tokenizer: TokenizerConfig,
    pub collection: CollectionStats,
    pub archive: Option<ReplayArchive>,
}

impl SimulationContext {
    /// Background statistics over every initial, planted, and archived
    /// document of the batch, extended to cover query and bias-model terms so
    /// every score is finite.
    pub fn for_configs(
        configs: &[CompetitionConfig],
        tokenizer: TokenizerConfig,
        archive: Option<ReplayArchive>,
    ) -> Self {
        let mut texts: Vec<&str> = Vec::new();
        for c in configs {
            texts.extend(c.agents.iter().map(|a| a.initial_text.as_str()));
            if let Intervention::Herding { planted } = &c.intervention {
                texts.push(&planted.text);
            }
        }
        if let Some(a) = &archive {
            texts.extend(
                a.records
                    .iter()
                    .flat_map(|r| &r.rounds)
                    .flat_map(|round| &round.documents)
                    .map(|d| d.text.as_str()),
            );
        }
        let vectors: Vec<TermVector> = texts
            .into_iter()
            .filter(|t| !t.is_empty())
            .map(|t| TermVector::from_text(t, &tokenizer, false))
            .collect();
        let mut extra: Vec<String> = Vec::new();
        for c in configs {
            extra.extend(crate::text::tokenize(&c.query, &tokenizer, true));
            if let Intervention::Biasing { model } = &c.intervention {
                extra.extend(model.unigram().terms().map(str::to_string));
            }
        }
        let collection =
            CollectionStats::from_documents(&vectors).covering(extra.iter().map(String::as_str));
        SimulationContext {
            tokenizer,
            collection,
            archive,
        }
    }
}

/// Puts `planted` at rank 1 (annotated as forced) and shifts every other entry
/// down one place.
pub fn plant_document(ranking: &Ranking, planted: &Document, score: f64) -> Result<Ranking> {
    if ranking.contains(planted.id()) {
        return Err(Error::Validation(format!(
            "planted document `{}` already in ranking",
            planted.id()
        )));
    }
    let mut entries = Vec::with_capacity(ranking.len() + 1);
    entries.push(RankingEntry {
        doc_id: planted.id().to_string(),
        score,
        forced: true,
    });
    entries.extend(ranking.entries.iter().cloned());
    Ok(Ranking {
        query_id: ranking.query_id.clone(),
        entries,
    })
}

/// Splits at `.`, `?` or `!` followed by whitespace. Terminators stay with
/// their sentence; surrounding whitespace is trimmed.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '?' | '!') {
            if let Some(&(j, next)) = chars.peek() {
                if next.is_whitespace() {
                    let s = text[start..i + c.len_utf8()].trim();
                    if !s.is_empty() {
                        out.push(s);
                    }
                    start = j;
                }
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// One revision by a mimicking publisher: each own sentence is replaced, with
/// probability `rate`, by a uniformly drawn sentence of the previous round's
/// top-ranked document.
pub fn mimic_step<R: Rng + ?Sized>(
    own: &Document,
    observed: &RoundRecord,
    rate: f64,
    rng: &mut R,
    max_doc_terms: usize,
    tokenizer: &TokenizerConfig,
) -> Document {
    let Some(top) = observed.top_document() else {
        return own.clone();
    };
    let source = split_sentences(&top.text);
    let sentences = split_sentences(&own.text);
    if source.is_empty() || sentences.is_empty() {
        return own.clone();
    }
    let mut changed = false;
    let revised: Vec<&str> = sentences
        .iter()
        .map(|&s| {
            if rng.random::<f64>() < rate {
                changed = true;
                source[rng.random_range(0..source.len())]
            } else {
                s
            }
        })
        .collect();
    if !changed {
        return own.clone();
    }
    own.with_text(truncate_to_terms(&revised.join(" "), tokenizer, max_doc_terms))
}

/// The archived submission of `archived_player` for `query_id` at `iteration`.
///
/// A player who left their document unchanged from the previous iteration is
/// treated as passive and replaced by a uniformly drawn submission of another
/// player of the same query and iteration.
pub fn replay_step<R: Rng + ?Sized>(
    archived_player: &str,
    query_id: &str,
    kind: Option<CompetitionKind>,
    iteration: u32,
    archive: &ReplayArchive,
    rng: &mut R,
) -> Result<Document> {
    let record = archive
        .find(query_id, kind)
        .ok_or_else(|| Error::Validation(format!("query `{query_id}` not in replay archive")))?;
    let round_at = |it: u32| record.rounds.iter().find(|r| r.iteration == it);
    let round = round_at(iteration).ok_or_else(|| {
        Error::Validation(format!("archive for `{query_id}` lacks iteration {iteration}"))
    })?;
    let doc = round.document(archived_player).ok_or_else(|| {
        Error::Validation(format!(
            "archive for `{query_id}` lacks player `{archived_player}` at iteration {iteration}"
        ))
    })?;
    let passive = iteration > 1
        && round_at(iteration - 1)
            .and_then(|r| r.document(archived_player))
            .is_some_and(|prev| prev.text == doc.text);
    if !passive {
        return Ok(doc.clone());
    }
    let others: Vec<&Document> = round
        .documents
        .iter()
        .filter(|d| d.player_id != archived_player && !d.planted)
        .collect();
    if others.is_empty() {
        return Ok(doc.clone());
    }
    Ok(others[rng.random_range(0..others.len())].clone())
}

/// Mutable per-competition state: each agent's current document and generator.
pub struct CompetitionState {
    documents: Vec<Document>,
    rngs: Vec<ChaCha8Rng>,
}

impl CompetitionState {
    pub fn new(config: &CompetitionConfig) -> Self {
        let rngs = (0..config.agents.len())
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(i as u64 + 1);
                rng
            })
            .collect();
        CompetitionState {
            documents: config.agents.iter().map(AgentSpec::initial_document).collect(),
            rngs,
        }
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }
}

/// Plays one iteration. `previous` is the prior round (absent in iteration 1).
pub fn run_round(
    state: &mut CompetitionState,
    iteration: u32,
    previous: Option<&RoundRecord>,
    config: &CompetitionConfig,
    ctx: &SimulationContext,
) -> Result<RoundRecord> {
    for (i, agent) in config.agents.iter().enumerate() {
        let rng = &mut state.rngs[i];
        let current = &state.documents[i];
        let next = match (&agent.kind, previous) {
            (AgentKind::Replay { archived_player, kind }, _) => {
                let archive = ctx
                    .archive
                    .as_ref()
                    .ok_or_else(|| Error::config("archive", "replay agents need an archive"))?;
                let doc = replay_step(archived_player, &config.query_id, *kind, iteration, archive, rng)?;
                Document {
                    player_id: agent.player_id.clone(),
                    planted: false,
                    live: agent.live,
                    ..doc
                }
            }
            (_, None) => current.clone(),
            (AgentKind::Static, Some(_)) => current.clone(),
            (AgentKind::Mimic { rate }, Some(prev)) => {
                mimic_step(current, prev, *rate, rng, config.max_doc_terms, &ctx.tokenizer)
            }
        };
        let text = truncate_to_terms(&next.text, &ctx.tokenizer, config.max_doc_terms);
        state.documents[i] = if text == next.text { next } else { next.with_text(text) };
    }

    let scorer = config.scorer();
    let mut ranking = rank(
        &config.query_id,
        &config.query,
        &state.documents,
        &scorer,
        &ctx.tokenizer,
        &ctx.collection,
    )?;
    let mut documents = state.documents.clone();
    if let Intervention::Herding { planted } = &config.intervention {
        let query = TermVector::from_text(&config.query, &ctx.tokenizer, true);
        let terms = TermVector::from_text(&planted.text, &ctx.tokenizer, false);
        let score = scorer.score(&query, &terms, planted, &ctx.collection)?;
        ranking = plant_document(&ranking, planted, score)?;
        documents.push(planted.clone());
    }
    documents.sort_by(|a, b| a.player_id.cmp(&b.player_id));
    Ok(RoundRecord {
        iteration,
        ranking,
        documents,
    })
}

pub fn run_competition(
    config: &CompetitionConfig,
    ctx: &SimulationContext,
) -> Result<CompetitionRecord> {
    config.validate(ctx)?;
    let mut state = CompetitionState::new(config);
    let mut rounds: Vec<RoundRecord> = Vec::with_capacity(config.n_iterations as usize);
    for iteration in 1..=config.n_iterations {
        let round = run_round(&mut state, iteration, rounds.last(), config, ctx)?;
        rounds.push(round);
    }
    Ok(CompetitionRecord {
        query_id: config.query_id.clone(),
        query: config.query.clone(),
        topic_text: config.topic_text.clone(),
        subtopic_id: config.subtopic_id.clone(),
        kind: config.kind,
        rounds,
    })
}

/// Runs independent competitions in parallel; output is ordered by
/// (query id, kind, sub-topic) regardless of scheduling.
pub fn run_batch(
    configs: &[CompetitionConfig],
    ctx: &SimulationContext,
) -> Result<Vec<CompetitionRecord>> {
    let mut records = configs
        .par_iter()
        .map(|c| run_competition(c, ctx))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(records)
}

/// Per-competition seed from a batch seed and a competition key (FNV-1a,
/// then a splitmix64 finalizer).
pub fn derive_seed(batch_seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in batch_seed.to_le_bytes().iter().chain(key.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
