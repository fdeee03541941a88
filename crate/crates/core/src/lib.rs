//! Ranking-competition simulation and content-effect analysis.
//!
//! The crate covers the whole pipeline: text statistics and smoothed language
//! models ([`text`]), rankers including the relevance-model biased ranker
//! ([`ranking`]), sub-topic model distillation ([`distill`]), the multi-round
//! competition engine with herding and biasing interventions
//! ([`competition`]), per-document measurements and their per-iteration
//! aggregation ([`metrics`]), paired permutation testing ([`stats`]) and
//! dataset/report I/O ([`dataset`]).

pub mod competition;
pub mod dataset;
pub mod distill;
pub mod document;
pub mod error;
pub mod metrics;
pub mod ranking;
pub mod stats;
pub mod synth;
pub mod text;

pub use competition::{CompetitionConfig, CompetitionKind, CompetitionRecord, RoundRecord};
pub use document::Document;
pub use error::{Error, Result};
pub use metrics::MetricSeries;
pub use ranking::{Ranking, RelevanceModel};
pub use text::{CollectionStats, TermVector, TokenizerConfig, UnigramModel};

/// Default Dirichlet smoothing mass.
pub const DEFAULT_MU: f64 = 1000.0;

/// A value paired with an optional warning for inputs at the edge of a
/// measure's domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Flagged<T> {
    pub value: T,
    pub warning: Option<String>,
}

impl<T> Flagged<T> {
    pub fn ok(value: T) -> Self {
        Flagged {
            value,
            warning: None,
        }
    }

    pub fn warn(value: T, warning: impl Into<String>) -> Self {
        let warning = warning.into();
        log::warn!("{warning}");
        Flagged {
            value,
            warning: Some(warning),
        }
    }
}
