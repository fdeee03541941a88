//! Fixtures shared by the criterion benches under `benches/`.

use rankcomp_core::synth::{generate, SynthParams, SynthQuery};
use rankcomp_core::{TermVector, TokenizerConfig};

/// `n` synthetic queries with their initial documents.
pub fn queries(n: usize, seed: u64) -> Vec<SynthQuery> {
    generate(
        &SynthParams {
            n_queries: n,
            ..SynthParams::default()
        },
        seed,
    )
}

pub fn vectors(texts: &[String]) -> Vec<TermVector> {
    let tok = TokenizerConfig::default();
    texts.iter().map(|t| TermVector::from_text(t, &tok, false)).collect()
}
