//! Synthetic competition corpora for tests, benchmarks and demos.
//!
//! Words are pronounceable pseudo-words that avoid stopwords and plural-like
//! endings, so tokenization maps each word to itself. Each query gets its own
//! topical vocabulary and a disjoint vocabulary for its planted document.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::text::default_stopwords;

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n_queries: usize,
    /// Initial documents generated per query.
    pub n_docs: usize,
    pub topic_vocab: usize,
    pub planted_vocab: usize,
    pub query_terms: usize,
    /// Probability that a word slot of an initial document holds a query term.
    pub query_term_rate: f64,
    pub initial_sentences: usize,
    pub initial_sentence_len: usize,
    pub planted_sentences: usize,
    pub planted_sentence_len: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_queries: 30,
            n_docs: 5,
            topic_vocab: 60,
            planted_vocab: 40,
            query_terms: 2,
            query_term_rate: 0.08,
            initial_sentences: 10,
            initial_sentence_len: 13,
            planted_sentences: 3,
            planted_sentence_len: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthQuery {
    pub query_id: String,
    pub query: String,
    pub initial_texts: Vec<String>,
    pub planted_text: String,
    pub topic_vocab: Vec<String>,
    pub planted_vocab: Vec<String>,
}

/// `n` fresh pseudo-words not already in `taken`.
pub fn pseudo_words<R: Rng + ?Sized>(n: usize, rng: &mut R, taken: &mut BTreeSet<String>) -> Vec<String> {
    let stop = default_stopwords();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let word: String = (0..syllables)
            .flat_map(|_| [*CONSONANTS.choose(rng).unwrap(), *VOWELS.choose(rng).unwrap()])
            .collect();
        if !stop.contains(&word) && taken.insert(word.clone()) {
            out.push(word);
        }
    }
    out
}

/// One sentence of `len` words, capitalized and ending with a period.
pub fn sentence<R: Rng + ?Sized>(len: usize, rng: &mut R, mut pick: impl FnMut(&mut R) -> String) -> String {
    let words: Vec<String> = (0..len).map(|_| pick(rng)).collect();
    let mut s = words.join(" ");
    if let Some(first) = s.get(0..1) {
        let upper = first.to_uppercase();
        s.replace_range(0..1, &upper);
    }
    s.push('.');
    s
}

fn paragraph<R: Rng + ?Sized>(
    n_sentences: usize,
    len: usize,
    rng: &mut R,
    mut pick: impl FnMut(&mut R) -> String,
) -> String {
    (0..n_sentences)
        .map(|_| sentence(len, rng, &mut pick))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn generate(params: &SynthParams, seed: u64) -> Vec<SynthQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = BTreeSet::new();
    (0..params.n_queries)
        .map(|i| {
            let topic_vocab = pseudo_words(params.topic_vocab, &mut rng, &mut taken);
            let planted_vocab = pseudo_words(params.planted_vocab, &mut rng, &mut taken);
            let query_words: Vec<String> = topic_vocab[..params.query_terms.min(topic_vocab.len())].to_vec();
            let initial_texts = (0..params.n_docs)
                .map(|_| {
                    paragraph(params.initial_sentences, params.initial_sentence_len, &mut rng, |r| {
                        if !query_words.is_empty() && r.random::<f64>() < params.query_term_rate {
                            query_words.choose(r).unwrap().clone()
                        } else {
                            topic_vocab.choose(r).unwrap().clone()
                        }
                    })
                })
                .collect();
            let planted_text =
                paragraph(params.planted_sentences, params.planted_sentence_len, &mut rng, |r| {
                    planted_vocab.choose(r).unwrap().clone()
                });
            SynthQuery {
                query_id: format!("q{:03}", i + 1),
                query: query_words.join(" "),
                initial_texts,
                planted_text,
                topic_vocab,
                planted_vocab,
            }
        })
        .collect()
}
