use criterion::{criterion_group, criterion_main, Criterion};
use rankcomp_bench::{queries, vectors};
use rankcomp_core::distill::{em_fit, topic_model_mle, EmControls};
use rankcomp_core::ranking::{build_relevance_model, query_likelihood_score, rank, score_by_model, Scorer};
use rankcomp_core::stats::{paired_permutation_test, PairedSample};
use rankcomp_core::{CollectionStats, Document, TermVector, TokenizerConfig};
use std::hint::black_box;

fn scoring(c: &mut Criterion) {
    let qs = queries(20, 1);
    let texts: Vec<String> = qs.iter().flat_map(|q| q.initial_texts.clone()).collect();
    let docs = vectors(&texts);
    let coll = CollectionStats::from_documents(&docs);
    let tok = TokenizerConfig::default();
    let query = TermVector::from_text(&qs[0].query, &tok, true);
    let coll = coll.covering(query.terms());

    c.bench_function("query_likelihood/100_docs", |b| {
        b.iter(|| {
            docs.iter()
                .map(|d| query_likelihood_score(black_box(&query), d, &coll, 1000.0).unwrap())
                .sum::<f64>()
        })
    });

    let named: Vec<(String, TermVector)> =
        docs.iter().take(5).enumerate().map(|(i, d)| (format!("d{i}"), d.clone())).collect();
    c.bench_function("relevance_model/5_docs", |b| {
        b.iter(|| build_relevance_model(black_box(&named), &coll, 1000.0).unwrap())
    });

    let rm = build_relevance_model(&named, &coll, 1000.0).unwrap();
    c.bench_function("cross_entropy/100_docs", |b| {
        b.iter(|| {
            docs.iter()
                .map(|d| score_by_model(black_box(&rm.model), d, &coll, 1000.0).unwrap())
                .sum::<f64>()
        })
    });

    let documents: Vec<Document> =
        texts.iter().enumerate().map(|(i, t)| Document::new(format!("p{i}"), t)).collect();
    let scorer = Scorer::QueryLikelihood { mu: 1000.0 };
    c.bench_function("rank/100_docs", |b| {
        b.iter(|| rank("q", black_box(&qs[0].query), &documents, &scorer, &tok, &coll).unwrap())
    });
}

fn distillation(c: &mut Criterion) {
    let qs = queries(4, 2);
    let texts: Vec<String> = qs.iter().flat_map(|q| q.initial_texts.clone()).collect();
    let docs = vectors(&texts);
    let topic = topic_model_mle(&docs).unwrap();
    c.bench_function("em_fit/5_docs", |b| {
        b.iter(|| em_fit(black_box(&docs[..5]), &topic, 0.5, EmControls::default()).unwrap())
    });
}

fn permutation(c: &mut Criterion) {
    let sample = PairedSample::new(
        (0..30).map(|i| ((format!("q{i}"), 1), (f64::from(i) * 0.1, f64::from(i % 7) * 0.3))),
    )
    .unwrap();
    let mut group = c.benchmark_group("permutation");
    group.sample_size(20);
    group.bench_function("30_pairs/100k", |b| {
        b.iter(|| paired_permutation_test(black_box(&sample), 100_000, 9).unwrap())
    });
    group.finish();
}

criterion_group!(benches, scoring, distillation, permutation);
criterion_main!(benches);
