//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rankcomp_core::competition::{
    derive_seed, run_batch, AgentSpec, CompetitionConfig, CompetitionKind, Intervention,
    SimulationContext,
};
use rankcomp_core::dataset::load_dataset;
use rankcomp_core::distill::{em_fit, EmControls, TopicModel};
use rankcomp_core::document::{Document, PLANTED_PLAYER};
use rankcomp_core::metrics::{frac_query, query_cover, spam_score, Analyzer, Measure, MetricSeries};
use rankcomp_core::ranking::{build_relevance_model, score_by_doc_average, score_by_model};
use rankcomp_core::stats::{bonferroni, paired_permutation_test, PairedSample};
use rankcomp_core::synth::{generate, SynthParams};
use rankcomp_core::text::{TokenizerConfig, UnigramModel};
use rankcomp_core::{CollectionStats, CompetitionRecord, TermVector};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("runtime {:.2?} exceeds {:.0?}", elapsed, limit),
    )
}

fn random_doc(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> TermVector {
    let len = rng.random_range(1..=max_len);
    TermVector::from_terms((0..len).map(|_| format!("w{}", rng.random_range(0..vocab))))
}

fn c1_model_equals_doc_average() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let vocab = rng.random_range(1..=50);
        let n = rng.random_range(2..=10);
        let set: Vec<TermVector> = (0..n).map(|_| random_doc(&mut rng, vocab, 40)).collect();
        let target = random_doc(&mut rng, vocab, 40);
        let mu = [1.0, 100.0, 1000.0][rng.random_range(0..3)];
        let coll = CollectionStats::from_documents(set.iter().chain([&target]));
        let named: Vec<(String, TermVector)> =
            set.iter().enumerate().map(|(i, d)| (format!("d{i}"), d.clone())).collect();
        let rm = build_relevance_model(&named, &coll, mu).map_err(|e| e.to_string())?;
        let a = score_by_model(&rm.model, &target, &coll, mu).map_err(|e| e.to_string())?;
        let b = score_by_doc_average(&set, &target, &coll, mu).map_err(|e| e.to_string())?;
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-9, format!("max |diff| = {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("100 instances, max |diff| = {worst:.3e}"))
}

fn pooled(docs: &[TermVector]) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    for d in docs {
        for (t, c) in d.iter() {
            *counts.entry(t.to_string()).or_insert(0.0) += f64::from(c);
        }
    }
    counts
}

/// Mixture log-likelihood written out independently of the library.
fn oracle_ll(counts: &[f64], theta: &[f64], topic: &[f64], lambda: f64) -> f64 {
    counts
        .iter()
        .zip(theta)
        .zip(topic)
        .map(|((c, t), p)| c * ((1.0 - lambda) * t + lambda * p).ln())
        .sum()
}

fn grid_search(counts: &[f64], topic: &[f64], lambda: f64) -> Vec<f64> {
    let k = counts.len();
    let eval = |free: &[f64]| -> Option<f64> {
        let last = 1.0 - free.iter().sum::<f64>();
        if last < -1e-12 {
            return None;
        }
        let mut theta = free.to_vec();
        theta.push(last.max(0.0));
        let v = oracle_ll(counts, &theta, topic, lambda);
        v.is_finite().then_some(v)
    };
    fn walk(
        ranges: &[(f64, f64)],
        step: f64,
        cur: &mut Vec<f64>,
        eval: &dyn Fn(&[f64]) -> Option<f64>,
        best: &mut (f64, Vec<f64>),
    ) {
        if cur.len() == ranges.len() {
            if let Some(v) = eval(cur) {
                if v > best.0 {
                    *best = (v, cur.clone());
                }
            }
            return;
        }
        let (lo, hi) = ranges[cur.len()];
        let mut x = lo;
        while x <= hi + 1e-12 {
            cur.push(x.clamp(0.0, 1.0));
            walk(ranges, step, cur, eval, best);
            cur.pop();
            x += step;
        }
    }
    let mut h = 1.0 / 20.0;
    let mut best = (f64::NEG_INFINITY, Vec::new());
    walk(&vec![(0.0, 1.0); k - 1], h, &mut Vec::new(), &eval, &mut best);
    while h > 1e-3 {
        let centre = best.1.clone();
        let ranges: Vec<(f64, f64)> =
            centre.iter().map(|c| ((c - 2.0 * h).max(0.0), (c + 2.0 * h).min(1.0))).collect();
        let step = h / 4.0;
        walk(&ranges, step, &mut Vec::new(), &eval, &mut best);
        h = step;
    }
    let mut theta = best.1;
    theta.push((1.0 - theta.iter().sum::<f64>()).max(0.0));
    theta
}

fn c2_em() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // (a) monotone likelihood
    for i in 0..50 {
        let vocab = rng.random_range(2..=30);
        let docs: Vec<TermVector> =
            (0..rng.random_range(1..=5)).map(|_| random_doc(&mut rng, vocab, 60)).collect();
        let topic = TopicModel(
            UnigramModel::from_weights((0..vocab).map(|v| (format!("w{v}"), rng.random::<f64>() + 0.01)))
                .unwrap(),
        );
        let lambda = rng.random_range(0.0..0.95);
        let fit = em_fit(&docs, &topic, lambda, EmControls::default()).map_err(|e| e.to_string())?;
        for w in fit.log_likelihoods.windows(2) {
            ensure(
                w[1] >= w[0] - 1e-12 * w[0].abs(),
                format!("(a) instance {i}: log-likelihood fell {} -> {}", w[0], w[1]),
            )?;
        }
    }
    // (b) no background weight gives the MLE
    for i in 0..20 {
        let docs: Vec<TermVector> = (0..3).map(|_| random_doc(&mut rng, 20, 50)).collect();
        let topic = TopicModel(UnigramModel::from_weights([("w0", 1.0)]).unwrap());
        let fit = em_fit(&docs, &topic, 0.0, EmControls::default()).map_err(|e| e.to_string())?;
        let counts = pooled(&docs);
        let total: f64 = counts.values().sum();
        for (t, c) in &counts {
            let diff = (fit.theta.prob(t) - c / total).abs();
            ensure(diff <= 1e-12, format!("(b) instance {i}: term {t} off by {diff:e}"))?;
        }
    }
    // (c) grid oracle on tiny vocabularies
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let k = rng.random_range(2..=5);
        let terms: Vec<String> = (0..k).map(|v| format!("w{v}")).collect();
        let doc = TermVector::from_counts(terms.iter().map(|t| (t.as_str(), rng.random_range(1..=12u32))));
        let topic_w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
        let topic_sum: f64 = topic_w.iter().sum();
        let topic_p: Vec<f64> = topic_w.iter().map(|w| w / topic_sum).collect();
        let topic = TopicModel(
            UnigramModel::from_weights(terms.iter().cloned().zip(topic_w.iter().copied())).unwrap(),
        );
        let lambda = [0.1, 0.3, 0.5][i % 3];
        let controls = EmControls {
            max_iters: 100_000,
            tol: f64::NEG_INFINITY,
        };
        let fit = em_fit(std::slice::from_ref(&doc), &topic, lambda, controls).map_err(|e| e.to_string())?;
        let counts: Vec<f64> = terms.iter().map(|t| f64::from(doc.tf(t))).collect();
        let oracle = grid_search(&counts, &topic_p, lambda);
        for (t, o) in terms.iter().zip(&oracle) {
            let d = (fit.theta.prob(t) - o).abs();
            worst = worst.max(d);
            ensure(d <= 1e-2, format!("(c) instance {i}: term {t} EM {} vs grid {o}", fit.theta.prob(t)))?;
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("(a) 50 monotone traces, (b) 20 MLE fits, (c) max grid gap {worst:.2e}"))
}

const RATES: [f64; 3] = [0.25, 0.5, 0.75];

fn herding_batch(
    queries: &[rankcomp_core::synth::SynthQuery],
    rate: f64,
    kind: CompetitionKind,
    herding: bool,
    planted: &dyn Fn(&rankcomp_core::synth::SynthQuery) -> String,
    seed: u64,
) -> Vec<CompetitionConfig> {
    queries
        .iter()
        .map(|q| {
            let mut c = CompetitionConfig::new(&q.query_id, &q.query);
            c.kind = kind;
            c.seed = derive_seed(seed, &format!("{}/{kind}/{rate}", q.query_id));
            c.agents = vec![
                AgentSpec::mimic("m1", rate, &q.initial_texts[0]),
                AgentSpec::mimic("m2", rate, &q.initial_texts[1]),
                AgentSpec::fixed("s1", &q.initial_texts[2]),
                AgentSpec::fixed("s2", &q.initial_texts[3]),
            ];
            if herding {
                c.intervention = Intervention::Herding {
                    planted: Document::planted(planted(q)),
                };
            } else {
                c.agents.push(AgentSpec::fixed("s3", &q.initial_texts[4]));
            }
            c
        })
        .collect()
}

fn simulate(configs: &[CompetitionConfig]) -> Vec<CompetitionRecord> {
    let ctx = SimulationContext::for_configs(configs, TokenizerConfig::default(), None);
    run_batch(configs, &ctx).expect("simulation runs")
}

fn series(records: &[CompetitionRecord], measure: Measure, kind: CompetitionKind) -> MetricSeries {
    let analyzer = Analyzer::new(records, TokenizerConfig::default(), Vec::new(), 1000.0);
    let name = format!("{}:{}", measure.name(), kind.name());
    analyzer
        .analyze(records, &[measure])
        .expect("analysis runs")
        .into_iter()
        .find(|s| s.name == name)
        .expect("series present")
}

fn c3_herding_cosine(herded: &mut Vec<CompetitionRecord>) -> Check {
    let start = Instant::now();
    let queries = generate(&SynthParams::default(), 3);
    let mut lines = Vec::new();
    for rate in RATES {
        let herd = simulate(&herding_batch(&queries, rate, CompetitionKind::Sth, true, &|q| q.planted_text.clone(), 30));
        let ctrl = simulate(&herding_batch(&queries, rate, CompetitionKind::Control, false, &|q| q.planted_text.clone(), 30));
        let mut all = herd.clone();
        all.extend(ctrl);
        let h = series(&all, Measure::CosineToPlanted, CompetitionKind::Sth);
        let c = series(&all, Measure::CosineToPlanted, CompetitionKind::Control);
        let (h1, h5, c5) = (h.mean_at(1).unwrap(), h.mean_at(5).unwrap(), c.mean_at(5).unwrap());
        ensure(h5 > h1, format!("rate {rate}: iteration 5 {h5} <= iteration 1 {h1}"))?;
        ensure(h5 > c5, format!("rate {rate}: herding {h5} <= control {c5}"))?;
        lines.push(format!("rate {rate}: {h1:.3}->{h5:.3} vs control {c5:.3}"));
        herded.extend(herd);
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(lines.join("; "))
}

fn c4_doc_length(herded: &mut Vec<CompetitionRecord>) -> Check {
    let start = Instant::now();
    let queries = generate(&SynthParams::default(), 4);
    let long = SynthParams {
        planted_sentences: 10,
        planted_sentence_len: 13,
        ..SynthParams::default()
    };
    let long_planted = generate(&long, 4);
    let long_by_id: BTreeMap<&str, &str> =
        long_planted.iter().map(|q| (q.query_id.as_str(), q.planted_text.as_str())).collect();
    let mut lines = Vec::new();
    for rate in RATES {
        let short = simulate(&herding_batch(&queries, rate, CompetitionKind::Dlh, true, &|q| q.planted_text.clone(), 40));
        let ctrl = simulate(&herding_batch(
            &queries,
            rate,
            CompetitionKind::Dlh,
            true,
            &|q| long_by_id[q.query_id.as_str()].to_string(),
            40,
        ));
        let s = series(&short, Measure::DocLength, CompetitionKind::Dlh);
        let c = series(&ctrl, Measure::DocLength, CompetitionKind::Dlh);
        let means: Vec<f64> = (1..=4).map(|i| s.mean_at(i).unwrap()).collect();
        ensure(
            means.windows(2).all(|w| w[1] <= w[0]),
            format!("rate {rate}: lengths not non-increasing {means:?}"),
        )?;
        let c4 = c.mean_at(4).unwrap();
        ensure(means[3] < c4, format!("rate {rate}: iteration 4 {} >= control {c4}", means[3]))?;
        lines.push(format!("rate {rate}: {:.1}->{:.1} vs control {c4:.1}", means[0], means[3]));
        herded.extend(short);
        herded.extend(ctrl);
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(lines.join("; "))
}

fn c5_planted_rank(herded: &[CompetitionRecord]) -> Check {
    let rounds: Vec<_> = herded.iter().flat_map(|r| &r.rounds).collect();
    ensure(!rounds.is_empty(), "no herding rounds recorded")?;
    let top = rounds
        .iter()
        .filter(|r| r.ranking.top().is_some_and(|e| e.doc_id == PLANTED_PLAYER && e.forced))
        .count();
    ensure(top == rounds.len(), format!("planted at rank 1 in {top}/{} rounds", rounds.len()))?;
    Ok(format!("{top}/{} rounds", rounds.len()))
}

fn exact_p(diffs: &[f64]) -> f64 {
    let obs = diffs.iter().sum::<f64>().abs();
    let n = diffs.len();
    let hits = (0u32..1 << n)
        .filter(|mask| {
            let s: f64 = diffs
                .iter()
                .enumerate()
                .map(|(i, d)| if mask >> i & 1 == 1 { -d } else { *d })
                .sum();
            s.abs() >= obs - 1e-9
        })
        .count();
    hits as f64 / f64::from(1u32 << n)
}

fn sample_of(pairs: Vec<(f64, f64)>) -> PairedSample {
    PairedSample::new(pairs.into_iter().enumerate().map(|(i, p)| ((format!("q{i}"), 1), p))).unwrap()
}

fn c6_permutation() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(1..=10);
        let shift = rng.random_range(0.0..0.8);
        let pairs: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>() + shift, rng.random::<f64>())).collect();
        let s = sample_of(pairs);
        let p = paired_permutation_test(&s, 100_000, rng.next_u64()).unwrap().p_value;
        worst = worst.max((p - exact_p(&s.differences())).abs());
    }
    ensure(worst <= 0.01, format!("(a) max |sampled - exact| = {worst}"))?;
    let mut rejections = 0;
    for _ in 0..1000 {
        let pairs: Vec<(f64, f64)> = (0..30)
            .map(|_| (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
            .collect();
        let p = paired_permutation_test(&sample_of(pairs), 10_000, rng.next_u64()).unwrap().p_value;
        if p <= 0.05 {
            rejections += 1;
        }
    }
    let rate = f64::from(rejections) / 1000.0;
    ensure((rate - 0.05).abs() <= 0.02, format!("(b) null rejection rate {rate}"))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("(a) max gap {worst:.4}, (b) null rejection rate {rate:.3}"))
}

fn c7_exact_formulas() -> Check {
    for v in 0..=5u8 {
        ensure(spam_score(v).unwrap() == 20 * u32::from(v), format!("spam_score({v})"))?;
    }
    ensure(spam_score(6).is_err(), "spam_score(6) accepted")?;
    let tok = TokenizerConfig::default();
    let q = |s: &str| TermVector::from_text(s, &tok, true);
    let d = |s: &str| TermVector::from_text(s, &tok, false);
    ensure(query_cover(&q("barbados"), &d("visit barbados")).unwrap() == 1.0, "query_cover full")?;
    ensure(query_cover(&q("barbados island"), &d("barbados")).unwrap() == 0.5, "query_cover half")?;
    ensure(query_cover(&q("barbados"), &d("rum beaches")).unwrap() == 0.0, "query_cover none")?;
    ensure(frac_query(&q("barbados"), &d("barbados is nice")).value == 1.0 / 3.0, "frac_query third")?;
    ensure(frac_query(&q("barbados"), &d("barbados barbados")).value == 1.0, "frac_query all")?;
    ensure(frac_query(&q("barbados"), &d("rum beaches")).value == 0.0, "frac_query none")?;
    ensure(bonferroni(&[0.01], Some(3)) == [0.03], "bonferroni scale")?;
    ensure(bonferroni(&[0.5], Some(3)) == [1.0], "bonferroni cap")?;
    ensure(bonferroni(&[0.2, 0.7], Some(1)) == [0.2, 0.7], "bonferroni identity")?;
    Ok("spam_score, query_cover, frac_query, bonferroni exact".into())
}

const SIM_CONFIG: &str = r#"
seed = 8
kind = "sth"
[intervention]
kind = "herding"
[synthetic]
n_queries = 30
seed = 8
[[agents]]
player_id = "m1"
type = "mimic"
rate = 0.5
[[agents]]
player_id = "m2"
type = "mimic"
rate = 0.5
[[agents]]
player_id = "s1"
type = "static"
[[agents]]
player_id = "s2"
type = "static"
"#;

fn rankcomp(args: &[&str], cwd: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_rankcomp"))
        .args(args)
        .current_dir(cwd)
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.code() == Some(0), format!("rankcomp {args:?} exited with {status}"))
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn c8_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    std::fs::write(root.join("sim.toml"), SIM_CONFIG).map_err(|e| e.to_string())?;
    for run in ["r1", "r2"] {
        rankcomp(&["simulate", "--config", "sim.toml", "--out", run], root)?;
    }
    let a = read(&root.join("r1/run.jsonl"))?;
    ensure(a == read(&root.join("r2/run.jsonl"))?, "run.jsonl differs between runs")?;
    for (input, out) in [("r1/run.jsonl", "a1"), ("r2/run.jsonl", "a2"), ("r1/run.jsonl", "a3")] {
        rankcomp(&["analyze", "--input", input, "--out", out], root)?;
    }
    let m = read(&root.join("a1/metrics.csv"))?;
    ensure(m == read(&root.join("a2/metrics.csv"))?, "metrics differ across simulate runs")?;
    ensure(m == read(&root.join("a3/metrics.csv"))?, "metrics differ across analyze runs")?;
    let n = load_dataset(root.join("r1/run.jsonl")).map_err(|e| e.to_string())?.len();
    ensure(n == 30, format!("{n} competitions written"))?;
    Ok(format!("{} byte JSONL and {} byte CSV identical across runs", a.len(), m.len()))
}

fn c9_dataset_replay() -> Option<Check> {
    let path = std::env::var_os("RANKCOMP_DATASET")?;
    Some((|| {
        let records = load_dataset(&path).map_err(|e| e.to_string())?;
        let analyzer = Analyzer::new(&records, TokenizerConfig::default(), Vec::new(), 1000.0);
        let all = analyzer
            .analyze(&records, &[Measure::QueryCover, Measure::FracQuery, Measure::DocLength, Measure::RelevanceLabels])
            .map_err(|e| e.to_string())?;
        let get = |name: &str| all.iter().find(|s| s.name == name).ok_or(format!("series {name} missing"));
        let mean = |name: &str, it: u32| -> Result<f64, String> {
            get(name)?.mean_at(it).ok_or(format!("{name} has no iteration {it}"))
        };
        let mut notes = Vec::new();
        for (name, from, to) in [
            ("query_cover:qth", 1, 3),
            ("frac_query:qth", 1, 3),
            ("doc_length:dlh", 1, 4),
            ("relevance_labels:nrh", 1, 5),
        ] {
            let (a, b) = (mean(name, from)?, mean(name, to)?);
            ensure(b < a, format!("{name}: iteration {to} {b} not below iteration {from} {a}"))?;
            notes.push(format!("{name} {a:.3}->{b:.3}"));
        }
        Ok(notes.join("; "))
    })())
}

fn main() {
    let mut herded = Vec::new();
    let mut results: Vec<(&str, Option<Check>)> = Vec::new();
    let guard = |f: &mut dyn FnMut() -> Check| -> Check {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        })
    };
    results.push(("C1 model score equals per-document average", Some(guard(&mut c1_model_equals_doc_average))));
    results.push(("C2 EM correctness", Some(guard(&mut c2_em))));
    results.push(("C3 herding raises cosine to planted", Some(guard(&mut || c3_herding_cosine(&mut herded)))));
    results.push(("C4 short planted docs shrink documents", Some(guard(&mut || c4_doc_length(&mut herded)))));
    results.push(("C5 planted document always rank 1", Some(guard(&mut || c5_planted_rank(&herded)))));
    results.push(("C6 permutation test accuracy and calibration", Some(guard(&mut c6_permutation))));
    results.push(("C7 exact formulas", Some(guard(&mut c7_exact_formulas))));
    results.push(("C8 simulate/analyze determinism", Some(guard(&mut c8_determinism))));
    results.push(("C9 dataset replay directions", c9_dataset_replay()));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Some(Ok(detail)) => println!("PASS {name}: {detail}"),
            Some(Err(why)) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
            None => println!("SKIP {name}: set RANKCOMP_DATASET to a JSONL competition dataset"),
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.iter().filter(|r| matches!(r.1, Some(Ok(_)))).count());
    if failed > 0 {
        std::process::exit(1);
    }
}
