//! `rankcomp`: simulate ranking competitions, measure content effects, distill
//! sub-topic models, rank documents, and test significance.

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rankcomp_core::competition::{run_batch, SimulationContext};
use rankcomp_core::dataset::{
    export_report, export_significance, load_dataset, load_qrels, read_series_csv, save_run,
    ReportFormat,
};
use rankcomp_core::distill::{
    distill_with_topic, topic_model_mle, tune_hyperparams, DistilledSubtopicModel, EmControls,
    DEFAULT_ALPHAS, DEFAULT_LAMBDAS,
};
use rankcomp_core::metrics::{Analyzer, Measure};
use rankcomp_core::ranking::{
    query_likelihood_score, rank, Feature, FeatureSet, LinearRankerWeights, Scorer,
};
use rankcomp_core::stats::{significance_report, PairedSample, DEFAULT_PERMUTATIONS};
use rankcomp_core::{CollectionStats, Document, Error, TermVector, TokenizerConfig};
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;

#[derive(Debug, Parser)]
#[command(name = "rankcomp", version, about = "Ranking-competition simulation and analysis")]
pub struct Cli {
    /// Master seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Batch configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured batch of competitions and write `run.jsonl`.
    Simulate,
    /// Compute metric series over a dataset and write `metrics.csv`.
    Analyze(AnalyzeArgs),
    /// Fit and tune a sub-topic model from qrels and a corpus.
    Distill(DistillArgs),
    /// Rank a corpus for one query.
    Rank(RankArgs),
    /// Paired permutation tests between metric series.
    Significance(SignificanceArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Dataset in JSONL form.
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated metrics (default: all).
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
    /// Distilled sub-topic models for `subtopic_similarity`.
    #[arg(long = "model")]
    pub models: Vec<PathBuf>,
    #[arg(long, default_value = "csv")]
    pub format: String,
    #[arg(long, default_value_t = rankcomp_core::DEFAULT_MU)]
    pub mu: f64,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Qrels: `topic subtopic-or-dash doc_id grade` per line.
    #[arg(long)]
    pub qrels: PathBuf,
    /// Corpus JSONL with `doc_id` and `text`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub topic: String,
    #[arg(long)]
    pub subtopic: String,
    /// Query text used to pick pseudo-non-relevant documents.
    #[arg(long)]
    pub query: String,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ALPHAS)]
    pub alphas: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAMBDAS)]
    pub lambdas: Vec<f64>,
    /// Relevant and pseudo-non-relevant documents used for tuning.
    #[arg(long, default_value_t = 5)]
    pub tune_docs: usize,
    #[arg(long, default_value_t = rankcomp_core::DEFAULT_MU)]
    pub mu: f64,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub query: String,
    /// Corpus JSONL with `doc_id` and `text`.
    #[arg(long)]
    pub docs: PathBuf,
    /// Linear ranker weights (JSON map feature → weight).
    #[arg(long, conflicts_with = "model")]
    pub weights: Option<PathBuf>,
    /// Comma-separated features for the linear ranker (default: all).
    #[arg(long, value_delimiter = ',', requires = "weights")]
    pub features: Vec<String>,
    /// Rank by cross entropy against a distilled model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = rankcomp_core::DEFAULT_MU)]
    pub mu: f64,
}

#[derive(Debug, Args)]
pub struct SignificanceArgs {
    /// Metric CSV written by `analyze`.
    #[arg(long)]
    pub input: PathBuf,
    /// `SERIES_A,SERIES_B`; repeat for several comparisons.
    #[arg(long = "compare", required = true)]
    pub compare: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    pub permutations: u64,
    #[arg(long, default_value = "csv")]
    pub format: String,
}

/// Written next to every output as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub parameters: serde_json::Value,
}

impl RunManifest {
    fn write(&self) -> Result<()> {
        let path = self.out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// 2 for caller mistakes (bad flags, invalid config or inputs), 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_usage() => 2,
        Some(_) => 1,
        None if err.downcast_ref::<clap::Error>().is_some() => 2,
        None => 1,
    }
}

fn usage(field: &str, message: impl Into<String>) -> anyhow::Error {
    Error::config(field, message).into()
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().ok_or_else(|| usage("--out", "an output directory is required"))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn report_format(s: &str) -> Result<ReportFormat> {
    Ok(s.parse::<ReportFormat>()?)
}

fn extension(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::Csv => "csv",
        ReportFormat::Jsonl => "jsonl",
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate => cmd_simulate(&cli),
        Command::Analyze(a) => cmd_analyze(&cli, a),
        Command::Distill(a) => cmd_distill(&cli, a),
        Command::Rank(a) => cmd_rank(&cli, a),
        Command::Significance(a) => cmd_significance(&cli, a),
    }
}

pub fn cmd_simulate(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| usage("--config", "simulate needs a config file"))?;
    let config = SimConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolved = config.resolve(base, cli.seed)?;
    let ctx = SimulationContext::for_configs(&resolved.configs, resolved.tokenizer, resolved.archive);
    let records = run_batch(&resolved.configs, &ctx)?;
    let dir = out_dir(cli)?;
    save_run(&records, dir.join("run.jsonl"))?;
    RunManifest {
        subcommand: "simulate".into(),
        config: Some(path.clone()),
        out_dir: dir,
        seed: Some(resolved.seed),
        parameters: serde_json::to_value(&config)?,
    }
    .write()?;
    log::info!("wrote {} competitions", records.len());
    Ok(())
}

pub fn cmd_analyze(cli: &Cli, args: &AnalyzeArgs) -> Result<()> {
    let measures: Vec<Measure> = if args.metrics.is_empty() {
        Measure::ALL.to_vec()
    } else {
        args.metrics
            .iter()
            .map(|m| m.trim().parse::<Measure>())
            .collect::<rankcomp_core::Result<_>>()?
    };
    let format = report_format(&args.format)?;
    let records = load_dataset(&args.input)?;
    let models = args
        .models
        .iter()
        .map(DistilledSubtopicModel::load)
        .collect::<rankcomp_core::Result<Vec<_>>>()?;
    if records.is_empty() {
        log::warn!("{} holds no competitions", args.input.display());
    }
    let analyzer = Analyzer::new(&records, TokenizerConfig::default(), models, args.mu);
    let series = analyzer.analyze(&records, &measures)?;
    let dir = out_dir(cli)?;
    export_report(&series, &[], dir.join(format!("metrics.{}", extension(format))), format)?;
    RunManifest {
        subcommand: "analyze".into(),
        config: cli.config.clone(),
        out_dir: dir,
        seed: cli.seed,
        parameters: serde_json::json!({
            "input": args.input,
            "metrics": measures.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "models": args.models,
            "format": args.format,
            "mu": args.mu,
        }),
    }
    .write()
}

#[derive(Deserialize)]
struct CorpusLine {
    doc_id: String,
    text: String,
}

fn load_corpus(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: CorpusLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if out.insert(doc.doc_id.clone(), doc.text).is_some() {
            return Err(Error::Validation(format!("duplicate doc_id `{}` in {}", doc.doc_id, path.display())).into());
        }
    }
    Ok(out)
}

pub fn cmd_distill(cli: &Cli, args: &DistillArgs) -> Result<()> {
    let qrels = load_qrels(&args.qrels)?;
    let corpus = load_corpus(&args.corpus)?;
    let tok = TokenizerConfig::default();
    let relevant_ids = |pred: &dyn Fn(Option<&str>) -> bool| -> BTreeSet<String> {
        qrels
            .iter()
            .filter(|q| q.topic_id == args.topic && q.grade > 0 && pred(q.subtopic_id.as_deref()))
            .map(|q| q.doc_id.clone())
            .collect()
    };
    let sub_ids = relevant_ids(&|s| s == Some(args.subtopic.as_str()));
    let topic_ids = relevant_ids(&|_| true);
    let lookup = |ids: &BTreeSet<String>| -> Result<Vec<(String, TermVector)>> {
        ids.iter()
            .map(|id| {
                let text = corpus
                    .get(id)
                    .ok_or_else(|| Error::Validation(format!("qrels document `{id}` missing from corpus")))?;
                Ok((id.clone(), TermVector::from_text(text, &tok, false)))
            })
            .collect()
    };
    let sub_docs = lookup(&sub_ids)?;
    let topic_docs = lookup(&topic_ids)?;
    if sub_docs.is_empty() {
        return Err(usage("--subtopic", format!("no relevant documents for sub-topic {}", args.subtopic)));
    }
    if args.tune_docs == 0 {
        return Err(usage("--tune-docs", "must be at least 1"));
    }

    let vectors: Vec<TermVector> = corpus.values().map(|t| TermVector::from_text(t, &tok, false)).collect();
    let query = TermVector::from_text(&args.query, &tok, true);
    let coll = CollectionStats::from_documents(&vectors).covering(query.terms());
    let topic_vectors: Vec<TermVector> = topic_docs.iter().map(|(_, d)| d.clone()).collect();
    let topic = topic_model_mle(&topic_vectors)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
    let mut tuning_rel = sub_docs.clone();
    tuning_rel.shuffle(&mut rng);
    tuning_rel.truncate(args.tune_docs);
    tuning_rel.sort_by(|a, b| a.0.cmp(&b.0));

    let mut others: Vec<(f64, &(String, TermVector))> = topic_docs
        .iter()
        .filter(|(id, _)| !sub_ids.contains(id))
        .map(|d| Ok((query_likelihood_score(&query, &d.1, &coll, args.mu)?, d)))
        .collect::<rankcomp_core::Result<_>>()?;
    others.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1 .0.cmp(&b.1 .0)));
    let pseudo_nonrel: Vec<(String, TermVector)> =
        others.into_iter().take(args.tune_docs).map(|(_, d)| d.clone()).collect();
    if pseudo_nonrel.is_empty() {
        log::warn!("no topic-relevant documents outside the sub-topic; tuning cannot discriminate");
    }

    let controls = EmControls::default();
    let tuned = tune_hyperparams(
        &args.alphas,
        &args.lambdas,
        &tuning_rel,
        &pseudo_nonrel,
        &topic,
        &coll,
        args.mu,
        controls,
    )?;
    let all_sub: Vec<TermVector> = sub_docs.iter().map(|(_, d)| d.clone()).collect();
    let mut model = distill_with_topic(&all_sub, &topic, &format!("topic-{}", args.topic), tuned.lambda, tuned.alpha, controls)?;
    model.query_id = Some(args.topic.clone());
    model.subtopic_id = Some(args.subtopic.clone());

    let dir = out_dir(cli)?;
    model.save(dir.join("model.json"))?;
    RunManifest {
        subcommand: "distill".into(),
        config: cli.config.clone(),
        out_dir: dir,
        seed: cli.seed,
        parameters: serde_json::json!({
            "qrels": args.qrels,
            "corpus": args.corpus,
            "topic": args.topic,
            "subtopic": args.subtopic,
            "query": args.query,
            "alphas": args.alphas,
            "lambdas": args.lambdas,
            "tune_docs": args.tune_docs,
            "mu": args.mu,
            "selected": { "alpha": tuned.alpha, "lambda": tuned.lambda, "ndcg_at_5": tuned.ndcg },
            "grid": tuned.evaluated,
        }),
    }
    .write()
}

pub fn cmd_rank(cli: &Cli, args: &RankArgs) -> Result<()> {
    let corpus = load_corpus(&args.docs)?;
    if corpus.is_empty() {
        return Err(usage("--docs", "corpus is empty"));
    }
    let tok = TokenizerConfig::default();
    let docs: Vec<Document> = corpus.iter().map(|(id, t)| Document::new(id, t)).collect();
    let vectors: Vec<TermVector> = docs.iter().map(|d| TermVector::from_text(&d.text, &tok, false)).collect();
    let query_terms = rankcomp_core::text::tokenize(&args.query, &tok, true);
    let scorer = match (&args.weights, &args.model) {
        (Some(w), _) => {
            let features = if args.features.is_empty() {
                FeatureSet::default()
            } else {
                FeatureSet::new(
                    args.features
                        .iter()
                        .map(|f| f.parse::<Feature>())
                        .collect::<rankcomp_core::Result<Vec<_>>>()?,
                )
            };
            Scorer::Linear {
                weights: LinearRankerWeights::load(w)?,
                features,
            }
        }
        (None, Some(m)) => Scorer::Model {
            model: DistilledSubtopicModel::load(m)?.theta,
            mu: args.mu,
        },
        (None, None) => Scorer::QueryLikelihood { mu: args.mu },
    };
    let extra: Vec<String> = match &scorer {
        Scorer::Model { model, .. } => model.terms().map(str::to_string).collect(),
        _ => Vec::new(),
    };
    let coll = CollectionStats::from_documents(&vectors)
        .covering(query_terms.iter().chain(&extra).map(String::as_str));
    let ranking = rank("query", &args.query, &docs, &scorer, &tok, &coll)?;
    let mut body = String::from("rank\tdoc_id\tscore\n");
    for (i, e) in ranking.entries.iter().enumerate() {
        body += &format!("{}\t{}\t{}\n", i + 1, e.doc_id, e.score);
    }
    print!("{body}");
    if cli.out.is_some() {
        let dir = out_dir(cli)?;
        let path = dir.join("ranking.tsv");
        fs::write(&path, &body).map_err(|e| Error::io(&path, e))?;
        RunManifest {
            subcommand: "rank".into(),
            config: cli.config.clone(),
            out_dir: dir,
            seed: cli.seed,
            parameters: serde_json::json!({
                "query": args.query,
                "docs": args.docs,
                "weights": args.weights,
                "features": args.features,
                "model": args.model,
                "mu": args.mu,
            }),
        }
        .write()?;
    }
    Ok(())
}

pub fn cmd_significance(cli: &Cli, args: &SignificanceArgs) -> Result<()> {
    let format = report_format(&args.format)?;
    let series = read_series_csv(&args.input)?;
    let by_name: BTreeMap<&str, _> = series.iter().map(|s| (s.name.as_str(), s)).collect();
    let known = || by_name.keys().copied().collect::<Vec<_>>().join(", ");
    let mut comparisons = Vec::new();
    for spec in &args.compare {
        let (a, b) = spec
            .split_once(',')
            .ok_or_else(|| usage("--compare", format!("`{spec}` is not SERIES_A,SERIES_B")))?;
        let get = |name: &str| {
            by_name
                .get(name.trim())
                .copied()
                .ok_or_else(|| usage("--compare", format!("unknown series `{name}`; available: {}", known())))
        };
        let sample = PairedSample::from_series(get(a)?, get(b)?)?;
        comparisons.push((format!("{} vs {}", a.trim(), b.trim()), sample));
    }
    let seed = cli.seed.unwrap_or(0);
    let results = significance_report(&comparisons, args.permutations, seed)?;
    for r in &results {
        println!(
            "{}: n={} mean_diff={} p={} adjusted_p={} significant={}",
            r.comparison, r.n_pairs, r.mean_diff, r.raw_p, r.adjusted_p, r.significant
        );
    }
    let dir = out_dir(cli)?;
    export_significance(&results, dir.join(format!("significance.{}", extension(format))), format)?;
    RunManifest {
        subcommand: "significance".into(),
        config: cli.config.clone(),
        out_dir: dir,
        seed: Some(seed),
        parameters: serde_json::json!({
            "input": args.input,
            "compare": args.compare,
            "n_permutations": args.permutations,
            "format": args.format,
        }),
    }
    .write()
}
