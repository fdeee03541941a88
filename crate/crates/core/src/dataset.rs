//! Competition datasets (JSON Lines), qrels, and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::competition::{CompetitionKind, CompetitionRecord, RoundRecord};
use crate::document::Document;
use crate::error::{Error, Result};
use crate::metrics::MetricSeries;
use crate::ranking::{Ranking, RankingEntry};
use crate::stats::SignificanceResult;

/// One document of one round, the unit of the JSONL dataset format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRow {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub query: String,
    #[serde(default)]
    pub topic_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtopic_id: Option<String>,
    pub competition_kind: CompetitionKind,
    pub iteration: u32,
    pub player_id: String,
    #[serde(default)]
    pub is_planted: bool,
    /// Defaults to true for non-planted rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_live: Option<bool>,
    pub text: String,
    /// 1-based position in the round's ranking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity_votes: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance_labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subtopic_labels: BTreeMap<String, Vec<u8>>,
}

impl DatasetRow {
    fn check(&self) -> std::result::Result<(), String> {
        if self.iteration < 1 {
            return Err("iteration must be at least 1".into());
        }
        if self.player_id.is_empty() {
            return Err("empty player_id".into());
        }
        if self.text.trim().is_empty() {
            return Err("empty text".into());
        }
        if self.is_planted && !self.competition_kind.allows_planted() {
            return Err(format!(
                "planted row in a `{}` competition",
                self.competition_kind
            ));
        }
        if self.rank == Some(0) {
            return Err("rank is 1-based".into());
        }
        let labels = self
            .relevance_labels
            .iter()
            .chain(self.subtopic_labels.values())
            .flatten();
        if labels.into_iter().any(|l| *l > 1) {
            return Err("labels must be binary".into());
        }
        if self.validity_votes.is_some_and(|v| v > crate::metrics::MAX_VALIDITY_VOTES) {
            return Err("validity_votes must be in 0..=5".into());
        }
        Ok(())
    }

    fn document(&self) -> Document {
        Document {
            player_id: self.player_id.clone(),
            text: self.text.clone(),
            planted: self.is_planted,
            live: self.is_live.unwrap_or(!self.is_planted),
            validity_votes: self.validity_votes,
            relevance_labels: self.relevance_labels.clone(),
            subtopic_labels: self.subtopic_labels.clone(),
        }
    }
}

/// Rows accepted by [`read_rows`] with their line numbers, and the rejected
/// lines with reasons.
#[derive(Debug, Clone, Default)]
pub struct RowReport {
    pub rows: Vec<(usize, DatasetRow)>,
    pub rejected: Vec<(usize, String)>,
}

impl RowReport {
    /// Non-blank lines seen.
    pub fn total(&self) -> usize {
        self.rows.len() + self.rejected.len()
    }
}

pub fn parse_rows(content: &str) -> RowReport {
    let mut report = RowReport::default();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<DatasetRow>(line)
            .map_err(|e| e.to_string())
            .and_then(|row| row.check().map(|()| row));
        match parsed {
            Ok(row) => report.rows.push((i + 1, row)),
            Err(reason) => report.rejected.push((i + 1, reason)),
        }
    }
    report
}

/// Lenient reader: every non-blank line ends up either accepted or rejected.
pub fn read_rows(path: impl AsRef<Path>) -> Result<RowReport> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_rows(&content))
}

/// Groups rows into competitions keyed by (query, kind, sub-topic).
pub fn group_rows(rows: Vec<DatasetRow>) -> Result<Vec<CompetitionRecord>> {
    type Key = (String, CompetitionKind, Option<String>);
    let mut groups: BTreeMap<Key, Vec<DatasetRow>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.query_id.clone(), row.competition_kind, row.subtopic_id.clone()))
            .or_default()
            .push(row);
    }
    groups
        .into_iter()
        .map(|((query_id, kind, subtopic_id), rows)| {
            let describe = || format!("{query_id}/{kind}/{}", subtopic_id.as_deref().unwrap_or("-"));
            let mut by_iter: BTreeMap<u32, Vec<DatasetRow>> = BTreeMap::new();
            for row in rows {
                by_iter.entry(row.iteration).or_default().push(row);
            }
            let n_iter = by_iter.len() as u32;
            if by_iter.keys().copied().ne(1..=n_iter) {
                return Err(Error::Validation(format!(
                    "{}: iterations {:?} are not 1..={n_iter}",
                    describe(),
                    by_iter.keys().collect::<Vec<_>>()
                )));
            }
            let mut per_player: BTreeMap<&str, u32> = BTreeMap::new();
            for r in by_iter.values().flatten() {
                *per_player.entry(&r.player_id).or_insert(0) += 1;
            }
            if let Some((p, n)) = per_player.iter().find(|(_, n)| **n != n_iter) {
                return Err(Error::Validation(format!(
                    "{}: player `{p}` has {n} rows, expected {n_iter}",
                    describe()
                )));
            }
            let first = by_iter[&1][0].clone();
            let rounds = by_iter
                .into_iter()
                .map(|(iteration, rows)| round_from_rows(&query_id, iteration, rows))
                .collect::<Result<Vec<_>>>()?;
            Ok(CompetitionRecord {
                query_id: query_id.clone(),
                query: first.query,
                topic_text: first.topic_text,
                subtopic_id: subtopic_id.clone(),
                kind,
                rounds,
            })
        })
        .collect()
}

fn round_from_rows(query_id: &str, iteration: u32, mut rows: Vec<DatasetRow>) -> Result<RoundRecord> {
    rows.sort_by(|a, b| a.player_id.cmp(&b.player_id));
    if let Some(w) = rows.windows(2).find(|w| w[0].player_id == w[1].player_id) {
        return Err(Error::Validation(format!(
            "{query_id}: player `{}` appears twice in iteration {iteration}",
            w[0].player_id
        )));
    }
    if rows.iter().filter(|r| r.is_planted).count() > 1 {
        return Err(Error::Validation(format!(
            "{query_id}: more than one planted document in iteration {iteration}"
        )));
    }
    let mut ranked: Vec<(usize, RankingEntry)> = rows
        .iter()
        .filter_map(|r| {
            r.rank.map(|rank| {
                (
                    rank,
                    RankingEntry {
                        doc_id: r.player_id.clone(),
                        score: r.score.unwrap_or(f64::NEG_INFINITY),
                        forced: r.is_planted,
                    },
                )
            })
        })
        .collect();
    ranked.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.doc_id.cmp(&b.1.doc_id)));
    Ok(RoundRecord {
        iteration,
        ranking: Ranking {
            query_id: query_id.to_string(),
            entries: ranked.into_iter().map(|(_, e)| e).collect(),
        },
        documents: rows.iter().map(DatasetRow::document).collect(),
    })
}

/// Strict loader: any malformed line fails the whole load, naming every bad
/// line.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<CompetitionRecord>> {
    let path = path.as_ref();
    let report = read_rows(path)?;
    if let Some(&(first, _)) = report.rejected.first() {
        let detail: Vec<String> = report
            .rejected
            .iter()
            .map(|(line, reason)| format!("line {line}: {reason}"))
            .collect();
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: first,
            message: detail.join("; "),
        });
    }
    group_rows(report.rows.into_iter().map(|(_, r)| r).collect())
}

/// Flattens records into rows ordered by (query, kind, sub-topic, iteration,
/// player).
pub fn records_to_rows(records: &[CompetitionRecord]) -> Vec<DatasetRow> {
    let mut rows = Vec::new();
    for rec in records {
        for round in &rec.rounds {
            for doc in &round.documents {
                let entry = round
                    .ranking
                    .rank_of(&doc.player_id)
                    .map(|r| (r, round.ranking.entries[r - 1].score));
                rows.push(DatasetRow {
                    query_id: rec.query_id.clone(),
                    query: rec.query.clone(),
                    topic_text: rec.topic_text.clone(),
                    subtopic_id: rec.subtopic_id.clone(),
                    competition_kind: rec.kind,
                    iteration: round.iteration,
                    player_id: doc.player_id.clone(),
                    is_planted: doc.planted,
                    is_live: Some(doc.live),
                    text: doc.text.clone(),
                    rank: entry.map(|(r, _)| r),
                    score: entry.map(|(_, s)| s).filter(|s| s.is_finite()),
                    validity_votes: doc.validity_votes,
                    relevance_labels: doc.relevance_labels.clone(),
                    subtopic_labels: doc.subtopic_labels.clone(),
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.query_id, a.competition_kind, &a.subtopic_id, a.iteration, &a.player_id).cmp(&(
            &b.query_id,
            b.competition_kind,
            &b.subtopic_id,
            b.iteration,
            &b.player_id,
        ))
    });
    rows
}

pub fn save_run(records: &[CompetitionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for row in records_to_rows(records) {
        serde_json::to_writer(&mut out, &row).expect("rows serialize");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct QrelEntry {
    pub topic_id: String,
    pub subtopic_id: Option<String>,
    pub doc_id: String,
    pub grade: u32,
}

/// Parses `topic subtopic-or-dash doc_id grade` lines. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_qrels(content: &str, path: &Path) -> Result<Vec<QrelEntry>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let [topic, subtopic, doc, grade] = fields[..] else {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        };
        let grade: u32 = grade
            .parse()
            .map_err(|_| parse_err(format!("grade `{grade}` is not a non-negative integer")))?;
        let entry = QrelEntry {
            topic_id: topic.to_string(),
            subtopic_id: (subtopic != "-").then(|| subtopic.to_string()),
            doc_id: doc.to_string(),
            grade,
        };
        let key = (entry.topic_id.clone(), entry.subtopic_id.clone(), entry.doc_id.clone());
        if !seen.insert(key) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: duplicate qrel for topic {topic}, subtopic {subtopic}, doc {doc}",
                path.display()
            )));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Vec<QrelEntry>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qrels(&content, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" => Ok(ReportFormat::Jsonl),
            _ => Err(Error::config("format", format!("`{s}` is not csv or jsonl"))),
        }
    }
}

pub const VALUES_HEADER: &str = "metric,query_id,iteration,value";
pub const MEANS_HEADER: &str = "metric,iteration,mean";
pub const SIGNIFICANCE_HEADER: &str =
    "comparison,n_pairs,mean_diff,raw_p,adjusted_p,significant,n_permutations,seed";

fn csv_line(fields: &[String]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(fields).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn render_csv(series: &[MetricSeries], significance: &[SignificanceResult]) -> String {
    let mut out = format!("{VALUES_HEADER}\n");
    for s in series {
        for ((q, it), v) in &s.values {
            out += &csv_line(&[s.name.clone(), q.clone(), it.to_string(), v.to_string()]);
        }
    }
    if !series.is_empty() {
        out += &format!("\n{MEANS_HEADER}\n");
        for s in series {
            for (i, m) in s.iteration_means.iter().enumerate() {
                out += &csv_line(&[s.name.clone(), (i + 1).to_string(), m.to_string()]);
            }
        }
    }
    if !significance.is_empty() {
        out += &format!("\n{SIGNIFICANCE_HEADER}\n");
        for r in significance {
            out += &csv_line(&[
                r.comparison.clone(),
                r.n_pairs.to_string(),
                r.mean_diff.to_string(),
                r.raw_p.to_string(),
                r.adjusted_p.to_string(),
                r.significant.to_string(),
                r.n_permutations.to_string(),
                r.seed.to_string(),
            ]);
        }
    }
    out
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ReportLine<'a> {
    Value {
        metric: &'a str,
        query_id: &'a str,
        iteration: u32,
        value: Option<f64>,
    },
    Mean {
        metric: &'a str,
        iteration: usize,
        mean: Option<f64>,
    },
    Significance(&'a SignificanceResult),
}

fn render_jsonl(series: &[MetricSeries], significance: &[SignificanceResult]) -> String {
    let finite = |v: f64| v.is_finite().then_some(v);
    let mut lines = Vec::new();
    for s in series {
        for ((q, it), v) in &s.values {
            lines.push(ReportLine::Value {
                metric: &s.name,
                query_id: q,
                iteration: *it,
                value: finite(*v),
            });
        }
    }
    for s in series {
        for (i, m) in s.iteration_means.iter().enumerate() {
            lines.push(ReportLine::Mean {
                metric: &s.name,
                iteration: i + 1,
                mean: finite(*m),
            });
        }
    }
    lines.extend(significance.iter().map(ReportLine::Significance));
    lines
        .iter()
        .map(|l| serde_json::to_string(l).expect("report lines serialize") + "\n")
        .collect()
}

/// Writes metric series (per-cell values, then per-iteration means) and an
/// optional significance block.
pub fn export_report(
    series: &[MetricSeries],
    significance: &[SignificanceResult],
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let path = path.as_ref();
    let body = match format {
        ReportFormat::Csv => render_csv(series, significance),
        ReportFormat::Jsonl => render_jsonl(series, significance),
    };
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes only the significance block.
pub fn export_significance(
    results: &[SignificanceResult],
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let path = path.as_ref();
    let body = match format {
        ReportFormat::Csv => render_csv(&[], results)
            .split_once("\n\n")
            .map_or_else(|| format!("{SIGNIFICANCE_HEADER}\n"), |(_, rest)| rest.to_string()),
        ReportFormat::Jsonl => render_jsonl(&[], results),
    };
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Reads the per-cell block of a CSV report back into series.
pub fn read_series_csv(path: impl AsRef<Path>) -> Result<Vec<MetricSeries>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let block = content.split("\n\n").next().unwrap_or("");
    let mut reader = csv::Reader::from_reader(block.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>().join(",") != VALUES_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{VALUES_HEADER}`"),
        });
    }
    let mut by_name: BTreeMap<String, BTreeMap<(String, u32), f64>> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let iteration: u32 = rec[2].parse().map_err(|_| err(format!("bad iteration `{}`", &rec[2])))?;
        let value: f64 = rec[3].parse().map_err(|_| err(format!("bad value `{}`", &rec[3])))?;
        by_name
            .entry(rec[0].to_string())
            .or_default()
            .insert((rec[1].to_string(), iteration), value);
    }
    Ok(by_name
        .into_iter()
        .map(|(name, values)| MetricSeries::from_values(name, values))
        .collect())
}
