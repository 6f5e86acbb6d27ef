//! Dataset loading, overlap-pattern classification and corpus statistics.
//!
//! Two on-disk formats are read, both as JSON lines or as one JSON array:
//!
//! * canonical: `{"text", "triples": [{"subject": {"start", "end", "text"},
//!   "relation", "object": {..}}]}` with 1-based inclusive token indices;
//! * benchmark: `{"text", "triple_list": [[subject, relation, object], ..]}`
//!   with surface strings that are resolved to token spans here.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{tokenize, tokenize_words, TokenSeq};
use crate::triple::{RelSchema, Span, Triple};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub subject: SpanRecord,
    pub relation: String,
    pub object: SpanRecord,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
    pub triples: Vec<TripleRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
struct BenchmarkRecord {
    text: String,
    triple_list: Vec<(String, String, String)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    #[default]
    Canonical,
    Benchmark,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(DataFormat::Canonical),
            "benchmark" | "benchmark-text" => Ok(DataFormat::Benchmark),
            _ => Err(Error::config(format!("unknown data format {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub seq: TokenSeq,
    pub triples: Vec<Triple>,
    pub split: String,
}

impl Example {
    pub fn text(&self) -> &str {
        &self.seq.text
    }

    /// Canonical record with span texts filled in from the tokens.
    pub fn to_record(&self, triples: &[Triple], schema: &RelSchema) -> CanonicalRecord {
        let span = |s: Span| SpanRecord {
            start: s.start,
            end: s.end,
            text: self.seq.span_text(s.start, s.end),
        };
        CanonicalRecord {
            id: Some(self.id.clone()),
            text: self.seq.text.clone(),
            triples: triples
                .iter()
                .map(|t| TripleRecord {
                    subject: span(t.subject),
                    relation: schema.name(t.relation).unwrap_or("?").to_string(),
                    object: span(t.object),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    pub format: DataFormat,
    /// Sentences with more tokens are rejected and counted.
    pub max_len: Option<usize>,
    pub split: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            format: DataFormat::Canonical,
            max_len: None,
            split: "train".to_string(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub records: usize,
    pub loaded: usize,
    pub too_long: usize,
    pub unmatched_triples: usize,
    pub warnings: Vec<String>,
}

impl LoadReport {
    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// Reads a dataset, interning relation names into `schema`.
pub fn load_dataset(
    path: impl AsRef<Path>,
    opts: &LoadOptions,
    schema: &mut RelSchema,
) -> Result<(Vec<Example>, LoadReport)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let name = path.display().to_string();
    parse_dataset(&text, &name, opts, schema)
}

pub fn parse_dataset(
    text: &str,
    source: &str,
    opts: &LoadOptions,
    schema: &mut RelSchema,
) -> Result<(Vec<Example>, LoadReport)> {
    let values = json_values(text, source)?;
    let mut report = LoadReport::default();
    let mut out = Vec::new();
    for (n, value) in values.into_iter().enumerate() {
        report.records += 1;
        let default_id = format!("{source}#{}", n + 1);
        let ex = match opts.format {
            DataFormat::Canonical => {
                let rec: CanonicalRecord = serde_json::from_value(value)
                    .map_err(|e| Error::data(format!("{default_id}: {e}")))?;
                canonical_example(rec, default_id, opts, schema, &mut report)?
            }
            DataFormat::Benchmark => {
                let rec: BenchmarkRecord = serde_json::from_value(value)
                    .map_err(|e| Error::data(format!("{default_id}: {e}")))?;
                benchmark_example(rec, default_id, opts, schema, &mut report)
            }
        };
        let Some(ex) = ex else { continue };
        if let Some(max) = opts.max_len {
            if ex.seq.len() > max {
                report.too_long += 1;
                report.warn(format!("{}: {} tokens exceed max_len {max}, rejected", ex.id, ex.seq.len()));
                continue;
            }
        }
        report.loaded += 1;
        out.push(ex);
    }
    Ok((out, report))
}

fn json_values(text: &str, source: &str) -> Result<Vec<serde_json::Value>> {
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(|e| Error::data(format!("{source}: {e}")));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(format!("{source}:{}: {e}", i + 1))))
        .collect()
}

fn canonical_example(
    rec: CanonicalRecord,
    default_id: String,
    opts: &LoadOptions,
    schema: &mut RelSchema,
    report: &mut LoadReport,
) -> Result<Option<Example>> {
    let id = rec.id.unwrap_or(default_id);
    let seq = tokenize(&rec.text);
    if seq.is_empty() {
        report.warn(format!("{id}: empty sentence skipped"));
        return Ok(None);
    }
    let mut triples = Vec::with_capacity(rec.triples.len());
    for t in &rec.triples {
        let s = Span::new(t.subject.start, t.subject.end);
        let o = Span::new(t.object.start, t.object.end);
        if !s.is_valid(seq.len()) || !o.is_valid(seq.len()) {
            return Err(Error::data(format!(
                "{id}: span {s} or {o} outside the {} tokens of the sentence",
                seq.len()
            )));
        }
        for (span, rec_span) in [(s, &t.subject), (o, &t.object)] {
            let surface = seq.span_text(span.start, span.end);
            if !rec_span.text.is_empty() && rec_span.text != surface {
                report.warn(format!("{id}: span {span} reads {surface:?}, record says {:?}", rec_span.text));
            }
        }
        triples.push(Triple::new(s, schema.intern(&t.relation), o));
    }
    Ok(Some(Example {
        id,
        seq,
        triples,
        split: opts.split.clone(),
    }))
}

fn benchmark_example(
    rec: BenchmarkRecord,
    id: String,
    opts: &LoadOptions,
    schema: &mut RelSchema,
    report: &mut LoadReport,
) -> Option<Example> {
    let seq = tokenize(&rec.text);
    if seq.is_empty() {
        report.warn(format!("{id}: empty sentence skipped"));
        return None;
    }
    let mut triples = Vec::with_capacity(rec.triple_list.len());
    for (subj, rel, obj) in &rec.triple_list {
        match resolve_mentions(&seq, subj, obj) {
            Some((s, o)) => triples.push(Triple::new(s, schema.intern(rel), o)),
            None => {
                report.unmatched_triples += 1;
                report.warn(format!("{id}: cannot place ({subj:?}, {rel:?}, {obj:?}) on whole tokens, triple skipped"));
            }
        }
    }
    Some(Example {
        id,
        seq,
        triples,
        split: opts.split.clone(),
    })
}

/// Leftmost whole-token spans for a subject and then an object mention.
/// The object prefers the leftmost occurrence that does not overlap the
/// subject and falls back to the leftmost overall (nested mentions).
pub fn resolve_mentions(seq: &TokenSeq, subject: &str, object: &str) -> Option<(Span, Span)> {
    let s_tok = tokenize_words(subject);
    let o_tok = tokenize_words(object);
    let s_start = seq.find(&s_tok)?;
    let s = Span::new(s_start, s_start + s_tok.len() - 1);
    let m = o_tok.len();
    if m == 0 || m > seq.len() {
        return None;
    }
    let occurrences: Vec<Span> = (1..=seq.len() + 1 - m)
        .filter(|&st| seq.tokens[st - 1..st - 1 + m] == o_tok[..])
        .map(|st| Span::new(st, st + m - 1))
        .collect();
    if occurrences.len() > 1 {
        log::debug!("{object:?} occurs {} times in {:?}; taking the leftmost", occurrences.len(), seq.text);
    }
    let o = occurrences
        .iter()
        .copied()
        .find(|o| !o.overlaps(s))
        .or_else(|| occurrences.first().copied())?;
    Some((s, o))
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[CanonicalRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::file(path, e))?;
    }
    Ok(())
}

/// Which configurations count as subject-object overlap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SooRule {
    /// An entity serving as subject of one triple and object of another, or
    /// a triple whose own subject and object spans overlap.
    #[default]
    CrossRoleOrNested,
    /// Only triples whose subject and object spans overlap.
    NestedOnly,
}

impl FromStr for SooRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-role-or-nested" => Ok(SooRule::CrossRoleOrNested),
            "nested-only" => Ok(SooRule::NestedOnly),
            _ => Err(Error::config(format!("unknown SOO rule {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PatternLabel {
    pub normal: bool,
    pub epo: bool,
    pub seo: bool,
    pub soo: bool,
    /// Triple count clamped to `1..=5`; 5 stands for "5 or more".
    pub bucket: u8,
}

pub fn classify_pattern(triples: &[Triple], rule: SooRule) -> PatternLabel {
    let mut label = PatternLabel {
        bucket: triples.len().clamp(1, 5) as u8,
        ..PatternLabel::default()
    };
    for (a_ix, a) in triples.iter().enumerate() {
        if a.subject.overlaps(a.object) {
            label.soo = true;
        }
        for b in &triples[a_ix + 1..] {
            if a.subject == b.subject && a.object == b.object {
                label.epo |= a.relation != b.relation;
                continue;
            }
            let (ea, eb) = (entities(a), entities(b));
            label.seo |= ea != eb && ea.iter().any(|e| eb.contains(e));
            if rule == SooRule::CrossRoleOrNested && (a.subject == b.object || a.object == b.subject) {
                label.soo = true;
            }
        }
    }
    label.normal = !(label.epo || label.seo || label.soo);
    label
}

/// Distinct entity spans of a triple, sorted.
fn entities(t: &Triple) -> Vec<Span> {
    let mut e = vec![t.subject, t.object];
    e.sort_unstable();
    e.dedup();
    e
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sentences: usize,
    pub triples: usize,
    pub normal: usize,
    pub epo: usize,
    pub seo: usize,
    pub soo: usize,
    /// Sentences with 1, 2, 3, 4 and 5+ triples.
    pub buckets: [usize; 5],
}

pub fn dataset_stats(examples: &[Example], rule: SooRule) -> DatasetStats {
    let mut st = DatasetStats::default();
    for ex in examples {
        let l = classify_pattern(&ex.triples, rule);
        st.sentences += 1;
        st.triples += ex.triples.len();
        st.normal += l.normal as usize;
        st.epo += l.epo as usize;
        st.seo += l.seo as usize;
        st.soo += l.soo as usize;
        st.buckets[l.bucket as usize - 1] += 1;
    }
    st
}

/// Reference counts to compare against; absent keys are not checked.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedCounts {
    pub sentences: Option<usize>,
    pub triples: Option<usize>,
    pub normal: Option<usize>,
    pub epo: Option<usize>,
    pub seo: Option<usize>,
    pub soo: Option<usize>,
}

impl ExpectedCounts {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CountDiff {
    pub key: &'static str,
    pub expected: usize,
    pub actual: usize,
}

impl fmt::Display for CountDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let delta = self.actual as i64 - self.expected as i64;
        write!(f, "{:<9} expected {:>6}  actual {:>6}  ({delta:+})", self.key, self.expected, self.actual)
    }
}

pub fn diff_counts(stats: &DatasetStats, expected: &ExpectedCounts) -> Vec<CountDiff> {
    let pairs = [
        ("sentences", expected.sentences, stats.sentences),
        ("triples", expected.triples, stats.triples),
        ("normal", expected.normal, stats.normal),
        ("seo", expected.seo, stats.seo),
        ("epo", expected.epo, stats.epo),
        ("soo", expected.soo, stats.soo),
    ];
    pairs
        .into_iter()
        .filter_map(|(key, exp, actual)| exp.filter(|&e| e != actual).map(|expected| CountDiff { key, expected, actual }))
        .collect()
}

/// Ids of the sentences carrying the flag named `key` (`normal`, `epo`,
/// `seo` or `soo`), for tracing a count mismatch back to its sentences.
pub fn sentences_with(examples: &[Example], key: &str, rule: SooRule) -> Vec<String> {
    examples
        .iter()
        .filter(|ex| {
            let l = classify_pattern(&ex.triples, rule);
            match key {
                "normal" => l.normal,
                "epo" => l.epo,
                "seo" => l.seo,
                "soo" => l.soo,
                _ => false,
            }
        })
        .map(|ex| ex.id.clone())
        .collect()
}
