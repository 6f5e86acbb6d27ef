//! Micro precision/recall/F1 for triples, entity pairs and relations, with
//! per-pattern splits.

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{classify_pattern, SooRule};
use crate::error::{Error, Result};
use crate::triple::{Span, Triple};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Relation plus the last token of both entities.
    #[default]
    Partial,
    /// Relation plus both full spans.
    Exact,
}

impl MatchMode {
    pub fn name(self) -> &'static str {
        match self {
            MatchMode::Partial => "partial",
            MatchMode::Exact => "exact",
        }
    }

    fn span_key(self, s: Span) -> (usize, usize) {
        match self {
            MatchMode::Partial => (s.end, s.end),
            MatchMode::Exact => (s.start, s.end),
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partial" => Ok(MatchMode::Partial),
            "exact" => Ok(MatchMode::Exact),
            _ => Err(Error::config(format!("unknown match mode {s:?}, expected partial or exact"))),
        }
    }
}

pub fn match_triple(pred: &Triple, gold: &Triple, mode: MatchMode) -> bool {
    triple_key(pred, mode) == triple_key(gold, mode)
}

type SpanKey = (usize, usize);

fn triple_key(t: &Triple, mode: MatchMode) -> (SpanKey, usize, SpanKey) {
    (mode.span_key(t.subject), t.relation, mode.span_key(t.object))
}

fn pair_key(t: &Triple, mode: MatchMode) -> (SpanKey, SpanKey) {
    (mode.span_key(t.subject), mode.span_key(t.object))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

/// Micro scores; any ratio with a zero denominator is 0.
pub fn prf1(tp: usize, fp: usize, fn_: usize) -> Prf {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
        counts: Counts { tp, fp, fn_ },
    }
}

impl From<Counts> for Prf {
    fn from(c: Counts) -> Self {
        prf1(c.tp, c.fp, c.fn_)
    }
}

/// One-to-one matching of two multisets of keys; each gold key is consumed
/// at most once.
fn match_keys<K: Eq + Hash>(pred: impl IntoIterator<Item = K>, gold: impl IntoIterator<Item = K>) -> Counts {
    let mut pool: HashMap<K, usize> = HashMap::new();
    let mut n_gold = 0;
    for k in gold {
        *pool.entry(k).or_default() += 1;
        n_gold += 1;
    }
    let mut c = Counts::default();
    for k in pred {
        match pool.get_mut(&k) {
            Some(left) if *left > 0 => {
                *left -= 1;
                c.tp += 1;
            }
            _ => c.fp += 1,
        }
    }
    c.fn_ = n_gold - c.tp;
    c
}

fn dedup(ts: &[Triple]) -> BTreeSet<Triple> {
    ts.iter().copied().collect()
}

/// Triple-level counts for one sentence. Duplicate triples collapse first.
pub fn sentence_counts(pred: &[Triple], gold: &[Triple], mode: MatchMode) -> Counts {
    let (p, g) = (dedup(pred), dedup(gold));
    match_keys(p.iter().map(|t| triple_key(t, mode)), g.iter().map(|t| triple_key(t, mode)))
}

/// Entity-pair counts: relations dropped, then set semantics.
pub fn pair_counts(pred: &[Triple], gold: &[Triple], mode: MatchMode) -> Counts {
    let p: BTreeSet<_> = pred.iter().map(|t| pair_key(t, mode)).collect();
    let g: BTreeSet<_> = gold.iter().map(|t| pair_key(t, mode)).collect();
    match_keys(p, g)
}

/// Relation counts: entities dropped, then set semantics.
pub fn relation_counts(pred: &[Triple], gold: &[Triple]) -> Counts {
    let p: BTreeSet<usize> = pred.iter().map(|t| t.relation).collect();
    let g: BTreeSet<usize> = gold.iter().map(|t| t.relation).collect();
    match_keys(p, g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: MatchMode,
    pub triple: Prf,
    pub pair: Prf,
    pub relation: Prf,
}

/// Predictions and gold triples of one sentence.
#[derive(Clone, Copy, Debug)]
pub struct Scored<'a> {
    pub pred: &'a [Triple],
    pub gold: &'a [Triple],
}

pub fn score_corpus(items: &[Scored<'_>], mode: MatchMode) -> ModeReport {
    let (mut t, mut p, mut r) = (Counts::default(), Counts::default(), Counts::default());
    for it in items {
        t.add(sentence_counts(it.pred, it.gold, mode));
        p.add(pair_counts(it.pred, it.gold, mode));
        r.add(relation_counts(it.pred, it.gold));
    }
    ModeReport {
        mode,
        triple: t.into(),
        pair: p.into(),
        relation: r.into(),
    }
}

/// Pairs predictions with gold sentences by id. Every gold id needs exactly
/// one prediction and vice versa.
pub fn align<'a, P>(gold_ids: &[&str], preds: &'a [(String, P)]) -> Result<Vec<&'a P>> {
    let mut by_id: HashMap<&str, &P> = HashMap::new();
    for (id, p) in preds {
        if by_id.insert(id.as_str(), p).is_some() {
            return Err(Error::data(format!("duplicate prediction for sentence {id}")));
        }
    }
    let out = gold_ids
        .iter()
        .map(|id| by_id.remove(id).ok_or_else(|| Error::data(format!("no prediction for sentence {id}"))))
        .collect::<Result<Vec<_>>>()?;
    if let Some(extra) = by_id.keys().next() {
        return Err(Error::data(format!("prediction for unknown sentence {extra}")));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub split: String,
    pub sentences: usize,
    pub score: Prf,
}

/// Triple-level scores per gold overlap pattern and per triple count.
pub fn pattern_splits(items: &[Scored<'_>], mode: MatchMode, rule: SooRule) -> Vec<SplitScore> {
    let names = ["Normal", "SEO", "EPO", "SOO", "N=1", "N=2", "N=3", "N=4", "N>=5"];
    let mut acc = vec![(0usize, Counts::default()); names.len()];
    for it in items {
        let l = classify_pattern(it.gold, rule);
        let c = sentence_counts(it.pred, it.gold, mode);
        let flags = [l.normal, l.seo, l.epo, l.soo];
        for (slot, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
            acc[slot].0 += 1;
            acc[slot].1.add(c);
        }
        let b = 3 + l.bucket as usize;
        acc[b].0 += 1;
        acc[b].1.add(c);
    }
    names
        .iter()
        .zip(acc)
        .map(|(n, (sentences, c))| SplitScore {
            split: n.to_string(),
            sentences,
            score: c.into(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sentences: usize,
    pub modes: Vec<ModeReport>,
    pub splits: Vec<SplitScore>,
}

pub fn evaluate(items: &[Scored<'_>], split_mode: MatchMode, rule: SooRule) -> EvalReport {
    EvalReport {
        sentences: items.len(),
        modes: vec![score_corpus(items, MatchMode::Partial), score_corpus(items, MatchMode::Exact)],
        splits: pattern_splits(items, split_mode, rule),
    }
}

impl EvalReport {
    pub fn mode(&self, mode: MatchMode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, name: &str, p: &Prf| {
            writeln!(
                out,
                "{name:<18} {:>7.4} {:>7.4} {:>7.4} {:>6} {:>6} {:>6}",
                p.precision, p.recall, p.f1, p.counts.tp, p.counts.fp, p.counts.fn_
            )
            .unwrap();
        };
        writeln!(out, "{:<18} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}", "", "P", "R", "F1", "TP", "FP", "FN").unwrap();
        for m in &self.modes {
            row(&mut out, &format!("{} triple", m.mode), &m.triple);
            row(&mut out, &format!("{} (s,o)", m.mode), &m.pair);
            row(&mut out, &format!("{} r", m.mode), &m.relation);
        }
        for s in &self.splits {
            row(&mut out, &format!("{} [{}]", s.split, s.sentences), &s.score);
        }
        out
    }
}
