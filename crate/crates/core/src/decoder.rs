//! Tag-table labelling and splice decoding into triples.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::tagger::{build_gold_table, Tag, TagTable, NUM_TAGS};
use crate::triple::{Span, Triple};

/// Per-cell argmax over the tag logits `[N, N, K, 4]`; ties go to the lower
/// tag id.
pub fn label_tables<T: Real>(logits: &[T], n: usize, k: usize) -> Result<TagTable> {
    if logits.len() != n * n * k * NUM_TAGS {
        return Err(Error::shape("label_tables", &[logits.len()], &[n, n, k, NUM_TAGS]));
    }
    let labels = logits
        .chunks(NUM_TAGS)
        .map(|cell| {
            let mut best = 0;
            for (y, &v) in cell.iter().enumerate().skip(1) {
                if v > cell[best] {
                    best = y;
                }
            }
            best as u8
        })
        .collect();
    TagTable::from_labels(n, k, labels)
}

/// Splices triples out of `table`. Every B-E cell `(i, j)` anchors one
/// triple: the subject ends at the nearest E-E below it in column `j`
/// (or at `i`), and the object starts at the nearest B-B left of it in
/// row `i` (or at `j`). The result is sorted and duplicate-free.
pub fn decode_tables(table: &TagTable) -> Vec<Triple> {
    let n = table.n();
    let mut out = BTreeSet::new();
    for r in 0..table.k() {
        for i in 1..=n {
            for j in 1..=n {
                if table.get(i, j, r) != Tag::BeginEnd {
                    continue;
                }
                let se = (i + 1..=n).find(|&i2| table.get(i2, j, r) == Tag::EndEnd).unwrap_or(i);
                let ob = (1..j).rev().find(|&j2| table.get(i, j2, r) == Tag::BeginBegin).unwrap_or(j);
                out.insert(Triple::new(Span::new(i, se), r, Span::new(ob, j)));
            }
        }
    }
    out.into_iter().collect()
}

/// One triple set that did not survive encode then decode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundTripFailure {
    pub n: usize,
    pub gold: Vec<Triple>,
    pub decoded: Vec<Triple>,
    /// Another triple set yields the identical table.
    pub ambiguous: bool,
}

impl fmt::Display for RoundTripFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |ts: &[Triple]| ts.iter().map(Triple::to_string).collect::<Vec<_>>().join(" ");
        write!(f, "N={} gold {} decoded {}", self.n, list(&self.gold), list(&self.decoded))?;
        if self.ambiguous {
            f.write_str(" (table shared with another set)")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoundTripReport {
    pub max_n: usize,
    pub max_triples: usize,
    pub placements: usize,
    /// Distinct gold tables among the placements. Any table decoder fails
    /// on at least `placements - distinct_tables` of them.
    pub distinct_tables: usize,
    pub failures: usize,
    /// Failures whose gold table is produced by more than one triple set.
    /// No decoder reading only the table can recover all of those.
    pub ambiguous_failures: usize,
    /// The first `keep` failures of each kind, in enumeration order.
    pub examples: Vec<RoundTripFailure>,
}

impl RoundTripReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn unavoidable_failures(&self) -> usize {
        self.placements - self.distinct_tables
    }
}

/// Encodes and decodes every set of 1 to `max_triples` distinct single-relation
/// triples over sentences of 1 to `max_n` tokens.
pub fn exhaustive_round_trip(max_n: usize, max_triples: usize, keep: usize) -> RoundTripReport {
    let mut report = RoundTripReport {
        max_n,
        max_triples,
        ..RoundTripReport::default()
    };
    for n in 1..=max_n {
        let spans: Vec<Span> = (1..=n).flat_map(|s| (s..=n).map(move |e| Span::new(s, e))).collect();
        let all: Vec<Triple> = spans
            .iter()
            .flat_map(|&s| spans.iter().map(move |&o| Triple::new(s, 0, o)))
            .collect();
        let mut sets = Vec::new();
        subsets(&all, max_triples, 0, &mut Vec::new(), &mut sets);
        let tables: Vec<TagTable> = sets
            .iter()
            .map(|set| build_gold_table(set, n, 1).expect("valid spans"))
            .collect();
        let mut owners: HashMap<&[u8], usize> = HashMap::new();
        for t in &tables {
            *owners.entry(t.labels()).or_default() += 1;
        }
        report.distinct_tables += owners.len();
        for (set, table) in sets.iter().zip(&tables) {
            report.placements += 1;
            let decoded = decode_tables(table);
            if decoded == *set {
                continue;
            }
            let ambiguous = owners[table.labels()] > 1;
            report.failures += 1;
            report.ambiguous_failures += ambiguous as usize;
            let same_kind = report.examples.iter().filter(|f| f.ambiguous == ambiguous).count();
            if same_kind < keep {
                report.examples.push(RoundTripFailure {
                    n,
                    gold: set.clone(),
                    decoded,
                    ambiguous,
                });
            }
        }
    }
    report
}

/// Sorted subsets of `items` with 1 to `max` elements.
fn subsets(items: &[Triple], max: usize, from: usize, cur: &mut Vec<Triple>, out: &mut Vec<Vec<Triple>>) {
    for i in from..items.len() {
        cur.push(items[i]);
        out.push(cur.clone());
        if cur.len() < max {
            subsets(items, max, i + 1, cur, out);
        }
        cur.pop();
    }
}
