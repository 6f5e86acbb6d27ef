//! Spans, triples and the relation schema.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Token span, 1-based and inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn is_valid(self, n: usize) -> bool {
        1 <= self.start && self.start <= self.end && self.end <= n
    }

    pub fn overlaps(self, other: Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.start, self.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub subject: Span,
    pub relation: usize,
    pub object: Span,
}

impl Triple {
    pub fn new(subject: Span, relation: usize, object: Span) -> Self {
        Triple { subject, relation, object }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, r{}, {})", self.subject, self.relation, self.object)
    }
}

/// Ordered relation names; a relation's id is its position.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelSchema {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl RelSchema {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut schema = RelSchema::default();
        for name in names {
            let name = name.into();
            if schema.index.contains_key(&name) {
                return Err(Error::data(format!("duplicate relation {name:?}")));
            }
            schema.index.insert(name.clone(), schema.names.len());
            schema.names.push(name);
        }
        Ok(schema)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Id of `name`, appending it when new.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(id) = self.id(name) {
            return id;
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.names.len() - 1
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.names.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    /// One relation name per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        RelSchema::new(text.lines().filter(|l| !l.is_empty()))
    }
}
