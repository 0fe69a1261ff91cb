//! Curated regular-expression signatures for known block pages.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use regex::bytes::{Regex, RegexSet};
use thiserror::Error;

use crate::model::CountryCode;

#[derive(Debug, Error)]
pub enum SignatureError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("duplicate signature id `{0}`")]
    DuplicateId(String),
    #[error("signature `{id}`: {source}")]
    Regex {
        id: String,
        #[source]
        source: regex::Error,
    },
}

/// Countries in which a signature is considered evidence of censorship.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    Global,
    Country(CountryCode),
}

impl Scope {
    pub fn covers(self, country: CountryCode) -> bool {
        match self {
            Scope::Global => true,
            Scope::Country(c) => c == country,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Global => f.write_str("global"),
            Scope::Country(c) => f.write_str(c.as_str()),
        }
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("global") {
            return Ok(Scope::Global);
        }
        s.parse::<CountryCode>()
            .map(Scope::Country)
            .map_err(|e| format!("invalid scope `{s}`: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub id: String,
    pub pattern: String,
    pub scope: Scope,
    pub provenance: String,
}

impl Signature {
    pub fn new(id: impl Into<String>, scope: Scope, pattern: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            pattern: pattern.into(),
            scope,
            provenance: String::new(),
        }
    }
}

/// A compiled, id-unique collection of signatures.
#[derive(Debug, Clone)]
pub struct SignatureSet {
    sigs: Vec<Signature>,
    set: RegexSet,
    regexes: Vec<Regex>,
}

impl Default for SignatureSet {
    fn default() -> Self {
        Self::new(Vec::new()).expect("empty set compiles")
    }
}

const BUILTIN: &str = include_str!("../../data/signatures.tsv");

impl SignatureSet {
    pub fn new(sigs: Vec<Signature>) -> Result<Self, SignatureError> {
        let mut seen = HashSet::new();
        let mut regexes = Vec::with_capacity(sigs.len());
        for s in &sigs {
            if !seen.insert(s.id.as_str()) {
                return Err(SignatureError::DuplicateId(s.id.clone()));
            }
            regexes.push(Regex::new(&s.pattern).map_err(|source| SignatureError::Regex {
                id: s.id.clone(),
                source,
            })?);
        }
        let set = RegexSet::new(sigs.iter().map(|s| s.pattern.as_str())).map_err(|source| {
            SignatureError::Regex {
                id: "<set>".into(),
                source,
            }
        })?;
        Ok(Self { sigs, set, regexes })
    }

    /// Parses `id<TAB>scope<TAB>regex[<TAB>provenance]` records; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, SignatureError> {
        let mut sigs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let bad = |reason: String| SignatureError::Format { line: i + 1, reason };
            let fields: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&fields.len()) {
                return Err(bad("expected `id<TAB>scope<TAB>regex[<TAB>provenance]`".into()));
            }
            let id = fields[0].trim();
            if id.is_empty() {
                return Err(bad("empty signature id".into()));
            }
            let scope: Scope = fields[1].trim().parse().map_err(bad)?;
            let mut sig = Signature::new(id, scope, fields[2]);
            if let Some(p) = fields.get(3) {
                sig.provenance = p.trim().to_string();
            }
            sigs.push(sig);
        }
        Self::new(sigs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SignatureError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// The signature file shipped with the library.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("shipped signature file is valid")
    }

    pub fn len(&self) -> usize {
        self.sigs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigs.is_empty()
    }

    pub fn signatures(&self) -> &[Signature] {
        &self.sigs
    }

    pub fn get(&self, id: &str) -> Option<&Signature> {
        self.sigs.iter().find(|s| s.id == id)
    }

    /// Compiled single pattern for `id`, useful when locating the match span.
    pub fn regex(&self, id: &str) -> Option<&Regex> {
        self.sigs.iter().position(|s| s.id == id).map(|i| &self.regexes[i])
    }

    /// Ids of every in-scope signature matching `body`, in file order.
    pub fn matches(&self, body: &[u8], country: CountryCode) -> Vec<&str> {
        self.set
            .matches(body)
            .into_iter()
            .filter(|&i| self.sigs[i].scope.covers(country))
            .map(|i| self.sigs[i].id.as_str())
            .collect()
    }
}

pub fn match_signatures<'a>(body: &[u8], sigs: &'a SignatureSet, country: CountryCode) -> Vec<&'a str> {
    sigs.matches(body, country)
}
