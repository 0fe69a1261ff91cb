//! Aggregate tables over verdicts: technique by country, technique
//! combinations, weekly trends, the resolver matrix and vantage AS coverage.
//!
//! Every denominator counts unique URLs, never measurements. A URL is
//! censored for a technique in a country when any of its measurements there
//! received a censoring verdict; probable censorship is reported separately.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use chrono::{Datelike, Duration, IsoWeek, NaiveDate};
use thiserror::Error;
use url::Url;

use crate::dns::{ResolverClass, ResolverMatrix};
use crate::model::{CountryCode, Measurement};
use crate::pipeline::VerdictRecord;
use crate::tcp::InjectionOutcome;

pub const UNCATEGORIZED: &str = "UNCAT";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("line {line}: category code `{code}` is not in the taxonomy")]
    UnknownCategory { line: usize, code: String },
    #[error("verdict refers to unknown measurement `{0}`")]
    UnknownMeasurement(String),
}

fn tsv_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim_end_matches('\r');
        if l.trim().is_empty() || l.starts_with('#') {
            None
        } else {
            Some((i + 1, l.split('\t').collect()))
        }
    })
}

/// Declared category codes and their names.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Taxonomy {
    pub names: BTreeMap<String, String>,
}

impl Taxonomy {
    pub fn parse(text: &str) -> Result<Self, ReportError> {
        let mut names = BTreeMap::new();
        for (line, f) in tsv_lines(text) {
            if f.len() != 2 || f[0].is_empty() {
                return Err(ReportError::Format {
                    line,
                    reason: "expected `code<TAB>name`".into(),
                });
            }
            names.insert(f[0].to_string(), f[1].to_string());
        }
        Ok(Self { names })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn contains(&self, code: &str) -> bool {
        self.names.contains_key(code)
    }
}

/// URL or domain to category code.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryMap {
    entries: HashMap<String, String>,
}

/// Host of a URL, lowercased; the input itself when it does not parse.
fn host_of(url: &str) -> String {
    Url::parse(url)
        .ok()
        .and_then(|u| u.host_str().map(str::to_ascii_lowercase))
        .unwrap_or_else(|| url.to_ascii_lowercase())
}

/// Last two labels of a host name (an approximation of the registered
/// domain that ignores multi-label public suffixes).
fn registered_domain(host: &str) -> String {
    let labels: Vec<&str> = host.trim_end_matches('.').split('.').collect();
    if labels.len() <= 2 {
        return labels.join(".");
    }
    labels[labels.len() - 2..].join(".")
}

impl CategoryMap {
    /// Parses `url_or_domain<TAB>code` lines. With a taxonomy, every code
    /// must be declared in it.
    pub fn parse(text: &str, taxonomy: Option<&Taxonomy>) -> Result<Self, ReportError> {
        let mut entries = HashMap::new();
        for (line, f) in tsv_lines(text) {
            if f.len() != 2 || f[0].is_empty() || f[1].is_empty() {
                return Err(ReportError::Format {
                    line,
                    reason: "expected `url_or_domain<TAB>code`".into(),
                });
            }
            if let Some(t) = taxonomy {
                if !t.contains(f[1]) {
                    return Err(ReportError::UnknownCategory {
                        line,
                        code: f[1].to_string(),
                    });
                }
            }
            let key = if f[0].contains("://") {
                f[0].to_string()
            } else {
                f[0].to_ascii_lowercase()
            };
            entries.insert(key, f[1].to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>, taxonomy: Option<&Taxonomy>) -> Result<Self, ReportError> {
        Self::parse(&fs::read_to_string(path)?, taxonomy)
    }

    /// Full URL first, then its host, then the registered domain, else UNCAT.
    pub fn category(&self, url: &str) -> &str {
        if let Some(c) = self.entries.get(url) {
            return c;
        }
        let host = host_of(url);
        self.entries
            .get(&host)
            .or_else(|| self.entries.get(&registered_domain(&host)))
            .map(String::as_str)
            .unwrap_or(UNCATEGORIZED)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Technique {
    Dns,
    Tcp,
    Blockpage,
}

impl Technique {
    pub const ALL: [Technique; 3] = [Technique::Dns, Technique::Tcp, Technique::Blockpage];

    pub fn name(self) -> &'static str {
        match self {
            Technique::Dns => "dns",
            Technique::Tcp => "tcp",
            Technique::Blockpage => "blockpage",
        }
    }

    fn of(v: &VerdictRecord) -> Self {
        match v {
            VerdictRecord::Dns(_) => Technique::Dns,
            VerdictRecord::Tcp(_) => Technique::Tcp,
            VerdictRecord::Blockpage(_) => Technique::Blockpage,
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// A verdict joined with the fields of its measurement that aggregates need.
#[derive(Debug, Clone)]
struct Joined<'a> {
    technique: Technique,
    country: CountryCode,
    url: &'a str,
    day: NaiveDate,
    list: Option<&'a str>,
    censored: bool,
    probable: bool,
}

fn join<'a>(verdicts: &'a [VerdictRecord], corpus: &'a [Measurement]) -> Result<Vec<Joined<'a>>, ReportError> {
    let by_id: HashMap<&str, &Measurement> = corpus.iter().map(|m| (m.measurement_id.as_str(), m)).collect();
    verdicts
        .iter()
        .map(|v| {
            let m = by_id
                .get(v.measurement_id())
                .ok_or_else(|| ReportError::UnknownMeasurement(v.measurement_id().to_string()))?;
            Ok(Joined {
                technique: Technique::of(v),
                country: m.country(),
                url: &m.url,
                day: m.day(),
                list: m.test_list.as_deref(),
                censored: v.is_censored(),
                probable: matches!(v, VerdictRecord::Tcp(t) if t.outcome == InjectionOutcome::ProbableCensorship),
            })
        })
        .collect()
}

/// Censorship of unique URLs for one (country, category, technique).
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub country: CountryCode,
    pub category: String,
    pub technique: Technique,
    pub unique_urls_censored: usize,
    pub unique_urls_tested: usize,
    /// `unique_urls_censored / unique_urls_tested`.
    pub pct: f64,
}

#[derive(Default)]
struct UrlSets<'a> {
    tested: BTreeSet<&'a str>,
    censored: BTreeSet<&'a str>,
    probable: BTreeSet<&'a str>,
}

fn per_country<'a>(joined: &[Joined<'a>], technique: Technique) -> BTreeMap<CountryCode, UrlSets<'a>> {
    let mut out: BTreeMap<CountryCode, UrlSets> = BTreeMap::new();
    for j in joined.iter().filter(|j| j.technique == technique) {
        let s = out.entry(j.country).or_default();
        s.tested.insert(j.url);
        if j.censored {
            s.censored.insert(j.url);
        }
        if j.probable {
            s.probable.insert(j.url);
        }
    }
    out
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per (country, category, technique) rows, in that key order.
pub fn aggregate_rows(
    verdicts: &[VerdictRecord],
    corpus: &[Measurement],
    categories: &CategoryMap,
) -> Result<Vec<AggregateRow>, ReportError> {
    let joined = join(verdicts, corpus)?;
    let mut sets: BTreeMap<(CountryCode, String, Technique), UrlSets> = BTreeMap::new();
    for j in &joined {
        let s = sets
            .entry((j.country, categories.category(j.url).to_string(), j.technique))
            .or_default();
        s.tested.insert(j.url);
        if j.censored {
            s.censored.insert(j.url);
        }
    }
    Ok(sets
        .into_iter()
        .map(|((country, category, technique), s)| AggregateRow {
            country,
            category,
            technique,
            unique_urls_censored: s.censored.len(),
            unique_urls_tested: s.tested.len(),
            pct: fraction(s.censored.len(), s.tested.len()),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TechniqueRow {
    pub technique: Technique,
    pub country: CountryCode,
    pub unique_urls_censored: usize,
    pub unique_urls_tested: usize,
    pub pct: f64,
    /// Unique URLs with a probable-censorship verdict (TCP only).
    pub unique_urls_probable: usize,
    /// Up to three (category, censored URL count), most censored first.
    pub top_categories: Vec<(String, usize)>,
}

pub const TOP_COUNTRIES: usize = 5;
pub const TOP_CATEGORIES: usize = 3;

/// For each technique, the five countries censoring the most unique URLs
/// with it (ties: higher percentage, then country code), each with its top
/// three categories (ties broken alphabetically by code). Countries that
/// censor nothing are omitted.
pub fn technique_by_country(
    verdicts: &[VerdictRecord],
    corpus: &[Measurement],
    categories: &CategoryMap,
) -> Result<Vec<TechniqueRow>, ReportError> {
    let joined = join(verdicts, corpus)?;
    let mut out = Vec::new();
    for technique in Technique::ALL {
        let mut rows: Vec<TechniqueRow> = per_country(&joined, technique)
            .into_iter()
            .filter(|(_, s)| !s.censored.is_empty())
            .map(|(country, s)| {
                let mut cats: BTreeMap<&str, usize> = BTreeMap::new();
                for url in &s.censored {
                    *cats.entry(categories.category(url)).or_insert(0) += 1;
                }
                let mut cats: Vec<(String, usize)> = cats.into_iter().map(|(c, n)| (c.to_string(), n)).collect();
                cats.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                cats.truncate(TOP_CATEGORIES);
                TechniqueRow {
                    technique,
                    country,
                    unique_urls_censored: s.censored.len(),
                    unique_urls_tested: s.tested.len(),
                    pct: fraction(s.censored.len(), s.tested.len()),
                    unique_urls_probable: s.probable.len(),
                    top_categories: cats,
                }
            })
            .collect();
        rows.sort_by(|a, b| {
            b.unique_urls_censored
                .cmp(&a.unique_urls_censored)
                .then_with(|| b.pct.total_cmp(&a.pct))
                .then_with(|| a.country.cmp(&b.country))
        });
        rows.truncate(TOP_COUNTRIES);
        out.extend(rows);
    }
    Ok(out)
}

pub fn render_technique_table(rows: &[TechniqueRow]) -> String {
    let mut out = String::from("technique\tcountry\tcensored_urls\ttested_urls\tpct\tprobable_urls\ttop_categories\n");
    for r in rows {
        let cats: Vec<String> = r.top_categories.iter().map(|(c, n)| format!("{c}:{n}")).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.2}\t{}\t{}",
            r.technique.name(),
            r.country,
            r.unique_urls_censored,
            r.unique_urls_tested,
            100.0 * r.pct,
            r.unique_urls_probable,
            cats.join(",")
        );
    }
    out
}

/// The non-empty technique subsets, singletons first.
pub const SUBSETS: [&[Technique]; 7] = [
    &[Technique::Dns],
    &[Technique::Tcp],
    &[Technique::Blockpage],
    &[Technique::Dns, Technique::Tcp],
    &[Technique::Dns, Technique::Blockpage],
    &[Technique::Tcp, Technique::Blockpage],
    &[Technique::Dns, Technique::Tcp, Technique::Blockpage],
];

fn subset_mask(s: &[Technique]) -> u8 {
    s.iter().fold(0, |m, t| m | t.bit())
}

pub fn subset_label(s: &[Technique]) -> String {
    s.iter().map(|t| t.name()).collect::<Vec<_>>().join("+")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComboRow {
    pub country: CountryCode,
    /// Unique censored URLs per subset, in [`SUBSETS`] order.
    pub counts: [usize; 7],
    pub total: usize,
}

/// For each country, censored URLs partitioned by the exact set of
/// techniques that flagged them.
pub fn combinations(verdicts: &[VerdictRecord], corpus: &[Measurement]) -> Result<Vec<ComboRow>, ReportError> {
    let joined = join(verdicts, corpus)?;
    let mut masks: BTreeMap<CountryCode, BTreeMap<&str, u8>> = BTreeMap::new();
    for j in joined.iter().filter(|j| j.censored) {
        *masks.entry(j.country).or_default().entry(j.url).or_insert(0) |= j.technique.bit();
    }
    Ok(masks
        .into_iter()
        .map(|(country, urls)| {
            let mut counts = [0usize; 7];
            for mask in urls.values() {
                let i = SUBSETS
                    .iter()
                    .position(|s| subset_mask(s) == *mask)
                    .expect("every non-empty mask is a subset");
                counts[i] += 1;
            }
            ComboRow {
                country,
                counts,
                total: urls.len(),
            }
        })
        .collect())
}

pub fn render_combinations(rows: &[ComboRow]) -> String {
    let mut out = String::from("country");
    for s in SUBSETS {
        out.push('\t');
        out.push_str(&subset_label(s));
    }
    out.push_str("\tTOTAL\n");
    for r in rows {
        out.push_str(r.country.as_str());
        for c in r.counts {
            let _ = write!(out, "\t{c}");
        }
        let _ = writeln!(out, "\t{}", r.total);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendPoint {
    pub country: CountryCode,
    pub week: IsoWeek,
    pub tested_urls: usize,
    pub blocked_urls: usize,
    /// Share of tested URLs blocked; `None` for weeks without measurements.
    pub pct: Option<f64>,
}

fn week_label(w: IsoWeek) -> String {
    format!("{}-W{:02}", w.year(), w.week())
}

/// Weekly share of unique list URLs with any censoring verdict, per
/// country. When the corpus carries list tags only URLs tagged `global`
/// count; untagged corpora use all URLs. Every country gets a point for
/// each ISO week between the corpus's first and last, with gaps for weeks
/// in which it had no measurements.
pub fn longitudinal(verdicts: &[VerdictRecord], corpus: &[Measurement]) -> Result<Vec<TrendPoint>, ReportError> {
    let joined = join(verdicts, corpus)?;
    let tagged = corpus.iter().any(|m| !m.is_control() && m.test_list.is_some());
    let (Some(first), Some(last)) = (joined.iter().map(|j| j.day).min(), joined.iter().map(|j| j.day).max()) else {
        return Ok(Vec::new());
    };

    let mut sets: BTreeMap<(CountryCode, NaiveDate), (BTreeSet<&str>, BTreeSet<&str>)> = BTreeMap::new();
    let mut countries = BTreeSet::new();
    for j in &joined {
        countries.insert(j.country);
        if tagged && j.list != Some("global") {
            continue;
        }
        let monday = j.day - Duration::days(i64::from(j.day.weekday().num_days_from_monday()));
        let (tested, blocked) = sets.entry((j.country, monday)).or_default();
        tested.insert(j.url);
        if j.censored {
            blocked.insert(j.url);
        }
    }

    let start = first - Duration::days(i64::from(first.weekday().num_days_from_monday()));
    let mut out = Vec::new();
    for country in countries {
        let mut monday = start;
        while monday <= last {
            let (tested, blocked) = sets
                .get(&(country, monday))
                .map(|(t, b)| (t.len(), b.len()))
                .unwrap_or((0, 0));
            out.push(TrendPoint {
                country,
                week: monday.iso_week(),
                tested_urls: tested,
                blocked_urls: blocked,
                pct: (tested > 0).then(|| fraction(blocked, tested)),
            });
            monday += Duration::days(7);
        }
    }
    Ok(out)
}

/// Gaps are written as `NA`.
pub fn render_trend(points: &[TrendPoint]) -> String {
    let mut out = String::from("country\tweek\ttested_urls\tblocked_urls\tpct\n");
    for p in points {
        let pct = p.pct.map_or_else(|| "NA".to_string(), |x| format!("{:.2}", 100.0 * x));
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{pct}",
            p.country,
            week_label(p.week),
            p.tested_urls,
            p.blocked_urls
        );
    }
    out
}

/// Long-format matrix: one line per (local, public) class pair in fixed
/// order, with the count and its share of the row.
pub fn render_resolver_matrix(m: &ResolverMatrix) -> String {
    let mut out = String::from("local\tpublic\tcount\trow_pct\n");
    for l in ResolverClass::ALL {
        let row: u64 = ResolverClass::ALL.iter().map(|p| m.get(l, *p)).sum();
        for p in ResolverClass::ALL {
            let n = m.get(l, p);
            let pct = if row == 0 { 0.0 } else { 100.0 * n as f64 / row as f64 };
            let _ = writeln!(out, "{}\t{}\t{n}\t{pct:.2}", l.label(), p.label());
        }
    }
    out
}

/// Number of distinct vantage ASNs per country (controls excluded).
pub fn ases_per_country(corpus: &[Measurement]) -> BTreeMap<CountryCode, usize> {
    let mut sets: BTreeMap<CountryCode, BTreeSet<u32>> = BTreeMap::new();
    for m in corpus.iter().filter(|m| !m.is_control()) {
        sets.entry(m.country()).or_default().insert(m.vantage.asn);
    }
    sets.into_iter().map(|(c, s)| (c, s.len())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfPoint {
    pub ases: usize,
    pub countries: usize,
    /// Share of countries with at most `ases` vantage ASes.
    pub cdf: f64,
}

/// Empirical CDF over countries of their vantage AS counts, one point per
/// distinct count.
pub fn as_per_country_cdf(corpus: &[Measurement]) -> Vec<CdfPoint> {
    let counts = ases_per_country(corpus);
    let n = counts.len();
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for c in counts.values() {
        *hist.entry(*c).or_insert(0) += 1;
    }
    let mut cum = 0;
    hist.into_iter()
        .map(|(ases, countries)| {
            cum += countries;
            CdfPoint {
                ases,
                countries,
                cdf: fraction(cum, n),
            }
        })
        .collect()
}

pub fn render_cdf(points: &[CdfPoint]) -> String {
    let mut out = String::from("ases\tcountries\tcdf\n");
    for p in points {
        let _ = writeln!(out, "{}\t{}\t{:.4}", p.ases, p.countries, p.cdf);
    }
    out
}
