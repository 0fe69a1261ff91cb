//! Grouping candidate block pages and ordering the unknown groups for review.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::html::{canonicalize_text, tag_vector, TagVector};
use super::minhash::{band_keys, shingles, LshConfig, MinHashSig, MinHasher};
use crate::model::CountryCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CandidateSource {
    InjectedCollision,
    HttpResponse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePage {
    pub measurement_id: String,
    pub url: String,
    pub country: CountryCode,
    #[serde(rename = "body_b64", with = "crate::model::b64")]
    pub body: Vec<u8>,
    pub source: CandidateSource,
}

/// A known block page used as a clustering anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnownPage {
    pub signature_id: String,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClusterMethod {
    TagVector,
    Lsh,
}

impl ClusterMethod {
    pub fn label(self) -> &'static str {
        match self {
            ClusterMethod::TagVector => "tags",
            ClusterMethod::Lsh => "lsh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClusterCenter {
    Known(String),
    Unknown,
}

impl fmt::Display for ClusterCenter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterCenter::Known(id) => f.write_str(id),
            ClusterCenter::Unknown => f.write_str("unknown"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cluster {
    pub id: usize,
    pub method: ClusterMethod,
    pub center: ClusterCenter,
    pub members: Vec<CandidatePage>,
    /// Unique member URLs.
    pub urls: usize,
    /// Unique member countries.
    pub countries: usize,
    /// `urls / countries`.
    pub ratio: f64,
}

impl Cluster {
    pub fn new(
        id: usize,
        method: ClusterMethod,
        center: ClusterCenter,
        members: Vec<CandidatePage>,
    ) -> Self {
        let urls = members.iter().map(|m| m.url.as_str()).collect::<BTreeSet<_>>().len();
        let countries = members.iter().map(|m| m.country).collect::<BTreeSet<_>>().len();
        let ratio = if countries == 0 {
            0.0
        } else {
            urls as f64 / countries as f64
        };
        Self {
            id,
            method,
            center,
            members,
            urls,
            countries,
            ratio,
        }
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.method.label(), self.id)
    }

    pub fn is_known(&self) -> bool {
        matches!(self.center, ClusterCenter::Known(_))
    }
}

/// Groups candidates by exact tag-vector equality. Groups appear in order of
/// their first member; a group whose vector equals a known page's is
/// centered on that signature (the first listed when several share it).
pub fn cluster_by_tags(candidates: &[CandidatePage], known: &[(String, TagVector)]) -> Vec<Cluster> {
    let mut order: Vec<TagVector> = Vec::new();
    let mut groups: HashMap<TagVector, Vec<CandidatePage>> = HashMap::new();
    for c in candidates {
        let v = tag_vector(&c.body);
        groups
            .entry(v.clone())
            .or_insert_with(|| {
                order.push(v);
                Vec::new()
            })
            .push(c.clone());
    }
    order
        .into_iter()
        .enumerate()
        .map(|(id, v)| {
            let center = known
                .iter()
                .find(|(_, kv)| *kv == v)
                .map_or(ClusterCenter::Unknown, |(sig, _)| ClusterCenter::Known(sig.clone()));
            let members = groups.remove(&v).expect("ordered vectors have groups");
            Cluster::new(id, ClusterMethod::TagVector, center, members)
        })
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Keeps the smaller root so component representatives are deterministic.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Text-similarity clustering.
///
/// Each candidate is compared (via LSH bucket collisions, then the estimated
/// similarity) with the known pages and joins the most similar one at or
/// above the threshold. The remaining candidates are linked among themselves
/// by single linkage over bucket collisions that pass the same threshold.
///
/// Known-centered clusters come first in signature order, followed by unknown
/// clusters in order of their first member.
pub fn lsh_clusters(candidates: &[CandidatePage], known: &[KnownPage], cfg: &LshConfig) -> Vec<Cluster> {
    let hasher = MinHasher::new(cfg.num_perm, cfg.seed);
    let (bands, rows) = cfg.banding();
    let sign = |body: &[u8]| -> MinHashSig {
        hasher.signature(&shingles(&canonicalize_text(body), cfg.shingle_width))
    };
    let known_sigs: Vec<MinHashSig> = known.iter().map(|k| sign(&k.body)).collect();
    let cand_sigs: Vec<MinHashSig> = candidates.iter().map(|c| sign(&c.body)).collect();

    // Bucket index: key → (known pages, candidates) sharing that band.
    let mut known_buckets: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, s) in known_sigs.iter().enumerate() {
        for k in band_keys(s, bands, rows) {
            known_buckets.entry(k).or_default().push(i);
        }
    }
    let cand_keys: Vec<Vec<u64>> = cand_sigs.iter().map(|s| band_keys(s, bands, rows)).collect();

    let mut assigned: Vec<Option<usize>> = vec![None; candidates.len()];
    for (ci, keys) in cand_keys.iter().enumerate() {
        let mut hits: BTreeSet<usize> = BTreeSet::new();
        for k in keys {
            if let Some(ks) = known_buckets.get(k) {
                hits.extend(ks);
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for ki in hits {
            let s = cand_sigs[ci].similarity(&known_sigs[ki]);
            if s >= cfg.threshold && best.is_none_or(|(_, bs)| s > bs) {
                best = Some((ki, s));
            }
        }
        assigned[ci] = best.map(|(ki, _)| ki);
    }

    let unknown: Vec<usize> = (0..candidates.len()).filter(|&i| assigned[i].is_none()).collect();
    let mut uf = UnionFind::new(candidates.len());
    let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
    for &ci in &unknown {
        for &k in &cand_keys[ci] {
            buckets.entry(k).or_default().push(ci);
        }
    }
    let mut checked: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut keys: Vec<&u64> = buckets.keys().collect();
    keys.sort_unstable();
    for k in keys {
        let members = &buckets[k];
        for (x, &a) in members.iter().enumerate() {
            for &b in &members[x + 1..] {
                if uf.find(a) == uf.find(b) || !checked.insert((a, b)) {
                    continue;
                }
                if cand_sigs[a].similarity(&cand_sigs[b]) >= cfg.threshold {
                    uf.union(a, b);
                }
            }
        }
    }

    let mut out = Vec::new();
    let mut by_known: BTreeMap<usize, Vec<CandidatePage>> = BTreeMap::new();
    for (ci, a) in assigned.iter().enumerate() {
        if let Some(ki) = a {
            by_known.entry(*ki).or_default().push(candidates[ci].clone());
        }
    }
    for (ki, members) in by_known {
        let center = ClusterCenter::Known(known[ki].signature_id.clone());
        out.push(Cluster::new(out.len(), ClusterMethod::Lsh, center, members));
    }
    let mut components: BTreeMap<usize, Vec<CandidatePage>> = BTreeMap::new();
    for &ci in &unknown {
        components.entry(uf.find(ci)).or_default().push(candidates[ci].clone());
    }
    for (_, members) in components {
        out.push(Cluster::new(out.len(), ClusterMethod::Lsh, ClusterCenter::Unknown, members));
    }
    out
}

/// Unknown clusters ordered by ratio (descending), then member count
/// (descending), then id.
pub fn rank_unknown_clusters(clusters: &[Cluster]) -> Vec<&Cluster> {
    let mut out: Vec<&Cluster> = clusters.iter().filter(|c| !c.is_known()).collect();
    out.sort_by(|a, b| {
        b.ratio
            .total_cmp(&a.ratio)
            .then(b.members.len().cmp(&a.members.len()))
            .then(a.method.cmp(&b.method))
            .then(a.id.cmp(&b.id))
    });
    out
}

const SAMPLE_BYTES: usize = 200;
const SAMPLES_PER_CLUSTER: usize = 3;

fn escape_sample(body: &[u8]) -> String {
    let cut = &body[..body.len().min(SAMPLE_BYTES)];
    let mut s: String = String::from_utf8_lossy(cut)
        .chars()
        .flat_map(|c| match c {
            '\n' => vec!['\\', 'n'],
            '\r' => vec!['\\', 'r'],
            '\t' => vec!['\\', 't'],
            c if c.is_control() => vec!['?'],
            c => vec![c],
        })
        .collect();
    if body.len() > SAMPLE_BYTES {
        s.push_str(" [...]");
    }
    s
}

fn write_section(out: &mut impl Write, c: &Cluster, flag: &str) -> io::Result<()> {
    writeln!(out, "== cluster {} [{flag}]", c.label())?;
    writeln!(out, "center: {}", c.center)?;
    writeln!(
        out,
        "ratio: {:.3} (urls: {}, countries: {})",
        c.ratio, c.urls, c.countries
    )?;
    let countries: BTreeSet<&str> = c.members.iter().map(|m| m.country.as_str()).collect();
    writeln!(out, "countries: {}", countries.into_iter().collect::<Vec<_>>().join(" "))?;
    let injected = c
        .members
        .iter()
        .filter(|m| m.source == CandidateSource::InjectedCollision)
        .count();
    writeln!(
        out,
        "members: {} (injected: {}, http: {})",
        c.members.len(),
        injected,
        c.members.len() - injected
    )?;
    let mut seen_bodies: BTreeSet<&[u8]> = BTreeSet::new();
    for m in &c.members {
        if seen_bodies.len() == SAMPLES_PER_CLUSTER {
            break;
        }
        if seen_bodies.insert(&m.body) {
            writeln!(out, "sample {} {}: {}", m.measurement_id, m.url, escape_sample(&m.body))?;
        }
    }
    writeln!(out)
}

/// Writes the review report: unknown clusters in rank order flagged
/// NEEDS-REVIEW, then known-centered clusters flagged VARIANT-OF(id) sorted by
/// signature id.
pub fn write_review_queue(clusters: &[Cluster], out: &mut impl Write) -> io::Result<()> {
    let ranked = rank_unknown_clusters(clusters);
    let mut known: Vec<&Cluster> = clusters.iter().filter(|c| c.is_known()).collect();
    known.sort_by(|a, b| {
        a.center
            .cmp(&b.center)
            .then(a.method.cmp(&b.method))
            .then(a.id.cmp(&b.id))
    });
    writeln!(out, "# block-page review queue")?;
    writeln!(
        out,
        "# clusters: {} (needs review: {}, variants of known pages: {})",
        clusters.len(),
        ranked.len(),
        known.len()
    )?;
    writeln!(out)?;
    for c in ranked {
        write_section(out, c, "NEEDS-REVIEW")?;
    }
    for c in known {
        write_section(out, c, &format!("VARIANT-OF({})", c.center))?;
    }
    Ok(())
}

pub fn review_queue(clusters: &[Cluster], out_path: impl AsRef<Path>) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(out_path)?);
    write_review_queue(clusters, &mut w)?;
    w.flush()
}
