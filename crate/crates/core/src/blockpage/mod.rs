//! Block-page detection: curated signatures, candidate extraction from
//! injected responses, structural and textual clustering, and the review queue.

mod cluster;
mod html;
mod http;
mod minhash;
mod signature;

use serde::{Deserialize, Serialize};

pub use cluster::{
    cluster_by_tags, lsh_clusters, rank_unknown_clusters, review_queue, write_review_queue,
    CandidatePage, CandidateSource, Cluster, ClusterCenter, ClusterMethod, KnownPage,
};
pub use html::{canonicalize_text, decode_entities, tag_vector, TagVector};
pub use http::{parse_self_contained_response, ParsedResponse};
pub use minhash::{band_keys, shingles, LshConfig, MinHashSig, MinHasher};
pub use signature::{match_signatures, Scope, Signature, SignatureError, SignatureSet};

use crate::model::{Measurement, TcpFlags};
use crate::tcp::{CollisionEvent, CollisionKind};

/// Candidates from payload conflicts: every conflicting packet whose payload
/// is one complete HTTP response. Identical bodies within one measurement are
/// reported once.
pub fn extract_candidates(m: &Measurement, collisions: &[CollisionEvent]) -> Vec<CandidatePage> {
    let mut out: Vec<CandidatePage> = Vec::new();
    for c in collisions.iter().filter(|c| c.kind == CollisionKind::PayloadConflict) {
        for p in [&c.first, &c.second] {
            let fin = p.flags.contains(TcpFlags::FIN);
            let Some(resp) = parse_self_contained_response(&p.payload, fin) else {
                continue;
            };
            if out.iter().any(|o| o.body == resp.body) {
                continue;
            }
            out.push(CandidatePage {
                measurement_id: m.measurement_id.clone(),
                url: m.url.clone(),
                country: m.country(),
                body: resp.body,
                source: CandidateSource::InjectedCollision,
            });
        }
    }
    out
}

/// The vantage's own HTTP response as a candidate, when its structure differs
/// from every control's page. Requires at least one control with a response.
pub fn http_candidate(m: &Measurement, controls: &[&Measurement]) -> Option<CandidatePage> {
    let http = m.http.as_ref()?;
    if http.body.is_empty() {
        return None;
    }
    let control_vectors: Vec<TagVector> = controls
        .iter()
        .filter_map(|c| c.http.as_ref())
        .map(|h| tag_vector(&h.body))
        .collect();
    if control_vectors.is_empty() {
        return None;
    }
    let v = tag_vector(&http.body);
    if control_vectors.contains(&v) {
        return None;
    }
    Some(CandidatePage {
        measurement_id: m.measurement_id.clone(),
        url: m.url.clone(),
        country: m.country(),
        body: http.body.clone(),
        source: CandidateSource::HttpResponse,
    })
}

/// Clustering anchors: for each signature, in signature-file order, the
/// first candidate whose body it matches.
pub fn known_pages(candidates: &[CandidatePage], sigs: &SignatureSet) -> Vec<KnownPage> {
    let mut first: std::collections::BTreeMap<&str, &CandidatePage> = std::collections::BTreeMap::new();
    for c in candidates {
        for id in sigs.matches(&c.body, c.country) {
            first.entry(id).or_insert(c);
        }
    }
    sigs.signatures()
        .iter()
        .filter_map(|s| {
            first.get(s.id.as_str()).map(|c| KnownPage {
                signature_id: s.id.clone(),
                body: c.body.clone(),
            })
        })
        .collect()
}

/// Tag vectors of the known pages, for structural clustering.
pub fn known_tag_vectors(known: &[KnownPage]) -> Vec<(String, TagVector)> {
    known.iter().map(|k| (k.signature_id.clone(), tag_vector(&k.body))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockpageOutcome {
    Detected,
    NotDetected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockpageVerdict {
    pub measurement_id: String,
    pub outcome: BlockpageOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_signature_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<CandidateSource>,
}

/// A known signature matched on the received HTTP body or on any packet
/// taking part in a sequence-number collision. The HTTP body is checked first.
pub fn detect_blockpage(
    m: &Measurement,
    collisions: &[CollisionEvent],
    sigs: &SignatureSet,
) -> BlockpageVerdict {
    let country = m.country();
    let from_http = m
        .http
        .as_ref()
        .and_then(|h| sigs.matches(&h.body, country).first().map(|s| s.to_string()))
        .map(|id| (id, CandidateSource::HttpResponse));
    let from_injection = || {
        collisions
            .iter()
            .flat_map(|c| [&c.first, &c.second])
            .find_map(|p| sigs.matches(&p.payload, country).first().map(|s| s.to_string()))
            .map(|id| (id, CandidateSource::InjectedCollision))
    };
    let hit = from_http.or_else(from_injection);
    BlockpageVerdict {
        measurement_id: m.measurement_id.clone(),
        outcome: if hit.is_some() {
            BlockpageOutcome::Detected
        } else {
            BlockpageOutcome::NotDetected
        },
        source: hit.as_ref().map(|(_, s)| *s),
        matched_signature_id: hit.map(|(id, _)| id),
    }
}
