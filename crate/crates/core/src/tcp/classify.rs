//! Per-flow anomaly classification against control observations, the
//! measurement-level summary, and singleton discounting.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::flow::{find_collisions, reassemble_flows, CollisionEvent, CollisionKind, FourTuple, SynResponse, TcpFlow};
use crate::blockpage::SignatureSet;
use crate::model::{CountryCode, Measurement, Rcode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InjectionOutcome {
    CensoredDisrupted,
    CensoredBlockpage,
    NotCensored,
    ProbableCensorship,
    Uncertain,
    Unmatched,
}

impl InjectionOutcome {
    pub fn is_censored(self) -> bool {
        matches!(self, InjectionOutcome::CensoredDisrupted | InjectionOutcome::CensoredBlockpage)
    }

    /// Outcomes subject to singleton discounting.
    pub fn is_anomaly(self) -> bool {
        self.is_censored() || self == InjectionOutcome::ProbableCensorship
    }

    /// Rank used to summarize several flows of one measurement; higher wins.
    fn severity(self) -> u8 {
        match self {
            InjectionOutcome::Unmatched => 0,
            InjectionOutcome::NotCensored => 1,
            InjectionOutcome::Uncertain => 2,
            InjectionOutcome::ProbableCensorship => 3,
            InjectionOutcome::CensoredBlockpage => 4,
            InjectionOutcome::CensoredDisrupted => 5,
        }
    }
}

/// How the vantage's SYN failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SynFailure {
    Refused,
    Unreachable,
}

impl SynFailure {
    fn label(self) -> &'static str {
        match self {
            SynFailure::Refused => "connection refused",
            SynFailure::Unreachable => "host unreachable",
        }
    }
}

/// What a control node observed for the same URL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ControlStatus {
    HttpOk,
    Refused,
    Unreachable,
    Timeout,
    DnsError,
}

impl ControlStatus {
    pub const ALL: [ControlStatus; 5] = [
        ControlStatus::HttpOk,
        ControlStatus::Refused,
        ControlStatus::Unreachable,
        ControlStatus::Timeout,
        ControlStatus::DnsError,
    ];

    fn label(self) -> &'static str {
        match self {
            ControlStatus::HttpOk => "HTTP ok",
            ControlStatus::Refused => "connection refused",
            ControlStatus::Unreachable => "host unreachable",
            ControlStatus::Timeout => "timeout",
            ControlStatus::DnsError => "DNS error",
        }
    }

    fn same_class(self, v: SynFailure) -> bool {
        matches!(
            (v, self),
            (SynFailure::Refused, ControlStatus::Refused)
                | (SynFailure::Unreachable, ControlStatus::Unreachable)
        )
    }
}

/// A cell of the anomaly decision matrix. The label is the stable
/// serialized form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cell {
    NoRecordForUrl,
    ConnectionDisrupted,
    PayloadCollision { blockpage: bool },
    /// Both colliding packets carry RST or FIN.
    AmbiguousCollision,
    NoAnomaly,
    HandshakeFailure { vantage: SynFailure, control: ControlStatus },
    /// The vantage's SYN was never answered.
    SynTimeout,
    /// The measurement holds no flow that starts with a SYN.
    NoConnection,
}

impl Cell {
    pub fn all() -> Vec<Cell> {
        let mut out = vec![
            Cell::NoRecordForUrl,
            Cell::ConnectionDisrupted,
            Cell::PayloadCollision { blockpage: true },
            Cell::PayloadCollision { blockpage: false },
            Cell::AmbiguousCollision,
            Cell::NoAnomaly,
        ];
        for vantage in [SynFailure::Refused, SynFailure::Unreachable] {
            for control in ControlStatus::ALL {
                out.push(Cell::HandshakeFailure { vantage, control });
            }
        }
        out.push(Cell::SynTimeout);
        out.push(Cell::NoConnection);
        out
    }

    pub fn outcome(self) -> InjectionOutcome {
        use InjectionOutcome::*;
        match self {
            Cell::NoRecordForUrl => Unmatched,
            Cell::ConnectionDisrupted => CensoredDisrupted,
            Cell::PayloadCollision { blockpage: true } => CensoredBlockpage,
            Cell::PayloadCollision { blockpage: false } => NotCensored,
            Cell::AmbiguousCollision => Uncertain,
            Cell::NoAnomaly => NotCensored,
            Cell::HandshakeFailure { vantage, control } => {
                if control.same_class(vantage) {
                    NotCensored
                } else if control == ControlStatus::HttpOk {
                    ProbableCensorship
                } else {
                    Uncertain
                }
            }
            Cell::SynTimeout | Cell::NoConnection => Uncertain,
        }
    }

    pub fn label(self) -> String {
        match self {
            Cell::NoRecordForUrl => "no record for URL".into(),
            Cell::ConnectionDisrupted => "connection disrupted".into(),
            Cell::PayloadCollision { blockpage: true } => "payload collision (blockpage)".into(),
            Cell::PayloadCollision { blockpage: false } => "payload collision (no blockpage)".into(),
            Cell::AmbiguousCollision => "ambiguous collision".into(),
            Cell::NoAnomaly => "no anomaly".into(),
            Cell::HandshakeFailure { vantage, control } => {
                format!("{} / {}", vantage.label(), control.label())
            }
            Cell::SynTimeout => "SYN timeout".into(),
            Cell::NoConnection => "no connection".into(),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Cell {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Cell::all()
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| format!("unknown cell label `{s}`"))
    }
}

impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for Cell {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionVerdict {
    pub measurement_id: String,
    pub url: String,
    pub country: CountryCode,
    pub outcome: InjectionOutcome,
    /// The matrix cell observed. After discounting, `outcome` is Uncertain
    /// while the cell still names what was seen.
    pub cell: Cell,
    #[serde(default)]
    pub discounted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_signature_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowVerdict {
    pub tuple: FourTuple,
    pub cell: Cell,
    pub outcome: InjectionOutcome,
    pub matched_signature_id: Option<String>,
}

fn dns_failed(m: &Measurement) -> bool {
    !matches!(m.dns_local.first_response(), Some(r) if r.rcode == Rcode::NoError && !r.answers.is_empty())
}

/// Summarizes a control observation of the URL.
pub fn control_status(c: &Measurement) -> ControlStatus {
    if c.http.is_some() {
        return ControlStatus::HttpOk;
    }
    if dns_failed(c) {
        return ControlStatus::DnsError;
    }
    let flows = reassemble_flows(&c.packets);
    match flows.iter().find(|f| f.has_syn).map(|f| f.syn_response) {
        Some(SynResponse::Rst) => ControlStatus::Refused,
        Some(SynResponse::IcmpUnreachable) => ControlStatus::Unreachable,
        _ => ControlStatus::Timeout,
    }
}

/// Picks the control evidence for a failed handshake: a control sharing the
/// vantage's error class first, then one completing HTTP, then any other.
fn control_cell(vantage: SynFailure, statuses: &[ControlStatus]) -> Cell {
    let control = statuses
        .iter()
        .copied()
        .find(|s| s.same_class(vantage))
        .or_else(|| statuses.iter().copied().find(|s| *s == ControlStatus::HttpOk))
        .or_else(|| statuses.iter().copied().min())
        .unwrap_or(ControlStatus::Timeout);
    Cell::HandshakeFailure { vantage, control }
}

/// A flow is associated with the measured URL when its server address is one
/// the vantage resolved (or nothing was resolved to compare against).
fn flow_associated(m: &Measurement, flow: &TcpFlow) -> bool {
    let resolved = m.resolved_addresses();
    resolved.is_empty() || resolved.contains(&flow.tuple.server.ip())
}

fn first_match(sigs: &SignatureSet, m: &Measurement, c: &CollisionEvent) -> Option<String> {
    [&c.first, &c.second]
        .into_iter()
        .find_map(|p| sigs.matches(&p.payload, m.country()).first().map(|s| s.to_string()))
}

/// Applies the decision table to one flow.
pub fn classify_flow(
    m: &Measurement,
    flow: &TcpFlow,
    collisions: &[CollisionEvent],
    controls: &[&Measurement],
    sigs: &SignatureSet,
) -> FlowVerdict {
    let mut matched = None;
    let cell = if controls.is_empty() || !flow_associated(m, flow) {
        Cell::NoRecordForUrl
    } else if collisions.iter().any(|c| c.kind == CollisionKind::DisruptiveFlag) {
        Cell::ConnectionDisrupted
    } else if collisions.iter().any(|c| c.kind == CollisionKind::PayloadConflict) {
        matched = collisions
            .iter()
            .filter(|c| c.kind == CollisionKind::PayloadConflict)
            .find_map(|c| first_match(sigs, m, c));
        Cell::PayloadCollision {
            blockpage: matched.is_some(),
        }
    } else if !collisions.is_empty() {
        Cell::AmbiguousCollision
    } else {
        let statuses = || controls.iter().map(|c| control_status(c)).collect::<Vec<_>>();
        match flow.syn_response {
            SynResponse::SynAck => Cell::NoAnomaly,
            SynResponse::Rst => control_cell(SynFailure::Refused, &statuses()),
            SynResponse::IcmpUnreachable => control_cell(SynFailure::Unreachable, &statuses()),
            SynResponse::None => Cell::SynTimeout,
        }
    };
    FlowVerdict {
        tuple: flow.tuple,
        cell,
        outcome: cell.outcome(),
        matched_signature_id: matched,
    }
}

/// Reassembled flows, their collisions and per-flow verdicts for one measurement.
#[derive(Debug, Clone)]
pub struct TcpAnalysis {
    pub flows: Vec<TcpFlow>,
    pub collisions: Vec<Vec<CollisionEvent>>,
    pub flow_verdicts: Vec<FlowVerdict>,
    pub verdict: InjectionVerdict,
}

impl TcpAnalysis {
    pub fn all_collisions(&self) -> Vec<CollisionEvent> {
        self.collisions.iter().flatten().cloned().collect()
    }
}

/// Classifies every SYN-initiated flow and summarizes the measurement by its
/// most severe flow verdict.
pub fn analyze_tcp(m: &Measurement, controls: &[&Measurement], sigs: &SignatureSet) -> TcpAnalysis {
    let flows = reassemble_flows(&m.packets);
    let collisions: Vec<Vec<CollisionEvent>> = flows.iter().map(find_collisions).collect();
    let flow_verdicts: Vec<FlowVerdict> = flows
        .iter()
        .zip(&collisions)
        .filter(|(f, _)| f.has_syn)
        .map(|(f, c)| classify_flow(m, f, c, controls, sigs))
        .collect();

    let (cell, matched) = if controls.is_empty() {
        (Cell::NoRecordForUrl, None)
    } else {
        // Among equally severe flows the first one wins.
        match flow_verdicts.iter().map(|v| v.outcome.severity()).max() {
            Some(top) => {
                let v = flow_verdicts
                    .iter()
                    .find(|v| v.outcome.severity() == top)
                    .expect("a flow attains the maximum");
                (v.cell, v.matched_signature_id.clone())
            }
            None => (Cell::NoConnection, None),
        }
    };
    let verdict = InjectionVerdict {
        measurement_id: m.measurement_id.clone(),
        url: m.url.clone(),
        country: m.country(),
        outcome: cell.outcome(),
        cell,
        discounted: false,
        matched_signature_id: matched,
    };
    TcpAnalysis {
        flows,
        collisions,
        flow_verdicts,
        verdict,
    }
}

/// Downgrades anomalies observed only once for their (URL, country) pair.
pub fn discount_singletons(verdicts: &[InjectionVerdict]) -> Vec<InjectionVerdict> {
    let mut counts: HashMap<(&str, CountryCode), usize> = HashMap::new();
    for v in verdicts.iter().filter(|v| v.outcome.is_anomaly()) {
        *counts.entry((v.url.as_str(), v.country)).or_insert(0) += 1;
    }
    verdicts
        .iter()
        .map(|v| {
            let mut out = v.clone();
            if v.outcome.is_anomaly() && counts[&(v.url.as_str(), v.country)] == 1 {
                out.outcome = InjectionOutcome::Uncertain;
                out.discounted = true;
            }
            out
        })
        .collect()
}
