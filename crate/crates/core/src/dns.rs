//! DNS manipulation detection.
//!
//! Per-measurement classification applies four heuristics in order: two
//! responses from different ASes, NXDOMAIN or non-routable answers against
//! consistently routable controls, same-AS agreement with controls, and a
//! residual class that is resolved corpus-wide by grouping many URLs that
//! resolve to one vantage IP ([`GroupAnalysis`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::ipmeta::{is_globally_routable, AsnTable};
use crate::model::{
    ControlIndex, ControlWindow, CountryCode, DnsObservation, DnsResponse, Measurement, Rcode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DnsOutcome {
    Manipulated,
    NotManipulated,
    Deferred,
    Uncertain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DnsReason {
    TwoResponsesDifferentAs,
    NxdomainAgainstConsistentControl,
    NonRoutableAgainstConsistentControl,
    SameAsAsControl,
    DifferentAsGrouped,
    NoControlData,
    /// Some control response in the window lacked a routable answer.
    ControlInconsistent,
    /// The vantage got no usable answer (timeout, SERVFAIL, empty NOERROR).
    VantageNoAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnsVerdict {
    pub measurement_id: String,
    pub outcome: DnsOutcome,
    pub reason: DnsReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_used: Option<u32>,
}

impl DnsVerdict {
    fn new(m: &Measurement, outcome: DnsOutcome, reason: DnsReason) -> Self {
        Self {
            measurement_id: m.measurement_id.clone(),
            outcome,
            reason,
            theta_used: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DnsGroupConfig {
    pub theta: u32,
    pub window: ControlWindow,
}

impl DnsGroupConfig {
    pub fn with_theta(theta: u32) -> Self {
        Self {
            theta: theta.max(1),
            ..Self::default()
        }
    }
}

impl Default for DnsGroupConfig {
    fn default() -> Self {
        Self {
            theta: 11,
            window: ControlWindow::default(),
        }
    }
}

fn routable_asns<'a>(
    answers: impl IntoIterator<Item = &'a IpAddr>,
    asn: &AsnTable,
) -> BTreeSet<u32> {
    answers
        .into_iter()
        .filter(|ip| is_globally_routable(**ip))
        .filter_map(|ip| asn.lookup(*ip))
        .collect()
}

fn two_responses_differ(obs: &DnsObservation, asn: &AsnTable) -> bool {
    let per_response: Vec<BTreeSet<u32>> = obs
        .responses
        .iter()
        .filter(|r| r.rcode == Rcode::NoError)
        .map(|r| routable_asns(&r.answers, asn))
        .filter(|s| !s.is_empty())
        .collect();
    if per_response.len() < 2 {
        return false;
    }
    let union: BTreeSet<u32> = per_response.iter().flatten().copied().collect();
    union.len() >= 2
}

fn response_has_routable_answer(r: &DnsResponse) -> bool {
    r.rcode == Rcode::NoError && r.answers.iter().any(|ip| is_globally_routable(*ip))
}

/// Every control observation in the window carries a routable answer in every response.
fn controls_consistently_routable(controls: &[&Measurement]) -> bool {
    controls.iter().all(|c| {
        !c.dns_local.responses.is_empty()
            && c.dns_local.responses.iter().all(response_has_routable_answer)
    })
}

fn control_asns(controls: &[&Measurement], asn: &AsnTable) -> BTreeSet<u32> {
    controls
        .iter()
        .flat_map(|c| {
            c.dns_local
                .responses
                .iter()
                .filter(|r| r.rcode == Rcode::NoError)
                .flat_map(|r| r.answers.iter())
        })
        .filter(|ip| is_globally_routable(**ip))
        .filter_map(|ip| asn.lookup(*ip))
        .collect()
}

/// Classifies one vantage measurement against its matched control observations.
pub fn classify_dns(m: &Measurement, controls: &[&Measurement], asn: &AsnTable) -> DnsVerdict {
    use DnsOutcome::*;
    use DnsReason::*;

    let obs = &m.dns_local;
    if two_responses_differ(obs, asn) {
        return DnsVerdict::new(m, Manipulated, TwoResponsesDifferentAs);
    }

    let Some(first) = obs.first_response() else {
        return DnsVerdict::new(m, Uncertain, VantageNoAnswer);
    };

    let against_controls = |reason: DnsReason| {
        if controls.is_empty() {
            DnsVerdict::new(m, Uncertain, NoControlData)
        } else if controls_consistently_routable(controls) {
            DnsVerdict::new(m, Manipulated, reason)
        } else {
            DnsVerdict::new(m, Uncertain, ControlInconsistent)
        }
    };

    match first.rcode {
        Rcode::NxDomain => against_controls(NxdomainAgainstConsistentControl),
        Rcode::NoError if !first.answers.is_empty() => {
            if first.answers.iter().any(|ip| !is_globally_routable(*ip)) {
                return against_controls(NonRoutableAgainstConsistentControl);
            }
            if controls.is_empty() {
                return DnsVerdict::new(m, Uncertain, NoControlData);
            }
            let ctl = control_asns(controls, asn);
            if ctl.is_empty() {
                return DnsVerdict::new(m, Uncertain, ControlInconsistent);
            }
            let vantage = routable_asns(&first.answers, asn);
            if !vantage.is_disjoint(&ctl) {
                DnsVerdict::new(m, NotManipulated, SameAsAsControl)
            } else {
                DnsVerdict::new(m, Deferred, DifferentAsGrouped)
            }
        }
        _ => DnsVerdict::new(m, Uncertain, VantageNoAnswer),
    }
}

/// Corpus-level state for the same-IP grouping heuristic.
///
/// For each deferred measurement this records the largest control-AS count
/// over the (country, vantage IP) groups it belongs to, so verdicts for any
/// threshold can be read off without regrouping.
#[derive(Debug, Clone)]
pub struct GroupAnalysis {
    ids: Vec<String>,
    max_group_as: Vec<usize>,
}

impl GroupAnalysis {
    pub fn build<'a>(
        deferred: impl IntoIterator<Item = &'a Measurement>,
        controls: &ControlIndex,
        asn: &AsnTable,
        window: ControlWindow,
    ) -> Self {
        let members: Vec<&Measurement> = deferred.into_iter().collect();
        let mut groups: BTreeMap<(CountryCode, IpAddr), Vec<usize>> = BTreeMap::new();
        let mut per_measurement_asns: Vec<BTreeSet<u32>> = Vec::with_capacity(members.len());
        for (i, m) in members.iter().enumerate() {
            if let Some(first) = m.dns_local.first_response() {
                let ips: BTreeSet<IpAddr> = first
                    .answers
                    .iter()
                    .copied()
                    .filter(|ip| is_globally_routable(*ip))
                    .collect();
                for ip in ips {
                    groups.entry((m.country(), ip)).or_default().push(i);
                }
            }
            let matched = controls.match_control(m, window);
            per_measurement_asns.push(control_asns(&matched, asn));
        }

        let mut max_group_as = vec![0usize; members.len()];
        for idxs in groups.values() {
            let union: BTreeSet<u32> = idxs
                .iter()
                .flat_map(|&i| per_measurement_asns[i].iter().copied())
                .collect();
            for &i in idxs {
                max_group_as[i] = max_group_as[i].max(union.len());
            }
        }
        Self {
            ids: members.iter().map(|m| m.measurement_id.clone()).collect(),
            max_group_as,
        }
    }

    pub fn group_as_counts(&self) -> &[usize] {
        &self.max_group_as
    }

    /// Verdicts in input order; manipulated iff the group's control AS count exceeds theta.
    pub fn verdicts(&self, theta: u32) -> Vec<DnsVerdict> {
        self.ids
            .iter()
            .zip(&self.max_group_as)
            .map(|(id, &count)| DnsVerdict {
                measurement_id: id.clone(),
                outcome: if count > theta as usize {
                    DnsOutcome::Manipulated
                } else {
                    DnsOutcome::NotManipulated
                },
                reason: DnsReason::DifferentAsGrouped,
                theta_used: Some(theta),
            })
            .collect()
    }
}

/// Resolves deferred verdicts by same-IP grouping within each country.
pub fn group_same_ip(
    deferred: &[(&Measurement, DnsVerdict)],
    controls: &ControlIndex,
    asn: &AsnTable,
    cfg: DnsGroupConfig,
) -> Vec<DnsVerdict> {
    GroupAnalysis::build(deferred.iter().map(|(m, _)| *m), controls, asn, cfg.window)
        .verdicts(cfg.theta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FprPoint {
    pub theta: u32,
    pub fpr: f64,
    pub detections: usize,
    pub false_positives: usize,
    /// No grouped detections at this threshold; `fpr` is reported as 0.
    pub empty_denominator: bool,
}

/// False-positive rate of the grouping heuristic as a function of theta.
///
/// A grouped detection counts as false when `cross_check` (block page seen,
/// or no HTTP response) returns false for its measurement.
pub fn fpr_sweep<F>(
    corpus: &[Measurement],
    controls: &ControlIndex,
    asn: &AsnTable,
    theta_values: &[u32],
    window: ControlWindow,
    cross_check: F,
) -> Vec<FprPoint>
where
    F: Fn(&Measurement) -> bool,
{
    let deferred: Vec<&Measurement> = corpus
        .iter()
        .filter(|m| !m.is_control())
        .filter(|m| {
            let matched = controls.match_control(m, window);
            classify_dns(m, &matched, asn).outcome == DnsOutcome::Deferred
        })
        .collect();
    let analysis = GroupAnalysis::build(deferred.iter().copied(), controls, asn, window);
    let passes: Vec<bool> = deferred.iter().map(|m| cross_check(m)).collect();

    let mut thetas = theta_values.to_vec();
    thetas.sort_unstable();
    thetas.dedup();
    thetas
        .into_iter()
        .map(|theta| {
            let mut detections = 0;
            let mut false_positives = 0;
            for (count, ok) in analysis.group_as_counts().iter().zip(&passes) {
                if *count > theta as usize {
                    detections += 1;
                    if !ok {
                        false_positives += 1;
                    }
                }
            }
            FprPoint {
                theta,
                fpr: if detections == 0 {
                    0.0
                } else {
                    false_positives as f64 / detections as f64
                },
                detections,
                false_positives,
                empty_denominator: detections == 0,
            }
        })
        .collect()
}

/// Outcome class of one resolver's answer, used for the local-vs-public matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResolverClass {
    Routable,
    Nxdomain,
    NonRoutable,
    TimeoutError,
}

impl ResolverClass {
    pub const ALL: [ResolverClass; 4] = [
        ResolverClass::Routable,
        ResolverClass::Nxdomain,
        ResolverClass::NonRoutable,
        ResolverClass::TimeoutError,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            ResolverClass::Routable => "routable",
            ResolverClass::Nxdomain => "nxdomain",
            ResolverClass::NonRoutable => "non-routable",
            ResolverClass::TimeoutError => "timeout/error",
        }
    }
}

impl fmt::Display for ResolverClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn resolver_class(obs: &DnsObservation) -> ResolverClass {
    match obs.first_response() {
        Some(r) if r.rcode == Rcode::NxDomain => ResolverClass::Nxdomain,
        Some(r) if r.rcode == Rcode::NoError && !r.answers.is_empty() => {
            if r.answers.iter().all(|ip| is_globally_routable(*ip)) {
                ResolverClass::Routable
            } else {
                ResolverClass::NonRoutable
            }
        }
        _ => ResolverClass::TimeoutError,
    }
}

/// Counts keyed by (local resolver class, public resolver class).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolverMatrix {
    /// `counts[local][public]`, indexed by [`ResolverClass::index`].
    pub counts: [[u64; 4]; 4],
    /// Measurements lacking a public-resolver observation.
    pub skipped: u64,
}

impl ResolverMatrix {
    pub fn get(&self, local: ResolverClass, public: ResolverClass) -> u64 {
        self.counts[local.index()][public.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn local_public_matrix<'a>(corpus: impl IntoIterator<Item = &'a Measurement>) -> ResolverMatrix {
    let mut out = ResolverMatrix::default();
    for m in corpus {
        match &m.dns_public {
            Some(public) => {
                let l = resolver_class(&m.dns_local);
                let p = resolver_class(public);
                out.counts[l.index()][p.index()] += 1;
            }
            None => out.skipped += 1,
        }
    }
    out
}
