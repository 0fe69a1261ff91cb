//! Hand-written checks that a generated measurement exhibits the defining
//! artifact of its scenario. They read raw packets and DNS answers directly
//! rather than going through the detectors.

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;

use super::Scenario;
use crate::ipmeta::{is_globally_routable, AsnTable};
use crate::model::{Direction, Measurement, PacketEvent, Rcode, TcpFlags};

fn inbound(m: &Measurement) -> impl Iterator<Item = &PacketEvent> {
    m.packets.iter().filter(|p| p.dir == Direction::Inbound && !p.icmp_unreachable)
}

fn has_synack(m: &Measurement) -> bool {
    inbound(m).any(|p| p.flags.contains(TcpFlags::SYN | TcpFlags::ACK))
}

fn syn_refused(m: &Measurement) -> bool {
    !has_synack(m) && inbound(m).any(|p| p.flags.contains(TcpFlags::RST))
}

fn syn_unreachable(m: &Measurement) -> bool {
    !has_synack(m) && m.packets.iter().any(|p| p.icmp_unreachable)
}

/// Inbound non-SYN packets that occupy sequence space, grouped by seq in
/// arrival order.
fn by_seq(m: &Measurement) -> BTreeMap<u32, Vec<&PacketEvent>> {
    let mut out: BTreeMap<u32, Vec<&PacketEvent>> = BTreeMap::new();
    for p in inbound(m).filter(|p| !p.flags.contains(TcpFlags::SYN)) {
        if !p.payload.is_empty() || p.flags.intersects(TcpFlags::RST | TcpFlags::FIN) {
            out.entry(p.seq).or_default().push(p);
        }
    }
    out
}

fn differs(a: &PacketEvent, b: &PacketEvent) -> bool {
    a.payload != b.payload || a.flags != b.flags
}

fn conflicting_seqs(m: &Measurement) -> Vec<Vec<&PacketEvent>> {
    by_seq(m)
        .into_values()
        .filter(|ps| ps.iter().any(|p| differs(p, ps[0])))
        .collect()
}

fn first_answer(m: &Measurement) -> Option<(Rcode, &[IpAddr])> {
    m.dns_local
        .responses
        .iter()
        .min_by_key(|r| r.arrival_order)
        .map(|r| (r.rcode, r.answers.as_slice()))
}

fn control_answers(controls: &[&Measurement]) -> BTreeSet<IpAddr> {
    controls.iter().flat_map(|c| c.dns_local.all_answers().copied()).collect()
}

fn ensure(cond: bool, what: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.to_string())
    }
}

/// Verifies the defining feature of `scenario` on one vantage measurement
/// and its same-URL controls.
pub fn check_scenario(
    scenario: Scenario,
    m: &Measurement,
    controls: &[&Measurement],
    asn: &AsnTable,
) -> Result<(), String> {
    ensure(!controls.is_empty(), "no control measurement for the URL")?;
    let packets = !m.packets.is_empty();
    match scenario {
        Scenario::Clean | Scenario::CdnVariation | Scenario::Geoblock403451 | Scenario::DnsPublicPoison => {
            if packets {
                ensure(has_synack(m), "handshake missing")?;
                ensure(conflicting_seqs(m).is_empty(), "unexpected sequence conflict")?;
            }
            let status = m.http.as_ref().and_then(|h| h.status);
            if scenario == Scenario::Geoblock403451 {
                ensure(matches!(status, Some(403 | 451)), "geoblock without 403/451")?;
            } else {
                ensure(status == Some(200), "expected HTTP 200")?;
            }
            let (rcode, answers) = first_answer(m).ok_or("no DNS response")?;
            ensure(rcode == Rcode::NoError && answers.len() == 1, "expected one local answer")?;
            let ctl = control_answers(controls);
            match scenario {
                Scenario::CdnVariation => {
                    let ctl_as: BTreeSet<u32> = ctl.iter().filter_map(|ip| asn.lookup(*ip)).collect();
                    ensure(ctl_as.len() == ctl.len(), "control answers not in distinct ASes")?;
                    let v_as = asn.lookup(answers[0]).ok_or("vantage answer unmapped")?;
                    ensure(!ctl_as.contains(&v_as), "vantage AS among control ASes")?;
                }
                Scenario::DnsPublicPoison => {
                    ensure(ctl.contains(&answers[0]), "local answer differs from control")?;
                    let public = m.dns_public.as_ref().ok_or("no public observation")?;
                    let r = public.first_response().ok_or("no public response")?;
                    ensure(
                        r.rcode == Rcode::NxDomain
                            || (r.rcode == Rcode::NoError && r.answers.iter().all(|ip| !is_globally_routable(*ip))),
                        "public answer not forged",
                    )?;
                }
                _ => ensure(ctl.contains(&answers[0]), "local answer differs from control")?,
            }
            Ok(())
        }
        Scenario::LoadBalancerRetransmit => {
            ensure(conflicting_seqs(m).is_empty(), "retransmission differs from original")?;
            ensure(
                by_seq(m).values().any(|ps| ps.iter().filter(|p| !p.payload.is_empty()).count() >= 2),
                "no duplicated data packet",
            )
        }
        Scenario::SiteOutage => {
            let vantage_refused = syn_refused(m);
            ensure(vantage_refused || syn_unreachable(m), "vantage connection did not fail")?;
            for c in controls {
                ensure(c.http.is_none(), "control completed HTTP during outage")?;
                let same = if vantage_refused { syn_refused(c) } else { syn_unreachable(c) };
                ensure(same, "control failed differently")?;
            }
            Ok(())
        }
        Scenario::DnsNxdomainCensor | Scenario::DnsNonroutableCensor | Scenario::DnsRedirectCensor => {
            let ctl = control_answers(controls);
            ensure(
                controls.iter().all(|c| {
                    c.dns_local.responses.iter().all(|r| {
                        r.rcode == Rcode::NoError && r.answers.iter().any(|ip| is_globally_routable(*ip))
                    })
                }),
                "control answers not consistently routable",
            )?;
            let (rcode, answers) = first_answer(m).ok_or("no DNS response")?;
            match scenario {
                Scenario::DnsNxdomainCensor => ensure(rcode == Rcode::NxDomain, "expected NXDOMAIN"),
                Scenario::DnsNonroutableCensor => ensure(
                    rcode == Rcode::NoError && !answers.is_empty() && answers.iter().all(|ip| !is_globally_routable(*ip)),
                    "expected non-routable answers",
                ),
                _ => {
                    ensure(rcode == Rcode::NoError && answers.len() == 1, "expected one forged answer")?;
                    ensure(is_globally_routable(answers[0]), "forged answer not routable")?;
                    ensure(!ctl.contains(&answers[0]), "forged answer equals a control answer")?;
                    let f_as = asn.lookup(answers[0]).ok_or("forged answer unmapped")?;
                    ensure(
                        !ctl.iter().filter_map(|ip| asn.lookup(*ip)).any(|a| a == f_as),
                        "forged AS among control ASes",
                    )
                }
            }
        }
        Scenario::OnpathRstInjection | Scenario::OnpathFinInjection => {
            ensure(has_synack(m), "handshake missing")?;
            let flag = if scenario == Scenario::OnpathRstInjection {
                TcpFlags::RST
            } else {
                TcpFlags::FIN
            };
            ensure(
                conflicting_seqs(m).iter().any(|ps| {
                    ps[0].flags.contains(flag)
                        && ps[0].payload.is_empty()
                        && ps[1..].iter().any(|p| !p.payload.is_empty() && !p.flags.intersects(TcpFlags::RST | TcpFlags::FIN))
                }),
                "no forged teardown racing legitimate data",
            )
        }
        Scenario::BlockpageInjection => {
            ensure(has_synack(m), "handshake missing")?;
            ensure(
                conflicting_seqs(m).iter().any(|ps| {
                    ps[0].payload.starts_with(b"HTTP/1.")
                        && ps[1..].iter().any(|p| p.payload.starts_with(b"HTTP/1.") && p.payload != ps[0].payload)
                }),
                "no forged response racing the legitimate one",
            )
        }
        Scenario::SynRstIpblock => {
            ensure(syn_refused(m), "vantage SYN not refused")?;
            ensure(controls.iter().any(|c| c.http.is_some()), "no control completed HTTP")
        }
    }
}
