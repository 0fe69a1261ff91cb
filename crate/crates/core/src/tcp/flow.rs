//! Per-connection reassembly and sequence-number collision detection.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;

use serde::{Deserialize, Serialize};

use crate::model::{Direction, PacketEvent, TcpFlags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FourTuple {
    pub client: SocketAddr,
    pub server: SocketAddr,
}

impl FourTuple {
    pub fn of(p: &PacketEvent) -> Self {
        match p.dir {
            Direction::Outbound => FourTuple {
                client: p.src,
                server: p.dst,
            },
            Direction::Inbound => FourTuple {
                client: p.dst,
                server: p.src,
            },
        }
    }
}

/// What came back first in answer to the client's SYN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SynResponse {
    SynAck,
    Rst,
    IcmpUnreachable,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpFlow {
    pub tuple: FourTuple,
    pub has_syn: bool,
    pub handshake_complete: bool,
    /// Index in `events` of the client ACK that completed the handshake.
    pub handshake_at: Option<usize>,
    pub syn_response: SynResponse,
    pub events: Vec<PacketEvent>,
}

fn is_bare_syn(p: &PacketEvent) -> bool {
    p.dir == Direction::Outbound && p.flags.contains(TcpFlags::SYN) && !p.flags.contains(TcpFlags::ACK)
}

fn build_flow(tuple: FourTuple, events: Vec<PacketEvent>) -> TcpFlow {
    let mut flow = TcpFlow {
        tuple,
        has_syn: false,
        handshake_complete: false,
        handshake_at: None,
        syn_response: SynResponse::None,
        events,
    };
    let Some(syn_at) = flow.events.iter().position(is_bare_syn) else {
        return flow;
    };
    flow.has_syn = true;

    let answer = flow.events[syn_at + 1..]
        .iter()
        .enumerate()
        .filter(|(_, p)| p.dir == Direction::Inbound)
        .find_map(|(i, p)| {
            let kind = if p.icmp_unreachable {
                SynResponse::IcmpUnreachable
            } else if p.flags.contains(TcpFlags::SYN | TcpFlags::ACK) {
                SynResponse::SynAck
            } else if p.flags.contains(TcpFlags::RST) {
                SynResponse::Rst
            } else {
                return None;
            };
            Some((syn_at + 1 + i, kind))
        });
    let Some((answer_at, kind)) = answer else {
        return flow;
    };
    flow.syn_response = kind;
    if kind == SynResponse::SynAck {
        flow.handshake_at = flow.events[answer_at + 1..]
            .iter()
            .position(|p| {
                p.dir == Direction::Outbound
                    && p.flags.contains(TcpFlags::ACK)
                    && !p.flags.contains(TcpFlags::SYN)
            })
            .map(|i| answer_at + 1 + i);
        flow.handshake_complete = flow.handshake_at.is_some();
    }
    flow
}

/// Splits a time-ordered packet list into flows keyed by canonical four-tuple,
/// in order of each flow's first packet.
pub fn reassemble_flows(packets: &[PacketEvent]) -> Vec<TcpFlow> {
    let mut order: Vec<FourTuple> = Vec::new();
    let mut by_tuple: HashMap<FourTuple, Vec<PacketEvent>> = HashMap::new();
    for p in packets {
        let key = FourTuple::of(p);
        by_tuple
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(p.clone());
    }
    order
        .into_iter()
        .map(|t| {
            let events = by_tuple.remove(&t).expect("every ordered tuple has events");
            build_flow(t, events)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CollisionKind {
    /// Exactly one side carries RST or FIN; the other carries neither.
    DisruptiveFlag,
    /// Neither side disrupts the connection; payloads or flags differ.
    PayloadConflict,
    /// Both sides carry RST or FIN.
    BothFlagged,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollisionEvent {
    pub seq: u32,
    pub first: PacketEvent,
    pub second: PacketEvent,
    pub kind: CollisionKind,
}

fn flagged(p: &PacketEvent) -> bool {
    p.flags.intersects(TcpFlags::RST | TcpFlags::FIN)
}

/// A FIN that also carries data is treated as delivering that data, not as a
/// bare connection teardown.
fn disrupts(p: &PacketEvent) -> bool {
    p.flags.contains(TcpFlags::RST) || (p.flags.contains(TcpFlags::FIN) && p.payload.is_empty())
}

fn collision_kind(a: &PacketEvent, b: &PacketEvent) -> CollisionKind {
    match (flagged(a), flagged(b)) {
        (true, true) => CollisionKind::BothFlagged,
        (true, false) if disrupts(a) => CollisionKind::DisruptiveFlag,
        (false, true) if disrupts(b) => CollisionKind::DisruptiveFlag,
        _ => CollisionKind::PayloadConflict,
    }
}

/// Inbound packets that occupy sequence space: data, RST or FIN.
fn collision_candidate(p: &PacketEvent) -> bool {
    p.dir == Direction::Inbound
        && p.checksum_valid
        && !p.icmp_unreachable
        && !p.flags.contains(TcpFlags::SYN)
        && (!p.payload.is_empty() || flagged(p))
}

/// Sequence-number collisions after the handshake. For each sequence number
/// the first arriving packet is compared with every later, distinct one;
/// byte-identical retransmissions are not collisions.
pub fn find_collisions(flow: &TcpFlow) -> Vec<CollisionEvent> {
    let Some(start) = flow.handshake_at else {
        return Vec::new();
    };
    let mut by_seq: BTreeMap<u32, Vec<&PacketEvent>> = BTreeMap::new();
    for p in flow.events[start + 1..].iter().filter(|p| collision_candidate(p)) {
        let variants = by_seq.entry(p.seq).or_default();
        if !variants
            .iter()
            .any(|v| v.payload == p.payload && v.flags == p.flags)
        {
            variants.push(p);
        }
    }
    let mut out = Vec::new();
    for (seq, variants) in by_seq {
        let first = variants[0];
        for second in &variants[1..] {
            out.push(CollisionEvent {
                seq,
                first: first.clone(),
                second: (*second).clone(),
                kind: collision_kind(first, second),
            });
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub const CLIENT: &str = "10.8.0.2:40000";
    pub const SERVER: &str = "93.184.216.34:80";

    pub fn pkt(ts: u64, dir: Direction, flags: TcpFlags, seq: u32, payload: &[u8]) -> PacketEvent {
        let (src, dst) = match dir {
            Direction::Outbound => (CLIENT, SERVER),
            Direction::Inbound => (SERVER, CLIENT),
        };
        PacketEvent {
            ts_ms: ts,
            dir,
            src: src.parse().unwrap(),
            dst: dst.parse().unwrap(),
            flags,
            seq,
            ack: 0,
            payload: payload.to_vec(),
            checksum_valid: true,
            icmp_unreachable: false,
        }
    }

    pub fn handshake() -> Vec<PacketEvent> {
        use Direction::*;
        vec![
            pkt(0, Outbound, TcpFlags::SYN, 100, b""),
            pkt(10, Inbound, TcpFlags::SYN | TcpFlags::ACK, 5000, b""),
            pkt(11, Outbound, TcpFlags::ACK, 101, b""),
            pkt(12, Outbound, TcpFlags::PSH | TcpFlags::ACK, 101, b"GET / HTTP/1.1\r\n\r\n"),
        ]
    }

    #[test]
    fn full_handshake_one_flow() {
        let mut ps = handshake();
        ps.push(pkt(20, Direction::Inbound, TcpFlags::ACK | TcpFlags::PSH, 5001, b"HTTP/1.1 200 OK\r\n\r\nhi"));
        let flows = reassemble_flows(&ps);
        assert_eq!(flows.len(), 1);
        assert!(flows[0].handshake_complete);
        assert_eq!(flows[0].syn_response, SynResponse::SynAck);
        assert!(find_collisions(&flows[0]).is_empty());
    }

    #[test]
    fn syn_answered_by_rst_or_icmp() {
        let ps = vec![
            pkt(0, Direction::Outbound, TcpFlags::SYN, 1, b""),
            pkt(5, Direction::Inbound, TcpFlags::RST | TcpFlags::ACK, 0, b""),
        ];
        let f = &reassemble_flows(&ps)[0];
        assert_eq!(f.syn_response, SynResponse::Rst);
        assert!(!f.handshake_complete);

        let mut icmp = pkt(5, Direction::Inbound, TcpFlags::empty(), 0, b"");
        icmp.icmp_unreachable = true;
        let ps = vec![pkt(0, Direction::Outbound, TcpFlags::SYN, 1, b""), icmp];
        assert_eq!(reassemble_flows(&ps)[0].syn_response, SynResponse::IcmpUnreachable);
    }

    #[test]
    fn stray_packets_form_flow_without_syn() {
        let ps = vec![pkt(0, Direction::Inbound, TcpFlags::ACK, 9, b"x")];
        let f = &reassemble_flows(&ps)[0];
        assert!(!f.has_syn);
        assert_eq!(f.syn_response, SynResponse::None);
    }

    #[test]
    fn rst_against_data_is_disruptive() {
        let mut ps = handshake();
        ps.push(pkt(20, Direction::Inbound, TcpFlags::ACK | TcpFlags::PSH, 5001, b"HTTP/1.1 200 OK\r\n"));
        ps.push(pkt(21, Direction::Inbound, TcpFlags::RST, 5001, b""));
        let c = find_collisions(&reassemble_flows(&ps)[0]);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].kind, CollisionKind::DisruptiveFlag);
        assert_eq!(c[0].seq, 5001);
    }

    #[test]
    fn differing_payloads_conflict() {
        let mut ps = handshake();
        ps.push(pkt(20, Direction::Inbound, TcpFlags::ACK, 5001, b"aaaa"));
        ps.push(pkt(21, Direction::Inbound, TcpFlags::ACK, 5001, b"bbbb"));
        let c = find_collisions(&reassemble_flows(&ps)[0]);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].kind, CollisionKind::PayloadConflict);
    }

    #[test]
    fn identical_retransmission_is_not_a_collision() {
        let mut ps = handshake();
        ps.push(pkt(20, Direction::Inbound, TcpFlags::ACK, 5001, b"same"));
        ps.push(pkt(220, Direction::Inbound, TcpFlags::ACK, 5001, b"same"));
        assert!(find_collisions(&reassemble_flows(&ps)[0]).is_empty());
    }

    #[test]
    fn fin_with_payload_is_a_payload_conflict() {
        let mut ps = handshake();
        ps.push(pkt(20, Direction::Inbound, TcpFlags::FIN | TcpFlags::ACK, 5001, b"HTTP/1.1 403"));
        ps.push(pkt(21, Direction::Inbound, TcpFlags::ACK, 5001, b"HTTP/1.1 200"));
        let c = find_collisions(&reassemble_flows(&ps)[0]);
        assert_eq!(c[0].kind, CollisionKind::PayloadConflict);
        let mut ps = handshake();
        ps.push(pkt(20, Direction::Inbound, TcpFlags::FIN | TcpFlags::ACK, 5001, b""));
        ps.push(pkt(21, Direction::Inbound, TcpFlags::ACK, 5001, b"HTTP/1.1 200"));
        assert_eq!(find_collisions(&reassemble_flows(&ps)[0])[0].kind, CollisionKind::DisruptiveFlag);
    }

    #[test]
    fn double_rst_is_both_flagged() {
        let mut ps = handshake();
        ps.push(pkt(20, Direction::Inbound, TcpFlags::RST, 5001, b""));
        ps.push(pkt(21, Direction::Inbound, TcpFlags::RST | TcpFlags::ACK, 5001, b""));
        assert_eq!(find_collisions(&reassemble_flows(&ps)[0])[0].kind, CollisionKind::BothFlagged);
    }

    #[test]
    fn k_variants_give_k_minus_one_pairs() {
        let mut ps = handshake();
        for (i, body) in [b"a", b"b", b"c", b"b"].iter().enumerate() {
            ps.push(pkt(20 + i as u64, Direction::Inbound, TcpFlags::ACK, 5001, *body));
        }
        let c = find_collisions(&reassemble_flows(&ps)[0]);
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|e| e.first.payload == b"a"));
    }

    #[test]
    fn collisions_need_handshake_and_valid_checksums() {
        let mut ps = vec![pkt(0, Direction::Outbound, TcpFlags::SYN, 100, b"")];
        ps.push(pkt(20, Direction::Inbound, TcpFlags::ACK, 5001, b"a"));
        ps.push(pkt(21, Direction::Inbound, TcpFlags::RST, 5001, b""));
        assert!(find_collisions(&reassemble_flows(&ps)[0]).is_empty());

        let mut ps = handshake();
        ps.push(pkt(20, Direction::Inbound, TcpFlags::ACK, 5001, b"a"));
        let mut bad = pkt(21, Direction::Inbound, TcpFlags::RST, 5001, b"");
        bad.checksum_valid = false;
        ps.push(bad);
        assert!(find_collisions(&reassemble_flows(&ps)[0]).is_empty());
    }

    #[test]
    fn pure_acks_do_not_collide_with_fin() {
        let mut ps = handshake();
        ps.push(pkt(20, Direction::Inbound, TcpFlags::ACK, 5001, b"data"));
        ps.push(pkt(21, Direction::Inbound, TcpFlags::ACK, 5005, b""));
        ps.push(pkt(22, Direction::Inbound, TcpFlags::FIN | TcpFlags::ACK, 5005, b""));
        assert!(find_collisions(&reassemble_flows(&ps)[0]).is_empty());
    }
}
