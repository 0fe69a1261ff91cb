//! A small corpus crossing every vantage packet pattern with every control
//! observation, so that each cell of the anomaly matrix is exercised.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};

use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{exchange, http_response, normal_fetch, FlowBuilder};
use super::templates;
use super::{dns_ok, dns_rcode};
use crate::model::{Measurement, Rcode, Resolver, TcpFlags, VantageKind, VantageMeta};

/// What the vantage's packet trace contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VantageSetup {
    NoPackets,
    SynUnanswered,
    SynRefused,
    SynUnreachable,
    CleanFetch,
    RstInjection,
    FinInjection,
    /// Injected response carrying a known block page.
    BlockpageInjection,
    /// Injected complete response that no signature recognizes.
    UnknownPageInjection,
    /// Forged RST racing a legitimate FIN at the same sequence number.
    DoubleFlagCollision,
}

impl VantageSetup {
    pub const ALL: [VantageSetup; 10] = [
        VantageSetup::NoPackets,
        VantageSetup::SynUnanswered,
        VantageSetup::SynRefused,
        VantageSetup::SynUnreachable,
        VantageSetup::CleanFetch,
        VantageSetup::RstInjection,
        VantageSetup::FinInjection,
        VantageSetup::BlockpageInjection,
        VantageSetup::UnknownPageInjection,
        VantageSetup::DoubleFlagCollision,
    ];
}

/// What the control node observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlSetup {
    /// No control measurement of the URL exists.
    Absent,
    HttpOk,
    Refused,
    Unreachable,
    Timeout,
    DnsError,
}

impl ControlSetup {
    pub const ALL: [ControlSetup; 6] = [
        ControlSetup::Absent,
        ControlSetup::HttpOk,
        ControlSetup::Refused,
        ControlSetup::Unreachable,
        ControlSetup::Timeout,
        ControlSetup::DnsError,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellCase {
    pub measurement_id: String,
    pub vantage: VantageSetup,
    pub control: ControlSetup,
}

#[derive(Debug, Clone)]
pub struct CellSuite {
    pub corpus: Vec<Measurement>,
    pub controls: Vec<Measurement>,
    pub cases: Vec<CellCase>,
    pub asn_tsv: String,
}

const ORIGIN: [u8; 3] = [20, 1, 0];
const VANTAGE_IP: Ipv4Addr = Ipv4Addr::new(20, 2, 0, 10);
const CONTROL_IP: Ipv4Addr = Ipv4Addr::new(20, 3, 0, 10);

/// One vantage measurement (country IR) per (vantage, control) combination.
pub fn cell_suite(seed: u64) -> CellSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let day = Utc.with_ymd_and_hms(2024, 2, 1, 12, 0, 0).single().expect("valid time");
    let mut corpus = Vec::new();
    let mut controls = Vec::new();
    let mut cases = Vec::new();
    let mut n = 0u8;
    for v in VantageSetup::ALL {
        for c in ControlSetup::ALL {
            n += 1;
            let host = format!("cell-{n:03}.test");
            let url = format!("http://{host}/");
            let server = IpAddr::V4(Ipv4Addr::new(ORIGIN[0], ORIGIN[1], ORIGIN[2], n));
            let page = templates::origin_page(&mut rng, &host);
            let id = format!("cell{n:03}");
            let t0 = day.timestamp_millis() as u64;
            let mut fb = FlowBuilder::new(
                SocketAddr::new(IpAddr::V4(VANTAGE_IP), 40_000 + u16::from(n)),
                SocketAddr::new(server, 80),
                t0,
                50,
                rng.gen(),
                rng.gen(),
            );
            let mut http = None;
            let packets = match v {
                VantageSetup::NoPackets => Vec::new(),
                VantageSetup::SynUnanswered => {
                    fb.syn();
                    fb.syn_retry();
                    fb.finish()
                }
                VantageSetup::SynRefused => {
                    fb.syn();
                    fb.refuse();
                    fb.finish()
                }
                VantageSetup::SynUnreachable => {
                    fb.syn();
                    fb.unreachable();
                    fb.finish()
                }
                VantageSetup::CleanFetch => {
                    http = Some(exchange(200, page.clone(), &url));
                    normal_fetch(fb, &host, "/", &http_response(200, &page))
                }
                VantageSetup::RstInjection | VantageSetup::FinInjection => {
                    let flags = if v == VantageSetup::RstInjection {
                        TcpFlags::RST
                    } else {
                        TcpFlags::FIN | TcpFlags::ACK
                    };
                    fb.handshake();
                    fb.request(&host, "/");
                    let seq = fb.server_seq();
                    fb.inject(seq, flags, b"", 5);
                    fb.server_data(&http_response(200, &page), 30);
                    fb.close();
                    fb.finish()
                }
                VantageSetup::BlockpageInjection | VantageSetup::UnknownPageInjection => {
                    let body = if v == VantageSetup::BlockpageInjection {
                        templates::block_page(&mut rng, "ir-iframe-10.10.34.x", &url)
                    } else {
                        b"<html><body><p>Service temporarily unavailable</p></body></html>".to_vec()
                    };
                    fb.handshake();
                    fb.request(&host, "/");
                    let seq = fb.server_seq();
                    fb.inject(seq, TcpFlags::PSH | TcpFlags::ACK, &http_response(403, &body), 5);
                    fb.server_data(&http_response(200, &page), 30);
                    fb.close();
                    http = Some(exchange(403, body, &url));
                    fb.finish()
                }
                VantageSetup::DoubleFlagCollision => {
                    fb.handshake();
                    fb.request(&host, "/");
                    let seq = fb.server_seq();
                    fb.inject(seq, TcpFlags::RST, b"", 5);
                    fb.inject(seq, TcpFlags::FIN | TcpFlags::ACK, b"", 30);
                    fb.finish()
                }
            };
            corpus.push(Measurement {
                measurement_id: id.clone(),
                timestamp: day,
                vantage: VantageMeta {
                    vantage_id: "vp-ir-1".into(),
                    country: "IR".parse().expect("static code"),
                    asn: 30_002,
                    kind: VantageKind::Vpn,
                },
                url: url.clone(),
                dns_local: dns_ok(&host, Resolver::Local, vec![server]),
                dns_public: None,
                packets,
                http,
                tls_chain: None,
                traceroute: None,
                test_list: None,
            });

            if c != ControlSetup::Absent {
                let mut cfb = FlowBuilder::new(
                    SocketAddr::new(IpAddr::V4(CONTROL_IP), 50_000 + u16::from(n)),
                    SocketAddr::new(server, 80),
                    t0 + 1000,
                    20,
                    rng.gen(),
                    rng.gen(),
                );
                let mut chttp = None;
                let mut dns = dns_ok(&host, Resolver::Local, vec![server]);
                let cpackets = match c {
                    ControlSetup::HttpOk => {
                        chttp = Some(exchange(200, page.clone(), &url));
                        normal_fetch(cfb, &host, "/", &http_response(200, &page))
                    }
                    ControlSetup::Refused => {
                        cfb.syn();
                        cfb.refuse();
                        cfb.finish()
                    }
                    ControlSetup::Unreachable => {
                        cfb.syn();
                        cfb.unreachable();
                        cfb.finish()
                    }
                    ControlSetup::Timeout => {
                        cfb.syn();
                        cfb.syn_retry();
                        cfb.finish()
                    }
                    ControlSetup::DnsError => {
                        dns = dns_rcode(&host, Resolver::Local, Rcode::NxDomain);
                        Vec::new()
                    }
                    ControlSetup::Absent => unreachable!(),
                };
                controls.push(Measurement {
                    measurement_id: format!("ctl{n:03}"),
                    timestamp: day,
                    vantage: VantageMeta {
                        vantage_id: "ctl-1".into(),
                        country: "US".parse().expect("static code"),
                        asn: 30_003,
                        kind: VantageKind::Control,
                    },
                    url,
                    dns_local: dns,
                    dns_public: None,
                    packets: cpackets,
                    http: chttp,
                    tls_chain: None,
                    traceroute: None,
                    test_list: None,
                });
            }
            cases.push(CellCase {
                measurement_id: id,
                vantage: v,
                control: c,
            });
        }
    }
    CellSuite {
        corpus,
        controls,
        cases,
        asn_tsv: "20.1.0.0/24\t30001\n20.2.0.0/24\t30002\n20.3.0.0/24\t30003\n".into(),
    }
}
