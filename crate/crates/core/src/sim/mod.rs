//! Deterministic generator of labeled measurement corpora.
//!
//! Every scenario produces the raw artifacts (DNS answers, packets, HTTP
//! exchanges) that define it, plus matching control observations on the same
//! day, and a ground-truth label per measurement. Identical configuration
//! yields byte-identical output.

mod cells;
pub mod checks;
mod net;
mod score;
mod templates;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use ipnet::Ipv4Net;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cells::{cell_suite, CellCase, CellSuite, ControlSetup, VantageSetup};
pub use score::{render_scores, score, ScoreError, TechniqueScore};

use crate::model::{
    CountryCode, DnsObservation, DnsResponse, HttpExchange, Measurement, PacketEvent, Rcode,
    Resolver, VantageKind, VantageMeta,
};
use crate::tcp::{Cell, ControlStatus, SynFailure};
use net::{exchange, http_response, normal_fetch, FlowBuilder};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("configuration parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Clean,
    CdnVariation,
    SiteOutage,
    LoadBalancerRetransmit,
    DnsNxdomainCensor,
    DnsNonroutableCensor,
    DnsRedirectCensor,
    OnpathRstInjection,
    OnpathFinInjection,
    BlockpageInjection,
    SynRstIpblock,
    #[serde(rename = "geoblock_403_451")]
    Geoblock403451,
    /// Only the public resolver's answer is forged; the local one is clean.
    DnsPublicPoison,
}

impl Scenario {
    pub const ALL: [Scenario; 13] = [
        Scenario::Clean,
        Scenario::CdnVariation,
        Scenario::SiteOutage,
        Scenario::LoadBalancerRetransmit,
        Scenario::DnsNxdomainCensor,
        Scenario::DnsNonroutableCensor,
        Scenario::DnsRedirectCensor,
        Scenario::OnpathRstInjection,
        Scenario::OnpathFinInjection,
        Scenario::BlockpageInjection,
        Scenario::SynRstIpblock,
        Scenario::Geoblock403451,
        Scenario::DnsPublicPoison,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Clean => "clean",
            Scenario::CdnVariation => "cdn_variation",
            Scenario::SiteOutage => "site_outage",
            Scenario::LoadBalancerRetransmit => "load_balancer_retransmit",
            Scenario::DnsNxdomainCensor => "dns_nxdomain_censor",
            Scenario::DnsNonroutableCensor => "dns_nonroutable_censor",
            Scenario::DnsRedirectCensor => "dns_redirect_censor",
            Scenario::OnpathRstInjection => "onpath_rst_injection",
            Scenario::OnpathFinInjection => "onpath_fin_injection",
            Scenario::BlockpageInjection => "blockpage_injection",
            Scenario::SynRstIpblock => "syn_rst_ipblock",
            Scenario::Geoblock403451 => "geoblock_403_451",
            Scenario::DnsPublicPoison => "dns_public_poison",
        }
    }
}

/// Number of vantage measurements per scenario.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioCounts {
    pub clean: u32,
    pub cdn_variation: u32,
    pub site_outage: u32,
    pub load_balancer_retransmit: u32,
    pub dns_nxdomain_censor: u32,
    pub dns_nonroutable_censor: u32,
    pub dns_redirect_censor: u32,
    pub onpath_rst_injection: u32,
    pub onpath_fin_injection: u32,
    pub blockpage_injection: u32,
    pub syn_rst_ipblock: u32,
    pub geoblock_403_451: u32,
    pub dns_public_poison: u32,
}

impl ScenarioCounts {
    pub fn get(&self, s: Scenario) -> u32 {
        match s {
            Scenario::Clean => self.clean,
            Scenario::CdnVariation => self.cdn_variation,
            Scenario::SiteOutage => self.site_outage,
            Scenario::LoadBalancerRetransmit => self.load_balancer_retransmit,
            Scenario::DnsNxdomainCensor => self.dns_nxdomain_censor,
            Scenario::DnsNonroutableCensor => self.dns_nonroutable_censor,
            Scenario::DnsRedirectCensor => self.dns_redirect_censor,
            Scenario::OnpathRstInjection => self.onpath_rst_injection,
            Scenario::OnpathFinInjection => self.onpath_fin_injection,
            Scenario::BlockpageInjection => self.blockpage_injection,
            Scenario::SynRstIpblock => self.syn_rst_ipblock,
            Scenario::Geoblock403451 => self.geoblock_403_451,
            Scenario::DnsPublicPoison => self.dns_public_poison,
        }
    }

    pub fn set(&mut self, s: Scenario, n: u32) {
        let slot = match s {
            Scenario::Clean => &mut self.clean,
            Scenario::CdnVariation => &mut self.cdn_variation,
            Scenario::SiteOutage => &mut self.site_outage,
            Scenario::LoadBalancerRetransmit => &mut self.load_balancer_retransmit,
            Scenario::DnsNxdomainCensor => &mut self.dns_nxdomain_censor,
            Scenario::DnsNonroutableCensor => &mut self.dns_nonroutable_censor,
            Scenario::DnsRedirectCensor => &mut self.dns_redirect_censor,
            Scenario::OnpathRstInjection => &mut self.onpath_rst_injection,
            Scenario::OnpathFinInjection => &mut self.onpath_fin_injection,
            Scenario::BlockpageInjection => &mut self.blockpage_injection,
            Scenario::SynRstIpblock => &mut self.syn_rst_ipblock,
            Scenario::Geoblock403451 => &mut self.geoblock_403_451,
            Scenario::DnsPublicPoison => &mut self.dns_public_poison,
        };
        *slot = n;
    }

    pub fn only(s: Scenario, n: u32) -> Self {
        let mut c = Self::default();
        c.set(s, n);
        c
    }

    pub fn total(&self) -> u64 {
        Scenario::ALL.iter().map(|s| u64::from(self.get(*s))).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub start_date: NaiveDate,
    pub days: u32,
    pub countries: Vec<CountryCode>,
    pub vantages_per_country: u32,
    /// Size of each country's pool of clean URLs that are re-tested over
    /// time; 0 gives every clean measurement group its own URL.
    pub urls_per_country: u32,
    /// Measurements per URL (same country, different days). Values ≥ 2 keep
    /// seeded anomalies from being discounted as one-offs.
    pub repeats: u32,
    pub control_nodes: u32,
    pub control_country: CountryCode,
    /// Largest number of distinct ASes a CDN-hosted URL resolves to at the controls.
    pub cdn_max_ases: u32,
    /// P(n ASes) ∝ cdn_decay^(n−1) for n in 1..=cdn_max_ases.
    pub cdn_decay: f64,
    /// Minimum control-side AS diversity of each redirect group.
    pub redirect_group_size: u32,
    pub public_resolver: bool,
    /// Share of local-resolver censorship that also poisons the public resolver.
    pub public_poison_share: f64,
    /// Share of URLs tagged as belonging to the global test list.
    pub global_list_share: f64,
    /// When false, no packet traces are emitted (DNS-only studies).
    pub emit_packets: bool,
    pub scenarios: ScenarioCounts,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let cc = |s: &str| s.parse().expect("static code");
        Self {
            seed: 1,
            start_date: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            days: 28,
            countries: ["IR", "IN", "TR", "RU", "KR", "SA", "ID", "PK"].map(cc).to_vec(),
            vantages_per_country: 2,
            urls_per_country: 0,
            repeats: 2,
            control_nodes: 2,
            control_country: cc("US"),
            cdn_max_ases: 15,
            cdn_decay: 0.4,
            redirect_group_size: 12,
            public_resolver: true,
            public_poison_share: 0.3,
            global_list_share: 0.8,
            emit_packets: true,
            scenarios: ScenarioCounts {
                clean: 200,
                cdn_variation: 60,
                site_outage: 20,
                load_balancer_retransmit: 20,
                dns_nxdomain_censor: 20,
                dns_nonroutable_censor: 20,
                dns_redirect_censor: 48,
                onpath_rst_injection: 20,
                onpath_fin_injection: 20,
                blockpage_injection: 20,
                syn_rst_ipblock: 20,
                geoblock_403_451: 20,
                dns_public_poison: 10,
            },
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.countries.is_empty() {
            return bad("countries must not be empty");
        }
        if self.days == 0 || self.repeats == 0 || self.control_nodes == 0 || self.vantages_per_country == 0 {
            return bad("days, repeats, control_nodes and vantages_per_country must be ≥ 1");
        }
        if !(1..=CDN_POOL).contains(&self.cdn_max_ases) {
            return bad("cdn_max_ases must be within 1..=48");
        }
        if !(self.cdn_decay > 0.0 && self.cdn_decay <= 1.0) {
            return bad("cdn_decay must be in (0, 1]");
        }
        if !(1..=ORIGIN_POOL / 4).contains(&self.redirect_group_size) {
            return bad("redirect_group_size must be within 1..=64");
        }
        for (name, v) in [
            ("public_poison_share", self.public_poison_share),
            ("global_list_share", self.global_list_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Per-measurement labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthLabel {
    pub measurement_id: String,
    pub scenario: Scenario,
    /// Whether the local resolver's answer was forged; `None` when DNS
    /// detection does not apply to the scenario.
    pub dns: Option<bool>,
    pub tcp: Cell,
    /// Signature id of the block page the vantage received, if any.
    pub blockpage: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub corpus: Vec<Measurement>,
    pub controls: Vec<Measurement>,
    pub truth: Vec<TruthLabel>,
    /// `prefix<TAB>asn` lines covering every generated address.
    pub asn_tsv: String,
    /// `url<TAB>category` lines.
    pub categories_tsv: String,
}

pub const TAXONOMY: &[(&str, &str)] = &[
    ("ANON", "Anonymization and circumvention"),
    ("COMM", "E-commerce"),
    ("ENT", "Entertainment"),
    ("GMB", "Gambling"),
    ("HOST", "Hosting and blogging"),
    ("HUMR", "Human rights"),
    ("LGBT", "LGBTQ+"),
    ("NEWS", "News media"),
    ("POLR", "Political criticism"),
    ("PORN", "Pornography"),
    ("REL", "Religion"),
    ("SRCH", "Search engines"),
    ("SOCI", "Social networking"),
];

pub fn taxonomy_tsv() -> String {
    TAXONOMY.iter().map(|(c, n)| format!("{c}\t{n}\n")).collect()
}

impl Generated {
    /// Writes corpus.jsonl, control.jsonl, truth.jsonl, asn.tsv,
    /// categories.tsv and taxonomy.tsv into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        crate::model::write_corpus(dir.join("corpus.jsonl"), &self.corpus)?;
        crate::model::write_corpus(dir.join("control.jsonl"), &self.controls)?;
        let mut t = io::BufWriter::new(fs::File::create(dir.join("truth.jsonl"))?);
        for l in &self.truth {
            serde_json::to_writer(&mut t, l)?;
            t.write_all(b"\n")?;
        }
        t.flush()?;
        fs::write(dir.join("asn.tsv"), &self.asn_tsv)?;
        fs::write(dir.join("categories.tsv"), &self.categories_tsv)?;
        fs::write(dir.join("taxonomy.tsv"), taxonomy_tsv())
    }
}

pub fn read_truth(path: impl AsRef<Path>) -> io::Result<Vec<TruthLabel>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(io::Error::from))
        .collect()
}

const ORIGIN_POOL: u32 = 256;
const CDN_POOL: u32 = 48;
const EDGE_HOSTS: u32 = 65_000;

struct Allocator {
    next: u32,
    asn: u32,
    table: Vec<(Ipv4Net, u32)>,
}

impl Allocator {
    fn new() -> Self {
        Self {
            next: u32::from(Ipv4Addr::new(20, 0, 0, 0)),
            asn: 30_000,
            table: Vec::new(),
        }
    }

    fn block(&mut self, len: u8) -> AsBlock {
        let size = 1u32 << (32 - len);
        self.next = self.next.div_ceil(size) * size;
        let net = Ipv4Net::new(self.next.into(), len).expect("valid prefix length");
        self.next += size;
        self.asn += 1;
        self.table.push((net, self.asn));
        AsBlock { asn: self.asn, net }
    }

    fn tsv(&self) -> String {
        self.table.iter().map(|(n, a)| format!("{n}\t{a}\n")).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct AsBlock {
    asn: u32,
    net: Ipv4Net,
}

impl AsBlock {
    fn host(&self, k: u32) -> IpAddr {
        IpAddr::V4((u32::from(self.net.network()) + 1 + k % (self.size() - 2)).into())
    }

    fn size(&self) -> u32 {
        1u32 << (32 - self.net.prefix_len())
    }
}

#[derive(Debug, Clone)]
struct Node {
    meta: VantageMeta,
    ip: IpAddr,
}

struct CountryWorld {
    cc: CountryCode,
    vantages: Vec<Node>,
    censor: AsBlock,
    edges: Vec<AsBlock>,
    edge_next: u32,
    forged_next: u32,
    pool: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ControlBehavior {
    HttpOk,
    Refused,
    Unreachable,
}

#[derive(Debug, Clone)]
struct UrlSpec {
    host: String,
    answers: Vec<IpAddr>,
    behavior: ControlBehavior,
    page: Vec<u8>,
    list: String,
}

struct Gen<'a> {
    cfg: &'a ScenarioConfig,
    rng: ChaCha8Rng,
    alloc: Allocator,
    origins: Vec<AsBlock>,
    cdns: Vec<AsBlock>,
    countries: Vec<CountryWorld>,
    control_nodes: Vec<Node>,
    urls: BTreeMap<String, UrlSpec>,
    categories: BTreeMap<String, &'static str>,
    control_days: BTreeSet<(String, u32)>,
    url_seq: u32,
    out: Vec<(Measurement, TruthLabel)>,
}

fn dns_ok(host: &str, resolver: Resolver, answers: Vec<IpAddr>) -> DnsObservation {
    DnsObservation {
        query_name: host.to_string(),
        resolver,
        responses: vec![DnsResponse {
            rcode: Rcode::NoError,
            answers,
            arrival_order: 0,
        }],
    }
}

fn dns_rcode(host: &str, resolver: Resolver, rcode: Rcode) -> DnsObservation {
    DnsObservation {
        query_name: host.to_string(),
        resolver,
        responses: vec![DnsResponse {
            rcode,
            answers: vec![],
            arrival_order: 0,
        }],
    }
}

/// Sizes of URL groups: `repeats` measurements per URL, never leaving a
/// single measurement alone when repeats ≥ 2.
fn split_groups(n: u32, repeats: u32) -> Vec<u32> {
    if repeats <= 1 {
        return vec![1; n as usize];
    }
    let mut out = vec![repeats; (n / repeats) as usize];
    match n % repeats {
        0 => {}
        1 if !out.is_empty() => *out.last_mut().expect("non-empty") += 1,
        r => out.push(r),
    }
    out
}

const NON_ROUTABLE_ANSWERS: [[u8; 4]; 4] = [[10, 10, 34, 34], [127, 0, 0, 1], [0, 0, 0, 0], [192, 168, 1, 1]];

impl<'a> Gen<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut alloc = Allocator::new();
        let origins: Vec<AsBlock> = (0..ORIGIN_POOL).map(|_| alloc.block(24)).collect();
        let cdns: Vec<AsBlock> = (0..CDN_POOL).map(|_| alloc.block(24)).collect();
        let mut countries = Vec::new();
        for &cc in &cfg.countries {
            let vantages = (0..cfg.vantages_per_country)
                .map(|i| {
                    let b = alloc.block(24);
                    Node {
                        meta: VantageMeta {
                            vantage_id: format!("vp-{}-{}", cc.as_str().to_ascii_lowercase(), i + 1),
                            country: cc,
                            asn: b.asn,
                            kind: if i % 3 == 2 { VantageKind::Vod } else { VantageKind::Vpn },
                        },
                        ip: b.host(9),
                    }
                })
                .collect();
            let censor = alloc.block(20);
            countries.push(CountryWorld {
                cc,
                vantages,
                censor,
                edges: Vec::new(),
                edge_next: 0,
                forged_next: 0,
                pool: Vec::new(),
            });
        }
        let control_nodes = (0..cfg.control_nodes)
            .map(|i| {
                let b = alloc.block(24);
                Node {
                    meta: VantageMeta {
                        vantage_id: format!("ctl-{}", i + 1),
                        country: cfg.control_country,
                        asn: b.asn,
                        kind: VantageKind::Control,
                    },
                    ip: b.host(9),
                }
            })
            .collect();
        Self {
            cfg,
            rng,
            alloc,
            origins,
            cdns,
            countries,
            control_nodes,
            urls: BTreeMap::new(),
            categories: BTreeMap::new(),
            control_days: BTreeSet::new(),
            url_seq: 0,
            out: Vec::new(),
        }
    }

    fn new_url(&mut self, answers: Vec<IpAddr>, behavior: ControlBehavior) -> String {
        self.url_seq += 1;
        let host = format!("www.site-{:05}.test", self.url_seq);
        let url = format!("http://{host}/");
        let page = templates::origin_page(&mut self.rng, &host);
        let list = if self.rng.gen_bool(self.cfg.global_list_share) {
            "global"
        } else {
            "local"
        };
        let cat = TAXONOMY.choose(&mut self.rng).expect("non-empty").0;
        self.categories.insert(url.clone(), cat);
        self.urls.insert(
            url.clone(),
            UrlSpec {
                host,
                answers,
                behavior,
                page,
                list: list.to_string(),
            },
        );
        url
    }

    fn origin_ip(&mut self) -> IpAddr {
        let o = *self.origins.choose(&mut self.rng).expect("non-empty pool");
        o.host(self.rng.gen_range(0..250))
    }

    fn edge_ip(&mut self, ci: usize) -> IpAddr {
        let c = &mut self.countries[ci];
        let k = c.edge_next;
        c.edge_next += 1;
        let block = (k / EDGE_HOSTS) as usize;
        while c.edges.len() <= block {
            let b = self.alloc.block(16);
            c.edges.push(b);
        }
        c.edges[block].host(k % EDGE_HOSTS)
    }

    fn cdn_as_count(&mut self) -> usize {
        let max = self.cfg.cdn_max_ases as i32;
        let weights: Vec<f64> = (0..max).map(|i| self.cfg.cdn_decay.powi(i)).collect();
        let total: f64 = weights.iter().sum();
        let mut x = self.rng.gen::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            if x < *w {
                return i + 1;
            }
            x -= w;
        }
        max as usize
    }

    /// Emits one vantage measurement. Packets and public DNS are built by
    /// `body`, given the vantage node, start time in ms and URL spec.
    #[allow(clippy::too_many_arguments)]
    fn emit(
        &mut self,
        scenario: Scenario,
        ci: usize,
        url: &str,
        local: DnsObservation,
        public_forged: Option<DnsObservation>,
        build: impl FnOnce(&mut ChaCha8Rng, FlowBuilder, &UrlSpec) -> (Vec<PacketEvent>, Option<HttpExchange>),
        server_ip: Option<IpAddr>,
        truth: (Option<bool>, Cell, Option<String>),
    ) {
        let day = self.rng.gen_range(0..self.cfg.days);
        let secs = self.rng.gen_range(0..86_400);
        let ts = Utc.from_utc_datetime(&self.cfg.start_date.and_hms_opt(0, 0, 0).expect("midnight"))
            + Duration::days(i64::from(day))
            + Duration::seconds(secs);
        let node = self.countries[ci]
            .vantages
            .choose(&mut self.rng)
            .expect("vantages configured")
            .clone();
        let spec = self.urls[url].clone();
        let public = if self.cfg.public_resolver {
            Some(public_forged.unwrap_or_else(|| dns_ok(&spec.host, Resolver::Public, vec![spec.answers[0]])))
        } else {
            None
        };
        let (packets, http) = match server_ip {
            Some(ip) => {
                let client = SocketAddr::new(node.ip, self.rng.gen_range(32_768..61_000));
                let rtt = self.rng.gen_range(20..180);
                let fb = FlowBuilder::new(
                    client,
                    SocketAddr::new(ip, 80),
                    ts.timestamp_millis() as u64,
                    rtt,
                    self.rng.gen(),
                    self.rng.gen(),
                );
                let (p, h) = build(&mut self.rng, fb, &spec);
                (if self.cfg.emit_packets { p } else { Vec::new() }, h)
            }
            None => (Vec::new(), None),
        };
        self.control_days.insert((url.to_string(), day));
        let m = Measurement {
            measurement_id: String::new(),
            timestamp: ts,
            vantage: node.meta,
            url: url.to_string(),
            dns_local: local,
            dns_public: public,
            packets,
            http,
            tls_chain: None,
            traceroute: None,
            test_list: Some(spec.list.clone()),
        };
        let (dns, tcp, blockpage) = truth;
        self.out.push((
            m,
            TruthLabel {
                measurement_id: String::new(),
                scenario,
                dns,
                tcp,
                blockpage,
            },
        ));
    }

    fn public_poison(&mut self, host: &str, style: Rcode, forged: Option<IpAddr>) -> Option<DnsObservation> {
        if !self.rng.gen_bool(self.cfg.public_poison_share) {
            return None;
        }
        Some(match forged {
            Some(ip) => dns_ok(host, Resolver::Public, vec![ip]),
            None => dns_rcode(host, Resolver::Public, style),
        })
    }

    fn scenario(&mut self, scenario: Scenario, offset: usize) {
        let n = self.cfg.scenarios.get(scenario);
        if n == 0 {
            return;
        }
        if scenario == Scenario::DnsRedirectCensor {
            return self.redirect(n, offset);
        }
        let nc = self.countries.len();
        for (g, size) in split_groups(n, self.cfg.repeats).into_iter().enumerate() {
            let ci = (g + offset) % nc;
            match scenario {
                Scenario::Clean if self.cfg.urls_per_country > 0 => {
                    for _ in 0..size {
                        let url = self.pool_url(ci);
                        self.clean_like(Scenario::Clean, ci, &url);
                    }
                }
                _ => {
                    let url = self.scenario_url(scenario);
                    for _ in 0..size {
                        self.one(scenario, ci, &url);
                    }
                }
            }
        }
    }

    fn pool_url(&mut self, ci: usize) -> String {
        let want = self.cfg.urls_per_country as usize;
        if self.countries[ci].pool.len() < want {
            let ip = self.origin_ip();
            let url = self.new_url(vec![ip], ControlBehavior::HttpOk);
            self.countries[ci].pool.push(url.clone());
            return url;
        }
        self.countries[ci].pool.choose(&mut self.rng).expect("non-empty").clone()
    }

    fn scenario_url(&mut self, scenario: Scenario) -> String {
        match scenario {
            Scenario::CdnVariation => {
                let n = self.cdn_as_count();
                let picks: Vec<AsBlock> = self.cdns.choose_multiple(&mut self.rng, n).copied().collect();
                let answers = picks.iter().map(|b| b.host(self.rng.gen_range(0..250))).collect();
                self.new_url(answers, ControlBehavior::HttpOk)
            }
            Scenario::SiteOutage => {
                let ip = self.origin_ip();
                let behavior = if self.rng.gen_bool(0.5) {
                    ControlBehavior::Refused
                } else {
                    ControlBehavior::Unreachable
                };
                self.new_url(vec![ip], behavior)
            }
            _ => {
                let ip = self.origin_ip();
                self.new_url(vec![ip], ControlBehavior::HttpOk)
            }
        }
    }

    fn clean_like(&mut self, scenario: Scenario, ci: usize, url: &str) {
        let spec = self.urls[url].clone();
        let local = dns_ok(&spec.host, Resolver::Local, vec![spec.answers[0]]);
        let public = if scenario == Scenario::DnsPublicPoison {
            Some(if self.rng.gen_bool(0.5) {
                dns_rcode(&spec.host, Resolver::Public, Rcode::NxDomain)
            } else {
                let a = NON_ROUTABLE_ANSWERS.choose(&mut self.rng).expect("non-empty");
                dns_ok(&spec.host, Resolver::Public, vec![IpAddr::from(*a)])
            })
        } else {
            None
        };
        let dns_truth = (scenario != Scenario::DnsPublicPoison).then_some(false);
        let lb = scenario == Scenario::LoadBalancerRetransmit;
        self.emit(
            scenario,
            ci,
            url,
            local,
            public,
            move |rng, mut fb, spec| {
                let resp = http_response(200, &spec.page);
                if lb {
                    fb.handshake();
                    fb.request(&spec.host, "/");
                    fb.server_data(&resp, 40);
                    for _ in 0..rng.gen_range(1..=2) {
                        fb.retransmit_last_inbound(rng.gen_range(1..30));
                    }
                    fb.client_ack();
                    fb.close();
                    (fb.finish(), Some(exchange(200, spec.page.clone(), &format!("http://{}/", spec.host))))
                } else {
                    let p = normal_fetch(fb, &spec.host, "/", &resp);
                    (p, Some(exchange(200, spec.page.clone(), &format!("http://{}/", spec.host))))
                }
            },
            Some(spec.answers[0]),
            (dns_truth, Cell::NoAnomaly, None),
        );
    }

    fn one(&mut self, scenario: Scenario, ci: usize, url: &str) {
        let spec = self.urls[url].clone();
        let host = spec.host.clone();
        let cc = self.countries[ci].cc;
        match scenario {
            Scenario::Clean | Scenario::LoadBalancerRetransmit | Scenario::DnsPublicPoison => {
                self.clean_like(scenario, ci, url)
            }
            Scenario::CdnVariation => {
                let edge = self.edge_ip(ci);
                self.emit(
                    scenario,
                    ci,
                    url,
                    dns_ok(&host, Resolver::Local, vec![edge]),
                    Some(dns_ok(&host, Resolver::Public, vec![spec.answers[0]])),
                    |_, fb, spec| {
                        let p = normal_fetch(fb, &spec.host, "/", &http_response(200, &spec.page));
                        (p, Some(exchange(200, spec.page.clone(), &format!("http://{}/", spec.host))))
                    },
                    Some(edge),
                    (Some(false), Cell::NoAnomaly, None),
                );
            }
            Scenario::SiteOutage => {
                let (fail, status) = match spec.behavior {
                    ControlBehavior::Unreachable => (SynFailure::Unreachable, ControlStatus::Unreachable),
                    _ => (SynFailure::Refused, ControlStatus::Refused),
                };
                self.emit(
                    scenario,
                    ci,
                    url,
                    dns_ok(&host, Resolver::Local, vec![spec.answers[0]]),
                    None,
                    move |_, mut fb, _| {
                        fb.syn();
                        match fail {
                            SynFailure::Refused => fb.refuse(),
                            SynFailure::Unreachable => fb.unreachable(),
                        }
                        (fb.finish(), None)
                    },
                    Some(spec.answers[0]),
                    (Some(false), Cell::HandshakeFailure { vantage: fail, control: status }, None),
                );
            }
            Scenario::DnsNxdomainCensor => {
                let public = self.public_poison(&host, Rcode::NxDomain, None);
                self.emit(
                    scenario,
                    ci,
                    url,
                    dns_rcode(&host, Resolver::Local, Rcode::NxDomain),
                    public,
                    |_, fb, _| (fb.finish(), None),
                    None,
                    (Some(true), Cell::NoConnection, None),
                );
            }
            Scenario::DnsNonroutableCensor => {
                let ip = IpAddr::from(*NON_ROUTABLE_ANSWERS.choose(&mut self.rng).expect("non-empty"));
                let public = self.public_poison(&host, Rcode::NoError, Some(ip));
                self.emit(
                    scenario,
                    ci,
                    url,
                    dns_ok(&host, Resolver::Local, vec![ip]),
                    public,
                    |_, fb, _| (fb.finish(), None),
                    None,
                    (Some(true), Cell::NoConnection, None),
                );
            }
            Scenario::OnpathRstInjection | Scenario::OnpathFinInjection => {
                let flags = if scenario == Scenario::OnpathRstInjection {
                    crate::model::TcpFlags::RST | crate::model::TcpFlags::ACK
                } else {
                    crate::model::TcpFlags::FIN | crate::model::TcpFlags::ACK
                };
                self.emit(
                    scenario,
                    ci,
                    url,
                    dns_ok(&host, Resolver::Local, vec![spec.answers[0]]),
                    None,
                    move |rng, mut fb, spec| {
                        fb.handshake();
                        fb.request(&spec.host, "/");
                        let seq = fb.server_seq();
                        fb.inject(seq, flags, b"", rng.gen_range(2..10));
                        fb.server_data(&http_response(200, &spec.page), rng.gen_range(20..60));
                        fb.close();
                        (fb.finish(), None)
                    },
                    Some(spec.answers[0]),
                    (Some(false), Cell::ConnectionDisrupted, None),
                );
            }
            Scenario::BlockpageInjection => {
                let sig = templates::signature_for(cc.as_str());
                let body = templates::block_page(&mut self.rng, sig, url);
                let status = if self.rng.gen_bool(0.5) { 200 } else { 403 };
                let with_fin = self.rng.gen_bool(0.5);
                let url_owned = url.to_string();
                self.emit(
                    scenario,
                    ci,
                    url,
                    dns_ok(&host, Resolver::Local, vec![spec.answers[0]]),
                    None,
                    move |rng, mut fb, spec| {
                        use crate::model::TcpFlags;
                        fb.handshake();
                        fb.request(&spec.host, "/");
                        let seq = fb.server_seq();
                        let mut flags = TcpFlags::PSH | TcpFlags::ACK;
                        if with_fin {
                            flags = flags | TcpFlags::FIN;
                        }
                        fb.inject(seq, flags, &http_response(status, &body), rng.gen_range(2..10));
                        fb.server_data(&http_response(200, &spec.page), rng.gen_range(20..60));
                        fb.close();
                        (fb.finish(), Some(exchange(status, body, &url_owned)))
                    },
                    Some(spec.answers[0]),
                    (Some(false), Cell::PayloadCollision { blockpage: true }, Some(sig.to_string())),
                );
            }
            Scenario::SynRstIpblock => {
                self.emit(
                    scenario,
                    ci,
                    url,
                    dns_ok(&host, Resolver::Local, vec![spec.answers[0]]),
                    None,
                    |_, mut fb, _| {
                        fb.syn();
                        fb.refuse();
                        (fb.finish(), None)
                    },
                    Some(spec.answers[0]),
                    (
                        Some(false),
                        Cell::HandshakeFailure {
                            vantage: SynFailure::Refused,
                            control: ControlStatus::HttpOk,
                        },
                        None,
                    ),
                );
            }
            Scenario::Geoblock403451 => {
                let status = if self.rng.gen_bool(0.5) { 451 } else { 403 };
                self.emit(
                    scenario,
                    ci,
                    url,
                    dns_ok(&host, Resolver::Local, vec![spec.answers[0]]),
                    None,
                    move |_, fb, spec| {
                        let page = templates::geoblock_page(status, &spec.host);
                        let p = normal_fetch(fb, &spec.host, "/", &http_response(status, &page));
                        (p, Some(exchange(status, page, &format!("http://{}/", spec.host))))
                    },
                    Some(spec.answers[0]),
                    (Some(false), Cell::NoAnomaly, None),
                );
            }
            Scenario::DnsRedirectCensor => unreachable!("handled by redirect()"),
        }
    }

    /// Redirect censorship: in each country, groups of URLs resolve to one
    /// forged address while their controls answer from distinct ASes whose
    /// union has at least `redirect_group_size` members.
    fn redirect(&mut self, n: u32, offset: usize) {
        let nc = self.countries.len();
        let mut per_country: Vec<Vec<u32>> = vec![Vec::new(); nc];
        for (g, size) in split_groups(n, self.cfg.repeats).into_iter().enumerate() {
            per_country[(g + offset) % nc].push(size);
        }
        let target = self.cfg.redirect_group_size as usize;
        for (ci, sizes) in per_country.into_iter().enumerate() {
            if sizes.is_empty() {
                continue;
            }
            // Partition this country's URLs into redirect groups of ≥ target
            // URLs (a single smaller group when there are too few).
            let k_total = sizes.len();
            let n_groups = (k_total / target).max(1);
            let mut groups: Vec<Vec<u32>> = vec![Vec::new(); n_groups];
            for (i, s) in sizes.into_iter().enumerate() {
                groups[i % n_groups].push(s);
            }
            for group in groups {
                let forged = {
                    let c = &mut self.countries[ci];
                    c.forged_next += 1;
                    c.censor.host(c.forged_next)
                };
                let per_url = target.div_ceil(group.len()).max(1);
                let start = self.rng.gen_range(0..self.origins.len());
                let mut next_origin = start;
                for size in group {
                    let answers: Vec<IpAddr> = (0..per_url)
                        .map(|_| {
                            let o = self.origins[next_origin % self.origins.len()];
                            next_origin += 1;
                            o.host(self.rng.gen_range(0..250))
                        })
                        .collect();
                    let url = self.new_url(answers, ControlBehavior::HttpOk);
                    let host = self.urls[&url].host.clone();
                    for _ in 0..size {
                        let public = self.public_poison(&host, Rcode::NoError, Some(forged));
                        self.emit(
                            Scenario::DnsRedirectCensor,
                            ci,
                            &url,
                            dns_ok(&host, Resolver::Local, vec![forged]),
                            public,
                            |_, fb, _| (fb.finish(), None),
                            None,
                            (Some(true), Cell::NoConnection, None),
                        );
                    }
                }
            }
        }
    }

    fn control_measurement(&mut self, url: &str, day: u32) -> Measurement {
        let spec = self.urls[url].clone();
        let node = self.control_nodes.choose(&mut self.rng).expect("control nodes").clone();
        let ts = Utc.from_utc_datetime(&self.cfg.start_date.and_hms_opt(0, 0, 0).expect("midnight"))
            + Duration::days(i64::from(day))
            + Duration::seconds(self.rng.gen_range(0..86_400));
        let server = spec.answers[0];
        let fb = FlowBuilder::new(
            SocketAddr::new(node.ip, self.rng.gen_range(32_768..61_000)),
            SocketAddr::new(server, 80),
            ts.timestamp_millis() as u64,
            self.rng.gen_range(10..60),
            self.rng.gen(),
            self.rng.gen(),
        );
        let (packets, http) = match spec.behavior {
            ControlBehavior::HttpOk => (
                normal_fetch(fb, &spec.host, "/", &http_response(200, &spec.page)),
                Some(exchange(200, spec.page.clone(), url)),
            ),
            ControlBehavior::Refused | ControlBehavior::Unreachable => {
                let mut fb = fb;
                fb.syn();
                if spec.behavior == ControlBehavior::Refused {
                    fb.refuse();
                } else {
                    fb.unreachable();
                }
                (fb.finish(), None)
            }
        };
        Measurement {
            measurement_id: String::new(),
            timestamp: ts,
            vantage: node.meta,
            url: url.to_string(),
            dns_local: dns_ok(&spec.host, Resolver::Local, spec.answers.clone()),
            dns_public: None,
            packets: if self.cfg.emit_packets { packets } else { Vec::new() },
            http,
            tls_chain: None,
            traceroute: None,
            test_list: Some(spec.list.clone()),
        }
    }
}

/// Generates a corpus, its controls and ground truth from `cfg`.
pub fn generate(cfg: &ScenarioConfig) -> Result<Generated, ConfigError> {
    cfg.validate()?;
    let mut g = Gen::new(cfg);
    for (i, s) in Scenario::ALL.iter().enumerate() {
        g.scenario(*s, i);
    }

    let mut rows = std::mem::take(&mut g.out);
    // Stable sort keeps generation order among equal timestamps.
    rows.sort_by_key(|(m, _)| m.timestamp);
    let width = rows.len().max(1).to_string().len().max(6);
    let mut corpus = Vec::with_capacity(rows.len());
    let mut truth = Vec::with_capacity(rows.len());
    for (i, (mut m, mut t)) in rows.into_iter().enumerate() {
        m.measurement_id = format!("m{:0width$}", i + 1);
        t.measurement_id = m.measurement_id.clone();
        corpus.push(m);
        truth.push(t);
    }

    let needed: Vec<(String, u32)> = g.control_days.iter().cloned().collect();
    let mut controls: Vec<Measurement> = needed.iter().map(|(u, d)| g.control_measurement(u, *d)).collect();
    controls.sort_by_key(|m| m.timestamp);
    let cwidth = controls.len().max(1).to_string().len().max(6);
    for (i, c) in controls.iter_mut().enumerate() {
        c.measurement_id = format!("c{:0cwidth$}", i + 1);
    }

    let categories_tsv = g.categories.iter().map(|(u, c)| format!("{u}\t{c}\n")).collect();
    Ok(Generated {
        corpus,
        controls,
        truth,
        asn_tsv: g.alloc.tsv(),
        categories_tsv,
    })
}
