//! Measurement records, corpus I/O and control matching.
//!
//! A corpus is a UTF-8 file holding one JSON object per line. Every detector
//! consumes the [`Measurement`] type defined here; raw packet captures are
//! converted to [`PacketEvent`] lists by an external tool.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::ops::BitOr;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use serde::de::{self, DeserializeOwned, Deserializer};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// A required field was missing or ill-typed, or a record invariant failed.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("schema error in `{field}`: {cause}")]
pub struct SchemaError {
    pub field: String,
    pub cause: String,
}

impl SchemaError {
    pub fn new(field: impl Into<String>, cause: impl fmt::Display) -> Self {
        Self {
            field: field.into(),
            cause: cause.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {error}")]
    Line { line: usize, error: SchemaError },
}

const ISO_ALPHA2: &str = "AD AE AF AG AI AL AM AO AQ AR AS AT AU AW AX AZ BA BB BD BE BF BG BH BI BJ BL \
BM BN BO BQ BR BS BT BV BW BY BZ CA CC CD CF CG CH CI CK CL CM CN CO CR CU CV CW CX CY CZ DE DJ DK DM \
DO DZ EC EE EG EH ER ES ET FI FJ FK FM FO FR GA GB GD GE GF GG GH GI GL GM GN GP GQ GR GS GT GU GW GY \
HK HM HN HR HT HU ID IE IL IM IN IO IQ IR IS IT JE JM JO JP KE KG KH KI KM KN KP KR KW KY KZ LA LB LC \
LI LK LR LS LT LU LV LY MA MC MD ME MF MG MH MK ML MM MN MO MP MQ MR MS MT MU MV MW MX MY MZ NA NC NE \
NF NG NI NL NO NP NR NU NZ OM PA PE PF PG PH PK PL PM PN PR PS PT PW PY QA RE RO RS RU RW SA SB SC SD \
SE SG SH SI SJ SK SL SM SN SO SR SS ST SV SX SY SZ TC TD TF TG TH TJ TK TL TM TN TO TR TT TV TW TZ UA \
UG UM US UY UZ VA VC VE VG VI VN VU WF WS XK YE YT ZA ZM ZW";

/// ISO 3166-1 alpha-2 country code, stored uppercase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CountryCode([u8; 2]);

impl CountryCode {
    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("country codes are ASCII")
    }
}

impl FromStr for CountryCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        if upper.len() != 2 || !ISO_ALPHA2.split(' ').any(|c| c == upper) {
            return Err(format!("`{s}` is not an ISO 3166-1 alpha-2 code"));
        }
        let b = upper.as_bytes();
        Ok(CountryCode([b[0], b[1]]))
    }
}

impl fmt::Display for CountryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for CountryCode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CountryCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VantageKind {
    Vpn,
    Vod,
    Control,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VantageMeta {
    pub vantage_id: String,
    pub country: CountryCode,
    pub asn: u32,
    pub kind: VantageKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolver {
    Local,
    Public,
}

/// DNS response code. Unknown codes are kept numerically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rcode {
    NoError,
    NxDomain,
    ServFail,
    Timeout,
    Other(u16),
}

impl Serialize for Rcode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Rcode::NoError => s.serialize_str("NoError"),
            Rcode::NxDomain => s.serialize_str("NXDomain"),
            Rcode::ServFail => s.serialize_str("ServFail"),
            Rcode::Timeout => s.serialize_str("Timeout"),
            Rcode::Other(code) => s.serialize_u16(*code),
        }
    }
}

impl<'de> Deserialize<'de> for Rcode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Code(u16),
        }
        match Repr::deserialize(d)? {
            Repr::Code(0) => Ok(Rcode::NoError),
            Repr::Code(2) => Ok(Rcode::ServFail),
            Repr::Code(3) => Ok(Rcode::NxDomain),
            Repr::Code(c) => Ok(Rcode::Other(c)),
            Repr::Name(n) => match n.to_ascii_lowercase().as_str() {
                "noerror" => Ok(Rcode::NoError),
                "nxdomain" => Ok(Rcode::NxDomain),
                "servfail" => Ok(Rcode::ServFail),
                "timeout" => Ok(Rcode::Timeout),
                _ => Err(de::Error::custom(format!("unknown rcode `{n}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnsResponse {
    pub rcode: Rcode,
    #[serde(default)]
    pub answers: Vec<IpAddr>,
    #[serde(default)]
    pub arrival_order: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnsObservation {
    pub query_name: String,
    pub resolver: Resolver,
    #[serde(default)]
    pub responses: Vec<DnsResponse>,
}

impl DnsObservation {
    /// Responses in arrival order; the first one is what a stub resolver would accept.
    pub fn ordered_responses(&self) -> Vec<&DnsResponse> {
        let mut rs: Vec<&DnsResponse> = self.responses.iter().collect();
        rs.sort_by_key(|r| r.arrival_order);
        rs
    }

    pub fn first_response(&self) -> Option<&DnsResponse> {
        self.responses.iter().min_by_key(|r| r.arrival_order)
    }

    pub fn all_answers(&self) -> impl Iterator<Item = &IpAddr> {
        self.responses.iter().flat_map(|r| r.answers.iter())
    }
}

/// TCP flag set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct TcpFlags(u8);

impl TcpFlags {
    pub const FIN: TcpFlags = TcpFlags(0x01);
    pub const SYN: TcpFlags = TcpFlags(0x02);
    pub const RST: TcpFlags = TcpFlags(0x04);
    pub const PSH: TcpFlags = TcpFlags(0x08);
    pub const ACK: TcpFlags = TcpFlags(0x10);

    const NAMES: [(&'static str, TcpFlags); 5] = [
        ("SYN", TcpFlags::SYN),
        ("ACK", TcpFlags::ACK),
        ("RST", TcpFlags::RST),
        ("FIN", TcpFlags::FIN),
        ("PSH", TcpFlags::PSH),
    ];

    pub const fn empty() -> Self {
        TcpFlags(0)
    }

    pub fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn intersects(self, other: TcpFlags) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl BitOr for TcpFlags {
    type Output = TcpFlags;
    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | rhs.0)
    }
}

impl Serialize for TcpFlags {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let names: Vec<&str> = Self::NAMES
            .iter()
            .filter(|(_, f)| self.contains(*f))
            .map(|(n, _)| *n)
            .collect();
        let mut seq = s.serialize_seq(Some(names.len()))?;
        for n in names {
            seq.serialize_element(n)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for TcpFlags {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        let mut flags = TcpFlags::empty();
        for n in names {
            let upper = n.to_ascii_uppercase();
            let (_, f) = Self::NAMES
                .iter()
                .find(|(name, _)| *name == upper)
                .ok_or_else(|| de::Error::custom(format!("unknown TCP flag `{n}`")))?;
            flags = flags | *f;
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "out")]
    Outbound,
    #[serde(rename = "in")]
    Inbound,
}

fn default_true() -> bool {
    true
}

/// One normalized packet record.
///
/// ICMP unreachable messages are represented with `icmp_unreachable` set and
/// `src`/`dst` carrying the TCP endpoints the message refers to (server, client).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketEvent {
    pub ts_ms: u64,
    pub dir: Direction,
    pub src: SocketAddr,
    pub dst: SocketAddr,
    #[serde(default)]
    pub flags: TcpFlags,
    #[serde(default)]
    pub seq: u32,
    #[serde(default)]
    pub ack: u32,
    #[serde(rename = "payload_b64", default, with = "b64")]
    pub payload: Vec<u8>,
    #[serde(default = "default_true")]
    pub checksum_valid: bool,
    #[serde(default)]
    pub icmp_unreachable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpExchange {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(default)]
    pub headers: Vec<(String, String)>,
    #[serde(rename = "body_b64", default, with = "b64")]
    pub body: Vec<u8>,
    #[serde(default)]
    pub final_url: String,
}

/// One URL test from one vantage point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Measurement {
    pub measurement_id: String,
    pub timestamp: DateTime<Utc>,
    pub vantage: VantageMeta,
    pub url: String,
    pub dns_local: DnsObservation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dns_public: Option<DnsObservation>,
    #[serde(default)]
    pub packets: Vec<PacketEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpExchange>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "b64_list")]
    pub tls_chain: Option<Vec<Vec<u8>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traceroute: Option<Vec<IpAddr>>,
    /// Name of the test list the URL was drawn from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_list: Option<String>,
}

impl Measurement {
    pub fn day(&self) -> NaiveDate {
        self.timestamp.date_naive()
    }

    pub fn country(&self) -> CountryCode {
        self.vantage.country
    }

    pub fn is_control(&self) -> bool {
        self.vantage.kind == VantageKind::Control
    }

    /// Every address the vantage resolved the URL's host to, local and public.
    pub fn resolved_addresses(&self) -> HashSet<IpAddr> {
        let mut out: HashSet<IpAddr> = self.dns_local.all_answers().copied().collect();
        if let Some(p) = &self.dns_public {
            out.extend(p.all_answers().copied());
        }
        out
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("measurement serialization is infallible")
    }
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

mod b64_list {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<Vec<u8>>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(list) => {
                let enc: Vec<String> = list.iter().map(|b| STANDARD.encode(b)).collect();
                s.collect_seq(enc)
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<Vec<u8>>>, D::Error> {
        let v = Option::<Vec<String>>::deserialize(d)?;
        v.map(|list| {
            list.iter()
                .map(|s| STANDARD.decode(s.as_bytes()).map_err(serde::de::Error::custom))
                .collect()
        })
        .transpose()
    }
}

fn required<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str) -> Result<T, SchemaError> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(SchemaError::new(key, "missing required field")),
        Some(v) => T::deserialize(v).map_err(|e| SchemaError::new(key, e)),
    }
}

fn optional<T: DeserializeOwned>(
    obj: &Map<String, Value>,
    key: &str,
) -> Result<Option<T>, SchemaError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => T::deserialize(v).map(Some).map_err(|e| SchemaError::new(key, e)),
    }
}

/// Parses and validates one corpus line. Unknown keys are ignored.
pub fn parse_measurement(line: &str) -> Result<Measurement, SchemaError> {
    let value: Value = serde_json::from_str(line).map_err(|e| SchemaError::new("<record>", e))?;
    let obj = value
        .as_object()
        .ok_or_else(|| SchemaError::new("<record>", "record is not an object"))?;

    let tls_chain = match obj.get("tls_chain") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let list = Vec::<String>::deserialize(v).map_err(|e| SchemaError::new("tls_chain", e))?;
            let mut out = Vec::with_capacity(list.len());
            for (i, s) in list.iter().enumerate() {
                use base64::Engine;
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(s.as_bytes())
                    .map_err(|e| SchemaError::new(format!("tls_chain[{i}]"), e))?;
                out.push(bytes);
            }
            Some(out)
        }
    };

    let mut m = Measurement {
        measurement_id: required(obj, "measurement_id")?,
        timestamp: required(obj, "timestamp")?,
        vantage: required(obj, "vantage")?,
        url: required(obj, "url")?,
        dns_local: required(obj, "dns_local")?,
        dns_public: optional(obj, "dns_public")?,
        packets: optional(obj, "packets")?.unwrap_or_default(),
        http: optional(obj, "http")?,
        tls_chain,
        traceroute: optional(obj, "traceroute")?,
        test_list: optional(obj, "test_list")?,
    };
    normalize_and_validate(&mut m)?;
    Ok(m)
}

fn validate_dns(obs: &mut DnsObservation, field: &str) -> Result<(), SchemaError> {
    let mut name = obs.query_name.trim().to_ascii_lowercase();
    if name.ends_with('.') {
        name.pop();
    }
    if name.is_empty() {
        return Err(SchemaError::new(format!("{field}.query_name"), "empty query name"));
    }
    obs.query_name = name;
    for (i, r) in obs.responses.iter().enumerate() {
        if r.rcode == Rcode::Timeout && !r.answers.is_empty() {
            return Err(SchemaError::new(
                format!("{field}.responses[{i}]"),
                "timeout response carries answers",
            ));
        }
    }
    Ok(())
}

fn normalize_and_validate(m: &mut Measurement) -> Result<(), SchemaError> {
    if m.measurement_id.is_empty() {
        return Err(SchemaError::new("measurement_id", "empty id"));
    }
    if m.vantage.asn == 0 {
        return Err(SchemaError::new("vantage.asn", "ASN must be positive"));
    }
    url::Url::parse(&m.url).map_err(|e| SchemaError::new("url", e))?;
    validate_dns(&mut m.dns_local, "dns_local")?;
    if let Some(p) = m.dns_public.as_mut() {
        validate_dns(p, "dns_public")?;
    }
    if let Some(h) = &m.http {
        if let Some(s) = h.status {
            if !(100..=599).contains(&s) {
                return Err(SchemaError::new("http.status", format!("status {s} out of range")));
            }
        }
    }
    for (i, p) in m.packets.iter().enumerate() {
        if p.icmp_unreachable && !p.flags.is_empty() {
            return Err(SchemaError::new(
                format!("packets[{i}]"),
                "ICMP unreachable event carries TCP flags",
            ));
        }
    }
    // stable: equal timestamps keep arrival order
    m.packets.sort_by_key(|p| p.ts_ms);
    Ok(())
}

/// Counts gathered while streaming a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusSummary {
    pub records: usize,
    pub errors: Vec<(usize, SchemaError)>,
}

/// Streaming reader over a line-delimited corpus. Malformed lines are yielded
/// as [`CorpusError::Line`] and do not stop the stream.
pub struct CorpusReader<R> {
    lines: io::Lines<R>,
    line_no: usize,
    seen: HashSet<String>,
    summary: CorpusSummary,
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            seen: HashSet::new(),
            summary: CorpusSummary::default(),
        }
    }

    pub fn summary(&self) -> &CorpusSummary {
        &self.summary
    }

    pub fn into_summary(self) -> CorpusSummary {
        self.summary
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<Measurement, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(CorpusError::Io(e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = parse_measurement(&line).and_then(|m| {
                if self.seen.insert(m.measurement_id.clone()) {
                    Ok(m)
                } else {
                    Err(SchemaError::new("measurement_id", "duplicate id in corpus"))
                }
            });
            return Some(match parsed {
                Ok(m) => {
                    self.summary.records += 1;
                    Ok(m)
                }
                Err(error) => {
                    self.summary.errors.push((self.line_no, error.clone()));
                    Err(CorpusError::Line {
                        line: self.line_no,
                        error,
                    })
                }
            });
        }
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<CorpusReader<BufReader<File>>, CorpusError> {
    let f = File::open(path)?;
    Ok(CorpusReader::new(BufReader::new(f)))
}

/// Reads a whole corpus, keeping valid records and the per-line error summary.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<(Vec<Measurement>, CorpusSummary), CorpusError> {
    let mut reader = load_corpus(path)?;
    let mut out = Vec::new();
    for item in reader.by_ref() {
        match item {
            Ok(m) => out.push(m),
            Err(CorpusError::Io(e)) => return Err(CorpusError::Io(e)),
            Err(CorpusError::Line { .. }) => {}
        }
    }
    Ok((out, reader.into_summary()))
}

pub fn write_corpus<'a>(
    path: impl AsRef<Path>,
    measurements: impl IntoIterator<Item = &'a Measurement>,
) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for m in measurements {
        writeln!(w, "{}", m.to_json_line())?;
    }
    w.flush()
}

/// Matching window in calendar days, centered on the vantage observation day.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlWindow(u32);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("control window must be odd and at least 1 day, got {0}")]
pub struct InvalidWindow(pub u32);

impl ControlWindow {
    pub fn days(days: u32) -> Result<Self, InvalidWindow> {
        if days == 0 || days.is_multiple_of(2) {
            return Err(InvalidWindow(days));
        }
        Ok(ControlWindow(days))
    }

    pub fn half_width(self) -> i64 {
        i64::from((self.0 - 1) / 2)
    }

    pub fn len(self) -> u32 {
        self.0
    }
}

impl Default for ControlWindow {
    fn default() -> Self {
        ControlWindow(7)
    }
}

/// Control measurements keyed by scheduled URL and UTC calendar day.
#[derive(Debug, Clone, Default)]
pub struct ControlIndex {
    by_url: BTreeMap<String, BTreeMap<NaiveDate, Vec<Measurement>>>,
    len: usize,
}

impl ControlIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds an index from any measurement stream, keeping only control
    /// measurements. Returns the index and the number of records skipped.
    pub fn from_measurements(ms: impl IntoIterator<Item = Measurement>) -> (Self, usize) {
        let mut idx = Self::new();
        let mut skipped = 0;
        for m in ms {
            if idx.insert(m).is_err() {
                skipped += 1;
            }
        }
        (idx, skipped)
    }

    /// Adds a control measurement; non-control records are handed back.
    pub fn insert(&mut self, m: Measurement) -> Result<(), Measurement> {
        if !m.is_control() {
            return Err(m);
        }
        self.by_url
            .entry(m.url.clone())
            .or_default()
            .entry(m.day())
            .or_default()
            .push(m);
        self.len += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn has_url(&self, url: &str) -> bool {
        self.by_url.contains_key(url)
    }

    /// Control measurements of `m.url` whose day lies within the window
    /// around `m`'s day, ordered by day then insertion.
    pub fn match_control(&self, m: &Measurement, window: ControlWindow) -> Vec<&Measurement> {
        let Some(days) = self.by_url.get(&m.url) else {
            return Vec::new();
        };
        let day = m.day();
        let h = Duration::days(window.half_width());
        days.range(day - h..=day + h)
            .flat_map(|(_, ms)| ms.iter())
            .collect()
    }
}
