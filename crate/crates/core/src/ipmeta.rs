//! IP-to-AS mapping and global-routability tests.

use std::fs;
use std::net::IpAddr;
use std::path::Path;
use std::sync::OnceLock;

use ipnet::IpNet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AsnTableError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, Default)]
struct Node {
    children: [u32; 2],
    value: Option<u32>,
}

/// Binary trie keyed by address bits. Node 0 is the root; child index 0 means absent.
#[derive(Debug, Clone)]
struct BitTrie {
    nodes: Vec<Node>,
}

impl BitTrie {
    fn new() -> Self {
        Self {
            nodes: vec![Node::default()],
        }
    }

    fn insert(&mut self, bits: u128, len: u8, value: u32) -> Option<u32> {
        let mut cur = 0usize;
        for i in 0..len {
            let bit = ((bits >> (127 - i)) & 1) as usize;
            let next = self.nodes[cur].children[bit];
            cur = if next == 0 {
                self.nodes.push(Node::default());
                let idx = (self.nodes.len() - 1) as u32;
                self.nodes[cur].children[bit] = idx;
                idx as usize
            } else {
                next as usize
            };
        }
        self.nodes[cur].value.replace(value)
    }

    fn longest_match(&self, bits: u128, max_len: u8) -> Option<u32> {
        let mut cur = 0usize;
        let mut best = self.nodes[0].value;
        for i in 0..max_len {
            let bit = ((bits >> (127 - i)) & 1) as usize;
            let next = self.nodes[cur].children[bit];
            if next == 0 {
                break;
            }
            cur = next as usize;
            if let Some(v) = self.nodes[cur].value {
                best = Some(v);
            }
        }
        best
    }
}

fn addr_bits(ip: IpAddr) -> (u128, u8) {
    match ip {
        IpAddr::V4(v4) => ((u32::from(v4) as u128) << 96, 32),
        IpAddr::V6(v6) => (u128::from(v6), 128),
    }
}

/// Longest-prefix-match table from CIDR prefix to origin ASN.
#[derive(Debug, Clone)]
pub struct AsnTable {
    v4: BitTrie,
    v6: BitTrie,
    entries: usize,
}

impl Default for AsnTable {
    fn default() -> Self {
        Self::new()
    }
}

impl AsnTable {
    pub fn new() -> Self {
        Self {
            v4: BitTrie::new(),
            v6: BitTrie::new(),
            entries: 0,
        }
    }

    /// Inserts a prefix. Returns the previous ASN if the identical prefix was present.
    pub fn insert(&mut self, prefix: IpNet, asn: u32) -> Option<u32> {
        let net = prefix.trunc();
        let (bits, _) = addr_bits(net.network());
        let trie = match net {
            IpNet::V4(_) => &mut self.v4,
            IpNet::V6(_) => &mut self.v6,
        };
        let prev = trie.insert(bits, net.prefix_len(), asn);
        if prev.is_none() {
            self.entries += 1;
        }
        prev
    }

    pub fn len(&self) -> usize {
        self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries == 0
    }

    /// ASN of the longest prefix covering `ip`, or `None` when no prefix matches.
    pub fn lookup(&self, ip: IpAddr) -> Option<u32> {
        let (bits, len) = addr_bits(ip);
        match ip {
            IpAddr::V4(_) => self.v4.longest_match(bits, len),
            IpAddr::V6(_) => self.v6.longest_match(bits, len),
        }
    }

    /// Parses `CIDR<TAB>ASN` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, AsnTableError> {
        let mut table = AsnTable::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| AsnTableError::Format {
                line: line_no,
                reason: reason.to_string(),
            };
            let mut parts = line.split('\t').map(str::trim);
            let (Some(pfx), Some(asn), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected `prefix<TAB>asn`"));
            };
            let prefix: IpNet = pfx.parse().map_err(|_| bad("invalid CIDR prefix"))?;
            let asn: u32 = asn
                .trim_start_matches("AS")
                .parse()
                .map_err(|_| bad("invalid ASN"))?;
            if asn == 0 {
                return Err(bad("ASN must be positive"));
            }
            if table.insert(prefix, asn).is_some() {
                return Err(bad("duplicate prefix"));
            }
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AsnTableError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Free-function form of [`AsnTable::lookup`].
pub fn lookup_asn(table: &AsnTable, ip: IpAddr) -> Option<u32> {
    table.lookup(ip)
}

/// A non-routable block from the embedded special-purpose list.
#[derive(Debug, Clone)]
pub struct SpecialBlock {
    pub prefix: IpNet,
    pub name: String,
}

const SPECIAL_PURPOSE: &str = include_str!("../data/special_purpose.tsv");

pub fn special_purpose_blocks() -> &'static [SpecialBlock] {
    static BLOCKS: OnceLock<Vec<SpecialBlock>> = OnceLock::new();
    BLOCKS.get_or_init(|| {
        SPECIAL_PURPOSE
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                let (p, name) = l.split_once('\t').expect("embedded list is tab separated");
                SpecialBlock {
                    prefix: p.parse().expect("embedded list holds valid prefixes"),
                    name: name.to_string(),
                }
            })
            .collect()
    })
}

/// False for private, loopback, link-local, shared, documentation,
/// benchmarking, multicast, reserved and other special-purpose addresses.
pub fn is_globally_routable(ip: IpAddr) -> bool {
    !special_purpose_blocks()
        .iter()
        .any(|b| b.prefix.contains(&ip))
}
