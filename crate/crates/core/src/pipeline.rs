//! End-to-end analysis of a corpus: DNS, TCP and block-page verdicts per
//! measurement, corpus-level DNS grouping and singleton discounting.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockpage::{
    detect_blockpage, extract_candidates, http_candidate, BlockpageOutcome, BlockpageVerdict, CandidatePage,
    SignatureSet,
};
use crate::dns::{classify_dns, DnsGroupConfig, DnsOutcome, DnsVerdict, GroupAnalysis};
use crate::ipmeta::AsnTable;
use crate::model::{ControlIndex, Measurement};
use crate::tcp::{analyze_tcp, discount_singletons, InjectionVerdict};

/// One technique's verdict on one measurement, as written to verdict files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "technique", rename_all = "lowercase")]
pub enum VerdictRecord {
    Dns(DnsVerdict),
    Tcp(InjectionVerdict),
    Blockpage(BlockpageVerdict),
}

impl VerdictRecord {
    pub fn measurement_id(&self) -> &str {
        match self {
            VerdictRecord::Dns(v) => &v.measurement_id,
            VerdictRecord::Tcp(v) => &v.measurement_id,
            VerdictRecord::Blockpage(v) => &v.measurement_id,
        }
    }

    pub fn technique(&self) -> &'static str {
        match self {
            VerdictRecord::Dns(_) => "dns",
            VerdictRecord::Tcp(_) => "tcp",
            VerdictRecord::Blockpage(_) => "blockpage",
        }
    }

    /// Whether this verdict counts as censorship in aggregates. Probable
    /// censorship is deliberately excluded.
    pub fn is_censored(&self) -> bool {
        match self {
            VerdictRecord::Dns(v) => v.outcome == DnsOutcome::Manipulated,
            VerdictRecord::Tcp(v) => v.outcome.is_censored(),
            VerdictRecord::Blockpage(v) => v.outcome == BlockpageOutcome::Detected,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalyzeConfig {
    pub dns: DnsGroupConfig,
    /// Worker threads; 0 uses one per available core.
    pub workers: usize,
    /// Apply singleton discounting to TCP verdicts.
    pub discount: bool,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            dns: DnsGroupConfig::default(),
            workers: 0,
            discount: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Analysis {
    /// Per measurement, in corpus order: dns, tcp, blockpage.
    pub verdicts: Vec<VerdictRecord>,
    /// Candidate block pages for clustering, in corpus order.
    pub candidates: Vec<CandidatePage>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("failed to start worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

struct PerMeasurement {
    dns: DnsVerdict,
    tcp: InjectionVerdict,
    blockpage: BlockpageVerdict,
    candidates: Vec<CandidatePage>,
}

fn analyze_one(m: &Measurement, controls: &ControlIndex, asn: &AsnTable, sigs: &SignatureSet, cfg: &AnalyzeConfig) -> PerMeasurement {
    let matched = controls.match_control(m, cfg.dns.window);
    let dns = classify_dns(m, &matched, asn);
    let tcp = analyze_tcp(m, &matched, sigs);
    let collisions = tcp.all_collisions();
    let blockpage = detect_blockpage(m, &collisions, sigs);
    let mut candidates = extract_candidates(m, &collisions);
    if let Some(c) = http_candidate(m, &matched) {
        if !candidates.iter().any(|o| o.body == c.body) {
            candidates.push(c);
        }
    }
    PerMeasurement {
        dns,
        tcp: tcp.verdict,
        blockpage,
        candidates,
    }
}

/// Runs every detector over the vantage measurements of `corpus`.
///
/// Results depend only on the inputs, never on `cfg.workers`: measurements
/// are processed in parallel but collected in corpus order, and the
/// corpus-level steps run sequentially afterwards.
pub fn analyze(
    corpus: &[Measurement],
    controls: &ControlIndex,
    asn: &AsnTable,
    sigs: &SignatureSet,
    cfg: &AnalyzeConfig,
) -> Result<Analysis, PipelineError> {
    let vantage: Vec<&Measurement> = corpus.iter().filter(|m| !m.is_control()).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;
    let mut per: Vec<PerMeasurement> = pool.install(|| {
        vantage
            .par_iter()
            .map(|m| analyze_one(m, controls, asn, sigs, cfg))
            .collect()
    });

    let deferred: Vec<usize> = (0..per.len()).filter(|&i| per[i].dns.outcome == DnsOutcome::Deferred).collect();
    let grouped = GroupAnalysis::build(deferred.iter().map(|&i| vantage[i]), controls, asn, cfg.dns.window)
        .verdicts(cfg.dns.theta);
    for (i, v) in deferred.into_iter().zip(grouped) {
        per[i].dns = v;
    }

    if cfg.discount {
        let tcp: Vec<InjectionVerdict> = per.iter().map(|p| p.tcp.clone()).collect();
        for (p, v) in per.iter_mut().zip(discount_singletons(&tcp)) {
            p.tcp = v;
        }
    }

    let mut out = Analysis::default();
    for p in per {
        out.verdicts.push(VerdictRecord::Dns(p.dns));
        out.verdicts.push(VerdictRecord::Tcp(p.tcp));
        out.verdicts.push(VerdictRecord::Blockpage(p.blockpage));
        out.candidates.extend(p.candidates);
    }
    Ok(out)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads one JSON object per non-blank line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>, PipelineError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| PipelineError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn write_verdicts(path: impl AsRef<Path>, verdicts: &[VerdictRecord]) -> io::Result<()> {
    write_jsonl(path, verdicts)
}

pub fn read_verdicts(path: impl AsRef<Path>) -> Result<Vec<VerdictRecord>, PipelineError> {
    read_jsonl(path)
}
