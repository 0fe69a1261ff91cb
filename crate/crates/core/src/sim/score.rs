//! Detector verdicts scored against simulator ground truth.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use super::TruthLabel;
use crate::blockpage::BlockpageOutcome;
use crate::dns::DnsOutcome;
use crate::pipeline::VerdictRecord;
use crate::tcp::InjectionOutcome;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("no {technique} verdict for measurement {id}")]
    MissingVerdict { id: String, technique: &'static str },
}

/// Confusion counts for one technique.
///
/// Every applicable measurement lands in exactly one of tp/fp/fn_/tn.
/// Verdicts that are not a positive call (uncertain, probable, unmatched)
/// count as negative predictions and are additionally tallied in their own
/// columns; `not_applicable` measurements have no ground truth for the
/// technique and are outside the confusion matrix.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TechniqueScore {
    pub technique: &'static str,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub uncertain: u64,
    pub probable: u64,
    pub unmatched: u64,
    pub not_applicable: u64,
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

impl TechniqueScore {
    fn new(technique: &'static str) -> Self {
        Self {
            technique,
            ..Self::default()
        }
    }

    fn add(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// 1.0 when nothing was flagged.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, 1.0)
    }

    /// 1.0 when there was nothing to find.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, 1.0)
    }

    /// False positives over all truly negative measurements.
    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn, 0.0)
    }
}

/// Scores dns, tcp and blockpage verdicts (in that order). Every labeled
/// measurement must have a verdict from each technique.
pub fn score(verdicts: &[VerdictRecord], truth: &[TruthLabel]) -> Result<Vec<TechniqueScore>, ScoreError> {
    let mut by_key: HashMap<(&'static str, &str), &VerdictRecord> = HashMap::new();
    for v in verdicts {
        by_key.insert((v.technique(), v.measurement_id()), v);
    }
    let get = |technique: &'static str, id: &str| {
        by_key.get(&(technique, id)).copied().ok_or_else(|| ScoreError::MissingVerdict {
            id: id.to_string(),
            technique,
        })
    };

    let mut dns = TechniqueScore::new("dns");
    let mut tcp = TechniqueScore::new("tcp");
    let mut bp = TechniqueScore::new("blockpage");
    for t in truth {
        let id = t.measurement_id.as_str();

        if let VerdictRecord::Dns(v) = get("dns", id)? {
            match t.dns {
                None => dns.not_applicable += 1,
                Some(truth) => {
                    if matches!(v.outcome, DnsOutcome::Uncertain | DnsOutcome::Deferred) {
                        dns.uncertain += 1;
                    }
                    dns.add(truth, v.outcome == DnsOutcome::Manipulated);
                }
            }
        }

        if let VerdictRecord::Tcp(v) = get("tcp", id)? {
            match v.outcome {
                InjectionOutcome::Uncertain => tcp.uncertain += 1,
                InjectionOutcome::ProbableCensorship => tcp.probable += 1,
                InjectionOutcome::Unmatched => tcp.unmatched += 1,
                _ => {}
            }
            tcp.add(t.tcp.outcome().is_censored(), v.outcome.is_censored());
        }

        if let VerdictRecord::Blockpage(v) = get("blockpage", id)? {
            bp.add(t.blockpage.is_some(), v.outcome == BlockpageOutcome::Detected);
        }
    }
    Ok(vec![dns, tcp, bp])
}

/// Tab-separated score table with a header row.
pub fn render_scores(scores: &[TechniqueScore]) -> String {
    let mut out = String::from("technique\ttp\tfp\tfn\ttn\tuncertain\tprobable\tunmatched\tnot_applicable\tprecision\trecall\tfpr\n");
    for s in scores {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            s.technique,
            s.tp,
            s.fp,
            s.fn_,
            s.tn,
            s.uncertain,
            s.probable,
            s.unmatched,
            s.not_applicable,
            s.precision(),
            s.recall(),
            s.fpr()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockpage::BlockpageVerdict;
    use crate::dns::{DnsReason, DnsVerdict};
    use crate::sim::Scenario;
    use crate::tcp::{Cell, InjectionVerdict};

    fn label(id: &str, dns: Option<bool>, tcp: Cell, bp: Option<&str>) -> TruthLabel {
        TruthLabel {
            measurement_id: id.into(),
            scenario: Scenario::Clean,
            dns,
            tcp,
            blockpage: bp.map(String::from),
        }
    }

    fn verdicts(id: &str, dns: DnsOutcome, tcp: InjectionOutcome, bp: bool) -> Vec<VerdictRecord> {
        vec![
            VerdictRecord::Dns(DnsVerdict {
                measurement_id: id.into(),
                outcome: dns,
                reason: DnsReason::SameAsAsControl,
                theta_used: None,
            }),
            VerdictRecord::Tcp(InjectionVerdict {
                measurement_id: id.into(),
                url: "http://a.test/".into(),
                country: "IR".parse().unwrap(),
                outcome: tcp,
                cell: Cell::NoAnomaly,
                discounted: false,
                matched_signature_id: None,
            }),
            VerdictRecord::Blockpage(BlockpageVerdict {
                measurement_id: id.into(),
                outcome: if bp { BlockpageOutcome::Detected } else { BlockpageOutcome::NotDetected },
                matched_signature_id: None,
                source: None,
            }),
        ]
    }

    fn corpus() -> Vec<TruthLabel> {
        vec![
            label("a", Some(true), Cell::ConnectionDisrupted, None),
            label("b", Some(false), Cell::PayloadCollision { blockpage: true }, Some("x")),
            label("c", Some(false), Cell::NoAnomaly, None),
            label("d", None, Cell::NoAnomaly, None),
        ]
    }

    #[test]
    fn perfect_detector_scores_one() {
        use InjectionOutcome::*;
        let mut v = verdicts("a", DnsOutcome::Manipulated, CensoredDisrupted, false);
        v.extend(verdicts("b", DnsOutcome::NotManipulated, CensoredBlockpage, true));
        v.extend(verdicts("c", DnsOutcome::NotManipulated, NotCensored, false));
        v.extend(verdicts("d", DnsOutcome::NotManipulated, NotCensored, false));
        for s in score(&v, &corpus()).unwrap() {
            assert_eq!((s.precision(), s.recall(), s.fpr()), (1.0, 1.0, 0.0), "{}", s.technique);
        }
    }

    #[test]
    fn silent_detector_has_zero_recall_and_fpr() {
        let mut v = Vec::new();
        for id in ["a", "b", "c", "d"] {
            v.extend(verdicts(id, DnsOutcome::NotManipulated, InjectionOutcome::NotCensored, false));
        }
        let s = score(&v, &corpus()).unwrap();
        for t in &s {
            assert_eq!(t.recall(), 0.0, "{}", t.technique);
            assert_eq!(t.fpr(), 0.0);
        }
        assert_eq!(s[0].not_applicable, 1);
    }

    #[test]
    fn non_positive_outcomes_are_tallied_separately() {
        let mut v = verdicts("a", DnsOutcome::Uncertain, InjectionOutcome::ProbableCensorship, false);
        v.extend(verdicts("b", DnsOutcome::NotManipulated, InjectionOutcome::Uncertain, false));
        v.extend(verdicts("c", DnsOutcome::NotManipulated, InjectionOutcome::Unmatched, false));
        v.extend(verdicts("d", DnsOutcome::NotManipulated, InjectionOutcome::NotCensored, false));
        let s = score(&v, &corpus()).unwrap();
        assert_eq!((s[0].uncertain, s[0].fn_, s[0].tp), (1, 1, 0));
        assert_eq!((s[1].probable, s[1].uncertain, s[1].unmatched), (1, 1, 1));
        assert_eq!(s[1].tp + s[1].fp, 0);
    }

    #[test]
    fn missing_verdict_is_an_error() {
        let v = verdicts("a", DnsOutcome::Manipulated, InjectionOutcome::NotCensored, false);
        let err = score(&v, &corpus()).unwrap_err();
        assert_eq!(
            err,
            ScoreError::MissingVerdict {
                id: "b".into(),
                technique: "dns"
            }
        );
    }
}
