//! Simulator output checked against its own labels, and the detectors
//! scored against that ground truth.

use std::collections::BTreeSet;

use blockscope::blockpage::SignatureSet;
use blockscope::ipmeta::AsnTable;
use blockscope::model::{ControlIndex, ControlWindow};
use blockscope::pipeline::{analyze, AnalyzeConfig};
use blockscope::sim::checks::check_scenario;
use blockscope::sim::{generate, render_scores, score, Generated, Scenario, ScenarioConfig};

fn index(g: &Generated) -> ControlIndex {
    let (idx, skipped) = ControlIndex::from_measurements(g.controls.iter().cloned());
    assert_eq!(skipped, 0);
    idx
}

#[test]
fn every_measurement_exhibits_its_scenario() {
    let g = generate(&ScenarioConfig::default()).unwrap();
    let asn = AsnTable::parse(&g.asn_tsv).unwrap();
    let idx = index(&g);
    assert_eq!(g.corpus.len(), g.truth.len());
    for (m, t) in g.corpus.iter().zip(&g.truth) {
        assert_eq!(m.measurement_id, t.measurement_id);
        let controls = idx.match_control(m, ControlWindow::default());
        if let Err(e) = check_scenario(t.scenario, m, &controls, &asn) {
            panic!("{} ({:?}): {e}", m.measurement_id, t.scenario);
        }
    }
    let ids: BTreeSet<&str> = g.corpus.iter().map(|m| m.measurement_id.as_str()).collect();
    assert_eq!(ids.len(), g.corpus.len());
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let cfg = ScenarioConfig {
        seed: 99,
        ..ScenarioConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&cfg).unwrap().write_to(a.path()).unwrap();
    generate(&cfg).unwrap().write_to(b.path()).unwrap();
    for f in ["corpus.jsonl", "control.jsonl", "truth.jsonl", "asn.tsv", "categories.tsv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let other = generate(&ScenarioConfig { seed: 100, ..cfg }).unwrap();
    let first = generate(&ScenarioConfig { seed: 99, ..ScenarioConfig::default() }).unwrap();
    assert_ne!(other.corpus, first.corpus);
}

#[test]
fn detectors_agree_with_ground_truth_on_default_corpus() {
    let g = generate(&ScenarioConfig::default()).unwrap();
    let asn = AsnTable::parse(&g.asn_tsv).unwrap();
    let a = analyze(&g.corpus, &index(&g), &asn, &SignatureSet::builtin(), &AnalyzeConfig::default()).unwrap();
    let s = score(&a.verdicts, &g.truth).unwrap();
    println!("{}", render_scores(&s));
    for t in &s {
        assert_eq!(t.fp, 0, "{}", t.technique);
        assert_eq!(t.fn_, 0, "{}", t.technique);
    }
}

#[test]
fn redirect_groups_of_twelve_are_caught_at_default_theta() {
    let cfg = ScenarioConfig {
        countries: vec!["IR".parse().unwrap()],
        repeats: 1,
        redirect_group_size: 12,
        scenarios: blockscope::sim::ScenarioCounts::only(Scenario::DnsRedirectCensor, 12),
        ..ScenarioConfig::default()
    };
    let g = generate(&cfg).unwrap();
    assert_eq!(g.corpus.len(), 12);
    assert!(g.truth.iter().all(|t| t.dns == Some(true)));
    let asn = AsnTable::parse(&g.asn_tsv).unwrap();
    let a = analyze(&g.corpus, &index(&g), &asn, &SignatureSet::builtin(), &AnalyzeConfig::default()).unwrap();
    let s = score(&a.verdicts, &g.truth).unwrap();
    assert_eq!(s[0].tp, 12);
}
