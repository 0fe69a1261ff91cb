//! Command-line front end: detection, clustering, simulation, scoring,
//! location validation and report tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use blockscope::blockpage::{
    cluster_by_tags, known_pages, known_tag_vectors, lsh_clusters, write_review_queue, CandidatePage, LshConfig,
    SignatureSet,
};
use blockscope::dns::{fpr_sweep, local_public_matrix, DnsGroupConfig};
use blockscope::geoloc::{self, GeoConfig};
use blockscope::ipmeta::AsnTable;
use blockscope::model::{read_corpus, ControlIndex, ControlWindow, CountryCode, Measurement};
use blockscope::pipeline::{analyze, read_jsonl, read_verdicts, write_jsonl, write_verdicts, AnalyzeConfig};
use blockscope::report::{self, CategoryMap, Taxonomy};
use blockscope::sim::{self, ScenarioConfig};

#[derive(Debug, Parser)]
#[command(name = "blockscope", version, about = "Offline censorship measurement analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run DNS, TCP and block-page detection over a corpus.
    Analyze(AnalyzeArgs),
    /// Cluster candidate block pages and write the review queue.
    Cluster(ClusterArgs),
    /// False-positive rate of DNS grouping across thresholds.
    SweepTheta(SweepArgs),
    /// Generate a labeled synthetic corpus.
    Simulate(SimulateArgs),
    /// Score verdicts against simulator ground truth.
    Score(ScoreArgs),
    /// Check a claimed server country against RTT samples.
    GeolocValidate(GeolocArgs),
    /// Aggregate verdicts into tab-separated tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct Inputs {
    /// Vantage measurements (JSON lines).
    #[arg(long)]
    corpus: PathBuf,
    /// Control measurements (JSON lines); defaults to control records in the corpus.
    #[arg(long)]
    controls: Option<PathBuf>,
    /// IP prefix to ASN table (`prefix<TAB>asn`).
    #[arg(long)]
    asn: PathBuf,
    /// Control matching window in days (odd).
    #[arg(long, default_value_t = 7)]
    window: u32,
}

struct Loaded {
    corpus: Vec<Measurement>,
    controls: ControlIndex,
    asn: AsnTable,
    window: ControlWindow,
}

impl Inputs {
    fn load(&self) -> Result<Loaded> {
        let (corpus, summary) =
            read_corpus(&self.corpus).with_context(|| format!("reading {}", self.corpus.display()))?;
        if !summary.errors.is_empty() {
            eprintln!("skipped {} malformed corpus records", summary.errors.len());
        }
        let control_source = match &self.controls {
            Some(p) => read_corpus(p).with_context(|| format!("reading {}", p.display()))?.0,
            None => corpus.iter().filter(|m| m.is_control()).cloned().collect(),
        };
        let (controls, not_controls) = ControlIndex::from_measurements(control_source);
        if self.controls.is_some() && not_controls > 0 {
            eprintln!("ignored {not_controls} non-control records in the control file");
        }
        let asn = AsnTable::load(&self.asn).with_context(|| format!("reading {}", self.asn.display()))?;
        let window = ControlWindow::days(self.window)?;
        Ok(Loaded {
            corpus,
            controls,
            asn,
            window,
        })
    }
}

fn load_signatures(path: &Option<PathBuf>) -> Result<SignatureSet> {
    Ok(match path {
        Some(p) => SignatureSet::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => SignatureSet::builtin(),
    })
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Block-page signatures (`id<TAB>scope<TAB>regex<TAB>provenance`); built-in set by default.
    #[arg(long)]
    signatures: Option<PathBuf>,
    /// Control-side AS diversity above which grouped resolutions count as manipulated.
    #[arg(long, default_value_t = 11)]
    theta: u32,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Keep anomalies seen only once per (URL, country).
    #[arg(long)]
    no_discount: bool,
    /// Verdict output (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Candidate block pages output (JSON lines).
    #[arg(long)]
    candidates: Option<PathBuf>,
}

fn run_analyze(a: AnalyzeArgs) -> Result<()> {
    let l = a.inputs.load()?;
    let sigs = load_signatures(&a.signatures)?;
    let cfg = AnalyzeConfig {
        dns: DnsGroupConfig {
            theta: a.theta,
            window: l.window,
        },
        workers: a.workers,
        discount: !a.no_discount,
    };
    let result = analyze(&l.corpus, &l.controls, &l.asn, &sigs, &cfg)?;
    write_verdicts(&a.out, &result.verdicts)?;
    if let Some(p) = &a.candidates {
        write_jsonl(p, &result.candidates)?;
    }
    eprintln!(
        "{} verdicts, {} candidate pages",
        result.verdicts.len(),
        result.candidates.len()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Lsh,
    Tags,
    Both,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Candidate pages written by `analyze --candidates`.
    #[arg(long)]
    candidates: PathBuf,
    /// Signatures used to name known clusters; built-in set by default.
    #[arg(long)]
    signatures: Option<PathBuf>,
    /// Clustering method.
    #[arg(long, value_enum, default_value_t = Method::Both)]
    method: Method,
    /// Similarity threshold for text clustering.
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
    /// Tokens per shingle.
    #[arg(long, default_value_t = 1)]
    shingle_width: usize,
    /// MinHash permutations per signature.
    #[arg(long, default_value_t = 128)]
    num_perm: usize,
    /// Review queue output.
    #[arg(long)]
    out: PathBuf,
}

fn run_cluster(a: ClusterArgs) -> Result<()> {
    if !(a.threshold > 0.0 && a.threshold <= 1.0) {
        bail!("--threshold must be in (0, 1]");
    }
    if a.shingle_width == 0 || a.num_perm == 0 {
        bail!("--shingle-width and --num-perm must be positive");
    }
    let cands: Vec<CandidatePage> = read_jsonl(&a.candidates)?;
    let sigs = load_signatures(&a.signatures)?;
    let known = known_pages(&cands, &sigs);
    let mut clusters = Vec::new();
    if matches!(a.method, Method::Tags | Method::Both) {
        clusters.extend(cluster_by_tags(&cands, &known_tag_vectors(&known)));
    }
    if matches!(a.method, Method::Lsh | Method::Both) {
        let cfg = LshConfig {
            threshold: a.threshold,
            shingle_width: a.shingle_width,
            num_perm: a.num_perm,
            ..LshConfig::default()
        };
        clusters.extend(lsh_clusters(&cands, &known, &cfg));
    }
    let mut buf = Vec::new();
    write_review_queue(&clusters, &mut buf)?;
    fs::write(&a.out, buf)?;
    eprintln!("{} candidates, {} clusters", cands.len(), clusters.len());
    Ok(())
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Signatures for cross-checking grouped detections; built-in set by default.
    #[arg(long)]
    signatures: Option<PathBuf>,
    /// First threshold swept.
    #[arg(long, default_value_t = 1)]
    from: u32,
    /// Last threshold swept.
    #[arg(long, default_value_t = 15)]
    to: u32,
    /// Sweep table output (`theta<TAB>detections<TAB>false_positives<TAB>fpr`).
    #[arg(long)]
    out: PathBuf,
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    if a.from == 0 || a.from > a.to {
        bail!("need 1 <= --from <= --to");
    }
    let l = a.inputs.load()?;
    let sigs = load_signatures(&a.signatures)?;
    let thetas: Vec<u32> = (a.from..=a.to).collect();
    // A grouped detection is confirmed when the vantage saw a block page or
    // no HTTP response at all.
    let confirmed = |m: &Measurement| match &m.http {
        None => true,
        Some(h) => !sigs.matches(&h.body, m.country()).is_empty(),
    };
    let points = fpr_sweep(&l.corpus, &l.controls, &l.asn, &thetas, l.window, confirmed);
    let mut out = String::from("theta\tdetections\tfalse_positives\tfpr\n");
    for p in points {
        let fpr = if p.empty_denominator {
            "NA".to_string()
        } else {
            format!("{:.6}", p.fpr)
        };
        out.push_str(&format!("{}\t{}\t{}\t{fpr}\n", p.theta, p.detections, p.false_positives));
    }
    fs::write(&a.out, out)?;
    Ok(())
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario configuration (TOML); defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let g = sim::generate(&cfg)?;
    g.write_to(&a.out)?;
    eprintln!(
        "{} measurements, {} controls written to {}",
        g.corpus.len(),
        g.controls.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Verdicts written by `analyze`.
    #[arg(long)]
    verdicts: PathBuf,
    /// Ground truth written by `simulate`.
    #[arg(long)]
    truth: PathBuf,
    /// Output table; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_score(a: ScoreArgs) -> Result<()> {
    let verdicts = read_verdicts(&a.verdicts)?;
    let truth = sim::read_truth(&a.truth)?;
    let scores = sim::score(&verdicts, &truth)?;
    write_or_print(&a.out, &sim::render_scores(&scores))
}

#[derive(Debug, Args)]
struct GeolocArgs {
    /// `id<TAB>lat<TAB>lon` lines.
    #[arg(long)]
    landmarks: PathBuf,
    /// `country<TAB>lat<TAB>lon` lines sampling each country's territory.
    #[arg(long)]
    geometry: PathBuf,
    /// Claimed country of the server.
    #[arg(long)]
    claimed: String,
    /// `landmark_id<TAB>rtt_ms` lines.
    #[arg(long)]
    samples: PathBuf,
    /// Propagation speed bound in km per ms.
    #[arg(long, default_value_t = 153.0)]
    max_speed: f64,
    /// Per-landmark report; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_geoloc(a: GeolocArgs) -> Result<()> {
    let claimed: CountryCode = a.claimed.parse().map_err(anyhow::Error::msg)?;
    let landmarks = geoloc::load_landmarks(&a.landmarks)?;
    let geometry = geoloc::load_geometry(&a.geometry)?;
    let samples = geoloc::load_samples(&a.samples)?;
    let Some(shape) = geometry.get(&claimed) else {
        bail!("no geometry for claimed country {claimed}");
    };
    let cfg = GeoConfig::new(a.max_speed)?;
    let checks = geoloc::check_samples(&samples, &landmarks, shape, &cfg)?;
    write_or_print(&a.out, &geoloc::render_report(claimed, &checks))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Table {
    Table,
    Combos,
    Trend,
    ResolverMatrix,
    AsCdf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(value_enum)]
    table: Table,
    /// Verdicts written by `analyze` (needed by table, combos and trend).
    #[arg(long)]
    verdicts: Option<PathBuf>,
    /// Vantage measurements (JSON lines).
    #[arg(long)]
    corpus: PathBuf,
    /// `url_or_domain<TAB>code` lines.
    #[arg(long)]
    categories: Option<PathBuf>,
    /// `code<TAB>name` lines; category codes are checked against it.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Table output.
    #[arg(long)]
    out: PathBuf,
}

fn need_verdicts(path: &Option<PathBuf>) -> Result<&Path> {
    path.as_deref().context("this table needs --verdicts")
}

fn run_report(a: ReportArgs) -> Result<()> {
    let (corpus, _) = read_corpus(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
    let text = match a.table {
        Table::Table => {
            let verdicts = read_verdicts(need_verdicts(&a.verdicts)?)?;
            let taxonomy = a.taxonomy.as_ref().map(Taxonomy::load).transpose()?;
            let categories = match &a.categories {
                Some(p) => CategoryMap::load(p, taxonomy.as_ref())?,
                None => CategoryMap::default(),
            };
            report::render_technique_table(&report::technique_by_country(&verdicts, &corpus, &categories)?)
        }
        Table::Combos => {
            let verdicts = read_verdicts(need_verdicts(&a.verdicts)?)?;
            report::render_combinations(&report::combinations(&verdicts, &corpus)?)
        }
        Table::Trend => {
            let verdicts = read_verdicts(need_verdicts(&a.verdicts)?)?;
            report::render_trend(&report::longitudinal(&verdicts, &corpus)?)
        }
        Table::ResolverMatrix => {
            let vantage = corpus.iter().filter(|m| !m.is_control());
            report::render_resolver_matrix(&local_public_matrix(vantage))
        }
        Table::AsCdf => report::render_cdf(&report::as_per_country_cdf(&corpus)),
    };
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => run_analyze(a),
        Command::Cluster(a) => run_cluster(a),
        Command::SweepTheta(a) => run_sweep(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Score(a) => run_score(a),
        Command::GeolocValidate(a) => run_geoloc(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
