//! Speed-of-light feasibility check for a server's advertised country.
//!
//! A round trip to a landmark cannot take less time than light in fiber needs
//! to cover twice the distance from that landmark to the nearest point of the
//! claimed country. Any faster sample proves the server is elsewhere.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::CountryCode;

/// Mean Earth radius in km (IUGG).
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("unknown landmark `{0}`")]
    UnknownLandmark(String),
    #[error("country geometry for {0} has no reference points")]
    EmptyGeometry(CountryCode),
    #[error("invalid coordinate: lat {lat}, lon {lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("rtt must be positive and finite, got {0}")]
    InvalidRtt(f64),
    #[error("max speed must be positive, got {0}")]
    InvalidSpeed(f64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::InvalidCoordinate { lat, lon });
        }
        Ok(Self { lat, lon })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: String,
    pub pos: LatLon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryGeometry {
    pub country: CountryCode,
    pub points: Vec<LatLon>,
}

impl CountryGeometry {
    pub fn new(country: CountryCode, points: Vec<LatLon>) -> Result<Self, GeoError> {
        if points.is_empty() {
            return Err(GeoError::EmptyGeometry(country));
        }
        Ok(Self { country, points })
    }

    /// Distance from `p` to the nearest reference point.
    pub fn min_distance_km(&self, p: LatLon) -> f64 {
        self.points
            .iter()
            .map(|q| great_circle_km(p, *q))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoConfig {
    pub max_speed_km_per_ms: f64,
}

impl Default for GeoConfig {
    fn default() -> Self {
        Self {
            max_speed_km_per_ms: 153.0,
        }
    }
}

impl GeoConfig {
    pub fn new(max_speed_km_per_ms: f64) -> Result<Self, GeoError> {
        if !(max_speed_km_per_ms > 0.0 && max_speed_km_per_ms.is_finite()) {
            return Err(GeoError::InvalidSpeed(max_speed_km_per_ms));
        }
        Ok(Self { max_speed_km_per_ms })
    }
}

/// Minimum RTT observed towards one landmark. Callers should pass the minimum
/// over repeated probes: queueing only inflates RTT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttSample {
    pub landmark_id: String,
    pub rtt_ms: f64,
}

/// Haversine distance.
pub fn great_circle_km(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().atan2((1.0 - h).max(0.0).sqrt())
}

pub fn min_feasible_rtt_ms(distance_km: f64, cfg: &GeoConfig) -> f64 {
    2.0 * distance_km / cfg.max_speed_km_per_ms
}

/// Per-sample feasibility detail.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleCheck {
    pub landmark_id: String,
    pub rtt_ms: f64,
    pub d_min_km: f64,
    pub bound_ms: f64,
    /// `rtt_ms − bound_ms`; negative means physically impossible.
    pub slack_ms: f64,
}

impl SampleCheck {
    pub fn violates(&self) -> bool {
        self.rtt_ms < self.bound_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum GeoDecision {
    Accept,
    Reject(Vec<SampleCheck>),
}

impl GeoDecision {
    pub fn is_accept(&self) -> bool {
        matches!(self, GeoDecision::Accept)
    }
}

/// Checks every sample; returned in input order.
pub fn check_samples(
    samples: &[RttSample],
    landmarks: &[Landmark],
    claimed: &CountryGeometry,
    cfg: &GeoConfig,
) -> Result<Vec<SampleCheck>, GeoError> {
    if claimed.points.is_empty() {
        return Err(GeoError::EmptyGeometry(claimed.country));
    }
    let by_id: BTreeMap<&str, &Landmark> = landmarks.iter().map(|l| (l.id.as_str(), l)).collect();
    samples
        .iter()
        .map(|s| {
            let lm = by_id
                .get(s.landmark_id.as_str())
                .ok_or_else(|| GeoError::UnknownLandmark(s.landmark_id.clone()))?;
            if !(s.rtt_ms > 0.0 && s.rtt_ms.is_finite()) {
                return Err(GeoError::InvalidRtt(s.rtt_ms));
            }
            let d_min_km = claimed.min_distance_km(lm.pos);
            let bound_ms = min_feasible_rtt_ms(d_min_km, cfg);
            Ok(SampleCheck {
                landmark_id: s.landmark_id.clone(),
                rtt_ms: s.rtt_ms,
                d_min_km,
                bound_ms,
                slack_ms: s.rtt_ms - bound_ms,
            })
        })
        .collect()
}

/// Rejects when any sample is faster than physically possible from the
/// claimed country; the boundary itself is feasible.
pub fn validate_location(
    samples: &[RttSample],
    landmarks: &[Landmark],
    claimed: &CountryGeometry,
    cfg: &GeoConfig,
) -> Result<GeoDecision, GeoError> {
    let violations: Vec<SampleCheck> = check_samples(samples, landmarks, claimed, cfg)?
        .into_iter()
        .filter(SampleCheck::violates)
        .collect();
    Ok(if violations.is_empty() {
        GeoDecision::Accept
    } else {
        GeoDecision::Reject(violations)
    })
}

fn tsv_records(text: &str, width: usize) -> impl Iterator<Item = Result<(usize, Vec<&str>), GeoError>> {
    text.lines().enumerate().filter_map(move |(i, raw)| {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        Some(if fields.len() == width {
            Ok((i + 1, fields))
        } else {
            Err(GeoError::Format {
                line: i + 1,
                reason: format!("expected {width} tab-separated fields"),
            })
        })
    })
}

fn parse_coord(line: usize, lat: &str, lon: &str) -> Result<LatLon, GeoError> {
    let num = |s: &str| {
        s.parse::<f64>().map_err(|_| GeoError::Format {
            line,
            reason: format!("invalid number `{s}`"),
        })
    };
    LatLon::new(num(lat)?, num(lon)?)
}

/// Parses `id<TAB>lat<TAB>lon` lines.
pub fn parse_landmarks(text: &str) -> Result<Vec<Landmark>, GeoError> {
    tsv_records(text, 3)
        .map(|r| {
            let (line, f) = r?;
            Ok(Landmark {
                id: f[0].to_string(),
                pos: parse_coord(line, f[1], f[2])?,
            })
        })
        .collect()
}

/// Parses `country<TAB>lat<TAB>lon` lines into one geometry per country.
pub fn parse_geometry(text: &str) -> Result<BTreeMap<CountryCode, CountryGeometry>, GeoError> {
    let mut out: BTreeMap<CountryCode, CountryGeometry> = BTreeMap::new();
    for r in tsv_records(text, 3) {
        let (line, f) = r?;
        let cc: CountryCode = f[0]
            .parse()
            .map_err(|reason| GeoError::Format { line, reason })?;
        let p = parse_coord(line, f[1], f[2])?;
        out.entry(cc)
            .or_insert_with(|| CountryGeometry {
                country: cc,
                points: Vec::new(),
            })
            .points
            .push(p);
    }
    Ok(out)
}

/// Parses `landmark_id<TAB>rtt_ms` lines. Repeated landmarks keep their
/// minimum RTT, in order of first appearance.
pub fn parse_samples(text: &str) -> Result<Vec<RttSample>, GeoError> {
    let mut out: Vec<RttSample> = Vec::new();
    for r in tsv_records(text, 2) {
        let (line, f) = r?;
        let rtt: f64 = f[1].parse().map_err(|_| GeoError::Format {
            line,
            reason: format!("invalid rtt `{}`", f[1]),
        })?;
        if !(rtt > 0.0 && rtt.is_finite()) {
            return Err(GeoError::InvalidRtt(rtt));
        }
        match out.iter_mut().find(|s| s.landmark_id == f[0]) {
            Some(s) => s.rtt_ms = s.rtt_ms.min(rtt),
            None => out.push(RttSample {
                landmark_id: f[0].to_string(),
                rtt_ms: rtt,
            }),
        }
    }
    Ok(out)
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<Vec<Landmark>, GeoError> {
    parse_landmarks(&fs::read_to_string(path)?)
}

pub fn load_geometry(path: impl AsRef<Path>) -> Result<BTreeMap<CountryCode, CountryGeometry>, GeoError> {
    parse_geometry(&fs::read_to_string(path)?)
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<RttSample>, GeoError> {
    parse_samples(&fs::read_to_string(path)?)
}

/// Tab-separated per-landmark report followed by the decision line.
pub fn render_report(claimed: CountryCode, checks: &[SampleCheck]) -> String {
    let mut out = String::from("landmark\trtt_ms\td_min_km\tbound_ms\tslack_ms\tstatus\n");
    for c in checks {
        out.push_str(&format!(
            "{}\t{:.3}\t{:.1}\t{:.3}\t{:.3}\t{}\n",
            c.landmark_id,
            c.rtt_ms,
            c.d_min_km,
            c.bound_ms,
            c.slack_ms,
            if c.violates() { "VIOLATION" } else { "ok" }
        ));
    }
    let violations = checks.iter().filter(|c| c.violates()).count();
    if violations == 0 {
        out.push_str(&format!("decision\tAccept\t{claimed}\n"));
    } else {
        out.push_str(&format!("decision\tReject\t{claimed}\t{violations} violation(s)\n"));
    }
    out
}
