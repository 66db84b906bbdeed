//! Gridded monthly climate normals: validation, CSV ingest/export and a
//! deterministic synthetic world for desk-scale experiments.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded_rng;
use crate::solar::extraterrestrial_insolation;
use crate::zones::FeatureVector;

/// Header of the climate CSV file.
pub const CLIMATE_CSV_HEADER: [&str; 6] = ["lat", "lon", "month", "ghi_kwh_m2_day", "tamb_c", "kt"];

/// Admitted slack on `ghi <= H0(lat, month)`.
pub const H0_SLACK: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ClimateError {
    #[error("cannot read climate file {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: schema mismatch: {reason}")]
    SchemaMismatch { line: u64, reason: String },
    #[error("line {line}: field `{field}` out of range ({value})")]
    RangeViolation { line: u64, field: &'static str, value: f64 },
    #[error("line {line}: duplicate record for site ({lat}, {lon}) month {month}")]
    DuplicateRecord { line: u64, lat: f64, lon: f64, month: u8 },
    #[error("site ({lat}, {lon}) is missing month {month}")]
    MissingMonth { lat: f64, lon: f64, month: u8 },
    #[error("invalid synthetic grid request: {0}")]
    InvalidRange(String),
    #[error("climate grid is empty")]
    Empty,
}

/// One month of climate normals at one location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClimateRecord {
    pub lat: f64,
    pub lon: f64,
    pub month: u8,
    /// Monthly-mean daily global horizontal insolation, kWh·m⁻²·day⁻¹.
    pub ghi: f64,
    /// Monthly-mean ambient temperature, °C.
    pub tamb: f64,
    /// Clearness index.
    pub kt: f64,
}

impl ClimateRecord {
    /// Checks the record invariants and names the first violated field.
    pub fn check(&self) -> Result<(), (&'static str, f64)> {
        if !(-90.0..=90.0).contains(&self.lat) || !self.lat.is_finite() {
            return Err(("lat", self.lat));
        }
        if !(-180.0..180.0).contains(&self.lon) || !self.lon.is_finite() {
            return Err(("lon", self.lon));
        }
        if !(1..=12).contains(&self.month) {
            return Err(("month", f64::from(self.month)));
        }
        if !self.tamb.is_finite() {
            return Err(("tamb_c", self.tamb));
        }
        if !(0.0..=1.0).contains(&self.kt) || !self.kt.is_finite() {
            return Err(("kt", self.kt));
        }
        if !self.ghi.is_finite() || self.ghi < 0.0 {
            return Err(("ghi_kwh_m2_day", self.ghi));
        }
        let h0 = extraterrestrial_insolation(self.lat, self.month);
        if self.ghi > (1.0 + H0_SLACK) * h0 + 1e-12 {
            return Err(("ghi_kwh_m2_day", self.ghi));
        }
        Ok(())
    }
}

/// Grid key in integer milli-degrees; ordering is (lat, lon).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridKey {
    pub lat_milli: i64,
    pub lon_milli: i64,
}

impl GridKey {
    pub fn from_degrees(lat: f64, lon: f64) -> Self {
        Self { lat_milli: (lat * 1000.0).round() as i64, lon_milli: (lon * 1000.0).round() as i64 }
    }

    pub fn lat(&self) -> f64 {
        self.lat_milli as f64 / 1000.0
    }

    pub fn lon(&self) -> f64 {
        self.lon_milli as f64 / 1000.0
    }
}

impl fmt::Display for GridKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}_{:.3}", self.lat(), self.lon())
    }
}

/// Twelve months of climate normals at one location, January first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteClimate {
    pub lat: f64,
    pub lon: f64,
    months: Vec<ClimateRecord>,
}

impl SiteClimate {
    /// Builds a site from exactly one record per month (any order).
    pub fn new(lat: f64, lon: f64, records: Vec<ClimateRecord>) -> Result<Self, ClimateError> {
        let mut slots: [Option<ClimateRecord>; 12] = [None; 12];
        for rec in records {
            if GridKey::from_degrees(rec.lat, rec.lon) != GridKey::from_degrees(lat, lon) {
                return Err(ClimateError::SchemaMismatch {
                    line: 0,
                    reason: format!("record at ({}, {}) does not belong to site ({lat}, {lon})", rec.lat, rec.lon),
                });
            }
            if let Err((field, value)) = rec.check() {
                return Err(ClimateError::RangeViolation { line: 0, field, value });
            }
            let slot = &mut slots[usize::from(rec.month - 1)];
            if slot.is_some() {
                return Err(ClimateError::DuplicateRecord { line: 0, lat, lon, month: rec.month });
            }
            *slot = Some(rec);
        }
        let mut months = Vec::with_capacity(12);
        for (i, slot) in slots.into_iter().enumerate() {
            match slot {
                Some(rec) => months.push(rec),
                None => return Err(ClimateError::MissingMonth { lat, lon, month: i as u8 + 1 }),
            }
        }
        Ok(Self { lat, lon, months })
    }

    pub fn key(&self) -> GridKey {
        GridKey::from_degrees(self.lat, self.lon)
    }

    /// Stable textual identifier, `"<lat>_<lon>"` with three decimals.
    pub fn site_id(&self) -> String {
        self.key().to_string()
    }

    /// The 12 monthly records, January to December.
    pub fn months(&self) -> &[ClimateRecord] {
        &self.months
    }

    pub fn month(&self, month: u8) -> &ClimateRecord {
        &self.months[usize::from(month - 1)]
    }

    /// Arithmetic annual means of (ghi, tamb, kt).
    pub fn annual_means(&self) -> FeatureVector {
        annual_means(self)
    }
}

/// Arithmetic mean of each variable over the 12 months.
pub fn annual_means(site: &SiteClimate) -> FeatureVector {
    let n = site.months.len() as f64;
    let (g, t, k) = site.months.iter().fold((0.0, 0.0, 0.0), |(g, t, k), r| (g + r.ghi, t + r.tamb, k + r.kt));
    FeatureVector { ghi_mean: g / n, tamb_mean: t / n, kt_mean: k / n }
}

/// Sites keyed by milli-degree coordinates on a regular lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ClimateGrid {
    /// Lattice spacing (dlat, dlon) in degrees; 0 on an axis with a single value.
    pub resolution: (f64, f64),
    sites: BTreeMap<GridKey, SiteClimate>,
}

impl ClimateGrid {
    /// Assembles a grid; the resolution is the coarsest lattice containing
    /// every site.
    pub fn from_sites(sites: impl IntoIterator<Item = SiteClimate>) -> Result<Self, ClimateError> {
        let mut map = BTreeMap::new();
        for site in sites {
            let key = site.key();
            if map.insert(key, site).is_some() {
                return Err(ClimateError::DuplicateRecord { line: 0, lat: key.lat(), lon: key.lon(), month: 0 });
            }
        }
        if map.is_empty() {
            return Err(ClimateError::Empty);
        }
        let lat_step = lattice_step(map.keys().map(|k| k.lat_milli));
        let lon_step = lattice_step(map.keys().map(|k| k.lon_milli));
        Ok(Self { resolution: (lat_step as f64 / 1000.0, lon_step as f64 / 1000.0), sites: map })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Sites in ascending (lat, lon) order.
    pub fn sites(&self) -> impl ExactSizeIterator<Item = &SiteClimate> + Clone {
        self.sites.values()
    }

    pub fn get(&self, key: &GridKey) -> Option<&SiteClimate> {
        self.sites.get(key)
    }

    pub fn get_by_id(&self, site_id: &str) -> Option<&SiteClimate> {
        let (lat, lon) = site_id.split_once('_')?;
        let key = GridKey::from_degrees(lat.parse().ok()?, lon.parse().ok()?);
        self.sites.get(&key)
    }

    /// Site with the smallest great-circle distance to (lat, lon); ties go to
    /// the first site in (lat, lon) order.
    pub fn nearest(&self, lat: f64, lon: f64) -> Option<&SiteClimate> {
        let mut best: Option<(f64, &SiteClimate)> = None;
        for site in self.sites.values() {
            let d = central_angle(lat, lon, site.lat, site.lon);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, site));
            }
        }
        best.map(|(_, s)| s)
    }

    /// Keeps only the sites for which `keep` returns true.
    pub fn filter(&self, mut keep: impl FnMut(&SiteClimate) -> bool) -> Result<Self, ClimateError> {
        Self::from_sites(self.sites.values().filter(|s| keep(s)).cloned())
    }
}

/// Largest milli-degree step such that every coordinate is an integer number
/// of steps from the smallest one.
fn lattice_step(values: impl Iterator<Item = i64>) -> i64 {
    let mut distinct: Vec<i64> = values.collect();
    distinct.sort_unstable();
    distinct.dedup();
    let first = distinct.first().copied().unwrap_or(0);
    distinct.iter().fold(0, |g, &v| gcd(g, v - first))
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn central_angle(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dl = (lon2 - lon1).to_radians();
    let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
    c.clamp(-1.0, 1.0).acos()
}

/// Reads and validates a climate CSV file.
pub fn load_climate_csv(path: impl AsRef<Path>) -> Result<ClimateGrid, ClimateError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| ClimateError::Io { path: path.display().to_string(), message: e.to_string() })?;
    read_climate_csv(file)
}

/// Reads and validates climate CSV from any reader.
pub fn read_climate_csv(reader: impl std::io::Read) -> Result<ClimateGrid, ClimateError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| ClimateError::SchemaMismatch { line: 1, reason: e.to_string() })?.clone();
    if headers.iter().ne(CLIMATE_CSV_HEADER.iter().copied()) {
        return Err(ClimateError::SchemaMismatch {
            line: 1,
            reason: format!("expected header `{}`", CLIMATE_CSV_HEADER.join(",")),
        });
    }

    let mut by_site: BTreeMap<GridKey, Vec<(u64, ClimateRecord)>> = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| ClimateError::SchemaMismatch {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != CLIMATE_CSV_HEADER.len() {
            return Err(ClimateError::SchemaMismatch { line, reason: format!("expected 6 fields, got {}", row.len()) });
        }
        let num = |i: usize| -> Result<f64, ClimateError> {
            row[i].parse::<f64>().map_err(|_| ClimateError::SchemaMismatch {
                line,
                reason: format!("`{}` is not a number in column {}", &row[i], CLIMATE_CSV_HEADER[i]),
            })
        };
        let month_raw = num(2)?;
        if month_raw.fract() != 0.0 || !(1.0..=12.0).contains(&month_raw) {
            return Err(ClimateError::RangeViolation { line, field: "month", value: month_raw });
        }
        let rec = ClimateRecord {
            lat: num(0)?,
            lon: num(1)?,
            month: month_raw as u8,
            ghi: num(3)?,
            tamb: num(4)?,
            kt: num(5)?,
        };
        if let Err((field, value)) = rec.check() {
            return Err(ClimateError::RangeViolation { line, field, value });
        }
        let key = GridKey::from_degrees(rec.lat, rec.lon);
        let entry = by_site.entry(key).or_default();
        if entry.iter().any(|(_, r)| r.month == rec.month) {
            return Err(ClimateError::DuplicateRecord { line, lat: rec.lat, lon: rec.lon, month: rec.month });
        }
        entry.push((line, rec));
    }

    let mut sites = Vec::with_capacity(by_site.len());
    for (key, rows) in by_site {
        let records = rows.into_iter().map(|(_, r)| r).collect();
        sites.push(SiteClimate::new(key.lat(), key.lon(), records)?);
    }
    ClimateGrid::from_sites(sites)
}

/// Writes a grid in the climate CSV schema, sites in (lat, lon) order.
pub fn write_climate_csv(grid: &ClimateGrid, writer: impl std::io::Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CLIMATE_CSV_HEADER)?;
    for site in grid.sites() {
        for r in site.months() {
            w.write_record([
                r.lat.to_string(),
                r.lon.to_string(),
                r.month.to_string(),
                r.ghi.to_string(),
                r.tamb.to_string(),
                r.kt.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Lower and upper bound of generated clearness indices.
pub const SYNTH_KT_RANGE: (f64, f64) = (0.25, 0.80);

/// Seeded longitude structure of the synthetic world.
#[derive(Debug, Clone)]
struct SynthWorld {
    amps: [f64; 3],
    phases: [f64; 3],
}

impl SynthWorld {
    fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut amps = [0.0; 3];
        let mut phases = [0.0; 3];
        for i in 0..3 {
            amps[i] = rng.random_range(0.3..1.0) / (i as f64 + 1.0);
            phases[i] = rng.random_range(0.0..2.0 * PI);
        }
        Self { amps, phases }
    }

    /// Continentality in (0, 1): 1 is a deep continental interior.
    fn continentality(&self, abs_lat: f64, lon: f64) -> f64 {
        let x = lon.to_radians();
        let tilt = 0.6 * abs_lat.to_radians();
        let raw: f64 = (0..3).map(|i| self.amps[i] * ((i as f64 + 1.0) * x + self.phases[i] + tilt).sin()).sum();
        0.5 + 0.5 * (1.5 * raw).tanh()
    }

    /// Hemisphere-aware seasonal phase: +1 at local mid-summer, -1 at mid-winter.
    fn season(lat: f64, month: u8) -> f64 {
        let peak = if lat >= 0.0 { 7.0 } else { 1.0 };
        (2.0 * PI * (f64::from(month) - peak) / 12.0).cos()
    }

    fn mean_temperature(abs_lat: f64, cont: f64) -> f64 {
        let x = abs_lat / 60.0;
        27.0 - 30.0 * x.powf(1.7) - 8.0 * (cont - 0.5) * x
    }

    fn temperature_amplitude(abs_lat: f64, cont: f64) -> f64 {
        let x = abs_lat / 60.0;
        (4.0 + 16.0 * cont) * x.powf(1.3)
    }

    fn clearness(abs_lat: f64, cont: f64, season: f64) -> f64 {
        let x = abs_lat / 60.0;
        let subtropical = (-((abs_lat - 24.0) / 11.0).powi(2)).exp();
        let base = 0.47 + 0.24 * subtropical - 0.05 * x;
        let dryness = 0.16 * (cont - 0.5) * (-((abs_lat - 24.0) / 14.0).powi(2)).exp();
        let seasonal = 0.04 * season * x.min(1.0);
        (base + dryness + seasonal).clamp(SYNTH_KT_RANGE.0, SYNTH_KT_RANGE.1)
    }

    fn record(&self, lat: f64, lon: f64, month: u8) -> ClimateRecord {
        let abs_lat = lat.abs();
        let cont = self.continentality(abs_lat, lon);
        let season = Self::season(lat, month);
        let kt = Self::clearness(abs_lat, cont, season);
        let tamb = Self::mean_temperature(abs_lat, cont) + Self::temperature_amplitude(abs_lat, cont) * season;
        let ghi = kt * extraterrestrial_insolation(lat, month);
        ClimateRecord { lat, lon, month, ghi, tamb, kt }
    }
}

/// Generates a deterministic, equator-symmetric synthetic world.
///
/// Latitudes run from `lat_range.0` to `lat_range.1` inclusive in steps of
/// `dlat`; longitudes from -180 (inclusive) to 180 (exclusive) in steps of
/// `dlon`. Clearness indices lie in [0.25, 0.80], temperatures follow a
/// latitude- and continentality-dependent seasonal sinusoid, and
/// `ghi = kt · H0(lat, month)`.
pub fn synth_climate(seed: u64, dlat: f64, dlon: f64, lat_range: (f64, f64)) -> Result<ClimateGrid, ClimateError> {
    let (lo, hi) = lat_range;
    if !(dlat > 0.0 && dlon > 0.0 && dlat.is_finite() && dlon.is_finite()) {
        return Err(ClimateError::InvalidRange(format!("steps must be positive, got ({dlat}, {dlon})")));
    }
    if !(lo < hi && lo >= -90.0 && hi <= 90.0) {
        return Err(ClimateError::InvalidRange(format!("latitude range [{lo}, {hi}] is not within [-90, 90]")));
    }
    let world = SynthWorld::new(seed);
    let n_lat = ((hi - lo) / dlat + 1e-9).floor() as usize + 1;
    let n_lon = ((360.0 / dlon) - 1e-9).ceil() as usize;
    let mut sites = Vec::with_capacity(n_lat * n_lon);
    for i in 0..n_lat {
        let lat = round_milli(lo + i as f64 * dlat);
        for j in 0..n_lon {
            let lon = round_milli(-180.0 + j as f64 * dlon);
            let records = (1..=12).map(|m| world.record(lat, lon, m)).collect();
            sites.push(SiteClimate::new(lat, lon, records)?);
        }
    }
    ClimateGrid::from_sites(sites)
}

fn round_milli(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}
