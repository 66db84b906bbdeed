//! Maps heterogeneous field yields onto the simulated per-area reference
//! system and filters sites whose monthly profile disagrees with physics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::climate::ClimateGrid;
use crate::simulator::{simulate_site, SimConfig, SimError, TiltPolicy};

/// Minimum cohort size for the anomaly threshold.
pub const MIN_COHORT: usize = 10;
/// Threshold width in standard deviations of the cohort RMSE.
pub const SIGMA_MULTIPLIER: f64 = 3.0;

pub const FIELD_CSV_HEADER: [&str; 7] = ["site_id", "lat", "lon", "year", "month", "energy_kwh", "capacity_kw"];

#[derive(Debug, Error, PartialEq)]
pub enum HomogenizeError {
    #[error("site {site_id}: no observations for month {month}")]
    IncompleteCoverage { site_id: String, month: u8 },
    #[error("non-positive annual yield (field {y_field}, simulated {y_sim})")]
    NonPositiveYield { y_field: f64, y_sim: f64 },
    #[error("anomaly filter needs at least {MIN_COHORT} sites, got {0}")]
    TooFewSites(usize),
    #[error("site {site_id}: duplicate observation for {year}-{month:02}")]
    DuplicateObservation { site_id: String, year: i32, month: u8 },
    #[error("site {site_id}: invalid observation: {reason}")]
    InvalidObservation { site_id: String, reason: String },
    #[error("no climate data near site {0}")]
    NoClimate(String),
    #[error("field CSV line {line}: {reason}")]
    Schema { line: u64, reason: String },
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub year: i32,
    pub month: u8,
    pub energy_kwh: f64,
}

/// Monthly energy of one fielded system, in its own units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSiteRecord {
    pub site_id: String,
    pub lat: f64,
    pub lon: f64,
    pub capacity_kw: Option<f64>,
    pub observations: Vec<Observation>,
    pub source: String,
}

impl FieldSiteRecord {
    pub fn validate(&self) -> Result<(), HomogenizeError> {
        let mut seen = BTreeSet::new();
        for o in &self.observations {
            if !(1..=12).contains(&o.month) {
                return Err(self.invalid(format!("month {}", o.month)));
            }
            if !(o.energy_kwh >= 0.0) || !o.energy_kwh.is_finite() {
                return Err(self.invalid(format!("energy {}", o.energy_kwh)));
            }
            if !seen.insert((o.year, o.month)) {
                return Err(HomogenizeError::DuplicateObservation {
                    site_id: self.site_id.clone(),
                    year: o.year,
                    month: o.month,
                });
            }
        }
        Ok(())
    }

    fn invalid(&self, reason: String) -> HomogenizeError {
        HomogenizeError::InvalidObservation { site_id: self.site_id.clone(), reason }
    }
}

/// Homogenized yields of one site. `m_sim` is the reference the site was
/// scaled onto; `m_star − m_sim` is the residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedSite {
    pub site_id: String,
    pub lat: f64,
    pub lon: f64,
    pub s: f64,
    pub m_star: [f64; 12],
    pub m_sim: [f64; 12],
    pub rmse_vs_sim: f64,
    pub accepted: bool,
}

/// Mean of each calendar month over the available years.
pub fn average_years(site: &FieldSiteRecord) -> Result<[f64; 12], HomogenizeError> {
    site.validate()?;
    let mut sum = [0.0; 12];
    let mut count = [0usize; 12];
    for o in &site.observations {
        let i = usize::from(o.month - 1);
        sum[i] += o.energy_kwh;
        count[i] += 1;
    }
    let mut out = [0.0; 12];
    for i in 0..12 {
        if count[i] == 0 {
            return Err(HomogenizeError::IncompleteCoverage { site_id: site.site_id.clone(), month: i as u8 + 1 });
        }
        out[i] = sum[i] / count[i] as f64;
    }
    Ok(out)
}

/// Factor mapping field units onto the per-area reference: `s = y_sim / y_field`.
pub fn scaling_factor(y_field: f64, y_sim: f64) -> Result<f64, HomogenizeError> {
    if y_field > 0.0 && y_sim > 0.0 && y_field.is_finite() && y_sim.is_finite() {
        Ok(y_sim / y_field)
    } else {
        Err(HomogenizeError::NonPositiveYield { y_field, y_sim })
    }
}

pub fn scale_monthly(m_field: &[f64; 12], s: f64) -> [f64; 12] {
    m_field.map(|v| s * v)
}

pub fn residual_rmse(m_star: &[f64; 12], m_sim: &[f64; 12]) -> f64 {
    (m_star.iter().zip(m_sim).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 12.0).sqrt()
}

/// Homogenizes a site against given reference yields.
pub fn homogenize_against(site: &FieldSiteRecord, m_sim: [f64; 12]) -> Result<HomogenizedSite, HomogenizeError> {
    let m_field = average_years(site)?;
    let s = scaling_factor(m_field.iter().sum(), m_sim.iter().sum())?;
    let m_star = scale_monthly(&m_field, s);
    Ok(HomogenizedSite {
        site_id: site.site_id.clone(),
        lat: site.lat,
        lon: site.lon,
        s,
        m_star,
        m_sim,
        rmse_vs_sim: residual_rmse(&m_star, &m_sim),
        accepted: true,
    })
}

/// Reference yields of the optimally tilted system on the grid cell nearest
/// to the site.
pub fn reference_yield(
    site_lat: f64,
    site_lon: f64,
    grid: &ClimateGrid,
    cfg: &SimConfig,
) -> Option<Result<[f64; 12], SimError>> {
    let climate = grid.nearest(site_lat, site_lon)?;
    let cfg = SimConfig { tilt_policy: TiltPolicy::Optimal, ..*cfg };
    Some(simulate_site(climate, &cfg).map(|r| r.monthly))
}

/// Full per-site pipeline: year averaging, reference simulation, scaling and
/// residual. Acceptance is decided later by [`filter_anomalous`].
pub fn homogenize(
    site: &FieldSiteRecord,
    grid: &ClimateGrid,
    cfg: &SimConfig,
) -> Result<HomogenizedSite, HomogenizeError> {
    let m_sim = reference_yield(site.lat, site.lon, grid, cfg)
        .ok_or_else(|| HomogenizeError::NoClimate(site.site_id.clone()))??;
    homogenize_against(site, m_sim)
}

/// Homogenizes every site in parallel, preserving input order.
pub fn homogenize_all(
    sites: &[FieldSiteRecord],
    grid: &ClimateGrid,
    cfg: &SimConfig,
) -> Result<Vec<HomogenizedSite>, HomogenizeError> {
    sites.par_iter().map(|s| homogenize(s, grid, cfg)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub accepted: Vec<HomogenizedSite>,
    pub rejected: Vec<HomogenizedSite>,
    pub e_th: f64,
}

/// `mean + 3·std` (population) of the cohort RMSE.
pub fn anomaly_threshold(sites: &[HomogenizedSite]) -> Result<f64, HomogenizeError> {
    if sites.len() < MIN_COHORT {
        return Err(HomogenizeError::TooFewSites(sites.len()));
    }
    let n = sites.len() as f64;
    let mean = sites.iter().map(|s| s.rmse_vs_sim).sum::<f64>() / n;
    let var = sites.iter().map(|s| (s.rmse_vs_sim - mean).powi(2)).sum::<f64>() / n;
    Ok(mean + SIGMA_MULTIPLIER * var.sqrt())
}

/// Partitions sites at a fixed threshold: RMSE > `e_th` is rejected.
pub fn apply_threshold(sites: Vec<HomogenizedSite>, e_th: f64) -> FilterOutcome {
    let (mut accepted, mut rejected) = (Vec::new(), Vec::new());
    for mut s in sites {
        s.accepted = s.rmse_vs_sim <= e_th;
        if s.accepted {
            accepted.push(s);
        } else {
            rejected.push(s);
        }
    }
    FilterOutcome { accepted, rejected, e_th }
}

/// Single-pass cohort filter at `mean + 3·std`.
pub fn filter_anomalous(sites: Vec<HomogenizedSite>) -> Result<FilterOutcome, HomogenizeError> {
    let e_th = anomaly_threshold(&sites)?;
    Ok(apply_threshold(sites, e_th))
}

fn parse<T: std::str::FromStr>(field: &str, name: &str, line: u64) -> Result<T, HomogenizeError> {
    field.trim().parse().map_err(|_| HomogenizeError::Schema { line, reason: format!("bad {name} '{field}'") })
}

/// Reads `site_id,lat,lon,year,month,energy_kwh,capacity_kw`, grouping rows
/// by site in first-seen order.
pub fn read_field_csv(reader: impl Read) -> Result<Vec<FieldSiteRecord>, HomogenizeError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| HomogenizeError::Io(e.to_string()))?.clone();
    if headers.iter().map(str::trim).ne(FIELD_CSV_HEADER) {
        return Err(HomogenizeError::Schema {
            line: 1,
            reason: format!("expected header {}", FIELD_CSV_HEADER.join(",")),
        });
    }
    let mut order: Vec<String> = Vec::new();
    let mut sites: BTreeMap<String, FieldSiteRecord> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| HomogenizeError::Schema {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let site_id = rec[0].trim().to_string();
        let lat: f64 = parse(&rec[1], "lat", line)?;
        let lon: f64 = parse(&rec[2], "lon", line)?;
        let obs = Observation {
            year: parse(&rec[3], "year", line)?,
            month: parse(&rec[4], "month", line)?,
            energy_kwh: parse(&rec[5], "energy_kwh", line)?,
        };
        let capacity = if rec[6].trim().is_empty() { None } else { Some(parse::<f64>(&rec[6], "capacity_kw", line)?) };
        let entry = sites.entry(site_id.clone()).or_insert_with(|| {
            order.push(site_id.clone());
            FieldSiteRecord {
                site_id: site_id.clone(),
                lat,
                lon,
                capacity_kw: capacity,
                observations: Vec::new(),
                source: "csv".into(),
            }
        });
        if entry.lat != lat || entry.lon != lon {
            return Err(HomogenizeError::Schema { line, reason: format!("site {site_id} changes coordinates") });
        }
        entry.observations.push(obs);
    }
    let out: Vec<FieldSiteRecord> = order.into_iter().map(|id| sites.remove(&id).expect("grouped")).collect();
    for s in &out {
        s.validate()?;
    }
    Ok(out)
}

pub fn write_field_csv(sites: &[FieldSiteRecord], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FIELD_CSV_HEADER)?;
    for s in sites {
        let cap = s.capacity_kw.map(|c| c.to_string()).unwrap_or_default();
        for o in &s.observations {
            w.write_record([
                s.site_id.as_str(),
                &s.lat.to_string(),
                &s.lon.to_string(),
                &o.year.to_string(),
                &o.month.to_string(),
                &o.energy_kwh.to_string(),
                &cap,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `site_id,lat,lon,s,rmse,accepted,m01..m12` (m_star values).
pub fn write_homogenized_csv(sites: &[HomogenizedSite], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["site_id", "lat", "lon", "s", "rmse", "accepted"].map(String::from).to_vec();
    header.extend((1..=12).map(|m| format!("m{m:02}")));
    w.write_record(&header)?;
    for s in sites {
        let mut row = vec![
            s.site_id.clone(),
            s.lat.to_string(),
            s.lon.to_string(),
            s.s.to_string(),
            s.rmse_vs_sim.to_string(),
            s.accepted.to_string(),
        ];
        row.extend(s.m_star.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
