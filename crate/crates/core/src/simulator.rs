//! Monthly yield potential of fixed-tilt monofacial farms from climate normals.
//!
//! The chain is: Erbs diffuse fraction → isotropic-sky transposition with the
//! Liu–Jordan beam factor on the representative day → NOCT module
//! temperature at the mean daytime plane-of-array irradiance → linear power
//! temperature coefficient. Row-to-row shading is not modelled, so `pitch` and
//! `module_height` are carried for the record only.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::climate::{ClimateGrid, ClimateRecord, SiteClimate};
use crate::solar::{days_in_month, declination, representative_day, sunset_hour_angle};

/// Ground reflectance used for the reflected component.
pub const ALBEDO: f64 = 0.2;
/// Upper end of the tilt search, degrees.
pub const MAX_SEARCH_TILT: u32 = 60;
/// Azimuth step of the optional azimuth search, degrees.
pub const AZIMUTH_SEARCH_STEP: u32 = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("tilt {0} is outside [0, 90] degrees")]
    InvalidTilt(f64),
    #[error("clearness index {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiltPolicy {
    Fixed(f64),
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AzimuthPolicy {
    EquatorFacing,
    Optimal,
}

/// Farm parameters. Defaults follow a 24%-efficient monofacial module on a
/// fixed rack with 3 m pitch and 1 m module height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub eta_stc: f64,
    /// Power temperature coefficient, 1/°C.
    pub gamma_p: f64,
    /// Nominal operating cell temperature, °C.
    pub noct: f64,
    pub pitch: f64,
    pub module_height: f64,
    pub tilt_policy: TiltPolicy,
    pub azimuth_policy: AzimuthPolicy,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            eta_stc: 0.24,
            gamma_p: -0.0035,
            noct: 45.0,
            pitch: 3.0,
            module_height: 1.0,
            tilt_policy: TiltPolicy::Optimal,
            azimuth_policy: AzimuthPolicy::EquatorFacing,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.eta_stc >= 0.0 && self.eta_stc < 1.0) {
            return Err(SimError::InvalidConfig(format!("eta_stc {} not in [0, 1)", self.eta_stc)));
        }
        if !(self.gamma_p <= 0.0) {
            return Err(SimError::InvalidConfig(format!("gamma_p {} must not be positive", self.gamma_p)));
        }
        if !(self.pitch > 0.0) {
            return Err(SimError::InvalidConfig(format!("pitch {} must be positive", self.pitch)));
        }
        if let TiltPolicy::Fixed(t) = self.tilt_policy {
            check_tilt(t)?;
        }
        Ok(())
    }
}

/// Simulated yields of one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldRecord {
    pub lat: f64,
    pub lon: f64,
    /// Monthly yield, kWh·m⁻²·month⁻¹, January first.
    pub monthly: [f64; 12],
    /// Annual yield, kWh·m⁻²·yr⁻¹.
    pub annual: f64,
    pub tilt_used: f64,
    pub azimuth_used: f64,
}

impl YieldRecord {
    pub fn new(lat: f64, lon: f64, monthly: [f64; 12], tilt_used: f64, azimuth_used: f64) -> Self {
        Self { lat, lon, monthly, annual: monthly.iter().sum(), tilt_used, azimuth_used }
    }
}

fn check_tilt(tilt: f64) -> Result<(), SimError> {
    if (0.0..=90.0).contains(&tilt) {
        Ok(())
    } else {
        Err(SimError::InvalidTilt(tilt))
    }
}

/// Erbs et al. diffuse fraction of global horizontal irradiation.
pub fn diffuse_fraction(kt: f64) -> Result<f64, SimError> {
    if !(0.0..=1.0).contains(&kt) {
        return Err(SimError::OutOfRange(kt));
    }
    Ok(if kt <= 0.22 {
        1.0 - 0.09 * kt
    } else if kt <= 0.80 {
        0.9511 - 0.1604 * kt + 4.388 * kt.powi(2) - 16.638 * kt.powi(3) + 12.336 * kt.powi(4)
    } else {
        0.165
    })
}

/// sin and cos of an angle in degrees, exact at multiples of 90°.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        r.to_radians().sin_cos()
    }
}

/// ∫ (a + b cos w + c sin w) dw over [w1, w2].
fn integrate_cosine(a: f64, b: f64, c: f64, w1: f64, w2: f64) -> f64 {
    a * (w2 - w1) + b * (w2.sin() - w1.sin()) - c * (w2.cos() - w1.cos())
}

/// Ratio of daily beam irradiation on the tilted plane to that on the
/// horizontal, on the representative day of `month`.
///
/// `azimuth` is a compass bearing of the surface normal (180° = south). Beam
/// is counted only while the sun is above both the horizon and the plane.
pub fn beam_tilt_factor(lat: f64, month: u8, tilt: f64, azimuth: f64) -> f64 {
    let phi = lat.to_radians();
    let decl = declination(representative_day(month));
    let ws = sunset_hour_angle(phi, decl);
    let (sd, cd) = decl.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let denom = 2.0 * (sp * sd * ws + cp * cd * ws.sin());
    if ws == 0.0 || denom <= 0.0 {
        return 0.0;
    }
    let (sb, cb) = sin_cos_deg(tilt);
    let (sg, cg) = sin_cos_deg(azimuth - 180.0);
    let a = sd * (sp * cb - cp * sb * cg);
    let b = cd * (cp * cb + sp * sb * cg);
    let c = cd * sb * sg;

    let r = b.hypot(c);
    let numer = if r <= a.abs() {
        if a > 0.0 {
            integrate_cosine(a, b, c, -ws, ws)
        } else {
            0.0
        }
    } else {
        let psi = c.atan2(b);
        let half = (-a / r).acos();
        (-1..=1)
            .map(|k| {
                let centre = psi + 2.0 * PI * f64::from(k);
                let lo = (centre - half).max(-ws);
                let hi = (centre + half).min(ws);
                if hi > lo {
                    integrate_cosine(a, b, c, lo, hi)
                } else {
                    0.0
                }
            })
            .sum()
    };
    (numer / denom).max(0.0)
}

/// Monthly-mean daily plane-of-array insolation, kWh·m⁻²·day⁻¹, from
/// isotropic-sky transposition with ground albedo [`ALBEDO`].
pub fn poa_insolation(rec: &ClimateRecord, tilt: f64, azimuth: f64) -> Result<f64, SimError> {
    check_tilt(tilt)?;
    let fd = diffuse_fraction(rec.kt)?;
    Ok(transpose(rec.ghi, fd, rec.lat, rec.month, tilt, azimuth))
}

fn transpose(ghi: f64, fd: f64, lat: f64, month: u8, tilt: f64, azimuth: f64) -> f64 {
    if tilt == 0.0 {
        // Rb = 1 and the sky view factor is 1 on the horizontal plane.
        return ghi;
    }
    let cos_tilt = sin_cos_deg(tilt).1;
    let beam = ghi * (1.0 - fd) * beam_tilt_factor(lat, month, tilt, azimuth);
    let diffuse = ghi * fd * (1.0 + cos_tilt) / 2.0;
    let ground = ghi * ALBEDO * (1.0 - cos_tilt) / 2.0;
    (beam + diffuse + ground).max(0.0)
}

/// NOCT cell temperature model.
pub fn module_temperature(tamb: f64, poa_w: f64, noct: f64) -> f64 {
    tamb + (noct - 20.0) / 800.0 * poa_w
}

/// Day length of the representative day, hours.
fn daylight_hours(lat: f64, month: u8) -> f64 {
    crate::solar::daylight_hours(lat, month)
}

/// Yield of one month from its plane-of-array insolation.
fn month_yield(rec: &ClimateRecord, poa_daily: f64, cfg: &SimConfig) -> f64 {
    let hours = daylight_hours(rec.lat, rec.month);
    if hours <= 0.0 || poa_daily <= 0.0 {
        return 0.0;
    }
    let poa_w = poa_daily / hours * 1000.0;
    let tmod = module_temperature(rec.tamb, poa_w, cfg.noct);
    let factor = 1.0 + cfg.gamma_p * (tmod - 25.0);
    (f64::from(days_in_month(rec.month)) * poa_daily * cfg.eta_stc * factor).max(0.0)
}

/// Monthly yields, kWh·m⁻²·month⁻¹, for a plane at `tilt`/`azimuth`.
pub fn monthly_yield(site: &SiteClimate, cfg: &SimConfig, tilt: f64, azimuth: f64) -> Result<[f64; 12], SimError> {
    check_tilt(tilt)?;
    let mut out = [0.0; 12];
    for (slot, rec) in out.iter_mut().zip(site.months()) {
        let poa = poa_insolation(rec, tilt, azimuth)?;
        *slot = month_yield(rec, poa, cfg);
    }
    Ok(out)
}

fn equator_facing(lat: f64) -> f64 {
    if lat >= 0.0 {
        180.0
    } else {
        0.0
    }
}

/// Annual yield for every candidate tilt at a fixed azimuth.
fn annual_by_tilt(site: &SiteClimate, cfg: &SimConfig, azimuth: f64) -> Result<Vec<f64>, SimError> {
    let mut fds = [0.0; 12];
    for (fd, rec) in fds.iter_mut().zip(site.months()) {
        *fd = diffuse_fraction(rec.kt)?;
    }
    Ok((0..=MAX_SEARCH_TILT)
        .map(|t| {
            let tilt = f64::from(t);
            site.months()
                .iter()
                .zip(&fds)
                .map(|(rec, &fd)| month_yield(rec, transpose(rec.ghi, fd, rec.lat, rec.month, tilt, azimuth), cfg))
                .sum()
        })
        .collect())
}

/// First index of the strict maximum, so ties resolve to the smaller tilt.
fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Grid search over integer tilts 0..=60° facing the equator, maximizing
/// annual yield. Ties go to the smaller tilt.
pub fn optimal_tilt(site: &SiteClimate, cfg: &SimConfig) -> Result<(f64, f64), SimError> {
    let azimuth = equator_facing(site.lat);
    let (t, _) = argmax(&annual_by_tilt(site, cfg, azimuth)?);
    Ok((t as f64, azimuth))
}

/// Joint search over tilt and azimuth (5° steps). Ties prefer the smaller
/// tilt, then the equator-facing bearing, then the smaller bearing.
pub fn optimal_orientation(site: &SiteClimate, cfg: &SimConfig) -> Result<(f64, f64), SimError> {
    let facing = equator_facing(site.lat);
    let (t0, y0) = argmax(&annual_by_tilt(site, cfg, facing)?);
    let mut best = (t0, facing, y0);
    for step in 0..(360 / AZIMUTH_SEARCH_STEP) {
        let az = f64::from(step * AZIMUTH_SEARCH_STEP);
        if az == facing {
            continue;
        }
        let (t, y) = argmax(&annual_by_tilt(site, cfg, az)?);
        if y > best.2 || (y == best.2 && t < best.0) {
            best = (t, az, y);
        }
    }
    Ok((best.0 as f64, best.1))
}

/// Simulates one site under the tilt and azimuth policies of `cfg`.
pub fn simulate_site(site: &SiteClimate, cfg: &SimConfig) -> Result<YieldRecord, SimError> {
    cfg.validate()?;
    let (tilt, azimuth) = match (cfg.tilt_policy, cfg.azimuth_policy) {
        (TiltPolicy::Optimal, AzimuthPolicy::EquatorFacing) => optimal_tilt(site, cfg)?,
        (TiltPolicy::Optimal, AzimuthPolicy::Optimal) => optimal_orientation(site, cfg)?,
        (TiltPolicy::Fixed(t), AzimuthPolicy::EquatorFacing) => (t, equator_facing(site.lat)),
        (TiltPolicy::Fixed(t), AzimuthPolicy::Optimal) => {
            let mut best = (equator_facing(site.lat), f64::NEG_INFINITY);
            for step in 0..(360 / AZIMUTH_SEARCH_STEP) {
                let az = f64::from(step * AZIMUTH_SEARCH_STEP);
                let y: f64 = monthly_yield(site, cfg, t, az)?.iter().sum();
                if y > best.1 {
                    best = (az, y);
                }
            }
            (t, best.0)
        }
    };
    let monthly = monthly_yield(site, cfg, tilt, azimuth)?;
    Ok(YieldRecord::new(site.lat, site.lon, monthly, tilt, azimuth))
}

/// Simulates every grid site in parallel; output is in (lat, lon) order.
pub fn simulate_grid(grid: &ClimateGrid, cfg: &SimConfig) -> Result<Vec<YieldRecord>, SimError> {
    cfg.validate()?;
    let sites: Vec<&SiteClimate> = grid.sites().collect();
    sites.par_iter().map(|s| simulate_site(s, cfg)).collect()
}

/// Header of the yield export CSV.
pub fn yield_csv_header() -> Vec<String> {
    let mut h = vec!["lat".to_string(), "lon".to_string(), "tilt_deg".to_string()];
    h.extend((1..=12).map(|m| format!("m{m:02}")));
    h.push("annual_kwh_m2".to_string());
    h
}

pub fn write_yield_csv(records: &[YieldRecord], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(yield_csv_header())?;
    for r in records {
        let mut row = vec![r.lat.to_string(), r.lon.to_string(), r.tilt_used.to_string()];
        row.extend(r.monthly.iter().map(f64::to_string));
        row.push(r.annual.to_string());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}
