//! Error metrics, global error maps, per-zone error distributions and the
//! coarse-to-fine functional interpolation workflow.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::climate::{ClimateGrid, GridKey};
use crate::sampler::{build_training_set, SampleError, SiteInput, TargetSource};
use crate::simulator::{simulate_grid, SimConfig, SimError, YieldRecord};
use crate::surrogate::{train, SurrogateModel, TrainConfig, TrainError, TrainReport};
use crate::zones::ZoneId;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("reference value must be positive, got {0}")]
    ZeroReference(f64),
    #[error("no pairs to evaluate")]
    EmptyInput,
    #[error("grids do not align: {0}")]
    MisalignedGrids(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Sampling(#[from] SampleError),
    #[error(transparent)]
    Training(#[from] TrainError),
}

/// `|y_pred − y_ref| / y_ref × 100`.
pub fn relative_error(y_pred: f64, y_ref: f64) -> Result<f64, EvalError> {
    if !(y_ref > 0.0) {
        return Err(EvalError::ZeroReference(y_ref));
    }
    Ok((y_pred - y_ref).abs() / y_ref * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    /// Percent, reference value as denominator.
    pub mape: f64,
    pub r2: f64,
}

/// RMSE, MAPE and R² of `(prediction, reference)` pairs. With a constant
/// reference R² is 1 for a perfect fit and 0 otherwise.
pub fn summary_metrics(pairs: &[(f64, f64)]) -> Result<Metrics, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = pairs.len() as f64;
    let mean_ref = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let ss_res: f64 = pairs.iter().map(|(p, r)| (p - r).powi(2)).sum();
    let ss_tot: f64 = pairs.iter().map(|(_, r)| (r - mean_ref).powi(2)).sum();
    let mut ape = 0.0;
    for &(p, r) in pairs {
        ape += relative_error(p, r)?;
    }
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(Metrics { rmse: (ss_res / n).sqrt(), mape: ape / n, r2 })
}

/// Nearest-rank percentile: the smallest value with at least `p`% of the
/// sample at or below it.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Empirical CDF as `(value, fraction ≤ value)` at each distinct value.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => out.push((*v, frac)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub lat: f64,
    pub lon: f64,
    pub zone: ZoneId,
    pub y_pred: f64,
    pub y_ref: f64,
    pub abs_err: f64,
    pub rel_err_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMap {
    pub rows: Vec<ErrorRow>,
    pub metrics: Metrics,
    /// Nearest-rank percentiles of the relative error: (p, value).
    pub percentiles: Vec<(f64, f64)>,
}

pub const REPORTED_PERCENTILES: [f64; 4] = [50.0, 90.0, 95.0, 99.0];

/// Annual yield of one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteYield {
    pub lat: f64,
    pub lon: f64,
    pub annual: f64,
}

impl From<&YieldRecord> for SiteYield {
    fn from(r: &YieldRecord) -> Self {
        Self { lat: r.lat, lon: r.lon, annual: r.annual }
    }
}

/// Error map of predictions against references on the same sites. Rows are
/// ordered by (lat, lon).
pub fn build_error_map(
    pred: &[SiteYield],
    reference: &[SiteYield],
    zones: &BTreeMap<GridKey, ZoneId>,
) -> Result<ErrorMap, EvalError> {
    let index = |v: &[SiteYield]| -> Result<BTreeMap<GridKey, f64>, EvalError> {
        let mut m = BTreeMap::new();
        for s in v {
            if m.insert(GridKey::from_degrees(s.lat, s.lon), s.annual).is_some() {
                return Err(EvalError::MisalignedGrids(format!("duplicate site ({}, {})", s.lat, s.lon)));
            }
        }
        Ok(m)
    };
    let p = index(pred)?;
    let r = index(reference)?;
    if p.len() != r.len() || p.keys().ne(r.keys()) {
        return Err(EvalError::MisalignedGrids(format!("{} predicted vs {} reference sites", p.len(), r.len())));
    }
    if p.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut rows = Vec::with_capacity(p.len());
    for (key, &y_pred) in &p {
        let y_ref = r[key];
        let zone = *zones.get(key).ok_or_else(|| EvalError::MisalignedGrids(format!("site {key} has no zone")))?;
        rows.push(ErrorRow {
            lat: key.lat(),
            lon: key.lon(),
            zone,
            y_pred,
            y_ref,
            abs_err: (y_pred - y_ref).abs(),
            rel_err_pct: relative_error(y_pred, y_ref)?,
        });
    }
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.y_pred, r.y_ref)).collect();
    let rel: Vec<f64> = rows.iter().map(|r| r.rel_err_pct).collect();
    let percentiles =
        REPORTED_PERCENTILES.iter().map(|&q| (q, nearest_rank_percentile(&rel, q).expect("non-empty"))).collect();
    Ok(ErrorMap { rows, metrics: summary_metrics(&pairs)?, percentiles })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneErrors {
    pub count: usize,
    pub p95: f64,
    pub ecdf: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneReport {
    pub overall_p95: f64,
    pub overall_ecdf: Vec<(f64, f64)>,
    pub per_zone: BTreeMap<ZoneId, ZoneErrors>,
    /// Site count per zone, every zone 1..=k listed.
    pub histogram: BTreeMap<ZoneId, usize>,
    pub notes: Vec<String>,
}

/// Per-zone eCDFs and nearest-rank 95th percentiles of the relative error.
pub fn zone_ecdf(map: &ErrorMap, k: usize) -> Result<ZoneReport, EvalError> {
    let all: Vec<f64> = map.rows.iter().map(|r| r.rel_err_pct).collect();
    let overall_p95 = nearest_rank_percentile(&all, 95.0).ok_or(EvalError::EmptyInput)?;
    let mut per_zone = BTreeMap::new();
    let mut histogram = BTreeMap::new();
    let mut notes = Vec::new();
    for z in 1..=k {
        let errs: Vec<f64> = map.rows.iter().filter(|r| r.zone == z).map(|r| r.rel_err_pct).collect();
        histogram.insert(z, errs.len());
        match nearest_rank_percentile(&errs, 95.0) {
            Some(p95) => {
                per_zone.insert(z, ZoneErrors { count: errs.len(), p95, ecdf: ecdf(&errs) });
            }
            None => notes.push(format!("zone {z} has no evaluated sites")),
        }
    }
    Ok(ZoneReport { overall_p95, overall_ecdf: ecdf(&all), per_zone, histogram, notes })
}

pub fn write_error_map_csv(map: &ErrorMap, out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lat", "lon", "zone", "y_pred", "y_ref", "abs_err_kwh_m2", "rel_err_pct"])?;
    for r in &map.rows {
        w.write_record([
            r.lat.to_string(),
            r.lon.to_string(),
            r.zone.to_string(),
            r.y_pred.to_string(),
            r.y_ref.to_string(),
            r.abs_err.to_string(),
            r.rel_err_pct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `zone,error_pct,cum_fraction`; the pooled distribution uses zone `all`.
pub fn write_ecdf_csv(report: &ZoneReport, out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["zone", "error_pct", "cum_fraction"])?;
    for (zone, z) in &report.per_zone {
        for (e, f) in &z.ecdf {
            w.write_record([zone.to_string(), e.to_string(), f.to_string()])?;
        }
    }
    for (e, f) in &report.overall_ecdf {
        w.write_record(["all".to_string(), e.to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Surrogate predictions for one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitePrediction {
    pub lat: f64,
    pub lon: f64,
    pub monthly: [f64; 12],
    pub annual: f64,
    pub extrapolated: bool,
    pub clipped: bool,
}

impl From<&SitePrediction> for SiteYield {
    fn from(p: &SitePrediction) -> Self {
        Self { lat: p.lat, lon: p.lon, annual: p.annual }
    }
}

/// Predicts every grid site; output is in grid order.
pub fn predict_grid(model: &SurrogateModel, grid: &ClimateGrid) -> Vec<SitePrediction> {
    let sites: Vec<_> = grid.sites().collect();
    sites
        .par_iter()
        .map(|s| {
            let p = model.predict_monthly(s);
            SitePrediction {
                lat: s.lat,
                lon: s.lon,
                monthly: p.monthly,
                annual: p.annual(),
                extrapolated: p.extrapolated,
                clipped: p.clipped,
            }
        })
        .collect()
}

pub fn write_predictions_csv(preds: &[SitePrediction], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["lat".to_string(), "lon".to_string()];
    header.extend((1..=12).map(|m| format!("m{m:02}")));
    header.extend(["annual_kwh_m2", "extrapolated", "clipped"].map(String::from));
    w.write_record(&header)?;
    for p in preds {
        let mut row = vec![p.lat.to_string(), p.lon.to_string()];
        row.extend(p.monthly.iter().map(f64::to_string));
        row.extend([p.annual.to_string(), p.extrapolated.to_string(), p.clipped.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationDiagnostics {
    pub coarse_sites: usize,
    pub fine_sites: usize,
    /// Over all fine-grid site-months.
    pub monthly_r2: f64,
    pub annual_r2: f64,
    /// Annual R² on the coarse training sites.
    pub in_sample_annual_r2: f64,
}

#[derive(Debug, Clone)]
pub struct Interpolation {
    pub model: SurrogateModel,
    pub report: TrainReport,
    pub fine_predictions: Vec<SitePrediction>,
    pub fine_reference: Vec<YieldRecord>,
    pub diagnostics: InterpolationDiagnostics,
}

/// Simulates the coarse grid, trains on every coarse site-month, and
/// predicts the fine grid with R² against the fine-grid simulation.
pub fn functional_interpolate(
    coarse: &ClimateGrid,
    fine: &ClimateGrid,
    cfg: &SimConfig,
    seed: u64,
    train_cfg: &TrainConfig,
) -> Result<Interpolation, EvalError> {
    let ids: Vec<String> = coarse.sites().map(|s| s.site_id()).collect();
    let inputs: Vec<SiteInput> = coarse.sites().zip(&ids).map(|(s, id)| SiteInput::grid(id, s)).collect();
    let ts = build_training_set(&inputs, TargetSource::Simulator(cfg))?;
    let (model, report) = train(&ts, seed, train_cfg)?;

    let coarse_ref = simulate_grid(coarse, cfg)?;
    let coarse_pred = predict_grid(&model, coarse);
    let in_sample: Vec<(f64, f64)> = coarse_pred.iter().zip(&coarse_ref).map(|(p, r)| (p.annual, r.annual)).collect();

    let fine_reference = simulate_grid(fine, cfg)?;
    let fine_predictions = predict_grid(&model, fine);
    let annual: Vec<(f64, f64)> =
        fine_predictions.iter().zip(&fine_reference).map(|(p, r)| (p.annual, r.annual)).collect();
    let monthly: Vec<(f64, f64)> = fine_predictions
        .iter()
        .zip(&fine_reference)
        .flat_map(|(p, r)| p.monthly.iter().copied().zip(r.monthly.iter().copied()))
        .collect();

    let diagnostics = InterpolationDiagnostics {
        coarse_sites: coarse.len(),
        fine_sites: fine.len(),
        monthly_r2: r2_only(&monthly),
        annual_r2: r2_only(&annual),
        in_sample_annual_r2: r2_only(&in_sample),
    };
    Ok(Interpolation { model, report, fine_predictions, fine_reference, diagnostics })
}

fn r2_only(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let ss_res: f64 = pairs.iter().map(|(p, r)| (p - r).powi(2)).sum();
    let ss_tot: f64 = pairs.iter().map(|(_, r)| (r - mean).powi(2)).sum();
    if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub experiment: String,
    pub overall_p95: f64,
    pub per_zone_p95: BTreeMap<String, f64>,
    pub rmse: f64,
    pub mape: f64,
    pub r2: f64,
}

/// Aligned comparison of experiment variants evaluated on the same sites.
pub fn compare_models(variants: &[(&str, &ErrorMap, &ZoneReport)]) -> Result<Vec<ComparisonRow>, EvalError> {
    let Some((_, first, _)) = variants.first() else {
        return Ok(Vec::new());
    };
    let sites = |m: &ErrorMap| m.rows.iter().map(|r| GridKey::from_degrees(r.lat, r.lon)).collect::<Vec<_>>();
    let base = sites(first);
    for (name, map, _) in variants {
        if sites(map) != base {
            return Err(EvalError::MisalignedGrids(format!("variant {name} covers different sites")));
        }
    }
    Ok(variants
        .iter()
        .map(|(name, map, rep)| ComparisonRow {
            experiment: name.to_string(),
            overall_p95: rep.overall_p95,
            per_zone_p95: rep.per_zone.iter().map(|(z, e)| (z.to_string(), e.p95)).collect(),
            rmse: map.metrics.rmse,
            mape: map.metrics.mape,
            r2: map.metrics.r2,
        })
        .collect())
}
