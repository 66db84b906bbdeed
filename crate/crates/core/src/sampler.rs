//! Training-set construction: zone-stratified and random site selection,
//! dataset fusion and input-range coverage diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::climate::{ClimateGrid, SiteClimate};
use crate::rng::seeded_stream;
use crate::simulator::{simulate_site, SimConfig, SimError};
use crate::surrogate::{Provenance, TrainingRow, TrainingSet};
use crate::zones::{assign_zone, FeatureVector, ZoneId, ZoneModel};

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("asked for {wanted} sites but only {available} are available")]
    NotEnoughSites { wanted: usize, available: usize },
    #[error("no target data for site {0}")]
    MissingSource(String),
    #[error("no sites to build a training set from")]
    EmptySelection,
    #[error("duplicate (site, month) key ({site_id}, {month}) while fusing")]
    DuplicateKey { site_id: String, month: u8 },
    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

/// A selectable site with its zone.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub site_id: String,
    pub zone: ZoneId,
}

/// Grid sites as candidates, in grid order.
pub fn grid_candidates(grid: &ClimateGrid, model: &ZoneModel) -> Vec<Candidate> {
    grid.sites().map(|s| Candidate { site_id: s.site_id(), zone: model.zone_of_site(s) }).collect()
}

/// Result of a selection. `zones[i]` is the zone of `site_ids[i]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub site_ids: Vec<String>,
    pub zones: Vec<ZoneId>,
    /// Requested zones without any candidate.
    pub skipped_zones: Vec<ZoneId>,
    /// Zones that had fewer candidates than requested; all were taken.
    pub short_zones: Vec<ZoneId>,
}

fn by_zone(cands: &[Candidate]) -> BTreeMap<ZoneId, Vec<&Candidate>> {
    let mut out: BTreeMap<ZoneId, Vec<&Candidate>> = BTreeMap::new();
    for c in cands {
        out.entry(c.zone).or_default().push(c);
    }
    out
}

fn sample_zone(members: &[&Candidate], m: usize, seed: u64, zone: ZoneId, sel: &mut Selection) {
    if members.len() < m {
        sel.short_zones.push(zone);
    }
    let take = m.min(members.len());
    let mut rng = seeded_stream(seed, zone as u64);
    for i in index::sample(&mut rng, members.len(), take) {
        sel.site_ids.push(members[i].site_id.clone());
        sel.zones.push(zone);
    }
}

/// Uniformly samples `sites_per_zone` sites without replacement from each of
/// `zones`; zones with no candidates are skipped and reported.
pub fn diversity_sample(cands: &[Candidate], zones: &[ZoneId], sites_per_zone: usize, seed: u64) -> Selection {
    let groups = by_zone(cands);
    let mut sel = Selection::default();
    for &z in zones {
        match groups.get(&z) {
            Some(members) => sample_zone(members, sites_per_zone, seed, z, &mut sel),
            None => sel.skipped_zones.push(z),
        }
    }
    sel
}

/// Picks `n` zones spread over feature space: the zone farthest from the
/// global mean first, then repeatedly the zone farthest from those chosen.
/// Ties go to the smaller zone id.
pub fn spread_zones(model: &ZoneModel, populated: &[ZoneId], n: usize) -> Vec<ZoneId> {
    let raw = model.raw_index_by_zone();
    let centroid = |z: ZoneId| model.centroids[raw[z - 1]];
    let dist = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut chosen: Vec<ZoneId> = Vec::new();
    let mut pool: Vec<ZoneId> = populated.to_vec();
    pool.sort_unstable();
    while chosen.len() < n && !pool.is_empty() {
        let score = |z: ZoneId| {
            if chosen.is_empty() {
                dist(centroid(z), [0.0; 3])
            } else {
                chosen.iter().map(|&c| dist(centroid(z), centroid(c))).fold(f64::INFINITY, f64::min)
            }
        };
        let mut best = 0;
        for i in 1..pool.len() {
            if score(pool[i]) > score(pool[best]) {
                best = i;
            }
        }
        chosen.push(pool.remove(best));
    }
    chosen.sort_unstable();
    chosen
}

/// Diversity sampling by total site count. With at least as many sites as
/// populated zones the sites are spread round-robin (lower zone ids receive
/// the remainder); with fewer, one site is drawn from each of
/// [`spread_zones`].
pub fn diversity_sample_total(cands: &[Candidate], model: &ZoneModel, total: usize, seed: u64) -> Selection {
    let groups = by_zone(cands);
    let populated: Vec<ZoneId> = groups.keys().copied().collect();
    let mut sel = Selection {
        skipped_zones: (1..=model.k).filter(|z| !groups.contains_key(z)).collect(),
        ..Selection::default()
    };
    if populated.is_empty() {
        return sel;
    }
    if total < populated.len() {
        for z in spread_zones(model, &populated, total) {
            sample_zone(&groups[&z], 1, seed, z, &mut sel);
        }
    } else {
        let base = total / populated.len();
        let extra = total % populated.len();
        for (i, z) in populated.iter().enumerate() {
            sample_zone(&groups[z], base + usize::from(i < extra), seed, *z, &mut sel);
        }
    }
    sel
}

/// Uniform sample of `n` distinct candidates.
pub fn random_sample(cands: &[Candidate], n: usize, seed: u64) -> Result<Selection, SampleError> {
    if n > cands.len() {
        return Err(SampleError::NotEnoughSites { wanted: n, available: cands.len() });
    }
    let mut rng = seeded_stream(seed, u64::MAX);
    let mut sel = Selection::default();
    for i in index::sample(&mut rng, cands.len(), n) {
        sel.site_ids.push(cands[i].site_id.clone());
        sel.zones.push(cands[i].zone);
    }
    Ok(sel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Diversity,
    Random,
}

/// Serialized as `{strategy, sites_per_zone | total_sites, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites_per_zone: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_sites: Option<usize>,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<(), SampleError> {
        let bad = |m: &str| Err(SampleError::InvalidPlan(m.to_string()));
        match (self.strategy, self.sites_per_zone, self.total_sites) {
            (_, Some(0), _) | (_, _, Some(0)) => bad("counts must be positive"),
            (Strategy::Diversity, Some(_), None) | (Strategy::Diversity, None, Some(_)) => Ok(()),
            (Strategy::Diversity, _, _) => bad("diversity plans take exactly one of sites_per_zone, total_sites"),
            (Strategy::Random, None, Some(_)) => Ok(()),
            (Strategy::Random, _, _) => bad("random plans take total_sites only"),
        }
    }

    pub fn select(&self, cands: &[Candidate], model: &ZoneModel) -> Result<Selection, SampleError> {
        self.validate()?;
        match (self.strategy, self.sites_per_zone, self.total_sites) {
            (Strategy::Diversity, Some(m), _) => {
                let zones: Vec<ZoneId> = (1..=model.k).collect();
                Ok(diversity_sample(cands, &zones, m, self.seed))
            }
            (Strategy::Diversity, None, Some(n)) => Ok(diversity_sample_total(cands, model, n, self.seed)),
            (Strategy::Random, _, Some(n)) => random_sample(cands, n, self.seed),
            _ => unreachable!("validated above"),
        }
    }
}

/// A site entering a training set: its identity, location and the climate
/// normals used as inputs.
#[derive(Debug, Clone, Copy)]
pub struct SiteInput<'a> {
    pub site_id: &'a str,
    pub lat: f64,
    pub lon: f64,
    pub climate: &'a SiteClimate,
}

impl<'a> SiteInput<'a> {
    pub fn grid(site_id: &'a str, climate: &'a SiteClimate) -> Self {
        Self { site_id, lat: climate.lat, lon: climate.lon, climate }
    }
}

/// Where monthly targets come from.
#[derive(Debug, Clone, Copy)]
pub enum TargetSource<'a> {
    Simulator(&'a SimConfig),
    Homogenized(&'a BTreeMap<String, [f64; 12]>),
}

/// One row per (site, month) with climate inputs and the chosen targets.
pub fn build_training_set(sites: &[SiteInput<'_>], source: TargetSource<'_>) -> Result<TrainingSet, SampleError> {
    if sites.is_empty() {
        return Err(SampleError::EmptySelection);
    }
    let mut rows = Vec::with_capacity(12 * sites.len());
    for s in sites {
        let (targets, provenance) = match source {
            TargetSource::Simulator(cfg) => (simulate_site(s.climate, cfg)?.monthly, Provenance::Synthetic),
            TargetSource::Homogenized(map) => (
                *map.get(s.site_id).ok_or_else(|| SampleError::MissingSource(s.site_id.to_string()))?,
                Provenance::Field,
            ),
        };
        for (rec, target) in s.climate.months().iter().zip(targets) {
            rows.push(TrainingRow {
                site_id: s.site_id.to_string(),
                lat: s.lat,
                lon: s.lon,
                month: rec.month,
                ghi: rec.ghi,
                tamb: rec.tamb,
                kt: rec.kt,
                target,
                provenance,
            });
        }
    }
    Ok(TrainingSet::new(rows))
}

/// Concatenates two sets, keeping each row's provenance.
pub fn fuse(a: &TrainingSet, b: &TrainingSet) -> Result<TrainingSet, SampleError> {
    let mut keys: BTreeSet<(&str, u8)> = BTreeSet::new();
    for r in a.rows.iter().chain(&b.rows) {
        if !keys.insert((r.site_id.as_str(), r.month)) {
            return Err(SampleError::DuplicateKey { site_id: r.site_id.clone(), month: r.month });
        }
    }
    Ok(TrainingSet::new(a.rows.iter().chain(&b.rows).cloned().collect()))
}

pub const VARIABLES: [&str; 3] = ["ghi", "tamb", "kt"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableCoverage {
    pub variable: String,
    /// `None` for an empty dataset.
    pub observed: Option<(f64, f64)>,
    pub global: (f64, f64),
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub variables: Vec<VariableCoverage>,
    /// Observation (row) count per zone, every zone listed.
    pub zone_counts: BTreeMap<ZoneId, usize>,
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| Some(acc.map_or((v, v), |(lo, hi): (f64, f64)| (lo.min(v), hi.max(v)))))
}

/// Monthly input ranges of `ts` against those of `grid`, and row counts per
/// zone with each site zoned on the annual means of its rows.
pub fn coverage_report(ts: &TrainingSet, grid: &ClimateGrid, model: &ZoneModel) -> CoverageReport {
    let all = || grid.sites().flat_map(|s| s.months().iter());
    let globals = [range(all().map(|r| r.ghi)), range(all().map(|r| r.tamb)), range(all().map(|r| r.kt))];
    let variables = VARIABLES
        .iter()
        .enumerate()
        .map(|(d, name)| {
            let global = globals[d].unwrap_or((0.0, 0.0));
            let observed = range(ts.rows.iter().map(|r| r.inputs()[d]));
            let fraction = match observed {
                Some((lo, hi)) if global.1 > global.0 => {
                    ((hi.min(global.1) - lo.max(global.0)).max(0.0) / (global.1 - global.0)).clamp(0.0, 1.0)
                }
                Some(_) => 1.0,
                None => 0.0,
            };
            VariableCoverage { variable: name.to_string(), observed, global, fraction }
        })
        .collect();

    let mut sums: BTreeMap<&str, ([f64; 3], usize)> = BTreeMap::new();
    for r in &ts.rows {
        let e = sums.entry(r.site_id.as_str()).or_insert(([0.0; 3], 0));
        for (acc, v) in e.0.iter_mut().zip(r.inputs()) {
            *acc += v;
        }
        e.1 += 1;
    }
    let mut zone_counts: BTreeMap<ZoneId, usize> = (1..=model.k).map(|z| (z, 0)).collect();
    for (sum, n) in sums.values() {
        let mean = sum.map(|v| v / *n as f64);
        *zone_counts.entry(assign_zone(model, &FeatureVector::from_array(mean))).or_default() += n;
    }
    CoverageReport { variables, zone_counts }
}

/// Parallel-coordinates rows `source,site_id,month,ghi,tamb,kt`. The grid,
/// when given, is emitted first under source `global`.
pub fn write_parallel_coords_csv(
    grid: Option<&ClimateGrid>,
    sets: &[(&str, &TrainingSet)],
    out: impl Write,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source", "site_id", "month", "ghi", "tamb", "kt"])?;
    if let Some(grid) = grid {
        for s in grid.sites() {
            let id = s.site_id();
            for r in s.months() {
                w.write_record([
                    "global",
                    &id,
                    &r.month.to_string(),
                    &r.ghi.to_string(),
                    &r.tamb.to_string(),
                    &r.kt.to_string(),
                ])?;
            }
        }
    }
    for (source, ts) in sets {
        for r in &ts.rows {
            w.write_record([
                source,
                r.site_id.as_str(),
                &r.month.to_string(),
                &r.ghi.to_string(),
                &r.tamb.to_string(),
                &r.kt.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `site_id,lat,lon,month,ghi,tamb,kt,target,provenance`.
pub fn write_training_set_csv(ts: &TrainingSet, out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["site_id", "lat", "lon", "month", "ghi", "tamb", "kt", "target", "provenance"])?;
    for r in &ts.rows {
        w.write_record([
            r.site_id.clone(),
            r.lat.to_string(),
            r.lon.to_string(),
            r.month.to_string(),
            r.ghi.to_string(),
            r.tamb.to_string(),
            r.kt.to_string(),
            r.target.to_string(),
            r.provenance.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the format written by [`write_training_set_csv`].
pub fn read_training_set_csv(reader: impl std::io::Read) -> csv::Result<TrainingSet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let rows = rdr.deserialize().collect::<csv::Result<Vec<TrainingRow>>>()?;
    Ok(TrainingSet::new(rows))
}
