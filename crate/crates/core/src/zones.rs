//! PV climate zones: k-means on annual-mean (GHI, T_amb, k_t).
//!
//! Features are z-scored before clustering because the three variables have
//! incommensurate units. Lloyd's algorithm runs from k-means++ seeds; the best
//! of [`RESTARTS`] seeded restarts (by inertia) is kept and the clusters are
//! renumbered so that zone 1 has the highest centroid GHI.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::climate::{ClimateGrid, GridKey, SiteClimate};
use crate::rng::{seeded_stream, SeededRng};

pub const DEFAULT_K: usize = 7;
pub const RESTARTS: u64 = 10;
pub const MAX_ITERATIONS: usize = 300;
pub const SHIFT_TOLERANCE: f64 = 1e-8;

/// Canonical zone identifier, 1..=k.
pub type ZoneId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum ZoneError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("feature `{0}` has zero variance")]
    DegenerateDimension(&'static str),
    #[error("k must be at least 1")]
    InvalidK,
}

const FEATURE_NAMES: [&str; 3] = ["ghi_mean", "tamb_mean", "kt_mean"];

/// Annual-mean climate features of one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub ghi_mean: f64,
    pub tamb_mean: f64,
    pub kt_mean: f64,
}

impl FeatureVector {
    pub fn to_array(self) -> [f64; 3] {
        [self.ghi_mean, self.tamb_mean, self.kt_mean]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self { ghi_mean: a[0], tamb_mean: a[1], kt_mean: a[2] }
    }
}

/// Per-dimension z-score statistics (population standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: [f64; 3],
    pub stds: [f64; 3],
}

impl Standardization {
    pub fn apply(&self, f: &FeatureVector) -> [f64; 3] {
        let a = f.to_array();
        std::array::from_fn(|d| (a[d] - self.means[d]) / self.stds[d])
    }

    pub fn invert(&self, z: &[f64; 3]) -> FeatureVector {
        FeatureVector::from_array(std::array::from_fn(|d| z[d] * self.stds[d] + self.means[d]))
    }
}

/// Z-scores each feature dimension over the input set.
pub fn standardize(features: &[FeatureVector]) -> Result<(Vec<[f64; 3]>, Standardization), ZoneError> {
    if features.len() < 2 {
        return Err(ZoneError::TooFewPoints { needed: 2, got: features.len() });
    }
    let n = features.len() as f64;
    let mut means = [0.0; 3];
    for f in features {
        for (m, v) in means.iter_mut().zip(f.to_array()) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut stds = [0.0; 3];
    for f in features {
        for (d, v) in f.to_array().into_iter().enumerate() {
            stds[d] += (v - means[d]).powi(2);
        }
    }
    for (d, s) in stds.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s <= 1e-12 * means[d].abs().max(1.0) {
            return Err(ZoneError::DegenerateDimension(FEATURE_NAMES[d]));
        }
    }
    let stats = Standardization { means, stds };
    Ok((features.iter().map(|f| stats.apply(f)).collect(), stats))
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Result of one k-means fit on standardized points.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// Centroids in raw cluster order.
    pub centroids: Vec<[f64; 3]>,
    /// Raw cluster index of every input point.
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_trace: Vec<f64>,
    /// Restart that produced the fit.
    pub restart: u64,
}

fn nearest(centroids: &[[f64; 3]], p: &[f64; 3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(centroid, p);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[[f64; 3]], k: usize, rng: &mut SeededRng) -> Vec<[f64; 3]> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[[f64; 3]], mut centroids: Vec<[f64; 3]>) -> (Vec<[f64; 3]>, Vec<usize>, Vec<f64>) {
    let k = centroids.len();
    let mut assignments = vec![0; points.len()];
    let mut trace = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let mut inertia = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (c, d) = nearest(&centroids, p);
            *a = c;
            inertia += d;
        }
        trace.push(inertia);

        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            for d in 0..3 {
                sums[a][d] += p[d];
            }
        }
        let mut updated = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                updated[c] = std::array::from_fn(|d| sums[c][d] / counts[c] as f64);
            }
        }
        // Reseed empty clusters at the point farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        let di = sq_dist(&points[i], &updated[assignments[i]]);
                        let dj = sq_dist(&points[j], &updated[assignments[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .unwrap_or(0);
                updated[c] = points[far];
                assignments[far] = c;
            }
        }
        let shift = centroids.iter().zip(&updated).map(|(a, b)| sq_dist(a, b).sqrt()).fold(0.0, f64::max);
        centroids = updated;
        if shift < SHIFT_TOLERANCE {
            break;
        }
    }
    let mut inertia = 0.0;
    for (a, p) in assignments.iter_mut().zip(points) {
        let (c, d) = nearest(&centroids, p);
        *a = c;
        inertia += d;
    }
    if trace.last().is_none_or(|&last| inertia != last) {
        trace.push(inertia);
    }
    (centroids, assignments, trace)
}

/// k-means++ seeded Lloyd iterations, best of [`RESTARTS`] restarts.
///
/// Restart `r` draws from stream `r` of `seed`, so restarts are independent
/// and the winner (lowest inertia, then lowest restart index) is
/// deterministic.
pub fn kmeans_fit(points: &[[f64; 3]], k: usize, seed: u64) -> Result<KMeansFit, ZoneError> {
    if k == 0 {
        return Err(ZoneError::InvalidK);
    }
    if points.len() < k {
        return Err(ZoneError::TooFewPoints { needed: k, got: points.len() });
    }
    let mut best: Option<KMeansFit> = None;
    for restart in 0..RESTARTS {
        let mut rng = seeded_stream(seed, restart);
        let init = kmeans_plus_plus(points, k, &mut rng);
        let (centroids, assignments, inertia_trace) = lloyd(points, init);
        let inertia = *inertia_trace.last().unwrap_or(&0.0);
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeansFit { centroids, assignments, inertia, inertia_trace, restart });
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Fitted zone model. Centroids are stored in raw cluster order and
/// `label_order[raw] = zone id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneModel {
    pub k: usize,
    pub feature_means: [f64; 3],
    pub feature_stds: [f64; 3],
    pub centroids: Vec<[f64; 3]>,
    pub label_order: Vec<ZoneId>,
    pub seed: u64,
}

impl ZoneModel {
    pub fn standardization(&self) -> Standardization {
        Standardization { means: self.feature_means, stds: self.feature_stds }
    }

    /// Raw cluster index of each canonical zone, zone 1 first.
    pub fn raw_index_by_zone(&self) -> Vec<usize> {
        let mut out = vec![0; self.k];
        for (raw, &z) in self.label_order.iter().enumerate() {
            out[z - 1] = raw;
        }
        out
    }

    /// De-standardized centroid of `zone`.
    pub fn centroid_features(&self, zone: ZoneId) -> FeatureVector {
        let raw = self.raw_index_by_zone()[zone - 1];
        self.standardization().invert(&self.centroids[raw])
    }

    pub fn zone_of_site(&self, site: &SiteClimate) -> ZoneId {
        assign_zone(self, &site.annual_means())
    }

    /// Zone of every grid site.
    pub fn zone_map(&self, grid: &ClimateGrid) -> BTreeMap<GridKey, ZoneId> {
        grid.sites().map(|s| (s.key(), self.zone_of_site(s))).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("zone model serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// Standardizes annual means, clusters them and canonicalizes the labels.
pub fn fit_zone_model(features: &[FeatureVector], k: usize, seed: u64) -> Result<ZoneModel, ZoneError> {
    let (points, stats) = standardize(features)?;
    let fit = kmeans_fit(&points, k, seed)?;
    Ok(canonical_relabel(ZoneModel {
        k,
        feature_means: stats.means,
        feature_stds: stats.stds,
        centroids: fit.centroids,
        label_order: (1..=k).collect(),
        seed,
    }))
}

/// Fits zones on the annual means of every grid site.
pub fn fit_grid(grid: &ClimateGrid, k: usize, seed: u64) -> Result<ZoneModel, ZoneError> {
    let features: Vec<FeatureVector> = grid.sites().map(SiteClimate::annual_means).collect();
    fit_zone_model(&features, k, seed)
}

/// Renumbers zones by descending centroid GHI (ties by raw index).
pub fn canonical_relabel(mut model: ZoneModel) -> ZoneModel {
    let mut raw: Vec<usize> = (0..model.centroids.len()).collect();
    raw.sort_by(|&a, &b| model.centroids[b][0].total_cmp(&model.centroids[a][0]).then(a.cmp(&b)));
    let mut label_order = vec![0; raw.len()];
    for (rank, &r) in raw.iter().enumerate() {
        label_order[r] = rank + 1;
    }
    model.label_order = label_order;
    model
}

/// Nearest centroid in standardized space; ties go to the smaller zone id.
pub fn assign_zone(model: &ZoneModel, f: &FeatureVector) -> ZoneId {
    let z = model.standardization().apply(f);
    let mut best = (1, f64::INFINITY);
    for (zone_idx, raw) in model.raw_index_by_zone().into_iter().enumerate() {
        let d = sq_dist(&model.centroids[raw], &z);
        if d < best.1 {
            best = (zone_idx + 1, d);
        }
    }
    best.0
}

/// Writes the `lat,lon,zone` zone map export.
pub fn write_zone_map_csv(model: &ZoneModel, grid: &ClimateGrid, out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lat", "lon", "zone"])?;
    for site in grid.sites() {
        w.write_record([site.lat.to_string(), site.lon.to_string(), model.zone_of_site(site).to_string()])?;
    }
    w.flush()?;
    Ok(())
}
