//! Declarative experiment runner: world → zoning → datasets → training →
//! prediction → evaluation, every artifact hashed into a manifest.
//!
//! Also hosts the synthetic field-data generator used as a stand-in for
//! crowd-sourced fleets: per-site multiplicative capacity, relative noise and
//! optional injected anomalies with an injection log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::climate::{load_climate_csv, synth_climate, write_climate_csv, ClimateGrid, GridKey, SiteClimate};
use crate::evaluate::{
    build_error_map, compare_models, predict_grid, write_ecdf_csv, write_error_map_csv, write_predictions_csv,
    zone_ecdf, ComparisonRow, Metrics, SiteYield,
};
use crate::homogenize::{
    filter_anomalous, homogenize_all, read_field_csv, reference_yield, write_field_csv, write_homogenized_csv,
    FieldSiteRecord, Observation,
};
use crate::rng::seeded_stream;
use crate::sampler::{
    build_training_set, coverage_report, fuse, write_parallel_coords_csv, write_training_set_csv, Candidate,
    SamplingPlan, Selection, SiteInput, TargetSource,
};
use crate::simulator::{simulate_grid, write_yield_csv, SimConfig, SimError, YieldRecord};
use crate::surrogate::{train, TrainConfig, TrainingSet};
use crate::zones::{fit_grid, write_zone_map_csv, ZoneId, ZoneModel, DEFAULT_K};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Default multiplier applied to the spiked month.
pub const SPIKE_FACTOR: f64 = 5.0;
/// Consecutive months lost in a zeroed-months anomaly.
pub const ZEROED_MONTHS: usize = 3;

/// A failure attributed to the pipeline stage where it happened.
#[derive(Debug, Error, PartialEq)]
#[error("stage '{stage}': {message}")]
pub struct ExperimentError {
    pub stage: String,
    pub message: String,
}

impl ExperimentError {
    pub fn new(stage: impl Into<String>, message: impl Display) -> Self {
        Self { stage: stage.into(), message: message.to_string() }
    }
}

fn at<E: Display>(stage: &str) -> impl FnOnce(E) -> ExperimentError + '_ {
    move |e| ExperimentError::new(stage, e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub dlat: f64,
    pub dlon: f64,
    pub lat_range: (f64, f64),
}

/// Climate source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldSpec {
    Synthetic(SyntheticWorld),
    File(PathBuf),
}

impl WorldSpec {
    pub fn load(&self, base: &Path) -> Result<ClimateGrid, String> {
        match self {
            WorldSpec::Synthetic(w) => synth_climate(w.seed, w.dlat, w.dlon, w.lat_range).map_err(|e| e.to_string()),
            WorldSpec::File(p) => load_climate_csv(base.join(p)).map_err(|e| e.to_string()),
        }
    }

    fn missing_file(&self, base: &Path) -> Option<PathBuf> {
        match self {
            WorldSpec::File(p) if !base.join(p).is_file() => Some(base.join(p)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyShape {
    /// Every month reports the yearly mean.
    Flat,
    /// One calendar month is multiplied by the spike factor every year.
    Spike,
    /// [`ZEROED_MONTHS`] consecutive months report zero every year.
    Zeroed,
}

fn default_capacity() -> (f64, f64) {
    (1.0, 1e4)
}
fn default_noise() -> f64 {
    0.03
}
fn default_shapes() -> Vec<AnomalyShape> {
    vec![AnomalyShape::Flat, AnomalyShape::Spike]
}
fn default_spike_factor() -> f64 {
    SPIKE_FACTOR
}
fn default_years() -> u32 {
    2
}
fn default_first_year() -> i32 {
    2018
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSynthesisSpec {
    pub n_sites: usize,
    pub seed: u64,
    /// Log-uniform capacity range, kW.
    #[serde(default = "default_capacity")]
    pub capacity_kw: (f64, f64),
    /// Standard deviation of the i.i.d. relative monthly noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub anomaly_rate: f64,
    /// Shapes assigned in turn to the anomalous sites.
    #[serde(default = "default_shapes")]
    pub anomaly_shapes: Vec<AnomalyShape>,
    #[serde(default = "default_spike_factor")]
    pub spike_factor: f64,
    #[serde(default = "default_years")]
    pub years: u32,
    #[serde(default = "default_first_year")]
    pub first_year: i32,
    /// Zones that host no field site.
    #[serde(default)]
    pub exclude_zones: Vec<ZoneId>,
    /// Optional |latitude| band, degrees.
    #[serde(default)]
    pub abs_lat_range: Option<(f64, f64)>,
}

impl FieldSynthesisSpec {
    pub fn new(n_sites: usize, seed: u64) -> Self {
        Self {
            n_sites,
            seed,
            capacity_kw: default_capacity(),
            noise: default_noise(),
            anomaly_rate: 0.0,
            anomaly_shapes: default_shapes(),
            spike_factor: SPIKE_FACTOR,
            years: default_years(),
            first_year: default_first_year(),
            exclude_zones: Vec::new(),
            abs_lat_range: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return Err(format!("anomaly_rate {} not in [0, 1]", self.anomaly_rate));
        }
        if !(self.noise >= 0.0) {
            return Err(format!("noise {} must be non-negative", self.noise));
        }
        if !(self.capacity_kw.0 > 0.0 && self.capacity_kw.0 <= self.capacity_kw.1) {
            return Err(format!("capacity range {:?} invalid", self.capacity_kw));
        }
        if !(self.spike_factor >= 0.0) {
            return Err(format!("spike_factor {} must be non-negative", self.spike_factor));
        }
        if self.years == 0 || self.n_sites == 0 {
            return Err("n_sites and years must be positive".into());
        }
        if self.anomaly_rate > 0.0 && self.anomaly_shapes.is_empty() {
            return Err("anomalies requested without shapes".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedField {
    pub sites: Vec<FieldSiteRecord>,
    /// Injection log: anomalous site id → shape.
    pub injected: BTreeMap<String, AnomalyShape>,
}

/// Field fleet on grid cells: `M_field = c · M_sim · (1 + η)` with `c` the
/// module area implied by a log-uniform capacity, `η ~ N(0, noise)`, and
/// injected anomalies on `round(rate · n)` sites.
pub fn synthesize_field_data(
    spec: &FieldSynthesisSpec,
    grid: &ClimateGrid,
    zones: Option<&ZoneModel>,
    cfg: &SimConfig,
) -> Result<SynthesizedField, String> {
    spec.validate()?;
    if !spec.exclude_zones.is_empty() && zones.is_none() {
        return Err("zone exclusion needs a zone model".into());
    }
    let candidates: Vec<&SiteClimate> = grid
        .sites()
        .filter(|s| zones.is_none_or(|m| !spec.exclude_zones.contains(&m.zone_of_site(s))))
        .filter(|s| spec.abs_lat_range.is_none_or(|(lo, hi)| (lo..=hi).contains(&s.lat.abs())))
        .collect();
    if candidates.len() < spec.n_sites {
        return Err(format!("{} field sites requested but only {} grid cells qualify", spec.n_sites, candidates.len()));
    }
    let mut pick = index::sample(&mut seeded_stream(spec.seed, 0), candidates.len(), spec.n_sites).into_vec();
    pick.sort_unstable();

    let n_anomalous = (spec.anomaly_rate * spec.n_sites as f64).round() as usize;
    let mut anomalous = index::sample(&mut seeded_stream(spec.seed, 1), spec.n_sites, n_anomalous).into_vec();
    anomalous.sort_unstable();
    let shape_of: BTreeMap<usize, AnomalyShape> =
        anomalous.iter().enumerate().map(|(j, &i)| (i, spec.anomaly_shapes[j % spec.anomaly_shapes.len()])).collect();

    let noise = Normal::new(0.0, spec.noise).map_err(|e| e.to_string())?;
    let (ln_lo, ln_hi) = (spec.capacity_kw.0.ln(), spec.capacity_kw.1.ln());
    let mut sites = Vec::with_capacity(spec.n_sites);
    let mut injected = BTreeMap::new();
    for (i, &ci) in pick.iter().enumerate() {
        let cell = candidates[ci];
        let m_sim =
            reference_yield(cell.lat, cell.lon, grid, cfg).expect("cell is on the grid").map_err(|e| e.to_string())?;
        let mut rng = seeded_stream(spec.seed, 100 + i as u64);
        let capacity = if ln_hi > ln_lo { rng.random_range(ln_lo..ln_hi).exp() } else { spec.capacity_kw.0 };
        // Module area at 1 kW·m⁻² standard irradiance.
        let area = capacity / cfg.eta_stc;
        let shape = shape_of.get(&i).copied();
        let spike_month = rng.random_range(0..12usize);
        let zero_start = rng.random_range(0..12usize);
        let mut observations = Vec::with_capacity(12 * spec.years as usize);
        for y in 0..spec.years {
            let mut year: [f64; 12] = std::array::from_fn(|m| {
                let eta = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (area * m_sim[m] * (1.0 + eta)).max(0.0)
            });
            match shape {
                Some(AnomalyShape::Flat) => year = [year.iter().sum::<f64>() / 12.0; 12],
                Some(AnomalyShape::Spike) => year[spike_month] *= spec.spike_factor,
                Some(AnomalyShape::Zeroed) => {
                    for k in 0..ZEROED_MONTHS {
                        year[(zero_start + k) % 12] = 0.0;
                    }
                }
                None => {}
            }
            for (m, e) in year.iter().enumerate() {
                observations.push(Observation { year: spec.first_year + y as i32, month: m as u8 + 1, energy_kwh: *e });
            }
        }
        let site_id = format!("field-{:04}", i + 1);
        if let Some(s) = shape {
            injected.insert(site_id.clone(), s);
        }
        sites.push(FieldSiteRecord {
            site_id,
            lat: cell.lat,
            lon: cell.lon,
            capacity_kw: Some(capacity),
            observations,
            source: "synthetic".into(),
        });
    }
    Ok(SynthesizedField { sites, injected })
}

// ---------------------------------------------------------------------------
// Configuration

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoningSpec {
    #[serde(default = "default_k")]
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Targets from the simulator on grid cells.
    Simulate,
    /// Field CSV, homogenized and filtered.
    FieldFile(PathBuf),
    /// Synthesized field fleet, homogenized and filtered.
    FieldSynth(FieldSynthesisSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub source: DataSource,
    /// Absent: every candidate is used.
    #[serde(default)]
    pub plan: Option<SamplingPlan>,
    /// Restricts candidates to these zones.
    #[serde(default)]
    pub zones: Option<Vec<ZoneId>>,
    /// Explicit (lat, lon) sites, snapped to the nearest grid cell.
    #[serde(default)]
    pub sites: Option<Vec<(f64, f64)>>,
    /// Candidate grid for simulated datasets; defaults to the world.
    #[serde(default)]
    pub grid: Option<WorldSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Datasets fused in order into the training set.
    pub train_on: Vec<String>,
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSpec {
    Simulator,
    /// A surrogate trained on the full simulation of `grid`.
    Surrogate {
        grid: WorldSpec,
        seed: u64,
        #[serde(default)]
        train: TrainConfig,
    },
}

fn default_true() -> bool {
    true
}

fn default_reference() -> ReferenceSpec {
    ReferenceSpec::Simulator
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSpec {
    /// Defaults to the world.
    #[serde(default)]
    pub grid: Option<WorldSpec>,
    #[serde(default = "default_reference")]
    pub reference: ReferenceSpec,
    /// Drop every cell used for training by any model.
    #[serde(default = "default_true")]
    pub held_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub world: WorldSpec,
    #[serde(default)]
    pub sim: SimConfig,
    pub zoning: ZoningSpec,
    pub datasets: Vec<DatasetSpec>,
    pub models: Vec<ModelSpec>,
    pub evaluation: EvaluationSpec,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(at("config"))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text =
            fs::read_to_string(path).map_err(|e| ExperimentError::new("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked without running a stage.
    pub fn validate(&self, base: &Path) -> Result<(), ExperimentError> {
        let fail = |m: String| Err(ExperimentError::new("config", m));
        self.sim.validate().map_err(at("config"))?;
        if self.zoning.k == 0 {
            return fail("zoning.k must be positive".into());
        }
        if let Some(p) = self.world.missing_file(base) {
            return fail(format!("world file {} does not exist", p.display()));
        }
        if let Some(p) = self.evaluation.grid.as_ref().and_then(|g| g.missing_file(base)) {
            return fail(format!("evaluation grid file {} does not exist", p.display()));
        }
        if let ReferenceSpec::Surrogate { grid, .. } = &self.evaluation.reference {
            if let Some(p) = grid.missing_file(base) {
                return fail(format!("reference grid file {} does not exist", p.display()));
            }
        }
        let mut names = BTreeSet::new();
        for d in &self.datasets {
            if !names.insert(d.name.as_str()) {
                return fail(format!("duplicate dataset name {}", d.name));
            }
            let stage = format!("dataset:{}", d.name);
            if let Some(plan) = &d.plan {
                plan.validate().map_err(|e| ExperimentError::new(&stage, e))?;
            }
            if d.plan.is_some() && d.sites.is_some() {
                return Err(ExperimentError::new(&stage, "plan and explicit sites are exclusive"));
            }
            match &d.source {
                DataSource::Simulate => {
                    if let Some(p) = d.grid.as_ref().and_then(|g| g.missing_file(base)) {
                        return Err(ExperimentError::new(&stage, format!("grid file {} does not exist", p.display())));
                    }
                }
                DataSource::FieldFile(p) => {
                    if !base.join(p).is_file() {
                        return Err(ExperimentError::new(
                            &stage,
                            format!("field file {} does not exist", base.join(p).display()),
                        ));
                    }
                }
                DataSource::FieldSynth(spec) => spec.validate().map_err(|e| ExperimentError::new(&stage, e))?,
            }
            if d.grid.is_some() && !matches!(d.source, DataSource::Simulate) {
                return Err(ExperimentError::new(&stage, "only simulated datasets take a grid"));
            }
        }
        if self.models.is_empty() {
            return fail("no models to train".into());
        }
        let mut model_names = BTreeSet::new();
        for m in &self.models {
            if !model_names.insert(m.name.as_str()) {
                return fail(format!("duplicate model name {}", m.name));
            }
            if m.train_on.is_empty() {
                return fail(format!("model {} has no training datasets", m.name));
            }
            for d in &m.train_on {
                if !names.contains(d.as_str()) {
                    return fail(format!("model {} references unknown dataset {d}", m.name));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Artifacts

/// `{stage → [[path, sha256], ...]}` with paths relative to the output root.
pub type Manifest = BTreeMap<String, Vec<(String, String)>>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Artifacts {
    root: PathBuf,
    manifest: Manifest,
}

impl Artifacts {
    /// Writes through a `.partial` file renamed into place once complete.
    fn put(&mut self, stage: &str, rel: &str, bytes: &[u8]) -> Result<(), ExperimentError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(at(stage))?;
        }
        let partial = partial_path(&path);
        fs::write(&partial, bytes).map_err(|e| ExperimentError::new(stage, format!("{}: {e}", partial.display())))?;
        fs::rename(&partial, &path).map_err(at(stage))?;
        self.manifest.entry(stage.to_string()).or_default().push((rel.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    fn put_json<T: Serialize>(&mut self, stage: &str, rel: &str, value: &T) -> Result<(), ExperimentError> {
        let mut text = serde_json::to_string_pretty(value).map_err(at(stage))?;
        text.push('\n');
        self.put(stage, rel, text.as_bytes())
    }

    fn put_csv(
        &mut self,
        stage: &str,
        rel: &str,
        write: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>,
    ) -> Result<(), ExperimentError> {
        let mut buf = Vec::new();
        write(&mut buf).map_err(at(stage))?;
        self.put(stage, rel, &buf)
    }
}

pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

// ---------------------------------------------------------------------------
// Run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub e_th: f64,
    pub n_sites: usize,
    pub rejected: Vec<String>,
    /// Injection log of synthesized fleets.
    pub injected: BTreeMap<String, AnomalyShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOutcome {
    pub rows: usize,
    pub selection: Selection,
    pub filter: Option<FilterSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub training_rows: usize,
    pub training_r2: f64,
    pub metrics: Metrics,
    pub overall_p95: f64,
    pub per_zone_p95: BTreeMap<ZoneId, f64>,
    pub evaluated_sites: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub datasets: BTreeMap<String, DatasetOutcome>,
    pub models: BTreeMap<String, ModelOutcome>,
    pub comparison: Vec<ComparisonRow>,
}

/// A site as it enters a training set: id, location, climate cell.
struct Member {
    site_id: String,
    lat: f64,
    lon: f64,
    cell: GridKey,
}

struct BuiltDataset {
    set: TrainingSet,
    cells: Vec<GridKey>,
}

/// Runs `cfg`, resolving relative paths against `base`.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path) -> Result<RunSummary, ExperimentError> {
    cfg.validate(base)?;
    let mut out = Artifacts { root: base.join(&cfg.output_dir), manifest: Manifest::new() };

    let world = cfg.world.load(base).map_err(at("world"))?;
    out.put_csv("world", "world/climate.csv", |b| write_climate_csv(&world, b))?;

    let zones = fit_grid(&world, cfg.zoning.k, cfg.zoning.seed).map_err(at("zoning"))?;
    out.put("zoning", "zoning/zones.json", zones.to_json().as_bytes())?;
    out.put_csv("zoning", "zoning/zone_map.csv", |b| write_zone_map_csv(&zones, &world, b))?;

    let world_sim = simulate_grid(&world, &cfg.sim).map_err(at("simulate"))?;
    out.put_csv("simulate", "simulate/yields.csv", |b| write_yield_csv(&world_sim, b))?;

    let mut datasets: BTreeMap<String, BuiltDataset> = BTreeMap::new();
    let mut dataset_outcomes = BTreeMap::new();
    for d in &cfg.datasets {
        let stage = format!("dataset:{}", d.name);
        let (built, outcome) = build_dataset(d, &stage, cfg, base, &world, &zones, &mut out)?;
        datasets.insert(d.name.clone(), built);
        dataset_outcomes.insert(d.name.clone(), outcome);
    }
    let named: Vec<(&str, &TrainingSet)> =
        cfg.datasets.iter().map(|d| (d.name.as_str(), &datasets[&d.name].set)).collect();
    out.put_csv("datasets", "datasets/parallel_coords.csv", |b| write_parallel_coords_csv(Some(&world), &named, b))?;

    // Evaluation sites: the evaluation grid minus every training cell.
    let eval_grid = match &cfg.evaluation.grid {
        Some(g) => g.load(base).map_err(at("evaluation"))?,
        None => world.clone(),
    };
    let training_cells: BTreeSet<GridKey> =
        cfg.models.iter().flat_map(|m| m.train_on.iter().flat_map(|d| datasets[d].cells.iter().copied())).collect();
    let eval_grid = if cfg.evaluation.held_out {
        eval_grid.filter(|s| !training_cells.contains(&s.key())).map_err(at("evaluation"))?
    } else {
        eval_grid
    };
    if eval_grid.is_empty() {
        return Err(ExperimentError::new("evaluation", "no evaluation sites left after holding out training cells"));
    }
    let eval_zones = zones.zone_map(&eval_grid);
    let reference: Vec<SiteYield> = match &cfg.evaluation.reference {
        ReferenceSpec::Simulator => {
            let by_key: BTreeMap<GridKey, &YieldRecord> =
                world_sim.iter().map(|r| (GridKey::from_degrees(r.lat, r.lon), r)).collect();
            let mut refs = Vec::with_capacity(eval_grid.len());
            let missing: Vec<&SiteClimate> = eval_grid.sites().filter(|s| !by_key.contains_key(&s.key())).collect();
            let extra = if missing.is_empty() {
                Vec::new()
            } else {
                let g = ClimateGrid::from_sites(missing.into_iter().cloned()).map_err(at("evaluation"))?;
                simulate_grid(&g, &cfg.sim).map_err(at("evaluation"))?
            };
            let extra_by_key: BTreeMap<GridKey, &YieldRecord> =
                extra.iter().map(|r| (GridKey::from_degrees(r.lat, r.lon), r)).collect();
            for s in eval_grid.sites() {
                let r = by_key.get(&s.key()).or_else(|| extra_by_key.get(&s.key())).expect("simulated above");
                refs.push(SiteYield::from(*r));
            }
            refs
        }
        ReferenceSpec::Surrogate { grid, seed, train: tc } => {
            let g = grid.load(base).map_err(at("reference"))?;
            let ids: Vec<String> = g.sites().map(SiteClimate::site_id).collect();
            let inputs: Vec<SiteInput> = g.sites().zip(&ids).map(|(s, id)| SiteInput::grid(id, s)).collect();
            let ts = build_training_set(&inputs, TargetSource::Simulator(&cfg.sim)).map_err(at("reference"))?;
            let (model, report) = train(&ts, *seed, tc).map_err(at("reference"))?;
            out.put("reference", "reference/model.json", model.to_json().as_bytes())?;
            out.put_json("reference", "reference/train_report.json", &report)?;
            predict_grid(&model, &eval_grid).iter().map(SiteYield::from).collect()
        }
    };

    let mut model_outcomes = BTreeMap::new();
    let mut maps = Vec::new();
    for m in &cfg.models {
        let stage = format!("model:{}", m.name);
        let mut set = TrainingSet::default();
        for d in &m.train_on {
            set = fuse(&set, &datasets[d].set).map_err(at(&stage))?;
        }
        let dir = format!("models/{}", m.name);
        out.put_csv(&stage, &format!("{dir}/training_set.csv"), |b| write_training_set_csv(&set, b))?;
        let coverage = coverage_report(&set, &world, &zones);
        out.put_json(&stage, &format!("{dir}/coverage.json"), &coverage)?;
        let (model, report) = train(&set, m.seed, &m.train).map_err(at(&stage))?;
        out.put(&stage, &format!("{dir}/model.json"), model.to_json().as_bytes())?;
        out.put_json(&stage, &format!("{dir}/train_report.json"), &report)?;

        let preds = predict_grid(&model, &eval_grid);
        out.put_csv(&stage, &format!("{dir}/predictions.csv"), |b| write_predictions_csv(&preds, b))?;
        let pred_yields: Vec<SiteYield> = preds.iter().map(SiteYield::from).collect();
        let map = build_error_map(&pred_yields, &reference, &eval_zones).map_err(at(&stage))?;
        let zrep = zone_ecdf(&map, zones.k).map_err(at(&stage))?;
        out.put_csv(&stage, &format!("{dir}/error_map.csv"), |b| write_error_map_csv(&map, b))?;
        out.put_csv(&stage, &format!("{dir}/ecdf.csv"), |b| write_ecdf_csv(&zrep, b))?;
        out.put_json(&stage, &format!("{dir}/zone_report.json"), &zrep)?;
        model_outcomes.insert(
            m.name.clone(),
            ModelOutcome {
                training_rows: set.len(),
                training_r2: report.r2,
                metrics: map.metrics,
                overall_p95: zrep.overall_p95,
                per_zone_p95: zrep.per_zone.iter().map(|(z, e)| (*z, e.p95)).collect(),
                evaluated_sites: map.rows.len(),
            },
        );
        maps.push((m.name.clone(), map, zrep));
    }
    let variants: Vec<(&str, &_, &_)> = maps.iter().map(|(n, m, z)| (n.as_str(), m, z)).collect();
    let comparison = compare_models(&variants).map_err(at("evaluation"))?;
    out.put_json("evaluation", "evaluation/comparison.json", &comparison)?;

    let manifest = out.manifest.clone();
    let mut text = serde_json::to_string_pretty(&manifest).map_err(at("manifest"))?;
    text.push('\n');
    let path = out.root.join(MANIFEST_FILE);
    let partial = partial_path(&path);
    fs::write(&partial, text).map_err(at("manifest"))?;
    fs::rename(&partial, &path).map_err(at("manifest"))?;

    Ok(RunSummary { manifest, datasets: dataset_outcomes, models: model_outcomes, comparison })
}

fn build_dataset(
    d: &DatasetSpec,
    stage: &str,
    cfg: &ExperimentConfig,
    base: &Path,
    world: &ClimateGrid,
    zones: &ZoneModel,
    out: &mut Artifacts,
) -> Result<(BuiltDataset, DatasetOutcome), ExperimentError> {
    let dir = format!("datasets/{}", d.name);
    let in_zones = |z: ZoneId| d.zones.as_ref().is_none_or(|zs| zs.contains(&z));

    let (members, candidates, homogenized, filter, cell_grid): (Vec<Member>, Vec<Candidate>, _, _, ClimateGrid) =
        match &d.source {
            DataSource::Simulate => {
                let grid = match &d.grid {
                    Some(g) => g.load(base).map_err(at(stage))?,
                    None => world.clone(),
                };
                let members: Vec<Member> = match &d.sites {
                    Some(coords) => {
                        let mut seen = BTreeSet::new();
                        coords
                            .iter()
                            .filter_map(|&(lat, lon)| grid.nearest(lat, lon))
                            .filter(|s| seen.insert(s.key()))
                            .map(|s| Member { site_id: s.site_id(), lat: s.lat, lon: s.lon, cell: s.key() })
                            .collect()
                    }
                    None => grid
                        .sites()
                        .map(|s| Member { site_id: s.site_id(), lat: s.lat, lon: s.lon, cell: s.key() })
                        .collect(),
                };
                let candidates = members
                    .iter()
                    .map(|m| Candidate {
                        site_id: m.site_id.clone(),
                        zone: zones.zone_of_site(grid.get(&m.cell).expect("member of grid")),
                    })
                    .collect();
                (members, candidates, None, None, grid)
            }
            DataSource::FieldFile(_) | DataSource::FieldSynth(_) => {
                let (sites, injected) = match &d.source {
                    DataSource::FieldFile(p) => {
                        let file = fs::File::open(base.join(p)).map_err(at(stage))?;
                        (read_field_csv(file).map_err(at(stage))?, BTreeMap::new())
                    }
                    DataSource::FieldSynth(spec) => {
                        let f = synthesize_field_data(spec, world, Some(zones), &cfg.sim).map_err(at(stage))?;
                        (f.sites, f.injected)
                    }
                    DataSource::Simulate => unreachable!(),
                };
                out.put_csv(stage, &format!("{dir}/field.csv"), |b| write_field_csv(&sites, b))?;
                let homog = homogenize_all(&sites, world, &cfg.sim).map_err(at(stage))?;
                let outcome = filter_anomalous(homog).map_err(at(stage))?;
                let mut all = outcome.accepted.clone();
                all.extend(outcome.rejected.iter().cloned());
                all.sort_by(|a, b| a.site_id.cmp(&b.site_id));
                out.put_csv(stage, &format!("{dir}/homogenized.csv"), |b| write_homogenized_csv(&all, b))?;
                let summary = FilterSummary {
                    e_th: outcome.e_th,
                    n_sites: all.len(),
                    rejected: outcome.rejected.iter().map(|s| s.site_id.clone()).collect(),
                    injected,
                };
                out.put_json(stage, &format!("{dir}/filter.json"), &summary)?;
                let members: Vec<Member> = outcome
                    .accepted
                    .iter()
                    .map(|h| {
                        let cell = world.nearest(h.lat, h.lon).expect("non-empty world").key();
                        Member { site_id: h.site_id.clone(), lat: h.lat, lon: h.lon, cell }
                    })
                    .collect();
                let candidates = members
                    .iter()
                    .map(|m| Candidate {
                        site_id: m.site_id.clone(),
                        zone: zones.zone_of_site(world.get(&m.cell).expect("cell")),
                    })
                    .collect();
                let targets: BTreeMap<String, [f64; 12]> =
                    outcome.accepted.iter().map(|h| (h.site_id.clone(), h.m_star)).collect();
                (members, candidates, Some(targets), Some(summary), world.clone())
            }
        };

    let candidates: Vec<Candidate> = candidates.into_iter().filter(|c| in_zones(c.zone)).collect();
    let selection = match &d.plan {
        Some(plan) => plan.select(&candidates, zones).map_err(at(stage))?,
        None => Selection {
            site_ids: candidates.iter().map(|c| c.site_id.clone()).collect(),
            zones: candidates.iter().map(|c| c.zone).collect(),
            ..Selection::default()
        },
    };
    out.put_json(
        stage,
        &format!("{dir}/selection.json"),
        &serde_json::json!({ "plan": d.plan, "selection": selection }),
    )?;

    let by_id: BTreeMap<&str, &Member> = members.iter().map(|m| (m.site_id.as_str(), m)).collect();
    let chosen: Vec<&Member> = selection.site_ids.iter().map(|id| by_id[id.as_str()]).collect();
    let inputs: Vec<SiteInput> = chosen
        .iter()
        .map(|m| SiteInput {
            site_id: &m.site_id,
            lat: m.lat,
            lon: m.lon,
            climate: cell_grid.get(&m.cell).expect("cell"),
        })
        .collect();
    let source = match &homogenized {
        Some(t) => TargetSource::Homogenized(t),
        None => TargetSource::Simulator(&cfg.sim),
    };
    let set = build_training_set(&inputs, source).map_err(at(stage))?;
    out.put_csv(stage, &format!("{dir}/training_set.csv"), |b| write_training_set_csv(&set, b))?;
    let coverage = coverage_report(&set, world, zones);
    out.put_json(stage, &format!("{dir}/coverage.json"), &coverage)?;

    let cells = chosen.iter().map(|m| m.cell).collect();
    let outcome = DatasetOutcome { rows: set.len(), selection, filter };
    Ok((BuiltDataset { set, cells }, outcome))
}

/// Simulated yields as [`SiteYield`]s, for callers comparing against the oracle.
pub fn simulated_yields(grid: &ClimateGrid, cfg: &SimConfig) -> Result<Vec<SiteYield>, SimError> {
    Ok(simulate_grid(grid, cfg)?.iter().map(SiteYield::from).collect())
}
