//! `solarzones` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime error.
//! Results go to files named by `--out`; stdout carries only small query
//! results and everything else is logged to stderr.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};

use solarzones::climate::{load_climate_csv, synth_climate, write_climate_csv, ClimateGrid};
use solarzones::evaluate::{
    build_error_map, predict_grid, write_ecdf_csv, write_error_map_csv, write_predictions_csv, zone_ecdf,
    SitePrediction, SiteYield,
};
use solarzones::experiment::{partial_path, run_experiment, ExperimentConfig, MANIFEST_FILE};
use solarzones::homogenize::{filter_anomalous, homogenize_all, read_field_csv, write_homogenized_csv};
use solarzones::sampler::{
    build_training_set, grid_candidates, read_training_set_csv, write_training_set_csv, SamplingPlan, Selection,
    SiteInput, Strategy, TargetSource,
};
use solarzones::simulator::{simulate_grid, write_yield_csv, SimConfig, TiltPolicy};
use solarzones::surrogate::{train, SurrogateModel, TrainConfig, TrainingSet};
use solarzones::zones::{fit_grid, write_zone_map_csv, ZoneModel, DEFAULT_K};

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nschemas:",
    "\n  climate-csv 1       lat,lon,month,ghi_kwh_m2_day,tamb_c,kt",
    "\n  field-csv 1         site_id,lat,lon,year,month,energy_kwh,capacity_kw",
    "\n  training-set-csv 1  site_id,lat,lon,month,ghi,tamb,kt,target,provenance",
    "\n  zone-model-json 1",
    "\n  surrogate-json 1",
    "\n  experiment-json 1",
    "\n  manifest-json 1     {stage: [[path, sha256], ...]}",
);

#[derive(Parser, Debug)]
#[command(name = "solarzones", version, long_version = LONG_VERSION, about = "Climate zoning, yield simulation and surrogate training for fixed-tilt PV")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a climate CSV (or synthesize one) and write it normalized.
    Ingest(IngestArgs),
    /// Fit or apply a climate zone model.
    #[command(subcommand)]
    Zone(ZoneCommand),
    /// Simulate monthly and annual yield for every grid site.
    Simulate(SimulateArgs),
    /// Select training sites with a diversity or random plan.
    Sample(SampleArgs),
    /// Build a training set and fit the surrogate network.
    Train(TrainArgs),
    /// Homogenize field yields against the simulator and filter anomalies.
    Homogenize(HomogenizeArgs),
    /// Predict monthly yield at a point or over a grid.
    Predict(PredictArgs),
    /// Score a surrogate against the simulator: error map, eCDFs, metrics.
    Evaluate(EvaluateArgs),
    /// Run a declarative experiment.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Climate CSV: lat,lon,month,ghi_kwh_m2_day,tamb_c,kt (one row per site-month).
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    climate: Option<PathBuf>,
    /// Generate a synthetic world instead of reading one.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, required_if_eq("synthetic", "true"))]
    seed: Option<u64>,
    #[arg(long, default_value_t = 2.0)]
    dlat: f64,
    #[arg(long, default_value_t = 2.0)]
    dlon: f64,
    #[arg(long, default_value_t = -60.0, allow_hyphen_values = true)]
    lat_min: f64,
    #[arg(long, default_value_t = 60.0, allow_hyphen_values = true)]
    lat_max: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum ZoneCommand {
    /// Fit k-means zones on annual-mean (GHI, Tamb, kt).
    Fit {
        #[arg(long)]
        climate: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long)]
        seed: u64,
        /// Zone model JSON.
        #[arg(long)]
        out: PathBuf,
        /// Also write the zone map CSV: lat,lon,zone.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Assign zones to every site of a climate grid (CSV lat,lon,zone).
    Assign {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        climate: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Simulator configuration JSON; defaults apply to missing fields.
    #[arg(long)]
    sim_config: Option<PathBuf>,
    /// Fixed tilt in degrees instead of the per-site optimum.
    #[arg(long)]
    tilt: Option<f64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    climate: PathBuf,
    #[command(flatten)]
    sim: SimArgs,
    /// Yield CSV: lat,lon,tilt,azimuth,m01..m12,annual.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Diversity,
    Random,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Total number of sites.
    #[arg(long, conflicts_with = "per_zone")]
    sites: Option<usize>,
    /// Sites per zone (diversity only).
    #[arg(long)]
    per_zone: Option<usize>,
    /// Zone model JSON; fitted on the climate grid with k=7 when absent.
    #[arg(long)]
    zones: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    climate: PathBuf,
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long)]
    seed: u64,
    /// Selection JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write the simulated training set for the selection.
    #[arg(long)]
    training_set: Option<PathBuf>,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Existing training set CSV (site_id,lat,lon,month,ghi,tamb,kt,target,provenance).
    #[arg(long, conflicts_with_all = ["climate", "strategy"])]
    training_set: Option<PathBuf>,
    /// Climate grid to sample simulated training sites from.
    #[arg(long)]
    climate: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    sim: SimArgs,
    /// Seeds both site sampling and weight initialization.
    #[arg(long)]
    seed: u64,
    /// Training configuration JSON; defaults apply to missing fields.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Surrogate model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Training report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HomogenizeArgs {
    /// Field CSV: site_id,lat,lon,year,month,energy_kwh,capacity_kw.
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    climate: PathBuf,
    #[arg(long)]
    sim_config: Option<PathBuf>,
    /// Homogenized sites CSV with the accepted flag.
    #[arg(long)]
    out: PathBuf,
    /// Filter summary JSON: threshold and rejected ids.
    #[arg(long)]
    filter_report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    climate: PathBuf,
    /// Point query; climate is taken from the nearest grid cell.
    #[arg(long, requires = "lon", allow_hyphen_values = true)]
    lat: Option<f64>,
    #[arg(long, requires = "lat", allow_hyphen_values = true)]
    lon: Option<f64>,
    /// Grid predictions CSV; required without --lat/--lon.
    #[arg(long, required_unless_present = "lat")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    climate: PathBuf,
    /// Zone model JSON; fitted with k=7 and --seed when absent.
    #[arg(long)]
    zones: Option<PathBuf>,
    #[arg(long, required_unless_present = "zones")]
    seed: Option<u64>,
    /// Training set whose sites are excluded from the evaluation.
    #[arg(long)]
    held_out: Option<PathBuf>,
    #[command(flatten)]
    sim: SimArgs,
    /// Directory for error_map.csv, ecdf.csv, zone_report.json, metrics.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum ExperimentCommand {
    /// Run an experiment config; relative paths resolve against the config's directory.
    Run { config: PathBuf },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

fn usage(e: impl Display) -> Failure {
    Failure::Usage(anyhow!("{e}"))
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(anyhow!("{e}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Outcome<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Zone(z) => zone(z),
        Command::Simulate(a) => simulate(a),
        Command::Sample(a) => sample(a),
        Command::Train(a) => train_cmd(a),
        Command::Homogenize(a) => homogenize(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Experiment(ExperimentCommand::Run { config }) => experiment(&config),
    }
}

fn input(path: &Path) -> Outcome<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(usage(format!("input file {} does not exist", path.display())))
    }
}

fn climate(path: &Path) -> Outcome<ClimateGrid> {
    load_climate_csv(input(path)?).map_err(usage)
}

fn json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = fs::read_to_string(input(path)?).map_err(usage)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Writes through `<path>.partial` so an interrupted run leaves no truncated output.
fn write_out(path: &Path, bytes: &[u8]) -> Outcome<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    let partial = partial_path(path);
    fs::write(&partial, bytes).map_err(|e| runtime(format!("{}: {e}", partial.display())))?;
    fs::rename(&partial, path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_csv<E: Display>(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> Result<(), E>) -> Outcome<()> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(runtime)?;
    write_out(path, &buf)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    write_out(path, text.as_bytes())
}

fn sim_config(args: &SimArgs) -> Outcome<SimConfig> {
    let mut cfg: SimConfig = match &args.sim_config {
        Some(p) => json_file(p)?,
        None => SimConfig::default(),
    };
    if let Some(t) = args.tilt {
        cfg.tilt_policy = TiltPolicy::Fixed(t);
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn zone_model(path: Option<&Path>, grid: &ClimateGrid, seed: u64) -> Outcome<ZoneModel> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(input(p)?).map_err(usage)?;
            ZoneModel::from_json(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
        None => fit_grid(grid, DEFAULT_K, seed).map_err(runtime),
    }
}

fn plan(args: &PlanArgs, seed: u64) -> Outcome<SamplingPlan> {
    let strategy = match args.strategy {
        Some(StrategyArg::Diversity) => Strategy::Diversity,
        Some(StrategyArg::Random) => Strategy::Random,
        None => return Err(usage("--strategy is required")),
    };
    let plan = SamplingPlan { strategy, sites_per_zone: args.per_zone, total_sites: args.sites, seed };
    plan.validate().map_err(usage)?;
    Ok(plan)
}

fn select(grid: &ClimateGrid, args: &PlanArgs, seed: u64) -> Outcome<(SamplingPlan, Selection)> {
    let plan = plan(args, seed)?;
    let zones = zone_model(args.zones.as_deref(), grid, seed)?;
    let selection = plan.select(&grid_candidates(grid, &zones), &zones).map_err(usage)?;
    Ok((plan, selection))
}

fn simulated_set(grid: &ClimateGrid, selection: &Selection, cfg: &SimConfig) -> Outcome<TrainingSet> {
    let inputs: Vec<SiteInput> = selection
        .site_ids
        .iter()
        .map(|id| {
            grid.get_by_id(id).map(|c| SiteInput::grid(id, c)).ok_or_else(|| runtime(format!("unknown site {id}")))
        })
        .collect::<Outcome<_>>()?;
    build_training_set(&inputs, TargetSource::Simulator(cfg)).map_err(runtime)
}

fn ingest(a: IngestArgs) -> Outcome<()> {
    let grid = if a.synthetic {
        let seed = a.seed.ok_or_else(|| usage("--synthetic requires --seed"))?;
        synth_climate(seed, a.dlat, a.dlon, (a.lat_min, a.lat_max)).map_err(usage)?
    } else {
        climate(a.climate.as_deref().expect("clap enforces --climate"))?
    };
    eprintln!("{} sites validated", grid.len());
    write_csv(&a.out, |b| write_climate_csv(&grid, b))
}

fn zone(z: ZoneCommand) -> Outcome<()> {
    match z {
        ZoneCommand::Fit { climate: path, k, seed, out, map } => {
            let grid = climate(&path)?;
            let model = fit_grid(&grid, k, seed).map_err(usage)?;
            write_out(&out, model.to_json().as_bytes())?;
            if let Some(map) = map {
                write_csv(&map, |b| write_zone_map_csv(&model, &grid, b))?;
            }
            Ok(())
        }
        ZoneCommand::Assign { model, climate: path, out } => {
            let grid = climate(&path)?;
            let model = zone_model(Some(&model), &grid, 0)?;
            write_csv(&out, |b| write_zone_map_csv(&model, &grid, b))
        }
    }
}

fn simulate(a: SimulateArgs) -> Outcome<()> {
    let grid = climate(&a.climate)?;
    let cfg = sim_config(&a.sim)?;
    let records = simulate_grid(&grid, &cfg).map_err(runtime)?;
    write_csv(&a.out, |b| write_yield_csv(&records, b))
}

fn sample(a: SampleArgs) -> Outcome<()> {
    let grid = climate(&a.climate)?;
    let cfg = sim_config(&a.sim)?;
    let (plan, selection) = select(&grid, &a.plan, a.seed)?;
    eprintln!("selected {} sites", selection.site_ids.len());
    write_json(&a.out, &serde_json::json!({ "plan": plan, "selection": selection }))?;
    if let Some(path) = &a.training_set {
        let ts = simulated_set(&grid, &selection, &cfg)?;
        write_csv(path, |b| write_training_set_csv(&ts, b))?;
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome<()> {
    let cfg: TrainConfig = match &a.train_config {
        Some(p) => json_file(p)?,
        None => TrainConfig::default(),
    };
    let ts = match (&a.training_set, &a.climate) {
        (Some(p), _) => {
            let file = fs::File::open(input(p)?).map_err(usage)?;
            read_training_set_csv(file).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        (None, Some(c)) => {
            let grid = climate(c)?;
            let sim = sim_config(&a.sim)?;
            let (_, selection) = select(&grid, &a.plan, a.seed)?;
            simulated_set(&grid, &selection, &sim)?
        }
        (None, None) => return Err(usage("either --training-set or --climate is required")),
    };
    eprintln!("training on {} rows", ts.len());
    let (model, report) = train(&ts, a.seed, &cfg).map_err(|e| match e {
        solarzones::surrogate::TrainError::NonFiniteObjective => runtime(e),
        _ => usage(e),
    })?;
    eprintln!("stopped after {} epochs ({:?}), training R² {:.6}", report.epochs.len(), report.stop_reason, report.r2);
    write_out(&a.out, model.to_json().as_bytes())?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    Ok(())
}

fn homogenize(a: HomogenizeArgs) -> Outcome<()> {
    let file = fs::File::open(input(&a.field)?).map_err(usage)?;
    let sites = read_field_csv(file).map_err(usage)?;
    let grid = climate(&a.climate)?;
    let cfg = sim_config(&SimArgs { sim_config: a.sim_config.clone(), tilt: None })?;
    let homog = homogenize_all(&sites, &grid, &cfg).map_err(usage)?;
    let outcome = filter_anomalous(homog).map_err(usage)?;
    eprintln!(
        "threshold {:.4}: {} accepted, {} rejected",
        outcome.e_th,
        outcome.accepted.len(),
        outcome.rejected.len()
    );
    let mut all = outcome.accepted.clone();
    all.extend(outcome.rejected.iter().cloned());
    all.sort_by(|x, y| x.site_id.cmp(&y.site_id));
    write_csv(&a.out, |b| write_homogenized_csv(&all, b))?;
    if let Some(p) = &a.filter_report {
        let rejected: Vec<&str> = outcome.rejected.iter().map(|s| s.site_id.as_str()).collect();
        write_json(p, &serde_json::json!({ "e_th": outcome.e_th, "n_sites": all.len(), "rejected": rejected }))?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Outcome<SurrogateModel> {
    let text = fs::read_to_string(input(path)?).map_err(usage)?;
    SurrogateModel::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn predict(a: PredictArgs) -> Outcome<()> {
    let model = load_model(&a.model)?;
    let grid = climate(&a.climate)?;
    match (a.lat, a.lon) {
        (Some(lat), Some(lon)) => {
            if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                return Err(usage(format!("coordinates ({lat}, {lon}) out of range")));
            }
            let cell = grid.nearest(lat, lon).ok_or_else(|| usage("climate grid is empty"))?;
            eprintln!("climate from cell ({}, {})", cell.lat, cell.lon);
            let p = model.predict_monthly(cell);
            let row = SitePrediction {
                lat,
                lon,
                monthly: p.monthly,
                annual: p.annual(),
                extrapolated: p.extrapolated,
                clipped: p.clipped,
            };
            write_predictions_csv(&[row], std::io::stdout().lock()).map_err(runtime)
        }
        _ => {
            let preds = predict_grid(&model, &grid);
            write_csv(a.out.as_deref().expect("clap enforces --out"), |b| write_predictions_csv(&preds, b))
        }
    }
}

fn evaluate(a: EvaluateArgs) -> Outcome<()> {
    let model = load_model(&a.model)?;
    let grid = climate(&a.climate)?;
    let cfg = sim_config(&a.sim)?;
    let zones = zone_model(a.zones.as_deref(), &grid, a.seed.unwrap_or_default())?;
    let grid = match &a.held_out {
        Some(p) => {
            let file = fs::File::open(input(p)?).map_err(usage)?;
            let ts = read_training_set_csv(file).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            let keys: std::collections::BTreeSet<_> =
                ts.rows.iter().filter_map(|r| grid.nearest(r.lat, r.lon)).map(|c| c.key()).collect();
            grid.filter(|s| !keys.contains(&s.key())).map_err(usage)?
        }
        None => grid,
    };
    let reference: Vec<SiteYield> = simulate_grid(&grid, &cfg).map_err(runtime)?.iter().map(SiteYield::from).collect();
    let preds: Vec<SiteYield> = predict_grid(&model, &grid).iter().map(SiteYield::from).collect();
    let map = build_error_map(&preds, &reference, &zones.zone_map(&grid)).map_err(runtime)?;
    let report = zone_ecdf(&map, zones.k).map_err(runtime)?;
    eprintln!(
        "{} sites: RMSE {:.4} kWh/m², MAPE {:.3}%, R² {:.6}, p95 {:.3}%",
        map.rows.len(),
        map.metrics.rmse,
        map.metrics.mape,
        map.metrics.r2,
        report.overall_p95
    );
    write_csv(&a.out.join("error_map.csv"), |b| write_error_map_csv(&map, b))?;
    write_csv(&a.out.join("ecdf.csv"), |b| write_ecdf_csv(&report, b))?;
    write_json(&a.out.join("zone_report.json"), &report)?;
    write_json(
        &a.out.join("metrics.json"),
        &serde_json::json!({ "metrics": map.metrics, "percentiles": map.percentiles }),
    )
}

fn experiment(config: &Path) -> Outcome<()> {
    let cfg = ExperimentConfig::load(input(config)?).map_err(usage)?;
    let base = config.parent().unwrap_or(Path::new("."));
    cfg.validate(base).map_err(usage)?;
    eprintln!("running experiment {}", cfg.name);
    let summary = run_experiment(&cfg, base).map_err(runtime)?;
    for (name, m) in &summary.models {
        eprintln!(
            "model {name}: {} rows, RMSE {:.4} kWh/m², p95 {:.3}% over {} sites",
            m.training_rows, m.metrics.rmse, m.overall_p95, m.evaluated_sites
        );
    }
    eprintln!("manifest {}", base.join(&cfg.output_dir).join(MANIFEST_FILE).display());
    Ok(())
}
