use std::fs;
use std::path::Path;
use std::process::{Command, Output};

/// Runs the binary in `dir` with whitespace-separated `args`.
fn solarzones(dir: &Path, args: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_solarzones")).current_dir(dir).args(args.split_whitespace()).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small synthetic world written through `ingest`.
fn world(dir: &Path) {
    let o = solarzones(dir, "ingest --synthetic --seed 7 --dlat 10 --dlon 30 --out world.csv");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn version_lists_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let o = solarzones(dir.path(), "--version");
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("climate-csv 1"));
    assert!(text.contains("manifest-json 1"));
}

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        vec!["ingest"],
        vec!["zone", "fit"],
        vec!["zone", "assign"],
        vec!["simulate"],
        vec!["sample"],
        vec!["train"],
        vec!["homogenize"],
        vec!["predict"],
        vec!["evaluate"],
        vec!["experiment", "run"],
    ] {
        let o = solarzones(dir.path(), &format!("{} --help", sub.join(" ")));
        assert_eq!(code(&o), 0, "{sub:?}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{sub:?}");
    }
}

#[test]
fn ingest_rejects_out_of_range_kt_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    world(dir.path());
    let text = fs::read_to_string(dir.path().join("world.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut fields: Vec<String> = lines[3].split(',').map(String::from).collect();
    fields[5] = "1.3".into();
    lines[3] = fields.join(",");
    fs::write(dir.path().join("bad.csv"), lines.join("\n")).unwrap();

    let o = solarzones(dir.path(), "ingest --climate bad.csv --out clean.csv");
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
    assert!(!stderr(&o).contains("panicked"));
    assert!(!dir.path().join("clean.csv").exists());

    let o = solarzones(dir.path(), "ingest --climate world.csv --out clean.csv");
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(dir.path().join("clean.csv")).unwrap(), fs::read(dir.path().join("world.csv")).unwrap());
}

#[test]
fn zone_fit_and_assign() {
    let dir = tempfile::tempdir().unwrap();
    world(dir.path());
    let o = solarzones(dir.path(), "zone fit --climate world.csv --k 7 --seed 42 --out zones.json --map fit_map.csv");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = solarzones(dir.path(), "zone assign --model zones.json --climate world.csv --out map.csv");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let map = fs::read_to_string(dir.path().join("map.csv")).unwrap();
    assert_eq!(map, fs::read_to_string(dir.path().join("fit_map.csv")).unwrap());
    assert_eq!(map.lines().count(), 1 + 13 * 12);

    let o = solarzones(dir.path(), "zone fit --climate world.csv --k 7 --out z.json");
    assert_eq!(code(&o), 1);
}

#[test]
fn train_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    world(dir.path());
    let o = solarzones(dir.path(), "train --climate world.csv --sites 5 --strategy diversity --out m.json");
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--seed"));
    assert!(!dir.path().join("m.json").exists());
}

#[test]
fn sample_train_predict_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    world(d);
    let o = solarzones(
        d,
        "sample --climate world.csv --strategy diversity --sites 5 --seed 3 --out sel.json --training-set ts.csv",
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sel: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("sel.json")).unwrap()).unwrap();
    assert_eq!(sel["selection"]["site_ids"].as_array().unwrap().len(), 5);
    assert_eq!(fs::read_to_string(d.join("ts.csv")).unwrap().lines().count(), 61);

    // Training from the sampled set and sampling inside `train` agree.
    let o = solarzones(d, "train --training-set ts.csv --seed 3 --out a.json --report report.json");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = solarzones(d, "--jobs 1 train --climate world.csv --strategy diversity --sites 5 --seed 3 --out b.json");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(d.join("a.json")).unwrap(), fs::read(d.join("b.json")).unwrap());

    let o = solarzones(d, "predict --model a.json --lat 40.0 --lon -86.9 --climate world.csv");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("lat,lon,m01,"));
    let values: Vec<f64> = lines[1].split(',').take(15).map(|v| v.parse().unwrap()).collect();
    let monthly_sum: f64 = values[2..14].iter().sum();
    assert!((monthly_sum - values[14]).abs() < 1e-9 * values[14]);
    assert!(values[2..14].iter().all(|m| *m > 0.0));

    let o = solarzones(d, "predict --model a.json --climate world.csv --out preds.csv");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.join("preds.csv")).unwrap().lines().count(), 1 + 156);

    let o = solarzones(d, "evaluate --model a.json --climate world.csv --seed 3 --held-out ts.csv --out eval");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.join("eval/error_map.csv")).unwrap().lines().count(), 1 + 156 - 5);
    for f in ["ecdf.csv", "zone_report.json", "metrics.json"] {
        assert!(d.join("eval").join(f).is_file(), "{f}");
    }
}

#[test]
fn simulate_and_homogenize() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    world(d);
    let o = solarzones(d, "simulate --climate world.csv --out yields.csv");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.join("yields.csv")).unwrap().lines().count(), 1 + 156);
    let o = solarzones(d, "simulate --climate world.csv --tilt 95 --out bad.csv");
    assert_eq!(code(&o), 1);

    // Twelve identical fleets, one of them reporting a flat profile.
    let yields = fs::read_to_string(d.join("yields.csv")).unwrap();
    let header: Vec<&str> = yields.lines().next().unwrap().split(',').collect();
    let m01 = header.iter().position(|h| *h == "m01").unwrap();
    let mut field = String::from("site_id,lat,lon,year,month,energy_kwh,capacity_kw\n");
    for (i, line) in yields.lines().skip(1).step_by(12).enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let monthly: Vec<f64> = f[m01..m01 + 12].iter().map(|v| v.parse().unwrap()).collect();
        let total: f64 = monthly.iter().sum();
        for (m, v) in monthly.iter().enumerate() {
            let e = if i == 4 { total / 12.0 } else { 50.0 * v };
            field.push_str(&format!("s{i:02},{},{},2020,{},{e},10\n", f[0], f[1], m + 1));
        }
    }
    fs::write(d.join("field.csv"), field).unwrap();
    let o = solarzones(d, "homogenize --field field.csv --climate world.csv --out h.csv --filter-report filter.json");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("filter.json")).unwrap()).unwrap();
    assert_eq!(report["n_sites"], 13);
    assert_eq!(report["rejected"], serde_json::json!(["s04"]));
}

#[test]
fn missing_inputs_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = solarzones(dir.path(), "predict --model nope.json --lat 1 --lon 2 --climate nope.csv");
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("does not exist"));
    let o = solarzones(dir.path(), "experiment run nope.json");
    assert_eq!(code(&o), 1);
    let o = solarzones(dir.path(), "frobnicate");
    assert_eq!(code(&o), 1);
}

#[test]
fn experiment_with_missing_field_file_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "name": "broken",
        "world": {"synthetic": {"seed": 7, "dlat": 10.0, "dlon": 30.0, "lat_range": [-60.0, 60.0]}},
        "zoning": {"k": 7, "seed": 7},
        "datasets": [{"name": "field", "source": {"field_file": "missing.csv"}}],
        "models": [{"name": "m", "train_on": ["field"], "seed": 7}],
        "evaluation": {},
        "output_dir": "out"
    });
    fs::write(dir.path().join("broken.json"), config.to_string()).unwrap();
    let o = solarzones(dir.path(), "experiment run broken.json");
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("dataset:field"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}
