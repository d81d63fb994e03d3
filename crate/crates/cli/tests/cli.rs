use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::Rng;
use serde_json::Value;
use tempfile::TempDir;

use robust_cate::dgp::{generate, DgpKind, DgpSpec};
use robust_cate::pipeline::{fit, FitConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_robust-cate"));
    c.env_remove("ROBUST_CATE_JOBS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &TempDir, name: &str, args: &[&str]) -> PathBuf {
    let p = dir.path().join(name);
    let mut full = vec!["gen-dgp", "--out", path_str(&p)];
    full.extend_from_slice(args);
    let o = run(&full);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    p
}

fn json_stdout(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("bad json ({e}): {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn clean_round_trip_recovers_ate() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "clean.csv", &["--kind", "clean-linear", "--n", "1000", "--seed", "11"]);
    let out = dir.path().join("fit");
    let o = run(&["fit", path_str(&data), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = json_stdout(&o);
    let mean = s["ate"]["mean"].as_f64().unwrap();
    assert!((mean - 2.0).abs() < 0.6, "ATE {mean}");
    for key in ["beta", "diagnostics", "eta", "warnings"] {
        assert!(s.get(key).is_some(), "missing {key}");
    }
    for f in ["summary.json", "draws.csv", "cate.csv", "influence.csv", "residual_hist.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let draws = fs::read_to_string(out.join("draws.csv")).unwrap();
    assert_eq!(draws.lines().next().unwrap(), "chain,iter,beta_0,energy,divergent");
}

#[test]
fn csv_round_trip_matches_in_memory_fit() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "w.csv", &["--kind", "whale", "--n", "300", "--density", "0.02", "--seed", "5"]);
    let o = run(&["fit", path_str(&data), "--seed", "9", "--severity", "severe"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let via_csv = String::from_utf8(o.stdout).unwrap();

    let mut spec = DgpSpec::new(DgpKind::Whale, 300, 0.02, 5);
    spec.dim = 5;
    let g = generate(&spec).unwrap();
    let mut cfg = FitConfig::with_severity("severe".parse().unwrap());
    cfg.seed = 9;
    let direct = fit(&g.dataset, &cfg).unwrap().summary_json();
    // compare printed text: re-parsing JSON floats is not exact
    assert_eq!(via_csv.trim_end(), serde_json::to_string_pretty(&direct).unwrap());
}

#[test]
fn missing_treatment_column_is_input_error() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, "y,x0\n1.0,0.5\n2.0,0.1\n").unwrap();
    let o = run(&["fit", path_str(&p)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains('w'));
}

#[test]
fn single_arm_is_shape_error() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "t.csv", &["--kind", "whale", "--n", "200", "--seed", "1"]);
    let text = fs::read_to_string(&data).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let w_col = header.split(',').position(|h| h == "w").unwrap();
    let mut out = String::from(header);
    out.push('\n');
    for l in lines {
        let mut cells: Vec<&str> = l.split(',').collect();
        cells[w_col] = "1";
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let p = dir.path().join("one_arm.csv");
    fs::write(&p, out).unwrap();
    let o = run(&["fit", path_str(&p)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn severity_override_reaches_nuisance_block() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "d.csv", &["--kind", "whale", "--n", "300", "--seed", "2"]);
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "severity = \"mild\"\n").unwrap();

    let o = run(&["fit", path_str(&data), "--config", path_str(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let loss = &json_stdout(&o)["nuisance"]["outcome_loss"];
    assert_eq!(loss["kind"], "huber");
    assert_eq!(loss["delta"].as_f64(), Some(1.345));

    let o = run(&["fit", path_str(&data), "--config", path_str(&cfg), "--severity", "severe"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json_stdout(&o)["nuisance"]["outcome_loss"]["delta"].as_f64(), Some(0.5));

    let o = run(&["fit", path_str(&data), "--severity", "none"]);
    assert_eq!(json_stdout(&o)["nuisance"]["outcome_loss"]["kind"], "squared_error");
}

#[test]
fn toml_config_sections_parse() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "d.csv", &["--kind", "clean-linear", "--n", "300", "--seed", "4"]);
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        r#"
severity = "moderate"
use_overlap = false
level = 0.9

basis = "1, x0, |x1| > 1.96"

[booster]
n_trees = 60
max_depth = 3

[sampler]
chains = 2
warmup = 200
samples = 300
"#,
    )
    .unwrap();
    let o = run(&["fit", path_str(&data), "--config", path_str(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = json_stdout(&o);
    assert_eq!(s["ate"]["level"].as_f64(), Some(0.9));
    assert_eq!(s["beta"].as_array().unwrap().len(), 3);
    assert_eq!(s["beta"][2]["term"], "|x1|>1.96");
    assert_eq!(s["nuisance"]["outcome_loss"]["delta"].as_f64(), Some(1.0));

    fs::write(&cfg, "severity = \"mild\"\nbogus_key = 1\n").unwrap();
    let o = run(&["fit", path_str(&data), "--config", path_str(&cfg)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn zero_jobs_is_input_error() {
    let o = run(&["gen-dgp", "--n", "10", "--jobs", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn diagnose_rejects_tiny_data() {
    let dir = TempDir::new().unwrap();
    let full = gen(&dir, "full.csv", &["--kind", "whale", "--n", "100", "--seed", "3"]);
    let text = fs::read_to_string(&full).unwrap();
    let head: Vec<&str> = text.lines().take(20).collect();
    let data = dir.path().join("tiny.csv");
    fs::write(&data, head.join("\n") + "\n").unwrap();
    let o = run(&["diagnose", path_str(&data)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

fn hill_from_stdout(stdout: &[u8]) -> Vec<(usize, f64)> {
    let text = String::from_utf8_lossy(stdout);
    let csv_part = text.split("\n\n").nth(1).expect("hill table after blank line");
    let mut rdr = csv::Reader::from_reader(csv_part.as_bytes());
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn diagnose_hill_plot_settles_near_pareto_index() {
    // symmetric Pareto(2) outcomes with no signal in x or w
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("pareto.csv");
    let mut rng = robust_cate::rng::stream(17, &[]);
    let n = 5000;
    let mut text = String::from("y,w,x0,x1\n");
    for i in 0..n {
        let u: f64 = 1.0 - rng.random::<f64>();
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let y = sign * u.powf(-0.5);
        text.push_str(&format!("{y},{},{},{}\n", i % 2, rng.random::<f64>(), rng.random::<f64>()));
    }
    fs::write(&p, text).unwrap();
    let o = run(&["diagnose", path_str(&p), "--k-max", "300"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hill = hill_from_stdout(&o.stdout);
    let mut mid: Vec<f64> = hill.iter().filter(|(k, _)| (50..=250).contains(k)).map(|p| p.1).collect();
    mid.sort_by(f64::total_cmp);
    let med = mid[mid.len() / 2];
    assert!((1.6..=2.5).contains(&med), "mid-k Hill median {med}");
}

#[test]
fn diagnose_writes_report_files() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "w.csv", &["--kind", "whale", "--n", "400", "--density", "0.05", "--seed", "8"]);
    let out = dir.path().join("diag");
    let o = run(&["diagnose", path_str(&data), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("diagnose.json")).unwrap()).unwrap();
    assert_eq!(report["severity"], "severe");
    let hill = fs::read_to_string(out.join("hill_plot.csv")).unwrap();
    assert_eq!(hill.lines().next().unwrap(), "k,alpha_hat");
}

const SMALL_BENCH: &str = r#"
name = "small"
dgp = "whale"
n = 300
densities = [0.0, 0.05]
seeds = 3
metrics = ["ate_error", "coverage", "pehe", "policy_regret", "diagnostics"]

[[configs]]
label = "none"
fit = { sampler = { warmup = 200, samples = 300 } }

[[configs]]
label = "severe"
fit = { severity = "severe", sampler = { warmup = 200, samples = 300 } }
"#;

fn write_spec(dir: &TempDir, body: &str) -> PathBuf {
    let p = dir.path().join("bench.toml");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn empty_density_grid_is_input_error() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(&dir, &SMALL_BENCH.replace("[0.0, 0.05]", "[]"));
    let o = run(&["benchmark", path_str(&spec), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

type Table = Vec<HashMap<String, String>>;

fn read_table(p: &Path) -> Table {
    let mut rdr = csv::Reader::from_path(p).unwrap();
    let headers = rdr.headers().unwrap().clone();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            headers.iter().zip(r.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect()
        })
        .collect()
}

fn num(row: &HashMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or_else(|_| panic!("{key} = '{}'", row[key]))
}

#[test]
fn benchmark_aggregates_match_rows_and_ignore_thread_count() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(&dir, SMALL_BENCH);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = run(&["benchmark", path_str(&spec), "--out", path_str(&a), "--jobs", "1", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = bin()
        .args(["benchmark", path_str(&spec), "--out", path_str(&b), "--seed", "3"])
        .env("ROBUST_CATE_JOBS", "4")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["results.csv", "aggregate.csv", "density_sweep.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    let rows = read_table(&a.join("results.csv"));
    assert_eq!(rows.len(), 2 * 3 * 2);
    assert!(rows.iter().all(|r| r["error"].is_empty()));
    let agg = read_table(&a.join("aggregate.csv"));
    assert_eq!(agg.len(), 4);
    for g in &agg {
        let members: Vec<_> = rows
            .iter()
            .filter(|r| r["cell"] == g["cell"] && r["config"] == g["config"])
            .collect();
        assert_eq!(members.len(), 3);
        let k = members.len() as f64;
        for (col, agg_col) in [
            ("ate_bias", "ate_bias_mean"),
            ("ci_width", "ci_width_mean"),
            ("pehe", "pehe_mean"),
            ("policy_regret", "policy_regret_mean"),
            ("covered", "coverage"),
        ] {
            let m = members.iter().map(|r| num(r, col)).sum::<f64>() / k;
            assert!((m - num(g, agg_col)).abs() <= 1e-12, "{agg_col}: {m} vs {}", g[agg_col]);
        }
        let rmse = (members.iter().map(|r| num(r, "ate_bias").powi(2)).sum::<f64>() / k).sqrt();
        assert!((rmse - num(g, "ate_rmse")).abs() <= 1e-12);
        assert!(num(g, "coverage_lo") <= num(g, "coverage") && num(g, "coverage") <= num(g, "coverage_hi"));
    }
}

#[test]
fn benchmark_seed_changes_results() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(&dir, &SMALL_BENCH.replace("seeds = 3", "seeds = 1"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run(&["benchmark", path_str(&spec), "--out", path_str(&a), "--seed", "1"])), 0);
    assert_eq!(code(&run(&["benchmark", path_str(&spec), "--out", path_str(&b), "--seed", "2"])), 0);
    assert_ne!(fs::read(a.join("results.csv")).unwrap(), fs::read(b.join("results.csv")).unwrap());
}
