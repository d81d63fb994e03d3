//! `benchmark` subcommand: a density × seed grid over one DGP, fitted under
//! several configurations.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use robust_cate::dgp::{generate, DgpKind, DgpParams, DgpSpec, GeneratedData};
use robust_cate::metrics::{pehe, policy_regret, wilson_interval, Z_975};
use robust_cate::modular::dispersion_ratio;
use robust_cate::pipeline::{fit, FitConfig};
use robust_cate::rng::{derive_seed, tag};
use robust_cate::tail::{auto_severity, AutoSeverityConfig};

use crate::{create_dir, create_file, load_toml, CliError, CliResult, GlobalOpts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AteError,
    Coverage,
    Pehe,
    PolicyRegret,
    Diagnostics,
    AutoSeverity,
    Dispersion,
}

fn default_metrics() -> Vec<Metric> {
    vec![
        Metric::AteError,
        Metric::Coverage,
        Metric::Pehe,
        Metric::PolicyRegret,
        Metric::Diagnostics,
    ]
}

fn default_n() -> usize {
    1000
}

fn default_dim() -> usize {
    5
}

fn default_repeats() -> usize {
    5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedConfig {
    pub label: String,
    #[serde(default)]
    pub fit: FitConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub dgp: DgpKind,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub densities: Vec<f64>,
    pub seeds: usize,
    #[serde(default)]
    pub params: DgpParams,
    pub configs: Vec<NamedConfig>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    /// Refits per dataset for the dispersion metric.
    #[serde(default = "default_repeats")]
    pub dispersion_repeats: usize,
    pub output: Option<PathBuf>,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> CliResult<()> {
        if self.name.trim().is_empty() {
            return Err(CliError::input("benchmark name is empty"));
        }
        if self.densities.is_empty() {
            return Err(CliError::input("density grid is empty"));
        }
        if let Some(d) = self.densities.iter().find(|d| !(d.is_finite() && (0.0..=1.0).contains(*d))) {
            return Err(CliError::input(format!("density {d} outside [0, 1]")));
        }
        if self.seeds == 0 {
            return Err(CliError::input("seeds must be at least 1"));
        }
        if self.configs.is_empty() {
            return Err(CliError::input("no configs given"));
        }
        let mut seen = HashSet::new();
        for c in &self.configs {
            if !seen.insert(c.label.as_str()) {
                return Err(CliError::input(format!("duplicate config label '{}'", c.label)));
            }
            c.fit
                .validate()
                .map_err(|e| CliError::input(format!("config '{}': {e}", c.label)))?;
        }
        if self.metrics.contains(&Metric::Dispersion) && self.dispersion_repeats < 2 {
            return Err(CliError::input("dispersion_repeats must be at least 2"));
        }
        Ok(())
    }

    fn wants(&self, m: Metric) -> bool {
        self.metrics.contains(&m)
    }

    /// Dataset seed for one (cell, seed index) pair.
    pub fn dgp_seed(&self, cell: usize, seed_index: usize) -> u64 {
        derive_seed(self.seed, &[tag(&self.name), cell as u64, seed_index as u64])
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ResultRow {
    pub cell: usize,
    pub density: f64,
    pub config: String,
    pub seed_index: usize,
    pub dgp_seed: u64,
    pub ate_true: Option<f64>,
    pub ate_mean: Option<f64>,
    pub ate_bias: Option<f64>,
    pub ate_lo: Option<f64>,
    pub ate_hi: Option<f64>,
    pub ci_width: Option<f64>,
    pub covered: Option<u8>,
    pub pehe: Option<f64>,
    pub policy_regret: Option<f64>,
    pub eta: Option<f64>,
    pub max_r_hat: Option<f64>,
    pub min_ess: Option<f64>,
    pub divergences: Option<usize>,
    pub auto_severity: Option<String>,
    pub alpha_hat: Option<f64>,
    pub dispersion_rho: Option<f64>,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub cell: usize,
    pub density: f64,
    pub config: String,
    pub n_ok: usize,
    pub n_error: usize,
    pub ate_bias_mean: Option<f64>,
    pub ate_rmse: Option<f64>,
    pub ci_width_mean: Option<f64>,
    pub coverage: Option<f64>,
    pub coverage_lo: Option<f64>,
    pub coverage_hi: Option<f64>,
    pub pehe_mean: Option<f64>,
    pub policy_regret_mean: Option<f64>,
    pub eta_mean: Option<f64>,
    pub max_r_hat_mean: Option<f64>,
    pub divergences_mean: Option<f64>,
    pub alpha_hat_mean: Option<f64>,
    pub dispersion_rho_mean: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut k) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        k += 1;
    }
    (k > 0).then(|| s / k as f64)
}

pub fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(usize, usize), Vec<&ResultRow>> = BTreeMap::new();
    let mut order: BTreeMap<String, usize> = BTreeMap::new();
    for r in rows {
        let next = order.len();
        let ci = *order.entry(r.config.clone()).or_insert(next);
        groups.entry((r.cell, ci)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let first = g[0];
            let ok: Vec<&ResultRow> = g.iter().copied().filter(|r| r.error.is_empty()).collect();
            let cov: Vec<u8> = ok.iter().filter_map(|r| r.covered).collect();
            let (coverage, coverage_lo, coverage_hi) = if cov.is_empty() {
                (None, None, None)
            } else {
                let k = cov.iter().filter(|&&c| c == 1).count();
                let (lo, hi) = wilson_interval(k, cov.len(), Z_975);
                (Some(k as f64 / cov.len() as f64), Some(lo), Some(hi))
            };
            AggregateRow {
                cell: first.cell,
                density: first.density,
                config: first.config.clone(),
                n_ok: ok.len(),
                n_error: g.len() - ok.len(),
                ate_bias_mean: mean_of(ok.iter().map(|r| r.ate_bias)),
                ate_rmse: mean_of(ok.iter().map(|r| r.ate_bias.map(|b| b * b))).map(f64::sqrt),
                ci_width_mean: mean_of(ok.iter().map(|r| r.ci_width)),
                coverage,
                coverage_lo,
                coverage_hi,
                pehe_mean: mean_of(ok.iter().map(|r| r.pehe)),
                policy_regret_mean: mean_of(ok.iter().map(|r| r.policy_regret)),
                eta_mean: mean_of(ok.iter().map(|r| r.eta)),
                max_r_hat_mean: mean_of(ok.iter().map(|r| r.max_r_hat)),
                divergences_mean: mean_of(ok.iter().map(|r| r.divergences.map(|d| d as f64))),
                alpha_hat_mean: mean_of(ok.iter().map(|r| r.alpha_hat)),
                dispersion_rho_mean: mean_of(ok.iter().map(|r| r.dispersion_rho)),
            }
        })
        .collect()
}

struct Task {
    cell: usize,
    seed_index: usize,
}

fn dataset_for(spec: &BenchmarkSpec, cell: usize, seed_index: usize) -> robust_cate::Result<GeneratedData> {
    generate(&DgpSpec {
        kind: spec.dgp,
        n: spec.n,
        dim: spec.dim,
        density: spec.densities[cell],
        params: spec.params,
        seed: spec.dgp_seed(cell, seed_index),
    })
}

fn fit_row(spec: &BenchmarkSpec, data: &GeneratedData, cfg: &FitConfig, row: &mut ResultRow) -> robust_cate::Result<()> {
    let res = fit(&data.dataset, cfg)?;
    let truth = data.ate();
    let tau_hat = res.tau_hat();
    if spec.wants(Metric::AteError) {
        row.ate_true = Some(truth);
        row.ate_mean = Some(res.ate.mean);
        row.ate_bias = Some(res.ate.mean - truth);
    }
    if spec.wants(Metric::Coverage) {
        row.ate_lo = Some(res.ate.lo);
        row.ate_hi = Some(res.ate.hi);
        row.ci_width = Some(res.ate.width());
        row.covered = Some(res.ate.covers(truth) as u8);
    }
    if spec.wants(Metric::Pehe) {
        row.pehe = Some(pehe(&tau_hat, &data.tau_true)?);
    }
    if spec.wants(Metric::PolicyRegret) {
        row.policy_regret = Some(policy_regret(&tau_hat, &data.tau_true)?);
    }
    if spec.wants(Metric::Diagnostics) {
        row.eta = Some(res.eta);
        if let Some(d) = &res.diagnostics {
            row.max_r_hat = Some(d.max_r_hat());
            row.min_ess = Some(d.ess.iter().copied().fold(f64::INFINITY, f64::min));
            row.divergences = Some(d.divergences);
        }
    }
    if spec.wants(Metric::Dispersion) {
        row.dispersion_rho = Some(dispersion_ratio(&data.dataset, cfg, spec.dispersion_repeats)?.rho);
    }
    Ok(())
}

fn run_task(spec: &BenchmarkSpec, t: &Task) -> Vec<ResultRow> {
    let dgp_seed = spec.dgp_seed(t.cell, t.seed_index);
    let base = |label: &str| ResultRow {
        cell: t.cell,
        density: spec.densities[t.cell],
        config: label.to_string(),
        seed_index: t.seed_index,
        dgp_seed,
        ..ResultRow::default()
    };
    let data = match dataset_for(spec, t.cell, t.seed_index) {
        Ok(d) => d,
        Err(e) => {
            return spec
                .configs
                .iter()
                .map(|c| ResultRow {
                    error: format!("dgp: {e}"),
                    ..base(&c.label)
                })
                .collect()
        }
    };
    let auto = spec
        .wants(Metric::AutoSeverity)
        .then(|| auto_severity(&data.dataset, &AutoSeverityConfig::default()));
    // every config sees the same fit seed so configs differ only in their settings
    let fit_seed = derive_seed(dgp_seed, &[tag("fit")]);
    spec.configs
        .iter()
        .map(|c| {
            let mut row = base(&c.label);
            match &auto {
                Some(Ok(a)) => {
                    row.auto_severity = Some(a.severity.as_str().to_string());
                    row.alpha_hat = a.alpha_hat;
                }
                Some(Err(e)) => row.error = format!("auto_severity: {e}"),
                None => {}
            }
            if row.error.is_empty() {
                let cfg = FitConfig {
                    seed: fit_seed,
                    ..c.fit.clone()
                };
                if let Err(e) = fit_row(spec, &data, &cfg, &mut row) {
                    row.error = e.to_string();
                }
            }
            row
        })
        .collect()
}

/// Runs the grid. Rows come back ordered by (cell, seed, config) whatever the
/// thread count.
pub fn run_benchmark(spec: &BenchmarkSpec) -> Vec<ResultRow> {
    let tasks: Vec<Task> = (0..spec.densities.len())
        .flat_map(|cell| (0..spec.seeds).map(move |seed_index| Task { cell, seed_index }))
        .collect();
    tasks.par_iter().flat_map_iter(|t| run_task(spec, t)).collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Wide table: one row per density, an RMSE / coverage / PEHE column per config.
fn write_density_sweep(path: &Path, spec: &BenchmarkSpec, agg: &[AggregateRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    let mut header = vec!["density".to_string()];
    for c in &spec.configs {
        for m in ["ate_rmse", "coverage", "pehe"] {
            header.push(format!("{}_{m}", c.label));
        }
    }
    let err = |e: csv::Error| CliError::input(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(err)?;
    let cell_str = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (cell, d) in spec.densities.iter().enumerate() {
        let mut rec = vec![d.to_string()];
        for c in &spec.configs {
            let a = agg.iter().find(|a| a.cell == cell && a.config == c.label);
            rec.push(cell_str(a.and_then(|a| a.ate_rmse)));
            rec.push(cell_str(a.and_then(|a| a.coverage)));
            rec.push(cell_str(a.and_then(|a| a.pehe_mean)));
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn cmd_benchmark(spec_path: &Path, g: &GlobalOpts) -> CliResult<()> {
    let mut spec: BenchmarkSpec = load_toml(spec_path)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let dir = g
        .out
        .clone()
        .or_else(|| spec.output.clone())
        .unwrap_or_else(|| PathBuf::from(format!("bench_{}", spec.name)));
    create_dir(&dir)?;

    let rows = run_benchmark(&spec);
    let agg = aggregate(&rows);
    write_rows(&dir.join("results.csv"), &rows)?;
    write_rows(&dir.join("aggregate.csv"), &agg)?;
    write_density_sweep(&dir.join("density_sweep.csv"), &spec, &agg)?;

    let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed; see the error column", rows.len());
    }
    eprintln!("wrote {} rows to {}", rows.len(), dir.display());
    Ok(())
}
