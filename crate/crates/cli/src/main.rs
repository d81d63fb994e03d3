mod bench;
mod plots;

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use robust_cate::data::{read_csv, write_csv, ExtraColumns, LoadedCsv};
use robust_cate::dgp::{generate, DgpKind, DgpParams, DgpSpec};
use robust_cate::nuisance::{fit_propensity, NuisanceConfig, SeverityPreset};
use robust_cate::pipeline::{fit, predict_cate, FitConfig};
use robust_cate::posterior::LikelihoodKind;
use robust_cate::tail::{
    hill_plot, propensity_warnings, residuals_for_severity, severity_from_residuals,
    AutoSeverityConfig,
};
use robust_cate::Error;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_SHAPE: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::InvalidInput(_) | Error::Csv(_) | Error::Io(_) => EXIT_INPUT,
            Error::DataShape(_) => EXIT_SHAPE,
            Error::Degenerate(_) | Error::Numeric(_) | Error::Stage { .. } => EXIT_NUMERIC,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "robust-cate", version, about = "Robust Bayesian CATE estimation, diagnostics and benchmarks")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct GlobalOpts {
    /// Master seed; overrides any seed in the config or spec.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "ROBUST_CATE_JOBS")]
    pub jobs: Option<usize>,
    /// Output location (directory for fit/diagnose/benchmark, file for gen-dgp).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a dataset and print the JSON summary.
    Fit(FitArgs),
    /// Run a DGP sweep from a TOML spec.
    Benchmark(BenchArgs),
    /// Tail index, recommended severity and overlap checks for a dataset.
    Diagnose(DiagnoseArgs),
    /// Write a synthetic dataset as CSV.
    GenDgp(GenArgs),
}

#[derive(Args)]
struct FitArgs {
    /// CSV with columns y, w, x0..x{d-1}.
    data: PathBuf,
    /// TOML fit configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's severity preset.
    #[arg(long)]
    severity: Option<SeverityPreset>,
}

#[derive(Args)]
struct BenchArgs {
    /// TOML benchmark spec.
    spec: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    data: PathBuf,
    /// Share of largest residuals used by the Hill estimator.
    #[arg(long, default_value_t = 0.1)]
    top_fraction: f64,
    /// Largest k in the Hill plot.
    #[arg(long, default_value_t = 200)]
    k_max: usize,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "whale")]
    kind: DgpKind,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, default_value_t = 0.0)]
    density: f64,
    #[arg(long)]
    whale_shift: Option<f64>,
    #[arg(long)]
    propensity_coef: Option<f64>,
    #[arg(long)]
    treated_only: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            return Err(CliError::input("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::input(format!("cannot size thread pool: {e}")))?;
    }
    match cli.command {
        Command::Fit(a) => cmd_fit(&a, &cli.global),
        Command::Benchmark(a) => bench::cmd_benchmark(&a.spec, &cli.global),
        Command::Diagnose(a) => cmd_diagnose(&a, &cli.global),
        Command::GenDgp(a) => cmd_gen(&a, &cli.global),
    }
}

pub fn load_csv(path: &Path) -> CliResult<LoadedCsv> {
    let f = File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    read_csv(BufReader::new(f)).map_err(|e| {
        let mut c = CliError::from(e);
        c.message = format!("{}: {}", path.display(), c.message);
        c
    })
}

pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))
}

pub fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &serde_json::Value) -> CliResult<()> {
    let mut f = create_file(path)?;
    serde_json::to_writer_pretty(&mut f, v).map_err(|e| CliError::input(e.to_string()))?;
    writeln!(f).and_then(|_| f.flush()).map_err(|e| CliError::input(e.to_string()))
}

fn cmd_fit(args: &FitArgs, g: &GlobalOpts) -> CliResult<()> {
    let loaded = load_csv(&args.data)?;
    let mut cfg: FitConfig = match &args.config {
        Some(p) => load_toml(p)?,
        None => FitConfig::default(),
    };
    if let Some(s) = args.severity {
        cfg.severity = s;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let res = fit(&loaded.dataset, &cfg)?;
    for w in &res.warnings {
        eprintln!("{w}");
    }
    let summary = res.summary_json();
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serialises"));

    if let Some(dir) = &g.out {
        create_dir(dir)?;
        write_json(&dir.join("summary.json"), &summary)?;
        res.draws.write_csv(create_file(&dir.join("draws.csv"))?)?;
        let cate = predict_cate(&res, &loaded.dataset.x)?;
        plots::write_cate(&dir.join("cate.csv"), &cate)?;
        let resid: Vec<f64> = res
            .prepared
            .pseudo
            .d
            .iter()
            .zip(res.tau_hat())
            .map(|(d, t)| d - t)
            .collect();
        let c = match res.likelihood {
            LikelihoodKind::Welsch { c } => c,
            _ => robust_cate::losses::WELSCH_C,
        };
        plots::write_influence(&dir.join("influence.csv"), &resid, c)?;
        plots::write_histogram(&dir.join("residual_hist.csv"), &resid, 60)?;
    }
    Ok(())
}

fn cmd_diagnose(args: &DiagnoseArgs, g: &GlobalOpts) -> CliResult<()> {
    let loaded = load_csv(&args.data)?;
    let ds = &loaded.dataset;
    let cfg = AutoSeverityConfig {
        top_fraction: args.top_fraction,
        ..AutoSeverityConfig::default()
    };
    if ds.len() < 20 {
        return Err(CliError::input(format!(
            "{} rows; the Hill estimator needs at least 20",
            ds.len()
        )));
    }
    let resid = residuals_for_severity(ds, &cfg.model)?;
    let auto = severity_from_residuals(&resid, &ds.y, &cfg);
    let hill = hill_plot(&resid, args.k_max)?;

    let nc = NuisanceConfig::default();
    let prop = fit_propensity(&ds.x, &ds.w, &nc.propensity, nc.clip, None)?;
    let check = propensity_warnings(&prop.predict(&ds.x)?);

    let mut warnings = auto.warnings.clone();
    warnings.extend(check.warnings.iter().cloned());
    for w in &warnings {
        eprintln!("{w}");
    }
    let report = json!({
        "n": ds.len(),
        "alpha_hat": auto.alpha_hat,
        "severity": auto.severity,
        "tail_threshold": auto.tail.map(|t| t.threshold),
        "n_exceedances": auto.tail.map(|t| t.n_exceedances),
        "gross_outlier_share": auto.gross_outlier_share,
        "propensity": {"min": check.min, "max": check.max, "auto_overlap": check.auto_overlap},
        "warnings": warnings.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
    match &g.out {
        Some(dir) => {
            create_dir(dir)?;
            write_json(&dir.join("diagnose.json"), &report)?;
            plots::write_hill(create_file(&dir.join("hill_plot.csv"))?, &hill)?;
        }
        None => {
            println!();
            plots::write_hill(io::stdout().lock(), &hill)?;
        }
    }
    Ok(())
}

fn cmd_gen(args: &GenArgs, g: &GlobalOpts) -> CliResult<()> {
    let mut params = DgpParams {
        treated_only: args.treated_only,
        ..DgpParams::default()
    };
    if let Some(s) = args.whale_shift {
        params.whale_shift = s;
    }
    if args.propensity_coef.is_some() {
        params.propensity_coef = args.propensity_coef;
    }
    let spec = DgpSpec {
        kind: args.kind,
        n: args.n,
        dim: args.dim,
        density: args.density,
        params,
        seed: g.seed.unwrap_or(0),
    };
    let data = generate(&spec)?;
    let extra = ExtraColumns {
        contaminated: Some(&data.contaminated),
    };
    match &g.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            write_csv(&data.dataset, extra, create_file(path)?)?;
            eprintln!(
                "wrote {} rows to {} (sample ATE {:.4})",
                data.dataset.len(),
                path.display(),
                data.ate()
            );
        }
        None => write_csv(&data.dataset, extra, io::stdout().lock())?,
    }
    Ok(())
}
