//! Plot-ready CSV tables written next to a fit or diagnose run.

use std::io::Write;
use std::path::Path;

use robust_cate::losses::{mad, LossKind};
use robust_cate::numeric::median;
use robust_cate::posterior::CateSummary;
use robust_cate::tail::HillPoint;

use crate::{create_file, CliError, CliResult};

const STUDENT_NU: f64 = 3.0;
const INFLUENCE_POINTS: usize = 401;

fn csv_err(e: csv::Error) -> CliError {
    CliError::input(format!("writing csv: {e}"))
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> CliResult<()> {
    w.flush().map_err(|e| CliError::input(format!("writing csv: {e}")))
}

/// Residual scale for the plots; falls back to the standard deviation when
/// more than half the residuals coincide.
fn robust_scale(resid: &[f64]) -> f64 {
    if let Ok(s) = mad(resid, true) {
        return s;
    }
    let n = resid.len().max(1) as f64;
    let m = resid.iter().sum::<f64>() / n;
    let sd = (resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        sd
    } else {
        1.0
    }
}

pub fn write_cate(path: &Path, cate: &CateSummary) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record(["row", "tau_mean", "tau_lo", "tau_hi"]).map_err(csv_err)?;
    for (i, ((m, lo), hi)) in cate.tau_mean.iter().zip(&cate.tau_lo).zip(&cate.tau_hi).enumerate() {
        w.write_record([i.to_string(), m.to_string(), lo.to_string(), hi.to_string()])
            .map_err(csv_err)?;
    }
    finish(w)
}

/// ψ curves over ±(max |residual|), with the residual scale σ taken from the
/// MAD. The Student-t column is the score of a t(3) likelihood with scale σ.
pub fn write_influence(path: &Path, resid: &[f64], c: f64) -> CliResult<()> {
    let sigma = robust_scale(resid);
    let reach = resid.iter().fold(3.0 * sigma, |a, r| a.max(r.abs()));
    let welsch = LossKind::Welsch { c };
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record(["r", "psi_squared", "psi_welsch", "psi_student_t", "sigma"])
        .map_err(csv_err)?;
    for i in 0..INFLUENCE_POINTS {
        let r = -reach + 2.0 * reach * i as f64 / (INFLUENCE_POINTS - 1) as f64;
        let t = (STUDENT_NU + 1.0) * r / (STUDENT_NU * sigma * sigma + r * r);
        w.write_record([
            r.to_string(),
            r.to_string(),
            welsch.psi(r).to_string(),
            t.to_string(),
            sigma.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

/// Equal-width histogram over median ± 8σ (σ from the MAD), with one
/// underflow and one overflow row so extremes stay visible.
pub fn write_histogram(path: &Path, resid: &[f64], bins: usize) -> CliResult<()> {
    if bins == 0 {
        return Err(CliError::input("histogram needs at least one bin"));
    }
    let sigma = robust_scale(resid);
    let centre = if resid.is_empty() { 0.0 } else { median(resid) };
    let lo = centre - 8.0 * sigma;
    let hi = centre + 8.0 * sigma;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    let (mut under, mut over) = (0usize, 0usize);
    for &r in resid {
        if r < lo {
            under += 1;
        } else if r >= hi {
            over += 1;
        } else {
            let b = (((r - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record(["bin_lo", "bin_hi", "count"]).map_err(csv_err)?;
    w.write_record(["-inf".to_string(), lo.to_string(), under.to_string()])
        .map_err(csv_err)?;
    for (b, c) in counts.iter().enumerate() {
        let a = lo + width * b as f64;
        w.write_record([a.to_string(), (a + width).to_string(), c.to_string()])
            .map_err(csv_err)?;
    }
    w.write_record([hi.to_string(), "inf".to_string(), over.to_string()])
        .map_err(csv_err)?;
    finish(w)
}

pub fn write_hill<W: Write>(out: W, hill: &[HillPoint]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "alpha_hat"]).map_err(csv_err)?;
    for p in hill {
        w.write_record([p.k.to_string(), p.alpha_hat.to_string()])
            .map_err(csv_err)?;
    }
    finish(w)
}
