//! Observational datasets and the CSV exchange format.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Dense row-major covariate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl Covariates {
    pub fn from_row_major(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * d {
            return Err(Error::invalid(format!(
                "covariate buffer has {} values, expected {n}x{d}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite covariate at row {}, column {}",
                pos / d.max(1),
                pos % d.max(1)
            )));
        }
        Ok(Self { n, d, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged covariate rows"));
        }
        Self::from_row_major(rows.len(), d, rows.concat())
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.d + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Covariates {
        let mut values = Vec::with_capacity(rows.len() * self.d);
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        Covariates {
            n: rows.len(),
            d: self.d,
            values,
        }
    }

    /// Append a column (used by the S-learner, which treats W as a feature).
    pub fn with_column(&self, extra: &[f64]) -> Result<Covariates> {
        if extra.len() != self.n {
            return Err(Error::invalid("appended column length mismatch"));
        }
        let d = self.d + 1;
        let mut values = Vec::with_capacity(self.n * d);
        for (i, &e) in extra.iter().enumerate() {
            values.extend_from_slice(self.row(i));
            values.push(e);
        }
        Covariates::from_row_major(self.n, d, values)
    }
}

/// Covariates, binary treatment, outcome and (for synthetic data) the true CATE.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalDataset {
    pub x: Covariates,
    pub w: Vec<bool>,
    pub y: Vec<f64>,
    pub tau_true: Option<Vec<f64>>,
}

impl CausalDataset {
    pub fn new(x: Covariates, w: Vec<bool>, y: Vec<f64>) -> Result<Self> {
        let ds = Self {
            x,
            w,
            y,
            tau_true: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_truth(mut self, tau: Vec<f64>) -> Result<Self> {
        if tau.len() != self.len() {
            return Err(Error::invalid("tau_true length mismatch"));
        }
        self.tau_true = Some(tau);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.w.iter().filter(|&&w| w).count()
    }

    /// Structural checks; single-arm data is reported as a shape error.
    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.x.nrows() != n || self.w.len() != n {
            return Err(Error::invalid(format!(
                "length mismatch: x has {} rows, w {}, y {}",
                self.x.nrows(),
                self.w.len(),
                n
            )));
        }
        if let Some(i) = self.y.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite outcome at row {i}")));
        }
        let treated = self.n_treated();
        if treated == 0 || treated == n {
            return Err(Error::DataShape(format!(
                "dataset has a single treatment arm ({treated} treated of {n})"
            )));
        }
        Ok(())
    }

    pub fn treatment_as_f64(&self) -> Vec<f64> {
        self.w.iter().map(|&w| if w { 1.0 } else { 0.0 }).collect()
    }
}

/// Optional extra columns written alongside a dataset.
#[derive(Debug, Clone, Default)]
pub struct ExtraColumns<'a> {
    pub contaminated: Option<&'a [bool]>,
}

/// Write `y, w, x0..x{d-1}[, tau_true][, contaminated]`.
pub fn write_csv<W: Write>(ds: &CausalDataset, extra: ExtraColumns<'_>, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let d = ds.dim();
    let mut header: Vec<String> = vec!["y".into(), "w".into()];
    header.extend((0..d).map(|j| format!("x{j}")));
    if ds.tau_true.is_some() {
        header.push("tau_true".into());
    }
    if extra.contaminated.is_some() {
        header.push("contaminated".into());
    }
    wtr.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..ds.len() {
        record.clear();
        record.push(format_f64(ds.y[i]));
        record.push(if ds.w[i] { "1".into() } else { "0".into() });
        record.extend(ds.x.row(i).iter().map(|&v| format_f64(v)));
        if let Some(t) = &ds.tau_true {
            record.push(format_f64(t[i]));
        }
        if let Some(c) = extra.contaminated {
            record.push(if c[i] { "1".into() } else { "0".into() });
        }
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the identical f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Parsed CSV: the dataset plus the optional contamination flag column.
#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub dataset: CausalDataset,
    pub contaminated: Option<Vec<bool>>,
}

/// Read the CSV schema written by [`write_csv`]. Columns may appear in any
/// order; `x0..x{d-1}` must be contiguous from zero.
pub fn read_csv<R: Read>(input: R) -> Result<LoadedCsv> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let y_col = find("y").ok_or_else(|| Error::invalid("missing column 'y'"))?;
    let w_col = find("w").ok_or_else(|| Error::invalid("missing column 'w'"))?;
    let mut x_cols = Vec::new();
    while let Some(c) = find(&format!("x{}", x_cols.len())) {
        x_cols.push(c);
    }
    if x_cols.is_empty() {
        return Err(Error::invalid("missing covariate column 'x0'"));
    }
    let stray = headers.iter().find(|h| {
        h.starts_with('x') && h[1..].parse::<usize>().is_ok_and(|j| j >= x_cols.len())
    });
    if let Some(h) = stray {
        return Err(Error::invalid(format!(
            "covariate column '{h}' present but x{} missing",
            x_cols.len()
        )));
    }
    let tau_col = find("tau_true");
    let cont_col = find("contaminated");

    let d = x_cols.len();
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    let mut ys = Vec::new();
    let mut taus = Vec::new();
    let mut conts = Vec::new();
    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row_idx + 2;
        let field = |col: usize| -> Result<f64> {
            let raw = rec.get(col).ok_or_else(|| {
                Error::invalid(format!("row {line}: missing field for column '{}'", &headers[col]))
            })?;
            let v: f64 = raw.parse().map_err(|_| {
                Error::invalid(format!(
                    "row {line}, column '{}': cannot parse '{raw}' as a number",
                    &headers[col]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::invalid(format!(
                    "row {line}, column '{}': non-finite value",
                    &headers[col]
                )));
            }
            Ok(v)
        };
        let binary = |col: usize| -> Result<bool> {
            let v = field(col)?;
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(Error::invalid(format!(
                    "row {line}, column '{}': expected 0 or 1, got {v}",
                    &headers[col]
                )))
            }
        };
        ys.push(field(y_col)?);
        ws.push(binary(w_col)?);
        for &c in &x_cols {
            xs.push(field(c)?);
        }
        if let Some(c) = tau_col {
            taus.push(field(c)?);
        }
        if let Some(c) = cont_col {
            conts.push(binary(c)?);
        }
    }
    if ys.is_empty() {
        return Err(Error::invalid("csv has no data rows"));
    }
    let x = Covariates::from_row_major(ys.len(), d, xs)?;
    let mut dataset = CausalDataset::new(x, ws, ys)?;
    if tau_col.is_some() {
        dataset = dataset.with_truth(taus)?;
    }
    Ok(LoadedCsv {
        dataset,
        contaminated: cont_col.map(|_| conts),
    })
}
