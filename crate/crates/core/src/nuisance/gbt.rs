//! Histogram gradient-boosted regression trees.
//!
//! Regression rounds fit trees to ψ(r) of the configured loss with unit
//! curvature; the logistic variant takes Newton steps on the log-loss.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::Covariates;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::numeric::weighted_median;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Row fraction drawn without replacement per tree.
    pub subsample: f64,
    /// L2 penalty on leaf values.
    pub l2: f64,
    pub max_bins: usize,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            n_trees: 300,
            max_depth: 6,
            learning_rate: 0.03,
            min_samples_leaf: 1,
            loss: LossKind::SquaredError,
            seed: 0,
            subsample: 1.0,
            l2: 3.0,
            max_bins: 256,
        }
    }
}

impl GbtParams {
    /// Defaults for the treatment-assignment booster: shallower and slower
    /// than the outcome models so that 1/π̂ stays tame.
    pub fn propensity_default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 2,
            learning_rate: 0.05,
            min_samples_leaf: 50,
            l2: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::invalid("n_trees must be at least 1"));
        }
        if self.max_depth == 0 {
            return Err(Error::invalid("max_depth must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::invalid(format!(
                "learning_rate must lie in (0, 1], got {}",
                self.learning_rate
            )));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::invalid("min_samples_leaf must be at least 1"));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::invalid("subsample must lie in (0, 1]"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::invalid("l2 must be non-negative"));
        }
        if !(2..=256).contains(&self.max_bins) {
            return Err(Error::invalid("max_bins must lie in [2, 256]"));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtModel {
    base: f64,
    trees: Vec<Tree>,
    dim: usize,
}

impl GbtModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.base + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict(&self, x: &Covariates) -> Result<Vec<f64>> {
        if x.ncols() != self.dim {
            return Err(Error::DataShape(format!(
                "model trained on {} covariates, got {}",
                self.dim,
                x.ncols()
            )));
        }
        Ok((0..x.nrows()).map(|i| self.predict_row(x.row(i))).collect())
    }
}

/// Boosted logistic model for P(W = 1 | X) with clipped output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityModel {
    logit: GbtModel,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl PropensityModel {
    pub fn predict(&self, x: &Covariates) -> Result<Vec<f64>> {
        Ok(self
            .logit
            .predict(x)?
            .into_iter()
            .map(|z| sigmoid(z).clamp(self.clip_lo, self.clip_hi))
            .collect())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-feature quantile cut points and the binned training matrix.
struct Binned {
    cuts: Vec<Vec<f64>>,
    /// Column-major bin codes.
    codes: Vec<Vec<u8>>,
}

impl Binned {
    fn new(x: &Covariates, max_bins: usize) -> Self {
        let n = x.nrows();
        let mut cuts = Vec::with_capacity(x.ncols());
        let mut codes = Vec::with_capacity(x.ncols());
        for j in 0..x.ncols() {
            let col = x.column(j);
            let mut s = col.clone();
            s.sort_by(f64::total_cmp);
            s.dedup();
            let c: Vec<f64> = if s.len() <= max_bins {
                s.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
            } else {
                let mut all = col.clone();
                all.sort_by(f64::total_cmp);
                let mut c: Vec<f64> = (1..max_bins)
                    .map(|b| {
                        let pos = b * n / max_bins;
                        0.5 * (all[pos - 1] + all[pos])
                    })
                    .collect();
                c.dedup();
                c
            };
            codes.push(
                col.iter()
                    .map(|&v| c.partition_point(|&t| t < v) as u8)
                    .collect(),
            );
            cuts.push(c);
        }
        Self { cuts, codes }
    }
}

struct Grower<'a> {
    binned: &'a Binned,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbtParams,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, Default)]
struct Bin {
    g: f64,
    h: f64,
    count: usize,
}

struct SplitChoice {
    feature: usize,
    bin: usize,
    gain: f64,
}

impl Grower<'_> {
    fn leaf_value(&self, rows: &[usize]) -> f64 {
        let (g, h) = rows
            .iter()
            .fold((0.0, 0.0), |(g, h), &i| (g + self.grad[i], h + self.hess[i]));
        let denom = h + self.params.l2;
        if denom <= 0.0 {
            0.0
        } else {
            self.params.learning_rate * g / denom
        }
    }

    fn best_split(&self, rows: &[usize]) -> Option<SplitChoice> {
        let min_leaf = self.params.min_samples_leaf;
        if rows.len() < 2 * min_leaf {
            return None;
        }
        let l2 = self.params.l2;
        let score = |g: f64, h: f64| if h + l2 > 0.0 { g * g / (h + l2) } else { 0.0 };
        let (gt, ht) = rows
            .iter()
            .fold((0.0, 0.0), |(g, h), &i| (g + self.grad[i], h + self.hess[i]));
        let parent = score(gt, ht);
        let mut best: Option<SplitChoice> = None;
        for (f, codes) in self.binned.codes.iter().enumerate() {
            let nb = self.binned.cuts[f].len() + 1;
            if nb < 2 {
                continue;
            }
            let mut hist = vec![Bin::default(); nb];
            for &i in rows {
                let b = &mut hist[codes[i] as usize];
                b.g += self.grad[i];
                b.h += self.hess[i];
                b.count += 1;
            }
            let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0usize);
            for (b, bin) in hist.iter().enumerate().take(nb - 1) {
                gl += bin.g;
                hl += bin.h;
                cl += bin.count;
                let cr = rows.len() - cl;
                if cl < min_leaf {
                    continue;
                }
                if cr < min_leaf {
                    break;
                }
                let gain = score(gl, hl) + score(gt - gl, ht - hl) - parent;
                if gain > 1e-12 * (1.0 + parent.abs()) && best.as_ref().is_none_or(|s| gain > s.gain) {
                    best = Some(SplitChoice {
                        feature: f,
                        bin: b,
                        gain,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(0.0));
        let split = if depth < self.params.max_depth {
            self.best_split(&rows)
        } else {
            None
        };
        match split {
            None => {
                self.nodes[id] = Node::Leaf(self.leaf_value(&rows));
            }
            Some(s) => {
                let codes = &self.binned.codes[s.feature];
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.into_iter().partition(|&i| codes[i] as usize <= s.bin);
                let left = self.grow(l, depth + 1);
                let right = self.grow(r, depth + 1);
                self.nodes[id] = Node::Split {
                    feature: s.feature,
                    threshold: self.binned.cuts[s.feature][s.bin],
                    left,
                    right,
                };
            }
        }
        id
    }
}

fn check_inputs(x: &Covariates, y: &[f64], weights: Option<&[f64]>, params: &GbtParams) -> Result<()> {
    params.validate()?;
    if x.nrows() == 0 {
        return Err(Error::invalid("cannot fit a booster on empty data"));
    }
    if x.nrows() != y.len() {
        return Err(Error::DataShape(format!(
            "{} covariate rows but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite target at row {i}")));
    }
    if let Some(w) = weights {
        if w.len() != y.len() {
            return Err(Error::DataShape("sample weight length mismatch".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("sample weights must be non-negative with positive sum"));
        }
    }
    Ok(())
}

fn boost<F>(x: &Covariates, base: f64, params: &GbtParams, weights: &[f64], mut grad_hess: F) -> GbtModel
where
    F: FnMut(usize, f64) -> (f64, f64),
{
    let n = x.nrows();
    let binned = Binned::new(x, params.max_bins);
    let mut pred = vec![base; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut rng = rng::stream(params.seed, &[rng::tag("gbt")]);
    let n_sub = ((params.subsample * n as f64).round() as usize).clamp(1, n);
    for _ in 0..params.n_trees {
        for i in 0..n {
            let (g, h) = grad_hess(i, pred[i]);
            grad[i] = weights[i] * g;
            hess[i] = weights[i] * h;
        }
        let rows: Vec<usize> = if n_sub == n {
            (0..n).collect()
        } else {
            let mut r = sample(&mut rng, n, n_sub).into_vec();
            r.sort_unstable();
            r
        };
        let mut grower = Grower {
            binned: &binned,
            grad: &grad,
            hess: &hess,
            params,
            nodes: Vec::new(),
        };
        grower.grow(rows, 0);
        let tree = Tree {
            nodes: grower.nodes,
        };
        for (i, p) in pred.iter_mut().enumerate() {
            *p += tree.predict(x.row(i));
        }
        trees.push(tree);
    }
    GbtModel {
        base,
        trees,
        dim: x.ncols(),
    }
}

/// Fit a regression booster whose pseudo-residuals are ψ(y − f) of `params.loss`.
pub fn fit_gbt(x: &Covariates, y: &[f64], params: &GbtParams, sample_weights: Option<&[f64]>) -> Result<GbtModel> {
    check_inputs(x, y, sample_weights, params)?;
    let n = y.len();
    let ones = vec![1.0; n];
    let w = sample_weights.unwrap_or(&ones);
    let base = match params.loss {
        LossKind::SquaredError => {
            let sw: f64 = w.iter().sum();
            y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw
        }
        _ => weighted_median(y, w),
    };
    let loss = params.loss;
    Ok(boost(x, base, params, w, |i, f| (loss.psi(y[i] - f), 1.0)))
}

/// Fit a boosted logistic model for a binary response.
pub fn fit_propensity(
    x: &Covariates,
    w: &[bool],
    params: &GbtParams,
    clip: (f64, f64),
    sample_weights: Option<&[f64]>,
) -> Result<PropensityModel> {
    let (lo, hi) = clip;
    if !(lo > 0.0 && lo < hi && hi < 1.0) {
        return Err(Error::invalid(format!("propensity clip bounds must satisfy 0 < lo < hi < 1, got [{lo}, {hi}]")));
    }
    let t: Vec<f64> = w.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    check_inputs(x, &t, sample_weights, params)?;
    let n1 = w.iter().filter(|&&b| b).count();
    if n1 == 0 || n1 == w.len() {
        return Err(Error::DataShape("propensity model needs both treated and control units".into()));
    }
    let ones = vec![1.0; t.len()];
    let sw = sample_weights.unwrap_or(&ones);
    let total: f64 = sw.iter().sum();
    let p1 = (t.iter().zip(sw).map(|(a, b)| a * b).sum::<f64>() / total).clamp(1e-6, 1.0 - 1e-6);
    let base = (p1 / (1.0 - p1)).ln();
    let logit = boost(x, base, params, sw, |i, f| {
        let p = sigmoid(f);
        (t[i] - p, (p * (1.0 - p)).max(1e-12))
    });
    Ok(PropensityModel {
        logit,
        clip_lo: lo,
        clip_hi: hi,
    })
}
