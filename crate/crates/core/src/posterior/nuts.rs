//! Multinomial No-U-Turn sampler with a diagonal metric, dual-averaging
//! step size adaptation and windowed variance adaptation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::target::LogDensity;
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::rng::{self, StageRng};

const MAX_DELTA_H: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    /// Half-width of the uniform jitter added to the initial point per chain.
    pub init_jitter: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 2,
            warmup: 400,
            samples: 800,
            target_accept: 0.8,
            max_tree_depth: 10,
            init_jitter: 0.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.samples == 0 {
            return Err(Error::invalid("chains and samples must be positive"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::invalid("target_accept must lie in (0, 1)"));
        }
        if self.max_tree_depth == 0 || self.max_tree_depth > 20 {
            return Err(Error::invalid("max_tree_depth must lie in [1, 20]"));
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return Err(Error::invalid("init_jitter must be non-negative"));
        }
        Ok(())
    }
}

/// Post-warmup output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    /// samples × dim, row-major.
    pub draws: Vec<f64>,
    pub energy: Vec<f64>,
    pub divergent: Vec<bool>,
    pub accept_stat: Vec<f64>,
    pub tree_depth: Vec<u32>,
    pub n_leapfrog: Vec<u32>,
    pub step_size: f64,
    /// Adapted inverse metric (variance estimate) per coordinate.
    pub inv_metric: Vec<f64>,
    pub warmup_divergences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub dim: usize,
    /// Leading coordinates that are regression coefficients.
    pub n_beta: usize,
    pub warmup: usize,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    /// Wrap externally produced draws (chains × samples × dim).
    pub fn from_arrays(draws: Vec<Vec<Vec<f64>>>, energy: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let dim = draws.first().and_then(|c| c.first()).map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::invalid("no draws"));
        }
        let samples = draws[0].len();
        let mut chains = Vec::new();
        for (c, chain) in draws.into_iter().enumerate() {
            if chain.len() != samples || chain.iter().any(|d| d.len() != dim) {
                return Err(Error::DataShape("ragged draw array".into()));
            }
            let e = match &energy {
                Some(e) if e[c].len() == samples => e[c].clone(),
                Some(_) => return Err(Error::DataShape("energy length mismatch".into())),
                None => vec![0.0; samples],
            };
            chains.push(ChainDraws {
                draws: chain.concat(),
                energy: e,
                divergent: vec![false; samples],
                accept_stat: vec![1.0; samples],
                tree_depth: vec![0; samples],
                n_leapfrog: vec![0; samples],
                step_size: f64::NAN,
                inv_metric: vec![1.0; dim],
                warmup_divergences: 0,
            });
        }
        Ok(Self { dim, n_beta: dim, warmup: 0, chains })
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_samples(&self) -> usize {
        self.chains.first().map_or(0, |c| c.energy.len())
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.energy.len()).sum()
    }

    pub fn draw(&self, chain: usize, s: usize) -> &[f64] {
        &self.chains[chain].draws[s * self.dim..(s + 1) * self.dim]
    }

    pub fn beta(&self, chain: usize, s: usize) -> &[f64] {
        &self.draw(chain, s)[..self.n_beta]
    }

    /// All β draws, chain-major.
    pub fn beta_draws(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.chains.iter().flat_map(move |c| c.draws.chunks(self.dim).map(move |d| &d[..self.n_beta]))
    }

    /// Trace of coordinate `j` per chain.
    pub fn coordinate(&self, j: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.chunks(self.dim).map(|d| d[j]).collect())
            .collect()
    }

    pub fn divergence_count(&self) -> usize {
        self.chains.iter().map(|c| c.divergent.iter().filter(|&&d| d).count()).sum()
    }

    pub fn mean_step_size(&self) -> f64 {
        self.chains.iter().map(|c| c.step_size).sum::<f64>() / self.chains.len() as f64
    }

    /// Stack chains of several runs (used by modular pooling).
    pub fn concatenate(parts: &[PosteriorDraws]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        if parts.iter().any(|p| p.dim != first.dim || p.n_beta != first.n_beta) {
            return Err(Error::DataShape("cannot concatenate draws of different dimension".into()));
        }
        Ok(Self {
            dim: first.dim,
            n_beta: first.n_beta,
            warmup: first.warmup,
            chains: parts.iter().flat_map(|p| p.chains.iter().cloned()).collect(),
        })
    }

    /// CSV with columns chain, iter, beta_0.., energy, divergent.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["chain".to_string(), "iter".to_string()];
        header.extend((0..self.n_beta).map(|j| format!("beta_{j}")));
        header.extend(["energy".to_string(), "divergent".to_string()]);
        w.write_record(&header)?;
        for (c, chain) in self.chains.iter().enumerate() {
            for s in 0..chain.energy.len() {
                let mut rec = vec![c.to_string(), s.to_string()];
                rec.extend(self.beta(c, s).iter().map(|v| crate::data::format_f64(*v)));
                rec.push(crate::data::format_f64(chain.energy[s]));
                rec.push(u8::from(chain.divergent[s]).to_string());
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Phase-space point with cached potential and gradient.
#[derive(Clone)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    /// Potential energy −log p(q).
    v: f64,
    /// ∇V(q).
    g: Vec<f64>,
}

struct Hamiltonian<'a, T: LogDensity> {
    target: &'a T,
    inv_metric: Vec<f64>,
}

impl<T: LogDensity> Hamiltonian<'_, T> {
    fn update_potential(&self, z: &mut State) {
        let lp = self.target.log_density_grad(&z.q, &mut z.g);
        z.v = -lp;
        if !z.v.is_finite() || z.g.iter().any(|x| !x.is_finite()) {
            z.v = f64::INFINITY;
        }
        z.g.iter_mut().for_each(|x| *x = -*x);
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(a, m)| a * a * m).sum::<f64>()
    }

    fn energy(&self, z: &State) -> f64 {
        let h = z.v + self.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(a, m)| a * m).collect()
    }

    fn sample_p(&self, z: &mut State, rng: &mut StageRng) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            *p = rng.sample::<f64, _>(StandardNormal) / m.sqrt();
        }
    }

    fn leapfrog(&self, z: &mut State, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.g) {
            *p -= 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        self.update_potential(z);
        for (p, g) in z.p.iter_mut().zip(&z.g) {
            *p -= 0.5 * eps * g;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

struct TreeStats {
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

struct Sampler<'a, T: LogDensity> {
    ham: Hamiltonian<'a, T>,
    eps: f64,
    max_depth: usize,
    rng: StageRng,
}

struct Transition {
    q: Vec<f64>,
    v: f64,
    g: Vec<f64>,
    energy: f64,
    accept_stat: f64,
    depth: usize,
    n_leapfrog: usize,
    divergent: bool,
}

impl<T: LogDensity> Sampler<'_, T> {
    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut State,
        z_propose: &mut State,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut Vec<f64>,
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        log_sum_weight: &mut f64,
        stats: &mut TreeStats,
    ) -> bool {
        if depth == 0 {
            self.ham.leapfrog(z, sign * self.eps);
            stats.n_leapfrog += 1;
            let h = self.ham.energy(z);
            if h - h0 > MAX_DELTA_H {
                stats.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            stats.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.ham.p_sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            p_beg.clone_from(&z.p);
            p_end.clone_from(p_beg);
            return !stats.divergent;
        }
        let dim = z.q.len();
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            &mut lsw_init,
            stats,
        ) {
            return false;
        }
        let mut z_propose_final = z.clone();
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            &mut lsw_final,
            stats,
        ) {
            return false;
        }
        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }
        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = no_u_turn(p_sharp_beg, p_sharp_end, &rho_subtree);
        persist &= no_u_turn(p_sharp_beg, &p_sharp_final_beg, &add(&rho_init, &p_final_beg));
        persist &= no_u_turn(&p_sharp_init_end, p_sharp_end, &add(&rho_final, &p_init_end));
        persist
    }

    fn transition(&mut self, q: &[f64], v: f64, g: &[f64]) -> Transition {
        let dim = q.len();
        let mut z = State { q: q.to_vec(), p: vec![0.0; dim], v, g: g.to_vec() };
        self.ham.sample_p(&mut z, &mut self.rng);
        let h0 = self.ham.energy(&z);

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let p_sharp0 = self.ham.p_sharp(&z.p);
        let mut p_fwd_fwd = z.p.clone();
        let mut p_sharp_fwd_fwd = p_sharp0.clone();
        let mut p_fwd_bck = z.p.clone();
        let mut p_sharp_fwd_bck = p_sharp0.clone();
        let mut p_bck_fwd = z.p.clone();
        let mut p_sharp_bck_fwd = p_sharp0.clone();
        let mut p_bck_bck = z.p.clone();
        let mut p_sharp_bck_bck = p_sharp0;

        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let mut depth = 0;
        let mut stats = TreeStats { n_leapfrog: 0, sum_metro_prob: 0.0, divergent: false };

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if self.rng.random::<f64>() > 0.5 {
                z.clone_from(&z_fwd);
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                let ok = self.build_tree(
                    depth,
                    &mut z,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut lsw_subtree,
                    &mut stats,
                );
                z_fwd.clone_from(&z);
                ok
            } else {
                z.clone_from(&z_bck);
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                let ok = self.build_tree(
                    depth,
                    &mut z,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut lsw_subtree,
                    &mut stats,
                );
                z_bck.clone_from(&z);
                ok
            };
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else {
                let accept = (lsw_subtree - log_sum_weight).exp();
                if self.rng.random::<f64>() < accept {
                    z_sample.clone_from(&z_propose);
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
            rho = add(&rho_bck, &rho_fwd);
            let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &add(&rho_bck, &p_fwd_bck));
            persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &add(&rho_fwd, &p_bck_fwd));
            if !persist {
                break;
            }
        }
        let accept_stat = if stats.n_leapfrog > 0 {
            stats.sum_metro_prob / stats.n_leapfrog as f64
        } else {
            0.0
        };
        let energy = self.ham.energy(&z_sample);
        Transition {
            q: z_sample.q,
            v: z_sample.v,
            g: z_sample.g,
            energy,
            accept_stat,
            depth,
            n_leapfrog: stats.n_leapfrog,
            divergent: stats.divergent,
        }
    }

    /// Double or halve the step size until a single leapfrog step crosses an
    /// acceptance probability of 0.8.
    fn init_stepsize(&mut self, q: &[f64], v: f64, g: &[f64]) -> Result<()> {
        let dim = q.len();
        let start = State { q: q.to_vec(), p: vec![0.0; dim], v, g: g.to_vec() };
        let probe = |s: &mut Self| -> f64 {
            let mut z = start.clone();
            s.ham.sample_p(&mut z, &mut s.rng);
            let h0 = s.ham.energy(&z);
            s.ham.leapfrog(&mut z, s.eps);
            let h = s.ham.energy(&z);
            h0 - h
        };
        let threshold = 0.8f64.ln();
        let direction = if probe(self) > threshold { 1 } else { -1 };
        for _ in 0..200 {
            let delta_h = probe(self);
            if direction == 1 && delta_h <= threshold {
                return Ok(());
            }
            if direction == -1 && !(delta_h < threshold) && !delta_h.is_nan() {
                return Ok(());
            }
            self.eps = if direction == 1 { 2.0 * self.eps } else { 0.5 * self.eps };
            if self.eps > 1e7 {
                return Err(Error::numeric("step size search diverged: posterior appears improper"));
            }
            if self.eps < 1e-300 {
                return Err(Error::numeric("step size collapsed to zero: non-finite energy near the initial point"));
            }
        }
        Ok(())
    }
}

struct DualAveraging {
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(delta: f64, eps: f64) -> Self {
        Self { mu: (10.0 * eps).ln(), counter: 0.0, s_bar: 0.0, x_bar: 0.0, delta }
    }

    fn restart(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Slow-phase window schedule for the metric: an initial fast buffer,
/// doubling variance windows, and a terminal fast buffer.
struct WindowSchedule {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    enabled: bool,
}

impl WindowSchedule {
    fn new(warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75, 50, 25);
        let enabled = warmup >= 20;
        if init + base + term > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup.saturating_sub(init + term);
        }
        Self {
            warmup,
            init_buffer: init,
            term_buffer: term,
            window_size: base,
            next_window: (init + base).saturating_sub(1),
            counter: 0,
            enabled,
        }
    }

    fn in_window(&self) -> bool {
        self.enabled
            && self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup
    }

    fn end_of_window(&self) -> bool {
        self.enabled && self.counter == self.next_window && self.counter != self.warmup
    }

    fn advance_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.warmup - self.term_buffer {
            self.next_window = last;
        }
    }
}

/// Welford running variance.
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn add(&mut self, q: &[f64]) {
        self.n += 1;
        for ((m, s), x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(q) {
            let d = x - *m;
            *m += d / self.n as f64;
            *s += d * (x - *m);
        }
    }

    /// Regularised variance: shrink towards 1e−3 with five pseudo-draws.
    fn regularised(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

fn run_chain<T: LogDensity>(target: &T, init: &[f64], cfg: &SamplerConfig, seed: u64, chain: usize) -> Result<ChainDraws> {
    let dim = target.dim();
    let mut rng = rng::stream(seed, &[rng::tag("nuts-chain"), chain as u64]);
    let mut q: Vec<f64> = init
        .iter()
        .map(|x| x + cfg.init_jitter * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let mut g = vec![0.0; dim];
    let mut lp = target.log_density_grad(&q, &mut g);
    if !lp.is_finite() || g.iter().any(|x| !x.is_finite()) {
        // Retry from the unjittered point before giving up.
        q = init.to_vec();
        lp = target.log_density_grad(&q, &mut g);
        if !lp.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("chain {chain}: log density is not finite at the initial point")));
        }
    }
    let mut v = -lp;
    g.iter_mut().for_each(|x| *x = -*x);

    let mut sampler = Sampler {
        ham: Hamiltonian { target, inv_metric: vec![1.0; dim] },
        eps: 1.0,
        max_depth: cfg.max_tree_depth,
        rng,
    };
    sampler.init_stepsize(&q, v, &g)?;
    let mut da = DualAveraging::new(cfg.target_accept, sampler.eps);
    let mut windows = WindowSchedule::new(cfg.warmup);
    let mut welford = Welford::new(dim);
    let mut warmup_divergences = 0;

    for _ in 0..cfg.warmup {
        let t = sampler.transition(&q, v, &g);
        warmup_divergences += usize::from(t.divergent);
        q = t.q;
        v = t.v;
        g = t.g;
        sampler.eps = da.learn(t.accept_stat);
        if windows.in_window() {
            welford.add(&q);
        }
        if windows.end_of_window() {
            windows.advance_window();
            sampler.ham.inv_metric = welford.regularised();
            welford = Welford::new(dim);
            sampler.init_stepsize(&q, v, &g)?;
            da.restart(sampler.eps);
        }
        windows.counter += 1;
    }
    if cfg.warmup > 0 {
        sampler.eps = da.final_step();
    }
    if !(sampler.eps.is_finite() && sampler.eps > 0.0) {
        return Err(Error::numeric(format!("chain {chain}: adapted step size is {}", sampler.eps)));
    }

    let mut out = ChainDraws {
        draws: Vec::with_capacity(cfg.samples * dim),
        energy: Vec::with_capacity(cfg.samples),
        divergent: Vec::with_capacity(cfg.samples),
        accept_stat: Vec::with_capacity(cfg.samples),
        tree_depth: Vec::with_capacity(cfg.samples),
        n_leapfrog: Vec::with_capacity(cfg.samples),
        step_size: sampler.eps,
        inv_metric: sampler.ham.inv_metric.clone(),
        warmup_divergences,
    };
    for _ in 0..cfg.samples {
        let t = sampler.transition(&q, v, &g);
        q = t.q;
        v = t.v;
        g = t.g;
        if !t.energy.is_finite() {
            return Err(Error::numeric(format!("chain {chain}: non-finite energy at a retained draw")));
        }
        out.draws.extend_from_slice(&q);
        out.energy.push(t.energy);
        out.divergent.push(t.divergent);
        out.accept_stat.push(t.accept_stat);
        out.tree_depth.push(t.depth as u32);
        out.n_leapfrog.push(t.n_leapfrog as u32);
    }
    Ok(out)
}

/// Run `cfg.chains` independent chains from `init` (jittered per chain).
/// Chain `c` always uses the same RNG stream for a given seed.
pub fn nuts_sample<T: LogDensity>(target: &T, init: &[f64], cfg: &SamplerConfig, seed: u64) -> Result<PosteriorDraws> {
    use rayon::prelude::*;
    cfg.validate()?;
    if init.len() != target.dim() {
        return Err(Error::DataShape(format!(
            "initial point has {} coordinates, target has {}",
            init.len(),
            target.dim()
        )));
    }
    let chains = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(target, init, cfg, seed, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        dim: target.dim(),
        n_beta: target.dim(),
        warmup: cfg.warmup,
        chains,
    })
}
