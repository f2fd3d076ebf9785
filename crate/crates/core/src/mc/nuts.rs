//! Samplers on an unconstrained real vector: a multinomial No-U-Turn sampler
//! with diagonal metric and windowed warmup adaptation, and an adaptive
//! random-walk Metropolis fallback.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A differentiable log density.
pub trait GradientTarget {
    fn dim(&self) -> usize;
    /// Writes the gradient into `grad` and returns the log density.
    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl GradientTarget for super::model::McTarget {
    fn dim(&self) -> usize {
        super::model::McTarget::dim(self)
    }

    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        super::model::McTarget::logp_grad(self, x, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Nuts,
    RandomWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub kind: SamplerKind,
    pub target_accept: f64,
    pub max_depth: usize,
    /// Random-walk only: thinning interval applied to both warmup and draws.
    pub rw_thin: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            kind: SamplerKind::Nuts,
            target_accept: 0.8,
            max_depth: 10,
            rw_thin: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Post-warmup draws, one vector per iteration.
    pub draws: Vec<Vec<f64>>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub divergences: usize,
    pub mean_accept: f64,
    pub mean_leapfrog: f64,
}

const MAX_ENERGY_ERROR: f64 = 1000.0;

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    g: Vec<f64>,
    logp: f64,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Integrator<'a, T: GradientTarget> {
    target: &'a T,
    inv_metric: Vec<f64>,
}

impl<T: GradientTarget> Integrator<'_, T> {
    fn hamiltonian(&self, z: &Point) -> f64 {
        let kinetic: f64 = z
            .p
            .iter()
            .zip(&self.inv_metric)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
            * 0.5;
        let h = kinetic - z.logp;
        if h.is_nan() { f64::INFINITY } else { h }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.g) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.logp = self.target.logp_grad(&z.q, &mut z.g);
        if !z.logp.is_finite() {
            z.logp = f64::NEG_INFINITY;
            return;
        }
        for (p, g) in z.p.iter_mut().zip(&z.g) {
            *p += 0.5 * eps * g;
        }
    }

    fn sample_momentum<R: Rng>(&self, z: &mut Point, rng: &mut R) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }
}

struct TreeStats {
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

/// Recursive multinomial tree builder with the generalized no-U-turn
/// criterion, including the extra checks across subtree boundaries.
#[allow(clippy::too_many_arguments)]
fn build_tree<T: GradientTarget, R: Rng>(
    integ: &Integrator<'_, T>,
    rng: &mut R,
    depth: usize,
    z: &mut Point,
    z_propose: &mut Point,
    p_sharp_beg: &mut Vec<f64>,
    p_sharp_end: &mut Vec<f64>,
    rho: &mut Vec<f64>,
    p_beg: &mut Vec<f64>,
    p_end: &mut Vec<f64>,
    h0: f64,
    eps: f64,
    log_sum_weight: &mut f64,
    stats: &mut TreeStats,
) -> bool {
    if depth == 0 {
        integ.leapfrog(z, eps);
        stats.n_leapfrog += 1;
        let h = if z.logp.is_finite() { integ.hamiltonian(z) } else { f64::INFINITY };
        if h - h0 > MAX_ENERGY_ERROR || !h.is_finite() {
            stats.divergent = true;
            return false;
        }
        *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
        stats.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
        z_propose.clone_from(z);
        *p_sharp_beg = integ.p_sharp(&z.p);
        p_sharp_end.clone_from(p_sharp_beg);
        for (r, p) in rho.iter_mut().zip(&z.p) {
            *r += p;
        }
        p_beg.clone_from(&z.p);
        p_end.clone_from(p_beg);
        return true;
    }

    let dim = z.q.len();
    let mut p_sharp_init_end = vec![0.0; dim];
    let mut p_init_end = vec![0.0; dim];
    let mut rho_init = vec![0.0; dim];
    let mut lsw_init = f64::NEG_INFINITY;
    let valid_init = build_tree(
        integ, rng, depth - 1, z, z_propose, p_sharp_beg, &mut p_sharp_init_end, &mut rho_init,
        p_beg, &mut p_init_end, h0, eps, &mut lsw_init, stats,
    );
    if !valid_init {
        return false;
    }

    let mut z_propose_final = z.clone();
    let mut p_sharp_final_beg = vec![0.0; dim];
    let mut p_final_beg = vec![0.0; dim];
    let mut rho_final = vec![0.0; dim];
    let mut lsw_final = f64::NEG_INFINITY;
    let valid_final = build_tree(
        integ, rng, depth - 1, z, &mut z_propose_final, &mut p_sharp_final_beg, p_sharp_end,
        &mut rho_final, &mut p_final_beg, p_end, h0, eps, &mut lsw_final, stats,
    );
    if !valid_final {
        return false;
    }

    let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
    *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
    if lsw_final > lsw_subtree {
        z_propose.clone_from(&z_propose_final);
    } else {
        let accept = (lsw_final - lsw_subtree).exp();
        if rng.random::<f64>() < accept {
            z_propose.clone_from(&z_propose_final);
        }
    }

    let rho_subtree: Vec<f64> = rho_init.iter().zip(&rho_final).map(|(a, b)| a + b).collect();
    for (r, s) in rho.iter_mut().zip(&rho_subtree) {
        *r += s;
    }
    let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
    let rho_ext: Vec<f64> = rho_init.iter().zip(&p_final_beg).map(|(a, b)| a + b).collect();
    persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &rho_ext);
    let rho_ext: Vec<f64> = rho_final.iter().zip(&p_init_end).map(|(a, b)| a + b).collect();
    persist &= criterion(&p_sharp_init_end, p_sharp_end, &rho_ext);
    persist
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

struct Transition {
    accept_stat: f64,
    n_leapfrog: usize,
    divergent: bool,
}

fn nuts_transition<T: GradientTarget, R: Rng>(
    integ: &Integrator<'_, T>,
    rng: &mut R,
    current: &mut Point,
    eps: f64,
    max_depth: usize,
) -> Transition {
    let dim = current.q.len();
    integ.sample_momentum(current, rng);
    let mut z_fwd = current.clone();
    let mut z_bck = current.clone();
    let mut z_sample = current.clone();
    let mut z_propose = current.clone();

    let mut p_fwd_fwd = current.p.clone();
    let mut p_sharp_fwd_fwd = integ.p_sharp(&current.p);
    let mut p_fwd_bck = current.p.clone();
    let mut p_sharp_fwd_bck = p_sharp_fwd_fwd.clone();
    let mut p_bck_fwd = current.p.clone();
    let mut p_sharp_bck_fwd = p_sharp_fwd_fwd.clone();
    let mut p_bck_bck = current.p.clone();
    let mut p_sharp_bck_bck = p_sharp_fwd_fwd.clone();
    let mut rho = current.p.clone();

    let mut log_sum_weight = 0.0;
    let h0 = integ.hamiltonian(current);
    let mut stats = TreeStats { n_leapfrog: 0, sum_metro_prob: 0.0, divergent: false };

    let mut depth = 0;
    while depth < max_depth {
        let mut rho_fwd = vec![0.0; dim];
        let mut rho_bck = vec![0.0; dim];
        let mut lsw_subtree = f64::NEG_INFINITY;
        let valid;
        if rng.random::<f64>() > 0.5 {
            rho_bck.clone_from(&rho);
            p_bck_fwd.clone_from(&p_fwd_bck);
            p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
            let mut z = z_fwd.clone();
            valid = build_tree(
                integ, rng, depth, &mut z, &mut z_propose, &mut p_sharp_fwd_bck,
                &mut p_sharp_fwd_fwd, &mut rho_fwd, &mut p_fwd_bck, &mut p_fwd_fwd, h0, eps,
                &mut lsw_subtree, &mut stats,
            );
            z_fwd = z;
        } else {
            rho_fwd.clone_from(&rho);
            p_fwd_bck.clone_from(&p_bck_fwd);
            p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
            let mut z = z_bck.clone();
            valid = build_tree(
                integ, rng, depth, &mut z, &mut z_propose, &mut p_sharp_bck_fwd,
                &mut p_sharp_bck_bck, &mut rho_bck, &mut p_bck_fwd, &mut p_bck_bck, h0, -eps,
                &mut lsw_subtree, &mut stats,
            );
            z_bck = z;
        }
        if !valid {
            break;
        }
        depth += 1;

        if lsw_subtree > log_sum_weight {
            z_sample.clone_from(&z_propose);
        } else {
            let accept = (lsw_subtree - log_sum_weight).exp();
            if rng.random::<f64>() < accept {
                z_sample.clone_from(&z_propose);
            }
        }
        log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

        for (r, (b, f)) in rho.iter_mut().zip(rho_bck.iter().zip(&rho_fwd)) {
            *r = b + f;
        }
        let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
        let rho_ext: Vec<f64> = rho_bck.iter().zip(&p_fwd_bck).map(|(a, b)| a + b).collect();
        persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
        let rho_ext: Vec<f64> = rho_fwd.iter().zip(&p_bck_fwd).map(|(a, b)| a + b).collect();
        persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
        if !persist {
            break;
        }
    }

    *current = z_sample;
    let n = stats.n_leapfrog.max(1);
    Transition {
        accept_stat: stats.sum_metro_prob / n as f64,
        n_leapfrog: stats.n_leapfrog,
        divergent: stats.divergent,
    }
}

struct DualAveraging {
    mu: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    delta: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    fn new(eps: f64, delta: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            delta,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    /// Returns the next step size.
    fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup schedule: an initial fast window, doubling slow windows for the
/// metric, and a terminal fast window.
struct Windows {
    init_buffer: usize,
    term_buffer: usize,
    base_window: usize,
    warmup: usize,
    window_end: usize,
    window_size: usize,
}

impl Windows {
    fn new(warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
        if warmup < 20 {
            (init, term, base) = (warmup, 0, 0);
        } else if init + term + base > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - init - term;
        }
        let mut w = Windows {
            init_buffer: init,
            term_buffer: term,
            base_window: base,
            warmup,
            window_end: 0,
            window_size: base,
        };
        w.window_end = init + base;
        if w.window_end + 2 * base > warmup.saturating_sub(term) {
            w.window_end = warmup.saturating_sub(term);
        }
        w
    }

    fn in_slow(&self, iter: usize) -> bool {
        self.base_window > 0
            && iter >= self.init_buffer
            && iter < self.warmup.saturating_sub(self.term_buffer)
    }

    /// Called after a slow-window iteration; true when the window closes.
    fn end_of_window(&mut self, iter: usize) -> bool {
        if iter + 1 != self.window_end {
            return false;
        }
        self.window_size *= 2;
        let next_end = self.window_end + self.window_size;
        let slow_end = self.warmup.saturating_sub(self.term_buffer);
        self.window_end = if next_end + 2 * self.window_size > slow_end { slow_end } else { next_end };
        true
    }
}

#[derive(Default)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn push(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    /// Regularized variance, shrunk toward a small constant.
    fn regularized(&self) -> Option<Vec<f64>> {
        if self.n < 3 {
            return None;
        }
        let n = self.n as f64;
        Some(
            self.m2
                .iter()
                .map(|s| (n / (n + 5.0)) * (s / (n - 1.0)) + 1e-3 * (5.0 / (n + 5.0)))
                .collect(),
        )
    }

    fn reset(&mut self) {
        *self = Welford::default();
    }
}

fn init_point<T: GradientTarget>(target: &T, init: Vec<f64>, chain: usize) -> Result<Point> {
    let mut g = vec![0.0; init.len()];
    let logp = target.logp_grad(&init, &mut g);
    if !logp.is_finite() {
        return Err(Error::Sampler {
            chain,
            iteration: 0,
            message: "non-finite log density at initial values".into(),
            state: init,
        });
    }
    Ok(Point { p: vec![0.0; init.len()], q: init, g, logp })
}

/// Heuristic initial step size: double or halve until the one-step
/// acceptance crosses 0.8.
fn find_reasonable_step<T: GradientTarget, R: Rng>(
    integ: &Integrator<'_, T>,
    z: &Point,
    eps: f64,
    rng: &mut R,
) -> f64 {
    let mut eps = eps;
    let mut z1 = z.clone();
    integ.sample_momentum(&mut z1, rng);
    let h0 = integ.hamiltonian(&z1);
    let start = z1.clone();
    integ.leapfrog(&mut z1, eps);
    let h = integ.hamiltonian(&z1);
    let delta_h = h0 - h;
    let direction = if delta_h > (0.8f64).ln() { 1 } else { -1 };
    for _ in 0..100 {
        let mut z1 = start.clone();
        integ.sample_momentum(&mut z1, rng);
        let h0 = integ.hamiltonian(&z1);
        integ.leapfrog(&mut z1, eps);
        let h = integ.hamiltonian(&z1);
        let delta_h = if h.is_finite() { h0 - h } else { f64::NEG_INFINITY };
        if direction == 1 && !(delta_h > (0.8f64).ln()) {
            break;
        }
        if direction == -1 && !(delta_h < (0.8f64).ln()) {
            break;
        }
        eps = if direction == 1 { 2.0 * eps } else { 0.5 * eps };
        if !(1e-12..=1e7).contains(&eps) {
            break;
        }
    }
    eps
}

/// Run one NUTS chain with windowed adaptation of step size and diagonal
/// metric during `warmup`, then `draws` fixed-parameter iterations.
pub fn run_nuts<T: GradientTarget, R: Rng>(
    target: &T,
    init: Vec<f64>,
    warmup: usize,
    draws: usize,
    settings: &SamplerSettings,
    chain: usize,
    rng: &mut R,
) -> Result<ChainOutput> {
    let dim = target.dim();
    if init.len() != dim {
        return Err(Error::invalid(format!("initial vector has length {}, expected {dim}", init.len())));
    }
    let mut z = init_point(target, init, chain)?;
    let mut integ = Integrator { target, inv_metric: vec![1.0; dim] };
    let mut eps = find_reasonable_step(&integ, &z, 1.0, rng);
    let mut da = DualAveraging::new(eps, settings.target_accept);
    let mut windows = Windows::new(warmup);
    let mut welford = Welford::default();

    for iter in 0..warmup {
        let tr = nuts_transition(&integ, rng, &mut z, eps, settings.max_depth);
        eps = da.update(tr.accept_stat);
        if windows.in_slow(iter) {
            welford.push(&z.q);
            if windows.end_of_window(iter) {
                if let Some(var) = welford.regularized() {
                    integ.inv_metric = var;
                }
                welford.reset();
                eps = find_reasonable_step(&integ, &z, eps, rng);
                da = DualAveraging::new(eps, settings.target_accept);
            }
        }
    }
    if warmup > 0 {
        eps = da.final_step();
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Sampler {
            chain,
            iteration: warmup,
            message: format!("step size adaptation failed ({eps})"),
            state: z.q.clone(),
        });
    }

    let mut out = Vec::with_capacity(draws);
    let (mut divergences, mut accept_sum, mut leapfrogs) = (0usize, 0.0, 0usize);
    for iter in 0..draws {
        let tr = nuts_transition(&integ, rng, &mut z, eps, settings.max_depth);
        if !z.logp.is_finite() {
            return Err(Error::Sampler {
                chain,
                iteration: warmup + iter,
                message: "non-finite log density in draw".into(),
                state: z.q.clone(),
            });
        }
        divergences += tr.divergent as usize;
        accept_sum += tr.accept_stat;
        leapfrogs += tr.n_leapfrog;
        out.push(z.q.clone());
    }
    let n = draws.max(1) as f64;
    Ok(ChainOutput {
        draws: out,
        step_size: eps,
        inv_metric: integ.inv_metric,
        divergences,
        mean_accept: accept_sum / n,
        mean_leapfrog: leapfrogs as f64 / n,
    })
}

/// Adaptive random-walk Metropolis. Proposal scales follow the running
/// posterior variance during warmup; the global scale is tuned toward an
/// acceptance rate of 0.234. Each stored draw is `thin` proposals apart.
pub fn run_random_walk<T: GradientTarget, R: Rng>(
    target: &T,
    init: Vec<f64>,
    warmup: usize,
    draws: usize,
    thin: usize,
    chain: usize,
    rng: &mut R,
) -> Result<ChainOutput> {
    let dim = target.dim();
    let thin = thin.max(1);
    let mut g = vec![0.0; dim];
    let mut x = init;
    let mut lp = target.logp_grad(&x, &mut g);
    if !lp.is_finite() {
        return Err(Error::Sampler {
            chain,
            iteration: 0,
            message: "non-finite log density at initial values".into(),
            state: x,
        });
    }
    let mut scales = vec![0.1; dim];
    let mut log_global = (2.38 / (dim as f64).sqrt()).ln();
    let mut welford = Welford::default();
    let mut accepted = 0usize;
    let mut out = Vec::with_capacity(draws);
    let total = (warmup + draws) * thin;
    for step in 0..total {
        let global = log_global.exp();
        let prop: Vec<f64> = x
            .iter()
            .zip(&scales)
            .map(|(xi, s)| xi + global * s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp_new = target.logp_grad(&prop, &mut g);
        let log_a = if lp_new.is_finite() { lp_new - lp } else { f64::NEG_INFINITY };
        let acc = log_a >= 0.0 || rng.random::<f64>().ln() < log_a;
        if acc {
            x = prop;
            lp = lp_new;
        }
        let iter = step / thin;
        if iter < warmup {
            let a = if log_a >= 0.0 { 1.0 } else { log_a.exp() };
            log_global += (a - 0.234) / ((step + 1) as f64).powf(0.6);
            welford.push(&x);
            if welford.n >= 50 && welford.n % 50 == 0 {
                if let Some(var) = welford.regularized() {
                    scales = var.iter().map(|v| v.sqrt()).collect();
                }
            }
        } else {
            accepted += acc as usize;
            if (step + 1) % thin == 0 {
                out.push(x.clone());
            }
        }
    }
    Ok(ChainOutput {
        draws: out,
        step_size: log_global.exp(),
        inv_metric: scales.iter().map(|s| s * s).collect(),
        divergences: 0,
        mean_accept: accepted as f64 / (draws * thin).max(1) as f64,
        mean_leapfrog: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Gaussian {
        mean: Vec<f64>,
        sd: Vec<f64>,
    }

    impl GradientTarget for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }
        fn logp_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for j in 0..x.len() {
                let z = (x[j] - self.mean[j]) / self.sd[j];
                lp -= 0.5 * z * z;
                g[j] = -z / self.sd[j];
            }
            lp
        }
    }

    fn moments(draws: &[Vec<f64>], j: usize) -> (f64, f64) {
        let n = draws.len() as f64;
        let m = draws.iter().map(|d| d[j]).sum::<f64>() / n;
        let v = draws.iter().map(|d| (d[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v.sqrt())
    }

    #[test]
    fn nuts_recovers_scaled_gaussian() {
        let target = Gaussian { mean: vec![1.0, -3.0, 50.0], sd: vec![0.01, 1.0, 20.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = run_nuts(&target, vec![0.0, 0.0, 0.0], 1000, 4000, &SamplerSettings::default(), 0, &mut rng).unwrap();
        for j in 0..3 {
            let (m, s) = moments(&out.draws, j);
            assert!((m - target.mean[j]).abs() < 0.1 * target.sd[j], "mean {j}: {m}");
            assert!((s / target.sd[j] - 1.0).abs() < 0.1, "sd {j}: {s}");
        }
        assert_eq!(out.divergences, 0);
        assert!(out.mean_accept > 0.6);
    }

    #[test]
    fn random_walk_recovers_gaussian() {
        let target = Gaussian { mean: vec![2.0, -1.0], sd: vec![0.5, 3.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = run_random_walk(&target, vec![0.0, 0.0], 2000, 4000, 5, 0, &mut rng).unwrap();
        for j in 0..2 {
            let (m, s) = moments(&out.draws, j);
            assert!((m - target.mean[j]).abs() < 0.15 * target.sd[j], "mean {j}: {m}");
            assert!((s / target.sd[j] - 1.0).abs() < 0.15, "sd {j}: {s}");
        }
    }

    #[test]
    fn nuts_is_deterministic_per_seed() {
        let target = Gaussian { mean: vec![0.0; 4], sd: vec![1.0; 4] };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            run_nuts(&target, vec![0.5; 4], 100, 50, &SamplerSettings::default(), 0, &mut rng).unwrap().draws
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn nonfinite_start_is_a_sampler_error() {
        struct Bad;
        impl GradientTarget for Bad {
            fn dim(&self) -> usize { 1 }
            fn logp_grad(&self, _: &[f64], g: &mut [f64]) -> f64 { g[0] = 0.0; f64::NAN }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match run_nuts(&Bad, vec![0.0], 10, 10, &SamplerSettings::default(), 3, &mut rng) {
            Err(Error::Sampler { chain, state, .. }) => {
                assert_eq!(chain, 3);
                assert_eq!(state, vec![0.0]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn warmup_windows_cover_slow_phase() {
        let mut w = Windows::new(1000);
        let mut ends = vec![];
        for it in 0..1000 {
            if w.in_slow(it) && w.end_of_window(it) {
                ends.push(it + 1);
            }
        }
        assert_eq!(ends, vec![100, 150, 250, 450, 950]);
    }
}
