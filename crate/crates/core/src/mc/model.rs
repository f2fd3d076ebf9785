//! Count matrix-completion likelihood.
//!
//! `log E[Y_it(0)] = alpha + gamma_i + psi_t + U_i . V_t + log p_it`, with a
//! negative-binomial likelihood in mean/dispersion form
//! (`Var = mu + mu^2 / eta`) evaluated on untreated cells only.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::panel::OutcomePanel;

/// Parameters of the count matrix-completion model.
///
/// `u` is K×N and `v` is K×T, both row-major by factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McParams {
    pub alpha: f64,
    pub gamma: Vec<f64>,
    pub psi: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub eta: f64,
    pub k: usize,
}

impl McParams {
    pub fn zeros(n: usize, t: usize, k: usize) -> Self {
        McParams {
            alpha: 0.0,
            gamma: vec![0.0; n],
            psi: vec![0.0; t],
            u: vec![0.0; k * n],
            v: vec![0.0; k * t],
            eta: 1.0,
            k,
        }
    }

    pub fn n_units(&self) -> usize {
        self.gamma.len()
    }

    pub fn n_periods(&self) -> usize {
        self.psi.len()
    }

    pub fn u_at(&self, k: usize, i: usize) -> f64 {
        self.u[k * self.n_units() + i]
    }

    pub fn v_at(&self, k: usize, t: usize) -> f64 {
        self.v[k * self.n_periods() + t]
    }

    /// Linear predictor without the offset term.
    pub fn linear(&self, i: usize, t: usize) -> f64 {
        let (n, tt) = (self.n_units(), self.n_periods());
        let mut s = self.alpha + self.gamma[i] + self.psi[t];
        for k in 0..self.k {
            s += self.u[k * n + i] * self.v[k * tt + t];
        }
        s
    }
}

/// `alpha + gamma_i + psi_t + sum_k U_ki V_kt + log p_it`.
pub fn log_mean(params: &McParams, i: usize, t: usize, p_it: f64) -> Result<f64> {
    if !(p_it > 0.0) || !p_it.is_finite() {
        return Err(Error::invalid(format!("offset must be positive, got {p_it}")));
    }
    if i >= params.n_units() || t >= params.n_periods() {
        return Err(Error::invalid(format!("cell ({i}, {t}) outside parameter dimensions")));
    }
    Ok(params.linear(i, t) + p_it.ln())
}

/// Below this count, `lgamma(y + eta) - lgamma(eta)` is summed term by term;
/// the direct difference loses precision when `eta` is large.
const SERIES_MAX_Y: u64 = 64;

fn use_series(y: u64, eta: f64) -> bool {
    y <= SERIES_MAX_Y || (eta > 1e6 && y < 100_000)
}

fn lgamma_ratio(y: u64, eta: f64) -> f64 {
    if use_series(y, eta) {
        (0..y).map(|j| (eta + j as f64).ln()).sum()
    } else {
        ln_gamma(y as f64 + eta) - ln_gamma(eta)
    }
}

#[cfg(test)]
fn digamma_ratio(y: u64, eta: f64) -> f64 {
    if use_series(y, eta) {
        (0..y).map(|j| 1.0 / (eta + j as f64)).sum()
    } else {
        digamma(y as f64 + eta) - digamma(eta)
    }
}

fn ln_factorial(y: u64) -> f64 {
    if y < 2 {
        0.0
    } else {
        ln_gamma(y as f64 + 1.0)
    }
}

/// Negative-binomial log pmf with mean `mu` and dispersion `eta`.
pub fn nb_logpmf(y: u64, mu: f64, eta: f64) -> Result<f64> {
    if !(mu > 0.0 && mu.is_finite()) || !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("nb_logpmf needs mu, eta > 0 (got {mu}, {eta})")));
    }
    Ok(nb_logpmf_log(y, mu.ln(), eta))
}

/// `nb_logpmf` parameterized by `log mu`; no domain checks.
pub(crate) fn nb_logpmf_log(y: u64, log_mu: f64, eta: f64) -> f64 {
    let mu = log_mu.exp();
    let yf = y as f64;
    if mu < eta && use_series(y, eta) {
        // log Gamma(y + eta) - log Gamma(eta) - y log(eta + mu) regrouped as
        // log1p terms, so large eta does not cancel
        let l1p = (mu / eta).ln_1p();
        let s: f64 = (0..y).map(|j| (j as f64 / eta).ln_1p()).sum();
        return s - ln_factorial(y) - eta * l1p + yf * (log_mu - l1p);
    }
    // log(eta + mu) computed stably for either magnitude ordering
    let log_eta_mu = if mu < eta {
        eta.ln() + (mu / eta).ln_1p()
    } else {
        log_mu + (eta / mu).ln_1p()
    };
    let zero_term = if mu < eta {
        -eta * (mu / eta).ln_1p()
    } else {
        eta * (eta.ln() - log_eta_mu)
    };
    let y_term = if y == 0 { 0.0 } else { yf * (log_mu - log_eta_mu) };
    lgamma_ratio(y, eta) - ln_factorial(y) + zero_term + y_term
}

/// Log pmf plus its derivatives with respect to `log mu` and `log eta`;
/// the per-cell reference for the shared-table path.
#[cfg(test)]
fn nb_logpmf_grad(y: u64, log_mu: f64, eta: f64) -> (f64, f64, f64) {
    let lp = nb_logpmf_log(y, log_mu, eta);
    let mu = log_mu.exp();
    let yf = y as f64;
    let frac = mu / (eta + mu);
    let d_log_mu = yf - (yf + eta) * frac;
    // d/d eta = digamma(y+eta) - digamma(eta) + log(eta/(eta+mu)) + 1 - (y+eta)/(eta+mu)
    //         = digamma diff - log1p(mu/eta) + (mu - y)/(eta + mu)
    let d_eta = digamma_ratio(y, eta) - (mu / eta).ln_1p() + (mu - yf) / (eta + mu);
    (lp, d_log_mu, eta * d_eta)
}

/// Sum of NB log-likelihood over untreated cells.
pub fn control_loglik(panel: &OutcomePanel, params: &McParams) -> Result<f64> {
    if params.n_units() != panel.n_units() || params.n_periods() != panel.n_periods() {
        return Err(Error::invalid(format!(
            "parameter dims {}x{} do not match panel {}x{}",
            params.n_units(),
            params.n_periods(),
            panel.n_units(),
            panel.n_periods()
        )));
    }
    if params.u.len() != params.k * params.n_units() || params.v.len() != params.k * params.n_periods() {
        return Err(Error::invalid("factor matrices inconsistent with K"));
    }
    if !(params.eta > 0.0) {
        return Err(Error::invalid(format!("eta must be positive, got {}", params.eta)));
    }
    let mut total = 0.0;
    for i in 0..panel.n_units() {
        for t in 0..panel.n_periods() {
            if panel.d(i, t) {
                continue;
            }
            let lm = log_mean(params, i, t, panel.offset(i, t))?;
            total += nb_logpmf_log(panel.y(i, t), lm, params.eta);
        }
    }
    Ok(total)
}

/// Prior on the unconstrained coordinates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    /// Improper uniform on alpha, gamma, psi, U, V and on eta over (0, inf).
    /// On the sampling scale this adds the `log eta` Jacobian.
    #[default]
    Flat,
    /// Independent `Normal(0, sd^2)` on every unconstrained coordinate,
    /// including `log eta`.
    WeakGaussian { sd: f64 },
}

/// Default scale of the Gaussian on factor loadings. Under a flat prior
/// `U -> aU, V -> V/a` leaves the likelihood unchanged and the sampler drifts
/// along that ridge without mixing.
pub const DEFAULT_FACTOR_SD: f64 = 1.0;

/// Which additive terms enter the log-mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub k: usize,
    pub unit_effects: bool,
    pub time_effects: bool,
    pub prior: Prior,
    /// Optional `Normal(0, sd^2)` on the factor loadings `U` and `V` only,
    /// on top of `prior`. Fixes the scale left free by `U V^T`.
    #[serde(default)]
    pub factor_sd: Option<f64>,
}

impl ModelSpec {
    /// Flat prior with unit-scale factor loadings (`factor_sd = 1` when
    /// `k > 0`).
    pub fn new(k: usize) -> Self {
        let factor_sd = if k > 0 { Some(DEFAULT_FACTOR_SD) } else { None };
        ModelSpec { k, unit_effects: true, time_effects: true, prior: Prior::Flat, factor_sd }
    }

    /// Intercept and dispersion only.
    pub fn intercept_only() -> Self {
        ModelSpec { k: 0, unit_effects: false, time_effects: false, prior: Prior::Flat, factor_sd: None }
    }

    pub fn with_prior(mut self, prior: Prior) -> Self {
        self.prior = prior;
        self
    }

    pub fn with_factor_sd(mut self, sd: Option<f64>) -> Self {
        self.factor_sd = sd;
        self
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    i: usize,
    t: usize,
    y: u64,
    log_p: f64,
    ln_fact: f64,
}

/// Orthonormal basis of the sum-to-zero subspace of `R^n`: the first `n - 1`
/// columns of the Householder reflection swapping `e_n` and `1 / sqrt(n)`.
#[derive(Debug, Clone)]
struct ZeroSumBasis {
    n: usize,
    w: Vec<f64>,
    scale: f64,
}

impl ZeroSumBasis {
    fn new(n: usize) -> Self {
        let a = 1.0 / (n as f64).sqrt();
        let mut w = vec![a; n];
        if n > 0 {
            w[n - 1] -= 1.0;
        }
        let ww: f64 = w.iter().map(|v| v * v).sum();
        let scale = if ww > 0.0 { 2.0 / ww } else { 0.0 };
        ZeroSumBasis { n, w, scale }
    }

    fn reflect(&self, v: &mut [f64]) {
        let d: f64 = v.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() * self.scale;
        for (vi, wi) in v.iter_mut().zip(&self.w) {
            *vi -= d * wi;
        }
    }

    /// `n - 1` coordinates to a zero-sum vector of length `n`.
    fn expand(&self, z: &[f64], out: &mut [f64]) {
        out[..self.n - 1].copy_from_slice(z);
        out[self.n - 1] = 0.0;
        self.reflect(out);
    }

    /// Coordinates of the zero-sum part of `x`; also the pullback of a
    /// gradient through [`Self::expand`].
    fn contract(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        self.reflect(&mut v);
        v.truncate(self.n - 1);
        v
    }
}

/// `(ln Gamma(x), digamma(x))` from the Stirling series, sharing one log.
/// Absolute error below 1e-13 for `x >= 10`.
fn ln_gamma_digamma_large(x: f64) -> (f64, f64) {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
    let lx = x.ln();
    let r = 1.0 / x;
    let r2 = r * r;
    let lg = (x - 0.5) * lx - x
        + HALF_LN_2PI
        + r * (1.0 / 12.0 - r2 * (1.0 / 360.0 - r2 * (1.0 / 1260.0 - r2 * (1.0 / 1680.0 - r2 / 1188.0))));
    let dg = lx - 0.5 * r
        - r2 * (1.0 / 12.0 - r2 * (1.0 / 120.0 - r2 * (1.0 / 252.0 - r2 * (1.0 / 240.0 - r2 / 132.0))));
    (lg, dg)
}

/// Terms of the NB log pmf that depend on `eta` alone, shared by all cells
/// in one density evaluation.
struct EtaTerms {
    eta: f64,
    log_eta: f64,
    /// `sum_{j<y} log1p(j / eta)` and `sum_{j<y} 1 / (eta + j)` for
    /// `y < series.len()`.
    log1p_sum: Vec<f64>,
    inv_sum: Vec<f64>,
    ln_gamma_eta: f64,
    digamma_eta: f64,
}

impl EtaTerms {
    fn new(eta: f64, max_y: u64) -> Self {
        let len = if eta > 1e6 { max_y.min(99_999) } else { max_y.min(SERIES_MAX_Y) } as usize + 1;
        let mut log1p_sum = Vec::with_capacity(len);
        let mut inv_sum = Vec::with_capacity(len);
        let (mut s, mut d) = (0.0, 0.0);
        for j in 0..len {
            log1p_sum.push(s);
            inv_sum.push(d);
            s += (j as f64 / eta).ln_1p();
            d += 1.0 / (eta + j as f64);
        }
        EtaTerms { eta, log_eta: eta.ln(), log1p_sum, inv_sum, ln_gamma_eta: ln_gamma(eta), digamma_eta: digamma(eta) }
    }

    /// Log pmf and derivatives in `log mu` and `log eta`; the same
    /// branches as [`nb_logpmf_log`].
    fn eval(&self, y: u64, ln_fact: f64, log_mu: f64) -> (f64, f64, f64) {
        let (eta, log_eta) = (self.eta, self.log_eta);
        let mu = log_mu.exp();
        let yf = y as f64;
        let inv_s = 1.0 / (eta + mu);
        // log1p(mu / eta) and log(eta + mu), each without cancellation
        let (l1p, log_s) = if mu < 0.25 * eta {
            let l = (mu / eta).ln_1p();
            (l, log_eta + l)
        } else {
            let l = (eta + mu).ln();
            (l - log_eta, l)
        };
        let d_log_mu = yf - (yf + eta) * mu * inv_s;
        if (y as usize) < self.log1p_sum.len() {
            let series = self.log1p_sum[y as usize];
            let lp = if mu < eta {
                series - ln_fact - eta * l1p + yf * (log_mu - l1p)
            } else {
                yf * log_eta + series - ln_fact - eta * l1p + yf * (log_mu - log_s)
            };
            let d_eta = self.inv_sum[y as usize] - l1p + (mu - yf) * inv_s;
            return (lp, d_log_mu, eta * d_eta);
        }
        let (lg, dg) = ln_gamma_digamma_large(yf + eta);
        let lp = lg - self.ln_gamma_eta - ln_fact - eta * l1p + yf * (log_mu - log_s);
        let d_eta = dg - self.digamma_eta - l1p + (mu - yf) * inv_s;
        (lp, d_log_mu, eta * d_eta)
    }
}

/// Unnormalized log posterior on the unconstrained vector
/// `[alpha, zgamma?, zpsi?, zU, zV, log eta]`.
///
/// Unit and period effects are sampled in sum-to-zero form: `zgamma` holds
/// `N - 1` orthonormal coordinates of `gamma` (likewise `zpsi`), so the
/// intercept carries their common level. Each factor column of `U` is
/// likewise centered over units when period effects are present, and each
/// row of `V` over periods when unit effects are present; the removed means
/// only ever add unit, period or constant terms, which the flat effects
/// absorb. The set of cell means is unchanged by any of this.
#[derive(Debug, Clone)]
pub struct McTarget {
    spec: ModelSpec,
    n: usize,
    t: usize,
    cells: Vec<Cell>,
    max_y: u64,
    gamma_basis: ZeroSumBasis,
    psi_basis: ZeroSumBasis,
}

impl McTarget {
    pub fn new(panel: &OutcomePanel, spec: ModelSpec) -> Result<Self> {
        let (n, t) = (panel.n_units(), panel.n_periods());
        if spec.k > 0 && spec.k >= n.min(t) {
            return Err(Error::invalid(format!(
                "K = {} must be below min(N, T) = {}",
                spec.k,
                n.min(t)
            )));
        }
        if let Prior::WeakGaussian { sd } = spec.prior {
            if !(sd > 0.0) {
                return Err(Error::invalid("prior sd must be positive"));
            }
        }
        if let Some(sd) = spec.factor_sd {
            if !(sd > 0.0) {
                return Err(Error::invalid("factor prior sd must be positive"));
            }
        }
        let cells: Vec<Cell> = (0..n)
            .flat_map(|i| (0..t).map(move |tt| (i, tt)))
            .filter(|&(i, tt)| !panel.d(i, tt))
            .map(|(i, tt)| {
                let y = panel.y(i, tt);
                Cell { i, t: tt, y, log_p: panel.offset(i, tt).ln(), ln_fact: ln_factorial(y) }
            })
            .collect();
        let max_y = cells.iter().map(|c| c.y).max().unwrap_or(0);
        Ok(McTarget {
            spec,
            n,
            t,
            cells,
            max_y,
            gamma_basis: ZeroSumBasis::new(n),
            psi_basis: ZeroSumBasis::new(t),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn gamma_len(&self) -> usize {
        if self.spec.unit_effects { self.n - 1 } else { 0 }
    }

    fn psi_len(&self) -> usize {
        if self.spec.time_effects { self.t - 1 } else { 0 }
    }

    /// Factor columns of `U` are centered when period effects can absorb
    /// their means.
    fn center_u(&self) -> bool {
        self.spec.time_effects
    }

    fn center_v(&self) -> bool {
        self.spec.unit_effects
    }

    fn u_width(&self) -> usize {
        if self.center_u() { self.n - 1 } else { self.n }
    }

    fn v_width(&self) -> usize {
        if self.center_v() { self.t - 1 } else { self.t }
    }

    pub fn dim(&self) -> usize {
        1 + self.gamma_len() + self.psi_len() + self.spec.k * (self.u_width() + self.v_width()) + 1
    }

    fn offsets(&self) -> (usize, usize, usize, usize, usize) {
        let g = 1;
        let p = g + self.gamma_len();
        let u = p + self.psi_len();
        let v = u + self.spec.k * self.u_width();
        let e = v + self.spec.k * self.v_width();
        (g, p, u, v, e)
    }

    /// Full K×len factor matrix from its packed coordinates.
    fn expand_factor(&self, z: &[f64], len: usize, centered: bool, basis: &ZeroSumBasis) -> Vec<f64> {
        if !centered {
            return z.to_vec();
        }
        let mut out = vec![0.0; self.spec.k * len];
        for (k, chunk) in out.chunks_mut(len).enumerate() {
            basis.expand(&z[k * (len - 1)..(k + 1) * (len - 1)], chunk);
        }
        out
    }

    fn contract_factor(&self, full: &[f64], len: usize, centered: bool, basis: &ZeroSumBasis) -> Vec<f64> {
        if !centered {
            return full.to_vec();
        }
        full.chunks(len).flat_map(|c| basis.contract(c)).collect()
    }

    /// Unconstrained vector for `params`. Factor and effect means are moved
    /// into the effects and intercept first, so `unpack(pack(p))` has the
    /// same linear predictor as `p`; disabled effects are dropped.
    pub fn pack(&self, params: &McParams) -> Vec<f64> {
        let (n, t, k) = (self.n, self.t, self.spec.k);
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let mut alpha = params.alpha;
        let mut gamma = params.gamma.clone();
        let mut psi = params.psi.clone();
        let mut u = params.u.clone();
        let mut v = params.v.clone();
        for kk in 0..k {
            let ub = if self.center_u() { mean(&u[kk * n..(kk + 1) * n]) } else { 0.0 };
            let vb = if self.center_v() { mean(&v[kk * t..(kk + 1) * t]) } else { 0.0 };
            u[kk * n..(kk + 1) * n].iter_mut().for_each(|x| *x -= ub);
            v[kk * t..(kk + 1) * t].iter_mut().for_each(|x| *x -= vb);
            for i in 0..n {
                gamma[i] += u[kk * n + i] * vb;
            }
            for tt in 0..t {
                psi[tt] += ub * v[kk * t + tt];
            }
            alpha += ub * vb;
        }
        let mut x = Vec::with_capacity(self.dim());
        let mut zg = Vec::new();
        let mut zp = Vec::new();
        if self.spec.unit_effects {
            let m = mean(&gamma);
            alpha += m;
            zg = self.gamma_basis.contract(&gamma.iter().map(|g| g - m).collect::<Vec<_>>());
        }
        if self.spec.time_effects {
            let m = mean(&psi);
            alpha += m;
            zp = self.psi_basis.contract(&psi.iter().map(|g| g - m).collect::<Vec<_>>());
        }
        x.push(alpha);
        x.extend(zg);
        x.extend(zp);
        x.extend(self.contract_factor(&u, n, self.center_u(), &self.gamma_basis));
        x.extend(self.contract_factor(&v, t, self.center_v(), &self.psi_basis));
        x.push(params.eta.ln());
        x
    }

    pub fn unpack(&self, x: &[f64]) -> McParams {
        let (g, p, u, v, e) = self.offsets();
        let mut gamma = vec![0.0; self.n];
        let mut psi = vec![0.0; self.t];
        if self.spec.unit_effects {
            self.gamma_basis.expand(&x[g..p], &mut gamma);
        }
        if self.spec.time_effects {
            self.psi_basis.expand(&x[p..u], &mut psi);
        }
        McParams {
            alpha: x[0],
            gamma,
            psi,
            u: self.expand_factor(&x[u..v], self.n, self.center_u(), &self.gamma_basis),
            v: self.expand_factor(&x[v..e], self.t, self.center_v(), &self.psi_basis),
            eta: x[e].exp(),
            k: self.spec.k,
        }
    }

    /// Log density and gradient. Returns `-inf` for non-finite evaluations.
    pub fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (g, p, u, v, e) = self.offsets();
        let (n, t, k) = (self.n, self.t, self.spec.k);
        grad.iter_mut().for_each(|gr| *gr = 0.0);
        let log_eta = x[e];
        let eta = log_eta.exp();
        if !eta.is_finite() || eta <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let terms = EtaTerms::new(eta, self.max_y);
        let mut gamma = vec![0.0; n];
        let mut psi = vec![0.0; t];
        if self.spec.unit_effects {
            self.gamma_basis.expand(&x[g..p], &mut gamma);
        }
        if self.spec.time_effects {
            self.psi_basis.expand(&x[p..u], &mut psi);
        }
        let uu = self.expand_factor(&x[u..v], n, self.center_u(), &self.gamma_basis);
        let vv = self.expand_factor(&x[v..e], t, self.center_v(), &self.psi_basis);
        let mut d_gamma = vec![0.0; n];
        let mut d_psi = vec![0.0; t];
        let mut d_u = vec![0.0; k * n];
        let mut d_v = vec![0.0; k * t];
        let mut lp = 0.0;
        for c in &self.cells {
            let mut lin = x[0] + gamma[c.i] + psi[c.t] + c.log_p;
            for kk in 0..k {
                lin += uu[kk * n + c.i] * vv[kk * t + c.t];
            }
            let (l, dmu, deta) = terms.eval(c.y, c.ln_fact, lin);
            lp += l;
            grad[0] += dmu;
            d_gamma[c.i] += dmu;
            d_psi[c.t] += dmu;
            for kk in 0..k {
                d_u[kk * n + c.i] += dmu * vv[kk * t + c.t];
                d_v[kk * t + c.t] += dmu * uu[kk * n + c.i];
            }
            grad[e] += deta;
        }
        if self.spec.unit_effects {
            grad[g..p].copy_from_slice(&self.gamma_basis.contract(&d_gamma));
        }
        if self.spec.time_effects {
            grad[p..u].copy_from_slice(&self.psi_basis.contract(&d_psi));
        }
        grad[u..v].copy_from_slice(&self.contract_factor(&d_u, n, self.center_u(), &self.gamma_basis));
        grad[v..e].copy_from_slice(&self.contract_factor(&d_v, t, self.center_v(), &self.psi_basis));
        match self.spec.prior {
            Prior::Flat => {
                lp += log_eta;
                grad[e] += 1.0;
            }
            Prior::WeakGaussian { sd } => {
                let prec = 1.0 / (sd * sd);
                for (xi, gi) in x.iter().zip(grad.iter_mut()) {
                    lp -= 0.5 * xi * xi * prec;
                    *gi -= xi * prec;
                }
            }
        }
        if let Some(sd) = self.spec.factor_sd {
            let prec = 1.0 / (sd * sd);
            for (xi, gi) in x[u..e].iter().zip(grad[u..e].iter_mut()) {
                lp -= 0.5 * xi * xi * prec;
                *gi -= xi * prec;
            }
        }
        if lp.is_finite() && grad.iter().all(|v| v.is_finite()) {
            lp
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn logp(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.logp_grad(x, &mut g)
    }
}
