//! Diagonal-covariance Gaussian mixture prior over flattened filters.
//!
//! All arithmetic is `f64` and done in the log domain. Component scores are
//! `log π_k + log N(w | μ_k, diag(var_k))`; the mixture log-density is their
//! log-sum-exp.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::exec;
use crate::numeric::{argmax, log_sum_exp, KahanSum};
use crate::stats::kmeans_fit;
use crate::tensorio::FilterBank;

/// Lower bound on every fitted variance.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;
/// Tolerance on `Σ π_k = 1` accepted when constructing or reading a mixture.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    // log π_k − ½(d·ln 2π + Σ_j ln var_kj)
    log_consts: Vec<f64>,
}

impl GaussianMixture {
    /// Builds a mixture from `K` weights and row-major `K×dim` means and variances.
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Validation("mixture needs at least one component".into()));
        }
        if means.is_empty() || !means.len().is_multiple_of(k) || variances.len() != means.len() {
            return Err(Error::Validation(format!(
                "{} means and {} variances do not fit {k} components",
                means.len(),
                variances.len()
            )));
        }
        let dim = means.len() / k;
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Validation(format!("weights sum to {sum}, not 1")));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Validation("means must be finite".into()));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Validation("variances must be finite and positive".into()));
        }
        let log_consts = weights
            .iter()
            .zip(variances.chunks(dim))
            .map(|(&w, var)| w.ln() - 0.5 * (dim as f64 * LN_2PI + var.iter().map(|v| v.ln()).sum::<f64>()))
            .collect();
        Ok(Self {
            dim,
            weights,
            means,
            variances,
            log_consts,
        })
    }

    /// Single isotropic component `N(mean, variance·I)`.
    pub fn isotropic(mean: &[f64], variance: f64) -> Result<Self> {
        Self::new(vec![1.0], mean.to_vec(), vec![variance; mean.len()])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.dim..(k + 1) * self.dim]
    }

    fn check_dim(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: w.len(),
            });
        }
        Ok(())
    }

    /// `log π_k + log N(w | μ_k, Σ_k)` for every component.
    pub(crate) fn log_scores_into(&self, w: &[f64], out: &mut [f64]) {
        for (k, score) in out.iter_mut().enumerate() {
            let mu = self.mean(k);
            let var = self.variance(k);
            let mut q = 0.0;
            for j in 0..self.dim {
                let d = w[j] - mu[j];
                q += d * d / var[j];
            }
            *score = self.log_consts[k] - 0.5 * q;
        }
    }

    pub fn log_scores(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        let mut out = vec![0.0; self.k()];
        self.log_scores_into(w, &mut out);
        Ok(out)
    }

    pub(crate) fn logpdf_unchecked(&self, w: &[f64], scratch: &mut [f64]) -> f64 {
        self.log_scores_into(w, scratch);
        log_sum_exp(scratch)
    }

    fn responsibilities_into(&self, w: &[f64], out: &mut [f64]) {
        self.log_scores_into(w, out);
        normalize_log_scores(out);
    }

    pub(crate) fn grad_approx_into(&self, w: &[f64], scratch: &mut [f64], grad: &mut [f64]) {
        self.log_scores_into(w, scratch);
        let s = argmax(scratch);
        let (mu, var) = (self.mean(s), self.variance(s));
        for j in 0..self.dim {
            grad[j] = (w[j] - mu[j]) / var[j];
        }
    }

    pub(crate) fn grad_exact_into(&self, w: &[f64], scratch: &mut [f64], grad: &mut [f64]) {
        self.responsibilities_into(w, scratch);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (k, &gamma) in scratch.iter().enumerate() {
            if gamma == 0.0 {
                continue;
            }
            let (mu, var) = (self.mean(k), self.variance(k));
            for j in 0..self.dim {
                grad[j] += gamma * ((w[j] - mu[j]) / var[j]);
            }
        }
    }
}

/// Turns log scores into normalized probabilities in place.
fn normalize_log_scores(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

/// `log N(w | mu, diag(var))`.
pub fn gaussian_logpdf(w: &[f64], mu: &[f64], var: &[f64]) -> Result<f64> {
    let d = w.len();
    if mu.len() != d || var.len() != d {
        return Err(Error::DimMismatch {
            expected: d,
            got: if mu.len() != d { mu.len() } else { var.len() },
        });
    }
    if let Some(v) = var.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Input(format!("nonpositive variance {v}")));
    }
    let mut log_det = 0.0;
    let mut q = 0.0;
    for j in 0..d {
        let diff = w[j] - mu[j];
        q += diff * diff / var[j];
        log_det += var[j].ln();
    }
    Ok(-0.5 * (d as f64 * LN_2PI + log_det + q))
}

/// `log Σ_k π_k N(w | μ_k, Σ_k)`.
pub fn gmm_logpdf(w: &[f64], m: &GaussianMixture) -> Result<f64> {
    m.check_dim(w)?;
    let mut scratch = vec![0.0; m.k()];
    Ok(m.logpdf_unchecked(w, &mut scratch))
}

/// Negative log-likelihood of one filter under the mixture.
pub fn nll(w: &[f64], m: &GaussianMixture) -> Result<f64> {
    Ok(-gmm_logpdf(w, m)?)
}

/// Sum of [`nll`] over a bank, compensated.
pub fn nll_total(bank: &FilterBank, m: &GaussianMixture) -> Result<f64> {
    if bank.is_empty() {
        return Ok(0.0);
    }
    if bank.dim() != m.dim() {
        return Err(Error::DimMismatch {
            expected: m.dim(),
            got: bank.dim(),
        });
    }
    let per_filter = per_filter_nll(bank, m);
    let mut sum = KahanSum::new();
    for v in per_filter {
        sum.add(v);
    }
    Ok(sum.value())
}

/// [`nll`] of every filter in bank order.
pub fn per_filter_nll(bank: &FilterBank, m: &GaussianMixture) -> Vec<f64> {
    let d = bank.dim();
    exec::map_chunks(bank.len(), 512, |range| {
        let mut w = vec![0.0; d];
        let mut scratch = vec![0.0; m.k()];
        range
            .map(|i| {
                for (dst, &src) in w.iter_mut().zip(bank.row(i)) {
                    *dst = src as f64;
                }
                -m.logpdf_unchecked(&w, &mut scratch)
            })
            .collect::<Vec<_>>()
    })
    .concat()
}

/// Posterior component probabilities `γ_k(w)`.
pub fn responsibilities(w: &[f64], m: &GaussianMixture) -> Result<Vec<f64>> {
    m.check_dim(w)?;
    let mut out = vec![0.0; m.k()];
    m.responsibilities_into(w, &mut out);
    Ok(out)
}

/// Component with the largest weighted density at `w`; lowest index on ties.
pub fn select_component(w: &[f64], m: &GaussianMixture) -> Result<usize> {
    Ok(argmax(&m.log_scores(w)?))
}

/// Gradient of the selected component's quadratic form, `(w − μ_s) / var_s`.
pub fn grad_approx(w: &[f64], m: &GaussianMixture) -> Result<Vec<f64>> {
    m.check_dim(w)?;
    let mut scratch = vec![0.0; m.k()];
    let mut g = vec![0.0; m.dim()];
    m.grad_approx_into(w, &mut scratch, &mut g);
    Ok(g)
}

/// Exact gradient of [`nll`]: `Σ_k γ_k(w) (w − μ_k) / var_k`.
pub fn grad_exact(w: &[f64], m: &GaussianMixture) -> Result<Vec<f64>> {
    m.check_dim(w)?;
    let mut scratch = vec![0.0; m.k()];
    let mut g = vec![0.0; m.dim()];
    m.grad_exact_into(w, &mut scratch, &mut g);
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop when the relative change of the data log-likelihood falls below this.
    pub rel_tol: f64,
    pub seed: u64,
    pub variance_floor: f64,
    /// Lloyd iterations for the k-means warm start.
    pub kmeans_iters: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k: 64,
            max_iters: 200,
            rel_tol: 1e-7,
            seed: 0,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            kmeans_iters: 100,
        }
    }
}

impl EmConfig {
    pub fn with_k(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            ..Self::default()
        }
    }
}

/// One E-step evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmIteration {
    /// Data log-likelihood under the parameters entering this iteration.
    pub log_likelihood: f64,
    /// True when the parameters being scored came from an M-step that
    /// re-seeded a collapsed component; monotonicity is not expected here.
    pub after_reseed: bool,
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: GaussianMixture,
    pub trace: Vec<EmIteration>,
    pub converged: bool,
    pub reseeds: usize,
}

/// Relative slack allowed on the per-iteration log-likelihood increase.
pub const MONOTONE_SLACK: f64 = 1e-9;

impl EmFit {
    /// First iteration whose log-likelihood dropped by more than the slack,
    /// ignoring iterations that follow a re-seed.
    pub fn monotonicity_violation(&self) -> Option<usize> {
        self.trace.windows(2).enumerate().find_map(|(t, w)| {
            let (prev, next) = (&w[0], &w[1]);
            let drop_ok = next.log_likelihood >= prev.log_likelihood - MONOTONE_SLACK * prev.log_likelihood.abs();
            (!next.after_reseed && !drop_ok).then_some(t + 1)
        })
    }
}

#[derive(Clone)]
struct Stats {
    ll: KahanSum,
    nk: Vec<f64>,
    // Moments about the current means, so the variance update avoids
    // cancellation between E[x²] and E[x]².
    s1: Vec<f64>,
    s2: Vec<f64>,
    // (log-likelihood, sample index) of the worst-explained samples, ascending
    worst: Vec<(f64, usize)>,
}

impl Stats {
    fn new(k: usize, d: usize) -> Self {
        Self {
            ll: KahanSum::new(),
            nk: vec![0.0; k],
            s1: vec![0.0; k * d],
            s2: vec![0.0; k * d],
            worst: Vec::new(),
        }
    }

    fn merge(&mut self, other: &Stats, keep: usize) {
        self.ll.add(other.ll.value());
        for (a, b) in self.nk.iter_mut().zip(&other.nk) {
            *a += b;
        }
        for (a, b) in self.s1.iter_mut().zip(&other.s1) {
            *a += b;
        }
        for (a, b) in self.s2.iter_mut().zip(&other.s2) {
            *a += b;
        }
        self.worst.extend_from_slice(&other.worst);
        sort_worst(&mut self.worst);
        self.worst.truncate(keep);
    }
}

fn sort_worst(v: &mut [(f64, usize)]) {
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
}

const EM_CHUNK: usize = 256;

fn e_step(x: &[f64], d: usize, m: &GaussianMixture, keep: usize) -> Stats {
    let n = x.len() / d;
    let k = m.k();
    let partials = exec::map_chunks(n, EM_CHUNK, |range| {
        let mut st = Stats::new(k, d);
        let mut gamma = vec![0.0; k];
        for i in range {
            let w = &x[i * d..(i + 1) * d];
            m.log_scores_into(w, &mut gamma);
            let lp = log_sum_exp(&gamma);
            st.ll.add(lp);
            st.worst.push((lp, i));
            for (kk, g) in gamma.iter_mut().enumerate() {
                *g = (*g - lp).exp();
                if *g == 0.0 {
                    continue;
                }
                st.nk[kk] += *g;
                let mu = m.mean(kk);
                for j in 0..d {
                    let c = w[j] - mu[j];
                    st.s1[kk * d + j] += *g * c;
                    st.s2[kk * d + j] += *g * c * c;
                }
            }
        }
        sort_worst(&mut st.worst);
        st.worst.truncate(keep);
        st
    });
    let mut total = Stats::new(k, d);
    for p in &partials {
        total.merge(p, keep);
    }
    total
}

/// Fits a diagonal mixture by EM, warm-started from k-means.
pub fn em_fit(bank: &FilterBank, cfg: &EmConfig) -> Result<EmFit> {
    let n = bank.len();
    let d = bank.dim();
    let k = cfg.k;
    if k == 0 || n == 0 {
        return Err(Error::Input("em_fit needs K ≥ 1 and a nonempty bank".into()));
    }
    if n < k {
        return Err(Error::Input(format!("{n} filters cannot support {k} components")));
    }
    if !(cfg.variance_floor > 0.0) || !(cfg.rel_tol > 0.0) {
        return Err(Error::Config("variance_floor and rel_tol must be positive".into()));
    }
    let x = bank.to_f64();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("bank contains non-finite values".into()));
    }
    let floor = cfg.variance_floor;

    let km = kmeans_fit(bank, k, cfg.seed, cfg.kmeans_iters)?;
    let mut counts = vec![0usize; k];
    let mut sq = vec![0.0; k * d];
    for (i, &a) in km.assignments.iter().enumerate() {
        counts[a] += 1;
        let c = &km.centroids[a * d..(a + 1) * d];
        for j in 0..d {
            let diff = x[i * d + j] - c[j];
            sq[a * d + j] += diff * diff;
        }
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let variances: Vec<f64> = (0..k * d)
        .map(|idx| {
            let c = counts[idx / d];
            if c == 0 { floor } else { (sq[idx] / c as f64).max(floor) }
        })
        .collect();
    let mut model = GaussianMixture::new(normalized(weights), km.centroids.clone(), variances)?;

    let collapse_threshold = 1.0 / (10.0 * n as f64);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut reseeds = 0;
    let mut after_reseed = false;
    for _ in 0..cfg.max_iters {
        let st = e_step(&x, d, &model, k);
        let ll = st.ll.value();
        if !ll.is_finite() {
            return Err(Error::Invariant(format!("EM log-likelihood became {ll}")));
        }
        let prev = trace.last().map(|t: &EmIteration| t.log_likelihood);
        trace.push(EmIteration {
            log_likelihood: ll,
            after_reseed,
        });
        if let Some(prev) = prev {
            if !after_reseed && (ll - prev).abs() <= cfg.rel_tol * prev.abs() {
                converged = true;
                break;
            }
        }

        let mut weights = vec![0.0; k];
        let mut means = model.means.clone();
        let mut variances = vec![0.0; k * d];
        let mut worst = st.worst.iter();
        after_reseed = false;
        for kk in 0..k {
            let nk = st.nk[kk];
            if nk / n as f64 >= collapse_threshold {
                weights[kk] = nk / n as f64;
                for j in 0..d {
                    let idx = kk * d + j;
                    let shift = st.s1[idx] / nk;
                    means[idx] += shift;
                    variances[idx] = (st.s2[idx] / nk - shift * shift).max(floor);
                }
            } else {
                let &(_, i) = worst.next().expect("at least K worst samples tracked");
                log::debug!("re-seeding collapsed component {kk} at sample {i}");
                weights[kk] = 1.0 / n as f64;
                means[kk * d..(kk + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
                variances[kk * d..(kk + 1) * d].fill(floor);
                after_reseed = true;
                reseeds += 1;
            }
        }
        model = GaussianMixture::new(normalized(weights), means, variances)?;
    }
    Ok(EmFit {
        model,
        trace,
        converged,
        reseeds,
    })
}

fn normalized(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// `d/2 · ln(2π)`, the NLL of a standard normal evaluated at its mean.
pub fn standard_normal_nll_at_mean(d: usize) -> f64 {
    0.5 * d as f64 * (2.0 * PI).ln()
}
