//! Gaussian mixtures on log-intervals, fitted by expectation-maximization.
//!
//! A K-component Gaussian mixture on `ln Δ` is a K-component log-normal
//! mixture on `Δ`. Fitting happens in log space; component means are then
//! taken back in seconds directly from the memberships, which avoids the
//! closed-form log-normal mean overshooting on finite samples.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{seeded_rng, stream_seed};
use crate::stats;

/// Mass below which a component counts as empty.
pub const EMPTY_COMPONENT_MASS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixtureError {
    #[error("insufficient_data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("interval {index} is not positive ({value}); filters should have removed it")]
    NonPositiveInterval { index: usize, value: f64 },
    #[error("membership matrix has {rows} rows but there are {expected} intervals")]
    DimensionMismatch { rows: usize, expected: usize },
    #[error("invalid EM configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop once the relative log-likelihood change drops below this.
    pub rel_tolerance: f64,
    /// Lower bound on every component standard deviation, in log-seconds.
    pub sigma_floor: f64,
    /// Total number of starts, the first one unjittered.
    pub restarts: usize,
    pub seed: u64,
    /// Candidate component counts for model selection.
    pub k_range: Vec<usize>,
    /// Fewer points than this are not fitted at all.
    pub min_points: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iterations: 1000,
            rel_tolerance: 1e-8,
            sigma_floor: 1e-3,
            restarts: 3,
            seed: 0,
            k_range: vec![3, 4, 5],
            min_points: 10,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), MixtureError> {
        let bad = |m: &str| Err(MixtureError::InvalidConfig(m.to_owned()));
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1");
        }
        if self.rel_tolerance.is_nan() || self.rel_tolerance <= 0.0 {
            return bad("rel_tolerance must be positive");
        }
        if self.sigma_floor.is_nan() || self.sigma_floor <= 0.0 {
            return bad("sigma_floor must be positive");
        }
        if self.restarts < 1 {
            return bad("restarts must be at least 1");
        }
        if self.k_range.is_empty() || self.k_range.contains(&0) {
            return bad("k_range must be non-empty and contain only positive counts");
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        EmConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Weights, means and standard deviations of a mixture on log-seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl MixtureParams {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// `ln p(x)` under the mixture.
    pub fn log_density(&self, x: f64) -> f64 {
        let terms: Vec<f64> = (0..self.k())
            .map(|k| {
                let z = (x - self.means[k]) / self.stds[k];
                self.weights[k].ln() - self.stds[k].ln() - HALF_LN_2PI - 0.5 * z * z
            })
            .collect();
        stats::logsumexp(&terms)
    }

    pub fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter().map(|&x| self.log_density(x)).sum()
    }

    /// Mixture CDF at `x`.
    pub fn cdf(&self, x: f64) -> f64 {
        (0..self.k())
            .map(|k| self.weights[k] * stats::normal_cdf((x - self.means[k]) / self.stds[k]))
            .sum()
    }

    /// Number of non-empty components that are not duplicates of one
    /// another. A fit to constant data has every component collapsed onto
    /// the same point, so this is 1 regardless of K.
    pub fn effective_components(&self) -> usize {
        let mut seen: Vec<(f64, f64)> = Vec::new();
        for k in 0..self.k() {
            if self.weights[k] < EMPTY_COMPONENT_MASS {
                continue;
            }
            let (m, s) = (self.means[k], self.stds[k]);
            let dup = seen
                .iter()
                .any(|&(m2, s2)| (m - m2).abs() <= 1e-6 && (s - s2).abs() <= 1e-6);
            if !dup {
                seen.push((m, s));
            }
        }
        seen.len()
    }
}

/// N×K responsibilities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MembershipMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        MembershipMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(
            rows.iter().all(|r| r.len() == cols),
            "ragged membership rows"
        );
        MembershipMatrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.cols + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column_sum(&self, k: usize) -> f64 {
        (0..self.rows).map(|i| self.get(i, k)).sum()
    }

    fn permute_columns(&self, order: &[usize]) -> Self {
        let mut out = MembershipMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (new_k, &old_k) in order.iter().enumerate() {
                out.data[i * self.cols + new_k] = self.get(i, old_k);
            }
        }
        out
    }
}

/// Raw EM output, before component ordering and goodness of fit.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub params: MixtureParams,
    pub memberships: MembershipMatrix,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after every E-step of the winning start.
    pub trace: Vec<f64>,
}

/// A finished fit: components ordered by increasing direct mean.
#[derive(Clone, Debug)]
pub struct MixtureFit {
    pub params: MixtureParams,
    pub memberships: MembershipMatrix,
    /// Membership-weighted means of the raw intervals, seconds.
    pub direct_means: Vec<f64>,
    pub empty_components: Vec<bool>,
    pub log_likelihood: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Pearson correlation of empirical and fitted CDFs; `None` when
    /// undefined.
    pub gof: Option<f64>,
    pub trace: Vec<f64>,
}

/// Serializable digest of a [`MixtureFit`], used for caching fits between
/// pipeline stages. Memberships are not carried.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub k: usize,
    pub params: MixtureParams,
    pub direct_means: Vec<f64>,
    pub log_likelihood: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gof: Option<f64>,
    pub gof_squared: Option<f64>,
}

impl MixtureFit {
    pub fn k(&self) -> usize {
        self.params.k()
    }

    pub fn summary(&self) -> FitSummary {
        FitSummary {
            k: self.k(),
            params: self.params.clone(),
            direct_means: self.direct_means.clone(),
            log_likelihood: self.log_likelihood,
            bic: self.bic,
            iterations: self.iterations,
            converged: self.converged,
            gof: self.gof,
            gof_squared: self.gof.map(|g| g * g),
        }
    }

    /// Computes direct means, orders components and scores the fit.
    pub fn from_em(em: EmFit, deltas: &[f64], logs: &[f64]) -> Result<Self, MixtureError> {
        let means = direct_component_means(deltas, &em.memberships)?;
        let n = em.memberships.rows();
        let fit = MixtureFit {
            bic: bic(em.log_likelihood, em.params.k(), n),
            params: em.params,
            memberships: em.memberships,
            direct_means: means.means,
            empty_components: means.empty,
            log_likelihood: em.log_likelihood,
            iterations: em.iterations,
            converged: em.converged,
            gof: None,
            trace: em.trace,
        };
        let mut fit = order_components(fit);
        fit.gof = goodness_of_fit(logs, &fit.params);
        Ok(fit)
    }
}

/// `−2 ln L + (3K − 1) ln N`.
pub fn bic(log_likelihood: f64, k: usize, n: usize) -> f64 {
    -2.0 * log_likelihood + parameter_count(k) as f64 * (n as f64).ln()
}

/// Free parameters of a K-component univariate mixture.
pub fn parameter_count(k: usize) -> usize {
    3 * k - 1
}

/// Natural logarithms of the intervals.
pub fn log_transform(deltas: &[f64]) -> Result<Vec<f64>, MixtureError> {
    deltas
        .iter()
        .enumerate()
        .map(|(index, &d)| {
            if d > 0.0 && d.is_finite() {
                Ok(d.ln())
            } else {
                Err(MixtureError::NonPositiveInterval { index, value: d })
            }
        })
        .collect()
}

/// Quantile start: means at the `(k − ½)/K` quantiles, a common spread of
/// `sd(x)/K`, equal weights.
pub fn init_params(x: &[f64], k: usize, sigma_floor: f64) -> Result<MixtureParams, MixtureError> {
    if k == 0 || x.len() < k {
        return Err(MixtureError::InsufficientData {
            needed: k.max(1),
            got: x.len(),
        });
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(stats::total_order);
    let means = (0..k)
        .map(|j| stats::quantile_sorted(&sorted, (j as f64 + 0.5) / k as f64))
        .collect();
    let sd = stats::sample_std(x).unwrap_or(0.0);
    let sigma = (sd / k as f64).max(sigma_floor);
    Ok(MixtureParams {
        weights: vec![1.0 / k as f64; k],
        means,
        stds: vec![sigma; k],
    })
}

fn jittered<R: Rng>(base: &MixtureParams, spread: f64, rng: &mut R) -> MixtureParams {
    let mut p = base.clone();
    if spread > 0.0 {
        for m in &mut p.means {
            *m += rng.random_range(-spread..=spread);
        }
    }
    p
}

/// Fills `resp` with responsibilities under `params` and returns the
/// log-likelihood. Normalization happens in the log domain.
fn e_step(x: &[f64], params: &MixtureParams, resp: &mut MembershipMatrix) -> f64 {
    let k = params.k();
    let consts: Vec<f64> = (0..k)
        .map(|j| params.weights[j].ln() - params.stds[j].ln() - HALF_LN_2PI)
        .collect();
    let inv: Vec<f64> = params.stds.iter().map(|s| 1.0 / s).collect();
    let mut ll = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        let row = resp.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..k {
            let z = (xi - params.means[j]) * inv[j];
            row[j] = consts[j] - 0.5 * z * z;
            max = max.max(row[j]);
        }
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        let inv_s = 1.0 / s;
        for v in row.iter_mut() {
            *v *= inv_s;
        }
        ll += max + s.ln();
    }
    ll
}

fn m_step(x: &[f64], resp: &MembershipMatrix, params: &mut MixtureParams, sigma_floor: f64) {
    let k = params.k();
    let mut nk = vec![0.0; k];
    let mut sx = vec![0.0; k];
    for (i, &xi) in x.iter().enumerate() {
        for (j, &p) in resp.row(i).iter().enumerate() {
            nk[j] += p;
            sx[j] += p * xi;
        }
    }
    let mu: Vec<f64> = (0..k)
        .map(|j| {
            if nk[j] > 0.0 {
                sx[j] / nk[j]
            } else {
                params.means[j]
            }
        })
        .collect();
    let mut ss = vec![0.0; k];
    for (i, &xi) in x.iter().enumerate() {
        for (j, &p) in resp.row(i).iter().enumerate() {
            let d = xi - mu[j];
            ss[j] += p * d * d;
        }
    }
    let n = x.len() as f64;
    for j in 0..k {
        params.weights[j] = nk[j] / n;
        // an empty component keeps its location and spread
        if nk[j] > 0.0 {
            params.means[j] = mu[j];
            params.stds[j] = (ss[j] / nk[j]).max(sigma_floor * sigma_floor).sqrt();
        }
    }
}

fn run_em(x: &[f64], start: MixtureParams, cfg: &EmConfig) -> EmFit {
    let n = x.len();
    let mut params = start;
    let mut resp = MembershipMatrix::zeros(n, params.k());
    let mut ll = e_step(x, &params, &mut resp);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        m_step(x, &resp, &mut params, cfg.sigma_floor);
        iterations += 1;
        let next = e_step(x, &params, &mut resp);
        trace.push(next);
        let change = (next - ll).abs();
        ll = next;
        if change <= cfg.rel_tolerance * ll.abs() {
            converged = true;
            break;
        }
    }
    // Weights are reset to the column means of the final memberships, so
    // Σ a_k m_k reproduces the sample mean exactly.
    let nf = n as f64;
    for j in 0..params.k() {
        params.weights[j] = resp.column_sum(j) / nf;
    }
    ll = params.log_likelihood(x);
    trace.push(ll);
    EmFit {
        params,
        memberships: resp,
        log_likelihood: ll,
        iterations,
        converged,
        trace,
    }
}

/// Fits a K-component mixture to log-intervals `x`, keeping the start with
/// the highest final log-likelihood.
pub fn fit_em(x: &[f64], k: usize, cfg: &EmConfig) -> Result<EmFit, MixtureError> {
    cfg.validate()?;
    let needed = k.max(cfg.min_points);
    if x.len() < needed {
        return Err(MixtureError::InsufficientData {
            needed,
            got: x.len(),
        });
    }
    let base = init_params(x, k, cfg.sigma_floor)?;
    let spread = stats::sample_std(x).unwrap_or(0.0);
    let mut rng = seeded_rng(stream_seed(cfg.seed, k as u64));

    let mut best: Option<EmFit> = None;
    for restart in 0..cfg.restarts {
        let start = if restart == 0 {
            base.clone()
        } else {
            jittered(&base, spread, &mut rng)
        };
        let fit = run_em(x, start, cfg);
        let better = match &best {
            None => true,
            Some(b) => fit.log_likelihood > b.log_likelihood,
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectMeans {
    pub means: Vec<f64>,
    /// Components whose total membership mass is below [`EMPTY_COMPONENT_MASS`];
    /// their mean is reported as 0.
    pub empty: Vec<bool>,
}

/// `m_k = Σ Δ_i p_ik / Σ p_ik`.
pub fn direct_component_means(
    deltas: &[f64],
    memberships: &MembershipMatrix,
) -> Result<DirectMeans, MixtureError> {
    if memberships.rows() != deltas.len() {
        return Err(MixtureError::DimensionMismatch {
            rows: memberships.rows(),
            expected: deltas.len(),
        });
    }
    let k = memberships.cols();
    let mut num = vec![0.0; k];
    let mut den = vec![0.0; k];
    for (i, &d) in deltas.iter().enumerate() {
        for (j, p) in memberships.row(i).iter().enumerate() {
            num[j] += d * p;
            den[j] += p;
        }
    }
    let empty: Vec<bool> = den.iter().map(|&w| w < EMPTY_COMPONENT_MASS).collect();
    let means = (0..k)
        .map(|j| if empty[j] { 0.0 } else { num[j] / den[j] })
        .collect();
    Ok(DirectMeans { means, empty })
}

/// Closed-form log-normal means `exp(μ_k + σ_k²/2)`. Diagnostic only.
pub fn lognormal_theoretical_means(params: &MixtureParams) -> Vec<f64> {
    params
        .means
        .iter()
        .zip(&params.stds)
        .map(|(m, s)| (m + 0.5 * s * s).exp())
        .collect()
}

/// Reorders components by increasing direct mean; ties fall back to μ, then σ.
pub fn order_components(fit: MixtureFit) -> MixtureFit {
    let k = fit.k();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        fit.direct_means[a]
            .total_cmp(&fit.direct_means[b])
            .then(fit.params.means[a].total_cmp(&fit.params.means[b]))
            .then(fit.params.stds[a].total_cmp(&fit.params.stds[b]))
    });
    if order.iter().enumerate().all(|(i, &j)| i == j) {
        return fit;
    }
    let pick = |v: &[f64]| order.iter().map(|&j| v[j]).collect::<Vec<_>>();
    MixtureFit {
        params: MixtureParams {
            weights: pick(&fit.params.weights),
            means: pick(&fit.params.means),
            stds: pick(&fit.params.stds),
        },
        memberships: fit.memberships.permute_columns(&order),
        direct_means: pick(&fit.direct_means),
        empty_components: order.iter().map(|&j| fit.empty_components[j]).collect(),
        ..fit
    }
}

/// Correlation between the empirical CDF (average ranks over N) and the
/// mixture CDF, both evaluated at the observed log-intervals.
pub fn goodness_of_fit(x: &[f64], params: &MixtureParams) -> Option<f64> {
    if x.len() < 3 {
        return None;
    }
    let n = x.len() as f64;
    let empirical: Vec<f64> = stats::average_ranks(x).into_iter().map(|r| r / n).collect();
    let fitted: Vec<f64> = x.iter().map(|&v| params.cdf(v)).collect();
    stats::pearson(&empirical, &fitted)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub k: usize,
    pub bic: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Result of BIC model selection. `best` is `None` when no candidate
/// converged, in which case the user should be dropped.
#[derive(Clone, Debug)]
pub struct ModelSelection {
    pub best: Option<MixtureFit>,
    pub candidates: Vec<Candidate>,
}

/// Index of the converged candidate with the smallest BIC; exact ties go to
/// the smaller K.
pub fn choose_by_bic(candidates: &[Candidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if !c.converged || !c.bic.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &candidates[b];
                if c.bic < cur.bic || (c.bic == cur.bic && c.k < cur.k) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Fits every feasible K in `cfg.k_range` and keeps the converged fit with
/// minimal BIC.
pub fn select_model(
    x: &[f64],
    deltas: &[f64],
    cfg: &EmConfig,
) -> Result<ModelSelection, MixtureError> {
    cfg.validate()?;
    if x.len() != deltas.len() {
        return Err(MixtureError::DimensionMismatch {
            rows: x.len(),
            expected: deltas.len(),
        });
    }
    if x.len() < cfg.min_points {
        return Err(MixtureError::InsufficientData {
            needed: cfg.min_points,
            got: x.len(),
        });
    }
    let mut ks = cfg.k_range.clone();
    ks.sort_unstable();
    ks.dedup();
    ks.retain(|&k| k <= x.len());
    if ks.is_empty() {
        return Err(MixtureError::InsufficientData {
            needed: cfg.k_range.iter().copied().min().unwrap_or(1),
            got: x.len(),
        });
    }

    let mut fits = Vec::with_capacity(ks.len());
    let mut candidates = Vec::with_capacity(ks.len());
    for &k in &ks {
        let fit = MixtureFit::from_em(fit_em(x, k, cfg)?, deltas, x)?;
        candidates.push(Candidate {
            k,
            bic: fit.bic,
            log_likelihood: fit.log_likelihood,
            iterations: fit.iterations,
            converged: fit.converged,
        });
        fits.push(fit);
    }
    let best = choose_by_bic(&candidates).map(|i| fits.swap_remove(i));
    Ok(ModelSelection { best, candidates })
}

/// Convenience: log-transform and select in one step.
pub fn select_model_for_deltas(
    deltas: &[f64],
    cfg: &EmConfig,
) -> Result<ModelSelection, MixtureError> {
    let x = log_transform(deltas)?;
    select_model(&x, deltas, cfg)
}
