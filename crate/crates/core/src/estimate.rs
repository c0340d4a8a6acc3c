//! Per-user time-on-task from an ordered mixture fit.
//!
//! All components except the last (largest direct mean) are entirely on
//! task. The mean on-task interval `M_on` is their weight-averaged direct
//! mean and the estimate is `T = N · M_on`: every interval, including the
//! off-task ones, is credited with one on-task stretch of expected length
//! `M_on`.

use serde::Serialize;
use thiserror::Error;

use crate::ingest::IntervalSeries;
use crate::mixture::{MixtureFit, EMPTY_COMPONENT_MASS};
use crate::stats;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum EstimateError {
    /// A single effective component leaves nothing to call off-task.
    #[error("cannot_split_on_off: the fit has a single effective component")]
    CannotSplitOnOff,
    #[error("degenerate_weights: on-task components carry no weight")]
    DegenerateWeights,
    #[error("no_middle_components: need at least three components")]
    NoMiddleComponents,
    #[error("components are not ordered by increasing direct mean")]
    Unordered,
    #[error("weights and direct means differ in length")]
    DimensionMismatch,
}

/// Weighted mean of `means[range]` with `weights[range]`.
fn weighted_mean(weights: &[f64], means: &[f64]) -> Option<f64> {
    let w: f64 = weights.iter().sum();
    if w < EMPTY_COMPONENT_MASS {
        return None;
    }
    Some(weights.iter().zip(means).map(|(a, m)| a * m).sum::<f64>() / w)
}

fn check_ordered(weights: &[f64], means: &[f64]) -> Result<(), EstimateError> {
    if weights.len() != means.len() {
        return Err(EstimateError::DimensionMismatch);
    }
    if means.windows(2).any(|w| w[0] > w[1]) {
        return Err(EstimateError::Unordered);
    }
    Ok(())
}

/// Mean on-task interval and total time-on-task for `n` intervals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OnTaskTime {
    pub m_on: f64,
    pub total: f64,
}

/// `M_on = Σ_{k<K} a_k m_k / Σ_{k<K} a_k`, `T = n · M_on`.
///
/// `weights` and `direct_means` must already be ordered by increasing mean.
pub fn time_on_task(
    weights: &[f64],
    direct_means: &[f64],
    n: usize,
) -> Result<OnTaskTime, EstimateError> {
    check_ordered(weights, direct_means)?;
    let k = weights.len();
    if k < 2 {
        return Err(EstimateError::CannotSplitOnOff);
    }
    let m_on = weighted_mean(&weights[..k - 1], &direct_means[..k - 1])
        .ok_or(EstimateError::DegenerateWeights)?;
    Ok(OnTaskTime {
        m_on,
        total: n as f64 * m_on,
    })
}

/// Time-on-task with the fastest component removed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExcludingFast {
    /// `(n − Σ_i p_i1) · Σ_{k=2}^{K−1} a_k m_k / Σ_{k=2}^{K−1} a_k`.
    pub total: f64,
    /// Same without the weight normalization.
    pub unnormalized: f64,
}

/// Variant that does not count the fastest component (click-through
/// behaviour) as time on task. `fast_mass` is `Σ_i p_i1`.
pub fn time_on_task_excluding_fast(
    weights: &[f64],
    direct_means: &[f64],
    fast_mass: f64,
    n: usize,
) -> Result<ExcludingFast, EstimateError> {
    check_ordered(weights, direct_means)?;
    let k = weights.len();
    if k < 3 {
        return Err(EstimateError::NoMiddleComponents);
    }
    let effective_n = n as f64 - fast_mass;
    let middle_w = &weights[1..k - 1];
    let middle_m = &direct_means[1..k - 1];
    let mean = weighted_mean(middle_w, middle_m).ok_or(EstimateError::DegenerateWeights)?;
    let raw: f64 = middle_w.iter().zip(middle_m).map(|(a, m)| a * m).sum();
    Ok(ExcludingFast {
        total: effective_n * mean,
        unnormalized: effective_n * raw,
    })
}

/// Sum of the retained intervals.
pub fn net_time(series: &IntervalSeries) -> f64 {
    stats::sum(&series.deltas)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimeOnTaskEstimate {
    pub user_id: String,
    pub n_intervals: usize,
    /// Seconds.
    pub t: f64,
    pub t_excluding_fast: Option<f64>,
    pub t_excluding_fast_unnormalized: Option<f64>,
    pub net_time: f64,
    pub on_task_ratio: f64,
    /// Mean entirely-on-task interval, seconds.
    pub m_on: f64,
    pub k_used: usize,
    pub gof: Option<f64>,
}

/// Full per-user estimate from a converged, ordered fit of `series`.
pub fn estimate_user(
    series: &IntervalSeries,
    fit: &MixtureFit,
) -> Result<TimeOnTaskEstimate, EstimateError> {
    if fit.params.effective_components() < 2 {
        return Err(EstimateError::CannotSplitOnOff);
    }
    let n = series.n();
    let core = time_on_task(&fit.params.weights, &fit.direct_means, n)?;
    let fast = if fit.k() >= 3 {
        time_on_task_excluding_fast(
            &fit.params.weights,
            &fit.direct_means,
            fit.memberships.column_sum(0),
            n,
        )
        .ok()
    } else {
        None
    };
    let net = net_time(series);
    Ok(TimeOnTaskEstimate {
        user_id: series.user_id.clone(),
        n_intervals: n,
        t: core.total,
        t_excluding_fast: fast.map(|f| f.total),
        t_excluding_fast_unnormalized: fast.map(|f| f.unnormalized),
        net_time: net,
        on_task_ratio: if net > 0.0 { core.total / net } else { 0.0 },
        m_on: core.m_on,
        k_used: fit.k(),
        gof: fit.gof,
    })
}
