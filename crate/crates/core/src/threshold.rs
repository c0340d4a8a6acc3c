//! Thresholded time-on-task and the effective-threshold solver.
//!
//! `T′(τ) = N · mean{Δ_i : Δ_i < τ}` is a step function of τ: constant on
//! every shelf `(v_j, v_{j+1}]` between consecutive distinct intervals and
//! non-decreasing from shelf to shelf. The solver therefore works on the
//! finite list of shelves instead of running a continuous root finder.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThresholdError {
    #[error("no intervals to threshold")]
    EmptyDeltas,
    #[error("threshold must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("target time-on-task must be finite, got {0}")]
    InvalidTarget(f64),
}

/// Value of the thresholded estimate at one τ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdEstimate {
    Value(f64),
    /// No interval is shorter than τ.
    BelowSupport,
}

impl ThresholdEstimate {
    pub fn value(self) -> Option<f64> {
        match self {
            ThresholdEstimate::Value(v) => Some(v),
            ThresholdEstimate::BelowSupport => None,
        }
    }
}

/// `N · Σ Δ_i 1[Δ_i < τ] / Σ 1[Δ_i < τ]`.
pub fn thresholded_estimate(deltas: &[f64], tau: f64) -> Result<ThresholdEstimate, ThresholdError> {
    if deltas.is_empty() {
        return Err(ThresholdError::EmptyDeltas);
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ThresholdError::InvalidTau(tau));
    }
    let (sum, count) = deltas
        .iter()
        .filter(|&&d| d < tau)
        .fold((0.0, 0usize), |(s, c), &d| (s + d, c + 1));
    if count == 0 {
        return Ok(ThresholdEstimate::BelowSupport);
    }
    Ok(ThresholdEstimate::Value(
        deltas.len() as f64 * (sum / count as f64),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionCase {
    /// F jumps from negative to positive at τ.
    Jump,
    /// F is zero on a whole shelf; τ is its midpoint.
    ZeroShelf,
    /// F never reaches zero.
    None,
}

impl SolutionCase {
    pub fn as_str(self) -> &'static str {
        match self {
            SolutionCase::Jump => "jump",
            SolutionCase::ZeroShelf => "zero_shelf",
            SolutionCase::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThresholdSolution {
    pub tau: Option<f64>,
    pub case: SolutionCase,
    /// F just below τ.
    pub f_left: Option<f64>,
    /// F just above τ.
    pub f_right: Option<f64>,
    pub shelf_bounds: Option<(f64, f64)>,
}

impl ThresholdSolution {
    fn none() -> Self {
        ThresholdSolution {
            tau: None,
            case: SolutionCase::None,
            f_left: None,
            f_right: None,
            shelf_bounds: None,
        }
    }
}

/// Absolute tolerance for calling a shelf zero.
pub fn zero_tolerance(target: f64) -> f64 {
    1e-9 * target.abs().max(1.0)
}

/// A shelf `(lo, hi]` with the thresholded estimate it carries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shelf {
    pub lo: f64,
    /// `None` for the unbounded top shelf.
    pub hi: Option<f64>,
    pub value: f64,
}

impl Shelf {
    /// A representative τ strictly inside the shelf. The top shelf has no
    /// upper bound, so the first value above its lower bound is used.
    pub fn midpoint(&self) -> f64 {
        match self.hi {
            Some(hi) => 0.5 * (self.lo + hi),
            None => self.lo.next_up(),
        }
    }
}

/// Shelves of `T′` over the sorted distinct interval values, lowest first.
/// τ at or below the smallest interval is outside the domain.
pub fn shelves(deltas: &[f64]) -> Vec<Shelf> {
    let mut sorted = deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out = Vec::new();
    let mut prefix = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        while i < sorted.len() && sorted[i] == v {
            prefix += sorted[i];
            i += 1;
        }
        out.push(Shelf {
            lo: v,
            hi: sorted.get(i).copied(),
            value: n * (prefix / i as f64),
        });
    }
    out
}

/// Solves `T′(τ) = target` on the shelves of `T′`.
///
/// A zero shelf wins over a jump. A jump returns the interval value that
/// separates the negative shelf from the positive one; `T′` evaluated there
/// still belongs to the negative side because selection uses `Δ < τ`.
pub fn effective_threshold(
    deltas: &[f64],
    target: f64,
) -> Result<ThresholdSolution, ThresholdError> {
    if deltas.is_empty() {
        return Err(ThresholdError::EmptyDeltas);
    }
    if !target.is_finite() {
        return Err(ThresholdError::InvalidTarget(target));
    }
    let atol = zero_tolerance(target);
    let shelves = shelves(deltas);
    let f: Vec<f64> = shelves.iter().map(|s| s.value - target).collect();

    if let Some(j) = f.iter().position(|v| v.abs() <= atol) {
        let s = shelves[j];
        let tau = s.midpoint();
        return Ok(ThresholdSolution {
            tau: Some(tau),
            case: SolutionCase::ZeroShelf,
            f_left: Some(f[j]),
            f_right: Some(f[j]),
            shelf_bounds: Some((s.lo, s.hi.unwrap_or(s.lo))),
        });
    }
    for j in 0..f.len().saturating_sub(1) {
        if f[j] < 0.0 && f[j + 1] > 0.0 {
            return Ok(ThresholdSolution {
                tau: Some(shelves[j + 1].lo),
                case: SolutionCase::Jump,
                f_left: Some(f[j]),
                f_right: Some(f[j + 1]),
                shelf_bounds: None,
            });
        }
    }
    Ok(ThresholdSolution::none())
}

/// Assignment of users to cohorts. Users without an entry fall into the
/// default cohort.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CohortSpec {
    labels: HashMap<String, String>,
    default_label: String,
}

pub const GLOBAL_COHORT: &str = "all";
pub const UNASSIGNED_COHORT: &str = "unassigned";

impl CohortSpec {
    /// Everyone in one cohort.
    pub fn global() -> Self {
        CohortSpec {
            labels: HashMap::new(),
            default_label: GLOBAL_COHORT.to_owned(),
        }
    }

    pub fn from_labels(labels: HashMap<String, String>) -> Self {
        CohortSpec {
            labels,
            default_label: UNASSIGNED_COHORT.to_owned(),
        }
    }

    /// Reads a two-column `user_id,label` table with a header row.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, csv::Error> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut labels = HashMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            if let (Some(u), Some(l)) = (rec.get(0), rec.get(1)) {
                if !u.is_empty() {
                    labels.insert(u.to_owned(), l.to_owned());
                }
            }
        }
        Ok(Self::from_labels(labels))
    }

    pub fn label(&self, user_id: &str) -> &str {
        self.labels
            .get(user_id)
            .map_or(self.default_label.as_str(), String::as_str)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CohortThreshold {
    /// Mean τ over users with a solution; `None` if there are none.
    pub mean_tau: Option<f64>,
    pub n_users: usize,
    /// Users whose solver returned no τ.
    pub n_excluded: usize,
}

/// Per-cohort arithmetic mean of the users' effective thresholds.
pub fn aggregate_thresholds<'a, I>(
    solutions: I,
    cohorts: &CohortSpec,
) -> BTreeMap<String, CohortThreshold>
where
    I: IntoIterator<Item = (&'a str, &'a ThresholdSolution)>,
{
    let mut acc: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (user, sol) in solutions {
        let entry = acc.entry(cohorts.label(user).to_owned()).or_default();
        match sol.tau {
            Some(t) if sol.case != SolutionCase::None => entry.0.push(t),
            _ => entry.1 += 1,
        }
    }
    acc.into_iter()
        .map(|(label, (taus, excluded))| {
            (
                label,
                CohortThreshold {
                    mean_tau: crate::stats::mean(&taus),
                    n_users: taus.len(),
                    n_excluded: excluded,
                },
            )
        })
        .collect()
}
