//! Course-level pipeline: ingest, per-user fits, estimates, thresholds and
//! the aggregates built on top of them.
//!
//! Per-user work runs on a rayon pool. Results are merged in user-id order,
//! so the number of workers never changes the output.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{estimate_user, time_on_task, EstimateError, TimeOnTaskEstimate};
use crate::ingest::{
    extract_intervals, parse_track_log, DropReason, DroppedUser, Extraction, FilterConfig,
    IntervalSeries, LogFormat, ParsedLog,
};
use crate::mixture::{
    lognormal_theoretical_means, select_model_for_deltas, Candidate, EmConfig, FitSummary,
    MixtureError, MixtureFit,
};
use crate::rng::derive_seed;
use crate::stats;
use crate::threshold::{
    aggregate_thresholds, effective_threshold, CohortSpec, CohortThreshold, ThresholdSolution,
};

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub format: LogFormat,
    pub filter: FilterConfig,
    /// `em.seed` is the global seed; every fit derives its own from it.
    pub em: EmConfig,
    /// Also fit each resource category separately.
    pub per_resource: bool,
    pub cohorts: CohortSpec,
    pub grades: Option<HashMap<String, f64>>,
    pub completion: Option<HashMap<String, bool>>,
    /// Worker threads; `None` uses rayon's default.
    pub jobs: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            format: LogFormat::default(),
            filter: FilterConfig::default(),
            em: EmConfig::default(),
            per_resource: false,
            cohorts: CohortSpec::global(),
            grades: None,
            completion: None,
            jobs: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.em
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CategoryOutcome {
    Fitted {
        fit: Box<FitSummary>,
        t: f64,
        threshold: ThresholdSolution,
    },
    Skipped {
        reason: DropReason,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryReport {
    pub category: String,
    pub n_intervals: usize,
    #[serde(flatten)]
    pub outcome: CategoryOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UserReport {
    pub user_id: String,
    pub estimate: TimeOnTaskEstimate,
    pub threshold: ThresholdSolution,
    pub fit: FitSummary,
    pub candidates: Vec<Candidate>,
    /// Closed-form log-normal means of the fitted components.
    pub theoretical_means: Vec<f64>,
    /// Time-on-task recomputed with the closed-form means.
    pub theoretical_t: Option<f64>,
    /// Whether the closed-form estimate overshoots the net time.
    pub theoretical_exceeds_net_time: bool,
    pub per_category: Vec<CategoryReport>,
}

/// A user who got through ingest but not through fitting or estimation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitFailure {
    pub user_id: String,
    pub reason: DropReason,
    pub n_intervals: usize,
    pub net_time: f64,
    pub fit: Option<FitSummary>,
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResourceSummary {
    pub n_users_fit: usize,
    pub n_users_skipped: usize,
    pub aggregate_gof: Option<f64>,
    pub thresholds: BTreeMap<String, CohortThreshold>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradeCorrelation {
    pub rho: Option<f64>,
    pub n_pairs: usize,
    pub n_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompleterComparison {
    /// `exp(mean ln T | completed − mean ln T | not completed)`.
    pub ratio: Option<f64>,
    pub log_gap: Option<f64>,
    pub n_completers: usize,
    pub n_non_completers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CourseReport {
    pub n_users_in: usize,
    pub n_users_fit: usize,
    pub n_users_dropped: usize,
    pub drop_counts: BTreeMap<String, usize>,
    pub malformed_rows: usize,
    pub aggregate_gof: Option<f64>,
    pub mean_on_task_ratio: Option<f64>,
    /// Users per selected component count.
    pub k_breakdown: BTreeMap<usize, usize>,
    pub thresholds: BTreeMap<String, CohortThreshold>,
    pub per_resource: Option<BTreeMap<String, ResourceSummary>>,
    pub grade_correlation: Option<GradeCorrelation>,
    pub completers: Option<CompleterComparison>,
    /// Sorted by user id.
    pub per_user: Vec<UserReport>,
    pub fit_failures: Vec<FitFailure>,
    /// Users removed during ingest.
    pub ingest_drops: Vec<DroppedUser>,
}

enum UserOutcome {
    Fitted(Box<UserReport>),
    Failed(Box<FitFailure>),
}

fn mixture_drop(e: &MixtureError) -> DropReason {
    match e {
        MixtureError::InsufficientData { .. } => DropReason::InsufficientData,
        // Positive intervals and consistent shapes are guaranteed upstream.
        _ => DropReason::InsufficientData,
    }
}

fn estimate_drop(e: EstimateError) -> DropReason {
    match e {
        EstimateError::CannotSplitOnOff => DropReason::SingleComponent,
        _ => DropReason::DegenerateWeights,
    }
}

/// Model selection with the seed derived for this user and category.
fn fit_series(
    series: &IntervalSeries,
    category: Option<&str>,
    em: &EmConfig,
) -> std::result::Result<(MixtureFit, Vec<Candidate>), (DropReason, Vec<Candidate>)> {
    let cfg = em.with_seed(derive_seed(em.seed, &series.user_id, category));
    let selection =
        select_model_for_deltas(&series.deltas, &cfg).map_err(|e| (mixture_drop(&e), vec![]))?;
    match selection.best {
        Some(fit) => Ok((fit, selection.candidates)),
        None => Err((DropReason::NoConvergence, selection.candidates)),
    }
}

fn fit_category(category: String, series: &IntervalSeries, em: &EmConfig) -> CategoryReport {
    let n = series.n();
    let skipped = |reason| CategoryReport {
        category: category.clone(),
        n_intervals: n,
        outcome: CategoryOutcome::Skipped { reason },
    };
    if n < em.min_points {
        return skipped(DropReason::InsufficientData);
    }
    let fit = match fit_series(series, Some(&category), em) {
        Ok((fit, _)) => fit,
        Err((reason, _)) => return skipped(reason),
    };
    let est = match estimate_user(series, &fit) {
        Ok(e) => e,
        Err(e) => return skipped(estimate_drop(e)),
    };
    let threshold = effective_threshold(&series.deltas, est.t).expect("non-empty, finite target");
    CategoryReport {
        category: category.clone(),
        n_intervals: n,
        outcome: CategoryOutcome::Fitted {
            fit: Box::new(fit.summary()),
            t: est.t,
            threshold,
        },
    }
}

fn process_user(series: &IntervalSeries, cfg: &PipelineConfig) -> UserOutcome {
    let fail = |reason, fit: Option<&MixtureFit>, candidates| {
        UserOutcome::Failed(Box::new(FitFailure {
            user_id: series.user_id.clone(),
            reason,
            n_intervals: series.n(),
            net_time: series.net_time,
            fit: fit.map(MixtureFit::summary),
            candidates,
        }))
    };
    let (fit, candidates) = match fit_series(series, None, &cfg.em) {
        Ok(v) => v,
        Err((reason, candidates)) => return fail(reason, None, candidates),
    };
    let estimate = match estimate_user(series, &fit) {
        Ok(e) => e,
        Err(e) => return fail(estimate_drop(e), Some(&fit), candidates),
    };
    let threshold =
        effective_threshold(&series.deltas, estimate.t).expect("non-empty, finite target");

    let theoretical_means = lognormal_theoretical_means(&fit.params);
    let k = fit.k();
    let on_w: f64 = fit.params.weights[..k - 1].iter().sum();
    let theoretical_t = (on_w > 0.0).then(|| {
        let s: f64 = (0..k - 1)
            .map(|j| fit.params.weights[j] * theoretical_means[j])
            .sum();
        series.n() as f64 * s / on_w
    });

    let per_category = if cfg.per_resource {
        series
            .stratify()
            .iter()
            .map(|(cat, sub)| fit_category(cat.to_string(), sub, &cfg.em))
            .collect()
    } else {
        Vec::new()
    };

    UserOutcome::Fitted(Box::new(UserReport {
        user_id: series.user_id.clone(),
        theoretical_exceeds_net_time: theoretical_t.is_some_and(|t| t > series.net_time),
        estimate,
        threshold,
        fit: fit.summary(),
        candidates,
        theoretical_means,
        theoretical_t,
        per_category,
    }))
}

/// `mean − sd` of the finite goodness-of-fit values; `None` below two.
pub fn aggregate_gof(gofs: &[f64]) -> Option<f64> {
    let finite: Vec<f64> = gofs.iter().copied().filter(|g| g.is_finite()).collect();
    if finite.len() < 2 {
        return None;
    }
    Some(stats::mean(&finite)? - stats::sample_std(&finite)?)
}

/// Pearson correlation of `ln T` with the grade over users that have both.
pub fn grade_correlation(
    estimates: &[TimeOnTaskEstimate],
    grades: &HashMap<String, f64>,
) -> GradeCorrelation {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut matched = 0usize;
    for e in estimates {
        match grades.get(&e.user_id) {
            Some(&g) if g.is_finite() && e.t > 0.0 && e.t.is_finite() => {
                xs.push(e.t.ln());
                ys.push(g);
            }
            Some(_) => {}
            None => continue,
        }
        matched += 1;
    }
    let unmatched_grades = grades.len() - matched;
    let n_excluded = estimates.len() - xs.len() + unmatched_grades;
    let rho = if xs.len() >= 3 {
        stats::pearson(&xs, &ys)
    } else {
        None
    };
    GradeCorrelation {
        rho,
        n_pairs: xs.len(),
        n_excluded,
    }
}

/// Ratio of geometric-mean time-on-task between completers and the rest.
pub fn completer_ratio(
    estimates: &[TimeOnTaskEstimate],
    completed: &HashMap<String, bool>,
) -> CompleterComparison {
    let mut yes = Vec::new();
    let mut no = Vec::new();
    for e in estimates {
        if !(e.t > 0.0 && e.t.is_finite()) {
            continue;
        }
        match completed.get(&e.user_id) {
            Some(true) => yes.push(e.t.ln()),
            Some(false) => no.push(e.t.ln()),
            None => {}
        }
    }
    let log_gap = match (stats::mean(&yes), stats::mean(&no)) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    CompleterComparison {
        ratio: log_gap.map(f64::exp),
        log_gap,
        n_completers: yes.len(),
        n_non_completers: no.len(),
    }
}

/// Combines per-course completer gaps with equal course weights: the
/// log-gaps are averaged before exponentiating.
pub fn cross_course_completer_ratio(courses: &[CompleterComparison]) -> Option<f64> {
    let gaps: Vec<f64> = courses.iter().filter_map(|c| c.log_gap).collect();
    stats::mean(&gaps).map(f64::exp)
}

/// Equal-weight average of a per-course statistic, skipping missing values.
pub fn cross_course_mean(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    stats::mean(&v)
}

fn run_parallel<T, F>(jobs: Option<usize>, f: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs everything after parsing.
pub fn run_on_log(log: &ParsedLog, cfg: &PipelineConfig) -> Result<CourseReport> {
    cfg.validate()?;
    let extraction = extract_intervals(&log.events, &cfg.filter);
    run_on_extraction(&extraction, log.malformed_rows, cfg)
}

pub fn run_on_extraction(
    extraction: &Extraction,
    malformed_rows: usize,
    cfg: &PipelineConfig,
) -> Result<CourseReport> {
    cfg.validate()?;
    let series: Vec<&IntervalSeries> = extraction.series.values().collect();
    let outcomes: Vec<UserOutcome> = run_parallel(cfg.jobs, || {
        series.par_iter().map(|s| process_user(s, cfg)).collect()
    })?;

    let mut per_user = Vec::new();
    let mut fit_failures = Vec::new();
    for o in outcomes {
        match o {
            UserOutcome::Fitted(r) => per_user.push(*r),
            UserOutcome::Failed(f) => fit_failures.push(*f),
        }
    }

    let mut drop_counts: BTreeMap<String, usize> = BTreeMap::new();
    for reason in extraction
        .dropped
        .iter()
        .map(|d| d.reason)
        .chain(fit_failures.iter().map(|f| f.reason))
    {
        *drop_counts.entry(reason.to_string()).or_default() += 1;
    }

    let gofs: Vec<f64> = per_user.iter().filter_map(|u| u.estimate.gof).collect();
    let ratios: Vec<f64> = per_user.iter().map(|u| u.estimate.on_task_ratio).collect();
    let mut k_breakdown = BTreeMap::new();
    for u in &per_user {
        *k_breakdown.entry(u.fit.k).or_default() += 1;
    }
    let thresholds = aggregate_thresholds(
        per_user.iter().map(|u| (u.user_id.as_str(), &u.threshold)),
        &cfg.cohorts,
    );
    let per_resource = cfg
        .per_resource
        .then(|| summarize_resources(&per_user, &cfg.cohorts));

    let estimates: Vec<TimeOnTaskEstimate> = per_user.iter().map(|u| u.estimate.clone()).collect();
    let grade_correlation = cfg
        .grades
        .as_ref()
        .map(|g| grade_correlation(&estimates, g));
    let completers = cfg
        .completion
        .as_ref()
        .map(|c| completer_ratio(&estimates, c));

    Ok(CourseReport {
        n_users_in: extraction.users_seen(),
        n_users_fit: per_user.len(),
        n_users_dropped: extraction.dropped.len() + fit_failures.len(),
        drop_counts,
        malformed_rows,
        aggregate_gof: aggregate_gof(&gofs),
        mean_on_task_ratio: stats::mean(&ratios),
        k_breakdown,
        thresholds,
        per_resource,
        grade_correlation,
        completers,
        per_user,
        fit_failures,
        ingest_drops: extraction.dropped.clone(),
    })
}

fn summarize_resources(
    per_user: &[UserReport],
    cohorts: &CohortSpec,
) -> BTreeMap<String, ResourceSummary> {
    struct Acc<'a> {
        gofs: Vec<f64>,
        solutions: Vec<(&'a str, &'a ThresholdSolution)>,
        skipped: usize,
    }
    let mut acc: BTreeMap<&str, Acc> = BTreeMap::new();
    for u in per_user {
        for c in &u.per_category {
            let a = acc.entry(c.category.as_str()).or_insert_with(|| Acc {
                gofs: Vec::new(),
                solutions: Vec::new(),
                skipped: 0,
            });
            match &c.outcome {
                CategoryOutcome::Fitted { fit, threshold, .. } => {
                    a.gofs.extend(fit.gof);
                    a.solutions.push((u.user_id.as_str(), threshold));
                }
                CategoryOutcome::Skipped { .. } => a.skipped += 1,
            }
        }
    }
    acc.into_iter()
        .map(|(cat, a)| {
            (
                cat.to_owned(),
                ResourceSummary {
                    n_users_fit: a.solutions.len(),
                    n_users_skipped: a.skipped,
                    aggregate_gof: aggregate_gof(&a.gofs),
                    thresholds: aggregate_thresholds(a.solutions.iter().copied(), cohorts),
                },
            )
        })
        .collect()
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads and parses a track log from disk.
pub fn read_track_log(path: &Path, format: &LogFormat) -> Result<ParsedLog> {
    let reader = open(path)?;
    parse_track_log(reader, format).map_err(|e| match e {
        crate::ingest::IngestError::Csv(c) if c.is_io_error() => match c.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Config(format!("{other:?}")),
        },
        other => other.into(),
    })
}

/// Full pipeline on a track log file.
pub fn run_pipeline(path: &Path, cfg: &PipelineConfig) -> Result<CourseReport> {
    cfg.validate()?;
    let log = read_track_log(path, &cfg.format)?;
    run_on_log(&log, cfg)
}

fn parse_flag(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" => Some(true),
        "0" | "false" | "no" | "n" => Some(false),
        _ => None,
    }
}

fn read_keyed<R: Read, T>(
    reader: R,
    value_col: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<HashMap<String, T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let user = headers.iter().position(|h| h == "user_id").unwrap_or(0);
    let value = headers
        .iter()
        .position(|h| h == value_col)
        .unwrap_or(if user == 0 { 1 } else { 0 });
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if let (Some(u), Some(v)) = (rec.get(user), rec.get(value).and_then(&parse)) {
            if !u.is_empty() {
                out.insert(u.to_owned(), v);
            }
        }
    }
    Ok(out)
}

/// `user_id,grade` table.
pub fn read_grades<R: Read>(reader: R) -> Result<HashMap<String, f64>> {
    read_keyed(reader, "grade", |s| {
        s.parse::<f64>().ok().filter(|g| g.is_finite())
    })
}

/// `user_id,completed` table; accepts true/false, yes/no and 1/0.
pub fn read_completion<R: Read>(reader: R) -> Result<HashMap<String, bool>> {
    read_keyed(reader, "completed", parse_flag)
}

pub fn read_grades_file(path: &Path) -> Result<HashMap<String, f64>> {
    read_grades(open(path)?)
}

pub fn read_completion_file(path: &Path) -> Result<HashMap<String, bool>> {
    read_completion(open(path)?)
}

pub fn read_cohort_file(path: &Path) -> Result<CohortSpec> {
    Ok(CohortSpec::from_reader(open(path)?)?)
}

fn fmt6(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row of the per-user estimate table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateRow {
    pub user_id: String,
    pub n_intervals: usize,
    pub net_time_s: f64,
    #[serde(rename = "T_s")]
    pub t_s: Option<f64>,
    #[serde(rename = "T_excluding_fast_s")]
    pub t_excluding_fast_s: Option<f64>,
    pub ratio: Option<f64>,
    #[serde(rename = "M_on_s")]
    pub m_on_s: Option<f64>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub gof: Option<f64>,
    pub converged: bool,
    pub drop_reason: Option<DropReason>,
}

impl CourseReport {
    /// Fitted users and fit-stage failures, ordered by user id.
    pub fn estimate_rows(&self) -> Vec<EstimateRow> {
        let mut rows: Vec<EstimateRow> = self
            .per_user
            .iter()
            .map(|u| EstimateRow {
                user_id: u.user_id.clone(),
                n_intervals: u.estimate.n_intervals,
                net_time_s: u.estimate.net_time,
                t_s: Some(u.estimate.t),
                t_excluding_fast_s: u.estimate.t_excluding_fast,
                ratio: Some(u.estimate.on_task_ratio),
                m_on_s: Some(u.estimate.m_on),
                k: Some(u.fit.k),
                gof: u.estimate.gof,
                converged: u.fit.converged,
                drop_reason: None,
            })
            .chain(self.fit_failures.iter().map(|f| EstimateRow {
                user_id: f.user_id.clone(),
                n_intervals: f.n_intervals,
                net_time_s: f.net_time,
                t_s: None,
                t_excluding_fast_s: None,
                ratio: None,
                m_on_s: None,
                k: f.fit.as_ref().map(|s| s.k),
                gof: f.fit.as_ref().and_then(|s| s.gof),
                converged: f.fit.as_ref().is_some_and(|s| s.converged),
                drop_reason: Some(f.reason),
            }))
            .collect();
        rows.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        rows
    }

    /// Per-user table as CSV with six decimals for times.
    pub fn write_estimate_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "user_id",
            "n_intervals",
            "net_time_s",
            "T_s",
            "T_excluding_fast_s",
            "ratio",
            "M_on_s",
            "K",
            "gof",
            "converged",
        ])?;
        for r in self.estimate_rows() {
            wtr.write_record([
                r.user_id,
                r.n_intervals.to_string(),
                format!("{:.6}", r.net_time_s),
                fmt6(r.t_s),
                fmt6(r.t_excluding_fast_s),
                fmt6(r.ratio),
                fmt6(r.m_on_s),
                r.k.map(|k| k.to_string()).unwrap_or_default(),
                fmt6(r.gof),
                r.converged.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<output>", e))?;
        Ok(())
    }

    pub fn threshold_rows(&self, per_resource: bool) -> Vec<ThresholdRow> {
        let mut rows: Vec<ThresholdRow> = self
            .thresholds
            .iter()
            .map(|(c, t)| ThresholdRow::new(c.clone(), t))
            .collect();
        if per_resource {
            for (cat, summary) in self.per_resource.iter().flatten() {
                for (c, t) in &summary.thresholds {
                    rows.push(ThresholdRow::new(format!("{c}:{cat}"), t));
                }
            }
        }
        rows
    }

    /// Deterministic JSON rendering of the whole report.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn fit_cache(&self) -> FitCache {
        let mut fits = Vec::new();
        for u in &self.per_user {
            fits.push(CachedFit {
                user_id: u.user_id.clone(),
                category: None,
                fit: u.fit.clone(),
            });
            for c in &u.per_category {
                if let CategoryOutcome::Fitted { fit, .. } = &c.outcome {
                    fits.push(CachedFit {
                        user_id: u.user_id.clone(),
                        category: Some(c.category.clone()),
                        fit: (**fit).clone(),
                    });
                }
            }
        }
        for f in &self.fit_failures {
            if let Some(fit) = &f.fit {
                fits.push(CachedFit {
                    user_id: f.user_id.clone(),
                    category: None,
                    fit: fit.clone(),
                });
            }
        }
        fits.sort_by(|a, b| (&a.user_id, &a.category).cmp(&(&b.user_id, &b.category)));
        FitCache { fits }
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or("n/a".to_owned(), |x| format!("{x:.6}"));
        let _ = writeln!(s, "users in:        {}", self.n_users_in);
        let _ = writeln!(s, "users fit:       {}", self.n_users_fit);
        let _ = writeln!(s, "users dropped:   {}", self.n_users_dropped);
        for (reason, n) in &self.drop_counts {
            let _ = writeln!(s, "  {reason}: {n}");
        }
        if self.malformed_rows > 0 {
            let _ = writeln!(s, "malformed rows:  {}", self.malformed_rows);
        }
        let _ = writeln!(s, "aggregate gof:   {}", opt(self.aggregate_gof));
        let _ = writeln!(s, "on-task ratio:   {}", opt(self.mean_on_task_ratio));
        for (k, n) in &self.k_breakdown {
            let _ = writeln!(s, "  K={k}: {n}");
        }
        for (cohort, t) in &self.thresholds {
            let _ = writeln!(
                s,
                "tau[{cohort}]: {} s ({} users, {} excluded)",
                opt(t.mean_tau),
                t.n_users,
                t.n_excluded
            );
        }
        if let Some(g) = &self.grade_correlation {
            let _ = writeln!(
                s,
                "corr(ln T, grade): {} over {} users",
                opt(g.rho),
                g.n_pairs
            );
        }
        if let Some(c) = &self.completers {
            let _ = writeln!(s, "completer ratio: {}", opt(c.ratio));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub cohort: String,
    pub mean_tau_seconds: Option<f64>,
    pub n_users: usize,
    pub n_excluded: usize,
}

impl ThresholdRow {
    fn new(cohort: String, t: &CohortThreshold) -> Self {
        ThresholdRow {
            cohort,
            mean_tau_seconds: t.mean_tau,
            n_users: t.n_users,
            n_excluded: t.n_excluded,
        }
    }
}

pub fn write_threshold_csv<W: Write>(writer: W, rows: &[ThresholdRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["cohort", "mean_tau_seconds", "n_users", "n_excluded"])?;
    for r in rows {
        wtr.write_record([
            r.cohort.clone(),
            fmt6(r.mean_tau_seconds),
            r.n_users.to_string(),
            r.n_excluded.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedFit {
    pub user_id: String,
    /// `None` for the pooled fit over all intervals.
    pub category: Option<String>,
    pub fit: FitSummary,
}

/// Fits saved between pipeline stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitCache {
    pub fits: Vec<CachedFit>,
}

impl FitCache {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(open(path)?)?)
    }

    fn lookup(&self) -> HashMap<(&str, Option<&str>), &FitSummary> {
        self.fits
            .iter()
            .map(|c| ((c.user_id.as_str(), c.category.as_deref()), &c.fit))
            .collect()
    }
}

/// Solves one user's threshold from a cached fit.
fn threshold_from_summary(series: &IntervalSeries, fit: &FitSummary) -> Option<ThresholdSolution> {
    if !fit.converged || fit.params.effective_components() < 2 {
        return None;
    }
    let t = time_on_task(&fit.params.weights, &fit.direct_means, series.n()).ok()?;
    effective_threshold(&series.deltas, t.total).ok()
}

/// Threshold table from previously cached fits and the intervals they were
/// fitted on; no EM is run. Users without a usable cached fit are skipped.
pub fn thresholds_from_cache(
    extraction: &Extraction,
    cache: &FitCache,
    cohorts: &CohortSpec,
    per_resource: bool,
) -> Vec<ThresholdRow> {
    let lookup = cache.lookup();
    let mut pooled = Vec::new();
    let mut by_cat: BTreeMap<String, Vec<(&str, ThresholdSolution)>> = BTreeMap::new();
    for (user, series) in &extraction.series {
        if let Some(sol) = lookup
            .get(&(user.as_str(), None))
            .and_then(|f| threshold_from_summary(series, f))
        {
            pooled.push((user.as_str(), sol));
        }
        if per_resource {
            for (cat, sub) in series.stratify() {
                let key = cat.to_string();
                if let Some(sol) = lookup
                    .get(&(user.as_str(), Some(key.as_str())))
                    .and_then(|f| threshold_from_summary(&sub, f))
                {
                    by_cat.entry(key).or_default().push((user.as_str(), sol));
                }
            }
        }
    }
    let mut rows: Vec<ThresholdRow> =
        aggregate_thresholds(pooled.iter().map(|(u, s)| (*u, s)), cohorts)
            .iter()
            .map(|(c, t)| ThresholdRow::new(c.clone(), t))
            .collect();
    for (cat, sols) in &by_cat {
        for (c, t) in aggregate_thresholds(sols.iter().map(|(u, s)| (*u, s)), cohorts) {
            rows.push(ThresholdRow::new(format!("{c}:{cat}"), &t));
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(user: &str, t: f64) -> TimeOnTaskEstimate {
        TimeOnTaskEstimate {
            user_id: user.into(),
            n_intervals: 10,
            t,
            t_excluding_fast: None,
            t_excluding_fast_unnormalized: None,
            net_time: 2.0 * t,
            on_task_ratio: 0.5,
            m_on: t / 10.0,
            k_used: 3,
            gof: Some(0.99),
        }
    }

    #[test]
    fn gof_aggregate() {
        assert_eq!(aggregate_gof(&[1.0, 1.0, 1.0]), Some(1.0));
        let g = aggregate_gof(&[0.9, 1.1]).unwrap();
        let sd = ((0.1f64 * 0.1 + 0.1 * 0.1) / 1.0).sqrt();
        assert!((g - (1.0 - sd)).abs() < 1e-12);
        assert!((g - 0.858_578_6).abs() < 1e-6);
        assert_eq!(aggregate_gof(&[0.99]), None);
        assert_eq!(aggregate_gof(&[0.99, f64::NAN]), None);
    }

    #[test]
    fn grades_linear_in_log_t() {
        let es: Vec<_> = [10.0, 20.0, 50.0, 400.0]
            .iter()
            .enumerate()
            .map(|(i, &t)| est(&format!("u{i}"), t))
            .collect();
        let grades: HashMap<String, f64> = es
            .iter()
            .map(|e| (e.user_id.clone(), 3.0 * e.t.ln() - 1.0))
            .collect();
        let g = grade_correlation(&es, &grades);
        assert!((g.rho.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(g.n_pairs, 4);
        assert_eq!(g.n_excluded, 0);

        let mut partial = grades.clone();
        partial.remove("u0");
        partial.insert("ghost".into(), 1.0);
        let g = grade_correlation(&es, &partial);
        assert_eq!(g.n_pairs, 3);
        assert_eq!(g.n_excluded, 2);

        partial.remove("u1");
        assert_eq!(grade_correlation(&es, &partial).rho, None);
    }

    #[test]
    fn completers() {
        let es = vec![
            est("a", 100.0),
            est("b", 100.0),
            est("c", 10.0),
            est("d", 10.0),
        ];
        let flags: HashMap<String, bool> = [("a", true), ("b", true), ("c", false), ("d", false)]
            .into_iter()
            .map(|(u, f)| (u.to_owned(), f))
            .collect();
        let c = completer_ratio(&es, &flags);
        assert!((c.ratio.unwrap() - 10.0).abs() < 1e-12);

        let same: HashMap<String, bool> = [("a", true), ("b", false)]
            .into_iter()
            .map(|(u, f)| (u.to_owned(), f))
            .collect();
        assert!((completer_ratio(&es, &same).ratio.unwrap() - 1.0).abs() < 1e-12);

        let only: HashMap<String, bool> = [("a".to_owned(), true)].into_iter().collect();
        assert_eq!(completer_ratio(&es, &only).ratio, None);

        let gap = |g: f64| CompleterComparison {
            ratio: Some(g.exp()),
            log_gap: Some(g),
            n_completers: 1,
            n_non_completers: 1,
        };
        let cross = cross_course_completer_ratio(&[gap(1.0), gap(3.0)]).unwrap();
        assert!((cross - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn side_tables() {
        let g = read_grades("user_id,grade\na,0.5\nb,x\nc,1\n".as_bytes()).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g["c"], 1.0);
        let c = read_completion("user_id,completed\na,true\nb,0\nc,maybe\n".as_bytes()).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c["a"]);
        assert!(!c["b"]);
    }

    #[test]
    fn cross_course_equal_weights() {
        assert_eq!(cross_course_mean(&[Some(1.0), None, Some(3.0)]), Some(2.0));
        assert_eq!(cross_course_mean(&[None]), None);
    }
}
