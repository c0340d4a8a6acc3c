//! Oracles and generators shared by the integration suites. The oracles
//! are written from scratch; the `check_*` helpers compare library output
//! against them or against invariants.

#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tot_core::ingest::{
    extract_intervals, parse_track_log, write_track_log, ClickEvent, FilterConfig, LogFormat,
};
use tot_core::mixture::{self, EmConfig};
use tot_core::report::{run_on_log, PipelineConfig};
use tot_core::synth::{ComponentSpec, GeneratorSpec, IntervalCount, TaskLabel};
use tot_core::threshold::{
    effective_threshold, thresholded_estimate, SolutionCase, ThresholdEstimate,
};

/// The three-component corpus used by the acceptance criteria.
pub fn three_component_spec(n_users: usize, seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        n_users,
        intervals_per_user: IntervalCount::Fixed(2000),
        components: vec![
            ComponentSpec {
                weight: 0.2,
                mu: 1.0,
                sigma: 0.5,
                label: TaskLabel::On,
            },
            ComponentSpec {
                weight: 0.6,
                mu: 3.5,
                sigma: 0.7,
                label: TaskLabel::On,
            },
            ComponentSpec {
                weight: 0.2,
                mu: 7.0,
                sigma: 0.6,
                label: TaskLabel::Off,
            },
        ],
        start_time: 1_451_606_400.0,
        resource_labels: None,
        seed,
        user_prefix: "user".into(),
    }
}

/// Writes events through the real text format and reads them back.
pub fn through_text(events: &[ClickEvent]) -> tot_core::ParsedLog {
    let mut buf = Vec::new();
    write_track_log(&mut buf, events, &LogFormat::default()).unwrap();
    parse_track_log(buf.as_slice(), &LogFormat::default()).unwrap()
}

/// Thresholded estimate evaluated by a plain loop.
pub fn naive_thresholded(deltas: &[f64], tau: f64) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &d in deltas {
        if d < tau {
            sum += d;
            count += 1;
        }
    }
    (count > 0).then(|| deltas.len() as f64 * sum / count as f64)
}

/// Exhaustive shelf enumeration: evaluates F at both the right boundary
/// and an interior point of every shelf, then applies the resolution order
/// zero shelf, jump, none.
pub fn brute_force_threshold(deltas: &[f64], target: f64) -> (SolutionCase, Option<f64>) {
    let mut values = deltas.to_vec();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let atol = 1e-9 * target.abs().max(1.0);

    let mut points = Vec::new();
    let mut f = Vec::new();
    for j in 0..values.len() {
        let inner = match values.get(j + 1) {
            Some(&next) => (values[j] + next) / 2.0,
            None => values[j].next_up(),
        };
        let at_inner = naive_thresholded(deltas, inner).unwrap() - target;
        if let Some(&next) = values.get(j + 1) {
            // right boundary belongs to the same shelf under strict <
            let at_boundary = naive_thresholded(deltas, next).unwrap() - target;
            assert_eq!(at_inner, at_boundary, "shelf is not constant");
        }
        points.push(inner);
        f.push(at_inner);
    }
    if let Some(j) = f.iter().position(|v| v.abs() <= atol) {
        return (SolutionCase::ZeroShelf, Some(points[j]));
    }
    for j in 0..f.len().saturating_sub(1) {
        if f[j] < 0.0 && f[j + 1] > 0.0 {
            return (SolutionCase::Jump, Some(values[j + 1]));
        }
    }
    (SolutionCase::None, None)
}

/// Random small solver instance: 3–50 intervals, sometimes with heavy
/// duplication, and a target that is sometimes exactly a shelf value.
pub fn threshold_instance() -> impl Strategy<Value = (Vec<f64>, f64)> {
    let deltas = prop_oneof![
        prop::collection::vec(0.1f64..500.0, 3..=50),
        prop::collection::vec((1u32..8).prop_map(f64::from), 3..=50),
    ];
    (
        deltas,
        0.0f64..=1.0,
        any::<bool>(),
        any::<prop::sample::Index>(),
    )
        .prop_map(|(deltas, frac, on_shelf, idx)| {
            let net: f64 = deltas.iter().sum();
            let target = if on_shelf {
                let mut sorted = deltas.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let j = idx.index(sorted.len());
                naive_thresholded(&deltas, sorted[j].next_up()).unwrap()
            } else {
                frac * net
            };
            (deltas, target)
        })
}

pub fn check_solver_against_oracle(deltas: &[f64], target: f64) -> Result<(), TestCaseError> {
    let sol = effective_threshold(deltas, target).unwrap();
    let (case, tau) = brute_force_threshold(deltas, target);
    prop_assert_eq!(sol.case, case, "deltas {:?} target {}", deltas, target);
    prop_assert_eq!(sol.tau, tau);
    Ok(())
}

/// Positive intervals drawn log-normally.
pub fn deltas_strategy(min: usize, max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..8.0, min..=max)
        .prop_map(|v| v.into_iter().map(f64::exp).collect())
}

pub fn check_thresholded_monotone_and_shelves(
    deltas: &[f64],
    taus: &[f64],
) -> Result<(), TestCaseError> {
    let mut taus = taus.to_vec();
    taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut prev: Option<f64> = None;
    for &tau in &taus {
        if let ThresholdEstimate::Value(v) = thresholded_estimate(deltas, tau).unwrap() {
            if let Some(p) = prev {
                prop_assert!(v >= p * (1.0 - 1e-12), "T′ decreased: {} -> {}", p, v);
            }
            prev = Some(v);
        }
    }
    let mut sorted = deltas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    for w in sorted.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let a = thresholded_estimate(deltas, lo + 0.25 * (hi - lo)).unwrap();
        let b = thresholded_estimate(deltas, hi).unwrap();
        prop_assert_eq!(a, b, "not constant on ({}, {}]", lo, hi);
    }
    let top = *sorted.last().unwrap();
    let net: f64 = deltas.iter().sum();
    let v = thresholded_estimate(deltas, top * 2.0)
        .unwrap()
        .value()
        .unwrap();
    prop_assert!((v - net).abs() <= 1e-9 * net);
    Ok(())
}

/// Samples from a two-component log-normal mixture; returns intervals.
pub fn two_component_deltas(n: usize, seed: u64, gap: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = Normal::new(1.0, 0.5).unwrap();
    let hi = Normal::new(1.0 + gap, 0.6).unwrap();
    (0..n)
        .map(|i| {
            if i % 3 == 0 {
                hi.sample(&mut rng)
            } else {
                lo.sample(&mut rng)
            }
            .exp()
        })
        .collect()
}

pub fn small_em() -> EmConfig {
    EmConfig {
        min_points: 5,
        ..EmConfig::default()
    }
}

pub fn check_em_monotone_and_normalized(
    deltas: &[f64],
    k: usize,
    seed: u64,
) -> Result<(), TestCaseError> {
    let x = mixture::log_transform(deltas).unwrap();
    let cfg = small_em().with_seed(seed);
    let fit = mixture::fit_em(&x, k, &cfg).unwrap();
    for w in fit.trace.windows(2) {
        prop_assert!(
            w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0),
            "log-likelihood fell: {} -> {}",
            w[0],
            w[1]
        );
    }
    let m = &fit.memberships;
    for i in 0..m.rows() {
        let row = m.row(i);
        prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    let wsum: f64 = fit.params.weights.iter().sum();
    prop_assert!((wsum - 1.0).abs() <= 1e-9);
    prop_assert!(fit.params.stds.iter().all(|&s| s >= cfg.sigma_floor));
    Ok(())
}

pub fn check_t_below_net_time(deltas: &[f64], seed: u64) -> Result<(), TestCaseError> {
    let cfg = EmConfig {
        k_range: vec![2, 3],
        ..small_em().with_seed(seed)
    };
    let sel = mixture::select_model_for_deltas(deltas, &cfg).unwrap();
    let Some(fit) = sel.best else { return Ok(()) };
    let series = tot_core::IntervalSeries::uncategorized("u", deltas.to_vec());
    match tot_core::estimate::estimate_user(&series, &fit) {
        Ok(e) => {
            prop_assert!(e.t >= 0.0);
            prop_assert!(
                e.t <= series.net_time + 1e-6,
                "T {} > net {}",
                e.t,
                series.net_time
            );
            prop_assert!(e.on_task_ratio <= 1.0 + 1e-9);
            prop_assert!((e.m_on * e.n_intervals as f64 - e.t).abs() <= 1e-9 * e.t.max(1.0));
        }
        Err(err) => prop_assert_ne!(err, tot_core::EstimateError::Unordered),
    }
    Ok(())
}

pub fn check_scale_equivariance(deltas: &[f64], c: f64, seed: u64) -> Result<(), TestCaseError> {
    let cfg = EmConfig {
        k_range: vec![2],
        ..small_em().with_seed(seed)
    };
    let scaled: Vec<f64> = deltas.iter().map(|d| d * c).collect();
    let a = mixture::select_model_for_deltas(deltas, &cfg).unwrap().best;
    let b = mixture::select_model_for_deltas(&scaled, &cfg)
        .unwrap()
        .best;
    let (a, b) = match (a, b) {
        (Some(a), Some(b)) => (a, b),
        (None, None) => return Ok(()),
        (a, b) => {
            return Err(TestCaseError::fail(format!(
                "convergence differs under scaling: {} vs {}",
                a.is_some(),
                b.is_some()
            )))
        }
    };
    let shift = c.ln();
    for j in 0..a.k() {
        prop_assert!(
            (b.params.means[j] - a.params.means[j] - shift).abs() < 1e-4,
            "mu {:?} vs {:?} shift {}",
            a.params.means,
            b.params.means,
            shift
        );
        prop_assert!((b.params.stds[j] - a.params.stds[j]).abs() < 1e-4);
        prop_assert!((b.params.weights[j] - a.params.weights[j]).abs() < 1e-4);
        let rel = (b.direct_means[j] - c * a.direct_means[j]).abs() / (c * a.direct_means[j]);
        prop_assert!(
            rel < 1e-4,
            "m_k not scaled: {} vs {}",
            b.direct_means[j],
            c * a.direct_means[j]
        );
    }
    Ok(())
}

/// A tiny course as raw events: a few users with a handful of clicks.
pub fn small_course() -> impl Strategy<Value = Vec<ClickEvent>> {
    let user = (
        0u8..4,
        prop::collection::vec((0.05f64..300.0, 0u8..3), 18..40),
    );
    prop::collection::vec(user, 1..4).prop_map(|users| {
        let labels = ["video", "problem", "html"];
        let mut events = Vec::new();
        for (uid, gaps) in users {
            let mut t = 1_000.0;
            for (g, l) in gaps {
                t += g;
                events.push(ClickEvent {
                    user_id: format!("u{uid}"),
                    timestamp: t,
                    resource_type: Some(labels[l as usize].to_owned()),
                });
            }
        }
        events
    })
}

pub fn check_pipeline_determinism(events: &[ClickEvent], seed: u64) -> Result<(), TestCaseError> {
    let log = through_text(events);
    let mut cfg = PipelineConfig {
        filter: FilterConfig {
            min_clicks: 10,
            ..FilterConfig::default()
        },
        per_resource: true,
        ..PipelineConfig::default()
    };
    cfg.em.seed = seed;
    cfg.em.max_iterations = 200;
    cfg.jobs = Some(1);
    let a = run_on_log(&log, &cfg).unwrap().to_json().unwrap();
    cfg.jobs = Some(3);
    let b = run_on_log(&log, &cfg).unwrap().to_json().unwrap();
    prop_assert_eq!(a, b);
    Ok(())
}

pub fn check_extraction_invariants(
    events: &[ClickEvent],
    shuffle_seed: u64,
) -> Result<(), TestCaseError> {
    use rand::seq::SliceRandom;
    let cfg = FilterConfig {
        min_clicks: 5,
        min_interval: 0.1,
        max_interval: 200.0,
    };
    let out = extract_intervals(events, &cfg);
    let mut shuffled = events.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    prop_assert_eq!(&extract_intervals(&shuffled, &cfg).series, &out.series);
    let total: usize = out.series.values().map(|s| s.n()).sum();
    prop_assert!(total <= events.len().saturating_sub(out.series.len()));
    for s in out.series.values() {
        prop_assert!(s.deltas.iter().all(|&d| (0.1..=200.0).contains(&d)));
        prop_assert_eq!(s.deltas.len(), s.categories.len());
        let sum: f64 = s.deltas.iter().sum();
        prop_assert!((s.net_time - sum).abs() <= 1e-12 * sum.max(1.0));
    }
    Ok(())
}
