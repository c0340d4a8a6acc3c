mod common;

use std::collections::HashMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tot_core::mixture::EmConfig;
use tot_core::report::{
    completer_ratio, grade_correlation, read_grades, run_on_log, run_pipeline, CategoryOutcome,
    PipelineConfig,
};
use tot_core::synth::{generate, IntervalCount, LabelWeight};
use tot_core::TimeOnTaskEstimate;

use common::{three_component_spec, through_text};

fn fast_em() -> EmConfig {
    EmConfig {
        k_range: vec![3],
        ..EmConfig::default()
    }
}

fn fake_estimate(user_id: String, t: f64) -> TimeOnTaskEstimate {
    TimeOnTaskEstimate {
        user_id,
        n_intervals: 100,
        t,
        t_excluding_fast: None,
        t_excluding_fast_unnormalized: None,
        net_time: 2.0 * t,
        on_task_ratio: 0.5,
        m_on: t / 100.0,
        k_used: 3,
        gof: Some(0.999),
    }
}

#[test]
fn synthetic_course_fits_every_user() {
    let mut spec = three_component_spec(60, 41);
    spec.intervals_per_user = IntervalCount::Fixed(500);
    let course = generate(&spec).unwrap();
    let report = run_on_log(&through_text(&course.events), &PipelineConfig::default()).unwrap();
    assert_eq!(report.n_users_in, 60);
    assert_eq!(report.n_users_fit, 60, "drops: {:?}", report.drop_counts);
    assert!(
        report.aggregate_gof.unwrap() >= 0.99,
        "{:?}",
        report.aggregate_gof
    );
    let ratio = report.mean_on_task_ratio.unwrap();
    assert!(ratio > 0.0 && ratio < 1.0);
    assert!(report.thresholds["all"].mean_tau.is_some());
}

#[test]
fn empty_file_gives_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    std::fs::File::create(&path).unwrap();
    let report = run_pipeline(&path, &PipelineConfig::default()).unwrap();
    assert_eq!(report.n_users_in, 0);
    assert!(report.per_user.is_empty());
    assert_eq!(report.aggregate_gof, None);
}

#[test]
fn missing_timestamp_column_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "user_id,when,resource_type\nu1,1,video").unwrap();
    let err = run_pipeline(&path, &PipelineConfig::default()).unwrap_err();
    assert!(err.is_config(), "{err}");
    let missing =
        run_pipeline(&dir.path().join("nope.csv"), &PipelineConfig::default()).unwrap_err();
    assert!(!missing.is_config());
}

#[test]
fn malformed_rows_are_counted_not_fatal() {
    let mut spec = three_component_spec(2, 5);
    spec.intervals_per_user = IntervalCount::Fixed(100);
    let course = generate(&spec).unwrap();
    let mut buf = Vec::new();
    tot_core::ingest::write_track_log(&mut buf, &course.events, &Default::default()).unwrap();
    buf.extend_from_slice(b"user0000,not-a-time,video\n,12,video\n");
    let log = tot_core::ingest::parse_track_log(buf.as_slice(), &Default::default()).unwrap();
    assert_eq!(log.malformed_rows, 2);
    assert_eq!(log.events.len(), course.events.len());
}

#[test]
fn per_resource_totals_agree_with_the_pooled_fit() {
    let mut spec = three_component_spec(15, 77);
    spec.resource_labels = Some(vec![
        LabelWeight {
            label: "video".into(),
            weight: 0.5,
        },
        LabelWeight {
            label: "problem".into(),
            weight: 0.5,
        },
    ]);
    let course = generate(&spec).unwrap();
    let cfg = PipelineConfig {
        em: fast_em(),
        per_resource: true,
        ..PipelineConfig::default()
    };
    let report = run_on_log(&through_text(&course.events), &cfg).unwrap();
    assert_eq!(report.n_users_fit, 15);
    let resources = report.per_resource.as_ref().unwrap();
    let cats: Vec<&str> = resources.keys().map(String::as_str).collect();
    assert_eq!(cats, ["problem", "problem/video", "video"]);
    for u in &report.per_user {
        let parts: f64 = u
            .per_category
            .iter()
            .map(|c| match &c.outcome {
                CategoryOutcome::Fitted { t, .. } => *t,
                CategoryOutcome::Skipped { reason } => panic!("{} skipped: {reason:?}", c.category),
            })
            .sum();
        let rel = (parts - u.estimate.t).abs() / u.estimate.t;
        assert!(
            rel < 0.15,
            "{}: categories {parts} vs pooled {}",
            u.user_id,
            u.estimate.t
        );
    }
    let rows = report.threshold_rows(true);
    assert!(rows.iter().any(|r| r.cohort == "all:problem/video"));
}

#[test]
fn independent_grades_do_not_correlate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let estimates: Vec<_> = (0..1000)
        .map(|i| fake_estimate(format!("u{i}"), (8.0f64 + noise.sample(&mut rng)).exp()))
        .collect();
    let grades: HashMap<String, f64> = (0..1000)
        .map(|i| (format!("u{i}"), noise.sample(&mut rng)))
        .collect();
    let g = grade_correlation(&estimates, &grades);
    assert_eq!(g.n_pairs, 1000);
    assert!(g.rho.unwrap().abs() < 0.1, "{:?}", g.rho);
}

#[test]
fn grade_correlation_follows_true_time() {
    let mut spec = three_component_spec(40, 9);
    spec.intervals_per_user = IntervalCount::Range([200, 2000]);
    let course = generate(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = Normal::new(0.0, 0.6).unwrap();
    let mut csv = String::from("user_id,grade\n");
    let mut truth_x = Vec::new();
    let mut truth_y = Vec::new();
    for t in &course.truth {
        let g = t.expected_on_total.ln() + noise.sample(&mut rng);
        csv.push_str(&format!("{},{g}\n", t.user_id));
        truth_x.push(t.expected_on_total.ln());
        truth_y.push(g);
    }
    let grades = read_grades(csv.as_bytes()).unwrap();
    let cfg = PipelineConfig {
        em: fast_em(),
        grades: Some(grades),
        ..PipelineConfig::default()
    };
    let report = run_on_log(&through_text(&course.events), &cfg).unwrap();
    let fitted = report.grade_correlation.as_ref().unwrap();
    assert_eq!(fitted.n_pairs, 40);

    let mx = truth_x.iter().sum::<f64>() / 40.0;
    let my = truth_y.iter().sum::<f64>() / 40.0;
    let cov: f64 = truth_x
        .iter()
        .zip(&truth_y)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    let vx: f64 = truth_x.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = truth_y.iter().map(|y| (y - my).powi(2)).sum();
    let true_rho = cov / (vx * vy).sqrt();
    let rho = fitted.rho.unwrap();
    assert!(
        (rho - true_rho).abs() < 0.1,
        "fitted {rho} vs true {true_rho}"
    );
}

#[test]
fn completer_ratio_recovers_geometric_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.2).unwrap();
    let mut estimates = Vec::new();
    let mut completed = HashMap::new();
    let (mut log_yes, mut log_no) = (Vec::new(), Vec::new());
    for i in 0..1000 {
        let done = i % 2 == 0;
        let base = if done { 9.0 + 3.0f64.ln() } else { 9.0 };
        let ln_t = base + noise.sample(&mut rng);
        if done {
            log_yes.push(ln_t)
        } else {
            log_no.push(ln_t)
        }
        let id = format!("u{i}");
        estimates.push(fake_estimate(id.clone(), f64::exp(ln_t)));
        completed.insert(id, done);
    }
    let c = completer_ratio(&estimates, &completed);
    assert_eq!((c.n_completers, c.n_non_completers), (500, 500));
    let ratio = c.ratio.unwrap();
    let geo = (log_yes.iter().sum::<f64>() / 500.0 - log_no.iter().sum::<f64>() / 500.0).exp();
    assert!((ratio - geo).abs() < 1e-9 * geo);
    assert!((ratio / 3.0 - 1.0).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn worker_count_does_not_change_output() {
    let mut spec = three_component_spec(6, 13);
    spec.intervals_per_user = IntervalCount::Fixed(300);
    let log = through_text(&generate(&spec).unwrap().events);
    let mut cfg = PipelineConfig {
        em: fast_em(),
        ..PipelineConfig::default()
    };
    cfg.jobs = Some(1);
    let a = run_on_log(&log, &cfg).unwrap();
    cfg.jobs = Some(4);
    let b = run_on_log(&log, &cfg).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    a.write_estimate_csv(&mut csv_a).unwrap();
    b.write_estimate_csv(&mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
}
