//! Fixtures shared by the benchmarks.

use tot_core::synth::{generate, ComponentSpec, GeneratorSpec, IntervalCount, TaskLabel};
use tot_core::ClickEvent;

pub fn course_spec(n_users: usize, intervals: usize) -> GeneratorSpec {
    GeneratorSpec {
        n_users,
        intervals_per_user: IntervalCount::Fixed(intervals),
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
        seed: 1,
        user_prefix: "user".into(),
    }
}

/// Intervals of one synthetic user.
pub fn user_deltas(intervals: usize) -> Vec<f64> {
    let course = generate(&course_spec(1, intervals)).expect("valid spec");
    course.truth[0].intervals.iter().map(|i| i.delta).collect()
}

pub fn course_events(n_users: usize, intervals: usize) -> Vec<ClickEvent> {
    generate(&course_spec(n_users, intervals))
        .expect("valid spec")
        .events
}
