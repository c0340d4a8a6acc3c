//! Synthetic track logs drawn from a known log-normal mixture.
//!
//! Every interval keeps the component it came from and whether that
//! component is labelled on- or off-task, so estimators can be scored
//! against ground truth.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::ClickEvent;
use crate::rng::{seeded_rng, stream_seed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskLabel {
    On,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    /// Mean of `ln Δ`, log-seconds.
    pub mu: f64,
    /// Standard deviation of `ln Δ`, log-seconds.
    pub sigma: f64,
    pub label: TaskLabel,
}

impl ComponentSpec {
    /// `exp(μ + σ²/2)`.
    pub fn mean_interval(&self) -> f64 {
        (self.mu + 0.5 * self.sigma * self.sigma).exp()
    }
}

/// Either a fixed count or an inclusive `[min, max]` range drawn uniformly
/// per user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IntervalCount {
    Fixed(usize),
    Range([usize; 2]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelWeight {
    pub label: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_users: usize,
    pub intervals_per_user: IntervalCount,
    pub components: Vec<ComponentSpec>,
    #[serde(default = "default_start_time")]
    pub start_time: f64,
    #[serde(default)]
    pub resource_labels: Option<Vec<LabelWeight>>,
    #[serde(default)]
    pub seed: u64,
    /// Prefix for generated user ids.
    #[serde(default = "default_user_prefix")]
    pub user_prefix: String,
}

fn default_start_time() -> f64 {
    1_451_606_400.0
}

fn default_user_prefix() -> String {
    "user".to_owned()
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.components.is_empty() {
            return bad("at least one component is required".into());
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("component weights sum to {total}, not 1"));
        }
        for (i, c) in self.components.iter().enumerate() {
            let sigma_ok = c.sigma.is_finite() && c.sigma > 0.0;
            if c.weight.is_nan() || c.weight < 0.0 || !c.mu.is_finite() || !sigma_ok {
                return bad(format!("component {i} has invalid parameters"));
            }
        }
        match self.intervals_per_user {
            IntervalCount::Fixed(0) => return bad("intervals_per_user must be positive".into()),
            IntervalCount::Range([lo, hi]) if lo == 0 || lo > hi => {
                return bad(format!("interval range [{lo}, {hi}] is invalid"))
            }
            _ => {}
        }
        if !(self.start_time >= 0.0 && self.start_time.is_finite()) {
            return bad("start_time must be a non-negative epoch time".into());
        }
        if let Some(labels) = &self.resource_labels {
            if labels.is_empty()
                || labels
                    .iter()
                    .any(|l| l.label.is_empty() || l.weight.is_nan() || l.weight < 0.0)
                || labels.iter().map(|l| l.weight).sum::<f64>() <= 0.0
            {
                return bad(
                    "resource_labels need non-empty names and positive total weight".into(),
                );
            }
        }
        Ok(())
    }

    /// Estimator tests need something to call on-task and something to call
    /// off-task.
    pub fn require_on_and_off(&self) -> Result<(), SynthError> {
        let has = |l| {
            self.components
                .iter()
                .any(|c| c.label == l && c.weight > 0.0)
        };
        if has(TaskLabel::On) && has(TaskLabel::Off) {
            Ok(())
        } else {
            Err(SynthError::InvalidSpec(
                "need at least one on-task and one off-task component".into(),
            ))
        }
    }

    /// `E[Δ | on-task component]`.
    pub fn expected_on_mean(&self) -> Option<f64> {
        let on = self.components.iter().filter(|c| c.label == TaskLabel::On);
        let (w, wm) = on.fold((0.0, 0.0), |(w, wm), c| {
            (w + c.weight, wm + c.weight * c.mean_interval())
        });
        (w > 0.0).then(|| wm / w)
    }

    pub fn user_id(&self, index: usize) -> String {
        let width = self.n_users.max(1).to_string().len().max(4);
        format!("{}{:0width$}", self.user_prefix, index, width = width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntervalTruth {
    /// Seconds; the exact difference of the two written timestamps.
    pub delta: f64,
    pub component: usize,
    pub label: TaskLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UserTruth {
    pub user_id: String,
    pub n_intervals: usize,
    /// `n · E[Δ | on]`.
    pub expected_on_total: f64,
    /// Sum of the intervals that came from on-task components.
    pub realized_on_sum: f64,
    /// Realized on-task sum plus `E[Δ | on]` for every off-task interval.
    pub realized_with_off_credit: f64,
    pub intervals: Vec<IntervalTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCourse {
    pub events: Vec<ClickEvent>,
    pub truth: Vec<UserTruth>,
}

/// Draws a course. Each user has an independent RNG stream derived from the
/// spec seed and the user index.
pub fn generate(spec: &GeneratorSpec) -> Result<SyntheticCourse, SynthError> {
    spec.validate()?;
    let weights: Vec<f64> = spec.components.iter().map(|c| c.weight).collect();
    let picker = WeightedIndex::new(&weights)
        .map_err(|e| SynthError::InvalidSpec(format!("component weights: {e}")))?;
    let normals: Vec<Normal<f64>> = spec
        .components
        .iter()
        .map(|c| Normal::new(c.mu, c.sigma).expect("validated sigma"))
        .collect();
    let label_picker = match &spec.resource_labels {
        Some(labels) => Some(
            WeightedIndex::new(labels.iter().map(|l| l.weight))
                .map_err(|e| SynthError::InvalidSpec(format!("resource weights: {e}")))?,
        ),
        None => None,
    };
    let on_mean = spec.expected_on_mean().unwrap_or(0.0);

    let mut events = Vec::new();
    let mut truth = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let mut rng = seeded_rng(stream_seed(spec.seed, u as u64));
        let user_id = spec.user_id(u);
        let n = match spec.intervals_per_user {
            IntervalCount::Fixed(n) => n,
            IntervalCount::Range([lo, hi]) => rng.random_range(lo..=hi),
        };
        let pick_label = |rng: &mut rand_chacha::ChaCha8Rng| {
            label_picker.as_ref().map(|p| {
                let labels = spec
                    .resource_labels
                    .as_ref()
                    .expect("picker implies labels");
                labels[p.sample(rng)].label.clone()
            })
        };

        let mut t = spec.start_time;
        events.push(ClickEvent {
            user_id: user_id.clone(),
            timestamp: t,
            resource_type: pick_label(&mut rng),
        });
        let mut intervals = Vec::with_capacity(n);
        let (mut on_sum, mut n_off) = (0.0, 0usize);
        for _ in 0..n {
            let k = picker.sample(&mut rng);
            let draw = normals[k].sample(&mut rng).exp();
            let next = t + draw;
            let delta = next - t;
            t = next;
            events.push(ClickEvent {
                user_id: user_id.clone(),
                timestamp: t,
                resource_type: pick_label(&mut rng),
            });
            let label = spec.components[k].label;
            match label {
                TaskLabel::On => on_sum += delta,
                TaskLabel::Off => n_off += 1,
            }
            intervals.push(IntervalTruth {
                delta,
                component: k,
                label,
            });
        }
        truth.push(UserTruth {
            user_id,
            n_intervals: n,
            expected_on_total: n as f64 * on_mean,
            realized_on_sum: on_sum,
            realized_with_off_credit: on_sum + n_off as f64 * on_mean,
            intervals,
        });
    }
    Ok(SyntheticCourse { events, truth })
}

/// Writes the per-user truth summary as CSV.
pub fn write_truth_summary<W: std::io::Write>(
    writer: W,
    truth: &[UserTruth],
) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "user_id",
        "n_intervals",
        "expected_on_total_s",
        "realized_on_sum_s",
        "realized_with_off_credit_s",
    ])?;
    for t in truth {
        wtr.write_record([
            t.user_id.clone(),
            t.n_intervals.to_string(),
            format!("{:.6}", t.expected_on_total),
            format!("{:.6}", t.realized_on_sum),
            format!("{:.6}", t.realized_with_off_credit),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
