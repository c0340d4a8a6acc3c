//! Track-log ingestion: delimited text in, per-user interval series out.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("track log is missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("invalid filter configuration: {0}")]
    InvalidFilter(String),
    #[error("invalid click event: {0}")]
    InvalidEvent(String),
    #[error("reading track log: {0}")]
    Csv(#[from] csv::Error),
}

impl IngestError {
    pub fn is_config(&self) -> bool {
        match self {
            IngestError::Csv(e) => !e.is_io_error(),
            _ => true,
        }
    }
}

/// One user action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub user_id: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: f64,
    pub resource_type: Option<String>,
}

impl ClickEvent {
    pub fn new(
        user_id: impl Into<String>,
        timestamp: f64,
        resource_type: Option<String>,
    ) -> Result<Self, IngestError> {
        let user_id = user_id.into();
        if user_id.is_empty() {
            return Err(IngestError::InvalidEvent("empty user id".into()));
        }
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(IngestError::InvalidEvent(format!(
                "timestamp {timestamp} for user {user_id}"
            )));
        }
        Ok(ClickEvent {
            user_id,
            timestamp,
            resource_type: resource_type.filter(|r| !r.is_empty()),
        })
    }
}

/// Content type an interval happened on.
///
/// A mixed pair is stored with its labels sorted, so `{video, problem}` and
/// `{problem, video}` compare equal.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ResourceCategory {
    Single(String),
    Mixed(String, String),
    Unknown,
}

impl ResourceCategory {
    pub fn mixed(a: impl Into<String>, b: impl Into<String>) -> Self {
        let (a, b) = (a.into(), b.into());
        debug_assert_ne!(a, b);
        if a <= b {
            ResourceCategory::Mixed(a, b)
        } else {
            ResourceCategory::Mixed(b, a)
        }
    }
}

impl fmt::Display for ResourceCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResourceCategory::Single(l) => f.write_str(l),
            ResourceCategory::Mixed(a, b) => write!(f, "{a}/{b}"),
            ResourceCategory::Unknown => f.write_str("unknown"),
        }
    }
}

impl Serialize for ResourceCategory {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Category of the interval bounded by clicks `a` and `b`.
pub fn categorize_interval(a: &ClickEvent, b: &ClickEvent) -> ResourceCategory {
    match (a.resource_type.as_deref(), b.resource_type.as_deref()) {
        (Some(x), Some(y)) if !x.is_empty() && !y.is_empty() => {
            if x == y {
                ResourceCategory::Single(x.to_owned())
            } else {
                ResourceCategory::mixed(x, y)
            }
        }
        _ => ResourceCategory::Unknown,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Users with fewer raw clicks are discarded.
    pub min_clicks: usize,
    /// Seconds; shorter intervals are dropped.
    pub min_interval: f64,
    /// Seconds; longer intervals are dropped.
    pub max_interval: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_clicks: 20,
            min_interval: 0.1,
            max_interval: 7200.0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.min_clicks < 2 {
            return Err(IngestError::InvalidFilter(format!(
                "min_clicks must be at least 2, got {}",
                self.min_clicks
            )));
        }
        if !(self.min_interval > 0.0 && self.min_interval < self.max_interval) {
            return Err(IngestError::InvalidFilter(format!(
                "need 0 < min_interval < max_interval, got {} and {}",
                self.min_interval, self.max_interval
            )));
        }
        Ok(())
    }
}

/// A user's retained inter-click intervals, in click order.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalSeries {
    pub user_id: String,
    pub deltas: Vec<f64>,
    pub categories: Vec<ResourceCategory>,
    pub net_time: f64,
}

impl IntervalSeries {
    pub fn new(
        user_id: impl Into<String>,
        deltas: Vec<f64>,
        categories: Vec<ResourceCategory>,
    ) -> Self {
        assert_eq!(
            deltas.len(),
            categories.len(),
            "deltas and categories must be parallel"
        );
        let net_time = crate::stats::sum(&deltas);
        IntervalSeries {
            user_id: user_id.into(),
            deltas,
            categories,
            net_time,
        }
    }

    /// Series with every interval in the `Unknown` category.
    pub fn uncategorized(user_id: impl Into<String>, deltas: Vec<f64>) -> Self {
        let categories = vec![ResourceCategory::Unknown; deltas.len()];
        Self::new(user_id, deltas, categories)
    }

    pub fn n(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Splits the series by interval category, preserving order within each.
    pub fn stratify(&self) -> BTreeMap<ResourceCategory, IntervalSeries> {
        let mut parts: BTreeMap<ResourceCategory, Vec<f64>> = BTreeMap::new();
        for (d, c) in self.deltas.iter().zip(&self.categories) {
            parts.entry(c.clone()).or_default().push(*d);
        }
        parts
            .into_iter()
            .map(|(c, deltas)| {
                let cats = vec![c.clone(); deltas.len()];
                (c, IntervalSeries::new(self.user_id.clone(), deltas, cats))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    TooFewClicks,
    NoIntervals,
    InsufficientData,
    NoConvergence,
    SingleComponent,
    DegenerateWeights,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::TooFewClicks => "too_few_clicks",
            DropReason::NoIntervals => "no_intervals",
            DropReason::InsufficientData => "insufficient_data",
            DropReason::NoConvergence => "no_convergence",
            DropReason::SingleComponent => "single_component",
            DropReason::DegenerateWeights => "degenerate_weights",
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DroppedUser {
    pub user_id: String,
    pub reason: DropReason,
}

#[derive(Clone, Debug, Default)]
pub struct Extraction {
    pub series: BTreeMap<String, IntervalSeries>,
    /// Sorted by user id.
    pub dropped: Vec<DroppedUser>,
}

impl Extraction {
    pub fn users_seen(&self) -> usize {
        self.series.len() + self.dropped.len()
    }
}

/// Groups events by user, differences the sorted timestamps and filters the
/// resulting intervals.
///
/// The click-count filter applies to raw clicks. Out-of-range intervals are
/// removed one by one after differencing, so no interval spanning a removed
/// one is ever fabricated.
pub fn extract_intervals(events: &[ClickEvent], cfg: &FilterConfig) -> Extraction {
    let mut by_user: BTreeMap<&str, Vec<&ClickEvent>> = BTreeMap::new();
    for e in events {
        by_user.entry(e.user_id.as_str()).or_default().push(e);
    }

    let mut out = Extraction::default();
    for (user, mut clicks) in by_user {
        if clicks.len() < cfg.min_clicks {
            out.dropped.push(DroppedUser {
                user_id: user.to_owned(),
                reason: DropReason::TooFewClicks,
            });
            continue;
        }
        // Resource label breaks timestamp ties so row order never matters.
        clicks.sort_by(|a, b| {
            a.timestamp
                .total_cmp(&b.timestamp)
                .then_with(|| a.resource_type.cmp(&b.resource_type))
        });

        let mut deltas = Vec::with_capacity(clicks.len() - 1);
        let mut categories = Vec::with_capacity(clicks.len() - 1);
        for pair in clicks.windows(2) {
            let d = pair[1].timestamp - pair[0].timestamp;
            if d >= cfg.min_interval && d <= cfg.max_interval {
                deltas.push(d);
                categories.push(categorize_interval(pair[0], pair[1]));
            }
        }
        if deltas.is_empty() {
            out.dropped.push(DroppedUser {
                user_id: user.to_owned(),
                reason: DropReason::NoIntervals,
            });
            continue;
        }
        out.series.insert(
            user.to_owned(),
            IntervalSeries::new(user, deltas, categories),
        );
    }
    out
}

/// Delimited-text layout of a track log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LogFormat {
    pub delimiter: u8,
}

impl Default for LogFormat {
    fn default() -> Self {
        LogFormat { delimiter: b',' }
    }
}

impl LogFormat {
    pub fn tab() -> Self {
        LogFormat { delimiter: b'\t' }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedLog {
    pub events: Vec<ClickEvent>,
    /// Rows that could not be turned into an event.
    pub malformed_rows: usize,
}

/// Parses a timestamp given as epoch seconds or an ISO-8601 date-time.
/// Date-times without an offset are taken as UTC.
pub fn parse_timestamp(raw: &str) -> Option<f64> {
    let s = raw.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(v) = s.parse::<f64>() {
        return (v.is_finite() && v >= 0.0).then_some(v);
    }
    let dt = DateTime::parse_from_rfc3339(s)
        .map(|d| d.naive_utc())
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S%.f"))
        .ok()?;
    let utc = dt.and_utc();
    let v = utc.timestamp() as f64 + f64::from(utc.timestamp_subsec_nanos()) * 1e-9;
    (v >= 0.0).then_some(v)
}

/// Reads a track log with a header row naming `user_id`, `timestamp` and
/// optionally `resource_type`. Bad rows are counted, not fatal.
pub fn parse_track_log<R: Read>(reader: R, format: &LogFormat) -> Result<ParsedLog, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr.headers()?.clone();
    let mut parsed = ParsedLog::default();
    if headers.iter().all(|h| h.is_empty()) {
        // empty input: nothing to configure against
        return Ok(parsed);
    }
    let column = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let user_col = column("user_id").ok_or(IngestError::MissingColumn("user_id"))?;
    let time_col = column("timestamp").ok_or(IngestError::MissingColumn("timestamp"))?;
    let res_col = column("resource_type");

    for record in rdr.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(_) => {
                parsed.malformed_rows += 1;
                continue;
            }
        };
        let user = record.get(user_col).unwrap_or("");
        let ts = record.get(time_col).and_then(parse_timestamp);
        match ts {
            Some(ts) if !user.is_empty() => {
                let resource = res_col
                    .and_then(|c| record.get(c))
                    .filter(|r| !r.is_empty())
                    .map(str::to_owned);
                parsed.events.push(ClickEvent {
                    user_id: user.to_owned(),
                    timestamp: ts,
                    resource_type: resource,
                });
            }
            _ => parsed.malformed_rows += 1,
        }
    }
    Ok(parsed)
}

/// Writes events in the layout [`parse_track_log`] reads. Timestamps use the
/// shortest representation that parses back to the same `f64`.
pub fn write_track_log<W: Write>(
    writer: W,
    events: &[ClickEvent],
    format: &LogFormat,
) -> Result<(), csv::Error> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(format.delimiter)
        .from_writer(writer);
    wtr.write_record(["user_id", "timestamp", "resource_type"])?;
    for e in events {
        let ts = e.timestamp.to_string();
        wtr.write_record([
            e.user_id.as_str(),
            ts.as_str(),
            e.resource_type.as_deref().unwrap_or(""),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes the drop ledger as a `user_id,reason` table.
pub fn write_drop_ledger<W: Write>(writer: W, dropped: &[DroppedUser]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["user_id", "reason"])?;
    for d in dropped {
        wtr.write_record([d.user_id.as_str(), d.reason.as_str()])?;
    }
    wtr.flush()?;
    Ok(())
}
