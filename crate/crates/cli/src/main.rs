use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tot_core::ingest::{
    extract_intervals, write_drop_ledger, write_track_log, FilterConfig, LogFormat,
};
use tot_core::report::{
    read_cohort_file, read_completion_file, read_grades_file, read_track_log, run_on_log,
    thresholds_from_cache, write_threshold_csv, FitCache, ThresholdRow,
};
use tot_core::synth::{generate, write_truth_summary};
use tot_core::{DroppedUser, Error, GeneratorSpec, PipelineConfig, Result};

#[derive(Parser, Debug)]
#[command(
    name = "tot",
    version,
    about = "Time-on-task estimation from click logs"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Global seed for EM restarts.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Candidate component counts, comma separated.
    #[arg(long, global = true, value_delimiter = ',', default_value = "3,4,5")]
    k_range: Vec<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Field delimiter of the track log; `tab` or a single character.
    #[arg(long, global = true, default_value = ",", value_parser = parse_delimiter)]
    delimiter: u8,
    #[arg(long, global = true, default_value_t = 20)]
    min_clicks: usize,
    /// Seconds.
    #[arg(long, global = true, default_value_t = 0.1)]
    min_interval: f64,
    /// Seconds.
    #[arg(long, global = true, default_value_t = 7200.0)]
    max_interval: f64,
    /// `user_id,grade` table.
    #[arg(long, global = true)]
    grades: Option<PathBuf>,
    /// `user_id,completed` table.
    #[arg(long, global = true)]
    completion: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-user time-on-task table.
    Estimate {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save fitted mixtures for later `threshold --fits` runs.
        #[arg(long)]
        fits_out: Option<PathBuf>,
        /// Users removed during ingest or fitting, with the reason.
        #[arg(long)]
        drops_out: Option<PathBuf>,
        #[arg(long)]
        per_resource: bool,
    },
    /// Effective threshold per cohort.
    Threshold {
        #[arg(long)]
        input: PathBuf,
        /// `user_id,cohort` table; users not listed go to `unassigned`.
        #[arg(long)]
        cohort_file: Option<PathBuf>,
        #[arg(long)]
        per_resource: bool,
        /// Reuse fits saved by `estimate --fits-out` instead of refitting.
        #[arg(long)]
        fits: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic track log from a generator spec.
    Simulate {
        /// Generator spec, JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-user ground truth; CSV summary, or full JSON if the path ends in `.json`.
        #[arg(long)]
        truth_out: Option<PathBuf>,
    },
    /// Full course report as JSON, with a text summary on stderr.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cohort_file: Option<PathBuf>,
        #[arg(long)]
        per_resource: bool,
    },
}

fn parse_delimiter(raw: &str) -> std::result::Result<u8, String> {
    match raw {
        "tab" | "\\t" | "\t" => Ok(b'\t'),
        s if s.len() == 1 && s.is_ascii() => Ok(s.as_bytes()[0]),
        s => Err(format!(
            "delimiter must be one ASCII character or `tab`, got {s:?}"
        )),
    }
}

impl Global {
    fn format(&self) -> LogFormat {
        LogFormat {
            delimiter: self.delimiter,
        }
    }

    fn filter(&self) -> FilterConfig {
        FilterConfig {
            min_clicks: self.min_clicks,
            min_interval: self.min_interval,
            max_interval: self.max_interval,
        }
    }

    fn pipeline(&self, per_resource: bool, cohort_file: Option<&Path>) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig {
            format: self.format(),
            filter: self.filter(),
            per_resource,
            jobs: self.jobs,
            ..PipelineConfig::default()
        };
        cfg.em.seed = self.seed;
        cfg.em.k_range = self.k_range.clone();
        if let Some(path) = cohort_file {
            cfg.cohorts = read_cohort_file(path)?;
        }
        if let Some(path) = &self.grades {
            cfg.grades = Some(read_grades_file(path)?);
        }
        if let Some(path) = &self.completion {
            cfg.completion = Some(read_completion_file(path)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Opens `path`, or stdout when absent, and runs `f` on it.
fn with_output(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let label = path.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf);
    match path {
        Some(p) => {
            let mut w = create(p)?;
            f(&mut w)?;
            w.flush().map_err(|e| Error::io(&label, e))
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            f(&mut w)?;
            w.flush().map_err(|e| Error::io(&label, e))
        }
    }
}

fn write_json<T: serde::Serialize + ?Sized>(w: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    writeln!(w).map_err(|e| Error::io("<output>", e))
}

fn write_thresholds(w: &mut dyn Write, rows: &[ThresholdRow], format: Format) -> Result<()> {
    match format {
        Format::Csv => write_threshold_csv(w, rows),
        Format::Json => write_json(w, rows),
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Estimate {
            input,
            out,
            fits_out,
            drops_out,
            per_resource,
        } => {
            let cfg = g.pipeline(per_resource, None)?;
            let log = read_track_log(&input, &cfg.format)?;
            let report = run_on_log(&log, &cfg)?;
            with_output(out.as_deref(), |w| match g.format {
                Format::Csv => report.write_estimate_csv(w),
                Format::Json => write_json(w, &report.estimate_rows()),
            })?;
            if let Some(path) = fits_out {
                with_output(Some(&path), |w| write_json(w, &report.fit_cache()))?;
            }
            if let Some(path) = drops_out {
                let mut dropped = report.ingest_drops.clone();
                dropped.extend(report.fit_failures.iter().map(|f| DroppedUser {
                    user_id: f.user_id.clone(),
                    reason: f.reason,
                }));
                dropped.sort_by(|a, b| a.user_id.cmp(&b.user_id));
                with_output(Some(&path), |w| Ok(write_drop_ledger(w, &dropped)?))?;
            }
        }
        Command::Threshold {
            input,
            cohort_file,
            per_resource,
            fits,
            out,
        } => {
            let cfg = g.pipeline(per_resource, cohort_file.as_deref())?;
            let log = read_track_log(&input, &cfg.format)?;
            let rows = match fits {
                Some(path) => {
                    let cache = FitCache::read(&path)?;
                    let extraction = extract_intervals(&log.events, &cfg.filter);
                    thresholds_from_cache(&extraction, &cache, &cfg.cohorts, per_resource)
                }
                None => run_on_log(&log, &cfg)?.threshold_rows(per_resource),
            };
            with_output(out.as_deref(), |w| write_thresholds(w, &rows, g.format))?;
        }
        Command::Simulate {
            spec,
            out,
            truth_out,
        } => {
            let file = File::open(&spec).map_err(|e| Error::io(&spec, e))?;
            let spec: GeneratorSpec = serde_json::from_reader(io::BufReader::new(file))?;
            let course = generate(&spec)?;
            let format = g.format();
            with_output(Some(&out), |w| {
                Ok(write_track_log(w, &course.events, &format)?)
            })?;
            if let Some(path) = truth_out {
                let json = path
                    .extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("json"));
                with_output(Some(&path), |w| {
                    if json {
                        write_json(w, &course.truth)
                    } else {
                        Ok(write_truth_summary(w, &course.truth)?)
                    }
                })?;
            }
        }
        Command::Report {
            input,
            out,
            cohort_file,
            per_resource,
        } => {
            let cfg = g.pipeline(per_resource, cohort_file.as_deref())?;
            let report = run_on_log(&read_track_log(&input, &cfg.format)?, &cfg)?;
            with_output(out.as_deref(), |w| {
                w.write_all(report.to_json()?.as_bytes())
                    .and_then(|_| writeln!(w))
                    .map_err(|e| Error::io("<output>", e))
            })?;
            eprint!("{}", report.summary_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
