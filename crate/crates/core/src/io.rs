//! Run configuration, CSV tables and run manifests for the command-line tool.
//!
//! A run is described by a [`RunConfig`]: one [`Job`] (the subcommand with
//! its fully resolved study configuration) and an output directory. Values
//! come from the study defaults, then a flat TOML file, then command-line
//! flags, each layer overriding the previous one. Every run writes its CSV
//! tables and a JSON [`Manifest`]; executing the manifest's configuration
//! again reproduces the tables byte for byte apart from wall-clock columns.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::experiments::{
    as_convergence_profiles, holder_increment_check, kernel_bound_checks, moment_bound_check,
    single_run, strong_error_study, work_precision_study, AsProfiles, AsProfilesConfig,
    ErrorReport, HolderConfig, HolderReport, KernelCheckConfig, KernelCheckReport, MomentConfig,
    MomentReport, SingleRunConfig, StrongStudyConfig, Trajectory, WorkPrecisionConfig,
    WorkPrecisionReport,
};
use crate::problem::BuiltinProblem;
use crate::schemes::SchemeKind;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "STOCHHEAT_OUTPUT_DIR";

/// File name of the manifest written next to the tables.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Columns holding wall-clock measurements; they are the only values a
/// replay does not reproduce.
pub const TIMING_COLUMNS: [&str; 3] = ["wall_time_s", "wall_time_total_s", "log2_time"];

/// The subcommands that run a computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    StrongOrder,
    WorkPrecision,
    AsConvergence,
    KernelChecks,
    MomentChecks,
    SingleRun,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::StrongOrder,
        Command::WorkPrecision,
        Command::AsConvergence,
        Command::KernelChecks,
        Command::MomentChecks,
        Command::SingleRun,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::StrongOrder => "strong-order",
            Command::WorkPrecision => "work-precision",
            Command::AsConvergence => "as-convergence",
            Command::KernelChecks => "kernel-checks",
            Command::MomentChecks => "moment-checks",
            Command::SingleRun => "single-run",
        }
    }

    /// Configuration keys this subcommand reads, besides `output_dir`.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            Command::StrongOrder => &[
                "problem",
                "m",
                "t_final",
                "dt_levels",
                "dt_ref",
                "samples",
                "seed",
                "schemes",
                "record_times",
                "fit_exclude_coarsest",
                "fit_ref_guard",
            ],
            Command::WorkPrecision => &[
                "problem",
                "m",
                "t_final",
                "dt_levels",
                "dt_ref",
                "samples",
                "seed",
                "schemes",
                "repetitions",
            ],
            Command::AsConvergence => &[
                "problem",
                "m",
                "t_final",
                "dt_levels",
                "dt_ref",
                "seed",
                "sample_index",
            ],
            Command::KernelChecks => &["m_set", "probe_levels"],
            Command::MomentChecks => &[
                "problem",
                "m",
                "m_set",
                "t_final",
                "dt",
                "holder_dt",
                "samples",
                "seed",
            ],
            Command::SingleRun => &[
                "problem",
                "scheme",
                "m",
                "t_final",
                "dt",
                "seed",
                "sample_index",
                "record_stride",
            ],
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config("subcommand", format!("unknown subcommand `{s}`")))
    }
}

/// Parses a step size written either as a number or as `2^-k`.
pub fn parse_step(s: &str) -> std::result::Result<f64, String> {
    let t = s.trim();
    let value = if let Some(exp) = t.strip_prefix("2^") {
        let k: i32 = exp
            .trim_start_matches('(')
            .trim_end_matches(')')
            .parse()
            .map_err(|_| format!("`{s}` is not of the form 2^k"))?;
        2f64.powi(k)
    } else {
        t.parse::<f64>()
            .map_err(|_| format!("`{s}` is not a number or 2^k"))?
    };
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(format!("`{s}` is not a positive step"))
    }
}

/// Optional values for every configuration key; used both for the parsed
/// config file and for command-line flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub problem: Option<BuiltinProblem>,
    pub m: Option<usize>,
    pub m_set: Option<Vec<usize>>,
    pub t_final: Option<f64>,
    pub dt_levels: Option<Vec<f64>>,
    pub dt_ref: Option<f64>,
    pub dt: Option<f64>,
    pub holder_dt: Option<f64>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub sample_index: Option<u64>,
    pub schemes: Option<Vec<SchemeKind>>,
    pub scheme: Option<SchemeKind>,
    pub repetitions: Option<usize>,
    pub record_times: Option<Vec<f64>>,
    pub record_stride: Option<usize>,
    pub fit_exclude_coarsest: Option<usize>,
    pub fit_ref_guard: Option<f64>,
    pub probe_levels: Option<u32>,
    pub output_dir: Option<PathBuf>,
}

macro_rules! for_each_key {
    ($self:ident, $other:ident, $body:ident) => {{
        $body!($self, $other, problem);
        $body!($self, $other, m);
        $body!($self, $other, m_set);
        $body!($self, $other, t_final);
        $body!($self, $other, dt_levels);
        $body!($self, $other, dt_ref);
        $body!($self, $other, dt);
        $body!($self, $other, holder_dt);
        $body!($self, $other, samples);
        $body!($self, $other, seed);
        $body!($self, $other, sample_index);
        $body!($self, $other, schemes);
        $body!($self, $other, scheme);
        $body!($self, $other, repetitions);
        $body!($self, $other, record_times);
        $body!($self, $other, record_stride);
        $body!($self, $other, fit_exclude_coarsest);
        $body!($self, $other, fit_ref_guard);
        $body!($self, $other, probe_levels);
        $body!($self, $other, output_dir);
    }};
}

impl Overrides {
    /// Names of the keys that carry a value.
    pub fn present_keys(&self) -> Vec<&'static str> {
        let mut keys = Vec::new();
        macro_rules! push {
            ($s:ident, $k:ident, $f:ident) => {
                if $s.$f.is_some() {
                    $k.push(stringify!($f));
                }
            };
        }
        for_each_key!(self, keys, push);
        keys
    }

    /// Values present in `other` replace those in `self`.
    pub fn merge(&mut self, other: &Overrides) {
        macro_rules! take {
            ($s:ident, $o:ident, $f:ident) => {
                if $o.$f.is_some() {
                    $s.$f = $o.$f.clone();
                }
            };
        }
        for_each_key!(self, other, take);
    }
}

/// Parses a flat TOML document into [`Overrides`]. Unknown keys, type
/// mismatches and unparsable values are errors naming the key.
pub fn parse_config_str(text: &str) -> Result<Overrides> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("(file)", e.message().to_string()))?;
    let mut o = Overrides::default();
    for (key, value) in &table {
        let k = key.as_str();
        match k {
            "problem" => {
                o.problem =
                    Some(BuiltinProblem::from_str(str_value(k, value)?).map_err(|e| rekey(k, e))?)
            }
            "scheme" => {
                o.scheme =
                    Some(SchemeKind::from_str(str_value(k, value)?).map_err(|e| rekey(k, e))?)
            }
            "schemes" => {
                o.schemes = Some(
                    array(k, value)?
                        .iter()
                        .map(|v| SchemeKind::from_str(str_value(k, v)?).map_err(|e| rekey(k, e)))
                        .collect::<Result<_>>()?,
                )
            }
            "m" => o.m = Some(uint(k, value)? as usize),
            "samples" => o.samples = Some(uint(k, value)? as usize),
            "repetitions" => o.repetitions = Some(uint(k, value)? as usize),
            "record_stride" => o.record_stride = Some(uint(k, value)? as usize),
            "fit_exclude_coarsest" => o.fit_exclude_coarsest = Some(uint(k, value)? as usize),
            "seed" => o.seed = Some(uint(k, value)?),
            "sample_index" => o.sample_index = Some(uint(k, value)?),
            "probe_levels" => {
                o.probe_levels = Some(
                    u32::try_from(uint(k, value)?)
                        .map_err(|_| Error::config(k, "value too large"))?,
                )
            }
            "m_set" => {
                o.m_set = Some(
                    array(k, value)?
                        .iter()
                        .map(|v| uint(k, v).map(|u| u as usize))
                        .collect::<Result<_>>()?,
                )
            }
            "t_final" => o.t_final = Some(float(k, value)?),
            "fit_ref_guard" => o.fit_ref_guard = Some(float(k, value)?),
            "dt_ref" => o.dt_ref = Some(step(k, value)?),
            "dt" => o.dt = Some(step(k, value)?),
            "holder_dt" => o.holder_dt = Some(step(k, value)?),
            "dt_levels" => {
                o.dt_levels = Some(
                    array(k, value)?
                        .iter()
                        .map(|v| step(k, v))
                        .collect::<Result<_>>()?,
                )
            }
            "record_times" => {
                o.record_times = Some(
                    array(k, value)?
                        .iter()
                        .map(|v| step(k, v))
                        .collect::<Result<_>>()?,
                )
            }
            "output_dir" => o.output_dir = Some(PathBuf::from(str_value(k, value)?)),
            _ => return Err(Error::config(k, "unknown key")),
        }
    }
    Ok(o)
}

/// Reads and parses a config file.
pub fn load_config_file(path: &Path) -> Result<Overrides> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

fn rekey(key: &str, e: Error) -> Error {
    match e {
        Error::Config { reason, .. } => Error::config(key, reason),
        other => other,
    }
}

fn type_error(key: &str, expected: &str, value: &toml::Value) -> Error {
    Error::config(
        key,
        format!("expected {expected}, found {}", value.type_str()),
    )
}

fn str_value<'a>(key: &str, value: &'a toml::Value) -> Result<&'a str> {
    value
        .as_str()
        .ok_or_else(|| type_error(key, "a string", value))
}

fn array<'a>(key: &str, value: &'a toml::Value) -> Result<&'a Vec<toml::Value>> {
    value
        .as_array()
        .ok_or_else(|| type_error(key, "an array", value))
}

fn uint(key: &str, value: &toml::Value) -> Result<u64> {
    let i = value
        .as_integer()
        .ok_or_else(|| type_error(key, "a non-negative integer", value))?;
    u64::try_from(i)
        .map_err(|_| Error::config(key, format!("expected a non-negative integer, found {i}")))
}

fn float(key: &str, value: &toml::Value) -> Result<f64> {
    match value {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        other => Err(type_error(key, "a number", other)),
    }
}

fn step(key: &str, value: &toml::Value) -> Result<f64> {
    let v = match value {
        toml::Value::String(s) => parse_step(s).map_err(|r| Error::config(key, r))?,
        other => float(key, other)?,
    };
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::config(key, format!("must be positive, got {v}")))
    }
}

/// A subcommand with its fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", content = "settings", rename_all = "kebab-case")]
pub enum Job {
    StrongOrder(StrongStudyConfig),
    WorkPrecision(WorkPrecisionConfig),
    AsConvergence(AsProfilesConfig),
    KernelChecks(KernelCheckConfig),
    MomentChecks {
        moments: MomentConfig,
        holder: HolderConfig,
    },
    SingleRun(SingleRunConfig),
}

impl Job {
    pub fn defaults(command: Command) -> Self {
        match command {
            Command::StrongOrder => Job::StrongOrder(StrongStudyConfig::default()),
            Command::WorkPrecision => Job::WorkPrecision(WorkPrecisionConfig::default()),
            Command::AsConvergence => Job::AsConvergence(AsProfilesConfig::default()),
            Command::KernelChecks => Job::KernelChecks(KernelCheckConfig::default()),
            Command::MomentChecks => Job::MomentChecks {
                moments: MomentConfig::default(),
                holder: HolderConfig::default(),
            },
            Command::SingleRun => Job::SingleRun(SingleRunConfig::default()),
        }
    }

    pub fn command(&self) -> Command {
        match self {
            Job::StrongOrder(_) => Command::StrongOrder,
            Job::WorkPrecision(_) => Command::WorkPrecision,
            Job::AsConvergence(_) => Command::AsConvergence,
            Job::KernelChecks(_) => Command::KernelChecks,
            Job::MomentChecks { .. } => Command::MomentChecks,
            Job::SingleRun(_) => Command::SingleRun,
        }
    }

    /// Applies the values in `o`; keys the subcommand does not read are
    /// rejected.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        let command = self.command();
        for key in o.present_keys() {
            if key != "output_dir" && !command.keys().contains(&key) {
                return Err(Error::config(key, format!("not used by {command}")));
            }
        }
        fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *dst = v.clone();
            }
        }
        match self {
            Job::StrongOrder(c) => {
                set(&mut c.problem, &o.problem);
                set(&mut c.m, &o.m);
                set(&mut c.t_final, &o.t_final);
                set(&mut c.dt_levels, &o.dt_levels);
                set(&mut c.dt_ref, &o.dt_ref);
                set(&mut c.samples, &o.samples);
                set(&mut c.seed, &o.seed);
                set(&mut c.schemes, &o.schemes);
                if o.record_times.is_some() {
                    c.record_times = o.record_times.clone();
                }
                set(&mut c.fit_exclude_coarsest, &o.fit_exclude_coarsest);
                set(&mut c.fit_ref_guard, &o.fit_ref_guard);
            }
            Job::WorkPrecision(c) => {
                set(&mut c.problem, &o.problem);
                set(&mut c.m, &o.m);
                set(&mut c.t_final, &o.t_final);
                set(&mut c.dt_levels, &o.dt_levels);
                set(&mut c.dt_ref, &o.dt_ref);
                set(&mut c.samples, &o.samples);
                set(&mut c.seed, &o.seed);
                set(&mut c.schemes, &o.schemes);
                set(&mut c.repetitions, &o.repetitions);
            }
            Job::AsConvergence(c) => {
                set(&mut c.problem, &o.problem);
                set(&mut c.m, &o.m);
                set(&mut c.t_final, &o.t_final);
                set(&mut c.dt_levels, &o.dt_levels);
                set(&mut c.dt_ref, &o.dt_ref);
                set(&mut c.seed, &o.seed);
                set(&mut c.sample_index, &o.sample_index);
            }
            Job::KernelChecks(c) => {
                set(&mut c.m_set, &o.m_set);
                set(&mut c.probe_levels, &o.probe_levels);
            }
            Job::MomentChecks { moments, holder } => {
                set(&mut moments.problem, &o.problem);
                set(&mut holder.problem, &o.problem);
                set(&mut moments.m_set, &o.m_set);
                set(&mut holder.m, &o.m);
                set(&mut moments.t_final, &o.t_final);
                set(&mut holder.t_final, &o.t_final);
                set(&mut moments.dt, &o.dt);
                set(&mut holder.dt, &o.holder_dt);
                set(&mut moments.samples, &o.samples);
                set(&mut holder.samples, &o.samples);
                set(&mut moments.seed, &o.seed);
                set(&mut holder.seed, &o.seed);
            }
            Job::SingleRun(c) => {
                set(&mut c.problem, &o.problem);
                set(&mut c.scheme, &o.scheme);
                set(&mut c.m, &o.m);
                set(&mut c.t_final, &o.t_final);
                set(&mut c.dt, &o.dt);
                set(&mut c.seed, &o.seed);
                set(&mut c.sample_index, &o.sample_index);
                set(&mut c.record_stride, &o.record_stride);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Job::StrongOrder(c) => c.validate(),
            Job::WorkPrecision(c) => c.validate(),
            Job::AsConvergence(c) => c.validate(),
            Job::KernelChecks(c) => c.validate(),
            Job::MomentChecks { moments, holder } => {
                moments.validate()?;
                holder.validate().map(|_| ()).map_err(|e| match e {
                    Error::Config { key, reason } if key == "dt" => {
                        Error::config("holder_dt", reason)
                    }
                    other => other,
                })
            }
            Job::SingleRun(c) => c.validate(),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::StrongOrder(c) => Some(c.seed),
            Job::WorkPrecision(c) => Some(c.seed),
            Job::AsConvergence(c) => Some(c.seed),
            Job::KernelChecks(_) => None,
            Job::MomentChecks { moments, .. } => Some(moments.seed),
            Job::SingleRun(c) => Some(c.seed),
        }
    }

    pub fn samples(&self) -> Option<usize> {
        match self {
            Job::StrongOrder(c) => Some(c.samples),
            Job::WorkPrecision(c) => Some(c.samples),
            Job::AsConvergence(_) | Job::SingleRun(_) => Some(1),
            Job::KernelChecks(_) => None,
            Job::MomentChecks { moments, .. } => Some(moments.samples),
        }
    }
}

/// Output directory used when neither the file nor a flag names one.
pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub job: Job,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Builds a validated configuration from the defaults of `command`, the
    /// values of a config file and command-line flags, in increasing order
    /// of precedence.
    pub fn resolve(command: Command, file: &Overrides, flags: &Overrides) -> Result<Self> {
        let mut merged = file.clone();
        merged.merge(flags);
        let mut job = Job::defaults(command);
        job.apply(&merged)?;
        job.validate()?;
        Ok(Self {
            job,
            output_dir: merged.output_dir.unwrap_or_else(default_output_dir),
        })
    }
}

// ---------------------------------------------------------------------------
// Execution

/// The report produced by one job.
#[derive(Debug, Clone)]
pub enum Outcome {
    StrongOrder(ErrorReport),
    WorkPrecision(WorkPrecisionReport),
    AsConvergence(AsProfiles),
    KernelChecks(KernelCheckReport),
    MomentChecks {
        moments: MomentReport,
        holder: HolderReport,
    },
    SingleRun(Trajectory),
}

/// Runs the computation of a job.
pub fn execute(job: &Job) -> Result<Outcome> {
    job.validate()?;
    Ok(match job {
        Job::StrongOrder(c) => Outcome::StrongOrder(strong_error_study(c)?),
        Job::WorkPrecision(c) => Outcome::WorkPrecision(work_precision_study(c)?),
        Job::AsConvergence(c) => Outcome::AsConvergence(as_convergence_profiles(c)?),
        Job::KernelChecks(c) => Outcome::KernelChecks(kernel_bound_checks(c)?),
        Job::MomentChecks { moments, holder } => Outcome::MomentChecks {
            moments: moment_bound_check(moments)?,
            holder: holder_increment_check(holder)?,
        },
        Job::SingleRun(c) => Outcome::SingleRun(single_run(c)?),
    })
}

/// Shortest text that parses back to the same `f64`.
pub fn fmt_float(v: f64) -> String {
    format!("{v:?}")
}

/// A named CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: impl Into<String>, header: &[&str]) -> Self {
        Self {
            name: name.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Comma-separated text with a header line and LF line endings.
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Writes one table to `path`.
pub fn write_csv(table: &Table, path: &Path) -> Result<()> {
    fs::write(path, table.to_csv()).map_err(|e| Error::io(path, e))
}

/// Compares two CSV texts cell by cell, skipping the columns listed in
/// [`TIMING_COLUMNS`].
pub fn csv_equal_ignoring_timing(a: &str, b: &str) -> bool {
    let mut la = a.lines();
    let mut lb = b.lines();
    let (Some(ha), Some(hb)) = (la.next(), lb.next()) else {
        return a == b;
    };
    if ha != hb {
        return false;
    }
    let keep: Vec<bool> = ha
        .split(',')
        .map(|h| !TIMING_COLUMNS.contains(&h))
        .collect();
    loop {
        match (la.next(), lb.next()) {
            (None, None) => return a.ends_with('\n') == b.ends_with('\n'),
            (Some(ra), Some(rb)) => {
                let ca: Vec<&str> = ra.split(',').collect();
                let cb: Vec<&str> = rb.split(',').collect();
                if ca.len() != cb.len() || ca.len() != keep.len() {
                    return false;
                }
                if (0..ca.len()).any(|i| keep[i] && ca[i] != cb[i]) {
                    return false;
                }
            }
            _ => return false,
        }
    }
}

fn log2(v: f64) -> String {
    fmt_float(v.log2())
}

impl Outcome {
    /// The CSV tables of this outcome.
    pub fn tables(&self) -> Vec<Table> {
        match self {
            Outcome::StrongOrder(r) => r
                .schemes
                .iter()
                .map(|s| {
                    let mut t = Table::new(
                        format!("strong_order_{}.csv", s.scheme),
                        &[
                            "dt",
                            "log2_dt",
                            "sup_msq_error",
                            "msq_stderr",
                            "log2_err",
                            "rms_error",
                            "argmax_t",
                            "argmax_x",
                            "wall_time_s",
                            "samples_used",
                            "aborted_samples",
                        ],
                    );
                    for l in &s.levels {
                        t.push(vec![
                            fmt_float(l.dt),
                            log2(l.dt),
                            fmt_float(l.sup_msq_error),
                            fmt_float(l.msq_stderr),
                            log2(l.sup_msq_error),
                            fmt_float(l.rms_error),
                            fmt_float(l.argmax_t),
                            fmt_float(l.argmax_x),
                            fmt_float(l.wall_time_s),
                            l.samples_used.to_string(),
                            l.aborted_samples.to_string(),
                        ]);
                    }
                    t
                })
                .collect(),
            Outcome::WorkPrecision(r) => {
                let mut t = Table::new(
                    "work_precision.csv",
                    &[
                        "scheme",
                        "dt",
                        "log2_dt",
                        "wall_time_total_s",
                        "log2_time",
                        "avg_final_error",
                        "log2_err",
                        "samples_used",
                        "aborted_samples",
                    ],
                );
                for row in &r.rows {
                    t.push(vec![
                        row.scheme.to_string(),
                        fmt_float(row.dt),
                        log2(row.dt),
                        fmt_float(row.wall_time_total_s),
                        log2(row.wall_time_total_s),
                        fmt_float(row.avg_final_error),
                        log2(row.avg_final_error),
                        row.samples_used.to_string(),
                        row.aborted_samples.to_string(),
                    ]);
                }
                vec![t]
            }
            Outcome::AsConvergence(r) => {
                let mut header = vec!["x".to_string(), "reference".to_string()];
                header.extend(r.levels.iter().map(|l| format!("dt_{}", fmt_float(l.dt))));
                let mut profiles = Table {
                    name: "as_profiles.csv".into(),
                    header,
                    rows: Vec::new(),
                };
                for (i, &x) in r.x.iter().enumerate() {
                    let mut row = vec![fmt_float(x), fmt_float(r.reference[i])];
                    row.extend(r.levels.iter().map(|l| fmt_float(l.profile[i])));
                    profiles.push(row);
                }
                let mut distances = Table::new(
                    "as_distances.csv",
                    &["dt", "log2_dt", "sup_distance", "log2_err"],
                );
                for l in &r.levels {
                    distances.push(vec![
                        fmt_float(l.dt),
                        log2(l.dt),
                        fmt_float(l.sup_distance),
                        log2(l.sup_distance),
                    ]);
                }
                vec![profiles, distances]
            }
            Outcome::KernelChecks(r) => {
                let mut fits = Table::new(
                    "kernel_fits.csv",
                    &[
                        "check",
                        "bound",
                        "alphas",
                        "m",
                        "c_probe",
                        "c_refined",
                        "fitted_c",
                        "passed",
                    ],
                );
                let mut probes = Table::new(
                    "kernel_probes.csv",
                    &[
                        "check", "bound", "m", "s", "t", "alpha", "x", "lhs", "envelope", "ratio",
                    ],
                );
                for (k, c) in r.checks.iter().enumerate() {
                    let alphas = c
                        .alphas
                        .iter()
                        .map(|&a| fmt_float(a))
                        .collect::<Vec<_>>()
                        .join(";");
                    for &(m, cp, cr) in &c.fit.per_m {
                        fits.push(vec![
                            k.to_string(),
                            c.bound.name().to_string(),
                            alphas.clone(),
                            m.to_string(),
                            fmt_float(cp),
                            fmt_float(cr),
                            fmt_float(c.fit.fitted_c),
                            c.fit.passed.to_string(),
                        ]);
                    }
                    for p in &c.rows {
                        probes.push(vec![
                            k.to_string(),
                            p.bound.name().to_string(),
                            p.m.to_string(),
                            fmt_float(p.s),
                            fmt_float(p.t),
                            fmt_float(p.alpha),
                            fmt_float(p.x),
                            fmt_float(p.lhs),
                            fmt_float(p.envelope),
                            fmt_float(p.ratio),
                        ]);
                    }
                }
                vec![fits, probes]
            }
            Outcome::MomentChecks { moments, holder } => {
                let mut m = Table::new("moments.csv", &["m", "sup_second", "sup_fourth"]);
                for row in &moments.rows {
                    m.push(vec![
                        row.m.to_string(),
                        fmt_float(row.sup_second),
                        fmt_float(row.sup_fourth),
                    ]);
                }
                let mut h = Table::new(
                    "holder.csv",
                    &["kind", "lag", "log2_lag", "mean_square", "log2_msq"],
                );
                for (kind, rows) in [("time", &holder.time), ("space", &holder.space)] {
                    for row in rows {
                        h.push(vec![
                            kind.to_string(),
                            fmt_float(row.lag),
                            log2(row.lag),
                            fmt_float(row.mean_square),
                            log2(row.mean_square),
                        ]);
                    }
                }
                vec![m, h]
            }
            Outcome::SingleRun(r) => {
                let mut t = Table::new("trajectory.csv", &["step", "t", "x", "u"]);
                for (n, time, values) in &r.snapshots {
                    for (x, u) in r.x.iter().zip(values) {
                        t.push(vec![
                            n.to_string(),
                            fmt_float(*time),
                            fmt_float(*x),
                            fmt_float(*u),
                        ]);
                    }
                }
                vec![t]
            }
        }
    }

    /// Headline numbers recorded in the manifest.
    pub fn summary(&self) -> serde_json::Value {
        match self {
            Outcome::StrongOrder(r) => json!({
                "reference_scheme": r.reference,
                "slopes": r.schemes.iter().map(|s| json!({
                    "scheme": s.scheme,
                    "slope": s.fitted_slope,
                    "stderr": s.slope_stderr,
                    "fit_levels": s.fit_levels,
                })).collect::<Vec<_>>(),
            }),
            Outcome::WorkPrecision(r) => json!({
                "errors": r.rows.iter().map(|row| json!({
                    "scheme": row.scheme,
                    "dt": row.dt,
                    "avg_final_error": row.avg_final_error,
                })).collect::<Vec<_>>(),
            }),
            Outcome::AsConvergence(r) => json!({
                "sup_distance": r.levels.iter().map(|l| json!({"dt": l.dt, "sup_distance": l.sup_distance})).collect::<Vec<_>>(),
                "decreasing_fraction": r.decreasing_fraction(),
            }),
            Outcome::KernelChecks(r) => json!({
                "passed": r.passed,
                "fits": r.checks.iter().map(|c| json!({
                    "bound": c.bound.name(),
                    "alphas": c.alphas,
                    "fitted_c": c.fit.fitted_c,
                    "refined_c": c.fit.refined_c,
                    "passed": c.fit.passed,
                })).collect::<Vec<_>>(),
            }),
            Outcome::MomentChecks { moments, holder } => json!({
                "moments": {
                    "ratio_second": moments.ratio_second,
                    "ratio_fourth": moments.ratio_fourth,
                    "passed": moments.passed,
                },
                "holder": {
                    "time_exponent": holder.time_exponent,
                    "time_exponent_stderr": holder.time_exponent_stderr,
                    "space_exponent": holder.space_exponent,
                    "space_exponent_stderr": holder.space_exponent_stderr,
                    "time_passed": holder.time_passed,
                    "space_passed": holder.space_passed,
                },
            }),
            Outcome::SingleRun(r) => json!({
                "snapshots": r.snapshots.len(),
                "final_time": r.snapshots.last().map(|s| s.1),
            }),
        }
    }

    /// Short human-readable report for the terminal.
    pub fn report_lines(&self) -> Vec<String> {
        match self {
            Outcome::StrongOrder(r) => r
                .schemes
                .iter()
                .map(|s| {
                    if s.fitted_slope.is_finite() {
                        format!(
                            "{}: fitted order {:.3} +/- {:.3} over {} levels",
                            s.scheme,
                            s.fitted_slope,
                            s.slope_stderr,
                            s.fit_levels.len()
                        )
                    } else {
                        format!(
                            "{}: too few levels in the fit window for an order",
                            s.scheme
                        )
                    }
                })
                .collect(),
            Outcome::WorkPrecision(r) => r
                .rows
                .iter()
                .map(|row| {
                    format!(
                        "{} dt={:e}: time {:.4} s, error {:.3e}",
                        row.scheme, row.dt, row.wall_time_total_s, row.avg_final_error
                    )
                })
                .collect(),
            Outcome::AsConvergence(r) => {
                let mut lines: Vec<String> = r
                    .levels
                    .iter()
                    .map(|l| format!("dt={:e}: sup distance {:.3e}", l.dt, l.sup_distance))
                    .collect();
                lines.push(format!(
                    "decreasing fraction {:.2}",
                    r.decreasing_fraction()
                ));
                lines
            }
            Outcome::KernelChecks(r) => r
                .checks
                .iter()
                .map(|c| {
                    format!(
                        "bound ({}) alphas {:?}: C = {:.4} (refined {:.4}) {}",
                        c.bound.name(),
                        c.alphas,
                        c.fit.fitted_c,
                        c.fit.refined_c,
                        if c.fit.passed { "stable" } else { "UNSTABLE" }
                    )
                })
                .collect(),
            Outcome::MomentChecks { moments, holder } => {
                let mut lines: Vec<String> = moments
                    .rows
                    .iter()
                    .map(|r| {
                        format!(
                            "M={}: sup E U^2 = {:.4}, sup E U^4 = {:.4}",
                            r.m, r.sup_second, r.sup_fourth
                        )
                    })
                    .collect();
                lines.push(format!(
                    "time exponent {:.3} +/- {:.3}, space exponent {:.3} +/- {:.3}",
                    holder.time_exponent,
                    holder.time_exponent_stderr,
                    holder.space_exponent,
                    holder.space_exponent_stderr
                ));
                lines
            }
            Outcome::SingleRun(r) => vec![format!("{} snapshots written", r.snapshots.len())],
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Host {
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub note: String,
}

impl Host {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: rayon::current_num_threads(),
            note: format!(
                "columns {} are wall-clock measurements on this host and are not reproduced by a replay",
                TIMING_COLUMNS.join(", ")
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: Command,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub config: RunConfig,
    pub outputs: Vec<String>,
    pub results: serde_json::Value,
    pub host: Host,
}

impl Manifest {
    pub fn new(cfg: &RunConfig, outcome: &Outcome, outputs: Vec<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: cfg.job.command(),
            seed: cfg.job.seed(),
            samples: cfg.job.samples(),
            config: cfg.clone(),
            outputs,
            results: outcome.summary(),
            host: Host::current(),
        }
    }
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config("manifest", e.to_string()))
}

/// Creates the output directory (with parents) if it does not exist.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes all tables of `outcome` and the manifest into
/// `cfg.output_dir`, returning the written paths (manifest last).
pub fn write_outputs(cfg: &RunConfig, outcome: &Outcome) -> Result<Vec<PathBuf>> {
    ensure_dir(&cfg.output_dir)?;
    let mut paths = Vec::new();
    let mut names = Vec::new();
    for table in outcome.tables() {
        let path = cfg.output_dir.join(&table.name);
        write_csv(&table, &path)?;
        names.push(table.name);
        paths.push(path);
    }
    let manifest = Manifest::new(cfg, outcome, names);
    let path = cfg.output_dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &path)?;
    paths.push(path);
    Ok(paths)
}

/// Executes a configuration and writes its outputs.
pub fn run(cfg: &RunConfig) -> Result<(Outcome, Vec<PathBuf>)> {
    ensure_dir(&cfg.output_dir)?;
    let outcome = execute(&cfg.job)?;
    let paths = write_outputs(cfg, &outcome)?;
    Ok((outcome, paths))
}
