use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use stochheat::io::{
    self, csv_equal_ignoring_timing, load_config_file, parse_step, read_manifest, Command, Job,
    Overrides, RunConfig, OUTPUT_DIR_ENV,
};
use stochheat::problem::BuiltinProblem;
use stochheat::schemes::SchemeKind;
use stochheat::{Error, Result};

/// Finite-difference discretizations of the stochastic heat equation:
/// convergence studies, work-precision comparisons and statistical checks.
#[derive(Debug, Parser)]
#[command(name = "stochheat", version)]
struct Cli {
    /// Flat TOML file of configuration keys; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Sup mean-square errors against a fine reference and fitted orders.
    StrongOrder(StrongArgs),
    /// Wall time against final-time error for each scheme and step.
    WorkPrecision(WorkPrecisionArgs),
    /// Profiles of one sample path at T for decreasing steps.
    AsConvergence(AsArgs),
    /// Fitted constants of the discrete kernel estimates.
    KernelChecks(KernelArgs),
    /// Uniform moment bounds across M and Hölder exponents of increments.
    MomentChecks(MomentArgs),
    /// Snapshots of a single trajectory.
    SingleRun(SingleArgs),
    /// Re-run the configuration recorded in a manifest and compare outputs.
    Replay(ReplayArgs),
}

fn step_arg(s: &str) -> std::result::Result<f64, String> {
    parse_step(s)
}

fn problem_arg(s: &str) -> std::result::Result<BuiltinProblem, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn scheme_arg(s: &str) -> std::result::Result<SchemeKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Directory for CSV tables and the manifest.
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StrongArgs {
    /// Problem label: strong-test, as-test or nonlip-demo.
    #[arg(long, value_parser = problem_arg)]
    problem: Option<BuiltinProblem>,
    /// Number of spatial cells M.
    #[arg(long)]
    m: Option<usize>,
    /// Final time T.
    #[arg(long)]
    t_final: Option<f64>,
    /// Comma-separated time steps, each a number or 2^-k.
    #[arg(long, value_delimiter = ',', value_parser = step_arg)]
    dt_levels: Option<Vec<f64>>,
    /// Reference time step.
    #[arg(long, value_parser = step_arg)]
    dt_ref: Option<f64>,
    /// Monte Carlo sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Master seed of the noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated schemes among sexp, sem, cnm.
    #[arg(long, value_delimiter = ',', value_parser = scheme_arg)]
    schemes: Option<Vec<SchemeKind>>,
    /// Comma-separated comparison times; every coarse step when absent.
    #[arg(long, value_delimiter = ',', value_parser = step_arg)]
    record_times: Option<Vec<f64>>,
    /// Number of coarsest levels left out of the slope fit.
    #[arg(long)]
    fit_exclude_coarsest: Option<usize>,
    /// Levels with dt <= factor * dt_ref are left out of the slope fit.
    #[arg(long)]
    fit_ref_guard: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct WorkPrecisionArgs {
    /// Problem label: strong-test, as-test or nonlip-demo.
    #[arg(long, value_parser = problem_arg)]
    problem: Option<BuiltinProblem>,
    /// Number of spatial cells M.
    #[arg(long)]
    m: Option<usize>,
    /// Final time T.
    #[arg(long)]
    t_final: Option<f64>,
    /// Comma-separated time steps, each a number or 2^-k.
    #[arg(long, value_delimiter = ',', value_parser = step_arg)]
    dt_levels: Option<Vec<f64>>,
    /// Reference time step.
    #[arg(long, value_parser = step_arg)]
    dt_ref: Option<f64>,
    /// Monte Carlo sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Master seed of the noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated schemes among sexp, sem, cnm.
    #[arg(long, value_delimiter = ',', value_parser = scheme_arg)]
    schemes: Option<Vec<SchemeKind>>,
    /// Timing repetitions; the median is reported.
    #[arg(long)]
    repetitions: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct AsArgs {
    /// Problem label: strong-test, as-test or nonlip-demo.
    #[arg(long, value_parser = problem_arg)]
    problem: Option<BuiltinProblem>,
    /// Number of spatial cells M.
    #[arg(long)]
    m: Option<usize>,
    /// Final time T.
    #[arg(long)]
    t_final: Option<f64>,
    /// Comma-separated time steps, each a number or 2^-k.
    #[arg(long, value_delimiter = ',', value_parser = step_arg)]
    dt_levels: Option<Vec<f64>>,
    /// Reference time step.
    #[arg(long, value_parser = step_arg)]
    dt_ref: Option<f64>,
    /// Master seed of the noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Index of the sample path.
    #[arg(long)]
    sample_index: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct KernelArgs {
    /// Comma-separated grid sizes M.
    #[arg(long, value_delimiter = ',')]
    m_set: Option<Vec<usize>>,
    /// Probe times are 2^-k for k = 0..=probe_levels.
    #[arg(long)]
    probe_levels: Option<u32>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct MomentArgs {
    /// Problem label: strong-test, as-test or nonlip-demo.
    #[arg(long, value_parser = problem_arg)]
    problem: Option<BuiltinProblem>,
    /// Number of spatial cells M for the Hölder increments.
    #[arg(long)]
    m: Option<usize>,
    /// Comma-separated grid sizes M for the moment bounds.
    #[arg(long, value_delimiter = ',')]
    m_set: Option<Vec<usize>>,
    /// Final time T.
    #[arg(long)]
    t_final: Option<f64>,
    /// Time step of the moment runs.
    #[arg(long, value_parser = step_arg)]
    dt: Option<f64>,
    /// Time step of the Hölder runs.
    #[arg(long, value_parser = step_arg)]
    holder_dt: Option<f64>,
    /// Monte Carlo sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Master seed of the noise.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct SingleArgs {
    /// Problem label: strong-test, as-test or nonlip-demo.
    #[arg(long, value_parser = problem_arg)]
    problem: Option<BuiltinProblem>,
    /// Scheme: sexp, sem or cnm.
    #[arg(long, value_parser = scheme_arg)]
    scheme: Option<SchemeKind>,
    /// Number of spatial cells M.
    #[arg(long)]
    m: Option<usize>,
    /// Final time T.
    #[arg(long)]
    t_final: Option<f64>,
    /// Time step.
    #[arg(long, value_parser = step_arg)]
    dt: Option<f64>,
    /// Master seed of the noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Index of the sample path.
    #[arg(long)]
    sample_index: Option<u64>,
    /// Keep every k-th step (the final step is always kept).
    #[arg(long)]
    record_stride: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Manifest written by an earlier run.
    manifest: PathBuf,
    /// Directory for the new outputs (defaults to the manifest's directory).
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

impl Cmd {
    fn overrides(&self) -> Option<(Command, Overrides)> {
        let mut o = Overrides::default();
        let command = match self {
            Cmd::StrongOrder(a) => {
                o.problem = a.problem;
                o.m = a.m;
                o.t_final = a.t_final;
                o.dt_levels = a.dt_levels.clone();
                o.dt_ref = a.dt_ref;
                o.samples = a.samples;
                o.seed = a.seed;
                o.schemes = a.schemes.clone();
                o.record_times = a.record_times.clone();
                o.fit_exclude_coarsest = a.fit_exclude_coarsest;
                o.fit_ref_guard = a.fit_ref_guard;
                o.output_dir = a.out.output_dir.clone();
                Command::StrongOrder
            }
            Cmd::WorkPrecision(a) => {
                o.problem = a.problem;
                o.m = a.m;
                o.t_final = a.t_final;
                o.dt_levels = a.dt_levels.clone();
                o.dt_ref = a.dt_ref;
                o.samples = a.samples;
                o.seed = a.seed;
                o.schemes = a.schemes.clone();
                o.repetitions = a.repetitions;
                o.output_dir = a.out.output_dir.clone();
                Command::WorkPrecision
            }
            Cmd::AsConvergence(a) => {
                o.problem = a.problem;
                o.m = a.m;
                o.t_final = a.t_final;
                o.dt_levels = a.dt_levels.clone();
                o.dt_ref = a.dt_ref;
                o.seed = a.seed;
                o.sample_index = a.sample_index;
                o.output_dir = a.out.output_dir.clone();
                Command::AsConvergence
            }
            Cmd::KernelChecks(a) => {
                o.m_set = a.m_set.clone();
                o.probe_levels = a.probe_levels;
                o.output_dir = a.out.output_dir.clone();
                Command::KernelChecks
            }
            Cmd::MomentChecks(a) => {
                o.problem = a.problem;
                o.m = a.m;
                o.m_set = a.m_set.clone();
                o.t_final = a.t_final;
                o.dt = a.dt;
                o.holder_dt = a.holder_dt;
                o.samples = a.samples;
                o.seed = a.seed;
                o.output_dir = a.out.output_dir.clone();
                Command::MomentChecks
            }
            Cmd::SingleRun(a) => {
                o.problem = a.problem;
                o.scheme = a.scheme;
                o.m = a.m;
                o.t_final = a.t_final;
                o.dt = a.dt;
                o.seed = a.seed;
                o.sample_index = a.sample_index;
                o.record_stride = a.record_stride;
                o.output_dir = a.out.output_dir.clone();
                Command::SingleRun
            }
            Cmd::Replay(_) => return None,
        };
        Some((command, o))
    }
}

/// Renders a default value for help text; steps that are powers of two as
/// `2^k`.
fn render_default(value: &serde_json::Value, step: bool) -> String {
    match value {
        serde_json::Value::Null => "none".to_string(),
        serde_json::Value::Number(n) if n.is_f64() => {
            let v = n.as_f64().unwrap_or(f64::NAN);
            let k = v.log2();
            if step && v > 0.0 && k == k.round() {
                format!("2^{}", k as i32)
            } else {
                format!("{v}")
            }
        }
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Array(items) => items
            .iter()
            .map(|v| render_default(v, step))
            .collect::<Vec<_>>()
            .join(","),
        other => other.to_string(),
    }
}

/// Default value of every key of `command`, taken from the study defaults.
fn defaults(command: Command) -> BTreeMap<&'static str, String> {
    let settings = serde_json::to_value(Job::defaults(command)).expect("defaults serialize")
        ["settings"]
        .clone();
    command
        .keys()
        .iter()
        .map(|&key| {
            let value = match (command, key) {
                (Command::MomentChecks, "m") => &settings["holder"]["m"],
                (Command::MomentChecks, "holder_dt") => &settings["holder"]["dt"],
                (Command::MomentChecks, _) => &settings["moments"][key],
                _ => &settings[key],
            };
            (key, render_default(value, key.contains("dt")))
        })
        .collect()
}

/// The clap command with every flag's help extended by its default.
fn cli_command() -> clap::Command {
    let mut cmd = Cli::command();
    for command in Command::ALL {
        let table = defaults(command);
        cmd = cmd.mut_subcommand(command.name(), |mut sub| {
            for (key, value) in &table {
                sub = sub.mut_arg(*key, |arg| {
                    let help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
                    arg.help(format!("{help} [default: {value}]"))
                });
            }
            sub.mut_arg("output_dir", |arg| {
                let help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
                arg.help(format!("{help} [default: ${OUTPUT_DIR_ENV}, else ./out]"))
            })
        });
    }
    cmd
}

fn run_job(cfg: &RunConfig) -> Result<()> {
    eprintln!(
        "running {} into {}",
        cfg.job.command(),
        cfg.output_dir.display()
    );
    let (outcome, paths) = io::run(cfg)?;
    for line in outcome.report_lines() {
        println!("{line}");
    }
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn replay(args: &ReplayArgs) -> Result<()> {
    let manifest = read_manifest(&args.manifest)?;
    let source_dir = args
        .manifest
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let mut cfg = manifest.config.clone();
    cfg.output_dir = args
        .output_dir
        .clone()
        .unwrap_or_else(|| source_dir.clone());
    let recorded: Vec<(String, Option<String>)> = manifest
        .outputs
        .iter()
        .map(|name| (name.clone(), fs::read_to_string(source_dir.join(name)).ok()))
        .collect();
    run_job(&cfg)?;
    let mut differing = Vec::new();
    for (name, before) in recorded {
        let Some(before) = before else {
            println!("{name}: no recorded copy to compare");
            continue;
        };
        let path = cfg.output_dir.join(&name);
        let after = fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
        if csv_equal_ignoring_timing(&before, &after) {
            println!("{name}: reproduced");
        } else {
            println!("{name}: DIFFERS");
            differing.push(name);
        }
    }
    if differing.is_empty() {
        Ok(())
    } else {
        Err(Error::ReplayMismatch { files: differing })
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Cmd::Replay(args) = &cli.command {
        return replay(args);
    }
    let (command, flags) = cli.command.overrides().expect("non-replay subcommand");
    let file = match &cli.config {
        Some(path) => load_config_file(path)?,
        None => Overrides::default(),
    };
    let cfg = RunConfig::resolve(command, &file, &flags)?;
    run_job(&cfg)
}

fn main() -> ExitCode {
    let matches = match cli_command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
