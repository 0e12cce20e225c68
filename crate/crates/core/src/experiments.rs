//! Monte Carlo studies: strong temporal order, work-precision, pathwise
//! convergence profiles, and statistical checks of the moment and Hölder
//! bounds.
//!
//! Every study integrates all of its time levels in lockstep on one noise
//! realization per sample: fine increments are generated once and coarsened
//! on the fly, so a sample never stores more than one fine block. Samples
//! are processed in fixed-size chunks (in parallel when threads are
//! available) and the chunk results are merged in sample order, so every
//! reported number is independent of scheduling.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::green::{check_bound, BoundFit, BoundId, ProbeGrid, ProbeRow};
use crate::grid::{steps_for, with_boundary, GridSpec, SpectralBasis};
use crate::noise::{sample_block, DyadicCoarsener, NoisePlan};
use crate::problem::{BuiltinProblem, Problem};
use crate::schemes::{integrate, SchemeKind, SolverState, Stepper};

/// Samples per reduction chunk.
const CHUNK: usize = 8;

/// `2^-k`.
pub fn dyadic(k: i32) -> f64 {
    2f64.powi(-k)
}

/// Step sizes `2^-lo, 2^-(lo+1), ..., 2^-hi`.
pub fn dyadic_levels(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(dyadic).collect()
}

/// `log2(dt / dt_ref)` if the ratio is a power of two.
fn dyadic_ratio(dt: f64, dt_ref: f64) -> Option<usize> {
    let r = dt / dt_ref;
    if !(r.is_finite() && r >= 1.0 - 1e-12) {
        return None;
    }
    let k = r.log2().round();
    ((k.exp2() * dt_ref - dt).abs() <= 1e-9 * dt).then_some(k as usize)
}

/// One time level of a coupled run: a prepared stepper, its grid, and its
/// coarsening exponent relative to the finest level.
struct Track<'a> {
    stepper: &'a Stepper,
    grid: GridSpec,
    log2: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct TrackOutcome {
    aborted_at: Option<usize>,
    wall: f64,
}

/// Runs every track over one noise realization. After each successful step
/// of track `j`, `visit(j, states)` is called; on a fine step where several
/// tracks advance, finer tracks advance first, so all tracks that reached a
/// common time are visible together.
fn run_coupled<F>(
    problem: &Problem,
    plan: &NoisePlan,
    tracks: &[Track<'_>],
    timed: bool,
    mut visit: F,
) -> Result<Vec<TrackOutcome>>
where
    F: FnMut(usize, &[SolverState]),
{
    let dim = plan.dim();
    let max_level = tracks.iter().map(|t| t.log2).max().unwrap_or(0);
    let mut by_level = vec![Vec::new(); max_level + 1];
    for (j, t) in tracks.iter().enumerate() {
        by_level[t.log2].push(j);
    }
    let mut states: Vec<SolverState> = tracks
        .iter()
        .map(|t| SolverState::initial(problem, &t.grid))
        .collect();
    let mut ws: Vec<_> = tracks.iter().map(|t| t.stepper.workspace()).collect();
    let mut out = vec![TrackOutcome::default(); tracks.len()];
    let mut alive = vec![true; tracks.len()];
    for (j, s) in states.iter().enumerate() {
        if s.check_finite().is_err() {
            alive[j] = false;
            out[j].aborted_at = Some(0);
        }
    }
    let mut coarsener = DyadicCoarsener::new(dim, max_level);
    let mut fine = vec![0.0; dim];
    let mut failure = None;
    for i in 0..plan.n_ref {
        plan.fill_block(i, &mut fine)?;
        coarsener.push(&fine, |level, dw| {
            for &j in &by_level[level] {
                if !alive[j] || failure.is_some() {
                    continue;
                }
                let track = &tracks[j];
                let t_next = track.grid.time(states[j].n + 1);
                let start = timed.then(Instant::now);
                let res = track
                    .stepper
                    .step(problem, &mut states[j], dw, t_next, &mut ws[j]);
                if let Some(s) = start {
                    out[j].wall += s.elapsed().as_secs_f64();
                }
                match res {
                    Ok(()) => visit(j, &states),
                    Err(Error::NonFinite { step, .. }) => {
                        alive[j] = false;
                        out[j].aborted_at = Some(step);
                    }
                    Err(e) => failure = Some(e),
                }
            }
        });
        if let Some(e) = failure.take() {
            return Err(e);
        }
        if alive.iter().all(|a| !a) {
            break;
        }
    }
    Ok(out)
}

/// Runs `per_sample` for samples `0..samples` and folds the per-chunk
/// accumulators in sample order. The result does not depend on the number
/// of threads.
fn ordered_reduce<A, I, S, M>(samples: usize, init: I, per_sample: S, merge: M) -> Result<A>
where
    A: Send,
    I: Fn() -> A + Sync,
    S: Fn(u64, &mut A) -> Result<()> + Sync,
    M: Fn(&mut A, A),
{
    let chunks: Vec<(usize, usize)> = (0..samples)
        .step_by(CHUNK)
        .map(|lo| (lo, (lo + CHUNK).min(samples)))
        .collect();
    let mut total = init();
    let batch = 2 * rayon::current_num_threads().max(1);
    for group in chunks.chunks(batch) {
        let parts: Vec<A> = group
            .par_iter()
            .map(|&(lo, hi)| {
                let mut acc = init();
                for s in lo..hi {
                    per_sample(s as u64, &mut acc)?;
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        for p in parts {
            merge(&mut total, p);
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Order fitting

/// Least-squares fit of `log2(error)` against `log2(dt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

/// Fits `log2(error) = a + slope log2(dt)`; `stderr` is the standard error
/// of the slope. Needs at least three points with distinct `dt` and
/// positive errors.
pub fn fit_order(points: &[(f64, f64)]) -> Result<OrderFit> {
    if points.len() < 3 {
        return Err(Error::invalid(
            "points",
            format!("need at least 3, got {}", points.len()),
        ));
    }
    if let Some(p) = points.iter().find(|p| !(p.0 > 0.0 && p.0.is_finite())) {
        return Err(Error::invalid(
            "dt",
            format!("must be positive, got {}", p.0),
        ));
    }
    if let Some(p) = points.iter().find(|p| !(p.1 > 0.0 && p.1.is_finite())) {
        return Err(Error::invalid(
            "error",
            format!("must be positive, got {}", p.1),
        ));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.log2()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.log2()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::invalid("dt", "values must be distinct"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let stderr = (ssr / (n - 2.0) / sxx).sqrt();
    Ok(OrderFit {
        slope,
        stderr,
        intercept,
    })
}

// ---------------------------------------------------------------------------
// Strong order

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongStudyConfig {
    pub problem: BuiltinProblem,
    pub m: usize,
    pub t_final: f64,
    pub dt_levels: Vec<f64>,
    pub dt_ref: f64,
    pub samples: usize,
    pub seed: u64,
    pub schemes: Vec<SchemeKind>,
    /// Times at which errors are compared; `None` means every coarse step.
    pub record_times: Option<Vec<f64>>,
    /// Number of coarsest levels left out of the slope fit.
    pub fit_exclude_coarsest: usize,
    /// Levels with `dt <= fit_ref_guard * dt_ref` are left out of the fit.
    pub fit_ref_guard: f64,
}

impl Default for StrongStudyConfig {
    fn default() -> Self {
        Self {
            problem: BuiltinProblem::StrongTest,
            m: 64,
            t_final: 0.5,
            dt_levels: dyadic_levels(4, 12),
            dt_ref: dyadic(14),
            samples: 200,
            seed: 1,
            schemes: vec![SchemeKind::Sexp, SchemeKind::Sem, SchemeKind::Cnm],
            record_times: None,
            fit_exclude_coarsest: 2,
            fit_ref_guard: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LevelPlan {
    dt: f64,
    log2: usize,
    steps: usize,
    /// `slot[n]` is the record slot of coarse step `n`, if recorded.
    slot: Vec<Option<usize>>,
    recorded: usize,
}

/// Checks the shared invariants of coupled multi-level studies and returns
/// the fine step count and per-level plans sorted from coarse to fine.
fn plan_levels(
    m: usize,
    t_final: f64,
    dt_levels: &[f64],
    dt_ref: f64,
    record_times: Option<&[f64]>,
) -> Result<(usize, Vec<LevelPlan>)> {
    if m < 2 {
        return Err(Error::config(
            "m",
            format!("need at least 2 cells, got {m}"),
        ));
    }
    if !(t_final.is_finite() && t_final > 0.0) {
        return Err(Error::config(
            "t_final",
            format!("must be positive, got {t_final}"),
        ));
    }
    if !(dt_ref.is_finite() && dt_ref > 0.0) {
        return Err(Error::config(
            "dt_ref",
            format!("must be positive, got {dt_ref}"),
        ));
    }
    let n_ref = steps_for(dt_ref, t_final).ok_or_else(|| {
        Error::config("dt_ref", format!("{dt_ref} does not divide T = {t_final}"))
    })?;
    if dt_levels.is_empty() {
        return Err(Error::config("dt_levels", "no levels given"));
    }
    let mut levels = Vec::new();
    for &dt in dt_levels {
        let log2 = dyadic_ratio(dt, dt_ref).ok_or_else(|| {
            Error::config(
                "dt_ref",
                format!("dt level {dt} is not dt_ref = {dt_ref} times a power of two"),
            )
        })?;
        if n_ref % (1usize << log2) != 0 {
            return Err(Error::config(
                "dt_levels",
                format!("{dt} does not divide T = {t_final}"),
            ));
        }
        let steps = n_ref >> log2;
        let mut slot = vec![None; steps + 1];
        let recorded = match record_times {
            None => {
                for (k, s) in slot.iter_mut().enumerate().skip(1) {
                    *s = Some(k - 1);
                }
                steps
            }
            Some(times) => {
                let mut count = 0;
                for &t in times {
                    let pos = t / dt;
                    let n = pos.round();
                    if !(t > 0.0 && t <= t_final * (1.0 + 1e-12))
                        || (pos - n).abs() > 1e-9 * pos.max(1.0)
                    {
                        return Err(Error::config(
                            "record_times",
                            format!("{t} is not a positive step time of level dt = {dt}"),
                        ));
                    }
                    let n = n as usize;
                    if slot[n].is_none() {
                        slot[n] = Some(count);
                        count += 1;
                    }
                }
                count
            }
        };
        levels.push(LevelPlan {
            dt,
            log2,
            steps,
            slot,
            recorded,
        });
    }
    levels.sort_by(|a, b| b.dt.total_cmp(&a.dt));
    levels.dedup_by(|a, b| a.log2 == b.log2);
    Ok((n_ref, levels))
}

impl StrongStudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    fn plan(&self) -> Result<(usize, Vec<LevelPlan>)> {
        if self.samples < 2 {
            return Err(Error::config(
                "samples",
                format!("need at least 2, got {}", self.samples),
            ));
        }
        if self.schemes.is_empty() {
            return Err(Error::config("schemes", "no scheme selected"));
        }
        if !(self.fit_ref_guard >= 0.0 && self.fit_ref_guard.is_finite()) {
            return Err(Error::config(
                "fit_ref_guard",
                "must be a finite non-negative factor",
            ));
        }
        plan_levels(
            self.m,
            self.t_final,
            &self.dt_levels,
            self.dt_ref,
            self.record_times.as_deref(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub dt: f64,
    /// `max` over compared `(t_n, x_m)` of the sample mean of the squared error.
    pub sup_msq_error: f64,
    /// Monte Carlo standard error of the sample mean at the maximizing point.
    pub msq_stderr: f64,
    pub rms_error: f64,
    pub argmax_t: f64,
    pub argmax_x: f64,
    /// Summed stepping time of this level over all samples (report only).
    pub wall_time_s: f64,
    pub samples_used: usize,
    pub aborted_samples: usize,
    /// `(sample, step)` of the first aborted sample, if any.
    pub first_abort: Option<(u64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeReport {
    pub scheme: SchemeKind,
    /// Ordered from coarse to fine.
    pub levels: Vec<LevelRecord>,
    /// Slope of `log2(sup_msq_error)` against `log2(dt)`; NaN if fewer than
    /// three usable levels fall in the fit window.
    pub fitted_slope: f64,
    pub slope_stderr: f64,
    pub fit_levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub config: StrongStudyConfig,
    pub problem: String,
    /// The scheme used for the reference solution.
    pub reference: SchemeKind,
    pub schemes: Vec<SchemeReport>,
}

impl ErrorReport {
    pub fn scheme(&self, kind: SchemeKind) -> Option<&SchemeReport> {
        self.schemes.iter().find(|s| s.scheme == kind)
    }
}

#[derive(Debug, Clone)]
struct ErrorAcc {
    sum2: Vec<f64>,
    sum4: Vec<f64>,
    used: usize,
    aborted: usize,
    first_abort: Option<(u64, usize)>,
    wall: f64,
}

impl ErrorAcc {
    fn new(len: usize) -> Self {
        Self {
            sum2: vec![0.0; len],
            sum4: vec![0.0; len],
            used: 0,
            aborted: 0,
            first_abort: None,
            wall: 0.0,
        }
    }

    fn merge(&mut self, other: ErrorAcc) {
        for (a, b) in self.sum2.iter_mut().zip(&other.sum2) {
            *a += b;
        }
        for (a, b) in self.sum4.iter_mut().zip(&other.sum4) {
            *a += b;
        }
        self.used += other.used;
        self.aborted += other.aborted;
        self.first_abort = self.first_abort.or(other.first_abort);
        self.wall += other.wall;
    }

    fn add_sample(&mut self, errors: &[f64]) {
        for ((s2, s4), e2) in self.sum2.iter_mut().zip(self.sum4.iter_mut()).zip(errors) {
            *s2 += e2;
            *s4 += e2 * e2;
        }
        self.used += 1;
    }
}

/// Strong error study on a built-in problem.
pub fn strong_error_study(cfg: &StrongStudyConfig) -> Result<ErrorReport> {
    strong_error_study_with(&cfg.problem.problem(), cfg)
}

/// Strong error study on an arbitrary problem; `cfg.problem` is only used
/// as a label.
///
/// For each sample, the reference (exponential integrator at `dt_ref`) and
/// every `(scheme, level)` pair run on the same noise path. Squared errors
/// at the compared `(t_n, x_m)` are averaged over the samples that finished
/// without a non-finite value; the supremum over points is then taken.
pub fn strong_error_study_with(problem: &Problem, cfg: &StrongStudyConfig) -> Result<ErrorReport> {
    let (n_ref, levels) = cfg.plan()?;
    let basis = SpectralBasis::new(cfg.m)?;
    let dim = basis.dim();
    let reference = Stepper::new(SchemeKind::Sexp, &basis, cfg.dt_ref)?;
    let mut steppers = Vec::new();
    for &kind in &cfg.schemes {
        for level in &levels {
            steppers.push((kind, Stepper::new(kind, &basis, level.dt)?));
        }
    }
    let grid_for = |steps: usize| GridSpec::new(cfg.m, steps, cfg.t_final);
    let mut tracks = vec![Track {
        stepper: &reference,
        grid: grid_for(n_ref)?,
        log2: 0,
    }];
    let mut track_level = vec![usize::MAX];
    for (i, (_, stepper)) in steppers.iter().enumerate() {
        let level = &levels[i % levels.len()];
        tracks.push(Track {
            stepper,
            grid: grid_for(level.steps)?,
            log2: level.log2,
        });
        track_level.push(i % levels.len());
    }
    let sizes: Vec<usize> = track_level
        .iter()
        .map(|&k| {
            if k == usize::MAX {
                0
            } else {
                levels[k].recorded * dim
            }
        })
        .collect();
    let init = || {
        sizes
            .iter()
            .map(|&len| ErrorAcc::new(len))
            .collect::<Vec<_>>()
    };
    let per_sample = |sample: u64, acc: &mut Vec<ErrorAcc>| -> Result<()> {
        let plan = NoisePlan::new(cfg.seed, sample, cfg.m, n_ref, cfg.t_final)?;
        let mut buf: Vec<Vec<f64>> = sizes.iter().map(|&len| vec![0.0; len]).collect();
        let outcome = run_coupled(problem, &plan, &tracks, true, |j, states| {
            if j == 0 {
                return;
            }
            let level = &levels[track_level[j]];
            let state = &states[j];
            let Some(slot) = level.slot[state.n] else {
                return;
            };
            let reference = &states[0];
            if reference.n != state.n << level.log2 {
                return;
            }
            let dst = &mut buf[j][slot * dim..(slot + 1) * dim];
            for ((d, a), b) in dst.iter_mut().zip(&state.u).zip(&reference.u) {
                let e = a - b;
                *d = e * e;
            }
        })?;
        let ref_abort = outcome[0].aborted_at;
        for j in 1..tracks.len() {
            acc[j].wall += outcome[j].wall;
            match ref_abort.or(outcome[j].aborted_at) {
                Some(step) => {
                    acc[j].aborted += 1;
                    acc[j].first_abort.get_or_insert((sample, step));
                }
                None => acc[j].add_sample(&buf[j]),
            }
        }
        Ok(())
    };
    let merge = |total: &mut Vec<ErrorAcc>, part: Vec<ErrorAcc>| {
        for (a, b) in total.iter_mut().zip(part) {
            a.merge(b);
        }
    };
    let acc = ordered_reduce(cfg.samples, init, per_sample, merge)?;

    let mut schemes = Vec::new();
    for (s, &kind) in cfg.schemes.iter().enumerate() {
        let mut records = Vec::new();
        for (k, level) in levels.iter().enumerate() {
            let a = &acc[1 + s * levels.len() + k];
            if problem.lipschitz && a.aborted * 10 > cfg.samples {
                return Err(Error::AbortBudget {
                    aborted: a.aborted as u64,
                    samples: cfg.samples as u64,
                    budget_pct: 10,
                });
            }
            records.push(level_record(a, level, dim, cfg));
        }
        let window = fit_window(&records, cfg);
        let points: Vec<(f64, f64)> = window
            .iter()
            .map(|&i| (records[i].dt, records[i].sup_msq_error))
            .collect();
        let (slope, stderr) = match fit_order(&points) {
            Ok(f) => (f.slope, f.stderr),
            Err(_) => (f64::NAN, f64::NAN),
        };
        schemes.push(SchemeReport {
            scheme: kind,
            fit_levels: points.iter().map(|p| p.0).collect(),
            levels: records,
            fitted_slope: slope,
            slope_stderr: stderr,
        });
    }
    Ok(ErrorReport {
        config: cfg.clone(),
        problem: problem.label.clone(),
        reference: SchemeKind::Sexp,
        schemes,
    })
}

fn level_record(
    a: &ErrorAcc,
    level: &LevelPlan,
    dim: usize,
    cfg: &StrongStudyConfig,
) -> LevelRecord {
    let mut rec = LevelRecord {
        dt: level.dt,
        sup_msq_error: f64::NAN,
        msq_stderr: f64::NAN,
        rms_error: f64::NAN,
        argmax_t: f64::NAN,
        argmax_x: f64::NAN,
        wall_time_s: a.wall,
        samples_used: a.used,
        aborted_samples: a.aborted,
        first_abort: a.first_abort,
    };
    if a.used == 0 || a.sum2.is_empty() {
        return rec;
    }
    let n = a.used as f64;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, s) in a.sum2.iter().enumerate() {
        let mean = s / n;
        if mean > best.0 {
            best = (mean, i);
        }
    }
    let (mean, i) = best;
    let var = if a.used > 1 {
        ((a.sum4[i] - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        f64::NAN
    };
    let slot = i / dim;
    let step = level
        .slot
        .iter()
        .position(|s| *s == Some(slot))
        .unwrap_or(0);
    rec.sup_msq_error = mean;
    rec.msq_stderr = (var / n).sqrt();
    rec.rms_error = mean.sqrt();
    rec.argmax_t = step as f64 * cfg.t_final / level.steps as f64;
    rec.argmax_x = (i % dim + 1) as f64 / cfg.m as f64;
    rec
}

/// Indices of the levels used in the slope fit: all but the
/// `fit_exclude_coarsest` coarsest levels, minus those with
/// `dt <= fit_ref_guard * dt_ref` and those with a zero or undefined error.
fn fit_window(records: &[LevelRecord], cfg: &StrongStudyConfig) -> Vec<usize> {
    (0..records.len())
        .filter(|&i| i >= cfg.fit_exclude_coarsest)
        .filter(|&i| records[i].dt > cfg.fit_ref_guard * cfg.dt_ref * (1.0 + 1e-12))
        .filter(|&i| records[i].sup_msq_error > 0.0)
        .collect()
}

// ---------------------------------------------------------------------------
// Work-precision

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkPrecisionConfig {
    pub problem: BuiltinProblem,
    pub m: usize,
    pub t_final: f64,
    pub dt_levels: Vec<f64>,
    pub dt_ref: f64,
    pub samples: usize,
    pub seed: u64,
    pub schemes: Vec<SchemeKind>,
    /// Timing repetitions of each sample; the median is kept.
    pub repetitions: usize,
}

impl Default for WorkPrecisionConfig {
    fn default() -> Self {
        Self {
            problem: BuiltinProblem::StrongTest,
            m: 64,
            t_final: 1.0,
            dt_levels: dyadic_levels(4, 10),
            dt_ref: dyadic(14),
            samples: 100,
            seed: 1,
            schemes: SchemeKind::ALL.to_vec(),
            repetitions: 5,
        }
    }
}

impl WorkPrecisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 1 {
            return Err(Error::config("samples", "need at least 1"));
        }
        if self.repetitions < 1 {
            return Err(Error::config("repetitions", "need at least 1"));
        }
        if self.schemes.is_empty() {
            return Err(Error::config("schemes", "no scheme selected"));
        }
        plan_levels(self.m, self.t_final, &self.dt_levels, self.dt_ref, None).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkPrecisionRow {
    pub scheme: SchemeKind,
    pub dt: f64,
    /// Sum over samples of the median over repetitions of the time to
    /// integrate that sample.
    pub wall_time_total_s: f64,
    /// Per-repetition totals over all samples.
    pub wall_time_reps_s: Vec<f64>,
    /// Root mean square over samples and grid points of the error at `T`
    /// against the same scheme at `dt_ref`.
    pub avg_final_error: f64,
    pub samples_used: usize,
    pub aborted_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkPrecisionReport {
    pub config: WorkPrecisionConfig,
    pub rows: Vec<WorkPrecisionRow>,
}

impl WorkPrecisionReport {
    pub fn row(&self, scheme: SchemeKind, dt: f64) -> Option<&WorkPrecisionRow> {
        self.rows
            .iter()
            .find(|r| r.scheme == scheme && (r.dt - dt).abs() <= 1e-12 * dt)
    }
}

/// Middle value (mean of the two middle values for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Work-precision table: for every scheme and level, the median total wall
/// time over `repetitions` and the final-time error against the same scheme
/// at `dt_ref`.
///
/// Accuracy runs are coupled and sample-parallel. Timing runs are
/// single-threaded: for each sample the coarse increments are materialized
/// first, then each `(level, scheme)` integration is timed on its own, with
/// the scheme order rotated between repetitions.
pub fn work_precision_study(cfg: &WorkPrecisionConfig) -> Result<WorkPrecisionReport> {
    cfg.validate()?;
    let problem = cfg.problem.problem();
    let (n_ref, levels) = plan_levels(cfg.m, cfg.t_final, &cfg.dt_levels, cfg.dt_ref, None)?;
    let basis = SpectralBasis::new(cfg.m)?;
    let dim = basis.dim();
    let ns = cfg.schemes.len();
    let nl = levels.len();

    // accuracy: per scheme, reference at dt_ref followed by its levels
    let mut steppers = Vec::new();
    for &kind in &cfg.schemes {
        steppers.push(Stepper::new(kind, &basis, cfg.dt_ref)?);
        for level in &levels {
            steppers.push(Stepper::new(kind, &basis, level.dt)?);
        }
    }
    let mut tracks = Vec::new();
    for (i, stepper) in steppers.iter().enumerate() {
        let k = i % (nl + 1);
        let (steps, log2) = if k == 0 {
            (n_ref, 0)
        } else {
            (levels[k - 1].steps, levels[k - 1].log2)
        };
        tracks.push(Track {
            stepper,
            grid: GridSpec::new(cfg.m, steps, cfg.t_final)?,
            log2,
        });
    }
    let init = || vec![ErrorAcc::new(1); tracks.len()];
    let per_sample = |sample: u64, acc: &mut Vec<ErrorAcc>| -> Result<()> {
        let plan = NoisePlan::new(cfg.seed, sample, cfg.m, n_ref, cfg.t_final)?;
        let mut sq = vec![0.0; tracks.len()];
        let outcome = run_coupled(&problem, &plan, &tracks, false, |j, states| {
            let k = j % (nl + 1);
            if k == 0 || states[j].n != levels[k - 1].steps {
                return;
            }
            let r = &states[j - k];
            if r.n == n_ref {
                sq[j] = states[j]
                    .u
                    .iter()
                    .zip(&r.u)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        })?;
        for j in 0..tracks.len() {
            let k = j % (nl + 1);
            if k == 0 {
                continue;
            }
            match outcome[j - k].aborted_at.or(outcome[j].aborted_at) {
                Some(step) => {
                    acc[j].aborted += 1;
                    acc[j].first_abort.get_or_insert((sample, step));
                }
                None => acc[j].add_sample(&[sq[j]]),
            }
        }
        Ok(())
    };
    let merge = |total: &mut Vec<ErrorAcc>, part: Vec<ErrorAcc>| {
        for (a, b) in total.iter_mut().zip(part) {
            a.merge(b);
        }
    };
    let acc = ordered_reduce(cfg.samples, init, per_sample, merge)?;
    for (j, a) in acc.iter().enumerate() {
        if j % (nl + 1) != 0 && problem.lipschitz && a.aborted * 10 > cfg.samples {
            return Err(Error::AbortBudget {
                aborted: a.aborted as u64,
                samples: cfg.samples as u64,
                budget_pct: 10,
            });
        }
    }

    // timing
    let timed: Vec<Vec<Stepper>> = cfg
        .schemes
        .iter()
        .map(|&kind| {
            levels
                .iter()
                .map(|l| Stepper::new(kind, &basis, l.dt))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let grids: Vec<GridSpec> = levels
        .iter()
        .map(|l| GridSpec::new(cfg.m, l.steps, cfg.t_final))
        .collect::<Result<_>>()?;
    let mut times = vec![vec![vec![0.0; cfg.repetitions]; nl]; ns];
    let mut totals = vec![vec![0.0; nl]; ns];
    let mut block = vec![vec![0.0; cfg.repetitions]; ns];
    let max_level = levels.iter().map(|l| l.log2).max().unwrap_or(0);
    // set-up shared by every run stays outside the timed region
    let initial: Vec<SolverState> = grids
        .iter()
        .map(|g| SolverState::initial(&problem, g))
        .collect();
    let mut workspaces: Vec<Vec<_>> = timed
        .iter()
        .map(|row| row.iter().map(|st| st.workspace()).collect())
        .collect();
    let mut state = initial[0].clone();
    for sample in 0..cfg.samples as u64 {
        let plan = NoisePlan::new(cfg.seed, sample, cfg.m, n_ref, cfg.t_final)?;
        let increments = materialize_levels(&plan, &levels, max_level)?;
        // repetitions of one level run back to back
        for k in 0..nl {
            #[allow(clippy::needless_range_loop)]
            for rep in 0..cfg.repetitions {
                for o in 0..ns {
                    let s = (o + rep) % ns;
                    let stepper = &timed[s][k];
                    let grid = &grids[k];
                    let ws = &mut workspaces[s][k];
                    let start = Instant::now();
                    state.clone_from(&initial[k]);
                    for (n, dw) in increments[k].chunks_exact(dim).enumerate() {
                        if stepper
                            .step(&problem, &mut state, dw, grid.time(n + 1), ws)
                            .is_err()
                        {
                            break;
                        }
                    }
                    std::hint::black_box(&state);
                    block[s][rep] = start.elapsed().as_secs_f64();
                }
            }
            for s in 0..ns {
                totals[s][k] += median(&block[s]);
                for (t, b) in times[s][k].iter_mut().zip(&block[s]) {
                    *t += b;
                }
            }
        }
    }

    let mut rows = Vec::new();
    for (s, &kind) in cfg.schemes.iter().enumerate() {
        for (k, level) in levels.iter().enumerate() {
            let a = &acc[s * (nl + 1) + 1 + k];
            let err = if a.used > 0 {
                (a.sum2[0] / (a.used * dim) as f64).sqrt()
            } else {
                f64::NAN
            };
            rows.push(WorkPrecisionRow {
                scheme: kind,
                dt: level.dt,
                wall_time_total_s: totals[s][k],
                wall_time_reps_s: times[s][k].clone(),
                avg_final_error: err,
                samples_used: a.used,
                aborted_samples: a.aborted,
            });
        }
    }
    Ok(WorkPrecisionReport {
        config: cfg.clone(),
        rows,
    })
}

/// Coarse increments of every level for one sample, each level flattened
/// step by step.
fn materialize_levels(
    plan: &NoisePlan,
    levels: &[LevelPlan],
    max_level: usize,
) -> Result<Vec<Vec<f64>>> {
    let dim = plan.dim();
    let mut out: Vec<Vec<f64>> = levels
        .iter()
        .map(|l| Vec::with_capacity(l.steps * dim))
        .collect();
    let mut index = vec![None; max_level + 1];
    for (k, l) in levels.iter().enumerate() {
        index[l.log2] = Some(k);
    }
    let mut coarsener = DyadicCoarsener::new(dim, max_level);
    let mut fine = vec![0.0; dim];
    for i in 0..plan.n_ref {
        plan.fill_block(i, &mut fine)?;
        coarsener.push(&fine, |level, dw| {
            if let Some(k) = index[level] {
                out[k].extend_from_slice(dw);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pathwise convergence profiles

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsProfilesConfig {
    pub problem: BuiltinProblem,
    pub m: usize,
    pub t_final: f64,
    pub dt_levels: Vec<f64>,
    pub dt_ref: f64,
    pub seed: u64,
    pub sample_index: u64,
}

impl Default for AsProfilesConfig {
    fn default() -> Self {
        Self {
            problem: BuiltinProblem::AsTest,
            m: 64,
            t_final: 0.5,
            dt_levels: vec![dyadic(4), dyadic(6), dyadic(8), dyadic(10), dyadic(12)],
            dt_ref: dyadic(14),
            seed: 1,
            sample_index: 0,
        }
    }
}

impl AsProfilesConfig {
    pub fn validate(&self) -> Result<()> {
        plan_levels(self.m, self.t_final, &self.dt_levels, self.dt_ref, None).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileLevel {
    pub dt: f64,
    /// `u(T, x_m)` for `m = 0..=M`, boundary zeros included.
    pub profile: Vec<f64>,
    /// `max_m |u(T, x_m) - u_ref(T, x_m)|`.
    pub sup_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsProfiles {
    pub config: AsProfilesConfig,
    pub x: Vec<f64>,
    pub reference: Vec<f64>,
    /// Ordered from coarse to fine.
    pub levels: Vec<ProfileLevel>,
}

impl AsProfiles {
    /// Fraction of adjacent level pairs over which the distance decreases.
    pub fn decreasing_fraction(&self) -> f64 {
        let pairs = self.levels.windows(2).count();
        if pairs == 0 {
            return f64::NAN;
        }
        let down = self
            .levels
            .windows(2)
            .filter(|w| w[1].sup_distance < w[0].sup_distance)
            .count();
        down as f64 / pairs as f64
    }
}

/// Profiles at `T` of one sample path for every level and the exponential
/// reference at `dt_ref`, all driven by the same noise.
pub fn as_convergence_profiles(cfg: &AsProfilesConfig) -> Result<AsProfiles> {
    let (n_ref, levels) = plan_levels(cfg.m, cfg.t_final, &cfg.dt_levels, cfg.dt_ref, None)?;
    let problem = cfg.problem.problem();
    let basis = SpectralBasis::new(cfg.m)?;
    let reference = Stepper::new(SchemeKind::Sexp, &basis, cfg.dt_ref)?;
    let steppers: Vec<Stepper> = levels
        .iter()
        .map(|l| Stepper::new(SchemeKind::Sexp, &basis, l.dt))
        .collect::<Result<_>>()?;
    let mut tracks = vec![Track {
        stepper: &reference,
        grid: GridSpec::new(cfg.m, n_ref, cfg.t_final)?,
        log2: 0,
    }];
    for (l, s) in levels.iter().zip(&steppers) {
        tracks.push(Track {
            stepper: s,
            grid: GridSpec::new(cfg.m, l.steps, cfg.t_final)?,
            log2: l.log2,
        });
    }
    let plan = NoisePlan::new(cfg.seed, cfg.sample_index, cfg.m, n_ref, cfg.t_final)?;
    let mut finals: Vec<Option<Vec<f64>>> = vec![None; tracks.len()];
    let outcome = run_coupled(&problem, &plan, &tracks, false, |j, states| {
        let steps = if j == 0 { n_ref } else { levels[j - 1].steps };
        if states[j].n == steps {
            finals[j] = Some(crate::grid::with_boundary(&states[j].u));
        }
    })?;
    if let Some(step) = outcome.iter().find_map(|o| o.aborted_at) {
        return Err(Error::NonFinite {
            step,
            sample: Some(cfg.sample_index),
        });
    }
    let reference = finals[0].take().expect("reference reached T");
    let levels = levels
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let profile = finals[k + 1].take().expect("level reached T");
            let sup_distance = profile
                .iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            ProfileLevel {
                dt: l.dt,
                profile,
                sup_distance,
            }
        })
        .collect();
    Ok(AsProfiles {
        config: cfg.clone(),
        x: (0..=cfg.m).map(|i| i as f64 / cfg.m as f64).collect(),
        reference,
        levels,
    })
}

// ---------------------------------------------------------------------------
// Moment bounds

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentConfig {
    pub problem: BuiltinProblem,
    pub m_set: Vec<usize>,
    pub t_final: f64,
    pub dt: f64,
    pub samples: usize,
    pub seed: u64,
}

impl MomentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 1 {
            return Err(Error::config("samples", "need at least 1"));
        }
        if self.m_set.is_empty() {
            return Err(Error::config("m_set", "no grid sizes given"));
        }
        for &m in &self.m_set {
            plan_levels(m, self.t_final, &[self.dt], self.dt, None).map_err(|e| match e {
                Error::Config { key, reason } if key == "m" => Error::config("m_set", reason),
                Error::Config { key, reason } if key == "dt_ref" => Error::config("dt", reason),
                other => other,
            })?;
        }
        Ok(())
    }
}

impl Default for MomentConfig {
    fn default() -> Self {
        Self {
            problem: BuiltinProblem::StrongTest,
            m_set: vec![16, 32, 64],
            t_final: 0.5,
            dt: dyadic(10),
            samples: 256,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub m: usize,
    /// `max_{n,m}` of the sample mean of `U^2`.
    pub sup_second: f64,
    /// `max_{n,m}` of the sample mean of `U^4`.
    pub sup_fourth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub config: MomentConfig,
    pub rows: Vec<MomentRow>,
    pub ratio_second: f64,
    pub ratio_fourth: f64,
    /// Both suprema finite for every `M` and the second-moment max/min
    /// ratio across `M` below 3.
    pub passed: bool,
}

/// Sup-in-`(t_n, x_m)` estimates of `E|U|^2` and `E|U|^4` for the
/// exponential integrator, for each `M` in the configuration.
pub fn moment_bound_check(cfg: &MomentConfig) -> Result<MomentReport> {
    moment_bound_check_with(&cfg.problem.problem(), cfg)
}

pub fn moment_bound_check_with(problem: &Problem, cfg: &MomentConfig) -> Result<MomentReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &m in &cfg.m_set {
        let (n, _) = plan_levels(m, cfg.t_final, &[cfg.dt], cfg.dt, None)?;
        let basis = SpectralBasis::new(m)?;
        let stepper = Stepper::new(SchemeKind::Sexp, &basis, cfg.dt)?;
        let grid = GridSpec::new(m, n, cfg.t_final)?;
        let dim = m - 1;
        let len = (n + 1) * dim;
        let tracks = [Track {
            stepper: &stepper,
            grid,
            log2: 0,
        }];
        let init = || (vec![0.0; len], vec![0.0; len]);
        let per_sample = |sample: u64, acc: &mut (Vec<f64>, Vec<f64>)| -> Result<()> {
            let plan = NoisePlan::new(cfg.seed, sample, m, n, cfg.t_final)?;
            let u0 = SolverState::initial(problem, &grid);
            for (i, &u) in u0.u.iter().enumerate() {
                acc.0[i] += u * u;
                acc.1[i] += u * u * u * u;
            }
            let outcome = run_coupled(problem, &plan, &tracks, false, |_, states| {
                let s = &states[0];
                let base = s.n * dim;
                for (i, &u) in s.u.iter().enumerate() {
                    acc.0[base + i] += u * u;
                    acc.1[base + i] += u * u * u * u;
                }
            })?;
            match outcome[0].aborted_at {
                Some(step) => Err(Error::NonFinite {
                    step,
                    sample: Some(sample),
                }),
                None => Ok(()),
            }
        };
        let merge = |t: &mut (Vec<f64>, Vec<f64>), p: (Vec<f64>, Vec<f64>)| {
            for (a, b) in t.0.iter_mut().zip(&p.0) {
                *a += b;
            }
            for (a, b) in t.1.iter_mut().zip(&p.1) {
                *a += b;
            }
        };
        let (s2, s4) = ordered_reduce(cfg.samples, init, per_sample, merge)?;
        let k = cfg.samples as f64;
        rows.push(MomentRow {
            m,
            sup_second: s2.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / k)),
            sup_fourth: s4.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / k)),
        });
    }
    let ratio = |f: fn(&MomentRow) -> f64| {
        let hi = rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let lo = rows.iter().map(f).fold(f64::INFINITY, f64::min);
        hi / lo
    };
    let ratio_second = ratio(|r| r.sup_second);
    let ratio_fourth = ratio(|r| r.sup_fourth);
    let finite = rows
        .iter()
        .all(|r| r.sup_second.is_finite() && r.sup_fourth.is_finite());
    Ok(MomentReport {
        config: cfg.clone(),
        rows,
        ratio_second,
        ratio_fourth,
        passed: finite && ratio_second < 3.0,
    })
}

// ---------------------------------------------------------------------------
// Hölder increments

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolderConfig {
    pub problem: BuiltinProblem,
    pub m: usize,
    pub t_final: f64,
    pub dt: f64,
    pub samples: usize,
    pub seed: u64,
    /// Time lags in steps of `dt`.
    pub time_lags: Vec<usize>,
    /// Space lags in cells.
    pub space_lags: Vec<usize>,
}

impl HolderConfig {
    /// Checks the configuration and returns the number of steps.
    pub fn validate(&self) -> Result<usize> {
        let (n, _) =
            plan_levels(self.m, self.t_final, &[self.dt], self.dt, None).map_err(|e| match e {
                Error::Config { key, reason } if key == "dt_ref" => Error::config("dt", reason),
                other => other,
            })?;
        if self.samples < 1 {
            return Err(Error::config("samples", "need at least 1"));
        }
        let start = n.div_ceil(8);
        if self.time_lags.len() < 3 || self.space_lags.len() < 3 {
            return Err(Error::config(
                "time_lags",
                "need at least 3 time and 3 space lags",
            ));
        }
        if let Some(&l) = self.time_lags.iter().find(|&&l| l == 0 || start + l > n) {
            return Err(Error::config(
                "time_lags",
                format!("lag {l} outside 1..={}", n - start),
            ));
        }
        if let Some(&l) = self.space_lags.iter().find(|&&l| l == 0 || l >= self.m) {
            return Err(Error::config(
                "space_lags",
                format!("lag {l} outside 1..{}", self.m),
            ));
        }
        Ok(n)
    }
}

impl Default for HolderConfig {
    fn default() -> Self {
        Self {
            problem: BuiltinProblem::StrongTest,
            m: 64,
            t_final: 0.5,
            dt: dyadic(14),
            samples: 256,
            seed: 1,
            time_lags: vec![16, 32, 64, 128, 256, 512],
            space_lags: vec![1, 2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementRow {
    pub lag: f64,
    pub mean_square: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub config: HolderConfig,
    pub time: Vec<IncrementRow>,
    pub space: Vec<IncrementRow>,
    pub time_exponent: f64,
    pub time_exponent_stderr: f64,
    pub space_exponent: f64,
    pub space_exponent_stderr: f64,
    /// Time exponent within `0.5 +- 0.15`.
    pub time_passed: bool,
    /// Space exponent within `1.0 +- 0.3`.
    pub space_passed: bool,
}

/// Mean-square increments of the exponential-integrator solution.
///
/// Time increments `E|u(t,x) - u(s,x)|^2` are averaged over all step pairs
/// with `s >= T/8` and all interior `x`; space increments
/// `E|u(T,x+h) - u(T,x)|^2` over all grid pairs. Exponents are least-squares
/// slopes in log-log scale.
pub fn holder_increment_check(cfg: &HolderConfig) -> Result<HolderReport> {
    let n = cfg.validate()?;
    let problem = cfg.problem.problem();
    let start = n.div_ceil(8);
    let m = cfg.m;
    let dim = m - 1;
    let basis = SpectralBasis::new(m)?;
    let stepper = Stepper::new(SchemeKind::Sexp, &basis, cfg.dt)?;
    let grid = GridSpec::new(m, n, cfg.t_final)?;
    let tracks = [Track {
        stepper: &stepper,
        grid,
        log2: 0,
    }];
    let nt = cfg.time_lags.len();
    let init = || vec![0.0; nt + cfg.space_lags.len()];
    let per_sample = |sample: u64, acc: &mut Vec<f64>| -> Result<()> {
        let plan = NoisePlan::new(cfg.seed, sample, m, n, cfg.t_final)?;
        let mut path = vec![0.0; (n + 1 - start) * dim];
        let outcome = run_coupled(&problem, &plan, &tracks, false, |_, states| {
            let s = &states[0];
            if s.n >= start {
                path[(s.n - start) * dim..(s.n - start + 1) * dim].copy_from_slice(&s.u);
            }
        })?;
        if let Some(step) = outcome[0].aborted_at {
            return Err(Error::NonFinite {
                step,
                sample: Some(sample),
            });
        }
        for (i, &lag) in cfg.time_lags.iter().enumerate() {
            let pairs = n + 1 - start - lag;
            let mut s = 0.0;
            for a in 0..pairs {
                let (u, v) = (
                    &path[a * dim..(a + 1) * dim],
                    &path[(a + lag) * dim..(a + lag + 1) * dim],
                );
                s += u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            }
            acc[i] += s / (pairs * dim) as f64;
        }
        let last = crate::grid::with_boundary(&path[(n - start) * dim..]);
        for (i, &lag) in cfg.space_lags.iter().enumerate() {
            let pairs = m + 1 - lag;
            let s: f64 = (0..pairs).map(|a| (last[a + lag] - last[a]).powi(2)).sum();
            acc[nt + i] += s / pairs as f64;
        }
        Ok(())
    };
    let merge = |t: &mut Vec<f64>, p: Vec<f64>| {
        for (a, b) in t.iter_mut().zip(&p) {
            *a += b;
        }
    };
    let acc = ordered_reduce(cfg.samples, init, per_sample, merge)?;
    let k = cfg.samples as f64;
    let time: Vec<IncrementRow> = cfg
        .time_lags
        .iter()
        .enumerate()
        .map(|(i, &l)| IncrementRow {
            lag: l as f64 * cfg.dt,
            mean_square: acc[i] / k,
        })
        .collect();
    let space: Vec<IncrementRow> = cfg
        .space_lags
        .iter()
        .enumerate()
        .map(|(i, &l)| IncrementRow {
            lag: l as f64 / m as f64,
            mean_square: acc[nt + i] / k,
        })
        .collect();
    let fit = |rows: &[IncrementRow]| {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.lag, r.mean_square)).collect();
        fit_order(&pts)
            .map(|f| (f.slope, f.stderr))
            .unwrap_or((f64::NAN, f64::NAN))
    };
    let (te, tse) = fit(&time);
    let (se, sse) = fit(&space);
    Ok(HolderReport {
        config: cfg.clone(),
        time,
        space,
        time_exponent: te,
        time_exponent_stderr: tse,
        space_exponent: se,
        space_exponent_stderr: sse,
        time_passed: (te - 0.5).abs() <= 0.15,
        space_passed: (se - 1.0).abs() <= 0.3,
    })
}

// ---------------------------------------------------------------------------
// Non-Lipschitz demonstration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlipDemoConfig {
    pub m: usize,
    pub t_final: f64,
    pub dt_levels: Vec<f64>,
    pub dt_ref: f64,
    pub samples: usize,
    pub seeds: Vec<u64>,
}

impl Default for NonlipDemoConfig {
    fn default() -> Self {
        Self {
            m: 32,
            t_final: 0.25,
            dt_levels: dyadic_levels(4, 10),
            dt_ref: dyadic(12),
            samples: 64,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlipDemoReport {
    pub config: NonlipDemoConfig,
    pub reports: Vec<ErrorReport>,
    pub dt: Vec<f64>,
    /// Median over seeds of `sup_msq_error`, coarse to fine.
    pub median_error: Vec<f64>,
    pub aborted_fraction: f64,
    pub monotone: bool,
    pub passed: bool,
}

/// Runs the exponential-integrator strong study on the non-Lipschitz
/// problem once per seed and summarizes the per-level medians.
pub fn nonlip_demo(cfg: &NonlipDemoConfig) -> Result<NonlipDemoReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("seeds", "no seeds given"));
    }
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let study = StrongStudyConfig {
            problem: BuiltinProblem::NonlipDemo,
            m: cfg.m,
            t_final: cfg.t_final,
            dt_levels: cfg.dt_levels.clone(),
            dt_ref: cfg.dt_ref,
            samples: cfg.samples,
            seed,
            schemes: vec![SchemeKind::Sexp],
            record_times: None,
            fit_exclude_coarsest: 2,
            fit_ref_guard: 4.0,
        };
        reports.push(strong_error_study(&study)?);
    }
    let levels = &reports[0].schemes[0].levels;
    let dt: Vec<f64> = levels.iter().map(|l| l.dt).collect();
    let median_error: Vec<f64> = (0..levels.len())
        .map(|k| {
            let v: Vec<f64> = reports
                .iter()
                .map(|r| r.schemes[0].levels[k].sup_msq_error)
                .collect();
            median(&v)
        })
        .collect();
    let aborted: usize = reports
        .iter()
        .flat_map(|r| r.schemes[0].levels.iter().map(|l| l.aborted_samples))
        .sum();
    let attempts = reports.len() * levels.len() * cfg.samples;
    let aborted_fraction = aborted as f64 / attempts as f64;
    let monotone =
        median_error.iter().all(|e| e.is_finite()) && median_error.windows(2).all(|w| w[1] <= w[0]);
    Ok(NonlipDemoReport {
        config: cfg.clone(),
        reports,
        dt,
        median_error,
        aborted_fraction,
        monotone,
        passed: monotone && aborted_fraction < 0.05,
    })
}

// ---------------------------------------------------------------------------
// Kernel estimates

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelCheckConfig {
    pub m_set: Vec<usize>,
    /// Probe times are `2^-k` for `k = 0..=probe_levels`.
    pub probe_levels: u32,
    /// Exponent sets for the time-increment estimate; each set gets its own
    /// fitted constant.
    pub alpha_sets: Vec<Vec<f64>>,
}

impl Default for KernelCheckConfig {
    fn default() -> Self {
        Self {
            m_set: vec![8, 16, 32, 64],
            probe_levels: 12,
            alpha_sets: vec![vec![0.6, 0.75, 0.9], vec![1.0, 1.5, 2.0, 2.4]],
        }
    }
}

impl KernelCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_set.is_empty() {
            return Err(Error::config("m_set", "no grid sizes given"));
        }
        if let Some(m) = self.m_set.iter().find(|&&m| m < 2) {
            return Err(Error::config(
                "m_set",
                format!("need at least 2 cells, got {m}"),
            ));
        }
        if self.probe_levels < 1 {
            return Err(Error::config("probe_levels", "need at least one level"));
        }
        if self.alpha_sets.is_empty() || self.alpha_sets.iter().any(|s| s.is_empty()) {
            return Err(Error::config(
                "alpha_sets",
                "each set needs at least one exponent",
            ));
        }
        if let Some(a) = self
            .alpha_sets
            .iter()
            .flatten()
            .find(|&&a| !(a > 0.5 && a < 2.5))
        {
            return Err(Error::config(
                "alpha_sets",
                format!("{a} outside (1/2, 5/2)"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCheck {
    pub bound: BoundId,
    pub alphas: Vec<f64>,
    pub fit: BoundFit,
    pub rows: Vec<ProbeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCheckReport {
    pub config: KernelCheckConfig,
    pub checks: Vec<KernelCheck>,
    pub passed: bool,
}

/// Fits the constants of the three discrete kernel estimates, one fit per
/// exponent set for the time-increment estimate.
pub fn kernel_bound_checks(cfg: &KernelCheckConfig) -> Result<KernelCheckReport> {
    cfg.validate()?;
    let mut jobs = vec![(BoundId::I, Vec::new()), (BoundId::II, Vec::new())];
    jobs.extend(cfg.alpha_sets.iter().map(|s| (BoundId::III, s.clone())));
    let mut checks = Vec::with_capacity(jobs.len());
    for (bound, alphas) in jobs {
        let probes = ProbeGrid::dyadic(cfg.probe_levels, alphas.clone());
        let (fit, rows) = check_bound(bound, &cfg.m_set, &probes)?;
        checks.push(KernelCheck {
            bound,
            alphas,
            fit,
            rows,
        });
    }
    let passed = checks.iter().all(|c| c.fit.passed);
    Ok(KernelCheckReport {
        config: cfg.clone(),
        checks,
        passed,
    })
}

// ---------------------------------------------------------------------------
// Single trajectory

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleRunConfig {
    pub problem: BuiltinProblem,
    pub scheme: SchemeKind,
    pub m: usize,
    pub t_final: f64,
    pub dt: f64,
    pub seed: u64,
    pub sample_index: u64,
    /// Every `record_stride`-th step is kept, plus the final one.
    pub record_stride: usize,
}

impl Default for SingleRunConfig {
    fn default() -> Self {
        Self {
            problem: BuiltinProblem::StrongTest,
            scheme: SchemeKind::Sexp,
            m: 64,
            t_final: 0.5,
            dt: dyadic(10),
            seed: 1,
            sample_index: 0,
            record_stride: 64,
        }
    }
}

impl SingleRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::config(
                "m",
                format!("need at least 2 cells, got {}", self.m),
            ));
        }
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            return Err(Error::config(
                "t_final",
                format!("must be positive, got {}", self.t_final),
            ));
        }
        steps_for(self.dt, self.t_final).ok_or_else(|| {
            Error::config(
                "dt",
                format!("{} does not divide T = {}", self.dt, self.t_final),
            )
        })?;
        if self.record_stride == 0 {
            return Err(Error::config("record_stride", "must be positive"));
        }
        Ok(())
    }
}

/// Snapshots of one trajectory, each including the zero boundary values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub config: SingleRunConfig,
    pub x: Vec<f64>,
    /// `(step, time, values at x)`.
    pub snapshots: Vec<(usize, f64, Vec<f64>)>,
}

/// Integrates one sample path with its own (uncoupled) noise at `dt`.
pub fn single_run(cfg: &SingleRunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let grid = GridSpec::with_step(cfg.m, cfg.dt, cfg.t_final)?;
    let basis = SpectralBasis::new(cfg.m)?;
    let plan = NoisePlan::new(cfg.seed, cfg.sample_index, cfg.m, grid.steps(), cfg.t_final)?;
    let n_steps = grid.steps();
    let mut record: Vec<usize> = (0..=n_steps).step_by(cfg.record_stride).collect();
    if record.last() != Some(&n_steps) {
        record.push(n_steps);
    }
    let noise = (0..n_steps).map(|n| sample_block(&plan, n));
    let blocks: Vec<_> = noise.collect::<Result<_>>()?;
    let states = integrate(
        cfg.scheme,
        &cfg.problem.problem(),
        &grid,
        &basis,
        blocks,
        &record,
    )?;
    Ok(Trajectory {
        config: cfg.clone(),
        x: (0..=cfg.m).map(|i| i as f64 / cfg.m as f64).collect(),
        snapshots: states
            .into_iter()
            .map(|s| (s.n, s.t, with_boundary(&s.u)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_exact_power_laws() {
        let pts: Vec<(f64, f64)> = (1..8).map(|k| (dyadic(k), 3.0 * dyadic(k))).collect();
        let f = fit_order(&pts).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12 && f.stderr < 1e-12);
        let pts: Vec<(f64, f64)> = (1..8)
            .map(|k| (dyadic(k), 0.2 * dyadic(k).sqrt()))
            .collect();
        assert!((fit_order(&pts).unwrap().slope - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_order(&[(1.0, 1.0), (0.5, 0.5)]).is_err());
        assert!(fit_order(&[(1.0, 1.0), (0.5, 0.0), (0.25, 0.1)]).is_err());
        assert!(fit_order(&[(1.0, 1.0), (1.0, 0.5), (1.0, 0.1)]).is_err());
    }

    #[test]
    fn dyadic_ratio_detection() {
        assert_eq!(dyadic_ratio(dyadic(4), dyadic(14)), Some(10));
        assert_eq!(dyadic_ratio(dyadic(14), dyadic(14)), Some(0));
        assert_eq!(dyadic_ratio(3.0 * dyadic(14), dyadic(14)), None);
        assert_eq!(dyadic_ratio(dyadic(15), dyadic(14)), None);
    }

    #[test]
    fn plan_checks_divisibility_and_records() {
        assert!(plan_levels(8, 0.5, &[dyadic(2)], 3.0 * dyadic(8), None).is_err());
        assert!(plan_levels(8, 0.5, &[dyadic(2)], dyadic(6), Some(&[0.3])).is_err());
        let (n_ref, levels) = plan_levels(
            8,
            0.5,
            &[dyadic(4), dyadic(2)],
            dyadic(6),
            Some(&[0.25, 0.5]),
        )
        .unwrap();
        assert_eq!(n_ref, 32);
        assert_eq!(levels[0].dt, dyadic(2));
        assert_eq!(levels[0].recorded, 2);
        assert_eq!(levels[0].slot[1], Some(0));
        assert_eq!(levels[1].slot[8], Some(1));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn reduction_is_ordered() {
        let sum = ordered_reduce(
            37,
            Vec::new,
            |s, acc: &mut Vec<u64>| {
                acc.push(s);
                Ok(())
            },
            |t, p| t.extend(p),
        )
        .unwrap();
        assert_eq!(sum, (0..37).collect::<Vec<_>>());
    }

    fn small_study() -> StrongStudyConfig {
        StrongStudyConfig {
            m: 8,
            t_final: 0.25,
            dt_levels: vec![dyadic(3), dyadic(5), dyadic(7)],
            dt_ref: dyadic(7),
            samples: 6,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn reference_level_has_zero_error() {
        let r = strong_error_study(&small_study()).unwrap();
        let sexp = r.scheme(SchemeKind::Sexp).unwrap();
        let last = sexp.levels.last().unwrap();
        assert_eq!(last.dt, dyadic(7));
        assert_eq!(last.sup_msq_error, 0.0);
        assert!(sexp.levels[0].sup_msq_error > 0.0);
        assert_eq!(last.samples_used, 6);
        // other schemes at dt_ref still differ from the reference
        assert!(r.scheme(SchemeKind::Sem).unwrap().levels[2].sup_msq_error > 0.0);
    }

    #[test]
    fn study_is_reproducible() {
        let a = strong_error_study(&small_study()).unwrap();
        let b = strong_error_study(&small_study()).unwrap();
        for (x, y) in a.schemes.iter().zip(&b.schemes) {
            for (l, k) in x.levels.iter().zip(&y.levels) {
                assert_eq!(l.sup_msq_error.to_bits(), k.sup_msq_error.to_bits());
            }
        }
    }

    #[test]
    fn study_rejects_bad_config() {
        let mut c = small_study();
        c.samples = 1;
        assert!(
            matches!(strong_error_study(&c), Err(Error::Config { key, .. }) if key == "samples")
        );
        let mut c = small_study();
        c.dt_ref = 3.0 * dyadic(9);
        assert!(matches!(strong_error_study(&c), Err(Error::Config { .. })));
    }

    #[test]
    fn abort_budget_is_enforced() {
        let p = Problem::new(
            "blow",
            |_, _, u| u * u * 1e3,
            |_, _, _| 1.0,
            |x| (std::f64::consts::PI * x).sin(),
            true,
        )
        .unwrap();
        let r = strong_error_study_with(&p, &small_study());
        assert!(matches!(r, Err(Error::AbortBudget { .. })), "{r:?}");
        let p = Problem::new(
            "blow",
            |_, _, u| u * u * 1e3,
            |_, _, _| 1.0,
            |x| (std::f64::consts::PI * x).sin(),
            false,
        )
        .unwrap();
        let r = strong_error_study_with(&p, &small_study()).unwrap();
        let l = &r.schemes[0].levels[0];
        assert_eq!(l.aborted_samples, 6);
        assert!(l.sup_msq_error.is_nan());
        assert!(l.first_abort.is_some());
    }

    #[test]
    fn profiles_reference_level_distance_zero() {
        let cfg = AsProfilesConfig {
            m: 8,
            t_final: 0.25,
            dt_levels: vec![dyadic(3), dyadic(6)],
            dt_ref: dyadic(6),
            ..Default::default()
        };
        let p = as_convergence_profiles(&cfg).unwrap();
        assert_eq!(p.levels[1].sup_distance, 0.0);
        assert!(p.levels[0].sup_distance > 0.0);
        assert_eq!(p.reference.len(), 9);
        assert_eq!(p.reference[0], 0.0);
        let other = as_convergence_profiles(&AsProfilesConfig {
            sample_index: 1,
            ..cfg
        })
        .unwrap();
        assert_ne!(other.levels[0].sup_distance, p.levels[0].sup_distance);
    }

    #[test]
    fn deterministic_moments_decay() {
        let p = Problem::new(
            "heat",
            |_, _, _| 0.0,
            |_, _, _| 0.0,
            |x| (std::f64::consts::PI * x).sin(),
            true,
        )
        .unwrap();
        let cfg = MomentConfig {
            m_set: vec![8, 16],
            t_final: 0.25,
            dt: dyadic(6),
            samples: 3,
            ..Default::default()
        };
        let r = moment_bound_check_with(&p, &cfg).unwrap();
        for row in &r.rows {
            assert!((row.sup_second - 1.0).abs() < 1e-12, "{row:?}");
            assert!((row.sup_fourth - 1.0).abs() < 1e-12);
        }
        assert!(r.passed);
    }

    #[test]
    fn holder_rejects_bad_lags() {
        let cfg = HolderConfig {
            time_lags: vec![0],
            ..Default::default()
        };
        assert!(holder_increment_check(&cfg).is_err());
        let cfg = HolderConfig {
            space_lags: vec![64],
            ..Default::default()
        };
        assert!(holder_increment_check(&cfg).is_err());
    }
}
