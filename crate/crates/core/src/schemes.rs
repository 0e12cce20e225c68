//! Time integrators for the finite-difference system `dU = (A U + F(U)) dt + Sigma(U) dW`
//! with `A = M^2 D`.
//!
//! * `Sexp`: `U' = e^{A dt} (U + dt F(U) + Sigma(U) dW)`, explicit, no step
//!   size restriction.
//! * `Sem`: `(I - dt A) U' = U + dt F(U) + Sigma(U) dW`.
//! * `Cnm`: `(I - dt/2 A) U' = (I + dt/2 A) U + dt F(U) + Sigma(U) dW`.
//!
//! Drift and noise are always evaluated at the old state.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Propagator, SpectralBasis};
use crate::noise::IncrementBlock;
use crate::problem::{eval_u0_on_grid, Increment, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Sexp,
    Sem,
    Cnm,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 3] = [SchemeKind::Sexp, SchemeKind::Sem, SchemeKind::Cnm];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Sexp => "sexp",
            SchemeKind::Sem => "sem",
            SchemeKind::Cnm => "cnm",
        }
    }

    pub fn needs_linear_solve(self) -> bool {
        !matches!(self, SchemeKind::Sexp)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::config("schemes", format!("unknown scheme `{s}`")))
    }
}

/// Interior values `U^n` at time `t_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub n: usize,
    pub t: f64,
    pub u: Vec<f64>,
}

impl SolverState {
    pub fn initial(problem: &Problem, grid: &GridSpec) -> Self {
        Self {
            n: 0,
            t: 0.0,
            u: eval_u0_on_grid(problem, grid),
        }
    }

    fn cells(&self) -> usize {
        self.u.len() + 1
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.u.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                step: self.n,
                sample: None,
            })
        }
    }
}

/// Tridiagonal matrix; `sub[0]` and `sup[len-1]` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiag {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiag {
    pub fn constant(len: usize, sub: f64, diag: f64, sup: f64) -> Self {
        Self {
            sub: vec![sub; len],
            diag: vec![diag; len],
            sup: vec![sup; len],
        }
    }

    /// `I - dt M^2 D`, the semi-implicit Euler matrix.
    pub fn implicit_euler(cells: usize, dt: f64) -> Self {
        let k = dt * (cells * cells) as f64;
        Self::constant(cells - 1, -k, 1.0 + 2.0 * k, -k)
    }

    /// `I - (dt/2) M^2 D`, the Crank-Nicolson left-hand matrix.
    pub fn crank_nicolson(cells: usize, dt: f64) -> Self {
        let k = 0.5 * dt * (cells * cells) as f64;
        Self::constant(cells - 1, -k, 1.0 + 2.0 * k, -k)
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * x[i];
                if i > 0 {
                    s += self.sub[i] * x[i - 1];
                }
                if i + 1 < n {
                    s += self.sup[i] * x[i + 1];
                }
                s
            })
            .collect()
    }

    pub fn is_diagonally_dominant(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| {
            let off = if i > 0 { self.sub[i].abs() } else { 0.0 }
                + if i + 1 < n { self.sup[i].abs() } else { 0.0 };
            self.diag[i].abs() > off
        })
    }

    /// Forward-elimination coefficients of the Thomas algorithm.
    pub fn factor(&self) -> Result<TridiagFactor> {
        let n = self.len();
        if self.sub.len() != n || self.sup.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: self.sub.len().min(self.sup.len()),
            });
        }
        let mut upper = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        for i in 0..n {
            let pivot = if i == 0 {
                self.diag[0]
            } else {
                self.diag[i] - self.sub[i] * upper[i - 1]
            };
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::ZeroPivot { row: i });
            }
            inv_pivot[i] = 1.0 / pivot;
            if i + 1 < n {
                upper[i] = self.sup[i] * inv_pivot[i];
            }
        }
        Ok(TridiagFactor {
            sub: self.sub.clone(),
            upper,
            inv_pivot,
        })
    }
}

/// Cached elimination for a fixed tridiagonal matrix.
#[derive(Debug, Clone)]
pub struct TridiagFactor {
    sub: Vec<f64>,
    upper: Vec<f64>,
    inv_pivot: Vec<f64>,
}

impl TridiagFactor {
    pub fn len(&self) -> usize {
        self.inv_pivot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inv_pivot.is_empty()
    }

    /// Solves in place: `x` holds the right-hand side on entry.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.len());
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("fma") {
                // SAFETY: the required CPU feature was detected at runtime.
                unsafe { self.solve_fma(x) };
                return;
            }
        }
        self.solve_body(x, |a, b, c| a - b * c);
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "fma")]
    unsafe fn solve_fma(&self, x: &mut [f64]) {
        self.solve_body(x, |a, b, c| (-b).mul_add(c, a));
    }

    /// Forward elimination and back substitution; `nmsub(a, b, c)` is `a - b c`.
    #[inline(always)]
    fn solve_body<F>(&self, x: &mut [f64], nmsub: F)
    where
        F: Fn(f64, f64, f64) -> f64,
    {
        let n = x.len();
        x[0] *= self.inv_pivot[0];
        for i in 1..n {
            x[i] = nmsub(x[i], self.sub[i], x[i - 1]) * self.inv_pivot[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            x[i] = nmsub(x[i], self.upper[i], x[i + 1]);
        }
    }
}

/// Solves `a x = rhs` by the Thomas algorithm.
pub fn tridiag_solve(a: &Tridiag, rhs: &[f64]) -> Result<Vec<f64>> {
    if rhs.len() != a.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: rhs.len(),
        });
    }
    let f = a.factor()?;
    let mut x = rhs.to_vec();
    f.solve_in_place(&mut x);
    Ok(x)
}

/// `F(U)_m = f(t_n, x_m, U_m)`.
pub fn drift_vector(problem: &Problem, state: &SolverState) -> Vec<f64> {
    let mf = state.cells() as f64;
    state
        .u
        .iter()
        .enumerate()
        .map(|(i, &u)| (problem.drift)(state.t, (i + 1) as f64 / mf, u))
        .collect()
}

/// `(Sigma(U) dW)_m = sqrt(M) sigma(t_n, x_m, U_m) dW_m`.
pub fn diffusion_scaled(
    problem: &Problem,
    state: &SolverState,
    dw: &IncrementBlock,
    cells: usize,
) -> Result<Vec<f64>> {
    if dw.dw.len() != state.u.len() || cells != state.cells() {
        return Err(Error::LengthMismatch {
            expected: state.u.len(),
            got: dw.dw.len(),
        });
    }
    let mf = cells as f64;
    let root = mf.sqrt();
    Ok(state
        .u
        .iter()
        .zip(&dw.dw)
        .enumerate()
        .map(|(i, (&u, &w))| root * (problem.diffusion)(state.t, (i + 1) as f64 / mf, u) * w)
        .collect())
}

#[derive(Debug, Clone)]
enum LinearPart {
    Exponential(Propagator),
    Implicit(TridiagFactor),
    CrankNicolson { factor: TridiagFactor, half_k: f64 },
}

/// A scheme bound to a fixed `(M, dt)`, with its linear operator prepared
/// once and shared read-only across samples.
#[derive(Debug, Clone)]
pub struct Stepper {
    kind: SchemeKind,
    cells: usize,
    dt: f64,
    /// Interior nodes `x_m = m / M`.
    nodes: Vec<f64>,
    linear: LinearPart,
}

/// Per-thread scratch buffers for [`Stepper::step`].
#[derive(Debug, Clone)]
pub struct Workspace {
    rhs: Vec<f64>,
    scratch: Vec<f64>,
}

impl Workspace {
    pub fn new(dim: usize) -> Self {
        Self {
            rhs: vec![0.0; dim],
            scratch: vec![0.0; dim],
        }
    }
}

impl Stepper {
    pub fn new(kind: SchemeKind, basis: &SpectralBasis, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        let cells = basis.cells();
        let linear = match kind {
            SchemeKind::Sexp => LinearPart::Exponential(Propagator::new(basis, dt)?),
            SchemeKind::Sem => {
                let a = Tridiag::implicit_euler(cells, dt);
                debug_assert!(a.is_diagonally_dominant());
                LinearPart::Implicit(a.factor()?)
            }
            SchemeKind::Cnm => {
                let a = Tridiag::crank_nicolson(cells, dt);
                debug_assert!(a.is_diagonally_dominant());
                LinearPart::CrankNicolson {
                    factor: a.factor()?,
                    half_k: 0.5 * dt * (cells * cells) as f64,
                }
            }
        };
        let mf = cells as f64;
        Ok(Self {
            kind,
            cells,
            dt,
            nodes: (1..cells).map(|m| m as f64 / mf).collect(),
            linear,
        })
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.cells - 1
    }

    pub fn workspace(&self) -> Workspace {
        let mut ws = Workspace::new(self.dim());
        if let LinearPart::Exponential(p) = &self.linear {
            ws.scratch.resize(p.scratch_len(), 0.0);
        }
        ws
    }

    /// Advances `state` by one step with increments `dw` (length `M - 1`).
    /// `t_next` is the time assigned to the new state.
    pub fn step(
        &self,
        problem: &Problem,
        state: &mut SolverState,
        dw: &[f64],
        t_next: f64,
        ws: &mut Workspace,
    ) -> Result<()> {
        let d = self.dim();
        if state.u.len() != d || dw.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                got: if state.u.len() != d {
                    state.u.len()
                } else {
                    dw.len()
                },
            });
        }
        let root = (self.cells as f64).sqrt();
        let t = state.t;
        let u = &state.u;
        let rhs = &mut ws.rhs;
        let inc = Increment {
            t,
            dt: self.dt,
            scale: root,
            nodes: &self.nodes,
            u,
            dw,
        };
        problem.forcing_into(inc, rhs);
        match &self.linear {
            LinearPart::Exponential(p) => {
                for i in 0..d {
                    rhs[i] += u[i];
                }
                p.apply_into(rhs, &mut state.u, &mut ws.scratch);
            }
            LinearPart::Implicit(f) => {
                for i in 0..d {
                    rhs[i] += u[i];
                }
                f.solve_in_place(rhs);
                state.u.copy_from_slice(rhs);
            }
            LinearPart::CrankNicolson { factor, half_k } => {
                for i in 0..d {
                    let left = if i > 0 { u[i - 1] } else { 0.0 };
                    let right = if i + 1 < d { u[i + 1] } else { 0.0 };
                    rhs[i] += u[i] + half_k * (left - 2.0 * u[i] + right);
                }
                factor.solve_in_place(rhs);
                state.u.copy_from_slice(rhs);
            }
        }
        state.n += 1;
        state.t = t_next;
        state.check_finite()
    }
}

fn single_step(
    kind: SchemeKind,
    basis: &SpectralBasis,
    state: &SolverState,
    problem: &Problem,
    dw: &IncrementBlock,
    dt: f64,
) -> Result<SolverState> {
    let stepper = Stepper::new(kind, basis, dt)?;
    let mut next = state.clone();
    let mut ws = stepper.workspace();
    stepper.step(problem, &mut next, &dw.dw, state.t + dt, &mut ws)?;
    Ok(next)
}

/// One step of the stochastic exponential integrator.
pub fn step_sexp(
    state: &SolverState,
    problem: &Problem,
    dw: &IncrementBlock,
    basis: &SpectralBasis,
    dt: f64,
) -> Result<SolverState> {
    single_step(SchemeKind::Sexp, basis, state, problem, dw, dt)
}

/// One semi-implicit Euler-Maruyama step.
pub fn step_sem(
    state: &SolverState,
    problem: &Problem,
    dw: &IncrementBlock,
    basis: &SpectralBasis,
    dt: f64,
) -> Result<SolverState> {
    single_step(SchemeKind::Sem, basis, state, problem, dw, dt)
}

/// One Crank-Nicolson-Maruyama step.
pub fn step_cnm(
    state: &SolverState,
    problem: &Problem,
    dw: &IncrementBlock,
    basis: &SpectralBasis,
    dt: f64,
) -> Result<SolverState> {
    single_step(SchemeKind::Cnm, basis, state, problem, dw, dt)
}

/// Fully explicit Euler step `U + dt (A U + F(U)) + Sigma(U) dW`, kept as
/// the unstable control for `dt M^2 > 1/2`.
pub fn step_explicit_euler(
    state: &SolverState,
    problem: &Problem,
    dw: &IncrementBlock,
    dt: f64,
) -> Result<SolverState> {
    let cells = state.cells();
    let k = dt * (cells * cells) as f64;
    let drift = drift_vector(problem, state);
    let noise = diffusion_scaled(problem, state, dw, cells)?;
    let u = &state.u;
    let d = u.len();
    let next = (0..d)
        .map(|i| {
            let left = if i > 0 { u[i - 1] } else { 0.0 };
            let right = if i + 1 < d { u[i + 1] } else { 0.0 };
            u[i] + k * (left - 2.0 * u[i] + right) + dt * drift[i] + noise[i]
        })
        .collect();
    Ok(SolverState {
        n: state.n + 1,
        t: state.t + dt,
        u: next,
    })
}

/// Runs `grid.steps()` steps from `u0` and returns the states whose step
/// index is in `record` (in increasing order).
pub fn integrate<I>(
    scheme: SchemeKind,
    problem: &Problem,
    grid: &GridSpec,
    basis: &SpectralBasis,
    noise: I,
    record: &[usize],
) -> Result<Vec<SolverState>>
where
    I: IntoIterator<Item = IncrementBlock>,
{
    let stepper = Stepper::new(scheme, basis, grid.dt())?;
    integrate_with(&stepper, problem, grid, noise, record)
}

/// [`integrate`] with a prepared stepper.
pub fn integrate_with<I>(
    stepper: &Stepper,
    problem: &Problem,
    grid: &GridSpec,
    noise: I,
    record: &[usize],
) -> Result<Vec<SolverState>>
where
    I: IntoIterator<Item = IncrementBlock>,
{
    if basis_mismatch(stepper, grid) {
        return Err(Error::invalid(
            "grid",
            "stepper and grid disagree on M or dt",
        ));
    }
    let n_steps = grid.steps();
    let mut wanted = record.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    if let Some(&last) = wanted.last() {
        if last > n_steps {
            return Err(Error::invalid(
                "record",
                format!("index {last} beyond N = {n_steps}"),
            ));
        }
    }
    let mut out = Vec::with_capacity(wanted.len());
    let mut next_record = wanted.iter().peekable();
    let mut state = SolverState::initial(problem, grid);
    state.check_finite()?;
    if next_record.peek() == Some(&&0) {
        out.push(state.clone());
        next_record.next();
    }
    let mut ws = stepper.workspace();
    let mut blocks = noise.into_iter();
    for n in 0..n_steps {
        let block = blocks.next().ok_or(Error::StreamExhausted {
            expected: n_steps,
            provided: n,
        })?;
        stepper.step(problem, &mut state, &block.dw, grid.time(n + 1), &mut ws)?;
        if next_record.peek() == Some(&&(n + 1)) {
            out.push(state.clone());
            next_record.next();
        }
    }
    Ok(out)
}

fn basis_mismatch(stepper: &Stepper, grid: &GridSpec) -> bool {
    stepper.cells != grid.cells() || (stepper.dt - grid.dt()).abs() > 1e-12 * grid.dt()
}

/// Shared, prepared steppers keyed by scheme for one `(M, dt)`.
pub fn shared_stepper(kind: SchemeKind, basis: &SpectralBasis, dt: f64) -> Result<Arc<Stepper>> {
    Stepper::new(kind, basis, dt).map(Arc::new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{apply_semigroup, build_basis, l2_norm};
    use crate::noise::{coupled_stream, NoisePlan};
    use crate::problem::BuiltinProblem;

    fn zero_problem() -> Problem {
        Problem::new(
            "zero",
            |_, _, _| 0.0,
            |_, _, _| 0.0,
            |x| std::f64::consts::SQRT_2 * (std::f64::consts::PI * x).sin(),
            true,
        )
        .unwrap()
    }

    fn linear_drift(c: f64) -> Problem {
        Problem::new(
            "lin",
            move |_, _, u| c * u,
            |_, _, _| 0.0,
            |x| x * (1.0 - x),
            true,
        )
        .unwrap()
    }

    fn state_from(u: Vec<f64>) -> SolverState {
        SolverState { n: 0, t: 0.0, u }
    }

    fn zeros(dim: usize) -> IncrementBlock {
        IncrementBlock {
            n: 0,
            dw: vec![0.0; dim],
        }
    }

    #[test]
    fn drift_and_diffusion_vectors() {
        let half = Problem::new("h", |_, _, u| u / 2.0, |_, _, _| 1.0, |_| 0.0, true).unwrap();
        let s = state_from(vec![2.0, 4.0]);
        assert_eq!(drift_vector(&half, &s), vec![1.0, 2.0]);
        assert_eq!(drift_vector(&zero_problem(), &s), vec![0.0, 0.0]);
        let aff = Problem::new("a", |_, _, u| 1.0 - u, |_, _, u| 1.0 - u, |_| 0.0, true).unwrap();
        assert_eq!(drift_vector(&aff, &state_from(vec![0.0; 5])), vec![1.0; 5]);

        let dw = IncrementBlock {
            n: 0,
            dw: vec![0.1, -0.2, 0.3],
        };
        let s3 = state_from(vec![1.0; 3]);
        assert_eq!(
            diffusion_scaled(&zero_problem(), &s3, &dw, 4).unwrap(),
            vec![0.0; 3]
        );
        let got = diffusion_scaled(&half, &s3, &dw, 4).unwrap();
        assert_eq!(got, vec![0.2, -0.4, 0.6]);
        assert_eq!(diffusion_scaled(&aff, &s3, &dw, 4).unwrap(), vec![0.0; 3]);
        assert!(diffusion_scaled(&aff, &s3, &zeros(2), 4).is_err());
    }

    #[test]
    fn sexp_is_exact_on_eigenvector_for_any_step() {
        let m = 32;
        let b = build_basis(m).unwrap();
        let p = zero_problem();
        for dt in [1e-4, 0.01, 0.5, 3.0] {
            let mut s = state_from(b.phi_row(1).to_vec());
            for n in 1..=5 {
                s = step_sexp(&s, &p, &zeros(m - 1), &b, dt).unwrap();
                let f = (b.lambdas()[0] * dt * n as f64).exp();
                for (u, phi) in s.u.iter().zip(b.phi_row(1)) {
                    assert!((u - f * phi).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sexp_zero_state_stays_zero() {
        let b = build_basis(8).unwrap();
        let p = Problem::new("s", |_, _, _| 0.0, |_, _, _| 1.0, |_| 0.0, true).unwrap();
        let s = step_sexp(&state_from(vec![0.0; 7]), &p, &zeros(7), &b, 0.1).unwrap();
        assert!(s.u.iter().all(|&v| v == 0.0));
        assert_eq!(s.n, 1);
    }

    #[test]
    fn sexp_matches_definition() {
        let m = 16;
        let b = build_basis(m).unwrap();
        let p = BuiltinProblem::StrongTest.problem();
        let grid = GridSpec::new(m, 1, 0.01).unwrap();
        let s = SolverState::initial(&p, &grid);
        let dw = IncrementBlock {
            n: 0,
            dw: (0..15).map(|i| 0.01 * (i as f64 - 7.0)).collect(),
        };
        let next = step_sexp(&s, &p, &dw, &b, 0.01).unwrap();
        let f = drift_vector(&p, &s);
        let g = diffusion_scaled(&p, &s, &dw, m).unwrap();
        let w: Vec<f64> = (0..15).map(|i| s.u[i] + 0.01 * f[i] + g[i]).collect();
        let want = apply_semigroup(&w, 0.01, &b).unwrap();
        for (a, c) in next.u.iter().zip(&want) {
            assert!((a - c).abs() < 1e-13);
        }
    }

    #[test]
    fn sem_and_cnm_on_eigenvector() {
        let m = 16;
        let b = build_basis(m).unwrap();
        let p = zero_problem();
        let l1 = b.lambdas()[0];
        let dt = 0.01;
        let s = state_from(b.phi_row(1).to_vec());
        let sem = step_sem(&s, &p, &zeros(m - 1), &b, dt).unwrap();
        let cnm = step_cnm(&s, &p, &zeros(m - 1), &b, dt).unwrap();
        let fs = 1.0 / (1.0 - dt * l1);
        let fc = (1.0 + dt * l1 / 2.0) / (1.0 - dt * l1 / 2.0);
        for i in 0..m - 1 {
            assert!((sem.u[i] - fs * b.phi(1, i + 1)).abs() < 1e-12);
            assert!((cnm.u[i] - fc * b.phi(1, i + 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn sem_with_constant_drift() {
        let m = 8;
        let b = build_basis(m).unwrap();
        let c = 0.7;
        let p = Problem::new(
            "c",
            move |_, _, _| c,
            |_, _, _| 0.0,
            |x| x * (1.0 - x),
            true,
        )
        .unwrap();
        let g = GridSpec::new(m, 1, 0.05).unwrap();
        let s = SolverState::initial(&p, &g);
        let next = step_sem(&s, &p, &zeros(7), &b, 0.05).unwrap();
        let rhs: Vec<f64> = s.u.iter().map(|u| u + 0.05 * c).collect();
        let want = tridiag_solve(&Tridiag::implicit_euler(m, 0.05), &rhs).unwrap();
        for (a, w) in next.u.iter().zip(&want) {
            assert!((a - w).abs() < 1e-14);
        }
    }

    #[test]
    fn cnm_without_noise_is_crank_nicolson() {
        let m = 8;
        let b = build_basis(m).unwrap();
        let p = linear_drift(0.3);
        let g = GridSpec::new(m, 1, 0.02).unwrap();
        let s = SolverState::initial(&p, &g);
        let noisy = IncrementBlock {
            n: 0,
            dw: vec![0.5; 7],
        };
        let next = step_cnm(&s, &p, &noisy, &b, 0.02).unwrap();
        let k = 0.5 * 0.02 * 64.0;
        let rhs: Vec<f64> = Tridiag::constant(7, k, 1.0 - 2.0 * k, k)
            .mul(&s.u)
            .iter()
            .zip(&s.u)
            .map(|(a, u)| a + 0.02 * 0.3 * u)
            .collect();
        let want = tridiag_solve(&Tridiag::crank_nicolson(m, 0.02), &rhs).unwrap();
        for (a, w) in next.u.iter().zip(&want) {
            assert!((a - w).abs() < 1e-14);
        }
    }

    #[test]
    fn tridiag_identity_and_roundtrip() {
        let id = Tridiag::constant(5, 0.0, 1.0, 0.0);
        let rhs = vec![1.0, -2.0, 3.0, 0.5, 9.0];
        assert_eq!(tridiag_solve(&id, &rhs).unwrap(), rhs);

        let a = Tridiag::implicit_euler(64, 1e-3);
        assert!(a.is_diagonally_dominant());
        let x: Vec<f64> = (0..63).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let back = tridiag_solve(&a, &a.mul(&x)).unwrap();
        for (p, q) in back.iter().zip(&x) {
            assert!((p - q).abs() < 1e-11);
        }
        assert!(tridiag_solve(&a, &[1.0]).is_err());
    }

    #[test]
    fn tridiag_zero_pivot_detected() {
        let a = Tridiag::constant(3, 1.0, 0.0, 1.0);
        assert!(matches!(
            tridiag_solve(&a, &[1.0; 3]),
            Err(Error::ZeroPivot { row: 0 })
        ));
        let b = Tridiag {
            sub: vec![0.0, 1.0, 0.0],
            diag: vec![1.0, 1.0, 1.0],
            sup: vec![1.0, 0.0, 0.0],
        };
        assert!(matches!(b.factor(), Err(Error::ZeroPivot { row: 1 })));
    }

    #[test]
    fn integrate_records_requested_states() {
        let m = 8;
        let b = build_basis(m).unwrap();
        let p = BuiltinProblem::StrongTest.problem();
        let g = GridSpec::new(m, 8, 0.5).unwrap();
        let plan = NoisePlan::new(3, 0, m, 8, 0.5).unwrap();
        let snaps = integrate(
            SchemeKind::Sexp,
            &p,
            &g,
            &b,
            coupled_stream(&plan, 8).unwrap(),
            &[8, 0, 4],
        )
        .unwrap();
        assert_eq!(snaps.iter().map(|s| s.n).collect::<Vec<_>>(), vec![0, 4, 8]);
        assert_eq!(snaps[2].t, 0.5);
        let again = integrate(
            SchemeKind::Sexp,
            &p,
            &g,
            &b,
            coupled_stream(&plan, 8).unwrap(),
            &[8, 0, 4],
        )
        .unwrap();
        assert_eq!(snaps, again);

        let short: Vec<_> = coupled_stream(&plan, 8).unwrap().take(3).collect();
        assert!(matches!(
            integrate(SchemeKind::Sem, &p, &g, &b, short, &[8]),
            Err(Error::StreamExhausted { provided: 3, .. })
        ));
        assert!(integrate(SchemeKind::Sem, &p, &g, &b, Vec::new(), &[9]).is_err());
    }

    #[test]
    fn integrate_zero_steps_returns_initial_state() {
        // N = 0 is not a valid grid; the recorded initial state is the
        // zero-step trajectory.
        let m = 4;
        let b = build_basis(m).unwrap();
        let p = BuiltinProblem::StrongTest.problem();
        let g = GridSpec::new(m, 1, 0.1).unwrap();
        let plan = NoisePlan::new(3, 0, m, 1, 0.1).unwrap();
        let snaps = integrate(
            SchemeKind::Cnm,
            &p,
            &g,
            &b,
            coupled_stream(&plan, 1).unwrap(),
            &[0],
        )
        .unwrap();
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].u, eval_u0_on_grid(&p, &g));
    }

    #[test]
    fn sexp_linear_exactness_through_integrate() {
        let m = 16;
        let b = build_basis(m).unwrap();
        let p = Problem::new(
            "z",
            |_, _, _| 0.0,
            |_, _, _| 0.0,
            |x| x * (1.0 - x) * (1.0 + x),
            true,
        )
        .unwrap();
        let g = GridSpec::new(m, 10, 1.0).unwrap();
        let blocks = (0..10).map(|n| IncrementBlock {
            n,
            dw: vec![0.0; 15],
        });
        let record: Vec<usize> = (0..=10).collect();
        let snaps = integrate(SchemeKind::Sexp, &p, &g, &b, blocks, &record).unwrap();
        let u0 = eval_u0_on_grid(&p, &g);
        let c0 = crate::grid::dst_forward(&u0, &b).unwrap();
        for s in &snaps {
            let c: Vec<f64> = c0
                .iter()
                .zip(b.lambdas())
                .map(|(c, l)| c * (l * s.t).exp())
                .collect();
            let want = crate::grid::dst_inverse(&c, &b).unwrap();
            for (a, w) in s.u.iter().zip(&want) {
                assert!((a - w).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn no_cfl_restriction_for_sexp_but_explicit_euler_blows_up() {
        let m = 64;
        let b = build_basis(m).unwrap();
        let p = Problem::new("z", |_, _, _| 0.0, |_, _, _| 0.0, |x| x * (1.0 - x), true).unwrap();
        let dt = 0.01;
        assert!(dt * (m * m) as f64 > 2.0);
        let g = GridSpec::new(m, 1, dt).unwrap();
        let mut s = SolverState::initial(&p, &g);
        let mut e = s.clone();
        let mut prev = l2_norm(&s.u);
        for _ in 0..20 {
            s = step_sexp(&s, &p, &zeros(m - 1), &b, dt).unwrap();
            let now = l2_norm(&s.u);
            assert!(now <= prev);
            prev = now;
            e = step_explicit_euler(&e, &p, &zeros(m - 1), dt).unwrap();
        }
        assert!(l2_norm(&e.u) > 1e6);
    }

    #[test]
    fn homogeneity_without_noise() {
        let m = 16;
        let b = build_basis(m).unwrap();
        let p1 = linear_drift(0.4);
        let p2 = p1.with_initial(|x| 2.0 * x * (1.0 - x)).unwrap();
        let g = GridSpec::new(m, 1, 0.01).unwrap();
        for kind in SchemeKind::ALL {
            let s1 = SolverState::initial(&p1, &g);
            let s2 = SolverState::initial(&p2, &g);
            let st = Stepper::new(kind, &b, 0.01).unwrap();
            let mut ws = st.workspace();
            let (mut a, mut c) = (s1.clone(), s2.clone());
            for n in 0..10 {
                st.step(&p1, &mut a, &[0.0; 15], (n + 1) as f64 * 0.01, &mut ws)
                    .unwrap();
                st.step(&p2, &mut c, &[0.0; 15], (n + 1) as f64 * 0.01, &mut ws)
                    .unwrap();
            }
            for (x, y) in a.u.iter().zip(&c.u) {
                assert!((2.0 * x - y).abs() < 1e-12, "{kind}");
            }
        }
    }

    #[test]
    fn nan_aborts_with_step_index() {
        let m = 8;
        let b = build_basis(m).unwrap();
        let p = Problem::new(
            "nan",
            |t, _, u| if t >= 0.5 { f64::NAN } else { -u },
            |_, _, _| 0.0,
            |x| x * (1.0 - x),
            false,
        )
        .unwrap();
        let g = GridSpec::new(m, 4, 1.0).unwrap();
        let blocks = (0..4).map(|n| IncrementBlock {
            n,
            dw: vec![0.0; 7],
        });
        let r = integrate(SchemeKind::Sem, &p, &g, &b, blocks, &[4]);
        assert!(matches!(r, Err(Error::NonFinite { step: 3, .. })));
    }

    #[test]
    fn scheme_names_parse() {
        for k in SchemeKind::ALL {
            assert_eq!(k.name().parse::<SchemeKind>().unwrap(), k);
        }
        assert!("rk4".parse::<SchemeKind>().is_err());
        assert!(!SchemeKind::Sexp.needs_linear_solve());
        assert!(SchemeKind::Cnm.needs_linear_solve());
    }
}
