//! The discrete Green kernel
//! `G^M(t,x,y) = sum_j exp(lambda_j t) phi_j^M(x) phi_j(kappa_M(y))`,
//! the single-step mild-form oracle for the exponential integrator, and
//! numerical checks of the kernel's regularity estimates.
//!
//! Everything here evaluates the sines directly instead of reading the
//! tables in [`SpectralBasis`], so it can serve as an independent route
//! for the propagator used by the schemes.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SpectralBasis;
use crate::problem::Problem;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelQuery {
    pub m: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

impl KernelQuery {
    pub fn new(m: usize, t: f64, x: f64, y: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid("M", "need at least 2 cells"));
        }
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::invalid("t", format!("must be >= 0, got {t}")));
        }
        for (name, v) in [("x", x), ("y", y)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        Ok(Self { m, t, x, y })
    }
}

/// `sqrt(2) sin(j pi l / M)` with the argument reduced exactly.
fn phi_at_node(j: usize, l: usize, m: usize) -> f64 {
    let r = (j * l) % (2 * m);
    SQRT_2 * (r as f64 * PI / m as f64).sin()
}

/// `phi_j^M(x)`: nodal values, linear on each cell `(x_l, x_{l+1}]`.
pub fn phi_interpolated(j: usize, x: f64, m: usize) -> f64 {
    let mx = m as f64 * x;
    let l = mx.floor();
    if l == mx {
        return phi_at_node(j, l as usize, m);
    }
    let l = l as usize;
    let w = mx - l as f64;
    let a = phi_at_node(j, l, m);
    let b = phi_at_node(j, l + 1, m);
    a + w * (b - a)
}

fn lambda(j: usize, m: usize) -> f64 {
    let mf = m as f64;
    let s = (j as f64 * PI / (2.0 * mf)).sin();
    -4.0 * mf * mf * s * s
}

/// Evaluates `G^M(t, x, y)`.
pub fn green_eval(q: &KernelQuery, basis: &SpectralBasis) -> Result<f64> {
    let q = KernelQuery::new(q.m, q.t, q.x, q.y)?;
    if basis.cells() != q.m {
        return Err(Error::invalid("M", "query and basis disagree"));
    }
    let cell = ((q.m as f64 * q.y).floor() as usize).min(q.m);
    Ok((1..q.m)
        .map(|j| {
            (basis.lambdas()[j - 1] * q.t).exp()
                * phi_interpolated(j, q.x, q.m)
                * phi_at_node(j, cell, q.m)
        })
        .sum())
}

/// `int_0^1 |G^M(t,x,y)|^2 dy`, exact because the kernel is piecewise
/// constant in `y` and the sampled sines are orthonormal:
/// the integral equals `sum_j exp(2 lambda_j t) phi_j^M(x)^2`.
pub fn green_l2y(m: usize, t: f64, x: f64, basis: &SpectralBasis) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid("t", format!("must be > 0, got {t}")));
    }
    KernelQuery::new(m, t, x, 0.0)?;
    if basis.cells() != m {
        return Err(Error::invalid("M", "query and basis disagree"));
    }
    Ok((1..m)
        .map(|j| {
            let p = phi_interpolated(j, x, m);
            (2.0 * basis.lambdas()[j - 1] * t).exp() * p * p
        })
        .sum())
}

/// Right-hand side of the frozen-integrand mild form for one step of size
/// `dt` starting from interior values `u` at time `t`, with every
/// `y`-integral done exactly cell by cell.
///
/// Cell `l` (`y` in `[x_l, x_{l+1})`) carries `U_l`, and the Brownian sheet
/// over `[t, t + dt] x [x_l, x_{l+1}]` is `dW_l / sqrt(M)`.
pub fn mild_step_oracle(
    u: &[f64],
    t: f64,
    problem: &Problem,
    dt: f64,
    dw: &[f64],
    basis: &SpectralBasis,
) -> Result<Vec<f64>> {
    let m = basis.cells();
    if u.len() != m - 1 || dw.len() != m - 1 {
        return Err(Error::LengthMismatch {
            expected: m - 1,
            got: if u.len() != m - 1 { u.len() } else { dw.len() },
        });
    }
    if dt.is_nan() || dt < 0.0 {
        return Err(Error::invalid("dt", "must be >= 0"));
    }
    let mf = m as f64;
    let root = mf.sqrt();
    // kernel values on grid x against cell l; cell 0 carries phi_j(0) = 0
    let kernel: Vec<Vec<f64>> = (1..m)
        .map(|xm| {
            (1..m)
                .map(|l| {
                    (1..m)
                        .map(|j| {
                            (lambda(j, m) * dt).exp() * phi_at_node(j, xm, m) * phi_at_node(j, l, m)
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0; m - 1];
    for (i, row) in kernel.iter().enumerate() {
        let mut det = 0.0;
        let mut sto = 0.0;
        for (l, g) in row.iter().enumerate() {
            let x = (l + 1) as f64 / mf;
            let ul = u[l];
            det += g / mf * (ul + dt * (problem.drift)(t, x, ul));
            sto += g * (problem.diffusion)(t, x, ul) * dw[l] / root;
        }
        out[i] = det + sto;
    }
    Ok(out)
}

/// Truncated series of the continuous Dirichlet heat kernel,
/// `sum_j exp(-j^2 pi^2 t) phi_j(x) phi_j(y)`, with the number of terms
/// chosen so the neglected tail is below `1e-12`. Reference only.
pub fn continuous_green(t: f64, x: f64, y: f64) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid("t", format!("must be > 0, got {t}")));
    }
    let terms = continuous_green_terms(t);
    Ok((1..=terms)
        .map(|j| {
            let jf = j as f64;
            (-jf * jf * PI * PI * t).exp() * 2.0 * (jf * PI * x).sin() * (jf * PI * y).sin()
        })
        .sum())
}

/// Smallest `J` with `sum_{j > J} 2 exp(-j^2 pi^2 t) < 1e-12`.
pub fn continuous_green_terms(t: f64) -> usize {
    let mut j = 1usize;
    loop {
        let next = (j + 1) as f64;
        // geometric bound on the tail starting at j + 1
        let first = 2.0 * (-next * next * PI * PI * t).exp();
        let ratio = (-(2.0 * next + 1.0) * PI * PI * t).exp();
        if ratio < 1.0 && first / (1.0 - ratio) < 1e-12 {
            return j;
        }
        j += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundId {
    /// Time-shift estimate integrated over `[0, s]`, envelope `(t - s)^{1/2}`.
    I,
    /// Square integral in `y`, envelope `t^{-1/2}`.
    II,
    /// Time increment, envelope `s^{-alpha} (t - s)^{alpha - 1/2}`.
    III,
}

impl BoundId {
    pub fn name(self) -> &'static str {
        match self {
            BoundId::I => "i",
            BoundId::II => "ii",
            BoundId::III => "iii",
        }
    }
}

/// Probe points: a set of times in `(0, T]` and, for bound (iii), exponents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub times: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl ProbeGrid {
    /// Times `2^{-k}` for `k = 0..=k_max`.
    pub fn dyadic(k_max: u32, alphas: Vec<f64>) -> Self {
        Self {
            times: (0..=k_max).map(|k| 2f64.powi(-(k as i32))).collect(),
            alphas,
        }
    }

    /// Doubles the density: inserts the geometric midpoint between
    /// neighbouring times and the arithmetic midpoint between exponents.
    pub fn refined(&self) -> Self {
        let mut times = self.times.clone();
        times.sort_by(f64::total_cmp);
        let mut out = Vec::with_capacity(2 * times.len());
        for w in times.windows(2) {
            out.push(w[0]);
            out.push((w[0] * w[1]).sqrt());
        }
        out.extend(times.last());
        let mut alphas = self.alphas.clone();
        alphas.sort_by(f64::total_cmp);
        let mut a_out = Vec::with_capacity(2 * alphas.len());
        for w in alphas.windows(2) {
            a_out.push(w[0]);
            a_out.push(0.5 * (w[0] + w[1]));
        }
        a_out.extend(alphas.last());
        Self {
            times: out,
            alphas: a_out,
        }
    }
}

/// One evaluated probe: the left side (sup over grid `x`), the envelope and
/// their ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub bound: BoundId,
    pub m: usize,
    pub s: f64,
    pub t: f64,
    pub alpha: f64,
    pub x: f64,
    pub lhs: f64,
    pub envelope: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundFit {
    pub bound: BoundId,
    /// Max ratio over all `M` on the given probe grid.
    pub fitted_c: f64,
    /// Same on the refined grid.
    pub refined_c: f64,
    /// `(M, C on probe grid, C on refined grid)`.
    pub per_m: Vec<(usize, f64, f64)>,
    /// Probe attaining `fitted_c`.
    pub location: ProbeRow,
    pub passed: bool,
}

/// Fits the constant of one kernel estimate over `m_set` and checks that it
/// is finite and changes by less than a factor 2 under probe refinement and
/// across `M`.
///
/// The left sides are quadratic forms in `phi_j^M(x)`, which is affine in
/// `x` on each cell, so their supremum over `x` is attained at a grid point;
/// only grid points are probed.
pub fn check_bound(
    bound: BoundId,
    m_set: &[usize],
    probes: &ProbeGrid,
) -> Result<(BoundFit, Vec<ProbeRow>)> {
    if m_set.is_empty() || probes.times.is_empty() {
        return Err(Error::invalid("probes", "empty probe set"));
    }
    if bound == BoundId::III && probes.alphas.is_empty() {
        return Err(Error::invalid("alphas", "bound (iii) needs exponents"));
    }
    if bound == BoundId::I && probes.times.len() < 2 {
        return Err(Error::invalid(
            "probes",
            "bound (i) needs at least two times",
        ));
    }
    if let Some(a) = probes.alphas.iter().find(|&&a| !(a > 0.5 && a < 2.5)) {
        return Err(Error::invalid("alphas", format!("{a} outside (1/2, 5/2)")));
    }
    let refined = probes.refined();
    let mut rows = Vec::new();
    let mut per_m = Vec::new();
    let mut best: Option<ProbeRow> = None;
    let mut refined_c = 0.0f64;
    for &m in m_set {
        let basis = SpectralBasis::new(m)?;
        let base_rows = evaluate_probes(bound, &basis, probes);
        let fine_rows = evaluate_probes(bound, &basis, &refined);
        let c = max_ratio(&base_rows);
        let c_fine = max_ratio(&fine_rows);
        per_m.push((m, c, c_fine));
        refined_c = refined_c.max(c_fine);
        for r in &base_rows {
            if best.as_ref().is_none_or(|b| r.ratio > b.ratio) {
                best = Some(r.clone());
            }
        }
        rows.extend(base_rows);
    }
    let location = best.expect("non-empty probe set");
    let fitted_c = location.ratio;
    let finite = per_m
        .iter()
        .all(|&(_, a, b)| a.is_finite() && b.is_finite() && a > 0.0);
    let stable_refine = per_m.iter().all(|&(_, a, b)| b < 2.0 * a);
    let lo = per_m.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let stable_m = fitted_c < 2.0 * lo;
    Ok((
        BoundFit {
            bound,
            fitted_c,
            refined_c,
            per_m,
            location,
            passed: finite && stable_refine && stable_m,
        },
        rows,
    ))
}

fn max_ratio(rows: &[ProbeRow]) -> f64 {
    rows.iter()
        .map(|r| r.ratio)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn evaluate_probes(bound: BoundId, basis: &SpectralBasis, probes: &ProbeGrid) -> Vec<ProbeRow> {
    let m = basis.cells();
    let mut times = probes.times.clone();
    times.sort_by(f64::total_cmp);
    let phi_sq: Vec<Vec<f64>> = (1..m)
        .map(|xm| (1..m).map(|j| phi_at_node(j, xm, m).powi(2)).collect())
        .collect();
    // sup over grid x of sum_j w_j phi_j(x)^2
    let sup_x = |weights: &[f64]| -> (f64, f64) {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for (i, row) in phi_sq.iter().enumerate() {
            let v: f64 = row.iter().zip(weights).map(|(p, w)| p * w).sum();
            if v > best.0 {
                best = (v, (i + 1) as f64 / m as f64);
            }
        }
        best
    };
    let lambdas = basis.lambdas();
    let mut rows = Vec::new();
    match bound {
        BoundId::II => {
            for &t in &times {
                let w: Vec<f64> = lambdas.iter().map(|l| (2.0 * l * t).exp()).collect();
                let (lhs, x) = sup_x(&w);
                let envelope = 1.0 / t.sqrt();
                rows.push(ProbeRow {
                    bound,
                    m,
                    s: t,
                    t,
                    alpha: f64::NAN,
                    x,
                    lhs,
                    envelope,
                    ratio: lhs / envelope,
                });
            }
        }
        BoundId::I => {
            for (a, &s) in times.iter().enumerate() {
                for &t in &times[a + 1..] {
                    let w: Vec<f64> = lambdas
                        .iter()
                        .map(|&l| shifted_time_integral(l, s, t))
                        .collect();
                    let (lhs, x) = sup_x(&w);
                    let envelope = (t - s).sqrt();
                    rows.push(ProbeRow {
                        bound,
                        m,
                        s,
                        t,
                        alpha: f64::NAN,
                        x,
                        lhs,
                        envelope,
                        ratio: lhs / envelope,
                    });
                }
            }
        }
        BoundId::III => {
            for (a, &s) in times.iter().enumerate() {
                for &t in &times[a + 1..] {
                    let w: Vec<f64> = lambdas
                        .iter()
                        .map(|&l| {
                            let d = (l * t).exp() - (l * s).exp();
                            d * d
                        })
                        .collect();
                    let (lhs, x) = sup_x(&w);
                    for &alpha in &probes.alphas {
                        let envelope = s.powf(-alpha) * (t - s).powf(alpha - 0.5);
                        rows.push(ProbeRow {
                            bound,
                            m,
                            s,
                            t,
                            alpha,
                            x,
                            lhs,
                            envelope,
                            ratio: lhs / envelope,
                        });
                    }
                }
            }
        }
    }
    rows
}

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Number of time panels used for bound (i).
pub const TIME_PANELS: usize = 128;

/// `int_0^s (exp(lambda (t - r)) - exp(lambda (s - r)))^2 dr` by 5-point
/// Gauss-Legendre on [`TIME_PANELS`] panels graded geometrically towards
/// `r = s`, where the integrand concentrates for stiff modes.
pub fn shifted_time_integral(lambda: f64, s: f64, t: f64) -> f64 {
    let integrand = |r: f64| {
        let d = (lambda * (t - r)).exp() - (lambda * (s - r)).exp();
        d * d
    };
    // panel edges in tau = s - r: 0, s*rho^{1-P}, ..., s
    let first: f64 = 1e-10;
    let rho = (1.0 / first).powf(1.0 / (TIME_PANELS - 1) as f64);
    let mut total = 0.0;
    let mut lo = 0.0;
    for k in 0..TIME_PANELS {
        let hi = if k + 1 == TIME_PANELS {
            s
        } else {
            s * first * rho.powi(k as i32)
        };
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let mut panel = 0.0;
        for (z, w) in GL5_NODES.iter().zip(GL5_WEIGHTS) {
            panel += w * integrand(s - (mid + half * z));
        }
        total += half * panel;
        lo = hi;
    }
    total
}
