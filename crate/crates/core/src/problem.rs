//! Coefficients and initial data of the stochastic heat equation
//! `du = (u_xx + f(t,x,u)) dt + sigma(t,x,u) dW` on `[0, 1]` with
//! homogeneous Dirichlet conditions.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

pub type Coefficient = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type InitialDatum = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type Forcing = Arc<dyn Fn(Increment<'_>, &mut [f64]) + Send + Sync>;

/// Inputs of [`Problem::forcing_into`] for one step from time `t`.
#[derive(Debug, Clone, Copy)]
pub struct Increment<'a> {
    pub t: f64,
    pub dt: f64,
    /// Scale applied to the diffusion term, `sqrt(M)` for cell increments.
    pub scale: f64,
    pub nodes: &'a [f64],
    pub u: &'a [f64],
    pub dw: &'a [f64],
}

/// Drift, diffusion and initial datum. Coefficients take `(t, x, u)`.
#[derive(Clone)]
pub struct Problem {
    pub label: String,
    pub drift: Coefficient,
    pub diffusion: Coefficient,
    pub u0: InitialDatum,
    /// Whether `f` and `sigma` are asserted to be globally Lipschitz with
    /// linear growth.
    pub lipschitz: bool,
    forcing: Forcing,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("label", &self.label)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl Problem {
    pub fn new(
        label: impl Into<String>,
        drift: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        u0: impl Fn(f64) -> f64 + Send + Sync + 'static,
        lipschitz: bool,
    ) -> Result<Self> {
        for x in [0.0, 1.0] {
            let v = u0(x);
            if v.is_nan() || v.abs() > 1e-12 {
                return Err(Error::invalid(
                    "u0",
                    format!("must vanish at the boundary, u0({x}) = {v}"),
                ));
            }
        }
        let drift = Arc::new(drift);
        let diffusion = Arc::new(diffusion);
        let forcing: Forcing = {
            let (f, s) = (Arc::clone(&drift), Arc::clone(&diffusion));
            Arc::new(move |inc: Increment<'_>, out: &mut [f64]| {
                let n = out.len();
                let (nodes, u, dw) = (&inc.nodes[..n], &inc.u[..n], &inc.dw[..n]);
                for i in 0..n {
                    let (x, ui) = (nodes[i], u[i]);
                    out[i] = inc.dt * f(inc.t, x, ui) + inc.scale * s(inc.t, x, ui) * dw[i];
                }
            })
        };
        Ok(Self {
            label: label.into(),
            drift,
            diffusion,
            u0: Arc::new(u0),
            lipschitz,
            forcing,
        })
    }

    /// Writes `dt f(t, x_i, u_i) + scale sigma(t, x_i, u_i) dw_i` into
    /// `out` for every index of `out`.
    pub fn forcing_into(&self, inc: Increment<'_>, out: &mut [f64]) {
        (self.forcing)(inc, out)
    }

    /// Same coefficients with the initial datum replaced.
    pub fn with_initial(&self, u0: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        Problem::new(
            self.label.clone(),
            {
                let f = Arc::clone(&self.drift);
                move |t, x, u| f(t, x, u)
            },
            {
                let s = Arc::clone(&self.diffusion);
                move |t, x, u| s(t, x, u)
            },
            u0,
            self.lipschitz,
        )
    }

    /// Fitted Lipschitz constants of `f` and `sigma` in `u`, from 1000
    /// deterministic pairs on `[-10, 10]` at `t = 0`, `x = 1/2`.
    ///
    /// A smoke test only; a cubic drift shows up as a large constant.
    pub fn lipschitz_probe(&self) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(0x11b5);
        let mut uniform = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 20.0 - 10.0;
        let (mut cf, mut cs) = (0.0f64, 0.0f64);
        for _ in 0..1000 {
            let (u, v) = (uniform(), uniform());
            let du = (u - v).abs();
            if du < 1e-9 {
                continue;
            }
            cf = cf.max(((self.drift)(0.0, 0.5, u) - (self.drift)(0.0, 0.5, v)).abs() / du);
            cs = cs.max(((self.diffusion)(0.0, 0.5, u) - (self.diffusion)(0.0, 0.5, v)).abs() / du);
        }
        (cf, cs)
    }
}

/// The problem instances used by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinProblem {
    /// `u0 = cos(pi (x - 1/2))`, `f(u) = u/2`, `sigma(u) = 1 - u`.
    StrongTest,
    /// `u0 = cos(pi (x - 1/2))`, `f(u) = 1 - u`, `sigma(u) = sin(u)`.
    AsTest,
    /// `u0 = cos(pi (x - 1/2))`, `f(u) = u - u^3`, `sigma(u) = 1 - u`.
    /// Continuous but not globally Lipschitz; an illustration only.
    NonlipDemo,
}

impl BuiltinProblem {
    pub const ALL: [BuiltinProblem; 3] = [Self::StrongTest, Self::AsTest, Self::NonlipDemo];

    pub fn label(self) -> &'static str {
        match self {
            Self::StrongTest => "strong-test",
            Self::AsTest => "as-test",
            Self::NonlipDemo => "nonlip-demo",
        }
    }

    pub fn problem(self) -> Problem {
        let u0 = |x: f64| (PI * (x - 0.5)).cos();
        let built = match self {
            Self::StrongTest => {
                Problem::new(self.label(), |_, _, u| 0.5 * u, |_, _, u| 1.0 - u, u0, true)
            }
            Self::AsTest => {
                Problem::new(self.label(), |_, _, u| 1.0 - u, |_, _, u| u.sin(), u0, true)
            }
            Self::NonlipDemo => Problem::new(
                self.label(),
                |_, _, u| u - u * u * u,
                |_, _, u| 1.0 - u,
                u0,
                false,
            ),
        };
        built.expect("built-in initial data vanish at the boundary")
    }
}

impl fmt::Display for BuiltinProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for BuiltinProblem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|p| p.label() == norm)
            .ok_or_else(|| {
                Error::config(
                    "problem",
                    format!("unknown problem `{s}` (expected strong-test, as-test or nonlip-demo)"),
                )
            })
    }
}

/// `u0(x_m)` for the interior points.
pub fn eval_u0_on_grid(problem: &Problem, grid: &GridSpec) -> Vec<f64> {
    (1..grid.cells()).map(|m| (problem.u0)(grid.x(m))).collect()
}

/// `(sum_{j<=J} (1 + j^2)^beta |<u0, phi_j>|^2)^{1/2}`.
///
/// The sine coefficients come from the composite trapezoid rule with
/// `64 J` panels (a type-I sine transform). The result is recomputed with
/// twice the panels and rejected if the two disagree by more than `1e-4`
/// relative, or if any sample is not finite.
pub fn sobolev_norm(u0: &dyn Fn(f64) -> f64, beta: f64, j_max: usize) -> Result<f64> {
    if j_max == 0 {
        return Err(Error::invalid("J", "truncation must be at least 1"));
    }
    let panels = 64 * j_max;
    let coarse = weighted_norm(&sine_coefficients(u0, panels, j_max)?, beta);
    let fine = weighted_norm(&sine_coefficients(u0, 2 * panels, j_max)?, beta);
    if !(coarse.is_finite() && fine.is_finite()) {
        return Err(Error::Quadrature("norm is not finite".into()));
    }
    let scale = fine.abs().max(1e-300);
    if (coarse - fine).abs() > 1e-4 * scale && (coarse - fine).abs() > 1e-14 {
        return Err(Error::Quadrature(format!(
            "norm changed from {coarse} to {fine} under panel doubling"
        )));
    }
    Ok(fine)
}

fn weighted_norm(coeffs: &[f64], beta: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let j = (i + 1) as f64;
            (1.0 + j * j).powf(beta) * c * c
        })
        .sum::<f64>()
        .sqrt()
}

/// Trapezoid approximations of `<u0, phi_j>`, `j = 1..=j_max`, on `panels`
/// uniform panels. The endpoint terms vanish because `phi_j(0) = phi_j(1) = 0`.
pub fn sine_coefficients(u0: &dyn Fn(f64) -> f64, panels: usize, j_max: usize) -> Result<Vec<f64>> {
    if j_max >= panels {
        return Err(Error::invalid("J", "needs fewer modes than panels"));
    }
    let len = 2 * panels;
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for k in 1..panels {
        let v = u0(k as f64 / panels as f64);
        if !v.is_finite() {
            return Err(Error::Quadrature(format!(
                "u0 is not finite at x = {}",
                k as f64 / panels as f64
            )));
        }
        buf[k].re = v;
        buf[len - k].re = -v;
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    // FFT of the odd extension: Im(Y_j) = -2 sum_k v_k sin(pi j k / P)
    let scale = SQRT_2 / panels as f64;
    Ok((1..=j_max).map(|j| -0.5 * buf[j].im * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batched_forcing_matches_pointwise_coefficients() {
        let p = Problem::new(
            "mixed",
            |t, x, u| t + x * u.sin(),
            |t, x, u| 1.0 - u * x + t,
            |x| x * (1.0 - x),
            true,
        )
        .unwrap();
        let nodes = [0.25, 0.5, 0.75];
        let u = [0.3, -1.2, 2.5];
        let dw = [0.01, -0.02, 0.005];
        let mut out = [0.0; 3];
        let inc = Increment {
            t: 0.1,
            dt: 0.0625,
            scale: 2.0,
            nodes: &nodes,
            u: &u,
            dw: &dw,
        };
        p.forcing_into(inc, &mut out);
        for i in 0..3 {
            let want = 0.0625 * (p.drift)(0.1, nodes[i], u[i])
                + 2.0 * (p.diffusion)(0.1, nodes[i], u[i]) * dw[i];
            assert_eq!(out[i].to_bits(), want.to_bits());
        }
    }

    #[test]
    fn u0_on_grid() {
        let g = GridSpec::new(2, 1, 1.0).unwrap();
        let v = eval_u0_on_grid(&BuiltinProblem::StrongTest.problem(), &g);
        assert_eq!(v.len(), 1);
        assert!((v[0] - 1.0).abs() < 1e-15);

        let p = Problem::new(
            "phi1",
            |_, _, _| 0.0,
            |_, _, _| 0.0,
            |x| SQRT_2 * (PI * x).sin(),
            true,
        )
        .unwrap();
        let g = GridSpec::new(4, 1, 1.0).unwrap();
        let v = eval_u0_on_grid(&p, &g);
        let want = [1.0, SQRT_2, 1.0];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }

        let z = Problem::new("zero", |_, _, _| 0.0, |_, _, _| 0.0, |_| 0.0, true).unwrap();
        assert!(eval_u0_on_grid(&z, &g).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_nonzero_boundary() {
        let r = Problem::new("bad", |_, _, _| 0.0, |_, _, _| 0.0, |x| 1.0 - x, true);
        assert!(matches!(r, Err(Error::InvalidParameter { name: "u0", .. })));
    }

    #[test]
    fn builtin_coefficients() {
        let s = BuiltinProblem::StrongTest.problem();
        assert_eq!((s.drift)(0.0, 0.3, 2.0), 1.0);
        assert_eq!((s.diffusion)(0.0, 0.3, 1.0), 0.0);
        let a = BuiltinProblem::AsTest.problem();
        assert_eq!((a.drift)(0.0, 0.3, 0.0), 1.0);
        assert_eq!((a.diffusion)(0.0, 0.3, 0.0), 0.0);
        let n = BuiltinProblem::NonlipDemo.problem();
        assert_eq!((n.drift)(0.0, 0.3, 2.0), -6.0);
        assert!(!n.lipschitz && s.lipschitz && a.lipschitz);
    }

    #[test]
    fn labels_roundtrip() {
        for p in BuiltinProblem::ALL {
            assert_eq!(p.label().parse::<BuiltinProblem>().unwrap(), p);
        }
        assert_eq!(
            "STRONG_TEST".parse::<BuiltinProblem>().unwrap(),
            BuiltinProblem::StrongTest
        );
        assert!("heat".parse::<BuiltinProblem>().is_err());
    }

    #[test]
    fn lipschitz_probe_separates_cubic() {
        let (cf, cs) = BuiltinProblem::StrongTest.problem().lipschitz_probe();
        assert!((cf - 0.5).abs() < 1e-9 && (cs - 1.0).abs() < 1e-9);
        let (cf, cs) = BuiltinProblem::AsTest.problem().lipschitz_probe();
        assert!(cf <= 1.0 + 1e-9 && cs <= 1.0 + 1e-9);
        let (cf, _) = BuiltinProblem::NonlipDemo.problem().lipschitz_probe();
        assert!(cf > 50.0);
    }

    #[test]
    fn sine_coefficients_match_direct_sum() {
        let u0 = |x: f64| x * (1.0 - x) * (3.0 * x).exp();
        let panels = 40;
        let fast = sine_coefficients(&u0, panels, 12).unwrap();
        for (i, c) in fast.iter().enumerate() {
            let j = (i + 1) as f64;
            let direct: f64 = (1..panels)
                .map(|k| {
                    let x = k as f64 / panels as f64;
                    u0(x) * SQRT_2 * (j * PI * x).sin()
                })
                .sum::<f64>()
                / panels as f64;
            assert!((c - direct).abs() < 1e-13, "j={j}: {c} vs {direct}");
        }
    }

    #[test]
    fn sobolev_norm_of_first_mode() {
        let phi1 = |x: f64| SQRT_2 * (PI * x).sin();
        for beta in [-1.0, 0.0, 0.5, 1.0, 2.3] {
            let n = sobolev_norm(&phi1, beta, 16).unwrap();
            assert!((n - 2f64.powf(beta / 2.0)).abs() < 1e-8, "beta={beta}: {n}");
        }
        assert_eq!(sobolev_norm(&|_| 0.0, 1.0, 8).unwrap(), 0.0);
        assert!(sobolev_norm(&phi1, 1.0, 0).is_err());
    }

    #[test]
    fn sobolev_zero_order_is_l2_norm() {
        let u0 = |x: f64| x * (1.0 - x) * (1.0 + x);
        // int_0^1 (x - x^3)^2 dx = 1/3 - 2/5 + 1/7
        let exact = (8.0f64 / 105.0).sqrt();
        let norm = sobolev_norm(&u0, 0.0, 2000).unwrap();
        assert!((norm - exact).abs() < 1e-6, "{norm} vs {exact}");
    }

    #[test]
    fn sobolev_norm_strong_test_stable_in_j() {
        let u0 = BuiltinProblem::StrongTest.problem().u0;
        let a = sobolev_norm(&*u0, 1.0, 10_000).unwrap();
        let b = sobolev_norm(&*u0, 1.0, 20_000).unwrap();
        assert!(a.is_finite());
        assert!((a - b).abs() < 1e-6);
        // the datum is sqrt(2)/2 phi_1, so the H^1 norm is sqrt(2)/2 * sqrt(2) = 1
        assert!((a - 1.0).abs() < 1e-8, "{a}");
    }

    #[test]
    fn sobolev_norm_monotone_in_j() {
        let u0 = |x: f64| x * (1.0 - x);
        let mut prev = 0.0;
        for j in [1, 2, 4, 8, 16, 64, 256] {
            let n = sobolev_norm(&u0, 1.2, j).unwrap();
            assert!(n >= prev);
            prev = n;
        }
    }

    #[test]
    fn hat_function_regularity_ceiling() {
        let hat = |x: f64| if x <= 0.5 { x } else { 1.0 - x };
        let smooth = |x: f64| x * (1.0 - x);
        let s_lo = sobolev_norm(&smooth, 1.4, 5_000).unwrap();
        let s_hi = sobolev_norm(&smooth, 1.4, 10_000).unwrap();
        assert!((s_lo - s_hi).abs() < 1e-6 * s_hi);
        let below_lo = sobolev_norm(&hat, 1.0, 1_000).unwrap();
        let below_hi = sobolev_norm(&hat, 1.0, 8_000).unwrap();
        assert!((below_hi - below_lo) / below_hi < 1e-3);
        let above: Vec<f64> = [100, 1_000, 8_000]
            .iter()
            .map(|&j| sobolev_norm(&hat, 2.0, j).unwrap())
            .collect();
        assert!(
            above[1] > 2.0 * above[0] && above[2] > 2.0 * above[1],
            "{above:?}"
        );
    }

    #[test]
    fn non_integrable_datum_is_reported() {
        let bad = |x: f64| 1.0 / (x - 0.5);
        assert!(matches!(
            sobolev_norm(&bad, 0.0, 8),
            Err(Error::Quadrature(_))
        ));
    }
}
