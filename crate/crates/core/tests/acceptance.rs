//! Acceptance gate: eleven end-to-end criteria, each printed as one
//! PASS/FAIL line. The test fails if any criterion fails.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;
use std::time::Instant;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use stochheat::experiments::{
    as_convergence_profiles, dyadic_levels, fit_order, holder_increment_check, kernel_bound_checks,
    moment_bound_check, nonlip_demo, strong_error_study, work_precision_study, AsProfilesConfig,
    HolderConfig, KernelCheckConfig, MomentConfig, NonlipDemoConfig, StrongStudyConfig,
    WorkPrecisionConfig,
};
use stochheat::green::mild_step_oracle;
use stochheat::grid::{apply_semigroup, l2_norm, GridSpec, SpectralBasis};
use stochheat::io::{write_csv, Outcome};
use stochheat::noise::{
    coarsen, coupled_stream, sample_block, standard_normal_from_bits, DyadicCoarsener,
    IncrementBlock, NoisePlan,
};
use stochheat::problem::{BuiltinProblem, Problem};
use stochheat::schemes::{integrate, step_explicit_euler, step_sexp, SchemeKind, SolverState};
use stochheat::Result;

type Verdict = Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Verdict);

fn report(index: usize, name: &str, verdict: Verdict, seconds: f64) -> bool {
    let (passed, detail) = verdict.unwrap_or_else(|e| (false, format!("error: {e}")));
    let line = format!(
        "[{}] criterion {index:>2} {name}: {detail} ({seconds:.1} s)",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    passed
}

fn zero_blocks(n: usize, dim: usize) -> Vec<IncrementBlock> {
    (0..n)
        .map(|n| IncrementBlock {
            n,
            dw: vec![0.0; dim],
        })
        .collect()
}

fn heat_problem(u0: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Problem {
    Problem::new("heat", |_, _, _| 0.0, |_, _, _| 0.0, u0, true).unwrap()
}

fn strong_order() -> Verdict {
    let report = strong_error_study(&StrongStudyConfig::default())?;
    let slope = |k| {
        report
            .scheme(k)
            .map(|s| (s.fitted_slope, s.slope_stderr))
            .unwrap()
    };
    let (s, se) = slope(SchemeKind::Sexp);
    let (sem, _) = slope(SchemeKind::Sem);
    let (cnm, _) = slope(SchemeKind::Cnm);
    Ok((
        (0.35..=0.65).contains(&s),
        format!("SEXP slope {s:.3} +/- {se:.3}, target [0.35, 0.65] (SEM {sem:.3}, CNM {cnm:.3})"),
    ))
}

fn linear_exactness() -> Verdict {
    let m = 256;
    let dt = 0.1;
    let steps = 10;
    let problem = heat_problem(|x| SQRT_2 * (PI * x).sin());
    let grid = GridSpec::new(m, steps, dt * steps as f64)?;
    let basis = SpectralBasis::new(m)?;
    let record: Vec<usize> = (0..=steps).collect();
    let states = integrate(
        SchemeKind::Sexp,
        &problem,
        &grid,
        &basis,
        zero_blocks(steps, m - 1),
        &record,
    )?;
    let lambda = basis.lambdas()[0];
    let mut worst = 0.0f64;
    for s in &states {
        let decay = (lambda * s.t).exp();
        for (k, &u) in s.u.iter().enumerate() {
            let exact = decay * SQRT_2 * (PI * (k + 1) as f64 / m as f64).sin();
            worst = worst.max((u - exact).abs());
        }
    }
    let mut state = SolverState::initial(&problem, &grid);
    let zero = IncrementBlock {
        n: 0,
        dw: vec![0.0; m - 1],
    };
    let mut blow_up = None;
    for n in 1..=steps {
        state = step_explicit_euler(&state, &problem, &zero, dt)?;
        let norm = l2_norm(&state.u);
        if norm.is_nan() || norm > 1e6 {
            blow_up = Some(n);
            break;
        }
    }
    Ok((
        worst < 1e-11 && blow_up.is_some(),
        format!(
            "dt M^2 = {:.1}, max deviation {worst:.2e} (< 1e-11); explicit Euler norm > 1e6 at step {}",
            dt * (m * m) as f64,
            blow_up.map_or("never".to_string(), |n| n.to_string())
        ),
    ))
}

fn mild_form_equivalence() -> Verdict {
    let problem = BuiltinProblem::StrongTest.problem();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut uniform = move || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for m in [4, 8, 16] {
        let basis = SpectralBasis::new(m)?;
        for _ in 0..100 {
            let dt = 0.001 + 0.1 * uniform();
            let t = uniform();
            let u: Vec<f64> = (0..m - 1).map(|_| 4.0 * uniform() - 2.0).collect();
            let dw: Vec<f64> = (0..m - 1)
                .map(|_| {
                    dt.sqrt()
                        * standard_normal_from_bits(((uniform() * 2f64.powi(53)) as u64) << 11)
                })
                .collect();
            let state = SolverState {
                n: 0,
                t,
                u: u.clone(),
            };
            let block = IncrementBlock {
                n: 0,
                dw: dw.clone(),
            };
            let scheme = step_sexp(&state, &problem, &block, &basis, dt)?;
            let oracle = mild_step_oracle(&u, t, &problem, dt, &dw, &basis)?;
            for (a, b) in scheme.u.iter().zip(&oracle) {
                worst = worst.max((a - b).abs());
            }
            pairs += 1;
        }
    }
    Ok((
        worst < 1e-10,
        format!("{pairs} pairs at M in {{4, 8, 16}}, max discrepancy {worst:.2e} (< 1e-10)"),
    ))
}

fn deterministic_orders() -> Verdict {
    let m = 32;
    let t_final = 0.5;
    let problem = heat_problem(|x| (PI * x).sin() + 0.5 * (3.0 * PI * x).sin());
    let basis = SpectralBasis::new(m)?;
    let u0 = SolverState::initial(&problem, &GridSpec::new(m, 1, t_final)?).u;
    let exact = apply_semigroup(&u0, t_final, &basis)?;
    let mut slopes = Vec::new();
    for kind in [SchemeKind::Sem, SchemeKind::Cnm] {
        let mut points = Vec::new();
        for dt in dyadic_levels(6, 10) {
            let grid = GridSpec::with_step(m, dt, t_final)?;
            let n = grid.steps();
            let states = integrate(kind, &problem, &grid, &basis, zero_blocks(n, m - 1), &[n])?;
            let err = states[0]
                .u
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            points.push((dt, err));
        }
        slopes.push(fit_order(&points)?.slope);
    }
    let (sem, cnm) = (slopes[0], slopes[1]);
    Ok((
        (sem - 1.0).abs() <= 0.1 && (cnm - 2.0).abs() <= 0.2,
        format!("SEM slope {sem:.3} (1.0 +/- 0.1), CNM slope {cnm:.3} (2.0 +/- 0.2)"),
    ))
}

fn noise_identities() -> Verdict {
    // Three dyadic levels above the fine one, built in four independent ways.
    let plan = NoisePlan::new(11, 4, 9, 64, 1.0)?;
    let fine: Vec<IncrementBlock> = (0..64)
        .map(|n| sample_block(&plan, n))
        .collect::<Result<_>>()?;
    let pairwise = |blocks: &[IncrementBlock]| -> Result<Vec<IncrementBlock>> {
        blocks.chunks(2).map(coarsen).collect()
    };
    let l1 = pairwise(&fine)?;
    let l2 = pairwise(&l1)?;
    let l3 = pairwise(&l2)?;
    let direct: Vec<IncrementBlock> = fine.chunks(8).map(coarsen).collect::<Result<_>>()?;
    let streamed: Vec<IncrementBlock> = coupled_stream(&plan, 8)?.collect();
    let mut dyadic_out = vec![Vec::new(); 4];
    let mut coarsener = DyadicCoarsener::new(plan.dim(), 3);
    for b in &fine {
        coarsener.push(&b.dw, |level, sum| dyadic_out[level].push(sum.to_vec()));
    }
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut exact = true;
    for (k, b) in l3.iter().enumerate() {
        exact &= bits(&b.dw) == bits(&direct[k].dw);
        exact &= bits(&b.dw) == bits(&streamed[k].dw);
        exact &= bits(&b.dw) == bits(&dyadic_out[3][k]);
    }
    for (k, b) in l2.iter().enumerate() {
        exact &= bits(&b.dw) == bits(&dyadic_out[2][k]);
    }
    for (k, b) in l1.iter().enumerate() {
        exact &= bits(&b.dw) == bits(&dyadic_out[1][k]);
    }

    // 10^5 increments: 1000 steps of 100 entries.
    let plan = NoisePlan::new(2024, 0, 101, 1000, 1.0)?;
    let dt = plan.dt_ref();
    let mut draws = Vec::with_capacity(100_000);
    for n in 0..1000 {
        draws.extend(sample_block(&plan, n)?.dw);
    }
    let count = draws.len() as f64;
    let var = draws.iter().map(|z| z * z).sum::<f64>() / count;
    let se = dt * (2.0 / count).sqrt();
    let var_ok = (var - dt).abs() <= 3.0 * se;

    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut z: Vec<f64> = draws.iter().map(|w| w / dt.sqrt()).collect();
    z.sort_by(f64::total_cmp);
    let d = z
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / count)
                .abs()
                .max(((i + 1) as f64 / count - f).abs())
        })
        .fold(0.0, f64::max);
    let critical = (-0.5 * (0.001f64 / 2.0).ln()).sqrt() / count.sqrt();
    let ks_ok = d < critical;
    Ok((
        exact && var_ok && ks_ok,
        format!(
            "coarsening bit-exact: {exact}; variance {var:.6e} vs dt {dt:.1e} ({:.2} SE); KS D = {d:.2e} < {critical:.2e}: {ks_ok}",
            (var - dt) / se
        ),
    ))
}

fn kernel_bounds() -> Verdict {
    let r = kernel_bound_checks(&KernelCheckConfig::default())?;
    let detail = r
        .checks
        .iter()
        .map(|c| {
            format!(
                "({}) C={:.3}/{:.3}",
                c.bound.name(),
                c.fit.fitted_c,
                c.fit.refined_c
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    Ok((r.passed, format!("M in {:?}: {detail}", r.config.m_set)))
}

fn moment_bounds() -> Verdict {
    let r = moment_bound_check(&MomentConfig::default())?;
    let values = r
        .rows
        .iter()
        .map(|row| format!("M={} {:.4}", row.m, row.sup_second))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        r.passed,
        format!("sup E U^2: {values}; max/min {:.3} (< 3)", r.ratio_second),
    ))
}

fn holder_increments() -> Verdict {
    let r = holder_increment_check(&HolderConfig::default())?;
    Ok((
        r.time_passed && r.space_passed,
        format!(
            "time exponent {:.3} +/- {:.3} (0.5 +/- 0.15), space exponent {:.3} +/- {:.3} (1.0 +/- 0.3)",
            r.time_exponent, r.time_exponent_stderr, r.space_exponent, r.space_exponent_stderr
        ),
    ))
}

fn pathwise_convergence() -> Verdict {
    let mut fractions = Vec::new();
    for seed in 1..=5 {
        let r = as_convergence_profiles(&AsProfilesConfig {
            seed,
            ..Default::default()
        })?;
        fractions.push(r.decreasing_fraction());
    }
    Ok((
        fractions.iter().all(|&f| f >= 0.8),
        format!("decreasing fraction per seed {fractions:?} (each >= 0.8)"),
    ))
}

fn work_precision() -> Verdict {
    let cfg = WorkPrecisionConfig::default();
    let r = work_precision_study(&cfg)?;
    let dir = tempfile::tempdir().expect("temporary directory");
    for table in Outcome::WorkPrecision(r.clone()).tables() {
        write_csv(&table, &dir.path().join(&table.name))?;
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for &dt in &cfg.dt_levels {
        let sexp = r.row(SchemeKind::Sexp, dt).unwrap().wall_time_total_s;
        let cnm = r.row(SchemeKind::Cnm, dt).unwrap().wall_time_total_s;
        ok &= sexp <= cnm;
        parts.push(format!("2^{}: {:.4}/{:.4}", dt.log2() as i32, sexp, cnm));
    }
    Ok((
        ok,
        format!("median wall time SEXP/CNM [s] {}", parts.join(", ")),
    ))
}

fn nonlipschitz() -> Verdict {
    let r = nonlip_demo(&NonlipDemoConfig::default())?;
    let medians = r
        .median_error
        .iter()
        .map(|e| format!("{e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        r.passed,
        format!(
            "aborted {:.2}% (< 5%), median errors coarse to fine [{medians}], nonincreasing: {}",
            100.0 * r.aborted_fraction,
            r.monotone
        ),
    ))
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 11] = [
        ("strong temporal order", strong_order),
        (
            "linear exactness without step restriction",
            linear_exactness,
        ),
        ("mild-form oracle equivalence", mild_form_equivalence),
        ("deterministic scheme orders", deterministic_orders),
        ("noise coupling identities", noise_identities),
        ("kernel bounds", kernel_bounds),
        ("moment boundedness", moment_bounds),
        ("Hölder increments", holder_increments),
        ("pathwise convergence", pathwise_convergence),
        ("work-precision ordering", work_precision),
        ("non-Lipschitz demo", nonlipschitz),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = run();
        if !report(i + 1, name, verdict, start.elapsed().as_secs_f64()) {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
