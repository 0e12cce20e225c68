//! Spatial grid, eigenstructure of the finite-difference Dirichlet Laplacian
//! and the discrete heat semigroup.
//!
//! State vectors hold the `M - 1` interior values only; the boundary zeros
//! are implicit. Index `i` of a state vector corresponds to the grid point
//! `x_{i+1} = (i + 1) / M`, and index `i` of a coefficient vector to the
//! eigenmode `j = i + 1`.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};

/// Discretization parameters: `M` spatial cells, `N` time steps on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    m: usize,
    n: usize,
    t_final: f64,
}

impl GridSpec {
    pub fn new(m: usize, n: usize, t_final: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid(
                "M",
                format!("need at least 2 cells, got {m}"),
            ));
        }
        if n < 1 {
            return Err(Error::invalid("N", "need at least one time step"));
        }
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(Error::invalid(
                "T",
                format!("must be positive, got {t_final}"),
            ));
        }
        Ok(Self { m, n, t_final })
    }

    /// Builds a grid from a step size; `T / dt` must be an integer.
    pub fn with_step(m: usize, dt: f64, t_final: f64) -> Result<Self> {
        let n = steps_for(dt, t_final)
            .ok_or_else(|| Error::invalid("dt", format!("{dt} does not divide T = {t_final}")))?;
        Self::new(m, n, t_final)
    }

    pub fn cells(&self) -> usize {
        self.m
    }

    pub fn steps(&self) -> usize {
        self.n
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    /// Number of interior unknowns, `M - 1`.
    pub fn interior(&self) -> usize {
        self.m - 1
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.n as f64
    }

    /// Grid point `x_m = m / M`, for `m = 0..=M`.
    pub fn x(&self, m: usize) -> f64 {
        m as f64 / self.m as f64
    }

    /// Discrete time `t_n`; `t_N` is exactly `T`.
    pub fn time(&self, n: usize) -> f64 {
        (n as f64 / self.n as f64) * self.t_final
    }
}

/// Returns `T / dt` when it is a positive integer (up to rounding).
pub fn steps_for(dt: f64, t_final: f64) -> Option<usize> {
    if !(dt.is_finite() && dt > 0.0 && t_final > 0.0) {
        return None;
    }
    let ratio = t_final / dt;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-9 * n.max(1.0) {
        return None;
    }
    Some(n as usize)
}

/// Eigenvalues and eigenvectors of `M^2 D`, with cached semigroup factors.
///
/// Immutable apart from the factor cache, which is keyed on the exact bit
/// pattern of the time lag.
#[derive(Debug)]
pub struct SpectralBasis {
    m: usize,
    lambdas: Vec<f64>,
    phi: Vec<f64>,
    cache: RwLock<HashMap<u64, Arc<[f64]>>>,
}

pub fn build_basis(m: usize) -> Result<SpectralBasis> {
    SpectralBasis::new(m)
}

impl SpectralBasis {
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid(
                "M",
                format!("need at least 2 cells, got {m}"),
            ));
        }
        let d = m - 1;
        let mf = m as f64;
        let lambdas = (1..m)
            .map(|j| {
                let s = (j as f64 * PI / (2.0 * mf)).sin();
                -4.0 * mf * mf * s * s
            })
            .collect();
        let mut phi = vec![0.0; d * d];
        for j in 1..m {
            for k in 1..m {
                // reduce j*k modulo 2M before scaling so large M keeps full accuracy
                let r = (j * k) % (2 * m);
                phi[(j - 1) * d + (k - 1)] = SQRT_2 * (r as f64 * PI / mf).sin();
            }
        }
        Ok(Self {
            m,
            lambdas,
            phi,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn cells(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.m - 1
    }

    /// `lambda_j` for `j = 1..M-1`, all negative.
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// `c_j = -lambda_j / (j pi)^2`, which lies in `[4/pi^2, 1]`.
    pub fn c_factors(&self) -> Vec<f64> {
        self.lambdas
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let jp = (i + 1) as f64 * PI;
                -l / (jp * jp)
            })
            .collect()
    }

    /// `sqrt(2) sin(j pi x_k)`; the table is symmetric in `(j, k)`.
    pub fn phi(&self, j: usize, k: usize) -> f64 {
        self.phi[(j - 1) * self.dim() + (k - 1)]
    }

    /// Eigenvector `j` sampled on the interior grid.
    pub fn phi_row(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.phi[(j - 1) * d..j * d]
    }

    /// `exp(lambda_j * lag)` for every mode, cached per lag.
    pub fn semigroup_factors(&self, lag: f64) -> Result<Arc<[f64]>> {
        if !(lag >= 0.0 && lag.is_finite()) {
            return Err(Error::invalid(
                "lag",
                format!("must be finite and >= 0, got {lag}"),
            ));
        }
        // fold -0.0 onto 0.0
        let key = (lag + 0.0).to_bits();
        if let Some(f) = self.cache.read().expect("cache poisoned").get(&key) {
            return Ok(Arc::clone(f));
        }
        let factors: Arc<[f64]> = self.lambdas.iter().map(|l| (l * lag).exp()).collect();
        self.cache
            .write()
            .expect("cache poisoned")
            .insert(key, Arc::clone(&factors));
        Ok(factors)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::LengthMismatch {
                expected: self.dim(),
                got: len,
            });
        }
        Ok(())
    }
}

/// Sine coefficients `c_j = (1/M) sum_k phi_j(x_k) v_k`.
pub fn dst_forward(v: &[f64], basis: &SpectralBasis) -> Result<Vec<f64>> {
    basis.check_len(v.len())?;
    let scale = 1.0 / basis.m as f64;
    Ok((1..basis.m)
        .map(|j| dot(basis.phi_row(j), v) * scale)
        .collect())
}

/// Grid values `v_k = sum_j c_j phi_j(x_k)`.
pub fn dst_inverse(coeffs: &[f64], basis: &SpectralBasis) -> Result<Vec<f64>> {
    basis.check_len(coeffs.len())?;
    // phi is symmetric, so rows double as columns
    Ok((1..basis.m)
        .map(|k| dot(basis.phi_row(k), coeffs))
        .collect())
}

/// `e^{A lag} v` through the eigen-decomposition of `A = M^2 D`.
pub fn apply_semigroup(v: &[f64], lag: f64, basis: &SpectralBasis) -> Result<Vec<f64>> {
    let factors = basis.semigroup_factors(lag)?;
    let mut c = dst_forward(v, basis)?;
    for (ci, fi) in c.iter_mut().zip(factors.iter()) {
        *ci *= fi;
    }
    dst_inverse(&c, basis)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense matrix of `e^{A lag}` assembled from the spectral factors, for
/// repeated application with a fixed step.
///
/// The matrix is symmetric and centrosymmetric (`P[m][k] = P[M-m][M-k]`),
/// so it is stored as two half-size symmetric blocks acting on the even and
/// odd parts of the input. Each block is kept column by column with the
/// column length padded to a multiple of [`TILE`], which lets the product
/// run as a register-blocked sum of scaled columns.
#[derive(Debug, Clone)]
pub struct Propagator {
    dim: usize,
    half: usize,
    odd_dim: usize,
    stride: usize,
    lag: f64,
    even: Vec<f64>,
    odd: Vec<f64>,
}

/// Rows handled per register block in [`Propagator::apply_into`].
pub const TILE: usize = 32;

impl Propagator {
    pub fn new(basis: &SpectralBasis, lag: f64) -> Result<Self> {
        let factors = basis.semigroup_factors(lag)?;
        let d = basis.dim();
        let scale = 1.0 / basis.m as f64;
        let entry = |r: usize, c: usize| -> f64 {
            let mut s = 0.0;
            for j in 1..basis.m {
                s += factors[j - 1] * basis.phi(j, r + 1) * basis.phi(j, c + 1);
            }
            s * scale
        };
        // even part lives on indices 0..ceil(d/2), odd part on 0..floor(d/2)
        let half = d.div_ceil(2);
        let odd_dim = d / 2;
        let stride = half.div_ceil(TILE) * TILE;
        let mut even = vec![0.0; half * stride];
        let mut odd = vec![0.0; odd_dim * stride];
        for c in 0..half {
            for r in 0..half {
                let mirror = d - 1 - c;
                let direct = entry(r, c);
                if mirror == c {
                    even[c * stride + r] = direct;
                } else {
                    let cross = entry(r, mirror);
                    even[c * stride + r] = direct + cross;
                    if r < odd_dim && c < odd_dim {
                        odd[c * stride + r] = direct - cross;
                    }
                }
            }
        }
        Ok(Self {
            dim: d,
            half,
            odd_dim,
            stride,
            lag,
            even,
            odd,
        })
    }

    pub fn lag(&self) -> f64 {
        self.lag
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Length of the scratch buffer [`Propagator::apply_into`] needs.
    pub fn scratch_len(&self) -> usize {
        4 * self.stride
    }

    /// Writes `e^{A lag} v` into `out`. `scratch` needs
    /// [`Propagator::scratch_len`] entries.
    pub fn apply_into(&self, v: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let d = self.dim;
        let sp = self.stride;
        assert_eq!(v.len(), d);
        assert_eq!(out.len(), d);
        let (sym, rest) = scratch[..4 * sp].split_at_mut(sp);
        let (anti, rest) = rest.split_at_mut(sp);
        let (even_out, odd_out) = rest.split_at_mut(sp);
        for r in 0..self.half {
            let mirror = d - 1 - r;
            if mirror == r {
                sym[r] = v[r];
            } else {
                sym[r] = 0.5 * (v[r] + v[mirror]);
                anti[r] = 0.5 * (v[r] - v[mirror]);
            }
        }
        block_product(&self.even, &sym[..self.half], sp, even_out);
        block_product(&self.odd, &anti[..self.odd_dim], sp, odd_out);
        out[..self.half].copy_from_slice(&even_out[..self.half]);
        for r in 0..self.odd_dim {
            let s = even_out[r];
            let a = odd_out[r];
            out[r] = s + a;
            out[d - 1 - r] = s - a;
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let mut scratch = vec![0.0; self.scratch_len()];
        self.apply_into(v, &mut out, &mut scratch);
        out
    }
}

/// `out[..stride] = sum_c x[c] * cols[c]`, where column `c` occupies
/// `cols[c * stride..(c + 1) * stride]`.
fn block_product(cols: &[f64], x: &[f64], stride: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { block_product_fma(cols, x, stride, out) };
            return;
        }
    }
    block_product_body(cols, x, stride, out, |a, c, w| a + c * w);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn block_product_fma(cols: &[f64], x: &[f64], stride: usize, out: &mut [f64]) {
    block_product_body(cols, x, stride, out, |a, c, w| c.mul_add(w, a));
}

#[inline(always)]
fn block_product_body<F>(cols: &[f64], x: &[f64], stride: usize, out: &mut [f64], fma: F)
where
    F: Fn(f64, f64, f64) -> f64,
{
    for r0 in (0..stride).step_by(TILE) {
        let mut acc = [0.0f64; TILE];
        for (c, &w) in x.iter().enumerate() {
            let col = &cols[c * stride + r0..c * stride + r0 + TILE];
            for k in 0..TILE {
                acc[k] = fma(acc[k], col[k], w);
            }
        }
        out[r0..r0 + TILE].copy_from_slice(&acc);
    }
}

/// `kappa_M(y) = floor(M y) / M`.
pub fn kappa_m(y: f64, m: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::invalid("y", format!("must lie in [0, 1], got {y}")));
    }
    let mf = m as f64;
    Ok((mf * y).floor() / mf)
}

/// Largest discrete time `t_n <= s`.
pub fn kappa_n_t(s: f64, grid: &GridSpec) -> Result<f64> {
    let t = grid.t_final();
    if !(0.0..=t).contains(&s) {
        return Err(Error::invalid(
            "s",
            format!("must lie in [0, {t}], got {s}"),
        ));
    }
    let n_steps = grid.steps();
    let mut n = ((s / t) * n_steps as f64).floor() as usize;
    n = n.min(n_steps);
    while n < n_steps && grid.time(n + 1) <= s {
        n += 1;
    }
    while n > 0 && grid.time(n) > s {
        n -= 1;
    }
    Ok(grid.time(n))
}

/// Piecewise-linear interpolation of `values` (length `M + 1`, boundary
/// entries included) at `x`.
pub fn interpolate_space(values: &[f64], x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid("x", format!("must lie in [0, 1], got {x}")));
    }
    if values.len() < 3 {
        return Err(Error::LengthMismatch {
            expected: 3,
            got: values.len(),
        });
    }
    let m = values.len() - 1;
    let mx = m as f64 * x;
    let cell = (mx.floor() as usize).min(m - 1);
    let w = mx - cell as f64;
    Ok(values[cell] + w * (values[cell + 1] - values[cell]))
}

/// Pads an interior vector with the Dirichlet zeros.
pub fn with_boundary(interior: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(interior.len() + 2);
    v.push(0.0);
    v.extend_from_slice(interior);
    v.push(0.0);
    v
}

/// Discrete L2 norm `sqrt((1/M) sum v_k^2)`.
pub fn l2_norm(v: &[f64]) -> f64 {
    let m = (v.len() + 1) as f64;
    (v.iter().map(|x| x * x).sum::<f64>() / m).sqrt()
}
