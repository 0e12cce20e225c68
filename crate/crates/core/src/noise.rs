//! Brownian-sheet increments for the finite-difference system.
//!
//! Increments at the finest level are generated from a counter-based
//! stream: the deviate for `(seed, sample_index, n, m)` is a fixed function
//! of those four integers (ChaCha8 keyed on `(seed, sample_index)`, stream
//! `n`, word `m`, mapped through the inverse normal CDF). Coarser levels
//! are sums of fine increments in a fixed binary-tree order, so any two
//! dyadic levels agree bit for bit on their common coarsening.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

/// Everything that determines one realization of the driving noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePlan {
    pub seed: u64,
    pub sample_index: u64,
    /// Spatial cells `M`; blocks carry `M - 1` entries.
    pub cells: usize,
    /// Number of steps at the finest level.
    pub n_ref: usize,
    pub t_final: f64,
}

/// Increments `dW^n_m` for one step at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementBlock {
    /// Step index at the block's own level.
    pub n: usize,
    pub dw: Vec<f64>,
}

impl NoisePlan {
    pub fn new(
        seed: u64,
        sample_index: u64,
        cells: usize,
        n_ref: usize,
        t_final: f64,
    ) -> Result<Self> {
        if cells < 2 {
            return Err(Error::invalid(
                "M",
                format!("need at least 2 cells, got {cells}"),
            ));
        }
        if n_ref == 0 {
            return Err(Error::invalid("N_ref", "must be positive"));
        }
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(Error::invalid(
                "T",
                format!("must be positive, got {t_final}"),
            ));
        }
        Ok(Self {
            seed,
            sample_index,
            cells,
            n_ref,
            t_final,
        })
    }

    pub fn dt_ref(&self) -> f64 {
        self.t_final / self.n_ref as f64
    }

    pub fn dim(&self) -> usize {
        self.cells - 1
    }

    fn generator(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.sample_index.to_le_bytes());
        key[16..24].copy_from_slice(b"brwnsht1");
        ChaCha8Rng::from_seed(key)
    }

    /// Standard normal deviates for fine step `n`, written into `out`.
    pub fn fill_standard_normals(&self, n: usize, out: &mut [f64]) {
        let mut rng = self.generator();
        rng.set_stream(n as u64);
        rng.set_word_pos(0);
        for z in out.iter_mut() {
            *z = standard_normal_from_bits(rng.next_u64());
        }
    }

    /// Fine-level increments for step `n`, written into `out` (length `M - 1`).
    pub fn fill_block(&self, n: usize, out: &mut [f64]) -> Result<()> {
        if n >= self.n_ref {
            return Err(Error::invalid(
                "n",
                format!("step {n} out of range 0..{}", self.n_ref),
            ));
        }
        if out.len() != self.dim() {
            return Err(Error::LengthMismatch {
                expected: self.dim(),
                got: out.len(),
            });
        }
        self.fill_standard_normals(n, out);
        let scale = self.dt_ref().sqrt();
        for z in out.iter_mut() {
            *z *= scale;
        }
        Ok(())
    }
}

/// Maps 64 random bits to a standard normal deviate by inversion.
///
/// The top 53 bits give `u = (k + 1/2) / 2^53` in the open unit interval.
pub fn standard_normal_from_bits(bits: u64) -> f64 {
    let k = bits >> 11;
    let scale = 1.0 / (1u64 << 53) as f64;
    if k < 1u64 << 52 {
        let u = (k as f64 + 0.5) * scale;
        -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
    } else {
        // upper half through the exact complement, so u never rounds to 1
        let v = (((1u64 << 53) - k) as f64 - 0.5) * scale;
        std::f64::consts::SQRT_2 * erfc_inv(2.0 * v)
    }
}

/// Finest-level increments for step `n`.
pub fn sample_block(plan: &NoisePlan, n: usize) -> Result<IncrementBlock> {
    let mut dw = vec![0.0; plan.dim()];
    plan.fill_block(n, &mut dw)?;
    Ok(IncrementBlock { n, dw })
}

/// Sums `r` consecutive blocks into one block of the level `r` times coarser.
///
/// The blocks must start at a multiple of `r`. Summation follows a balanced
/// binary tree (left half first, split at `ceil(len / 2)`), which makes
/// repeated pairwise coarsening identical to a single coarsening by a
/// power of two.
pub fn coarsen(blocks: &[IncrementBlock]) -> Result<IncrementBlock> {
    let r = blocks.len();
    if r == 0 {
        return Err(Error::invalid("blocks", "need at least one block"));
    }
    let first = blocks[0].n;
    if !first.is_multiple_of(r) {
        return Err(Error::NotConsecutive { index: 0, n: first });
    }
    let dim = blocks[0].dw.len();
    for (i, b) in blocks.iter().enumerate() {
        if b.n != first + i {
            return Err(Error::NotConsecutive { index: i, n: b.n });
        }
        if b.dw.len() != dim {
            return Err(Error::LengthMismatch {
                expected: dim,
                got: b.dw.len(),
            });
        }
    }
    Ok(IncrementBlock {
        n: first / r,
        dw: tree_sum(blocks),
    })
}

fn tree_sum(blocks: &[IncrementBlock]) -> Vec<f64> {
    if blocks.len() == 1 {
        return blocks[0].dw.clone();
    }
    let mid = blocks.len().div_ceil(2);
    let mut left = tree_sum(&blocks[..mid]);
    let right = tree_sum(&blocks[mid..]);
    for (l, r) in left.iter_mut().zip(&right) {
        *l += r;
    }
    left
}

/// Iterator over the blocks of a coarse level, regenerating fine blocks on
/// demand.
#[derive(Debug, Clone)]
pub struct CoupledStream {
    plan: NoisePlan,
    ratio: usize,
    n_coarse: usize,
    next: usize,
}

pub fn coupled_stream(plan: &NoisePlan, n_coarse: usize) -> Result<CoupledStream> {
    if n_coarse == 0 || !plan.n_ref.is_multiple_of(n_coarse) {
        return Err(Error::invalid(
            "N_coarse",
            format!("{n_coarse} does not divide N_ref = {}", plan.n_ref),
        ));
    }
    Ok(CoupledStream {
        plan: *plan,
        ratio: plan.n_ref / n_coarse,
        n_coarse,
        next: 0,
    })
}

impl CoupledStream {
    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn len(&self) -> usize {
        self.n_coarse
    }

    pub fn is_empty(&self) -> bool {
        self.n_coarse == 0
    }

    fn coarse_range(&self, lo: usize, len: usize) -> Vec<f64> {
        if len == 1 {
            let mut dw = vec![0.0; self.plan.dim()];
            self.plan
                .fill_block(lo, &mut dw)
                .expect("index checked by construction");
            return dw;
        }
        let mid = len.div_ceil(2);
        let mut left = self.coarse_range(lo, mid);
        let right = self.coarse_range(lo + mid, len - mid);
        for (l, r) in left.iter_mut().zip(&right) {
            *l += r;
        }
        left
    }
}

impl Iterator for CoupledStream {
    type Item = IncrementBlock;

    fn next(&mut self) -> Option<IncrementBlock> {
        if self.next >= self.n_coarse {
            return None;
        }
        let n = self.next;
        self.next += 1;
        Some(IncrementBlock {
            n,
            dw: self.coarse_range(n * self.ratio, self.ratio),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.n_coarse - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for CoupledStream {}

/// Streams fine blocks once and emits every dyadic coarsening as it
/// completes, using a binary-counter stack of partial sums.
///
/// After fine block `i` is pushed, the coarse block of ratio `2^k` ending at
/// `i` is available iff `(i + 1)` is a multiple of `2^k`. The values are
/// bit-identical to [`coarsen`] and [`CoupledStream`].
#[derive(Debug, Clone)]
pub struct DyadicCoarsener {
    dim: usize,
    max_level: usize,
    /// `stack[k]` holds a completed partial sum of `2^k` fine blocks.
    stack: Vec<Option<Vec<f64>>>,
    spare: Vec<Vec<f64>>,
}

impl DyadicCoarsener {
    /// Tracks ratios `2^0 ..= 2^max_level`.
    pub fn new(dim: usize, max_level: usize) -> Self {
        Self {
            dim,
            max_level,
            stack: vec![None; max_level + 1],
            spare: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Pushes the next fine block and calls `emit(level, sum)` for every
    /// coarse block of ratio `2^level` that completes, finest first.
    pub fn push<F>(&mut self, fine: &[f64], mut emit: F)
    where
        F: FnMut(usize, &[f64]),
    {
        debug_assert_eq!(fine.len(), self.dim);
        let mut carry = self.spare.pop().unwrap_or_else(|| vec![0.0; self.dim]);
        carry.copy_from_slice(fine);
        emit(0, &carry);
        let mut level = 0;
        while level < self.max_level {
            match self.stack[level].take() {
                None => {
                    self.stack[level] = Some(carry);
                    return;
                }
                Some(mut left) => {
                    for (l, r) in left.iter_mut().zip(&carry) {
                        *l += r;
                    }
                    self.spare.push(carry);
                    carry = left;
                    level += 1;
                    emit(level, &carry);
                }
            }
        }
        self.spare.push(carry);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(seed: u64, sample: u64, cells: usize, n_ref: usize) -> NoisePlan {
        NoisePlan::new(seed, sample, cells, n_ref, 1.0).unwrap()
    }

    #[test]
    fn blocks_are_deterministic() {
        let p = plan(7, 3, 16, 64);
        let a = sample_block(&p, 5).unwrap();
        let b = sample_block(&p, 5).unwrap();
        assert_eq!(a, b);
        let other = sample_block(&plan(7, 4, 16, 64), 5).unwrap();
        assert_ne!(a.dw, other.dw);
        assert!(sample_block(&p, 64).is_err());
    }

    #[test]
    fn order_of_generation_does_not_matter() {
        let p = plan(1, 0, 8, 32);
        let forward: Vec<_> = (0..32).map(|n| sample_block(&p, n).unwrap()).collect();
        let backward: Vec<_> = (0..32)
            .rev()
            .map(|n| sample_block(&p, n).unwrap())
            .collect();
        for (f, b) in forward.iter().zip(backward.iter().rev()) {
            assert_eq!(f, b);
        }
    }

    #[test]
    fn coarsen_identity_and_pairs() {
        let p = plan(2, 0, 6, 8);
        let a = sample_block(&p, 2).unwrap();
        let b = sample_block(&p, 3).unwrap();
        let one = coarsen(std::slice::from_ref(&a)).unwrap();
        assert_eq!(one.dw, a.dw);
        let two = coarsen(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(two.n, 1);
        for i in 0..5 {
            assert_eq!(two.dw[i], a.dw[i] + b.dw[i]);
        }
    }

    #[test]
    fn coarsen_rejects_gaps_and_misalignment() {
        let p = plan(2, 0, 6, 8);
        let a = sample_block(&p, 0).unwrap();
        let c = sample_block(&p, 2).unwrap();
        assert!(matches!(
            coarsen(&[a, c]),
            Err(Error::NotConsecutive { index: 1, .. })
        ));
        let b = sample_block(&p, 1).unwrap();
        let c = sample_block(&p, 2).unwrap();
        assert!(coarsen(&[b, c]).is_err());
        assert!(coarsen(&[]).is_err());
    }

    #[test]
    fn nested_coarsening_is_bit_exact() {
        let p = plan(11, 2, 10, 16);
        let fine: Vec<_> = (0..16).map(|n| sample_block(&p, n).unwrap()).collect();
        let pairs: Vec<_> = fine.chunks(2).map(|c| coarsen(c).unwrap()).collect();
        let quads_from_pairs: Vec<_> = pairs.chunks(2).map(|c| coarsen(c).unwrap()).collect();
        let quads_direct: Vec<_> = fine.chunks(4).map(|c| coarsen(c).unwrap()).collect();
        assert_eq!(quads_from_pairs, quads_direct);
        let eight_a = coarsen(&quads_direct[..2]).unwrap();
        let eight_b = coarsen(&fine[..8]).unwrap();
        assert_eq!(eight_a, eight_b);
    }

    #[test]
    fn coupled_stream_matches_blocks() {
        let p = plan(5, 1, 8, 16);
        let fine: Vec<_> = coupled_stream(&p, 16).unwrap().collect();
        for (n, b) in fine.iter().enumerate() {
            assert_eq!(*b, sample_block(&p, n).unwrap());
        }
        let coarse: Vec<_> = coupled_stream(&p, 4).unwrap().collect();
        assert_eq!(coarse.len(), 4);
        for (k, b) in coarse.iter().enumerate() {
            assert_eq!(*b, coarsen(&fine[4 * k..4 * k + 4]).unwrap());
        }
        assert!(coupled_stream(&p, 3).is_err());
        assert!(coupled_stream(&p, 0).is_err());
    }

    #[test]
    fn totals_agree_across_levels() {
        let p = plan(9, 0, 5, 32);
        let total = |n: usize| {
            let blocks: Vec<_> = coupled_stream(&p, n).unwrap().collect();
            let mut level = blocks;
            while level.len() > 1 {
                level = level.chunks(2).map(|c| coarsen(c).unwrap()).collect();
            }
            level.pop().unwrap().dw
        };
        let t32 = total(32);
        for n in [1, 2, 4, 8, 16] {
            assert_eq!(total(n), t32);
        }
    }

    #[test]
    fn dyadic_coarsener_matches_stream() {
        let p = plan(21, 4, 9, 64);
        let mut coarsener = DyadicCoarsener::new(p.dim(), 6);
        let mut emitted: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 7];
        let mut buf = vec![0.0; p.dim()];
        for n in 0..64 {
            p.fill_block(n, &mut buf).unwrap();
            coarsener.push(&buf, |level, sum| emitted[level].push(sum.to_vec()));
        }
        for (level, blocks) in emitted.iter().enumerate() {
            let want: Vec<_> = coupled_stream(&p, 64 >> level)
                .unwrap()
                .map(|b| b.dw)
                .collect();
            assert_eq!(*blocks, want, "level {level}");
        }
    }

    #[test]
    fn inverse_cdf_symmetry_and_range() {
        assert!(standard_normal_from_bits(1u64 << 63).abs() < 1e-15);
        let lo = standard_normal_from_bits(0);
        let hi = standard_normal_from_bits(u64::MAX);
        assert!(lo.is_finite() && hi.is_finite());
        assert!((lo + hi).abs() < 1e-9);
        assert!(lo < -8.0);
    }
}
