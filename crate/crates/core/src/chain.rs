//! Markov-chain quantities of a walk driven by a mixing matrix: spectral gaps
//! and the first two moments of the first return time to a target node.
//!
//! Return-time moments come from first-step analysis. With `T` the first
//! hitting time of the target `0` (counting at least one step) and
//! `m_i = E[T | X_0 = i]`, `M_i = E[T² | X_0 = i]`:
//!
//! ```text
//! m_i = 1 + Σ_{j≠0} p_ij m_j
//! M_i = Σ_j p_ij E[(1 + T_j)²] = 1 + Σ_{j≠0} p_ij (2 m_j + M_j)
//! ```
//!
//! Evaluated at `i = 0` these give the mean return time and `H²`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::graph::{MixingMatrix, TransitionSampler, STOCHASTIC_TOL};
use crate::linalg::{self, LinalgError};

/// Accuracy of the eigenvalue-based spectral gaps.
pub const GAP_TOL: f64 = 1e-10;
/// Maximum relative residual accepted from the exact moment solve.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-9;
/// Fraction of Monte-Carlo excursions allowed to hit `max_steps`.
pub const MAX_TRUNCATED_FRACTION: f64 = 1e-3;
/// Independent shards a Monte-Carlo estimate is split into.
pub const MC_SHARDS: u64 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("chain needs at least {need} states, got {got}")]
    TooSmall { need: usize, got: usize },
    #[error("target node {target} out of range for {size} states")]
    BadTarget { target: usize, size: usize },
    #[error("chain is reducible: support of P is not strongly connected")]
    Reducible,
    #[error("first-step system is singular (reducible chain?): {0}")]
    Singular(LinalgError),
    #[error("first-step solve residual {residual:e} exceeds {limit:e}")]
    Residual { residual: f64, limit: f64 },
    #[error(transparent)]
    Eigen(LinalgError),
    #[error("spectral gap of P needs a symmetric matrix")]
    NotSymmetric,
    #[error("cycle recurrences need an even V >= 4, got {0}")]
    OddOrSmallCycle(usize),
    #[error("need at least one sample")]
    NoSamples,
    #[error("{truncated} of {samples} excursions hit max_steps = {max_steps}; raise max_steps")]
    TooManyTruncated {
        truncated: u64,
        samples: u64,
        max_steps: u64,
    },
    #[error("row {row} of P sums to {sum}")]
    RowSum { row: usize, sum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralGaps {
    /// `1 − λ₂(PᵀP)`.
    pub p: f64,
    /// `1 − λ₂(P)`.
    pub p_prime: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentStderr {
    pub mean: f64,
    pub second: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReturnMoments {
    /// `E[h]` in iterations.
    pub mean: f64,
    /// `E[h²]`, i.e. `H²`.
    pub second: f64,
    /// Standard errors, present for Monte-Carlo estimates.
    pub stderr: Option<MomentStderr>,
}

/// Second-largest eigenvalue by value, clamped into a gap in `[0, 1]`.
fn gap_from(eigs: &[f64]) -> f64 {
    (1.0 - eigs[1]).clamp(0.0, 1.0)
}

/// Spectral gaps `p` (of `PᵀP`) and `p′` (of `P`).
///
/// Both use the second-largest eigenvalue by algebraic value. `p′` is only
/// defined here for symmetric `P`.
pub fn spectral_gaps(p: &MixingMatrix) -> Result<SpectralGaps, ChainError> {
    let n = p.size();
    if n < 2 {
        return Err(ChainError::TooSmall { need: 2, got: n });
    }
    if !p.is_symmetric() {
        return Err(ChainError::NotSymmetric);
    }
    let tol = GAP_TOL * 1e-2;
    let eig_p = linalg::symmetric_eigenvalues(n, p.as_row_major(), tol).map_err(ChainError::Eigen)?;
    let eig_gram = linalg::symmetric_eigenvalues(n, &p.gram(), tol).map_err(ChainError::Eigen)?;
    Ok(SpectralGaps {
        p: gap_from(&eig_gram),
        p_prime: gap_from(&eig_p),
    })
}

/// Exact first and second moments of the first return time to `target`,
/// by solving the two first-step linear systems over the non-target states.
pub fn return_moments_exact(p: &MixingMatrix, target: usize) -> Result<ReturnMoments, ChainError> {
    let (first, second) = hitting_moments(p, target)?;
    Ok(ReturnMoments {
        mean: first[target],
        second: second[target],
        stderr: None,
    })
}

/// Per-start-state hitting moments `(m_i, M_i)`; entry `target` holds the
/// return-time moments.
pub fn hitting_moments(p: &MixingMatrix, target: usize) -> Result<(Vec<f64>, Vec<f64>), ChainError> {
    let n = p.size();
    if target >= n {
        return Err(ChainError::BadTarget { target, size: n });
    }
    if n == 1 {
        return Ok((vec![1.0], vec![1.0]));
    }
    if !p.is_irreducible() {
        return Err(ChainError::Reducible);
    }
    // states other than the target, in order
    let others: Vec<usize> = (0..n).filter(|&i| i != target).collect();
    let k = others.len();
    let mut a = vec![0.0; k * k];
    for (r, &i) in others.iter().enumerate() {
        for (c, &j) in others.iter().enumerate() {
            a[r * k + c] = if r == c { 1.0 } else { 0.0 } - p.get(i, j);
        }
    }
    let ones = vec![1.0; k];
    let m = linalg::solve(k, &a, std::slice::from_ref(&ones))
        .map_err(ChainError::Singular)?
        .remove(0);
    check_residual(k, &a, &m, &ones)?;

    // (I − Q) M = 1 + 2 Q m
    let rhs: Vec<f64> = others
        .iter()
        .map(|&i| 1.0 + 2.0 * others.iter().zip(&m).map(|(&j, mj)| p.get(i, j) * mj).sum::<f64>())
        .collect();
    let big_m = linalg::solve(k, &a, std::slice::from_ref(&rhs))
        .map_err(ChainError::Singular)?
        .remove(0);
    check_residual(k, &a, &big_m, &rhs)?;

    let mut first = vec![0.0; n];
    let mut second = vec![0.0; n];
    for (r, &i) in others.iter().enumerate() {
        first[i] = m[r];
        second[i] = big_m[r];
    }
    let row_t: Vec<(f64, usize)> = others.iter().enumerate().map(|(r, &j)| (p.get(target, j), r)).collect();
    first[target] = 1.0 + row_t.iter().map(|&(w, r)| w * m[r]).sum::<f64>();
    second[target] = 1.0 + row_t.iter().map(|&(w, r)| w * (2.0 * m[r] + big_m[r])).sum::<f64>();
    Ok((first, second))
}

fn check_residual(k: usize, a: &[f64], x: &[f64], b: &[f64]) -> Result<(), ChainError> {
    let residual = linalg::relative_residual(k, a, x, b);
    if residual > SOLVE_RESIDUAL_TOL {
        return Err(ChainError::Residual {
            residual,
            limit: SOLVE_RESIDUAL_TOL,
        });
    }
    Ok(())
}

/// Return-time moments of the Metropolis–Hastings walk on an even cycle,
/// from the half-cycle recurrences (stay/left/right each with probability
/// 1/3, symmetric about the antipode `V/2`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleMoments {
    pub moments: ReturnMoments,
    /// `m_0 ..= m_{V/2}`.
    pub first: Vec<f64>,
    /// `M_0 ..= M_{V/2}`.
    pub second: Vec<f64>,
}

impl CycleMoments {
    /// Expected hitting time of node 0 from a neighbor.
    pub fn m1(&self) -> f64 {
        self.first[1]
    }
}

/// Solves the reduced cycle recurrences for even `V ≥ 4`.
///
/// Interior first moments satisfy `m_i = (3 + m_{i+1} + m_{i−1}) / 2` with the
/// reflection `m_{V/2+1} = m_{V/2−1}`, so successive differences telescope:
/// `m_k − m_{k−1} = 3(V/2 − k) + 3/2` for `2 ≤ k ≤ V/2`. Closing with
/// `m_1 = 3/2 + m_2/2` pins `m_1`, then `m_0 = 1 + (2/3) m_1`.
///
/// Second moments follow the same pattern:
/// `M_i = 3 m_i − 3/2 + (M_{i+1} + M_{i−1}) / 2` gives differences
/// `E_i = M_i − M_{i−1}` with `E_{V/2} = 3 m_{V/2} − 3/2` and
/// `E_i = E_{i+1} + 6 m_i − 3`; then `M_1 = 3 m_1 − 3/2 + (M_1 + E_2)/2` and
/// `M_0 = 1 + (4/3) m_1 + (2/3) M_1`.
pub fn return_moments_cycle_analytic(nodes: usize) -> Result<CycleMoments, ChainError> {
    if nodes < 4 || !nodes.is_multiple_of(2) {
        return Err(ChainError::OddOrSmallCycle(nodes));
    }
    let half = nodes / 2;
    let v = nodes as f64;

    // m_2 − m_1
    let d2 = 3.0 * (half - 2) as f64 + 1.5;
    // m_1 = 3/2 + (m_1 + d2)/2
    let m1 = 3.0 + d2;
    let mut first = vec![0.0; half + 1];
    first[1] = m1;
    for k in 2..=half {
        first[k] = first[k - 1] + 3.0 * (half - k) as f64 + 1.5;
    }
    first[0] = 1.0 + 2.0 / 3.0 * m1;
    debug_assert!((first[0] - v).abs() <= 1e-9 * v);

    // differences E_k = M_k − M_{k−1}, k = 2..=half
    let mut diffs = vec![0.0; half + 1];
    diffs[half] = 3.0 * first[half] - 1.5;
    for k in (2..half).rev() {
        diffs[k] = diffs[k + 1] + 6.0 * first[k] - 3.0;
    }
    let big_m1 = 6.0 * m1 - 3.0 + diffs[2];
    let mut second = vec![0.0; half + 1];
    second[1] = big_m1;
    for k in 2..=half {
        second[k] = second[k - 1] + diffs[k];
    }
    second[0] = 1.0 + 4.0 / 3.0 * m1 + 2.0 / 3.0 * big_m1;

    Ok(CycleMoments {
        moments: ReturnMoments {
            mean: first[0],
            second: second[0],
            stderr: None,
        },
        first,
        second,
    })
}

/// Monte-Carlo estimate of the return-time moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McMoments {
    pub moments: ReturnMoments,
    /// Excursions that used all of `max_steps` without returning; excluded
    /// from the moments.
    pub truncated: u64,
    pub samples: u64,
}

#[derive(Default, Clone, Copy)]
struct PowerSums {
    count: u64,
    truncated: u64,
    s1: u128,
    s2: u128,
    s4: u128,
}

impl PowerSums {
    fn merge(self, o: PowerSums) -> PowerSums {
        PowerSums {
            count: self.count + o.count,
            truncated: self.truncated + o.truncated,
            s1: self.s1 + o.s1,
            s2: self.s2 + o.s2,
            s4: self.s4 + o.s4,
        }
    }
}

/// Simulates `n_samples` excursions from `target` and reports the empirical
/// first and second moments of the return time with standard errors.
///
/// Samples are split into [`MC_SHARDS`] shards, each with its own generator
/// seeded from `(seed, shard)`; shard sums are merged exactly, so the result
/// does not depend on the thread count.
pub fn return_moments_mc(
    p: &MixingMatrix,
    target: usize,
    n_samples: u64,
    max_steps: u64,
    seed: u64,
) -> Result<McMoments, ChainError> {
    let n = p.size();
    if target >= n {
        return Err(ChainError::BadTarget { target, size: n });
    }
    if n_samples == 0 {
        return Err(ChainError::NoSamples);
    }
    TransitionSampler::new(p, STOCHASTIC_TOL.max(1e-9)).map_err(|(row, sum)| ChainError::RowSum { row, sum })?;
    let rows: Vec<(Vec<usize>, WeightedAliasIndex<f64>)> = (0..n)
        .map(|i| {
            let (targets, weights): (Vec<usize>, Vec<f64>) = p.row_support(i).into_iter().unzip();
            let alias = WeightedAliasIndex::new(weights).expect("validated row has positive mass");
            (targets, alias)
        })
        .collect();
    let shards = MC_SHARDS.min(n_samples);
    let sums = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let count = n_samples / shards + u64::from(shard < n_samples % shards);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shard);
            let mut acc = PowerSums::default();
            for _ in 0..count {
                let mut state = target;
                let mut steps = 0u64;
                loop {
                    let (targets, alias) = &rows[state];
                    state = targets[alias.sample(&mut rng)];
                    steps += 1;
                    if state == target || steps >= max_steps {
                        break;
                    }
                }
                if state != target {
                    acc.truncated += 1;
                    continue;
                }
                let h = u128::from(steps);
                acc.count += 1;
                acc.s1 += h;
                acc.s2 += h * h;
                acc.s4 += h * h * h * h;
            }
            acc
        })
        .reduce(PowerSums::default, PowerSums::merge);

    if sums.truncated as f64 > MAX_TRUNCATED_FRACTION * n_samples as f64 {
        return Err(ChainError::TooManyTruncated {
            truncated: sums.truncated,
            samples: n_samples,
            max_steps,
        });
    }
    if sums.count == 0 {
        return Err(ChainError::NoSamples);
    }
    let c = sums.count as f64;
    let mean = sums.s1 as f64 / c;
    let second = sums.s2 as f64 / c;
    let fourth = sums.s4 as f64 / c;
    let stderr = if sums.count > 1 {
        let bessel = c / (c - 1.0);
        MomentStderr {
            mean: ((second - mean * mean).max(0.0) * bessel / c).sqrt(),
            second: ((fourth - second * second).max(0.0) * bessel / c).sqrt(),
        }
    } else {
        MomentStderr {
            mean: 0.0,
            second: 0.0,
        }
    };
    Ok(McMoments {
        moments: ReturnMoments {
            mean,
            second,
            stderr: Some(stderr),
        },
        truncated: sums.truncated,
        samples: n_samples,
    })
}
