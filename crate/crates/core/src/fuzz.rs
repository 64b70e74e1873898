//! Seeded generators for the property suites: feasible constraint systems
//! with duplicated, scaled, negated and linearly dependent rows, and random
//! matrices of controlled rank.

use alloc::vec::Vec;

use rand_core::RngCore;

use crate::constraint::ConstraintSystem;
use crate::linalg::{Matrix, Vector};
use crate::rng::{int_inclusive, normal, uniform, unit};

/// Size limits for [`feasible_system`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SystemLimits {
    pub max_n_out: usize,
    pub max_m: usize,
}

impl Default for SystemLimits {
    fn default() -> Self {
        Self {
            max_n_out: 4,
            max_m: 10,
        }
    }
}

/// A generated system with a point known to satisfy it.
#[derive(Clone, Debug)]
pub struct FeasibleSystem {
    pub system: ConstraintSystem,
    pub witness: Vector,
}

fn normal_vec(rng: &mut impl RngCore, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

/// Random system `A y <= b` that `witness` satisfies. About a third of the
/// rows are derived from earlier ones (copies, positive multiples, negations
/// or combinations), and about a third are tight at the witness.
pub fn feasible_system(rng: &mut impl RngCore, limits: SystemLimits) -> FeasibleSystem {
    let n = int_inclusive(rng, 1, limits.max_n_out);
    let m = int_inclusive(rng, 1, limits.max_m);
    let witness = normal_vec(rng, n, 1.5);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    for _ in 0..m {
        let row = if rows.is_empty() {
            normal_vec(rng, n, 1.0)
        } else {
            let pick = int_inclusive(rng, 0, rows.len() - 1);
            match int_inclusive(rng, 0, 9) {
                0 => rows[pick].clone(),
                1 => rows[pick].iter().map(|v| v * uniform(rng, 0.5, 3.0)).collect(),
                2 => rows[pick].iter().map(|v| -v).collect(),
                3 => {
                    let other = int_inclusive(rng, 0, rows.len() - 1);
                    let (s, t) = (normal(rng), normal(rng));
                    rows[pick].iter().zip(&rows[other]).map(|(a, b)| s * a + t * b).collect()
                }
                _ => normal_vec(rng, n, 1.0),
            }
        };
        rows.push(row);
    }
    let b: Vec<f64> = rows
        .iter()
        .map(|r| {
            let at: f64 = r.iter().zip(&witness).map(|(a, y)| a * y).sum();
            if unit(rng) < 0.35 {
                at
            } else {
                at + uniform(rng, 0.0, 2.0)
            }
        })
        .collect();
    let a = Matrix::from_rows(&rows).expect("rows share a length");
    FeasibleSystem {
        system: ConstraintSystem::new(a, Vector::new(b).expect("finite")).expect("shapes agree"),
        witness: Vector::new(witness).expect("finite"),
    }
}

/// Gaussian vector scaled by `scale`.
pub fn point(rng: &mut impl RngCore, n: usize, scale: f64) -> Vec<f64> {
    normal_vec(rng, n, scale)
}

/// `rows x cols` matrix of rank at most `rank`, built as a product of
/// Gaussian factors and scaled by a random power of ten in `[1e-2, 1e2]`.
pub fn matrix_with_rank(rng: &mut impl RngCore, rows: usize, cols: usize, rank: usize) -> Matrix {
    let scale = libm::pow(10.0, uniform(rng, -2.0, 2.0));
    if rank == 0 {
        return Matrix::zeros(rows, cols);
    }
    let left = normal_vec(rng, rows * rank, 1.0);
    let right = normal_vec(rng, rank * cols, 1.0);
    Matrix::from_fn(rows, cols, |i, j| {
        scale * (0..rank).map(|k| left[i * rank + k] * right[k * cols + j]).sum::<f64>()
    })
}

/// Random shape up to `max_dim` with a random rank, occasionally with a
/// repeated row.
pub fn random_matrix(rng: &mut impl RngCore, max_dim: usize) -> Matrix {
    let rows = int_inclusive(rng, 1, max_dim);
    let cols = int_inclusive(rng, 1, max_dim);
    let rank = int_inclusive(rng, 0, rows.min(cols));
    let a = matrix_with_rank(rng, rows, cols, rank);
    if rows > 1 && unit(rng) < 0.2 {
        let mut data = a.as_slice().to_vec();
        let (src, dst) = (int_inclusive(rng, 0, rows - 1), int_inclusive(rng, 0, rows - 1));
        let copy = a.row(src).to_vec();
        data[dst * cols..(dst + 1) * cols].copy_from_slice(&copy);
        return Matrix::new(rows, cols, data).expect("same shape");
    }
    a
}
