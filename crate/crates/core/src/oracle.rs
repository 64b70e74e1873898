//! Brute-force reference solvers used to check the layer and to score the
//! learned solver.
//!
//! These deliberately avoid the layer's machinery: subsets are enumerated by
//! bitmask, and affine-hull projections go through Gram–Schmidt on the
//! selected rows instead of an SVD pseudoinverse.

use alloc::vec;
use alloc::vec::Vec;

use crate::constraint::{ConstraintSystem, IndexCombination};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, pinv, svd, Matrix, Vector, DEFAULT_RANK_TOL};
use crate::rng::{self, streams};

/// Enumeration bounds for [`exact_projection`].
pub const MAX_ORACLE_N_OUT: usize = 6;
pub const MAX_ORACLE_M: usize = 12;

/// Feasibility slack used by the oracles.
pub const ORACLE_FEAS_TOL: f64 = 1e-9;

pub const REFERENCE_STARTS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub y_star: Vector,
    /// Active rows at the solution (projection oracle only).
    pub active_set: Option<IndexCombination>,
    /// Distance for the projection oracle, objective for the program solver.
    pub value: f64,
    pub converged: bool,
}

/// Orthonormal rows spanning the selected rows plus the transformed
/// right-hand side, so `A_s y = b_s  <=>  Q y = c`. `None` if the rows are
/// linearly dependent.
fn orthonormalize(a: &Matrix, b: &[f64], rows: &[usize]) -> Option<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    let mut c = Vec::with_capacity(rows.len());
    for &r in rows {
        let mut v = a.row(r).to_vec();
        let mut rhs = b[r];
        let norm0 = libm::sqrt(dot(&v, &v));
        // two passes of modified Gram–Schmidt for stability
        for _ in 0..2 {
            for (qi, ci) in q.iter().zip(&c) {
                let proj = dot(qi, &v);
                axpy(-proj, qi, &mut v);
                rhs -= proj * ci;
            }
        }
        let norm = libm::sqrt(dot(&v, &v));
        if norm <= 1e-10 * norm0.max(1e-300) {
            return None;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
        c.push(rhs / norm);
    }
    Some((q, c))
}

fn max_slack(sys: &ConstraintSystem, y: &[f64]) -> f64 {
    (0..sys.m())
        .map(|i| dot(sys.a().row(i), y) - sys.b()[i])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Euclidean projection of `z` onto `{y : A y <= b}` by trying every
/// linearly independent active set of size `<= n_out` (including the empty
/// set) and keeping the nearest feasible point.
pub fn exact_projection(sys: &ConstraintSystem, z: &[f64]) -> Result<OracleResult> {
    let (m, n) = (sys.m(), sys.n_out());
    if z.len() != n {
        return Err(Error::dim("exact_projection z", n, z.len()));
    }
    if n > MAX_ORACLE_N_OUT || m > MAX_ORACLE_M {
        return Err(Error::InvalidArgument(alloc::format!(
            "exact projection enumerates at most {MAX_ORACLE_M} rows and {MAX_ORACLE_N_OUT} outputs, got {m}x{n}"
        )));
    }
    let mut best: Option<(f64, Vec<f64>, u32)> = None;
    let mut least: Option<(f64, Vec<f64>)> = None;
    let mut rows = Vec::with_capacity(n);
    for mask in 0u32..(1u32 << m) {
        if mask.count_ones() as usize > n {
            continue;
        }
        rows.clear();
        rows.extend((0..m).filter(|i| mask & (1 << i) != 0));
        let Some((q, c)) = orthonormalize(sys.a(), sys.b(), &rows) else {
            continue;
        };
        let mut y = z.to_vec();
        for (qi, ci) in q.iter().zip(&c) {
            let r = dot(qi, z) - ci;
            axpy(-r, qi, &mut y);
        }
        let worst = max_slack(sys, &y);
        let dist = libm::sqrt(y.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum());
        if worst <= ORACLE_FEAS_TOL {
            if best.as_ref().map_or(true, |(d, ..)| dist < *d) {
                best = Some((dist, y, mask));
            }
        } else if least.as_ref().map_or(true, |(w, _)| worst < *w) {
            least = Some((worst, y));
        }
    }
    match best {
        Some((dist, y, mask)) => {
            let active = (mask != 0).then(|| {
                IndexCombination::new(
                    &(0..m).filter(|i| mask & (1 << i) != 0).map(|i| i + 1).collect::<Vec<_>>(),
                )
                .expect("mask indices increase")
            });
            Ok(OracleResult {
                y_star: Vector::new(y)?,
                active_set: active,
                value: dist,
                converged: true,
            })
        }
        None => {
            let (worst, y) = least.unwrap_or((f64::INFINITY, z.to_vec()));
            Ok(OracleResult {
                y_star: Vector::new(y)?,
                active_set: None,
                value: worst,
                converged: false,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    pub witness: Option<Vector>,
    /// Best normalized max slack found (<= 0 when feasible).
    pub best_slack: f64,
}

/// Decides whether `{y : A y <= b}` is non-empty.
///
/// First minimizes the normalized max slack `max_i (a_i y - b_i)/|a_i|` by
/// subgradient descent from several starts, which tends to return an
/// interior point. If that fails and the system is small enough, every
/// independent row subset's least-norm solution is checked.
pub fn feasibility_check(sys: &ConstraintSystem) -> Feasibility {
    let (m, n) = (sys.m(), sys.n_out());
    let norms: Vec<f64> = (0..m)
        .map(|i| libm::sqrt(dot(sys.a().row(i), sys.a().row(i))))
        .collect();
    let normalized = |y: &[f64]| -> (f64, usize) {
        let mut worst = (f64::NEG_INFINITY, 0);
        for i in 0..m {
            let s = if norms[i] > 0.0 {
                (dot(sys.a().row(i), y) - sys.b()[i]) / norms[i]
            } else {
                -sys.b()[i]
            };
            if s > worst.0 {
                worst = (s, i);
            }
        }
        worst
    };

    let scale = sys.b().iter().fold(1.0_f64, |s, v| s.max(v.abs()));
    let mut r = rng::stream(0xfea5, streams::STARTS);
    let mut best_slack = f64::INFINITY;
    let mut best_y: Vec<f64> = vec![0.0; n];
    for start in 0..8 {
        let mut y: Vec<f64> = if start == 0 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| rng::uniform(&mut r, -scale, scale)).collect()
        };
        for it in 0..2000 {
            let (s, i) = normalized(&y);
            if s < best_slack {
                best_slack = s;
                best_y.copy_from_slice(&y);
            }
            if norms[i] == 0.0 {
                break;
            }
            let step = scale / libm::sqrt(it as f64 + 1.0);
            axpy(-step / norms[i], sys.a().row(i), &mut y);
        }
        if best_slack < 0.0 {
            break;
        }
    }
    if best_slack <= 0.0 {
        return Feasibility {
            feasible: true,
            witness: Vector::new(best_y).ok(),
            best_slack,
        };
    }

    if m <= MAX_ORACLE_M && n <= MAX_ORACLE_N_OUT {
        let zero = vec![0.0; n];
        if let Ok(res) = exact_projection(sys, &zero) {
            if res.converged {
                let s = normalized(&res.y_star).0;
                return Feasibility {
                    feasible: true,
                    witness: Some(res.y_star),
                    best_slack: s,
                };
            }
        }
    }
    Feasibility {
        feasible: false,
        witness: None,
        best_slack,
    }
}

/// Orthonormal basis of the null space of `c` as columns (`n x (n - rank)`),
/// each column signed so its first non-negligible entry is positive.
pub fn null_space_basis(c: &Matrix, rank_tol: f64) -> Result<Matrix> {
    let n = c.cols();
    let cp = pinv(c, rank_tol)?;
    let pc = cp.matmul(c)?;
    let proj = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 - pc[(i, j)] } else { -pc[(i, j)] });
    let dec = svd(&proj)?;
    let dim = dec.singular.iter().filter(|&&s| s > 0.5).count();
    let mut basis = Matrix::zeros(n, dim);
    for k in 0..dim {
        let col: Vec<f64> = (0..n).map(|i| dec.u[(i, k)]).collect();
        let sign = col
            .iter()
            .find(|v| v.abs() > 1e-12)
            .map_or(1.0, |v| v.signum());
        for i in 0..n {
            basis[(i, k)] = sign * col[i];
        }
    }
    Ok(basis)
}

/// `1/2 y^T Q y + p^T sin(y)`
pub fn program_objective(q: &Matrix, p: &[f64], y: &[f64]) -> f64 {
    let qy = q.mul_vec(y).expect("shape checked by caller");
    0.5 * dot(y, &qy) + p.iter().zip(y).map(|(pi, yi)| pi * libm::sin(*yi)).sum::<f64>()
}

/// `Q y + p * cos(y)`
pub fn program_gradient(q: &Matrix, p: &[f64], y: &[f64]) -> Vec<f64> {
    let mut g = q.mul_vec(y).expect("shape checked by caller");
    for ((gi, pi), yi) in g.iter_mut().zip(p).zip(y) {
        *gi += pi * libm::cos(*yi);
    }
    g
}

/// Minimizes `1/2 y^T Q y + p^T sin(y)` subject to `G y <= h`, `C y = x`.
///
/// The equalities are eliminated with `y = C^+ x + N z`. Each of
/// [`REFERENCE_STARTS`] seeded starts runs projected gradient descent in `z`
/// with backtracking, projecting with [`exact_projection`]. The best final
/// objective wins; ties go to the lower start index.
pub fn solve_reference_program(
    q: &Matrix,
    p: &[f64],
    g: &Matrix,
    h: &[f64],
    c: &Matrix,
    x: &[f64],
) -> Result<OracleResult> {
    let n = q.rows();
    if q.cols() != n || p.len() != n || g.cols() != n || c.cols() != n {
        return Err(Error::dim("solve_reference_program n_out", n, p.len()));
    }
    if h.len() != g.rows() || x.len() != c.rows() {
        return Err(Error::dim("solve_reference_program rhs", g.rows(), h.len()));
    }
    let y0 = pinv(c, DEFAULT_RANK_TOL)?.mul_vec(x)?;
    let basis = null_space_basis(c, DEFAULT_RANK_TOL)?;
    let d = basis.cols();
    let lift = |z: &[f64]| -> Vec<f64> {
        let mut y = y0.clone();
        for (k, zk) in z.iter().enumerate() {
            for i in 0..n {
                y[i] += basis[(i, k)] * zk;
            }
        }
        y
    };

    let gy0 = g.mul_vec(&y0)?;
    let g_red = g.matmul(&basis)?;
    let h_red: Vec<f64> = h.iter().zip(&gy0).map(|(a, b)| a - b).collect();

    if d == 0 {
        let feasible = gy0.iter().zip(h).all(|(a, b)| a - b <= ORACLE_FEAS_TOL);
        return Ok(OracleResult {
            value: program_objective(q, p, &y0),
            y_star: Vector::new(y0)?,
            active_set: None,
            converged: feasible,
        });
    }
    let reduced = ConstraintSystem::new(g_red, Vector::new(h_red)?)?;
    let project = |z: &[f64]| exact_projection(&reduced, z);

    let objective = |z: &[f64]| program_objective(q, p, &lift(z));
    let gradient = |z: &[f64]| -> Vec<f64> {
        let gy = program_gradient(q, p, &lift(z));
        basis.tr_mul_vec(&gy).expect("basis rows match n_out")
    };

    let mut r = rng::stream(0x5e1f, streams::STARTS);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in 0..REFERENCE_STARTS {
        let z0: Vec<f64> = if start == 0 {
            vec![0.0; d]
        } else {
            (0..d).map(|_| rng::uniform(&mut r, -2.0, 2.0)).collect()
        };
        let proj = project(&z0)?;
        if !proj.converged {
            continue;
        }
        let mut z = proj.y_star.into_inner();
        let mut fz = objective(&z);
        let mut step = 1.0;
        for _ in 0..500 {
            let gz = gradient(&z);
            let mut accepted = None;
            for _ in 0..40 {
                let trial: Vec<f64> = z.iter().zip(&gz).map(|(a, b)| a - step * b).collect();
                let res = project(&trial)?;
                if !res.converged {
                    step *= 0.5;
                    continue;
                }
                let zn = res.y_star.into_inner();
                let dz: Vec<f64> = zn.iter().zip(&z).map(|(a, b)| a - b).collect();
                let fn_ = objective(&zn);
                if fn_ <= fz + dot(&gz, &dz) + dot(&dz, &dz) / (2.0 * step) {
                    accepted = Some((zn, fn_, libm::sqrt(dot(&dz, &dz))));
                    break;
                }
                step *= 0.5;
            }
            let Some((zn, fn_, moved)) = accepted else { break };
            z = zn;
            fz = fn_;
            step = (step * 2.0).min(1.0);
            if moved < 1e-12 {
                break;
            }
        }
        if best.as_ref().map_or(true, |(f, _)| fz < *f) {
            best = Some((fz, z));
        }
    }
    match best {
        Some((f, z)) => Ok(OracleResult {
            y_star: Vector::new(lift(&z))?,
            active_set: None,
            value: f,
            converged: true,
        }),
        None => Ok(OracleResult {
            y_star: Vector::new(y0)?,
            active_set: None,
            value: f64::INFINITY,
            converged: false,
        }),
    }
}
