//! Learning a solver for
//! `min 1/2 y^T Q y + p^T sin(y)  s.t.  G y <= h, C y = x`
//! without labels: the training loss is the objective itself.
//!
//! `h` is chosen so `y = C^+ x` is feasible for every `x` in the unit box.
//! Equalities enter the layer as the paired rows `[C; -C] y <= [x; -x]`.

use alloc::vec::Vec;

use crate::constraint::{CombinationMode, ConstraintSystem, ViolationStats};
use crate::error::Result;
use crate::layer::LayerConfig;
use crate::linalg::{dot, pinv, rank, Matrix, Vector, DEFAULT_RANK_TOL};
use crate::neural::train::{
    predict, train, EpochRecord, LayerEngine, Model, SampleTask, TrainConfig, TrainTrace,
};
use crate::oracle::{program_gradient, program_objective, solve_reference_program, OracleResult};
use crate::rng::{self, streams};

use super::VIOLATION_FLOOR;

pub const N_OUT: usize = 5;
pub const N_INEQ: usize = 5;
pub const N_EQ: usize = 3;
pub const DEFAULT_TRAIN: usize = 200;
pub const DEFAULT_TEST: usize = 200;
pub const DEFAULT_EPOCHS: usize = 2_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverSpec {
    pub q: Matrix,
    pub p: Vec<f64>,
    pub g: Matrix,
    pub c: Matrix,
    pub h: Vec<f64>,
    /// `[G; C; -C]`
    pub a: Matrix,
}

impl SolverSpec {
    /// `h_i = sum_j |(G C^+)_ij|`
    pub fn from_parts(q: Matrix, p: Vec<f64>, g: Matrix, c: Matrix) -> Result<Self> {
        let gc = g.matmul(&pinv(&c, DEFAULT_RANK_TOL)?)?;
        let h = (0..gc.rows())
            .map(|i| gc.row(i).iter().map(|v| v.abs()).sum())
            .collect();
        let (ni, ne, n) = (g.rows(), c.rows(), g.cols());
        let a = Matrix::from_fn(ni + 2 * ne, n, |i, j| {
            if i < ni {
                g[(i, j)]
            } else if i < ni + ne {
                c[(i - ni, j)]
            } else {
                -c[(i - ni - ne, j)]
            }
        });
        Ok(Self { q, p, g, c, h, a })
    }

    /// `[h; x; -x]` paired with the shared matrix.
    pub fn system(&self, x: &[f64]) -> Result<ConstraintSystem> {
        let mut b = self.h.clone();
        b.extend_from_slice(x);
        b.extend(x.iter().map(|v| -v));
        ConstraintSystem::new(self.a.clone(), Vector::new(b)?)
    }

    pub fn objective(&self, y: &[f64]) -> f64 {
        program_objective(&self.q, &self.p, y)
    }

    pub fn gradient(&self, y: &[f64]) -> Vec<f64> {
        program_gradient(&self.q, &self.p, y)
    }

    /// `max(0, G y - h)` and `|C y - x|`, both flushed at the reporting floor.
    pub fn violations(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let flush = |v: f64| if v <= VIOLATION_FLOOR { 0.0 } else { v };
        let ineq = (0..self.g.rows())
            .map(|i| flush(dot(self.g.row(i), y) - self.h[i]))
            .collect();
        let eq = (0..self.c.rows())
            .map(|i| flush((dot(self.c.row(i), y) - x[i]).abs()))
            .collect();
        (ineq, eq)
    }

    pub fn reference(&self, x: &[f64]) -> Result<OracleResult> {
        solve_reference_program(&self.q, &self.p, &self.g, &self.h, &self.c, x)
    }
}

/// Draws `G`, `C` with i.i.d. uniform[-1, 1] entries, `Q = diag(d)` with
/// `d_i` uniform[0.1, 1.1] and `p` uniform[-1, 1]. A draw whose `C` has
/// rank below its row count is discarded and redrawn from the next stream.
pub fn solver_instance(seed: u64) -> Result<SolverSpec> {
    for attempt in 0.. {
        let mut r = rng::stream(seed, streams::INSTANCE + 16 * attempt);
        let mut u = || rng::uniform(&mut r, -1.0, 1.0);
        let g = Matrix::from_fn(N_INEQ, N_OUT, |_, _| u());
        let c = Matrix::from_fn(N_EQ, N_OUT, |_, _| u());
        let d: Vec<f64> = (0..N_OUT).map(|_| u() * 0.5 + 0.6).collect();
        let p: Vec<f64> = (0..N_OUT).map(|_| u()).collect();
        if rank(&c, DEFAULT_RANK_TOL)? < N_EQ {
            continue;
        }
        return SolverSpec::from_parts(Matrix::diag(&d), p, g, c);
    }
    unreachable!("the attempt counter is unbounded")
}

#[derive(Clone, Debug)]
pub struct SolverData {
    pub spec: SolverSpec,
    /// Row-major `count x N_EQ`.
    pub train_x: Vec<f64>,
    pub test_x: Vec<f64>,
    pub train_systems: Vec<ConstraintSystem>,
    pub test_systems: Vec<ConstraintSystem>,
}

impl SolverData {
    pub fn train_task(&self) -> SolverTask<'_> {
        SolverTask {
            spec: &self.spec,
            x: &self.train_x,
            systems: &self.train_systems,
        }
    }

    pub fn test_task(&self) -> SolverTask<'_> {
        SolverTask {
            spec: &self.spec,
            x: &self.test_x,
            systems: &self.test_systems,
        }
    }
}

pub fn solver_dataset(seed: u64, n_train: usize, n_test: usize) -> Result<SolverData> {
    let spec = solver_instance(seed)?;
    let mut r = rng::stream(seed, streams::DATA);
    let mut draw = |count: usize| -> Vec<f64> {
        (0..count * N_EQ).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect()
    };
    let train_x = draw(n_train);
    let test_x = draw(n_test);
    let systems = |xs: &[f64]| -> Result<Vec<ConstraintSystem>> {
        xs.chunks(N_EQ).map(|x| spec.system(x)).collect()
    };
    Ok(SolverData {
        train_systems: systems(&train_x)?,
        test_systems: systems(&test_x)?,
        spec,
        train_x,
        test_x,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct SolverTask<'a> {
    pub spec: &'a SolverSpec,
    pub x: &'a [f64],
    pub systems: &'a [ConstraintSystem],
}

impl SampleTask for SolverTask<'_> {
    fn n_in(&self) -> usize {
        N_EQ
    }

    fn n_out(&self) -> usize {
        N_OUT
    }

    fn len(&self) -> usize {
        self.systems.len()
    }

    fn input(&self, i: usize) -> &[f64] {
        &self.x[i * N_EQ..(i + 1) * N_EQ]
    }

    fn system(&self, i: usize) -> &ConstraintSystem {
        &self.systems[i]
    }

    fn loss(&self, _: usize, y: &[f64], grad: &mut [f64]) -> f64 {
        grad.copy_from_slice(&self.spec.gradient(y));
        self.spec.objective(y)
    }

    fn matrix_is_constant(&self) -> bool {
        true
    }
}

pub fn default_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: DEFAULT_EPOCHS,
        batch_size: DEFAULT_TRAIN,
        seed,
        layer: LayerConfig {
            mode: CombinationMode::Lite,
            ..LayerConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Objective and violation metrics over one evaluated set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolverScore {
    pub objectives: Vec<f64>,
    pub objective_mean: f64,
    pub ineq: ViolationStats,
    pub eq: ViolationStats,
}

impl SolverScore {
    pub fn of(spec: &SolverSpec, xs: &[f64], ys: &[Vec<f64>]) -> Self {
        let mut score = SolverScore::default();
        for (x, y) in xs.chunks(N_EQ).zip(ys) {
            score.objectives.push(spec.objective(y));
            let (ineq, eq) = spec.violations(x, y);
            score.ineq.extend(&ineq);
            score.eq.extend(&eq);
        }
        score.objective_mean = mean(&score.objectives);
        score
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct SolverRun {
    pub model: Model,
    pub trace: TrainTrace,
    pub test_pred: Vec<Vec<f64>>,
    pub score: SolverScore,
}

pub fn run_solver(
    data: &SolverData,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord, &Model),
) -> Result<SolverRun> {
    let task = data.train_task();
    let mut model = Model::new(N_EQ, N_OUT, &cfg.hidden, cfg.seed)?;
    let trace = train(&task, &mut model, cfg, on_epoch)?;
    let test_pred = predict_set(&model, cfg, &data.test_task())?;
    let score = SolverScore::of(&data.spec, &data.test_x, &test_pred);
    Ok(SolverRun {
        model,
        trace,
        test_pred,
        score,
    })
}

pub fn predict_set(model: &Model, cfg: &TrainConfig, task: &SolverTask<'_>) -> Result<Vec<Vec<f64>>> {
    let engine = LayerEngine::for_task(task, &cfg.layer)?;
    predict(model, cfg.method, &engine, &cfg.layer, task.x, task.systems)
}

/// Reference solutions for every input of a set.
pub fn reference_solutions(spec: &SolverSpec, xs: &[f64]) -> Result<Vec<OracleResult>> {
    xs.chunks(N_EQ).map(|x| spec.reference(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn objective_examples() {
        let spec = SolverSpec::from_parts(
            Matrix::identity(N_OUT),
            vec![0.0; N_OUT],
            Matrix::identity(N_OUT),
            Matrix::from_fn(N_EQ, N_OUT, |i, j| (i == j) as u8 as f64),
        )
        .unwrap();
        assert_eq!(spec.objective(&[0.0; N_OUT]), 0.0);
        assert_eq!(spec.objective(&[1.0, 0.0, 0.0, 0.0, 0.0]), 0.5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = solver_instance(2).unwrap();
        let y = [0.3, -0.7, 0.1, 0.9, -0.2];
        let g = spec.gradient(&y);
        for k in 0..N_OUT {
            let (mut up, mut dn) = (y, y);
            up[k] += 1e-6;
            dn[k] -= 1e-6;
            let fd = (spec.objective(&up) - spec.objective(&dn)) / 2e-6;
            assert_abs_diff_eq!(g[k], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn least_norm_point_is_always_feasible() {
        let spec = solver_instance(0).unwrap();
        let cp = pinv(&spec.c, DEFAULT_RANK_TOL).unwrap();
        let mut r = rng::stream(11, streams::FUZZ);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..N_EQ).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
            let y = cp.mul_vec(&x).unwrap();
            let sys = spec.system(&x).unwrap();
            assert!(sys.max_residual(&y).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn instance_is_deterministic_and_full_rank() {
        let a = solver_instance(5).unwrap();
        assert_eq!(a, solver_instance(5).unwrap());
        assert_ne!(a, solver_instance(6).unwrap());
        assert_eq!(rank(&a.c, DEFAULT_RANK_TOL).unwrap(), N_EQ);
        assert_eq!((a.a.rows(), a.a.cols()), (11, 5));
        for i in 0..N_OUT {
            assert!((0.1..=1.1).contains(&a.q[(i, i)]));
        }
    }

    #[test]
    fn violations_split_inequalities_and_equalities() {
        let spec = solver_instance(1).unwrap();
        let x = [0.2, -0.4, 0.5];
        let y = pinv(&spec.c, DEFAULT_RANK_TOL).unwrap().mul_vec(&x).unwrap();
        let (ineq, eq) = spec.violations(&x, &y);
        assert!(ineq.iter().chain(&eq).all(|v| *v == 0.0));
        let mut off = y.to_vec();
        off[0] += 0.1;
        let (_, eq) = spec.violations(&x, &off);
        assert!(eq.iter().any(|v| *v > 0.0));
    }

    #[test]
    fn short_run_is_feasible() {
        let data = solver_dataset(3, 20, 10).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 20,
            hidden: vec![16, 16],
            ..default_config(3)
        };
        let run = run_solver(&data, &cfg, |_, _| {}).unwrap();
        assert_eq!(run.score.ineq.max, 0.0);
        assert_eq!(run.score.eq.max, 0.0);
        assert_eq!(run.test_pred.len(), 10);
    }
}
