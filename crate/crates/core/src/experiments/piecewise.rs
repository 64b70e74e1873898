//! Regression of a scalar piecewise function inside two piecewise upper and
//! two piecewise lower bounds.
//!
//! Every piece is closed on the right: `(-inf, -1]`, `(-1, 0]`, `(0, 1]`,
//! `(1, inf)`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::constraint::{ConstraintSystem, ViolationStats};
use crate::error::Result;
use crate::linalg::{Matrix, Vector};
use crate::neural::train::{predict, train, EpochRecord, LayerEngine, Model, SampleTask, TrainConfig, TrainTrace};
use crate::rng::{self, streams};

use super::violation_stats;

pub const TRAIN_SAMPLES: usize = 50;
pub const TEST_SAMPLES: usize = 400;
pub const DOMAIN: (f64, f64) = (-2.0, 2.0);
pub const DEFAULT_EPOCHS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Piece {
    Left,
    Flat,
    Bump,
    Tail,
}

fn piece(x: f64) -> Piece {
    if x <= -1.0 {
        Piece::Left
    } else if x <= 0.0 {
        Piece::Flat
    } else if x <= 1.0 {
        Piece::Bump
    } else {
        Piece::Tail
    }
}

fn s(x: f64) -> f64 {
    libm::sin(FRAC_PI_2 * (x + 1.0))
}

fn sq(v: f64) -> f64 {
    v * v
}

pub fn target(x: f64) -> f64 {
    match piece(x) {
        Piece::Left => -5.0 * s(x) - 2.0,
        Piece::Flat => -2.0,
        Piece::Bump => 2.0 - 9.0 * sq(x - 2.0 / 3.0),
        Piece::Tail => 3.0 / sq(x) - 2.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub upper1: f64,
    pub upper2: f64,
    pub lower1: f64,
    pub lower2: f64,
}

pub fn bounds(x: f64) -> Bounds {
    match piece(x) {
        Piece::Left => Bounds {
            upper1: -3.0 * s(x) + 0.2,
            upper2: -3.0 * libm::pow(s(x), 3.0) + 1.0,
            lower1: 5.0 * sq(s(x)) - 3.0,
            lower2: 5.0 * libm::pow(s(x), 8.0) - 2.0,
        },
        Piece::Flat => Bounds {
            upper1: -2.0,
            upper2: 2.0,
            lower1: -2.0,
            lower2: -3.0,
        },
        Piece::Bump => Bounds {
            upper1: 3.0 - 4.0 * sq(x - 0.5),
            upper2: 3.0 - 4.0 * sq(x - 0.8),
            lower1: (4.0 - 9.0 * sq(x - 2.0 / 3.0)) * x - 2.5,
            lower2: (5.0 - 4.0 * sq(x - 1.0 / 6.0)) * x - 2.5,
        },
        Piece::Tail => Bounds {
            upper1: 2.0,
            upper2: 2.5,
            lower1: 3.0 / (x * x * x) - 2.5,
            lower2: 1.5 / (x * x * x) - 16.0 / 9.0,
        },
    }
}

/// `y <= g1u, y <= g2u, -y <= -g1l, -y <= -g2l`.
pub fn piecewise_bounds(x: f64) -> ConstraintSystem {
    let g = bounds(x);
    let a = Matrix::from_rows(&[[1.0], [1.0], [-1.0], [-1.0]]).expect("fixed shape");
    let b = Vector::new(vec![g.upper1, g.upper2, -g.lower1, -g.lower2])
        .expect("bounds are finite for finite x");
    ConstraintSystem::new(a, b).expect("fixed shape")
}

/// Inputs, targets and constraint systems for one split.
#[derive(Clone, Debug)]
pub struct Split {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub systems: Vec<ConstraintSystem>,
}

impl Split {
    fn from_inputs(x: Vec<f64>) -> Self {
        let y = x.iter().map(|&v| target(v)).collect();
        let systems = x.iter().map(|&v| piecewise_bounds(v)).collect();
        Self { x, y, systems }
    }
}

impl SampleTask for Split {
    fn n_in(&self) -> usize {
        1
    }

    fn n_out(&self) -> usize {
        1
    }

    fn len(&self) -> usize {
        self.x.len()
    }

    fn input(&self, i: usize) -> &[f64] {
        core::slice::from_ref(&self.x[i])
    }

    fn system(&self, i: usize) -> &ConstraintSystem {
        &self.systems[i]
    }

    fn loss(&self, i: usize, y: &[f64], grad: &mut [f64]) -> f64 {
        let d = y[0] - self.y[i];
        grad[0] = 2.0 * d;
        d * d
    }

    fn matrix_is_constant(&self) -> bool {
        true
    }
}

#[derive(Clone, Debug)]
pub struct PiecewiseData {
    pub train: Split,
    pub test: Split,
}

/// Training inputs are uniform on the domain; test inputs are evenly spaced
/// including both endpoints.
pub fn piecewise_dataset(seed: u64) -> PiecewiseData {
    let mut r = rng::stream(seed, streams::DATA);
    let train_x = (0..TRAIN_SAMPLES)
        .map(|_| rng::uniform(&mut r, DOMAIN.0, DOMAIN.1))
        .collect();
    PiecewiseData {
        train: Split::from_inputs(train_x),
        test: Split::from_inputs(linspace(DOMAIN.0, DOMAIN.1, TEST_SAMPLES)),
    }
}

pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

pub fn default_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: DEFAULT_EPOCHS,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct PiecewiseRun {
    pub model: Model,
    pub trace: TrainTrace,
    pub data: PiecewiseData,
    pub test_pred: Vec<f64>,
    pub test_mse: f64,
    pub violation: ViolationStats,
}

/// Trains one seed and scores it on the test grid.
pub fn run_piecewise(
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord, &Model),
) -> Result<PiecewiseRun> {
    let data = piecewise_dataset(cfg.seed);
    let mut model = Model::new(1, 1, &cfg.hidden, cfg.seed)?;
    let trace = train(&data.train, &mut model, cfg, on_epoch)?;
    let test_pred = predict_split(&model, cfg, &data.test)?;
    let test_mse = test_pred
        .iter()
        .zip(&data.test.y)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / data.test.len() as f64;
    let violation = violation_stats(
        data.test
            .systems
            .iter()
            .zip(&test_pred)
            .map(|(s, y)| (s, core::slice::from_ref(y))),
    )?;
    Ok(PiecewiseRun {
        model,
        trace,
        data,
        test_pred,
        test_mse,
        violation,
    })
}

pub fn predict_split(model: &Model, cfg: &TrainConfig, split: &Split) -> Result<Vec<f64>> {
    let engine = LayerEngine::for_task(split, &cfg.layer)?;
    Ok(predict(model, cfg.method, &engine, &cfg.layer, &split.x, &split.systems)?
        .into_iter()
        .map(|y| y[0])
        .collect())
}
