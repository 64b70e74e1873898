//! Training loop for tasks whose loss decomposes over independent samples
//! (the piecewise-regression and learned-solver scenarios). Rollout-based
//! training lives with the unicycle scenario.

use alloc::vec;
use alloc::vec::Vec;

use crate::constraint::{ConstraintSystem, ViolationStats};
use crate::error::{Error, Result};
use crate::layer::{backward, LayerConfig, ProjectionCache, SelectionRecord};
use crate::linalg::{dot, Matrix};
use crate::neural::adam::{AdamState, DEFAULT_LR};
use crate::neural::mlp::{Mlp, DEFAULT_HIDDEN};
use crate::rng::{self, streams};
use crate::constraint::{enumerate_combinations, CombinationSet};

pub const DEFAULT_PENALTY: f64 = 100.0;

/// How the constraint layer takes part in training and prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Layer in the loop for training and prediction.
    CAffNet,
    /// Plain network trained with the ReLU penalty, no layer.
    Soft,
    /// Trained like `Soft`, projected through the layer only at prediction.
    PostHoc,
}

impl Method {
    pub fn trains_with_layer(self) -> bool {
        matches!(self, Method::CAffNet)
    }

    pub fn predicts_with_layer(self) -> bool {
        matches!(self, Method::CAffNet | Method::PostHoc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::CAffNet => "caffnet",
            Method::Soft => "soft",
            Method::PostHoc => "post-hoc",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    /// Weight of the ReLU penalty for the soft baseline.
    pub penalty: f64,
    pub method: Method,
    pub layer: LayerConfig,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 500,
            seed: 0,
            lr: DEFAULT_LR,
            penalty: DEFAULT_PENALTY,
            method: Method::CAffNet,
            layer: LayerConfig::default(),
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.penalty >= 0.0) {
            return Err(Error::InvalidArgument("lr and penalty must be >= 0".into()));
        }
        self.layer.validate()
    }
}

/// The prediction network `f` and the null-space network `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub f: Mlp,
    pub w: Mlp,
}

impl Model {
    /// Two independently initialized networks of identical shape.
    pub fn new(n_in: usize, n_out: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut widths = vec![n_in];
        widths.extend_from_slice(hidden);
        widths.push(n_out);
        Ok(Self {
            f: Mlp::new(&widths, &mut rng::stream(seed, streams::INIT_F))?,
            w: Mlp::new(&widths, &mut rng::stream(seed, streams::INIT_W))?,
        })
    }
}

/// A dataset with per-sample constraints and a per-sample loss on the final
/// output.
pub trait SampleTask {
    fn n_in(&self) -> usize;
    fn n_out(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn input(&self, i: usize) -> &[f64];
    fn system(&self, i: usize) -> &ConstraintSystem;
    /// Loss of sample `i` at output `y`; writes `d loss / d y` into `grad`.
    fn loss(&self, i: usize, y: &[f64], grad: &mut [f64]) -> f64;
    /// `true` when every sample shares the same `A`.
    fn matrix_is_constant(&self) -> bool {
        false
    }
}

/// Evaluates the layer, caching pseudoinverses when `A` is shared.
#[derive(Clone, Debug)]
pub enum LayerEngine {
    Cached(ProjectionCache),
    Direct(CombinationSet),
}

impl LayerEngine {
    pub fn new(shape_of: &ConstraintSystem, matrix_is_constant: bool, cfg: &LayerConfig) -> Result<Self> {
        let combos = enumerate_combinations(shape_of.m(), shape_of.n_out(), cfg.mode)?;
        if matrix_is_constant {
            Ok(LayerEngine::Cached(ProjectionCache::build(
                shape_of.a(),
                &combos,
                cfg.rank_tol,
            )?))
        } else {
            Ok(LayerEngine::Direct(combos))
        }
    }

    pub fn for_task<T: SampleTask + ?Sized>(task: &T, cfg: &LayerConfig) -> Result<Self> {
        if task.len() == 0 {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        Self::new(task.system(0), task.matrix_is_constant(), cfg)
    }

    /// Whether `w` can influence the output at all.
    pub fn uses_null_space(&self) -> bool {
        match self {
            LayerEngine::Cached(cache) => cache.uses_null_space(),
            LayerEngine::Direct(_) => true,
        }
    }

    pub fn forward(
        &self,
        sys: &ConstraintSystem,
        f: &[f64],
        w: &[f64],
        cfg: &LayerConfig,
    ) -> Result<SelectionRecord> {
        match self {
            LayerEngine::Cached(cache) => {
                debug_assert_eq!(cache.matrix(), sys.a());
                cache.forward(sys.b(), f, w, cfg)
            }
            LayerEngine::Direct(combos) => crate::layer::forward(sys, combos, f, w, cfg),
        }
    }
}

/// `weight * sum_i max(0, a_i y - b_i)` and its gradient in `y` (added to
/// `grad`).
pub fn soft_penalty(sys: &ConstraintSystem, y: &[f64], weight: f64, grad: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..sys.m() {
        let row = sys.a().row(i);
        let r = dot(row, y) - sys.b()[i];
        if r > 0.0 {
            total += r;
            for (g, a) in grad.iter_mut().zip(row) {
                *g += weight * a;
            }
        }
    }
    weight * total
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub max_violation: f64,
    pub mean_violation: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.loss)
    }
}

fn gather_inputs<T: SampleTask + ?Sized>(task: &T, idx: &[usize]) -> Vec<f64> {
    let mut x = Vec::with_capacity(idx.len() * task.n_in());
    for &i in idx {
        x.extend_from_slice(task.input(i));
    }
    x
}

/// Output of one sample plus what is needed to back-propagate through it.
struct SampleOutcome {
    loss: f64,
    y: Vec<f64>,
    grad_f: Vec<f64>,
    grad_w: Option<Vec<f64>>,
}

fn sample_outcome<T: SampleTask + ?Sized>(
    task: &T,
    engine: &LayerEngine,
    cfg: &TrainConfig,
    i: usize,
    f: &[f64],
    w: Option<&[f64]>,
) -> Result<SampleOutcome> {
    let n = task.n_out();
    let sys = task.system(i);
    let mut gy = vec![0.0; n];
    match (cfg.method.trains_with_layer(), w) {
        (true, Some(w)) => {
            let rec = engine.forward(sys, f, w, &cfg.layer)?;
            let loss = task.loss(i, &rec.output, &mut gy);
            let (gf, gw) = backward(&rec, &gy)?;
            let gw = gw.into_inner();
            let any_w = gw.iter().any(|g| *g != 0.0);
            Ok(SampleOutcome {
                loss,
                y: rec.output.into_inner(),
                grad_f: gf.into_inner(),
                grad_w: any_w.then_some(gw),
            })
        }
        _ => {
            let mut loss = task.loss(i, f, &mut gy);
            loss += soft_penalty(sys, f, cfg.penalty, &mut gy);
            Ok(SampleOutcome {
                loss,
                y: f.to_vec(),
                grad_f: gy,
                grad_w: None,
            })
        }
    }
}

/// Mean training loss of the current model without updating it.
pub fn evaluate_loss<T: SampleTask + ?Sized>(
    task: &T,
    model: &Model,
    engine: &LayerEngine,
    cfg: &TrainConfig,
) -> Result<f64> {
    let idx: Vec<usize> = (0..task.len()).collect();
    let x = gather_inputs(task, &idx);
    let ft = model.f.forward_batch(&x, idx.len())?;
    let layer = cfg.method.trains_with_layer();
    let wt = if layer && engine.uses_null_space() {
        Some(model.w.forward_batch(&x, idx.len())?)
    } else {
        None
    };
    let zeros = vec![0.0; task.n_out()];
    let mut total = 0.0;
    for (j, &i) in idx.iter().enumerate() {
        let w = layer.then(|| wt.as_ref().map_or(&zeros[..], |t| t.row(j)));
        total += sample_outcome(task, engine, cfg, i, ft.row(j), w)?.loss;
    }
    Ok(total / idx.len() as f64)
}

/// Trains `model` in place. The reported loss of an epoch is the mean
/// per-sample loss seen during that epoch's forward passes.
pub fn train<T: SampleTask + ?Sized>(
    task: &T,
    model: &mut Model,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model),
) -> Result<TrainTrace> {
    cfg.validate()?;
    if task.len() == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let engine = LayerEngine::for_task(task, &cfg.layer)?;
    let n = task.len();
    let n_out = task.n_out();
    let mut adam_f = AdamState::new(model.f.param_count(), cfg.lr);
    let mut adam_w = AdamState::new(model.w.param_count(), cfg.lr);
    let mut grads_f = vec![0.0; model.f.param_count()];
    let mut grads_w = vec![0.0; model.w.param_count()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, streams::DATA + 100);
    let mut trace = TrainTrace::default();
    let layer = cfg.method.trains_with_layer();
    let uses_w = engine.uses_null_space();
    let zeros = vec![0.0; n_out];

    for epoch in 1..=cfg.epochs {
        if cfg.batch_size < n {
            for i in (1..n).rev() {
                let j = rng::int_inclusive(&mut shuffle_rng, 0, i);
                order.swap(i, j);
            }
        }
        let mut loss_sum = 0.0;
        let mut viol = ViolationStats::default();
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let x = gather_inputs(task, batch);
            let ft = model.f.forward_batch(&x, b)?;
            let wt = if layer && uses_w {
                Some(model.w.forward_batch(&x, b)?)
            } else {
                None
            };
            let mut up_f = vec![0.0; b * n_out];
            let mut up_w = vec![0.0; b * n_out];
            let mut any_w = false;
            let scale = 1.0 / b as f64;
            for (j, &i) in batch.iter().enumerate() {
                let w = layer.then(|| wt.as_ref().map_or(&zeros[..], |t| t.row(j)));
                let out = sample_outcome(task, &engine, cfg, i, ft.row(j), w)?;
                loss_sum += out.loss;
                let sys = task.system(i);
                let mut r = sys.slack(&out.y)?;
                r.iter_mut().for_each(|v| *v = v.max(0.0));
                viol.extend(&r);
                for (u, g) in up_f[j * n_out..(j + 1) * n_out].iter_mut().zip(&out.grad_f) {
                    *u = g * scale;
                }
                if let Some(gw) = out.grad_w {
                    any_w = true;
                    for (u, g) in up_w[j * n_out..(j + 1) * n_out].iter_mut().zip(&gw) {
                        *u = g * scale;
                    }
                }
            }
            grads_f.iter_mut().for_each(|g| *g = 0.0);
            model.f.backward(&ft, &up_f, &mut grads_f, None)?;
            adam_f.step(model.f.params_mut(), &grads_f)?;
            if let (true, Some(wt)) = (any_w, wt.as_ref()) {
                grads_w.iter_mut().for_each(|g| *g = 0.0);
                model.w.backward(wt, &up_w, &mut grads_w, None)?;
                adam_w.step(model.w.params_mut(), &grads_w)?;
            } else if layer && uses_w {
                // keep the moment estimates decaying exactly as with zero grads
                grads_w.iter_mut().for_each(|g| *g = 0.0);
                adam_w.step(model.w.params_mut(), &grads_w)?;
            }
        }
        let loss = loss_sum / n as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let rec = EpochRecord {
            epoch,
            loss,
            max_violation: viol.max,
            mean_violation: viol.mean(),
        };
        on_epoch(&rec, model);
        trace.epochs.push(rec);
    }
    Ok(trace)
}

/// Predictions for `inputs` (row-major, `count x n_in`) under `method`.
pub fn predict(
    model: &Model,
    method: Method,
    engine: &LayerEngine,
    layer: &LayerConfig,
    inputs: &[f64],
    systems: &[ConstraintSystem],
) -> Result<Vec<Vec<f64>>> {
    let count = systems.len();
    let ft = model.f.forward_batch(inputs, count)?;
    if !method.predicts_with_layer() {
        return Ok((0..count).map(|j| ft.row(j).to_vec()).collect());
    }
    // a post-hoc projection has no trained null-space network
    let wt = if engine.uses_null_space() && method.trains_with_layer() {
        Some(model.w.forward_batch(inputs, count)?)
    } else {
        None
    };
    let zeros = vec![0.0; model.w.n_out()];
    (0..count)
        .map(|j| {
            let w = wt.as_ref().map_or(&zeros[..], |t| t.row(j));
            engine
                .forward(&systems[j], ft.row(j), w, layer)
                .map(|r| r.output.into_inner())
        })
        .collect()
}

/// Shared matrix of a constant-`A` task, if any.
pub fn shared_matrix<T: SampleTask + ?Sized>(task: &T) -> Option<&Matrix> {
    (task.matrix_is_constant() && task.len() > 0).then(|| task.system(0).a())
}
