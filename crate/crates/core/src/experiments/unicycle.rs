//! Unicycle navigation to the origin past three convex obstacles.
//!
//! The command is `u = u_nom + u_net`, where `u_nom` is a PID tracker in the
//! body frame. Safety is encoded as control barrier function rows on `u`:
//! one smooth-union barrier per obstacle, six state-bound barriers and the
//! four actuator limits, 13 rows in all. Integration is forward Euler.
//!
//! Gradients of the rollout cost flow through the network outputs and the
//! state chain `x' = x + dt g(x) u`. The constraint data `A(x), b(x)`, the
//! nominal command and the network inputs are treated as constants.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::constraint::{enumerate_combinations, CombinationSet, ConstraintSystem, ViolationStats};
use crate::error::{Error, Result};
use crate::constraint::IndexCombination;
use crate::layer::{backward, forward, project_gamma, Branch, LayerConfig, SelectionRecord};
use crate::linalg::{Matrix, Vector};
use crate::neural::adam::AdamState;
use crate::neural::mlp::Tape;
use crate::neural::train::{soft_penalty, EpochRecord, Method, Model, TrainConfig, TrainTrace};
use crate::rng::{self, streams};

use super::reported_violation;

pub type State = [f64; 3];
pub type Control = [f64; 2];

pub const DT: f64 = 0.1;
pub const KAPPA: f64 = 10.0;
/// Rows of the constraint system: 3 obstacles, 6 state bounds, 4 input bounds.
pub const M: usize = 13;
pub const HORIZON: usize = 150;
pub const GOAL_RADIUS: f64 = 0.1;
pub const TEST_START: State = [-4.5, 0.0, 0.5];
pub const DEFAULT_STARTS: usize = 20;
pub const DEFAULT_EPOCHS: usize = 200;

pub const U_MIN: Control = [-0.01, -0.5];
pub const U_MAX: Control = [1.0, 0.5];

pub const KP: State = [0.01, 0.2, 0.0];
pub const KI: State = [0.05, 0.005, 0.0];
pub const KD: State = [0.0, 0.01, 0.0];

pub const Q_STAGE: State = [1000.0, 1000.0, 0.0];
pub const R_STAGE: Control = [1.0, 1.0];
pub const Q_TERMINAL: State = [1e6, 1e6, 0.0];

/// Convex obstacle `{p : A p <= b}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle {
    pub a: &'static [[f64; 2]],
    pub b: &'static [f64],
}

#[allow(clippy::approx_constant)]
pub const OBSTACLES: [Obstacle; 3] = [
    Obstacle {
        a: &[
            [0.4472, -0.8944],
            [0.7071, 0.7071],
            [-0.2425, 0.9701],
            [-0.7071, -0.7071],
            [-0.8944, -0.4472],
        ],
        b: &[-0.2184, -0.5303, 0.6219, 1.1667, 1.4368],
    },
    Obstacle {
        a: &[
            [-0.9685, 0.2489],
            [0.9417, 0.3363],
            [-0.3714, 0.9285],
            [0.3714, 0.9285],
            [-0.9417, -0.3363],
            [-0.2976, -0.9547],
        ],
        b: &[1.2755, -1.7670, -0.8511, -2.0249, 2.3274, 2.6868],
    },
    Obstacle {
        a: &[
            [-0.9191, 0.3939],
            [0.8944, 0.4472],
            [0.9703, -0.2419],
            [-0.8701, -0.4930],
            [0.0, -1.0],
        ],
        b: &[2.9916, -1.9975, -2.5305, 2.4854, 0.1000],
    },
];

/// `A_x x <= b_x`: `-5 <= p_x <= 1`, `-4 <= p_y <= 2`, `-pi <= theta <= pi`.
pub const STATE_A: [State; 6] = [
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
];
pub const STATE_B: [f64; 6] = [1.0, 5.0, 2.0, 4.0, PI, PI];

pub const CONTROL_A: [Control; 4] = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
pub const CONTROL_B: [f64; 4] = [1.0, 0.01, 0.5, 0.5];

/// Log-sum-exp union `h = ln(sum_i e^(kappa h_i))/kappa - ln(m)/kappa` and
/// the weights `lambda_i = e^(kappa (h_i - h))`, which sum to `m`.
pub fn smooth_union(h_rows: &[f64], kappa: f64) -> (f64, Vec<f64>) {
    let top = h_rows.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = h_rows.iter().map(|h| libm::exp(kappa * (h - top))).sum();
    let m = h_rows.len() as f64;
    let h = top + (libm::log(sum) - libm::log(m)) / kappa;
    let lambda = h_rows.iter().map(|hi| libm::exp(kappa * (hi - h))).collect();
    (h, lambda)
}

/// Barrier value and union weights of one obstacle at position `p`.
pub fn obstacle_barrier(ob: &Obstacle, p: [f64; 2]) -> (f64, Vec<f64>) {
    let rows: Vec<f64> = ob
        .a
        .iter()
        .zip(ob.b)
        .map(|(a, b)| a[0] * p[0] + a[1] * p[1] - b)
        .collect();
    smooth_union(&rows, KAPPA)
}

/// Input matrix `g(x)` of `x' = g(x) u`.
fn input_matrix(x: &State) -> [[f64; 2]; 3] {
    let (s, c) = libm::sincos(x[2]);
    [[c, 0.0], [s, 0.0], [0.0, 1.0]]
}

/// The 13-row system `A(x) u <= b(x)` with `alpha(h) = h` and zero drift.
pub fn cbf_constraints(x: &State) -> ConstraintSystem {
    let g = input_matrix(x);
    let mut a = Vec::with_capacity(M * 2);
    let mut b = Vec::with_capacity(M);
    for ob in &OBSTACLES {
        let (h, lambda) = obstacle_barrier(ob, [x[0], x[1]]);
        // grad h_j = sum_i lambda_i a_i / m_j
        let mut row = [0.0; 2];
        let m_j = lambda.len() as f64;
        for (l, ai) in lambda.iter().zip(ob.a) {
            let l = l / m_j;
            for (k, r) in row.iter_mut().enumerate() {
                *r -= l * (ai[0] * g[0][k] + ai[1] * g[1][k]);
            }
        }
        a.extend_from_slice(&row);
        b.push(h);
    }
    // h_x = b_x - A_x x, so -L_g h_x = A_x g(x)
    for (ax, bx) in STATE_A.iter().zip(STATE_B) {
        for k in 0..2 {
            a.push(ax[0] * g[0][k] + ax[1] * g[1][k] + ax[2] * g[2][k]);
        }
        b.push(bx - (ax[0] * x[0] + ax[1] * x[1] + ax[2] * x[2]));
    }
    for (au, bu) in CONTROL_A.iter().zip(CONTROL_B) {
        a.extend_from_slice(au);
        b.push(bu);
    }
    ConstraintSystem::new(
        Matrix::new(M, 2, a).expect("fixed shape"),
        Vector::new(b).expect("finite state gives finite bounds"),
    )
    .expect("fixed shape")
}

pub fn saturate(u: Control) -> Control {
    [u[0].clamp(U_MIN[0], U_MAX[0]), u[1].clamp(U_MIN[1], U_MAX[1])]
}

pub fn step(x: &State, u: &Control) -> State {
    let (s, c) = libm::sincos(x[2]);
    [x[0] + DT * u[0] * c, x[1] + DT * u[0] * s, x[2] + DT * u[1]]
}

/// PID tracking of the origin with the error expressed in the body frame.
/// The integral starts at zero each episode; the derivative is a backward
/// difference and zero on the first step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pid {
    integral: State,
    prev: Option<State>,
}

impl Pid {
    pub fn new() -> Self {
        Self::default()
    }

    /// Unsaturated nominal command at `x`; advances the internal state.
    pub fn command(&mut self, x: &State) -> Control {
        let (s, c) = libm::sincos(x[2]);
        let d = [-x[0], -x[1], -x[2]];
        let e = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
        let de = self.prev.map_or([0.0; 3], |p| core::array::from_fn(|i| (e[i] - p[i]) / DT));
        for i in 0..3 {
            self.integral[i] += e[i] * DT;
        }
        self.prev = Some(e);
        let t: State = core::array::from_fn(|i| KP[i] * e[i] + KI[i] * self.integral[i] + KD[i] * de[i]);
        [t[0], t[1] + t[2]]
    }
}

/// `sum_k x_k^T Q x_k + u_net,k^T R u_net,k + x_N^T Q_N x_N`.
pub fn trajectory_cost(states: &[State], u_net: &[Control]) -> f64 {
    let quad = |w: &[f64], v: &[f64]| w.iter().zip(v).map(|(w, v)| w * v * v).sum::<f64>();
    let n = u_net.len();
    let mut j = 0.0;
    for k in 0..n {
        j += quad(&Q_STAGE, &states[k]) + quad(&R_STAGE, &u_net[k]);
    }
    j + quad(&Q_TERMINAL, &states[n])
}

/// Smallest obstacle barrier value at `p`.
pub fn min_obstacle_barrier(p: [f64; 2]) -> f64 {
    OBSTACLES
        .iter()
        .map(|ob| obstacle_barrier(ob, p).0)
        .fold(f64::INFINITY, f64::min)
}

/// Safe training starts: positions uniform in the state box, at least
/// `0.2` inside every barrier and `0.5` away from the goal, heading at the
/// origin.
pub fn sample_starts(seed: u64, count: usize) -> Vec<State> {
    let mut r = rng::stream(seed, streams::STARTS);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let px = rng::uniform(&mut r, -5.0, 1.0);
        let py = rng::uniform(&mut r, -4.0, 2.0);
        let inside = px > -4.8 && px < 0.8 && py > -3.8 && py < 1.8;
        if !inside || libm::hypot(px, py) < 0.5 || min_obstacle_barrier([px, py]) < 0.2 {
            continue;
        }
        out.push([px, py, libm::atan2(-py, -px)]);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    /// `steps + 1` states.
    pub states: Vec<State>,
    /// Applied commands.
    pub controls: Vec<Control>,
    pub u_nom: Vec<Control>,
    /// `controls - u_nom`, the learned correction.
    pub u_net: Vec<Control>,
    /// `A(x_k) u_k - b(x_k)` per step, 13 entries each.
    pub slack: Vec<Vec<f64>>,
    pub cost: f64,
}

impl Trajectory {
    /// First step index whose state lies inside the goal disk.
    pub fn goal_step(&self) -> Option<usize> {
        self.states.iter().position(|x| libm::hypot(x[0], x[1]) < GOAL_RADIUS)
    }

    pub fn reached_goal(&self) -> bool {
        self.goal_step().is_some()
    }

    pub fn violation(&self) -> ViolationStats {
        let mut stats = ViolationStats::default();
        for s in &self.slack {
            let r: Vec<f64> = s
                .iter()
                .map(|v| if *v <= super::VIOLATION_FLOOR { 0.0 } else { *v })
                .collect();
            stats.extend(&r);
        }
        stats
    }
}

/// State scaled by its bounds before it enters the networks.
pub fn network_input(x: &State) -> State {
    core::array::from_fn(|i| x[i] * INPUT_SCALE[i])
}

const INPUT_SCALE: State = [1.0 / 5.0, 1.0 / 4.0, 1.0 / PI];

/// What the rollout keeps per step for the reverse pass.
struct StepTape {
    f: Tape,
    w: Option<Tape>,
    records: Vec<Option<SelectionRecord>>,
    systems: Vec<ConstraintSystem>,
    /// Components left untouched by the final saturation.
    pass: Vec<[bool; 2]>,
    /// `d u / d x` of the selected projection with its inputs held fixed.
    sensitivity: Vec<Option<StateJacobian>>,
}

type StateJacobian = [State; 2];

const SENSITIVITY_STEP: f64 = 1e-6;

/// Central-difference Jacobian of `x -> P_gamma(f, w; A(x), b(x))`.
fn projection_state_jacobian(
    x: &State,
    gamma: &IndexCombination,
    f: &[f64],
    w: &[f64],
    rank_tol: f64,
) -> Result<StateJacobian> {
    let mut jac = [[0.0; 3]; 2];
    for i in 0..3 {
        let (mut up, mut dn) = (*x, *x);
        up[i] += SENSITIVITY_STEP;
        dn[i] -= SENSITIVITY_STEP;
        let yu = project_gamma(&cbf_constraints(&up), gamma, f, w, rank_tol)?;
        let yd = project_gamma(&cbf_constraints(&dn), gamma, f, w, rank_tol)?;
        for c in 0..2 {
            jac[c][i] = (yu[c] - yd[c]) / (2.0 * SENSITIVITY_STEP);
        }
    }
    Ok(jac)
}

struct Policy<'a> {
    model: &'a Model,
    combos: &'a CombinationSet,
    layer: &'a LayerConfig,
    project: bool,
    use_w: bool,
    /// Record how the selected projection moves with the state.
    sensitivity: bool,
    /// Add the PID command; always on outside tests.
    nominal: bool,
}

impl Policy<'_> {
    /// Runs every start in lockstep; returns trajectories and, if asked,
    /// the per-step tapes.
    fn simulate(
        &self,
        starts: &[State],
        steps: usize,
        keep: bool,
    ) -> Result<(Vec<Trajectory>, Vec<StepTape>)> {
        let batch = starts.len();
        let mut trajs: Vec<Trajectory> = starts
            .iter()
            .map(|x| Trajectory {
                states: vec![*x],
                ..Trajectory::default()
            })
            .collect();
        let mut pids = vec![Pid::new(); batch];
        let mut tapes = Vec::with_capacity(if keep { steps } else { 0 });
        let zeros = [0.0; 2];
        for k in 0..steps {
            let inputs: Vec<f64> = trajs
                .iter()
                .flat_map(|t| network_input(t.states.last().unwrap()))
                .collect();
            let ft = self.model.f.forward_batch(&inputs, batch)?;
            let wt = if self.project && self.use_w {
                Some(self.model.w.forward_batch(&inputs, batch)?)
            } else {
                None
            };
            let mut records = Vec::with_capacity(batch);
            let mut systems = Vec::with_capacity(batch);
            let mut pass = Vec::with_capacity(batch);
            let mut sensitivity = Vec::with_capacity(batch);
            for (j, traj) in trajs.iter_mut().enumerate() {
                let x = *traj.states.last().unwrap();
                let nominal = if self.nominal {
                    saturate(pids[j].command(&x))
                } else {
                    [0.0; 2]
                };
                let sys = cbf_constraints(&x);
                let out = ft.row(j);
                let raw = [nominal[0] + out[0], nominal[1] + out[1]];
                let (pre, rec) = if self.project {
                    let w = wt.as_ref().map_or(&zeros[..], |t| t.row(j));
                    let rec = forward(&sys, self.combos, &raw, w, self.layer)?;
                    if keep {
                        let jac = match (&rec.branch, self.sensitivity) {
                            (Branch::Projected(gamma), true) => Some(projection_state_jacobian(
                                &x,
                                gamma,
                                &raw,
                                w,
                                self.layer.rank_tol,
                            )?),
                            _ => None,
                        };
                        sensitivity.push(jac);
                    }
                    ([rec.output[0], rec.output[1]], Some(rec))
                } else {
                    if keep {
                        sensitivity.push(None);
                    }
                    (raw, None)
                };
                let u = saturate(pre);
                let next = step(&x, &u);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteState { step: k });
                }
                traj.slack.push(sys.slack(&u)?);
                traj.u_net.push([u[0] - nominal[0], u[1] - nominal[1]]);
                traj.u_nom.push(nominal);
                traj.controls.push(u);
                traj.states.push(next);
                if keep {
                    pass.push([u[0] == pre[0], u[1] == pre[1]]);
                    records.push(rec);
                    systems.push(sys);
                }
            }
            if keep {
                tapes.push(StepTape {
                    f: ft,
                    w: wt,
                    records,
                    systems,
                    pass,
                    sensitivity,
                });
            }
        }
        for t in &mut trajs {
            t.cost = trajectory_cost(&t.states, &t.u_net);
        }
        Ok((trajs, tapes))
    }
}

/// Unicycle training and evaluation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct UnicycleConfig {
    pub train: TrainConfig,
    pub starts: usize,
    pub steps: usize,
    /// Multiplier on the initial output layer of `f`, so training starts
    /// close to the nominal controller.
    pub init_output_scale: f64,
    /// Back-propagate through the state dependence of `A(x), b(x)` on the
    /// selected projection. Without it the adjoint cannot see that turning
    /// away from an obstacle relaxes its row.
    pub constraint_sensitivity: bool,
    /// Back-propagate through the network inputs as well.
    pub input_gradient: bool,
}

pub fn default_config(seed: u64) -> UnicycleConfig {
    UnicycleConfig {
        train: TrainConfig {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_STARTS,
            seed,
            ..TrainConfig::default()
        },
        starts: DEFAULT_STARTS,
        steps: HORIZON,
        init_output_scale: 0.01,
        constraint_sensitivity: true,
        input_gradient: true,
    }
}

impl UnicycleConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.starts == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument("starts and steps must be >= 1".into()));
        }
        if !self.init_output_scale.is_finite() {
            return Err(Error::NonFinite("init_output_scale"));
        }
        Ok(())
    }
}

pub fn new_model(cfg: &UnicycleConfig) -> Result<Model> {
    let mut model = Model::new(3, 2, &cfg.train.hidden, cfg.train.seed)?;
    model.f.scale_output_layer(cfg.init_output_scale);
    model.w.scale_output_layer(cfg.init_output_scale);
    Ok(model)
}

pub fn combinations(layer: &LayerConfig) -> Result<CombinationSet> {
    enumerate_combinations(M, 2, layer.mode)
}

/// Rolls the policy out from each start. `method` decides whether the layer
/// is applied.
pub fn rollout(
    model: &Model,
    method: Method,
    layer: &LayerConfig,
    starts: &[State],
    steps: usize,
) -> Result<Vec<Trajectory>> {
    let combos = combinations(layer)?;
    let policy = Policy {
        model,
        combos: &combos,
        layer,
        project: method.predicts_with_layer(),
        use_w: method.trains_with_layer(),
        sensitivity: false,
        nominal: true,
    };
    Ok(policy.simulate(starts, steps, false)?.0)
}

/// `(d step / d x)^T lam` and `(d step / d u)^T lam`.
fn step_adjoint(x: &State, u: &Control, lam: &State) -> (State, Control) {
    let (s, c) = libm::sincos(x[2]);
    let dx = [lam[0], lam[1], lam[2] + DT * u[0] * (-s * lam[0] + c * lam[1])];
    let du = [DT * (c * lam[0] + s * lam[1]), DT * lam[2]];
    (dx, du)
}

/// Reverse pass over a recorded batch rollout. Accumulates the batch-mean
/// gradients into `grads_f` / `grads_w` and returns the summed penalty
/// (zero when training through the layer).
fn reverse_pass(
    model: &Model,
    trajs: &[Trajectory],
    tapes: &[StepTape],
    penalty: Option<f64>,
    through_input: bool,
    grads_f: &mut [f64],
    grads_w: &mut [f64],
) -> Result<f64> {
    let batch = trajs.len();
    let scale = 1.0 / batch as f64;
    let steps = tapes.len();
    let mut extra = 0.0;
    let mut adj: Vec<State> = trajs
        .iter()
        .map(|t| core::array::from_fn(|i| 2.0 * Q_TERMINAL[i] * t.states[steps][i]))
        .collect();
    let mut up_f = vec![0.0; batch * 2];
    let mut up_w = vec![0.0; batch * 2];
    let mut input_grads = through_input.then(|| (vec![0.0; batch * 3], vec![0.0; batch * 3]));
    for k in (0..steps).rev() {
        let tape = &tapes[k];
        for (j, t) in trajs.iter().enumerate() {
            let (x, u, un) = (t.states[k], t.controls[k], t.u_net[k]);
            let (dx, du) = step_adjoint(&x, &u, &adj[j]);
            let mut gu = [2.0 * R_STAGE[0] * un[0] + du[0], 2.0 * R_STAGE[1] * un[1] + du[1]];
            if let Some(weight) = penalty {
                extra += soft_penalty(&tape.systems[j], &u, weight, &mut gu);
            }
            for c in 0..2 {
                if !tape.pass[j][c] {
                    gu[c] = 0.0;
                }
            }
            let (gf, gw) = match &tape.records[j] {
                Some(rec) => {
                    let (gf, gw) = backward(rec, &gu)?;
                    ([gf[0], gf[1]], [gw[0], gw[1]])
                }
                None => (gu, [0.0; 2]),
            };
            for c in 0..2 {
                up_f[2 * j + c] = gf[c] * scale;
                up_w[2 * j + c] = gw[c] * scale;
            }
            let mut next: State = core::array::from_fn(|i| 2.0 * Q_STAGE[i] * x[i] + dx[i]);
            if let Some(jac) = &tape.sensitivity[j] {
                for i in 0..3 {
                    next[i] += jac[0][i] * gu[0] + jac[1][i] * gu[1];
                }
            }
            adj[j] = next;
        }
        let (in_f, in_w) = match input_grads.as_mut() {
            Some((a, b)) => (Some(&mut a[..]), Some(&mut b[..])),
            None => (None, None),
        };
        model.f.backward(&tape.f, &up_f, grads_f, in_f)?;
        if let Some(wt) = &tape.w {
            model.w.backward(wt, &up_w, grads_w, in_w)?;
        }
        if let Some((gin_f, gin_w)) = &input_grads {
            let has_w = tape.w.is_some();
            for (j, a) in adj.iter_mut().enumerate() {
                for i in 0..3 {
                    let mut g = gin_f[3 * j + i];
                    if has_w {
                        g += gin_w[3 * j + i];
                    }
                    a[i] += g * INPUT_SCALE[i] / scale;
                }
            }
        }
    }
    Ok(extra)
}

/// Backpropagation through time over all starts at once. The epoch loss is
/// the mean rollout cost, plus the mean summed penalty for the baselines.
pub fn train_unicycle(
    model: &mut Model,
    starts: &[State],
    cfg: &UnicycleConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model),
) -> Result<TrainTrace> {
    cfg.validate()?;
    let tc = &cfg.train;
    let combos = combinations(&tc.layer)?;
    let with_layer = tc.method.trains_with_layer();
    let mut adam_f = AdamState::new(model.f.param_count(), tc.lr);
    let mut adam_w = AdamState::new(model.w.param_count(), tc.lr);
    let mut grads_f = vec![0.0; model.f.param_count()];
    let mut grads_w = vec![0.0; model.w.param_count()];
    let mut trace = TrainTrace::default();

    for epoch in 1..=tc.epochs {
        let policy = Policy {
            model,
            combos: &combos,
            layer: &tc.layer,
            project: with_layer,
            use_w: with_layer,
            sensitivity: cfg.constraint_sensitivity,
            nominal: true,
        };
        let (trajs, tapes) = policy.simulate(starts, cfg.steps, true)?;
        grads_f.iter_mut().for_each(|g| *g = 0.0);
        grads_w.iter_mut().for_each(|g| *g = 0.0);
        let penalty = (!with_layer).then_some(tc.penalty);
        let extra = reverse_pass(model, &trajs, &tapes, penalty, cfg.input_gradient, &mut grads_f, &mut grads_w)?;

        let mut viol = ViolationStats::default();
        for t in &trajs {
            for s in &t.slack {
                let r: Vec<f64> = s.iter().map(|v| v.max(0.0)).collect();
                viol.extend(&r);
            }
        }
        let loss = (trajs.iter().map(|t| t.cost).sum::<f64>() + extra) / trajs.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        adam_f.step(model.f.params_mut(), &grads_f)?;
        if with_layer {
            adam_w.step(model.w.params_mut(), &grads_w)?;
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

#[derive(Clone, Debug)]
pub struct UnicycleRun {
    pub model: Model,
    pub trace: TrainTrace,
    pub starts: Vec<State>,
    /// Rollout from [`TEST_START`].
    pub test: Trajectory,
}

impl UnicycleRun {
    pub fn violation(&self) -> ViolationStats {
        self.test.violation()
    }
}

/// Trains one seed and rolls the result out from the test start.
pub fn run_unicycle(
    cfg: &UnicycleConfig,
    on_epoch: impl FnMut(&EpochRecord, &Model),
) -> Result<UnicycleRun> {
    cfg.validate()?;
    let starts = sample_starts(cfg.train.seed, cfg.starts);
    let mut model = new_model(cfg)?;
    let trace = train_unicycle(&mut model, &starts, cfg, on_epoch)?;
    let test = rollout(&model, cfg.train.method, &cfg.train.layer, &[TEST_START], cfg.steps)?
        .pop()
        .expect("one start");
    Ok(UnicycleRun {
        model,
        trace,
        starts,
        test,
    })
}

/// Reported violations of one step of a trajectory.
pub fn step_violation(x: &State, u: &Control) -> Result<Vec<f64>> {
    reported_violation(&cbf_constraints(x), u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn smooth_union_of_equal_values() {
        let (h, lambda) = smooth_union(&[0.3; 5], KAPPA);
        assert_abs_diff_eq!(h, 0.3, epsilon = 1e-15);
        assert!(lambda.iter().all(|l| (l - 1.0).abs() < 1e-12));
    }

    #[test]
    fn smooth_union_dominant_row() {
        let (h, lambda) = smooth_union(&[5.0, 0.0, -1.0], KAPPA);
        assert_abs_diff_eq!(h, 5.0 - libm::log(3.0) / KAPPA, epsilon = 1e-6);
        assert_abs_diff_eq!(lambda.iter().sum::<f64>(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn smooth_union_under_approximates_max() {
        for (oi, ob) in OBSTACLES.iter().enumerate() {
            for i in 0..100 {
                for j in 0..100 {
                    let p = [-5.0 + 6.0 * i as f64 / 99.0, -4.0 + 6.0 * j as f64 / 99.0];
                    let (h, lambda) = obstacle_barrier(ob, p);
                    let max = ob
                        .a
                        .iter()
                        .zip(ob.b)
                        .map(|(a, b)| a[0] * p[0] + a[1] * p[1] - b)
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert!(h <= max + 1e-12, "obstacle {oi} at {p:?}");
                    assert_abs_diff_eq!(lambda.iter().sum::<f64>(), ob.a.len() as f64, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn far_state_admits_zero_command_with_margin() {
        let sys = cbf_constraints(&[0.5, 1.5, 0.0]);
        let slack = sys.slack(&[0.0, 0.0]).unwrap();
        assert!(slack.iter().all(|s| *s < 0.0));
        for j in 0..3 {
            assert_abs_diff_eq!(slack[j], -sys.b()[j], epsilon = 1e-15);
        }
    }

    #[test]
    fn obstacle_row_has_no_turn_component() {
        let x = [-2.0, 0.0, 0.0];
        let sys = cbf_constraints(&x);
        let (_, lambda) = obstacle_barrier(&OBSTACLES[0], [x[0], x[1]]);
        let m_j = lambda.len() as f64;
        let expect: f64 = -lambda.iter().zip(OBSTACLES[0].a).map(|(l, a)| l * a[0]).sum::<f64>() / m_j;
        assert_abs_diff_eq!(sys.a()[(0, 0)], expect, epsilon = 1e-12);
        assert_eq!(sys.a()[(0, 1)], 0.0);
        for (i, (au, bu)) in CONTROL_A.iter().zip(CONTROL_B).enumerate() {
            assert_eq!(sys.a().row(9 + i), au);
            assert_eq!(sys.b()[9 + i], bu);
        }
    }

    #[test]
    fn pid_at_goal_is_idle() {
        let mut pid = Pid::new();
        assert_eq!(pid.command(&[0.0, 0.0, 0.0]), [0.0, 0.0]);
        let x = [0.0; 3];
        let states = vec![x; 11];
        assert_eq!(trajectory_cost(&states, &[[0.0; 2]; 10]), 0.0);
    }

    #[test]
    fn pid_longitudinal_error() {
        let mut pid = Pid::new();
        let u = pid.command(&[-1.0, 0.0, 0.0]);
        // e_long = 1: Kp + Ki * dt
        assert_abs_diff_eq!(u[0], 0.01 + 0.05 * 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(u[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn starts_are_safe_and_face_the_goal() {
        let starts = sample_starts(4, 20);
        assert_eq!(starts, sample_starts(4, 20));
        for x in &starts {
            assert!(min_obstacle_barrier([x[0], x[1]]) >= 0.2);
            let heading = [libm::cos(x[2]), libm::sin(x[2])];
            assert!(heading[0] * -x[0] + heading[1] * -x[1] > 0.0);
        }
    }

    #[test]
    fn cost_matches_logged_trajectory() {
        let cfg = UnicycleConfig {
            train: TrainConfig {
                hidden: vec![8],
                ..default_config(0).train
            },
            ..default_config(0)
        };
        let model = new_model(&cfg).unwrap();
        let t = rollout(&model, Method::CAffNet, &cfg.train.layer, &[TEST_START], 40)
            .unwrap()
            .pop()
            .unwrap();
        let r: f64 = t.u_net.iter().map(|u| u[0] * u[0] + u[1] * u[1]).sum();
        let q: f64 = t.states[..40].iter().map(|x| 1000.0 * (x[0] * x[0] + x[1] * x[1])).sum();
        let last = t.states[40];
        let terminal = 1e6 * (last[0] * last[0] + last[1] * last[1]);
        assert!((t.cost - (q + r + terminal)).abs() <= 1e-10 * t.cost.max(1.0));
        assert_eq!(t.violation().max, 0.0);
    }

    fn policy_cost(model: &Model, starts: &[State], steps: usize, method: Method, nominal: bool) -> f64 {
        let layer = LayerConfig::default();
        let combos = combinations(&layer).unwrap();
        let with_layer = method.trains_with_layer();
        let policy = Policy {
            model,
            combos: &combos,
            layer: &layer,
            project: with_layer,
            use_w: with_layer,
            sensitivity: false,
            nominal,
        };
        let t = policy.simulate(starts, steps, false).unwrap().0;
        t.iter().map(|t| t.cost).sum::<f64>() / t.len() as f64
    }

    fn grads_for(
        model: &Model,
        starts: &[State],
        steps: usize,
        method: Method,
        nominal: bool,
    ) -> (Vec<f64>, Vec<f64>) {
        let layer = LayerConfig::default();
        let combos = combinations(&layer).unwrap();
        let with_layer = method.trains_with_layer();
        let policy = Policy {
            model,
            combos: &combos,
            layer: &layer,
            project: with_layer,
            use_w: with_layer,
            sensitivity: true,
            nominal,
        };
        let (trajs, tapes) = policy.simulate(starts, steps, true).unwrap();
        let mut gf = vec![0.0; model.f.param_count()];
        let mut gw = vec![0.0; model.w.param_count()];
        reverse_pass(model, &trajs, &tapes, None, true, &mut gf, &mut gw).unwrap();
        (gf, gw)
    }

    fn small_model(seed: u64) -> Model {
        let mut m = Model::new(3, 2, &[6], seed).unwrap();
        m.f.scale_output_layer(0.05);
        m.w.scale_output_layer(0.05);
        m
    }

    #[test]
    fn one_step_gradient_matches_finite_differences() {
        // one step: the nominal command and the network input are fixed, so
        // the reverse pass is the exact gradient
        let starts = [[-3.0, 1.0, -0.3], [-1.0, -3.0, 1.2]];
        for method in [Method::Soft, Method::CAffNet] {
            let model = small_model(3);
            let (gf, gw) = grads_for(&model, &starts, 1, method, true);
            let cost = |m: &Model| {
                let t = rollout(m, method, &LayerConfig::default(), &starts, 1).unwrap();
                t.iter().map(|t| t.cost).sum::<f64>() / t.len() as f64
            };
            for (which, grads) in [(0, &gf), (1, &gw)] {
                if method == Method::Soft && which == 1 {
                    continue;
                }
                for idx in 0..grads.len() {
                    let bump = |d: f64| {
                        let mut m = model.clone();
                        let p = if which == 0 { m.f.params_mut() } else { m.w.params_mut() };
                        p[idx] += d;
                        cost(&m)
                    };
                    let fd = (bump(1e-4) - bump(-1e-4)) / 2e-4;
                    assert!(
                        (fd - grads[idx]).abs() <= 1e-4 * fd.abs().max(1.0),
                        "{method:?} net {which} param {idx}: fd {fd} vs {}",
                        grads[idx]
                    );
                }
            }
        }
    }

    #[test]
    fn multi_step_gradient_matches_finite_differences() {
        // without the nominal controller every dependence on the parameters
        // is back-propagated; one start runs into the p_x <= 1 bound, one into
        // an obstacle
        let starts = [[0.7, 1.0, 0.2], [-3.4, 0.3, 0.0]];
        let mut model = small_model(8);
        let n = model.f.param_count();
        model.f.params_mut()[n - 2] += 0.9;
        model.f.params_mut()[n - 1] += 0.05;
        let steps = 25;
        let (gf, gw) = grads_for(&model, &starts, steps, Method::CAffNet, false);
        let mut checked = 0;
        for (which, grads) in [(0, &gf), (1, &gw)] {
            for idx in 0..grads.len() {
                let bump = |d: f64| {
                    let mut m = model.clone();
                    let p = if which == 0 { m.f.params_mut() } else { m.w.params_mut() };
                    p[idx] += d;
                    policy_cost(&m, &starts, steps, Method::CAffNet, false)
                };
                let fd = (bump(1e-5) - bump(-1e-5)) / 2e-5;
                assert!(
                    (fd - grads[idx]).abs() <= 1e-3 * fd.abs().max(1.0),
                    "net {which} param {idx}: fd {fd} vs {}",
                    grads[idx]
                );
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn step_adjoint_matches_finite_differences() {
        let x = [-1.3, 0.4, 0.7];
        let u = [0.6, -0.2];
        let lam = [3.0, -2.0, 0.5];
        let (dx, du) = step_adjoint(&x, &u, &lam);
        let dot3 = |a: State| a.iter().zip(&lam).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..3 {
            let (mut up, mut dn) = (x, x);
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (dot3(step(&up, &u)) - dot3(step(&dn, &u))) / 2e-6;
            assert_abs_diff_eq!(dx[i], fd, epsilon = 1e-8);
        }
        for c in 0..2 {
            let (mut up, mut dn) = (u, u);
            up[c] += 1e-6;
            dn[c] -= 1e-6;
            let fd = (dot3(step(&x, &up)) - dot3(step(&x, &dn))) / 2e-6;
            assert_abs_diff_eq!(du[c], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn short_training_stays_feasible() {
        let cfg = UnicycleConfig {
            train: TrainConfig {
                hidden: vec![16, 16],
                epochs: 2,
                ..default_config(1).train
            },
            starts: 3,
            steps: 30,
            ..default_config(1)
        };
        let mut seen = 0;
        let run = run_unicycle(&cfg, |rec, _| {
            seen += 1;
            assert!(rec.max_violation.max(0.0) <= 1e-9);
        })
        .unwrap();
        assert_eq!(seen, 2);
        assert_eq!(run.violation().max, 0.0);
        assert_eq!(run.test.states.len(), 31);
    }
}
