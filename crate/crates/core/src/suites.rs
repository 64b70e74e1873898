//! Seeded property suites over the layer and its linear algebra. Each suite
//! reports how many cases it ran and keeps the first few failures together
//! with the data needed to reproduce them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::constraint::{
    binomial, enumerate_combinations, CombinationMode, ConstraintSystem, IndexCombination,
};
use crate::error::Result;
use crate::fuzz::{feasible_system, point, random_matrix, SystemLimits};
use crate::layer::{backward, candidates, forward, Branch, LayerConfig, ProjectionCache};
use crate::linalg::{pinv, spectral_norm, vec_pnorm, Matrix, NormOrder, DEFAULT_RANK_TOL};
use crate::neural::Mlp;
use crate::oracle::exact_projection;
use crate::rng::{self, int_inclusive, streams};

/// Failures kept per suite.
pub const MAX_KEPT_FAILURES: usize = 8;

pub const PINV_TOL: f64 = 1e-8;
pub const ORACLE_TOL: f64 = 1e-6;
pub const GRADIENT_STEP: f64 = 1e-6;
pub const GRADIENT_RTOL: f64 = 1e-4;
/// Share of branch-stable gradient probes that must match.
pub const GRADIENT_PASS_RATE: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Feasibility,
    ProjectionOracle,
    Gradients,
    Pinv,
    Combinatorics,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Feasibility,
        Suite::ProjectionOracle,
        Suite::Gradients,
        Suite::Pinv,
        Suite::Combinatorics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Feasibility => "feasibility",
            Suite::ProjectionOracle => "projection-oracle",
            Suite::Gradients => "gradients",
            Suite::Pinv => "pinv",
            Suite::Combinatorics => "combinatorics",
        }
    }

    pub fn default_cases(self) -> usize {
        match self {
            Suite::Feasibility => 10_000,
            Suite::ProjectionOracle | Suite::Pinv => 1_000,
            Suite::Gradients => 500,
            Suite::Combinatorics => 0,
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// What a failing case ran on.
#[derive(Clone, Debug)]
pub enum Fixture {
    Layer {
        system: ConstraintSystem,
        f: Vec<f64>,
        w: Vec<f64>,
    },
    Matrix(Matrix),
    Combinations {
        m: usize,
        n_out: usize,
        mode: CombinationMode,
    },
}

#[derive(Clone, Debug)]
pub struct Failure {
    pub case: usize,
    pub message: String,
    pub fixture: Fixture,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: usize,
    pub failed: usize,
    /// Cases skipped as ill-posed (gradient probes that straddle a branch
    /// change).
    pub excluded: usize,
    /// Largest error seen, in the suite's own measure.
    pub worst: f64,
    pub failures: Vec<Failure>,
}

impl SuiteReport {
    fn new(suite: Suite) -> Self {
        Self {
            suite,
            cases: 0,
            failed: 0,
            excluded: 0,
            worst: 0.0,
            failures: Vec::new(),
        }
    }

    fn fail(&mut self, case: usize, message: String, fixture: Fixture) {
        self.failed += 1;
        if self.failures.len() < MAX_KEPT_FAILURES {
            self.failures.push(Failure {
                case,
                message,
                fixture,
            });
        }
    }

    fn observe(&mut self, err: f64) {
        if err > self.worst || err.is_nan() {
            self.worst = err;
        }
    }

    pub fn passed(&self) -> bool {
        match self.suite {
            Suite::Gradients => {
                let stable = self.cases - self.excluded;
                stable > 0
                    && (stable - self.failed) as f64 >= GRADIENT_PASS_RATE * stable as f64
            }
            _ => self.failed == 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    pub cases: usize,
    pub seed: u64,
    pub layer: LayerConfig,
}

impl SuiteConfig {
    pub fn new(suite: Suite, seed: u64) -> Self {
        Self {
            cases: suite.default_cases(),
            seed,
            layer: LayerConfig::default(),
        }
    }
}

pub fn run(suite: Suite, cfg: &SuiteConfig) -> Result<SuiteReport> {
    match suite {
        Suite::Feasibility => feasibility(cfg),
        Suite::ProjectionOracle => projection_oracle(cfg),
        Suite::Gradients => gradients(cfg),
        Suite::Pinv => pinv_suite(cfg),
        Suite::Combinatorics => Ok(combinatorics()),
    }
}

fn suite_rng(suite: Suite, seed: u64) -> rng::Rng {
    rng::stream(seed, streams::FUZZ + ((suite as u64 + 1) << 8))
}

/// Every forward output satisfies its system and every candidate set holds a
/// feasible entry, for random feasible systems and random `f`, `w`.
pub fn feasibility(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::Feasibility);
    let mut r = suite_rng(Suite::Feasibility, cfg.seed);
    for case in 0..cfg.cases {
        let fs = feasible_system(&mut r, SystemLimits::default());
        let sys = fs.system;
        let n = sys.n_out();
        let f = point(&mut r, n, 3.0);
        let w = point(&mut r, n, 1.0);
        let combos = enumerate_combinations(sys.m(), n, cfg.layer.mode)?;
        report.cases += 1;
        let fixture = || Fixture::Layer {
            system: sys.clone(),
            f: f.clone(),
            w: w.clone(),
        };
        let cands = match candidates(&sys, &combos, &f, &w, &cfg.layer) {
            Ok(c) => c,
            Err(e) => {
                report.fail(case, format!("{e}"), fixture());
                continue;
            }
        };
        let interior = sys.max_residual(&f)? <= cfg.layer.feas_tol;
        if !interior && !cands.iter().any(|c| c.feasible) {
            report.fail(case, "no feasible candidate".into(), fixture());
            continue;
        }
        match forward(&sys, &combos, &f, &w, &cfg.layer) {
            Ok(rec) => {
                let v = sys.max_residual(&rec.output)?;
                report.observe(v);
                if v > cfg.layer.feas_tol {
                    report.fail(case, format!("output violates the system by {v:e}"), fixture());
                }
            }
            Err(e) => report.fail(case, format!("{e}"), fixture()),
        }
    }
    Ok(report)
}

/// With `w = 0` and the Euclidean norm the layer returns the exact
/// projection: same distance, and, the projection being unique, the same
/// point.
pub fn projection_oracle(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::ProjectionOracle);
    let mut r = suite_rng(Suite::ProjectionOracle, cfg.seed);
    let layer = LayerConfig {
        p: NormOrder::L2,
        ..cfg.layer
    };
    for case in 0..cfg.cases {
        let sys = feasible_system(&mut r, SystemLimits::default()).system;
        let n = sys.n_out();
        let f = point(&mut r, n, 3.0);
        let w = vec![0.0; n];
        let combos = enumerate_combinations(sys.m(), n, layer.mode)?;
        report.cases += 1;
        let fixture = || Fixture::Layer {
            system: sys.clone(),
            f: f.clone(),
            w: w.clone(),
        };
        let (rec, exact) = match (forward(&sys, &combos, &f, &w, &layer), exact_projection(&sys, &f)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                report.fail(case, format!("{e}"), fixture());
                continue;
            }
        };
        let diff: Vec<f64> = rec.output.iter().zip(&f).map(|(a, b)| a - b).collect();
        let dist = vec_pnorm(&diff, NormOrder::L2);
        let gap: Vec<f64> = rec.output.iter().zip(exact.y_star.iter()).map(|(a, b)| a - b).collect();
        let d_err = (dist - exact.value).abs();
        let y_err = vec_pnorm(&gap, NormOrder::L2);
        report.observe(d_err.max(y_err));
        if d_err > ORACLE_TOL || y_err > ORACLE_TOL {
            report.fail(
                case,
                format!("distance {dist} vs exact {}, output gap {y_err:e}", exact.value),
                fixture(),
            );
        }
    }
    Ok(report)
}

/// Shapes and weights of one gradient probe.
struct Probe {
    sys: ConstraintSystem,
    cache: ProjectionCache,
    f: Mlp,
    w: Mlp,
    x: Vec<f64>,
    target: Vec<f64>,
}

/// Loss, layer branch and ReLU pattern of one forward pass.
struct ProbeEval {
    loss: f64,
    branch: Branch,
    pattern: Vec<bool>,
    grad_f: Vec<f64>,
    grad_w: Vec<f64>,
}

impl Probe {
    fn eval(&self, f: &Mlp, w: &Mlp, layer: &LayerConfig, grads: bool) -> Result<ProbeEval> {
        let tf = f.forward_batch(&self.x, 1)?;
        let tw = w.forward_batch(&self.x, 1)?;
        let rec = self.cache.forward(self.sys.b(), tf.output(), tw.output(), layer)?;
        let d: Vec<f64> = rec.output.iter().zip(&self.target).map(|(y, t)| y - t).collect();
        let loss = 0.5 * d.iter().map(|v| v * v).sum::<f64>();
        let pattern = [&tf, &tw]
            .iter()
            .flat_map(|t| (1..f.widths().len() - 1).flat_map(move |l| t.hidden(l).iter().map(|v| *v > 0.0)))
            .collect();
        let (mut grad_f, mut grad_w) = (Vec::new(), Vec::new());
        if grads {
            let (gf, gw) = backward(&rec, &d)?;
            grad_f = vec![0.0; f.param_count()];
            grad_w = vec![0.0; w.param_count()];
            f.backward(&tf, &gf, &mut grad_f, None)?;
            w.backward(&tw, &gw, &mut grad_w, None)?;
        }
        Ok(ProbeEval {
            loss,
            branch: rec.branch,
            pattern,
            grad_f,
            grad_w,
        })
    }
}

/// Rounding error of one loss evaluation, in units of its last place.
const FD_ROUNDOFF_ULPS: f64 = 8.0;

/// Parameters checked per probe and network.
const PARAMS_PER_NET: usize = 8;

/// Analytic gradients of `0.5 |layer(f(x), w(x)) - t|^2` with respect to the
/// parameters of both networks against central differences. Probes whose
/// perturbations change the selected subset or a ReLU pattern are excluded.
pub fn gradients(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::Gradients);
    let mut r = suite_rng(Suite::Gradients, cfg.seed);
    let limits = SystemLimits {
        max_n_out: 3,
        max_m: 6,
    };
    let h = GRADIENT_STEP;
    for case in 0..cfg.cases {
        let sys = feasible_system(&mut r, limits).system;
        let n = sys.n_out();
        let n_in = int_inclusive(&mut r, 1, 3);
        let widths = [n_in, 6, 6, n];
        let combos = enumerate_combinations(sys.m(), n, cfg.layer.mode)?;
        let probe = Probe {
            cache: ProjectionCache::build(sys.a(), &combos, cfg.layer.rank_tol)?,
            f: Mlp::new(&widths, &mut r)?,
            w: Mlp::new(&widths, &mut r)?,
            x: point(&mut r, n_in, 1.0),
            target: point(&mut r, n, 1.0),
            sys,
        };
        report.cases += 1;
        let base = probe.eval(&probe.f, &probe.w, &cfg.layer, true)?;
        let fixture = || Fixture::Layer {
            system: probe.sys.clone(),
            f: probe.f.forward(&probe.x).unwrap_or_default(),
            w: probe.w.forward(&probe.x).unwrap_or_default(),
        };
        let mut stable = true;
        let mut worst: f64 = 0.0;
        'nets: for net in 0..2 {
            let count = if net == 0 { probe.f.param_count() } else { probe.w.param_count() };
            for _ in 0..PARAMS_PER_NET {
                let idx = int_inclusive(&mut r, 0, count - 1);
                let bumped = |d: f64| {
                    let (mut f, mut w) = (probe.f.clone(), probe.w.clone());
                    let p = if net == 0 { f.params_mut() } else { w.params_mut() };
                    p[idx] += d;
                    probe.eval(&f, &w, &cfg.layer, false)
                };
                let (up, dn) = (bumped(h)?, bumped(-h)?);
                if up.branch != base.branch
                    || dn.branch != base.branch
                    || up.pattern != base.pattern
                    || dn.pattern != base.pattern
                {
                    stable = false;
                    break 'nets;
                }
                let fd = (up.loss - dn.loss) / (2.0 * h);
                let g = if net == 0 { base.grad_f[idx] } else { base.grad_w[idx] };
                // rounding of the two loss values bounds what the
                // difference quotient can resolve
                let noise = FD_ROUNDOFF_ULPS * f64::EPSILON * up.loss.abs().max(dn.loss.abs()) / (2.0 * h);
                let floor = noise / GRADIENT_RTOL;
                worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(floor));
            }
        }
        if !stable {
            report.excluded += 1;
            continue;
        }
        report.observe(worst);
        if worst > GRADIENT_RTOL {
            report.fail(case, format!("relative gradient error {worst:e}"), fixture());
        }
    }
    Ok(report)
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Penrose identities relative to the scale of `A` and `A^+`, symmetry and
/// idempotence of both projectors, and `||A^+ A||_2 <= 1`,
/// `||I - A^+ A||_2 <= 1`.
pub fn pinv_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::Pinv);
    let mut r = suite_rng(Suite::Pinv, cfg.seed);
    for case in 0..cfg.cases {
        let a = random_matrix(&mut r, 6);
        report.cases += 1;
        let p = pinv(&a, DEFAULT_RANK_TOL)?;
        let ap = a.matmul(&p)?;
        let pa = p.matmul(&a)?;
        let sa = a.max_abs().max(f64::MIN_POSITIVE);
        let sp = p.max_abs().max(f64::MIN_POSITIVE);
        let null = Matrix::identity(a.cols()).sub(&pa)?;
        let checks = [
            ("A A+ A = A", max_abs_diff(&ap.matmul(&a)?, &a) / sa),
            ("A+ A A+ = A+", max_abs_diff(&pa.matmul(&p)?, &p) / sp),
            ("A A+ symmetric", max_abs_diff(&ap, &ap.transpose())),
            ("A+ A symmetric", max_abs_diff(&pa, &pa.transpose())),
            ("A+ A idempotent", max_abs_diff(&pa.matmul(&pa)?, &pa)),
            ("||A+ A|| <= 1", (spectral_norm(&pa)? - 1.0).max(0.0)),
            ("||I - A+ A|| <= 1", (spectral_norm(&null)? - 1.0).max(0.0)),
        ];
        for (name, err) in checks {
            report.observe(err);
            if !(err <= PINV_TOL) {
                report.fail(case, format!("{name}: error {err:e}"), Fixture::Matrix(a.clone()));
                break;
            }
        }
    }
    Ok(report)
}

/// Family sizes against Pascal's triangle for every `m <= 16`,
/// `n_out <= 8` in both modes, plus structural checks on the enumeration.
pub fn combinatorics() -> SuiteReport {
    let mut report = SuiteReport::new(Suite::Combinatorics);
    let mut pascal = vec![vec![1u128]];
    for n in 1..=16usize {
        let prev = &pascal[n - 1];
        let row: Vec<u128> = (0..=n)
            .map(|k| {
                let left = if k > 0 { prev[k - 1] } else { 0 };
                let right = prev.get(k).copied().unwrap_or(0);
                left + right
            })
            .collect();
        pascal.push(row);
    }
    for m in 1..=16usize {
        for n in 1..=8usize {
            for mode in [CombinationMode::Full, CombinationMode::Lite] {
                report.cases += 1;
                let fixture = Fixture::Combinations { m, n_out: n, mode };
                let kmax = m.min(n);
                let want: u128 = match mode {
                    CombinationMode::Full => (1..=kmax).map(|k| pascal[m][k]).sum(),
                    CombinationMode::Lite if kmax == 1 => m as u128,
                    CombinationMode::Lite => m as u128 + pascal[m][kmax],
                };
                let set = match enumerate_combinations(m, n, mode) {
                    Ok(s) => s,
                    Err(e) => {
                        report.fail(report.cases - 1, format!("{e}"), fixture);
                        continue;
                    }
                };
                let listed: Vec<IndexCombination> = set.iter().collect();
                let mut problem = None;
                if set.len() != want || listed.len() as u128 != want {
                    problem = Some(format!("size {} (listed {}) vs {want}", set.len(), listed.len()));
                } else if mode == CombinationMode::Full && want > (1u128 << m) - 1 {
                    problem = Some(format!("{want} exceeds 2^m - 1"));
                } else if listed.windows(2).any(|p| p[0].zero_based() >= p[1].zero_based()) {
                    problem = Some("not strictly increasing in lexicographic order".into());
                } else if listed.iter().any(|g| {
                    g.k() > kmax
                        || g.zero_based().windows(2).any(|p| p[0] >= p[1])
                        || g.zero_based().iter().any(|&i| i >= m)
                }) {
                    problem = Some("malformed combination".into());
                }
                if let Some(msg) = problem {
                    report.fail(report.cases - 1, msg, fixture);
                }
            }
        }
    }
    let fixed = [
        (11, 5, CombinationMode::Lite, 473),
        (11, 5, CombinationMode::Full, 1023),
    ];
    for (m, n, mode, want) in fixed {
        report.cases += 1;
        let got = crate::constraint::expected_len(m, n, mode);
        if got != want || (1..=5).map(|k| binomial(11, k)).sum::<u128>() != 1023 {
            report.fail(report.cases - 1, format!("({m}, {n}) gives {got}, want {want}"), Fixture::Combinations { m, n_out: n, mode });
        }
    }
    report
}
