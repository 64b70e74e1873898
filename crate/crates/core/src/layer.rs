//! The constraint-enforcing output layer.
//!
//! For every row subset `gamma` the layer forms
//!
//! ```text
//! P_gamma = f - A_g^+ (A_g f - b_g) + (I - A_g^+ A_g) w
//! ```
//!
//! keeps the candidates that satisfy the whole system, and returns the one
//! nearest to `f` in the configured p-norm. If `f` is already feasible it is
//! returned unchanged.
//!
//! Ties in the nearest-candidate search go to the candidate that comes first
//! in the combination order (lexicographic in the index sequence). The
//! backward pass treats the branch and the winning subset as constants, so the
//! Jacobian of the output with respect to both `f` and `w` is the null-space
//! projector `I - A_g^+ A_g` of the winner (zero on the interior branch for
//! `w`, identity for `f`).

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::constraint::{
    select_sub, violation, CombinationMode, CombinationSet, ConstraintSystem, IndexCombination,
};
use crate::error::{Error, Result};
use crate::linalg::{dot, pinv_with_rank, vec_pnorm, Matrix, NormOrder, Vector, DEFAULT_RANK_TOL};

pub const DEFAULT_FEAS_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerConfig {
    pub p: NormOrder,
    /// Slack allowed when deciding whether a candidate satisfies `A y <= b`.
    pub feas_tol: f64,
    pub rank_tol: f64,
    pub mode: CombinationMode,
    /// Evaluate combinations in chunks of this many (memory bound only; the
    /// result does not depend on it).
    pub chunk_size: Option<usize>,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            p: NormOrder::L2,
            feas_tol: DEFAULT_FEAS_TOL,
            rank_tol: DEFAULT_RANK_TOL,
            mode: CombinationMode::Full,
            chunk_size: None,
        }
    }
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.feas_tol >= 0.0) {
            return Err(Error::InvalidArgument("feas_tol must be >= 0".into()));
        }
        if !(self.rank_tol > 0.0) {
            return Err(Error::InvalidArgument("rank_tol must be > 0".into()));
        }
        if self.chunk_size == Some(0) {
            return Err(Error::InvalidArgument("chunk_size must be positive".into()));
        }
        Ok(())
    }
}

/// Pseudoinverse data for one row subset. Depends only on `A_gamma`, so it
/// can be cached whenever `A(x)` is input-independent.
#[derive(Clone, Debug)]
pub struct SubProjection {
    gamma: IndexCombination,
    a_sub: Matrix,
    pinv: Matrix,
    /// `I - A^+ A`; `None` when `A_gamma` has full column rank.
    null: Option<Matrix>,
}

impl SubProjection {
    pub fn new(a: &Matrix, gamma: IndexCombination, rank_tol: f64) -> Result<Self> {
        if let Some(&bad) = gamma.zero_based().iter().find(|&&j| j >= a.rows()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "index {} out of range for {} constraints",
                bad + 1,
                a.rows()
            )));
        }
        let a_sub = a.select_rows(gamma.zero_based());
        Self::from_sub(gamma, a_sub, rank_tol)
    }

    fn from_sub(gamma: IndexCombination, a_sub: Matrix, rank_tol: f64) -> Result<Self> {
        let n = a_sub.cols();
        let (pinv, rank) = pinv_with_rank(&a_sub, rank_tol)?;
        let null = if rank >= n {
            None
        } else {
            let pa = pinv.matmul(&a_sub)?;
            Some(Matrix::from_fn(n, n, |i, j| {
                if i == j {
                    1.0 - pa[(i, j)]
                } else {
                    -pa[(i, j)]
                }
            }))
        };
        Ok(Self {
            gamma,
            a_sub,
            pinv,
            null,
        })
    }

    pub fn gamma(&self) -> &IndexCombination {
        &self.gamma
    }

    pub fn pinv(&self) -> &Matrix {
        &self.pinv
    }

    /// `I - A^+ A`, materialized.
    pub fn null_projector(&self) -> Matrix {
        match &self.null {
            Some(n) => n.clone(),
            None => Matrix::zeros(self.a_sub.cols(), self.a_sub.cols()),
        }
    }

    /// Projection of `f` onto this subset's affine hull, shifted by the
    /// null-space component of `w`. `b` is the full right-hand side.
    pub fn project_into(&self, f: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
        let n = f.len();
        out.copy_from_slice(f);
        for (r, &j) in self.gamma.zero_based().iter().enumerate() {
            let resid = dot(self.a_sub.row(r), f) - b[j];
            if resid != 0.0 {
                for i in 0..n {
                    out[i] -= self.pinv[(i, r)] * resid;
                }
            }
        }
        if let Some(null) = &self.null {
            for (i, o) in out.iter_mut().enumerate() {
                *o += dot(null.row(i), w);
            }
        }
    }
}

/// `f - A^+ (A f - b) + (I - A^+ A) w` for an explicit sub-system.
pub fn project_sub(
    f_theta: &[f64],
    w_phi: &[f64],
    a_gamma: &Matrix,
    b_gamma: &[f64],
    rank_tol: f64,
) -> Result<Vector> {
    let n = a_gamma.cols();
    if f_theta.len() != n {
        return Err(Error::dim("project_sub f_theta", n, f_theta.len()));
    }
    if w_phi.len() != n {
        return Err(Error::dim("project_sub w_phi", n, w_phi.len()));
    }
    if b_gamma.len() != a_gamma.rows() {
        return Err(Error::dim("project_sub b_gamma", a_gamma.rows(), b_gamma.len()));
    }
    let k = a_gamma.rows();
    let gamma = IndexCombination::from_zero_based((0..k).collect());
    let sub = SubProjection::from_sub(gamma, a_gamma.clone(), rank_tol)?;
    let mut out = vec![0.0; n];
    sub.project_into(f_theta, w_phi, b_gamma, &mut out);
    Vector::new(out)
}

/// One evaluated sub-constraint projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionCandidate {
    pub gamma: IndexCombination,
    pub y: Vector,
    /// `max(0, A y - b)` over the full system.
    pub residual: Vector,
    pub feasible: bool,
    /// `||y - f||_p`
    pub distance: f64,
}

impl ProjectionCandidate {
    pub fn max_violation(&self) -> f64 {
        self.residual.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Branch {
    /// `f` already satisfied the system.
    Interior,
    Projected(IndexCombination),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionRecord {
    pub branch: Branch,
    pub output: Vector,
    /// `I - A^+ A` of the winning subset; `None` on the interior branch.
    pub null_projector: Option<Matrix>,
}

impl SelectionRecord {
    pub fn gamma(&self) -> Option<&IndexCombination> {
        match &self.branch {
            Branch::Interior => None,
            Branch::Projected(g) => Some(g),
        }
    }
}

fn check_inputs(
    sys_m: usize,
    sys_n: usize,
    combos: &CombinationSet,
    f: &[f64],
    w: &[f64],
) -> Result<()> {
    if f.len() != sys_n {
        return Err(Error::dim("layer f_theta", sys_n, f.len()));
    }
    if w.len() != sys_n {
        return Err(Error::dim("layer w_phi", sys_n, w.len()));
    }
    if combos.m() != sys_m || combos.n_out() != sys_n {
        return Err(Error::InvalidArgument(alloc::format!(
            "combination set built for ({}, {}), system is ({sys_m}, {sys_n})",
            combos.m(),
            combos.n_out()
        )));
    }
    Ok(())
}

fn full_candidate(
    sys: &ConstraintSystem,
    sub: &SubProjection,
    f: &[f64],
    w: &[f64],
    cfg: &LayerConfig,
) -> Result<ProjectionCandidate> {
    let mut y = vec![0.0; f.len()];
    sub.project_into(f, w, sys.b(), &mut y);
    let residual = violation(sys, &y)?;
    let feasible = residual.iter().all(|&r| r <= cfg.feas_tol);
    let diff: Vec<f64> = y.iter().zip(f).map(|(a, b)| a - b).collect();
    Ok(ProjectionCandidate {
        gamma: sub.gamma.clone(),
        distance: vec_pnorm(&diff, cfg.p),
        y: Vector::new(y)?,
        residual,
        feasible,
    })
}

/// Calls `visit` on each sub-projection, built `chunk` at a time.
fn for_each_sub(
    a: &Matrix,
    combos: &CombinationSet,
    cfg: &LayerConfig,
    mut visit: impl FnMut(&SubProjection) -> Result<()>,
) -> Result<()> {
    let chunk = cfg.chunk_size.unwrap_or(usize::MAX);
    let mut iter = combos.iter();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        for gamma in iter.by_ref().take(chunk) {
            buf.push(SubProjection::new(a, gamma, cfg.rank_tol)?);
        }
        if buf.is_empty() {
            return Ok(());
        }
        for sub in &buf {
            visit(sub)?;
        }
    }
}

/// Every sub-constraint projection with its feasibility, in combination
/// order.
pub fn candidates(
    sys: &ConstraintSystem,
    combos: &CombinationSet,
    f_theta: &[f64],
    w_phi: &[f64],
    cfg: &LayerConfig,
) -> Result<Vec<ProjectionCandidate>> {
    cfg.validate()?;
    check_inputs(sys.m(), sys.n_out(), combos, f_theta, w_phi)?;
    let mut out = Vec::new();
    for_each_sub(sys.a(), combos, cfg, |sub| {
        out.push(full_candidate(sys, sub, f_theta, w_phi, cfg)?);
        Ok(())
    })?;
    Ok(out)
}

/// Running arg-min over feasible candidates. Candidates arrive in
/// combination order, so keeping the first strict minimum implements the
/// lexicographic tie-break.
struct Nearest<'a> {
    f: &'a [f64],
    w: &'a [f64],
    b: &'a [f64],
    a: &'a Matrix,
    cfg: &'a LayerConfig,
    y: Vec<f64>,
    diff: Vec<f64>,
    best: Option<(f64, Vec<f64>, IndexCombination, Option<Matrix>)>,
    least_violating: Option<(f64, IndexCombination)>,
}

impl<'a> Nearest<'a> {
    fn new(a: &'a Matrix, b: &'a [f64], f: &'a [f64], w: &'a [f64], cfg: &'a LayerConfig) -> Self {
        Self {
            f,
            w,
            b,
            a,
            cfg,
            y: vec![0.0; f.len()],
            diff: vec![0.0; f.len()],
            best: None,
            least_violating: None,
        }
    }

    fn visit(&mut self, sub: &SubProjection) {
        sub.project_into(self.f, self.w, self.b, &mut self.y);
        for ((d, y), f) in self.diff.iter_mut().zip(&self.y).zip(self.f) {
            *d = y - f;
        }
        let dist = vec_pnorm(&self.diff, self.cfg.p);
        if let Some((best, ..)) = &self.best {
            if dist >= *best {
                return;
            }
        }
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.a.rows() {
            let r = dot(self.a.row(i), &self.y) - self.b[i];
            if r > worst {
                worst = r;
                if worst > self.cfg.feas_tol && self.best.is_some() {
                    return;
                }
            }
        }
        if worst <= self.cfg.feas_tol {
            self.best = Some((dist, self.y.clone(), sub.gamma.clone(), sub.null.clone()));
        } else if self
            .least_violating
            .as_ref()
            .map_or(true, |(v, _)| worst < *v)
        {
            self.least_violating = Some((worst, sub.gamma.clone()));
        }
    }

    fn finish(self, sys_for_diag: impl FnOnce(&IndexCombination) -> Result<ProjectionCandidate>) -> Result<SelectionRecord> {
        match self.best {
            Some((_, y, gamma, null)) => {
                let n = y.len();
                Ok(SelectionRecord {
                    branch: Branch::Projected(gamma),
                    output: Vector::new(y)?,
                    null_projector: Some(null.unwrap_or_else(|| Matrix::zeros(n, n))),
                })
            }
            None => {
                let (_, gamma) = self
                    .least_violating
                    .ok_or_else(|| Error::InvalidArgument("empty combination set".into()))?;
                Err(Error::EmptyCandidateSet(Box::new(sys_for_diag(&gamma)?)))
            }
        }
    }
}

fn interior(sys_a: &Matrix, b: &[f64], f: &[f64], feas_tol: f64) -> bool {
    (0..sys_a.rows()).all(|i| dot(sys_a.row(i), f) - b[i] <= feas_tol)
}

/// Layer output for one input.
pub fn forward(
    sys: &ConstraintSystem,
    combos: &CombinationSet,
    f_theta: &[f64],
    w_phi: &[f64],
    cfg: &LayerConfig,
) -> Result<SelectionRecord> {
    cfg.validate()?;
    check_inputs(sys.m(), sys.n_out(), combos, f_theta, w_phi)?;
    if interior(sys.a(), sys.b(), f_theta, cfg.feas_tol) {
        return Ok(SelectionRecord {
            branch: Branch::Interior,
            output: Vector::new(f_theta.to_vec())?,
            null_projector: None,
        });
    }
    let mut nearest = Nearest::new(sys.a(), sys.b(), f_theta, w_phi, cfg);
    for_each_sub(sys.a(), combos, cfg, |sub| {
        nearest.visit(sub);
        Ok(())
    })?;
    nearest.finish(|gamma| {
        let sub = SubProjection::new(sys.a(), gamma.clone(), cfg.rank_tol)?;
        full_candidate(sys, &sub, f_theta, w_phi, cfg)
    })
}

/// Gradients of the layer output with respect to `f` and `w`, holding the
/// branch and the winning subset fixed.
pub fn backward(record: &SelectionRecord, upstream_grad: &[f64]) -> Result<(Vector, Vector)> {
    let n = record.output.dim();
    if upstream_grad.len() != n {
        return Err(Error::dim("backward upstream", n, upstream_grad.len()));
    }
    match (&record.branch, &record.null_projector) {
        (Branch::Interior, _) => Ok((Vector::new(upstream_grad.to_vec())?, Vector::zeros(n))),
        (Branch::Projected(_), Some(null)) => {
            let g = Vector::new(null.tr_mul_vec(upstream_grad)?)?;
            Ok((g.clone(), g))
        }
        (Branch::Projected(_), None) => Err(Error::InvalidArgument(
            "projected record without null projector".into(),
        )),
    }
}

/// Sub-projections for every combination of a fixed `A`. Use with providers
/// whose matrix does not depend on the input.
#[derive(Clone, Debug)]
pub struct ProjectionCache {
    a: Matrix,
    subs: Vec<SubProjection>,
    combos: CombinationSet,
}

impl ProjectionCache {
    pub fn build(a: &Matrix, combos: &CombinationSet, rank_tol: f64) -> Result<Self> {
        if combos.m() != a.rows() || combos.n_out() != a.cols() {
            return Err(Error::InvalidArgument(
                "combination set does not match matrix shape".into(),
            ));
        }
        let subs = combos
            .iter()
            .map(|g| SubProjection::new(a, g, rank_tol))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            a: a.clone(),
            subs,
            combos: combos.clone(),
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn combos(&self) -> &CombinationSet {
        &self.combos
    }

    /// `false` when every subset has full column rank, in which case the
    /// null-space input never affects the output.
    pub fn uses_null_space(&self) -> bool {
        self.subs.iter().any(|s| s.null.is_some())
    }

    /// Same result as [`forward`] on `(A, b)` without recomputing any
    /// pseudoinverse.
    pub fn forward(
        &self,
        b: &[f64],
        f_theta: &[f64],
        w_phi: &[f64],
        cfg: &LayerConfig,
    ) -> Result<SelectionRecord> {
        let n = self.a.cols();
        if b.len() != self.a.rows() {
            return Err(Error::dim("cached forward b", self.a.rows(), b.len()));
        }
        if f_theta.len() != n || w_phi.len() != n {
            return Err(Error::dim("cached forward f/w", n, f_theta.len().max(w_phi.len())));
        }
        if interior(&self.a, b, f_theta, cfg.feas_tol) {
            return Ok(SelectionRecord {
                branch: Branch::Interior,
                output: Vector::new(f_theta.to_vec())?,
                null_projector: None,
            });
        }
        let mut nearest = Nearest::new(&self.a, b, f_theta, w_phi, cfg);
        for sub in &self.subs {
            nearest.visit(sub);
        }
        nearest.finish(|gamma| {
            let sys = ConstraintSystem::new(self.a.clone(), Vector::new(b.to_vec())?)?;
            let sub = SubProjection::new(&self.a, gamma.clone(), cfg.rank_tol)?;
            full_candidate(&sys, &sub, f_theta, w_phi, cfg)
        })
    }
}

/// Builds the combination family matching a system and config.
pub fn combos_for(sys: &ConstraintSystem, cfg: &LayerConfig) -> Result<CombinationSet> {
    crate::constraint::enumerate_combinations(sys.m(), sys.n_out(), cfg.mode)
}

/// Convenience: `(A_gamma, b_gamma)` projection for an index sequence of a
/// full system.
pub fn project_gamma(
    sys: &ConstraintSystem,
    gamma: &IndexCombination,
    f_theta: &[f64],
    w_phi: &[f64],
    rank_tol: f64,
) -> Result<Vector> {
    let (a, b) = select_sub(sys, gamma)?;
    project_sub(f_theta, w_phi, &a, &b, rank_tol)
}
