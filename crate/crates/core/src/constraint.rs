//! Input-dependent affine constraint systems `A(x) y <= b(x)` and the family
//! of row subsets the layer projects onto.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Combinations are materialized eagerly up to this many constraints and
/// generated lazily above it.
pub const EAGER_MAX_CONSTRAINTS: usize = 24;

/// One evaluated system `A y <= b` with `A: m x n_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSystem {
    a: Matrix,
    b: Vector,
}

impl ConstraintSystem {
    pub fn new(a: Matrix, b: Vector) -> Result<Self> {
        if a.rows() != b.dim() {
            return Err(Error::dim("ConstraintSystem rows", a.rows(), b.dim()));
        }
        if a.rows() == 0 || a.cols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "constraint system must be non-empty, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        Ok(Self { a, b })
    }

    #[inline]
    pub fn a(&self) -> &Matrix {
        &self.a
    }

    #[inline]
    pub fn b(&self) -> &Vector {
        &self.b
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.a.rows()
    }

    #[inline]
    pub fn n_out(&self) -> usize {
        self.a.cols()
    }

    /// `A y - b` for every row.
    pub fn slack(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut ay = self.a.mul_vec(y)?;
        for (v, bi) in ay.iter_mut().zip(self.b.iter()) {
            *v -= bi;
        }
        Ok(ay)
    }

    /// Largest entry of `A y - b`, unclipped.
    pub fn max_residual(&self, y: &[f64]) -> Result<f64> {
        Ok(self
            .slack(y)?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Maps an input `x` to its constraint system. Dimensions are fixed across
/// inputs and `A(x)`, `b(x)` are expected to be continuous in `x`.
///
/// Implementations must be free of interior mutability so distinct inputs can
/// be evaluated concurrently.
pub trait ConstraintProvider {
    fn n_in(&self) -> usize;
    fn m(&self) -> usize;
    fn n_out(&self) -> usize;

    fn evaluate(&self, x: &[f64]) -> Result<ConstraintSystem>;

    /// `true` when `A(x)` does not depend on `x`. Only `b(x)` varies, so the
    /// per-combination pseudoinverses can be computed once and reused.
    fn matrix_is_constant(&self) -> bool {
        false
    }
}

/// Strictly increasing row selection `(j_1, ..., j_k)`, 1-based in the public
/// API.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IndexCombination {
    // stored 0-based; lexicographic order is identical either way
    zero_based: Vec<usize>,
}

impl IndexCombination {
    /// Builds a combination from 1-based indices.
    pub fn new(one_based: &[usize]) -> Result<Self> {
        if one_based.is_empty() {
            return Err(Error::InvalidArgument("empty index combination".into()));
        }
        if one_based[0] == 0 {
            return Err(Error::InvalidArgument(
                "constraint indices are 1-based".into(),
            ));
        }
        if one_based.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "indices must be strictly increasing: {one_based:?}"
            )));
        }
        Ok(Self {
            zero_based: one_based.iter().map(|j| j - 1).collect(),
        })
    }

    pub(crate) fn from_zero_based(zero_based: Vec<usize>) -> Self {
        Self { zero_based }
    }

    /// 1-based indices.
    pub fn indices(&self) -> Vec<usize> {
        self.zero_based.iter().map(|j| j + 1).collect()
    }

    #[inline]
    pub fn zero_based(&self) -> &[usize] {
        &self.zero_based
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.zero_based.len()
    }
}

impl core::fmt::Display for IndexCombination {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("(")?;
        for (i, j) in self.zero_based.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", j + 1)?;
        }
        f.write_str(")")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CombinationMode {
    /// Every subset of size `1..=min(m, n_out)`.
    Full,
    /// Singletons plus subsets of size exactly `min(m, n_out)`.
    Lite,
}

impl CombinationMode {
    fn keeps(self, k: usize, kmax: usize) -> bool {
        match self {
            CombinationMode::Full => k <= kmax,
            CombinationMode::Lite => k == 1 || k == kmax,
        }
    }
}

/// Ordered, duplicate-free family of index combinations for fixed
/// `(m, n_out, mode)`, in lexicographic order of the index sequences.
#[derive(Clone, Debug)]
pub struct CombinationSet {
    m: usize,
    n_out: usize,
    mode: CombinationMode,
    eager: Option<Vec<IndexCombination>>,
}

/// Builds the combination family. Materialized for
/// `m <= EAGER_MAX_CONSTRAINTS`, generated on demand otherwise.
pub fn enumerate_combinations(
    m: usize,
    n_out: usize,
    mode: CombinationMode,
) -> Result<CombinationSet> {
    if m == 0 || n_out == 0 {
        return Err(Error::InvalidArgument(format!(
            "m and n_out must be positive, got m={m}, n_out={n_out}"
        )));
    }
    let mut set = CombinationSet {
        m,
        n_out,
        mode,
        eager: None,
    };
    if m <= EAGER_MAX_CONSTRAINTS {
        set.eager = Some(set.lazy_iter().collect());
    }
    Ok(set)
}

impl CombinationSet {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn mode(&self) -> CombinationMode {
        self.mode
    }

    pub fn max_k(&self) -> usize {
        self.m.min(self.n_out)
    }

    pub fn is_materialized(&self) -> bool {
        self.eager.is_some()
    }

    /// Closed-form family size.
    pub fn len(&self) -> u128 {
        expected_len(self.m, self.n_out, self.mode)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> CombinationIter<'_> {
        match &self.eager {
            Some(v) => CombinationIter::Eager(v.iter()),
            None => CombinationIter::Lazy(self.lazy_iter()),
        }
    }

    /// Materialized slice, when available.
    pub fn as_slice(&self) -> Option<&[IndexCombination]> {
        self.eager.as_deref()
    }

    fn lazy_iter(&self) -> LexCombinations {
        LexCombinations {
            m: self.m,
            kmax: self.max_k(),
            mode: self.mode,
            stack: Vec::new(),
            started: false,
        }
    }
}

/// `sum_{k=1}^{min(m,n)} C(m,k)` for Full, `m + C(m, min(m,n))` for Lite
/// (just `m` when the minimum is 1).
pub fn expected_len(m: usize, n_out: usize, mode: CombinationMode) -> u128 {
    let kmax = m.min(n_out);
    match mode {
        CombinationMode::Full => (1..=kmax).map(|k| binomial(m, k)).sum(),
        CombinationMode::Lite if kmax <= 1 => m as u128,
        CombinationMode::Lite => m as u128 + binomial(m, kmax),
    }
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

pub enum CombinationIter<'a> {
    Eager(core::slice::Iter<'a, IndexCombination>),
    Lazy(LexCombinations),
}

impl Iterator for CombinationIter<'_> {
    type Item = IndexCombination;

    fn next(&mut self) -> Option<IndexCombination> {
        match self {
            CombinationIter::Eager(it) => it.next().cloned(),
            CombinationIter::Lazy(it) => it.next(),
        }
    }
}

/// Depth-first walk of strictly increasing sequences over `0..m`, which
/// yields them in lexicographic order. Lengths not kept by the mode are
/// traversed but not emitted.
pub struct LexCombinations {
    m: usize,
    kmax: usize,
    mode: CombinationMode,
    stack: Vec<usize>,
    started: bool,
}

impl LexCombinations {
    fn advance(&mut self) -> bool {
        if !self.started {
            self.started = true;
            self.stack.push(0);
            return true;
        }
        let last = *self.stack.last().expect("walk in progress");
        if self.stack.len() < self.kmax && last + 1 < self.m {
            self.stack.push(last + 1);
            return true;
        }
        while let Some(top) = self.stack.pop() {
            if top + 1 < self.m {
                self.stack.push(top + 1);
                return true;
            }
        }
        false
    }
}

impl Iterator for LexCombinations {
    type Item = IndexCombination;

    fn next(&mut self) -> Option<IndexCombination> {
        while self.advance() {
            if self.mode.keeps(self.stack.len(), self.kmax) {
                return Some(IndexCombination::from_zero_based(self.stack.clone()));
            }
        }
        None
    }
}

/// Rows of `A` and entries of `b` picked by `gamma`, in order.
pub fn select_sub(sys: &ConstraintSystem, gamma: &IndexCombination) -> Result<(Matrix, Vector)> {
    if let Some(&bad) = gamma.zero_based().iter().find(|&&j| j >= sys.m()) {
        return Err(Error::InvalidArgument(format!(
            "index {} out of range for {} constraints",
            bad + 1,
            sys.m()
        )));
    }
    let a = sys.a().select_rows(gamma.zero_based());
    let b = gamma.zero_based().iter().map(|&j| sys.b()[j]).collect();
    Ok((a, Vector::from_vec_unchecked(b)))
}

/// `max(0, A y - b)` elementwise.
pub fn violation(sys: &ConstraintSystem, y: &[f64]) -> Result<Vector> {
    if y.len() != sys.n_out() {
        return Err(Error::dim("violation", sys.n_out(), y.len()));
    }
    let mut r = sys.slack(y)?;
    for v in &mut r {
        *v = v.max(0.0);
    }
    Ok(Vector::from_vec_unchecked(r))
}

/// Summary of a violation residual, accumulated over one or many samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ViolationStats {
    pub max: f64,
    pub sum: f64,
    pub count: usize,
    pub positive: usize,
}

impl ViolationStats {
    pub fn from_residual(r: &[f64]) -> Self {
        let mut s = Self::default();
        s.extend(r);
        s
    }

    pub fn extend(&mut self, r: &[f64]) {
        for &v in r {
            self.max = self.max.max(v);
            self.sum += v;
            self.count += 1;
            if v > 0.0 {
                self.positive += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ViolationStats) {
        self.max = self.max.max(other.max);
        self.sum += other.sum;
        self.count += other.count;
        self.positive += other.positive;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    /// Fraction of entries strictly above zero.
    pub fn fraction_positive(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.positive as f64 / self.count as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sys(a: &[&[f64]], b: &[f64]) -> ConstraintSystem {
        ConstraintSystem::new(Matrix::from_rows(a).unwrap(), Vector::new(b.to_vec()).unwrap())
            .unwrap()
    }

    fn collect(m: usize, n: usize, mode: CombinationMode) -> Vec<Vec<usize>> {
        enumerate_combinations(m, n, mode)
            .unwrap()
            .iter()
            .map(|g| g.indices())
            .collect()
    }

    #[test]
    fn singletons_when_output_is_scalar() {
        assert_eq!(
            collect(4, 1, CombinationMode::Full),
            vec![vec![1], vec![2], vec![3], vec![4]]
        );
        assert_eq!(collect(4, 1, CombinationMode::Lite), collect(4, 1, CombinationMode::Full));
    }

    #[test]
    fn experiment_two_sizes() {
        let full = enumerate_combinations(11, 5, CombinationMode::Full).unwrap();
        let lite = enumerate_combinations(11, 5, CombinationMode::Lite).unwrap();
        assert_eq!(full.iter().count(), 1023);
        assert_eq!(full.len(), 11 + 55 + 165 + 330 + 462);
        assert_eq!(lite.iter().count(), 473);
        assert_eq!(lite.len(), 473);
    }

    #[test]
    fn lexicographic_order() {
        assert_eq!(
            collect(3, 2, CombinationMode::Full),
            vec![vec![1], vec![1, 2], vec![1, 3], vec![2], vec![2, 3], vec![3]]
        );
        assert_eq!(
            collect(4, 3, CombinationMode::Lite),
            vec![
                vec![1],
                vec![1, 2, 3],
                vec![1, 2, 4],
                vec![1, 3, 4],
                vec![2],
                vec![2, 3, 4],
                vec![3],
                vec![4]
            ]
        );
    }

    #[test]
    fn lazy_generation_above_eager_cap() {
        let set = enumerate_combinations(30, 2, CombinationMode::Full).unwrap();
        assert!(!set.is_materialized());
        assert_eq!(set.iter().count() as u128, 30 + binomial(30, 2));
        let first: Vec<_> = set.iter().take(3).map(|g| g.indices()).collect();
        assert_eq!(first, vec![vec![1], vec![1, 2], vec![1, 3]]);
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(enumerate_combinations(0, 3, CombinationMode::Full).is_err());
        assert!(enumerate_combinations(3, 0, CombinationMode::Lite).is_err());
    }

    #[test]
    fn index_combination_validation() {
        assert!(IndexCombination::new(&[]).is_err());
        assert!(IndexCombination::new(&[0, 1]).is_err());
        assert!(IndexCombination::new(&[2, 2]).is_err());
        assert!(IndexCombination::new(&[3, 1]).is_err());
        let g = IndexCombination::new(&[1, 4]).unwrap();
        assert_eq!(g.zero_based(), &[0, 3]);
        assert_eq!(alloc::format!("{g}"), "(1,4)");
    }

    #[test]
    fn select_sub_examples() {
        let s = sys(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]], &[1.0, 2.0, 3.0]);
        let (a, b) = select_sub(&s, &IndexCombination::new(&[1, 3]).unwrap()).unwrap();
        assert_eq!(a, Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]).unwrap());
        assert_eq!(&*b, &[1.0, 3.0]);

        let (a, b) = select_sub(&s, &IndexCombination::new(&[1, 2, 3]).unwrap()).unwrap();
        assert_eq!(&a, s.a());
        assert_eq!(&b, s.b());

        let (a, _) = select_sub(&s, &IndexCombination::new(&[2]).unwrap()).unwrap();
        assert_eq!(a, Matrix::from_rows(&[[0.0, 1.0]]).unwrap());

        assert!(select_sub(&s, &IndexCombination::new(&[4]).unwrap()).is_err());
    }

    #[test]
    fn violation_examples() {
        let s = sys(&[&[1.0]], &[0.0]);
        assert_eq!(&*violation(&s, &[2.0]).unwrap(), &[2.0]);
        let s = sys(&[&[-1.0]], &[0.0]);
        assert_eq!(&*violation(&s, &[2.0]).unwrap(), &[0.0]);
        let s = sys(&[&[1.0, 0.0], &[0.0, 1.0]], &[1.0, 1.0]);
        assert_eq!(&*violation(&s, &[0.5, -3.0]).unwrap(), &[0.0, 0.0]);
        assert!(violation(&s, &[0.5]).is_err());
    }

    #[test]
    fn violation_stats() {
        let mut st = ViolationStats::from_residual(&[0.0, 2.0, 0.0, 1.0]);
        assert_eq!(st.max, 2.0);
        assert_eq!(st.mean(), 0.75);
        assert_eq!(st.fraction_positive(), 0.5);
        st.merge(&ViolationStats::from_residual(&[4.0]));
        assert_eq!(st.max, 4.0);
        assert_eq!(st.count, 5);
    }

    #[test]
    fn system_shape_checked() {
        assert!(ConstraintSystem::new(Matrix::zeros(2, 2), Vector::zeros(3)).is_err());
        assert!(ConstraintSystem::new(Matrix::zeros(0, 2), Vector::zeros(0)).is_err());
    }
}
