//! The three benchmark scenarios: piecewise-bounded regression, a learned
//! solver for a constrained nonconvex program, and a unicycle controller
//! filtered by control barrier functions.

pub mod piecewise;
pub mod solver;
pub mod unicycle;

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::constraint::{ConstraintSystem, ViolationStats};
use crate::error::{Error, Result};

/// Residuals at or below this are reported as zero. It equals the layer's
/// default feasibility slack.
pub const VIOLATION_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    Piecewise,
    Solver,
    Unicycle,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Piecewise, Scenario::Solver, Scenario::Unicycle];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Piecewise => "piecewise",
            Scenario::Solver => "solver",
            Scenario::Unicycle => "unicycle",
        }
    }

    /// `(n_in, m, n_out)` of the constraint provider.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Scenario::Piecewise => (1, 4, 1),
            Scenario::Solver => (solver::N_EQ, solver::N_INEQ + 2 * solver::N_EQ, solver::N_OUT),
            Scenario::Unicycle => (3, unicycle::M, 2),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown scenario `{s}`")))
    }
}

/// `max(0, A y - b)` with entries at or below [`VIOLATION_FLOOR`] set to 0.
pub fn reported_violation(sys: &ConstraintSystem, y: &[f64]) -> Result<Vec<f64>> {
    let mut r = sys.slack(y)?;
    for v in &mut r {
        if *v <= VIOLATION_FLOOR {
            *v = 0.0;
        }
    }
    Ok(r)
}

/// Accumulates [`reported_violation`] over a set of predictions.
pub fn violation_stats<'a>(
    pairs: impl IntoIterator<Item = (&'a ConstraintSystem, &'a [f64])>,
) -> Result<ViolationStats> {
    let mut stats = ViolationStats::default();
    for (sys, y) in pairs {
        stats.extend(&reported_violation(sys, y)?);
    }
    Ok(stats)
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
        };
        Self { mean, std }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Matrix, Vector};

    #[test]
    fn scenario_names_round_trip() {
        for sc in Scenario::ALL {
            assert_eq!(sc.name().parse::<Scenario>().unwrap(), sc);
        }
        assert!("pendulum".parse::<Scenario>().is_err());
    }

    #[test]
    fn floor_flushes_tiny_residuals() {
        let sys = ConstraintSystem::new(
            Matrix::from_rows(&[[1.0], [-1.0]]).unwrap(),
            Vector::new(alloc::vec![1.0, -1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(reported_violation(&sys, &[1.0 + 1e-12]).unwrap(), [0.0, 0.0]);
        let r = reported_violation(&sys, &[1.5]).unwrap();
        assert_eq!(r, [0.5, 0.0]);
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }
}
