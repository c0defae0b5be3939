//! Nonlinear equation solvers used by the implicit schemes.
//!
//! Every implicit step in the crate goes through [`solve_implicit`]: plain
//! fixed-point iteration first, Newton from the original guess when that
//! fails. Conservation properties of the implicit methods only hold to the
//! solver tolerance, so the default is tight (1e-12, 50 iterations).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{is_finite, max_norm, State};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Finite-difference step; `None` uses `eps^(1/3) * max(1, ‖x‖∞)`.
    pub fd_step: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tolerance: 1e-12,
            max_iterations: 50,
            fd_step: None,
        }
    }
}

impl SolverSettings {
    pub fn new(tolerance: f64, max_iterations: usize) -> Result<Self> {
        let s = SolverSettings {
            tolerance,
            max_iterations,
            fd_step: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance >= 10.0 * f64::EPSILON) {
            return Err(Error::invalid(format!(
                "solver tolerance {} is below 10 machine epsilons",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be positive"));
        }
        if let Some(d) = self.fd_step {
            if !(d > 0.0) {
                return Err(Error::invalid("finite-difference step must be positive"));
            }
        }
        Ok(())
    }
}

/// Solve `x = Φ(x)` by successive substitution.
///
/// Stops once the update `‖Φ(x) − x‖∞` falls below the tolerance.
pub fn fixed_point_solve<F>(map: F, guess: &State, settings: &SolverSettings) -> Result<State>
where
    F: Fn(&State) -> Result<State>,
{
    let mut x = guess.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..settings.max_iterations {
        let next = map(&x)?;
        if !is_finite(&next) {
            return Err(Error::NonConvergence {
                iterations: settings.max_iterations,
                residual: f64::INFINITY,
            });
        }
        residual = max_norm(&(&next - &x));
        x = next;
        if residual <= settings.tolerance {
            return Ok(x);
        }
    }
    Err(Error::NonConvergence {
        iterations: settings.max_iterations,
        residual,
    })
}

/// Solve `F(x) = 0` by Newton's method. Without an analytic Jacobian a
/// central-difference one is used.
pub fn newton_solve<F>(
    residual: F,
    guess: &State,
    settings: &SolverSettings,
    jacobian: Option<&dyn Fn(&State) -> DMatrix<f64>>,
) -> Result<State>
where
    F: Fn(&State) -> Result<State>,
{
    let mut x = guess.clone();
    let mut r = residual(&x)?;
    let mut rn = max_norm(&r);
    for _ in 0..settings.max_iterations {
        if rn <= settings.tolerance {
            return Ok(x);
        }
        let jac = match jacobian {
            Some(j) => j(&x),
            None => crate::fd::try_fd_jacobian(&residual, &x, settings.fd_step)?,
        };
        let dx = jac
            .lu()
            .solve(&r)
            .ok_or_else(|| Error::Singular("Newton linearization is singular".into()))?;
        if !is_finite(&dx) {
            return Err(Error::Singular("Newton update is not finite".into()));
        }
        x -= dx;
        r = residual(&x)?;
        rn = max_norm(&r);
        if !rn.is_finite() {
            break;
        }
    }
    if rn <= settings.tolerance {
        return Ok(x);
    }
    Err(Error::NonConvergence {
        iterations: settings.max_iterations,
        residual: rn,
    })
}

/// Solve `x = Φ(x)`: fixed-point iteration with a Newton fallback on
/// `x − Φ(x) = 0`.
pub fn solve_implicit<F>(map: F, guess: &State, settings: &SolverSettings) -> Result<State>
where
    F: Fn(&State) -> Result<State>,
{
    match fixed_point_solve(&map, guess, settings) {
        Ok(x) => Ok(x),
        Err(Error::NonConvergence { .. }) => {
            let residual = |x: &State| map(x).map(|phi| x - phi);
            newton_solve(residual, guess, settings, None)
        }
        Err(e) => Err(e),
    }
}

/// Scalar root finding by Newton's method safeguarded with bisection.
///
/// A bracket is grown around `guess` whenever a Newton iterate leaves it or
/// stalls; the returned root satisfies `|F(x)| ≤ tolerance` or the bracket
/// has shrunk to round-off.
pub fn scalar_root<F>(f: F, guess: f64, settings: &SolverSettings) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let tol = settings.tolerance;
    let d = |x: f64| {
        let delta = f64::EPSILON.cbrt() * x.abs().max(1.0);
        (f(x + delta) - f(x - delta)) / (2.0 * delta)
    };

    // Plain Newton first; it converges in a handful of steps on the smooth
    // scalar equations met here.
    let mut x = guess;
    let mut fx = f(x);
    for _ in 0..settings.max_iterations {
        if fx.abs() <= tol {
            return Ok(x);
        }
        let dfx = d(x);
        if dfx == 0.0 || !dfx.is_finite() {
            break;
        }
        let next = x - fx / dfx;
        if !next.is_finite() || (next - guess).abs() > 1e3 * guess.abs().max(1.0) {
            break;
        }
        x = next;
        fx = f(x);
    }
    if fx.abs() <= tol {
        return Ok(x);
    }

    // Bisection fallback: expand a bracket around the guess.
    let f0 = f(guess);
    let mut width = 1e-3 * guess.abs().max(1.0);
    let mut bracket = None;
    for _ in 0..60 {
        let (a, b) = (guess - width, guess + width);
        let (fa, fb) = (f(a), f(b));
        if fa * f0 <= 0.0 {
            bracket = Some((a, guess, fa));
            break;
        }
        if fb * f0 <= 0.0 {
            bracket = Some((guess, b, f0));
            break;
        }
        width *= 2.0;
    }
    let (mut a, mut b, mut fa) = bracket.ok_or(Error::NonConvergence {
        iterations: settings.max_iterations,
        residual: f0.abs(),
    })?;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm.abs() <= tol || (b - a) <= 4.0 * f64::EPSILON * m.abs().max(1.0) {
            return Ok(m);
        }
        if fa * fm <= 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
    }
    let m = 0.5 * (a + b);
    Err(Error::NonConvergence {
        iterations: 200,
        residual: f(m).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::state;

    #[test]
    fn constant_map_converges_immediately() {
        let c = state(&[1.5, -2.0]);
        let cc = c.clone();
        let x = fixed_point_solve(|_| Ok(cc.clone()), &state(&[0.0, 0.0]), &Default::default())
            .unwrap();
        assert_eq!(x, c);
    }

    #[test]
    fn affine_contraction() {
        let s = SolverSettings::default();
        let map = |x: &State| Ok(x.map(|v| 0.5 * v + 1.0));
        let x = fixed_point_solve(map, &state(&[0.0]), &s).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-11);
        let res = max_norm(&(&x - map(&x).unwrap()));
        assert!(res <= s.tolerance);
    }

    #[test]
    fn expanding_map_fails() {
        let err = fixed_point_solve(
            |x: &State| Ok(x.map(|v| 2.0 * v + 1.0)),
            &state(&[0.0]),
            &Default::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
    }

    #[test]
    fn newton_linear_and_sqrt2() {
        let s = SolverSettings::default();
        let x = newton_solve(|x: &State| Ok(x.map(|v| v - 3.0)), &state(&[0.0]), &s, None).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-12);
        let r = |x: &State| Ok(x.map(|v| v * v - 2.0));
        let x = newton_solve(r, &state(&[1.0]), &s, None).unwrap();
        assert!((x[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!(max_norm(&r(&x).unwrap()) <= s.tolerance);
    }

    #[test]
    fn newton_without_real_root_fails() {
        let res = newton_solve(
            |x: &State| Ok(x.map(|v| v * v + 1.0)),
            &state(&[1.0]),
            &Default::default(),
            None,
        );
        assert!(res.is_err());
    }

    #[test]
    fn settings_validation() {
        assert!(SolverSettings::new(1e-16, 10).is_err());
        assert!(SolverSettings::new(1e-12, 0).is_err());
        assert!(SolverSettings::new(1e-12, 10).is_ok());
    }

    #[test]
    fn scalar_root_cubic() {
        let s = SolverSettings::default().with_tolerance(1e-13);
        let r = scalar_root(|x| x * x * x - 2.0, 1.0, &s).unwrap();
        assert!((r - 2f64.cbrt()).abs() < 1e-12);
    }
}
