//! Central finite differences.

use nalgebra::{DMatrix, DVector};

use crate::state::{max_norm, State};

/// Default central-difference step: `eps^(1/3) * max(1, ‖x‖∞)`.
pub fn default_fd_step(x: &State) -> f64 {
    f64::EPSILON.cbrt() * max_norm(x).max(1.0)
}

/// Central-difference Jacobian of `map` at `x`. Column `j` holds
/// `(map(x + δe_j) - map(x - δe_j)) / 2δ`, with `2δ` taken as the
/// representable difference of the two abscissae.
pub fn fd_jacobian<F>(map: F, x: &State, delta: Option<f64>) -> DMatrix<f64>
where
    F: Fn(&State) -> State,
{
    let delta = delta.unwrap_or_else(|| default_fd_step(x));
    let n = x.len();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut xp = x.clone();
    for j in 0..n {
        let (hi, lo) = (x[j] + delta, x[j] - delta);
        xp[j] = hi;
        let fp = map(&xp);
        xp[j] = lo;
        let fm = map(&xp);
        xp[j] = x[j];
        cols.push((fp - fm) / (hi - lo));
    }
    if cols.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    DMatrix::from_columns(&cols)
}

/// Same as [`fd_jacobian`] for maps that can fail; the first failure is returned.
pub fn try_fd_jacobian<F, E>(map: F, x: &State, delta: Option<f64>) -> Result<DMatrix<f64>, E>
where
    F: Fn(&State) -> Result<State, E>,
{
    let delta = delta.unwrap_or_else(|| default_fd_step(x));
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut xp = x.clone();
    for j in 0..n {
        let (hi, lo) = (x[j] + delta, x[j] - delta);
        xp[j] = hi;
        let fp = map(&xp)?;
        xp[j] = lo;
        let fm = map(&xp)?;
        xp[j] = x[j];
        cols.push((fp - fm) / (hi - lo));
    }
    if cols.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(f: F, x: &State, delta: Option<f64>) -> State
where
    F: Fn(&State) -> f64,
{
    let delta = delta.unwrap_or_else(|| default_fd_step(x));
    let mut xp = x.clone();
    DVector::from_fn(x.len(), |j, _| {
        let (hi, lo) = (x[j] + delta, x[j] - delta);
        xp[j] = hi;
        let fp = f(&xp);
        xp[j] = lo;
        let fm = f(&xp);
        xp[j] = x[j];
        (fp - fm) / (hi - lo)
    })
}

/// Central-difference partial derivative of a scalar function in coordinate `i`.
pub fn fd_partial<F>(f: F, x: &State, i: usize, delta: Option<f64>) -> f64
where
    F: Fn(&State) -> f64,
{
    let delta = delta.unwrap_or_else(|| default_fd_step(x));
    let mut xp = x.clone();
    let (hi, lo) = (x[i] + delta, x[i] - delta);
    xp[i] = hi;
    let fp = f(&xp);
    xp[i] = lo;
    let fm = f(&xp);
    (fp - fm) / (hi - lo)
}
