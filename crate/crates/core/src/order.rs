//! Empirical convergence order.

use crate::driver::{propagate, Stepper};
use crate::error::{Error, Result};
use crate::state::{max_norm, State};

/// Where the error of a run is measured against.
#[derive(Debug, Clone)]
pub enum Reference {
    /// Known solution at the final time.
    Exact(State),
    /// Computed with the same stepper at `h_min / 100`.
    Computed,
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Errors at the final time `t_end` for each step size. Each `h` must divide
/// `t_end` into an integer number of steps (to within 1e-9 relative).
pub fn final_time_errors(
    stepper: &dyn Stepper,
    x0: &State,
    t_end: f64,
    h_list: &[f64],
    reference: &Reference,
) -> Result<Vec<f64>> {
    let steps = |h: f64| -> Result<usize> {
        let n = (t_end / h).round();
        if n < 1.0 || ((n * h - t_end) / t_end).abs() > 1e-9 {
            return Err(Error::invalid(format!("step {h} does not divide the interval {t_end}")));
        }
        Ok(n as usize)
    };
    let exact = match reference {
        Reference::Exact(x) => x.clone(),
        Reference::Computed => {
            let h_min = h_list.iter().cloned().fold(f64::INFINITY, f64::min);
            let h_ref = h_min / 100.0;
            propagate(stepper, x0, 0.0, h_ref, steps(h_ref)?)?
        }
    };
    h_list
        .iter()
        .map(|&h| {
            let x = propagate(stepper, x0, 0.0, h, steps(h)?)?;
            Ok(max_norm(&(x - &exact)))
        })
        .collect()
}

/// Observed order: the least-squares slope of `log(error)` against `log(h)`.
///
/// Fails with [`Error::OrderSaturated`] when the error at the largest step is
/// already below `100 ε`, since no slope can be read off round-off.
pub fn observed_order(
    stepper: &dyn Stepper,
    x0: &State,
    t_end: f64,
    h_list: &[f64],
    reference: &Reference,
) -> Result<f64> {
    if h_list.len() < 3 {
        return Err(Error::invalid("need at least three step sizes"));
    }
    let errors = final_time_errors(stepper, x0, t_end, h_list, reference)?;
    order_from_errors(h_list, &errors)
}

/// Slope fit for precomputed `(h, error)` pairs with the same saturation rule.
pub fn order_from_errors(h_list: &[f64], errors: &[f64]) -> Result<f64> {
    let (imax, _) = h_list
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bh), (i, &h)| if h > bh { (i, h) } else { (bi, bh) });
    if errors[imax] < 100.0 * f64::EPSILON {
        return Err(Error::OrderSaturated { error: errors[imax] });
    }
    if errors.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::OrderSaturated { error: 0.0 });
    }
    let lx: Vec<f64> = h_list.iter().map(|h| h.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    Ok(fit_slope(&lx, &ly))
}
