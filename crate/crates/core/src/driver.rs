//! The step loop.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::problem::VectorField;
use crate::state::{is_finite, State, Trajectory};

/// A one-step map `x_n ↦ x_{n+1}` bound to its problem.
pub trait Stepper: Send + Sync {
    fn step(&self, t: f64, x: &State, h: f64) -> Result<State>;
}

impl<F> Stepper for F
where
    F: Fn(f64, &State, f64) -> Result<State> + Send + Sync,
{
    fn step(&self, t: f64, x: &State, h: f64) -> Result<State> {
        self(t, x, h)
    }
}

/// A one-step method that works on any vector field.
pub trait FieldMethod: Send + Sync {
    fn name(&self) -> &str;
    fn step(&self, field: &dyn VectorField, t: f64, x: &State, h: f64) -> Result<State>;
}

/// A [`FieldMethod`] paired with a concrete field.
pub struct Bound<M, F> {
    pub method: M,
    pub field: F,
}

impl<M, F> Bound<M, F> {
    pub fn new(method: M, field: F) -> Self {
        Bound { method, field }
    }
}

impl<M: FieldMethod, F: VectorField> Stepper for Bound<M, F> {
    fn step(&self, t: f64, x: &State, h: f64) -> Result<State> {
        self.method.step(&self.field, t, x, h)
    }
}

type ObserverFn = dyn Fn(f64, &State) -> f64 + Send + Sync;

/// A named scalar evaluated at every state of a trajectory.
#[derive(Clone)]
pub struct Observer {
    pub name: String,
    f: Arc<ObserverFn>,
}

impl Observer {
    pub fn new(name: impl Into<String>, f: impl Fn(f64, &State) -> f64 + Send + Sync + 'static) -> Self {
        Observer {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    /// Observer that ignores time.
    pub fn of_state(name: impl Into<String>, f: impl Fn(&State) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(name, move |_, x| f(x))
    }

    pub fn eval(&self, t: f64, x: &State) -> f64 {
        (self.f)(t, x)
    }
}

impl fmt::Debug for Observer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observer").field("name", &self.name).finish()
    }
}

fn observe(observers: &[Observer], t: f64, x: &State) -> Vec<(String, f64)> {
    observers
        .iter()
        .map(|o| (o.name.clone(), o.eval(t, x)))
        .collect()
}

/// Advance `n_steps` times from `(t0, x0)` on the uniform grid `t_n = t0 + n h`.
///
/// Every state is checked for finiteness; failures carry the index of the
/// step that produced them.
pub fn solve(
    stepper: &dyn Stepper,
    x0: &State,
    t0: f64,
    h: f64,
    n_steps: usize,
    observers: &[Observer],
) -> Result<Trajectory> {
    if h == 0.0 || !h.is_finite() {
        return Err(Error::invalid(format!("step size must be finite and nonzero, got {h}")));
    }
    if !is_finite(x0) {
        return Err(Error::NonFinite { step: 0 });
    }
    let mut traj = Trajectory::new();
    traj.push(t0, x0.clone(), &observe(observers, t0, x0))?;
    let mut x = x0.clone();
    for n in 0..n_steps {
        let t = t0 + n as f64 * h;
        let next = stepper.step(t, &x, h).map_err(|e| e.at_step(n + 1))?;
        if !is_finite(&next) {
            return Err(Error::NonFinite { step: n + 1 });
        }
        let t_next = t0 + (n + 1) as f64 * h;
        traj.push(t_next, next.clone(), &observe(observers, t_next, &next))?;
        x = next;
    }
    Ok(traj)
}

/// Final state after `n_steps` steps, without recording the trajectory.
pub fn propagate(stepper: &dyn Stepper, x0: &State, t0: f64, h: f64, n_steps: usize) -> Result<State> {
    let mut x = x0.clone();
    for n in 0..n_steps {
        let t = t0 + n as f64 * h;
        x = stepper.step(t, &x, h).map_err(|e| e.at_step(n + 1))?;
        if !is_finite(&x) {
            return Err(Error::NonFinite { step: n + 1 });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::state;

    #[test]
    fn zero_field_gives_constant_trajectory() {
        let stepper = |_t: f64, x: &State, _h: f64| Ok(x.clone());
        let x0 = state(&[1.0, -2.0]);
        let traj = solve(&stepper, &x0, 0.0, 0.1, 10, &[]).unwrap();
        assert_eq!(traj.len(), 11);
        assert!(traj.states().iter().all(|x| *x == x0));
    }

    #[test]
    fn exact_exponential_one_step() {
        let stepper = |_t: f64, x: &State, h: f64| Ok(x * h.exp());
        let traj = solve(&stepper, &state(&[1.0]), 0.0, 0.1, 1, &[]).unwrap();
        assert!((traj.last().unwrap()[0] - 1.1051709180756477).abs() < 1e-15);
        assert!((traj.times()[1] - 0.1).abs() < 1e-16);
    }

    #[test]
    fn failure_names_the_step() {
        let stepper = |t: f64, x: &State, _h: f64| {
            if t > 0.25 {
                Err(Error::NonConvergence {
                    iterations: 50,
                    residual: 1.0,
                })
            } else {
                Ok(x.clone())
            }
        };
        let err = solve(&stepper, &state(&[1.0]), 0.0, 0.1, 10, &[]).unwrap_err();
        assert_eq!(err.step(), Some(4));
        assert!(err.to_string().contains("residual"));
    }

    #[test]
    fn non_finite_state_is_reported() {
        let stepper = |_t: f64, x: &State, _h: f64| Ok(x * 1e300);
        let err = solve(&stepper, &state(&[1.0]), 0.0, 0.1, 5, &[]).unwrap_err();
        assert_eq!(err, Error::NonFinite { step: 2 });
    }

    #[test]
    fn observers_sampled_everywhere() {
        let stepper = |_t: f64, x: &State, h: f64| Ok(x * (1.0 + h));
        let obs = [Observer::of_state("x", |x| x[0]), Observer::new("t", |t, _| t)];
        let traj = solve(&stepper, &state(&[1.0]), 0.0, -0.5, 3, &obs).unwrap();
        assert_eq!(traj.channel("x").unwrap().len(), 4);
        assert_eq!(traj.channel("t").unwrap(), &[0.0, -0.5, -1.0, -1.5]);
    }

    #[test]
    fn zero_step_rejected() {
        let stepper = |_t: f64, x: &State, _h: f64| Ok(x.clone());
        assert!(solve(&stepper, &state(&[1.0]), 0.0, 0.0, 1, &[]).is_err());
    }
}
