//! Problem abstractions shared by every integrator family.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fd::fd_jacobian;
use crate::state::State;

/// A (possibly non-autonomous) vector field `x' = f(t, x)`.
///
/// Evaluation must be deterministic: the same input gives bitwise the same
/// output.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64, x: &State) -> State;

    /// Analytic Jacobian `f'(x)`, when the problem provides one.
    fn jacobian(&self, _t: f64, _x: &State) -> Option<DMatrix<f64>> {
        None
    }

    fn is_autonomous(&self) -> bool {
        true
    }
}

type FieldFn = dyn Fn(f64, &State) -> State + Send + Sync;
type JacFn = dyn Fn(f64, &State) -> DMatrix<f64> + Send + Sync;

/// Vector field backed by closures.
#[derive(Clone)]
pub struct FnField {
    dim: usize,
    f: Arc<FieldFn>,
    jac: Option<Arc<JacFn>>,
    autonomous: bool,
}

impl FnField {
    pub fn new(dim: usize, f: impl Fn(f64, &State) -> State + Send + Sync + 'static) -> Self {
        FnField {
            dim,
            f: Arc::new(f),
            jac: None,
            autonomous: true,
        }
    }

    /// Autonomous field `x' = f(x)`.
    pub fn autonomous(dim: usize, f: impl Fn(&State) -> State + Send + Sync + 'static) -> Self {
        Self::new(dim, move |_, x| f(x))
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(f64, &State) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jac = Some(Arc::new(jac));
        self
    }

    pub fn non_autonomous(mut self) -> Self {
        self.autonomous = false;
        self
    }
}

impl fmt::Debug for FnField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnField")
            .field("dim", &self.dim)
            .field("analytic_jacobian", &self.jac.is_some())
            .field("autonomous", &self.autonomous)
            .finish()
    }
}

impl VectorField for FnField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, x: &State) -> State {
        (self.f)(t, x)
    }

    fn jacobian(&self, t: f64, x: &State) -> Option<DMatrix<f64>> {
        self.jac.as_ref().map(|j| j(t, x))
    }

    fn is_autonomous(&self) -> bool {
        self.autonomous
    }
}

impl<T: VectorField + ?Sized> VectorField for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: f64, x: &State) -> State {
        (**self).eval(t, x)
    }
    fn jacobian(&self, t: f64, x: &State) -> Option<DMatrix<f64>> {
        (**self).jacobian(t, x)
    }
    fn is_autonomous(&self) -> bool {
        (**self).is_autonomous()
    }
}

/// Jacobian of a field: analytic when available, central differences otherwise.
pub fn field_jacobian_or_fd(field: &dyn VectorField, t: f64, x: &State) -> DMatrix<f64> {
    field
        .jacobian(t, x)
        .unwrap_or_else(|| fd_jacobian(|y: &State| field.eval(t, y), x, None))
}

type GFn = dyn Fn(&State) -> State + Send + Sync;
type UFn = dyn Fn(&State) -> f64 + Send + Sync;

/// Second-order system `y'' + Ω² y = g(y)` with symmetric positive
/// semidefinite frequency matrix Ω.
#[derive(Clone)]
pub struct SecondOrderProblem {
    omega: DMatrix<f64>,
    g: Arc<GFn>,
    potential: Option<Arc<UFn>>,
    /// Index at which the fast block starts (`q = [q0; q1]`).
    split: usize,
}

impl fmt::Debug for SecondOrderProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecondOrderProblem")
            .field("omega", &self.omega)
            .field("split", &self.split)
            .field("has_potential", &self.potential.is_some())
            .finish()
    }
}

impl SecondOrderProblem {
    pub fn new(
        omega: DMatrix<f64>,
        g: impl Fn(&State) -> State + Send + Sync + 'static,
    ) -> Result<Self> {
        if !omega.is_square() {
            return Err(Error::invalid("frequency matrix must be square"));
        }
        let asym = (&omega - omega.transpose()).abs().max();
        if asym > 1e-12 * omega.abs().max().max(1.0) {
            return Err(Error::invalid(format!(
                "frequency matrix is not symmetric (defect {asym:.2e})"
            )));
        }
        Ok(SecondOrderProblem {
            omega,
            g: Arc::new(g),
            potential: None,
            split: 0,
        })
    }

    /// Attach the potential `U` with `g = -∇U`. The pairing is checked against
    /// central differences at a few seeded random points.
    pub fn with_potential(
        mut self,
        u: impl Fn(&State) -> f64 + Send + Sync + 'static,
        seed: u64,
    ) -> Result<Self> {
        let n = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let g = (self.g)(&y);
            let grad = crate::fd::fd_gradient(&u, &y, None);
            let scale = g.amax().max(1.0);
            let defect = (&g + &grad).amax();
            if defect > 1e-6 * scale {
                return Err(Error::invalid(format!(
                    "g does not match -grad U (defect {defect:.2e})"
                )));
            }
        }
        self.potential = Some(Arc::new(u));
        Ok(self)
    }

    pub fn with_split(mut self, split: usize) -> Self {
        self.split = split;
        self
    }

    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn g(&self, y: &State) -> State {
        (self.g)(y)
    }

    pub fn potential(&self, y: &State) -> Option<f64> {
        self.potential.as_ref().map(|u| u(y))
    }

    /// `½‖ẏ‖² + ½ yᵀΩ²y + U(y)` when a potential is attached.
    pub fn energy(&self, y: &State, v: &State) -> Option<f64> {
        let u = self.potential(y)?;
        let oy = &self.omega * y;
        Some(0.5 * v.norm_squared() + 0.5 * oy.norm_squared() + u)
    }
}
