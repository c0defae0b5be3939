//! Volume-preserving integration of divergence-free vector fields: splitting
//! into two-dimensional divergence-free fields, and triangular (Shang–Quispel)
//! maps that are implicit in one variable only.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::composition::{Composition, CompositionScheme, Part, SplitProblem};
use crate::driver::Stepper;
use crate::error::{Error, Result};
use crate::fd::{fd_partial, try_fd_jacobian};
use crate::polynomial::{Polynomial, PolynomialVectorField};
use crate::problem::{FnField, VectorField};
use crate::solver::{scalar_root, SolverSettings};
use crate::state::{state, State};
use crate::symplectic::RungeKutta;

/// Solver settings used inside volume-preserving sub-steps. The volume check
/// differentiates the step map numerically, so solver noise must sit well
/// below the finite-difference step.
pub fn tight_settings() -> SolverSettings {
    SolverSettings::default().with_tolerance(1e-14)
}

type ScalarFn = dyn Fn(&State) -> f64 + Send + Sync;

/// A divergence-free field in 3D with the antiderivative `P = ∫ u_x dy`.
#[derive(Clone)]
pub struct DivergenceFree3D {
    field: Arc<dyn VectorField>,
    antiderivative: Arc<ScalarFn>,
    polynomial: Option<(PolynomialVectorField, Polynomial)>,
}

impl fmt::Debug for DivergenceFree3D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DivergenceFree3D")
            .field("polynomial", &self.polynomial.as_ref().map(|p| &p.0))
            .finish()
    }
}

fn fd_divergence(field: &dyn VectorField, x: &State) -> f64 {
    (0..field.dim())
        .map(|i| fd_partial(|y: &State| field.eval(0.0, y)[i], x, i, None))
        .sum()
}

impl DivergenceFree3D {
    /// Polynomial field; the antiderivative is computed term by term.
    pub fn from_polynomial(field: PolynomialVectorField) -> Result<Self> {
        if field.components().len() != 3 {
            return Err(Error::invalid("expected a 3D field"));
        }
        let div = field.divergence();
        if !div.is_zero() {
            return Err(Error::invalid(format!("field is not divergence-free: ∇·f = {div}")));
        }
        let p = field.component(0).partial(0).antiderivative(1);
        let p2 = p.clone();
        Ok(DivergenceFree3D {
            field: Arc::new(field.clone()),
            antiderivative: Arc::new(move |x: &State| p2.eval(x.as_slice())),
            polynomial: Some((field, p)),
        })
    }

    /// General field with a user-supplied `P` satisfying `∂P/∂y = u_x`; both the
    /// divergence and the antiderivative are checked by finite differences at
    /// random points in `[-1, 1]³`.
    pub fn new(
        field: impl VectorField + 'static,
        antiderivative: impl Fn(&State) -> f64 + Send + Sync + 'static,
        seed: u64,
    ) -> Result<Self> {
        if field.dim() != 3 {
            return Err(Error::invalid("expected a 3D field"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let x = state(&[
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            let div = fd_divergence(&field, &x);
            let scale = field.eval(0.0, &x).amax().max(1.0);
            if div.abs() > 1e-6 * scale {
                return Err(Error::invalid(format!("field is not divergence-free (∇·f ≈ {div:.2e})")));
            }
            let ux = fd_partial(|y: &State| field.eval(0.0, y)[0], &x, 0, None);
            let py = fd_partial(&antiderivative, &x, 1, None);
            if (ux - py).abs() > 1e-6 * scale {
                return Err(Error::invalid("antiderivative does not satisfy ∂P/∂y = u_x"));
            }
        }
        Ok(DivergenceFree3D {
            field: Arc::new(field),
            antiderivative: Arc::new(antiderivative),
            polynomial: None,
        })
    }

    pub fn field(&self) -> &dyn VectorField {
        self.field.as_ref()
    }

    pub fn antiderivative(&self, x: &State) -> f64 {
        (self.antiderivative)(x)
    }
}

/// `A = (u, −P, 0)` and `B = (0, v + P, w)`.
pub fn vp_split(field: &DivergenceFree3D) -> (Arc<dyn VectorField>, Arc<dyn VectorField>) {
    if let Some((poly, p)) = &field.polynomial {
        let c = poly.components();
        let a = PolynomialVectorField::new(vec![c[0].clone(), p.scale(-1.0), Polynomial::zero(3)]).expect("3D");
        let b = PolynomialVectorField::new(vec![Polynomial::zero(3), c[1].add(p), c[2].clone()]).expect("3D");
        return (Arc::new(a), Arc::new(b));
    }
    let (fa, pa) = (field.field.clone(), field.antiderivative.clone());
    let (fb, pb) = (field.field.clone(), field.antiderivative.clone());
    let a = FnField::autonomous(3, move |x| {
        let u = fa.eval(0.0, x)[0];
        state(&[u, -pa(x), 0.0])
    });
    let b = FnField::autonomous(3, move |x| {
        let f = fb.eval(0.0, x);
        state(&[0.0, f[1] + pb(x), f[2]])
    });
    (Arc::new(a), Arc::new(b))
}

/// Split an `n`-dimensional divergence-free polynomial field into `n − 1`
/// fields, each moving only a consecutive coordinate pair and each
/// divergence-free.
pub fn vp_split_polynomial(field: &PolynomialVectorField) -> Result<Vec<PolynomialVectorField>> {
    let n = field.components().len();
    if n < 2 {
        return Err(Error::invalid("need at least two dimensions"));
    }
    let div = field.divergence();
    if !div.is_zero() {
        return Err(Error::invalid(format!("field is not divergence-free: ∇·f = {div}")));
    }
    let mut rest = field.clone();
    let mut parts = Vec::with_capacity(n - 1);
    for k in 0..n - 2 {
        let fk = rest.component(k).clone();
        let p = fk.partial(k).antiderivative(k + 1);
        let mut comps = vec![Polynomial::zero(n); n];
        comps[k] = fk;
        comps[k + 1] = p.scale(-1.0);
        let part = PolynomialVectorField::new(comps)?;
        rest = rest.sub(&part);
        parts.push(part);
    }
    parts.push(rest);
    Ok(parts)
}

/// Symmetric composition of the split parts, each advanced by the implicit
/// midpoint rule: `A₁(h/2) ⋯ A_{m−1}(h/2) A_m(h) A_{m−1}(h/2) ⋯ A₁(h/2)`.
pub fn vp_splitting_integrator(parts: Vec<Arc<dyn VectorField>>) -> Result<Composition> {
    let m = parts.len();
    let midpoint = RungeKutta::implicit_midpoint().with_settings(tight_settings());
    let split = SplitProblem::new(
        parts
            .into_iter()
            .map(|f| Part::with_stepper(f, midpoint.clone()))
            .collect(),
    )?;
    let mut entries: Vec<(usize, f64)> = (0..m - 1).map(|i| (i, 0.5)).collect();
    entries.push((m - 1, 1.0));
    entries.extend((0..m - 1).rev().map(|i| (i, 0.5)));
    let scheme = CompositionScheme::new("vp-splitting", entries, 2)?;
    Composition::new(scheme, split)
}

/// One step of the two-part splitting integrator for a 3D field.
pub fn vp_splitting_step(field: &DivergenceFree3D, x: &State, h: f64) -> Result<State> {
    let (a, b) = vp_split(field);
    vp_splitting_integrator(vec![a, b])?.step(0.0, x, h)
}

type G1 = dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync;

/// Map of the triangular form
///
/// ```text
/// x₁  = g₁(x₁′, x₂, x₃)
/// x₂′ = g₂(x₁′, x₂, x₃)
/// x₃′ = g₃(x₁′, x₂′, x₃)
/// ```
///
/// where each `g` also receives the step size as its last argument.
#[derive(Clone)]
pub struct TriangularVpMap {
    pub g1: Arc<G1>,
    pub g2: Arc<G1>,
    pub g3: Arc<G1>,
    pub h: f64,
    pub settings: SolverSettings,
}

impl fmt::Debug for TriangularVpMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TriangularVpMap").field("h", &self.h).finish()
    }
}

impl TriangularVpMap {
    pub fn new(
        h: f64,
        g1: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        g2: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        g3: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        TriangularVpMap {
            g1: Arc::new(g1),
            g2: Arc::new(g2),
            g3: Arc::new(g3),
            h,
            settings: SolverSettings::default().with_tolerance(1e-13),
        }
    }

    /// The volume-preserving integrator for
    /// `ẋ₁ = x₂ + x₁² + x₃³`, `ẋ₂ = x₃ + x₁x₂ + x₁⁴`, `ẋ₃ = x₁ − 3x₁x₃ + x₂⁵`.
    pub fn example(h: f64) -> Self {
        Self::new(
            h,
            |x1p, x2, x3, h| x1p - h * (x2 + x1p * x1p + x3.powi(3)) - h * h * x1p.powi(3),
            example_g2,
            example_g3,
        )
    }

    /// Consistent but not volume preserving: the `h²x₁′³` term is dropped.
    pub fn example_without_cubic(h: f64) -> Self {
        Self::new(h, |x1p, x2, x3, h| x1p - h * (x2 + x1p * x1p + x3.powi(3)), example_g2, example_g3)
    }

    pub fn with_step(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    /// Solve the first relation for `x₁′`, then evaluate the explicit ones.
    pub fn apply(&self, x: &State) -> Result<State> {
        let (x1, x2, x3, h) = (x[0], x[1], x[2], self.h);
        let g1 = &self.g1;
        let x1p = scalar_root(|z| g1(z, x2, x3, h) - x1, x1, &self.settings)?;
        // The root must lie on the branch that continues the identity at h = 0,
        // where x₁ increases with x₁′.
        let slope = fd_partial(|z: &State| g1(z[0], x2, x3, h), &state(&[x1p]), 0, None);
        if slope <= 0.0 {
            return Err(Error::StepSize {
                h,
                reason: format!("implicit relation has no root on the consistent branch (∂x₁/∂x₁′ = {slope:.3e})"),
            });
        }
        let x2p = (self.g2)(x1p, x2, x3, h);
        let x3p = (self.g3)(x1p, x2p, x3, h);
        Ok(state(&[x1p, x2p, x3p]))
    }
}

fn example_g2(x1p: f64, x2: f64, x3: f64, h: f64) -> f64 {
    x2 + h * (x3 + x1p * x2 + x1p.powi(4))
}

fn example_g3(x1p: f64, x2p: f64, x3: f64, h: f64) -> f64 {
    x3 + h * (x1p - 3.0 * x1p * x3 + x2p.powi(5))
}

impl Stepper for TriangularVpMap {
    fn step(&self, _t: f64, x: &State, h: f64) -> Result<State> {
        if h == self.h {
            self.apply(x)
        } else {
            self.clone().with_step(h).apply(x)
        }
    }
}

/// Step of the worked triangular integrator.
pub fn shang_quispel_example_step(x: &State, h: f64) -> Result<State> {
    TriangularVpMap::example(h).apply(x)
}

/// The example field itself, `(x₂ + x₁² + x₃³, x₃ + x₁x₂ + x₁⁴, x₁ − 3x₁x₃ + x₂⁵)`.
pub fn example_field() -> PolynomialVectorField {
    PolynomialVectorField::new(vec![
        Polynomial::new(3, &[(1.0, &[0, 1, 0]), (1.0, &[2, 0, 0]), (1.0, &[0, 0, 3])]).expect("3D"),
        Polynomial::new(3, &[(1.0, &[0, 0, 1]), (1.0, &[1, 1, 0]), (1.0, &[4, 0, 0])]).expect("3D"),
        Polynomial::new(3, &[(1.0, &[1, 0, 0]), (-3.0, &[1, 0, 1]), (1.0, &[0, 5, 0])]).expect("3D"),
    ])
    .expect("3D")
}

/// `|∂x₁/∂x₁′ − (∂x₂′/∂x₂)(∂x₃′/∂x₃)|` at the point reached from `x`, with
/// the partials taken in the map's own variables by central differences.
pub fn triangular_vp_condition_defect(map: &TriangularVpMap, x: &State) -> Result<f64> {
    let y = map.apply(x)?;
    let (x1p, x2p, x2, x3, h) = (y[0], y[1], x[1], x[2], map.h);
    let at = state(&[x1p, x2, x3]);
    let d1 = fd_partial(|z: &State| (map.g1)(z[0], z[1], z[2], h), &at, 0, None);
    let d2 = fd_partial(|z: &State| (map.g2)(z[0], z[1], z[2], h), &at, 1, None);
    let at3 = state(&[x1p, x2p, x3]);
    let d3 = fd_partial(|z: &State| (map.g3)(z[0], z[1], z[2], h), &at3, 2, None);
    Ok((d1 - d2 * d3).abs())
}

/// `| |det DΦ(x)| − 1 |` with `DΦ` from central differences.
pub fn volume_defect<F>(step_map: F, x: &State) -> Result<f64>
where
    F: Fn(&State) -> Result<State>,
{
    let j = try_fd_jacobian(step_map, x, None)?;
    Ok((j.determinant().abs() - 1.0).abs())
}
