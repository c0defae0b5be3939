//! Kahan's discretisation of quadratic vector fields, its Runge–Kutta form,
//! and the modified energy and measure it conserves.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::driver::Stepper;
use crate::error::{Error, Result};
use crate::integral::Tensor3;
use crate::polynomial::{Polynomial, PolynomialVectorField};
use crate::problem::VectorField;
use crate::solver::{solve_implicit, SolverSettings};
use crate::state::{max_norm, State};

/// `f_i(x) = Σ_jk a_ijk x_j x_k + Σ_j b_ij x_j + c_i` with `a` symmetric in `j, k`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticVectorField {
    a: Tensor3,
    b: DMatrix<f64>,
    c: DVector<f64>,
}

impl QuadraticVectorField {
    pub fn new(a: Tensor3, b: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        let d = a.d;
        if b.nrows() != d || b.ncols() != d || c.len() != d {
            return Err(Error::invalid("tensor, matrix and vector dimensions differ"));
        }
        for i in 0..d {
            for j in 0..d {
                for k in 0..j {
                    if a.get(i, j, k) != a.get(i, k, j) {
                        return Err(Error::invalid(format!("a_{i}{j}{k} ≠ a_{i}{k}{j}")));
                    }
                }
            }
        }
        Ok(QuadraticVectorField { a, b, c })
    }

    /// Tensors read off a polynomial field of degree at most two.
    pub fn from_polynomial(field: &PolynomialVectorField) -> Result<Self> {
        let d = field.components().len();
        if field.degree() > 2 {
            return Err(Error::invalid(format!("field has degree {} > 2", field.degree())));
        }
        let mut a = Tensor3::zeros(d);
        let mut b = DMatrix::zeros(d, d);
        let mut c = DVector::zeros(d);
        for (i, p) in field.components().iter().enumerate() {
            for (e, coef) in p.terms() {
                let vars: Vec<usize> = e
                    .iter()
                    .enumerate()
                    .flat_map(|(j, &k)| std::iter::repeat_n(j, k as usize))
                    .collect();
                match vars.as_slice() {
                    [] => c[i] += coef,
                    [j] => b[(i, *j)] += coef,
                    [j, k] if j == k => a.set(i, *j, *j, a.get(i, *j, *j) + coef),
                    [j, k] => {
                        a.set(i, *j, *k, a.get(i, *j, *k) + 0.5 * coef);
                        a.set(i, *k, *j, a.get(i, *k, *j) + 0.5 * coef);
                    }
                    _ => unreachable!("degree checked above"),
                }
            }
        }
        Self::new(a, b, c)
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn a(&self) -> &Tensor3 {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    /// `A(x)_ik = Σ_j a_ijk x_j`.
    pub fn contracted(&self, x: &State) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, k| (0..d).map(|j| self.a.get(i, j, k) * x[j]).sum())
    }

    /// `f′(x)_ik = 2 Σ_j a_ijk x_j + b_ik`.
    pub fn field_jacobian(&self, x: &State) -> DMatrix<f64> {
        2.0 * self.contracted(x) + &self.b
    }

    fn resolvent(&self, x: &State, h: f64) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::identity(d, d) - (0.5 * h) * self.field_jacobian(x)
    }
}

impl VectorField for QuadraticVectorField {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn eval(&self, _t: f64, x: &State) -> State {
        self.contracted(x) * x + &self.b * x + &self.c
    }

    fn jacobian(&self, _t: f64, x: &State) -> Option<DMatrix<f64>> {
        Some(self.field_jacobian(x))
    }
}

pub fn field_jacobian(field: &QuadraticVectorField, x: &State) -> DMatrix<f64> {
    field.field_jacobian(x)
}

/// Pivots below this fraction of the largest matrix entry mark the Kahan
/// matrix as singular.
const SINGULAR_PIVOT: f64 = 1e-13;

/// One step of Kahan's method: the single linear solve
/// `(I − hA(x) − (h/2)B) x′ = x + (h/2)Bx + hc`.
pub fn kahan_step(field: &QuadraticVectorField, x: &State, h: f64) -> Result<State> {
    let d = field.dim();
    let m = DMatrix::identity(d, d) - h * field.contracted(x) - (0.5 * h) * field.b();
    let rhs = x + (0.5 * h) * (field.b() * x) + h * field.c();
    let lu = m.clone().lu();
    let u = lu.u();
    let scale = m.amax().max(1.0);
    let min_pivot = (0..d).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    let singular = || Error::StepSize {
        h,
        reason: "Kahan matrix I − hA(x) − (h/2)B is singular; try halving h".into(),
    };
    if min_pivot <= SINGULAR_PIVOT * scale {
        return Err(singular());
    }
    let out = lu.solve(&rhs).ok_or_else(singular)?;
    if !out.iter().all(|v| v.is_finite()) {
        return Err(singular());
    }
    Ok(out)
}

/// Kahan's method as a stepper.
#[derive(Debug, Clone)]
pub struct Kahan {
    pub field: QuadraticVectorField,
}

impl Stepper for Kahan {
    fn step(&self, _t: f64, x: &State, h: f64) -> Result<State> {
        kahan_step(&self.field, x, h)
    }
}

/// `(x′−x)/h = 2f((x+x′)/2) − ½f(x) − ½f(x′)`, solved iteratively.
pub fn kahan_rk_form_step(field: &dyn VectorField, x: &State, h: f64, settings: &SolverSettings) -> Result<State> {
    let f0 = field.eval(0.0, x);
    let x0 = x.clone();
    solve_implicit(
        |xp: &State| {
            let mid = (&x0 + xp) * 0.5;
            Ok(&x0 + h * (2.0 * field.eval(0.0, &mid) - 0.5 * &f0 - 0.5 * field.eval(0.0, xp)))
        },
        x,
        settings,
    )
}

type ScalarFn = dyn Fn(&State) -> f64 + Send + Sync;
type GradFn = dyn Fn(&State) -> State + Send + Sync;

/// `f = S∇H` with constant skew `S` and cubic `H`.
#[derive(Clone)]
pub struct CubicHamiltonianStructure {
    s: DMatrix<f64>,
    h: Arc<ScalarFn>,
    grad: Arc<GradFn>,
}

impl fmt::Debug for CubicHamiltonianStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CubicHamiltonianStructure").field("s", &self.s).finish()
    }
}

impl CubicHamiltonianStructure {
    /// Checks skewness of `S` and `S∇H = f` at random points in `[-1, 1]ᵈ`.
    pub fn new(
        s: DMatrix<f64>,
        h: impl Fn(&State) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&State) -> State + Send + Sync + 'static,
        field: &QuadraticVectorField,
    ) -> Result<Self> {
        let d = field.dim();
        if s.nrows() != d || s.ncols() != d {
            return Err(Error::invalid("S has the wrong shape"));
        }
        if (&s + s.transpose()).amax() > 1e-12 * s.amax().max(1.0) {
            return Err(Error::invalid("S is not skew-symmetric"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xca5);
        for _ in 0..10 {
            let x = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let f = field.eval(0.0, &x);
            if max_norm(&(&s * grad(&x) - &f)) > 1e-10 * max_norm(&f).max(1.0) {
                return Err(Error::invalid("S∇H does not reproduce the field"));
            }
        }
        Ok(CubicHamiltonianStructure {
            s,
            h: Arc::new(h),
            grad: Arc::new(grad),
        })
    }

    /// Structure read off a cubic polynomial `H`.
    pub fn from_polynomial(s: DMatrix<f64>, h: Polynomial, field: &QuadraticVectorField) -> Result<Self> {
        let grads: Vec<Polynomial> = (0..h.dim()).map(|i| h.partial(i)).collect();
        let h2 = h.clone();
        Self::new(
            s,
            move |x: &State| h2.eval(x.as_slice()),
            move |x: &State| DVector::from_iterator(grads.len(), grads.iter().map(|g| g.eval(x.as_slice()))),
            field,
        )
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn energy(&self, x: &State) -> f64 {
        (self.h)(x)
    }

    pub fn gradient(&self, x: &State) -> State {
        (self.grad)(x)
    }
}

/// `H̃ = H + (h/3)∇Hᵀ(I − (h/2)f′(x))⁻¹f(x)`.
pub fn modified_energy(
    structure: &CubicHamiltonianStructure,
    field: &QuadraticVectorField,
    x: &State,
    h: f64,
) -> Result<f64> {
    let r = field.resolvent(x, h);
    let y = r
        .lu()
        .solve(&field.eval(0.0, x))
        .ok_or_else(|| Error::Singular("I − (h/2)f′(x) is singular".into()))?;
    Ok(structure.energy(x) + h / 3.0 * structure.gradient(x).dot(&y))
}

/// `1/det(I − (h/2)f′(x))`, the density of the measure Kahan's map preserves.
pub fn modified_measure_weight(field: &QuadraticVectorField, x: &State, h: f64) -> Result<f64> {
    let det = field.resolvent(x, h).determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::Singular("I − (h/2)f′(x) is singular".into()));
    }
    Ok(1.0 / det)
}

/// `|det DΦ(x)| · w(Φ(x))/w(x) − 1` with `DΦ` from central differences.
pub fn modified_measure_defect(field: &QuadraticVectorField, x: &State, h: f64) -> Result<f64> {
    let j = crate::fd::try_fd_jacobian(|y: &State| kahan_step(field, y, h), x, None)?;
    let xp = kahan_step(field, x, h)?;
    let ratio = modified_measure_weight(field, &xp, h)? / modified_measure_weight(field, x, h)?;
    Ok((j.determinant().abs() * ratio.abs() - 1.0).abs())
}

/// `H = (a/3)x³ + bx²y + cxy² + (d/3)y³ + (e/2)x² + fxy + (g/2)y² + hx + iy`
/// with `S = [[0, 1], [−1, 0]]`; returns the field and its structure.
pub fn cubic_hamiltonian_family(params: [f64; 9]) -> Result<(QuadraticVectorField, CubicHamiltonianStructure)> {
    let [a, b, c, d, e, f, g, h, i] = params;
    let p = |terms: &[(f64, &[u32])]| Polynomial::new(2, terms);
    let ham = p(&[
        (a / 3.0, &[3, 0]),
        (b, &[2, 1]),
        (c, &[1, 2]),
        (d / 3.0, &[0, 3]),
        (e / 2.0, &[2, 0]),
        (f, &[1, 1]),
        (g / 2.0, &[0, 2]),
        (h, &[1, 0]),
        (i, &[0, 1]),
    ])?;
    let hx = ham.partial(0);
    let hy = ham.partial(1);
    let field = QuadraticVectorField::from_polynomial(&PolynomialVectorField::new(vec![hy, hx.scale(-1.0)])?)?;
    let s = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let structure = CubicHamiltonianStructure::from_polynomial(s, ham, &field)?;
    Ok((field, structure))
}
