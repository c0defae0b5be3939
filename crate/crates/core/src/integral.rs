//! Energy- and integral-preserving methods: the average vector field method,
//! the Simpson Runge–Kutta method for quartic Hamiltonians, and
//! discrete-gradient integrators for one or two first integrals.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::driver::{FieldMethod, Stepper};
use crate::error::{Error, Result};
use crate::exponential::gauss_legendre_nodes;
use crate::fd::{fd_gradient, fd_partial};
use crate::problem::VectorField;
use crate::solver::{solve_implicit, SolverSettings};
use crate::state::{max_norm, State};

/// Quadrature order used when nothing is known about the field.
pub const DEFAULT_AVF_ORDER: usize = 8;

/// Solver settings for the conservative methods. Conservation holds only up
/// to the solver residual, so the default is tighter than elsewhere.
pub fn conservative_settings() -> SolverSettings {
    SolverSettings::default().with_tolerance(1e-14)
}

/// Fixed-point solve followed by up to two extra substitutions while they
/// still shrink the update. The extra sweeps push the conservation error from
/// the stopping tolerance down towards round-off.
fn solve_polished<F>(map: F, guess: &State, settings: &SolverSettings) -> Result<State>
where
    F: Fn(&State) -> Result<State>,
{
    let mut x = solve_implicit(&map, guess, settings)?;
    let mut last = f64::INFINITY;
    for _ in 0..2 {
        let y = map(&x)?;
        let update = max_norm(&(&y - &x));
        if !(update < last) || update > settings.tolerance {
            break;
        }
        last = update;
        x = y;
        if update == 0.0 {
            break;
        }
    }
    Ok(x)
}

/// Gauss–Legendre order that integrates a polynomial of the given degree in
/// `ξ` exactly.
pub fn quadrature_order_for_degree(degree: u32) -> usize {
    (degree as usize / 2 + 1).max(1)
}

fn avf_average(field: &dyn VectorField, t: f64, x: &State, xp: &State, nodes: &(Vec<f64>, Vec<f64>)) -> State {
    let mut acc = DVector::zeros(x.len());
    for (&xi, &w) in nodes.0.iter().zip(&nodes.1) {
        let y = xp * xi + x * (1.0 - xi);
        acc += w * field.eval(t, &y);
    }
    acc
}

/// Average vector field method `(x′−x)/h = ∫₀¹ f(ξx′ + (1−ξ)x) dξ`.
#[derive(Debug, Clone)]
pub struct Avf {
    pub quadrature_order: usize,
    pub settings: SolverSettings,
}

impl Default for Avf {
    fn default() -> Self {
        Avf::new(DEFAULT_AVF_ORDER)
    }
}

impl Avf {
    pub fn new(quadrature_order: usize) -> Self {
        Avf {
            quadrature_order,
            settings: conservative_settings(),
        }
    }

    /// Quadrature exact for a polynomial field of the given degree.
    pub fn for_degree(degree: u32) -> Self {
        Avf::new(quadrature_order_for_degree(degree))
    }

    pub fn with_settings(mut self, settings: SolverSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn step_field(&self, field: &dyn VectorField, t: f64, x: &State, h: f64) -> Result<State> {
        let nodes = gauss_legendre_nodes(self.quadrature_order)?;
        let tm = t + 0.5 * h;
        let x0 = x.clone();
        solve_polished(
            |xp: &State| Ok(&x0 + h * avf_average(field, tm, &x0, xp, &nodes)),
            x,
            &self.settings,
        )
    }

    /// Difference between the `q`- and `2q`-point averages over a step,
    /// an estimate of the quadrature error in the ξ-integral.
    pub fn quadrature_residual(&self, field: &dyn VectorField, t: f64, x: &State, xp: &State) -> Result<f64> {
        let lo = gauss_legendre_nodes(self.quadrature_order)?;
        let hi = gauss_legendre_nodes(2 * self.quadrature_order)?;
        Ok(max_norm(&(avf_average(field, t, x, xp, &lo) - avf_average(field, t, x, xp, &hi))))
    }
}

impl FieldMethod for Avf {
    fn name(&self) -> &str {
        "avf"
    }

    fn step(&self, field: &dyn VectorField, t: f64, x: &State, h: f64) -> Result<State> {
        self.step_field(field, t, x, h)
    }
}

pub fn avf_step(field: &dyn VectorField, x: &State, h: f64, quadrature_order: usize) -> Result<State> {
    Avf::new(quadrature_order).step_field(field, 0.0, x, h)
}

/// `(x′−x)/h = ⅙[f(x) + 4f((x+x′)/2) + f(x′)]`.
#[derive(Debug, Clone)]
pub struct SimpsonRk {
    pub settings: SolverSettings,
}

impl Default for SimpsonRk {
    fn default() -> Self {
        SimpsonRk {
            settings: conservative_settings(),
        }
    }
}

impl SimpsonRk {
    pub fn step_field(&self, field: &dyn VectorField, t: f64, x: &State, h: f64) -> Result<State> {
        let f0 = field.eval(t, x);
        let x0 = x.clone();
        solve_polished(
            |xp: &State| {
                let mid = (&x0 + xp) * 0.5;
                let avg = (&f0 + 4.0 * field.eval(t + 0.5 * h, &mid) + field.eval(t + h, xp)) / 6.0;
                Ok(&x0 + h * avg)
            },
            x,
            &self.settings,
        )
    }
}

impl FieldMethod for SimpsonRk {
    fn name(&self) -> &str {
        "simpson-rk"
    }

    fn step(&self, field: &dyn VectorField, t: f64, x: &State, h: f64) -> Result<State> {
        self.step_field(field, t, x, h)
    }
}

pub fn simpson_rk_step(field: &dyn VectorField, x: &State, h: f64) -> Result<State> {
    SimpsonRk::default().step_field(field, 0.0, x, h)
}

type ScalarFn = dyn Fn(&State) -> f64 + Send + Sync;
type GradFn = dyn Fn(&State) -> State + Send + Sync;
type SkewFn = dyn Fn(&State) -> DMatrix<f64> + Send + Sync;

/// A scalar function together with its gradient (central differences when no
/// gradient is supplied).
#[derive(Clone)]
pub struct FirstIntegral {
    value: Arc<ScalarFn>,
    grad: Option<Arc<GradFn>>,
}

impl fmt::Debug for FirstIntegral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FirstIntegral")
            .field("analytic_gradient", &self.grad.is_some())
            .finish()
    }
}

impl FirstIntegral {
    pub fn new(
        value: impl Fn(&State) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&State) -> State + Send + Sync + 'static,
    ) -> Self {
        FirstIntegral {
            value: Arc::new(value),
            grad: Some(Arc::new(grad)),
        }
    }

    pub fn without_gradient(value: impl Fn(&State) -> f64 + Send + Sync + 'static) -> Self {
        FirstIntegral {
            value: Arc::new(value),
            grad: None,
        }
    }

    pub fn value(&self, x: &State) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &State) -> State {
        match &self.grad {
            Some(g) => g(x),
            None => fd_gradient(|y: &State| (self.value)(y), x, None),
        }
    }

    fn partial(&self, x: &State, i: usize) -> f64 {
        match &self.grad {
            Some(g) => g(x)[i],
            None => fd_partial(|y: &State| (self.value)(y), x, i, None),
        }
    }
}

/// Increments below this (relative) size use the partial derivative in the
/// Itoh–Abe quotient.
const ITOH_ABE_DEGENERATE: f64 = 1e-9;

/// Itoh–Abe discrete gradient: coordinate `i` is the difference quotient of
/// `I` along coordinate `i` between the points where the first `i − 1`
/// coordinates are already updated.
pub fn itoh_abe_gradient(integral: &FirstIntegral, x: &State, xp: &State) -> State {
    let d = x.len();
    let mut out = DVector::zeros(d);
    let mut before = x.clone();
    let mut i_before = integral.value(&before);
    for i in 0..d {
        let mut after = before.clone();
        after[i] = xp[i];
        let i_after = integral.value(&after);
        let dx = xp[i] - x[i];
        out[i] = if dx.abs() <= ITOH_ABE_DEGENERATE * x[i].abs().max(1.0) {
            let mid = (&before + &after) * 0.5;
            integral.partial(&mid, i)
        } else {
            (i_after - i_before) / dx
        };
        before = after;
        i_before = i_after;
    }
    out
}

/// Mean-value discrete gradient `∫₀¹ ∇I(ξx′ + (1−ξ)x) dξ` by Gauss–Legendre.
pub fn avf_gradient(integral: &FirstIntegral, x: &State, xp: &State, quadrature_order: usize) -> Result<State> {
    let (nodes, weights) = gauss_legendre_nodes(quadrature_order)?;
    let mut acc = DVector::zeros(x.len());
    for (&xi, &w) in nodes.iter().zip(&weights) {
        acc += w * integral.gradient(&(xp * xi + x * (1.0 - xi)));
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiscreteGradient {
    ItohAbe,
    Avf { quadrature_order: usize },
}

impl DiscreteGradient {
    pub fn name(&self) -> &'static str {
        match self {
            DiscreteGradient::ItohAbe => "itoh-abe",
            DiscreteGradient::Avf { .. } => "avf",
        }
    }

    pub fn eval(&self, integral: &FirstIntegral, x: &State, xp: &State) -> Result<State> {
        match self {
            DiscreteGradient::ItohAbe => Ok(itoh_abe_gradient(integral, x, xp)),
            DiscreteGradient::Avf { quadrature_order } => avf_gradient(integral, x, xp, *quadrature_order),
        }
    }
}

/// Where the skew matrix is evaluated inside a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SkewApproximation {
    /// `S((x + x′)/2)`.
    #[default]
    Midpoint,
    /// `S(x)`.
    Left,
}

impl SkewApproximation {
    pub fn eval(&self, skew: &SkewFn, x: &State, xp: &State) -> DMatrix<f64> {
        match self {
            SkewApproximation::Midpoint => skew(&((x + xp) * 0.5)),
            SkewApproximation::Left => skew(x),
        }
    }
}

fn random_probes(d: usize, center: &State, n: usize) -> Vec<State> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1d1e);
    (0..n)
        .map(|_| center + DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5)))
        .collect()
}

/// `ẋ = S(x)∇I(x)` with `S` skew.
#[derive(Clone)]
pub struct FirstIntegralSystem {
    integral: FirstIntegral,
    skew: Arc<SkewFn>,
    dim: usize,
}

impl fmt::Debug for FirstIntegralSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FirstIntegralSystem").field("dim", &self.dim).finish()
    }
}

impl FirstIntegralSystem {
    /// `S` is checked for skewness at random points around `probe`.
    pub fn new(
        integral: FirstIntegral,
        skew: impl Fn(&State) -> DMatrix<f64> + Send + Sync + 'static,
        probe: &State,
    ) -> Result<Self> {
        let dim = probe.len();
        for x in random_probes(dim, probe, 5) {
            let s = skew(&x);
            if s.nrows() != dim || s.ncols() != dim {
                return Err(Error::invalid("skew matrix has the wrong shape"));
            }
            if (&s + s.transpose()).amax() > 1e-12 * s.amax().max(1.0) {
                return Err(Error::invalid("S(x) is not skew-symmetric"));
            }
        }
        Ok(FirstIntegralSystem {
            integral,
            skew: Arc::new(skew),
            dim,
        })
    }

    /// Recover a skew `S` from a field with known integral:
    /// `S = (f∇Iᵀ − ∇I fᵀ)/‖∇I‖²`, which reproduces `f` whenever `f·∇I = 0`.
    /// Fails at points where `∇I` vanishes.
    pub fn from_field(field: impl VectorField + 'static, integral: FirstIntegral, probe: &State) -> Result<Self> {
        let dim = field.dim();
        let field = Arc::new(field);
        for x in random_probes(dim, probe, 5) {
            let f = field.eval(0.0, &x);
            let g = integral.gradient(&x);
            if f.dot(&g).abs() > 1e-8 * (f.norm() * g.norm()).max(1.0) {
                return Err(Error::invalid("I is not a first integral of the field (f·∇I ≠ 0)"));
            }
        }
        let integ = integral.clone();
        let skew = move |x: &State| {
            let f = field.eval(0.0, x);
            let g = integ.gradient(x);
            let n2 = g.norm_squared();
            if n2 == 0.0 {
                // Callers see the failure through a non-finite step.
                return DMatrix::from_element(x.len(), x.len(), f64::NAN);
            }
            (&f * g.transpose() - &g * f.transpose()) / n2
        };
        let sys = Self::new(integral, skew, probe)?;
        if sys.integral.gradient(probe).norm_squared() == 0.0 {
            return Err(Error::invalid("∇I vanishes at the probe point"));
        }
        Ok(sys)
    }

    pub fn integral(&self) -> &FirstIntegral {
        &self.integral
    }

    pub fn skew(&self, x: &State) -> DMatrix<f64> {
        (self.skew)(x)
    }

    pub fn skew_fn(&self) -> &SkewFn {
        self.skew.as_ref()
    }
}

impl VectorField for FirstIntegralSystem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _t: f64, x: &State) -> State {
        self.skew(x) * self.integral.gradient(x)
    }
}

/// `(x′ − x)/h = S̄(x, x′) ∇̄I(x, x′)`.
#[derive(Debug, Clone)]
pub struct DiscreteGradientMethod {
    pub system: FirstIntegralSystem,
    pub gradient: DiscreteGradient,
    pub skew: SkewApproximation,
    pub settings: SolverSettings,
}

impl DiscreteGradientMethod {
    pub fn new(system: FirstIntegralSystem, gradient: DiscreteGradient) -> Self {
        DiscreteGradientMethod {
            system,
            gradient,
            skew: SkewApproximation::default(),
            settings: conservative_settings(),
        }
    }

    pub fn with_skew(mut self, skew: SkewApproximation) -> Self {
        self.skew = skew;
        self
    }
}

impl Stepper for DiscreteGradientMethod {
    fn step(&self, _t: f64, x: &State, h: f64) -> Result<State> {
        let x0 = x.clone();
        let sys = &self.system;
        let out = solve_polished(
            |xp: &State| {
                let g = self.gradient.eval(&sys.integral, &x0, xp)?;
                let s = self.skew.eval(sys.skew_fn(), &x0, xp);
                Ok(&x0 + h * (s * g))
            },
            x,
            &self.settings,
        )?;
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Singular("skew matrix undefined where ∇I = 0".into()));
        }
        Ok(out)
    }
}

pub fn discrete_gradient_step(
    system: &FirstIntegralSystem,
    gradient: DiscreteGradient,
    skew: SkewApproximation,
    x: &State,
    h: f64,
) -> Result<State> {
    DiscreteGradientMethod::new(system.clone(), gradient)
        .with_skew(skew)
        .step(0.0, x, h)
}

/// Rank-3 tensor with `d³` entries, index `(i, j, k)` at `i·d² + j·d + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub d: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d: usize) -> Self {
        Tensor3 {
            d,
            data: vec![0.0; d * d * d],
        }
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.d + j) * self.d + k]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.d + j) * self.d + k] = v;
    }

    /// Levi-Civita symbol in three dimensions.
    pub fn levi_civita() -> Self {
        let mut t = Tensor3::zeros(3);
        for (i, j, k) in [(0, 1, 2), (1, 2, 0), (2, 0, 1)] {
            t.set(i, j, k, 1.0);
            t.set(i, k, j, -1.0);
        }
        t
    }

    /// Largest violation of antisymmetry under any transposition of indices.
    pub fn antisymmetry_defect(&self) -> f64 {
        let d = self.d;
        let mut worst = 0.0_f64;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let v = self.get(i, j, k);
                    worst = worst
                        .max((v + self.get(j, i, k)).abs())
                        .max((v + self.get(i, k, j)).abs())
                        .max((v + self.get(k, j, i)).abs());
                }
            }
        }
        worst
    }

    /// `Σ_jk T_ijk a_j b_k`.
    pub fn contract(&self, a: &State, b: &State) -> State {
        let d = self.d;
        DVector::from_fn(d, |i, _| {
            let mut s = 0.0;
            for j in 0..d {
                for k in 0..d {
                    s += self.get(i, j, k) * a[j] * b[k];
                }
            }
            s
        })
    }
}

type TensorFn = dyn Fn(&State) -> Tensor3 + Send + Sync;

/// `ẋ_i = Σ_jk S_ijk(x) ∂_j I ∂_k J` with `S` totally antisymmetric.
#[derive(Clone)]
pub struct TwoIntegralSystem {
    pub i: FirstIntegral,
    pub j: FirstIntegral,
    tensor: Arc<TensorFn>,
    dim: usize,
}

impl fmt::Debug for TwoIntegralSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TwoIntegralSystem").field("dim", &self.dim).finish()
    }
}

impl TwoIntegralSystem {
    pub fn new(
        i: FirstIntegral,
        j: FirstIntegral,
        tensor: impl Fn(&State) -> Tensor3 + Send + Sync + 'static,
        probe: &State,
    ) -> Result<Self> {
        let dim = probe.len();
        for x in random_probes(dim, probe, 5) {
            let t = tensor(&x);
            if t.d != dim {
                return Err(Error::invalid("tensor has the wrong dimension"));
            }
            if t.antisymmetry_defect() > 1e-12 {
                return Err(Error::invalid("S_ijk is not totally antisymmetric"));
            }
        }
        Ok(TwoIntegralSystem {
            i,
            j,
            tensor: Arc::new(tensor),
            dim,
        })
    }

    pub fn tensor(&self, x: &State) -> Tensor3 {
        (self.tensor)(x)
    }
}

impl VectorField for TwoIntegralSystem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _t: f64, x: &State) -> State {
        self.tensor(x).contract(&self.i.gradient(x), &self.j.gradient(x))
    }
}

/// `(x′ − x)/h = S̄_ijk ∇̄I_j ∇̄J_k` with the tensor at the midpoint.
#[derive(Debug, Clone)]
pub struct TwoIntegralMethod {
    pub system: TwoIntegralSystem,
    pub gradient: DiscreteGradient,
    pub settings: SolverSettings,
}

impl TwoIntegralMethod {
    pub fn new(system: TwoIntegralSystem, gradient: DiscreteGradient) -> Self {
        TwoIntegralMethod {
            system,
            gradient,
            settings: conservative_settings(),
        }
    }
}

impl Stepper for TwoIntegralMethod {
    fn step(&self, _t: f64, x: &State, h: f64) -> Result<State> {
        let x0 = x.clone();
        let sys = &self.system;
        solve_polished(
            |xp: &State| {
                let gi = self.gradient.eval(&sys.i, &x0, xp)?;
                let gj = self.gradient.eval(&sys.j, &x0, xp)?;
                let t = sys.tensor(&((&x0 + xp) * 0.5));
                Ok(&x0 + h * t.contract(&gi, &gj))
            },
            x,
            &self.settings,
        )
    }
}

pub fn two_integral_step(system: &TwoIntegralSystem, x: &State, h: f64) -> Result<State> {
    TwoIntegralMethod::new(system.clone(), DiscreteGradient::Avf { quadrature_order: 4 }).step(0.0, x, h)
}
