//! Exponential integrators: exponential Euler for `ẏ = Ay + b(y)`,
//! trigonometric variation of constants and Gautschi-type two-step methods for
//! `ÿ + Ω²y = g(y)`.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::driver::Stepper;
use crate::error::{Error, Result};
use crate::problem::SecondOrderProblem;
use crate::state::State;

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `φ₁(M) = Σ_{k≥0} M^k/(k+1)!`, so that `M φ₁(M) = e^M − I` even for
/// singular `M`.
///
/// Scaling and squaring on a truncated Taylor core, using
/// `φ₁(2Z) = ½(e^Z + I) φ₁(Z)` and `e^{2Z} = (e^Z)²`.
pub fn phi1(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let norm = one_norm(m);
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let z = m / 2f64.powi(s);
    // Horner for Σ_{k=0}^{K} Z^k/(k+1)!; ‖Z‖ ≤ ½ makes K = 18 exhaust f64.
    const K: usize = 18;
    let mut p = &id / factorial(K + 1);
    for k in (0..K).rev() {
        p = &z * p + &id / factorial(k + 1);
    }
    let mut e = &id + &z * &p;
    for _ in 0..s {
        p = 0.5 * (&e + &id) * p;
        e = &e * &e;
    }
    p
}

fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, j| acc * j as f64)
}

type BFn = dyn Fn(&State) -> State + Send + Sync;

/// `ẏ = Ay + b(y)`.
#[derive(Clone)]
pub struct SemilinearProblem {
    pub a: DMatrix<f64>,
    b: Arc<BFn>,
}

impl fmt::Debug for SemilinearProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SemilinearProblem").field("a", &self.a).finish()
    }
}

impl SemilinearProblem {
    pub fn new(a: DMatrix<f64>, b: impl Fn(&State) -> State + Send + Sync + 'static) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::invalid("linear part must be square"));
        }
        Ok(SemilinearProblem { a, b: Arc::new(b) })
    }

    pub fn b(&self, y: &State) -> State {
        (self.b)(y)
    }
}

/// Exponential Euler with `e^{hA}` and `φ₁(hA)` cached per step size.
#[derive(Debug)]
pub struct ExponentialEuler {
    problem: SemilinearProblem,
    cache: RwLock<HashMap<u64, Arc<(DMatrix<f64>, DMatrix<f64>)>>>,
}

impl ExponentialEuler {
    pub fn new(problem: SemilinearProblem) -> Self {
        ExponentialEuler {
            problem,
            cache: RwLock::new(HashMap::new()),
        }
    }

    fn matrices(&self, h: f64) -> Arc<(DMatrix<f64>, DMatrix<f64>)> {
        if let Some(m) = self.cache.read().expect("cache lock").get(&h.to_bits()) {
            return m.clone();
        }
        let ha = &self.problem.a * h;
        let m = Arc::new((ha.exp(), phi1(&ha)));
        self.cache.write().expect("cache lock").insert(h.to_bits(), m.clone());
        m
    }

    /// `y′ = e^{hA}y + hφ₁(hA)b(y)`.
    pub fn step_state(&self, y: &State, h: f64) -> State {
        let m = self.matrices(h);
        &m.0 * y + h * (&m.1 * self.problem.b(y))
    }
}

impl Stepper for ExponentialEuler {
    fn step(&self, _t: f64, x: &State, h: f64) -> Result<State> {
        Ok(self.step_state(x, h))
    }
}

pub fn exponential_euler_step(problem: &SemilinearProblem, y: &State, h: f64) -> State {
    let ha = &problem.a * h;
    ha.exp() * y + h * (phi1(&ha) * problem.b(y))
}

/// `sin(x)/x` with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0 + x.powi(4) / 120.0
    } else {
        x.sin() / x
    }
}

/// `Ψ(x) = 2(1 − cos x)/x²`, evaluated as `sinc²(x/2)` to avoid the
/// cancellation in `1 − cos x`; `Ψ(0) = 1`.
pub fn psi(x: f64) -> f64 {
    sinc(0.5 * x).powi(2)
}

/// A filter `Φ` with `Φ(0) = 1` and `Φ(kπ) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    /// No filtering, `Φ ≡ 1`. Not a filter in the strict sense; kept for
    /// comparison runs.
    Identity,
    Sinc,
    Sinc2,
}

impl Filter {
    pub fn name(&self) -> &'static str {
        match self {
            Filter::Identity => "none",
            Filter::Sinc => "sinc",
            Filter::Sinc2 => "sinc2",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Filter::Identity),
            "sinc" => Ok(Filter::Sinc),
            "sinc2" => Ok(Filter::Sinc2),
            _ => Err(Error::UnknownId {
                kind: "filter",
                id: name.to_string(),
            }),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Filter::Identity => 1.0,
            Filter::Sinc => sinc(x),
            Filter::Sinc2 => sinc(x).powi(2),
        }
    }
}

impl Default for Filter {
    fn default() -> Self {
        Filter::Sinc
    }
}

/// The filters that satisfy the filter axioms.
pub fn builtin_filters() -> Vec<Filter> {
    vec![Filter::Sinc, Filter::Sinc2]
}

/// Symmetric eigendecomposition of Ω, reused for every matrix function.
#[derive(Debug, Clone)]
pub struct OmegaSpectrum {
    q: DMatrix<f64>,
    lambda: DVector<f64>,
}

impl OmegaSpectrum {
    pub fn new(omega: &DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(omega.clone());
        OmegaSpectrum {
            q: eig.eigenvectors,
            lambda: eig.eigenvalues,
        }
    }

    /// `f(Ω)` as `Q diag(f(λ)) Qᵀ`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = self.lambda.map(f);
        &self.q * DMatrix::from_diagonal(&d) * self.q.transpose()
    }
}

/// Matrix functions of `hΩ` used by one step size.
#[derive(Debug, Clone)]
pub struct TrigMatrices {
    pub h: f64,
    /// cos(hΩ)
    pub cos: DMatrix<f64>,
    /// Ω⁻¹ sin(hΩ) = h sinc(hΩ)
    pub sin_over: DMatrix<f64>,
    /// Ω sin(hΩ)
    pub omega_sin: DMatrix<f64>,
    /// cos(hΩ/2)
    pub cos_half: DMatrix<f64>,
    /// (h/2) sinc(hΩ/2)
    pub sin_over_half: DMatrix<f64>,
    /// ∫₀ʰ Ω⁻¹ sin((h−s)Ω) ds = ½h² sinc²(hΩ/2)
    pub kernel_y: DMatrix<f64>,
    /// h² Ψ(hΩ)
    pub h2_psi: DMatrix<f64>,
    /// h² Ψ(hΩ) Ω² = 2(I − cos hΩ)
    pub two_one_minus_cos: DMatrix<f64>,
    /// 1 / (2h sinc(hΩ)), with 1/(2h) at eigenvalues where sinc(hΩ) vanishes.
    pub velocity: DMatrix<f64>,
}

impl TrigMatrices {
    pub fn new(spec: &OmegaSpectrum, h: f64) -> Self {
        TrigMatrices {
            h,
            cos: spec.apply(|l| (h * l).cos()),
            sin_over: spec.apply(|l| h * sinc(h * l)),
            omega_sin: spec.apply(|l| l * (h * l).sin()),
            cos_half: spec.apply(|l| (0.5 * h * l).cos()),
            sin_over_half: spec.apply(|l| 0.5 * h * sinc(0.5 * h * l)),
            kernel_y: spec.apply(|l| 0.5 * h * h * psi(h * l)),
            h2_psi: spec.apply(|l| h * h * psi(h * l)),
            two_one_minus_cos: spec.apply(|l| 4.0 * (0.5 * h * l).sin().powi(2)),
            velocity: spec.apply(|l| {
                let s = sinc(h * l);
                if s.abs() > 1e-8 {
                    1.0 / (2.0 * h * s)
                } else {
                    1.0 / (2.0 * h)
                }
            }),
        }
    }

    /// Free flow over a fraction `c ∈ [0, 1]` of the step.
    fn free_flow(spec: &OmegaSpectrum, y: &State, v: &State, tau: f64) -> State {
        spec.apply(|l| (tau * l).cos()) * y + spec.apply(|l| tau * sinc(tau * l)) * v
    }
}

/// Quadrature of the nonlinear convolution term in the variation-of-constants
/// formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quadrature {
    /// `g` frozen at the free-flow midpoint prediction; kernel integrated exactly.
    FrozenMidpoint,
    /// Gauss–Legendre nodes with `g` sampled on the free-flow prediction.
    Gauss(usize),
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature::FrozenMidpoint
    }
}

/// Shared propagator for a second-order problem with cached matrix functions.
pub struct Trigonometric {
    pub problem: SecondOrderProblem,
    spectrum: OmegaSpectrum,
    cache: RwLock<HashMap<u64, Arc<TrigMatrices>>>,
}

impl fmt::Debug for Trigonometric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trigonometric").field("problem", &self.problem).finish()
    }
}

impl Trigonometric {
    pub fn new(problem: SecondOrderProblem) -> Self {
        let spectrum = OmegaSpectrum::new(problem.omega());
        Trigonometric {
            problem,
            spectrum,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn spectrum(&self) -> &OmegaSpectrum {
        &self.spectrum
    }

    pub fn matrices(&self, h: f64) -> Arc<TrigMatrices> {
        if let Some(m) = self.cache.read().expect("cache lock").get(&h.to_bits()) {
            return m.clone();
        }
        let m = Arc::new(TrigMatrices::new(&self.spectrum, h));
        self.cache.write().expect("cache lock").insert(h.to_bits(), m.clone());
        m
    }

    /// One step of the trigonometric variation-of-constants formula.
    pub fn voc_step(&self, y: &State, v: &State, h: f64, quad: Quadrature) -> Result<(State, State)> {
        let m = self.matrices(h);
        let mut y1 = &m.cos * y + &m.sin_over * v;
        let mut v1 = &m.cos * v - &m.omega_sin * y;
        match quad {
            Quadrature::FrozenMidpoint => {
                let ymid = &m.cos_half * y + &m.sin_over_half * v;
                let g = self.problem.g(&ymid);
                y1 += &m.kernel_y * &g;
                v1 += &m.sin_over * &g;
            }
            Quadrature::Gauss(q) => {
                let (nodes, weights) = gauss_legendre_nodes(q)?;
                for (c, w) in nodes.iter().zip(&weights) {
                    let yc = TrigMatrices::free_flow(&self.spectrum, y, v, c * h);
                    let g = self.problem.g(&yc);
                    let r = (1.0 - c) * h;
                    let ky = self.spectrum.apply(|l| r * sinc(r * l));
                    let kv = self.spectrum.apply(|l| (r * l).cos());
                    y1 += (w * h) * (ky * &g);
                    v1 += (w * h) * (kv * &g);
                }
            }
        }
        Ok((y1, v1))
    }
}

/// Gauss–Legendre nodes and weights on [0, 1] from the Golub–Welsch
/// eigenproblem.
pub fn gauss_legendre_nodes(q: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if q == 0 {
        return Err(Error::invalid("quadrature needs at least one node"));
    }
    let mut jac = DMatrix::<f64>::zeros(q, q);
    for k in 1..q {
        let kf = k as f64;
        let beta = kf / (4.0 * kf * kf - 1.0).sqrt();
        jac[(k, k - 1)] = beta;
        jac[(k - 1, k)] = beta;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..q)
        .map(|i| {
            let x = eig.eigenvalues[i];
            let w = 2.0 * eig.eigenvectors[(0, i)].powi(2);
            (0.5 * (x + 1.0), 0.5 * w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize so that node sets are exactly palindromic.
    let n = pairs.len();
    for i in 0..n / 2 {
        let (a, b) = (pairs[i], pairs[n - 1 - i]);
        let x = 0.5 * (a.0 + (1.0 - b.0));
        let w = 0.5 * (a.1 + b.1);
        pairs[i] = (x, w);
        pairs[n - 1 - i] = (1.0 - x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.5;
    }
    Ok(pairs.into_iter().unzip())
}

/// `(y, ẏ) ↦ (y′, ẏ′)` for `ÿ + Ω²y = g(y)`.
pub fn trig_voc_step(
    problem: &SecondOrderProblem,
    y: &State,
    v: &State,
    h: f64,
    quad: Quadrature,
) -> Result<(State, State)> {
    Trigonometric::new(problem.clone()).voc_step(y, v, h, quad)
}

/// Back values `(y_{n−1}, y_n)` of the two-step scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigStepperState {
    pub prev: State,
    pub curr: State,
}

/// Gautschi-type method
/// `y_{n+1} = 2y_n − y_{n−1} + h²Ψ(hΩ)(g(Φ(hΩ)y_n) − Ω²y_n)`.
#[derive(Debug)]
pub struct Gautschi {
    pub trig: Trigonometric,
    pub filter: Filter,
    filter_cache: RwLock<HashMap<u64, Arc<DMatrix<f64>>>>,
}

impl Gautschi {
    pub fn new(problem: SecondOrderProblem, filter: Filter) -> Self {
        Gautschi {
            trig: Trigonometric::new(problem),
            filter,
            filter_cache: RwLock::new(HashMap::new()),
        }
    }

    fn filter_matrix(&self, h: f64) -> Arc<DMatrix<f64>> {
        if let Some(m) = self.filter_cache.read().expect("cache lock").get(&h.to_bits()) {
            return m.clone();
        }
        let f = self.filter;
        let m = Arc::new(self.trig.spectrum().apply(|l| f.eval(h * l)));
        self.filter_cache.write().expect("cache lock").insert(h.to_bits(), m.clone());
        m
    }

    /// Bootstrap the two back values with one variation-of-constants step.
    pub fn start(&self, y0: &State, v0: &State, h: f64) -> Result<TrigStepperState> {
        let (y1, _) = self.trig.voc_step(y0, v0, h, Quadrature::FrozenMidpoint)?;
        Ok(TrigStepperState {
            prev: y0.clone(),
            curr: y1,
        })
    }

    pub fn next(&self, state: &TrigStepperState, h: f64) -> State {
        let m = self.trig.matrices(h);
        let phi = self.filter_matrix(h);
        let g = self.trig.problem.g(&(&*phi * &state.curr));
        2.0 * &state.curr - &state.prev + &m.h2_psi * g - &m.two_one_minus_cos * &state.curr
    }

    pub fn step(&self, state: &TrigStepperState, h: f64) -> TrigStepperState {
        TrigStepperState {
            prev: state.curr.clone(),
            curr: self.next(state, h),
        }
    }

    /// Velocity estimate `v_n = (y_{n+1} − y_{n−1}) / (2h sinc(hΩ))`, exact for
    /// the linear oscillator.
    pub fn velocity(&self, prev: &State, next: &State, h: f64) -> State {
        &self.trig.matrices(h).velocity * (next - prev)
    }

    /// Positions `y_0 … y_n`.
    pub fn positions(&self, y0: &State, v0: &State, h: f64, n: usize) -> Result<Vec<State>> {
        let mut out = vec![y0.clone()];
        if n == 0 {
            return Ok(out);
        }
        let mut st = self.start(y0, v0, h)?;
        out.push(st.curr.clone());
        for _ in 1..n {
            st = self.step(&st, h);
            out.push(st.curr.clone());
        }
        Ok(out)
    }
}

/// Gautschi step exposed as a one-step map on `x = (p, q)` by carrying the
/// previous position inside the stepper: the harness drives it through
/// [`GautschiStepper::run`].
pub struct GautschiStepper {
    pub method: Gautschi,
}

impl GautschiStepper {
    /// Phase-space trajectory `(p_n, q_n)` for `n = 0..=steps`. Velocities use
    /// one position beyond the last reported step.
    pub fn run(&self, x0: &State, h: f64, steps: usize) -> Result<Vec<State>> {
        let d = x0.len() / 2;
        let v0 = x0.rows(0, d).into_owned();
        let y0 = x0.rows(d, d).into_owned();
        let ys = self.method.positions(&y0, &v0, h, steps + 1)?;
        let mut out = Vec::with_capacity(steps + 1);
        for n in 0..=steps {
            let v = if n == 0 {
                v0.clone()
            } else {
                self.method.velocity(&ys[n - 1], &ys[n + 1], h)
            };
            let mut x = DVector::zeros(2 * d);
            x.rows_mut(0, d).copy_from(&v);
            x.rows_mut(d, d).copy_from(&ys[n]);
            out.push(x);
        }
        Ok(out)
    }
}

/// Trigonometric variation of constants as a one-step map on `x = (p, q)`.
pub struct TrigVocStepper {
    pub trig: Trigonometric,
    pub quadrature: Quadrature,
}

impl Stepper for TrigVocStepper {
    fn step(&self, _t: f64, x: &State, h: f64) -> Result<State> {
        let d = x.len() / 2;
        let v = x.rows(0, d).into_owned();
        let y = x.rows(d, d).into_owned();
        let (y1, v1) = self.trig.voc_step(&y, &v, h, self.quadrature)?;
        let mut out = DVector::zeros(2 * d);
        out.rows_mut(0, d).copy_from(&v1);
        out.rows_mut(d, d).copy_from(&y1);
        Ok(out)
    }
}
