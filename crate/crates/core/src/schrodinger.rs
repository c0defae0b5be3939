//! Semiclassical linear Schrödinger equation
//! `∂ₜu = iε∂ₓ²u − iε⁻¹V(x)u` on the periodic interval `[−1,1)`.
//!
//! Space is discretised by spectral collocation on `N` equispaced points
//! and time by the symmetric Zassenhaus splitting
//! `e^{R₀}e^{R₁}e^{R₂}e^{R₃}e^{R₂}e^{R₁}e^{R₀}` for the regime `h = O(ε)`.
//! `R₀` is diagonal, `R₁` is a Fourier multiplier, and the small operators
//! `R₂`, `R₃` are applied matrix-free and exponentiated by Lanczos.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Grid, semiclassical parameter and time step.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiclassicalGrid {
    pub n: usize,
    pub epsilon: f64,
    pub h: f64,
    /// Exponent in `h = O(ε^σ)`; only σ = 1 operators are implemented.
    pub sigma: f64,
}

impl SemiclassicalGrid {
    pub fn new(n: usize, epsilon: f64, h: f64) -> Result<Self> {
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::invalid(format!("grid size {n} must be a power of two ≥ 4")));
        }
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::invalid(format!("ε = {epsilon} must lie in (0, 1]")));
        }
        if !h.is_finite() || h == 0.0 {
            return Err(Error::invalid(format!("time step {h} must be finite and nonzero")));
        }
        if (n as f64) < 4.0 / epsilon {
            log::warn!(
                "N = {n} is below 4/ε = {:.0}; the ε⁻¹ oscillations are under-resolved",
                4.0 / epsilon
            );
        }
        Ok(SemiclassicalGrid { n, epsilon, h, sigma: 1.0 })
    }

    /// Same grid with a different time step (negative allowed).
    pub fn with_step(&self, h: f64) -> Result<Self> {
        SemiclassicalGrid::new(self.n, self.epsilon, h)
    }

    /// `τ = ih`.
    pub fn tau(&self) -> Complex64 {
        I * self.h
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|j| -1.0 + 2.0 * j as f64 / self.n as f64).collect()
    }

    pub fn spacing(&self) -> f64 {
        2.0 / self.n as f64
    }

    /// Wavenumber of FFT bin `j`, in `{−N/2, …, N/2−1}`.
    pub fn wavenumber(&self, j: usize) -> i64 {
        if j < self.n / 2 {
            j as i64
        } else {
            j as i64 - self.n as i64
        }
    }

    pub fn spectral(&self) -> Spectral {
        Spectral::new(self.n)
    }
}

/// FFT-based spectral calculus on `N` periodic points of `[−1,1)`.
#[derive(Clone)]
pub struct Spectral {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Spectral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Spectral").field("n", &self.n).finish()
    }
}

impl Spectral {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Spectral { n, forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn wavenumber(&self, j: usize) -> i64 {
        if j < self.n / 2 {
            j as i64
        } else {
            j as i64 - self.n as i64
        }
    }

    /// `F⁻¹ diag(m(k)) F u`.
    pub fn multiply<M: Fn(i64) -> Complex64>(&self, u: &[Complex64], m: M) -> Vec<Complex64> {
        assert_eq!(u.len(), self.n, "vector length does not match the grid");
        let mut buf = u.to_vec();
        self.forward.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        for (j, c) in buf.iter_mut().enumerate() {
            *c *= m(self.wavenumber(j)) * scale;
        }
        self.inverse.process(&mut buf);
        buf
    }

    /// Symbol of `∂ₓ^order`: `(iπk)^order`, with the Nyquist mode dropped for
    /// odd orders so that real data stay real.
    pub fn derivative_symbol(&self, k: i64, order: u32) -> Complex64 {
        if order % 2 == 1 && k == -(self.n as i64) / 2 {
            return Complex64::new(0.0, 0.0);
        }
        (I * PI * k as f64).powu(order)
    }

    pub fn derivative(&self, u: &[Complex64], order: u32) -> Vec<Complex64> {
        if order == 0 {
            return u.to_vec();
        }
        self.multiply(u, |k| self.derivative_symbol(k, order))
    }

    pub fn derivative_real(&self, v: &[f64], order: u32) -> Vec<f64> {
        let c: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.derivative(&c, order).into_iter().map(|z| z.re).collect()
    }
}

/// Potential samples `V, V′, V″, V‴, V⁗` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialData {
    /// `derivatives[m]` holds `∂ₓᵐV`, `m = 0..=4`.
    pub derivatives: [Vec<f64>; 5],
}

impl PotentialData {
    /// Spectral derivatives of the given samples.
    pub fn from_samples(grid: &SemiclassicalGrid, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != grid.n {
            return Err(Error::invalid(format!(
                "potential has {} samples, grid has {} points",
                samples.len(),
                grid.n
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("potential samples must be finite"));
        }
        let sp = grid.spectral();
        let d = |m| sp.derivative_real(&samples, m);
        let (d1, d2, d3, d4) = (d(1), d(2), d(3), d(4));
        Ok(PotentialData { derivatives: [samples, d1, d2, d3, d4] })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(grid: &SemiclassicalGrid, v: F) -> Result<Self> {
        PotentialData::from_samples(grid, grid.points().into_iter().map(v).collect())
    }

    /// Potential from a registry id.
    pub fn from_id(grid: &SemiclassicalGrid, id: &str) -> Result<Self> {
        let v = potential(id)?;
        PotentialData::from_fn(grid, |x| v(x))
    }

    /// Plain-text file with one real sample per line (blank lines ignored).
    pub fn from_file(grid: &SemiclassicalGrid, path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut samples = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let v: f64 = t.parse().map_err(|_| {
                Error::invalid(format!("line {}: `{t}` is not a real number", line_no + 1))
            })?;
            samples.push(v);
        }
        PotentialData::from_samples(grid, samples)
    }

    pub fn zero(grid: &SemiclassicalGrid) -> Self {
        let z = vec![0.0; grid.n];
        PotentialData { derivatives: [z.clone(), z.clone(), z.clone(), z.clone(), z] }
    }

    pub fn values(&self) -> &[f64] {
        &self.derivatives[0]
    }

    pub fn derivative(&self, m: usize) -> &[f64] {
        &self.derivatives[m]
    }

    pub fn is_zero(&self) -> bool {
        self.derivatives[0].iter().all(|&v| v == 0.0)
    }
}

/// Closed-form potential ids.
pub const POTENTIALS: [&str; 3] = ["cos", "double-well", "zero"];

/// `cos πx`; the double well `1 − cos 2πx + ½cos πx`; and `V ≡ 0`.
pub fn potential(id: &str) -> Result<fn(f64) -> f64> {
    match id {
        "cos" | "cos-pi-x" => Ok(|x| (PI * x).cos()),
        "double-well" => Ok(|x| 1.0 - (2.0 * PI * x).cos() + 0.5 * (PI * x).cos()),
        "zero" | "free" => Ok(|_| 0.0),
        _ => Err(Error::UnknownId { kind: "potential", id: id.to_string() }),
    }
}

/// Grid function `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction {
    pub values: Vec<Complex64>,
}

impl WaveFunction {
    pub fn new(values: Vec<Complex64>) -> Self {
        WaveFunction { values }
    }

    pub fn from_fn<F: Fn(f64) -> Complex64>(grid: &SemiclassicalGrid, f: F) -> Self {
        WaveFunction { values: grid.points().into_iter().map(f).collect() }
    }

    /// Discrete `L²(−1,1)` norm.
    pub fn norm(&self) -> f64 {
        let dx = 2.0 / self.values.len() as f64;
        (self.values.iter().map(|z| z.norm_sqr()).sum::<f64>() * dx).sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let nrm = self.norm();
        if nrm > 0.0 {
            for z in &mut self.values {
                *z /= nrm;
            }
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// `‖self − other‖` in the discrete `L²` norm.
    pub fn distance(&self, other: &WaveFunction) -> f64 {
        let dx = 2.0 / self.values.len() as f64;
        let s: f64 =
            self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm_sqr()).sum();
        (s * dx).sqrt()
    }
}

/// Normalised wave packet `exp(−5(1 − cos πx)) exp(i sin(πx)/ε)`.
pub fn semiclassical_packet(grid: &SemiclassicalGrid) -> WaveFunction {
    let eps = grid.epsilon;
    WaveFunction::from_fn(grid, |x| {
        let amp = (-5.0 * (1.0 - (PI * x).cos())).exp();
        Complex64::from_polar(amp, (PI * x).sin() / eps)
    })
    .normalized()
}

/// Treatment of the `∂ₓ⁴` symmetrised term in `R₃`, whose ε-power as
/// displayed (`τ⁵ε⁻³`) makes it `O(ε⁻²)` rather than `O(ε⁴)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum R3Variant {
    /// Coefficient `τ⁵ε⁻³/120`, literally.
    Printed,
    /// Coefficient `τ⁵ε³/120`, consistent with `R₃ = O(ε⁴)`.
    #[default]
    Raised,
    /// Term dropped.
    Without,
}

impl R3Variant {
    pub fn name(self) -> &'static str {
        match self {
            R3Variant::Printed => "printed",
            R3Variant::Raised => "raised",
            R3Variant::Without => "without",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "printed" => Ok(R3Variant::Printed),
            "raised" => Ok(R3Variant::Raised),
            "without" => Ok(R3Variant::Without),
            _ => Err(Error::UnknownId { kind: "R3 variant", id: s.to_string() }),
        }
    }
}

/// `c·(a∂ₓᵐ + ∂ₓᵐ[a·])` with real `a` and even `m`.
#[derive(Debug, Clone)]
struct Symmetrized {
    coefficient: Complex64,
    a: Vec<f64>,
    order: u32,
}

/// Matrix-free operator `d ⊙ u + Σ cⱼ(aⱼ∂ᵐu + ∂ᵐ(aⱼu))`.
///
/// All coefficients are imaginary and all `aⱼ` real, so the operator is
/// skew-Hermitian up to round-off.
#[derive(Debug, Clone)]
pub struct ZassenhausOperator {
    diagonal: Vec<Complex64>,
    terms: Vec<Symmetrized>,
    spectral: Spectral,
}

impl ZassenhausOperator {
    fn new(n: usize, spectral: Spectral) -> Self {
        ZassenhausOperator { diagonal: vec![Complex64::new(0.0, 0.0); n], terms: Vec::new(), spectral }
    }

    fn add_diagonal(&mut self, c: Complex64, f: &[f64]) {
        for (d, &v) in self.diagonal.iter_mut().zip(f) {
            *d += c * v;
        }
    }

    fn add_symmetrized(&mut self, c: Complex64, a: Vec<f64>, order: u32) {
        if c != Complex64::new(0.0, 0.0) && a.iter().any(|&v| v != 0.0) {
            self.terms.push(Symmetrized { coefficient: c, a, order });
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty() && self.diagonal.iter().all(|d| d.norm() == 0.0)
    }

    pub fn apply(&self, u: &[Complex64]) -> Vec<Complex64> {
        let mut out: Vec<Complex64> = self.diagonal.iter().zip(u).map(|(d, x)| d * x).collect();
        for t in &self.terms {
            let du = self.spectral.derivative(u, t.order);
            let au: Vec<Complex64> = t.a.iter().zip(u).map(|(a, x)| x * *a).collect();
            let dau = self.spectral.derivative(&au, t.order);
            for j in 0..out.len() {
                out[j] += t.coefficient * (du[j] * t.a[j] + dau[j]);
            }
        }
        out
    }

    /// Dense matrix, column by column.
    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let n = self.diagonal.len();
        let mut m = DMatrix::zeros(n, n);
        let mut e = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            e[j] = Complex64::new(1.0, 0.0);
            let col = self.apply(&e);
            for i in 0..n {
                m[(i, j)] = col[i];
            }
            e[j] = Complex64::new(0.0, 0.0);
        }
        m
    }
}

/// `R₀`, `R₁`, `R₂`, `R₃` for σ = 1.
#[derive(Debug, Clone)]
pub struct ZassenhausOperators {
    /// Diagonal of `R₀ = −½τε⁻¹V`.
    pub r0: Vec<Complex64>,
    /// `R₁ = c·∂ₓ²` with `c = ½τε`.
    pub r1_coefficient: Complex64,
    pub r2: ZassenhausOperator,
    pub r3: ZassenhausOperator,
}

pub fn zassenhaus_operators(
    grid: &SemiclassicalGrid,
    potential: &PotentialData,
    variant: R3Variant,
) -> ZassenhausOperators {
    let n = grid.n;
    let eps = grid.epsilon;
    let tau = grid.tau();
    let tau3 = tau.powu(3);
    let tau5 = tau.powu(5);
    let sp = grid.spectral();
    let v = potential.derivative(0);
    let v1 = potential.derivative(1);
    let v2 = potential.derivative(2);
    let v3 = potential.derivative(3);
    let v4 = potential.derivative(4);

    let r0 = v.iter().map(|&x| -0.5 * tau / eps * x).collect();
    let r1_coefficient = 0.5 * tau * eps;

    let mut r2 = ZassenhausOperator::new(n, sp.clone());
    let v1sq: Vec<f64> = v1.iter().map(|x| x * x).collect();
    r2.add_diagonal(tau3 / (24.0 * eps), &v1sq);
    r2.add_symmetrized(tau3 * eps / 12.0, v2.to_vec(), 2);

    let mut r3 = ZassenhausOperator::new(n, sp);
    let v2v1sq: Vec<f64> = v2.iter().zip(&v1sq).map(|(a, b)| a * b).collect();
    r3.add_diagonal(-tau5 / (120.0 * eps), &v2v1sq);
    r3.add_diagonal(-tau3 * eps / 24.0, v4);
    let v2sq: Vec<f64> = v2.iter().map(|x| x * x).collect();
    let v3v1: Vec<f64> = v3.iter().zip(v1).map(|(a, b)| a * b).collect();
    r3.add_symmetrized(7.0 * tau5 * eps / 240.0, v2sq, 2);
    r3.add_symmetrized(tau5 * eps / 240.0, v3v1, 2);
    let quartic = match variant {
        R3Variant::Printed => Some(eps.powi(-3)),
        R3Variant::Raised => Some(eps.powi(3)),
        R3Variant::Without => None,
    };
    if let Some(p) = quartic {
        r3.add_symmetrized(tau5 * p / 120.0, v4.to_vec(), 4);
    }

    ZassenhausOperators { r0, r1_coefficient, r2, r3 }
}

/// `exp(c∂ₓ²)u` by two FFTs; unitary when `c` is imaginary.
pub fn apply_exp_r1(spectral: &Spectral, u: &[Complex64], coefficient: Complex64) -> Vec<Complex64> {
    if coefficient == Complex64::new(0.0, 0.0) {
        return u.to_vec();
    }
    spectral.multiply(u, |k| (coefficient * spectral.derivative_symbol(k, 2)).exp())
}

/// Result of a Krylov exponential.
#[derive(Debug, Clone)]
pub struct KrylovOutcome {
    pub value: Vec<Complex64>,
    /// Dimension of the Krylov space actually used.
    pub dimension: usize,
    /// Estimate `β_{k}|[e^{T}e₁]_k|·‖u‖` of the truncation error.
    pub residual: f64,
    /// The space became invariant, so the result is exact up to round-off.
    pub breakdown: bool,
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm2(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Stop rule for the Lanczos loop.
enum KrylovStop {
    Dimension(usize),
    Tolerance { tol: f64, max_dim: usize },
}

/// `e^{A}u` for skew-Hermitian `A` in a `k`-dimensional Krylov space.
///
/// Lanczos runs on the Hermitian `B = −iA`, so the projected matrix is real
/// symmetric tridiagonal `T` and `e^{A}u ≈ ‖u‖ V e^{iT} e₁` is unitary by
/// construction.
pub fn krylov_exp_apply<A>(apply: A, u: &[Complex64], k: usize) -> Result<KrylovOutcome>
where
    A: Fn(&[Complex64]) -> Vec<Complex64>,
{
    if k == 0 {
        return Err(Error::invalid("Krylov dimension must be at least 1"));
    }
    lanczos_exp(apply, u, KrylovStop::Dimension(k))
}

/// As [`krylov_exp_apply`], growing the space until the residual estimate
/// falls below `tol·‖u‖`.
pub fn krylov_exp_apply_adaptive<A>(
    apply: A,
    u: &[Complex64],
    tol: f64,
    max_dim: usize,
) -> Result<KrylovOutcome>
where
    A: Fn(&[Complex64]) -> Vec<Complex64>,
{
    if max_dim == 0 || tol.is_nan() || tol <= 0.0 {
        return Err(Error::invalid("adaptive Krylov needs tol > 0 and max_dim ≥ 1"));
    }
    let out = lanczos_exp(apply, u, KrylovStop::Tolerance { tol, max_dim })?;
    let nu = norm2(u);
    if !out.breakdown && out.residual > tol * nu {
        return Err(Error::NonConvergence { iterations: out.dimension, residual: out.residual });
    }
    Ok(out)
}

fn tridiagonal_exp_e1(alpha: &[f64], beta: &[f64]) -> Vec<Complex64> {
    let m = alpha.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let q = eig.eigenvectors[(i, j)] * eig.eigenvectors[(0, j)];
                    Complex64::from_polar(q, eig.eigenvalues[j])
                })
                .sum()
        })
        .collect()
}

fn lanczos_exp<A>(apply: A, u: &[Complex64], stop: KrylovStop) -> Result<KrylovOutcome>
where
    A: Fn(&[Complex64]) -> Vec<Complex64>,
{
    let n = u.len();
    let nu = norm2(u);
    if nu == 0.0 {
        return Ok(KrylovOutcome { value: u.to_vec(), dimension: 0, residual: 0.0, breakdown: true });
    }
    let max_dim = match stop {
        KrylovStop::Dimension(k) => k.min(n),
        KrylovStop::Tolerance { max_dim, .. } => max_dim.min(n),
    };
    let mut basis: Vec<Vec<Complex64>> = vec![u.iter().map(|z| z / nu).collect()];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut scale = 0.0f64;
    let mut breakdown = false;
    let mut residual;
    let mut coeffs;
    loop {
        let j = basis.len() - 1;
        let mut w: Vec<Complex64> = apply(&basis[j]).into_iter().map(|z| -I * z).collect();
        if w.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite { step: 0 });
        }
        let a = dot(&basis[j], &w).re;
        alpha.push(a);
        // Full reorthogonalisation, twice.
        for _ in 0..2 {
            for v in &basis {
                let c = dot(v, &w);
                for (wi, vi) in w.iter_mut().zip(v) {
                    *wi -= c * vi;
                }
            }
        }
        let b = norm2(&w);
        scale = scale.max(a.abs()).max(beta.last().copied().unwrap_or(0.0));
        coeffs = tridiagonal_exp_e1(&alpha, &beta);
        let m = alpha.len();
        residual = b * coeffs[m - 1].norm() * nu;
        if b <= 1e-14 * scale.max(f64::MIN_POSITIVE) || b == 0.0 {
            breakdown = true;
            residual = 0.0;
            break;
        }
        let done = match stop {
            KrylovStop::Dimension(_) => m >= max_dim,
            KrylovStop::Tolerance { tol, .. } => residual <= tol * nu || m >= max_dim,
        };
        if done {
            break;
        }
        beta.push(b);
        basis.push(w.into_iter().map(|z| z / b).collect());
    }
    let mut value = vec![Complex64::new(0.0, 0.0); n];
    for (c, v) in coeffs.iter().zip(&basis) {
        let c = c * nu;
        for (x, vi) in value.iter_mut().zip(v) {
            *x += c * vi;
        }
    }
    Ok(KrylovOutcome { value, dimension: alpha.len(), residual, breakdown })
}

/// How the exponentials of `R₂` and `R₃` are formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KrylovMode {
    Fixed { r2: usize, r3: usize },
    Adaptive { tol: f64, max_dim: usize },
}

impl Default for KrylovMode {
    fn default() -> Self {
        KrylovMode::Fixed { r2: 3, r3: 2 }
    }
}

/// Symmetric Zassenhaus propagator for one fixed step.
#[derive(Debug, Clone)]
pub struct Zassenhaus {
    pub grid: SemiclassicalGrid,
    pub variant: R3Variant,
    pub krylov: KrylovMode,
    operators: ZassenhausOperators,
    spectral: Spectral,
}

/// Per-step Krylov bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    /// Largest residual estimate among the Krylov exponentials.
    pub max_residual: f64,
    pub krylov_dimensions: Vec<usize>,
}

impl Zassenhaus {
    pub fn new(grid: SemiclassicalGrid, potential: &PotentialData) -> Self {
        Zassenhaus::with_options(grid, potential, R3Variant::default(), KrylovMode::default())
    }

    pub fn with_options(
        grid: SemiclassicalGrid,
        potential: &PotentialData,
        variant: R3Variant,
        krylov: KrylovMode,
    ) -> Self {
        let operators = zassenhaus_operators(&grid, potential, variant);
        let spectral = grid.spectral();
        Zassenhaus { grid, variant, krylov, operators, spectral }
    }

    pub fn operators(&self) -> &ZassenhausOperators {
        &self.operators
    }

    /// Exponent labels in application order; the string is a palindrome.
    pub fn exponent_sequence() -> [&'static str; 7] {
        ["R0", "R1", "R2", "R3", "R2", "R1", "R0"]
    }

    fn exp_small(&self, op: &ZassenhausOperator, u: &[Complex64], k: usize, report: &mut StepReport) -> Result<Vec<Complex64>> {
        if op.is_zero() {
            return Ok(u.to_vec());
        }
        let out = match self.krylov {
            KrylovMode::Fixed { .. } => krylov_exp_apply(|x| op.apply(x), u, k)?,
            KrylovMode::Adaptive { tol, max_dim } => {
                krylov_exp_apply_adaptive(|x| op.apply(x), u, tol, max_dim)?
            }
        };
        report.max_residual = report.max_residual.max(out.residual);
        report.krylov_dimensions.push(out.dimension);
        Ok(out.value)
    }

    /// One step, with Krylov diagnostics.
    pub fn step_with_report(&self, u: &WaveFunction) -> Result<(WaveFunction, StepReport)> {
        if u.values.len() != self.grid.n {
            return Err(Error::invalid("wave function length does not match the grid"));
        }
        let (k2, k3) = match self.krylov {
            KrylovMode::Fixed { r2, r3 } => (r2, r3),
            KrylovMode::Adaptive { .. } => (0, 0),
        };
        let ops = &self.operators;
        let mut report = StepReport::default();
        let diag = |x: Vec<Complex64>| -> Vec<Complex64> {
            x.iter().zip(&ops.r0).map(|(a, d)| a * d.exp()).collect()
        };
        let mut w = diag(u.values.clone());
        w = apply_exp_r1(&self.spectral, &w, ops.r1_coefficient);
        w = self.exp_small(&ops.r2, &w, k2, &mut report)?;
        w = self.exp_small(&ops.r3, &w, k3, &mut report)?;
        w = self.exp_small(&ops.r2, &w, k2, &mut report)?;
        w = apply_exp_r1(&self.spectral, &w, ops.r1_coefficient);
        w = diag(w);
        let out = WaveFunction::new(w);
        if !out.is_finite() {
            return Err(Error::NonFinite { step: 0 });
        }
        Ok((out, report))
    }

    pub fn step(&self, u: &WaveFunction) -> Result<WaveFunction> {
        self.step_with_report(u).map(|(w, _)| w)
    }

    pub fn run(&self, u: &WaveFunction, steps: usize) -> Result<WaveFunction> {
        let mut w = u.clone();
        for s in 0..steps {
            w = self.step(&w).map_err(|e| e.at_step(s))?;
        }
        Ok(w)
    }
}

/// One Zassenhaus step on the given grid.
pub fn zassenhaus_step(
    grid: &SemiclassicalGrid,
    potential: &PotentialData,
    u: &WaveFunction,
) -> Result<WaveFunction> {
    Zassenhaus::new(grid.clone(), potential).step(u)
}

/// Largest `N` accepted by [`reference_propagator`].
pub const REFERENCE_MAX_N: usize = 512;

/// Collocation matrix of `∂ₓ²`, real symmetric.
pub fn second_derivative_matrix(n: usize) -> DMatrix<f64> {
    let sp = Spectral::new(n);
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        e[j] = Complex64::new(1.0, 0.0);
        let col = sp.derivative(&e, 2);
        for i in 0..n {
            m[(i, j)] = col[i].re;
        }
        e[j] = Complex64::new(0.0, 0.0);
    }
    // Remove round-off asymmetry.
    let mt = m.transpose();
    (m + mt) * 0.5
}

/// Dense `exp(h(iε∂ₓ² − iε⁻¹V))` of the collocation matrix.
///
/// The generator is `i·S` with `S = ε D₂ − ε⁻¹ diag(V)` real symmetric, so
/// the exponential is formed from the eigen-decomposition of `S`.
pub fn reference_propagator(
    grid: &SemiclassicalGrid,
    potential: &PotentialData,
    h: f64,
) -> Result<DMatrix<Complex64>> {
    let n = grid.n;
    if n > REFERENCE_MAX_N {
        return Err(Error::invalid(format!(
            "dense reference limited to N ≤ {REFERENCE_MAX_N}, got {n}"
        )));
    }
    let eps = grid.epsilon;
    let mut s = second_derivative_matrix(n) * eps;
    for (i, v) in potential.values().iter().enumerate() {
        s[(i, i)] -= v / eps;
    }
    let eig = SymmetricEigen::new(s);
    let q = eig.eigenvectors.map(|x| Complex64::new(x, 0.0));
    let phases = DMatrix::from_diagonal(
        &eig.eigenvalues.map(|l| Complex64::from_polar(1.0, h * l)),
    );
    Ok(&q * phases * q.transpose())
}

/// `P u` for a dense propagator.
pub fn apply_dense(p: &DMatrix<Complex64>, u: &WaveFunction) -> WaveFunction {
    let v = nalgebra::DVector::from_column_slice(&u.values);
    WaveFunction::new((p * v).as_slice().to_vec())
}
