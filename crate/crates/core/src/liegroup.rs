//! Lie-group methods on matrix groups and homogeneous spaces: commutators,
//! group-preserving exponentials, truncated dexpinv, RKMK3 and the fourth
//! order Magnus method.

use std::fmt;
use std::sync::Arc;

use log::debug;
use nalgebra::{ComplexField, DMatrix, DVector};

use crate::driver::Stepper;
use crate::error::{Error, Result};
use crate::state::State;

/// Scalars the Lie-group code works over: `f64` and `Complex<f64>`.
pub trait Scalar: ComplexField<RealField = f64> + Copy {}
impl<T: ComplexField<RealField = f64> + Copy> Scalar for T {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgebraTag {
    /// Skew-symmetric (real) matrices.
    So,
    /// Trace-free matrices.
    Sl,
    General,
    SkewHermitian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupTag {
    SO,
    SL,
    GL,
    U,
}

impl AlgebraTag {
    pub fn group(self) -> GroupTag {
        match self {
            AlgebraTag::So => GroupTag::SO,
            AlgebraTag::Sl => GroupTag::SL,
            AlgebraTag::General => GroupTag::GL,
            AlgebraTag::SkewHermitian => GroupTag::U,
        }
    }
}

fn max_abs<T: Scalar>(m: &DMatrix<T>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.modulus()))
}

/// Defect of the tag's defining relation; zero for `General`.
pub fn algebra_defect<T: Scalar>(m: &DMatrix<T>, tag: AlgebraTag) -> f64 {
    match tag {
        AlgebraTag::So => max_abs(&(m.transpose() + m)) + m.iter().map(|v| v.imaginary().abs()).fold(0.0, f64::max),
        AlgebraTag::SkewHermitian => max_abs(&(m.adjoint() + m)),
        AlgebraTag::Sl => m.trace().modulus(),
        AlgebraTag::General => 0.0,
    }
}

/// Defect of the group relation: `‖MᴴM − I‖` (plus `|det − 1|` for SO), or
/// `|det − 1|` for SL.
pub fn group_defect<T: Scalar>(m: &DMatrix<T>, tag: GroupTag) -> f64 {
    let n = m.nrows();
    let id = DMatrix::<T>::identity(n, n);
    let det_err = || (m.clone().determinant() - T::one()).modulus();
    match tag {
        GroupTag::SO => max_abs(&(m.adjoint() * m - &id)).max(det_err()),
        GroupTag::U => max_abs(&(m.adjoint() * m - &id)),
        GroupTag::SL => det_err(),
        GroupTag::GL => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraElement<T: Scalar> {
    pub matrix: DMatrix<T>,
    pub tag: AlgebraTag,
}

impl<T: Scalar> AlgebraElement<T> {
    /// Validated constructor: the tag relation must hold to 1e-12 relative to
    /// the size of the matrix.
    pub fn new(matrix: DMatrix<T>, tag: AlgebraTag) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::invalid("algebra elements are square matrices"));
        }
        let defect = algebra_defect(&matrix, tag);
        if defect > 1e-12 * max_abs(&matrix).max(1.0) {
            return Err(Error::invalid(format!("matrix is not in {tag:?} (defect {defect:.2e})")));
        }
        Ok(AlgebraElement { matrix, tag })
    }

    pub fn zero(n: usize, tag: AlgebraTag) -> Self {
        AlgebraElement {
            matrix: DMatrix::zeros(n, n),
            tag,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupElement<T: Scalar> {
    pub matrix: DMatrix<T>,
    pub tag: GroupTag,
}

impl<T: Scalar> GroupElement<T> {
    pub fn new(matrix: DMatrix<T>, tag: GroupTag) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::invalid("group elements are square matrices"));
        }
        let defect = group_defect(&matrix, tag);
        if defect > 1e-10 {
            return Err(Error::invalid(format!("matrix is not in {tag:?} (defect {defect:.2e})")));
        }
        Ok(GroupElement { matrix, tag })
    }

    pub fn identity(n: usize, tag: GroupTag) -> Self {
        GroupElement {
            matrix: DMatrix::identity(n, n),
            tag,
        }
    }

    pub fn defect(&self) -> f64 {
        group_defect(&self.matrix, self.tag)
    }
}

fn check_pair<T: Scalar>(a: &AlgebraElement<T>, b: &AlgebraElement<T>) -> Result<()> {
    if a.matrix.shape() != b.matrix.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch {:?} vs {:?}",
            a.matrix.shape(),
            b.matrix.shape()
        )));
    }
    if a.tag != b.tag {
        return Err(Error::invalid(format!("tag mismatch {:?} vs {:?}", a.tag, b.tag)));
    }
    Ok(())
}

fn bracket<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a * b - b * a
}

/// `[a, b] = ab − ba`.
pub fn commutator<T: Scalar>(a: &AlgebraElement<T>, b: &AlgebraElement<T>) -> Result<AlgebraElement<T>> {
    check_pair(a, b)?;
    Ok(AlgebraElement {
        matrix: bracket(&a.matrix, &b.matrix),
        tag: a.tag,
    })
}

/// Nearest unitary matrix (polar factor) `U Vᴴ` from the SVD.
pub fn polar_unitary<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᴴ");
    u * v_t
}

/// Matrix exponential landing in the group of the input's tag.
///
/// Padé scaling and squaring; compact-group outputs are replaced by their
/// polar factor when the orthogonality defect exceeds 1e-12.
pub fn expm<T: Scalar>(a: &AlgebraElement<T>) -> GroupElement<T> {
    let tag = a.tag.group();
    let mut m = a.matrix.exp();
    if matches!(tag, GroupTag::SO | GroupTag::U) {
        let defect = group_defect(&m, GroupTag::U);
        if defect > 1e-12 {
            debug!("expm: orthogonality defect {defect:.2e}, projecting onto {tag:?}");
            m = polar_unitary(&m);
        }
    }
    GroupElement { matrix: m, tag }
}

/// Bernoulli numbers `B_0 … B_8` with `B_1 = −½`.
const BERNOULLI: [f64; 9] = [
    1.0,
    -0.5,
    1.0 / 6.0,
    0.0,
    -1.0 / 30.0,
    0.0,
    1.0 / 42.0,
    0.0,
    -1.0 / 30.0,
];

/// `Σ_{m=0}^{m_max} (B_m/m!) ad_ω^m(a)`, the truncated inverse derivative of
/// the exponential map.
pub fn dexpinv_apply<T: Scalar>(a: &AlgebraElement<T>, omega: &AlgebraElement<T>, m_max: usize) -> Result<AlgebraElement<T>> {
    check_pair(a, omega)?;
    if m_max > 8 {
        return Err(Error::invalid("dexpinv truncation is limited to m_max ≤ 8"));
    }
    let mut term = a.matrix.clone();
    let mut sum = a.matrix.clone();
    let mut fact = 1.0;
    for (m, b) in BERNOULLI.iter().enumerate().take(m_max + 1).skip(1) {
        term = bracket(&omega.matrix, &term);
        fact *= m as f64;
        if *b != 0.0 {
            sum += &term * T::from_real(b / fact);
        }
    }
    Ok(AlgebraElement { matrix: sum, tag: a.tag })
}

/// How the group acts on manifold points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupAction {
    /// `Λ(p, y) = p y`
    Left,
    /// `Λ(p, y) = p y pᴴ`
    Isospectral,
}

impl GroupAction {
    pub fn apply<T: Scalar>(&self, p: &DMatrix<T>, y: &DMatrix<T>) -> DMatrix<T> {
        match self {
            GroupAction::Left => p * y,
            GroupAction::Isospectral => p * y * p.adjoint(),
        }
    }
}

type CoeffFn<T> = dyn Fn(f64, &DMatrix<T>) -> DMatrix<T> + Send + Sync;

/// `y' = a(t, y) · y` under a group action, with `a` valued in one algebra.
#[derive(Clone)]
pub struct LieGroupProblem<T: Scalar> {
    a: Arc<CoeffFn<T>>,
    pub tag: AlgebraTag,
    pub action: GroupAction,
}

impl<T: Scalar> fmt::Debug for LieGroupProblem<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LieGroupProblem")
            .field("tag", &self.tag)
            .field("action", &self.action)
            .finish()
    }
}

impl<T: Scalar> LieGroupProblem<T> {
    pub fn new(
        tag: AlgebraTag,
        action: GroupAction,
        a: impl Fn(f64, &DMatrix<T>) -> DMatrix<T> + Send + Sync + 'static,
    ) -> Self {
        LieGroupProblem {
            a: Arc::new(a),
            tag,
            action,
        }
    }

    /// Coefficient value, checked against the declared algebra.
    pub fn coefficient(&self, t: f64, y: &DMatrix<T>) -> Result<AlgebraElement<T>> {
        AlgebraElement::new((self.a)(t, y), self.tag)
    }

    /// `ẏ` itself: `a y` for the left action, `a y + y aᴴ` for the
    /// isospectral one.
    pub fn velocity(&self, t: f64, y: &DMatrix<T>) -> DMatrix<T> {
        let a = (self.a)(t, y);
        match self.action {
            GroupAction::Left => &a * y,
            GroupAction::Isospectral => &a * y + y * a.adjoint(),
        }
    }
}

fn exp_apply<T: Scalar>(problem: &LieGroupProblem<T>, w: DMatrix<T>, y: &DMatrix<T>) -> DMatrix<T> {
    let g = expm(&AlgebraElement { matrix: w, tag: problem.tag });
    problem.action.apply(&g.matrix, y)
}

/// Runge–Kutta–Munthe-Kaas method of order three built on Kutta's tableau:
///
/// ```text
/// k₁ = a(tₙ, yₙ)
/// k₂ = a(tₙ + h/2, Λ(e^{hk₁/2}, yₙ))
/// k₃ = a(tₙ + h, Λ(e^{−hk₁+2hk₂}, yₙ))
/// Δ  = h(k₁/6 + 2k₂/3 + k₃/6)
/// ω  = Δ + (h/6)[Δ, k₁]
/// y_{n+1} = Λ(e^ω, yₙ)
/// ```
pub fn rkmk3_step<T: Scalar>(problem: &LieGroupProblem<T>, y: &DMatrix<T>, t: f64, h: f64) -> Result<DMatrix<T>> {
    let r = |v: f64| T::from_real(v);
    let k1 = problem.coefficient(t, y)?.matrix;
    let k2 = problem
        .coefficient(t + 0.5 * h, &exp_apply(problem, &k1 * r(0.5 * h), y))?
        .matrix;
    let k3 = problem
        .coefficient(t + h, &exp_apply(problem, &k1 * r(-h) + &k2 * r(2.0 * h), y))?
        .matrix;
    let delta = (&k1 * r(1.0 / 6.0) + &k2 * r(2.0 / 3.0) + &k3 * r(1.0 / 6.0)) * r(h);
    let omega = &delta + bracket(&delta, &k1) * r(h / 6.0);
    Ok(exp_apply(problem, omega, y))
}

/// Fourth-order Magnus step for `v' = a(t) v`:
/// `ω = ½h(a₁+a₂) + (√3/12)h²[a₂, a₁]` with `a₁,₂` sampled at the two
/// Gauss–Legendre nodes; returns `e^ω v`.
pub fn magnus4_step<T: Scalar>(
    a: &dyn Fn(f64) -> DMatrix<T>,
    tag: AlgebraTag,
    v: &DMatrix<T>,
    t: f64,
    h: f64,
) -> Result<DMatrix<T>> {
    let s = 3f64.sqrt() / 6.0;
    let a1 = AlgebraElement::new(a(t + (0.5 - s) * h), tag)?;
    let a2 = AlgebraElement::new(a(t + (0.5 + s) * h), tag)?;
    let omega = (&a1.matrix + &a2.matrix) * T::from_real(0.5 * h)
        + bracket(&a2.matrix, &a1.matrix) * T::from_real(3f64.sqrt() / 12.0 * h * h);
    let g = expm(&AlgebraElement { matrix: omega, tag });
    Ok(g.matrix * v)
}

fn unflatten(x: &State, n: usize) -> Result<DMatrix<f64>> {
    if x.len() != n * n {
        return Err(Error::invalid(format!("state of length {} is not a {n}×{n} matrix", x.len())));
    }
    Ok(DMatrix::from_column_slice(n, n, x.as_slice()))
}

fn flatten(m: &DMatrix<f64>) -> State {
    DVector::from_column_slice(m.as_slice())
}

/// RKMK3 on column-major flattened real matrices.
#[derive(Debug, Clone)]
pub struct Rkmk3 {
    pub problem: LieGroupProblem<f64>,
    pub n: usize,
}

impl Stepper for Rkmk3 {
    fn step(&self, t: f64, x: &State, h: f64) -> Result<State> {
        let y = unflatten(x, self.n)?;
        Ok(flatten(&rkmk3_step(&self.problem, &y, t, h)?))
    }
}

type LinearCoeff = dyn Fn(f64) -> DMatrix<f64> + Send + Sync;

/// Magnus4 on column-major flattened real matrices.
#[derive(Clone)]
pub struct Magnus4 {
    pub a: Arc<LinearCoeff>,
    pub tag: AlgebraTag,
    pub n: usize,
}

impl fmt::Debug for Magnus4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Magnus4").field("tag", &self.tag).field("n", &self.n).finish()
    }
}

impl Stepper for Magnus4 {
    fn step(&self, t: f64, x: &State, h: f64) -> Result<State> {
        let v = unflatten(x, self.n)?;
        let a = |s: f64| (self.a)(s);
        Ok(flatten(&magnus4_step(&a, self.tag, &v, t, h)?))
    }
}

/// `hat(w)` with `hat(w) x = w × x`.
pub fn hat(w: &[f64; 3]) -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::propagate;
    use crate::order::{observed_order, Reference};
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_skew(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &m - m.transpose()
    }

    #[test]
    fn commutator_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = AlgebraElement::new(random_skew(3, &mut rng), AlgebraTag::So).unwrap();
        assert_eq!(commutator(&a, &a).unwrap().matrix.amax(), 0.0);
        let d1 = AlgebraElement::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])), AlgebraTag::General).unwrap();
        let d2 = AlgebraElement::new(DMatrix::from_diagonal(&DVector::from_vec(vec![-3.0, 0.5])), AlgebraTag::General).unwrap();
        assert_eq!(commutator(&d1, &d2).unwrap().matrix.amax(), 0.0);
        let e1 = AlgebraElement::new(hat(&[1.0, 0.0, 0.0]), AlgebraTag::So).unwrap();
        let e2 = AlgebraElement::new(hat(&[0.0, 1.0, 0.0]), AlgebraTag::So).unwrap();
        let e3 = hat(&[0.0, 0.0, 1.0]);
        let c = commutator(&e1, &e2).unwrap();
        assert_eq!(c.matrix, e3);
        assert!(algebra_defect(&c.matrix, AlgebraTag::So) == 0.0);
        let big = AlgebraElement::new(DMatrix::<f64>::zeros(2, 2), AlgebraTag::So).unwrap();
        assert!(commutator(&e1, &big).is_err());
    }

    #[test]
    fn tags_are_validated() {
        assert!(AlgebraElement::new(DMatrix::<f64>::identity(2, 2), AlgebraTag::So).is_err());
        assert!(AlgebraElement::new(DMatrix::<f64>::identity(2, 2), AlgebraTag::Sl).is_err());
        assert!(GroupElement::new(DMatrix::<f64>::identity(2, 2) * 2.0, GroupTag::SL).is_err());
        let reflection = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(GroupElement::new(reflection, GroupTag::SO).is_err());
    }

    #[test]
    fn expm_examples() {
        let z = AlgebraElement::<f64>::zero(3, AlgebraTag::So);
        assert_eq!(expm(&z).matrix, DMatrix::identity(3, 3));
        let theta = std::f64::consts::PI / 3.0;
        let gen = DMatrix::from_row_slice(2, 2, &[0.0, -theta, theta, 0.0]);
        let r = expm(&AlgebraElement::new(gen, AlgebraTag::So).unwrap()).matrix;
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, -0.8660254037844386, 0.8660254037844386, 0.5]);
        assert!((r - expected).amax() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = AlgebraElement::new(random_skew(5, &mut rng), AlgebraTag::So).unwrap();
        let g = expm(&a);
        assert!(g.defect() <= 1e-12);
        assert_eq!(g.tag, GroupTag::SO);
    }

    #[test]
    fn expm_skew_hermitian_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = DMatrix::from_fn(4, 4, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let a = AlgebraElement::new(&m - m.adjoint(), AlgebraTag::SkewHermitian).unwrap();
        assert!(expm(&a).defect() <= 1e-12);
    }

    #[test]
    fn dexpinv_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = AlgebraElement::new(random_skew(3, &mut rng), AlgebraTag::So).unwrap();
        let w = AlgebraElement::new(random_skew(3, &mut rng), AlgebraTag::So).unwrap();
        assert_eq!(dexpinv_apply(&a, &w, 0).unwrap(), a);
        let m1 = dexpinv_apply(&a, &w, 1).unwrap().matrix;
        assert!((m1 - (&a.matrix - bracket(&w.matrix, &a.matrix) * 0.5)).amax() < 1e-15);
        let a2 = AlgebraElement { matrix: &a.matrix * 2.0, tag: AlgebraTag::So };
        assert!((dexpinv_apply(&a, &a2, 4).unwrap().matrix - &a.matrix).amax() < 1e-15);
        // Remainder is linear in ‖ω‖.
        let rem = |s: f64| {
            let ws = AlgebraElement { matrix: &w.matrix * s, tag: AlgebraTag::So };
            (dexpinv_apply(&a, &ws, 2).unwrap().matrix - &a.matrix).amax()
        };
        let ratio = rem(1e-3) / rem(5e-4);
        assert!((ratio - 2.0).abs() < 1e-2, "ratio {ratio}");
        assert!(dexpinv_apply(&a, &w, 9).is_err());
    }

    #[test]
    fn dexpinv_solves_the_derivative_identity() {
        // d/ds exp(ω + s·u)|₀ = dexp_ω(u) exp(ω); dexpinv inverts dexp.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = AlgebraElement::new(random_skew(3, &mut rng) * 0.2, AlgebraTag::So).unwrap();
        let u = AlgebraElement::new(random_skew(3, &mut rng), AlgebraTag::So).unwrap();
        let eps = 1e-6;
        let dexp = ((&w.matrix + &u.matrix * eps).exp() - (&w.matrix - &u.matrix * eps).exp()) / (2.0 * eps)
            * w.matrix.exp().transpose();
        let back = dexpinv_apply(&AlgebraElement { matrix: dexp, tag: AlgebraTag::General }, &AlgebraElement { matrix: w.matrix.clone(), tag: AlgebraTag::General }, 8)
            .unwrap();
        assert!((back.matrix - &u.matrix).amax() < 1e-6);
    }

    #[test]
    fn action_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for action in [GroupAction::Left, GroupAction::Isospectral] {
            for _ in 0..20 {
                let p = random_skew(4, &mut rng).exp();
                let q = random_skew(4, &mut rng).exp();
                let y = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
                assert!((action.apply(&DMatrix::identity(4, 4), &y) - &y).amax() <= 1e-15);
                let lhs = action.apply(&p, &action.apply(&q, &y));
                let rhs = action.apply(&(&p * &q), &y);
                assert!((lhs - rhs).amax() <= 1e-10);
            }
        }
    }

    #[test]
    fn rkmk3_constant_coefficient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_skew(3, &mut rng);
        let a2 = a.clone();
        let p = LieGroupProblem::new(AlgebraTag::So, GroupAction::Left, move |_, _| a2.clone());
        let y = DMatrix::identity(3, 3);
        let y1 = rkmk3_step(&p, &y, 0.0, 0.3).unwrap();
        assert!((y1 - (a * 0.3).exp()).amax() < 1e-14);
    }

    #[test]
    fn rkmk3_commuting_time_dependence_is_exact() {
        // a(t) = tE: all values commute, so the step is exp(E ∫ t dt).
        let e = hat(&[0.3, -0.2, 0.9]);
        let e2 = e.clone();
        let p = LieGroupProblem::new(AlgebraTag::So, GroupAction::Left, move |t, _| &e2 * t);
        let (t, h) = (0.4, 0.25);
        let y1 = rkmk3_step(&p, &DMatrix::identity(3, 3), t, h).unwrap();
        let exact = (&e * (0.5 * ((t + h) * (t + h) - t * t))).exp();
        assert!((y1 - exact).amax() < 1e-14);
    }

    fn rigid_like() -> Rkmk3 {
        // y' = hat(ω(t, y)) y on SO(3) with a state-dependent angular velocity.
        let p = LieGroupProblem::new(AlgebraTag::So, GroupAction::Left, |t: f64, y: &DMatrix<f64>| {
            hat(&[y[(0, 1)] + t.cos(), 0.5 * y[(2, 0)], 1.0 - y[(1, 2)] * y[(0, 0)]])
        });
        Rkmk3 { problem: p, n: 3 }
    }

    #[test]
    fn rkmk3_is_third_order_and_stays_on_so3() {
        let stepper = rigid_like();
        let x0 = flatten(&DMatrix::identity(3, 3));
        let p = observed_order(&stepper, &x0, 1.0, &[0.1, 0.05, 0.025, 0.0125], &Reference::Computed).unwrap();
        assert!((p - 3.0).abs() < 0.3, "order {p}");
        let x = propagate(&stepper, &x0, 0.0, 0.05, 10_000).unwrap();
        assert!(group_defect(&unflatten(&x, 3).unwrap(), GroupTag::SO) <= 1e-9);
    }

    #[test]
    fn rkmk3_isospectral_flow_keeps_eigenvalues() {
        // Toda-like flow y' = [B(y), y] with B the skew part built from the
        // strictly lower triangle.
        let p = LieGroupProblem::new(AlgebraTag::So, GroupAction::Isospectral, |_, y: &DMatrix<f64>| {
            let n = y.nrows();
            DMatrix::from_fn(n, n, |i, j| if i > j { y[(i, j)] } else if i < j { -y[(j, i)] } else { 0.0 })
        });
        let y0 = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.5, 0.0, 0.2, 0.5, -0.3, 0.7, 0.0, 0.0, 0.7, 2.0, 0.1, 0.2, 0.0, 0.1, 0.4,
        ]);
        let stepper = Rkmk3 { problem: p, n: 4 };
        let x = propagate(&stepper, &flatten(&y0), 0.0, 0.01, 1000).unwrap();
        let sorted = |m: DMatrix<f64>| {
            let mut v: Vec<f64> = m.symmetric_eigenvalues().iter().cloned().collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (e0, e1) = (sorted(y0), sorted(unflatten(&x, 4).unwrap()));
        for (a, b) in e0.iter().zip(&e1) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn magnus_scalar_linear_is_exact() {
        let a = |t: f64| DMatrix::from_element(1, 1, t);
        let v = magnus4_step(&a, AlgebraTag::General, &DMatrix::from_element(1, 1, 1.0), 0.3, 0.2).unwrap();
        let integral = 0.5 * (0.5f64.powi(2) - 0.3f64.powi(2));
        assert!((v[(0, 0)] - integral.exp()).abs() < 1e-15);
    }

    #[test]
    fn magnus_skew_stays_orthogonal() {
        let a = |t: f64| hat(&[t.sin(), 1.0, t * t]);
        let v = magnus4_step(&a, AlgebraTag::So, &DMatrix::identity(3, 3), 0.0, 0.3).unwrap();
        assert!(group_defect(&v, GroupTag::SO) <= 1e-12);
    }

    #[test]
    fn magnus_mathieu_order_four() {
        let m = Magnus4 {
            a: Arc::new(|t: f64| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -(1.0 + 0.2 * t.cos()), 0.0])),
            tag: AlgebraTag::Sl,
            n: 2,
        };
        let x0 = flatten(&DMatrix::identity(2, 2));
        let p = observed_order(&m, &x0, 2.0, &[0.2, 0.1, 0.05, 0.025], &Reference::Computed).unwrap();
        assert!((p - 4.0).abs() < 0.3, "order {p}");
    }
}
