//! Splitting and composition: products of sub-flows `e^{w₁hL_{i₁}} ⋯ e^{w_m hL_{i_m}}`,
//! Strang splitting and the Yoshida order-raising triple jump.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::driver::{FieldMethod, Stepper};
use crate::error::{Error, Result};
use crate::problem::VectorField;
use crate::state::{max_norm, State};

type FlowFn = dyn Fn(&State, f64) -> Result<State> + Send + Sync;

/// How a part is advanced over a (possibly negative) time `τ`.
#[derive(Clone)]
pub enum PartFlow {
    /// Closed-form flow `(x, τ) ↦ φ_τ(x)`.
    Exact(Arc<FlowFn>),
    /// One step of a one-step method of sufficient order.
    Stepper(Arc<dyn FieldMethod>),
}

/// One summand `L_i` of a split vector field.
#[derive(Clone)]
pub struct Part {
    pub field: Arc<dyn VectorField>,
    pub flow: PartFlow,
}

impl Part {
    pub fn exact(
        field: impl VectorField + 'static,
        flow: impl Fn(&State, f64) -> Result<State> + Send + Sync + 'static,
    ) -> Self {
        Part {
            field: Arc::new(field),
            flow: PartFlow::Exact(Arc::new(flow)),
        }
    }

    pub fn with_stepper(field: impl VectorField + 'static, method: impl FieldMethod + 'static) -> Self {
        Part {
            field: Arc::new(field),
            flow: PartFlow::Stepper(Arc::new(method)),
        }
    }

    pub fn advance(&self, x: &State, tau: f64) -> Result<State> {
        match &self.flow {
            PartFlow::Exact(phi) => phi(x, tau),
            PartFlow::Stepper(m) => m.step(self.field.as_ref(), 0.0, x, tau),
        }
    }
}

/// A vector field written as a sum of parts with computable flows.
#[derive(Clone)]
pub struct SplitProblem {
    parts: Vec<Part>,
}

impl fmt::Debug for SplitProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SplitProblem").field("parts", &self.parts.len()).finish()
    }
}

impl SplitProblem {
    pub fn new(parts: Vec<Part>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::invalid("a split problem needs at least one part"));
        }
        let d = parts[0].field.dim();
        if parts.iter().any(|p| p.field.dim() != d) {
            return Err(Error::invalid("all parts must have the same dimension"));
        }
        Ok(SplitProblem { parts })
    }

    /// Like [`SplitProblem::new`], additionally checking that the parts sum to
    /// `full` at random points in `[-1, 1]^d` within 1e-10.
    pub fn checked(parts: Vec<Part>, full: &dyn VectorField, seed: u64) -> Result<Self> {
        let sp = Self::new(parts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let x = DVector::from_fn(full.dim(), |_, _| rng.random_range(-1.0..1.0));
            let sum = sp.eval(0.0, &x);
            let target = full.eval(0.0, &x);
            let defect = max_norm(&(&sum - &target));
            if defect > 1e-10 * max_norm(&target).max(1.0) {
                return Err(Error::invalid(format!(
                    "parts do not sum to the full field (defect {defect:.2e})"
                )));
            }
        }
        Ok(sp)
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    pub fn dim(&self) -> usize {
        self.parts[0].field.dim()
    }

    /// Sum of the parts.
    pub fn eval(&self, t: f64, x: &State) -> State {
        self.parts
            .iter()
            .fold(DVector::zeros(x.len()), |acc, p| acc + p.field.eval(t, x))
    }
}

/// Ordered list of `(part, weight)` pairs with a declared order.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionScheme {
    pub name: String,
    pub entries: Vec<(usize, f64)>,
    pub order: usize,
    /// How many copies of the innermost base scheme this one is built from.
    pub base_applications: usize,
}

impl CompositionScheme {
    pub fn new(name: &str, entries: Vec<(usize, f64)>, order: usize) -> Result<Self> {
        let scheme = CompositionScheme {
            name: name.to_string(),
            entries,
            order,
            base_applications: 1,
        };
        scheme.check_consistency()?;
        Ok(scheme)
    }

    pub fn n_parts(&self) -> usize {
        self.entries.iter().map(|(i, _)| i + 1).max().unwrap_or(0)
    }

    /// Weight sums per part.
    pub fn part_weights(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_parts()];
        for &(i, w) in &self.entries {
            sums[i] += w;
        }
        sums
    }

    pub fn check_consistency(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::invalid("empty composition scheme"));
        }
        for (i, s) in self.part_weights().iter().enumerate() {
            if (s - 1.0).abs() > 1e-13 {
                return Err(Error::invalid(format!("weights of part {i} sum to {s}, not 1")));
            }
        }
        Ok(())
    }

    /// True iff the coefficient string equals its reversal.
    pub fn is_palindromic(&self) -> bool {
        let n = self.entries.len();
        (0..n).all(|k| {
            let (a, wa) = self.entries[k];
            let (b, wb) = self.entries[n - 1 - k];
            a == b && (wa - wb).abs() <= 1e-15 * wa.abs().max(1.0)
        })
    }
}

/// `(½L₁)(L₂)(½L₁)`.
pub fn strang_scheme() -> CompositionScheme {
    CompositionScheme::new("strang", vec![(0, 0.5), (1, 1.0), (0, 0.5)], 2).expect("consistent")
}

/// Lie–Trotter `(L₁)(L₂)`, first order and not symmetric.
pub fn lie_trotter_scheme() -> CompositionScheme {
    CompositionScheme::new("lie-trotter", vec![(0, 1.0), (1, 1.0)], 1).expect("consistent")
}

/// Yoshida's α for a base of order `2P`.
pub fn yoshida_alpha(order: usize) -> f64 {
    let r = 2f64.powf(1.0 / (order as f64 + 1.0));
    (r - 1.0) / (2.0 - r)
}

/// Triple jump `Φ((1+α)h) Φ(−(1+2α)h) Φ((1+α)h)`, raising an even order `2P`
/// of a palindromic scheme to `2P+2`.
pub fn yoshida_boost(base: &CompositionScheme) -> Result<CompositionScheme> {
    if !base.is_palindromic() {
        return Err(Error::invalid(format!("`{}` is not palindromic", base.name)));
    }
    if base.order % 2 != 0 {
        return Err(Error::invalid(format!("`{}` has odd order {}", base.name, base.order)));
    }
    let alpha = yoshida_alpha(base.order);
    let outer = 1.0 + alpha;
    let inner = -(1.0 + 2.0 * alpha);
    let mut entries = Vec::with_capacity(3 * base.entries.len());
    for gamma in [outer, inner, outer] {
        entries.extend(base.entries.iter().map(|&(i, w)| (i, gamma * w)));
    }
    let mut boosted = CompositionScheme::new(&format!("yoshida({})", base.name), entries, base.order + 2)?;
    boosted.base_applications = 3 * base.base_applications;
    Ok(boosted)
}

/// Apply the scheme's sub-flows left to right.
pub fn compose_step(scheme: &CompositionScheme, split: &SplitProblem, x: &State, h: f64) -> Result<State> {
    let mut y = x.clone();
    for &(i, w) in &scheme.entries {
        let part = split
            .parts
            .get(i)
            .ok_or_else(|| Error::invalid(format!("scheme refers to missing part {i}")))?;
        y = part.advance(&y, w * h).map_err(|e| Error::PartFailed {
            part: i,
            source: Box::new(e),
        })?;
    }
    Ok(y)
}

/// A scheme bound to a split problem.
#[derive(Debug, Clone)]
pub struct Composition {
    pub scheme: CompositionScheme,
    pub split: SplitProblem,
}

impl Composition {
    pub fn new(scheme: CompositionScheme, split: SplitProblem) -> Result<Self> {
        if scheme.n_parts() > split.parts.len() {
            return Err(Error::invalid(format!(
                "scheme uses {} parts, problem has {}",
                scheme.n_parts(),
                split.parts.len()
            )));
        }
        Ok(Composition { scheme, split })
    }
}

impl Stepper for Composition {
    fn step(&self, _t: f64, x: &State, h: f64) -> Result<State> {
        compose_step(&self.scheme, &self.split, x, h)
    }
}

/// `‖Φ_{−h}(Φ_h(x)) − x‖∞`.
pub fn time_symmetry_defect(stepper: &dyn Stepper, x: &State, h: f64) -> Result<f64> {
    let y = stepper.step(0.0, x, h)?;
    let z = stepper.step(h, &y, -h)?;
    Ok(max_norm(&(z - x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::order::{observed_order, Reference};
    use crate::problem::FnField;
    use crate::state::state;
    use nalgebra::DMatrix;

    fn linear_part(a: DMatrix<f64>) -> Part {
        let a2 = a.clone();
        Part::exact(FnField::autonomous(a.nrows(), move |x| &a * x), move |x, tau| {
            Ok((&a2 * tau).exp() * x)
        })
    }

    // Pendulum H = ½p² − cos q on x = (p, q), split into kinetic and potential parts.
    fn split_pendulum() -> SplitProblem {
        let kinetic = Part::exact(FnField::autonomous(2, |x| state(&[0.0, x[0]])), |x, tau| {
            Ok(state(&[x[0], x[1] + tau * x[0]]))
        });
        let potential = Part::exact(FnField::autonomous(2, |x| state(&[-x[1].sin(), 0.0])), |x, tau| {
            Ok(state(&[x[0] - tau * x[1].sin(), x[1]]))
        });
        let full = FnField::autonomous(2, |x| state(&[-x[1].sin(), x[0]]));
        SplitProblem::checked(vec![potential, kinetic], &full, 7).unwrap()
    }

    #[test]
    fn strang_is_palindromic_and_consistent() {
        let s = strang_scheme();
        assert!(s.is_palindromic());
        assert_eq!(s.part_weights(), vec![1.0, 1.0]);
        assert!(!lie_trotter_scheme().is_palindromic());
    }

    #[test]
    fn yoshida_coefficients() {
        let b = yoshida_boost(&strang_scheme()).unwrap();
        let alpha = yoshida_alpha(2);
        assert!((alpha - 0.35120719195965763).abs() < 1e-15);
        assert!((1.0 + alpha - 1.3512071919596576).abs() < 1e-15);
        assert!((-(1.0 + 2.0 * alpha) + 1.7024143839193153).abs() < 1e-15);
        assert!(b.is_palindromic());
        assert_eq!(b.order, 4);
        let bb = yoshida_boost(&b).unwrap();
        assert_eq!(bb.order, 6);
        assert_eq!(bb.base_applications, 9);
        assert!(bb.is_palindromic());
        for w in bb.part_weights() {
            assert!((w - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn boost_rejects_non_palindromic() {
        assert!(yoshida_boost(&lie_trotter_scheme()).is_err());
    }

    #[test]
    fn single_part_gives_its_flow() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, 0.1]);
        let split = SplitProblem::new(vec![linear_part(a.clone())]).unwrap();
        let scheme = CompositionScheme::new("one", vec![(0, 1.0)], 1).unwrap();
        let x = state(&[1.0, 0.5]);
        let y = compose_step(&scheme, &split, &x, 0.3).unwrap();
        assert_eq!(y, (a * 0.3).exp() * x);
    }

    #[test]
    fn commuting_parts_are_exact() {
        let d1 = DMatrix::from_diagonal(&state(&[1.0, -0.5]));
        let d2 = DMatrix::from_diagonal(&state(&[0.2, 0.7]));
        let split = SplitProblem::new(vec![linear_part(d1.clone()), linear_part(d2.clone())]).unwrap();
        let x = state(&[1.0, 2.0]);
        let exact = ((d1 + d2) * 0.4).exp() * &x;
        for scheme in [strang_scheme(), lie_trotter_scheme(), yoshida_boost(&strang_scheme()).unwrap()] {
            let y = compose_step(&scheme, &split, &x, 0.4).unwrap();
            assert!(max_norm(&(y - &exact)) < 1e-14, "{}", scheme.name);
        }
    }

    #[test]
    fn strang_local_error_is_third_order() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, -1.0, 0.3]);
        let split = SplitProblem::new(vec![linear_part(a.clone()), linear_part(b.clone())]).unwrap();
        let x = state(&[1.0, -0.5]);
        let err = |h: f64| {
            let exact = ((&a + &b) * h).exp() * &x;
            max_norm(&(compose_step(&strang_scheme(), &split, &x, h).unwrap() - exact))
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 8.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn orders_on_split_pendulum() {
        let split = split_pendulum();
        let x0 = state(&[0.0, 1.0]);
        let strang = strang_scheme();
        let y4 = yoshida_boost(&strang).unwrap();
        let y6 = yoshida_boost(&y4).unwrap();
        let cases = [
            (strang, vec![0.1, 0.05, 0.025, 0.0125], 2.0, 0.2),
            (y4, vec![0.1, 0.05, 0.025, 0.0125], 4.0, 0.3),
            (y6, vec![0.2, 0.1, 0.05, 0.025], 6.0, 0.5),
        ];
        for (scheme, hs, expected, tol) in cases {
            let c = Composition::new(scheme, split.clone()).unwrap();
            let p = observed_order(&c, &x0, 1.0, &hs, &Reference::Computed).unwrap();
            assert!((p - expected).abs() < tol, "{}: order {p}", c.scheme.name);
        }
    }

    #[test]
    fn palindromic_time_symmetry() {
        let split = split_pendulum();
        let x = state(&[0.3, 1.2]);
        for scheme in [strang_scheme(), yoshida_boost(&strang_scheme()).unwrap()] {
            let c = Composition::new(scheme, split.clone()).unwrap();
            assert!(time_symmetry_defect(&c, &x, 0.1).unwrap() <= 1e-14);
        }
    }

    #[test]
    fn euler_is_not_time_symmetric() {
        let euler = |_t: f64, x: &State, h: f64| Ok(x + x.map(|v| v * v) * h);
        let d = time_symmetry_defect(&euler, &state(&[1.0]), 0.1).unwrap();
        // Φ_h(1) = 1.1, Φ_{−h}(1.1) = 1.1 − 0.121 = 0.979
        assert!((d - 0.021).abs() < 1e-14, "defect {d}");
    }

    #[test]
    fn part_failure_names_part() {
        let ok = linear_part(DMatrix::identity(1, 1));
        let bad = Part::exact(FnField::autonomous(1, |x| x.clone()), |_, _| {
            Err(Error::invalid("boom"))
        });
        let split = SplitProblem::new(vec![ok, bad]).unwrap();
        let err = compose_step(&strang_scheme(), &split, &state(&[1.0]), 0.1).unwrap_err();
        assert!(matches!(err, Error::PartFailed { part: 1, .. }));
    }

    #[test]
    fn inconsistent_split_rejected() {
        let a = linear_part(DMatrix::identity(1, 1));
        let full = FnField::autonomous(1, |x| 2.0 * x);
        assert!(SplitProblem::checked(vec![a], &full, 1).is_err());
    }
}
