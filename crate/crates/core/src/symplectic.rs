//! Runge–Kutta and partitioned integrators for canonical Hamiltonian systems,
//! with symplecticity diagnostics.
//!
//! Phase-space ordering is `x = (p, q)`: the first `d` components are momenta.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::driver::FieldMethod;
use crate::error::{Error, Result};
use crate::fd::{fd_gradient, try_fd_jacobian};
use crate::problem::VectorField;
use crate::solver::{solve_implicit, SolverSettings};
use crate::state::State;

#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    pub name: String,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub order: usize,
}

impl ButcherTableau {
    /// Build a tableau, checking `c_i = Σ_j A_ij`.
    pub fn new(name: &str, a: DMatrix<f64>, b: DVector<f64>, c: DVector<f64>, order: usize) -> Result<Self> {
        let s = b.len();
        if a.nrows() != s || a.ncols() != s || c.len() != s {
            return Err(Error::invalid("tableau shapes do not agree"));
        }
        for i in 0..s {
            let row: f64 = a.row(i).sum();
            if (row - c[i]).abs() > 1e-14 {
                return Err(Error::invalid(format!(
                    "tableau row {i} sums to {row}, node is {}",
                    c[i]
                )));
            }
        }
        Ok(ButcherTableau {
            name: name.to_string(),
            a,
            b,
            c,
            order,
        })
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn is_explicit(&self) -> bool {
        let s = self.stages();
        (0..s).all(|i| (i..s).all(|j| self.a[(i, j)] == 0.0))
    }

    /// Gauss–Legendre collocation with `s` stages, order `2s`.
    #[allow(clippy::excessive_precision)]
    pub fn gauss_legendre(s: usize) -> Result<Self> {
        let (a, b, c): (Vec<f64>, Vec<f64>, Vec<f64>) = match s {
            1 => (vec![0.5], vec![1.0], vec![0.5]),
            2 => (
                vec![
                    0.25,
                    -0.038675134594812882254574390251,
                    0.538675134594812882254574390251,
                    0.25,
                ],
                vec![0.5, 0.5],
                vec![
                    0.211324865405187117745425609749,
                    0.788675134594812882254574390251,
                ],
            ),
            3 => (
                vec![
                    0.138888888888888888888888888889,
                    -0.0359766675249389034563954710966,
                    0.00978944401530832604958004222948,
                    0.300263194980864592438024947213,
                    0.222222222222222222222222222222,
                    -0.0224854172030868146602471694354,
                    0.267988333762469451728197735548,
                    0.480421111969383347900839915541,
                    0.138888888888888888888888888889,
                ],
                vec![
                    0.277777777777777777777777777778,
                    0.444444444444444444444444444444,
                    0.277777777777777777777777777778,
                ],
                vec![
                    0.112701665379258311482073460022,
                    0.5,
                    0.887298334620741688517926539978,
                ],
            ),
            _ => return Err(Error::invalid(format!("Gauss–Legendre tables exist for s = 1, 2, 3, not {s}"))),
        };
        Self::new(
            &format!("gauss-legendre-{s}"),
            DMatrix::from_row_slice(s, s, &a),
            DVector::from_vec(b),
            DVector::from_vec(c),
            2 * s,
        )
    }

    pub fn explicit_euler() -> Self {
        Self::new(
            "explicit-euler",
            DMatrix::zeros(1, 1),
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
            1,
        )
        .expect("valid tableau")
    }

    pub fn rk4() -> Self {
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(4, 4, &[
            0.0, 0.0, 0.0, 0.0,
            0.5, 0.0, 0.0, 0.0,
            0.0, 0.5, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
        ]);
        Self::new(
            "rk4",
            a,
            DVector::from_vec(vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]),
            DVector::from_vec(vec![0.0, 0.5, 0.5, 1.0]),
            4,
        )
        .expect("valid tableau")
    }

    /// Kutta's three-stage third-order method, the base of RKMK3.
    pub fn kutta3() -> Self {
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(3, 3, &[
            0.0, 0.0, 0.0,
            0.5, 0.0, 0.0,
            -1.0, 2.0, 0.0,
        ]);
        Self::new(
            "kutta3",
            a,
            DVector::from_vec(vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]),
            DVector::from_vec(vec![0.0, 0.5, 1.0]),
            3,
        )
        .expect("valid tableau")
    }
}

/// Result of the algebraic symplecticity test `b_i A_ij + b_j A_ji − b_i b_j = 0`.
#[derive(Debug, Clone)]
pub struct SymplecticityCheck {
    pub symplectic: bool,
    pub max_defect: f64,
    pub defect: DMatrix<f64>,
}

pub fn rk_symplecticity_check(tableau: &ButcherTableau) -> SymplecticityCheck {
    let (a, b) = (&tableau.a, &tableau.b);
    let s = b.len();
    let defect = DMatrix::from_fn(s, s, |i, j| b[i] * a[(i, j)] + b[j] * a[(j, i)] - b[i] * b[j]);
    let max_defect = defect.amax();
    SymplecticityCheck {
        symplectic: max_defect < 1e-14,
        max_defect,
        defect,
    }
}

/// Runge–Kutta method given by a tableau. Implicit tableaux are solved in
/// stage-derivative form `K_i = f(t + c_i h, x + h Σ_j A_ij K_j)`.
#[derive(Debug, Clone)]
pub struct RungeKutta {
    pub tableau: ButcherTableau,
    pub settings: SolverSettings,
}

impl RungeKutta {
    pub fn new(tableau: ButcherTableau) -> Self {
        RungeKutta {
            tableau,
            settings: SolverSettings::default(),
        }
    }

    pub fn with_settings(mut self, settings: SolverSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn gauss_legendre(s: usize) -> Result<Self> {
        Ok(Self::new(ButcherTableau::gauss_legendre(s)?))
    }

    pub fn implicit_midpoint() -> Self {
        Self::gauss_legendre(1).expect("s = 1 is tabulated")
    }

    fn stage_points(&self, x: &State, h: f64, k: &[State]) -> Vec<State> {
        let a = &self.tableau.a;
        (0..k.len())
            .map(|i| {
                let mut y = x.clone();
                for (j, kj) in k.iter().enumerate() {
                    if a[(i, j)] != 0.0 {
                        y.axpy(h * a[(i, j)], kj, 1.0);
                    }
                }
                y
            })
            .collect()
    }

    pub fn step_field(&self, field: &dyn VectorField, t: f64, x: &State, h: f64) -> Result<State> {
        let s = self.tableau.stages();
        let d = x.len();
        let c = &self.tableau.c;
        let k: Vec<State> = if self.tableau.is_explicit() {
            let mut k: Vec<State> = Vec::with_capacity(s);
            for i in 0..s {
                let mut y = x.clone();
                for (j, kj) in k.iter().enumerate() {
                    let aij = self.tableau.a[(i, j)];
                    if aij != 0.0 {
                        y.axpy(h * aij, kj, 1.0);
                    }
                }
                k.push(field.eval(t + c[i] * h, &y));
            }
            k
        } else {
            let unpack = |z: &State| -> Vec<State> {
                (0..s).map(|i| z.rows(i * d, d).into_owned()).collect()
            };
            let map = |z: &State| -> Result<State> {
                let k = unpack(z);
                let ys = self.stage_points(x, h, &k);
                let mut out = DVector::zeros(s * d);
                for (i, y) in ys.iter().enumerate() {
                    out.rows_mut(i * d, d).copy_from(&field.eval(t + c[i] * h, y));
                }
                Ok(out)
            };
            let f0 = field.eval(t, x);
            let mut guess = DVector::zeros(s * d);
            for i in 0..s {
                guess.rows_mut(i * d, d).copy_from(&f0);
            }
            unpack(&solve_implicit(map, &guess, &self.settings)?)
        };
        let mut out = x.clone();
        for (i, ki) in k.iter().enumerate() {
            out.axpy(h * self.tableau.b[i], ki, 1.0);
        }
        Ok(out)
    }
}

impl FieldMethod for RungeKutta {
    fn name(&self) -> &str {
        &self.tableau.name
    }

    fn step(&self, field: &dyn VectorField, t: f64, x: &State, h: f64) -> Result<State> {
        self.step_field(field, t, x, h)
    }
}

/// `(x′−x)/h = f(t + h/2, (x+x′)/2)`.
pub fn implicit_midpoint_step(field: &dyn VectorField, t: f64, x: &State, h: f64) -> Result<State> {
    RungeKutta::implicit_midpoint().step_field(field, t, x, h)
}

pub fn gauss_legendre_step(s: usize, field: &dyn VectorField, t: f64, x: &State, h: f64) -> Result<State> {
    RungeKutta::gauss_legendre(s)?.step_field(field, t, x, h)
}

type ScalarFn = dyn Fn(&State) -> f64 + Send + Sync;
type GradFn = dyn Fn(&State) -> State + Send + Sync;

/// Canonical Hamiltonian system `ṗ = −∂H/∂q`, `q̇ = ∂H/∂p` on `x = (p, q)`.
#[derive(Clone)]
pub struct HamiltonianSystem {
    d: usize,
    h: Arc<ScalarFn>,
    grad: Arc<GradFn>,
    partition: Option<PartitionedSystem>,
}

impl fmt::Debug for HamiltonianSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HamiltonianSystem")
            .field("d", &self.d)
            .field("separable", &self.partition.is_some())
            .finish()
    }
}

impl HamiltonianSystem {
    /// `grad` returns the full gradient `(∂H/∂p, ∂H/∂q)`. It is compared with
    /// central differences of `H` at random points near the origin and near
    /// `probe` (typically the initial state).
    pub fn new(
        d: usize,
        h: impl Fn(&State) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&State) -> State + Send + Sync + 'static,
        probe: &State,
    ) -> Result<Self> {
        let sys = HamiltonianSystem {
            d,
            h: Arc::new(h),
            grad: Arc::new(grad),
            partition: None,
        };
        sys.check_gradient(probe)?;
        Ok(sys)
    }

    fn check_gradient(&self, probe: &State) -> Result<()> {
        if probe.len() != 2 * self.d {
            return Err(Error::invalid("probe point has the wrong dimension"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..5 {
            let x = probe + DVector::from_fn(2 * self.d, |_, _| rng.random_range(-0.1..0.1));
            let g = (self.grad)(&x);
            let fd = fd_gradient(|y: &State| (self.h)(y), &x, None);
            let scale = g.amax().max(1.0);
            let defect = (&g - &fd).amax();
            if defect > 1e-6 * scale {
                return Err(Error::invalid(format!(
                    "Hamiltonian gradient disagrees with finite differences (defect {defect:.2e})"
                )));
            }
        }
        Ok(())
    }

    /// Separable `H = ½pᵀM⁻¹p + V(q)`.
    pub fn separable(partition: PartitionedSystem, probe: &State) -> Result<Self> {
        let d = partition.dim();
        let p1 = partition.clone();
        let p2 = partition.clone();
        let mut sys = Self::new(
            d,
            move |x: &State| p1.energy(x),
            move |x: &State| {
                let (p, q) = split_pq(x);
                let mut g = DVector::zeros(2 * d);
                g.rows_mut(0, d).copy_from(&(&p2.m_inv * p));
                g.rows_mut(d, d).copy_from(&p2.grad_v(&q));
                g
            },
            probe,
        )?;
        sys.partition = Some(partition);
        Ok(sys)
    }

    pub fn degrees_of_freedom(&self) -> usize {
        self.d
    }

    pub fn energy(&self, x: &State) -> f64 {
        (self.h)(x)
    }

    pub fn gradient(&self, x: &State) -> State {
        (self.grad)(x)
    }

    pub fn partition(&self) -> Option<&PartitionedSystem> {
        self.partition.as_ref()
    }
}

impl VectorField for HamiltonianSystem {
    fn dim(&self) -> usize {
        2 * self.d
    }

    fn eval(&self, _t: f64, x: &State) -> State {
        let g = (self.grad)(x);
        let d = self.d;
        let mut f = DVector::zeros(2 * d);
        f.rows_mut(0, d).copy_from(&(-g.rows(d, d)));
        f.rows_mut(d, d).copy_from(&g.rows(0, d));
        f
    }
}

fn split_pq(x: &State) -> (State, State) {
    let d = x.len() / 2;
    (x.rows(0, d).into_owned(), x.rows(d, d).into_owned())
}

/// Kinetic plus potential splitting `H = ½pᵀM⁻¹p + V(q)`.
#[derive(Clone)]
pub struct PartitionedSystem {
    m_inv: DMatrix<f64>,
    v: Arc<ScalarFn>,
    grad_v: Arc<GradFn>,
}

impl fmt::Debug for PartitionedSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PartitionedSystem").field("m_inv", &self.m_inv).finish()
    }
}

impl PartitionedSystem {
    pub fn new(
        mass: DMatrix<f64>,
        v: impl Fn(&State) -> f64 + Send + Sync + 'static,
        grad_v: impl Fn(&State) -> State + Send + Sync + 'static,
    ) -> Result<Self> {
        if !mass.is_square() || (&mass - mass.transpose()).amax() > 1e-12 * mass.amax().max(1.0) {
            return Err(Error::invalid("mass matrix must be symmetric"));
        }
        let chol = mass
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("mass matrix must be positive definite"))?;
        Ok(PartitionedSystem {
            m_inv: chol.inverse(),
            v: Arc::new(v),
            grad_v: Arc::new(grad_v),
        })
    }

    /// Unit mass matrix.
    pub fn unit_mass(
        d: usize,
        v: impl Fn(&State) -> f64 + Send + Sync + 'static,
        grad_v: impl Fn(&State) -> State + Send + Sync + 'static,
    ) -> Self {
        Self::new(DMatrix::identity(d, d), v, grad_v).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.m_inv.nrows()
    }

    pub fn mass_inverse(&self) -> &DMatrix<f64> {
        &self.m_inv
    }

    pub fn potential(&self, q: &State) -> f64 {
        (self.v)(q)
    }

    pub fn grad_v(&self, q: &State) -> State {
        (self.grad_v)(q)
    }

    pub fn energy(&self, x: &State) -> f64 {
        let (p, q) = split_pq(x);
        0.5 * p.dot(&(&self.m_inv * &p)) + self.potential(&q)
    }

    /// Kick–drift–kick leapfrog on `x = (p, q)`.
    pub fn stormer_verlet_step(&self, x: &State, h: f64) -> State {
        let (p, q) = split_pq(x);
        let p_half = p - 0.5 * h * self.grad_v(&q);
        let q_new = q + h * (&self.m_inv * &p_half);
        let p_new = p_half - 0.5 * h * self.grad_v(&q_new);
        let d = self.dim();
        let mut out = DVector::zeros(2 * d);
        out.rows_mut(0, d).copy_from(&p_new);
        out.rows_mut(d, d).copy_from(&q_new);
        out
    }
}

/// Canonical skew matrix for the `(p, q)` ordering, `x' = J ∇H`.
pub fn canonical_j(d: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        j[(i, d + i)] = -1.0;
        j[(d + i, i)] = 1.0;
    }
    j
}

/// `‖DΦᵀ J DΦ − J‖∞` with `DΦ` from central differences.
pub fn symplecticity_defect<F>(step_map: F, x: &State, delta: Option<f64>) -> Result<f64>
where
    F: Fn(&State) -> Result<State>,
{
    if x.len() % 2 != 0 {
        return Err(Error::invalid("symplecticity needs an even dimension"));
    }
    let dphi = try_fd_jacobian(step_map, x, delta)?;
    let j = canonical_j(x.len() / 2);
    Ok((dphi.transpose() * &j * &dphi - j).amax())
}
