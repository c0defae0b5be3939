//! Benchmark problems: oscillators, Kepler and N-body gravitation, stiff
//! oscillatory chains, quadratic planar families, and a few matrix flows.
//!
//! Phase-space states are ordered momenta first, `x = (p, q)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::composition::{Part, SplitProblem};
use crate::error::{Error, Result};
use crate::integral::{FirstIntegral, Tensor3, TwoIntegralSystem};
use crate::kahan::{cubic_hamiltonian_family, CubicHamiltonianStructure, QuadraticVectorField};
use crate::liegroup::{hat, AlgebraTag, GroupAction, LieGroupProblem};
use crate::polynomial::{Polynomial, PolynomialVectorField};
use crate::problem::{FnField, SecondOrderProblem, VectorField};
use crate::state::{state, State};
use crate::symplectic::{HamiltonianSystem, PartitionedSystem};
use crate::volume::{example_field, DivergenceFree3D};

fn split_pq(x: &State) -> (State, State) {
    let d = x.len() / 2;
    (x.rows(0, d).into_owned(), x.rows(d, d).into_owned())
}

fn join_pq(p: &State, q: &State) -> State {
    let mut x = DVector::zeros(p.len() + q.len());
    x.rows_mut(0, p.len()).copy_from(p);
    x.rows_mut(p.len(), q.len()).copy_from(q);
    x
}

/// `H = ½(p² + q²)`.
pub fn harmonic_oscillator() -> HamiltonianSystem {
    let v = PartitionedSystem::unit_mass(1, |q: &State| 0.5 * q[0] * q[0], |q: &State| q.clone());
    HamiltonianSystem::separable(v, &state(&[0.0, 1.0])).expect("analytic gradient")
}

/// `H = ½p² − cos q`.
pub fn pendulum() -> HamiltonianSystem {
    let v = PartitionedSystem::unit_mass(1, |q: &State| -q[0].cos(), |q: &State| state(&[q[0].sin()]));
    HamiltonianSystem::separable(v, &state(&[0.0, 1.0])).expect("analytic gradient")
}

/// Pendulum split into the potential kick and the free drift, both solved
/// exactly.
pub fn split_pendulum() -> SplitProblem {
    let potential = Part::exact(FnField::autonomous(2, |x| state(&[-x[1].sin(), 0.0])), |x, tau| {
        Ok(state(&[x[0] - tau * x[1].sin(), x[1]]))
    });
    let kinetic = Part::exact(FnField::autonomous(2, |x| state(&[0.0, x[0]])), |x, tau| {
        Ok(state(&[x[0], x[1] + tau * x[0]]))
    });
    SplitProblem::new(vec![potential, kinetic]).expect("two parts of equal dimension")
}

/// `H = ½p² + ¼q⁴`.
pub fn quartic_oscillator() -> HamiltonianSystem {
    let v = PartitionedSystem::unit_mass(1, |q: &State| 0.25 * q[0].powi(4), |q: &State| state(&[q[0].powi(3)]));
    HamiltonianSystem::separable(v, &state(&[0.0, 1.0])).expect("analytic gradient")
}

/// Planar Kepler problem `H = ½‖p‖² − 1/‖q‖` with unit semi-major axis,
/// started at pericentre.
#[derive(Debug, Clone)]
pub struct Kepler {
    pub eccentricity: f64,
    pub system: HamiltonianSystem,
    pub initial: State,
    pub period: f64,
}

impl Kepler {
    pub fn energy(&self, x: &State) -> f64 {
        self.system.energy(x)
    }

    /// `q₁p₂ − q₂p₁`.
    pub fn angular_momentum(x: &State) -> f64 {
        x[2] * x[1] - x[3] * x[0]
    }
}

pub fn kepler(eccentricity: f64) -> Result<Kepler> {
    if !(0.0..1.0).contains(&eccentricity) {
        return Err(Error::invalid(format!("eccentricity {eccentricity} outside [0, 1)")));
    }
    let e = eccentricity;
    let v = PartitionedSystem::unit_mass(
        2,
        |q: &State| -1.0 / q.norm(),
        |q: &State| q / q.norm().powi(3),
    );
    let initial = state(&[0.0, ((1.0 + e) / (1.0 - e)).sqrt(), 1.0 - e, 0.0]);
    Ok(Kepler {
        eccentricity: e,
        system: HamiltonianSystem::separable(v, &initial)?,
        initial,
        period: 2.0 * PI,
    })
}

/// Gravitational N-body problem. Momenta of all bodies come first, then
/// positions, each body contributing `spatial_dim` consecutive entries.
#[derive(Debug, Clone)]
pub struct NBody {
    pub masses: Vec<f64>,
    pub gravity: f64,
    pub spatial_dim: usize,
    pub system: HamiltonianSystem,
}

impl NBody {
    pub fn new(masses: Vec<f64>, gravity: f64, spatial_dim: usize, probe: &State) -> Result<Self> {
        if masses.is_empty() || masses.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::invalid("masses must be positive"));
        }
        if spatial_dim == 0 {
            return Err(Error::invalid("spatial dimension must be positive"));
        }
        let n = masses.len();
        let dof = n * spatial_dim;
        let mass = DMatrix::from_fn(dof, dof, |i, j| if i == j { masses[i / spatial_dim] } else { 0.0 });
        let (m1, m2) = (masses.clone(), masses.clone());
        let v = PartitionedSystem::new(
            mass,
            move |q: &State| {
                let mut u = 0.0;
                for i in 0..n {
                    for j in i + 1..n {
                        let r = (q.rows(i * spatial_dim, spatial_dim) - q.rows(j * spatial_dim, spatial_dim)).norm();
                        u -= gravity * m1[i] * m1[j] / r;
                    }
                }
                u
            },
            move |q: &State| {
                let mut g = DVector::zeros(dof);
                for i in 0..n {
                    for j in i + 1..n {
                        let d = q.rows(i * spatial_dim, spatial_dim) - q.rows(j * spatial_dim, spatial_dim);
                        let f = gravity * m2[i] * m2[j] / d.norm().powi(3) * d;
                        let mut gi = g.rows_mut(i * spatial_dim, spatial_dim);
                        gi += &f;
                        let mut gj = g.rows_mut(j * spatial_dim, spatial_dim);
                        gj -= &f;
                    }
                }
                g
            },
        )?;
        Ok(NBody {
            masses,
            gravity,
            spatial_dim,
            system: HamiltonianSystem::separable(v, probe)?,
        })
    }

    /// A heavy central body with two light planets on near-circular orbits,
    /// in the plane, with zero total momentum.
    pub fn sun_and_two_planets() -> Result<(Self, State)> {
        let masses = vec![1.0, 1e-3, 3e-4];
        let (r1, r2): (f64, f64) = (1.0, 1.6);
        let p1 = masses[1] / r1.sqrt();
        let p2 = masses[2] / r2.sqrt();
        let p = state(&[0.0, p2 - p1, 0.0, p1, 0.0, -p2]);
        let q = state(&[0.0, 0.0, r1, 0.0, -r2, 0.0]);
        let x0 = join_pq(&p, &q);
        Ok((Self::new(masses, 1.0, 2, &x0)?, x0))
    }

    pub fn total_momentum(&self, x: &State) -> State {
        let (p, _) = split_pq(x);
        let d = self.spatial_dim;
        (0..self.masses.len()).fold(DVector::zeros(d), |acc, i| acc + p.rows(i * d, d))
    }
}

type PotentialFn = dyn Fn(&State) -> f64 + Send + Sync;
type GradientFn = dyn Fn(&State) -> State + Send + Sync;

/// `H = ½‖p‖² + ½ Σ_j ω_j² q₁ⱼ² + U(q)` with `n₀` slow coordinates first and
/// one fast coordinate per frequency after them.
#[derive(Clone)]
pub struct OscillatoryHamiltonian {
    pub n_slow: usize,
    pub frequencies: Vec<f64>,
    u: Arc<PotentialFn>,
    grad_u: Arc<GradientFn>,
}

impl fmt::Debug for OscillatoryHamiltonian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OscillatoryHamiltonian")
            .field("n_slow", &self.n_slow)
            .field("frequencies", &self.frequencies)
            .finish()
    }
}

impl OscillatoryHamiltonian {
    pub fn new(
        n_slow: usize,
        frequencies: Vec<f64>,
        u: impl Fn(&State) -> f64 + Send + Sync + 'static,
        grad_u: impl Fn(&State) -> State + Send + Sync + 'static,
    ) -> Result<Self> {
        if frequencies.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::invalid("frequencies must be positive"));
        }
        Ok(OscillatoryHamiltonian {
            n_slow,
            frequencies,
            u: Arc::new(u),
            grad_u: Arc::new(grad_u),
        })
    }

    pub fn n_fast(&self) -> usize {
        self.frequencies.len()
    }

    pub fn dim(&self) -> usize {
        self.n_slow + self.n_fast()
    }

    /// `blockdiag(0, diag(ω))`.
    pub fn omega(&self) -> DMatrix<f64> {
        let n0 = self.n_slow;
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| {
            if i == j && i >= n0 {
                self.frequencies[i - n0]
            } else {
                0.0
            }
        })
    }

    pub fn potential(&self, q: &State) -> f64 {
        (self.u)(q)
    }

    pub fn total_energy(&self, x: &State) -> f64 {
        let (p, q) = split_pq(x);
        0.5 * p.norm_squared() + 0.5 * (self.omega() * &q).norm_squared() + self.potential(&q)
    }

    /// `½‖p₁‖² + ½ Σ ω_j² q₁ⱼ²`.
    pub fn oscillatory_energy(&self, x: &State) -> f64 {
        self.oscillatory_energies(x).iter().sum()
    }

    /// Energy of each fast mode separately.
    pub fn oscillatory_energies(&self, x: &State) -> Vec<f64> {
        let (p, q) = split_pq(x);
        let n0 = self.n_slow;
        self.frequencies
            .iter()
            .enumerate()
            .map(|(j, w)| 0.5 * (p[n0 + j].powi(2) + w * w * q[n0 + j].powi(2)))
            .collect()
    }

    /// `q̈ + Ω²q = −∇U(q)`.
    pub fn second_order(&self) -> Result<SecondOrderProblem> {
        let g = self.grad_u.clone();
        let u = self.u.clone();
        SecondOrderProblem::new(self.omega(), move |q: &State| -g(q))?
            .with_potential(move |q: &State| u(q), 11)
            .map(|p| p.with_split(self.n_slow))
    }

    pub fn hamiltonian(&self, probe: &State) -> Result<HamiltonianSystem> {
        let omega2 = self.omega().map(|w| w * w);
        let (o1, o2) = (omega2.clone(), omega2);
        let (u, g) = (self.u.clone(), self.grad_u.clone());
        let v = PartitionedSystem::unit_mass(
            self.dim(),
            move |q: &State| 0.5 * q.dot(&(&o1 * q)) + u(q),
            move |q: &State| &o2 * q + g(q),
        );
        HamiltonianSystem::separable(v, probe)
    }
}

/// Sum of quartics `¼ Σ_k (a_k · q)⁴` of linear forms.
fn quartic_springs(forms: Vec<Vec<(usize, f64)>>, dim: usize) -> (impl Fn(&State) -> f64, impl Fn(&State) -> State) {
    let forms = Arc::new(forms);
    let f2 = forms.clone();
    let eval = move |q: &State, f: &[(usize, f64)]| f.iter().map(|&(i, a)| a * q[i]).sum::<f64>();
    let u = move |q: &State| forms.iter().map(|f| 0.25 * eval(q, f).powi(4)).sum();
    let grad = move |q: &State| {
        let mut g = DVector::zeros(dim);
        for f in f2.iter() {
            let l3 = eval(q, f).powi(3);
            for &(i, a) in f {
                g[i] += a * l3;
            }
        }
        g
    };
    (u, grad)
}

/// Chain of `m` stiff linear springs of frequency `ω` alternating with soft
/// quartic ones, in the stiff-spring coordinates: `q₀ᵢ` the centre
/// displacement and `q₁ᵢ` the elongation of stiff spring `i`,
///
/// ```text
/// U = ¼[(q₀₁ − q₁₁)⁴ + Σᵢ (q₀ᵢ₊₁ − q₁ᵢ₊₁ − q₀ᵢ − q₁ᵢ)⁴ + (q₀ₘ + q₁ₘ)⁴]
/// ```
pub fn fpu(n_pairs: usize, omega: f64) -> Result<OscillatoryHamiltonian> {
    if n_pairs == 0 {
        return Err(Error::invalid("need at least one spring pair"));
    }
    if omega < 1.0 {
        return Err(Error::invalid("stiff frequency must be at least 1"));
    }
    let m = n_pairs;
    let (slow, fast) = (|i: usize| i, |i: usize| m + i);
    let mut forms = vec![vec![(slow(0), 1.0), (fast(0), -1.0)]];
    for i in 0..m - 1 {
        forms.push(vec![(slow(i + 1), 1.0), (fast(i + 1), -1.0), (slow(i), -1.0), (fast(i), -1.0)]);
    }
    forms.push(vec![(slow(m - 1), 1.0), (fast(m - 1), 1.0)]);
    let (u, g) = quartic_springs(forms, 2 * m);
    OscillatoryHamiltonian::new(m, vec![omega; m], u, g)
}

/// First stiff spring excited: `q₀₁ = 1`, `p₀₁ = 1`, `q₁₁ = 1/ω`, `p₁₁ = 1`.
pub fn fpu_initial_state(n_pairs: usize, omega: f64) -> State {
    let d = 2 * n_pairs;
    let mut x = DVector::zeros(2 * d);
    x[0] = 1.0;
    x[n_pairs] = 1.0;
    x[d] = 1.0;
    x[d + n_pairs] = 1.0 / omega;
    x
}

/// One slow coordinate coupled to fast modes with the given frequencies
/// through `U = ¼(q₀ + Σ_j q₁ⱼ)⁴`.
pub fn multi_frequency(frequencies: Vec<f64>) -> Result<OscillatoryHamiltonian> {
    let dim = 1 + frequencies.len();
    let (u, g) = quartic_springs(vec![(0..dim).map(|i| (i, 1.0)).collect()], dim);
    OscillatoryHamiltonian::new(1, frequencies, u, g)
}

/// `|sin(½ m h ω)| ≥ c √h` for `m = 1..=n`.
pub fn nonresonance_ok(h: f64, omega: f64, n: usize, c: f64) -> Result<bool> {
    if n < 2 || !(c > 0.0) {
        return Err(Error::invalid("need n ≥ 2 and c > 0"));
    }
    let bound = c * h.sqrt();
    Ok((1..=n).all(|m| (0.5 * m as f64 * h * omega).sin().abs() >= bound))
}

/// Planar quadratic families integrated with Kahan's method.
pub const KAHAN_FAMILIES: &[&str] = &[
    "quadratic-hamiltonian-2d",
    "suslov-2d",
    "nahm-octahedral",
    "nahm-octahedral-integrable",
    "nahm-icosahedral",
];

/// A planar quadratic field with whatever conserved structure is known.
#[derive(Debug, Clone)]
pub struct KahanFamily {
    pub name: String,
    pub field: QuadraticVectorField,
    pub polynomial: PolynomialVectorField,
    /// Constant skew structure with cubic Hamiltonian, when the field has one.
    pub structure: Option<CubicHamiltonianStructure>,
    /// A polynomial first integral of the continuous flow, when known.
    pub integral: Option<Polynomial>,
}

fn poly2(terms: &[(f64, &[u32])]) -> Polynomial {
    Polynomial::new(2, terms).expect("two variables")
}

/// Default parameters used when a family is requested without any.
pub fn default_family_params(name: &str) -> Result<Vec<f64>> {
    match name {
        "quadratic-hamiltonian-2d" => Ok(vec![1.0, -0.5, 0.3, 0.7, 0.2, -1.0, 0.4, 0.1, -0.2]),
        "suslov-2d" => Ok(vec![0.3, -0.2, 1.0, 1.0, 0.2, 0.5, 0.0, 0.1, 0.0]),
        "nahm-octahedral" | "nahm-octahedral-integrable" | "nahm-icosahedral" => Ok(vec![]),
        _ => Err(Error::UnknownId {
            kind: "kahan family",
            id: name.to_string(),
        }),
    }
}

pub fn kahan_family(name: &str, params: &[f64]) -> Result<KahanFamily> {
    let expected = default_family_params(name)?.len();
    if params.len() != expected {
        return Err(Error::invalid(format!("family {name} takes {expected} parameters, got {}", params.len())));
    }
    let x = poly2(&[(1.0, &[1, 0])]);
    let y = poly2(&[(1.0, &[0, 1])]);
    let (polynomial, structure, integral) = match name {
        "quadratic-hamiltonian-2d" => {
            let p: [f64; 9] = params.try_into().expect("length checked");
            let (field, s) = cubic_hamiltonian_family(p)?;
            let [a, b, c, d, e, f, g, h, i] = p;
            let ham = poly2(&[
                (a / 3.0, &[3, 0]),
                (b, &[2, 1]),
                (c, &[1, 2]),
                (d / 3.0, &[0, 3]),
                (e / 2.0, &[2, 0]),
                (f, &[1, 1]),
                (g / 2.0, &[0, 2]),
                (h, &[1, 0]),
                (i, &[0, 1]),
            ]);
            let poly = PolynomialVectorField::new(vec![ham.partial(1), ham.partial(0).scale(-1.0)])?;
            debug_assert_eq!(QuadraticVectorField::from_polynomial(&poly)?, field);
            (poly, Some(s), Some(ham))
        }
        "suslov-2d" => {
            let [a, b, c, d, e, f, g, h, i]: [f64; 9] = params.try_into().expect("length checked");
            let l = poly2(&[(a, &[1, 0]), (b, &[0, 1]), (c, &[0, 0])]);
            let ham = poly2(&[(d, &[2, 0]), (e, &[1, 1]), (f, &[0, 2]), (g, &[1, 0]), (h, &[0, 1]), (i, &[0, 0])]);
            let poly = PolynomialVectorField::new(vec![l.mul(&ham.partial(1)), l.mul(&ham.partial(0)).scale(-1.0)])?;
            (poly, None, Some(ham))
        }
        "nahm-octahedral" => {
            let poly = PolynomialVectorField::new(vec![
                poly2(&[(2.0, &[2, 0]), (-12.0, &[0, 2])]),
                poly2(&[(-6.0, &[2, 0]), (-4.0, &[0, 2])]),
            ])?;
            (poly, None, None)
        }
        "nahm-octahedral-integrable" => {
            let poly = PolynomialVectorField::new(vec![
                poly2(&[(2.0, &[2, 0]), (-12.0, &[0, 2])]),
                poly2(&[(-6.0, &[1, 1]), (-4.0, &[0, 2])]),
            ])?;
            // y (x − y)² (2x + 3y)
            let xm = x.sub(&y);
            let integral = y.mul(&xm).mul(&xm).mul(&x.scale(2.0).add(&y.scale(3.0)));
            (poly, None, Some(integral))
        }
        "nahm-icosahedral" => {
            let poly = PolynomialVectorField::new(vec![
                poly2(&[(2.0, &[2, 0]), (-1.0, &[0, 2])]),
                poly2(&[(-10.0, &[1, 1]), (1.0, &[0, 2])]),
            ])?;
            // y (3x − y)² (4x + y)³
            let a = x.scale(3.0).sub(&y);
            let b = x.scale(4.0).add(&y);
            let integral = y.mul(&a).mul(&a).mul(&b).mul(&b).mul(&b);
            (poly, None, Some(integral))
        }
        _ => unreachable!("validated by default_family_params"),
    };
    Ok(KahanFamily {
        name: name.to_string(),
        field: QuadraticVectorField::from_polynomial(&polynomial)?,
        polynomial,
        structure,
        integral,
    })
}

/// `∇I · f`, the derivative of a polynomial along a polynomial field.
pub fn lie_derivative(integral: &Polynomial, field: &PolynomialVectorField) -> Polynomial {
    field
        .components()
        .iter()
        .enumerate()
        .fold(Polynomial::zero(integral.dim()), |acc, (i, f)| acc.add(&integral.partial(i).mul(f)))
}

/// Free rigid body in body coordinates, `ẋ = x × I⁻¹x` written with the
/// two integrals `½‖x‖²` and `½ Σ xᵢ²/Iᵢ` and the Levi-Civita tensor.
pub fn rigid_body(inertia: [f64; 3]) -> Result<TwoIntegralSystem> {
    if inertia.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("moments of inertia must be positive"));
    }
    let casimir = FirstIntegral::new(|x: &State| 0.5 * x.norm_squared(), |x: &State| x.clone());
    let energy = FirstIntegral::new(
        move |x: &State| 0.5 * (0..3).map(|k| x[k] * x[k] / inertia[k]).sum::<f64>(),
        move |x: &State| DVector::from_fn(3, |k, _| x[k] / inertia[k]),
    );
    TwoIntegralSystem::new(casimir, energy, |_: &State| Tensor3::levi_civita(), &state(&[0.0; 3]))
}

/// The divergence-free cubic-quintic field in three variables used to
/// exercise the volume-preserving methods.
pub fn volume_example() -> DivergenceFree3D {
    DivergenceFree3D::from_polynomial(example_field()).expect("divergence-free")
}

/// Mathieu equation `ÿ + (a − 2q cos 2t) y = 0` as `v′ = A(t) v` on 2×2
/// fundamental matrices.
pub fn mathieu(a: f64, q: f64) -> impl Fn(f64) -> DMatrix<f64> + Send + Sync + Clone {
    move |t: f64| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -(a - 2.0 * q * (2.0 * t).cos()), 0.0])
}

/// Rotation `y′ = hat(ω(t, y)) y` on SO(3) with a state-dependent angular
/// velocity.
pub fn rotating_frame() -> LieGroupProblem<f64> {
    LieGroupProblem::new(AlgebraTag::So, GroupAction::Left, |t: f64, y: &DMatrix<f64>| {
        hat(&[y[(0, 1)] + t.cos(), 0.5 * y[(2, 0)], 1.0 - y[(1, 2)] * y[(0, 0)]])
    })
}

/// Symmetric tridiagonal Toda-type isospectral flow `y′ = [B(y), y]` with
/// `B` the skew part of the strict lower triangle.
pub fn isospectral_flow() -> LieGroupProblem<f64> {
    LieGroupProblem::new(AlgebraTag::So, GroupAction::Isospectral, |_, y: &DMatrix<f64>| {
        let n = y.nrows();
        DMatrix::from_fn(n, n, |i, j| {
            if i > j {
                y[(i, j)]
            } else if i < j {
                -y[(j, i)]
            } else {
                0.0
            }
        })
    })
}

pub fn field_of(system: &HamiltonianSystem) -> Arc<dyn VectorField> {
    Arc::new(system.clone())
}
