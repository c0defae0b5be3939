//! Experiment runner behind the `gni` command line: registries of problems,
//! integrators and diagnostics, the per-step observable table with its
//! summary, CSV/JSON emission and convergence tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::composition::{
    lie_trotter_scheme, strang_scheme, time_symmetry_defect, yoshida_boost, Composition, CompositionScheme, Part,
    SplitProblem,
};
use crate::driver::{Bound, Observer, Stepper};
use crate::error::{Error, Result};
use crate::exponential::{Filter, Gautschi, GautschiStepper, Quadrature, Trigonometric, TrigVocStepper};
use crate::integral::{
    Avf, DiscreteGradient, DiscreteGradientMethod, FirstIntegral, FirstIntegralSystem, SimpsonRk, Tensor3,
    TwoIntegralMethod, TwoIntegralSystem,
};
use crate::kahan::{modified_energy, CubicHamiltonianStructure, Kahan, QuadraticVectorField};
use crate::liegroup::{AlgebraTag, GroupAction, LieGroupProblem, Magnus4, Rkmk3};
use crate::order::{final_time_errors, fit_slope, order_from_errors, Reference};
use crate::problem::{FnField, VectorField};
use crate::problems::{self, OscillatoryHamiltonian};
use crate::schrodinger::{
    semiclassical_packet, KrylovMode, PotentialData, R3Variant, SemiclassicalGrid, WaveFunction, Zassenhaus,
};
use crate::state::{is_finite, state, State};
use crate::symplectic::{canonical_j, symplecticity_defect, ButcherTableau, HamiltonianSystem, PartitionedSystem, RungeKutta};
use crate::volume::{example_field, vp_split, vp_splitting_integrator, DivergenceFree3D, TriangularVpMap};

/// Free-form parameters; numbers may also be given as numeric strings.
pub type Params = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => Err(Error::UnknownId { kind: "format", id: s.to_string() }),
        }
    }
}

/// One run: problem × integrator × step size × length, plus what to record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: String,
    pub problem_params: Params,
    pub integrator: String,
    pub integrator_params: Params,
    pub h: f64,
    pub n_steps: usize,
    /// Empty means every observable the problem offers.
    pub observables: Vec<String>,
    pub diagnostics: Vec<String>,
    pub format: OutputFormat,
    pub seed: u64,
    /// Record every `k`-th step (the last step is always recorded).
    pub every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: "harmonic".into(),
            problem_params: Params::new(),
            integrator: "implicit-midpoint".into(),
            integrator_params: Params::new(),
            h: 0.1,
            n_steps: 100,
            observables: Vec::new(),
            diagnostics: Vec::new(),
            format: OutputFormat::Csv,
            seed: 0,
            every: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.h.is_finite() || self.h == 0.0 {
            return Err(Error::invalid(format!("h must be finite and nonzero, got {}", self.h)));
        }
        if !(self.h * self.n_steps as f64).is_finite() {
            return Err(Error::invalid("h · n_steps is not finite"));
        }
        if self.every == 0 {
            return Err(Error::invalid("`every` must be at least 1"));
        }
        Ok(())
    }
}

/// Parse `key=value`; values that read as numbers become numbers.
pub fn parse_param(kv: &str) -> Result<(String, Value)> {
    let (k, v) = kv
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("parameter `{kv}` is not of the form key=value")))?;
    let value = if let Ok(i) = v.parse::<i64>() {
        Value::from(i)
    } else {
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Value::from(x),
            _ => Value::String(v.to_string()),
        }
    };
    Ok((k.trim().to_string(), value))
}

/// A parameter accepted by a registry entry.
#[derive(Debug, Clone, Copy)]
pub struct ParamSpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn p(name: &'static str, default: &'static str, help: &'static str) -> ParamSpec {
    ParamSpec { name, default, help }
}

#[derive(Debug, Clone, Copy)]
pub struct RegistryEntry {
    pub id: &'static str,
    pub params: &'static [ParamSpec],
    pub help: &'static str,
}

const fn entry(id: &'static str, params: &'static [ParamSpec], help: &'static str) -> RegistryEntry {
    RegistryEntry { id, params, help }
}

const PQ: &[ParamSpec] = &[p("p0", "0", "initial momentum"), p("q0", "1", "initial position")];
const PLANAR: &[ParamSpec] = &[
    p("x0", "0.1", "initial x"),
    p("y0", "0.05", "initial y"),
    p("coefficients", "", "comma-separated family coefficients (empty: defaults)"),
];

pub const PROBLEMS: &[RegistryEntry] = &[
    entry("harmonic", PQ, "harmonic oscillator H = (p² + q²)/2"),
    entry("pendulum", PQ, "pendulum H = p²/2 − cos q"),
    entry("quartic", PQ, "quartic oscillator H = p²/2 + q⁴/4"),
    entry("kepler", &[p("e", "0.6", "eccentricity")], "planar Kepler problem started at pericentre"),
    entry("nbody", &[], "sun with two planets in the plane"),
    entry(
        "fpu",
        &[p("pairs", "3", "number of stiff/soft spring pairs"), p("omega", "50", "stiff frequency")],
        "Fermi–Pasta–Ulam chain with stiff linear and soft quartic springs",
    ),
    entry(
        "rigid-body",
        &[
            p("i1", "2", "moment of inertia"),
            p("i2", "1", "moment of inertia"),
            p("i3", "0.5", "moment of inertia"),
        ],
        "free rigid body, two quadratic integrals",
    ),
    entry("quadratic-hamiltonian-2d", PLANAR, "planar field S∇H with cubic H"),
    entry("suslov-2d", PLANAR, "planar field l(x) J∇H with quadratic H"),
    entry("nahm-octahedral", PLANAR, "Nahm system, octahedral symmetry"),
    entry("nahm-octahedral-integrable", PLANAR, "octahedral Nahm variant with a quartic integral"),
    entry("nahm-icosahedral", PLANAR, "Nahm system, icosahedral symmetry"),
    entry(
        "random-quadratic",
        &[p("dim", "3", "dimension"), p("scale", "0.5", "coefficient scale")],
        "seeded random quadratic field",
    ),
    entry(
        "volume-example",
        &[p("x1", "0.1", "initial x₁"), p("x2", "0.2", "initial x₂"), p("x3", "-0.1", "initial x₃")],
        "divergence-free polynomial field in three variables",
    ),
    entry("rotating-frame", &[], "SO(3) frame with state-dependent angular velocity"),
    entry("isospectral", &[p("n", "4", "matrix size")], "Toda-type isospectral flow"),
    entry(
        "mathieu",
        &[p("a", "1", "Mathieu a"), p("q", "0.3", "Mathieu q")],
        "Mathieu fundamental matrix, linear and non-autonomous",
    ),
    entry(
        "schrodinger",
        &[
            p("epsilon", "0.0625", "semiclassical parameter"),
            p("n", "256", "grid points (power of two)"),
            p("potential", "cos", "potential id (cos, double-well, zero) or @file"),
        ],
        "semiclassical linear Schrödinger equation on [−1, 1), WKB packet",
    ),
];

pub const INTEGRATORS: &[RegistryEntry] = &[
    entry("explicit-euler", &[], "explicit Euler"),
    entry("rk4", &[], "classical fourth-order Runge–Kutta"),
    entry("kutta3", &[], "Kutta's third-order method"),
    entry("implicit-midpoint", &[], "implicit midpoint rule"),
    entry("gauss-legendre", &[p("s", "2", "stages")], "s-stage Gauss–Legendre collocation, order 2s"),
    entry("stormer-verlet", &[], "kick–drift–kick leapfrog (separable Hamiltonians)"),
    entry("lie-trotter", &[], "first-order splitting"),
    entry("strang", &[], "Strang splitting"),
    entry("yoshida", &[p("boosts", "1", "number of triple-jump boosts of Strang")], "Yoshida composition of Strang"),
    entry("avf", &[p("q", "8", "Gauss–Legendre nodes")], "average vector field method"),
    entry("simpson-rk", &[], "AVF with Simpson's rule"),
    entry(
        "discrete-gradient",
        &[p("kind", "itoh-abe", "itoh-abe or avf"), p("q", "8", "nodes for the avf gradient")],
        "discrete gradient method for H with the canonical structure",
    ),
    entry("two-integral", &[p("kind", "avf", "itoh-abe or avf")], "method preserving two integrals"),
    entry("kahan", &[], "Kahan's method for quadratic fields"),
    entry("vp-splitting", &[], "volume-preserving splitting into two-dimensional parts"),
    entry("triangular-vp", &[], "triangular volume-preserving map for the volume example"),
    entry("rkmk3", &[], "third-order Runge–Kutta–Munthe-Kaas"),
    entry("magnus4", &[], "fourth-order Magnus method for linear problems"),
    entry("gautschi", &[p("filter", "sinc", "none, sinc or sinc2")], "filtered Gautschi two-step method"),
    entry(
        "trig-voc",
        &[p("quadrature", "midpoint", "midpoint or gauss"), p("nodes", "3", "nodes for gauss")],
        "trigonometric variation of constants",
    ),
    entry(
        "zassenhaus",
        &[
            p("variant", "raised", "printed, raised or without (R₃ quartic term)"),
            p("krylov", "fixed", "fixed or adaptive"),
            p("k2", "3", "Krylov dimension for R₂"),
            p("k3", "2", "Krylov dimension for R₃"),
            p("tol", "1e-13", "adaptive Krylov tolerance"),
        ],
        "symmetric Zassenhaus splitting",
    ),
];

pub const DIAGNOSTICS: &[RegistryEntry] = &[
    entry("symplecticity-defect", &[], "‖DΦᵀJDΦ − J‖∞ of the step map (finite differences)"),
    entry("volume-defect", &[], "| |det DΦ| − 1 | of the step map (finite differences)"),
    entry("time-symmetry-defect", &[], "‖Φ₋ₕ(Φₕ(x)) − x‖∞"),
];

fn find(registry: &'static [RegistryEntry], kind: &'static str, id: &str) -> Result<&'static RegistryEntry> {
    registry
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| Error::UnknownId { kind, id: id.to_string() })
}

/// Text listing of a registry: id, parameters with defaults, description.
pub fn list(registry: &str) -> Result<String> {
    let entries = match registry {
        "problems" => PROBLEMS,
        "integrators" => INTEGRATORS,
        "diagnostics" => DIAGNOSTICS,
        _ => return Err(Error::UnknownId { kind: "registry", id: registry.to_string() }),
    };
    let mut out = String::new();
    for e in entries {
        let params: Vec<String> = e.params.iter().map(|p| format!("{}={}", p.name, p.default)).collect();
        let _ = writeln!(out, "{:<28} {:<40} {}", e.id, params.join(" "), e.help);
    }
    Ok(out)
}

struct Resolved<'a> {
    spec: &'static RegistryEntry,
    values: &'a Params,
}

impl<'a> Resolved<'a> {
    fn new(spec: &'static RegistryEntry, kind: &str, values: &'a Params) -> Result<Self> {
        for key in values.keys() {
            if !spec.params.iter().any(|p| p.name == key) {
                return Err(Error::invalid(format!("{kind} `{}` has no parameter `{key}`", spec.id)));
            }
        }
        Ok(Resolved { spec, values })
    }

    fn raw(&self, name: &str) -> String {
        match self.values.get(name) {
            Some(Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
            None => self
                .spec
                .params
                .iter()
                .find(|p| p.name == name)
                .map(|p| p.default.to_string())
                .unwrap_or_default(),
        }
    }

    fn f64(&self, name: &str) -> Result<f64> {
        let raw = self.raw(name);
        raw.parse::<f64>()
            .map_err(|_| Error::invalid(format!("parameter `{name}` = `{raw}` is not a number")))
    }

    fn usize(&self, name: &str) -> Result<usize> {
        let x = self.f64(name)?;
        if x < 0.0 || x.fract() != 0.0 {
            return Err(Error::invalid(format!("parameter `{name}` must be a non-negative integer")));
        }
        Ok(x as usize)
    }

    fn string(&self, name: &str) -> String {
        self.raw(name)
    }
}

/// Problem description consumed by the integrator factory.
struct Instance {
    x0: State,
    field: Arc<dyn VectorField>,
    hamiltonian: Option<HamiltonianSystem>,
    split: Option<SplitProblem>,
    quadratic: Option<QuadraticVectorField>,
    two_integral: Option<TwoIntegralSystem>,
    volume: bool,
    lie: Option<(LieGroupProblem<f64>, usize)>,
    linear: Option<(Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>, AlgebraTag, usize)>,
    oscillatory: Option<OscillatoryHamiltonian>,
    schrodinger: Option<(SemiclassicalGrid, PotentialData)>,
    observables: Vec<Observer>,
}

impl Instance {
    fn new(x0: State, field: Arc<dyn VectorField>) -> Self {
        Instance {
            x0,
            field,
            hamiltonian: None,
            split: None,
            quadratic: None,
            two_integral: None,
            volume: false,
            lie: None,
            linear: None,
            oscillatory: None,
            schrodinger: None,
            observables: Vec::new(),
        }
    }

    fn with_hamiltonian(mut self, h: HamiltonianSystem) -> Result<Self> {
        if let Some(part) = h.partition() {
            self.split = Some(separable_split(part)?);
        }
        let e = h.clone();
        self.observables.push(Observer::of_state("energy", move |x| e.energy(x)));
        self.hamiltonian = Some(h);
        Ok(self)
    }
}

/// Potential kick and kinetic drift, both exact.
fn separable_split(part: &PartitionedSystem) -> Result<SplitProblem> {
    let d = part.dim();
    let (a, b) = (part.clone(), part.clone());
    let kick = move |x: &State, tau: f64| -> State {
        let mut y = x.clone();
        let g = a.grad_v(&x.rows(d, d).into_owned());
        let mut pm = y.rows_mut(0, d);
        pm.axpy(-tau, &g, 1.0);
        y
    };
    let drift = move |x: &State, tau: f64| -> State {
        let mut y = x.clone();
        let v = b.mass_inverse() * x.rows(0, d);
        let mut qm = y.rows_mut(d, d);
        qm.axpy(tau, &v, 1.0);
        y
    };
    let (k1, d1) = (Arc::new(kick), Arc::new(drift));
    let (k2, d2) = (k1.clone(), d1.clone());
    let zero = State::zeros(2 * d);
    let z1 = zero.clone();
    let potential = Part::exact(FnField::autonomous(2 * d, move |x| k1(x, 1.0) - x + &z1), move |x, tau| Ok(k2(x, tau)));
    let kinetic = Part::exact(FnField::autonomous(2 * d, move |x| d1(x, 1.0) - x + &zero), move |x, tau| Ok(d2(x, tau)));
    SplitProblem::new(vec![potential, kinetic])
}

fn flatten(m: &DMatrix<f64>) -> State {
    DVector::from_column_slice(m.as_slice())
}

fn unflatten(x: &State, n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, n, x.as_slice())
}

fn real_embed(u: &[Complex64]) -> State {
    let n = u.len();
    DVector::from_fn(2 * n, |i, _| if i < n { u[i].re } else { u[i - n].im })
}

fn complex_of(x: &State) -> Vec<Complex64> {
    let n = x.len() / 2;
    (0..n).map(|i| Complex64::new(x[i], x[n + i])).collect()
}

fn planar_instance(id: &str, r: &Resolved, h: f64) -> Result<Instance> {
    let coeffs = r.string("coefficients");
    let params = if coeffs.trim().is_empty() {
        problems::default_family_params(id)?
    } else {
        coeffs
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad coefficient `{s}`"))))
            .collect::<Result<Vec<_>>>()?
    };
    let fam = problems::kahan_family(id, &params)?;
    let x0 = state(&[r.f64("x0")?, r.f64("y0")?]);
    let mut inst = Instance::new(x0, Arc::new(fam.field.clone()));
    if let Some(integral) = fam.integral.clone() {
        inst.observables.push(Observer::of_state("integral", move |x| integral.eval(x.as_slice())));
    }
    if let Some(s) = fam.structure.clone() {
        let s2: CubicHamiltonianStructure = s.clone();
        let f = fam.field.clone();
        inst.observables.push(Observer::of_state("energy", move |x| s.energy(x)));
        inst.observables.push(Observer::of_state("modified-energy", move |x| {
            modified_energy(&s2, &f, x, h).unwrap_or(f64::NAN)
        }));
    }
    inst.quadratic = Some(fam.field);
    Ok(inst)
}

fn build_problem(config: &ExperimentConfig) -> Result<Instance> {
    let spec = find(PROBLEMS, "problem", &config.problem)?;
    let r = Resolved::new(spec, "problem", &config.problem_params)?;
    let pq = |r: &Resolved| -> Result<State> { Ok(state(&[r.f64("p0")?, r.f64("q0")?])) };
    let inst = match spec.id {
        "harmonic" => {
            let h = problems::harmonic_oscillator();
            Instance::new(pq(&r)?, Arc::new(h.clone())).with_hamiltonian(h)?
        }
        "pendulum" => {
            let h = problems::pendulum();
            Instance::new(pq(&r)?, Arc::new(h.clone())).with_hamiltonian(h)?
        }
        "quartic" => {
            let h = problems::quartic_oscillator();
            Instance::new(pq(&r)?, Arc::new(h.clone())).with_hamiltonian(h)?
        }
        "kepler" => {
            let k = problems::kepler(r.f64("e")?)?;
            let mut inst = Instance::new(k.initial.clone(), Arc::new(k.system.clone())).with_hamiltonian(k.system)?;
            inst.observables.push(Observer::of_state("angular-momentum", problems::Kepler::angular_momentum));
            inst
        }
        "nbody" => {
            let (nb, x0) = problems::NBody::sun_and_two_planets()?;
            let nb2 = nb.clone();
            let mut inst = Instance::new(x0, Arc::new(nb.system.clone())).with_hamiltonian(nb.system)?;
            inst.observables.push(Observer::of_state("momentum", move |x| nb2.total_momentum(x).norm()));
            inst
        }
        "fpu" => {
            let pairs = r.usize("pairs")?;
            let omega = r.f64("omega")?;
            let osc = problems::fpu(pairs, omega)?;
            let x0 = problems::fpu_initial_state(pairs, omega);
            let ham = osc.hamiltonian(&x0)?;
            let mut inst = Instance::new(x0, Arc::new(ham.clone())).with_hamiltonian(ham)?;
            let o = osc.clone();
            inst.observables.push(Observer::of_state("oscillatory-energy", move |x| o.oscillatory_energy(x)));
            inst.oscillatory = Some(osc);
            inst
        }
        "rigid-body" => {
            let sys = problems::rigid_body([r.f64("i1")?, r.f64("i2")?, r.f64("i3")?])?;
            let mut inst = Instance::new(state(&[1.0, 0.5, 0.2]), Arc::new(sys.clone()));
            let (a, b) = (sys.clone(), sys.clone());
            inst.observables.push(Observer::of_state("casimir", move |x| a.i.value(x)));
            inst.observables.push(Observer::of_state("energy", move |x| b.j.value(x)));
            inst.two_integral = Some(sys);
            inst
        }
        id if problems::KAHAN_FAMILIES.contains(&id) => planar_instance(id, &r, config.h)?,
        "random-quadratic" => {
            let d = r.usize("dim")?;
            if d == 0 {
                return Err(Error::invalid("dim must be positive"));
            }
            let scale = r.f64("scale")?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut a = Tensor3::zeros(d);
            for i in 0..d {
                for j in 0..d {
                    for k in j..d {
                        let v = scale * rng.random_range(-1.0..1.0);
                        a.set(i, j, k, v);
                        a.set(i, k, j, v);
                    }
                }
            }
            let b = DMatrix::from_fn(d, d, |_, _| scale * rng.random_range(-1.0..1.0));
            let c = DVector::from_fn(d, |_, _| scale * rng.random_range(-1.0..1.0));
            let x0 = DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
            let field = QuadraticVectorField::new(a, b, c)?;
            let mut inst = Instance::new(x0, Arc::new(field.clone()));
            inst.quadratic = Some(field);
            inst
        }
        "volume-example" => {
            let x0 = state(&[r.f64("x1")?, r.f64("x2")?, r.f64("x3")?]);
            let mut inst = Instance::new(x0, Arc::new(example_field()));
            inst.volume = true;
            inst
        }
        "rotating-frame" => {
            let prob = problems::rotating_frame();
            let field = lie_field(prob.clone(), 3);
            let mut inst = Instance::new(flatten(&DMatrix::identity(3, 3)), field);
            inst.observables.push(Observer::of_state("orthogonality-defect", |x| {
                let y = unflatten(x, 3);
                (y.transpose() * &y - DMatrix::identity(3, 3)).norm()
            }));
            inst.lie = Some((prob, 3));
            inst
        }
        "isospectral" => {
            let n = r.usize("n")?;
            if n < 2 {
                return Err(Error::invalid("n must be at least 2"));
            }
            let y0 = DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    (i + 1) as f64
                } else if i.abs_diff(j) == 1 {
                    1.0
                } else {
                    0.0
                }
            });
            let prob = problems::isospectral_flow();
            let mut inst = Instance::new(flatten(&y0), lie_field(prob.clone(), n));
            inst.observables.push(Observer::of_state("trace-square", move |x| {
                let y = unflatten(x, n);
                (&y * &y).trace()
            }));
            inst.lie = Some((prob, n));
            inst
        }
        "mathieu" => {
            let a = problems::mathieu(r.f64("a")?, r.f64("q")?);
            let a2 = a.clone();
            let prob = LieGroupProblem::new(AlgebraTag::Sl, GroupAction::Left, move |t, _y: &DMatrix<f64>| a2(t));
            let mut inst = Instance::new(flatten(&DMatrix::identity(2, 2)), lie_field(prob.clone(), 2));
            inst.observables.push(Observer::of_state("determinant", |x| unflatten(x, 2).determinant()));
            inst.lie = Some((prob, 2));
            inst.linear = Some((Arc::new(a), AlgebraTag::Sl, 2));
            inst
        }
        "schrodinger" => {
            let eps = r.f64("epsilon")?;
            let n = r.usize("n")?;
            let grid = SemiclassicalGrid::new(n, eps, config.h)?;
            let pot_id = r.string("potential");
            let potential = match pot_id.strip_prefix('@') {
                Some(path) => PotentialData::from_file(&grid, path)?,
                None => PotentialData::from_id(&grid, &pot_id)?,
            };
            let u0 = semiclassical_packet(&grid);
            let field = schrodinger_field(&grid, &potential);
            let mut inst = Instance::new(real_embed(&u0.values), field);
            inst.observables
                .push(Observer::of_state("norm", |x| WaveFunction::new(complex_of(x)).norm()));
            inst.schrodinger = Some((grid, potential));
            inst
        }
        other => unreachable!("registered problem `{other}` without a constructor"),
    };
    let mut inst = inst;
    inst.observables.push(Observer::of_state("state-norm", |x| x.norm()));
    Ok(inst)
}

fn lie_field(prob: LieGroupProblem<f64>, n: usize) -> Arc<dyn VectorField> {
    Arc::new(FnField::new(n * n, move |t, x| flatten(&prob.velocity(t, &unflatten(x, n)))).non_autonomous())
}

fn schrodinger_field(grid: &SemiclassicalGrid, potential: &PotentialData) -> Arc<dyn VectorField> {
    let sp = grid.spectral();
    let eps = grid.epsilon;
    let v = potential.values().to_vec();
    let i = Complex64::new(0.0, 1.0);
    Arc::new(FnField::autonomous(2 * grid.n, move |x| {
        let u = complex_of(x);
        let d2 = sp.derivative(&u, 2);
        let du: Vec<Complex64> = (0..u.len()).map(|j| i * eps * d2[j] - i / eps * v[j] * u[j]).collect();
        real_embed(&du)
    }))
}

/// Zassenhaus on the real embedding `(Re u, Im u)`, one propagator per step size.
struct ZassenhausStepper {
    grid: SemiclassicalGrid,
    potential: PotentialData,
    variant: R3Variant,
    krylov: KrylovMode,
    cache: Mutex<HashMap<u64, Arc<Zassenhaus>>>,
}

impl Stepper for ZassenhausStepper {
    fn step(&self, _t: f64, x: &State, h: f64) -> Result<State> {
        let z = {
            let mut cache = self.cache.lock().expect("propagator cache");
            match cache.get(&h.to_bits()) {
                Some(z) => z.clone(),
                None => {
                    let z = Arc::new(Zassenhaus::with_options(
                        self.grid.with_step(h)?,
                        &self.potential,
                        self.variant,
                        self.krylov,
                    ));
                    cache.insert(h.to_bits(), z.clone());
                    z
                }
            }
        };
        Ok(real_embed(&z.step(&WaveFunction::new(complex_of(x)))?.values))
    }
}

enum Engine {
    OneStep(Box<dyn Stepper>),
    Gautschi(GautschiStepper),
}

fn requires<T>(opt: Option<T>, integrator: &str, what: &str, problem: &str) -> Result<T> {
    opt.ok_or_else(|| Error::invalid(format!("integrator `{integrator}` needs {what}; problem `{problem}` has none")))
}

fn discrete_gradient_kind(r: &Resolved) -> Result<DiscreteGradient> {
    match r.string("kind").as_str() {
        "itoh-abe" => Ok(DiscreteGradient::ItohAbe),
        "avf" => Ok(DiscreteGradient::Avf {
            quadrature_order: r.usize("q").unwrap_or(8).max(1),
        }),
        other => Err(Error::UnknownId { kind: "discrete gradient", id: other.to_string() }),
    }
}

fn build_integrator(id: &str, params: &Params, inst: &Instance, problem: &str) -> Result<Engine> {
    let spec = find(INTEGRATORS, "integrator", id)?;
    let r = Resolved::new(spec, "integrator", params)?;
    let field = inst.field.clone();
    let one = |s: Box<dyn Stepper>| Ok(Engine::OneStep(s));
    let split = || requires(inst.split.clone(), id, "a splitting", problem);
    match spec.id {
        "explicit-euler" => one(Box::new(Bound::new(RungeKutta::new(ButcherTableau::explicit_euler()), field))),
        "rk4" => one(Box::new(Bound::new(RungeKutta::new(ButcherTableau::rk4()), field))),
        "kutta3" => one(Box::new(Bound::new(RungeKutta::new(ButcherTableau::kutta3()), field))),
        "implicit-midpoint" => one(Box::new(Bound::new(RungeKutta::implicit_midpoint(), field))),
        "gauss-legendre" => one(Box::new(Bound::new(RungeKutta::gauss_legendre(r.usize("s")?)?, field))),
        "stormer-verlet" => {
            let h = requires(inst.hamiltonian.as_ref(), id, "a separable Hamiltonian", problem)?;
            let part = requires(h.partition().cloned(), id, "a separable Hamiltonian", problem)?;
            one(Box::new(move |_t: f64, x: &State, h: f64| Ok(part.stormer_verlet_step(x, h))))
        }
        "lie-trotter" => one(Box::new(Composition::new(lie_trotter_scheme(), split()?)?)),
        "strang" => one(Box::new(Composition::new(strang_scheme(), split()?)?)),
        "yoshida" => {
            let mut scheme: CompositionScheme = strang_scheme();
            for _ in 0..r.usize("boosts")? {
                scheme = yoshida_boost(&scheme)?;
            }
            one(Box::new(Composition::new(scheme, split()?)?))
        }
        "avf" => one(Box::new(Bound::new(Avf::new(r.usize("q")?.max(1)), field))),
        "simpson-rk" => one(Box::new(Bound::new(SimpsonRk::default(), field))),
        "discrete-gradient" => {
            let h = requires(inst.hamiltonian.clone(), id, "a Hamiltonian", problem)?;
            let d = h.degrees_of_freedom();
            let (e, g) = (h.clone(), h.clone());
            let integral = FirstIntegral::new(move |x: &State| e.energy(x), move |x: &State| g.gradient(x));
            let j = canonical_j(d);
            let sys = FirstIntegralSystem::new(integral, move |_: &State| j.clone(), &inst.x0)?;
            one(Box::new(DiscreteGradientMethod::new(sys, discrete_gradient_kind(&r)?)))
        }
        "two-integral" => {
            let sys = requires(inst.two_integral.clone(), id, "a two-integral structure", problem)?;
            let kind = match r.string("kind").as_str() {
                "itoh-abe" => DiscreteGradient::ItohAbe,
                "avf" => DiscreteGradient::Avf { quadrature_order: 4 },
                other => return Err(Error::UnknownId { kind: "discrete gradient", id: other.to_string() }),
            };
            one(Box::new(TwoIntegralMethod::new(sys, kind)))
        }
        "kahan" => {
            let f = requires(inst.quadratic.clone(), id, "a quadratic vector field", problem)?;
            one(Box::new(Kahan { field: f }))
        }
        "vp-splitting" => {
            if !inst.volume {
                return Err(Error::invalid(format!("integrator `{id}` needs a divergence-free 3D field")));
            }
            let df = DivergenceFree3D::from_polynomial(example_field())?;
            let (a, b) = vp_split(&df);
            one(Box::new(vp_splitting_integrator(vec![a, b])?))
        }
        "triangular-vp" => {
            if !inst.volume {
                return Err(Error::invalid(format!("integrator `{id}` is specific to the volume example")));
            }
            one(Box::new(TriangularVpMap::example(0.1)))
        }
        "rkmk3" => {
            let (prob, n) = requires(inst.lie.clone(), id, "a Lie-group formulation", problem)?;
            one(Box::new(Rkmk3 { problem: prob, n }))
        }
        "magnus4" => {
            let (a, tag, n) = requires(inst.linear.clone(), id, "a linear coefficient A(t)", problem)?;
            one(Box::new(Magnus4 { a, tag, n }))
        }
        "gautschi" => {
            let osc = requires(inst.oscillatory.as_ref(), id, "an oscillatory second-order form", problem)?;
            let filter = Filter::from_name(&r.string("filter"))?;
            Ok(Engine::Gautschi(GautschiStepper { method: Gautschi::new(osc.second_order()?, filter) }))
        }
        "trig-voc" => {
            let osc = requires(inst.oscillatory.as_ref(), id, "an oscillatory second-order form", problem)?;
            let quadrature = match r.string("quadrature").as_str() {
                "midpoint" => Quadrature::FrozenMidpoint,
                "gauss" => Quadrature::Gauss(r.usize("nodes")?.max(1)),
                other => return Err(Error::UnknownId { kind: "quadrature", id: other.to_string() }),
            };
            one(Box::new(TrigVocStepper { trig: Trigonometric::new(osc.second_order()?), quadrature }))
        }
        "zassenhaus" => {
            let (grid, potential) = requires(inst.schrodinger.clone(), id, "a Schrödinger problem", problem)?;
            let variant = R3Variant::parse(&r.string("variant"))?;
            let krylov = match r.string("krylov").as_str() {
                "fixed" => KrylovMode::Fixed { r2: r.usize("k2")?.max(1), r3: r.usize("k3")?.max(1) },
                "adaptive" => KrylovMode::Adaptive { tol: r.f64("tol")?, max_dim: 128 },
                other => return Err(Error::UnknownId { kind: "Krylov mode", id: other.to_string() }),
            };
            one(Box::new(ZassenhausStepper { grid, potential, variant, krylov, cache: Mutex::new(HashMap::new()) }))
        }
        other => unreachable!("registered integrator `{other}` without a constructor"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Diagnostic {
    Symplecticity,
    Volume,
    TimeSymmetry,
}

fn build_diagnostic(id: &str) -> Result<Diagnostic> {
    match find(DIAGNOSTICS, "diagnostic", id)?.id {
        "symplecticity-defect" => Ok(Diagnostic::Symplecticity),
        "volume-defect" => Ok(Diagnostic::Volume),
        _ => Ok(Diagnostic::TimeSymmetry),
    }
}

fn eval_diagnostic(d: Diagnostic, stepper: &dyn Stepper, t: f64, x: &State, h: f64) -> Result<f64> {
    match d {
        Diagnostic::Symplecticity => symplecticity_defect(|y: &State| stepper.step(t, y, h), x, None),
        Diagnostic::Volume => crate::volume::volume_defect(|y: &State| stepper.step(t, y, h), x),
        Diagnostic::TimeSymmetry => time_symmetry_defect(stepper, x, h),
    }
}

/// Summary statistics, all recomputable from the emitted table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Summary {
    /// `max_n |o_n − o_0|` per observable.
    pub max_drift: BTreeMap<String, f64>,
    /// Least-squares slope of `|o_n − o_0|` against the step index.
    pub drift_slope: BTreeMap<String, f64>,
    /// Observed orders, filled by convergence runs.
    pub order_estimates: BTreeMap<String, f64>,
    pub steps: usize,
    pub final_time: f64,
    pub wall_time_s: f64,
}

/// Per-step table and its summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Observable names followed by diagnostic names.
    pub columns: Vec<String>,
    pub observables: usize,
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub summary: Summary,
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl RunReport {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    /// `step,t,<observables>,<diagnostics>`, 17 significant digits, LF.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,t");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for ((step, t), row) in self.steps.iter().zip(&self.times).zip(&self.rows) {
            let _ = write!(out, "{step},{}", fmt_f64(*t));
            for v in row {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Same fields as the CSV plus the summary.
    pub fn to_json(&self) -> String {
        let mut columns = vec!["step".to_string(), "t".to_string()];
        columns.extend(self.columns.iter().cloned());
        let rows: Vec<Value> = self
            .steps
            .iter()
            .zip(&self.times)
            .zip(&self.rows)
            .map(|((s, t), r)| {
                let mut v = vec![Value::from(*s), Value::from(*t)];
                v.extend(r.iter().map(|x| Value::from(*x)));
                Value::Array(v)
            })
            .collect();
        let doc = serde_json::json!({ "columns": columns, "rows": rows, "summary": self.summary });
        let mut s = serde_json::to_string_pretty(&doc).expect("serialisable");
        s.push('\n');
        s
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => self.to_json(),
        }
    }

    /// One `<column>.dat` file per column with `t value` lines.
    pub fn write_plot_data(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (k, name) in self.columns.iter().enumerate() {
            let mut text = String::new();
            for (t, row) in self.times.iter().zip(&self.rows) {
                let _ = writeln!(text, "{} {}", fmt_f64(*t), fmt_f64(row[k]));
            }
            let path = dir.join(format!("{name}.dat"));
            write_atomic(&path, text.as_bytes())?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Write via a temporary sibling file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::invalid("output path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn summarize(columns: &[String], n_obs: usize, steps: &[usize], rows: &[Vec<f64>]) -> Summary {
    let mut s = Summary::default();
    let xs: Vec<f64> = steps.iter().map(|&n| n as f64).collect();
    for (k, name) in columns.iter().enumerate().take(n_obs) {
        let first = rows[0][k];
        let drift: Vec<f64> = rows.iter().map(|r| (r[k] - first).abs()).collect();
        s.max_drift.insert(name.clone(), drift.iter().cloned().fold(0.0, f64::max));
        let slope = if rows.len() >= 2 { fit_slope(&xs, &drift) } else { 0.0 };
        s.drift_slope.insert(name.clone(), slope);
    }
    s
}

/// Run one experiment.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let inst = build_problem(config)?;
    let engine = build_integrator(&config.integrator, &config.integrator_params, &inst, &config.problem)?;

    let observers: Vec<Observer> = if config.observables.is_empty() {
        inst.observables.clone()
    } else {
        config
            .observables
            .iter()
            .map(|name| {
                inst.observables
                    .iter()
                    .find(|o| &o.name == name)
                    .cloned()
                    .ok_or_else(|| Error::UnknownId { kind: "observable", id: name.clone() })
            })
            .collect::<Result<_>>()?
    };
    let diagnostics: Vec<Diagnostic> =
        config.diagnostics.iter().map(|d| build_diagnostic(d)).collect::<Result<_>>()?;
    let mut columns: Vec<String> = observers.iter().map(|o| o.name.clone()).collect();
    columns.extend(config.diagnostics.iter().cloned());

    let h = config.h;
    let n = config.n_steps;
    let record = |k: usize| k % config.every == 0 || k == n;
    let (mut steps, mut times, mut rows) = (Vec::new(), Vec::new(), Vec::new());

    let row_for = |t: f64, x: &State, stepper: Option<&dyn Stepper>| -> Result<Vec<f64>> {
        let mut row: Vec<f64> = observers.iter().map(|o| o.eval(t, x)).collect();
        for &d in &diagnostics {
            let s = stepper.ok_or_else(|| Error::invalid("diagnostics need a one-step integrator"))?;
            row.push(eval_diagnostic(d, s, t, x, h)?);
        }
        Ok(row)
    };

    match &engine {
        Engine::OneStep(stepper) => {
            let mut x = inst.x0.clone();
            for k in 0..=n {
                let t = k as f64 * h;
                if record(k) {
                    steps.push(k);
                    times.push(t);
                    rows.push(row_for(t, &x, Some(stepper.as_ref())).map_err(|e| e.at_step(k))?);
                }
                if k < n {
                    x = stepper.step(t, &x, h).map_err(|e| e.at_step(k + 1))?;
                    if !is_finite(&x) {
                        return Err(Error::NonFinite { step: k + 1 });
                    }
                }
            }
        }
        Engine::Gautschi(g) => {
            if !diagnostics.is_empty() {
                return Err(Error::invalid("diagnostics need a one-step integrator; gautschi is two-step"));
            }
            let traj = g.run(&inst.x0, h, n)?;
            for (k, x) in traj.iter().enumerate() {
                if !is_finite(x) {
                    return Err(Error::NonFinite { step: k });
                }
                if record(k) {
                    let t = k as f64 * h;
                    steps.push(k);
                    times.push(t);
                    rows.push(row_for(t, x, None)?);
                }
            }
        }
    }

    let mut summary = summarize(&columns, observers.len(), &steps, &rows);
    summary.steps = n;
    summary.final_time = n as f64 * h;
    summary.wall_time_s = start.elapsed().as_secs_f64();
    Ok(RunReport { columns, observables: observers.len(), steps, times, rows, summary })
}

/// `id` plus parameters, written `id:key=value:key=value`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorSpec {
    pub id: String,
    pub params: Params,
}

impl IntegratorSpec {
    pub fn new(id: &str) -> Self {
        IntegratorSpec { id: id.to_string(), params: Params::new() }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut it = s.split(':');
        let id = it.next().unwrap_or_default().trim().to_string();
        if id.is_empty() {
            return Err(Error::invalid("empty integrator id"));
        }
        let mut params = Params::new();
        for kv in it {
            let (k, v) = parse_param(kv)?;
            params.insert(k, v);
        }
        Ok(IntegratorSpec { id, params })
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn label(&self) -> String {
        let mut s = self.id.clone();
        for (k, v) in &self.params {
            let v = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let _ = write!(s, ":{k}={v}");
        }
        s
    }
}

/// Errors at a common final time and the fitted order for each integrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub t_end: f64,
    pub h_list: Vec<f64>,
    /// `(label, errors per h, fitted order)`; the order is NaN when the
    /// errors are saturated at round-off.
    pub entries: Vec<(String, Vec<f64>, f64)>,
}

impl ConvergenceTable {
    pub fn order(&self, label: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == label).map(|e| e.2)
    }

    /// `integrator,h,error,local_order,observed_order`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("integrator,h,error,local_order,observed_order\n");
        for (label, errors, order) in &self.entries {
            for (i, (&h, &e)) in self.h_list.iter().zip(errors).enumerate() {
                let local = if i == 0 {
                    String::new()
                } else {
                    fmt_f64((errors[i - 1] / e).ln() / (self.h_list[i - 1] / h).ln())
                };
                let _ = writeln!(out, "{label},{},{},{local},{}", fmt_f64(h), fmt_f64(e), fmt_f64(*order));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serialisable");
        s.push('\n');
        s
    }
}

/// Observed orders at `t_end` against a reference computed by the same
/// integrator at `min(h)/100`.
pub fn convergence(
    config: &ExperimentConfig,
    integrators: &[IntegratorSpec],
    h_list: &[f64],
    t_end: f64,
) -> Result<ConvergenceTable> {
    if h_list.len() < 3 {
        return Err(Error::invalid("convergence needs at least three step sizes"));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::invalid("t_end must be positive"));
    }
    let inst = build_problem(config)?;
    let mut entries = Vec::new();
    for spec in integrators {
        let engine = build_integrator(&spec.id, &spec.params, &inst, &config.problem)?;
        let Engine::OneStep(stepper) = engine else {
            return Err(Error::invalid(format!("`{}` is not a one-step integrator", spec.id)));
        };
        let errors = final_time_errors(stepper.as_ref(), &inst.x0, t_end, h_list, &Reference::Computed)?;
        let order = match order_from_errors(h_list, &errors) {
            Ok(o) => o,
            Err(Error::OrderSaturated { error }) => {
                log::warn!("{}: error {error:.3e} already at round-off; no order fitted", spec.label());
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        entries.push((spec.label(), errors, order));
    }
    Ok(ConvergenceTable { t_end, h_list: h_list.to_vec(), entries })
}

/// Process exit code for an error: 2 for configuration and registry
/// problems, 3 for numerical failures, 1 for I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::UnknownId { .. } | Error::InvalidArgument(_) => 2,
        Error::Io(_) => 1,
        _ => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registries_list_required_ids() {
        let p = list("problems").unwrap();
        for id in ["kepler", "fpu", "nahm-octahedral"] {
            assert!(p.lines().any(|l| l.starts_with(id)), "{id}");
        }
        let i = list("integrators").unwrap();
        for id in ["kahan", "avf", "rkmk3", "zassenhaus"] {
            assert!(i.lines().any(|l| l.starts_with(id)), "{id}");
        }
        let d = list("diagnostics").unwrap();
        for id in ["symplecticity-defect", "volume-defect"] {
            assert!(d.lines().any(|l| l.starts_with(id)), "{id}");
        }
        assert_eq!(exit_code(&list("widgets").unwrap_err()), 2);
    }

    #[test]
    fn every_problem_builds() {
        for e in PROBLEMS {
            let mut c = ExperimentConfig { problem: e.id.into(), ..Default::default() };
            if e.id == "schrodinger" {
                c.problem_params.insert("n".into(), Value::from(64));
                c.problem_params.insert("epsilon".into(), Value::from(0.25));
            }
            let inst = build_problem(&c).unwrap_or_else(|err| panic!("{}: {err}", e.id));
            assert_eq!(inst.field.dim(), inst.x0.len(), "{}", e.id);
        }
    }

    #[test]
    fn separable_split_strang_is_stormer_verlet() {
        let k = problems::kepler(0.3).unwrap();
        let part = k.system.partition().unwrap().clone();
        let comp = Composition::new(strang_scheme(), separable_split(&part).unwrap()).unwrap();
        let a = comp.step(0.0, &k.initial, 0.05).unwrap();
        let b = part.stormer_verlet_step(&k.initial, 0.05);
        assert!((a - b).amax() < 1e-15);
    }

    #[test]
    fn unknown_ids_and_params_are_configuration_errors() {
        let c = ExperimentConfig { integrator: "nope".into(), ..Default::default() };
        assert_eq!(exit_code(&run(&c).unwrap_err()), 2);
        let mut c = ExperimentConfig::default();
        c.problem_params.insert("bogus".into(), Value::from(1.0));
        assert_eq!(exit_code(&run(&c).unwrap_err()), 2);
        let c = ExperimentConfig { integrator: "kahan".into(), ..Default::default() };
        assert_eq!(exit_code(&run(&c).unwrap_err()), 2);
    }

    #[test]
    fn param_parsing() {
        assert_eq!(parse_param("e=0.6").unwrap(), ("e".into(), Value::from(0.6)));
        assert_eq!(parse_param("kind=avf").unwrap(), ("kind".into(), Value::from("avf")));
        assert!(parse_param("novalue").is_err());
        let s = IntegratorSpec::parse("yoshida:boosts=2").unwrap();
        assert_eq!(s.id, "yoshida");
        assert_eq!(s.label(), "yoshida:boosts=2");
    }
}
