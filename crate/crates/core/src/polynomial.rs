//! Sparse multivariate polynomials and polynomial vector fields.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::VectorField;
use crate::state::State;

/// `Σ c_α x^α` with exponent tuples as keys. Zero coefficients are dropped.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polynomial {
    dim: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl Polynomial {
    pub fn zero(dim: usize) -> Self {
        Polynomial {
            dim,
            terms: BTreeMap::new(),
        }
    }

    /// Build from `(coefficient, exponents)` pairs; repeated exponents add up.
    pub fn new(dim: usize, terms: &[(f64, &[u32])]) -> Result<Self> {
        let mut p = Self::zero(dim);
        for (c, e) in terms {
            if e.len() != dim {
                return Err(Error::invalid(format!(
                    "monomial has {} exponents, polynomial has {dim} variables",
                    e.len()
                )));
            }
            p.add_term(*c, e.to_vec());
        }
        Ok(p)
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        let mut p = Self::zero(dim);
        p.add_term(c, vec![0; dim]);
        p
    }

    /// The coordinate `x_i`.
    pub fn var(dim: usize, i: usize) -> Self {
        let mut e = vec![0; dim];
        e[i] = 1;
        let mut p = Self::zero(dim);
        p.add_term(1.0, e);
        p
    }

    fn add_term(&mut self, c: f64, e: Vec<u32>) {
        let entry = self.terms.entry(e).or_insert(0.0);
        *entry += c;
        if *entry == 0.0 {
            self.terms.retain(|_, v| *v != 0.0);
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u32], f64)> {
        self.terms.iter().map(|(e, c)| (e.as_slice(), *c))
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| c * e.iter().zip(x).map(|(&k, &xi)| xi.powi(k as i32)).product::<f64>())
            .sum()
    }

    /// `∂/∂x_i`.
    pub fn partial(&self, i: usize) -> Self {
        let mut p = Self::zero(self.dim);
        for (e, c) in &self.terms {
            if e[i] > 0 {
                let mut e2 = e.clone();
                e2[i] -= 1;
                p.add_term(c * e[i] as f64, e2);
            }
        }
        p
    }

    /// `∫ · dx_i` with zero integration constant.
    pub fn antiderivative(&self, i: usize) -> Self {
        let mut p = Self::zero(self.dim);
        for (e, c) in &self.terms {
            let mut e2 = e.clone();
            e2[i] += 1;
            p.add_term(c / e2[i] as f64, e2);
        }
        p
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut p = self.clone();
        for (e, c) in &other.terms {
            p.add_term(*c, e.clone());
        }
        p
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut p = Self::zero(self.dim);
        for (e, c) in &self.terms {
            p.add_term(c * s, e.clone());
        }
        p
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut p = Self::zero(self.dim);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                p.add_term(ca * cb, e);
            }
        }
        p
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (e, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{c}")?;
            for (i, k) in e.iter().enumerate() {
                match k {
                    0 => {}
                    1 => write!(f, "·x{}", i + 1)?,
                    _ => write!(f, "·x{}^{k}", i + 1)?,
                }
            }
        }
        Ok(())
    }
}

/// Vector field with one polynomial per component.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialVectorField {
    components: Vec<Polynomial>,
}

impl PolynomialVectorField {
    pub fn new(components: Vec<Polynomial>) -> Result<Self> {
        let d = components.len();
        if components.iter().any(|p| p.dim() != d) {
            return Err(Error::invalid("every component must have as many variables as the field"));
        }
        Ok(PolynomialVectorField { components })
    }

    pub fn zero(d: usize) -> Self {
        PolynomialVectorField {
            components: vec![Polynomial::zero(d); d],
        }
    }

    pub fn components(&self) -> &[Polynomial] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &Polynomial {
        &self.components[i]
    }

    pub fn degree(&self) -> u32 {
        self.components.iter().map(|p| p.degree()).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(|p| p.is_zero())
    }

    pub fn divergence(&self) -> Polynomial {
        let d = self.components.len();
        (0..d).fold(Polynomial::zero(d), |acc, i| acc.add(&self.components[i].partial(i)))
    }

    pub fn add(&self, other: &Self) -> Self {
        PolynomialVectorField {
            components: self.components.iter().zip(&other.components).map(|(a, b)| a.add(b)).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        PolynomialVectorField {
            components: self.components.iter().zip(&other.components).map(|(a, b)| a.sub(b)).collect(),
        }
    }
}

impl VectorField for PolynomialVectorField {
    fn dim(&self) -> usize {
        self.components.len()
    }

    fn eval(&self, _t: f64, x: &State) -> State {
        DVector::from_iterator(self.components.len(), self.components.iter().map(|p| p.eval(x.as_slice())))
    }

    fn jacobian(&self, _t: f64, x: &State) -> Option<DMatrix<f64>> {
        let d = self.components.len();
        Some(DMatrix::from_fn(d, d, |i, j| self.components[i].partial(j).eval(x.as_slice())))
    }
}
