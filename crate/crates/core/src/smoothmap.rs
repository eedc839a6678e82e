//! Polynomial scalar and vector fields on axis-aligned chart boxes.
//!
//! Everything here is exact: derivatives and Lie brackets are computed on the
//! coefficient lists, so no differentiation error reaches the geometry built
//! on top. Terms are kept in graded lexicographic order with like monomials
//! collected, which makes `==` on fields a canonical-form comparison.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[lower, upper]` in ℝⁿ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ChartDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::InvalidInput(
                "chart box must have dimension >= 1".into(),
            ));
        }
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite())
        {
            return Err(Error::InvalidInput(
                "chart box needs lower < upper componentwise".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// The cube `[-h, h]^n`.
    pub fn cube(n: usize, h: f64) -> Self {
        Self {
            lower: vec![-h; n],
            upper: vec![h; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    pub fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if !self.contains(x) {
            return Err(Error::OutsideDomain { point: x.to_vec() });
        }
        Ok(())
    }

    /// Clamp a point into the closed box.
    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (a, b))| v.clamp(*a, *b))
            .collect()
    }

    /// Map a point of the unit cube onto the box.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (a, b))| (a + t * (b - a)).clamp(*a, *b))
            .collect()
    }
}

/// One monomial `coef * x^exps`, the unit of the config literal syntax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub exps: Vec<u32>,
    pub coef: f64,
}

fn grlex(a: &[u32], b: &[u32]) -> Ordering {
    let da: u32 = a.iter().sum();
    let db: u32 = b.iter().sum();
    db.cmp(&da).then_with(|| b.cmp(a))
}

/// Polynomial in `nvars` variables, canonical form.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: Vec<Term>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: Vec::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        Self::from_terms(
            nvars,
            vec![Term {
                exps: vec![0; nvars],
                coef: c,
            }],
        )
        .expect("well formed")
    }

    /// The coordinate function `x_i`.
    pub fn var(nvars: usize, i: usize) -> Self {
        let mut exps = vec![0; nvars];
        exps[i] = 1;
        Self::from_terms(nvars, vec![Term { exps, coef: 1.0 }]).expect("well formed")
    }

    /// `coef * x^exps` as a polynomial.
    pub fn monomial(exps: &[u32], coef: f64) -> Self {
        Self::from_terms(
            exps.len(),
            vec![Term {
                exps: exps.to_vec(),
                coef,
            }],
        )
        .expect("well formed")
    }

    pub fn from_terms(nvars: usize, terms: Vec<Term>) -> Result<Self> {
        for t in &terms {
            if t.exps.len() != nvars {
                return Err(Error::DimensionMismatch {
                    expected: nvars,
                    got: t.exps.len(),
                });
            }
            if !t.coef.is_finite() {
                return Err(Error::InvalidInput(
                    "polynomial coefficient is not finite".into(),
                ));
            }
        }
        let mut p = Self { nvars, terms };
        p.canonicalize();
        Ok(p)
    }

    fn canonicalize(&mut self) {
        self.terms.sort_by(|a, b| grlex(&a.exps, &b.exps));
        let mut out: Vec<Term> = Vec::with_capacity(self.terms.len());
        for t in self.terms.drain(..) {
            match out.last_mut() {
                Some(last) if last.exps == t.exps => last.coef += t.coef,
                _ => out.push(t),
            }
        }
        out.retain(|t| t.coef != 0.0);
        self.terms = out;
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|t| t.exps.iter().sum())
            .max()
            .unwrap_or(0)
    }

    /// Monomial-sum evaluation in canonical term order.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for t in &self.terms {
            let mut m = t.coef;
            for (xi, e) in x.iter().zip(&t.exps) {
                if *e > 0 {
                    m *= xi.powi(*e as i32);
                }
            }
            acc += m;
        }
        acc
    }

    pub fn derivative(&self, j: usize) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|t| t.exps[j] > 0)
            .map(|t| {
                let mut exps = t.exps.clone();
                let e = exps[j];
                exps[j] -= 1;
                Term {
                    exps,
                    coef: t.coef * e as f64,
                }
            })
            .collect();
        let mut p = Self {
            nvars: self.nvars,
            terms,
        };
        p.canonicalize();
        p
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        let mut p = Self {
            nvars: self.nvars,
            terms,
        };
        p.canonicalize();
        p
    }

    pub fn scale(&self, c: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| Term {
                exps: t.exps.clone(),
                coef: t.coef * c,
            })
            .collect();
        let mut p = Self {
            nvars: self.nvars,
            terms,
        };
        p.canonicalize();
        p
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                let exps = a.exps.iter().zip(&b.exps).map(|(x, y)| x + y).collect();
                terms.push(Term {
                    exps,
                    coef: a.coef * b.coef,
                });
            }
        }
        let mut p = Self {
            nvars: self.nvars,
            terms,
        };
        p.canonicalize();
        p
    }
}

/// Polynomial map ℝⁿ → ℝᵐ.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyField {
    dim_in: usize,
    entries: Vec<Polynomial>,
}

impl PolyField {
    pub fn new(dim_in: usize, entries: Vec<Polynomial>) -> Result<Self> {
        for p in &entries {
            if p.nvars != dim_in {
                return Err(Error::DimensionMismatch {
                    expected: dim_in,
                    got: p.nvars,
                });
            }
        }
        Ok(Self { dim_in, entries })
    }

    /// Build from the literal syntax: one term list per output component.
    pub fn from_literal(dim_in: usize, entries: Vec<Vec<Term>>) -> Result<Self> {
        let polys = entries
            .into_iter()
            .map(|t| Polynomial::from_terms(dim_in, t))
            .collect::<Result<_>>()?;
        Self::new(dim_in, polys)
    }

    pub fn to_literal(&self) -> Vec<Vec<Term>> {
        self.entries.iter().map(|p| p.terms.clone()).collect()
    }

    pub fn zero(dim_in: usize, dim_out: usize) -> Self {
        Self {
            dim_in,
            entries: vec![Polynomial::zero(dim_in); dim_out],
        }
    }

    /// Constant field with the given value.
    pub fn constant(dim_in: usize, value: &[f64]) -> Self {
        Self {
            dim_in,
            entries: value
                .iter()
                .map(|c| Polynomial::constant(dim_in, *c))
                .collect(),
        }
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Polynomial] {
        &self.entries
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(Polynomial::is_zero)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim_in {
            return Err(Error::DimensionMismatch {
                expected: self.dim_in,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.entries.iter().map(|p| p.eval(x)).collect()
    }

    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let m = self.entries.len();
        Ok(DMatrix::from_fn(m, self.dim_in, |i, j| {
            self.entries[i].derivative(j).eval(x)
        }))
    }

    /// Directional derivative `DF · X` as a field, `X` given by its components.
    fn derivative_along(&self, x: &[Polynomial]) -> Vec<Polynomial> {
        self.entries
            .iter()
            .map(|p| {
                (0..self.dim_in).fold(Polynomial::zero(self.dim_in), |acc, j| {
                    acc.add(&p.derivative(j).mul(&x[j]))
                })
            })
            .collect()
    }
}

fn require_vector_field(f: &PolyField) -> Result<()> {
    if f.dim_out() != f.dim_in() {
        return Err(Error::DimensionMismatch {
            expected: f.dim_in(),
            got: f.dim_out(),
        });
    }
    Ok(())
}

/// `[X, Y] = DY·X − DX·Y`.
pub fn lie_bracket(x: &PolyField, y: &PolyField) -> Result<PolyField> {
    require_vector_field(x)?;
    require_vector_field(y)?;
    if x.dim_in != y.dim_in {
        return Err(Error::DimensionMismatch {
            expected: x.dim_in,
            got: y.dim_in,
        });
    }
    let a = y.derivative_along(&x.entries);
    let b = x.derivative_along(&y.entries);
    let entries = a.iter().zip(&b).map(|(p, q)| p.sub(q)).collect();
    Ok(PolyField {
        dim_in: x.dim_in,
        entries,
    })
}

/// A field of the Lie hull together with its bracket length.
#[derive(Debug, Clone, PartialEq)]
pub struct HullElement {
    pub field: PolyField,
    pub step: usize,
}

/// Iterated brackets `[v1,[v2,…,[v_{j-1},v_j]…]]` for `j <= step_max`.
///
/// Zero fields and exact duplicates up to sign are dropped; each survivor is tagged with
/// the first step at which it appeared.
pub fn lie_hull(generators: &[PolyField], step_max: usize) -> Result<Vec<HullElement>> {
    if step_max == 0 {
        return Err(Error::InvalidInput("step_max must be >= 1".into()));
    }
    for g in generators {
        require_vector_field(g)?;
        if g.dim_in != generators[0].dim_in {
            return Err(Error::DimensionMismatch {
                expected: generators[0].dim_in,
                got: g.dim_in,
            });
        }
    }
    let mut hull: Vec<HullElement> = Vec::new();
    let push = |f: PolyField, step: usize, hull: &mut Vec<HullElement>| -> bool {
        let neg = PolyField {
            dim_in: f.dim_in,
            entries: f.entries.iter().map(|p| p.scale(-1.0)).collect(),
        };
        if f.is_zero() || hull.iter().any(|h| h.field == f || h.field == neg) {
            return false;
        }
        hull.push(HullElement { field: f, step });
        true
    };
    let mut frontier: Vec<PolyField> = Vec::new();
    for g in generators {
        if push(g.clone(), 1, &mut hull) {
            frontier.push(g.clone());
        }
    }
    for step in 2..=step_max {
        let mut next = Vec::new();
        for g in generators {
            for f in &frontier {
                let b = lie_bracket(g, f)?;
                if push(b.clone(), step, &mut hull) {
                    next.push(b);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    Ok(hull)
}
