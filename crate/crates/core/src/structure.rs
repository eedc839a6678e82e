//! Sub-Finsler structures `(M, E, σ, ψ)` on a chart box and the generalised
//! metric `ρ` they induce on the tangent bundle.
//!
//! The bundle is the trivial one, `E = M × ℝ^d`, and `ψ(x)` is the `n × d`
//! matrix whose columns are the polynomial fields `X_1, …, X_d` at `x`.
//! `ρ(x, v)` is the least fiber cost `σ_x(u)` over all `u` with `ψ(x) u = v`,
//! and is `Infinite` when no such `u` exists.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, least_norm, numerical_rank};
use crate::sampling;
use crate::smoothmap::{lie_hull, ChartDomain, PolyField};

/// Relative least-squares residual above which a vector counts as non-horizontal.
pub const TOL_RANGE: f64 = 1e-8;
const SPD_MIN_EIG: f64 = 1e-10;
const PNORM_REL_TOL: f64 = 1e-8;
const PNORM_MAX_ITER: usize = 10_000;

/// Value of the generalised metric: finite and nonnegative, or `Infinite`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GenMetricValue {
    Finite(f64),
    Infinite,
}

impl GenMetricValue {
    pub fn is_finite(&self) -> bool {
        matches!(self, GenMetricValue::Finite(_))
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            GenMetricValue::Finite(x) => Some(*x),
            GenMetricValue::Infinite => None,
        }
    }

    /// `+∞` for `Infinite`.
    pub fn as_f64(&self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

impl PartialOrd for GenMetricValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.as_f64().partial_cmp(&other.as_f64())
    }
}

/// Fiber norm `σ_x` on ℝ^d, varying polynomially with `x`.
#[derive(Debug, Clone, PartialEq)]
pub enum FiberNorm {
    /// `σ_x(u)² = uᵀ G(x) u`; `gram` has `d·d` row-major outputs.
    Hilbert { gram: PolyField },
    /// `σ_x(u) = (Σ (w_i(x)|u_i|)^p)^{1/p}`, `p = ∞` allowed.
    WeightedPNorm { p: f64, weights: PolyField },
}

impl FiberNorm {
    /// Constant Euclidean norm on ℝ^d over ℝⁿ.
    pub fn euclidean(n: usize, d: usize) -> Self {
        let mut id = vec![0.0; d * d];
        (0..d).for_each(|i| id[i * d + i] = 1.0);
        FiberNorm::Hilbert {
            gram: PolyField::constant(n, &id),
        }
    }

    /// Constant unweighted ℓ^p norm.
    pub fn lp(n: usize, d: usize, p: f64) -> Self {
        FiberNorm::WeightedPNorm {
            p,
            weights: PolyField::constant(n, &vec![1.0; d]),
        }
    }

    fn gram_at(gram: &PolyField, x: &[f64], d: usize) -> DMatrix<f64> {
        let g = gram.eval_unchecked(x);
        let mut m = DMatrix::from_row_slice(d, d, &g);
        let t = m.transpose();
        m = (m + t) * 0.5;
        m
    }
}

/// Evaluates `σ_x` at a fixed base point.
#[derive(Debug, Clone)]
pub enum FiberAt {
    Hilbert { gram: DMatrix<f64> },
    PNorm { p: f64, weights: Vec<f64> },
}

impl FiberAt {
    pub fn value(&self, u: &[f64]) -> f64 {
        match self {
            FiberAt::Hilbert { gram } => {
                let uv = DVector::from_column_slice(u);
                (uv.dot(&(gram * &uv))).max(0.0).sqrt()
            }
            FiberAt::PNorm { p, weights } => weighted_p(*p, weights, u),
        }
    }
}

pub(crate) fn weighted_p(p: f64, w: &[f64], u: &[f64]) -> f64 {
    if p.is_infinite() {
        return w
            .iter()
            .zip(u)
            .map(|(a, b)| a * b.abs())
            .fold(0.0, f64::max);
    }
    let m = w
        .iter()
        .zip(u)
        .map(|(a, b)| a * b.abs())
        .fold(0.0, f64::max);
    if m == 0.0 {
        return 0.0;
    }
    let s: f64 = w
        .iter()
        .zip(u)
        .map(|(a, b)| (a * b.abs() / m).powf(p))
        .sum();
    m * s.powf(1.0 / p)
}

/// A validated sub-Finsler structure on a chart box.
#[derive(Debug, Clone)]
pub struct SubFinslerStructure {
    pub name: String,
    pub domain: ChartDomain,
    fields: Vec<PolyField>,
    pub sigma: FiberNorm,
    pub declared_step: usize,
}

/// Per-point outcome of the Hörmander check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HormanderStep {
    Step(usize),
    Failure(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HormanderReport {
    pub step_max: usize,
    pub points: Vec<(Vec<f64>, HormanderStep)>,
}

impl HormanderReport {
    pub fn all_within(&self, step: usize) -> bool {
        self.points
            .iter()
            .all(|(_, s)| matches!(s, HormanderStep::Step(k) if *k <= step))
    }

    pub fn max_step(&self) -> Option<usize> {
        let mut m = 0;
        for (_, s) in &self.points {
            match s {
                HormanderStep::Step(k) => m = m.max(*k),
                HormanderStep::Failure(_) => return None,
            }
        }
        Some(m)
    }
}

impl SubFinslerStructure {
    /// Validates dimensions, the fiber norm at sampled points and the
    /// Hörmander condition at `declared_step`.
    pub fn new(
        name: impl Into<String>,
        domain: ChartDomain,
        fields: Vec<PolyField>,
        sigma: FiberNorm,
        declared_step: usize,
    ) -> Result<Self> {
        let n = domain.dim();
        if fields.is_empty() {
            return Err(Error::InvalidInput("bundle rank d must be >= 1".into()));
        }
        for f in &fields {
            if f.dim_in() != n || f.dim_out() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: f.dim_out(),
                });
            }
        }
        let d = fields.len();
        match &sigma {
            FiberNorm::Hilbert { gram } => {
                if gram.dim_in() != n || gram.dim_out() != d * d {
                    return Err(Error::DimensionMismatch {
                        expected: d * d,
                        got: gram.dim_out(),
                    });
                }
            }
            FiberNorm::WeightedPNorm { p, weights } => {
                if !(*p >= 1.0) {
                    return Err(Error::InvalidInput(format!("p must be >= 1, got {p}")));
                }
                if weights.dim_in() != n || weights.dim_out() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: weights.dim_out(),
                    });
                }
            }
        }
        if declared_step == 0 {
            return Err(Error::InvalidInput("declared step must be >= 1".into()));
        }
        let s = Self {
            name: name.into(),
            domain,
            fields,
            sigma,
            declared_step,
        };
        let samples = s.validation_points();
        for x in &samples {
            s.fiber_at(x)?;
        }
        let report = s.check_hormander(&samples, declared_step)?;
        if let Some((x, _)) = report
            .points
            .iter()
            .find(|(_, st)| matches!(st, HormanderStep::Failure(_)))
        {
            return Err(Error::PreconditionViolated {
                what: format!("Hörmander condition fails at declared step {declared_step}"),
                witness: x.clone(),
            });
        }
        Ok(s)
    }

    /// Box corners, centre and a Kronecker sample.
    pub fn validation_points(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut pts = vec![self.domain.from_unit(&vec![0.5; n])];
        if n <= 4 {
            for mask in 0..(1usize << n) {
                let u: Vec<f64> = (0..n)
                    .map(|i| if mask >> i & 1 == 1 { 1.0 } else { 0.0 })
                    .collect();
                pts.push(self.domain.from_unit(&u));
            }
        }
        for u in sampling::kronecker(n, 64, 0) {
            pts.push(self.domain.from_unit(&u));
        }
        pts
    }

    pub fn n(&self) -> usize {
        self.domain.dim()
    }

    pub fn d(&self) -> usize {
        self.fields.len()
    }

    pub fn fields(&self) -> &[PolyField] {
        &self.fields
    }

    pub fn is_sub_riemannian(&self) -> bool {
        matches!(self.sigma, FiberNorm::Hilbert { .. })
    }

    /// `ψ(x)` as an `n × d` matrix.
    pub fn psi(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, self.d());
        for (j, f) in self.fields.iter().enumerate() {
            for (i, v) in f.eval_unchecked(x).into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// `σ_x` frozen at `x`, validated.
    pub fn fiber_at(&self, x: &[f64]) -> Result<FiberAt> {
        let d = self.d();
        match &self.sigma {
            FiberNorm::Hilbert { gram } => {
                let g = FiberNorm::gram_at(gram, x, d);
                let min_eig = g
                    .clone()
                    .symmetric_eigenvalues()
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                if !(min_eig > SPD_MIN_EIG) {
                    return Err(Error::DegenerateGram {
                        point: x.to_vec(),
                        min_eig,
                    });
                }
                Ok(FiberAt::Hilbert { gram: g })
            }
            FiberNorm::WeightedPNorm { p, weights } => {
                let w = weights.eval_unchecked(x);
                if w.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::InvalidInput(format!(
                        "fiber weights must be positive at {x:?}"
                    )));
                }
                Ok(FiberAt::PNorm { p: *p, weights: w })
            }
        }
    }

    fn check_vector(&self, x: &[f64], v: &[f64]) -> Result<()> {
        self.domain.check(x)?;
        if v.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `ρ(x, v)`.
    pub fn horizontal_norm(&self, x: &[f64], v: &[f64]) -> Result<GenMetricValue> {
        self.check_vector(x, v)?;
        self.horizontal_norm_unchecked(x, v)
    }

    pub(crate) fn horizontal_norm_unchecked(&self, x: &[f64], v: &[f64]) -> Result<GenMetricValue> {
        min_cost_preimage(&self.psi(x), &self.fiber_at(x)?, v)
    }

    /// `σ_x(u)` without validating the fiber norm at `x`.
    pub(crate) fn sigma_unchecked(&self, x: &[f64], u: &[f64]) -> f64 {
        match &self.sigma {
            FiberNorm::Hilbert { gram } => {
                let d = u.len();
                let g = gram.eval_unchecked(x);
                let mut q = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        q += u[i] * g[i * d + j] * u[j];
                    }
                }
                q.max(0.0).sqrt()
            }
            FiberNorm::WeightedPNorm { p, weights } => {
                weighted_p(*p, &weights.eval_unchecked(x), u)
            }
        }
    }

    /// Numerical rank of `ψ(x)`.
    pub fn rank(&self, x: &[f64]) -> usize {
        numerical_rank(&self.psi(x))
    }

    /// Least-squares residual of `v` against the range of `ψ(x)`, at most `tol·max(|v|,1)`.
    pub fn is_horizontal(&self, x: &[f64], v: &[f64], tol: f64) -> bool {
        let ln = least_norm(&self.psi(x), &DVector::from_column_slice(v));
        ln.residual <= tol * linalg::norm2(v).max(1.0)
    }

    /// Least bracket step spanning ℝⁿ at each sample.
    pub fn check_hormander(
        &self,
        samples: &[Vec<f64>],
        step_max: usize,
    ) -> Result<HormanderReport> {
        let hull = lie_hull(&self.fields, step_max)?;
        let n = self.n();
        let mut points = Vec::with_capacity(samples.len());
        for x in samples {
            self.domain.check(x)?;
            let mut found = HormanderStep::Failure(step_max);
            for s in 1..=step_max {
                let cols: Vec<Vec<f64>> = hull
                    .iter()
                    .filter(|h| h.step <= s)
                    .map(|h| h.field.eval_unchecked(x))
                    .collect();
                let mut m = DMatrix::zeros(n, cols.len());
                for (j, c) in cols.iter().enumerate() {
                    for (i, v) in c.iter().enumerate() {
                        m[(i, j)] = *v;
                    }
                }
                if numerical_rank(&m) == n {
                    found = HormanderStep::Step(s);
                    break;
                }
            }
            points.push((x.clone(), found));
        }
        Ok(HormanderReport { step_max, points })
    }

    /// `ρ(limit) ≤ min over the last quarter of the tail + 1e-6`.
    ///
    /// An `Infinite` limit needs a divergent tail. A finite sample shows this
    /// as a last-quarter minimum of at least `δ^{-1/2}`, where `δ` is the
    /// largest `|x_k − x| + |v_k − v|` over that quarter; a bounded tail
    /// fails this once the sequence is close enough to its limit.
    pub fn lsc_probe(
        &self,
        tail: &[(Vec<f64>, Vec<f64>)],
        limit: (&[f64], &[f64]),
    ) -> Result<bool> {
        if tail.is_empty() {
            return Err(Error::InvalidInput("empty sequence".into()));
        }
        let at_limit = self.horizontal_norm(limit.0, limit.1)?;
        let start = tail.len() - tail.len().div_ceil(4);
        let mut tail_min = f64::INFINITY;
        let mut delta: f64 = 0.0;
        for (x, v) in &tail[start..] {
            tail_min = tail_min.min(self.horizontal_norm(x, v)?.as_f64());
            let dx = x
                .iter()
                .zip(limit.0)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let dv = v
                .iter()
                .zip(limit.1)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            delta = delta.max(dx + dv);
        }
        Ok(match at_limit {
            GenMetricValue::Infinite => {
                tail_min.is_infinite() || (delta > 0.0 && tail_min >= delta.powf(-0.5))
            }
            GenMetricValue::Finite(r) => r <= tail_min + 1e-6,
        })
    }
}

/// `min σ(u)` over `{u : A u = v}`, `Infinite` when the least-squares
/// residual exceeds `TOL_RANGE·|v|`.
pub(crate) fn min_cost_preimage(
    a: &DMatrix<f64>,
    fiber: &FiberAt,
    v: &[f64],
) -> Result<GenMetricValue> {
    let vv = DVector::from_column_slice(v);
    let vnorm = vv.norm();
    match fiber {
        FiberAt::Hilbert { gram } => {
            // Whiten: σ(u) = |Lᵀu|, so minimise |w| subject to A L⁻ᵀ w = v.
            let chol = gram
                .clone()
                .cholesky()
                .ok_or_else(|| Error::DegenerateGram {
                    point: Vec::new(),
                    min_eig: 0.0,
                })?;
            let xt = chol
                .l()
                .solve_lower_triangular(&a.transpose())
                .expect("nonsingular factor");
            let ln = least_norm(&xt.transpose(), &vv);
            if ln.residual > TOL_RANGE * vnorm {
                return Ok(GenMetricValue::Infinite);
            }
            Ok(GenMetricValue::Finite(ln.solution.norm()))
        }
        FiberAt::PNorm { p, weights } => {
            let ln = least_norm(a, &vv);
            if ln.residual > TOL_RANGE * vnorm {
                return Ok(GenMetricValue::Infinite);
            }
            let u0: Vec<f64> = ln.solution.iter().cloned().collect();
            if ln.kernel.ncols() == 0 {
                return Ok(GenMetricValue::Finite(weighted_p(*p, weights, &u0)));
            }
            Ok(GenMetricValue::Finite(minimize_over_kernel(
                *p, weights, &u0, &ln.kernel,
            )?))
        }
    }
}

/// Minimises `σ(u0 + N z)` over `z` for a weighted p-norm `σ`.
///
/// Subgradient descent with diminishing steps, then cyclic exact line searches
/// along kernel directions and their pairwise sums and differences until a
/// full sweep improves by less than the relative tolerance.
fn minimize_over_kernel(p: f64, w: &[f64], u0: &[f64], kernel: &DMatrix<f64>) -> Result<f64> {
    let k = kernel.ncols();
    let d = u0.len();
    let eval = |z: &[f64]| -> f64 {
        let mut u = u0.to_vec();
        for j in 0..k {
            for i in 0..d {
                u[i] += kernel[(i, j)] * z[j];
            }
        }
        weighted_p(p, w, &u)
    };
    let subgrad = |z: &[f64]| -> Vec<f64> {
        let mut u = u0.to_vec();
        for j in 0..k {
            for i in 0..d {
                u[i] += kernel[(i, j)] * z[j];
            }
        }
        let f = weighted_p(p, w, &u);
        let mut g = vec![0.0; d];
        if f > 0.0 {
            if p.is_infinite() {
                let (imax, _) = w.iter().zip(&u).map(|(a, b)| a * b.abs()).enumerate().fold(
                    (0, -1.0),
                    |acc, (i, val)| if val > acc.1 { (i, val) } else { acc },
                );
                g[imax] = w[imax] * u[imax].signum();
            } else {
                for i in 0..d {
                    let t = w[i] * u[i].abs() / f;
                    g[i] = w[i] * t.powf(p - 1.0) * u[i].signum();
                }
            }
        }
        (0..k)
            .map(|j| (0..d).map(|i| kernel[(i, j)] * g[i]).sum())
            .collect()
    };

    let mut z = vec![0.0; k];
    let f0 = eval(&z);
    if f0 == 0.0 {
        return Ok(0.0);
    }
    let mut best = (f0, z.clone());
    let step0 = f0 / w.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let mut iterations = 0;
    for t in 0..500 {
        iterations += 1;
        let g = subgrad(&z);
        let gn = linalg::norm2(&g);
        if gn == 0.0 {
            break;
        }
        let s = step0 / ((t + 1) as f64).sqrt() / gn;
        for j in 0..k {
            z[j] -= s * g[j];
        }
        let f = eval(&z);
        if f < best.0 {
            best = (f, z.clone());
        }
    }
    z = best.1.clone();
    let mut f = best.0;

    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for a in 0..k {
        let mut e = vec![0.0; k];
        e[a] = 1.0;
        dirs.push(e);
    }
    for a in 0..k {
        for b in (a + 1)..k {
            let mut e = vec![0.0; k];
            e[a] = 1.0;
            e[b] = 1.0;
            dirs.push(e.clone());
            e[b] = -1.0;
            dirs.push(e);
        }
    }
    loop {
        let before = f;
        for dir in &dirs {
            let line = |t: f64| {
                let zz: Vec<f64> = z.iter().zip(dir).map(|(a, b)| a + t * b).collect();
                eval(&zz)
            };
            let (t, ft) = line_minimize(&line, step0.max(1e-12));
            iterations += 1;
            if ft < f {
                f = ft;
                z.iter_mut().zip(dir).for_each(|(a, b)| *a += t * b);
            }
        }
        if before - f <= PNORM_REL_TOL * f.max(1e-300) {
            return Ok(f);
        }
        if iterations >= PNORM_MAX_ITER {
            return Err(Error::NonConvergence { iterations });
        }
    }
}

/// Golden-section search of a convex function of one variable.
fn line_minimize(f: &impl Fn(f64) -> f64, scale: f64) -> (f64, f64) {
    let f0 = f(0.0);
    let mut lo = -scale;
    let mut hi = scale;
    while f(lo) < f0 && lo > -1e12 {
        lo *= 2.0;
    }
    while f(hi) < f0 && hi < 1e12 {
        hi *= 2.0;
    }
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = lo;
    let mut b = hi;
    let mut c = b - g * (b - a);
    let mut dd = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(dd);
    for _ in 0..200 {
        if (b - a).abs() <= 1e-14 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc < fd {
            b = dd;
            dd = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = dd;
            fc = fd;
            dd = a + g * (b - a);
            fd = f(dd);
        }
    }
    let (t, ft) = if fc < fd { (c, fc) } else { (dd, fd) };
    if ft < f0 {
        (t, ft)
    } else {
        (0.0, f0)
    }
}
