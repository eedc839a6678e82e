//! Norm constructions: extension of a norm from a subspace, smoothing by
//! support-point power means, and the smooth strongly convex anchor norm
//! sandwiched between a minorant metric and `ρ`.

use nalgebra::{DMatrix, DVector};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::distribution::orthonormal_frame;
use crate::error::{Error, Result};
use crate::linalg::{self, gram_schmidt, orthonormal_complement, RANK_CUTOFF};
use crate::sampling;
use crate::structure::{weighted_p, FiberAt, GenMetricValue, SubFinslerStructure};

/// A norm on ℝ^d.
pub trait Norm: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, v: &[f64]) -> f64;
    /// A closed-form upper bound of the norm on the Euclidean unit sphere.
    fn sphere_max_bound(&self) -> Option<f64> {
        None
    }
}

/// A field of (generalised) norms on the chart, finite everywhere.
pub trait MetricField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], v: &[f64]) -> Result<f64>;
    fn sphere_max_bound(&self, _x: &[f64]) -> Result<Option<f64>> {
        Ok(None)
    }
    /// The norm at `x` with any per-point work done once, when the field
    /// can provide it.
    fn frozen(&self, _x: &[f64]) -> Result<Option<Box<dyn Norm + '_>>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Euclidean(pub usize);

impl Norm for Euclidean {
    fn dim(&self) -> usize {
        self.0
    }
    fn value(&self, v: &[f64]) -> f64 {
        linalg::norm2(v)
    }
    fn sphere_max_bound(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// The zero function, standing in for `F_0 = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField(pub usize);

impl Norm for ZeroField {
    fn dim(&self) -> usize {
        self.0
    }
    fn value(&self, _v: &[f64]) -> f64 {
        0.0
    }
    fn sphere_max_bound(&self) -> Option<f64> {
        Some(0.0)
    }
}

impl MetricField for ZeroField {
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&self, _x: &[f64], _v: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
    fn sphere_max_bound(&self, _x: &[f64]) -> Result<Option<f64>> {
        Ok(Some(0.0))
    }
}

impl Norm for FiberAt {
    fn dim(&self) -> usize {
        match self {
            FiberAt::Hilbert { gram } => gram.nrows(),
            FiberAt::PNorm { weights, .. } => weights.len(),
        }
    }
    fn value(&self, v: &[f64]) -> f64 {
        FiberAt::value(self, v)
    }
}

/// A metric field frozen at a base point. Evaluation errors are kept and
/// reported through [`FieldAt::take_error`]; the failing value reads as NaN so
/// that every strict comparison against it fails.
pub struct FieldAt<'a> {
    pub field: &'a dyn MetricField,
    pub x: &'a [f64],
    error: Mutex<Option<Error>>,
}

impl<'a> FieldAt<'a> {
    pub fn new(field: &'a dyn MetricField, x: &'a [f64]) -> Self {
        Self {
            field,
            x,
            error: Mutex::new(None),
        }
    }

    pub fn take_error(&self) -> Option<Error> {
        self.error.lock().take()
    }
}

impl Norm for FieldAt<'_> {
    fn dim(&self) -> usize {
        self.field.dim()
    }
    fn value(&self, v: &[f64]) -> f64 {
        match self.field.eval(self.x, v) {
            Ok(f) => f,
            Err(e) => {
                self.error.lock().get_or_insert(e);
                f64::NAN
            }
        }
    }
    fn sphere_max_bound(&self) -> Option<f64> {
        match self.field.sphere_max_bound(self.x) {
            Ok(b) => b,
            Err(e) => {
                self.error.lock().get_or_insert(e);
                None
            }
        }
    }
}

/// Power-mean smooth norm `(Σ_h (h·v)^{2m})^{1/2m} + c|v|` over a symmetric set `H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothNorm {
    pub dim: usize,
    /// Support points, row-major, `dim` entries each.
    pub support: Vec<f64>,
    /// The even exponent `2m`.
    pub power: f64,
    pub euclid_coef: f64,
}

impl SmoothNorm {
    pub fn new(dim: usize, support: Vec<Vec<f64>>, power: f64, euclid_coef: f64) -> Result<Self> {
        if support.iter().any(|h| h.len() != dim) {
            return Err(Error::InvalidInput(
                "support point of wrong dimension".into(),
            ));
        }
        if !(power >= 2.0) || power % 2.0 != 0.0 {
            return Err(Error::InvalidInput(format!(
                "power must be an even integer >= 2, got {power}"
            )));
        }
        if !(euclid_coef >= 0.0) {
            return Err(Error::InvalidInput("euclid_coef must be >= 0".into()));
        }
        Ok(Self {
            dim,
            support: support.concat(),
            power,
            euclid_coef,
        })
    }

    pub fn support_len(&self) -> usize {
        self.support.len() / self.dim.max(1)
    }

    pub fn support_points(&self) -> impl Iterator<Item = &[f64]> {
        self.support.chunks(self.dim)
    }

    /// Same norm plus `c|v|`.
    pub fn with_euclid(mut self, c: f64) -> Self {
        self.euclid_coef = c;
        self
    }

    fn projections(&self, v: &[f64]) -> (Vec<f64>, f64) {
        let t: Vec<f64> = self.support_points().map(|h| linalg::dot(h, v)).collect();
        let tmax = t.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        (t, tmax)
    }

    /// Value of the power-mean part, without the Euclidean term.
    pub fn power_mean(&self, v: &[f64]) -> f64 {
        match self.dim {
            2 => self.power_mean_fixed::<2>(v),
            3 => self.power_mean_fixed::<3>(v),
            4 => self.power_mean_fixed::<4>(v),
            _ => self.power_mean_dyn(v),
        }
    }

    fn power_mean_fixed<const D: usize>(&self, v: &[f64]) -> f64 {
        const BUF: usize = 1024;
        let v: &[f64; D] = v.try_into().expect("direction of wrong dimension");
        let dot = |h: &[f64]| {
            let h: &[f64; D] = h.try_into().unwrap();
            let mut t = 0.0;
            for i in 0..D {
                t += h[i] * v[i];
            }
            t.abs()
        };
        if self.support.len() > BUF * D {
            let tmax = self
                .support
                .chunks_exact(D)
                .fold(0.0f64, |m, h| m.max(dot(h)));
            return self.power_tail(tmax, self.support.chunks_exact(D).map(dot));
        }
        let mut buf = [0.0f64; BUF];
        let m = self.support.len() / D;
        let mut acc = [0.0f64; 4];
        for (i, h) in self.support.chunks_exact(D).enumerate() {
            let t = dot(h);
            buf[i] = t;
            acc[i % 4] = acc[i % 4].max(t);
        }
        let tmax = acc[0].max(acc[1]).max(acc[2].max(acc[3]));
        self.power_tail(tmax, buf[..m].iter().copied())
    }

    fn power_mean_dyn(&self, v: &[f64]) -> f64 {
        let tmax = self
            .support_points()
            .fold(0.0f64, |m, h| m.max(linalg::dot(h, v).abs()));
        self.power_tail(tmax, self.support_points().map(|h| linalg::dot(h, v)))
    }

    fn power_tail(&self, tmax: f64, t: impl Iterator<Item = f64>) -> f64 {
        if tmax == 0.0 {
            return 0.0;
        }
        let cut = tmax * self.cut();
        let mut s = 0.0;
        for ti in t {
            let a = ti.abs();
            if a > cut {
                s += (self.power * (a / tmax).ln()).exp();
            }
        }
        tmax * s.powf(1.0 / self.power)
    }

    /// Terms below `e^{-50}` are invisible next to the largest one, which is 1.
    fn cut(&self) -> f64 {
        (-50.0 / self.power).exp()
    }

    fn normalized_sum(&self, t: &[f64], tmax: f64) -> f64 {
        let cut = self.cut();
        t.iter()
            .map(|ti| (ti / tmax).abs())
            .filter(|r| *r > cut)
            .map(|r| (self.power * r.ln()).exp())
            .sum()
    }

    /// Gradient of the value; zero at the origin.
    pub fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut g = vec![0.0; d];
        let (t, tmax) = self.projections(v);
        if tmax > 0.0 {
            let s = self.normalized_sum(&t, tmax);
            let a = 1.0 / self.power - 1.0;
            let cut = (-745.0 / (self.power - 1.0)).exp();
            for (h, ti) in self.support_points().zip(&t) {
                let r = ti.abs() / tmax;
                if r > cut {
                    let w = ((self.power - 1.0) * r.ln()).exp() * ti.signum();
                    g.iter_mut().zip(h).for_each(|(gi, hi)| *gi += w * hi);
                }
            }
            let sa = s.powf(a);
            g.iter_mut().for_each(|gi| *gi *= sa);
        }
        let nv = linalg::norm2(v);
        if self.euclid_coef > 0.0 && nv > 0.0 {
            g.iter_mut()
                .zip(v)
                .for_each(|(gi, vi)| *gi += self.euclid_coef * vi / nv);
        }
        g
    }

    /// Hessian of `value²` at `v ≠ 0`.
    pub fn hessian_of_square(&self, v: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let mut hess_f = DMatrix::zeros(d, d);
        let (t, tmax) = self.projections(v);
        let f = self.power_mean(v);
        if tmax > 0.0 {
            let s = self.normalized_sum(&t, tmax);
            let p = self.power;
            let mut gh = DVector::zeros(d);
            let mut hh = DMatrix::zeros(d, d);
            for (h, ti) in self.support_points().zip(&t) {
                let r = ti.abs() / tmax;
                let lr = r.ln();
                if (p - 2.0) * lr > -745.0 {
                    let hv = DVector::from_column_slice(h);
                    gh += &hv * ((p - 1.0) * lr).exp() * ti.signum();
                    hh += &hv * hv.transpose() * ((p - 2.0) * lr).exp();
                }
            }
            let a = 1.0 / p - 1.0;
            hess_f = (&gh * gh.transpose()) * ((1.0 - p) / tmax * s.powf(a - 1.0))
                + hh * ((p - 1.0) / tmax * s.powf(a));
        }
        let nv = linalg::norm2(v);
        let vv = DVector::from_column_slice(v);
        let mut hess = hess_f;
        if self.euclid_coef > 0.0 && nv > 0.0 {
            let u = &vv / nv;
            hess += (DMatrix::identity(d, d) - &u * u.transpose()) * (self.euclid_coef / nv);
        }
        let g = DVector::from_vec(self.gradient(v));
        let value = f + self.euclid_coef * nv;
        (&g * g.transpose()) * 2.0 + hess * (2.0 * value)
    }
}

impl Norm for SmoothNorm {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, v: &[f64]) -> f64 {
        let pm = self.power_mean(v);
        if self.euclid_coef > 0.0 {
            pm + self.euclid_coef * linalg::norm2(v)
        } else {
            pm
        }
    }
    fn sphere_max_bound(&self) -> Option<f64> {
        let hmax = self.support_points().map(linalg::norm2).fold(0.0, f64::max);
        Some(hmax * (self.support_len() as f64).powf(1.0 / self.power) + self.euclid_coef)
    }
}

/// Closed-form norms used by the constructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NormSpec {
    /// `(Σ (w_i|v_i|)^p)^{1/p}`.
    ExplicitP {
        p: f64,
        weights: Vec<f64>,
    },
    /// `sqrt(vᵀQv)` with `Q` symmetric positive semidefinite.
    Quadratic {
        matrix: DMatrix<f64>,
    },
    /// `min σ(u)` subject to `A u = v`, infinite off the range of `A`.
    MinPreimage {
        map: DMatrix<f64>,
        p: f64,
        weights: Vec<f64>,
    },
    /// `base(P_V v) + λ′|P_{V⊥} v|` for orthonormal `frame` of `V` and `complement`.
    Extension {
        frame: DMatrix<f64>,
        complement: DMatrix<f64>,
        base: Box<NormSpec>,
        lambda_prime: f64,
    },
    Scaled {
        factor: f64,
        inner: Box<NormSpec>,
    },
    SmoothedSum {
        smooth: SmoothNorm,
        euclid_coef: f64,
    },
}

impl NormSpec {
    pub fn euclidean(d: usize) -> Self {
        NormSpec::ExplicitP {
            p: 2.0,
            weights: vec![1.0; d],
        }
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        match self {
            NormSpec::ExplicitP { p, weights } => weighted_p(*p, weights, v),
            NormSpec::Quadratic { matrix } => {
                let vv = DVector::from_column_slice(v);
                vv.dot(&(matrix * &vv)).max(0.0).sqrt()
            }
            NormSpec::MinPreimage { map, p, weights } => min_preimage(map, *p, weights, v)
                .map(|g| g.as_f64())
                .unwrap_or(f64::NAN),
            NormSpec::Extension {
                frame,
                complement,
                base,
                lambda_prime,
            } => {
                let vv = DVector::from_column_slice(v);
                let proj = frame * (frame.transpose() * &vv);
                let tail = (complement.transpose() * &vv).norm();
                base.eval(proj.as_slice()) + lambda_prime * tail
            }
            NormSpec::Scaled { factor, inner } => factor * inner.eval(v),
            NormSpec::SmoothedSum {
                smooth,
                euclid_coef,
            } => smooth.value(v) + euclid_coef * linalg::norm2(v),
        }
    }

    fn spec_dim(&self) -> usize {
        match self {
            NormSpec::ExplicitP { weights, .. } => weights.len(),
            NormSpec::Quadratic { matrix } => matrix.nrows(),
            NormSpec::MinPreimage { map, .. } => map.nrows(),
            NormSpec::Extension { frame, .. } => frame.nrows(),
            NormSpec::Scaled { inner, .. } => inner.spec_dim(),
            NormSpec::SmoothedSum { smooth, .. } => smooth.dim,
        }
    }

    fn max_bound(&self) -> Option<f64> {
        match self {
            NormSpec::ExplicitP { p, weights } => {
                let wmax = weights.iter().cloned().fold(0.0, f64::max);
                if *p >= 2.0 {
                    Some(wmax)
                } else {
                    // Hölder: ‖(w_i v_i)‖_p ≤ ‖w‖_r |v| with 1/r = 1/p − 1/2.
                    let r = 2.0 * p / (2.0 - p);
                    Some(weighted_p(r, &vec![1.0; weights.len()], weights))
                }
            }
            NormSpec::Quadratic { matrix } => Some(
                matrix
                    .clone()
                    .symmetric_eigenvalues()
                    .iter()
                    .cloned()
                    .fold(0.0, f64::max)
                    .max(0.0)
                    .sqrt(),
            ),
            NormSpec::MinPreimage { .. } => None,
            NormSpec::Extension {
                base, lambda_prime, ..
            } => base
                .max_bound()
                .map(|b| (b * b + lambda_prime * lambda_prime).sqrt()),
            NormSpec::Scaled { factor, inner } => inner.max_bound().map(|b| b * factor.abs()),
            NormSpec::SmoothedSum {
                smooth,
                euclid_coef,
            } => smooth.sphere_max_bound().map(|b| b + euclid_coef),
        }
    }

    /// Points of the dual unit ball whose maximal pairing reproduces the norm
    /// to within `tol` on the sphere, together with that guaranteed error,
    /// when the norm admits a closed-form description.
    fn dual_samples_for(&self, tol: f64, relative: bool) -> Option<(Vec<Vec<f64>>, f64)> {
        match self {
            NormSpec::ExplicitP { p, weights } => {
                let d = weights.len();
                if p.is_infinite() {
                    let mut h = Vec::new();
                    for (i, w) in weights.iter().enumerate() {
                        let mut e = vec![0.0; d];
                        e[i] = *w;
                        h.push(e.clone());
                        e[i] = -*w;
                        h.push(e);
                    }
                    Some((h, 0.0))
                } else if *p == 1.0 && d <= 12 {
                    let h = (0..(1usize << d))
                        .map(|mask| {
                            (0..d)
                                .map(|i| {
                                    if mask >> i & 1 == 1 {
                                        weights[i]
                                    } else {
                                        -weights[i]
                                    }
                                })
                                .collect()
                        })
                        .collect();
                    Some((h, 0.0))
                } else {
                    None
                }
            }
            NormSpec::Quadratic { matrix } => {
                let d = matrix.nrows();
                let eig = matrix.clone().symmetric_eigen();
                let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
                let keep: Vec<usize> = (0..d)
                    .filter(|i| eig.eigenvalues[*i] > RANK_CUTOFF * lmax.max(1e-300))
                    .collect();
                if keep.is_empty() {
                    return Some((vec![vec![0.0; d]], 0.0));
                }
                // base(v) = |R v| with R = Λ^{1/2} Eᵀ on the range; dual points Rᵀθ.
                let k = keep.len();
                let rt = |theta: &[f64]| -> Vec<f64> {
                    let mut g = vec![0.0; d];
                    for (a, &i) in keep.iter().enumerate() {
                        let s = eig.eigenvalues[i].sqrt() * theta[a];
                        for j in 0..d {
                            g[j] += eig.eigenvectors[(j, i)] * s;
                        }
                    }
                    g
                };
                let rmax = if relative { 1.0 } else { lmax.sqrt() };
                match k {
                    1 => Some((vec![rt(&[1.0]), rt(&[-1.0])], 0.0)),
                    2 => {
                        // Equally spaced angles lose at most 1 − cos(π/K) relative.
                        let mut count = 8usize;
                        while rmax * (1.0 - (std::f64::consts::PI / count as f64).cos()) > tol
                            && count < 1 << 20
                        {
                            count *= 2;
                        }
                        let err = rmax * (1.0 - (std::f64::consts::PI / count as f64).cos());
                        let h = (0..count)
                            .map(|i| {
                                let a = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
                                rt(&[a.cos(), a.sin()])
                            })
                            .collect();
                        Some((h, err))
                    }
                    _ => None,
                }
            }
            NormSpec::Extension {
                frame,
                complement,
                base,
                lambda_prime,
            } => {
                let (g, err) = if frame.ncols() == 0 {
                    (vec![vec![0.0; frame.nrows()]], 0.0)
                } else {
                    base.dual_samples_for(tol, relative)?
                };
                let d = frame.nrows();
                let k_perp = complement.ncols();
                let perp: Vec<Vec<f64>> = match k_perp {
                    0 => vec![vec![0.0; d]],
                    1 => vec![
                        complement
                            .column(0)
                            .iter()
                            .map(|x| x * lambda_prime)
                            .collect(),
                        complement
                            .column(0)
                            .iter()
                            .map(|x| -x * lambda_prime)
                            .collect(),
                    ],
                    _ => return None,
                };
                // Project base duals onto V so the ⊥ part stays exact.
                let pv = frame * frame.transpose();
                let mut h = Vec::with_capacity(g.len() * perp.len());
                for gi in &g {
                    let gp = &pv * DVector::from_column_slice(gi);
                    for nu in &perp {
                        h.push(gp.iter().zip(nu).map(|(a, b)| a + b).collect());
                    }
                }
                Some((h, err))
            }
            NormSpec::Scaled { factor, inner } => {
                let f = factor.abs();
                let (h, err) = if relative {
                    inner.dual_samples_for(tol, true)?
                } else {
                    inner.dual_samples_for(tol / f.max(1e-300), false)?
                };
                let err = if relative { err } else { err * f };
                Some((
                    h.into_iter()
                        .map(|v| v.into_iter().map(|x| x * f).collect())
                        .collect(),
                    err,
                ))
            }
            _ => None,
        }
    }
}

impl Norm for NormSpec {
    fn dim(&self) -> usize {
        self.spec_dim()
    }
    fn value(&self, v: &[f64]) -> f64 {
        self.eval(v)
    }
    fn sphere_max_bound(&self) -> Option<f64> {
        self.max_bound()
    }
}

/// `min σ(u)` over `A u = v`.
pub fn min_preimage(
    map: &DMatrix<f64>,
    p: f64,
    weights: &[f64],
    v: &[f64],
) -> Result<GenMetricValue> {
    let fiber = FiberAt::PNorm {
        p,
        weights: weights.to_vec(),
    };
    crate::structure::min_cost_preimage(map, &fiber, v)
}

/// Sphere maximum of a norm: the closed-form bound when available, otherwise
/// a sampled maximum inflated by 1%.
pub fn sphere_max(norm: &dyn Norm, samples: usize) -> f64 {
    if let Some(b) = norm.sphere_max_bound() {
        return b;
    }
    let m = sampling::sphere_directions(norm.dim(), samples)
        .iter()
        .map(|v| norm.value(v))
        .fold(0.0, f64::max);
    1.01 * m
}

/// Extension of a norm from `V = span(v_basis)` to ℝ^d, dominating `minorant`
/// off the origin and bounded below by `lambda` on `V⊥ ∩ 𝕊`.
pub fn extend_norm(
    v_basis: &[DVector<f64>],
    base: NormSpec,
    minorant: &dyn Norm,
    lambda: f64,
) -> Result<NormSpec> {
    extend_norm_with(v_basis, base, minorant, lambda, 256)
}

pub fn extend_norm_with(
    v_basis: &[DVector<f64>],
    base: NormSpec,
    minorant: &dyn Norm,
    lambda: f64,
    samples: usize,
) -> Result<NormSpec> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput("lambda must be > 0".into()));
    }
    let d = minorant.dim();
    if v_basis.iter().any(|b| b.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: v_basis.first().map_or(0, |b| b.len()),
        });
    }
    let (frame, pivots) = gram_schmidt(v_basis);
    if pivots.len() != v_basis.len() {
        return Err(Error::InvalidInput(
            "V_basis vectors are not independent".into(),
        ));
    }
    let k = frame.len();
    let complement = orthonormal_complement(&frame, d);
    if k > 0 {
        for q in sampling::sphere_directions(k, samples) {
            let mut v = vec![0.0; d];
            for (qi, w) in q.iter().zip(&frame) {
                v.iter_mut().zip(w.iter()).for_each(|(a, b)| *a += qi * b);
            }
            let b = base.eval(&v);
            let m = minorant.value(&v);
            if !(b > m) {
                return Err(Error::PreconditionViolated {
                    what: format!("base {b} <= minorant {m} on V"),
                    witness: v,
                });
            }
        }
    }
    let lambda_prime = lambda + sphere_max(minorant, samples.max(64));
    if !lambda_prime.is_finite() {
        return Err(Error::InvalidInput(
            "minorant is not finite on the sphere".into(),
        ));
    }
    Ok(NormSpec::Extension {
        frame: linalg::from_columns(&frame, d),
        complement: linalg::from_columns(&complement, d),
        base: Box::new(base),
        lambda_prime,
    })
}

#[derive(Debug, Clone)]
pub struct SmoothApprox {
    pub norm: SmoothNorm,
    /// Largest `|smooth − target|` on the validation directions.
    pub deviation: f64,
    pub validation_dirs: usize,
}

/// Power-mean smoothing of `target` to within `tol` on the sphere.
pub fn smooth_norm_approx(target: &NormSpec, tol: f64) -> Result<SmoothApprox> {
    smooth_norm_approx_with(target, tol, 10_000)
}

const SUPPORT_CAP: usize = 1 << 17;

pub fn smooth_norm_approx_with(
    target: &NormSpec,
    tol: f64,
    validation_dirs: usize,
) -> Result<SmoothApprox> {
    smooth_impl(target, tol, false, validation_dirs)
}

/// Smoothing with `|smooth(v) − target(v)| ≤ tau·target(v)`; `deviation`
/// is then relative.
pub fn smooth_norm_approx_relative(
    target: &NormSpec,
    tau: f64,
    validation_dirs: usize,
) -> Result<SmoothApprox> {
    smooth_impl(target, tau, true, validation_dirs)
}

fn smooth_impl(
    target: &NormSpec,
    tol: f64,
    relative: bool,
    validation_dirs: usize,
) -> Result<SmoothApprox> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tol must be > 0".into()));
    }
    let d = target.spec_dim();
    let dirs = sampling::sphere_directions(d, validation_dirs);
    let norm = if let Some(q) = quadratic_form(target) {
        // Already smooth: σ² = Σ_i (r_i·v)² over ± rows of a square root.
        let eig = q.symmetric_eigen();
        let mut h = Vec::new();
        for i in 0..d {
            let l = eig.eigenvalues[i].max(0.0);
            if l > 0.0 {
                let r: Vec<f64> = eig
                    .eigenvectors
                    .column(i)
                    .iter()
                    .map(|x| x * (l / 2.0).sqrt())
                    .collect();
                h.push(r.iter().map(|x| -x).collect());
                h.push(r);
            }
        }
        if h.is_empty() {
            return Err(Error::InvalidInput("zero target".into()));
        }
        SmoothNorm::new(d, h, 2.0, 0.0)?
    } else {
        let tmax = if relative {
            1.0
        } else {
            sphere_max(target, 512)
        };
        let (h, _) = match target.dual_samples_for(tol / 4.0, relative) {
            Some(s) => s,
            None => sampled_duals(target, tol / 2.0, relative, &dirs)?,
        };
        let m = h.len() as f64;
        let ratio = (1.0 + tol / (2.0 * tmax)).ln();
        let mut power = (m.ln() / ratio).ceil().max(2.0);
        if power % 2.0 != 0.0 {
            power += 1.0;
        }
        SmoothNorm::new(d, h, power, 0.0)?
    };
    let deviation = dirs
        .iter()
        .map(|v| {
            let t = target.eval(v);
            let e = (norm.value(v) - t).abs();
            if relative {
                e / t
            } else {
                e
            }
        })
        .fold(0.0, f64::max);
    if !(deviation <= tol) {
        return Err(Error::ToleranceUnachievable {
            requested: tol,
            achieved: deviation,
        });
    }
    Ok(SmoothApprox {
        norm,
        deviation,
        validation_dirs: dirs.len(),
    })
}

/// The Gram matrix of a target that is itself induced by a full-rank scalar product.
fn quadratic_form(target: &NormSpec) -> Option<DMatrix<f64>> {
    match target {
        NormSpec::ExplicitP { p, weights } if *p == 2.0 => Some(DMatrix::from_diagonal(
            &DVector::from_iterator(weights.len(), weights.iter().map(|w| w * w)),
        )),
        NormSpec::Quadratic { matrix } if linalg::numerical_rank(matrix) == matrix.nrows() => {
            Some(matrix.clone())
        }
        NormSpec::Scaled { factor, inner } => quadratic_form(inner).map(|q| q * (factor * factor)),
        _ => None,
    }
}

/// Subgradients at sampled directions, rescaled into the dual unit ball.
fn sampled_duals(
    target: &NormSpec,
    tol: f64,
    relative: bool,
    check: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, f64)> {
    let d = target.spec_dim();
    let mut count = 64usize;
    let mut last = f64::INFINITY;
    while count <= SUPPORT_CAP {
        let mut h = Vec::with_capacity(count);
        for v in sampling::sphere_directions(d, count) {
            let g = subgradient(target, &v);
            let dual = check
                .iter()
                .map(|u| linalg::dot(&g, u) / target.eval(u))
                .fold(1.0, f64::max);
            h.push(g.iter().map(|x| x / dual).collect::<Vec<f64>>());
        }
        let err = check
            .iter()
            .map(|u| {
                let best = h
                    .iter()
                    .map(|g| linalg::dot(g, u))
                    .fold(f64::NEG_INFINITY, f64::max);
                let t = target.eval(u);
                if relative {
                    (t - best) / t
                } else {
                    t - best
                }
            })
            .fold(0.0, f64::max);
        last = err;
        if err <= tol {
            return Ok((h, err));
        }
        count *= 2;
    }
    Err(Error::ToleranceUnachievable {
        requested: tol,
        achieved: last,
    })
}

fn subgradient(target: &NormSpec, v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let step = 1e-7;
    (0..d)
        .map(|i| {
            let mut a = v.to_vec();
            let mut b = v.to_vec();
            a[i] += step;
            b[i] -= step;
            (target.eval(&a) - target.eval(&b)) / (2.0 * step)
        })
        .collect()
}

/// How the contraction δ is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DeltaRule {
    /// `δ = ½·min(ε′/max 𝐧′, 1/(λ+1))`, the literal inequality chain.
    Literal,
    /// Target relative gap `g`, capped by the directional margin over the minorant.
    Target { gap: f64, upper_margin: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorOptions {
    pub delta_rule: DeltaRule,
    /// Sphere directions used for the margins ε′, δ and δ′.
    pub sphere_dirs: usize,
    /// Directions used to validate the smoothing.
    pub validation_dirs: usize,
}

impl Default for AnchorOptions {
    fn default() -> Self {
        Self {
            delta_rule: DeltaRule::Literal,
            sphere_dirs: 256,
            validation_dirs: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorConstants {
    pub eps_prime: f64,
    pub eps_dprime: f64,
    pub delta: f64,
    /// Absolute under [`DeltaRule::Literal`], relative to `(1−δ)𝐧′` under [`DeltaRule::Target`].
    pub delta_prime: f64,
    pub lambda_prime: f64,
    pub max_n_prime: f64,
    pub min_n_prime: f64,
}

impl AnchorConstants {
    /// `(λ+1)(1−δ) − δ′ > λ`, `ε″ < δ·min 𝐧′`, `δ < ε′/max 𝐧′`.
    pub fn literal_chain(&self, lambda: f64) -> [bool; 3] {
        [
            (lambda + 1.0) * (1.0 - self.delta) - self.delta_prime > lambda,
            self.eps_dprime < self.delta * self.min_n_prime,
            self.delta < self.eps_prime / self.max_n_prime,
        ]
    }
}

/// The anchor norm at `z` and everything needed to re-check it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorNorm {
    pub anchor: Vec<f64>,
    pub rank: usize,
    pub eps: f64,
    pub lambda: f64,
    /// Orthonormal frame of `D_z`, `n × k`.
    pub frame: DMatrix<f64>,
    pub complement: DMatrix<f64>,
    pub extension: NormSpec,
    pub norm: SmoothNorm,
    pub constants: AnchorConstants,
    /// Largest tested radius of validity; zero until a radius search has run.
    pub r_u: f64,
}

/// `ρ(z,·)` restricted to `D_z` as a closed-form norm on ℝⁿ.
pub fn restricted_metric(s: &SubFinslerStructure, z: &[f64]) -> Result<NormSpec> {
    let psi = s.psi(z);
    match s.fiber_at(z)? {
        FiberAt::Hilbert { gram } => {
            let chol = gram.cholesky().ok_or_else(|| Error::DegenerateGram {
                point: z.to_vec(),
                min_eig: 0.0,
            })?;
            let a = chol
                .l()
                .solve_lower_triangular(&psi.transpose())
                .expect("nonsingular factor")
                .transpose();
            let svd = a.svd(true, false);
            let u = svd.u.expect("u requested");
            let sv = &svd.singular_values;
            let smax = sv.iter().cloned().fold(0.0, f64::max);
            let n = s.n();
            let mut q = DMatrix::zeros(n, n);
            for i in 0..sv.len() {
                if smax > 0.0 && sv[i] > RANK_CUTOFF * smax {
                    let c = u.column(i);
                    q += c * c.transpose() / (sv[i] * sv[i]);
                }
            }
            Ok(NormSpec::Quadratic { matrix: q })
        }
        FiberAt::PNorm { p, weights } => Ok(NormSpec::MinPreimage {
            map: psi,
            p,
            weights,
        }),
    }
}

pub(crate) fn frame_directions(frame: &DMatrix<f64>, count: usize) -> Vec<Vec<f64>> {
    let k = frame.ncols();
    if k == 0 {
        return Vec::new();
    }
    sampling::sphere_directions(k, count)
        .into_iter()
        .map(|q| (frame * DVector::from_vec(q)).iter().cloned().collect())
        .collect()
}

/// Builds the anchor norm at `z`.
pub fn build_anchor_norm(
    s: &SubFinslerStructure,
    z: &[f64],
    eps: f64,
    lambda: f64,
    minorant: &dyn MetricField,
    opts: &AnchorOptions,
) -> Result<AnchorNorm> {
    s.domain.check(z)?;
    if !(eps > 0.0) || !(lambda >= 0.0) {
        return Err(Error::InvalidInput(
            "eps must be > 0 and lambda >= 0".into(),
        ));
    }
    let n = s.n();
    let fail = |reason: String| Error::AnchorFailure {
        anchor: z.to_vec(),
        reason,
    };
    let frame_vecs = orthonormal_frame(s, z)?;
    let k = frame_vecs.len();
    let base = restricted_metric(s, z)?;
    let lazy = FieldAt::new(minorant, z);
    let frozen = minorant.frozen(z)?;
    let minor: &dyn Norm = match &frozen {
        Some(f) => f.as_ref(),
        None => &lazy,
    };

    // Extension over the minorant.
    let ext = extend_norm_with(
        &frame_vecs,
        base.clone(),
        minor,
        lambda + 1.0,
        opts.sphere_dirs,
    )
    .map_err(|e| match e {
        Error::PreconditionViolated { what, witness } => fail(format!("{what} at {witness:?}")),
        other => other,
    })?;
    if let Some(e) = lazy.take_error() {
        return Err(e);
    }
    let (frame, complement, lambda_prime) = match &ext {
        NormSpec::Extension {
            frame,
            complement,
            lambda_prime,
            ..
        } => (frame.clone(), complement.clone(), *lambda_prime),
        _ => unreachable!("extend_norm returns an extension"),
    };

    // Margins and contraction.
    let mut dirs = sampling::sphere_directions(n, opts.sphere_dirs);
    let hdirs = frame_directions(&frame, opts.sphere_dirs.max(16));
    dirs.extend(hdirs.iter().cloned());
    dirs.extend(frame_directions(&complement, 16));
    let mut min_gap = f64::INFINITY;
    let mut min_rel = f64::INFINITY;
    let mut max_np: f64 = 0.0;
    let mut min_np = f64::INFINITY;
    let mut np_vals = Vec::with_capacity(dirs.len());
    let mut m_vals = Vec::with_capacity(dirs.len());
    for v in &dirs {
        let np = ext.eval(v);
        let m = minor.value(v);
        min_gap = min_gap.min(np - m);
        min_rel = min_rel.min(1.0 - m / np);
        max_np = max_np.max(np);
        min_np = min_np.min(np);
        np_vals.push(np);
        m_vals.push(m);
    }
    if let Some(e) = lazy.take_error() {
        return Err(e);
    }
    if let Some(b) = ext.max_bound() {
        max_np = max_np.max(b);
    }
    if !(min_gap > 0.0) {
        return Err(fail(format!(
            "minorant reaches the extension (gap {min_gap:e})"
        )));
    }
    let eps_prime = 0.5 * min_gap.min(eps);
    let rho_on_v: Vec<f64> = hdirs.iter().map(|v| base.eval(v)).collect();
    let rho_max = rho_on_v
        .iter()
        .cloned()
        .fold(0.0, f64::max)
        .max(base.max_bound().unwrap_or(0.0));
    let rho_min = rho_on_v.iter().cloned().fold(f64::INFINITY, f64::min);
    let delta_cap = 0.5 / (lambda + 1.0);
    let (delta, upper_margin) = match opts.delta_rule {
        DeltaRule::Literal => (0.5 * (eps_prime / max_np).min(1.0 / (lambda + 1.0)), 0.0),
        DeltaRule::Target { gap, upper_margin } => {
            let g = gap.min(delta_cap);
            if g <= 0.999 * min_rel {
                (g, upper_margin)
            } else {
                (0.5 * min_rel.min(delta_cap), upper_margin)
            }
        }
    };
    let eps_dprime = 0.5 * eps_prime.min(delta * min_np);

    // Smoothing.
    let relative = matches!(opts.delta_rule, DeltaRule::Target { .. });
    let (delta_prime, norm) = if relative {
        // Rooms relative to 𝐧″ = (1−δ)𝐧′; smoothing within τ·𝐧″ plus τ·min 𝐧″·|v|
        // keeps 𝐧 inside [(1−τ)𝐧″, (1+2τ)𝐧″].
        let lower = np_vals
            .iter()
            .zip(&m_vals)
            .map(|(np, m)| 1.0 - m / ((1.0 - delta) * np))
            .fold(f64::INFINITY, f64::min);
        let chain = 1.0 - lambda / ((lambda + 1.0) * (1.0 - delta));
        let upper = if k > 0 {
            (delta - upper_margin) / (2.0 * (1.0 - delta))
        } else {
            f64::INFINITY
        };
        let close = (eps / rho_max.max(1e-300) - delta) / 2.0;
        let tau = 0.5 * lower.min(chain).min(upper).min(close);
        if !(tau > 0.0) {
            return Err(fail(format!(
                "no admissible δ′ (lower {lower:e}, chain {chain:e}, upper {upper:e}, closeness {close:e})"
            )));
        }
        let scaled = NormSpec::Scaled {
            factor: 1.0 - delta,
            inner: Box::new(ext.clone()),
        };
        let smooth = smooth_norm_approx_relative(&scaled, tau, opts.validation_dirs)?;
        (tau, smooth.norm.with_euclid(tau * (1.0 - delta) * min_np))
    } else {
        let lower_room = np_vals
            .iter()
            .zip(&m_vals)
            .map(|(np, m)| (1.0 - delta) * np - m)
            .fold(f64::INFINITY, f64::min);
        let chain_room = (lambda + 1.0) * (1.0 - delta) - lambda;
        let upper_room = if k > 0 {
            (delta - upper_margin) * rho_min
        } else {
            f64::INFINITY
        };
        let close_room = eps - delta * rho_max;
        let delta_prime = 0.5 * lower_room.min(chain_room).min(upper_room).min(close_room);
        if !(delta_prime > 0.0) {
            return Err(fail(format!(
                "no admissible δ′ (lower {lower_room:e}, chain {chain_room:e}, upper {upper_room:e}, closeness {close_room:e})"
            )));
        }
        let scaled = NormSpec::Scaled {
            factor: 1.0 - delta,
            inner: Box::new(ext.clone()),
        };
        let smooth = smooth_norm_approx_with(&scaled, delta_prime / 2.0, opts.validation_dirs)?;
        (delta_prime, smooth.norm.with_euclid(delta_prime / 2.0))
    };

    let constants = AnchorConstants {
        eps_prime,
        eps_dprime,
        delta,
        delta_prime,
        lambda_prime,
        max_n_prime: max_np,
        min_n_prime: min_np,
    };
    Ok(AnchorNorm {
        anchor: z.to_vec(),
        rank: k,
        eps,
        lambda,
        frame,
        complement,
        extension: ext,
        norm,
        constants,
        r_u: 0.0,
    })
}

/// Outcome of one anchor property at the sampled points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub pass: bool,
    pub checked: usize,
    /// Smallest slack seen; negative on failure.
    pub worst_margin: f64,
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
}

impl PropertyCheck {
    pub(crate) fn new() -> Self {
        Self {
            pass: true,
            checked: 0,
            worst_margin: f64::INFINITY,
            witness: None,
        }
    }

    pub(crate) fn record(&mut self, margin: f64, x: &[f64], v: &[f64]) {
        self.checked += 1;
        if margin < self.worst_margin || margin.is_nan() {
            self.worst_margin = margin;
            if !(margin >= 0.0) {
                self.pass = false;
                self.witness = Some((x.to_vec(), v.to_vec()));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorReport {
    /// `|𝐧(v) − ρ(z,v)| ≤ ε` on `D_z ∩ 𝕊`.
    pub closeness: PropertyCheck,
    /// `minorant(x,v) < 𝐧(v) < ρ(x,v)` on the ball.
    pub sandwich: PropertyCheck,
    /// `𝐧 ≥ λ` on `V_x^⊥ ∩ 𝕊` for equal-rank `x` in the ball.
    pub transverse: PropertyCheck,
}

impl AnchorReport {
    pub fn all_pass(&self) -> bool {
        self.closeness.pass && self.sandwich.pass && self.transverse.pass
    }
}

/// Sampled points of the Euclidean ball `B_r(z)` inside the box, centre first.
pub fn ball_points(s: &SubFinslerStructure, z: &[f64], r: f64, count: usize) -> Vec<Vec<f64>> {
    let n = s.n();
    let mut pts = vec![z.to_vec()];
    for u in sampling::kronecker(n + 1, count.saturating_sub(1), 3) {
        let dir = {
            let g: Vec<f64> = u[..n].iter().map(|t| 2.0 * t - 1.0).collect();
            let nn = linalg::norm2(&g);
            if nn == 0.0 {
                continue;
            }
            g.into_iter().map(|x| x / nn).collect::<Vec<f64>>()
        };
        let rad = r * u[n].powf(1.0 / n as f64);
        let p: Vec<f64> = z.iter().zip(&dir).map(|(a, b)| a + rad * b).collect();
        if s.domain.contains(&p) {
            pts.push(p);
        }
    }
    pts
}

/// Re-checks the three anchor conclusions on the ball of radius `radius`.
pub fn verify_anchor(
    s: &SubFinslerStructure,
    a: &AnchorNorm,
    minorant: &dyn MetricField,
    radius: f64,
    points: usize,
    dirs: usize,
) -> Result<AnchorReport> {
    let n = s.n();
    let z = &a.anchor;
    let mut closeness = PropertyCheck::new();
    for v in frame_directions(&a.frame, dirs) {
        let rho = s.horizontal_norm(z, &v)?.as_f64();
        closeness.record(a.eps - (a.norm.value(&v) - rho).abs(), z, &v);
    }
    let mut sandwich = PropertyCheck::new();
    let mut transverse = PropertyCheck::new();
    let generic = sampling::sphere_directions(n, dirs);
    for x in ball_points(s, z, radius, points) {
        let fr = linalg::from_columns(&orthonormal_frame(s, &x)?, n);
        let mut vs = frame_directions(&fr, dirs);
        vs.extend(generic.iter().cloned());
        for v in &vs {
            let nv = a.norm.value(v);
            let m = minorant.eval(&x, v)?;
            let upper = match s.horizontal_norm(&x, v)? {
                GenMetricValue::Finite(r) => r - nv,
                GenMetricValue::Infinite => f64::INFINITY,
            };
            sandwich.record((nv - m).min(upper), &x, v);
        }
        if fr.ncols() == a.rank {
            let comp = linalg::from_columns(&orthonormal_complement(&linalg::columns(&fr), n), n);
            for v in frame_directions(&comp, dirs.min(64)) {
                transverse.record(a.norm.value(&v) - a.lambda, &x, &v);
            }
        }
    }
    Ok(AnchorReport {
        closeness,
        sandwich,
        transverse,
    })
}

/// Largest radius among `r0, r0/2, r0/4, …` on which the report passes.
pub fn anchor_radius(
    s: &SubFinslerStructure,
    a: &mut AnchorNorm,
    minorant: &dyn MetricField,
    r0: f64,
    points: usize,
    dirs: usize,
) -> Result<f64> {
    let mut r = r0;
    for _ in 0..40 {
        let rep = verify_anchor(s, a, minorant, r, points, dirs)?;
        if rep.sandwich.pass && rep.transverse.pass {
            a.r_u = r;
            return Ok(r);
        }
        r *= 0.5;
    }
    a.r_u = 0.0;
    Ok(0.0)
}
