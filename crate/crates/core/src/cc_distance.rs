//! Horizontal curves and their sub-Finsler length, Carnot–Carathéodory
//! distances by direct control optimisation, and Finsler distances by
//! shortest paths on a lattice.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use argmin::core::{CostFunction, Executor, Gradient};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::BFGS;
use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::orthonormal_frame;
use crate::error::{Error, Result};
use crate::linalg::{self, least_norm};
use crate::norm_factory::MetricField;
use crate::sampling;
use crate::smoothmap::{ChartDomain, PolyField};
use crate::structure::{FiberAt, GenMetricValue, SubFinslerStructure};

pub const DEFAULT_SUBSTEPS: usize = 16;

/// A piecewise-constant control and the RK4 trajectory it drives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizontalPath {
    pub k: usize,
    pub substeps: usize,
    pub controls: Vec<Vec<f64>>,
    pub t_grid: Vec<f64>,
    /// `K·substeps + 1` samples; segment `k` covers `states[k·substeps ..= (k+1)·substeps]`.
    pub states: Vec<Vec<f64>>,
}

struct Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Work {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

fn velocity(fields: &[PolyField], x: &[f64], u: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (f, uj) in fields.iter().zip(u) {
        if *uj == 0.0 {
            continue;
        }
        for (o, p) in out.iter_mut().zip(f.entries()) {
            *o += uj * p.eval(x);
        }
    }
}

fn rk4_step(fields: &[PolyField], x: &mut [f64], u: &[f64], dt: f64, w: &mut Work) {
    let n = x.len();
    velocity(fields, x, u, &mut w.k1);
    for i in 0..n {
        w.tmp[i] = x[i] + 0.5 * dt * w.k1[i];
    }
    velocity(fields, &w.tmp, u, &mut w.k2);
    for i in 0..n {
        w.tmp[i] = x[i] + 0.5 * dt * w.k2[i];
    }
    velocity(fields, &w.tmp, u, &mut w.k3);
    for i in 0..n {
        w.tmp[i] = x[i] + dt * w.k3[i];
    }
    velocity(fields, &w.tmp, u, &mut w.k4);
    for i in 0..n {
        x[i] += dt / 6.0 * (w.k1[i] + 2.0 * w.k2[i] + 2.0 * w.k3[i] + w.k4[i]);
    }
}

fn excess(domain: &ChartDomain, x: &[f64], margin: f64) -> f64 {
    x.iter()
        .zip(domain.lower.iter().zip(&domain.upper))
        .map(|(v, (l, u))| {
            let m = margin * (u - l);
            let e = (l + m - v).max(0.0) + (v - u + m).max(0.0);
            e * e
        })
        .sum()
}

fn check_controls(s: &SubFinslerStructure, controls: &[Vec<f64>], substeps: usize) -> Result<()> {
    if controls.is_empty() || substeps == 0 {
        return Err(Error::InvalidInput(
            "need at least one segment and one substep".into(),
        ));
    }
    for u in controls {
        if u.len() != s.d() {
            return Err(Error::DimensionMismatch {
                expected: s.d(),
                got: u.len(),
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite control".into()));
        }
    }
    Ok(())
}

/// Trajectory of `γ̇ = ψ(γ)u(t)` on `[0,1]` from `x0`, with [`DEFAULT_SUBSTEPS`].
pub fn integrate(
    s: &SubFinslerStructure,
    x0: &[f64],
    controls: &[Vec<f64>],
) -> Result<HorizontalPath> {
    integrate_with(s, x0, controls, DEFAULT_SUBSTEPS)
}

pub fn integrate_with(
    s: &SubFinslerStructure,
    x0: &[f64],
    controls: &[Vec<f64>],
    substeps: usize,
) -> Result<HorizontalPath> {
    s.domain.check(x0)?;
    check_controls(s, controls, substeps)?;
    let k = controls.len();
    let dt = 1.0 / (k * substeps) as f64;
    let mut w = Work::new(s.n());
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(k * substeps + 1);
    states.push(x.clone());
    for (seg, u) in controls.iter().enumerate() {
        for j in 0..substeps {
            rk4_step(s.fields(), &mut x, u, dt, &mut w);
            if !s.domain.contains(&x) || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::LeftDomain {
                    t: (seg * substeps + j + 1) as f64 * dt,
                });
            }
            states.push(x.clone());
        }
    }
    Ok(HorizontalPath {
        k,
        substeps,
        controls: controls.to_vec(),
        t_grid: (0..=k).map(|i| i as f64 / k as f64).collect(),
        states,
    })
}

impl HorizontalPath {
    pub fn start(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn endpoint(&self) -> &[f64] {
        self.states.last().expect("nonempty")
    }

    pub fn segment_of(&self, t: f64) -> usize {
        ((t * self.k as f64).floor() as usize).min(self.k - 1)
    }

    /// `γ_t`, integrated from the start of the segment containing `t`.
    pub fn point_at(&self, s: &SubFinslerStructure, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!("t = {t} outside [0,1]")));
        }
        let seg = self.segment_of(t);
        let tau = t - seg as f64 / self.k as f64;
        let mut x = self.states[seg * self.substeps].clone();
        let full = 1.0 / (self.k * self.substeps) as f64;
        let steps = (tau / full).ceil() as usize;
        if steps > 0 {
            let mut w = Work::new(x.len());
            let dt = tau / steps as f64;
            for _ in 0..steps {
                rk4_step(s.fields(), &mut x, &self.controls[seg], dt, &mut w);
            }
        }
        Ok(x)
    }

    /// `(γ_t, γ̇_t)` using the control of the segment containing `t`.
    pub fn velocity_at(&self, s: &SubFinslerStructure, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.point_at(s, t)?;
        let mut v = vec![0.0; x.len()];
        velocity(s.fields(), &x, &self.controls[self.segment_of(t)], &mut v);
        Ok((x, v))
    }
}

/// Sub-Finsler length by the trapezoid rule on each segment. The speed at a
/// node is `ρ(γ, γ̇)`, so controls above the minimum cost do not count.
pub fn cc_length(s: &SubFinslerStructure, path: &HorizontalPath) -> Result<f64> {
    let n = s.n();
    let dt = 1.0 / (path.k * path.substeps) as f64;
    let mut v = vec![0.0; n];
    let mut total = 0.0;
    for (seg, u) in path.controls.iter().enumerate() {
        for j in 0..=path.substeps {
            let x = &path.states[seg * path.substeps + j];
            velocity(s.fields(), x, u, &mut v);
            let speed = match s.horizontal_norm(x, &v)? {
                GenMetricValue::Finite(r) => r,
                GenMetricValue::Infinite => {
                    return Err(Error::PreconditionViolated {
                        what: "path velocity is not horizontal".into(),
                        witness: x.clone(),
                    })
                }
            };
            let wgt = if j == 0 || j == path.substeps {
                0.5
            } else {
                1.0
            };
            total += wgt * speed * dt;
        }
    }
    Ok(total)
}

/// Optimiser settings for [`cc_distance_upper`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcConfig {
    pub k: usize,
    pub substeps: usize,
    pub restarts: usize,
    pub endpoint_tol: f64,
    pub penalty0: f64,
    pub penalty_growth: f64,
    pub max_rounds: usize,
    pub max_iters: u64,
    pub fd_step: f64,
    /// BFGS stops when the cost changes by less than this fraction.
    pub cost_tol: f64,
    pub grad_tol: f64,
}

impl Default for CcConfig {
    fn default() -> Self {
        Self {
            k: 32,
            substeps: DEFAULT_SUBSTEPS,
            restarts: 8,
            endpoint_tol: 1e-4,
            penalty0: 10.0,
            penalty_growth: 10.0,
            max_rounds: 10,
            max_iters: 100,
            fd_step: 1e-6,
            cost_tol: 1e-12,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcResult {
    /// Length of `path`, an upper bound of `d_CC(x, path end)`.
    pub value: f64,
    pub path: HorizontalPath,
    pub endpoint_error: f64,
    pub seed: u64,
}

/// The box penalty acts on the box shrunk by this fraction of its width, so
/// a converged path is strictly inside.
const BOX_MARGIN: f64 = 1e-3;

struct ControlProblem<'a> {
    s: &'a SubFinslerStructure,
    x0: &'a [f64],
    target: &'a [f64],
    k: usize,
    d: usize,
    substeps: usize,
    mu: f64,
    lambda: Vec<f64>,
    fd_step: f64,
    best: RefCell<(f64, Vec<f64>)>,
}

struct Rollout {
    energy: f64,
    excess: f64,
    end: Vec<f64>,
}

impl ControlProblem<'_> {
    fn dt(&self) -> f64 {
        1.0 / self.k as f64
    }

    /// Runs segment `seg` from `x` in place; returns its energy and box excess.
    fn segment(&self, x: &mut [f64], u: &[f64], w: &mut Work) -> (f64, f64) {
        let dt = self.dt();
        let sigma = self.s.sigma_unchecked(x, u);
        let h = dt / self.substeps as f64;
        let mut ex = 0.0;
        for _ in 0..self.substeps {
            rk4_step(self.s.fields(), x, u, h, w);
            ex += excess(&self.s.domain, x, BOX_MARGIN) * h;
        }
        (sigma * sigma * dt, ex)
    }

    fn rollout(&self, u: &[f64], boundaries: Option<&mut Vec<(Vec<f64>, f64, f64)>>) -> Rollout {
        let mut w = Work::new(self.x0.len());
        let mut x = self.x0.to_vec();
        let (mut energy, mut ex) = (0.0, 0.0);
        let mut b = boundaries;
        for seg in 0..self.k {
            if let Some(b) = b.as_deref_mut() {
                b.push((x.clone(), energy, ex));
            }
            let (e, xs) = self.segment(&mut x, &u[seg * self.d..(seg + 1) * self.d], &mut w);
            energy += e;
            ex += xs;
        }
        Rollout {
            energy,
            excess: ex,
            end: x,
        }
    }

    fn total(&self, r: &Rollout) -> f64 {
        let mut al = 0.0;
        for ((e, y), l) in r.end.iter().zip(self.target).zip(&self.lambda) {
            let err = e - y;
            al += l * err + 0.5 * self.mu * err * err;
        }
        if !al.is_finite() || !r.energy.is_finite() {
            return f64::INFINITY;
        }
        r.energy + al + 0.5 * self.mu * r.excess
    }

    fn objective(&self, u: &[f64]) -> f64 {
        let c = self.total(&self.rollout(u, None));
        let mut best = self.best.borrow_mut();
        if c < best.0 {
            *best = (c, u.to_vec());
        }
        c
    }

    /// Central differences; a perturbation of segment `k` only reruns segments `k..K`.
    fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let mut bounds = Vec::with_capacity(self.k);
        self.rollout(u, Some(&mut bounds));
        let mut g = vec![0.0; u.len()];
        let mut w = Work::new(self.x0.len());
        let mut uk = vec![0.0; self.d];
        for seg in 0..self.k {
            let (ref start, e0, x0) = bounds[seg];
            for i in 0..self.d {
                let idx = seg * self.d + i;
                let step = self.fd_step * u[idx].abs().max(1.0);
                let mut val = [0.0; 2];
                for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
                    uk.copy_from_slice(&u[seg * self.d..(seg + 1) * self.d]);
                    uk[i] += sign * step;
                    let mut x = start.clone();
                    let (mut energy, mut ex) = (e0, x0);
                    let (e, xs) = self.segment(&mut x, &uk, &mut w);
                    energy += e;
                    ex += xs;
                    for later in seg + 1..self.k {
                        let (e, xs) =
                            self.segment(&mut x, &u[later * self.d..(later + 1) * self.d], &mut w);
                        energy += e;
                        ex += xs;
                    }
                    val[slot] = self.total(&Rollout {
                        energy,
                        excess: ex,
                        end: x,
                    });
                }
                g[idx] = (val[0] - val[1]) / (2.0 * step);
            }
        }
        g
    }
}

struct Objective<'p, 'a>(&'p ControlProblem<'a>);

impl CostFunction for Objective<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.0.objective(u))
    }
}

impl Gradient for Objective<'_, '_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, u: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.0.gradient(u))
    }
}

fn initial_controls(
    s: &SubFinslerStructure,
    x: &[f64],
    y: &[f64],
    k: usize,
    seed: u64,
) -> Vec<f64> {
    let d = s.d();
    let diff: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    let base: Vec<f64> = least_norm(&s.psi(x), &DVector::from_column_slice(&diff))
        .solution
        .iter()
        .cloned()
        .collect();
    let mut u: Vec<f64> = (0..k).flat_map(|_| base.iter().cloned()).collect();
    if seed == 0 {
        return u;
    }
    let dist = linalg::norm2(&diff);
    let amp = dist.max(dist.sqrt());
    let mut rng = sampling::rng(seed);
    for m in 1..=2 {
        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-amp..amp)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-amp..amp)).collect();
        for seg in 0..k {
            let t = (seg as f64 + 0.5) / k as f64;
            let (sn, cs) = (2.0 * std::f64::consts::PI * m as f64 * t).sin_cos();
            for i in 0..d {
                u[seg * d + i] += a[i] * cs + b[i] * sn;
            }
        }
    }
    u
}

fn solve_restart(
    s: &SubFinslerStructure,
    x: &[f64],
    y: &[f64],
    cfg: &CcConfig,
    seed: u64,
) -> Option<(Vec<f64>, f64)> {
    let d = s.d();
    let dist = linalg::norm2(&x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>());
    let mut p = ControlProblem {
        s,
        x0: x,
        target: y,
        k: cfg.k,
        d,
        substeps: cfg.substeps,
        mu: cfg.penalty0 / dist.max(1e-6),
        lambda: vec![0.0; s.n()],
        fd_step: cfg.fd_step,
        best: RefCell::new((f64::INFINITY, Vec::new())),
    };
    let mut u = initial_controls(s, x, y, cfg.k, seed);
    let nvar = u.len();
    let h0 = 0.5 * cfg.k as f64;
    for _ in 0..cfg.max_rounds {
        *p.best.borrow_mut() = (f64::INFINITY, Vec::new());
        p.objective(&u);
        let solver = BFGS::new(MoreThuenteLineSearch::new())
            .with_tolerance_grad(cfg.grad_tol)
            .ok()?
            .with_tolerance_cost(cfg.cost_tol * p.best.borrow().0.abs().max(1e-3 * dist * dist))
            .ok()?;
        let inv: Vec<Vec<f64>> = (0..nvar)
            .map(|i| (0..nvar).map(|j| if i == j { h0 } else { 0.0 }).collect())
            .collect();
        let start = u.clone();
        // A failed line search still leaves the best point seen in `p.best`.
        let _ = Executor::new(Objective(&p), solver)
            .configure(|st| st.param(start).inv_hessian(inv).max_iters(cfg.max_iters))
            .run();
        u = p.best.borrow().1.clone();
        let r = p.rollout(&u, None);
        let err: Vec<f64> = r.end.iter().zip(y).map(|(a, b)| a - b).collect();
        let e = linalg::norm2(&err);
        let inside = integrate_with(s, x, &as_controls(&u, d), cfg.substeps).is_ok();
        if e <= cfg.endpoint_tol && inside {
            return Some((u, e));
        }
        for (l, ei) in p.lambda.iter_mut().zip(&err) {
            *l += p.mu * ei;
        }
        p.mu *= cfg.penalty_growth;
    }
    None
}

fn as_controls(u: &[f64], d: usize) -> Vec<Vec<f64>> {
    u.chunks(d).map(|c| c.to_vec()).collect()
}

/// Shortest horizontal path found from `x` to `y` over `cfg.restarts`
/// deterministic restarts; its length bounds `d_CC(x, y)` from above up to
/// the endpoint slack.
pub fn cc_distance_upper(
    s: &SubFinslerStructure,
    x: &[f64],
    y: &[f64],
    cfg: &CcConfig,
) -> Result<CcResult> {
    s.domain.check(x)?;
    s.domain.check(y)?;
    if cfg.k == 0 || cfg.substeps == 0 || cfg.restarts == 0 {
        return Err(Error::InvalidInput(
            "k, substeps and restarts must be positive".into(),
        ));
    }
    if x == y {
        let path = integrate_with(s, x, &vec![vec![0.0; s.d()]; cfg.k], cfg.substeps)?;
        return Ok(CcResult {
            value: 0.0,
            path,
            endpoint_error: 0.0,
            seed: 0,
        });
    }
    let mut best: Option<CcResult> = None;
    for seed in 0..cfg.restarts as u64 {
        let Some((u, err)) = solve_restart(s, x, y, cfg, seed) else {
            continue;
        };
        let Ok(path) = integrate_with(s, x, &as_controls(&u, s.d()), cfg.substeps) else {
            continue;
        };
        let Ok(value) = cc_length(s, &path) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| value < b.value) {
            best = Some(CcResult {
                value,
                path,
                endpoint_error: err,
                seed,
            });
        }
    }
    best.ok_or(Error::ToleranceUnachievable {
        requested: cfg.endpoint_tol,
        achieved: f64::NAN,
    })
}

/// Lattice neighbours: primitive integer offsets with max-coordinate at most `radius`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stencil {
    pub radius: i64,
}

impl Default for Stencil {
    fn default() -> Self {
        Self { radius: 2 }
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Stencil {
    pub fn offsets(&self, n: usize) -> Vec<Vec<i64>> {
        let r = self.radius.max(1);
        let side = (2 * r + 1) as usize;
        let mut out = Vec::new();
        for idx in 0..side.pow(n as u32) {
            let mut rem = idx;
            let o: Vec<i64> = (0..n)
                .map(|_| {
                    let c = (rem % side) as i64 - r;
                    rem /= side;
                    c
                })
                .collect();
            if o.iter().fold(0, |g, c| gcd(g, *c)) == 1 {
                out.push(o);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDistance {
    pub value: f64,
    /// `c·(snap_x + snap_y + h)` with `c` the largest stencil-direction speed at the snapped ends.
    pub error_bar: f64,
    pub snap_x: f64,
    pub snap_y: f64,
    pub nodes: usize,
}

const MAX_LATTICE: usize = 30_000_000;

/// Dijkstra distance between the lattice nodes nearest `x` and `y` on the
/// lattice of spacing `h` anchored at `region.lower`. Edge weights are
/// `F(midpoint, edge)`.
pub fn finsler_distance_grid(
    metric: &dyn MetricField,
    region: &ChartDomain,
    x: &[f64],
    y: &[f64],
    h: f64,
    stencil: Stencil,
) -> Result<GridDistance> {
    let n = region.dim();
    if metric.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: metric.dim(),
            got: n,
        });
    }
    region.check(x)?;
    region.check(y)?;
    if !(h > 0.0) {
        return Err(Error::InvalidInput("h must be positive".into()));
    }
    let counts: Vec<usize> = (0..n)
        .map(|i| ((region.upper[i] - region.lower[i]) / h + 1e-9).floor() as usize + 1)
        .collect();
    if counts.iter().any(|c| *c < 2) {
        return Err(Error::Unreachable(
            "box too small for the lattice spacing".into(),
        ));
    }
    let total = counts
        .iter()
        .try_fold(1usize, |a, c| a.checked_mul(*c))
        .filter(|t| *t <= MAX_LATTICE);
    let total = total.ok_or_else(|| {
        Error::InvalidInput("lattice too large; raise h or shrink the box".into())
    })?;
    let snap = |p: &[f64]| -> (Vec<usize>, f64) {
        let idx: Vec<usize> = (0..n)
            .map(|i| (((p[i] - region.lower[i]) / h).round().max(0.0) as usize).min(counts[i] - 1))
            .collect();
        let dist = (0..n)
            .map(|i| (region.lower[i] + idx[i] as f64 * h - p[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        (idx, dist)
    };
    let (ix, snap_x) = snap(x);
    let (iy, snap_y) = snap(y);
    let flat = |idx: &[usize]| idx.iter().zip(&counts).rev().fold(0, |a, (i, c)| a * c + i);
    let coords = |mut f: usize| -> Vec<usize> {
        counts
            .iter()
            .map(|c| {
                let i = f % c;
                f /= c;
                i
            })
            .collect()
    };
    let point = |idx: &[usize]| -> Vec<f64> {
        (0..n)
            .map(|i| region.lower[i] + idx[i] as f64 * h)
            .collect()
    };
    let offsets = Stencil::offsets(&stencil, n);
    let speed_at = |p: &[f64]| -> Result<f64> {
        let mut c: f64 = 0.0;
        for o in &offsets {
            let l = (o.iter().map(|v| (v * v) as f64).sum::<f64>()).sqrt();
            let e: Vec<f64> = o.iter().map(|v| *v as f64 / l).collect();
            c = c.max(metric.eval(p, &e)?);
        }
        Ok(c)
    };
    let c = speed_at(&point(&ix))?.max(speed_at(&point(&iy))?);
    let error_bar = c * (snap_x + snap_y + h);
    let (src, dst) = (flat(&ix), flat(&iy));
    if src == dst {
        return Ok(GridDistance {
            value: 0.0,
            error_bar,
            snap_x,
            snap_y,
            nodes: total,
        });
    }
    let mut dist = vec![f64::INFINITY; total];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Reverse((0f64.to_bits(), src)));
    let mut mid = vec![0.0; n];
    let mut step = vec![0.0; n];
    while let Some(Reverse((bits, node))) = heap.pop() {
        let dn = f64::from_bits(bits);
        if dn > dist[node] {
            continue;
        }
        if node == dst {
            return Ok(GridDistance {
                value: dn,
                error_bar,
                snap_x,
                snap_y,
                nodes: total,
            });
        }
        let ci = coords(node);
        'next: for o in &offsets {
            let mut nb = 0usize;
            let mut stride = 1usize;
            for i in 0..n {
                let j = ci[i] as i64 + o[i];
                if j < 0 || j >= counts[i] as i64 {
                    continue 'next;
                }
                nb += j as usize * stride;
                stride *= counts[i];
                step[i] = o[i] as f64 * h;
                mid[i] = region.lower[i] + ci[i] as f64 * h + 0.5 * step[i];
            }
            let alt = dn + metric.eval(&mid, &step)?;
            if alt < dist[nb] {
                dist[nb] = alt;
                heap.push(Reverse((alt.to_bits(), nb)));
            }
        }
    }
    Err(Error::Unreachable(
        "target lattice node not connected to the source".into(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub value: f64,
    pub error_bar: f64,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub cc_upper: f64,
    pub cc_endpoint_error: f64,
    pub monotone: bool,
    pub below_cc: bool,
    pub final_gap: f64,
}

impl ConvergenceTable {
    /// `n,value,error_bar,verdict` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,value,error_bar,verdict\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{}",
                r.n, r.value, r.error_bar, r.verdict
            );
        }
        out
    }

    pub fn plot_data(&self) -> String {
        let mut out = String::from("n,d_fn\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.16e}", r.n, r.value);
        }
        out
    }
}

/// `d_{F_n}(x, y)` on the lattice for each supplied field, against the
/// optimiser's upper bound of `d_CC(x, y)`. Verdicts compare intervals.
pub fn distance_convergence(
    s: &SubFinslerStructure,
    fields: &[(usize, &dyn MetricField)],
    x: &[f64],
    y: &[f64],
    region: &ChartDomain,
    h: f64,
    stencil: Stencil,
    cfg: &CcConfig,
) -> Result<ConvergenceTable> {
    let cc = cc_distance_upper(s, x, y, cfg)?;
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(fields.len());
    let (mut monotone, mut below) = (true, true);
    for (n, f) in fields {
        let g = finsler_distance_grid(*f, region, x, y, h, stencil)?;
        let mut verdict = Vec::new();
        if let Some(prev) = rows.last() {
            if g.value + g.error_bar < prev.value - prev.error_bar {
                monotone = false;
                verdict.push("decreasing");
            }
        }
        if g.value - g.error_bar > cc.value {
            below = false;
            verdict.push("above_cc");
        }
        let verdict = if verdict.is_empty() {
            "ok".to_string()
        } else {
            verdict.join("+")
        };
        rows.push(ConvergenceRow {
            n: *n,
            value: g.value,
            error_bar: g.error_bar,
            verdict,
        });
    }
    let final_gap = rows.last().map_or(cc.value, |r| cc.value - r.value);
    Ok(ConvergenceTable {
        rows,
        cc_upper: cc.value,
        cc_endpoint_error: cc.endpoint_error,
        monotone,
        below_cc: below,
        final_gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedRow {
    pub t: f64,
    pub h: f64,
    pub quotient: f64,
    pub speed: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub rows: Vec<SpeedRow>,
}

impl SpeedReport {
    pub fn max_rel_error(&self, h: f64) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.h == h)
            .map(|r| r.rel_error)
            .fold(0.0, f64::max)
    }
}

/// Compares `d̂_CC(γ_t, γ_{t+h})/h` with `ρ(γ_t, γ̇_t)`. The endpoint
/// tolerance is tightened to `1e-5·h²` for the short pairs.
pub fn metric_speed_check(
    s: &SubFinslerStructure,
    path: &HorizontalPath,
    t_samples: &[f64],
    h_list: &[f64],
    cfg: &CcConfig,
) -> Result<SpeedReport> {
    let mut rows = Vec::new();
    for &t in t_samples {
        let (x, v) = path.velocity_at(s, t)?;
        let speed = s.horizontal_norm(&x, &v)?.as_f64();
        for &h in h_list {
            if !(h > 0.0) || t + h > 1.0 {
                return Err(Error::InvalidInput(format!(
                    "t + h = {} leaves [0,1]",
                    t + h
                )));
            }
            let y = path.point_at(s, t + h)?;
            let local = CcConfig {
                endpoint_tol: cfg.endpoint_tol.min(1e-5 * h * h),
                ..cfg.clone()
            };
            let d = cc_distance_upper(s, &x, &y, &local)?.value;
            let quotient = d / h;
            let rel_error = if speed > 0.0 {
                (quotient - speed).abs() / speed
            } else {
                quotient.abs()
            };
            rows.push(SpeedRow {
                t,
                h,
                quotient,
                speed,
                rel_error,
            });
        }
    }
    Ok(SpeedReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizontalDifferential {
    /// `d_x f` on the Gram–Schmidt frame of `D_x`.
    pub coefficients: Vec<f64>,
    pub dual_norm: f64,
    /// A control `u` with `σ_x(u) = 1` attaining the dual norm, when `d_H f ≠ 0`.
    pub maximizer: Option<Vec<f64>>,
}

fn gradient_of(s: &SubFinslerStructure, f: &PolyField, x: &[f64]) -> Result<Vec<f64>> {
    if f.dim_in() != s.n() || f.dim_out() != 1 {
        return Err(Error::InvalidInput(format!(
            "expected a scalar function of {} variables",
            s.n()
        )));
    }
    Ok(f.jacobian(x)?.row(0).iter().cloned().collect())
}

/// Restriction of `d_x f` to `D_x` and its dual norm for `ρ(x, ·)`.
///
/// `{v : ρ(x,v) ≤ 1} = ψ(x)(B_σ)`, so the dual norm equals `σ_x*(ψ(x)ᵀ∇f)`,
/// which is closed-form for both fiber families.
pub fn horizontal_differential(
    s: &SubFinslerStructure,
    f: &PolyField,
    x: &[f64],
) -> Result<HorizontalDifferential> {
    s.domain.check(x)?;
    let grad = gradient_of(s, f, x)?;
    if s.rank(x) == 0 {
        return Err(Error::PreconditionViolated {
            what: "rank 0 at x".into(),
            witness: x.to_vec(),
        });
    }
    let frame = orthonormal_frame(s, x)?;
    let coefficients = frame
        .iter()
        .map(|e| linalg::dot(e.as_slice(), &grad))
        .collect();
    let psi = s.psi(x);
    let a: Vec<f64> = (psi.transpose() * DVector::from_column_slice(&grad))
        .iter()
        .cloned()
        .collect();
    let (dual_norm, maximizer) = match s.fiber_at(x)? {
        FiberAt::Hilbert { gram } => {
            let av = DVector::from_column_slice(&a);
            let ga = gram.cholesky().expect("validated Gram").solve(&av);
            let dn = av.dot(&ga).max(0.0).sqrt();
            (dn, (dn > 0.0).then(|| ga.iter().map(|v| v / dn).collect()))
        }
        FiberAt::PNorm { p, weights } => dual_weighted_p(p, &weights, &a),
    };
    Ok(HorizontalDifferential {
        coefficients,
        dual_norm,
        maximizer,
    })
}

fn dual_weighted_p(p: f64, w: &[f64], a: &[f64]) -> (f64, Option<Vec<f64>>) {
    let b: Vec<f64> = a.iter().zip(w).map(|(ai, wi)| ai.abs() / wi).collect();
    if b.iter().all(|v| *v == 0.0) {
        return (0.0, None);
    }
    if p.is_infinite() {
        let dn = b.iter().sum();
        return (
            dn,
            Some(
                a.iter()
                    .zip(w)
                    .map(|(ai, wi)| if *ai == 0.0 { 0.0 } else { ai.signum() / wi })
                    .collect(),
            ),
        );
    }
    if p == 1.0 {
        let (i, dn) =
            b.iter()
                .cloned()
                .enumerate()
                .fold((0, 0.0), |m, (i, v)| if v > m.1 { (i, v) } else { m });
        let mut u = vec![0.0; a.len()];
        u[i] = a[i].signum() / w[i];
        return (dn, Some(u));
    }
    let q = p / (p - 1.0);
    let dn = b.iter().map(|v| v.powf(q)).sum::<f64>().powf(1.0 / q);
    let u = a
        .iter()
        .zip(w)
        .zip(&b)
        .map(|((ai, wi), bi)| ai.signum() * (bi / dn).powf(q - 1.0) / wi)
        .collect();
    (dn, Some(u))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipReport {
    pub dual_norm: f64,
    pub lip_estimate: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// The sampled `y` attaining the estimate.
    pub witness: Option<Vec<f64>>,
}

/// Estimates `lip(f)(x)` from `|f(y) − f(x)|/d̂(x, y)` over points `y` reached
/// from `x` by constant unit-cost controls for time `radius`, and checks
/// `‖d_H f(x)‖* ≤ lip + 0.05·‖d_H f(x)‖* + 1e−6`. `d̂` is the smaller of the
/// flow's own length and the optimiser's value, both upper bounds of `d_CC`.
pub fn lip_bound_check(
    s: &SubFinslerStructure,
    f: &PolyField,
    x: &[f64],
    radius: f64,
    samples: usize,
    seed: u64,
    cfg: &CcConfig,
) -> Result<LipReport> {
    let hd = horizontal_differential(s, f, x)?;
    let fx = f.eval(x)?[0];
    let d = s.d();
    let fiber = s.fiber_at(x)?;
    let mut controls: Vec<Vec<f64>> = hd.maximizer.iter().cloned().collect();
    let mut rng = sampling::rng(seed);
    while controls.len() < samples.max(1) {
        let u = sampling::random_unit(&mut rng, d);
        let c = fiber.value(&u);
        if c > 0.0 {
            controls.push(u.iter().map(|v| v / c).collect());
        }
    }
    let (mut lip, mut witness) = (0.0, None);
    for u in controls {
        let scaled: Vec<f64> = u.iter().map(|v| v * radius).collect();
        let Ok(flow) = integrate_with(s, x, &[scaled], cfg.substeps) else {
            continue;
        };
        let y = flow.endpoint().to_vec();
        let mut dhat = cc_length(s, &flow)?;
        if let Ok(r) = cc_distance_upper(s, x, &y, cfg) {
            dhat = dhat.min(r.value);
        }
        if dhat > 0.0 {
            let q = (f.eval(&y)?[0] - fx).abs() / dhat;
            if q > lip {
                lip = q;
                witness = Some(y);
            }
        }
    }
    let tolerance = 0.05 * hd.dual_norm + 1e-6;
    Ok(LipReport {
        dual_norm: hd.dual_norm,
        lip_estimate: lip,
        tolerance,
        pass: hd.dual_norm <= lip + tolerance,
        witness,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelogramSample {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    /// `|ρ(v+w)² + ρ(v−w)² − 2ρ(v)² − 2ρ(w)²|`.
    pub absolute: f64,
    /// `absolute / (1 + max(ρ(v), ρ(w))²)`.
    pub relative: f64,
}

pub fn parallelogram_defect(
    s: &SubFinslerStructure,
    x: &[f64],
    v: &[f64],
    w: &[f64],
) -> Result<ParallelogramSample> {
    let rho = |u: &[f64]| -> Result<f64> {
        s.horizontal_norm(x, u)?
            .finite()
            .ok_or_else(|| Error::PreconditionViolated {
                what: "vector is not horizontal".into(),
                witness: u.to_vec(),
            })
    };
    let sum: Vec<f64> = v.iter().zip(w).map(|(a, b)| a + b).collect();
    let dif: Vec<f64> = v.iter().zip(w).map(|(a, b)| a - b).collect();
    let (rv, rw) = (rho(v)?, rho(w)?);
    let absolute = (rho(&sum)?.powi(2) + rho(&dif)?.powi(2) - 2.0 * rv * rv - 2.0 * rw * rw).abs();
    let scale = rv.max(rw);
    Ok(ParallelogramSample {
        x: x.to_vec(),
        v: v.to_vec(),
        w: w.to_vec(),
        absolute,
        relative: absolute / (1.0 + scale * scale),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelogramReport {
    pub samples: usize,
    pub max_relative_defect: f64,
    pub witness: Option<ParallelogramSample>,
}

/// Worst parallelogram defect over random `x` and horizontal `v = ψ(x)a`, `w = ψ(x)b`.
pub fn parallelogram_check(
    s: &SubFinslerStructure,
    samples: usize,
    seed: u64,
) -> Result<ParallelogramReport> {
    let mut rng = sampling::rng(seed);
    let (mut worst, mut witness) = (0.0, None);
    let mut v = vec![0.0; s.n()];
    let mut w = vec![0.0; s.n()];
    for _ in 0..samples {
        let x = sampling::random_point(&mut rng, &s.domain.lower, &s.domain.upper);
        let a: Vec<f64> = (0..s.d()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..s.d()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        velocity(s.fields(), &x, &a, &mut v);
        velocity(s.fields(), &x, &b, &mut w);
        let r = parallelogram_defect(s, &x, &v, &w)?;
        if witness.is_none() || r.relative > worst {
            worst = r.relative;
            witness = Some(r);
        }
    }
    Ok(ParallelogramReport {
        samples,
        max_relative_defect: worst,
        witness,
    })
}
