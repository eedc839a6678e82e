//! The monotone sequence `F_1 < F_2 < … < ρ` of Finsler metric fields on a
//! chart box, and its Riemannian counterpart for Hilbert fiber norms.
//!
//! Each level owns a ternary tree of boxes over the chart. A node becomes a
//! leaf (a cover cell) once its support is smaller than `1/n` and the anchor
//! norm built at its anchor passes the sandwich checks on the whole support;
//! otherwise it is split into `3^dim` children. Nodes are materialized on
//! first use and memoized, so a level only ever builds the cells that the
//! points it is queried at actually need. Node contents depend only on the
//! node key, so results do not depend on query order.
//!
//! The partition of unity is a normalized family of plateau bumps, one per
//! leaf, each multiplied by "hole" factors that vanish near every other
//! anchor. This gives `φ_i(z_i) = 1` exactly while keeping every function
//! smooth and the family a cover.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::distribution::{gn_membership, orthonormal_frame, sphere_hausdorff};
use crate::error::{Error, Result};
use crate::linalg::{self, orthonormal_complement};
use crate::norm_factory::{
    build_anchor_norm, frame_directions, restricted_metric, AnchorNorm, AnchorOptions, DeltaRule,
    Euclidean, MetricField, Norm, NormSpec, PropertyCheck, SmoothNorm, ZeroField,
};
use crate::sampling;
use crate::structure::{GenMetricValue, SubFinslerStructure};

const MAX_DIM: usize = 6;
/// `3^33` cell indices per axis stay exact in `f64`.
const MAX_DEPTH: usize = 33;
const STRICT: f64 = 1e-12;

/// Parameters of a level of the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceConfig {
    /// Support overlap as a fraction of the core half-width.
    pub overlap: f64,
    /// Deepest tree level before a node failure becomes an error.
    pub depth_cap: usize,
    /// `ε_n = eps_scale / n`.
    pub eps_scale: f64,
    /// `λ_n = lambda_scale · n`.
    pub lambda_scale: f64,
    /// Target relative gap `g_n(x) = gap_scale · ε_n / R(x)`.
    pub gap_scale: f64,
    /// Distinct horizontal directions per check point.
    pub check_dirs: usize,
    /// Distinct generic directions per check point.
    pub generic_dirs: usize,
    pub anchor_sphere_dirs: usize,
    pub anchor_validation_dirs: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            overlap: 0.15,
            depth_cap: 24,
            eps_scale: 1.0,
            lambda_scale: 1.0,
            gap_scale: 0.5,
            check_dirs: 8,
            generic_dirs: 6,
            anchor_sphere_dirs: 24,
            anchor_validation_dirs: 64,
        }
    }
}

impl SequenceConfig {
    pub fn eps(&self, n: usize) -> f64 {
        self.eps_scale / n as f64
    }

    pub fn lambda(&self, n: usize) -> f64 {
        self.lambda_scale * n as f64
    }
}

/// Geometry of one cover cell: core box, support box, anchor and hole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGeom {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub overlap: f64,
    pub anchor: Vec<f64>,
    /// Per-axis radius of the region around the anchor where the other bumps vanish.
    pub hole: Vec<f64>,
}

/// `C^∞` step: 0 for `u ≤ 0`, 1 for `u ≥ 1`.
fn smooth_step(u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / u).exp();
    let b = (-1.0 / (1.0 - u)).exp();
    a / (a + b)
}

impl CellGeom {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, overlap: f64, anchor: Vec<f64>) -> Result<Self> {
        let hole: Vec<f64> = anchor
            .iter()
            .zip(lower.iter().zip(&upper))
            .map(|(z, (a, b))| 0.5 * (z - a).min(b - z))
            .collect();
        if hole.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "anchor {anchor:?} on the boundary of its cell: shrinking the other supports breaks coverage; refine"
            )));
        }
        Ok(Self {
            lower,
            upper,
            overlap,
            anchor,
            hole,
        })
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (b - a))
            .collect()
    }

    pub fn support_lower(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(self.half_widths())
            .map(|(a, h)| a - self.overlap * h)
            .collect()
    }

    pub fn support_upper(&self) -> Vec<f64> {
        self.upper
            .iter()
            .zip(self.half_widths())
            .map(|(b, h)| b + self.overlap * h)
            .collect()
    }

    /// Euclidean diameter of the support box.
    pub fn support_diameter(&self) -> f64 {
        2.0 * (1.0 + self.overlap) * linalg::norm2(&self.half_widths())
    }

    pub fn in_support(&self, x: &[f64]) -> bool {
        support_contains(&self.lower, &self.upper, self.overlap, x)
    }

    pub fn in_core(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// Plateau bump: 1 on the core, 0 outside the support.
    pub fn bump(&self, x: &[f64]) -> f64 {
        let mut b = 1.0;
        for ((xi, c), h) in x.iter().zip(self.center()).zip(self.half_widths()) {
            let t = (xi - c).abs() / h;
            b *= smooth_step((1.0 + self.overlap - t) / self.overlap);
            if b == 0.0 {
                break;
            }
        }
        b
    }

    /// Factor applied to every other bump: 0 near the anchor, 1 outside the hole.
    pub fn hole_factor(&self, x: &[f64]) -> f64 {
        let q = x
            .iter()
            .zip(&self.anchor)
            .zip(&self.hole)
            .map(|((a, z), r)| (a - z).abs() / r)
            .fold(0.0, f64::max);
        smooth_step((q - 0.5) / 0.5)
    }
}

fn support_contains(lower: &[f64], upper: &[f64], overlap: f64, x: &[f64]) -> bool {
    x.iter().zip(lower.iter().zip(upper)).all(|(v, (a, b))| {
        let h = 0.5 * (b - a);
        *v > a - overlap * h && *v < b + overlap * h
    })
}

/// Normalized weights `φ_i(x)` for the cells whose support contains `x`.
pub fn pou_weights(cells: &[&CellGeom], x: &[f64]) -> Vec<f64> {
    let mut psi: Vec<f64> = cells.iter().map(|c| c.bump(x)).collect();
    for (i, ci) in cells.iter().enumerate() {
        if ci.in_core(x) {
            let hf = ci.hole_factor(x);
            if hf < 1.0 {
                for (j, p) in psi.iter_mut().enumerate() {
                    if j != i {
                        *p *= hf;
                    }
                }
            }
        }
    }
    let s: f64 = psi.iter().sum();
    if s > 0.0 {
        psi.iter_mut().for_each(|p| *p /= s);
    }
    psi
}

/// A partition of unity over an explicit list of cells.
#[derive(Debug, Clone)]
pub struct PartitionOfUnity {
    pub cells: Vec<CellGeom>,
}

impl PartitionOfUnity {
    /// Holes must be pairwise disjoint and no anchor may sit in another hole.
    pub fn new(cells: Vec<CellGeom>) -> Result<Self> {
        for (i, a) in cells.iter().enumerate() {
            for (j, b) in cells.iter().enumerate() {
                if i != j && b.hole_factor(&a.anchor) < 1.0 {
                    return Err(Error::InvalidInput(format!(
                        "anchor {i} lies in the hole of cell {j}: shrinking breaks coverage; refine"
                    )));
                }
            }
        }
        Ok(Self { cells })
    }

    pub fn weights(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let idx: Vec<usize> = (0..self.cells.len())
            .filter(|i| self.cells[*i].in_support(x))
            .collect();
        let refs: Vec<&CellGeom> = idx.iter().map(|i| &self.cells[*i]).collect();
        idx.into_iter().zip(pou_weights(&refs, x)).collect()
    }
}

/// The local norm carried by a leaf.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LocalNorm {
    Finsler(Box<AnchorNorm>),
    /// Gram matrix of a Riemannian anchor; the norm is `sqrt(vᵀGv)`.
    Gram {
        gram: DMatrix<f64>,
        rank: usize,
        delta: f64,
        lambda_prime: f64,
    },
}

impl LocalNorm {
    pub fn value(&self, v: &[f64]) -> f64 {
        match self {
            LocalNorm::Finsler(a) => a.norm.value(v),
            LocalNorm::Gram { gram, .. } => quad(gram, v).sqrt(),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            LocalNorm::Finsler(a) => a.rank,
            LocalNorm::Gram { rank, .. } => *rank,
        }
    }

    fn sphere_bound(&self) -> f64 {
        match self {
            LocalNorm::Finsler(a) => a.norm.sphere_max_bound().unwrap_or(f64::INFINITY),
            LocalNorm::Gram { gram, .. } => max_eig(gram).max(0.0).sqrt(),
        }
    }
}

fn quad(g: &DMatrix<f64>, v: &[f64]) -> f64 {
    let vv = DVector::from_column_slice(v);
    vv.dot(&(g * &vv)).max(0.0)
}

fn max_eig(g: &DMatrix<f64>) -> f64 {
    g.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

fn min_eig(g: &DMatrix<f64>) -> f64 {
    g.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// A leaf of the level tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cell {
    /// Ternary refinement level per axis.
    pub levels: Vec<u8>,
    pub index: Vec<i64>,
    pub geom: CellGeom,
    pub local: LocalNorm,
}

/// Public view of a leaf, as in a cover listing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverCell {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub anchor: Vec<f64>,
    pub min_rank: usize,
}

/// Per-axis refinement levels and indices of a tree node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct NodeId {
    levels: [u8; MAX_DIM],
    idx: [i64; MAX_DIM],
}

impl NodeId {
    const ROOT: NodeId = NodeId {
        levels: [0; MAX_DIM],
        idx: [0; MAX_DIM],
    };

    fn depth(&self) -> usize {
        *self.levels.iter().max().unwrap_or(&0) as usize
    }

    /// The `3^|mask|` children splitting the axes in `mask`.
    fn children(&self, mask: u8, m: usize) -> Vec<NodeId> {
        let axes: Vec<usize> = (0..m).filter(|j| mask >> j & 1 == 1).collect();
        (0..3usize.pow(axes.len() as u32))
            .map(|t| {
                let mut c = *self;
                let mut rem = t;
                for &j in &axes {
                    c.levels[j] += 1;
                    c.idx[j] = 3 * c.idx[j] + (rem % 3) as i64;
                    rem /= 3;
                }
                c
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Node {
    /// Split along the axes in the mask.
    Internal(u8),
    Leaf(Arc<Cell>),
    Failed(Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Finsler,
    Riemannian,
}

/// One level `F_n` (or `√g_n`) of the sequence.
pub struct FinslerMetricField {
    structure: Arc<SubFinslerStructure>,
    pub n: usize,
    pub eps: f64,
    pub lambda: f64,
    pub variant: Variant,
    pub config: SequenceConfig,
    minorant: Option<Arc<FinslerMetricField>>,
    nodes: RwLock<HashMap<NodeId, Node>>,
}

impl std::fmt::Debug for FinslerMetricField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FinslerMetricField")
            .field("structure", &self.structure.name)
            .field("n", &self.n)
            .field("variant", &self.variant)
            .field("materialized", &self.nodes.read().len())
            .finish()
    }
}

/// Builds level `n` on top of `minorant` (`None` for `F_0 = 0`).
pub fn assemble_f(
    s: Arc<SubFinslerStructure>,
    n: usize,
    minorant: Option<Arc<FinslerMetricField>>,
    config: SequenceConfig,
) -> Result<Arc<FinslerMetricField>> {
    assemble_level(s, n, minorant, config, Variant::Finsler)
}

fn assemble_level(
    s: Arc<SubFinslerStructure>,
    n: usize,
    minorant: Option<Arc<FinslerMetricField>>,
    config: SequenceConfig,
    variant: Variant,
) -> Result<Arc<FinslerMetricField>> {
    if n == 0 {
        return Err(Error::InvalidInput("sequence index starts at 1".into()));
    }
    if s.n() > MAX_DIM {
        return Err(Error::InvalidInput(format!(
            "covers support dimension <= {MAX_DIM}"
        )));
    }
    if config.depth_cap > MAX_DEPTH || !(config.overlap > 0.0 && config.overlap < 1.0) {
        return Err(Error::InvalidInput(format!(
            "depth_cap <= {MAX_DEPTH} and 0 < overlap < 1 required"
        )));
    }
    if variant == Variant::Riemannian && !s.is_sub_riemannian() {
        return Err(Error::InvalidInput(
            "the Riemannian variant needs a Hilbert fiber norm".into(),
        ));
    }
    if let Some(m) = &minorant {
        if m.n + 1 != n || m.variant != variant {
            return Err(Error::InvalidInput(
                "minorant must be the previous level of the same variant".into(),
            ));
        }
    }
    Ok(Arc::new(FinslerMetricField {
        eps: config.eps(n),
        lambda: config.lambda(n),
        structure: s,
        n,
        variant,
        config,
        minorant,
        nodes: RwLock::new(HashMap::new()),
    }))
}

/// `F_1, …, F_N` sharing one structure.
pub fn assemble_sequence(
    s: &SubFinslerStructure,
    n_max: usize,
    config: SequenceConfig,
) -> Result<Vec<Arc<FinslerMetricField>>> {
    build_chain(s, n_max, config, Variant::Finsler)
}

/// Gram-matrix fields `g_1, …, g_N` for a Hilbert fiber norm.
pub fn riemannian_variant(
    s: &SubFinslerStructure,
    n_max: usize,
    config: SequenceConfig,
) -> Result<Vec<Arc<FinslerMetricField>>> {
    build_chain(s, n_max, config, Variant::Riemannian)
}

fn build_chain(
    s: &SubFinslerStructure,
    n_max: usize,
    config: SequenceConfig,
    variant: Variant,
) -> Result<Vec<Arc<FinslerMetricField>>> {
    let s = Arc::new(s.clone());
    let mut out: Vec<Arc<FinslerMetricField>> = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let prev = out.last().cloned();
        out.push(assemble_level(s.clone(), n, prev, config, variant)?);
    }
    Ok(out)
}

impl FinslerMetricField {
    pub fn structure(&self) -> &SubFinslerStructure {
        &self.structure
    }

    pub fn minorant(&self) -> Option<&Arc<FinslerMetricField>> {
        self.minorant.as_ref()
    }

    fn dim(&self) -> usize {
        self.structure.n()
    }

    fn node_box(&self, id: &NodeId) -> (Vec<f64>, Vec<f64>) {
        let dom = &self.structure.domain;
        let m = self.dim();
        let mut lo = Vec::with_capacity(m);
        let mut hi = Vec::with_capacity(m);
        for j in 0..m {
            let k = 3f64.powi(id.levels[j] as i32);
            let i = id.idx[j] as f64;
            let side = (dom.upper[j] - dom.lower[j]) / k;
            lo.push(dom.lower[j] + i * side);
            hi.push(if i + 1.0 >= k {
                dom.upper[j]
            } else {
                dom.lower[j] + (i + 1.0) * side
            });
        }
        (lo, hi)
    }

    /// Axes to split: the longest ones when the support is too wide,
    /// otherwise those along which `ψ` or `σ` vary most across the box.
    fn split_axes(&self, lo: &[f64], hi: &[f64], for_diameter: bool) -> u8 {
        let m = lo.len();
        let h: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)).collect();
        let score: Vec<f64> = if for_diameter {
            h.clone()
        } else {
            let mut rate = vec![0.0f64; m];
            let c: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
            let mut pts = vec![c];
            for mask in 0..(1usize << m) {
                pts.push(
                    (0..m)
                        .map(|j| if mask >> j & 1 == 1 { hi[j] } else { lo[j] })
                        .collect(),
                );
            }
            let sigma_field = match &self.structure.sigma {
                crate::structure::FiberNorm::Hilbert { gram } => gram,
                crate::structure::FiberNorm::WeightedPNorm { weights, .. } => weights,
            };
            for p in &pts {
                let p = self.structure.domain.clamp(p);
                for f in self
                    .structure
                    .fields()
                    .iter()
                    .chain(std::iter::once(sigma_field))
                {
                    if let Ok(jac) = f.jacobian(&p) {
                        for (j, r) in rate.iter_mut().enumerate() {
                            *r = r.max(jac.column(j).norm());
                        }
                    }
                }
            }
            let s: Vec<f64> = rate.iter().zip(&h).map(|(r, hj)| r * hj).collect();
            if s.iter().all(|v| *v == 0.0) {
                h.clone()
            } else {
                s
            }
        };
        let top = score.iter().cloned().fold(0.0, f64::max);
        let cut = if for_diameter { 0.5 } else { 0.3 };
        let mut mask = 0u8;
        for (j, sj) in score.iter().enumerate() {
            if *sj >= cut * top {
                mask |= 1 << j;
            }
        }
        mask
    }

    /// Relative gap target at `x` for level `m`.
    fn gap(&self, m: usize, rho_max: f64) -> f64 {
        let c = &self.config;
        let g = if rho_max > 0.0 && rho_max.is_finite() {
            c.gap_scale * c.eps(m) / rho_max
        } else {
            f64::INFINITY
        };
        g.min(0.5 / (c.lambda(m) + 1.0))
    }

    fn node(&self, id: &NodeId) -> Node {
        if let Some(n) = self.nodes.read().get(id) {
            return n.clone();
        }
        let built = self.build_node(id);
        self.nodes.write().entry(*id).or_insert(built).clone()
    }

    fn build_node(&self, id: &NodeId) -> Node {
        let (lo, hi) = self.node_box(id);
        let half: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (b - a)).collect();
        let diam = 2.0 * (1.0 + self.config.overlap) * linalg::norm2(&half);
        if diam >= 1.0 / self.n as f64 {
            return Node::Internal(self.split_axes(&lo, &hi, true));
        }
        match self.try_leaf(id, lo.clone(), hi.clone()) {
            Ok(cell) => Node::Leaf(Arc::new(cell)),
            Err(reason) => {
                let mask = self.split_axes(&lo, &hi, false);
                let capped = (0..lo.len())
                    .any(|j| mask >> j & 1 == 1 && id.levels[j] as usize >= self.config.depth_cap);
                if capped {
                    let c: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
                    Node::Failed(Error::RefinementCap {
                        depth: id.depth(),
                        point: c,
                        reason,
                    })
                } else {
                    Node::Internal(mask)
                }
            }
        }
    }

    /// Sample points of the support clipped to the box: corners, face centres, centre.
    fn check_points(&self, geom: &CellGeom) -> Vec<Vec<f64>> {
        let dom = &self.structure.domain;
        let lo = dom.clamp(&geom.support_lower());
        let hi = dom.clamp(&geom.support_upper());
        let m = lo.len();
        let mid: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut pts = vec![geom.anchor.clone(), mid.clone()];
        for mask in 0..(1usize << m) {
            pts.push(
                (0..m)
                    .map(|j| if mask >> j & 1 == 1 { hi[j] } else { lo[j] })
                    .collect(),
            );
        }
        for j in 0..m {
            for end in [&lo, &hi] {
                let mut p = mid.clone();
                p[j] = end[j];
                pts.push(p);
            }
        }
        pts
    }

    fn choose_anchor(&self, lo: &[f64], hi: &[f64]) -> (Vec<f64>, usize) {
        let m = lo.len();
        let c: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let h: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)).collect();
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        let total = 3usize.pow(m as u32);
        for t in 0..total {
            let mut rem = t;
            let mut p = c.clone();
            for j in 0..m {
                let o = (rem % 3) as f64 - 1.0;
                rem /= 3;
                p[j] += o * h[j] * (2.0 / 3.0);
            }
            let r = self.structure.rank(&p);
            let dist = p
                .iter()
                .zip(&c)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            let better = match &best {
                None => true,
                Some((br, bd, bp)) => {
                    r < *br
                        || (r == *br
                            && (dist < *bd
                                || (dist == *bd
                                    && p.partial_cmp(bp) == Some(std::cmp::Ordering::Less))))
                }
            };
            if better {
                best = Some((r, dist, p));
            }
        }
        let (r, _, p) = best.expect("at least the centre");
        (p, r)
    }

    fn try_leaf(
        &self,
        id: &NodeId,
        lo: Vec<f64>,
        hi: Vec<f64>,
    ) -> std::result::Result<Cell, String> {
        let (z, rank_z) = self.choose_anchor(&lo, &hi);
        let geom =
            CellGeom::new(lo, hi, self.config.overlap, z.clone()).map_err(|e| e.to_string())?;
        let points = self.check_points(&geom);
        for p in &points {
            if self.structure.rank(p) < rank_z {
                return Err(format!("rank drops below {rank_z} at {p:?}"));
            }
        }
        self.precheck(&z, &points)?;
        let local = match self.variant {
            Variant::Finsler => self.finsler_anchor(&z)?,
            Variant::Riemannian => self.gram_anchor(&z, rank_z)?,
        };
        for p in &points {
            self.check_upper(p, &z, rank_z, &local)?;
        }
        for p in &points {
            self.check_lower(p, &local)?;
        }
        let m = self.dim();
        Ok(Cell {
            levels: id.levels[..m].to_vec(),
            index: id.idx[..m].to_vec(),
            geom,
            local,
        })
    }

    fn rho_max(&self, x: &[f64]) -> std::result::Result<(NormSpec, f64), String> {
        let base = restricted_metric(&self.structure, x).map_err(|e| e.to_string())?;
        let r = match &base {
            NormSpec::Quadratic { matrix } => max_eig(matrix).max(0.0).sqrt(),
            other => {
                let fr = orthonormal_frame(&self.structure, x).map_err(|e| e.to_string())?;
                let frm = linalg::from_columns(&fr, self.dim());
                frame_directions(&frm, 64)
                    .iter()
                    .map(|v| other.eval(v))
                    .fold(0.0, f64::max)
            }
        };
        Ok((base, r))
    }

    fn minorant_field(&self) -> &dyn MetricField {
        match &self.minorant {
            Some(m) => m.as_ref(),
            None => &ZERO[self.dim() - 1],
        }
    }

    fn finsler_anchor(&self, z: &[f64]) -> std::result::Result<LocalNorm, String> {
        let (_, r) = self.rho_max(z)?;
        let g = self.gap(self.n, r);
        let mu = 0.5 * (g + self.gap(self.n + 1, r));
        let opts = AnchorOptions {
            delta_rule: DeltaRule::Target {
                gap: g,
                upper_margin: mu,
            },
            sphere_dirs: self.config.anchor_sphere_dirs,
            validation_dirs: self.config.anchor_validation_dirs,
        };
        let a = build_anchor_norm(
            &self.structure,
            z,
            self.eps,
            self.lambda,
            self.minorant_field(),
            &opts,
        )
        .map_err(|e| e.to_string())?;
        Ok(LocalNorm::Finsler(Box::new(a)))
    }

    /// Quadratic anchor: base Gram on `D_z` plus `λ′²` on the complement,
    /// contracted by `(1−δ)²`.
    fn gram_anchor(&self, z: &[f64], rank_z: usize) -> std::result::Result<LocalNorm, String> {
        let n = self.dim();
        let (base, r) = self.rho_max(z)?;
        let q = match base {
            NormSpec::Quadratic { matrix } => matrix,
            _ => return Err("non-Hilbert fiber".into()),
        };
        let fr = orthonormal_frame(&self.structure, z).map_err(|e| e.to_string())?;
        let comp = linalg::from_columns(&orthonormal_complement(&fr, n), n);
        let p_perp = &comp * comp.transpose();
        let m = match &self.minorant {
            Some(prev) => prev.gram(z).map_err(|e| e.to_string())?,
            None => DMatrix::zeros(n, n),
        };
        let mut lambda_prime = self.lambda + 1.0 + max_eig(&m).max(0.0).sqrt();
        let mut g1 = &q + &p_perp * (lambda_prime * lambda_prime);
        let mut tries = 0;
        while min_eig(&(&g1 - &m)) <= 0.0 {
            tries += 1;
            if tries > 60 {
                return Err("no quadratic extension dominates the minorant".into());
            }
            lambda_prime *= 2.0;
            g1 = &q + &p_perp * (lambda_prime * lambda_prime);
        }
        // Largest ratio m(v)²/n′(v)² is the top generalized eigenvalue.
        let l = g1
            .clone()
            .cholesky()
            .ok_or("extension not positive definite")?
            .l();
        let li = l.clone().try_inverse().ok_or("singular factor")?;
        let ratio = max_eig(&(&li * &m * li.transpose())).max(0.0);
        let delta_rel = 1.0 - ratio.sqrt();
        let g = self.gap(self.n, r);
        let delta = if g <= 0.999 * delta_rel {
            g
        } else {
            0.5 * delta_rel
        };
        if !(delta > 0.0) {
            return Err("minorant reaches the extension".into());
        }
        let gram = g1 * (1.0 - delta).powi(2);
        Ok(LocalNorm::Gram {
            gram,
            rank: rank_z,
            delta,
            lambda_prime,
        })
    }

    /// Necessary condition for the upper check, using only `ρ`: any anchor
    /// norm is at least `(1−g)(ρ(z, P v) + (λ+1)|P⊥v|)`.
    fn precheck(&self, z: &[f64], points: &[Vec<f64>]) -> std::result::Result<(), String> {
        let n = self.dim();
        let (base_z, r_z) = self.rho_max(z)?;
        let g = self.gap(self.n, r_z);
        let fz = linalg::from_columns(
            &orthonormal_frame(&self.structure, z).map_err(|e| e.to_string())?,
            n,
        );
        let proj = &fz * fz.transpose();
        for x in points {
            let (base_x, r_x) = self.rho_max(x)?;
            let mu = 0.5 * (self.gap(self.n, r_x) + self.gap(self.n + 1, r_x));
            let fr = orthonormal_frame(&self.structure, x).map_err(|e| e.to_string())?;
            for v in frame_directions(&linalg::from_columns(&fr, n), 2 * self.config.check_dirs)
                .iter()
                .step_by(2)
            {
                let vv = DVector::from_column_slice(v);
                let par = &proj * &vv;
                let perp = (&vv - &par).norm();
                let lower = (1.0 - g) * (base_z.eval(par.as_slice()) + (self.lambda + 1.0) * perp);
                if !(lower <= (1.0 - mu) * base_x.eval(v)) {
                    return Err(format!("cell too large for the upper margin at x={x:?}"));
                }
            }
        }
        Ok(())
    }

    /// Checks at `x` that do not involve the minorant.
    fn check_upper(
        &self,
        x: &[f64],
        z: &[f64],
        rank_z: usize,
        local: &LocalNorm,
    ) -> std::result::Result<(), String> {
        let s = &self.structure;
        let n = self.dim();
        let fr = orthonormal_frame(s, x).map_err(|e| e.to_string())?;
        let rank_x = fr.len();
        let frm = linalg::from_columns(&fr, n);
        let comp = linalg::from_columns(&orthonormal_complement(&fr, n), n);
        let (base_x, r_x) = self.rho_max(x)?;
        let mu = 0.5 * (self.gap(self.n, r_x) + self.gap(self.n + 1, r_x));
        let fail = |what: &str, v: &[f64]| Err(format!("{what} at x={x:?} v={v:?}"));

        if let LocalNorm::Gram { gram, .. } = local {
            if let NormSpec::Quadratic { matrix } = &base_x {
                let a = frm.transpose() * gram * &frm;
                let b = frm.transpose() * matrix * &frm * (1.0 - mu).powi(2);
                if rank_x > 0 && !(min_eig(&(&b - &a)) > STRICT * max_eig(&b)) {
                    return fail("anchor Gram above (1-μ)²ρ² on D_x", &[]);
                }
            }
            if rank_x == rank_z && comp.ncols() > 0 {
                let t = comp.transpose() * gram * &comp;
                if min_eig(&t) < self.lambda * self.lambda {
                    return fail("transverse bound", &[]);
                }
            }
            return Ok(());
        }

        for v in frame_directions(&frm, 2 * self.config.check_dirs)
            .iter()
            .step_by(2)
        {
            if !(local.value(v) <= (1.0 - mu) * base_x.eval(v)) {
                return fail("anchor norm above (1-μ)ρ", v);
            }
        }
        if rank_x == rank_z {
            for v in frame_directions(&comp, 8).iter().step_by(2) {
                if local.value(v) < self.lambda {
                    return fail("transverse bound", v);
                }
            }
            if rank_x > 0 && x != z {
                let fz = orthonormal_frame(s, z).map_err(|e| e.to_string())?;
                let c = local.sphere_bound() + 1.0;
                let dev = fz
                    .iter()
                    .zip(&fr)
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max);
                let bound = c * (rank_x as f64).sqrt() * dev;
                let limit = 1.0 / self.n as f64;
                if !(bound < limit) {
                    let sum = LocalPlusEuclid(local);
                    let dh = sphere_hausdorff(&fz, &fr, &sum, 32).map_err(|e| e.to_string())?;
                    if !(dh < limit) {
                        return fail("distribution moves too far across the cell", &[]);
                    }
                }
            }
        }
        Ok(())
    }

    /// Strict domination of the minorant at `x`.
    fn check_lower(&self, x: &[f64], local: &LocalNorm) -> std::result::Result<(), String> {
        let n = self.dim();
        let fail = |what: &str, v: &[f64]| Err(format!("{what} at x={x:?} v={v:?}"));
        if let LocalNorm::Gram { gram, .. } = local {
            let minor = match &self.minorant {
                Some(m) => m.gram(x).map_err(|e| e.to_string())?,
                None => return Ok(()),
            };
            if !(min_eig(&(gram - &minor)) > STRICT * max_eig(gram)) {
                return fail("minorant reaches the anchor Gram", &[]);
            }
            return Ok(());
        }
        let Some(m) = &self.minorant else {
            return Ok(());
        };
        let frozen = m
            .frozen(x)
            .map_err(|e| e.to_string())?
            .expect("levels freeze");
        let fr = orthonormal_frame(&self.structure, x).map_err(|e| e.to_string())?;
        let frm = linalg::from_columns(&fr, n);
        let horiz = frame_directions(&frm, 2 * self.config.check_dirs);
        let generic = sampling::sphere_directions(n, 2 * self.config.generic_dirs);
        for v in horiz.iter().step_by(2).chain(generic.iter().step_by(2)) {
            let nv = local.value(v);
            if !(nv - frozen.value(v) > STRICT * nv) {
                return fail("minorant reaches the anchor norm", v);
            }
        }
        Ok(())
    }

    /// Leaves whose support contains `x`.
    pub fn cells_at(&self, x: &[f64]) -> Result<Vec<Arc<Cell>>> {
        self.structure.domain.check(x)?;
        let m = self.dim();
        let mut out = Vec::new();
        let mut stack = vec![NodeId::ROOT];
        while let Some(id) = stack.pop() {
            match self.node(&id) {
                Node::Leaf(c) => out.push(c),
                Node::Failed(e) => return Err(e),
                Node::Internal(mask) => {
                    for child in id.children(mask, m) {
                        let (lo, hi) = self.node_box(&child);
                        if support_contains(&lo, &hi, self.config.overlap, x) {
                            stack.push(child);
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| (&a.levels, &a.index).cmp(&(&b.levels, &b.index)));
        Ok(out)
    }

    /// `(cell, φ(x))` for every cell with `φ(x) > 0`.
    pub fn weights(&self, x: &[f64]) -> Result<Vec<(Arc<Cell>, f64)>> {
        let cells = self.cells_at(x)?;
        let geoms: Vec<&CellGeom> = cells.iter().map(|c| &c.geom).collect();
        let w = pou_weights(&geoms, x);
        Ok(cells.into_iter().zip(w).filter(|(_, w)| *w > 0.0).collect())
    }

    /// `F_n(x, v)`.
    pub fn value(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let w = self.weights(x)?;
        Ok(match self.variant {
            Variant::Finsler => w.iter().map(|(c, p)| p * c.local.value(v)).sum(),
            Variant::Riemannian => {
                let g = blend_gram(&w, self.dim());
                quad(&g, v).sqrt()
            }
        })
    }

    /// Blended Gram matrix of the Riemannian variant.
    pub fn gram(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if self.variant != Variant::Riemannian {
            return Err(Error::InvalidInput(
                "Gram matrices exist only for the Riemannian variant".into(),
            ));
        }
        Ok(blend_gram(&self.weights(x)?, self.dim()))
    }

    /// Every materialized leaf, in key order.
    pub fn leaves(&self) -> Vec<Arc<Cell>> {
        let mut v: Vec<Arc<Cell>> = self
            .nodes
            .read()
            .values()
            .filter_map(|n| match n {
                Node::Leaf(c) => Some(c.clone()),
                _ => None,
            })
            .collect();
        v.sort_by(|a, b| (&a.levels, &a.index).cmp(&(&b.levels, &b.index)));
        v
    }

    pub fn materialized_nodes(&self) -> usize {
        self.nodes.read().len()
    }

    /// Materializes the whole tree, failing beyond `max_leaves`.
    pub fn build_cover(&self, max_leaves: usize) -> Result<Vec<CoverCell>> {
        let m = self.dim();
        let mut stack = vec![NodeId::ROOT];
        let mut leaves = 0usize;
        while let Some(id) = stack.pop() {
            match self.node(&id) {
                Node::Leaf(_) => {
                    leaves += 1;
                    if leaves > max_leaves {
                        return Err(Error::InvalidInput(format!(
                            "cover exceeds {max_leaves} cells"
                        )));
                    }
                }
                Node::Failed(e) => return Err(e),
                Node::Internal(mask) => stack.extend(id.children(mask, m)),
            }
        }
        Ok(self
            .leaves()
            .into_iter()
            .map(|c| CoverCell {
                lower: c.geom.lower.clone(),
                upper: c.geom.upper.clone(),
                anchor: c.geom.anchor.clone(),
                min_rank: c.local.rank(),
            })
            .collect())
    }

    /// Reproducible description of the materialized cells.
    pub fn to_artifact(&self) -> serde_json::Value {
        serde_json::json!({
            "structure": self.structure.name,
            "n": self.n,
            "eps": self.eps,
            "lambda": self.lambda,
            "variant": self.variant,
            "config": self.config,
            "cells": self.leaves().iter().map(|c| c.as_ref().clone()).collect::<Vec<Cell>>(),
        })
    }
}

fn blend_gram(w: &[(Arc<Cell>, f64)], n: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(n, n);
    for (c, p) in w {
        if let LocalNorm::Gram { gram, .. } = &c.local {
            g += gram * *p;
        }
    }
    g
}

static ZERO: [ZeroField; MAX_DIM] = [
    ZeroField(1),
    ZeroField(2),
    ZeroField(3),
    ZeroField(4),
    ZeroField(5),
    ZeroField(6),
];

/// `F_n(x, ·)` with the partition weights at `x` fixed.
struct Blend {
    dim: usize,
    parts: Vec<(Arc<Cell>, f64)>,
    gram: Option<DMatrix<f64>>,
}

impl Norm for Blend {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, v: &[f64]) -> f64 {
        match &self.gram {
            Some(g) => quad(g, v).sqrt(),
            None => self.parts.iter().map(|(c, p)| p * c.local.value(v)).sum(),
        }
    }
    fn sphere_max_bound(&self) -> Option<f64> {
        Some(match &self.gram {
            Some(g) => max_eig(g).max(0.0).sqrt(),
            None => self
                .parts
                .iter()
                .map(|(c, p)| p * c.local.sphere_bound())
                .sum(),
        })
    }
}

struct LocalPlusEuclid<'a>(&'a LocalNorm);

impl Norm for LocalPlusEuclid<'_> {
    fn dim(&self) -> usize {
        0
    }
    fn value(&self, v: &[f64]) -> f64 {
        self.0.value(v) + Euclidean(v.len()).value(v)
    }
}

impl MetricField for FinslerMetricField {
    fn dim(&self) -> usize {
        self.structure.n()
    }

    fn eval(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        self.value(x, v)
    }

    fn frozen(&self, x: &[f64]) -> Result<Option<Box<dyn Norm + '_>>> {
        let w = self.weights(x)?;
        let gram = match self.variant {
            Variant::Riemannian => Some(blend_gram(&w, self.dim())),
            Variant::Finsler => None,
        };
        Ok(Some(Box::new(Blend {
            dim: self.dim(),
            parts: w,
            gram,
        })))
    }

    fn sphere_max_bound(&self, x: &[f64]) -> Result<Option<f64>> {
        let w = self.weights(x)?;
        Ok(Some(match self.variant {
            Variant::Finsler => w.iter().map(|(c, p)| p * c.local.sphere_bound()).sum(),
            Variant::Riemannian => max_eig(&blend_gram(&w, self.dim())).max(0.0).sqrt(),
        }))
    }
}

/// Sampled `(x, v)` pairs used by the validators: `v` runs over unit
/// directions of `D_x`.
pub fn horizontal_samples(
    s: &SubFinslerStructure,
    count: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut rng = sampling::rng(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = sampling::random_point(&mut rng, &s.domain.lower, &s.domain.upper);
        let fr = orthonormal_frame(s, &x)?;
        let q = sampling::random_unit(&mut rng, fr.len());
        let mut v = vec![0.0; s.n()];
        for (qi, w) in q.iter().zip(&fr) {
            v.iter_mut().zip(w.iter()).for_each(|(a, b)| *a += qi * b);
        }
        out.push((x, v));
    }
    Ok(out)
}

/// Per-item results of [`validate_sequence`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceReport {
    /// `F_{n−1} < F_n < ρ`, margins relative to `ρ`.
    pub sandwich: PropertyCheck,
    /// `F_n ≥ n` on `V_x^⊥ ∩ 𝕊` for `x ∈ G_n`.
    pub transverse: PropertyCheck,
    /// `|F_n(z,·) − ρ(z,·)| ≤ 1/n` on `D_z ∩ 𝕊` at anchors.
    pub anchors: PropertyCheck,
    /// Existence of a nearby anchor dominated by `x` with close distributions.
    pub nearby_anchor: PropertyCheck,
}

impl SequenceReport {
    pub fn all_pass(&self) -> bool {
        self.sandwich.pass && self.transverse.pass && self.anchors.pass && self.nearby_anchor.pass
    }
}

/// Checks items a)–d) on `samples` random points per level.
pub fn validate_sequence(
    s: &SubFinslerStructure,
    fields: &[Arc<FinslerMetricField>],
    samples: usize,
    grid_step: f64,
    seed: u64,
) -> Result<SequenceReport> {
    let mut rep = SequenceReport {
        sandwich: PropertyCheck::new(),
        transverse: PropertyCheck::new(),
        anchors: PropertyCheck::new(),
        nearby_anchor: PropertyCheck::new(),
    };
    let n_dim = s.n();
    let pairs = horizontal_samples(s, samples, seed)?;
    for f in fields {
        let n = f.n;
        for (x, v) in &pairs {
            let rho = s.horizontal_norm(x, v)?.as_f64();
            let fx = f.value(x, v)?;
            let prev = match f.minorant() {
                Some(m) => m.value(x, v)?,
                None => 0.0,
            };
            let margin = (fx - prev).min(rho - fx) / rho.max(1e-300);
            rep.sandwich.record(margin - STRICT, x, v);
        }
        // Non-horizontal directions: F finite, ρ infinite.
        for (x, _) in pairs.iter().take(samples / 4 + 1) {
            for v in sampling::sphere_directions(n_dim, 4) {
                if let GenMetricValue::Infinite = s.horizontal_norm(x, &v)? {
                    let fx = f.value(x, &v)?;
                    rep.sandwich
                        .record(if fx.is_finite() { 1.0 } else { -1.0 }, x, &v);
                }
            }
        }
        let mut rng = sampling::rng(seed ^ (0x9e37 + n as u64));
        let mut tested = 0;
        let mut attempts = 0;
        while tested < samples / 4 + 1 && attempts < 20 * samples + 20 {
            attempts += 1;
            let mut x = sampling::random_point(&mut rng, &s.domain.lower, &s.domain.upper);
            if attempts % 2 == 0 {
                // Bias half the draws onto lower-rank points when the rank varies.
                if let Some(y) = snap_to_low_rank(s, &x) {
                    x = y;
                }
            }
            if !gn_membership(s, &x, n, grid_step)? {
                continue;
            }
            tested += 1;
            let fr = orthonormal_frame(s, &x)?;
            let comp = linalg::from_columns(&orthonormal_complement(&fr, n_dim), n_dim);
            for v in frame_directions(&comp, 8) {
                let fx = f.value(&x, &v)?;
                rep.transverse.record(fx - n as f64 + STRICT, &x, &v);
            }
            // Item d): for each v, some anchor of a cell containing x works.
            let cells = f.weights(&x)?;
            let dirs: Vec<Vec<f64>> = frame_directions(&linalg::from_columns(&fr, n_dim), 8)
                .into_iter()
                .chain(sampling::sphere_directions(n_dim, 8))
                .collect();
            let mut per_v = vec![f64::NEG_INFINITY; dirs.len()];
            for (c, _) in &cells {
                let z = &c.geom.anchor;
                let dist = linalg::norm2(&z.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
                if dist >= 1.0 / n as f64 {
                    continue;
                }
                let mut h_margin = f64::INFINITY;
                if c.local.rank() == fr.len() {
                    let fz = orthonormal_frame(s, z)?;
                    let sum = FieldPlusEuclid {
                        f: f.as_ref(),
                        z: z.clone(),
                    };
                    h_margin = 1.0 / n as f64 - sphere_hausdorff(&fz, &fr, &sum, 32)?;
                }
                for (best, v) in per_v.iter_mut().zip(&dirs) {
                    let m = (f.value(&x, v)? - f.value(z, v)? + 1e-12).min(h_margin);
                    *best = best.max(m);
                }
            }
            let best = per_v.into_iter().fold(f64::INFINITY, f64::min);
            rep.nearby_anchor.record(best, &x, &[]);
        }
        for c in f.leaves() {
            let z = &c.geom.anchor;
            let fr = orthonormal_frame(s, z)?;
            for v in frame_directions(&linalg::from_columns(&fr, n_dim), 16) {
                let rho = s.horizontal_norm(z, &v)?.as_f64();
                let fz = f.value(z, &v)?;
                rep.anchors
                    .record(1.0 / n as f64 + 1e-9 - (fz - rho).abs(), z, &v);
            }
        }
    }
    Ok(rep)
}

struct FieldPlusEuclid<'a> {
    f: &'a FinslerMetricField,
    z: Vec<f64>,
}

impl Norm for FieldPlusEuclid<'_> {
    fn dim(&self) -> usize {
        self.f.dim()
    }
    fn value(&self, v: &[f64]) -> f64 {
        self.f.value(&self.z, v).unwrap_or(f64::NAN) + linalg::norm2(v)
    }
}

/// Moves `x` onto a nearby point of lower rank along one axis, if any is
/// found on a coarse scan of that axis.
fn snap_to_low_rank(s: &SubFinslerStructure, x: &[f64]) -> Option<Vec<f64>> {
    let r = s.rank(x);
    for j in 0..x.len() {
        let mut y = x.to_vec();
        for t in [0.0, -0.5, 0.5] {
            y[j] = t;
            if s.domain.contains(&y) && s.rank(&y) < r {
                return Some(y);
            }
        }
    }
    None
}

/// One row of a convergence probe table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRow {
    pub n: usize,
    pub value: f64,
    pub rho: GenMetricValue,
    /// For non-horizontal probes: the lower profile `β·n − ρ(x, v′)` where it applies.
    pub lower_profile: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub rows: Vec<ProbeRow>,
    pub monotone: bool,
    /// `ρ − F_N` for horizontal probes.
    pub final_gap: Option<f64>,
    /// Every applicable lower profile holds.
    pub profile_holds: bool,
}

/// Tabulates `F_n(x, v)` along the sequence and checks its verdicts.
pub fn convergence_probe(
    s: &SubFinslerStructure,
    fields: &[Arc<FinslerMetricField>],
    probes: &[(Vec<f64>, Vec<f64>)],
    grid_step: f64,
) -> Result<Vec<ProbeResult>> {
    let n_dim = s.n();
    let mut out = Vec::new();
    for (x, v) in probes {
        s.domain.check(x)?;
        let rho = s.horizontal_norm(x, v)?;
        let fr = orthonormal_frame(s, x)?;
        let frm = linalg::from_columns(&fr, n_dim);
        let vv = DVector::from_column_slice(v);
        let v_par = &frm * (frm.transpose() * &vv);
        let w = &vv - &v_par;
        let beta = w.norm();
        let rho_par = s.horizontal_norm(x, v_par.as_slice())?.as_f64();
        let mut rows = Vec::new();
        let mut monotone = true;
        let mut profile_holds = true;
        let mut last = f64::NEG_INFINITY;
        for f in fields {
            let value = f.value(x, v)?;
            if value < last {
                monotone = false;
            }
            last = value;
            let lower_profile = if !rho.is_finite() && gn_membership(s, x, f.n, grid_step)? {
                let lp = beta * f.n as f64 - rho_par;
                if value < lp - 1e-9 {
                    profile_holds = false;
                }
                Some(lp)
            } else {
                None
            };
            rows.push(ProbeRow {
                n: f.n,
                value,
                rho,
                lower_profile,
            });
        }
        let final_gap = rho.finite().map(|r| r - last);
        out.push(ProbeResult {
            x: x.clone(),
            v: v.clone(),
            rows,
            monotone,
            final_gap,
            profile_holds,
        });
    }
    Ok(out)
}

/// Smooth norm of a leaf, for callers that need the raw anchor data.
pub fn leaf_norm(cell: &Cell) -> Option<&SmoothNorm> {
    match &cell.local {
        LocalNorm::Finsler(a) => Some(&a.norm),
        LocalNorm::Gram { .. } => None,
    }
}
