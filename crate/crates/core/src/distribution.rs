//! The distribution `x ↦ D_x = range ψ(x)`: rank radii, the sets `G_n`,
//! Gram–Schmidt frames and Hausdorff distances between unit spheres of
//! subspaces.
//!
//! Balls and distances here use the Euclidean distance of the chart.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, gram_schmidt};
use crate::norm_factory::Norm;
use crate::sampling;
use crate::structure::SubFinslerStructure;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Radius {
    Finite(f64),
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRadiusEstimate {
    pub x: Vec<f64>,
    pub rank: usize,
    pub r_hat: Radius,
    pub grid_step: f64,
}

/// Largest radius `r ≤ r_cap` on whose grid-sampled ball the rank of `ψ`
/// never drops below `rank(x)`.
///
/// The scan visits grid offsets in order of distance and stops at the first
/// point of lower rank; the ball is open, so that point's distance is the
/// estimate.
pub fn rank_radius(
    s: &SubFinslerStructure,
    x: &[f64],
    r_cap: f64,
    grid_step: f64,
) -> Result<RankRadiusEstimate> {
    s.domain.check(x)?;
    if !(grid_step > 0.0) || !(r_cap > 0.0) {
        return Err(Error::InvalidInput(
            "r_cap and grid_step must be positive".into(),
        ));
    }
    let n = s.n();
    let rank = s.rank(x);
    let k = (r_cap / grid_step).floor() as i64;
    let side = (2 * k + 1) as usize;
    let total = side
        .checked_pow(n as u32)
        .ok_or_else(|| Error::InvalidInput("grid too large".into()))?;
    if total > 50_000_000 {
        return Err(Error::InvalidInput(format!(
            "rank scan of {total} points refused; raise grid_step"
        )));
    }
    let mut offsets: Vec<(f64, Vec<i64>)> = Vec::new();
    for idx in 0..total {
        let mut rem = idx;
        let mut o = Vec::with_capacity(n);
        for _ in 0..n {
            o.push((rem % side) as i64 - k);
            rem /= side;
        }
        let dist = grid_step * (o.iter().map(|v| (v * v) as f64).sum::<f64>()).sqrt();
        if dist > 0.0 && dist <= r_cap {
            offsets.push((dist, o));
        }
    }
    offsets.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    for (dist, o) in offsets {
        let p: Vec<f64> = x
            .iter()
            .zip(&o)
            .map(|(a, b)| a + grid_step * *b as f64)
            .collect();
        if !s.domain.contains(&p) {
            continue;
        }
        if s.rank(&p) < rank {
            return Ok(RankRadiusEstimate {
                x: x.to_vec(),
                rank,
                r_hat: Radius::Finite(dist),
                grid_step,
            });
        }
    }
    Ok(RankRadiusEstimate {
        x: x.to_vec(),
        rank,
        r_hat: Radius::Unbounded,
        grid_step,
    })
}

/// `x ∈ G_n`, i.e. `r_x ≥ 1/n` at the given grid resolution.
pub fn gn_membership(s: &SubFinslerStructure, x: &[f64], n: usize, grid_step: f64) -> Result<bool> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be >= 1".into()));
    }
    let r = 1.0 / n as f64;
    let est = rank_radius(s, x, r, grid_step)?;
    Ok(match est.r_hat {
        Radius::Unbounded => true,
        Radius::Finite(v) => v >= r,
    })
}

/// Orthonormal frame of `D_x` by Gram–Schmidt on the columns of `ψ(x)` in order.
pub fn orthonormal_frame(s: &SubFinslerStructure, x: &[f64]) -> Result<Vec<DVector<f64>>> {
    s.domain.check(x)?;
    frame_of_columns(&linalg::columns(&s.psi(x)))
}

/// Gram–Schmidt frame of a column list; errors when every column vanishes.
pub fn frame_of_columns(cols: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let (frame, _) = gram_schmidt(cols);
    if frame.is_empty() {
        return Err(Error::InvalidInput(
            "zero column set: rank 0 has no frame".into(),
        ));
    }
    Ok(frame)
}

fn sphere_samples(basis: &[DVector<f64>], n_dirs: usize) -> Result<Vec<Vec<f64>>> {
    let (frame, _) = gram_schmidt(basis);
    if frame.is_empty() {
        return Err(Error::InvalidInput("empty basis".into()));
    }
    let d = frame[0].len();
    let k = frame.len();
    Ok(sampling::sphere_directions(k, n_dirs)
        .into_iter()
        .map(|q| {
            let mut v = vec![0.0; d];
            for (qi, w) in q.iter().zip(&frame) {
                for (vj, wj) in v.iter_mut().zip(w.iter()) {
                    *vj += qi * wj;
                }
            }
            v
        })
        .collect())
}

/// Hausdorff distance between `V ∩ 𝕊` and `W ∩ 𝕊` measured in `norm`,
/// sup–inf taken exactly over `n_dirs` deterministic directions per subspace.
pub fn sphere_hausdorff(
    v: &[DVector<f64>],
    w: &[DVector<f64>],
    norm: &dyn Norm,
    n_dirs: usize,
) -> Result<f64> {
    let a = sphere_samples(v, n_dirs)?;
    let b = sphere_samples(w, n_dirs)?;
    if a[0].len() != b[0].len() {
        return Err(Error::DimensionMismatch {
            expected: a[0].len(),
            got: b[0].len(),
        });
    }
    let mut diff = vec![0.0; a[0].len()];
    let mut one_side = |p: &[Vec<f64>], q: &[Vec<f64>]| -> f64 {
        let mut sup: f64 = 0.0;
        for x in p {
            let mut inf = f64::INFINITY;
            for y in q {
                for ((d, xi), yi) in diff.iter_mut().zip(x).zip(y) {
                    *d = xi - yi;
                }
                inf = inf.min(norm.value(&diff));
            }
            sup = sup.max(inf);
        }
        sup
    };
    let ab = one_side(&a, &b);
    let ba = one_side(&b, &a);
    Ok(ab.max(ba))
}
