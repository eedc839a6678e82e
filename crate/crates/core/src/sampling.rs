//! Deterministic point and direction sets.
//!
//! All "for every v on the sphere" checks in the crate run over these sets so
//! that reruns are bit-identical. Points come from a Kronecker (additive
//! recurrence) sequence; sphere directions are pushed through Box–Muller.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generalised golden ratio for dimension `k`: the root of `x^(k+1) = x + 1`.
fn phi(k: usize) -> f64 {
    let mut x = 2.0f64;
    for _ in 0..64 {
        x = (1.0 + x).powf(1.0 / (k as f64 + 1.0));
    }
    x
}

/// `count` points of the Kronecker sequence in `[0,1)^k`, starting at `offset`.
pub fn kronecker(k: usize, count: usize, offset: usize) -> Vec<Vec<f64>> {
    let g = phi(k);
    let alpha: Vec<f64> = (1..=k).map(|j| (1.0 / g.powi(j as i32)).fract()).collect();
    (0..count)
        .map(|i| {
            let t = (i + offset + 1) as f64;
            alpha.iter().map(|a| (0.5 + a * t).fract()).collect()
        })
        .collect()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Deterministic unit vectors in ℝ^k.
///
/// `k = 1` gives `±1`; `k = 2` gives equally spaced angles; higher dimensions
/// use Box–Muller on a Kronecker sequence. Antipodal pairs are interleaved so
/// every prefix of even length is symmetric.
pub fn sphere_directions(k: usize, count: usize) -> Vec<Vec<f64>> {
    assert!(k >= 1, "sphere dimension must be >= 1");
    let half = count.div_ceil(2).max(1);
    let base: Vec<Vec<f64>> = match k {
        1 => vec![vec![1.0]],
        2 => (0..half)
            .map(|i| {
                let a = std::f64::consts::PI * (i as f64 + 0.5) / half as f64;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            let m = k.div_ceil(2) * 2;
            kronecker(m, half, 0)
                .into_iter()
                .map(|u| {
                    let mut g = Vec::with_capacity(m);
                    for pair in u.chunks(2) {
                        let r = (-2.0 * (1.0 - pair[0]).max(1e-300).ln()).sqrt();
                        let th = 2.0 * std::f64::consts::PI * pair[1];
                        g.push(r * th.cos());
                        g.push(r * th.sin());
                    }
                    g.truncate(k);
                    if !normalize(&mut g) {
                        g = vec![0.0; k];
                        g[0] = 1.0;
                    }
                    g
                })
                .collect()
        }
    };
    let mut out = Vec::with_capacity(2 * base.len());
    for b in base {
        out.push(b.iter().map(|x| -x).collect());
        out.push(b);
    }
    if k == 1 {
        out.reverse();
    }
    out
}

/// Seeded generator used by every randomized sampler in the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform random unit vector.
pub fn random_unit(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            normalize(&mut v);
            return v;
        }
    }
}

/// Uniform random point of the box `[lower, upper]`.
pub fn random_point(rng: &mut impl Rng, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    lower
        .iter()
        .zip(upper)
        .map(|(a, b)| rng.gen_range(*a..=*b))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directions_are_unit_and_symmetric() {
        for k in 1..6 {
            let d = sphere_directions(k, 20);
            for pair in d.chunks(2) {
                let n: f64 = pair[0].iter().map(|x| x * x).sum();
                assert!((n - 1.0).abs() < 1e-12);
                for (a, b) in pair[0].iter().zip(&pair[1]) {
                    assert_eq!(*a, -*b);
                }
            }
        }
    }

    #[test]
    fn kronecker_stays_in_unit_cube() {
        for p in kronecker(3, 500, 7) {
            assert!(p.iter().all(|x| (0.0..1.0).contains(x)));
        }
    }
}
