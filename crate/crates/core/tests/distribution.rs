use ccml::distribution::{
    frame_of_columns, gn_membership, orthonormal_frame, rank_radius, sphere_hausdorff, Radius,
};
use ccml::gallery;
use ccml::norm_factory::Euclidean;
use nalgebra::DVector;
use proptest::prelude::*;

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[test]
fn euclidean_radius_unbounded() {
    let s = gallery::euclidean(2).unwrap().structure;
    assert_eq!(
        rank_radius(&s, &[0.2, 0.1], 1.0, 0.05).unwrap().r_hat,
        Radius::Unbounded
    );
}

#[test]
fn grushin_radius_is_distance_to_line() {
    let s = gallery::grushin().unwrap().structure;
    let est = rank_radius(&s, &[0.3, 0.0], 1.0, 0.01).unwrap();
    assert_eq!(est.rank, 2);
    match est.r_hat {
        Radius::Finite(r) => assert!((r - 0.3).abs() <= 0.01, "r_hat = {r}"),
        Radius::Unbounded => panic!("expected a finite radius"),
    }
}

#[test]
fn grushin_line_points_are_minimal() {
    let s = gallery::grushin().unwrap().structure;
    assert_eq!(
        rank_radius(&s, &[0.0, 0.5], 1.0, 0.02).unwrap().r_hat,
        Radius::Unbounded
    );
}

#[test]
fn rank_radius_rejects_bad_parameters() {
    let s = gallery::grushin().unwrap().structure;
    assert!(rank_radius(&s, &[0.0, 0.5], 1.0, 0.0).is_err());
    assert!(rank_radius(&s, &[0.0, 1.5], 1.0, 0.1).is_err());
    assert!(gn_membership(&s, &[0.0, 0.5], 0, 0.1).is_err());
}

#[test]
fn gn_membership_examples() {
    let s = gallery::grushin().unwrap().structure;
    assert!(gn_membership(&s, &[0.3, 0.0], 4, 0.01).unwrap());
    assert!(!gn_membership(&s, &[0.1, 0.0], 4, 0.01).unwrap());
    for n in [1, 3, 7, 12] {
        assert!(gn_membership(&s, &[0.0, -0.4], n, 0.02).unwrap());
    }
}

#[test]
fn frame_axis_aligned() {
    let f = frame_of_columns(&[dv(&[2.0, 0.0, 0.0]), dv(&[1.0, 1.0, 0.0])]).unwrap();
    assert!((&f[0] - dv(&[1.0, 0.0, 0.0])).norm() < 1e-15);
    assert!((&f[1] - dv(&[0.0, 1.0, 0.0])).norm() < 1e-15);
}

#[test]
fn frame_single_column() {
    let f = frame_of_columns(&[dv(&[0.0, 3.0, 4.0])]).unwrap();
    assert_eq!(f.len(), 1);
    assert!((&f[0] - dv(&[0.0, 0.6, 0.8])).norm() < 1e-15);
}

#[test]
fn frame_grushin() {
    let s = gallery::grushin().unwrap().structure;
    let f = orthonormal_frame(&s, &[0.5, 0.0]).unwrap();
    assert!((&f[0] - dv(&[1.0, 0.0])).norm() < 1e-15);
    assert!((&f[1] - dv(&[0.0, 1.0])).norm() < 1e-15);
    assert_eq!(orthonormal_frame(&s, &[0.0, 0.3]).unwrap().len(), 1);
}

#[test]
fn frame_of_zero_columns_fails() {
    assert!(frame_of_columns(&[dv(&[0.0, 0.0])]).is_err());
}

#[test]
fn hausdorff_identical_is_zero() {
    let v = [dv(&[1.0, 0.0, 0.0]), dv(&[0.0, 1.0, 1.0])];
    assert_eq!(sphere_hausdorff(&v, &v, &Euclidean(3), 64).unwrap(), 0.0);
}

#[test]
fn hausdorff_orthogonal_lines() {
    let d = sphere_hausdorff(&[dv(&[1.0, 0.0])], &[dv(&[0.0, 1.0])], &Euclidean(2), 16).unwrap();
    assert!((d - 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn hausdorff_rotated_line() {
    let t: f64 = 0.1;
    let d = sphere_hausdorff(
        &[dv(&[1.0, 0.0])],
        &[dv(&[t.cos(), t.sin()])],
        &Euclidean(2),
        16,
    )
    .unwrap();
    // Chord 2 sin(θ/2).
    assert!((d - 0.09995833854135666).abs() < 1e-12);
}

#[test]
fn hausdorff_errors() {
    assert!(sphere_hausdorff(&[], &[dv(&[1.0, 0.0])], &Euclidean(2), 8).is_err());
    assert!(sphere_hausdorff(
        &[dv(&[1.0, 0.0])],
        &[dv(&[1.0, 0.0, 0.0])],
        &Euclidean(2),
        8
    )
    .is_err());
}

fn point3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn frames_are_orthonormal_and_span(x in point3(), name in prop::sample::select(vec!["heisenberg", "martinet"])) {
        let s = gallery::builtin(name).unwrap().structure;
        let f = orthonormal_frame(&s, &x).unwrap();
        for i in 0..f.len() {
            for j in 0..f.len() {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((f[i].dot(&f[j]) - want).abs() <= 1e-12);
            }
        }
        let psi = s.psi(&x);
        for c in psi.column_iter() {
            let c = c.into_owned();
            let proj: DVector<f64> = f.iter().fold(DVector::zeros(3), |acc, w| acc + w * w.dot(&c));
            prop_assert!((c - proj).norm() <= 1e-10);
        }
    }

    #[test]
    fn hausdorff_bound_from_frame_perturbation(x in point3(), dir in point3(), eps in 0.01..0.5f64) {
        // Euclidean norm: comparison constant C = 1, k = 2.
        let s = gallery::heisenberg().unwrap().structure;
        let xb = s.domain.clamp(&x);
        let fb = orthonormal_frame(&s, &xb).unwrap();
        let mut t = 0.5;
        let fx = loop {
            let xs = s.domain.clamp(&xb.iter().zip(&dir).map(|(a, d)| a + t * d).collect::<Vec<_>>());
            let fx = orthonormal_frame(&s, &xs).unwrap();
            let dev = fb.iter().zip(&fx).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
            if dev <= eps / 2f64.sqrt() || t < 1e-9 {
                break fx;
            }
            t *= 0.5;
        };
        let d = sphere_hausdorff(&fb, &fx, &Euclidean(3), 256).unwrap();
        prop_assert!(d <= eps + 1e-3, "d = {d}, eps = {eps}");
    }

    #[test]
    fn hausdorff_is_symmetric(a in point3(), b in point3(), c in point3()) {
        prop_assume!(a.iter().any(|t| t.abs() > 1e-2) && c.iter().any(|t| t.abs() > 1e-2));
        let v = [dv(&a), dv(&b)];
        let w = [dv(&c)];
        let n = Euclidean(3);
        let d1 = sphere_hausdorff(&v, &w, &n, 64);
        let d2 = sphere_hausdorff(&w, &v, &n, 64);
        if let (Ok(d1), Ok(d2)) = (d1, d2) {
            prop_assert_eq!(d1, d2);
            prop_assert!(d1 > 0.0);
        }
    }

    #[test]
    fn gn_membership_is_monotone(x in -0.6..0.6f64, y in -1.0..1.0f64) {
        let s = gallery::grushin().unwrap().structure;
        let flags: Vec<bool> = (1..=8).map(|n| gn_membership(&s, &[x, y], n, 0.02).unwrap()).collect();
        for n in 1..flags.len() {
            prop_assert!(!flags[n] || flags[n - 1]);
        }
    }
}
