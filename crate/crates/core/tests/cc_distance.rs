use ccml::cc_distance::{
    cc_distance_upper, cc_length, distance_convergence, finsler_distance_grid,
    horizontal_differential, integrate, lip_bound_check, metric_speed_check, parallelogram_check,
    parallelogram_defect, CcConfig, Stencil,
};
use ccml::error::Result;
use ccml::gallery::{self, field};
use ccml::norm_factory::MetricField;
use ccml::smoothmap::{ChartDomain, PolyField, Polynomial};
use proptest::prelude::*;

/// `c·|v|` on ℝⁿ.
struct Flat(usize, f64);

impl MetricField for Flat {
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&self, _x: &[f64], v: &[f64]) -> Result<f64> {
        Ok(self.1 * v.iter().map(|a| a * a).sum::<f64>().sqrt())
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn quick() -> CcConfig {
    CcConfig {
        k: 8,
        restarts: 2,
        ..CcConfig::default()
    }
}

fn scalar(n: usize, exps: &[u32]) -> PolyField {
    PolyField::new(n, vec![Polynomial::monomial(exps, 1.0)]).unwrap()
}

#[test]
fn heisenberg_coordinate_flows() {
    let s = gallery::heisenberg().unwrap().structure;
    let p = integrate(&s, &[0.0; 3], &[vec![1.0, 0.0]]).unwrap();
    assert!(close(p.endpoint(), &[1.0, 0.0, 0.0], 1e-14));
    let p = integrate(&s, &[0.0; 3], &[vec![0.0, 1.0]]).unwrap();
    assert!(close(p.endpoint(), &[0.0, 1.0, 0.0], 1e-14));
}

#[test]
fn heisenberg_two_leg_flow() {
    let s = gallery::heisenberg().unwrap().structure;
    let p = integrate(&s, &[0.0; 3], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!(
        close(p.endpoint(), &[0.5, 0.5, 0.125], 1e-12),
        "{:?}",
        p.endpoint()
    );
    assert_eq!(p.states.len(), 2 * p.substeps + 1);
}

#[test]
fn integrate_rejects_wrong_control_size() {
    let s = gallery::heisenberg().unwrap().structure;
    assert!(integrate(&s, &[0.0; 3], &[vec![1.0]]).is_err());
    assert!(integrate(&s, &[0.0; 3], &[]).is_err());
}

#[test]
fn lengths_of_straight_paths() {
    let s = gallery::heisenberg().unwrap().structure;
    let p = integrate(&s, &[0.0; 3], &[vec![1.0, 0.0]]).unwrap();
    assert!((cc_length(&s, &p).unwrap() - 1.0).abs() < 1e-12);
    let g = gallery::grushin().unwrap().structure;
    let p = integrate(&g, &[0.0, 0.0], &[vec![1.0, 0.0]]).unwrap();
    assert!((cc_length(&g, &p).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn dido_circle_length() {
    let s = gallery::heisenberg().unwrap().structure;
    let k = 64;
    let l = 2.0 * std::f64::consts::PI.sqrt();
    let controls: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let th = std::f64::consts::TAU * (i as f64 + 0.5) / k as f64;
            vec![l * th.cos(), l * th.sin()]
        })
        .collect();
    let p = integrate(&s, &[0.0, -0.5, -0.5], &controls).unwrap();
    assert!((cc_length(&s, &p).unwrap() - 3.5449077018110318).abs() < 1e-9);
    // Closed polygon of 64 sides with area close to 1.
    let e = p.endpoint();
    assert!(e[0].abs() < 1e-12 && (e[1] + 0.5).abs() < 1e-12);
    assert!((e[2] - 0.5).abs() < 2e-3, "{e:?}");
}

#[test]
fn distance_heisenberg_horizontal_pair() {
    let s = gallery::heisenberg().unwrap().structure;
    let r = cc_distance_upper(&s, &[0.0; 3], &[1.0, 0.0, 0.0], &CcConfig::default()).unwrap();
    assert!((r.value - 1.0).abs() <= 0.02, "value {}", r.value);
    assert!(r.endpoint_error <= 1e-4);
    assert!((cc_length(&s, &r.path).unwrap() - r.value).abs() <= 1e-9);
}

#[test]
fn distance_grushin_axis_pair() {
    let s = gallery::grushin().unwrap().structure;
    let r = cc_distance_upper(&s, &[0.0, 0.0], &[1.0, 0.0], &CcConfig::default()).unwrap();
    assert!((r.value - 1.0).abs() <= 0.02, "value {}", r.value);
}

#[test]
fn distance_to_self_is_zero() {
    let s = gallery::heisenberg().unwrap().structure;
    assert_eq!(
        cc_distance_upper(&s, &[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3], &quick())
            .unwrap()
            .value,
        0.0
    );
}

#[test]
fn distance_outside_box_fails() {
    let s = gallery::heisenberg().unwrap().structure;
    assert!(cc_distance_upper(&s, &[0.0; 3], &[2.0, 0.0, 0.0], &quick()).is_err());
}

#[test]
fn stencil_sizes() {
    assert_eq!(Stencil::default().offsets(2).len(), 16);
    assert_eq!(Stencil { radius: 1 }.offsets(2).len(), 8);
    assert_eq!(Stencil::default().offsets(3).len(), 98);
}

#[test]
fn grid_euclidean_axis_pair() {
    let d = ChartDomain::cube(2, 1.0);
    let g = finsler_distance_grid(
        &Flat(2, 1.0),
        &d,
        &[0.0, 0.0],
        &[1.0, 0.0],
        0.05,
        Stencil::default(),
    )
    .unwrap();
    assert!((g.value - 1.0).abs() <= 0.02);
    assert_eq!((g.snap_x, g.snap_y), (0.0, 0.0));
}

#[test]
fn grid_euclidean_oblique_pair() {
    let d = ChartDomain::cube(2, 1.0);
    let (x, y) = ([-0.35, 0.1], [0.6, 0.45]);
    let exact = ((0.95f64).powi(2) + 0.35f64.powi(2)).sqrt();
    let g = finsler_distance_grid(&Flat(2, 1.0), &d, &x, &y, 0.05, Stencil::default()).unwrap();
    assert!(
        (g.value - exact).abs() <= 0.02 * exact,
        "{} vs {exact}",
        g.value
    );
    assert!(g.value >= exact - g.error_bar);
}

#[test]
fn grid_scales_exactly() {
    let d = ChartDomain::cube(2, 1.0);
    let (x, y) = ([-0.5, 0.3], [0.7, -0.2]);
    let a = finsler_distance_grid(&Flat(2, 1.0), &d, &x, &y, 0.1, Stencil::default()).unwrap();
    let b = finsler_distance_grid(&Flat(2, 2.0), &d, &x, &y, 0.1, Stencil::default()).unwrap();
    assert_eq!(b.value, 2.0 * a.value);
}

#[test]
fn grid_same_point_is_zero() {
    let d = ChartDomain::cube(3, 1.0);
    let g = finsler_distance_grid(
        &Flat(3, 1.0),
        &d,
        &[0.2; 3],
        &[0.2; 3],
        0.1,
        Stencil::default(),
    )
    .unwrap();
    assert_eq!(g.value, 0.0);
}

#[test]
fn grid_decreases_under_refinement() {
    let d = ChartDomain::cube(2, 1.0);
    let (x, y) = ([-0.6, 0.2], [0.8, -0.3]);
    let mut last = f64::INFINITY;
    for h in [0.1, 0.05, 0.025] {
        let g = finsler_distance_grid(&Flat(2, 1.0), &d, &x, &y, h, Stencil::default()).unwrap();
        assert!(g.value <= last + 1e-12);
        last = g.value;
    }
}

#[test]
fn grid_rejects_bad_spacing() {
    let d = ChartDomain::cube(2, 1.0);
    assert!(finsler_distance_grid(
        &Flat(2, 1.0),
        &d,
        &[0.0, 0.0],
        &[0.5, 0.0],
        0.0,
        Stencil::default()
    )
    .is_err());
    assert!(finsler_distance_grid(
        &Flat(2, 1.0),
        &d,
        &[0.0, 0.0],
        &[0.5, 0.0],
        5.0,
        Stencil::default()
    )
    .is_err());
}

#[test]
fn convergence_for_euclidean_pair() {
    let s = gallery::euclidean(2).unwrap().structure;
    let d = ChartDomain::cube(2, 1.0);
    let (f1, f2) = (Flat(2, 0.9), Flat(2, 1.0));
    let fields: Vec<(usize, &dyn MetricField)> = vec![(1, &f1), (2, &f2)];
    let t = distance_convergence(
        &s,
        &fields,
        &[0.0, 0.0],
        &[0.5, 0.0],
        &d,
        0.05,
        Stencil::default(),
        &quick(),
    )
    .unwrap();
    assert!(t.monotone && t.below_cc);
    assert!((t.cc_upper - 0.5).abs() < 1e-3);
    assert!(t.final_gap.abs() < 1e-3);
    let csv = t.to_csv();
    assert!(csv.starts_with("n,value,error_bar,verdict\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(t.plot_data().lines().nth(2).unwrap().starts_with("2,"));
}

#[test]
fn convergence_same_point_all_zero() {
    let s = gallery::euclidean(2).unwrap().structure;
    let d = ChartDomain::cube(2, 1.0);
    let f = Flat(2, 1.0);
    let fields: Vec<(usize, &dyn MetricField)> = vec![(1, &f), (2, &f)];
    let t = distance_convergence(
        &s,
        &fields,
        &[0.3, 0.3],
        &[0.3, 0.3],
        &d,
        0.1,
        Stencil::default(),
        &quick(),
    )
    .unwrap();
    assert_eq!(t.cc_upper, 0.0);
    assert!(t.rows.iter().all(|r| r.value == 0.0));
}

#[test]
fn speed_on_straight_path() {
    let s = gallery::heisenberg().unwrap().structure;
    let p = integrate(&s, &[-0.5, 0.0, 0.0], &[vec![1.0, 0.0]]).unwrap();
    let rep = metric_speed_check(&s, &p, &[0.2, 0.6], &[1e-2], &quick()).unwrap();
    assert!(rep.max_rel_error(1e-2) <= 0.03, "{rep:?}");
}

#[test]
fn speed_on_constant_path() {
    let s = gallery::heisenberg().unwrap().structure;
    let p = integrate(&s, &[0.1, 0.1, 0.1], &[vec![0.0, 0.0]]).unwrap();
    let rep = metric_speed_check(&s, &p, &[0.3], &[1e-2], &quick()).unwrap();
    assert_eq!(rep.rows[0].quotient, 0.0);
    assert_eq!(rep.rows[0].speed, 0.0);
}

#[test]
fn differential_examples() {
    let s = gallery::heisenberg().unwrap().structure;
    let hx = horizontal_differential(&s, &scalar(3, &[1, 0, 0]), &[0.0; 3]).unwrap();
    assert!((hx.dual_norm - 1.0).abs() < 1e-12);
    let hz = horizontal_differential(&s, &scalar(3, &[0, 0, 1]), &[0.0; 3]).unwrap();
    assert!(hz.dual_norm.abs() < 1e-12);
    assert!(hz.maximizer.is_none());
    let g = gallery::grushin().unwrap().structure;
    for x0 in [0.5, -0.3, 0.9] {
        let hy = horizontal_differential(&g, &scalar(2, &[0, 1]), &[x0, 0.0]).unwrap();
        assert!((hy.dual_norm - x0.abs()).abs() < 1e-12);
    }
}

#[test]
fn differential_linf_fiber() {
    // Dual of ℓ∞ is ℓ¹: d(x+y) on span{X1, X2} at the origin has norm 2.
    let s = gallery::heisenberg_linf().unwrap().structure;
    let f = PolyField::new(
        3,
        vec![Polynomial::monomial(&[1, 0, 0], 1.0).add(&Polynomial::monomial(&[0, 1, 0], 1.0))],
    )
    .unwrap();
    let hd = horizontal_differential(&s, &f, &[0.0; 3]).unwrap();
    assert!((hd.dual_norm - 2.0).abs() < 1e-9);
}

#[test]
fn lip_examples() {
    let s = gallery::heisenberg().unwrap().structure;
    let cfg = CcConfig {
        k: 4,
        restarts: 1,
        ..CcConfig::default()
    };
    let r = lip_bound_check(&s, &scalar(3, &[1, 0, 0]), &[0.0; 3], 1e-3, 4, 0, &cfg).unwrap();
    assert!(r.pass && (r.lip_estimate - 1.0).abs() < 0.05, "{r:?}");
    let c = PolyField::new(3, vec![Polynomial::constant(3, 2.0)]).unwrap();
    let r = lip_bound_check(&s, &c, &[0.1, 0.0, 0.0], 1e-3, 4, 0, &cfg).unwrap();
    assert!(r.pass && r.dual_norm == 0.0 && r.lip_estimate == 0.0);
    let g = gallery::grushin().unwrap().structure;
    let r = lip_bound_check(&g, &scalar(2, &[0, 1]), &[0.5, 0.0], 1e-3, 4, 0, &cfg).unwrap();
    assert!(r.pass && (r.dual_norm - 0.5).abs() < 1e-12);
}

#[test]
fn parallelogram_examples() {
    let s = gallery::heisenberg_linf().unwrap().structure;
    let p = parallelogram_defect(&s, &[0.0; 3], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
    assert!((p.absolute - 2.0).abs() < 1e-9);
    let v = [0.3, -0.7, 0.0];
    assert!(
        parallelogram_defect(&s, &[0.0; 3], &v, &v)
            .unwrap()
            .absolute
            < 1e-12
    );
    assert!(parallelogram_defect(&s, &[0.0; 3], &[0.0, 0.0, 1.0], &v).is_err());
    for name in ["heisenberg", "grushin", "martinet", "euclidean"] {
        let s = gallery::builtin(name).unwrap().structure;
        assert!(
            parallelogram_check(&s, 200, 3).unwrap().max_relative_defect <= 1e-9,
            "{name}"
        );
    }
}

fn grushin_point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.5..0.5f64, 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn distance_symmetry_and_triangle(x in grushin_point(), y in grushin_point(), z in grushin_point()) {
        let s = gallery::grushin().unwrap().structure;
        let cfg = quick();
        let d = |a: &[f64], b: &[f64]| cc_distance_upper(&s, a, b, &cfg).unwrap();
        let (xy, yx) = (d(&x, &y), d(&y, &x));
        let slack = 2.0 * 0.02 * xy.value.max(yx.value) + 2.0 * cfg.endpoint_tol;
        prop_assert!((xy.value - yx.value).abs() <= slack, "{} vs {}", xy.value, yx.value);
        let (xz, zy) = (d(&x, &z), d(&z, &y));
        prop_assert!(xy.value <= xz.value + zy.value + 0.02 * xy.value + 2.0 * cfg.endpoint_tol);
        prop_assert!((cc_length(&s, &xy.path).unwrap() - xy.value).abs() <= 1e-9);
    }

    #[test]
    fn grid_below_cc_for_rho_minorant(x in grushin_point(), y in grushin_point()) {
        // |v_1| bounds ρ below on the Grushin plane.
        struct Horizontal;
        impl MetricField for Horizontal {
            fn dim(&self) -> usize { 2 }
            fn eval(&self, _x: &[f64], v: &[f64]) -> Result<f64> { Ok(v[0].abs()) }
        }
        let s = gallery::grushin().unwrap().structure;
        let cc = cc_distance_upper(&s, &x, &y, &quick()).unwrap();
        let g = finsler_distance_grid(&Horizontal, &s.domain, &x, &y, 0.05, Stencil::default()).unwrap();
        prop_assert!(cc.value >= g.value - g.error_bar);
    }
}

#[test]
fn field_helper_matches_generators() {
    let x1 = field(2, &[(0, &[0, 0], 1.0)]);
    assert_eq!(x1.eval(&[0.3, 0.4]).unwrap(), vec![1.0, 0.0]);
}
