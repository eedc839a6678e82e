use std::sync::Arc;

use ccml::finsler_seq::{
    assemble_f, assemble_sequence, convergence_probe, pou_weights, riemannian_variant,
    validate_sequence, CellGeom, PartitionOfUnity, SequenceConfig,
};
use ccml::gallery;
use ccml::smoothmap::{ChartDomain, PolyField};
use ccml::structure::{FiberNorm, SubFinslerStructure};
use nalgebra::SymmetricEigen;
use proptest::prelude::*;

fn cell(lo: &[f64], hi: &[f64], z: &[f64]) -> CellGeom {
    CellGeom::new(lo.to_vec(), hi.to_vec(), 0.3, z.to_vec()).unwrap()
}

#[test]
fn single_cell_weight_is_one() {
    let c = cell(&[-1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]);
    let pou = PartitionOfUnity::new(vec![c]).unwrap();
    for x in [[0.3, -0.9], [1.0, 1.0], [0.0, 0.0]] {
        assert_eq!(pou.weights(&x), vec![(0, 1.0)]);
    }
}

#[test]
fn two_cells_sum_to_one_and_fix_anchors() {
    let a = cell(&[-1.0], &[0.0], &[-0.5]);
    let b = cell(&[0.0], &[1.0], &[0.5]);
    let pou = PartitionOfUnity::new(vec![a, b]).unwrap();
    for i in 0..=200 {
        let x = -1.0 + i as f64 / 100.0;
        let s: f64 = pou.weights(&[x]).iter().map(|(_, w)| w).sum();
        assert!((s - 1.0).abs() <= 1e-12, "sum {s} at {x}");
    }
    for (i, z) in [(0, -0.5), (1, 0.5)] {
        let w = pou.weights(&[z]);
        let own: f64 = w.iter().filter(|(j, _)| *j == i).map(|(_, w)| *w).sum();
        assert!((own - 1.0).abs() <= 1e-10);
    }
}

#[test]
fn anchor_on_cell_boundary_is_rejected() {
    assert!(CellGeom::new(vec![0.0], vec![1.0], 0.3, vec![0.0]).is_err());
}

#[test]
fn anchor_inside_other_hole_is_rejected() {
    let a = cell(&[-1.0], &[0.5], &[0.2]);
    let b = cell(&[0.0], &[1.0], &[0.25]);
    assert!(PartitionOfUnity::new(vec![a, b]).is_err());
}

#[test]
fn grushin_cells_on_line_anchor_there() {
    let s = gallery::grushin().unwrap().structure;
    let f = assemble_f(Arc::new(s), 4, None, SequenceConfig::default()).unwrap();
    let mut on_line = 0;
    for y in [-0.95, -0.4, 0.0, 0.33, 0.8] {
        for c in f.cells_at(&[0.0, y]).unwrap() {
            let g = &c.geom;
            let diam = g
                .lower
                .iter()
                .zip(&g.upper)
                .map(|(a, b)| (b - a).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(diam < 0.25, "cell diameter {diam}");
            if g.lower[0] <= 0.0 && g.upper[0] >= 0.0 {
                assert!(
                    g.anchor[0].abs() < 1e-12,
                    "cell {:?}..{:?}",
                    g.lower,
                    g.upper
                );
                assert_eq!(c.local.rank(), 1);
                on_line += 1;
            }
        }
    }
    assert!(on_line >= 5);
}

#[test]
fn euclidean_anchors_are_centres() {
    let s = gallery::euclidean(2).unwrap().structure;
    let f = assemble_f(Arc::new(s), 2, None, SequenceConfig::default()).unwrap();
    for c in f.build_cover(10_000).unwrap() {
        for ((z, a), b) in c.anchor.iter().zip(&c.lower).zip(&c.upper) {
            assert!((z - 0.5 * (a + b)).abs() < 1e-12);
        }
    }
}

#[test]
fn single_cell_level_one() {
    let d = ChartDomain::cube(1, 0.4);
    let fields = vec![PolyField::constant(1, &[1.0])];
    let s = SubFinslerStructure::new("line", d, fields, FiberNorm::euclidean(1, 1), 1).unwrap();
    let f = assemble_f(Arc::new(s), 1, None, SequenceConfig::default()).unwrap();
    let cover = f.build_cover(10).unwrap();
    assert_eq!(cover.len(), 1);
    let v1 = f.value(&[0.0], &[1.0]).unwrap();
    assert_eq!(f.value(&[0.37], &[1.0]).unwrap(), v1);
}

#[test]
fn grushin_transverse_lower_bound() {
    let s = gallery::grushin().unwrap().structure;
    let fields = assemble_sequence(&s, 4, SequenceConfig::default()).unwrap();
    for y in [-0.7, -0.2, 0.0, 0.45, 0.9] {
        assert!(fields[3].value(&[0.0, y], &[0.0, 1.0]).unwrap() >= 4.0);
    }
}

#[test]
fn grushin_origin_column_diverges() {
    let s = gallery::grushin().unwrap().structure;
    let fields = assemble_sequence(&s, 4, SequenceConfig::default()).unwrap();
    let rows = convergence_probe(&s, &fields, &[(vec![0.0, 0.0], vec![0.0, 1.0])], 0.01).unwrap();
    assert!(rows[0].monotone);
    assert!(rows[0].profile_holds);
    for r in &rows[0].rows {
        assert!(r.value >= r.n as f64);
    }
}

#[test]
fn heisenberg_probe_increases_to_one() {
    let s = gallery::heisenberg().unwrap().structure;
    let fields = assemble_sequence(&s, 4, SequenceConfig::default()).unwrap();
    let rows =
        convergence_probe(&s, &fields, &[(vec![0.0; 3], vec![1.0, 0.0, 0.0])], 0.05).unwrap();
    let r = &rows[0];
    assert!(r.monotone);
    let gap = r.final_gap.unwrap();
    assert!(gap > 0.0 && gap <= 0.25, "gap {gap}");
}

#[test]
fn euclidean_sequence_validates() {
    let s = gallery::euclidean(2).unwrap().structure;
    let fields = assemble_sequence(&s, 6, SequenceConfig::default()).unwrap();
    let rep = validate_sequence(&s, &fields, 100, 0.05, 7).unwrap();
    assert!(rep.all_pass(), "{rep:?}");
    let rows = convergence_probe(&s, &fields, &[(vec![0.0, 0.0], vec![0.6, 0.8])], 0.05).unwrap();
    assert!(rows[0].final_gap.unwrap() <= 1.0 / 6.0);
}

#[test]
fn sandwich_failure_has_witness() {
    // Fields built for ρ = |v| checked against ρ = |v|/2.
    let s = gallery::euclidean(2).unwrap().structure;
    let fields = assemble_sequence(&s, 3, SequenceConfig::default()).unwrap();
    let halved = SubFinslerStructure::new(
        "half",
        s.domain.clone(),
        s.fields().to_vec(),
        FiberNorm::Hilbert {
            gram: PolyField::constant(2, &[0.25, 0.0, 0.0, 0.25]),
        },
        1,
    )
    .unwrap();
    let rep = validate_sequence(&halved, &fields, 20, 0.05, 1).unwrap();
    assert!(!rep.sandwich.pass);
    assert!(rep.sandwich.witness.is_some());
}

#[test]
fn riemannian_variant_is_quadratic() {
    let s = gallery::heisenberg().unwrap().structure;
    let g = riemannian_variant(&s, 3, SequenceConfig::default()).unwrap();
    let pts = [[0.1, -0.3, 0.5], [0.0, 0.0, 0.0], [-0.8, 0.6, -0.2]];
    for x in pts {
        for f in &g {
            let m = f.gram(&x).unwrap();
            assert!(SymmetricEigen::new(m.clone()).eigenvalues.min() > 0.0);
            assert!(f.value(&x, &[0.0, 0.0, 1.0]).unwrap() >= f.n as f64);
            let (v, w) = ([0.3, -0.2, 0.7], [-0.5, 0.1, 0.4]);
            let q = |u: [f64; 3]| f.value(&x, &u).unwrap().powi(2);
            let lhs = q([v[0] + w[0], v[1] + w[1], v[2] + w[2]])
                + q([v[0] - w[0], v[1] - w[1], v[2] - w[2]]);
            let rhs = 2.0 * (q(v) + q(w));
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }
    }
}

#[test]
fn riemannian_variant_needs_hilbert_fibers() {
    let s = gallery::heisenberg_linf().unwrap().structure;
    assert!(riemannian_variant(&s, 1, SequenceConfig::default()).is_err());
}

#[test]
fn level_zero_is_rejected() {
    let s = gallery::grushin().unwrap().structure;
    assert!(assemble_f(Arc::new(s), 0, None, SequenceConfig::default()).is_err());
}

#[test]
fn artifact_is_reproducible() {
    let s = gallery::grushin().unwrap().structure;
    let a = assemble_f(Arc::new(s.clone()), 2, None, SequenceConfig::default()).unwrap();
    let b = assemble_f(Arc::new(s), 2, None, SequenceConfig::default()).unwrap();
    a.build_cover(10_000).unwrap();
    b.build_cover(10_000).unwrap();
    let ja = serde_json::to_string(&a.to_artifact()).unwrap();
    assert_eq!(ja, serde_json::to_string(&b.to_artifact()).unwrap());
    let v: serde_json::Value = serde_json::from_str(&ja).unwrap();
    assert_eq!(v["n"], 2);
    assert!(v["cells"].as_array().unwrap().len() > 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overlapping_cells_sum_to_one(x in -1.0..1.0f64, y in -1.0..1.0f64) {
        let cells = [
            cell(&[-1.0, -1.0], &[0.0, 0.0], &[-0.5, -0.5]),
            cell(&[0.0, -1.0], &[1.0, 0.0], &[0.5, -0.5]),
            cell(&[-1.0, 0.0], &[0.0, 1.0], &[-0.5, 0.5]),
            cell(&[0.0, 0.0], &[1.0, 1.0], &[0.5, 0.5]),
        ];
        let refs: Vec<&CellGeom> = cells.iter().collect();
        let w = pou_weights(&refs, &[x, y]);
        prop_assert!(w.iter().all(|p| *p >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn level_values_are_norms(x in -1.0..1.0f64, y in -1.0..1.0f64, v in prop::collection::vec(-1.0..1.0f64, 2), w in prop::collection::vec(-1.0..1.0f64, 2), t in 0.1..10.0f64) {
        thread_local! {
            static F: Arc<ccml::finsler_seq::FinslerMetricField> = {
                let s = gallery::grushin().unwrap().structure;
                assemble_f(Arc::new(s), 2, None, SequenceConfig::default()).unwrap()
            };
        }
        F.with(|f| {
            let p = [x, y];
            let fv = f.value(&p, &v).unwrap();
            let tv = [t * v[0], t * v[1]];
            prop_assert!((f.value(&p, &tv).unwrap() - t * fv).abs() <= 1e-12 * (1.0 + t * fv));
            let sum = [v[0] + w[0], v[1] + w[1]];
            prop_assert!(f.value(&p, &sum).unwrap() <= fv + f.value(&p, &w).unwrap() + 1e-9);
            if v.iter().any(|c| c.abs() > 1e-6) {
                prop_assert!(fv > 0.0);
            }
            Ok(())
        })?;
    }
}
