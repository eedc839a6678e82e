//! Built-in reference structures and the values they are known to produce.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::smoothmap::{ChartDomain, PolyField, Polynomial};
use crate::structure::{FiberNorm, SubFinslerStructure};

/// How a reference value is known.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Basis {
    /// Follows from the definitions by inspection.
    Inspection,
    /// Computed by the named independent method.
    Oracle(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reference {
    pub quantity: String,
    pub value: f64,
    pub basis: Basis,
}

#[derive(Debug, Clone)]
pub struct GalleryEntry {
    pub name: String,
    pub structure: SubFinslerStructure,
    pub references: Vec<Reference>,
}

/// Names accepted by [`builtin`].
pub const NAMES: &[&str] = &[
    "euclidean",
    "heisenberg",
    "grushin",
    "martinet",
    "heisenberg_linf",
    "overdetermined_line",
];

fn reference(quantity: &str, value: f64, basis: Basis) -> Reference {
    Reference {
        quantity: quantity.into(),
        value,
        basis,
    }
}

fn oracle(s: &str) -> Basis {
    Basis::Oracle(s.into())
}

/// Vector field from `(component, exponents, coefficient)` triples.
pub fn field(n: usize, terms: &[(usize, &[u32], f64)]) -> PolyField {
    let mut entries = vec![Polynomial::zero(n); n];
    for (i, exps, c) in terms {
        entries[*i] = entries[*i].add(&Polynomial::monomial(exps, *c));
    }
    PolyField::new(n, entries).expect("consistent dimensions")
}

fn heisenberg_fields() -> Vec<PolyField> {
    vec![
        field(3, &[(0, &[0, 0, 0], 1.0), (2, &[0, 1, 0], -0.5)]),
        field(3, &[(1, &[0, 0, 0], 1.0), (2, &[1, 0, 0], 0.5)]),
    ]
}

/// ℝⁿ with the identity frame and the Euclidean fiber norm.
pub fn euclidean(n: usize) -> Result<GalleryEntry> {
    if n == 0 {
        return Err(Error::InvalidInput("euclidean needs n >= 1".into()));
    }
    let fields = (0..n)
        .map(|i| {
            let z = vec![0u32; n];
            field(n, &[(i, &z, 1.0)])
        })
        .collect();
    let s = SubFinslerStructure::new(
        format!("euclidean({n})"),
        ChartDomain::cube(n, 1.0),
        fields,
        FiberNorm::euclidean(n, n),
        1,
    )?;
    Ok(GalleryEntry {
        name: s.name.clone(),
        structure: s,
        references: vec![
            reference("hormander_step", 1.0, Basis::Inspection),
            reference("rank", n as f64, Basis::Inspection),
        ],
    })
}

pub fn heisenberg() -> Result<GalleryEntry> {
    let s = SubFinslerStructure::new(
        "heisenberg",
        ChartDomain::cube(3, 1.0),
        heisenberg_fields(),
        FiberNorm::euclidean(3, 2),
        2,
    )?;
    Ok(GalleryEntry {
        name: "heisenberg".into(),
        structure: s,
        references: vec![
            reference("d(0,(1,0,0))", 1.0, Basis::Inspection),
            reference(
                "d(0,(0,0,1))",
                2.0 * std::f64::consts::PI.sqrt(),
                oracle(
                    "Dido isoperimetric problem: the shortest loop enclosing area 1 is a circle",
                ),
            ),
            reference("hormander_step", 2.0, oracle("bracket table [X1,X2] = dz")),
        ],
    })
}

pub fn grushin() -> Result<GalleryEntry> {
    let s = SubFinslerStructure::new(
        "grushin",
        ChartDomain::cube(2, 1.0),
        vec![
            field(2, &[(0, &[0, 0], 1.0)]),
            field(2, &[(1, &[1, 0], 1.0)]),
        ],
        FiberNorm::euclidean(2, 2),
        2,
    )?;
    Ok(GalleryEntry {
        name: "grushin".into(),
        structure: s,
        references: vec![
            reference(
                "rank on {x=0}",
                1.0,
                oracle("columns (1,0), (0,x) inspected"),
            ),
            reference("d((0,0),(1,0))", 1.0, Basis::Inspection),
            reference(
                "rho((0.5,y),e2)",
                2.0,
                oracle("single-constraint minimum norm 1/|x|"),
            ),
            reference("hormander_step", 2.0, oracle("bracket table [X1,X2] = dy")),
        ],
    })
}

pub fn martinet() -> Result<GalleryEntry> {
    let s = SubFinslerStructure::new(
        "martinet",
        ChartDomain::cube(3, 1.0),
        vec![
            field(3, &[(0, &[0, 0, 0], 1.0)]),
            field(3, &[(1, &[0, 0, 0], 1.0), (2, &[2, 0, 0], 1.0)]),
        ],
        FiberNorm::euclidean(3, 2),
        3,
    )?;
    Ok(GalleryEntry {
        name: "martinet".into(),
        structure: s,
        references: vec![
            reference(
                "hormander_step on {x=0}",
                3.0,
                oracle("bracket table 2x dz, 2 dz"),
            ),
            reference(
                "hormander_step off {x=0}",
                2.0,
                oracle("bracket table 2x dz"),
            ),
        ],
    })
}

pub fn heisenberg_linf() -> Result<GalleryEntry> {
    let s = SubFinslerStructure::new(
        "heisenberg_linf",
        ChartDomain::cube(3, 1.0),
        heisenberg_fields(),
        FiberNorm::lp(3, 2, f64::INFINITY),
        2,
    )?;
    Ok(GalleryEntry {
        name: "heisenberg_linf".into(),
        structure: s,
        references: vec![reference(
            "parallelogram defect at 0, v=e1, w=e2",
            2.0,
            oracle("closed-form l-infinity preimages: rho(e1 +- e2) = 1"),
        )],
    })
}

pub fn overdetermined_line() -> Result<GalleryEntry> {
    let s = SubFinslerStructure::new(
        "overdetermined_line",
        ChartDomain::cube(1, 1.0),
        vec![field(1, &[(0, &[0], 1.0)]), field(1, &[(0, &[0], 1.0)])],
        FiberNorm::euclidean(1, 2),
        1,
    )?;
    Ok(GalleryEntry {
        name: "overdetermined_line".into(),
        structure: s,
        references: vec![reference(
            "rho(x,1)",
            std::f64::consts::FRAC_1_SQRT_2,
            oracle("pseudoinverse least-norm preimage (1/2, 1/2)"),
        )],
    })
}

/// Looks up a gallery entry. `euclidean` defaults to n = 2; `euclidean(n)`
/// and `euclidean:n` select the dimension.
pub fn builtin(name: &str) -> Result<GalleryEntry> {
    let name = name.trim();
    if let Some(rest) = name.strip_prefix("euclidean") {
        let digits = rest.trim_start_matches(['(', ':']).trim_end_matches(')');
        let n = if digits.is_empty() {
            2
        } else {
            digits
                .parse()
                .map_err(|_| Error::UnknownStructure(name.into()))?
        };
        return euclidean(n);
    }
    match name {
        "heisenberg" => heisenberg(),
        "grushin" => grushin(),
        "martinet" => martinet(),
        "heisenberg_linf" => heisenberg_linf(),
        "overdetermined_line" => overdetermined_line(),
        _ => Err(Error::UnknownStructure(name.into())),
    }
}
