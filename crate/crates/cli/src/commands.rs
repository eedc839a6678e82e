//! Subcommand implementations. Each writes its CSV files into the output
//! directory and returns a verdict; printing is left to `main`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use ccml::cc_distance::{
    distance_convergence, integrate, metric_speed_check, parallelogram_check, parallelogram_defect,
    CcConfig, Stencil,
};
use ccml::distribution::{rank_radius, Radius};
use ccml::finsler_seq::{
    assemble_sequence, convergence_probe, horizontal_samples, validate_sequence, FinslerMetricField,
};
use ccml::norm_factory::MetricField;
use ccml::structure::{HormanderStep, SubFinslerStructure};
use ccml::{sampling, Error};
use nalgebra::DVector;
use rand::Rng;
use serde_json::json;

use crate::config::{build_builtin, RunConfig};
use crate::output::{cols, num, nums, pool_map, Csv};

pub enum Failure {
    Config(String),
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonConvergence { .. }
            | Error::ToleranceUnachievable { .. }
            | Error::AnchorFailure { .. }
            | Error::RefinementCap { .. }
            | Error::DegenerateGram { .. }
            | Error::LeftDomain { .. }
            | Error::Unreachable(_) => Failure::Numerical(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(format!("cannot write output: {e}"))
    }
}

pub struct Outcome {
    pub pass: bool,
    pub lines: Vec<String>,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub jobs: usize,
}

type Res = Result<Outcome, Failure>;

fn structure(ctx: &Ctx) -> Result<SubFinslerStructure, Failure> {
    ctx.cfg.structure().map_err(|e| Failure::Config(e.0))
}

/// Box corners and centre, then `count` Kronecker points.
fn sample_points(s: &SubFinslerStructure, count: usize) -> Vec<Vec<f64>> {
    let mut pts = s.validation_points();
    pts.truncate(1 + if s.n() <= 4 { 1 << s.n() } else { 0 });
    pts.extend(
        sampling::kronecker(s.n(), count, 0)
            .into_iter()
            .map(|u| s.domain.from_unit(&u)),
    );
    pts
}

fn step_label(st: &HormanderStep) -> String {
    match st {
        HormanderStep::Step(k) => k.to_string(),
        HormanderStep::Failure(k) => format!("none<={k}"),
    }
}

fn step_summary(steps: &[HormanderStep]) -> (bool, String) {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for st in steps {
        *counts.entry(step_label(st)).or_default() += 1;
    }
    let ok = steps.iter().all(|s| matches!(s, HormanderStep::Step(_)));
    let text = if counts.len() == 1 {
        format!("step {} everywhere", counts.keys().next().unwrap())
    } else {
        let parts: Vec<String> = counts
            .iter()
            .map(|(k, c)| format!("step {k} at {c} points"))
            .collect();
        format!("mixed steps: {}", parts.join(", "))
    };
    (ok, text)
}

fn hormander_table(
    s: &SubFinslerStructure,
    pts: &[Vec<f64>],
    step_max: usize,
) -> Result<(Csv, Vec<HormanderStep>), Failure> {
    let rep = s.check_hormander(pts, step_max.max(s.declared_step))?;
    let mut header = cols("x", s.n());
    header.push("step".into());
    let mut csv = Csv::new(&header);
    for (x, st) in &rep.points {
        let mut row = nums(x);
        row.push(step_label(st));
        csv.row(&row);
    }
    Ok((csv, rep.points.into_iter().map(|p| p.1).collect()))
}

pub fn info(ctx: &Ctx) -> Res {
    let s = structure(ctx)?;
    let p = &ctx.cfg.info;
    let pts = sample_points(&s, p.samples);
    let (hcsv, steps) = hormander_table(&s, &pts, p.step_max)?;
    hcsv.write(&ctx.out, "hormander.csv")?;
    let radii = pool_map(ctx.jobs, &pts, |x| rank_radius(&s, x, p.r_cap, p.grid_step));
    let mut header = cols("x", s.n());
    header.extend(["rank", "r_hat", "n", "member"].map(String::from));
    let mut csv = Csv::new(&header);
    let mut ranks: BTreeMap<usize, usize> = BTreeMap::new();
    for (x, r) in pts.iter().zip(radii) {
        let r = r?;
        *ranks.entry(r.rank).or_default() += 1;
        let r_hat = match r.r_hat {
            Radius::Finite(v) => v,
            Radius::Unbounded => f64::INFINITY,
        };
        for n in 1..=ctx.cfg.sequence.n_max {
            let mut row = nums(x);
            row.extend([
                r.rank.to_string(),
                num(r_hat),
                n.to_string(),
                (r_hat >= 1.0 / n as f64).to_string(),
            ]);
            csv.row(&row);
        }
    }
    csv.write(&ctx.out, "distribution.csv")?;
    let (ok, text) = step_summary(&steps);
    let rank_text: Vec<String> = ranks
        .iter()
        .map(|(k, c)| format!("rank {k} at {c}"))
        .collect();
    Ok(Outcome {
        pass: ok,
        lines: vec![
            format!(
                "structure {}: n = {}, d = {}, declared step {}",
                s.name,
                s.n(),
                s.d(),
                s.declared_step
            ),
            format!(
                "rank map over {} points: {}",
                pts.len(),
                rank_text.join(", ")
            ),
            format!("hormander: {text}"),
        ],
    })
}

pub fn hormander(ctx: &Ctx) -> Res {
    let s = structure(ctx)?;
    let pts = sample_points(&s, ctx.cfg.info.samples);
    let (csv, steps) = hormander_table(&s, &pts, ctx.cfg.info.step_max)?;
    csv.write(&ctx.out, "hormander.csv")?;
    let (ok, text) = step_summary(&steps);
    Ok(Outcome {
        pass: ok,
        lines: vec![format!("hormander {}: {text}", s.name)],
    })
}

pub fn norm(ctx: &Ctx) -> Res {
    let s = structure(ctx)?;
    if ctx.cfg.probes.is_empty() {
        return Err(Failure::Config(
            "config error at `probes`: at least one probe required".into(),
        ));
    }
    let mut header = cols("x", s.n());
    header.extend(cols("v", s.n()));
    header.extend(["rank", "horizontal", "rho"].map(String::from));
    let mut csv = Csv::new(&header);
    let mut lines = Vec::new();
    for p in &ctx.cfg.probes {
        let rho = s.horizontal_norm(&p.x, &p.v)?;
        let mut row = nums(&p.x);
        row.extend(nums(&p.v));
        row.extend([
            s.rank(&p.x).to_string(),
            rho.is_finite().to_string(),
            num(rho.as_f64()),
        ]);
        csv.row(&row);
        lines.push(format!("rho({:?}, {:?}) = {}", p.x, p.v, num(rho.as_f64())));
    }
    csv.write(&ctx.out, "norm.csv")?;
    Ok(Outcome { pass: true, lines })
}

fn sequence(
    ctx: &Ctx,
    s: &SubFinslerStructure,
    n_max: usize,
) -> Result<Vec<Arc<FinslerMetricField>>, Failure> {
    Ok(assemble_sequence(s, n_max, ctx.cfg.sequence.cover)?)
}

pub fn approx(ctx: &Ctx) -> Res {
    let s = structure(ctx)?;
    let q = &ctx.cfg.sequence;
    let fields = sequence(ctx, &s, q.n_max)?;
    let rep = validate_sequence(&s, &fields, q.samples, q.grid_step, ctx.cfg.seed)?;
    let mut csv = Csv::new(
        &[
            "item",
            "pass",
            "checked",
            "worst_margin",
            "witness_x",
            "witness_v",
        ]
        .map(String::from),
    );
    let items = [
        ("sandwich", &rep.sandwich),
        ("transverse", &rep.transverse),
        ("anchors", &rep.anchors),
        ("nearby_anchor", &rep.nearby_anchor),
    ];
    let mut lines = Vec::new();
    for (name, c) in items {
        let (wx, wv) = match &c.witness {
            Some((x, v)) => (nums(x).join(" "), nums(v).join(" ")),
            None => (String::new(), String::new()),
        };
        csv.row(&[
            name.into(),
            c.pass.to_string(),
            c.checked.to_string(),
            num(c.worst_margin),
            wx,
            wv,
        ]);
        lines.push(format!(
            "{name}: {} ({} checks, worst margin {})",
            verdict(c.pass),
            c.checked,
            num(c.worst_margin)
        ));
    }
    csv.write(&ctx.out, "approx.csv")?;

    let probes: Vec<(Vec<f64>, Vec<f64>)> = if ctx.cfg.probes.is_empty() {
        horizontal_samples(&s, 4, ctx.cfg.seed)?
    } else {
        ctx.cfg
            .probes
            .iter()
            .map(|p| (p.x.clone(), p.v.clone()))
            .collect()
    };
    let res = convergence_probe(&s, &fields, &probes, q.grid_step)?;
    let mut pcsv = Csv::new(&["probe", "n", "value", "rho", "lower_profile"].map(String::from));
    let mut probes_ok = true;
    for (i, r) in res.iter().enumerate() {
        for row in &r.rows {
            let lp = row.lower_profile.map(num).unwrap_or_default();
            pcsv.row(&[
                i.to_string(),
                row.n.to_string(),
                num(row.value),
                num(row.rho.as_f64()),
                lp,
            ]);
        }
        probes_ok &= r.monotone && r.profile_holds;
    }
    pcsv.write(&ctx.out, "probe.csv")?;
    lines.push(format!(
        "convergence probes: {} ({} probes)",
        verdict(probes_ok),
        res.len()
    ));
    let summary = json!({ "structure": s.name, "n_max": q.n_max, "report": rep, "probes": res });
    std::fs::write(
        ctx.out.join("approx.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    Ok(Outcome {
        pass: rep.all_pass() && probes_ok,
        lines,
    })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn cc_config(k: usize, restarts: usize) -> CcConfig {
    CcConfig {
        k,
        restarts,
        ..CcConfig::default()
    }
}

pub fn distance(ctx: &Ctx) -> Res {
    let s = structure(ctx)?;
    let p = &ctx.cfg.distance;
    if p.pairs.is_empty() {
        return Err(Failure::Config(
            "config error at `distance.pairs`: at least one pair required".into(),
        ));
    }
    let fields = sequence(ctx, &s, p.n_max)?;
    let dyn_fields: Vec<(usize, &dyn MetricField)> = fields
        .iter()
        .map(|f| (f.n, f.as_ref() as &dyn MetricField))
        .collect();
    let cfg = cc_config(p.k, p.restarts);
    let tables = pool_map(ctx.jobs, &p.pairs, |pair| {
        distance_convergence(
            &s,
            &dyn_fields,
            &pair.x,
            &pair.y,
            &s.domain,
            p.h,
            Stencil {
                radius: p.stencil_radius,
            },
            &cfg,
        )
    });
    let mut csv =
        Csv::new(&["pair", "n", "d_fn", "error_bar", "verdict", "d_cc_upper"].map(String::from));
    let (mut pass, mut lines) = (true, Vec::new());
    for (i, t) in tables.into_iter().enumerate() {
        let t = t?;
        for r in &t.rows {
            csv.row(&[
                i.to_string(),
                r.n.to_string(),
                num(r.value),
                num(r.error_bar),
                r.verdict.clone(),
                num(t.cc_upper),
            ]);
        }
        pass &= t.monotone && t.below_cc;
        let col: Vec<String> = t.rows.iter().map(|r| format!("{:.6}", r.value)).collect();
        lines.push(format!(
            "pair {i}: d_CC <= {:.6}; d_Fn = [{}]; monotone {}, below d_CC {}",
            t.cc_upper,
            col.join(", "),
            t.monotone,
            t.below_cc
        ));
    }
    csv.write(&ctx.out, "distance.csv")?;
    Ok(Outcome { pass, lines })
}

pub fn speed(ctx: &Ctx) -> Res {
    let s = structure(ctx)?;
    let p = &ctx.cfg.speed;
    let x0 =
        p.x0.clone()
            .unwrap_or_else(|| s.domain.from_unit(&vec![0.5; s.n()]));
    let controls = if p.controls.is_empty() {
        let mut u = vec![0.0; s.d()];
        u[0] = 0.5;
        vec![u]
    } else {
        p.controls.clone()
    };
    let path = integrate(&s, &x0, &controls)?;
    let rep = metric_speed_check(&s, &path, &p.t, &p.h, &cc_config(p.k, p.restarts))?;
    let mut csv = Csv::new(&["t", "h", "quotient", "speed", "rel_error"].map(String::from));
    let mut worst: f64 = 0.0;
    for r in &rep.rows {
        csv.row(&[
            num(r.t),
            num(r.h),
            num(r.quotient),
            num(r.speed),
            num(r.rel_error),
        ]);
        worst = worst.max(r.rel_error);
    }
    csv.write(&ctx.out, "speed.csv")?;
    let pass = worst <= p.tol;
    Ok(Outcome {
        pass,
        lines: vec![format!(
            "metric speed: {} (worst relative error {worst:.3e}, tolerance {})",
            verdict(pass),
            p.tol
        )],
    })
}

struct CheckRow {
    structure: String,
    check: &'static str,
    status: &'static str,
    detail: String,
}

fn row(
    s: &SubFinslerStructure,
    check: &'static str,
    status: &'static str,
    detail: String,
) -> CheckRow {
    CheckRow {
        structure: s.name.clone(),
        check,
        status,
        detail,
    }
}

fn pass_fail(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

/// Property suite of one structure.
fn suite(ctx: &Ctx, s: &SubFinslerStructure) -> Result<Vec<CheckRow>, Failure> {
    let p = &ctx.cfg.validate;
    let seed = ctx.cfg.seed;
    let mut out = Vec::new();

    let pts = sample_points(s, p.samples);
    let rep = s.check_hormander(&pts, s.declared_step)?;
    let ok = rep.all_within(s.declared_step);
    out.push(row(
        s,
        "hormander",
        pass_fail(ok),
        format!("max step {:?} at {} points", rep.max_step(), pts.len()),
    ));

    let mut rng = sampling::rng(seed);
    let (mut hom, mut tri) = (0.0f64, f64::NEG_INFINITY);
    for _ in 0..p.samples {
        let x = sampling::random_point(&mut rng, &s.domain.lower, &s.domain.upper);
        let psi = s.psi(&x);
        let a = DVector::from_vec((0..s.d()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = DVector::from_vec((0..s.d()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (v, w) = (&psi * a, &psi * b);
        let c = rng.gen_range(-3.0..3.0);
        let rv = s.horizontal_norm(&x, v.as_slice())?.as_f64();
        let rcv = s.horizontal_norm(&x, (&v * c).as_slice())?.as_f64();
        if rv > 0.0 {
            hom = hom.max((rcv - c.abs() * rv).abs() / (c.abs() * rv).max(1e-300));
        }
        let rw = s.horizontal_norm(&x, w.as_slice())?.as_f64();
        let rs = s.horizontal_norm(&x, (&v + &w).as_slice())?.as_f64();
        tri = tri.max(rs - rv - rw);
    }
    out.push(row(
        s,
        "homogeneity",
        pass_fail(hom <= 1e-8),
        format!("max relative defect {}", num(hom)),
    ));
    out.push(row(
        s,
        "triangle",
        pass_fail(tri <= 1e-8),
        format!("max excess {}", num(tri)),
    ));

    if s.is_sub_riemannian() {
        let r = parallelogram_check(s, p.samples, seed)?;
        out.push(row(
            s,
            "parallelogram",
            pass_fail(r.max_relative_defect <= 1e-9),
            format!("max relative defect {}", num(r.max_relative_defect)),
        ));
    } else {
        // Not Hilbertian: the identity must break at the axis pair.
        let x = s.domain.from_unit(&vec![0.5; s.n()]);
        let psi = s.psi(&x);
        let v = psi.column(0).into_owned();
        let w = psi.column(1.min(s.d() - 1)).into_owned();
        let d = parallelogram_defect(s, &x, v.as_slice(), w.as_slice())?;
        let status = if d.absolute > 1e-9 {
            "expected_fail"
        } else {
            "fail"
        };
        out.push(row(
            s,
            "parallelogram",
            status,
            format!("defect {} at the axis pair", num(d.absolute)),
        ));
    }

    let mut fails = 0;
    let n = s.n();
    for _ in 0..p.lsc_sequences {
        let x = sampling::random_point(&mut rng, &s.domain.lower, &s.domain.upper);
        let x: Vec<f64> = x.iter().map(|c| 0.8 * c).collect();
        let x = s.domain.clamp(&x);
        let dx = sampling::random_unit(&mut rng, n);
        let a: Vec<f64> = (0..s.d()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vel = |y: &[f64], t: f64| -> Vec<f64> {
            let c = DVector::from_vec(a.iter().map(|ai| ai + t).collect());
            (s.psi(y) * c).as_slice().to_vec()
        };
        let tail: Vec<(Vec<f64>, Vec<f64>)> = (1..=60)
            .map(|k| {
                let t = 0.5f64.powi(k);
                let xk = s.domain.clamp(
                    &x.iter()
                        .zip(&dx)
                        .map(|(a, b)| a + 0.1 * t * b)
                        .collect::<Vec<_>>(),
                );
                let vk = vel(&xk, t);
                (xk, vk)
            })
            .collect();
        if !s.lsc_probe(&tail, (&x, &vel(&x, 0.0)))? {
            fails += 1;
        }
    }
    out.push(row(
        s,
        "lsc",
        pass_fail(fails == 0),
        format!("{fails} failures in {} sequences", p.lsc_sequences),
    ));

    let fields = sequence(ctx, s, p.n_max)?;
    let rep = validate_sequence(
        s,
        &fields,
        p.samples.min(100),
        ctx.cfg.sequence.grid_step,
        seed,
    )?;
    for (name, c) in [
        ("sequence_sandwich", &rep.sandwich),
        ("sequence_transverse", &rep.transverse),
        ("sequence_anchors", &rep.anchors),
        ("sequence_nearby_anchor", &rep.nearby_anchor),
    ] {
        out.push(row(
            s,
            name,
            pass_fail(c.pass),
            format!("{} checks, worst margin {}", c.checked, num(c.worst_margin)),
        ));
    }
    Ok(out)
}

pub fn validate(ctx: &Ctx) -> Res {
    let structures: Vec<SubFinslerStructure> = if ctx.cfg.validate.gallery.is_empty() {
        vec![structure(ctx)?]
    } else {
        ctx.cfg
            .validate
            .gallery
            .iter()
            .map(|n| build_builtin(n).map_err(|e| Failure::Config(e.0)))
            .collect::<Result<_, _>>()?
    };
    let results = pool_map(ctx.jobs, &structures, |s| suite(ctx, s));
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let mut csv = Csv::new(&["structure", "check", "status", "detail"].map(String::from));
    let mut lines = Vec::new();
    for r in &rows {
        csv.row(&[
            r.structure.clone(),
            r.check.into(),
            r.status.into(),
            r.detail.replace(',', ";"),
        ]);
        lines.push(format!(
            "{} {}: {} ({})",
            r.structure, r.check, r.status, r.detail
        ));
    }
    csv.write(&ctx.out, "validate.csv")?;
    let pass = rows.iter().all(|r| r.status != "fail");
    let summary = json!({
        "pass": pass,
        "checks": rows.iter().map(|r| json!({"structure": r.structure, "check": r.check, "status": r.status, "detail": r.detail})).collect::<Vec<_>>(),
    });
    std::fs::write(
        ctx.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    Ok(Outcome { pass, lines })
}
