//! Sections of the anchored tangent structure over the dual total space:
//! horizontal components along the pullback frame plus vertical components
//! along the momentum directions, their anchor images, bracket, and the
//! horizontal projection.

use crate::algebroid::{bracket_jets, AlgebroidSpec, Section};
use crate::expr::{EvalError, Expr};
use crate::field::{expr_field, fn_field, Field};
use crate::jet::{Jet, Point};
use crate::report::{CheckReport, ResidualTracker};
use crate::sample::Sampler;
use std::collections::HashMap;

/// Section with horizontal components `z` (rank `p`) and vertical components
/// `y` (rank `r`), all fields on the dual total space.
#[derive(Clone)]
pub struct TangentSection {
    pub z: Vec<Field>,
    pub y: Vec<Field>,
}

impl TangentSection {
    pub fn from_exprs(z: Vec<Expr>, y: Vec<Expr>) -> TangentSection {
        TangentSection {
            z: z.into_iter().map(expr_field).collect(),
            y: y.into_iter().map(expr_field).collect(),
        }
    }

    /// Horizontal basis section `(e_alpha, 0)`.
    pub fn horizontal_basis(p_rank: usize, r_rank: usize, alpha: usize) -> TangentSection {
        let mut z = vec![Expr::zero(); p_rank];
        z[alpha] = Expr::one();
        TangentSection::from_exprs(z, vec![Expr::zero(); r_rank])
    }

    /// Vertical basis section `(0, e^a)`.
    pub fn vertical_basis(p_rank: usize, r_rank: usize, a: usize) -> TangentSection {
        let mut y = vec![Expr::zero(); r_rank];
        y[a] = Expr::one();
        TangentSection::from_exprs(vec![Expr::zero(); p_rank], y)
    }

    fn jets(&self, pt: &Point, order: u8) -> Result<(Vec<Jet>, Vec<Jet>), EvalError> {
        let z = self
            .z
            .iter()
            .map(|f| f.jet(pt, order))
            .collect::<Result<_, _>>()?;
        let y = self
            .y
            .iter()
            .map(|f| f.jet(pt, order))
            .collect::<Result<_, _>>()?;
        Ok((z, y))
    }
}

/// Value of the anchor image of a tangent section at a point: a base velocity
/// `dx` and a momentum velocity `dp`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVectorValue {
    pub dx: Vec<f64>,
    pub dp: Vec<f64>,
}

/// Anchor image at a point: `dx^i = z^alpha rho_alpha^i`, `dp_a = y_a`.
pub fn anchor_image(
    spec: &AlgebroidSpec,
    section: &TangentSection,
    pt: &Point,
) -> Result<TangentVectorValue, EvalError> {
    let z = crate::field::values(&section.z, pt)?;
    let y = crate::field::values(&section.y, pt)?;
    let rho = spec.rho_jets(pt, 0)?;
    let dx = (0..spec.m)
        .map(|i| (0..spec.p_rank).map(|a| z[a] * rho[a * spec.m + i].value()).sum())
        .collect();
    Ok(TangentVectorValue { dx, dp: y })
}

/// Bracket at the jet level. Inputs one order above the requested output.
#[allow(clippy::too_many_arguments)]
pub fn tangent_bracket_jets(
    p_rank: usize,
    r_rank: usize,
    m: usize,
    rho: &[Jet],
    l: &[Jet],
    (z1, y1): (&[Jet], &[Jet]),
    (z2, y2): (&[Jet], &[Jet]),
    order: u8,
) -> (Vec<Jet>, Vec<Jet>) {
    let n = z1[0].nvars();
    let z = bracket_jets(p_rank, m, rho, l, z1, z2, order);
    // Vertical part: momentum components of the commutator of the two
    // anchored vector fields.
    let zt1: Vec<Jet> = z1.iter().map(|j| j.truncate(order)).collect();
    let zt2: Vec<Jet> = z2.iter().map(|j| j.truncate(order)).collect();
    let yt1: Vec<Jet> = y1.iter().map(|j| j.truncate(order)).collect();
    let yt2: Vec<Jet> = y2.iter().map(|j| j.truncate(order)).collect();
    let mut y = Vec::with_capacity(r_rank);
    for a in 0..r_rank {
        let mut w = Jet::constant(n, order, 0.0);
        // X1 applied to y2_a minus X2 applied to y1_a.
        for (zc, yc, target, sign) in [(&zt1, &yt1, y2, 1.0), (&zt2, &yt2, y1, -1.0)] {
            let mut app = Jet::constant(n, order, 0.0);
            for al in 0..p_rank {
                for i in 0..m {
                    let r = &rho[al * m + i];
                    if r.max_abs() == 0.0 {
                        continue;
                    }
                    let d = target[a].derivative(i).expect("input order above output");
                    app = app.add(&r.mul(&zc[al]).mul(&d));
                }
            }
            for b in 0..r_rank {
                let d = target[a]
                    .derivative(m + b)
                    .expect("input order above output");
                app = app.add(&yc[b].mul(&d));
            }
            w.add_scaled(sign, &app);
        }
        y.push(w);
    }
    (z, y)
}

/// Bracket of two tangent sections, as a section of evaluable fields.
pub fn bracket_tangent(
    spec: &AlgebroidSpec,
    s1: &TangentSection,
    s2: &TangentSection,
) -> TangentSection {
    let (p_rank, r_rank, m) = (spec.p_rank, spec.r_rank, spec.m);
    let spec = spec.clone();
    let shared = std::sync::Arc::new((spec, s1.clone(), s2.clone()));
    let component = |horizontal: bool, idx: usize| -> Field {
        let shared = shared.clone();
        fn_field(move |pt: &Point, order: u8| {
            let (spec, s1, s2) = &*shared;
            let rho = spec.rho_jets(pt, order)?;
            let l = spec.l_jets(pt, order)?;
            let j1 = s1.jets(pt, order + 1)?;
            let j2 = s2.jets(pt, order + 1)?;
            let (z, y) = tangent_bracket_jets(
                p_rank,
                r_rank,
                m,
                &rho,
                &l,
                (&j1.0, &j1.1),
                (&j2.0, &j2.1),
                order,
            );
            Ok(if horizontal {
                z[idx].clone()
            } else {
                y[idx].clone()
            })
        })
    };
    TangentSection {
        z: (0..p_rank).map(|g| component(true, g)).collect(),
        y: (0..r_rank).map(|a| component(false, a)).collect(),
    }
}

/// Horizontal projection: keep the pullback components, drop the vertical ones.
pub fn project_pi_bang(section: &TangentSection) -> Section {
    Section {
        comps: section.z.clone(),
    }
}

/// Generating family for the Jacobi check: horizontal and vertical basis
/// sections plus coordinate-weighted variants.
pub fn tangent_family(spec: &AlgebroidSpec) -> Vec<(Vec<Expr>, Vec<Expr>)> {
    let (p, r, m) = (spec.p_rank, spec.r_rank, spec.m);
    let mut fam = Vec::new();
    for a in 0..p {
        let mut z = vec![Expr::zero(); p];
        z[a] = Expr::one();
        fam.push((z, vec![Expr::zero(); r]));
    }
    for a in 0..r {
        let mut y = vec![Expr::zero(); r];
        y[a] = Expr::one();
        fam.push((vec![Expr::zero(); p], y));
    }
    for i in 0..m {
        for a in 0..p {
            let mut z = vec![Expr::zero(); p];
            z[a] = Expr::x(i);
            fam.push((z, vec![Expr::zero(); r]));
        }
    }
    for b in 0..r {
        for a in 0..r {
            let mut y = vec![Expr::zero(); r];
            y[a] = Expr::p(b);
            fam.push((vec![Expr::zero(); p], y));
        }
    }
    fam
}

/// Certify the Jacobi identity of the tangent bracket over the generating
/// family at sampled points.
pub fn check_tangent_jacobi(
    spec: &AlgebroidSpec,
    samples: usize,
    seed: u64,
    tol: f64,
) -> CheckReport {
    let (p, r, m) = (spec.p_rank, spec.r_rank, spec.m);
    let fam = tangent_family(spec);
    let triples = crate::algebroid::select_triples(fam.len(), 150);
    let mut sampler = Sampler::stream(spec.m, spec.r_rank, seed, "tangent-jacobi");
    let mut tracker = ResidualTracker::new();
    let mut errors = 0usize;
    let mut used = 0usize;
    for _ in 0..samples {
        let pt = sampler.next_point();
        let mut inner = || -> Result<(), EvalError> {
            let rho1 = spec.rho_jets(&pt, 1)?;
            let rho0: Vec<Jet> = rho1.iter().map(|j| j.truncate(0)).collect();
            let l1 = spec.l_jets(&pt, 1)?;
            let l0: Vec<Jet> = l1.iter().map(|j| j.truncate(0)).collect();
            let fam_jets: Vec<(Vec<Jet>, Vec<Jet>)> = fam
                .iter()
                .map(|(z, y)| {
                    let zj = z
                        .iter()
                        .map(|e| crate::expr::eval_jet(e, &pt, 2))
                        .collect::<Result<Vec<_>, _>>()?;
                    let yj = y
                        .iter()
                        .map(|e| crate::expr::eval_jet(e, &pt, 2))
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok((zj, yj))
                })
                .collect::<Result<_, EvalError>>()?;
            let mut cache: HashMap<(usize, usize), (Vec<Jet>, Vec<Jet>)> = HashMap::new();
            let pair = |a: usize,
                            b: usize,
                            cache: &mut HashMap<(usize, usize), (Vec<Jet>, Vec<Jet>)>|
             -> (Vec<Jet>, Vec<Jet>) {
                let key = (a.min(b), a.max(b));
                let w = cache
                    .entry(key)
                    .or_insert_with(|| {
                        let s1 = &fam_jets[key.0];
                        let s2 = &fam_jets[key.1];
                        tangent_bracket_jets(
                            p,
                            r,
                            m,
                            &rho1,
                            &l1,
                            (&s1.0, &s1.1),
                            (&s2.0, &s2.1),
                            1,
                        )
                    })
                    .clone();
                if a <= b {
                    w
                } else {
                    (
                        w.0.iter().map(|j| j.neg()).collect(),
                        w.1.iter().map(|j| j.neg()).collect(),
                    )
                }
            };
            for &(a, b, c) in &triples {
                let n = pt.dim();
                let mut tz = vec![Jet::constant(n, 0, 0.0); p];
                let mut ty = vec![Jet::constant(n, 0, 0.0); r];
                for (u, v, w) in [(a, b, c), (b, c, a), (c, a, b)] {
                    let uv = pair(u, v, &mut cache);
                    let wt = (
                        fam_jets[w].0.iter().map(|j| j.truncate(1)).collect::<Vec<_>>(),
                        fam_jets[w].1.iter().map(|j| j.truncate(1)).collect::<Vec<_>>(),
                    );
                    let out = tangent_bracket_jets(
                        p,
                        r,
                        m,
                        &rho0,
                        &l0,
                        (&uv.0, &uv.1),
                        (&wt.0, &wt.1),
                        0,
                    );
                    for (t, o) in tz.iter_mut().zip(out.0) {
                        *t = t.add(&o);
                    }
                    for (t, o) in ty.iter_mut().zip(out.1) {
                        *t = t.add(&o);
                    }
                }
                for t in tz.iter().chain(ty.iter()) {
                    tracker.update(t.value().abs(), &pt);
                }
            }
            Ok(())
        };
        match inner() {
            Ok(()) => used += 1,
            Err(_) => errors += 1,
        }
    }
    let notes = format!(
        "family={} triples={}{}",
        fam.len(),
        triples.len(),
        if errors > 0 {
            format!("; {errors} point(s) failed to evaluate")
        } else {
            String::new()
        }
    );
    let mut report = tracker.into_report("tangent-jacobi", tol, used, notes);
    if errors > 0 {
        report.pass = false;
    }
    report
}
