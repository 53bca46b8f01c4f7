//! Anchored bracket structures: anchor components, structure functions, the
//! induced bracket on sections, and numerical certification of the bracket
//! axioms (antisymmetry of the structure functions, Jacobi, anchor
//! compatibility).
//!
//! Base-change morphisms are pre-composed into the anchor and structure
//! functions at construction time, so every computation below runs in a single
//! coordinate picture.

use crate::expr::{Dims, EvalError, Expr};
use crate::field::{expr_field, fn_field, Field};
use crate::jet::{Jet, Point};
use crate::report::{CheckReport, ResidualTracker};
use crate::sample::Sampler;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum Morphism {
    Identity,
    /// Component expressions in the base coordinates only.
    Components(Vec<Expr>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("anchor matrix must have {expected} entries, found {got}")]
    AnchorShape { expected: usize, got: usize },
    #[error("structure function array must have {expected} entries, found {got}")]
    StructureShape { expected: usize, got: usize },
    #[error("base morphism must have {expected} components, found {got}")]
    MorphismShape { expected: usize, got: usize },
    #[error("base morphism component {index} references fiber coordinates")]
    MorphismUsesFiber { index: usize },
}

/// Dimensions, anchor components, structure functions, and base morphisms.
#[derive(Clone)]
pub struct AlgebroidSpec {
    pub m: usize,
    pub p_rank: usize,
    pub r_rank: usize,
    rho: Vec<Expr>,
    l: Vec<Expr>,
    rho_fields: Vec<Field>,
    l_fields: Vec<Field>,
    pub h: Morphism,
    pub eta: Morphism,
}

impl AlgebroidSpec {
    /// Build a spec, pre-composing a non-identity base morphism `h` into the
    /// anchor and structure functions.
    pub fn new(
        m: usize,
        p_rank: usize,
        r_rank: usize,
        rho: Vec<Expr>,
        l: Vec<Expr>,
        h: Morphism,
        eta: Morphism,
    ) -> Result<AlgebroidSpec, SpecError> {
        if rho.len() != p_rank * m {
            return Err(SpecError::AnchorShape {
                expected: p_rank * m,
                got: rho.len(),
            });
        }
        if l.len() != p_rank * p_rank * p_rank {
            return Err(SpecError::StructureShape {
                expected: p_rank * p_rank * p_rank,
                got: l.len(),
            });
        }
        for mor in [&h, &eta] {
            if let Morphism::Components(comps) = mor {
                if comps.len() != m {
                    return Err(SpecError::MorphismShape {
                        expected: m,
                        got: comps.len(),
                    });
                }
                for (i, c) in comps.iter().enumerate() {
                    if !c.is_base_only() {
                        return Err(SpecError::MorphismUsesFiber { index: i });
                    }
                }
            }
        }
        let (rho, l) = match &h {
            Morphism::Identity => (rho, l),
            Morphism::Components(comps) => (
                rho.iter().map(|e| e.subst_x(comps)).collect(),
                l.iter().map(|e| e.subst_x(comps)).collect(),
            ),
        };
        let rho_fields = rho.iter().cloned().map(expr_field).collect();
        let l_fields = l.iter().cloned().map(expr_field).collect();
        Ok(AlgebroidSpec {
            m,
            p_rank,
            r_rank,
            rho,
            l,
            rho_fields,
            l_fields,
            h,
            eta,
        })
    }

    /// Flat structure in dimension `m`: identity anchor, vanishing structure
    /// functions, fiber rank `r`.
    pub fn flat(m: usize, r: usize) -> AlgebroidSpec {
        let mut rho = Vec::with_capacity(m * m);
        for a in 0..m {
            for i in 0..m {
                rho.push(Expr::constant(if a == i { 1.0 } else { 0.0 }));
            }
        }
        let l = vec![Expr::zero(); m * m * m];
        AlgebroidSpec::new(m, m, r, rho, l, Morphism::Identity, Morphism::Identity).unwrap()
    }

    /// Rank-3 structure with zero anchor and the alternating structure
    /// constants of the rotation algebra.
    pub fn so3() -> AlgebroidSpec {
        let m = 3;
        let p = 3;
        let rho = vec![Expr::zero(); p * m];
        let mut l = vec![Expr::zero(); p * p * p];
        let eps = |i: usize, j: usize, k: usize| -> f64 {
            match (i, j, k) {
                (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
                (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
                _ => 0.0,
            }
        };
        for g in 0..p {
            for a in 0..p {
                for b in 0..p {
                    let v = eps(a, b, g);
                    if v != 0.0 {
                        l[(g * p + a) * p + b] = Expr::constant(v);
                    }
                }
            }
        }
        AlgebroidSpec::new(m, p, 3, rho, l, Morphism::Identity, Morphism::Identity).unwrap()
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.m, self.r_rank)
    }

    pub fn rho_expr(&self, alpha: usize, i: usize) -> &Expr {
        &self.rho[alpha * self.m + i]
    }

    pub fn rho_field(&self, alpha: usize, i: usize) -> Field {
        self.rho_fields[alpha * self.m + i].clone()
    }

    pub fn l_expr(&self, gamma: usize, alpha: usize, beta: usize) -> &Expr {
        &self.l[(gamma * self.p_rank + alpha) * self.p_rank + beta]
    }

    pub fn l_field(&self, gamma: usize, alpha: usize, beta: usize) -> Field {
        self.l_fields[(gamma * self.p_rank + alpha) * self.p_rank + beta].clone()
    }

    /// Anchor jets at a point, indexed `[alpha * m + i]`.
    pub fn rho_jets(&self, pt: &Point, order: u8) -> Result<Vec<Jet>, EvalError> {
        self.rho_fields.iter().map(|f| f.jet(pt, order)).collect()
    }

    /// Structure function jets, indexed `[(gamma * p + alpha) * p + beta]`.
    pub fn l_jets(&self, pt: &Point, order: u8) -> Result<Vec<Jet>, EvalError> {
        self.l_fields.iter().map(|f| f.jet(pt, order)).collect()
    }
}

/// Induced action of sections on base functions: field handles for the
/// composed anchor components, indexed `[alpha * m + i]`.
pub fn theta(spec: &AlgebroidSpec) -> Vec<Field> {
    (0..spec.p_rank * spec.m)
        .map(|k| spec.rho_fields[k].clone())
        .collect()
}

/// A section of the anchored bundle, as evaluable component fields.
#[derive(Clone)]
pub struct Section {
    pub comps: Vec<Field>,
}

impl Section {
    pub fn from_exprs(exprs: Vec<Expr>) -> Section {
        Section {
            comps: exprs.into_iter().map(expr_field).collect(),
        }
    }

    /// Constant basis section `e_alpha`.
    pub fn basis(p_rank: usize, alpha: usize) -> Section {
        Section::from_exprs(
            (0..p_rank)
                .map(|k| Expr::constant(if k == alpha { 1.0 } else { 0.0 }))
                .collect(),
        )
    }

    pub fn values(&self, pt: &Point) -> Result<Vec<f64>, EvalError> {
        crate::field::values(&self.comps, pt)
    }

    pub fn jets(&self, pt: &Point, order: u8) -> Result<Vec<Jet>, EvalError> {
        self.comps.iter().map(|f| f.jet(pt, order)).collect()
    }
}

/// Bracket of component jet vectors. `u`, `v` must be one order above the
/// requested output order; anchor and structure jets at the output order.
pub fn bracket_jets(
    p_rank: usize,
    m: usize,
    rho: &[Jet],
    l: &[Jet],
    u: &[Jet],
    v: &[Jet],
    order: u8,
) -> Vec<Jet> {
    let n = u[0].nvars();
    let ut: Vec<Jet> = u.iter().map(|j| j.truncate(order)).collect();
    let vt: Vec<Jet> = v.iter().map(|j| j.truncate(order)).collect();
    let mut out = Vec::with_capacity(p_rank);
    for g in 0..p_rank {
        let mut w = Jet::constant(n, order, 0.0);
        for a in 0..p_rank {
            for b in 0..p_rank {
                let lj = &l[(g * p_rank + a) * p_rank + b];
                if lj.max_abs() == 0.0 {
                    continue;
                }
                w = w.add(&ut[a].mul(&vt[b]).mul(lj));
            }
        }
        // Anchor-derivative terms use base-coordinate derivatives only.
        let dv: Vec<Jet> = (0..m)
            .map(|i| v[g].derivative(i).expect("input order above output"))
            .collect();
        let du: Vec<Jet> = (0..m)
            .map(|i| u[g].derivative(i).expect("input order above output"))
            .collect();
        for a in 0..p_rank {
            for i in 0..m {
                let r = &rho[a * m + i];
                if r.max_abs() == 0.0 {
                    continue;
                }
                w = w.add(&r.mul(&ut[a]).mul(&dv[i]));
                w = w.sub(&r.mul(&vt[a]).mul(&du[i]));
            }
        }
        out.push(w);
    }
    out
}

/// Bracket of two sections, as a section of evaluable fields.
pub fn bracket_sections(spec: &AlgebroidSpec, u: &Section, v: &Section) -> Section {
    let p_rank = spec.p_rank;
    let m = spec.m;
    let rho_fields = spec.rho_fields.clone();
    let l_fields = spec.l_fields.clone();
    let comps = (0..p_rank)
        .map(|g| {
            let rho_fields = rho_fields.clone();
            let l_fields = l_fields.clone();
            let u = u.comps.clone();
            let v = v.comps.clone();
            fn_field(move |pt: &Point, order: u8| {
                let rho: Vec<Jet> = rho_fields
                    .iter()
                    .map(|f| f.jet(pt, order))
                    .collect::<Result<_, _>>()?;
                let l: Vec<Jet> = l_fields
                    .iter()
                    .map(|f| f.jet(pt, order))
                    .collect::<Result<_, _>>()?;
                let uj: Vec<Jet> = u
                    .iter()
                    .map(|f| f.jet(pt, order + 1))
                    .collect::<Result<_, _>>()?;
                let vj: Vec<Jet> = v
                    .iter()
                    .map(|f| f.jet(pt, order + 1))
                    .collect::<Result<_, _>>()?;
                let w = bracket_jets(p_rank, m, &rho, &l, &uj, &vj, order);
                Ok(w[g].clone())
            })
        })
        .collect();
    Section { comps }
}

/// The generating family used by the Jacobi check: constant basis sections and
/// coordinate-weighted basis sections `x^i e_alpha`.
pub fn section_family(spec: &AlgebroidSpec) -> Vec<Vec<Expr>> {
    let p = spec.p_rank;
    let mut fam = Vec::new();
    for a in 0..p {
        let mut comps = vec![Expr::zero(); p];
        comps[a] = Expr::one();
        fam.push(comps);
    }
    for i in 0..spec.m {
        for a in 0..p {
            let mut comps = vec![Expr::zero(); p];
            comps[a] = Expr::x(i);
            fam.push(comps);
        }
    }
    fam
}

/// Deterministic stride selection of index triples, capped for large families.
pub fn select_triples(count: usize, cap: usize) -> Vec<(usize, usize, usize)> {
    let mut all = Vec::new();
    for a in 0..count {
        for b in a + 1..count {
            for c in b + 1..count {
                all.push((a, b, c));
            }
        }
    }
    if all.len() <= cap {
        return all;
    }
    let stride = all.len().div_ceil(cap);
    all.into_iter().step_by(stride).collect()
}

struct AxiomResiduals {
    antisym: ResidualTracker,
    jacobi: ResidualTracker,
    anchor: ResidualTracker,
    point_errors: Vec<String>,
}

fn axioms_at_point(
    spec: &AlgebroidSpec,
    family: &[Vec<Expr>],
    triples: &[(usize, usize, usize)],
    pt: &Point,
    res: &mut AxiomResiduals,
) -> Result<(), EvalError> {
    let p = spec.p_rank;
    let m = spec.m;
    let l0 = spec.l_jets(pt, 0)?;
    for g in 0..p {
        for a in 0..p {
            for b in a..p {
                let s = l0[(g * p + a) * p + b].value() + l0[(g * p + b) * p + a].value();
                res.antisym.update(s.abs(), pt);
            }
        }
    }

    let rho1 = spec.rho_jets(pt, 1)?;
    let rho0: Vec<Jet> = rho1.iter().map(|j| j.truncate(0)).collect();
    for a in 0..p {
        for b in 0..p {
            for k in 0..m {
                let mut lhs = 0.0;
                for g in 0..p {
                    lhs += l0[(g * p + a) * p + b].value() * rho1[g * m + k].value();
                }
                let mut rhs = 0.0;
                for i in 0..m {
                    rhs += rho1[a * m + i].value() * rho1[b * m + k].grad(i);
                    rhs -= rho1[b * m + i].value() * rho1[a * m + k].grad(i);
                }
                res.anchor.update((lhs - rhs).abs(), pt);
            }
        }
    }

    let l1 = spec.l_jets(pt, 1)?;
    let rho1v = rho1;
    let fam_jets: Vec<Vec<Jet>> = family
        .iter()
        .map(|sec| {
            sec.iter()
                .map(|e| crate::expr::eval_jet(e, pt, 2))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let mut pair_cache: HashMap<(usize, usize), Vec<Jet>> = HashMap::new();
    let inner = |a: usize, b: usize, cache: &mut HashMap<(usize, usize), Vec<Jet>>| -> Vec<Jet> {
        let key = (a.min(b), a.max(b));
        let w = cache
            .entry(key)
            .or_insert_with(|| {
                bracket_jets(p, m, &rho1v, &l1, &fam_jets[key.0], &fam_jets[key.1], 1)
            })
            .clone();
        if a <= b {
            w
        } else {
            w.iter().map(|j| j.neg()).collect()
        }
    };
    for &(a, b, c) in triples {
        let mut total = vec![Jet::constant(pt.dim(), 0, 0.0); p];
        for (u, v, w) in [(a, b, c), (b, c, a), (c, a, b)] {
            let uv = inner(u, v, &mut pair_cache);
            let wt: Vec<Jet> = fam_jets[w].iter().map(|j| j.truncate(1)).collect();
            let out = bracket_jets(p, m, &rho0, &l0, &uv, &wt, 0);
            for (t, o) in total.iter_mut().zip(out) {
                *t = t.add(&o);
            }
        }
        for t in &total {
            res.jacobi.update(t.value().abs(), pt);
        }
    }
    Ok(())
}

/// Certify structure-function antisymmetry, the Jacobi identity on the
/// generating section family, and anchor compatibility at sampled points.
pub fn check_algebroid(spec: &AlgebroidSpec, samples: usize, seed: u64, tol: f64) -> CheckReport {
    let family = section_family(spec);
    let triples = select_triples(family.len(), 150);
    let mut sampler = Sampler::stream(spec.m, spec.r_rank, seed, "algebroid-axioms");
    let mut res = AxiomResiduals {
        antisym: ResidualTracker::new(),
        jacobi: ResidualTracker::new(),
        anchor: ResidualTracker::new(),
        point_errors: Vec::new(),
    };
    let mut used = 0;
    for _ in 0..samples {
        let pt = sampler.next_point();
        match axioms_at_point(spec, &family, &triples, &pt, &mut res) {
            Ok(()) => used += 1,
            Err(e) => res.point_errors.push(format!("{pt:?}: {e}")),
        }
    }
    let mut tracker = ResidualTracker::new();
    tracker.merge(&res.antisym);
    tracker.merge(&res.jacobi);
    tracker.merge(&res.anchor);
    let mut notes = format!(
        "antisymmetry={:.3e} jacobi={:.3e} anchor={:.3e} (triples={})",
        res.antisym.max,
        res.jacobi.max,
        res.anchor.max,
        triples.len()
    );
    if !res.point_errors.is_empty() {
        notes.push_str(&format!("; {} point(s) failed to evaluate", res.point_errors.len()));
    }
    let mut report = tracker.into_report("algebroid-axioms", tol, used, notes);
    if !res.point_errors.is_empty() {
        report.pass = false;
    }
    report
}
