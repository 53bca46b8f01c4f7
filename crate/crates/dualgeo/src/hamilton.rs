//! Fiberwise fundamental functions on the dual bundle: momentum Hessians and
//! the metrics they induce, regularity and homogeneity certification, the
//! normal metric connection of Levi-Civita type, and the torsion-prescribed
//! family with torsion recovery.

use crate::algebroid::AlgebroidSpec;
use crate::connection::{adapted_deriv, Dlc, NonlinearConnection};
use crate::expr::{EvalError, Expr};
use crate::field::{deriv_field, expr_field, fn_field, Field};
use crate::jet::{Jet, Point};
use crate::linalg::{det, field_matrix_jets, inverse_field_matrix, sym_eigenvalues};
use crate::metric::PseudoMetric;
use crate::report::{CheckReport, ResidualTracker};
use crate::sample::Sampler;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FundamentalKind {
    Hamilton,
    Cartan,
}

/// A fundamental function on the dual total space. For the Cartan kind the
/// metric-generating energy is the square of the stored expression.
#[derive(Clone)]
pub struct HamiltonFunction {
    pub expr: Expr,
    pub kind: FundamentalKind,
    /// Emit half the momentum Hessian instead of the plain one.
    pub hessian_half: bool,
}

impl HamiltonFunction {
    pub fn hamilton(expr: Expr) -> HamiltonFunction {
        HamiltonFunction {
            expr,
            kind: FundamentalKind::Hamilton,
            hessian_half: false,
        }
    }

    pub fn cartan(expr: Expr) -> HamiltonFunction {
        HamiltonFunction {
            expr,
            kind: FundamentalKind::Cartan,
            hessian_half: false,
        }
    }

    /// The scalar whose momentum Hessian generates the fiber metric.
    pub fn energy(&self) -> Expr {
        match self.kind {
            FundamentalKind::Hamilton => self.expr.clone(),
            FundamentalKind::Cartan => Expr::Mul(vec![self.expr.clone(), self.expr.clone()]),
        }
    }

    /// Momentum Hessian entries as fields, `[a][b]` row-major.
    pub fn hessian_fields(&self, m: usize, r: usize) -> Vec<Field> {
        let energy = expr_field(self.energy());
        let mut out = Vec::with_capacity(r * r);
        for a in 0..r {
            for b in 0..r {
                let f = deriv_field(deriv_field(energy.clone(), m + a), m + b);
                out.push(if self.hessian_half {
                    crate::field::scale_field(f, 0.5)
                } else {
                    f
                });
            }
        }
        out
    }

    /// Momentum Hessian values at a point.
    pub fn hessian_at(&self, m: usize, r: usize, pt: &Point) -> Result<Vec<Vec<f64>>, EvalError> {
        let fields = self.hessian_fields(m, r);
        let jets = field_matrix_jets(&fields, r, pt, 0)?;
        Ok(jets
            .iter()
            .map(|row| row.iter().map(|j| j.value()).collect())
            .collect())
    }

    /// The block metric induced on the anchored tangent structure: the frame
    /// block is the inverse of the momentum Hessian, the fiber block the
    /// Hessian itself.
    pub fn induced_metric(&self, m: usize, r: usize) -> PseudoMetric {
        let g_v = self.hessian_fields(m, r);
        let g_h = inverse_field_matrix(g_v.clone(), r);
        PseudoMetric::from_blocks_with_inverses(r, r, g_h.clone(), g_v.clone(), g_v, g_h)
    }
}

/// Regularity: the momentum Hessian keeps full rank off the null section.
/// Passes when the smallest sampled `|det|` stays at or above `tol`.
pub fn check_regularity(
    h: &HamiltonFunction,
    m: usize,
    r: usize,
    samples: usize,
    seed: u64,
    tol: f64,
) -> CheckReport {
    let mut sampler = Sampler::stream(m, r, seed, "regularity");
    let mut min_det = f64::INFINITY;
    let mut worst = Point::new(Vec::new(), Vec::new());
    let mut used = 0;
    let mut errors = 0;
    for _ in 0..samples {
        let pt = sampler.next_point();
        match h.hessian_at(m, r, &pt) {
            Ok(hess) => {
                let d = det(&hess).abs();
                if d < min_det {
                    min_det = d;
                    worst = pt.clone();
                }
                used += 1;
            }
            Err(_) => errors += 1,
        }
    }
    let pass = errors == 0 && min_det >= tol;
    CheckReport {
        name: "regularity".into(),
        pass,
        max_residual: min_det,
        worst_point: worst,
        samples_used: used,
        notes: format!(
            "min |det| of the momentum Hessian; pass requires >= tol{}",
            if errors > 0 {
                format!("; {errors} point(s) failed to evaluate")
            } else {
                String::new()
            }
        ),
    }
}

/// Fiberwise positive 1-homogeneity, positivity, and positive-definiteness of
/// the squared-function Hessian at sampled points.
pub fn check_homogeneity(
    k: &HamiltonFunction,
    m: usize,
    r: usize,
    samples: usize,
    seed: u64,
    tol: f64,
) -> CheckReport {
    let mut sampler = Sampler::stream(m, r, seed, "homogeneity");
    let mut euler = ResidualTracker::new();
    let mut min_value = f64::INFINITY;
    let mut min_eig = f64::INFINITY;
    let mut used = 0;
    let mut errors = 0;
    for _ in 0..samples {
        let pt = sampler.next_point();
        let mut step = || -> Result<(), EvalError> {
            let j = crate::expr::eval_jet(&k.expr, &pt, 1)?;
            let mut radial = 0.0;
            for a in 0..r {
                radial += pt.p[a] * j.grad(m + a);
            }
            euler.update((radial - j.value()).abs(), &pt);
            min_value = min_value.min(j.value());
            let hess = k.hessian_at(m, r, &pt)?;
            let sym: Vec<Vec<f64>> = (0..r)
                .map(|i| (0..r).map(|jx| 0.5 * (hess[i][jx] + hess[jx][i])).collect())
                .collect();
            min_eig = min_eig.min(sym_eigenvalues(&sym)[0]);
            Ok(())
        };
        match step() {
            Ok(()) => used += 1,
            Err(_) => errors += 1,
        }
    }
    let pass = errors == 0 && euler.max < tol && min_value > 0.0 && min_eig > 0.0;
    let notes = format!(
        "euler residual max = {:.3e}; min value = {:.3e}; min Hessian eigenvalue = {:.3e}{}",
        euler.max,
        min_value,
        min_eig,
        if errors > 0 {
            format!("; {errors} point(s) failed to evaluate")
        } else {
            String::new()
        }
    );
    let mut rep = euler.into_report("homogeneity", tol, used, notes);
    rep.pass = pass;
    rep
}

/// Normal metric connection of Levi-Civita type for a fiber block `g_v`:
/// frame coefficients from adapted derivatives of the lowered block with the
/// structure-function corrections, vertical coefficients from the momentum
/// Christoffel symbols of `g_v`. Both frame/fiber family pairs coincide.
pub fn levi_civita_normal(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    g_v: &[Field],
) -> Dlc {
    assert_eq!(
        spec.p_rank, spec.r_rank,
        "normal connections need matching ranks"
    );
    let r = spec.r_rank;
    assert_eq!(g_v.len(), r * r);
    let g_v: Arc<Vec<Field>> = Arc::new(g_v.to_vec());
    let g_low: Arc<Vec<Field>> = Arc::new(inverse_field_matrix(g_v.as_ref().clone(), r));
    let ctx = Arc::new((spec.clone(), conn.clone()));
    let mut h = Vec::with_capacity(r * r * r);
    for a in 0..r {
        for b in 0..r {
            for c in 0..r {
                let g_v = g_v.clone();
                let g_low = g_low.clone();
                let ctx = ctx.clone();
                h.push(fn_field(move |pt: &Point, order: u8| {
                    let (spec, conn) = &*ctx;
                    let n = pt.dim();
                    let upper = field_matrix_jets(&g_v, r, pt, order)?;
                    let l = spec.l_jets(pt, order)?;
                    let low = |i: usize, j: usize| g_low[i * r + j].clone();
                    let mut acc = Jet::constant(n, order, 0.0);
                    for e in 0..r {
                        if upper[a][e].max_abs() == 0.0 {
                            continue;
                        }
                        let mut inner = adapted_deriv(spec, conn, &low(e, c), b)
                            .jet(pt, order)?
                            .add(&adapted_deriv(spec, conn, &low(b, e), c).jet(pt, order)?)
                            .sub(&adapted_deriv(spec, conn, &low(b, c), e).jet(pt, order)?);
                        for d in 0..r {
                            let l1 = &l[(d * r + b) * r + e];
                            if l1.max_abs() != 0.0 {
                                inner = inner.sub(&low(c, d).jet(pt, order)?.mul(l1));
                            }
                            let l2 = &l[(d * r + e) * r + c];
                            if l2.max_abs() != 0.0 {
                                inner = inner.add(&low(b, d).jet(pt, order)?.mul(l2));
                            }
                            let l3 = &l[(d * r + b) * r + c];
                            if l3.max_abs() != 0.0 {
                                inner = inner.sub(&low(e, d).jet(pt, order)?.mul(l3));
                            }
                        }
                        acc = acc.add(&upper[a][e].mul(&inner));
                    }
                    Ok(acc.scale(0.5))
                }));
            }
        }
    }
    let v = crate::metric::vertical_christoffel(spec.m, r, &g_v);
    Dlc::new(r, r, h.clone(), h, v.clone(), v)
}

/// Antisymmetric torsion prescriptions: `t[a][b][c]` skew in the last pair,
/// `s[a][c][b]` skew in the first (upper) pair.
#[derive(Clone)]
pub struct TorsionPrescription {
    pub r: usize,
    pub t: Vec<Field>,
    pub s: Vec<Field>,
}

impl TorsionPrescription {
    pub fn zero(r: usize) -> TorsionPrescription {
        TorsionPrescription {
            r,
            t: vec![crate::field::zero_field(); r * r * r],
            s: vec![crate::field::zero_field(); r * r * r],
        }
    }

    pub fn from_fields(r: usize, t: Vec<Field>, s: Vec<Field>) -> TorsionPrescription {
        assert_eq!(t.len(), r * r * r);
        assert_eq!(s.len(), r * r * r);
        TorsionPrescription { r, t, s }
    }

    pub fn t_f(&self, a: usize, b: usize, c: usize) -> Field {
        self.t[(a * self.r + b) * self.r + c].clone()
    }

    pub fn s_f(&self, a: usize, c: usize, b: usize) -> Field {
        self.s[(a * self.r + c) * self.r + b].clone()
    }

    /// Max violation of the two skew-symmetry requirements at a point.
    pub fn antisymmetry_residual(&self, pt: &Point) -> Result<f64, EvalError> {
        let mut res: f64 = 0.0;
        for a in 0..self.r {
            for b in 0..self.r {
                for c in 0..self.r {
                    let t1 = self.t_f(a, b, c).jet(pt, 0)?.value();
                    let t2 = self.t_f(a, c, b).jet(pt, 0)?.value();
                    res = res.max((t1 + t2).abs());
                    let s1 = self.s_f(a, c, b).jet(pt, 0)?.value();
                    let s2 = self.s_f(c, a, b).jet(pt, 0)?.value();
                    res = res.max((s1 + s2).abs());
                }
            }
        }
        Ok(res)
    }

    pub fn values_at(&self, pt: &Point) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
        Ok((
            crate::field::values(&self.t, pt)?,
            crate::field::values(&self.s, pt)?,
        ))
    }
}

/// Deform a normal connection so its recovered torsions equal the
/// prescription, keeping metric compatibility.
pub fn torsion_family(
    spec: &AlgebroidSpec,
    base: &Dlc,
    g_v: &[Field],
    p: &TorsionPrescription,
) -> Dlc {
    let r = spec.r_rank;
    let g_v: Arc<Vec<Field>> = Arc::new(g_v.to_vec());
    let g_low: Arc<Vec<Field>> = Arc::new(inverse_field_matrix(g_v.as_ref().clone(), r));
    let mut h = Vec::with_capacity(r * r * r);
    let mut v = Vec::with_capacity(r * r * r);
    for a in 0..r {
        for b in 0..r {
            for c in 0..r {
                let base_h = base.hv_f(a, b, c);
                let g_v2 = g_v.clone();
                let g_low2 = g_low.clone();
                let presc = p.clone();
                h.push(fn_field(move |pt: &Point, order: u8| {
                    let upper = field_matrix_jets(&g_v2, r, pt, order)?;
                    let lower = field_matrix_jets(&g_low2, r, pt, order)?;
                    let mut acc = base_h.jet(pt, order)?;
                    for e in 0..r {
                        for d in 0..r {
                            let mut combo = Jet::constant(pt.dim(), order, 0.0);
                            let t1 = presc.t_f(d, b, c).jet(pt, order)?;
                            if t1.max_abs() != 0.0 {
                                combo = combo.add(&lower[e][d].mul(&t1));
                            }
                            let t2 = presc.t_f(d, e, c).jet(pt, order)?;
                            if t2.max_abs() != 0.0 {
                                combo = combo.sub(&lower[b][d].mul(&t2));
                            }
                            let t3 = presc.t_f(d, b, e).jet(pt, order)?;
                            if t3.max_abs() != 0.0 {
                                combo = combo.add(&lower[c][d].mul(&t3));
                            }
                            if combo.max_abs() != 0.0 {
                                acc = acc.add(&upper[a][e].mul(&combo).scale(0.5));
                            }
                        }
                    }
                    Ok(acc)
                }));
                let base_v = base.vv_f(a, b, c);
                let g_v2 = g_v.clone();
                let g_low2 = g_low.clone();
                let presc = p.clone();
                v.push(fn_field(move |pt: &Point, order: u8| {
                    let upper = field_matrix_jets(&g_v2, r, pt, order)?;
                    let lower = field_matrix_jets(&g_low2, r, pt, order)?;
                    let mut acc = base_v.jet(pt, order)?;
                    for e in 0..r {
                        for d in 0..r {
                            let mut combo = Jet::constant(pt.dim(), order, 0.0);
                            let s1 = presc.s_f(a, c, d).jet(pt, order)?;
                            if s1.max_abs() != 0.0 {
                                combo = combo.add(&upper[e][d].mul(&s1));
                            }
                            let s2 = presc.s_f(e, c, d).jet(pt, order)?;
                            if s2.max_abs() != 0.0 {
                                combo = combo.sub(&upper[a][d].mul(&s2));
                            }
                            let s3 = presc.s_f(a, e, d).jet(pt, order)?;
                            if s3.max_abs() != 0.0 {
                                combo = combo.add(&upper[c][d].mul(&s3));
                            }
                            if combo.max_abs() != 0.0 {
                                acc = acc.add(&lower[b][e].mul(&combo).scale(0.5));
                            }
                        }
                    }
                    Ok(acc)
                }));
            }
        }
    }
    Dlc::new(r, r, h.clone(), h, v.clone(), v)
}

/// Recover the two torsion prescriptions of a normal connection: the skew
/// part of the fiber frame family corrected by the structure functions, and
/// the skew part of the fiber vertical family in its upper pair.
pub fn torsion_recover(spec: &AlgebroidSpec, dlc: &Dlc) -> TorsionPrescription {
    let r = spec.r_rank;
    let mut t = Vec::with_capacity(r * r * r);
    let mut s = Vec::with_capacity(r * r * r);
    for a in 0..r {
        for b in 0..r {
            for c in 0..r {
                let h1 = dlc.hv_f(a, b, c);
                let h2 = dlc.hv_f(a, c, b);
                let lf = spec.l_field(a, b, c);
                t.push(fn_field(move |pt: &Point, order: u8| {
                    let acc = h1.jet(pt, order)?.sub(&h2.jet(pt, order)?);
                    Ok(acc.add(&lf.jet(pt, order)?))
                }));
            }
        }
    }
    for a in 0..r {
        for c in 0..r {
            for b in 0..r {
                let v1 = dlc.vv_f(a, b, c);
                let v2 = dlc.vv_f(c, b, a);
                s.push(fn_field(move |pt: &Point, order: u8| {
                    Ok(v1.jet(pt, order)?.sub(&v2.jet(pt, order)?))
                }));
            }
        }
    }
    TorsionPrescription::from_fields(r, t, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, Dims};

    const D22: Dims = Dims { m: 2, r: 2 };

    fn round_norm_hamiltonian() -> HamiltonFunction {
        HamiltonFunction::hamilton(
            parse_expr("(* 0.5 (+ (* p1 p1) (* p2 p2)))", D22).unwrap(),
        )
    }

    fn exp_hamiltonian() -> HamiltonFunction {
        HamiltonFunction::hamilton(
            parse_expr(
                "(+ (* 0.5 (* (exp x1) (* p1 p1))) (* 0.5 (* (exp x2) (* p2 p2))))",
                D22,
            )
            .unwrap(),
        )
    }

    #[test]
    fn hessian_of_round_norm_is_identity() {
        let h = round_norm_hamiltonian();
        let pt = Point::new(vec![0.3, -0.9], vec![0.4, 0.8]);
        let m = h.hessian_at(2, 2, &pt).unwrap();
        assert_eq!(m, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn hessian_of_exp_hamiltonian() {
        let h = exp_hamiltonian();
        let pt = Point::new(vec![2.0_f64.ln(), 0.0], vec![0.5, 0.5]);
        let m = h.hessian_at(2, 2, &pt).unwrap();
        assert!((m[0][0] - 2.0).abs() < 1e-14);
        assert!((m[1][1] - 1.0).abs() < 1e-14);
        assert!(m[0][1].abs() < 1e-14);
    }

    #[test]
    fn cartan_square_hessian_of_round_norm() {
        let k = HamiltonFunction::cartan(parse_expr("(sqrt (+ (* p1 p1) (* p2 p2)))", D22).unwrap());
        let pt = Point::new(vec![0.0, 0.0], vec![0.6, -0.3]);
        let m = k.hessian_at(2, 2, &pt).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 2.0 } else { 0.0 };
                assert!((m[i][j] - want).abs() < 1e-12, "{i}{j} {}", m[i][j]);
            }
        }
    }

    #[test]
    fn hessian_half_flag_scales() {
        let mut h = round_norm_hamiltonian();
        h.hessian_half = true;
        let pt = Point::new(vec![0.0, 0.0], vec![1.0, 0.0]);
        let m = h.hessian_at(2, 2, &pt).unwrap();
        assert_eq!(m[0][0], 0.5);
    }

    #[test]
    fn regularity_pass_and_fail() {
        let rep = check_regularity(&round_norm_hamiltonian(), 2, 2, 30, 5, 1e-9);
        assert!(rep.pass);
        assert!((rep.max_residual - 1.0).abs() < 1e-12);

        // Antidiagonal Hessian has |det| = 1 and passes.
        let h = HamiltonFunction::hamilton(parse_expr("(* p1 p2)", D22).unwrap());
        let rep = check_regularity(&h, 2, 2, 30, 5, 1e-9);
        assert!(rep.pass);
        assert!((rep.max_residual - 1.0).abs() < 1e-12);

        // Degenerate direction fails.
        let h = HamiltonFunction::hamilton(parse_expr("(* 0.5 (* p1 p1))", D22).unwrap());
        let rep = check_regularity(&h, 2, 2, 10, 5, 1e-9);
        assert!(!rep.pass);
        assert_eq!(rep.max_residual, 0.0);
    }

    #[test]
    fn homogeneity_pass_and_fail() {
        let k = HamiltonFunction::cartan(parse_expr("(sqrt (+ (* p1 p1) (* p2 p2)))", D22).unwrap());
        let rep = check_homogeneity(&k, 2, 2, 40, 7, 1e-10);
        assert!(rep.pass, "{}", rep.notes);

        let k = HamiltonFunction::cartan(
            parse_expr("(sqrt (+ (* (exp x1) (* p1 p1)) (* (exp x2) (* p2 p2))))", D22).unwrap(),
        );
        let rep = check_homogeneity(&k, 2, 2, 40, 7, 1e-10);
        assert!(rep.pass, "{}", rep.notes);

        // Degree-two function fails the radial identity.
        let k = HamiltonFunction::cartan(parse_expr("(+ (* p1 p1) (* p2 p2))", D22).unwrap());
        let rep = check_homogeneity(&k, 2, 2, 20, 7, 1e-10);
        assert!(!rep.pass);
        assert!(rep.max_residual > 1e-3);
    }

    #[test]
    fn homogeneous_square_hessian_is_degree_zero() {
        let k = HamiltonFunction::cartan(
            parse_expr("(sqrt (+ (* (exp x1) (* p1 p1)) (* (exp x2) (* p2 p2))))", D22).unwrap(),
        );
        let mut sampler = Sampler::new(2, 2, 19);
        for _ in 0..20 {
            let pt = sampler.next_point();
            let scaled = Point::new(pt.x.clone(), pt.p.iter().map(|v| 2.0 * v).collect());
            let a = k.hessian_at(2, 2, &pt).unwrap();
            let b = k.hessian_at(2, 2, &scaled).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    assert!((a[i][j] - b[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn levi_civita_flat_identity_vanishes() {
        let spec = AlgebroidSpec::flat(2, 2);
        let conn = NonlinearConnection::zero(2, 2);
        let g = PseudoMetric::identity(2, 2);
        let dlc = levi_civita_normal(&spec, &conn, g.v_fields());
        let pt = Point::new(vec![0.4, 0.2], vec![0.7, 0.1]);
        let v = dlc.values_at(&pt).unwrap();
        for x in v.hh.iter().chain(&v.hv).chain(&v.vh).chain(&v.vv) {
            assert!(x.abs() < 1e-15);
        }
    }

    #[test]
    fn levi_civita_exp_block_spot_values() {
        // Fiber block diag(exp x1, exp x2): the only nonzero frame
        // coefficients are the diagonal ones, equal to -1/2.
        let spec = AlgebroidSpec::flat(2, 2);
        let conn = NonlinearConnection::zero(2, 2);
        let g_v: Vec<Field> = vec![
            expr_field(parse_expr("(exp x1)", D22).unwrap()),
            crate::field::zero_field(),
            crate::field::zero_field(),
            expr_field(parse_expr("(exp x2)", D22).unwrap()),
        ];
        let dlc = levi_civita_normal(&spec, &conn, &g_v);
        let mut sampler = Sampler::new(2, 2, 3);
        for _ in 0..10 {
            let pt = sampler.next_point();
            for a in 0..2 {
                for b in 0..2 {
                    for c in 0..2 {
                        let v = dlc.hv_f(a, b, c).jet(&pt, 0).unwrap().value();
                        let want = if a == b && b == c { -0.5 } else { 0.0 };
                        assert!((v - want).abs() < 1e-12, "h[{a}{b}{c}] = {v}");
                        let v = dlc.vv_f(a, b, c).jet(&pt, 0).unwrap().value();
                        assert!(v.abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn levi_civita_structure_terms_match_dense_oracle() {
        // Nonzero structure functions with a constant identity fiber block:
        // the frame coefficients reduce to structure-function combinations.
        let spec = AlgebroidSpec::so3();
        let conn = NonlinearConnection::zero(3, 3);
        let g = PseudoMetric::identity(3, 3);
        let dlc = levi_civita_normal(&spec, &conn, g.v_fields());
        let pt = Point::new(vec![0.1, -0.2, 0.5], vec![0.3, 0.4, 0.5]);
        let lv = |d: usize, b: usize, c: usize| {
            crate::expr::eval_jet(spec.l_expr(d, b, c), &pt, 0).unwrap().value()
        };
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    // Independent dense loop over the printed combination
                    // with unit metric: 1/2 (-L^c_{ba} + L^b_{ac} - L^a_{bc}).
                    let want = 0.5 * (-lv(c, b, a) + lv(b, a, c) - lv(a, b, c));
                    let got = dlc.hv_f(a, b, c).jet(&pt, 0).unwrap().value();
                    assert!((got - want).abs() < 1e-13, "{a}{b}{c}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn levi_civita_recovers_zero_torsion() {
        for (spec, g_v) in [
            (
                AlgebroidSpec::flat(2, 2),
                vec![
                    expr_field(parse_expr("(exp x1)", D22).unwrap()),
                    crate::field::zero_field(),
                    crate::field::zero_field(),
                    expr_field(parse_expr("(+ 1 (* 0.4 (* x2 x2)))", D22).unwrap()),
                ],
            ),
            (AlgebroidSpec::so3(), PseudoMetric::identity(3, 3).v_fields().to_vec()),
        ] {
            let conn = NonlinearConnection::zero(spec.r_rank, spec.p_rank);
            let dlc = levi_civita_normal(&spec, &conn, &g_v);
            let rec = torsion_recover(&spec, &dlc);
            let mut sampler = Sampler::new(spec.m, spec.r_rank, 11);
            for _ in 0..10 {
                let pt = sampler.next_point();
                let (t, s) = rec.values_at(&pt).unwrap();
                for v in t.iter().chain(&s) {
                    assert!(v.abs() < 1e-10, "residual {v}");
                }
            }
        }
    }

    #[test]
    fn torsion_round_trip() {
        let spec = AlgebroidSpec::flat(2, 2);
        let conn = NonlinearConnection::zero(2, 2);
        let g = PseudoMetric::identity(2, 2);
        let base = levi_civita_normal(&spec, &conn, g.v_fields());
        // T^1_{12} = -T^1_{21} = 1, S = 0; flat layout [a][b][c] with r = 2.
        let mut t = vec![Expr::zero(); 8];
        t[1] = Expr::one();
        t[2] = Expr::constant(-1.0);
        let p = TorsionPrescription::from_fields(
            2,
            t.into_iter().map(expr_field).collect(),
            vec![crate::field::zero_field(); 8],
        );
        let deformed = torsion_family(&spec, &base, g.v_fields(), &p);
        let rec = torsion_recover(&spec, &deformed);
        let pt = Point::new(vec![0.3, 0.4], vec![0.9, -0.2]);
        let (tv, sv) = rec.values_at(&pt).unwrap();
        let (want_t, want_s) = p.values_at(&pt).unwrap();
        for (a, b) in tv.iter().zip(&want_t) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in sv.iter().zip(&want_s) {
            assert!((a - b).abs() < 1e-12);
        }
        // Zero prescription returns the base connection.
        let same = torsion_family(&spec, &base, g.v_fields(), &TorsionPrescription::zero(2));
        let a = same.values_at(&pt).unwrap();
        let b = base.values_at(&pt).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn torsion_family_keeps_compatibility_for_constant_block() {
        let spec = AlgebroidSpec::so3();
        let conn = NonlinearConnection::zero(3, 3);
        let g = PseudoMetric::identity(3, 3);
        let base = levi_civita_normal(&spec, &conn, g.v_fields());
        let dims = spec.dims();
        let mut t = vec![Expr::zero(); 27];
        let mut s = vec![Expr::zero(); 27];
        // A few skew entries with base-point dependence; layouts [a][b][c]
        // and [a][c][b] with r = 3.
        let f = parse_expr("(* 0.3 x1)", dims).unwrap();
        t[3 * 3 + 2] = f.clone();
        t[(3 + 2) * 3] = Expr::Neg(Box::new(f.clone()));
        s[2 * 3 + 1] = f.clone();
        s[(2 * 3) * 3 + 1] = Expr::Neg(Box::new(f));
        let p = TorsionPrescription::from_fields(
            3,
            t.into_iter().map(expr_field).collect(),
            s.into_iter().map(expr_field).collect(),
        );
        let pt = Point::new(vec![0.5, 0.1, -0.4], vec![0.3, 0.7, 0.2]);
        assert!(p.antisymmetry_residual(&pt).unwrap() < 1e-15);
        let deformed = torsion_family(&spec, &base, g.v_fields(), &p);
        let rep = crate::metric::check_compatibility(&spec, &conn, &deformed, &g, 20, 13, 1e-9);
        assert!(rep.pass, "{} {}", rep.max_residual, rep.notes);
        // Round trip on the skewed instance.
        let rec = torsion_recover(&spec, &deformed);
        let (tv, sv) = rec.values_at(&pt).unwrap();
        let (want_t, want_s) = p.values_at(&pt).unwrap();
        for (a, b) in tv.iter().zip(&want_t).chain(sv.iter().zip(&want_s)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn induced_metric_blocks_are_mutual_inverses() {
        let h = exp_hamiltonian();
        let g = h.induced_metric(2, 2);
        let pt = Point::new(vec![0.3, -0.5], vec![0.8, 0.4]);
        let (h_inv, v_inv) = g.invert_at(&pt).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let gh = g.g_h_f(i, j).jet(&pt, 0).unwrap().value();
                let gv = g.g_v_f(i, j).jet(&pt, 0).unwrap().value();
                assert!((h_inv[i][j] - gv).abs() < 1e-12);
                assert!((v_inv[i][j] - gh).abs() < 1e-12);
            }
        }
    }
}
