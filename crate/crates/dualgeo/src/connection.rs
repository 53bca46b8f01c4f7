//! Nonlinear connections on the dual bundle, adapted frames, distinguished
//! linear connection coefficients, covariant derivatives of d-tensor fields,
//! and certification of the chart-change laws.

use crate::algebroid::AlgebroidSpec;
use crate::expr::{EvalError, Expr};
use crate::field::{deriv_field, expr_field, fn_field, zero_field, Field};
use crate::jet::{Jet, Point, MAX_ORDER};
use crate::linalg::{field_matrix_jets, inverse_field_matrix};
use crate::report::{CheckReport, ResidualTracker};
use crate::sample::Sampler;
use std::sync::Arc;

/// Nonlinear connection components `gamma[b][alpha]` (fiber index by frame
/// index), splitting the anchored tangent structure.
#[derive(Clone)]
pub struct NonlinearConnection {
    pub r: usize,
    pub p: usize,
    gamma: Vec<Field>,
}

impl NonlinearConnection {
    pub fn zero(r: usize, p: usize) -> NonlinearConnection {
        NonlinearConnection {
            r,
            p,
            gamma: vec![zero_field(); r * p],
        }
    }

    pub fn from_exprs(r: usize, p: usize, exprs: Vec<Expr>) -> NonlinearConnection {
        assert_eq!(exprs.len(), r * p);
        NonlinearConnection {
            r,
            p,
            gamma: exprs.into_iter().map(expr_field).collect(),
        }
    }

    pub fn from_fields(r: usize, p: usize, gamma: Vec<Field>) -> NonlinearConnection {
        assert_eq!(gamma.len(), r * p);
        NonlinearConnection { r, p, gamma }
    }

    pub fn gamma(&self, b: usize, alpha: usize) -> Field {
        self.gamma[b * self.p + alpha].clone()
    }
}

/// Action of the adapted frame on a scalar field: anchor derivatives along the
/// base plus connection-weighted momentum derivatives.
pub fn adapted_deriv(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    f: &Field,
    alpha: usize,
) -> Field {
    let m = spec.m;
    let rho: Vec<Field> = (0..m).map(|i| spec.rho_field(alpha, i)).collect();
    let gam: Vec<Field> = (0..conn.r).map(|b| conn.gamma(b, alpha)).collect();
    let f = f.clone();
    fn_field(move |pt: &Point, order: u8| {
        if order + 1 > MAX_ORDER {
            return Err(EvalError::Order {
                requested: order + 1,
                max: MAX_ORDER,
            });
        }
        let fj = f.jet(pt, order + 1)?;
        let mut acc = Jet::constant(pt.dim(), order, 0.0);
        for (i, r) in rho.iter().enumerate() {
            let rj = r.jet(pt, order)?;
            if rj.max_abs() == 0.0 {
                continue;
            }
            acc = acc.add(&rj.mul(&fj.derivative(i).expect("order checked")));
        }
        for (b, g) in gam.iter().enumerate() {
            let gj = g.jet(pt, order)?;
            if gj.max_abs() == 0.0 {
                continue;
            }
            acc = acc.add(&gj.mul(&fj.derivative(m + b).expect("order checked")));
        }
        Ok(acc)
    })
}

/// Momentum derivative, the action of the vertical frame.
pub fn vertical_deriv(m: usize, f: &Field, c: usize) -> Field {
    deriv_field(f.clone(), m + c)
}

/// Coefficients of the adapted momentum coframe along the horizontal coframe:
/// `-gamma[a][alpha]`. The vertical block is the identity by construction.
pub fn dual_adapted(conn: &NonlinearConnection) -> Vec<Field> {
    let mut out = Vec::with_capacity(conn.r * conn.p);
    for a in 0..conn.r {
        for al in 0..conn.p {
            out.push(crate::field::scale_field(conn.gamma(a, al), -1.0));
        }
    }
    out
}

/// The four coefficient families of a distinguished linear connection.
///
/// Storage layouts, all row-major with the upper index first:
/// `hh[alpha][beta][gamma]`, `hv[a][b][gamma]`, `vh[alpha][beta][c]`,
/// `vv[a][b][c]` where the last index is always the differentiation direction.
#[derive(Clone)]
pub struct Dlc {
    pub p: usize,
    pub r: usize,
    hh: Vec<Field>,
    hv: Vec<Field>,
    vh: Vec<Field>,
    vv: Vec<Field>,
}

impl Dlc {
    pub fn new(p: usize, r: usize, hh: Vec<Field>, hv: Vec<Field>, vh: Vec<Field>, vv: Vec<Field>) -> Dlc {
        assert_eq!(hh.len(), p * p * p);
        assert_eq!(hv.len(), r * r * p);
        assert_eq!(vh.len(), p * p * r);
        assert_eq!(vv.len(), r * r * r);
        Dlc { p, r, hh, hv, vh, vv }
    }

    pub fn zero(p: usize, r: usize) -> Dlc {
        Dlc::new(
            p,
            r,
            vec![zero_field(); p * p * p],
            vec![zero_field(); r * r * p],
            vec![zero_field(); p * p * r],
            vec![zero_field(); r * r * r],
        )
    }

    pub fn from_exprs(p: usize, r: usize, hh: Vec<Expr>, hv: Vec<Expr>, vh: Vec<Expr>, vv: Vec<Expr>) -> Dlc {
        Dlc::new(
            p,
            r,
            hh.into_iter().map(expr_field).collect(),
            hv.into_iter().map(expr_field).collect(),
            vh.into_iter().map(expr_field).collect(),
            vv.into_iter().map(expr_field).collect(),
        )
    }

    /// Berwald coefficients: momentum derivatives of the nonlinear connection
    /// in the fiber family, vanishing vertical families. The horizontal-frame
    /// family is populated with the positionally mapped copy only when the
    /// two ranks coincide and the caller asks for it.
    pub fn berwald(
        m: usize,
        conn: &NonlinearConnection,
        duplicate_horizontal: bool,
    ) -> Dlc {
        let (p, r) = (conn.p, conn.r);
        let mut hv = Vec::with_capacity(r * r * p);
        for a in 0..r {
            for b in 0..r {
                for g in 0..p {
                    hv.push(vertical_deriv(m, &conn.gamma(b, g), a));
                }
            }
        }
        let hh = if duplicate_horizontal && p == r {
            let mut hh = Vec::with_capacity(p * p * p);
            for a in 0..p {
                for b in 0..p {
                    for g in 0..p {
                        hh.push(vertical_deriv(m, &conn.gamma(b, g), a));
                    }
                }
            }
            hh
        } else {
            vec![zero_field(); p * p * p]
        };
        Dlc::new(p, r, hh, hv, vec![zero_field(); p * p * r], vec![zero_field(); r * r * r])
    }

    pub fn hh_f(&self, up: usize, low: usize, dir: usize) -> Field {
        self.hh[(up * self.p + low) * self.p + dir].clone()
    }

    pub fn hv_f(&self, up: usize, low: usize, dir: usize) -> Field {
        self.hv[(up * self.r + low) * self.p + dir].clone()
    }

    pub fn vh_f(&self, up: usize, low: usize, dir: usize) -> Field {
        self.vh[(up * self.p + low) * self.r + dir].clone()
    }

    pub fn vv_f(&self, up: usize, low: usize, dir: usize) -> Field {
        self.vv[(up * self.r + low) * self.r + dir].clone()
    }

    /// Evaluate all four families at a point.
    pub fn values_at(&self, pt: &Point) -> Result<DlcValues, EvalError> {
        Ok(DlcValues {
            hh: crate::field::values(&self.hh, pt)?,
            hv: crate::field::values(&self.hv, pt)?,
            vh: crate::field::values(&self.vh, pt)?,
            vv: crate::field::values(&self.vv, pt)?,
        })
    }
}

/// Plain values of the four families at one point, same layouts as [`Dlc`].
#[derive(Debug, Clone, PartialEq)]
pub struct DlcValues {
    pub hh: Vec<f64>,
    pub hv: Vec<f64>,
    pub vh: Vec<f64>,
    pub vv: Vec<f64>,
}

impl DlcValues {
    pub fn max_abs_diff(&self, other: &DlcValues) -> f64 {
        let d = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        d(&self.hh, &other.hh)
            .max(d(&self.hv, &other.hv))
            .max(d(&self.vh, &other.vh))
            .max(d(&self.vv, &other.vv))
    }
}

/// Index slot kinds of a d-tensor, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    UpH,
    UpV,
    DownH,
    DownV,
}

/// Valence of a d-tensor: counts of upper/lower horizontal and vertical slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Valence {
    pub up_h: usize,
    pub up_v: usize,
    pub down_h: usize,
    pub down_v: usize,
}

impl Valence {
    pub fn new(up_h: usize, up_v: usize, down_h: usize, down_v: usize) -> Valence {
        Valence {
            up_h,
            up_v,
            down_h,
            down_v,
        }
    }

    pub fn total(&self) -> usize {
        self.up_h + self.up_v + self.down_h + self.down_v
    }

    fn slots(&self) -> Vec<Slot> {
        let mut s = Vec::with_capacity(self.total());
        s.extend(std::iter::repeat_n(Slot::UpH, self.up_h));
        s.extend(std::iter::repeat_n(Slot::UpV, self.up_v));
        s.extend(std::iter::repeat_n(Slot::DownH, self.down_h));
        s.extend(std::iter::repeat_n(Slot::DownV, self.down_v));
        s
    }
}

/// Enumerate all multi-indices over the given slot sizes, row-major.
pub fn multi_indices(dims: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &d in dims {
        let mut next = Vec::with_capacity(out.len() * d);
        for idx in &out {
            for v in 0..d {
                let mut n = idx.clone();
                n.push(v);
                next.push(n);
            }
        }
        out = next;
    }
    out
}

/// Dense d-tensor of evaluable component fields.
#[derive(Clone)]
pub struct DTensor {
    pub valence: Valence,
    pub p: usize,
    pub r: usize,
    comps: Vec<Field>,
}

/// Valences are capped so the dense component grids stay small.
pub const MAX_VALENCE: usize = 4;

impl DTensor {
    pub fn new(valence: Valence, p: usize, r: usize, comps: Vec<Field>) -> DTensor {
        assert!(valence.total() <= MAX_VALENCE, "valence above engine cap");
        let expected: usize = valence
            .slots()
            .iter()
            .map(|s| match s {
                Slot::UpH | Slot::DownH => p,
                Slot::UpV | Slot::DownV => r,
            })
            .product();
        assert_eq!(comps.len(), expected);
        DTensor {
            valence,
            p,
            r,
            comps,
        }
    }

    pub fn scalar(p: usize, r: usize, f: Field) -> DTensor {
        DTensor::new(Valence::new(0, 0, 0, 0), p, r, vec![f])
    }

    /// The mixed horizontal Kronecker tensor (one upper, one lower frame slot).
    pub fn kronecker_h(p: usize, r: usize) -> DTensor {
        let mut comps = Vec::with_capacity(p * p);
        for i in 0..p {
            for j in 0..p {
                comps.push(crate::field::const_field(if i == j { 1.0 } else { 0.0 }));
            }
        }
        DTensor::new(Valence::new(1, 0, 1, 0), p, r, comps)
    }

    pub fn slot_dims(&self) -> Vec<usize> {
        self.valence
            .slots()
            .iter()
            .map(|s| match s {
                Slot::UpH | Slot::DownH => self.p,
                Slot::UpV | Slot::DownV => self.r,
            })
            .collect()
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        let dims = self.slot_dims();
        let mut f = 0;
        for (k, &i) in idx.iter().enumerate() {
            f = f * dims[k] + i;
        }
        f
    }

    pub fn comp(&self, idx: &[usize]) -> Field {
        self.comps[self.flat(idx)].clone()
    }

    pub fn comp_flat(&self, flat: usize) -> Field {
        self.comps[flat].clone()
    }

    pub fn len(&self) -> usize {
        self.comps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comps.is_empty()
    }

    pub fn values_at(&self, pt: &Point) -> Result<Vec<f64>, EvalError> {
        crate::field::values(&self.comps, pt)
    }

    /// Component-wise product tensor, slots of `self` before slots of `other`
    /// within each slot group.
    pub fn tensor_product(&self, other: &DTensor) -> DTensor {
        assert_eq!(self.p, other.p);
        assert_eq!(self.r, other.r);
        let valence = Valence::new(
            self.valence.up_h + other.valence.up_h,
            self.valence.up_v + other.valence.up_v,
            self.valence.down_h + other.valence.down_h,
            self.valence.down_v + other.valence.down_v,
        );
        let mut comps = Vec::new();
        let plan = [
            (0, self.valence.up_h, other.valence.up_h),
            (1, self.valence.up_v, other.valence.up_v),
            (2, self.valence.down_h, other.valence.down_h),
            (3, self.valence.down_v, other.valence.down_v),
        ];
        let dims: Vec<usize> = plan
            .iter()
            .flat_map(|(group, a, b)| {
                let size = if *group == 0 || *group == 2 { self.p } else { self.r };
                std::iter::repeat_n(size, a + b)
            })
            .collect();
        for idx in multi_indices(&dims) {
            // Split the combined index back into the two factor indices.
            let mut ia = Vec::new();
            let mut ib = Vec::new();
            let mut cursor = 0;
            for (_, a, b) in plan.iter() {
                ia.extend_from_slice(&idx[cursor..cursor + a]);
                ib.extend_from_slice(&idx[cursor + a..cursor + a + b]);
                cursor += a + b;
            }
            comps.push(crate::field::mul_fields(self.comp(&ia), other.comp(&ib)));
        }
        DTensor::new(valence, self.p, self.r, comps)
    }
}

fn contraction_terms(
    dlc: &Dlc,
    slots: &[Slot],
    idx: &[usize],
    dir: usize,
    horizontal: bool,
    t: &DTensor,
) -> Vec<(f64, Field, Field)> {
    let mut terms = Vec::new();
    for (s, kind) in slots.iter().enumerate() {
        let range = match kind {
            Slot::UpH | Slot::DownH => dlc.p,
            Slot::UpV | Slot::DownV => dlc.r,
        };
        for e in 0..range {
            let mut swapped = idx.to_vec();
            swapped[s] = e;
            let comp = t.comp(&swapped);
            let (sign, coeff) = match (kind, horizontal) {
                (Slot::UpH, true) => (1.0, dlc.hh_f(idx[s], e, dir)),
                (Slot::DownH, true) => (-1.0, dlc.hh_f(e, idx[s], dir)),
                (Slot::UpV, true) => (-1.0, dlc.hv_f(idx[s], e, dir)),
                (Slot::DownV, true) => (1.0, dlc.hv_f(e, idx[s], dir)),
                (Slot::UpH, false) => (1.0, dlc.vh_f(idx[s], e, dir)),
                (Slot::DownH, false) => (-1.0, dlc.vh_f(e, idx[s], dir)),
                (Slot::UpV, false) => (-1.0, dlc.vv_f(idx[s], e, dir)),
                (Slot::DownV, false) => (1.0, dlc.vv_f(e, idx[s], dir)),
            };
            terms.push((sign, coeff, comp));
        }
    }
    terms
}

fn combine(base: Field, terms: Vec<(f64, Field, Field)>) -> Field {
    fn_field(move |pt: &Point, order: u8| {
        let mut acc = base.jet(pt, order)?;
        for (sign, coeff, comp) in &terms {
            let c = coeff.jet(pt, order)?;
            if c.max_abs() == 0.0 {
                continue;
            }
            acc.add_scaled(*sign, &c.mul(&comp.jet(pt, order)?));
        }
        Ok(acc)
    })
}

/// Horizontal covariant derivative of a d-tensor in adapted direction `gamma`:
/// adapted-frame derivative of each component plus signed coefficient
/// contractions on every slot (upper frame and lower fiber slots positive,
/// lower frame and upper fiber slots negative).
pub fn h_cov_deriv(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    dlc: &Dlc,
    t: &DTensor,
    gamma: usize,
) -> DTensor {
    let slots = t.valence.slots();
    let mut comps = Vec::with_capacity(t.len());
    for idx in multi_indices(&t.slot_dims()) {
        let base = adapted_deriv(spec, conn, &t.comp(&idx), gamma);
        let terms = contraction_terms(dlc, &slots, &idx, gamma, true, t);
        comps.push(combine(base, terms));
    }
    DTensor::new(t.valence, t.p, t.r, comps)
}

/// Vertical covariant derivative in momentum direction `c`.
pub fn v_cov_deriv(spec: &AlgebroidSpec, dlc: &Dlc, t: &DTensor, c: usize) -> DTensor {
    let slots = t.valence.slots();
    let mut comps = Vec::with_capacity(t.len());
    for idx in multi_indices(&t.slot_dims()) {
        let base = vertical_deriv(spec.m, &t.comp(&idx), c);
        let terms = contraction_terms(dlc, &slots, &idx, c, false, t);
        comps.push(combine(base, terms));
    }
    DTensor::new(t.valence, t.p, t.r, comps)
}

/// Fibred chart transition: frame matrix `lambda[a'][a]`, momentum matrix
/// `m_mat[a][a']`, base Jacobian `base_jac[i'][i]`, all base-only expressions.
#[derive(Clone)]
pub struct ChartTransition {
    pub p: usize,
    pub r: usize,
    pub m: usize,
    lambda: Vec<Field>,
    m_mat: Vec<Field>,
    base_jac: Vec<Field>,
    lambda_inv: Vec<Field>,
    m_inv: Vec<Field>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TransitionError {
    #[error("transition block `{block}` must have {expected} entries, found {got}")]
    Shape {
        block: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("transition block `{block}` entry {index} references fiber coordinates")]
    UsesFiber { block: &'static str, index: usize },
}

impl ChartTransition {
    pub fn new(
        p: usize,
        r: usize,
        m: usize,
        lambda: Vec<Expr>,
        m_mat: Vec<Expr>,
        base_jac: Vec<Expr>,
    ) -> Result<ChartTransition, TransitionError> {
        let check = |block: &'static str, v: &[Expr], expected: usize| {
            if v.len() != expected {
                return Err(TransitionError::Shape {
                    block,
                    expected,
                    got: v.len(),
                });
            }
            for (i, e) in v.iter().enumerate() {
                if !e.is_base_only() {
                    return Err(TransitionError::UsesFiber { block, index: i });
                }
            }
            Ok(())
        };
        check("lambda", &lambda, p * p)?;
        check("m_mat", &m_mat, r * r)?;
        check("base_jacobian", &base_jac, m * m)?;
        let lambda_f: Vec<Field> = lambda.into_iter().map(expr_field).collect();
        let m_f: Vec<Field> = m_mat.into_iter().map(expr_field).collect();
        let base_f: Vec<Field> = base_jac.into_iter().map(expr_field).collect();
        let lambda_inv = inverse_field_matrix(lambda_f.clone(), p);
        let m_inv = inverse_field_matrix(m_f.clone(), r);
        Ok(ChartTransition {
            p,
            r,
            m,
            lambda: lambda_f,
            m_mat: m_f,
            base_jac: base_f,
            lambda_inv,
            m_inv,
        })
    }

    pub fn identity(p: usize, r: usize, m: usize) -> ChartTransition {
        let eye = |n: usize| {
            let mut v = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    v.push(Expr::constant(if i == j { 1.0 } else { 0.0 }));
                }
            }
            v
        };
        ChartTransition::new(p, r, m, eye(p), eye(r), eye(m)).unwrap()
    }

    /// Forward frame matrix entry, row `a'` (primed), column `a`.
    pub fn lambda_f(&self, ap: usize, a: usize) -> Field {
        self.lambda[ap * self.p + a].clone()
    }

    /// Inverse frame matrix entry, row `a`, column `a'`.
    pub fn lambda_inv_f(&self, a: usize, ap: usize) -> Field {
        self.lambda_inv[a * self.p + ap].clone()
    }

    /// Forward momentum matrix entry, row `a`, column `a'` (primed).
    pub fn m_f(&self, a: usize, ap: usize) -> Field {
        self.m_mat[a * self.r + ap].clone()
    }

    /// Inverse momentum matrix entry, row `a'` (primed), column `a`.
    pub fn m_inv_f(&self, ap: usize, a: usize) -> Field {
        self.m_inv[ap * self.r + a].clone()
    }

    /// Smallest of the three block determinant magnitudes at a point.
    pub fn min_abs_det(&self, pt: &Point) -> Result<f64, EvalError> {
        let mut min = f64::INFINITY;
        for (fields, n) in [(&self.lambda, self.p), (&self.m_mat, self.r), (&self.base_jac, self.m)] {
            let jets = field_matrix_jets(fields, n, pt, 0)?;
            let vals: Vec<Vec<f64>> = jets
                .iter()
                .map(|row| row.iter().map(|j| j.value()).collect())
                .collect();
            min = min.min(crate::linalg::det(&vals).abs());
        }
        Ok(min)
    }
}

/// Primed nonlinear connection components by the printed transformation law:
/// inverse-momentum-matrix derivative term plus the conjugated components.
pub fn transform_nlc_by_law(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    trans: &ChartTransition,
) -> Vec<Field> {
    let shared = Arc::new((spec.clone(), conn.clone(), trans.clone()));
    let (p, r, m) = (conn.p, conn.r, spec.m);
    let mut out = Vec::with_capacity(r * p);
    for bp in 0..r {
        for gp in 0..p {
            let shared = shared.clone();
            out.push(fn_field(move |pt: &Point, order: u8| {
                let (spec, conn, trans) = &*shared;
                let n = pt.dim();
                let rho = spec.rho_jets(pt, order)?;
                // Primed momenta p_{a'} = M^a_{a'} p_a.
                let mut pprime = Vec::with_capacity(r);
                for ap in 0..r {
                    let mut acc = Jet::constant(n, order, 0.0);
                    for a in 0..r {
                        let mj = trans.m_f(a, ap).jet(pt, order)?;
                        let pj = Jet::coordinate(n, order, m + a, pt.p[a]);
                        acc = acc.add(&mj.mul(&pj));
                    }
                    pprime.push(acc);
                }
                let mut total = Jet::constant(n, order, 0.0);
                for g in 0..p {
                    let li = trans.lambda_inv_f(g, gp).jet(pt, order)?;
                    if li.max_abs() == 0.0 {
                        continue;
                    }
                    let mut bracket = Jet::constant(n, order, 0.0);
                    for b in 0..r {
                        let mf = trans.m_f(b, bp).jet(pt, order)?;
                        if mf.max_abs() == 0.0 {
                            continue;
                        }
                        let mut inner = conn.gamma(b, g).jet(pt, order)?;
                        for i in 0..spec.m {
                            let rj = &rho[g * spec.m + i];
                            if rj.max_abs() == 0.0 {
                                continue;
                            }
                            for ap in 0..r {
                                let dm = trans
                                    .m_inv_f(ap, b)
                                    .jet(pt, order + 1)?
                                    .derivative(i)
                                    .expect("order below cap");
                                inner = inner.sub(&rj.mul(&dm).mul(&pprime[ap]));
                            }
                        }
                        bracket = bracket.add(&mf.mul(&inner));
                    }
                    total = total.add(&li.mul(&bracket));
                }
                Ok(total)
            }));
        }
    }
    out
}

/// Primed nonlinear connection components by pushing the adapted-frame anchor
/// image through the chart map and reading off the momentum components.
pub fn transform_nlc_geometric(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    trans: &ChartTransition,
) -> Vec<Field> {
    let shared = Arc::new((spec.clone(), conn.clone(), trans.clone()));
    let (p, r, m) = (conn.p, conn.r, spec.m);
    let mut out = Vec::with_capacity(r * p);
    for bp in 0..r {
        for gp in 0..p {
            let shared = shared.clone();
            out.push(fn_field(move |pt: &Point, order: u8| {
                let (spec, conn, trans) = &*shared;
                let n = pt.dim();
                let rho = spec.rho_jets(pt, order)?;
                let mut total = Jet::constant(n, order, 0.0);
                for g in 0..p {
                    let li = trans.lambda_inv_f(g, gp).jet(pt, order)?;
                    if li.max_abs() == 0.0 {
                        continue;
                    }
                    let mut bracket = Jet::constant(n, order, 0.0);
                    for i in 0..m {
                        let rj = &rho[g * m + i];
                        if rj.max_abs() == 0.0 {
                            continue;
                        }
                        for a in 0..r {
                            let dm = trans
                                .m_f(a, bp)
                                .jet(pt, order + 1)?
                                .derivative(i)
                                .expect("order below cap");
                            let pj = Jet::coordinate(n, order, m + a, pt.p[a]);
                            bracket = bracket.add(&rj.mul(&dm).mul(&pj));
                        }
                    }
                    for b in 0..r {
                        let mf = trans.m_f(b, bp).jet(pt, order)?;
                        if mf.max_abs() == 0.0 {
                            continue;
                        }
                        bracket = bracket.add(&mf.mul(&conn.gamma(b, g).jet(pt, order)?));
                    }
                    total = total.add(&li.mul(&bracket));
                }
                Ok(total)
            }));
        }
    }
    out
}

/// Compare the printed nonlinear-connection law against the direct chart push
/// at sampled points.
pub fn check_nlc_law(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    trans: &ChartTransition,
    samples: usize,
    seed: u64,
    tol: f64,
) -> CheckReport {
    let by_law = transform_nlc_by_law(spec, conn, trans);
    let direct = transform_nlc_geometric(spec, conn, trans);
    let mut sampler = Sampler::stream(spec.m, spec.r_rank, seed, "nlc-law");
    let mut tracker = ResidualTracker::new();
    let mut min_det = f64::INFINITY;
    let mut used = 0;
    let mut errors = 0;
    for _ in 0..samples {
        let pt = sampler.next_point();
        let mut step = || -> Result<f64, EvalError> {
            let d = trans.min_abs_det(&pt)?;
            for k in 0..by_law.len() {
                let a = by_law[k].jet(&pt, 0)?.value();
                let b = direct[k].jet(&pt, 0)?.value();
                tracker.update((a - b).abs(), &pt);
            }
            Ok(d)
        };
        match step() {
            Ok(d) => {
                min_det = min_det.min(d);
                used += 1;
            }
            Err(_) => errors += 1,
        }
    }
    let notes = format!(
        "law vs chart push; min |det| of transition blocks = {min_det:.3e}{}",
        if errors > 0 {
            format!("; {errors} point(s) failed to evaluate")
        } else {
            String::new()
        }
    );
    let mut rep = tracker.into_report("nlc-law", tol, used, notes);
    if errors > 0 || min_det < 1e-12 {
        rep.pass = false;
    }
    rep
}

/// Primed distinguished-connection families by the printed chart laws,
/// including the inhomogeneous adapted-frame derivative terms.
pub fn transform_dlc_by_law(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    dlc: &Dlc,
    trans: &ChartTransition,
) -> Dlc {
    let (p, r) = (dlc.p, dlc.r);
    let mut hh = Vec::with_capacity(p * p * p);
    for ap in 0..p {
        for bp in 0..p {
            for gp in 0..p {
                let mut terms: Vec<(f64, Field, Field)> = Vec::new();
                for al in 0..p {
                    for g in 0..p {
                        // Inhomogeneous term: adapted derivative of the
                        // inverse frame matrix entry.
                        let d = adapted_deriv(spec, conn, &trans.lambda_inv_f(al, bp), g);
                        let outer = crate::field::mul_fields(
                            trans.lambda_f(ap, al),
                            trans.lambda_inv_f(g, gp),
                        );
                        terms.push((1.0, outer.clone(), d));
                        for be in 0..p {
                            let coeff = crate::field::mul_fields(
                                outer.clone(),
                                trans.lambda_inv_f(be, bp),
                            );
                            terms.push((1.0, coeff, dlc.hh_f(al, be, g)));
                        }
                    }
                }
                hh.push(combine(zero_field(), terms));
            }
        }
    }
    let mut hv = Vec::with_capacity(r * r * p);
    for ap in 0..r {
        for bp in 0..r {
            for gp in 0..p {
                let mut terms: Vec<(f64, Field, Field)> = Vec::new();
                for a in 0..r {
                    for g in 0..p {
                        let d = adapted_deriv(spec, conn, &trans.m_f(a, bp), g);
                        let outer = crate::field::mul_fields(
                            trans.m_inv_f(ap, a),
                            trans.lambda_inv_f(g, gp),
                        );
                        terms.push((1.0, outer.clone(), d));
                        for b in 0..r {
                            let coeff =
                                crate::field::mul_fields(outer.clone(), trans.m_f(b, bp));
                            terms.push((1.0, coeff, dlc.hv_f(a, b, g)));
                        }
                    }
                }
                hv.push(combine(zero_field(), terms));
            }
        }
    }
    let mut vh = Vec::with_capacity(p * p * r);
    for ap in 0..p {
        for bp in 0..p {
            for cp in 0..r {
                let mut terms: Vec<(f64, Field, Field)> = Vec::new();
                for al in 0..p {
                    for be in 0..p {
                        for c in 0..r {
                            let coeff = crate::field::mul_fields(
                                crate::field::mul_fields(
                                    trans.lambda_f(ap, al),
                                    trans.lambda_inv_f(be, bp),
                                ),
                                trans.m_inv_f(cp, c),
                            );
                            terms.push((1.0, coeff, dlc.vh_f(al, be, c)));
                        }
                    }
                }
                vh.push(combine(zero_field(), terms));
            }
        }
    }
    let mut vv = Vec::with_capacity(r * r * r);
    for ap in 0..r {
        for bp in 0..r {
            for cp in 0..r {
                let mut terms: Vec<(f64, Field, Field)> = Vec::new();
                for a in 0..r {
                    for b in 0..r {
                        for c in 0..r {
                            let coeff = crate::field::mul_fields(
                                crate::field::mul_fields(
                                    trans.m_inv_f(ap, a),
                                    trans.m_f(b, bp),
                                ),
                                trans.m_inv_f(cp, c),
                            );
                            terms.push((1.0, coeff, dlc.vv_f(a, b, c)));
                        }
                    }
                }
                vv.push(combine(zero_field(), terms));
            }
        }
    }
    Dlc::new(p, r, hh, hv, vh, vv)
}

/// Berwald coefficients of the chart-pushed nonlinear connection: primed
/// momentum derivatives (inverse-momentum-matrix weighted) of the primed
/// components.
pub fn berwald_of_transformed(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    trans: &ChartTransition,
) -> Dlc {
    let (p, r, m) = (conn.p, conn.r, spec.m);
    let primed = transform_nlc_geometric(spec, conn, trans);
    let primed = Arc::new(primed);
    let mut hv = Vec::with_capacity(r * r * p);
    for ap in 0..r {
        for bp in 0..r {
            for gp in 0..p {
                let primed = primed.clone();
                let trans = trans.clone();
                hv.push(fn_field(move |pt: &Point, order: u8| {
                    let mut acc = Jet::constant(pt.dim(), order, 0.0);
                    let gamma = &primed[bp * p + gp];
                    let gj = gamma.jet(pt, order + 1)?;
                    for a in 0..r {
                        let mi = trans.m_inv_f(ap, a).jet(pt, order)?;
                        if mi.max_abs() == 0.0 {
                            continue;
                        }
                        acc = acc.add(&mi.mul(&gj.derivative(m + a).expect("order below cap")));
                    }
                    Ok(acc)
                }));
            }
        }
    }
    Dlc::new(
        p,
        r,
        vec![zero_field(); p * p * p],
        hv,
        vec![zero_field(); p * p * r],
        vec![zero_field(); r * r * r],
    )
}

/// Two-way chart-law check for the Berwald connection of `conn`: the printed
/// family laws against the connection rebuilt in the primed chart.
pub fn check_dlc_law(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    trans: &ChartTransition,
    samples: usize,
    seed: u64,
    tol: f64,
) -> CheckReport {
    let dlc = Dlc::berwald(spec.m, conn, false);
    let by_law = transform_dlc_by_law(spec, conn, &dlc, trans);
    let rebuilt = berwald_of_transformed(spec, conn, trans);
    let mut sampler = Sampler::stream(spec.m, spec.r_rank, seed, "dlc-law");
    let mut tracker = ResidualTracker::new();
    let mut used = 0;
    let mut errors = 0;
    for _ in 0..samples {
        let pt = sampler.next_point();
        match (by_law.values_at(&pt), rebuilt.values_at(&pt)) {
            (Ok(a), Ok(b)) => {
                tracker.update(a.max_abs_diff(&b), &pt);
                used += 1;
            }
            _ => errors += 1,
        }
    }
    let notes = format!(
        "printed family laws vs Berwald rebuilt in primed chart{}",
        if errors > 0 {
            format!("; {errors} point(s) failed to evaluate")
        } else {
            String::new()
        }
    );
    let mut rep = tracker.into_report("dlc-law", tol, used, notes);
    if errors > 0 {
        rep.pass = false;
    }
    rep
}
