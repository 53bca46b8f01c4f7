//! Block metrics on the anchored tangent structure: classification,
//! inversion, Obata projectors, the metric-compatible connection
//! constructions, and numerical certification of compatibility.

use crate::algebroid::AlgebroidSpec;
use crate::connection::{
    adapted_deriv, h_cov_deriv, v_cov_deriv, vertical_deriv, DTensor, Dlc, NonlinearConnection,
    Valence,
};
use crate::expr::{EvalError, Expr};
use crate::field::{expr_field, fn_field, zero_field, Field};
use crate::jet::{Jet, Point};
use crate::linalg::{cond_estimate, det, field_matrix_jets, inverse_field_matrix, sym_eigenvalues};
use crate::report::{CheckReport, ResidualTracker};
use crate::sample::Sampler;
use std::sync::Arc;
use thiserror::Error;

/// Determinant floor below which a metric block counts as degenerate.
pub const DET_FLOOR: f64 = 1e-10;
/// Condition-number level above which inversions carry a warning note.
pub const COND_WARN: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{block} block singular at sample (|det| = {det:.3e}, cond >= {cond:.3e})")]
    Singular {
        block: &'static str,
        det: f64,
        cond: f64,
    },
    #[error("metric block has {got} entries, expected {expected}")]
    Shape { expected: usize, got: usize },
}

/// Block metric: a frame block `g_h[alpha][beta]` and a fiber block
/// `g_v[a][b]`, with cached jet-capable inverse entries.
#[derive(Clone)]
pub struct PseudoMetric {
    pub p: usize,
    pub r: usize,
    g_h: Vec<Field>,
    g_v: Vec<Field>,
    g_h_inv: Vec<Field>,
    g_v_inv: Vec<Field>,
}

impl PseudoMetric {
    pub fn from_fields(p: usize, r: usize, g_h: Vec<Field>, g_v: Vec<Field>) -> Result<PseudoMetric, MetricError> {
        if g_h.len() != p * p {
            return Err(MetricError::Shape {
                expected: p * p,
                got: g_h.len(),
            });
        }
        if g_v.len() != r * r {
            return Err(MetricError::Shape {
                expected: r * r,
                got: g_v.len(),
            });
        }
        let g_h_inv = inverse_field_matrix(g_h.clone(), p);
        let g_v_inv = inverse_field_matrix(g_v.clone(), r);
        Ok(PseudoMetric {
            p,
            r,
            g_h,
            g_v,
            g_h_inv,
            g_v_inv,
        })
    }

    /// Blocks with caller-supplied inverse entries (used when one block is
    /// the inverse of the other by construction).
    pub fn from_blocks_with_inverses(
        p: usize,
        r: usize,
        g_h: Vec<Field>,
        g_v: Vec<Field>,
        g_h_inv: Vec<Field>,
        g_v_inv: Vec<Field>,
    ) -> PseudoMetric {
        PseudoMetric {
            p,
            r,
            g_h,
            g_v,
            g_h_inv,
            g_v_inv,
        }
    }

    pub fn from_exprs(p: usize, r: usize, g_h: Vec<Expr>, g_v: Vec<Expr>) -> Result<PseudoMetric, MetricError> {
        PseudoMetric::from_fields(
            p,
            r,
            g_h.into_iter().map(expr_field).collect(),
            g_v.into_iter().map(expr_field).collect(),
        )
    }

    pub fn identity(p: usize, r: usize) -> PseudoMetric {
        let eye = |n: usize| {
            let mut v = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    v.push(crate::field::const_field(if i == j { 1.0 } else { 0.0 }));
                }
            }
            v
        };
        PseudoMetric::from_fields(p, r, eye(p), eye(r)).unwrap()
    }

    pub fn g_h_f(&self, a: usize, b: usize) -> Field {
        self.g_h[a * self.p + b].clone()
    }

    pub fn g_v_f(&self, a: usize, b: usize) -> Field {
        self.g_v[a * self.r + b].clone()
    }

    pub fn g_h_inv_f(&self, a: usize, b: usize) -> Field {
        self.g_h_inv[a * self.p + b].clone()
    }

    pub fn g_v_inv_f(&self, a: usize, b: usize) -> Field {
        self.g_v_inv[a * self.r + b].clone()
    }

    pub fn h_fields(&self) -> &[Field] {
        &self.g_h
    }

    pub fn v_fields(&self) -> &[Field] {
        &self.g_v
    }

    fn block_values(fields: &[Field], n: usize, pt: &Point) -> Result<Vec<Vec<f64>>, EvalError> {
        let jets = field_matrix_jets(fields, n, pt, 0)?;
        Ok(jets
            .iter()
            .map(|row| row.iter().map(|j| j.value()).collect())
            .collect())
    }

    /// Numerically inverted blocks at a point; errors carry a condition
    /// estimate when a block determinant falls under the floor.
    pub fn invert_at(&self, pt: &Point) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), MetricError> {
        let check = |fields: &[Field], n: usize, block: &'static str| {
            let vals = Self::block_values(fields, n, pt).map_err(|_| MetricError::Singular {
                block,
                det: 0.0,
                cond: f64::INFINITY,
            })?;
            let d = det(&vals);
            if d.abs() < DET_FLOOR {
                return Err(MetricError::Singular {
                    block,
                    det: d,
                    cond: cond_estimate(&vals),
                });
            }
            crate::linalg::invert(&vals).map_err(|_| MetricError::Singular {
                block,
                det: d,
                cond: f64::INFINITY,
            })
        };
        Ok((
            check(&self.g_h, self.p, "frame")?,
            check(&self.g_v, self.r, "fiber")?,
        ))
    }

    /// Max symmetry defect of both blocks at a point.
    pub fn symmetry_residual_at(&self, pt: &Point) -> Result<f64, EvalError> {
        let h = Self::block_values(&self.g_h, self.p, pt)?;
        let v = Self::block_values(&self.g_v, self.r, pt)?;
        let mut res: f64 = 0.0;
        for (mat, n) in [(h, self.p), (v, self.r)] {
            for i in 0..n {
                for j in i + 1..n {
                    res = res.max((mat[i][j] - mat[j][i]).abs());
                }
            }
        }
        Ok(res)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockClass {
    Riemannian,
    Minkowski,
    General,
}

impl std::fmt::Display for BlockClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockClass::Riemannian => write!(f, "Riemannian"),
            BlockClass::Minkowski => write!(f, "Minkowski"),
            BlockClass::General => write!(f, "general"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Classification {
    pub h_block: BlockClass,
    pub v_block: BlockClass,
    /// Max momentum-derivative magnitudes per block.
    pub p_deriv: (f64, f64),
    /// Max base-derivative magnitudes per block.
    pub x_deriv: (f64, f64),
    /// Eigenvalue sign counts (neg, pos) per block; `None` when they varied
    /// across samples.
    pub h_signature: Option<(usize, usize)>,
    pub v_signature: Option<(usize, usize)>,
    pub min_abs_det: f64,
    pub max_cond: f64,
}

/// Per-block dependence classification from sampled first derivatives, plus
/// sampled signature and conditioning data.
pub fn classify(
    g: &PseudoMetric,
    m: usize,
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<Classification, EvalError> {
    let mut sampler = Sampler::stream(m, g.r, seed, "classify");
    let mut p_deriv = (0.0f64, 0.0f64);
    let mut x_deriv = (0.0f64, 0.0f64);
    let mut h_sig: Option<Option<(usize, usize)>> = None;
    let mut v_sig: Option<Option<(usize, usize)>> = None;
    let mut min_det = f64::INFINITY;
    let mut max_cond = 0.0f64;
    for _ in 0..samples.max(2) {
        let pt = sampler.next_point();
        for (fields, n, is_h) in [(&g.g_h, g.p, true), (&g.g_v, g.r, false)] {
            let jets = field_matrix_jets(fields, n, &pt, 1)?;
            let mut dp: f64 = 0.0;
            let mut dx: f64 = 0.0;
            for row in &jets {
                for j in row {
                    for i in 0..m {
                        dx = dx.max(j.grad(i).abs());
                    }
                    for a in 0..g.r {
                        dp = dp.max(j.grad(m + a).abs());
                    }
                }
            }
            let vals: Vec<Vec<f64>> = jets
                .iter()
                .map(|row| row.iter().map(|j| j.value()).collect())
                .collect();
            let sym: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| 0.5 * (vals[i][j] + vals[j][i])).collect())
                .collect();
            let eig = sym_eigenvalues(&sym);
            let neg = eig.iter().filter(|e| **e < 0.0).count();
            let pos = eig.len() - neg;
            min_det = min_det.min(det(&vals).abs());
            max_cond = max_cond.max(cond_estimate(&vals));
            let slot = if is_h { &mut h_sig } else { &mut v_sig };
            match slot {
                None => *slot = Some(Some((neg, pos))),
                Some(Some(sig)) if *sig != (neg, pos) => *slot = Some(None),
                _ => {}
            }
            if is_h {
                p_deriv.0 = p_deriv.0.max(dp);
                x_deriv.0 = x_deriv.0.max(dx);
            } else {
                p_deriv.1 = p_deriv.1.max(dp);
                x_deriv.1 = x_deriv.1.max(dx);
            }
        }
    }
    let label = |dp: f64, dx: f64| {
        if dp < tol {
            BlockClass::Riemannian
        } else if dx < tol {
            BlockClass::Minkowski
        } else {
            BlockClass::General
        }
    };
    Ok(Classification {
        h_block: label(p_deriv.0, x_deriv.0),
        v_block: label(p_deriv.1, x_deriv.1),
        p_deriv,
        x_deriv,
        h_signature: h_sig.flatten(),
        v_signature: v_sig.flatten(),
        min_abs_det: min_det,
        max_cond,
    })
}

struct Ctx {
    spec: AlgebroidSpec,
    conn: NonlinearConnection,
    g: PseudoMetric,
}

impl Ctx {
    fn adapted(&self, f: &Field, gamma: usize) -> Field {
        adapted_deriv(&self.spec, &self.conn, f, gamma)
    }
}

/// Frame-block Christoffel coefficients with structure-function corrections.
fn christoffel_h(ctx: &Arc<Ctx>) -> Vec<Field> {
    let p = ctx.g.p;
    let mut out = Vec::with_capacity(p * p * p);
    for al in 0..p {
        for be in 0..p {
            for ga in 0..p {
                let ctx = ctx.clone();
                out.push(fn_field(move |pt: &Point, order: u8| {
                    let n = pt.dim();
                    let p = ctx.g.p;
                    let ginv = {
                        let jets = field_matrix_jets(ctx.g.h_fields(), p, pt, order)?;
                        crate::linalg::invert_jets(&jets).map_err(singular_to_eval)?
                    };
                    let l = ctx.spec.l_jets(pt, order)?;
                    let mut acc = Jet::constant(n, order, 0.0);
                    for ep in 0..p {
                        if ginv[al][ep].max_abs() == 0.0 {
                            continue;
                        }
                        let mut inner = ctx
                            .adapted(&ctx.g.g_h_f(ep, be), ga)
                            .jet(pt, order)?
                            .add(&ctx.adapted(&ctx.g.g_h_f(ep, ga), be).jet(pt, order)?)
                            .sub(&ctx.adapted(&ctx.g.g_h_f(be, ga), ep).jet(pt, order)?);
                        for th in 0..p {
                            let l1 = &l[(th * p + ga) * p + be];
                            if l1.max_abs() != 0.0 {
                                inner = inner.add(&ctx.g.g_h_f(th, ep).jet(pt, order)?.mul(l1));
                            }
                            let l2 = &l[(th * p + ga) * p + ep];
                            if l2.max_abs() != 0.0 {
                                inner = inner.sub(&ctx.g.g_h_f(be, th).jet(pt, order)?.mul(l2));
                            }
                            let l3 = &l[(th * p + be) * p + ep];
                            if l3.max_abs() != 0.0 {
                                inner = inner.sub(&ctx.g.g_h_f(th, ga).jet(pt, order)?.mul(l3));
                            }
                        }
                        acc = acc.add(&ginv[al][ep].mul(&inner));
                    }
                    Ok(acc.scale(0.5))
                }));
            }
        }
    }
    out
}

/// Fiber-block vertical Christoffel coefficients for an upper-index block
/// `g_v` with the given inverse entries, stored `[a][b][c]` like the vertical
/// family of a [`Dlc`].
pub(crate) fn vertical_christoffel(m: usize, r: usize, g_v: &[Field]) -> Vec<Field> {
    let g_v: Arc<Vec<Field>> = Arc::new(g_v.to_vec());
    let mut out = Vec::with_capacity(r * r * r);
    for a in 0..r {
        for b in 0..r {
            for c in 0..r {
                let g_v = g_v.clone();
                out.push(fn_field(move |pt: &Point, order: u8| {
                    let n = pt.dim();
                    let ginv = {
                        let jets = field_matrix_jets(&g_v, r, pt, order)?;
                        crate::linalg::invert_jets(&jets).map_err(singular_to_eval)?
                    };
                    let gf = |i: usize, j: usize| g_v[i * r + j].clone();
                    let mut acc = Jet::constant(n, order, 0.0);
                    for e in 0..r {
                        if ginv[b][e].max_abs() == 0.0 {
                            continue;
                        }
                        let inner = vertical_deriv(m, &gf(e, a), c)
                            .jet(pt, order)?
                            .add(&vertical_deriv(m, &gf(e, c), a).jet(pt, order)?)
                            .sub(&vertical_deriv(m, &gf(a, c), e).jet(pt, order)?);
                        acc = acc.add(&ginv[b][e].mul(&inner));
                    }
                    Ok(acc.scale(0.5))
                }));
            }
        }
    }
    out
}

/// Fiber-block vertical Christoffel coefficients.
fn christoffel_v(ctx: &Arc<Ctx>) -> Vec<Field> {
    vertical_christoffel(ctx.spec.m, ctx.g.r, ctx.g.v_fields())
}

fn singular_to_eval(e: crate::linalg::LinalgError) -> EvalError {
    EvalError::Domain {
        source: crate::jet::JetError::Domain {
            op: "matrix inverse",
            value: match e {
                crate::linalg::LinalgError::Singular { det, .. } => det,
            },
        },
        subexpr: "metric block".into(),
    }
}

/// Covariant derivative of the fiber block along the adapted frame with a
/// starting fiber family: `delta_gamma g^{ea} - H0^e_{d gamma} g^{da} - H0^a_{d gamma} g^{ed}`.
fn ring_h_of_v_block(ctx: &Arc<Ctx>, dlc0: &Dlc, e: usize, a: usize, gamma: usize) -> Field {
    let ctx = ctx.clone();
    let dlc0 = dlc0.clone();
    fn_field(move |pt: &Point, order: u8| {
        let r = ctx.g.r;
        let mut acc = ctx.adapted(&ctx.g.g_v_f(e, a), gamma).jet(pt, order)?;
        for d in 0..r {
            let h1 = dlc0.hv_f(e, d, gamma).jet(pt, order)?;
            if h1.max_abs() != 0.0 {
                acc = acc.sub(&h1.mul(&ctx.g.g_v_f(d, a).jet(pt, order)?));
            }
            let h2 = dlc0.hv_f(a, d, gamma).jet(pt, order)?;
            if h2.max_abs() != 0.0 {
                acc = acc.sub(&h2.mul(&ctx.g.g_v_f(e, d).jet(pt, order)?));
            }
        }
        Ok(acc)
    })
}

/// Covariant derivative of the frame block along the adapted frame with a
/// starting frame family.
fn ring_h_of_h_block(ctx: &Arc<Ctx>, dlc0: &Dlc, e: usize, b: usize, gamma: usize) -> Field {
    let ctx = ctx.clone();
    let dlc0 = dlc0.clone();
    fn_field(move |pt: &Point, order: u8| {
        let p = ctx.g.p;
        let mut acc = ctx.adapted(&ctx.g.g_h_f(e, b), gamma).jet(pt, order)?;
        for mu in 0..p {
            let h1 = dlc0.hh_f(mu, e, gamma).jet(pt, order)?;
            if h1.max_abs() != 0.0 {
                acc = acc.sub(&h1.mul(&ctx.g.g_h_f(mu, b).jet(pt, order)?));
            }
            let h2 = dlc0.hh_f(mu, b, gamma).jet(pt, order)?;
            if h2.max_abs() != 0.0 {
                acc = acc.sub(&h2.mul(&ctx.g.g_h_f(e, mu).jet(pt, order)?));
            }
        }
        Ok(acc)
    })
}

/// Vertical covariant derivative of the frame block with a starting frame
/// vertical family.
fn ring_v_of_h_block(ctx: &Arc<Ctx>, dlc0: &Dlc, e: usize, b: usize, c: usize) -> Field {
    let ctx = ctx.clone();
    let dlc0 = dlc0.clone();
    let m = ctx.spec.m;
    fn_field(move |pt: &Point, order: u8| {
        let p = ctx.g.p;
        let mut acc = vertical_deriv(m, &ctx.g.g_h_f(e, b), c).jet(pt, order)?;
        for mu in 0..p {
            let v1 = dlc0.vh_f(mu, e, c).jet(pt, order)?;
            if v1.max_abs() != 0.0 {
                acc = acc.sub(&v1.mul(&ctx.g.g_h_f(mu, b).jet(pt, order)?));
            }
            let v2 = dlc0.vh_f(mu, b, c).jet(pt, order)?;
            if v2.max_abs() != 0.0 {
                acc = acc.sub(&v2.mul(&ctx.g.g_h_f(e, mu).jet(pt, order)?));
            }
        }
        Ok(acc)
    })
}

/// Vertical covariant derivative of the fiber block with a starting fiber
/// vertical family.
fn ring_v_of_v_block(ctx: &Arc<Ctx>, dlc0: &Dlc, e: usize, a: usize, c: usize) -> Field {
    let ctx = ctx.clone();
    let dlc0 = dlc0.clone();
    let m = ctx.spec.m;
    fn_field(move |pt: &Point, order: u8| {
        let r = ctx.g.r;
        let mut acc = vertical_deriv(m, &ctx.g.g_v_f(e, a), c).jet(pt, order)?;
        for d in 0..r {
            let v1 = dlc0.vv_f(e, d, c).jet(pt, order)?;
            if v1.max_abs() != 0.0 {
                acc = acc.sub(&v1.mul(&ctx.g.g_v_f(d, a).jet(pt, order)?));
            }
            let v2 = dlc0.vv_f(a, d, c).jet(pt, order)?;
            if v2.max_abs() != 0.0 {
                acc = acc.sub(&v2.mul(&ctx.g.g_v_f(e, d).jet(pt, order)?));
            }
        }
        Ok(acc)
    })
}

/// Correction term `1/2 * inv[slot][e] * R(e)` summed over `e`, where `R` is
/// one of the ring covariant derivatives and `inv` the matching block inverse.
fn half_inv_contraction(
    ctx: &Arc<Ctx>,
    use_h_inverse: bool,
    slot: usize,
    ring: impl Fn(usize) -> Field + Send + Sync + 'static,
) -> Field {
    let ctx = ctx.clone();
    let rings: Vec<Field> = (0..if use_h_inverse { ctx.g.p } else { ctx.g.r })
        .map(ring)
        .collect();
    fn_field(move |pt: &Point, order: u8| {
        let n = pt.dim();
        let (fields, size) = if use_h_inverse {
            (ctx.g.h_fields(), ctx.g.p)
        } else {
            (ctx.g.v_fields(), ctx.g.r)
        };
        let jets = field_matrix_jets(fields, size, pt, order)?;
        let ginv = crate::linalg::invert_jets(&jets).map_err(singular_to_eval)?;
        let mut acc = Jet::constant(n, order, 0.0);
        for (e, ring_e) in rings.iter().enumerate() {
            let w = &ginv[slot][e];
            if w.max_abs() == 0.0 {
                continue;
            }
            acc = acc.add(&w.mul(&ring_e.jet(pt, order)?));
        }
        Ok(acc.scale(0.5))
    })
}

/// Metric-compatible connection built from a starting distinguished
/// connection: frame Christoffel block, ring-corrected mixed families, and
/// the fiber Christoffel block.
pub fn metrizable_from(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    dlc0: &Dlc,
    g: &PseudoMetric,
) -> Dlc {
    let ctx = Arc::new(Ctx {
        spec: spec.clone(),
        conn: conn.clone(),
        g: g.clone(),
    });
    let (p, r) = (g.p, g.r);
    let hh = christoffel_h(&ctx);
    let mut hv = Vec::with_capacity(r * r * p);
    for a in 0..r {
        for b in 0..r {
            for ga in 0..p {
                let base = dlc0.hv_f(a, b, ga);
                let ctxc = ctx.clone();
                let dlc0c = dlc0.clone();
                let corr = half_inv_contraction(&ctx, false, b, move |e| {
                    ring_h_of_v_block(&ctxc, &dlc0c, e, a, ga)
                });
                hv.push(crate::field::add_fields(base, corr));
            }
        }
    }
    let mut vh = Vec::with_capacity(p * p * r);
    for al in 0..p {
        for be in 0..p {
            for c in 0..r {
                let base = dlc0.vh_f(al, be, c);
                let ctxc = ctx.clone();
                let dlc0c = dlc0.clone();
                // Contraction with the frame inverse on the upper slot.
                let corr = half_inv_contraction(&ctx, true, al, move |e| {
                    ring_v_of_h_block(&ctxc, &dlc0c, e, be, c)
                });
                vh.push(crate::field::add_fields(base, corr));
            }
        }
    }
    let vv = christoffel_v(&ctx);
    Dlc::new(p, r, hh, hv, vh, vv)
}

/// Metric-compatible connection with the Berwald connection of `conn` as the
/// starting point.
pub fn metrizable_berwald(spec: &AlgebroidSpec, conn: &NonlinearConnection, g: &PseudoMetric) -> Dlc {
    let berwald = Dlc::berwald(spec.m, conn, false);
    metrizable_from(spec, conn, &berwald, g)
}

/// Closed-form variant of [`metrizable_berwald`] valid when both blocks
/// depend on the base point only: vanishing vertical families and an explicit
/// fiber family.
pub fn metrizable_berwald_riemannian(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    g: &PseudoMetric,
) -> Dlc {
    let ctx = Arc::new(Ctx {
        spec: spec.clone(),
        conn: conn.clone(),
        g: g.clone(),
    });
    let (p, r, m) = (g.p, g.r, spec.m);
    let hh = christoffel_h(&ctx);
    let mut hv = Vec::with_capacity(r * r * p);
    for a in 0..r {
        for b in 0..r {
            for ga in 0..p {
                let ctx = ctx.clone();
                hv.push(fn_field(move |pt: &Point, order: u8| {
                    let n = pt.dim();
                    let r = ctx.g.r;
                    let jets = field_matrix_jets(ctx.g.v_fields(), r, pt, order)?;
                    let ginv = crate::linalg::invert_jets(&jets).map_err(singular_to_eval)?;
                    let mut acc = vertical_deriv(m, &ctx.conn.gamma(b, ga), a).jet(pt, order)?;
                    let rho = ctx.spec.rho_jets(pt, order)?;
                    for e in 0..r {
                        let w = &ginv[b][e];
                        if w.max_abs() == 0.0 {
                            continue;
                        }
                        let mut inner = Jet::constant(n, order, 0.0);
                        for i in 0..m {
                            let rj = &rho[ga * m + i];
                            if rj.max_abs() == 0.0 {
                                continue;
                            }
                            let dg = ctx
                                .g
                                .g_v_f(e, a)
                                .jet(pt, order + 1)?
                                .derivative(i)
                                .expect("order below cap");
                            inner = inner.add(&rj.mul(&dg));
                        }
                        for d in 0..r {
                            let d1 = vertical_deriv(m, &ctx.conn.gamma(d, ga), e).jet(pt, order)?;
                            inner = inner.sub(&d1.mul(&ctx.g.g_v_f(d, a).jet(pt, order)?));
                            let d2 = vertical_deriv(m, &ctx.conn.gamma(d, ga), a).jet(pt, order)?;
                            inner = inner.sub(&d2.mul(&ctx.g.g_v_f(e, d).jet(pt, order)?));
                        }
                        acc = acc.add(&w.mul(&inner).scale(0.5));
                    }
                    Ok(acc)
                }));
            }
        }
    }
    Dlc::new(
        p,
        r,
        hh,
        hv,
        vec![zero_field(); p * p * r],
        vec![zero_field(); r * r * r],
    )
}

/// Starting-connection deformation: every family corrected by half the
/// inverse-contracted ring covariant derivative of the matching block.
pub fn metrizable_deformation(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    dlc0: &Dlc,
    g: &PseudoMetric,
) -> Dlc {
    let ctx = Arc::new(Ctx {
        spec: spec.clone(),
        conn: conn.clone(),
        g: g.clone(),
    });
    let (p, r) = (g.p, g.r);
    let mut hh = Vec::with_capacity(p * p * p);
    for al in 0..p {
        for be in 0..p {
            for ga in 0..p {
                let base = dlc0.hh_f(al, be, ga);
                let ctxc = ctx.clone();
                let dlc0c = dlc0.clone();
                let corr = half_inv_contraction(&ctx, true, al, move |e| {
                    ring_h_of_h_block(&ctxc, &dlc0c, e, be, ga)
                });
                hh.push(crate::field::add_fields(base, corr));
            }
        }
    }
    let mut hv = Vec::with_capacity(r * r * p);
    for a in 0..r {
        for b in 0..r {
            for ga in 0..p {
                let base = dlc0.hv_f(a, b, ga);
                let ctxc = ctx.clone();
                let dlc0c = dlc0.clone();
                let corr = half_inv_contraction(&ctx, false, b, move |e| {
                    ring_h_of_v_block(&ctxc, &dlc0c, e, a, ga)
                });
                hv.push(crate::field::add_fields(base, corr));
            }
        }
    }
    let mut vh = Vec::with_capacity(p * p * r);
    for al in 0..p {
        for be in 0..p {
            for c in 0..r {
                let base = dlc0.vh_f(al, be, c);
                let ctxc = ctx.clone();
                let dlc0c = dlc0.clone();
                let corr = half_inv_contraction(&ctx, true, al, move |e| {
                    ring_v_of_h_block(&ctxc, &dlc0c, e, be, c)
                });
                vh.push(crate::field::add_fields(base, corr));
            }
        }
    }
    let mut vv = Vec::with_capacity(r * r * r);
    for a in 0..r {
        for b in 0..r {
            for c in 0..r {
                let base = dlc0.vv_f(a, b, c);
                let ctxc = ctx.clone();
                let dlc0c = dlc0.clone();
                let corr = half_inv_contraction(&ctx, false, b, move |e| {
                    ring_v_of_v_block(&ctxc, &dlc0c, e, a, c)
                });
                vv.push(crate::field::add_fields(base, corr));
            }
        }
    }
    Dlc::new(p, r, hh, hv, vh, vv)
}

/// The two complementary projector pairs built from the metric blocks,
/// as dense coefficient fields `[up1][up2][low1][low2]`.
pub struct ObataOperators {
    pub p: usize,
    pub r: usize,
    pub o_h: Vec<Field>,
    pub o_star_h: Vec<Field>,
    pub o_v: Vec<Field>,
    pub o_star_v: Vec<Field>,
}

pub fn obata(g: &PseudoMetric) -> ObataOperators {
    let (p, r) = (g.p, g.r);
    let build = |star: bool, horizontal: bool| -> Vec<Field> {
        let n = if horizontal { p } else { r };
        let mut out = Vec::with_capacity(n * n * n * n);
        for a in 0..n {
            for e in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        let delta = if a == b && e == c { 0.5 } else { 0.0 };
                        let sign = if star { 0.5 } else { -0.5 };
                        let gd = if horizontal {
                            crate::field::mul_fields(g.g_h_f(b, c), g.g_h_inv_f(a, e))
                        } else {
                            crate::field::mul_fields(g.g_v_inv_f(b, c), g.g_v_f(a, e))
                        };
                        let gd = crate::field::scale_field(gd, sign);
                        out.push(crate::field::add_fields(
                            crate::field::const_field(delta),
                            gd,
                        ));
                    }
                }
            }
        }
        out
    };
    ObataOperators {
        p,
        r,
        o_h: build(false, true),
        o_star_h: build(true, true),
        o_v: build(false, false),
        o_star_v: build(true, false),
    }
}

impl ObataOperators {
    /// Apply an operator grid to a matrix argument with the pairing used by
    /// the deformation family: `(O W)^a_b = O^{a e}_{h b} W^h_e`.
    pub fn apply(op: &[f64], n: usize, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let mut acc = 0.0;
                for h in 0..n {
                    for e in 0..n {
                        acc += op[((a * n + e) * n + h) * n + b] * w[h * n + e];
                    }
                }
                out[a * n + b] = acc;
            }
        }
        out
    }

    /// Kernel of the composition `A` after `B` under the same pairing.
    pub fn compose(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n * n * n];
        for al in 0..n {
            for mu in 0..n {
                for nu in 0..n {
                    for be in 0..n {
                        let mut acc = 0.0;
                        for h in 0..n {
                            for e in 0..n {
                                acc += a[((al * n + e) * n + h) * n + be]
                                    * b[((h * n + mu) * n + nu) * n + e];
                            }
                        }
                        out[((al * n + mu) * n + nu) * n + be] = acc;
                    }
                }
            }
        }
        out
    }
}

/// Deformation tensors for the projector family, stored `[up][low][dir]`.
#[derive(Clone)]
pub struct DeformationTensors {
    pub x_h: Vec<Field>,
    pub x_v: Vec<Field>,
    pub y_h: Vec<Field>,
    pub y_v: Vec<Field>,
}

impl DeformationTensors {
    pub fn zero(p: usize, r: usize) -> DeformationTensors {
        DeformationTensors {
            x_h: vec![zero_field(); p * p * p],
            x_v: vec![zero_field(); p * p * r],
            y_h: vec![zero_field(); r * r * p],
            y_v: vec![zero_field(); r * r * r],
        }
    }
}

/// Projector-deformed family on top of the canonical Berwald-started
/// connection: each family moves inside the metric-antisymmetric range, so
/// compatibility is preserved for every deformation choice.
pub fn metrizable_family(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    g: &PseudoMetric,
    d: &DeformationTensors,
) -> Dlc {
    let canonical = metrizable_berwald(spec, conn, g);
    let (p, r) = (g.p, g.r);
    let g = Arc::new(g.clone());
    // Antisymmetrizing projector applied slot-wise:
    // Delta^a_{b dir} = 1/2 (X^a_{b dir} - ginv^{a e} g_{h b} X^h_{e dir}).
    let project = |x: Vec<Field>, n: usize, dirs: usize, horizontal: bool| -> Vec<Field> {
        let x = Arc::new(x);
        let mut out = Vec::with_capacity(n * n * dirs);
        for a in 0..n {
            for b in 0..n {
                for dir in 0..dirs {
                    let x = x.clone();
                    let g = g.clone();
                    out.push(fn_field(move |pt: &Point, order: u8| {
                        let fields = if horizontal { g.h_fields() } else { g.v_fields() };
                        let jets = field_matrix_jets(fields, n, pt, order)?;
                        let ginv = crate::linalg::invert_jets(&jets).map_err(singular_to_eval)?;
                        // Upper-index matrix times lower-index matrix: for the
                        // frame block the inverse carries the upper indices,
                        // for the fiber block the metric itself does.
                        let (upper, lower) = if horizontal {
                            (&ginv, &jets)
                        } else {
                            (&jets, &ginv)
                        };
                        let mut acc = x[(a * n + b) * dirs + dir].jet(pt, order)?;
                        for h in 0..n {
                            for e in 0..n {
                                let xj = x[(h * n + e) * dirs + dir].jet(pt, order)?;
                                if xj.max_abs() == 0.0 {
                                    continue;
                                }
                                acc = acc.sub(&upper[a][e].mul(&lower[h][b]).mul(&xj));
                            }
                        }
                        Ok(acc.scale(0.5))
                    }));
                }
            }
        }
        out
    };
    let dh = project(d.x_h.clone(), p, p, true);
    let dvh = project(d.x_v.clone(), p, r, true);
    let dhv = project(d.y_h.clone(), r, p, false);
    let dvv = project(d.y_v.clone(), r, r, false);
    let add = |base: Vec<Field>, delta: Vec<Field>| -> Vec<Field> {
        base.into_iter()
            .zip(delta)
            .map(|(b, d)| crate::field::add_fields(b, d))
            .collect()
    };
    let hh = add((0..p * p * p).map(|k| canonical_field(&canonical, 0, k, p, r)).collect(), dh);
    let hv = add((0..r * r * p).map(|k| canonical_field(&canonical, 1, k, p, r)).collect(), dhv);
    let vh = add((0..p * p * r).map(|k| canonical_field(&canonical, 2, k, p, r)).collect(), dvh);
    let vv = add((0..r * r * r).map(|k| canonical_field(&canonical, 3, k, p, r)).collect(), dvv);
    Dlc::new(p, r, hh, hv, vh, vv)
}

fn canonical_field(dlc: &Dlc, family: usize, flat: usize, p: usize, r: usize) -> Field {
    match family {
        0 => {
            let (rest, dir) = (flat / p, flat % p);
            dlc.hh_f(rest / p, rest % p, dir)
        }
        1 => {
            let (rest, dir) = (flat / p, flat % p);
            dlc.hv_f(rest / r, rest % r, dir)
        }
        2 => {
            let (rest, dir) = (flat / r, flat % r);
            dlc.vh_f(rest / p, rest % p, dir)
        }
        _ => {
            let (rest, dir) = (flat / r, flat % r);
            dlc.vv_f(rest / r, rest % r, dir)
        }
    }
}

/// Certify metric compatibility of a distinguished connection: all four
/// residual families of the covariant derivative of both blocks, evaluated
/// through the general tensor machinery.
pub fn check_compatibility(
    spec: &AlgebroidSpec,
    conn: &NonlinearConnection,
    dlc: &Dlc,
    g: &PseudoMetric,
    samples: usize,
    seed: u64,
    tol: f64,
) -> CheckReport {
    let (p, r) = (g.p, g.r);
    let t_h = DTensor::new(
        Valence::new(0, 0, 2, 0),
        p,
        r,
        (0..p * p).map(|k| g.g_h_f(k / p, k % p)).collect(),
    );
    let t_v = DTensor::new(
        Valence::new(0, 2, 0, 0),
        p,
        r,
        (0..r * r).map(|k| g.g_v_f(k / r, k % r)).collect(),
    );
    let mut fam_h_of_h = Vec::new();
    let mut fam_h_of_v = Vec::new();
    for ga in 0..p {
        fam_h_of_h.push(h_cov_deriv(spec, conn, dlc, &t_h, ga));
        fam_h_of_v.push(h_cov_deriv(spec, conn, dlc, &t_v, ga));
    }
    let mut fam_v_of_h = Vec::new();
    let mut fam_v_of_v = Vec::new();
    for c in 0..r {
        fam_v_of_h.push(v_cov_deriv(spec, dlc, &t_h, c));
        fam_v_of_v.push(v_cov_deriv(spec, dlc, &t_v, c));
    }
    let mut sampler = Sampler::stream(spec.m, spec.r_rank, seed, "compatibility");
    let mut trackers = [
        ResidualTracker::new(),
        ResidualTracker::new(),
        ResidualTracker::new(),
        ResidualTracker::new(),
    ];
    let mut used = 0;
    let mut errors = Vec::new();
    for _ in 0..samples {
        let pt = sampler.next_point();
        let mut step = || -> Result<(), EvalError> {
            for (k, fam) in [&fam_h_of_h, &fam_h_of_v].into_iter().enumerate() {
                for d in fam {
                    for v in d.values_at(&pt)? {
                        trackers[k].update(v.abs(), &pt);
                    }
                }
            }
            for (k, fam) in [&fam_v_of_h, &fam_v_of_v].into_iter().enumerate() {
                for d in fam {
                    for v in d.values_at(&pt)? {
                        trackers[2 + k].update(v.abs(), &pt);
                    }
                }
            }
            Ok(())
        };
        match step() {
            Ok(()) => used += 1,
            Err(e) => errors.push(e.to_string()),
        }
    }
    let h_ok = trackers[0].max < tol && trackers[1].max < tol;
    let v_ok = trackers[2].max < tol && trackers[3].max < tol;
    let mut total = ResidualTracker::new();
    for t in &trackers {
        total.merge(t);
    }
    let mut notes = format!(
        "frame|adapted={:.3e} fiber|adapted={:.3e} frame|vertical={:.3e} fiber|vertical={:.3e}; {}",
        trackers[0].max,
        trackers[1].max,
        trackers[2].max,
        trackers[3].max,
        match (h_ok, v_ok) {
            (true, true) => "fully compatible",
            (true, false) => "horizontally compatible only",
            (false, true) => "vertically compatible only",
            (false, false) => "incompatible",
        }
    );
    if !errors.is_empty() {
        notes.push_str(&format!("; {} point(s) failed to evaluate", errors.len()));
    }
    let mut rep = total.into_report("compatibility", tol, used, notes);
    if !errors.is_empty() {
        rep.pass = false;
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, Dims};

    const D22: Dims = Dims { m: 2, r: 2 };

    fn exp_metric() -> PseudoMetric {
        let g_h = vec![Expr::one(), Expr::zero(), Expr::zero(), Expr::one()];
        let g_v = vec![
            Expr::Exp(Box::new(Expr::x(0))),
            Expr::zero(),
            Expr::zero(),
            Expr::Exp(Box::new(Expr::x(1))),
        ];
        PseudoMetric::from_exprs(2, 2, g_h, g_v).unwrap()
    }

    #[test]
    fn identity_blocks_invert_to_identity() {
        let g = PseudoMetric::identity(2, 2);
        let pt = Point::new(vec![0.4, -0.7], vec![0.3, 0.9]);
        let (h, v) = g.invert_at(&pt).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(h[i][j], want);
                assert_eq!(v[i][j], want);
            }
        }
    }

    #[test]
    fn exp_block_inverts_to_reciprocals() {
        let g = exp_metric();
        let at = |x1: f64, x2: f64| {
            let pt = Point::new(vec![x1, x2], vec![1.0, 0.0]);
            g.invert_at(&pt).unwrap().1
        };
        let v = at(0.0, 0.0);
        assert!((v[0][0] - 1.0).abs() < 1e-14);
        assert!((v[1][1] - 1.0).abs() < 1e-14);
        let v = at(2.0_f64.ln(), 0.0);
        assert!((v[0][0] - 0.5).abs() < 1e-14);
        assert!((v[1][1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn inverse_times_original_is_identity() {
        let g_h = vec![
            parse_expr("(+ 2 (* 0.4 x1))", D22).unwrap(),
            parse_expr("(* 0.3 x2)", D22).unwrap(),
            parse_expr("(* 0.3 x2)", D22).unwrap(),
            parse_expr("(+ 1.5 (* 0.1 p1))", D22).unwrap(),
        ];
        let g_v = vec![
            parse_expr("(+ 1 (pow p1 2))", D22).unwrap(),
            parse_expr("(* 0.2 p2)", D22).unwrap(),
            parse_expr("(* 0.2 p2)", D22).unwrap(),
            parse_expr("(exp x2)", D22).unwrap(),
        ];
        let g = PseudoMetric::from_exprs(2, 2, g_h, g_v).unwrap();
        let mut sampler = Sampler::new(2, 2, 41);
        for _ in 0..20 {
            let pt = sampler.next_point();
            let (h_inv, v_inv) = g.invert_at(&pt).unwrap();
            for (inv, block) in [(h_inv, true), (v_inv, false)] {
                for i in 0..2 {
                    for j in 0..2 {
                        let mut prod = 0.0;
                        for k in 0..2 {
                            let entry = if block { g.g_h_f(i, k) } else { g.g_v_f(i, k) };
                            prod += entry.jet(&pt, 0).unwrap().value() * inv[k][j];
                        }
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert!((prod - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn classify_blocks() {
        let g = exp_metric();
        let c = classify(&g, 2, 20, 3, 1e-9).unwrap();
        assert_eq!(c.h_block, BlockClass::Riemannian);
        assert_eq!(c.v_block, BlockClass::Riemannian);
        assert_eq!(c.v_signature, Some((0, 2)));

        let g_v = vec![
            parse_expr("(+ 1 (* p1 p1))", D22).unwrap(),
            Expr::zero(),
            Expr::zero(),
            Expr::one(),
        ];
        let g = PseudoMetric::from_exprs(
            2,
            2,
            vec![Expr::one(), Expr::zero(), Expr::zero(), Expr::one()],
            g_v,
        )
        .unwrap();
        let c = classify(&g, 2, 20, 3, 1e-9).unwrap();
        assert_eq!(c.v_block, BlockClass::Minkowski);

        let g_v = vec![
            parse_expr("(* (exp x1) (+ 1 (* p1 p1)))", D22).unwrap(),
            Expr::zero(),
            Expr::zero(),
            Expr::one(),
        ];
        let g = PseudoMetric::from_exprs(
            2,
            2,
            vec![Expr::one(), Expr::zero(), Expr::zero(), Expr::one()],
            g_v,
        )
        .unwrap();
        let c = classify(&g, 2, 20, 3, 1e-9).unwrap();
        assert_eq!(c.v_block, BlockClass::General);
    }

    #[test]
    fn flat_identity_construction_is_zero() {
        let spec = AlgebroidSpec::flat(2, 2);
        let conn = NonlinearConnection::zero(2, 2);
        let g = PseudoMetric::identity(2, 2);
        let dlc = metrizable_from(&spec, &conn, &Dlc::zero(2, 2), &g);
        let pt = Point::new(vec![0.3, 0.5], vec![0.7, -0.4]);
        let v = dlc.values_at(&pt).unwrap();
        for x in v.hh.iter().chain(&v.hv).chain(&v.vh).chain(&v.vv) {
            assert_eq!(*x, 0.0);
        }
    }

    #[test]
    fn exp_metric_fiber_family_matches_hand_values() {
        // Half the inverse times the base derivative of the fiber block:
        // diagonal entries 1/2 in the matching direction.
        let spec = AlgebroidSpec::flat(2, 2);
        let conn = NonlinearConnection::zero(2, 2);
        let g = exp_metric();
        let dlc = metrizable_from(&spec, &conn, &Dlc::zero(2, 2), &g);
        let pt = Point::new(vec![0.37, -0.21], vec![0.5, 0.8]);
        for a in 0..2 {
            for b in 0..2 {
                for ga in 0..2 {
                    let v = dlc.hv_f(a, b, ga).jet(&pt, 0).unwrap().value();
                    let want = if a == b && b == ga { 0.5 } else { 0.0 };
                    assert!((v - want).abs() < 1e-14, "hv[{a}{b}{ga}] = {v}");
                }
            }
        }
    }

    #[test]
    fn constructions_are_compatible_on_exp_metric() {
        let spec = AlgebroidSpec::flat(2, 2);
        let conn = NonlinearConnection::from_exprs(
            2,
            2,
            vec![
                parse_expr("(* 0.4 (* x1 p1))", D22).unwrap(),
                Expr::p(0),
                Expr::zero(),
                parse_expr("(* 0.2 p2)", D22).unwrap(),
            ],
        );
        let g = exp_metric();
        for dlc in [
            metrizable_from(&spec, &conn, &Dlc::zero(2, 2), &g),
            metrizable_berwald(&spec, &conn, &g),
            metrizable_deformation(&spec, &conn, &Dlc::zero(2, 2), &g),
        ] {
            let rep = check_compatibility(&spec, &conn, &dlc, &g, 25, 5, 1e-9);
            assert!(rep.pass, "{} {}", rep.max_residual, rep.notes);
        }
    }

    #[test]
    fn rank_three_structure_terms_stay_compatible() {
        // Nonzero structure functions and a non-identity base-dependent
        // metric: the structure-term corrections must still cancel exactly in
        // the compatibility residuals.
        let spec = AlgebroidSpec::so3();
        let dims = spec.dims();
        let conn = NonlinearConnection::from_exprs(
            3,
            3,
            (0..9)
                .map(|k| parse_expr(&format!("(* 0.{} p{})", (k % 3) + 1, (k % 3) + 1), dims).unwrap())
                .collect(),
        );
        let mut g_h = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                g_h.push(if i == j {
                    parse_expr(&format!("(+ {} (* 0.2 (sin x{})))", 1.3 + 0.2 * i as f64, i + 1), dims)
                        .unwrap()
                } else {
                    parse_expr(&format!("(* 0.05 (* x{} x{}))", i + 1, j + 1), dims).unwrap()
                });
            }
        }
        let mut g_v = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                g_v.push(if i == j {
                    parse_expr(&format!("(+ 1.5 (* 0.1 (pow p{} 2)))", i + 1), dims).unwrap()
                } else {
                    Expr::zero()
                });
            }
        }
        let g = PseudoMetric::from_exprs(3, 3, g_h, g_v).unwrap();
        for dlc in [
            metrizable_from(&spec, &conn, &Dlc::zero(3, 3), &g),
            metrizable_berwald(&spec, &conn, &g),
            metrizable_deformation(&spec, &conn, &Dlc::zero(3, 3), &g),
        ] {
            let rep = check_compatibility(&spec, &conn, &dlc, &g, 15, 21, 1e-9);
            assert!(rep.pass, "{} {}", rep.max_residual, rep.notes);
        }
    }

    #[test]
    fn berwald_variant_agrees_with_riemannian_form() {
        let spec = AlgebroidSpec::flat(2, 2);
        let conn = NonlinearConnection::from_exprs(
            2,
            2,
            vec![
                Expr::p(0),
                parse_expr("(* x1 p2)", D22).unwrap(),
                parse_expr("(* 0.3 p1)", D22).unwrap(),
                Expr::p(1),
            ],
        );
        let g = exp_metric();
        let a = metrizable_berwald(&spec, &conn, &g);
        let b = metrizable_berwald_riemannian(&spec, &conn, &g);
        let mut sampler = Sampler::new(2, 2, 17);
        for _ in 0..25 {
            let pt = sampler.next_point();
            let va = a.values_at(&pt).unwrap();
            let vb = b.values_at(&pt).unwrap();
            assert!(va.max_abs_diff(&vb) < 1e-10);
            assert!(vb.vh.iter().all(|x| *x == 0.0));
            assert!(vb.vv.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn deformation_with_compatible_start_is_fixed_point() {
        let spec = AlgebroidSpec::flat(2, 2);
        let conn = NonlinearConnection::zero(2, 2);
        let g = exp_metric();
        let base = metrizable_berwald(&spec, &conn, &g);
        let deformed = metrizable_deformation(&spec, &conn, &base, &g);
        let mut sampler = Sampler::new(2, 2, 23);
        for _ in 0..15 {
            let pt = sampler.next_point();
            let a = base.values_at(&pt).unwrap();
            let b = deformed.values_at(&pt).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn obata_identity_metric_acts_as_antisymmetrizer() {
        let g = PseudoMetric::identity(2, 2);
        let ops = obata(&g);
        let pt = Point::new(vec![0.0, 0.0], vec![1.0, 0.0]);
        let o: Vec<f64> = ops.o_h.iter().map(|f| f.jet(&pt, 0).unwrap().value()).collect();
        let os: Vec<f64> = ops
            .o_star_h
            .iter()
            .map(|f| f.jet(&pt, 0).unwrap().value())
            .collect();
        // Hand-checked 2x2x2x2 contraction table: applying O to a symmetric
        // argument annihilates it, O* reproduces it.
        let w_sym = vec![1.0, 2.0, 2.0, -0.5];
        let zero = ObataOperators::apply(&o, 2, &w_sym);
        for z in zero {
            assert!(z.abs() < 1e-15);
        }
        let same = ObataOperators::apply(&os, 2, &w_sym);
        for (a, b) in same.iter().zip(&w_sym) {
            assert!((a - b).abs() < 1e-15);
        }
        // A skew argument is kept by O and killed by O*.
        let w_skew = vec![0.0, 1.5, -1.5, 0.0];
        let kept = ObataOperators::apply(&o, 2, &w_skew);
        for (a, b) in kept.iter().zip(&w_skew) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn obata_projector_identities_general_metric() {
        let g_h = vec![
            parse_expr("(+ 2 (* 0.4 x1))", D22).unwrap(),
            parse_expr("(* 0.3 x2)", D22).unwrap(),
            parse_expr("(* 0.3 x2)", D22).unwrap(),
            parse_expr("(+ 1.5 (* 0.2 x1))", D22).unwrap(),
        ];
        let g = PseudoMetric::from_exprs(2, 2, g_h, vec![Expr::one(), Expr::zero(), Expr::zero(), Expr::one()]).unwrap();
        let ops = obata(&g);
        let pt = Point::new(vec![0.3, -0.6], vec![0.4, 1.1]);
        let o: Vec<f64> = ops.o_h.iter().map(|f| f.jet(&pt, 0).unwrap().value()).collect();
        let os: Vec<f64> = ops
            .o_star_h
            .iter()
            .map(|f| f.jet(&pt, 0).unwrap().value())
            .collect();
        let oo = ObataOperators::compose(&o, &o, 2);
        let oos = ObataOperators::compose(&o, &os, 2);
        let sum: Vec<f64> = o.iter().zip(&os).map(|(a, b)| a + b).collect();
        for i in 0..16 {
            assert!((oo[i] - o[i]).abs() < 1e-12);
            assert!(oos[i].abs() < 1e-12);
            let idx = (i / 8, (i / 4) % 2, (i / 2) % 2, i % 2);
            let ident = if idx.0 == idx.2 && idx.1 == idx.3 { 1.0 } else { 0.0 };
            assert!((sum[i] - ident).abs() < 1e-12);
        }
    }

    #[test]
    fn family_preserves_compatibility_and_projects_out_symmetric_part() {
        let spec = AlgebroidSpec::flat(2, 2);
        let conn = NonlinearConnection::zero(2, 2);
        let g = exp_metric();
        let e = |s: &str| expr_field(parse_expr(s, D22).unwrap());
        let d = DeformationTensors {
            x_h: (0..8).map(|k| e(&format!("(+ x1 {})", k as f64 * 0.3))).collect(),
            x_v: (0..8).map(|k| e(&format!("(* p1 {})", 1.0 + k as f64 * 0.2))).collect(),
            y_h: (0..8).map(|k| e(&format!("(+ p2 {})", k as f64 * 0.1))).collect(),
            y_v: (0..8).map(|k| e(&format!("(* x2 {})", 1.0 + k as f64))).collect(),
        };
        let dlc = metrizable_family(&spec, &conn, &g, &d);
        let rep = check_compatibility(&spec, &conn, &dlc, &g, 20, 9, 1e-9);
        assert!(rep.pass, "{} {}", rep.max_residual, rep.notes);

        // Zero deformation returns the canonical connection.
        let base = metrizable_family(&spec, &conn, &g, &DeformationTensors::zero(2, 2));
        let canon = metrizable_berwald(&spec, &conn, &g);
        let pt = Point::new(vec![0.2, 0.4], vec![0.9, -0.3]);
        assert!(base
            .values_at(&pt)
            .unwrap()
            .max_abs_diff(&canon.values_at(&pt).unwrap())
            < 1e-13);

        // Perturbing the frame deformation inside the symmetric projector
        // range leaves the frame family unchanged: add S^a_b = ginv^{ae} s_{eb}
        // with s symmetric, which the antisymmetrizing projector annihilates.
        let s_lower: Vec<Field> = vec![
            e("(+ 1 (* 0.4 p2))"),
            e("(* 0.7 x1)"),
            e("(* 0.7 x1)"),
            e("(- 2 p1)"),
        ];
        let mut x_h2 = d.x_h.clone();
        for (k, slot) in x_h2.iter_mut().enumerate() {
            let g2 = g.clone();
            let s_lower = s_lower.clone();
            let up = k / 4;
            let low = (k / 2) % 2;
            let prev = slot.clone();
            *slot = fn_field(move |pt: &Point, order: u8| {
                let base = prev.jet(pt, order)?;
                let jets = field_matrix_jets(g2.h_fields(), 2, pt, order)?;
                let ginv = crate::linalg::invert_jets(&jets).map_err(singular_to_eval)?;
                let mut s = Jet::constant(pt.dim(), order, 0.0);
                for ee in 0..2 {
                    s = s.add(&ginv[up][ee].mul(&s_lower[ee * 2 + low].jet(pt, order)?));
                }
                Ok(base.add(&s))
            });
        }
        let d2 = DeformationTensors { x_h: x_h2, ..d.clone() };
        let dlc2 = metrizable_family(&spec, &conn, &g, &d2);
        let mut sampler = Sampler::new(2, 2, 31);
        for _ in 0..10 {
            let pt = sampler.next_point();
            let a = dlc.values_at(&pt).unwrap();
            let b = dlc2.values_at(&pt).unwrap();
            let dh: f64 = a
                .hh
                .iter()
                .zip(&b.hh)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(dh < 1e-10, "frame family changed by {dh}");
        }
    }

    #[test]
    fn compatibility_detects_constructed_violation() {
        let spec = AlgebroidSpec::flat(2, 2);
        let conn = NonlinearConnection::zero(2, 2);
        let g = exp_metric();
        let good = metrizable_berwald(&spec, &conn, &g);
        // Zero out the fiber family: the fiber block is base-dependent, so
        // the horizontal residual must become order-one.
        let broken = Dlc::new(
            2,
            2,
            (0..8).map(|k| good.hh_f(k / 4, (k / 2) % 2, k % 2)).collect(),
            vec![zero_field(); 8],
            (0..8).map(|k| good.vh_f(k / 4, (k / 2) % 2, k % 2)).collect(),
            (0..8).map(|k| good.vv_f(k / 4, (k / 2) % 2, k % 2)).collect(),
        );
        let rep = check_compatibility(&spec, &conn, &broken, &g, 20, 11, 1e-9);
        assert!(!rep.pass);
        assert!(rep.max_residual > 0.1);
    }

    #[test]
    fn classical_reduction_matches_plain_christoffel() {
        // Identity anchor, vanishing structure functions, zero connection:
        // the frame family must coincide with the classical Christoffel
        // symbols of the frame block computed with plain base derivatives.
        let spec = AlgebroidSpec::flat(2, 2);
        let conn = NonlinearConnection::zero(2, 2);
        let g_h = vec![
            parse_expr("(+ 2 (* 0.3 (sin x1)))", D22).unwrap(),
            parse_expr("(* 0.25 x2)", D22).unwrap(),
            parse_expr("(* 0.25 x2)", D22).unwrap(),
            parse_expr("(+ 1.5 (* 0.2 x1))", D22).unwrap(),
        ];
        let g = PseudoMetric::from_exprs(2, 2, g_h.clone(), vec![Expr::one(), Expr::zero(), Expr::zero(), Expr::one()]).unwrap();
        let dlc = metrizable_from(&spec, &conn, &Dlc::zero(2, 2), &g);
        let pt = Point::new(vec![0.4, -0.8], vec![0.6, 0.2]);
        // Independent oracle: dense loop over the classical formula.
        let gj: Vec<Jet> = g_h
            .iter()
            .map(|e| crate::expr::eval_jet(e, &pt, 1).unwrap())
            .collect();
        let gv: Vec<Vec<f64>> = (0..2)
            .map(|i| (0..2).map(|j| gj[i * 2 + j].value()).collect())
            .collect();
        let ginv = crate::linalg::invert(&gv).unwrap();
        for al in 0..2 {
            for be in 0..2 {
                for ga in 0..2 {
                    let mut want = 0.0;
                    for ep in 0..2 {
                        want += 0.5
                            * ginv[al][ep]
                            * (gj[ep * 2 + be].grad(ga) + gj[ep * 2 + ga].grad(be)
                                - gj[be * 2 + ga].grad(ep));
                    }
                    let got = dlc.hh_f(al, be, ga).jet(&pt, 0).unwrap().value();
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }
}
