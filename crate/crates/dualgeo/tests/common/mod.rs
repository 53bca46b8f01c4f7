//! Shared test oracles: central finite differences (independent of the jet
//! pipeline) and deterministic random generators for expressions and metrics.

// Each integration-test binary uses its own subset of these helpers.
#![allow(dead_code)]

use dualgeo::expr::{Dims, Expr};
use dualgeo::jet::Point;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn point_from_flat(m: usize, v: &[f64]) -> Point {
    Point::new(v[..m].to_vec(), v[m..].to_vec())
}

/// Evaluate an expression to a plain value, `None` on domain errors.
pub fn eval_value(e: &Expr, m: usize, v: &[f64]) -> Option<f64> {
    let pt = point_from_flat(m, v);
    dualgeo::eval_jet(e, &pt, 1).ok().map(|j| j.value())
}

/// Central first difference.
pub fn fd_grad(f: &dyn Fn(&[f64]) -> Option<f64>, x: &[f64], h: f64) -> Option<Vec<f64>> {
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let mut w = x.to_vec();
    for i in 0..n {
        w[i] = x[i] + h;
        let plus = f(&w)?;
        w[i] = x[i] - h;
        let minus = f(&w)?;
        w[i] = x[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Some(out)
}

/// Central second difference (diagonal three-point, off-diagonal four-point).
pub fn fd_hess(f: &dyn Fn(&[f64]) -> Option<f64>, x: &[f64], h: f64) -> Option<Vec<Vec<f64>>> {
    let n = x.len();
    let f0 = f(x)?;
    let mut out = vec![vec![0.0; n]; n];
    let mut w = x.to_vec();
    for i in 0..n {
        w[i] = x[i] + h;
        let plus = f(&w)?;
        w[i] = x[i] - h;
        let minus = f(&w)?;
        w[i] = x[i];
        out[i][i] = (plus - 2.0 * f0 + minus) / (h * h);
        for j in i + 1..n {
            let mut eval = |si: f64, sj: f64| -> Option<f64> {
                w[i] = x[i] + si * h;
                w[j] = x[j] + sj * h;
                let v = f(&w);
                w[i] = x[i];
                w[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0)? - eval(1.0, -1.0)? - eval(-1.0, 1.0)? + eval(-1.0, -1.0)?)
                / (4.0 * h * h);
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    Some(out)
}

/// Central third difference via the eight-point product stencil; valid for
/// repeated indices as well.
pub fn fd_third(
    f: &dyn Fn(&[f64]) -> Option<f64>,
    x: &[f64],
    h: f64,
    i: usize,
    j: usize,
    k: usize,
) -> Option<f64> {
    let mut acc = 0.0;
    let mut w = x.to_vec();
    for si in [-1.0, 1.0] {
        for sj in [-1.0, 1.0] {
            for sk in [-1.0, 1.0] {
                w.copy_from_slice(x);
                w[i] += si * h;
                w[j] += sj * h;
                w[k] += sk * h;
                acc += si * sj * sk * f(&w)?;
            }
        }
    }
    Some(acc / (8.0 * h * h * h))
}

/// Richardson-extrapolated third difference, knocking out the leading
/// truncation term of the plain stencil.
pub fn fd_third_rich(
    f: &dyn Fn(&[f64]) -> Option<f64>,
    x: &[f64],
    h: f64,
    i: usize,
    j: usize,
    k: usize,
) -> Option<f64> {
    let coarse = fd_third(f, x, h, i, j, k)?;
    let fine = fd_third(f, x, h / 2.0, i, j, k)?;
    Some((4.0 * fine - coarse) / 3.0)
}

pub fn close_rel(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Random expression of bounded depth over the given dimensions; arguments of
/// partial operations are kept inside their domains by construction.
pub fn random_expr(rng: &mut ChaCha8Rng, dims: Dims, depth: usize) -> Expr {
    if depth == 0 {
        return match rng.gen_range(0..3) {
            0 => Expr::constant((rng.gen_range(-2.0..2.0f64) * 100.0).round() / 100.0),
            1 => Expr::x(rng.gen_range(0..dims.m)),
            _ => Expr::p(rng.gen_range(0..dims.r)),
        };
    }
    let sub = |rng: &mut ChaCha8Rng| random_expr(rng, dims, depth - 1);
    let positive = |rng: &mut ChaCha8Rng| {
        // 0.5 + 0.5 * e^2 stays positive and bounded away from zero.
        let e = random_expr(rng, dims, depth - 1);
        Expr::Add(vec![
            Expr::constant(0.5),
            Expr::Mul(vec![Expr::constant(0.5), Expr::Pow(Box::new(e), 2.0)]),
        ])
    };
    match rng.gen_range(0..10) {
        0 => Expr::Add(vec![sub(rng), sub(rng)]),
        1 => Expr::Sub(Box::new(sub(rng)), Box::new(sub(rng))),
        2 => Expr::Mul(vec![sub(rng), sub(rng)]),
        3 => Expr::Neg(Box::new(sub(rng))),
        4 => Expr::Sin(Box::new(sub(rng))),
        5 => Expr::Cos(Box::new(sub(rng))),
        6 => Expr::Exp(Box::new(Expr::Mul(vec![Expr::constant(0.4), sub(rng)]))),
        7 => Expr::Log(Box::new(positive(rng))),
        8 => Expr::Sqrt(Box::new(positive(rng))),
        _ => Expr::Div(Box::new(sub(rng)), Box::new(positive(rng))),
    }
}

/// Random polynomial of total degree at most `deg` in all coordinates.
pub fn random_polynomial(rng: &mut ChaCha8Rng, dims: Dims, deg: usize, terms: usize) -> Expr {
    let n = dims.total();
    let mut sum = vec![Expr::constant((rng.gen_range(-1.0..1.0f64) * 100.0).round() / 100.0)];
    for _ in 0..terms {
        let order = rng.gen_range(1..=deg);
        let mut factors = vec![Expr::constant(
            (rng.gen_range(-1.0..1.0f64) * 100.0).round() / 100.0,
        )];
        for _ in 0..order {
            let c = rng.gen_range(0..n);
            factors.push(if c < dims.m {
                Expr::x(c)
            } else {
                Expr::p(c - dims.m)
            });
        }
        sum.push(Expr::Mul(factors));
    }
    Expr::Add(sum)
}

/// Small symmetric polynomial perturbation of a scaled identity block, kept
/// nondegenerate on the sampling domain.
pub fn random_metric_block(
    rng: &mut ChaCha8Rng,
    dims: Dims,
    n: usize,
    with_momenta: bool,
) -> Vec<Expr> {
    let mut entries = vec![Expr::zero(); n * n];
    let coord = |rng: &mut ChaCha8Rng| {
        let total = if with_momenta { dims.total() } else { dims.m };
        let c = rng.gen_range(0..total);
        if c < dims.m {
            Expr::x(c)
        } else {
            Expr::p(c - dims.m)
        }
    };
    for i in 0..n {
        for j in i..n {
            let mut terms = Vec::new();
            if i == j {
                terms.push(Expr::constant(1.2 + rng.gen_range(0.0..0.4)));
            }
            for _ in 0..2 {
                let c = (rng.gen_range(-0.03..0.03f64) * 1000.0).round() / 1000.0;
                let order = rng.gen_range(1..=2);
                let mut factors = vec![Expr::constant(c)];
                for _ in 0..order {
                    factors.push(coord(rng));
                }
                terms.push(Expr::Mul(factors));
            }
            let e = Expr::Add(terms);
            entries[i * n + j] = e.clone();
            entries[j * n + i] = e;
        }
    }
    entries
}
