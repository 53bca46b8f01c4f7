//! Small dense linear algebra over plain values and over jets.
//!
//! Block sizes here are the fiber ranks (a handful at most), so everything is
//! direct Gauss elimination. Inverting a matrix of jets propagates derivatives
//! of the inverse exactly, which is how derived formulas differentiate through
//! metric inverses.

use crate::expr::EvalError;
use crate::field::{fn_field, Field};
use crate::jet::{Jet, Point};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("singular matrix (|det| = {det:.3e}, cond >= {cond:.3e})")]
    Singular { det: f64, cond: f64 },
}

/// LU determinant of a square value matrix.
pub fn det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut d = 1.0;
    for col in 0..n {
        let (piv, pv) = (col..n)
            .map(|r| (r, m[r][col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pv == 0.0 {
            return 0.0;
        }
        if piv != col {
            m.swap(piv, col);
            d = -d;
        }
        d *= m[col][col];
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    d
}

pub fn one_norm(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    (0..n)
        .map(|c| (0..n).map(|r| a[r][c].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Invert a value matrix, reporting determinant and a 1-norm condition estimate.
pub fn invert(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, LinalgError> {
    let jets: Vec<Vec<Jet>> = a
        .iter()
        .map(|row| row.iter().map(|v| Jet::constant(1, 0, *v)).collect())
        .collect();
    let inv = invert_jets(&jets)?;
    Ok(inv
        .into_iter()
        .map(|row| row.into_iter().map(|j| j.value()).collect())
        .collect())
}

/// Condition estimate `||A||_1 ||A^-1||_1`; `f64::INFINITY` when singular.
pub fn cond_estimate(a: &[Vec<f64>]) -> f64 {
    match invert(a) {
        Ok(inv) => one_norm(a) * one_norm(&inv),
        Err(_) => f64::INFINITY,
    }
}

/// Gauss-Jordan inverse of a matrix of jets; pivoting on values.
pub fn invert_jets(a: &[Vec<Jet>]) -> Result<Vec<Vec<Jet>>, LinalgError> {
    let n = a.len();
    let (nv, ord) = (a[0][0].nvars(), a[0][0].order());
    let mut m: Vec<Vec<Jet>> = a.to_vec();
    let mut inv: Vec<Vec<Jet>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| Jet::constant(nv, ord, if i == j { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect();
    let values: Vec<Vec<f64>> = m
        .iter()
        .map(|row| row.iter().map(|j| j.value()).collect())
        .collect();
    let scale = one_norm(&values).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let (piv, pv) = (col..n)
            .map(|r| (r, m[r][col].value().abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pv < 1e-13 * scale {
            let d = det(&values);
            return Err(LinalgError::Singular {
                det: d,
                cond: f64::INFINITY,
            });
        }
        if piv != col {
            m.swap(piv, col);
            inv.swap(piv, col);
        }
        let pivot = m[col][col].clone();
        let pinv = pivot.recip().expect("pivot checked nonzero");
        for c in 0..n {
            m[col][c] = m[col][c].mul(&pinv);
            inv[col][c] = inv[col][c].mul(&pinv);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r][col].clone();
            if f.max_abs() == 0.0 {
                continue;
            }
            for c in 0..n {
                let t = f.mul(&m[col][c]);
                m[r][c] = m[r][c].sub(&t);
                let t = f.mul(&inv[col][c]);
                inv[r][c] = inv[r][c].sub(&t);
            }
        }
    }
    Ok(inv)
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m = a.to_vec();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i][j].abs();
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// Evaluate a square grid of fields (row-major) into a matrix of jets.
pub fn field_matrix_jets(
    fields: &[Field],
    n: usize,
    pt: &Point,
    order: u8,
) -> Result<Vec<Vec<Jet>>, EvalError> {
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            row.push(fields[i * n + j].jet(pt, order)?);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Field handles for the entries of the inverse of a field matrix.
///
/// Each handle re-inverts the full block at evaluation time; blocks are tiny.
pub fn inverse_field_matrix(fields: Vec<Field>, n: usize) -> Vec<Field> {
    let shared: std::sync::Arc<Vec<Field>> = std::sync::Arc::new(fields);
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let fields = shared.clone();
            out.push(fn_field(move |pt: &Point, order: u8| {
                let m = field_matrix_jets(&fields, n, pt, order)?;
                let inv = invert_jets(&m).map_err(|e| EvalError::Domain {
                    source: crate::jet::JetError::Domain {
                        op: "matrix inverse",
                        value: match &e {
                            LinalgError::Singular { det, .. } => *det,
                        },
                    },
                    subexpr: "metric block".into(),
                })?;
                Ok(inv[i][j].clone())
            }));
        }
    }
    out
}
