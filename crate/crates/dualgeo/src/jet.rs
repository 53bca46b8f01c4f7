//! Forward-mode jet arithmetic: values together with exact partial
//! derivatives up to third order in all base and fiber coordinates.
//!
//! Every frame, connection coefficient, and compatibility residual downstream
//! is evaluated through jets, so the derivative exactness here is what makes
//! the residual certificates meaningful. Finite differences are confined to
//! test oracles.

use thiserror::Error;

/// Highest derivative order the engine propagates.
pub const MAX_ORDER: u8 = 3;

/// A point of the dual total space: base coordinates `x` and momenta `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
}

impl Point {
    pub fn new(x: Vec<f64>, p: Vec<f64>) -> Self {
        Point { x, p }
    }

    /// Total coordinate count `m + r`.
    pub fn dim(&self) -> usize {
        self.x.len() + self.p.len()
    }

    /// Flat coordinate access: base coordinates first, then momenta.
    pub fn coord(&self, i: usize) -> f64 {
        if i < self.x.len() {
            self.x[i]
        } else {
            self.p[i - self.x.len()]
        }
    }

    pub fn fiber_norm(&self) -> f64 {
        self.p.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JetError {
    #[error("{op}: argument {value} outside domain")]
    Domain { op: &'static str, value: f64 },
    #[error("requested jet order {requested} exceeds maximum {max}")]
    Order { requested: u8, max: u8 },
}

fn len2(n: usize) -> usize {
    n * (n + 1) / 2
}

fn len3(n: usize) -> usize {
    n * (n + 1) * (n + 2) / 6
}

fn idx2(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    j * (j + 1) / 2 + i
}

fn idx3(i: usize, j: usize, k: usize) -> usize {
    let mut v = [i, j, k];
    v.sort_unstable();
    let [i, j, k] = v;
    k * (k + 1) * (k + 2) / 6 + j * (j + 1) / 2 + i
}

/// Truncated Taylor expansion of a scalar quantity at a point.
///
/// Second and third derivative slots are stored packed-symmetric, so the
/// symmetry invariants hold exactly by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    n: usize,
    order: u8,
    v: f64,
    g: Vec<f64>,
    h: Vec<f64>,
    t: Vec<f64>,
}

impl Jet {
    pub fn constant(n: usize, order: u8, value: f64) -> Jet {
        debug_assert!(order <= MAX_ORDER);
        Jet {
            n,
            order,
            v: value,
            g: if order >= 1 { vec![0.0; n] } else { Vec::new() },
            h: if order >= 2 { vec![0.0; len2(n)] } else { Vec::new() },
            t: if order >= 3 { vec![0.0; len3(n)] } else { Vec::new() },
        }
    }

    /// Jet of the `idx`-th coordinate function at a point where it takes `value`.
    pub fn coordinate(n: usize, order: u8, idx: usize, value: f64) -> Jet {
        let mut j = Jet::constant(n, order, value);
        if order >= 1 {
            j.g[idx] = 1.0;
        }
        j
    }

    pub fn nvars(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> u8 {
        self.order
    }

    pub fn value(&self) -> f64 {
        self.v
    }

    pub fn grad(&self, i: usize) -> f64 {
        self.g[i]
    }

    pub fn hess(&self, i: usize, j: usize) -> f64 {
        self.h[idx2(i, j)]
    }

    pub fn third(&self, i: usize, j: usize, k: usize) -> f64 {
        self.t[idx3(i, j, k)]
    }

    /// Max absolute entry across all stored slots.
    pub fn max_abs(&self) -> f64 {
        let mut m = self.v.abs();
        for s in self.g.iter().chain(self.h.iter()).chain(self.t.iter()) {
            m = m.max(s.abs());
        }
        m
    }

    /// Copy of the jet truncated to a lower (or equal) order.
    pub fn truncate(&self, order: u8) -> Jet {
        debug_assert!(order <= self.order);
        Jet {
            n: self.n,
            order,
            v: self.v,
            g: if order >= 1 { self.g.clone() } else { Vec::new() },
            h: if order >= 2 { self.h.clone() } else { Vec::new() },
            t: if order >= 3 { self.t.clone() } else { Vec::new() },
        }
    }

    /// Jet of the partial derivative with respect to coordinate `i`,
    /// one order lower than `self`.
    pub fn derivative(&self, i: usize) -> Result<Jet, JetError> {
        if self.order == 0 {
            return Err(JetError::Order {
                requested: self.order + 1,
                max: MAX_ORDER,
            });
        }
        let n = self.n;
        let order = self.order - 1;
        let mut out = Jet::constant(n, order, self.g[i]);
        if order >= 1 {
            for j in 0..n {
                out.g[j] = self.hess(i, j);
            }
        }
        if order >= 2 {
            for j in 0..n {
                for k in j..n {
                    out.h[idx2(j, k)] = self.third(i, j, k);
                }
            }
        }
        Ok(out)
    }

    fn zip(&self, o: &Jet, f: impl Fn(f64, f64) -> f64) -> Jet {
        debug_assert_eq!(self.n, o.n);
        debug_assert_eq!(self.order, o.order);
        Jet {
            n: self.n,
            order: self.order,
            v: f(self.v, o.v),
            g: self.g.iter().zip(&o.g).map(|(a, b)| f(*a, *b)).collect(),
            h: self.h.iter().zip(&o.h).map(|(a, b)| f(*a, *b)).collect(),
            t: self.t.iter().zip(&o.t).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn add(&self, o: &Jet) -> Jet {
        self.zip(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Jet) -> Jet {
        self.zip(o, |a, b| a - b)
    }

    pub fn neg(&self) -> Jet {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Jet {
        Jet {
            n: self.n,
            order: self.order,
            v: c * self.v,
            g: self.g.iter().map(|a| c * a).collect(),
            h: self.h.iter().map(|a| c * a).collect(),
            t: self.t.iter().map(|a| c * a).collect(),
        }
    }

    pub fn add_scaled(&mut self, c: f64, o: &Jet) {
        debug_assert_eq!(self.n, o.n);
        debug_assert_eq!(self.order, o.order);
        self.v += c * o.v;
        for (a, b) in self.g.iter_mut().zip(&o.g) {
            *a += c * b;
        }
        for (a, b) in self.h.iter_mut().zip(&o.h) {
            *a += c * b;
        }
        for (a, b) in self.t.iter_mut().zip(&o.t) {
            *a += c * b;
        }
    }

    /// Leibniz product to the stored order.
    pub fn mul(&self, o: &Jet) -> Jet {
        debug_assert_eq!(self.n, o.n);
        debug_assert_eq!(self.order, o.order);
        let n = self.n;
        let mut w = Jet::constant(n, self.order, self.v * o.v);
        if self.order >= 1 {
            for i in 0..n {
                w.g[i] = self.g[i] * o.v + self.v * o.g[i];
            }
        }
        if self.order >= 2 {
            for i in 0..n {
                for j in i..n {
                    w.h[idx2(i, j)] = self.hess(i, j) * o.v
                        + self.g[i] * o.g[j]
                        + self.g[j] * o.g[i]
                        + self.v * o.hess(i, j);
                }
            }
        }
        if self.order >= 3 {
            for i in 0..n {
                for j in i..n {
                    for k in j..n {
                        w.t[idx3(i, j, k)] = self.third(i, j, k) * o.v
                            + self.hess(i, j) * o.g[k]
                            + self.hess(i, k) * o.g[j]
                            + self.hess(j, k) * o.g[i]
                            + self.g[i] * o.hess(j, k)
                            + self.g[j] * o.hess(i, k)
                            + self.g[k] * o.hess(i, j)
                            + self.v * o.third(i, j, k);
                    }
                }
            }
        }
        w
    }

    /// Chain rule for a scalar map with derivative values `d[0..=3]` at `self.value()`.
    fn compose(&self, d: [f64; 4]) -> Jet {
        let n = self.n;
        let mut w = Jet::constant(n, self.order, d[0]);
        if self.order >= 1 {
            for i in 0..n {
                w.g[i] = d[1] * self.g[i];
            }
        }
        if self.order >= 2 {
            for i in 0..n {
                for j in i..n {
                    w.h[idx2(i, j)] = d[2] * self.g[i] * self.g[j] + d[1] * self.hess(i, j);
                }
            }
        }
        if self.order >= 3 {
            for i in 0..n {
                for j in i..n {
                    for k in j..n {
                        w.t[idx3(i, j, k)] = d[3] * self.g[i] * self.g[j] * self.g[k]
                            + d[2]
                                * (self.hess(i, j) * self.g[k]
                                    + self.hess(i, k) * self.g[j]
                                    + self.hess(j, k) * self.g[i])
                            + d[1] * self.third(i, j, k);
                    }
                }
            }
        }
        w
    }

    pub fn sin(&self) -> Jet {
        let (s, c) = self.v.sin_cos();
        self.compose([s, c, -s, -c])
    }

    pub fn cos(&self) -> Jet {
        let (s, c) = self.v.sin_cos();
        self.compose([c, -s, -c, s])
    }

    pub fn exp(&self) -> Jet {
        let e = self.v.exp();
        self.compose([e, e, e, e])
    }

    pub fn log(&self) -> Result<Jet, JetError> {
        if self.v <= 0.0 {
            return Err(JetError::Domain {
                op: "log",
                value: self.v,
            });
        }
        let v = self.v;
        Ok(self.compose([v.ln(), 1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v)]))
    }

    pub fn sqrt(&self) -> Result<Jet, JetError> {
        if self.v <= 0.0 {
            return Err(JetError::Domain {
                op: "sqrt",
                value: self.v,
            });
        }
        let s = self.v.sqrt();
        let v = self.v;
        Ok(self.compose([s, 0.5 / s, -0.25 / (s * v), 0.375 / (s * v * v)]))
    }

    pub fn recip(&self) -> Result<Jet, JetError> {
        if self.v == 0.0 {
            return Err(JetError::Domain {
                op: "div",
                value: self.v,
            });
        }
        let v = self.v;
        let v2 = v * v;
        Ok(self.compose([1.0 / v, -1.0 / v2, 2.0 / (v2 * v), -6.0 / (v2 * v2)]))
    }

    pub fn div(&self, o: &Jet) -> Result<Jet, JetError> {
        Ok(self.mul(&o.recip()?))
    }

    /// Power with a constant real exponent. Integer exponents of modest size
    /// are expanded by repeated multiplication so negative bases stay valid.
    pub fn pow(&self, c: f64) -> Result<Jet, JetError> {
        if c == 0.0 {
            return Ok(Jet::constant(self.n, self.order, 1.0));
        }
        if c.fract() == 0.0 && c.abs() <= 64.0 {
            let k = c as i64;
            let mut acc = Jet::constant(self.n, self.order, 1.0);
            for _ in 0..k.unsigned_abs() {
                acc = acc.mul(self);
            }
            if k < 0 {
                acc = acc.recip().map_err(|_| JetError::Domain {
                    op: "pow",
                    value: self.v,
                })?;
            }
            return Ok(acc);
        }
        if self.v <= 0.0 {
            return Err(JetError::Domain {
                op: "pow",
                value: self.v,
            });
        }
        let v = self.v;
        Ok(self.compose([
            v.powf(c),
            c * v.powf(c - 1.0),
            c * (c - 1.0) * v.powf(c - 2.0),
            c * (c - 1.0) * (c - 2.0) * v.powf(c - 3.0),
        ]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(n: usize, order: u8, idx: usize, v: f64) -> Jet {
        Jet::coordinate(n, order, idx, v)
    }

    #[test]
    fn monomial_square() {
        // f = x1^2 at x1 = 3: value 9, df = 6, d2f = 2, everything else 0.
        let x = var(4, 2, 0, 3.0);
        let f = x.mul(&x);
        assert_eq!(f.value(), 9.0);
        assert_eq!(f.grad(0), 6.0);
        assert_eq!(f.hess(0, 0), 2.0);
        assert_eq!(f.grad(1), 0.0);
        assert_eq!(f.hess(0, 1), 0.0);
    }

    #[test]
    fn sine_at_origin() {
        let x = var(2, 2, 0, 0.0);
        let f = x.sin();
        assert_eq!(f.value(), 0.0);
        assert_eq!(f.grad(0), 1.0);
        assert_eq!(f.hess(0, 0), 0.0);
    }

    #[test]
    fn third_order_exp() {
        // f = exp(2x) at x = 0: all derivative slots are powers of 2.
        let x = var(1, 3, 0, 0.0);
        let f = x.scale(2.0).exp();
        assert_eq!(f.value(), 1.0);
        assert_eq!(f.grad(0), 2.0);
        assert_eq!(f.hess(0, 0), 4.0);
        assert_eq!(f.third(0, 0, 0), 8.0);
    }

    #[test]
    fn mixed_third_partials_symmetric_by_storage() {
        // f = x*y*z has d3f/dxdydz = 1 regardless of index order.
        let x = var(3, 3, 0, 0.7);
        let y = var(3, 3, 1, -1.3);
        let z = var(3, 3, 2, 0.4);
        let f = x.mul(&y).mul(&z);
        let d = f.third(0, 1, 2);
        assert_eq!(d, 1.0);
        assert_eq!(f.third(2, 0, 1), d);
        assert_eq!(f.third(1, 2, 0), d);
    }

    #[test]
    fn quotient_rule() {
        // f = x / y at (1, 2).
        let x = var(2, 2, 0, 1.0);
        let y = var(2, 2, 1, 2.0);
        let f = x.div(&y).unwrap();
        assert!((f.value() - 0.5).abs() < 1e-15);
        assert!((f.grad(0) - 0.5).abs() < 1e-15);
        assert!((f.grad(1) + 0.25).abs() < 1e-15);
        assert!((f.hess(0, 1) + 0.25).abs() < 1e-15);
        assert!((f.hess(1, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn integer_power_of_negative_base() {
        let x = var(1, 2, 0, -2.0);
        let f = x.pow(3.0).unwrap();
        assert_eq!(f.value(), -8.0);
        assert_eq!(f.grad(0), 12.0);
        assert_eq!(f.hess(0, 0), -12.0);
    }

    #[test]
    fn domain_errors() {
        let x = var(1, 1, 0, -1.0);
        assert!(x.log().is_err());
        assert!(x.sqrt().is_err());
        assert!(x.pow(0.5).is_err());
        let z = Jet::constant(1, 1, 0.0);
        assert!(x.div(&z).is_err());
    }

    #[test]
    fn derivative_slice_shifts_slots() {
        // f = x^2 y at (3, 5); df/dx = 2xy as an order-2 jet.
        let x = var(2, 3, 0, 3.0);
        let y = var(2, 3, 1, 5.0);
        let f = x.mul(&x).mul(&y);
        let fx = f.derivative(0).unwrap();
        assert_eq!(fx.order(), 2);
        assert_eq!(fx.value(), 30.0);
        assert_eq!(fx.grad(0), 10.0);
        assert_eq!(fx.grad(1), 6.0);
        assert_eq!(fx.hess(0, 1), 2.0);
    }
}
