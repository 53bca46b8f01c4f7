//! Evaluated-field handles: shared, jet-evaluable scalar quantities.
//!
//! Expressions are one source of fields; every derived quantity (adapted-frame
//! derivatives, covariant derivatives, inverse metric entries, constructed
//! connection coefficients) is a field too, built compositionally. Requesting
//! an order-`k` jet of a derivative field pulls an order-`k+1` jet of its
//! ingredient, so derivative towers stay exact until the global order cap.

use crate::expr::{Dims, EvalError, Expr};
use crate::jet::{Jet, Point};
use std::sync::Arc;

pub trait ScalarField: Send + Sync {
    fn jet(&self, pt: &Point, order: u8) -> Result<Jet, EvalError>;
}

/// Shared handle to an evaluable scalar field.
pub type Field = Arc<dyn ScalarField>;

struct ExprField(Expr);

impl ScalarField for ExprField {
    fn jet(&self, pt: &Point, order: u8) -> Result<Jet, EvalError> {
        crate::expr::eval_jet(&self.0, pt, order)
    }
}

struct ConstField(f64);

impl ScalarField for ConstField {
    fn jet(&self, pt: &Point, order: u8) -> Result<Jet, EvalError> {
        Ok(Jet::constant(pt.dim(), order, self.0))
    }
}

struct FnWrap<F>(F);

impl<F> ScalarField for FnWrap<F>
where
    F: Fn(&Point, u8) -> Result<Jet, EvalError> + Send + Sync,
{
    fn jet(&self, pt: &Point, order: u8) -> Result<Jet, EvalError> {
        (self.0)(pt, order)
    }
}

pub fn expr_field(e: Expr) -> Field {
    Arc::new(ExprField(e))
}

pub fn const_field(c: f64) -> Field {
    Arc::new(ConstField(c))
}

pub fn zero_field() -> Field {
    const_field(0.0)
}

pub fn fn_field<F>(f: F) -> Field
where
    F: Fn(&Point, u8) -> Result<Jet, EvalError> + Send + Sync + 'static,
{
    Arc::new(FnWrap(f))
}

/// Partial derivative of a field with respect to flat coordinate `coord`.
pub fn deriv_field(f: Field, coord: usize) -> Field {
    fn_field(move |pt, order| {
        if order + 1 > crate::jet::MAX_ORDER {
            return Err(EvalError::Order {
                requested: order + 1,
                max: crate::jet::MAX_ORDER,
            });
        }
        let j = f.jet(pt, order + 1)?;
        Ok(j.derivative(coord).expect("order checked above"))
    })
}

/// Linear combination `sum_i coeffs[i] * fields[i]`.
pub fn linear_combination(terms: Vec<(f64, Field)>) -> Field {
    fn_field(move |pt, order| {
        let mut acc = Jet::constant(pt.dim(), order, 0.0);
        for (c, f) in &terms {
            acc.add_scaled(*c, &f.jet(pt, order)?);
        }
        Ok(acc)
    })
}

pub fn add_fields(a: Field, b: Field) -> Field {
    fn_field(move |pt, order| Ok(a.jet(pt, order)?.add(&b.jet(pt, order)?)))
}

pub fn sub_fields(a: Field, b: Field) -> Field {
    fn_field(move |pt, order| Ok(a.jet(pt, order)?.sub(&b.jet(pt, order)?)))
}

pub fn mul_fields(a: Field, b: Field) -> Field {
    fn_field(move |pt, order| Ok(a.jet(pt, order)?.mul(&b.jet(pt, order)?)))
}

pub fn scale_field(a: Field, c: f64) -> Field {
    fn_field(move |pt, order| Ok(a.jet(pt, order)?.scale(c)))
}

/// Evaluate a slice of fields to plain values.
pub fn values(fields: &[Field], pt: &Point) -> Result<Vec<f64>, EvalError> {
    fields
        .iter()
        .map(|f| Ok(f.jet(pt, 0)?.value()))
        .collect()
}

/// Convert a grid of expressions (checked against `dims`) into field handles.
pub fn expr_fields(exprs: &[Expr], _dims: Dims) -> Vec<Field> {
    exprs.iter().cloned().map(expr_field).collect()
}
