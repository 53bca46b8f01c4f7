//! Coordinate engine and numerical certifier for anchored bracket structures
//! on dual vector bundles: adapted frames, distinguished linear connections,
//! metric compatibility, and fiberwise fundamental functions, all evaluated
//! through exact forward-mode jets and certified by sampled residuals.

// Dense index arithmetic over tiny matrices reads clearest as plain loops.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::type_complexity)]

pub mod algebroid;
pub mod connection;
pub mod expr;
pub mod field;
pub mod hamilton;
pub mod jet;
pub mod linalg;
pub mod metric;
pub mod report;
pub mod sample;
pub mod scenario;
pub mod tangent;

pub use expr::{eval_jet, parse_expr, Dims, Expr};
pub use jet::{Jet, Point};
pub use report::CheckReport;
