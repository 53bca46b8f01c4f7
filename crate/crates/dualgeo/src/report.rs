//! Check reports: the unit of certification every check emits.

use crate::jet::Point;

/// Outcome of one numerical check over sampled points.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    pub max_residual: f64,
    pub worst_point: Point,
    pub samples_used: usize,
    pub notes: String,
}

impl CheckReport {
    pub fn failed(name: &str, notes: String) -> CheckReport {
        CheckReport {
            name: name.to_string(),
            pass: false,
            max_residual: f64::MAX,
            worst_point: Point::new(Vec::new(), Vec::new()),
            samples_used: 0,
            notes,
        }
    }
}

/// Running maximum of a residual together with the point attaining it.
#[derive(Debug, Clone)]
pub struct ResidualTracker {
    pub max: f64,
    pub worst: Point,
}

impl ResidualTracker {
    pub fn new() -> ResidualTracker {
        ResidualTracker {
            max: 0.0,
            worst: Point::new(Vec::new(), Vec::new()),
        }
    }

    pub fn update(&mut self, residual: f64, pt: &Point) {
        let r = if residual.is_finite() {
            residual
        } else {
            f64::MAX
        };
        if r >= self.max {
            self.max = r;
            self.worst = pt.clone();
        }
    }

    pub fn merge(&mut self, other: &ResidualTracker) {
        if other.max >= self.max {
            self.max = other.max;
            self.worst = other.worst.clone();
        }
    }

    pub fn into_report(self, name: &str, tol: f64, samples: usize, notes: String) -> CheckReport {
        CheckReport {
            name: name.to_string(),
            pass: self.max < tol,
            max_residual: self.max,
            worst_point: self.worst,
            samples_used: samples,
            notes,
        }
    }
}

impl Default for ResidualTracker {
    fn default() -> Self {
        Self::new()
    }
}
