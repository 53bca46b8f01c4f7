//! Deterministic point sampling for residual checks.
//!
//! Base coordinates are drawn uniformly from `[-1, 1]^m`. Momenta are drawn
//! uniformly from the annulus `FIBER_EPSILON <= |p| <= p_max`, keeping every
//! sample away from the null section where fiberwise-homogeneous quantities
//! lose smoothness.

use crate::jet::Point;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Radius of the excluded ball around the null section.
pub const FIBER_EPSILON: f64 = 1e-3;

pub struct Sampler {
    rng: ChaCha8Rng,
    m: usize,
    r: usize,
    p_max: f64,
}

impl Sampler {
    pub fn new(m: usize, r: usize, seed: u64) -> Sampler {
        Sampler::with_p_max(m, r, seed, 2.0)
    }

    pub fn with_p_max(m: usize, r: usize, seed: u64, p_max: f64) -> Sampler {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            m,
            r,
            p_max,
        }
    }

    /// Independent deterministic stream for a named sub-check.
    pub fn stream(m: usize, r: usize, seed: u64, name: &str) -> Sampler {
        Sampler::new(m, r, seed ^ fnv1a(name))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    pub fn next_point(&mut self) -> Point {
        let x = (0..self.m).map(|_| self.uniform(-1.0, 1.0)).collect();
        let p = loop {
            let cand: Vec<f64> = (0..self.r)
                .map(|_| self.uniform(-self.p_max, self.p_max))
                .collect();
            let norm = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm >= FIBER_EPSILON && norm <= self.p_max {
                break cand;
            }
        };
        Point::new(x, p)
    }

    pub fn points(&mut self, count: usize) -> Vec<Point> {
        (0..count).map(|_| self.next_point()).collect()
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
