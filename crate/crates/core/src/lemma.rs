//! Planar check that a step toward both the ground truth and the PSG target
//! lands closer to the ground truth than a step toward the ground truth alone.
//!
//! A is the current prediction, B the ground truth, C the PSG target. The main
//! loss moves A to A1 on AB, the auxiliary loss moves A to A3 on AC, and the
//! combined step reaches A2 = A1 + (A3 − A).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;

pub type Point = [f64; 2];

const MIN_AREA: f64 = 1e-9;

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s]
}

pub fn dist(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    d[0].hypot(d[1])
}

fn triangle_area(a: Point, b: Point, c: Point) -> f64 {
    let (u, v) = (sub(b, a), sub(c, a));
    0.5 * (u[0] * v[1] - u[1] * v[0]).abs()
}

/// Interior angle at `at` of the triangle (at, p, q), in radians.
pub fn angle(at: Point, p: Point, q: Point) -> f64 {
    let (u, v) = (sub(p, at), sub(q, at));
    let cos = (u[0] * v[0] + u[1] * v[1]) / (u[0].hypot(u[1]) * v[0].hypot(v[1]));
    cos.clamp(-1.0, 1.0).acos()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaConfig {
    pub a: Point,
    pub b: Point,
    pub c: Point,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LemmaConfig {
    pub fn validate(&self) -> Result<()> {
        if dist(self.b, self.c) >= dist(self.a, self.b) {
            return Err(Error::Config("|BC| must be smaller than |AB|".into()));
        }
        if triangle_area(self.a, self.b, self.c) <= MIN_AREA {
            return Err(Error::Config("A, B and C are collinear".into()));
        }
        if !(self.lambda1 > 0.0 && self.lambda1 < 1.0 && self.lambda2 > 0.0 && self.lambda2 < 1.0)
        {
            return Err(Error::Config("step fractions must lie in (0, 1)".into()));
        }
        if self.lambda2 >= 1.0 - self.lambda1 {
            return Err(Error::Config("lambda2 must be below 1 - lambda1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Steps {
    /// Main loss only.
    pub a1: Point,
    /// Main and auxiliary loss together.
    pub a2: Point,
    /// Auxiliary loss only.
    pub a3: Point,
}

/// Step construction without validation; zero fractions are allowed.
pub fn steps(cfg: &LemmaConfig) -> Steps {
    let a1 = add(cfg.a, scale(sub(cfg.b, cfg.a), cfg.lambda1));
    let a3 = add(cfg.a, scale(sub(cfg.c, cfg.a), cfg.lambda2));
    let a2 = add(a1, sub(a3, cfg.a));
    Steps { a1, a2, a3 }
}

/// Validated step construction.
pub fn combined_step(cfg: &LemmaConfig) -> Result<Steps> {
    if triangle_area(cfg.a, cfg.b, cfg.c) <= MIN_AREA {
        return Err(Error::Config("A, B and C are collinear".into()));
    }
    Ok(steps(cfg))
}

/// |A1B| − |A2B|; positive when the combined step wins.
pub fn margin(cfg: &LemmaConfig) -> f64 {
    let s = steps(cfg);
    dist(s.a1, cfg.b) - dist(s.a2, cfg.b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    pub samples: usize,
    pub violations: usize,
    /// Configurations where ∠CAB < ∠ACB failed.
    pub angle_violations: usize,
    pub min_margin: f64,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.angle_violations == 0 && self.min_margin > 0.0
    }
}

/// Draws a valid configuration from the unit square by rejection.
pub fn sample_config(rng: &mut impl Rng) -> LemmaConfig {
    let pt = |r: &mut dyn rand::RngCore| [r.gen::<f64>(), r.gen::<f64>()];
    loop {
        let (a, b, c) = (pt(rng), pt(rng), pt(rng));
        let lambda1 = rng.gen_range(0.0..1.0);
        let lambda2 = rng.gen_range(0.0..1.0) * (1.0 - lambda1);
        let cfg = LemmaConfig {
            a,
            b,
            c,
            lambda1,
            lambda2,
        };
        if cfg.validate().is_ok() {
            return cfg;
        }
    }
}

/// Samples `n` valid configurations (sample `i` from its own random stream)
/// and checks the distance inequality and the angle ordering on each.
pub fn verify_lemma(n: usize, seed: u64) -> LemmaReport {
    let results = par::map_indexed(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let cfg = sample_config(&mut rng);
        let m = margin(&cfg);
        let angles_ok = angle(cfg.a, cfg.c, cfg.b) < angle(cfg.c, cfg.a, cfg.b);
        (m, angles_ok)
    });
    LemmaReport {
        samples: n,
        violations: results.iter().filter(|(m, _)| !(*m > 0.0)).count(),
        angle_violations: results.iter().filter(|(_, ok)| !ok).count(),
        min_margin: results.iter().map(|(m, _)| *m).fold(f64::INFINITY, f64::min),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concrete() -> LemmaConfig {
        LemmaConfig {
            a: [0.0, 0.0],
            b: [4.0, 0.0],
            c: [3.0, 1.0],
            lambda1: 0.25,
            lambda2: 0.25,
        }
    }

    #[test]
    fn concrete_steps() {
        let s = combined_step(&concrete()).unwrap();
        assert_eq!(s.a1, [1.0, 0.0]);
        assert_eq!(s.a3, [0.75, 0.25]);
        assert_eq!(s.a2, [1.75, 0.25]);
        let cfg = concrete();
        assert_eq!(dist(s.a1, cfg.b), 3.0);
        assert!((dist(s.a2, cfg.b) - 5.125f64.sqrt()).abs() < 1e-15);
        assert!((dist(s.a2, cfg.b) - 2.2638).abs() < 1e-4);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn zero_steps_stay_put() {
        let cfg = LemmaConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..concrete()
        };
        let s = steps(&cfg);
        assert_eq!((s.a1, s.a2, s.a3), (cfg.a, cfg.a, cfg.a));
    }

    #[test]
    fn collinear_rejected() {
        let cfg = LemmaConfig {
            c: [2.0, 0.0],
            ..concrete()
        };
        assert!(combined_step(&cfg).is_err());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn margin_vanishes_at_the_boundary() {
        // |BC| = |AB| and λ2 = 1 − λ1 together close the gap
        let theta: f64 = 0.3;
        let cfg = LemmaConfig {
            a: [0.0, 0.0],
            b: [1.0, 0.0],
            c: [1.0 - theta.cos(), theta.sin()],
            lambda1: 0.3,
            lambda2: 0.7,
        };
        assert!(cfg.validate().is_err());
        assert!(margin(&cfg).abs() < 1e-10);
    }

    #[test]
    fn overshoot_can_fail() {
        // outside the ideal-step regime the combined step may overshoot
        let cfg = LemmaConfig {
            lambda1: 0.9,
            lambda2: 0.9,
            ..concrete()
        };
        assert!(cfg.validate().is_err());
        assert!(margin(&cfg) < 0.0);
    }

    #[test]
    fn small_sweep_passes() {
        let r = verify_lemma(500, 1);
        assert!(r.passed(), "{r:?}");
    }
}
