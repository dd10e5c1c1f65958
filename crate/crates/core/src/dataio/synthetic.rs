use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Image, Sample};
use crate::error::{Error, Result};
use crate::morphology::BinaryMask;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    /// A ring whose hollow centre still belongs to the salient object.
    Annulus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Annulus];
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(ShapeKind::Ellipse),
            "rectangle" => Ok(ShapeKind::Rectangle),
            "annulus" => Ok(ShapeKind::Annulus),
            _ => Err(Error::Config(format!("unknown shape kind {s:?}"))),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Annulus => "annulus",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub hole_fraction: f64,
    pub shape_kinds: Vec<ShapeKind>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 250,
            size: 64,
            seed: 7,
            hole_fraction: 0.7,
            shape_kinds: ShapeKind::ALL.to_vec(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthetic count must be >= 1".into()));
        }
        if self.size == 0 || self.size % 16 != 0 {
            return Err(Error::Config(format!(
                "synthetic size must be a positive multiple of 16, got {}",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.hole_fraction) {
            return Err(Error::Config(format!(
                "hole_fraction must lie in [0, 1], got {}",
                self.hole_fraction
            )));
        }
        if self.shape_kinds.is_empty() {
            return Err(Error::Config("at least one shape kind is required".into()));
        }
        Ok(())
    }
}

/// Per-pixel amplitude of the uniform texture noise.
pub(crate) const NOISE: f64 = 0.06;

/// Geometry of one salient object in pixel units.
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    /// Relative size of the background-textured core, 0 for a solid shape.
    hole: f64,
}

impl Shape {
    /// Normalized radial coordinate: ≤ 1 inside the outer boundary.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        match self.kind {
            ShapeKind::Rectangle => dx.abs().max(dy.abs()),
            ShapeKind::Ellipse | ShapeKind::Annulus => (dx * dx + dy * dy).sqrt(),
        }
    }

    fn in_object(&self, x: f64, y: f64) -> bool {
        self.radius(x, y) <= 1.0
    }

    fn in_core(&self, x: f64, y: f64) -> bool {
        self.radius(x, y) <= self.hole
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Shape {
    let s = spec.size as f64;
    let kind = spec.shape_kinds[rng.gen_range(0..spec.shape_kinds.len())];
    let (rx, ry) = match kind {
        ShapeKind::Ellipse => (rng.gen_range(0.15..0.4) * s, rng.gen_range(0.15..0.4) * s),
        ShapeKind::Rectangle => (rng.gen_range(0.12..0.35) * s, rng.gen_range(0.12..0.35) * s),
        ShapeKind::Annulus => {
            let r = rng.gen_range(0.25..0.4) * s;
            (r, r)
        }
    };
    let cx = rng.gen_range(rx..=s - rx);
    let cy = rng.gen_range(ry..=s - ry);
    let hole = match kind {
        ShapeKind::Annulus => rng.gen_range(0.45..0.6),
        _ if rng.gen_bool(spec.hole_fraction) => rng.gen_range(0.4..0.6),
        _ => 0.0,
    };
    Shape {
        kind,
        cx,
        cy,
        rx,
        ry,
        hole,
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.15..0.85),
    ]
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn generate_one(spec: &SyntheticSpec, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let background = color(&mut rng);
    let foreground = loop {
        let c = color(&mut rng);
        if distance(c, background) > 0.35 {
            break c;
        }
    };
    let shape = sample_shape(&mut rng, spec);
    let n = spec.size;
    let mut data = Vec::with_capacity(3 * n * n);
    let mut mask = BinaryMask::zeros(n, n);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let object = shape.in_object(px, py);
            mask.set(x, y, object);
            let base = if object && !shape.in_core(px, py) {
                foreground
            } else {
                background
            };
            for c in base {
                data.push((c + rng.gen_range(-NOISE..NOISE)).clamp(0.0, 1.0));
            }
        }
    }
    let image = Image::new(n, n, data).expect("sized");
    Sample::new(format!("syn_{index:05}"), image, mask).expect("sized")
}

/// Deterministic synthetic dataset. Each sample draws from its own random
/// stream, so the result does not depend on evaluation order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok(par::map_indexed(spec.count, |i| generate_one(spec, i)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_size() {
        let spec = SyntheticSpec {
            size: 40,
            ..Default::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec {
            count: 5,
            size: 32,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }
}
