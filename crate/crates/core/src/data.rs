//! Synthetic 2D datasets.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{normal, Rng};
use crate::tensor::Tensor;

/// Which toy distribution to draw from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Toy {
    /// Eight isotropic Gaussians evenly spaced on a circle.
    Ring { radius: f64, std: f64 },
    /// Two interleaved half circles with additive Gaussian noise.
    Moons { noise: f64 },
}

impl Default for Toy {
    fn default() -> Self {
        Toy::Ring {
            radius: 2.0,
            std: 0.1,
        }
    }
}

impl FromStr for Toy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(Toy::default()),
            "moons" => Ok(Toy::Moons { noise: 0.05 }),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (ring|moons)"
            ))),
        }
    }
}

impl Toy {
    pub fn name(&self) -> &'static str {
        match self {
            Toy::Ring { .. } => "ring",
            Toy::Moons { .. } => "moons",
        }
    }

    /// Draws `n` points as an `[n, 2]` matrix.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Tensor {
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let (x, y) = match *self {
                Toy::Ring { radius, std } => {
                    let k = rng.random_range(0..8) as f64;
                    let a = 2.0 * PI * k / 8.0;
                    (
                        radius * a.cos() + std * normal(rng),
                        radius * a.sin() + std * normal(rng),
                    )
                }
                Toy::Moons { noise } => {
                    let u = rng.random::<f64>() * PI;
                    let (x, y) = if rng.random::<bool>() {
                        (u.cos(), u.sin())
                    } else {
                        (1.0 - u.cos(), 0.5 - u.sin())
                    };
                    // centre and scale to roughly unit variance
                    (
                        (x - 0.5) * 1.5 + noise * normal(rng),
                        (y - 0.25) * 1.5 + noise * normal(rng),
                    )
                }
            };
            data.push(x);
            data.push(y);
        }
        Tensor::matrix(n, 2, data).expect("n x 2 buffer")
    }

    /// Rotation of the ring that maps each mode onto its neighbour.
    pub fn mode_rotation() -> f64 {
        2.0 * PI / 8.0
    }
}

/// Rotates every row of an `[n, 2]` matrix by `angle` radians.
pub fn rotate(points: &Tensor, angle: f64) -> Tensor {
    let (c, s) = (angle.cos(), angle.sin());
    let mut out = Vec::with_capacity(points.len());
    for r in 0..points.rows() {
        let p = points.row(r);
        out.push(c * p[0] - s * p[1]);
        out.push(s * p[0] + c * p[1]);
    }
    Tensor::matrix(points.rows(), 2, out).expect("n x 2 buffer")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn ring_points_sit_near_the_circle() {
        let pts = Toy::default().sample(500, &mut seeded(1, 0));
        for r in 0..pts.rows() {
            let p = pts.row(r);
            let rad = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((rad - 2.0).abs() < 0.6, "radius {rad}");
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let a = Toy::Moons { noise: 0.05 }.sample(10, &mut seeded(3, 0));
        let b = Toy::Moons { noise: 0.05 }.sample(10, &mut seeded(3, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_preserves_norm() {
        let pts = Toy::default().sample(20, &mut seeded(2, 0));
        let rot = rotate(&pts, 0.7);
        for r in 0..pts.rows() {
            let (a, b) = (pts.row(r), rot.row(r));
            let na = a[0].hypot(a[1]);
            let nb = b[0].hypot(b[1]);
            assert!((na - nb).abs() < 1e-12);
        }
    }
}
