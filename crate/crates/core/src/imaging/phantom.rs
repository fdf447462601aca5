use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GridSpec, Volume};
use crate::error::{invalid, Result};

/// A solid structure painted into a phantom, in world millimetres.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Axis-aligned ellipsoid.
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        gray: f64,
    },
    /// Capsule around the segment `start..end`.
    Tube {
        start: [f64; 3],
        end: [f64; 3],
        radius: f64,
        gray: f64,
    },
}

impl Shape {
    fn gray(&self) -> f64 {
        match self {
            Shape::Ellipsoid { gray, .. } | Shape::Tube { gray, .. } => *gray,
        }
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        match self {
            Shape::Ellipsoid { center, radii, .. } => {
                (0..3)
                    .map(|a| ((p[a] - center[a]) / radii[a]).powi(2))
                    .sum::<f64>()
                    <= 1.0
            }
            Shape::Tube {
                start, end, radius, ..
            } => {
                let a = Vector3::from(*start);
                let b = Vector3::from(*end);
                let ab = b - a;
                let len2 = ab.norm_squared();
                let t = if len2 > 0.0 {
                    ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (p - (a + ab * t)).norm() <= *radius
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let g = self.gray();
        if !(0.0..=1.0).contains(&g) {
            return Err(invalid(format!("shape gray {g} outside [0,1]")));
        }
        match self {
            Shape::Ellipsoid { radii, .. } if radii.iter().any(|&r| !(r > 0.0)) => {
                Err(invalid("ellipsoid radii must be > 0"))
            }
            Shape::Tube { radius, .. } if !(*radius > 0.0) => {
                Err(invalid("tube radius must be > 0"))
            }
            _ => Ok(()),
        }
    }
}

/// Recipe for a synthetic volume: shapes painted in order over a background,
/// optional seeded texture, then Gaussian smoothing (`smoothness` in voxels).
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub grid: GridSpec,
    pub background: f64,
    pub smoothness: f64,
    /// Amplitude of uniform per-voxel texture noise added before smoothing.
    pub texture: f64,
    pub shapes: Vec<Shape>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.shapes.is_empty() {
            return Err(invalid("phantom spec has no shapes"));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(invalid("phantom background outside [0,1]"));
        }
        if !(self.smoothness >= 0.0) || !(self.texture >= 0.0) {
            return Err(invalid("phantom smoothness and texture must be >= 0"));
        }
        self.shapes.iter().try_for_each(Shape::validate)
    }
}

pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Volume> {
    spec.validate()?;
    let grid = spec.grid;
    let mut values: Vec<f64> = (0..grid.len())
        .map(|idx| {
            let p = grid.voxel_center(idx);
            spec.shapes
                .iter()
                .rev()
                .find(|s| s.contains(&p))
                .map_or(spec.background, Shape::gray)
        })
        .collect();
    if spec.texture > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in values.iter_mut() {
            *v += spec.texture * (rng.random::<f64>() - 0.5);
        }
    }
    if spec.smoothness > 0.0 {
        gaussian_smooth(&mut values, &grid, spec.smoothness);
    }
    for v in values.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Volume::new(grid, values, vec![true; grid.len()])
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|w| w / sum).collect()
}

/// Separable Gaussian blur with clamp-to-edge boundaries.
fn gaussian_smooth(values: &mut [f64], grid: &GridSpec, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let dims = grid.dims;
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let src = values.to_vec();
        for (idx, out) in values.iter_mut().enumerate() {
            let c = grid.coords(idx)[axis] as isize;
            let line_start = idx as isize - c * strides[axis] as isize;
            *out = kernel
                .iter()
                .enumerate()
                .map(|(t, w)| {
                    let j = (c + t as isize - radius).clamp(0, n - 1);
                    w * src[(line_start + j * strides[axis] as isize) as usize]
                })
                .sum();
        }
    }
}
