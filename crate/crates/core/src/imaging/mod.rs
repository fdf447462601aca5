//! Volume and frame containers, trilinear sampling and slice extraction.

mod io;
mod phantom;

pub use io::{
    read_frame_pgm, read_sequence, read_volume, write_frame_pgm, write_sequence, write_volume,
};
pub use phantom::{generate_phantom, PhantomSpec, Shape};

use nalgebra::Vector3;

use crate::error::{invalid, Result};
use crate::geometry::{apply_transform, pose_to_transform, Pose, RelativeParams, RigidTransform};
use crate::par::{self, Exec};

/// Regular grid geometry: voxel counts, spacing in mm, and the world position
/// of the centre of voxel (0,0,0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = GridSpec {
            dims,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    /// Grid of the given dims whose centre sits at the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| -0.5 * (dims[a] as f64 - 1.0) * spacing[a]);
        GridSpec::new(dims, spacing, origin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(invalid(format!(
                "grid dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid(format!(
                "grid spacing must be > 0, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(invalid("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index with x fastest, then y, then z.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn voxel_center(&self, idx: usize) -> Vector3<f64> {
        let c = self.coords(idx);
        Vector3::from([0, 1, 2].map(|a| self.origin[a] + c[a] as f64 * self.spacing[a]))
    }

    /// Continuous voxel coordinates of a world point.
    pub fn to_voxel(&self, pt: &Vector3<f64>) -> [f64; 3] {
        [0, 1, 2].map(|a| (pt[a] - self.origin[a]) / self.spacing[a])
    }
}

/// Scalar volume with a per-voxel validity mask. Invalid voxels hold gray 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: GridSpec,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl Volume {
    pub fn new(grid: GridSpec, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() || mask.len() != grid.len() {
            return Err(invalid(format!(
                "volume payload has {} values and {} mask entries, grid needs {}",
                values.len(),
                mask.len(),
                grid.len()
            )));
        }
        for (v, &m) in values.iter().zip(&mask) {
            if !(0.0..=1.0).contains(v) {
                return Err(invalid(format!("gray {v} outside [0,1]")));
            }
            if !m && *v != 0.0 {
                return Err(invalid("masked-invalid voxel holds a nonzero gray"));
            }
        }
        Ok(Volume { grid, values, mask })
    }

    /// Skips validation; used where values are convex combinations of valid grays.
    pub(crate) fn from_parts_unchecked(grid: GridSpec, values: Vec<f64>, mask: Vec<bool>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Volume { grid, values, mask }
    }

    pub fn filled(grid: GridSpec, gray: f64) -> Result<Self> {
        Volume::new(grid, vec![gray; grid.len()], vec![true; grid.len()])
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.index(i, j, k)]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn mean_gray(&self) -> f64 {
        let n = self.valid_count();
        if n == 0 {
            return 0.0;
        }
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum::<f64>()
            / n as f64
    }
}

/// The eight voxels surrounding a continuous sample position.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TrilinearStencil {
    pub base: [usize; 3],
    pub upper: [usize; 3],
    pub frac: [f64; 3],
}

impl TrilinearStencil {
    pub fn locate(grid: &GridSpec, pt: &Vector3<f64>) -> Option<Self> {
        let c = grid.to_voxel(pt);
        let mut base = [0; 3];
        let mut upper = [0; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = grid.dims[a];
            if n == 1 {
                if c[a] != 0.0 {
                    return None;
                }
                continue;
            }
            let last = (n - 1) as f64;
            if !(c[a] >= 0.0 && c[a] <= last) {
                return None;
            }
            let b = (c[a].floor() as usize).min(n - 2);
            base[a] = b;
            upper[a] = b + 1;
            frac[a] = c[a] - b as f64;
        }
        Some(TrilinearStencil { base, upper, frac })
    }

    /// Corner indices and interpolation weights, corner bit 0 = x, 1 = y, 2 = z.
    pub fn corners(&self, grid: &GridSpec) -> [(usize, f64); 8] {
        let mut out = [(0, 0.0); 8];
        for (bits, slot) in out.iter_mut().enumerate() {
            let mut w = 1.0;
            let mut ijk = [0; 3];
            for a in 0..3 {
                if bits >> a & 1 == 1 {
                    ijk[a] = self.upper[a];
                    w *= self.frac[a];
                } else {
                    ijk[a] = self.base[a];
                    w *= 1.0 - self.frac[a];
                }
            }
            *slot = (grid.index(ijk[0], ijk[1], ijk[2]), w);
        }
        out
    }

    /// Derivative of each corner weight along each voxel axis.
    pub fn weight_derivatives(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (bits, slot) in out.iter_mut().enumerate() {
            for (d, s) in slot.iter_mut().enumerate() {
                let mut w = 1.0;
                for a in 0..3 {
                    let hi = bits >> a & 1 == 1;
                    w *= match (a == d, hi) {
                        (true, true) => 1.0,
                        (true, false) => -1.0,
                        (false, true) => self.frac[a],
                        (false, false) => 1.0 - self.frac[a],
                    };
                }
                *s = w;
            }
        }
        out
    }
}

/// Trilinear interpolation at a world point. Returns `(0, false)` when any of
/// the eight neighbours is outside the grid or masked invalid.
pub fn trilinear_sample(v: &Volume, pt: &Vector3<f64>) -> (f64, bool) {
    let Some(st) = TrilinearStencil::locate(&v.grid, pt) else {
        return (0.0, false);
    };
    let mut acc = 0.0;
    for (idx, w) in st.corners(&v.grid) {
        if !v.mask[idx] {
            return (0.0, false);
        }
        acc += w * v.values[idx];
    }
    (acc, true)
}

/// Frame pixel layout: `height × width` pixels with isotropic spacing in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGeometry {
    pub height: usize,
    pub width: usize,
    pub spacing: f64,
}

impl FrameGeometry {
    pub fn new(height: usize, width: usize, spacing: f64) -> Result<Self> {
        let g = FrameGeometry {
            height,
            width,
            spacing,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(invalid(format!(
                "frame must be at least 2x2 pixels, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(invalid("frame pixel spacing must be > 0"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Continuous column/row of the frame centre.
    pub fn center_uv(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// In-plane local coordinates (mm) of pixel `(row, col)`; local z is 0.
    pub fn local_point(&self, row: usize, col: usize) -> Vector3<f64> {
        let (cu, cv) = self.center_uv();
        Vector3::new(
            (col as f64 - cu) * self.spacing,
            (row as f64 - cv) * self.spacing,
            0.0,
        )
    }
}

/// A 2D grayscale image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    geometry: FrameGeometry,
    values: Vec<f64>,
}

impl Frame {
    pub fn new(geometry: FrameGeometry, values: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.pixels() {
            return Err(invalid("frame payload does not match its geometry"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("frame gray outside [0,1]"));
        }
        Ok(Frame { geometry, values })
    }

    pub fn filled(geometry: FrameGeometry, gray: f64) -> Result<Self> {
        Frame::new(geometry, vec![gray; geometry.pixels()])
    }

    pub fn geometry(&self) -> &FrameGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.geometry.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Bilinear sample at continuous `(col, row)`, with the partial
    /// derivatives along column and row. `None` outside `[0, w-1] × [0, h-1]`.
    pub(crate) fn bilinear(&self, col: f64, row: f64) -> Option<(f64, f64, f64)> {
        let (w, h) = (self.geometry.width, self.geometry.height);
        if !(col >= 0.0 && col <= (w - 1) as f64 && row >= 0.0 && row <= (h - 1) as f64) {
            return None;
        }
        let c0 = (col.floor() as usize).min(w - 2);
        let r0 = (row.floor() as usize).min(h - 2);
        let fc = col - c0 as f64;
        let fr = row - r0 as f64;
        let v00 = self.values[r0 * w + c0];
        let v01 = self.values[r0 * w + c0 + 1];
        let v10 = self.values[(r0 + 1) * w + c0];
        let v11 = self.values[(r0 + 1) * w + c0 + 1];
        let top = v00 + fc * (v01 - v00);
        let bottom = v10 + fc * (v11 - v10);
        let g = top + fr * (bottom - top);
        let d_col = (1.0 - fr) * (v01 - v00) + fr * (v11 - v10);
        let d_row = bottom - top;
        Some((g, d_col, d_row))
    }
}

/// A slice sampled from a volume, with per-pixel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSlice {
    pub frame: Frame,
    pub valid: Vec<bool>,
}

impl SampledSlice {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// An ordered scan: frames sharing one geometry, plus optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    frames: Vec<Frame>,
    geometry: FrameGeometry,
    ground_truth: Option<RelativeParams>,
}

impl Sequence {
    pub fn new(
        frames: Vec<Frame>,
        geometry: FrameGeometry,
        ground_truth: Option<RelativeParams>,
    ) -> Result<Self> {
        geometry.validate()?;
        if frames.is_empty() {
            return Err(invalid("sequence has no frames"));
        }
        if frames.iter().any(|f| f.geometry != geometry) {
            return Err(invalid("all frames must share the sequence geometry"));
        }
        if let Some(gt) = &ground_truth {
            if gt.len() + 1 != frames.len() {
                return Err(invalid(format!(
                    "ground truth has {} entries for {} frames",
                    gt.len(),
                    frames.len()
                )));
            }
        }
        Ok(Sequence {
            frames,
            geometry,
            ground_truth,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn geometry(&self) -> &FrameGeometry {
        &self.geometry
    }

    pub fn ground_truth(&self) -> Option<&RelativeParams> {
        self.ground_truth.as_ref()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Samples the volume on a slice plane; invalid samples are 0 and flagged.
pub fn extract_slice_masked(
    v: &Volume,
    t: &RigidTransform,
    g: &FrameGeometry,
    exec: Exec,
) -> SampledSlice {
    let samples = par::map_range(exec, g.pixels(), |p| {
        let local = g.local_point(p / g.width, p % g.width);
        trilinear_sample(v, &apply_transform(t, &local))
    });
    let (values, valid) = samples.into_iter().unzip();
    SampledSlice {
        frame: Frame {
            geometry: *g,
            values,
        },
        valid,
    }
}

pub fn extract_slice(v: &Volume, p: &Pose, g: &FrameGeometry) -> Result<Frame> {
    g.validate()?;
    let t = pose_to_transform(p)?;
    Ok(extract_slice_masked(v, &t, g, Exec::default()).frame)
}

/// Fraction of the frame's pixels that sample valid voxels.
pub fn slice_coverage(v: &Volume, t: &RigidTransform, g: &FrameGeometry) -> f64 {
    let s = extract_slice_masked(v, t, g, Exec::default());
    s.valid_count() as f64 / g.pixels() as f64
}
