//! Differentiable reconstruction: every target voxel takes a distance-weighted
//! blend of the grays its projections hit on each slice.
//!
//! For voxel `v` and slice `j`, `d_j` is the perpendicular distance from the
//! voxel centre to the slice plane and `G_j` the bilinear gray at the
//! orthogonal projection. Slices whose projection falls outside the frame are
//! dropped before normalization. Weights are `softmax(1 / (d + ε))`, or in
//! nearest-emphasis mode that softmax multiplied by `1 / (d + ε)` and
//! renormalized.

mod adjoint;
mod objective;

pub use adjoint::{reconstruct_backward, PoseGradient};
pub use objective::{
    objective_gradient, objective_value, Objective, ObjectiveKind, ObjectiveValue,
};

use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Result};
use crate::geometry::{pose_to_transform, Pose, RigidTransform};
use crate::imaging::{Frame, FrameGeometry, GridSpec, Volume};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Softmax,
    NearestEmphasis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    AllSlices,
    /// Only the `k` slices with the smallest distance contribute.
    KNearest(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconParams {
    /// Distance offset in mm, keeps the reciprocal finite.
    pub epsilon: f64,
    pub mode: WeightMode,
    pub support: Support,
    pub grid: GridSpec,
    pub exec: Exec,
}

impl ReconParams {
    pub fn new(grid: GridSpec) -> Self {
        ReconParams {
            epsilon: 1e-6,
            mode: WeightMode::Softmax,
            support: Support::AllSlices,
            grid,
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid("epsilon must be > 0"));
        }
        if self.support == Support::KNearest(0) {
            return Err(invalid("k-nearest support needs k >= 1"));
        }
        self.grid.validate()
    }
}

/// A point projected onto a slice plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub distance: f64,
    /// Continuous (column, row) pixel coordinates.
    pub uv: (f64, f64),
    pub in_bounds: bool,
}

/// Slice pose cached as rotation and translation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Plane {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
}

impl Plane {
    pub fn new(t: &RigidTransform) -> Self {
        Plane {
            rot: t.rotation(),
            trans: t.translation(),
        }
    }

    /// Local slice coordinates of a world point.
    pub fn local(&self, pt: &Vector3<f64>) -> Vector3<f64> {
        self.rot.tr_mul(&(pt - self.trans))
    }
}

fn uv_of(local: &Vector3<f64>, g: &FrameGeometry) -> (f64, f64) {
    let (cu, cv) = g.center_uv();
    (local.x / g.spacing + cu, local.y / g.spacing + cv)
}

fn uv_in_bounds(uv: (f64, f64), g: &FrameGeometry) -> bool {
    uv.0 >= 0.0 && uv.0 <= (g.width - 1) as f64 && uv.1 >= 0.0 && uv.1 <= (g.height - 1) as f64
}

pub fn project_to_slice(pt: &Vector3<f64>, p: &Pose, g: &FrameGeometry) -> Result<Projection> {
    g.validate()?;
    let plane = Plane::new(&pose_to_transform(p)?);
    let local = plane.local(pt);
    let uv = uv_of(&local, g);
    Ok(Projection {
        distance: local.z.abs(),
        uv,
        in_bounds: uv_in_bounds(uv, g),
    })
}

fn check_distances(d: &[f64], eps: f64) -> Result<()> {
    if d.is_empty() {
        return Err(invalid("distance list is empty"));
    }
    if !(eps > 0.0) {
        return Err(invalid("epsilon must be > 0"));
    }
    if d.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(invalid("distances must be finite and >= 0"));
    }
    Ok(())
}

/// Softmax of reciprocals with max subtraction; writes into `out`.
pub(crate) fn softmax_reciprocal(
    d: impl Iterator<Item = f64> + Clone,
    eps: f64,
    out: &mut Vec<f64>,
) {
    out.clear();
    let max = d
        .clone()
        .map(|x| 1.0 / (x + eps))
        .fold(f64::NEG_INFINITY, f64::max);
    out.extend(d.map(|x| (1.0 / (x + eps) - max).exp()));
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|w| *w /= sum);
}

pub(crate) fn nearest_from_softmax(
    d: impl Iterator<Item = f64>,
    eps: f64,
    soft: &[f64],
    out: &mut Vec<f64>,
) {
    out.clear();
    out.extend(d.zip(soft).map(|(x, s)| s / (x + eps)));
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|w| *w /= z);
}

pub fn weights_softmax(d: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_distances(d, eps)?;
    let mut out = Vec::with_capacity(d.len());
    softmax_reciprocal(d.iter().copied(), eps, &mut out);
    Ok(out)
}

pub fn weights_nearest(d: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_distances(d, eps)?;
    let mut soft = Vec::with_capacity(d.len());
    softmax_reciprocal(d.iter().copied(), eps, &mut soft);
    let mut out = Vec::with_capacity(d.len());
    nearest_from_softmax(d.iter().copied(), eps, &soft, &mut out);
    Ok(out)
}

/// One surviving slice contribution at a voxel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    pub slice: usize,
    pub local: Vector3<f64>,
    pub distance: f64,
    pub gray: f64,
    pub d_col: f64,
    pub d_row: f64,
}

/// Per-voxel evaluation state, reused across voxels.
#[derive(Debug, Default)]
pub(crate) struct VoxelScratch {
    pub contrib: Vec<Contribution>,
    pub soft: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Gathers in-bounds contributions for one voxel, applies the support policy
/// and computes weights. Returns the reconstructed gray, or `None` when no
/// slice contributes.
pub(crate) fn eval_voxel(
    x: &Vector3<f64>,
    frames: &[&Frame],
    planes: &[Plane],
    params: &ReconParams,
    s: &mut VoxelScratch,
) -> Option<f64> {
    s.contrib.clear();
    for (j, (frame, plane)) in frames.iter().zip(planes).enumerate() {
        let local = plane.local(x);
        let (col, row) = uv_of(&local, frame.geometry());
        if let Some((gray, d_col, d_row)) = frame.bilinear(col, row) {
            s.contrib.push(Contribution {
                slice: j,
                local,
                distance: local.z.abs(),
                gray,
                d_col,
                d_row,
            });
        }
    }
    if s.contrib.is_empty() {
        return None;
    }
    if let Support::KNearest(k) = params.support {
        if s.contrib.len() > k {
            // Stable sort keeps index order among ties; then restore index order.
            s.contrib.sort_by(|a, b| a.distance.total_cmp(&b.distance));
            s.contrib.truncate(k);
            s.contrib.sort_by_key(|c| c.slice);
        }
    }
    let eps = params.epsilon;
    softmax_reciprocal(s.contrib.iter().map(|c| c.distance), eps, &mut s.soft);
    match params.mode {
        WeightMode::Softmax => {
            s.weights.clear();
            s.weights.extend_from_slice(&s.soft);
        }
        WeightMode::NearestEmphasis => nearest_from_softmax(
            s.contrib.iter().map(|c| c.distance),
            eps,
            &s.soft,
            &mut s.weights,
        ),
    }
    Some(
        s.contrib
            .iter()
            .zip(&s.weights)
            .fold(0.0, |acc, (c, w)| acc + w * c.gray),
    )
}

pub(crate) fn check_inputs(
    frames: &[&Frame],
    n_transforms: usize,
    params: &ReconParams,
) -> Result<()> {
    params.validate()?;
    if frames.is_empty() {
        return Err(invalid("reconstruction needs at least one frame"));
    }
    if frames.len() != n_transforms {
        return Err(invalid(format!(
            "{} frames but {} poses",
            frames.len(),
            n_transforms
        )));
    }
    Ok(())
}

/// Reconstruction from frames at absolute transforms.
pub fn reconstruct_transforms(
    frames: &[&Frame],
    transforms: &[RigidTransform],
    params: &ReconParams,
) -> Result<Volume> {
    check_inputs(frames, transforms.len(), params)?;
    let planes: Vec<Plane> = transforms.iter().map(Plane::new).collect();
    let grid = params.grid;
    let chunks = par::map_chunks(params.exec, grid.len(), |range| {
        let mut scratch = VoxelScratch::default();
        range
            .map(|idx| {
                eval_voxel(
                    &grid.voxel_center(idx),
                    frames,
                    &planes,
                    params,
                    &mut scratch,
                )
            })
            .collect::<Vec<_>>()
    });
    let mut values = Vec::with_capacity(grid.len());
    let mut mask = Vec::with_capacity(grid.len());
    for g in chunks.into_iter().flatten() {
        values.push(g.unwrap_or(0.0).clamp(0.0, 1.0));
        mask.push(g.is_some());
    }
    Ok(Volume::from_parts_unchecked(grid, values, mask))
}

pub fn reconstruct(frames: &[Frame], abs_poses: &[Pose], params: &ReconParams) -> Result<Volume> {
    let transforms = abs_poses
        .iter()
        .map(pose_to_transform)
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Frame> = frames.iter().collect();
    reconstruct_transforms(&refs, &transforms, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::FrameGeometry;

    #[test]
    fn projection_examples() {
        let g = FrameGeometry::new(5, 5, 1.0).unwrap();
        let p = Projection {
            distance: 0.0,
            uv: (2.0, 2.0),
            in_bounds: true,
        };
        assert_eq!(
            project_to_slice(&Vector3::zeros(), &Pose::IDENTITY, &g).unwrap(),
            p
        );
        let q = project_to_slice(&Vector3::new(0.0, 0.0, 2.0), &Pose::IDENTITY, &g).unwrap();
        assert_eq!((q.distance, q.uv, q.in_bounds), (2.0, (2.0, 2.0), true));
        let q = project_to_slice(&Vector3::new(-3.0, 0.0, -1.0), &Pose::IDENTITY, &g).unwrap();
        assert_eq!(q.distance, 1.0);
        assert!(!q.in_bounds);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(weights_softmax(&[2.0, 2.0], 1e-6).unwrap(), vec![0.5, 0.5]);
        assert_eq!(weights_nearest(&[2.0, 2.0], 1e-6).unwrap(), vec![0.5, 0.5]);
        assert_eq!(weights_softmax(&[1.0], 1e-6).unwrap(), vec![1.0]);
        assert_eq!(weights_nearest(&[1.0], 1e-6).unwrap(), vec![1.0]);
        let s = weights_softmax(&[1.0, 3.0], 1e-12).unwrap();
        assert!((s[0] - 0.6608).abs() < 1e-4 && (s[1] - 0.3392).abs() < 1e-4);
        let n = weights_nearest(&[1.0, 3.0], 1e-12).unwrap();
        assert!((n[0] - 0.8539).abs() < 1e-4 && (n[1] - 0.1461).abs() < 1e-4);
    }

    #[test]
    fn weight_errors() {
        assert!(weights_softmax(&[], 1e-6).is_err());
        assert!(weights_nearest(&[], 1e-6).is_err());
        assert!(weights_softmax(&[-1.0], 1e-6).is_err());
        assert!(weights_softmax(&[1.0], 0.0).is_err());
    }

    #[test]
    fn zero_distance_saturates_without_overflow() {
        let w = weights_softmax(&[0.0, 1.0, 2.0], 1e-6).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w[0] - 1.0).abs() < 1e-6);
    }

    fn plane_frame(g: FrameGeometry, gray: f64) -> Frame {
        Frame::filled(g, gray).unwrap()
    }

    #[test]
    fn equidistant_between_constant_frames() {
        let g = FrameGeometry::new(5, 5, 1.0).unwrap();
        let frames = [plane_frame(g, 0.0), plane_frame(g, 1.0)];
        let poses = [Pose::IDENTITY, Pose::new(0.0, 0.0, 2.0, 0.0, 0.0, 0.0)];
        let grid = GridSpec::new([1, 1, 1], [1.0; 3], [0.0, 0.0, 1.0]).unwrap();
        let v = reconstruct(&frames, &poses, &ReconParams::new(grid)).unwrap();
        assert_eq!(v.values(), &[0.5]);
    }

    #[test]
    fn single_frame_fills_its_plane() {
        let g = FrameGeometry::new(3, 4, 1.0).unwrap();
        let frame = Frame::new(g, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        // Grid wider than the frame: outer columns have no projection.
        let grid = GridSpec::new([6, 3, 2], [1.0; 3], [-2.5, -1.0, 0.0]).unwrap();
        let v = reconstruct(
            std::slice::from_ref(&frame),
            &[Pose::IDENTITY],
            &ReconParams::new(grid),
        )
        .unwrap();
        for k in 0..2 {
            for r in 0..3 {
                for c in 0..6 {
                    let idx = grid.index(c, r, k);
                    if c == 0 || c == 5 {
                        assert!(!v.mask()[idx]);
                        assert_eq!(v.values()[idx], 0.0);
                    } else {
                        assert!(v.mask()[idx]);
                        assert!((v.values()[idx] - frame.get(r, c - 1)).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let g = FrameGeometry::new(3, 3, 1.0).unwrap();
        let grid = GridSpec::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let frames = [plane_frame(g, 0.5)];
        assert!(reconstruct(
            &frames,
            &[Pose::IDENTITY, Pose::IDENTITY],
            &ReconParams::new(grid)
        )
        .is_err());
        assert!(reconstruct(&[], &[], &ReconParams::new(grid)).is_err());
    }

    #[test]
    fn k_nearest_restricts_support() {
        let g = FrameGeometry::new(3, 3, 1.0).unwrap();
        let frames = [
            plane_frame(g, 0.0),
            plane_frame(g, 1.0),
            plane_frame(g, 0.2),
        ];
        let poses = [
            Pose::new(0.0, 0.0, -0.5, 0.0, 0.0, 0.0),
            Pose::new(0.0, 0.0, 0.5, 0.0, 0.0, 0.0),
            Pose::new(0.0, 0.0, 5.0, 0.0, 0.0, 0.0),
        ];
        let grid = GridSpec::new([1, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let mut params = ReconParams::new(grid);
        params.support = Support::KNearest(2);
        let v = reconstruct(&frames, &poses, &params).unwrap();
        assert!((v.values()[0] - 0.5).abs() < 1e-15);
        params.support = Support::KNearest(0);
        assert!(reconstruct(&frames, &poses, &params).is_err());
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let g = FrameGeometry::new(6, 6, 1.0).unwrap();
        let frames: Vec<Frame> = (0..3)
            .map(|j| {
                Frame::new(
                    g,
                    (0..36)
                        .map(|i| ((i * (j + 3)) % 11) as f64 / 10.0)
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let poses = [
            Pose::IDENTITY,
            Pose::new(0.1, 0.2, 0.9, 0.05, 0.0, 0.1),
            Pose::new(-0.1, 0.0, 1.7, 0.1, -0.05, 0.0),
        ];
        let grid = GridSpec::centered([12, 12, 12], [0.3; 3]).unwrap();
        let mut params = ReconParams::new(grid);
        params.exec = Exec::Sequential;
        let a = reconstruct(&frames, &poses, &params).unwrap();
        params.exec = Exec::Parallel;
        let b = reconstruct(&frames, &poses, &params).unwrap();
        assert_eq!(a, b);
    }
}
