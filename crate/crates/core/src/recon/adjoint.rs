//! Reverse-mode derivative of the reconstruction with respect to slice poses.

use std::ops::AddAssign;

use nalgebra::{Matrix3, Vector3};

use super::{check_inputs, eval_voxel, Plane, ReconParams, VoxelScratch, WeightMode};
use crate::error::{invalid, Result};
use crate::geometry::RigidTransform;
use crate::imaging::Frame;
use crate::par;

/// Gradient of a scalar with respect to the rotation block and translation
/// column of one absolute slice transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseGradient {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
}

impl Default for PoseGradient {
    fn default() -> Self {
        PoseGradient {
            rot: Matrix3::zeros(),
            trans: Vector3::zeros(),
        }
    }
}

impl AddAssign<&PoseGradient> for PoseGradient {
    fn add_assign(&mut self, rhs: &PoseGradient) {
        self.rot += rhs.rot;
        self.trans += rhs.trans;
    }
}

impl PoseGradient {
    /// Accumulates the contribution of `dL/dq` where `q = Rᵀ(x − t)`.
    pub(crate) fn add_local_point(
        &mut self,
        plane: &Plane,
        x: &Vector3<f64>,
        g_local: &Vector3<f64>,
    ) {
        self.rot += (x - plane.trans) * g_local.transpose();
        self.trans -= plane.rot * g_local;
    }

    /// Accumulates the contribution of `dL/dy` where `y = R·l + t`.
    pub(crate) fn add_world_point(&mut self, local: &Vector3<f64>, g_world: &Vector3<f64>) {
        self.rot += g_world * local.transpose();
        self.trans += g_world;
    }
}

/// Back-propagates `upstream[v] = dL/dV[v]` through [`super::reconstruct_transforms`].
///
/// Voxels with no contributing slice, or a zero upstream gradient, are
/// skipped. Partial sums are formed over fixed voxel chunks and folded in
/// chunk order, so the result does not depend on the execution policy.
pub fn reconstruct_backward(
    frames: &[&Frame],
    transforms: &[RigidTransform],
    params: &ReconParams,
    upstream: &[f64],
) -> Result<Vec<PoseGradient>> {
    check_inputs(frames, transforms.len(), params)?;
    let grid = params.grid;
    if upstream.len() != grid.len() {
        return Err(invalid("upstream gradient does not match the grid"));
    }
    let planes: Vec<Plane> = transforms.iter().map(Plane::new).collect();
    let n = frames.len();
    let partials = par::map_chunks(params.exec, grid.len(), |range| {
        let mut acc = vec![PoseGradient::default(); n];
        let mut s = VoxelScratch::default();
        let mut d_r = Vec::new();
        for idx in range {
            let g = upstream[idx];
            if g == 0.0 {
                continue;
            }
            let x = grid.voxel_center(idx);
            let Some(gv) = eval_voxel(&x, frames, &planes, params, &mut s) else {
                continue;
            };
            voxel_reciprocal_grad(g, gv, params, &s, &mut d_r);
            for ((c, w), dr) in s.contrib.iter().zip(&s.weights).zip(&d_r) {
                let r = 1.0 / (c.distance + params.epsilon);
                let d_dist = -r * r * dr;
                let sign = if c.local.z >= 0.0 { 1.0 } else { -1.0 };
                let spacing = frames[c.slice].geometry().spacing;
                let g_local = Vector3::new(
                    g * w * c.d_col / spacing,
                    g * w * c.d_row / spacing,
                    d_dist * sign,
                );
                acc[c.slice].add_local_point(&planes[c.slice], &x, &g_local);
            }
        }
        acc
    });
    let mut total = vec![PoseGradient::default(); n];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    Ok(total)
}

/// `dL/dr_j` for the reciprocal distances `r_j = 1/(d_j + ε)` of one voxel,
/// given `dL/dG_v = g` and the voxel value `gv`.
fn voxel_reciprocal_grad(
    g: f64,
    gv: f64,
    params: &ReconParams,
    s: &VoxelScratch,
    out: &mut Vec<f64>,
) {
    out.clear();
    match params.mode {
        WeightMode::Softmax => {
            out.extend(
                s.contrib
                    .iter()
                    .zip(&s.weights)
                    .map(|(c, w)| g * w * (c.gray - gv)),
            );
        }
        WeightMode::NearestEmphasis => {
            let eps = params.epsilon;
            let recip: Vec<f64> = s.contrib.iter().map(|c| 1.0 / (c.distance + eps)).collect();
            let u_sum: f64 = recip.iter().zip(&s.soft).map(|(r, sm)| r * sm).sum();
            // b_j = dL/du_j with u_j = r_j · soft_j and W = u / Σu.
            let b: Vec<f64> = s
                .contrib
                .iter()
                .map(|c| g * (c.gray - gv) / u_sum)
                .collect();
            let brs: f64 = b
                .iter()
                .zip(&recip)
                .zip(&s.soft)
                .map(|((b, r), sm)| b * r * sm)
                .sum();
            out.extend(
                b.iter()
                    .zip(&recip)
                    .zip(&s.soft)
                    .map(|((b, r), sm)| b * sm * (1.0 + r) - sm * brs),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{transform_unchecked, Pose};
    use crate::imaging::{FrameGeometry, GridSpec};
    use crate::recon::{reconstruct_transforms, Support};

    fn textured(g: FrameGeometry, seed: usize) -> Frame {
        let vals = (0..g.pixels())
            .map(|i| {
                let (r, c) = ((i / g.width) as f64, (i % g.width) as f64);
                0.5 + 0.4 * ((0.37 * r + 0.21 * c + seed as f64).sin() * (0.19 * c - 0.3 * r).cos())
            })
            .collect();
        Frame::new(g, vals).unwrap()
    }

    /// Weighted voxel sum, checked against central differences on the
    /// rotation and translation entries of each slice pose.
    fn check_mode(mode: WeightMode) {
        let g = FrameGeometry::new(20, 20, 0.5).unwrap();
        let frames: Vec<Frame> = (0..3).map(|j| textured(g, j)).collect();
        let refs: Vec<&Frame> = frames.iter().collect();
        let poses = [
            Pose::new(0.0, 0.0, -0.6, 0.02, -0.01, 0.0),
            Pose::new(0.1, -0.1, 0.3, -0.03, 0.02, 0.05),
            Pose::new(-0.05, 0.1, 1.1, 0.01, 0.0, -0.02),
        ];
        let grid = GridSpec::centered([6, 6, 6], [0.45; 3]).unwrap();
        let mut params = ReconParams::new(grid);
        params.mode = mode;
        params.support = Support::AllSlices;
        let up: Vec<f64> = (0..grid.len())
            .map(|i| ((i * 7) % 5) as f64 - 2.0)
            .collect();
        let loss = |ts: &[RigidTransform]| -> f64 {
            let v = reconstruct_transforms(&refs, ts, &params).unwrap();
            v.values().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let ts: Vec<RigidTransform> = poses.iter().map(transform_unchecked).collect();
        let grads = reconstruct_backward(&refs, &ts, &params, &up).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let base = (ts[j].rotation(), ts[j].translation());
            for k in 0..3 {
                let perturb = |delta: f64| {
                    let mut t = base.1;
                    t[k] += delta;
                    let mut all = ts.clone();
                    all[j] = RigidTransform::from_parts(base.0, t);
                    loss(&all)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                let an = grads[j].trans[k];
                assert!(
                    (fd - an).abs() <= 1e-4 * (1.0 + an.abs()),
                    "{mode:?} t[{j}][{k}] fd {fd} an {an}"
                );
            }
            for a in 0..3 {
                for b in 0..3 {
                    let perturb = |delta: f64| {
                        let mut r = base.0;
                        r[(a, b)] += delta;
                        let mut all = ts.clone();
                        all[j] = RigidTransform::from_parts(r, base.1);
                        loss(&all)
                    };
                    let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                    let an = grads[j].rot[(a, b)];
                    assert!(
                        (fd - an).abs() <= 1e-4 * (1.0 + an.abs()),
                        "{mode:?} R[{j}]({a},{b}) fd {fd} an {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn softmax_adjoint_matches_finite_differences() {
        check_mode(WeightMode::Softmax);
    }

    #[test]
    fn nearest_adjoint_matches_finite_differences() {
        check_mode(WeightMode::NearestEmphasis);
    }

    #[test]
    fn upstream_length_checked() {
        let g = FrameGeometry::new(4, 4, 1.0).unwrap();
        let f = Frame::filled(g, 0.5).unwrap();
        let grid = GridSpec::centered([2, 2, 2], [1.0; 3]).unwrap();
        let r = reconstruct_backward(
            &[&f],
            &[RigidTransform::identity()],
            &ReconParams::new(grid),
            &[0.0; 3],
        );
        assert!(r.is_err());
    }
}
