//! Scalar pipelines `relative params → chained poses → reconstruction →
//! (slices | discriminator) → loss`, with exact reverse-mode gradients.

use std::str::FromStr;

use nalgebra::{Matrix4, Vector3};

use super::{reconstruct_backward, reconstruct_transforms, PoseGradient, ReconParams};
use crate::error::{invalid, Result};
use crate::geometry::{
    chain_transforms, transform_jacobian, transform_unchecked, RelativeParams, RigidTransform,
};
use crate::imaging::{Frame, TrilinearStencil, Volume};
use crate::losses::DiscriminatorParams;
use crate::par;

/// Identifier of a registered objective pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    VoxelSum,
    VoxelProbe,
    SelfSupervised,
    Adversarial,
    Generator,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::VoxelSum,
        ObjectiveKind::VoxelProbe,
        ObjectiveKind::SelfSupervised,
        ObjectiveKind::Adversarial,
        ObjectiveKind::Generator,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            ObjectiveKind::VoxelSum => "voxel-sum",
            ObjectiveKind::VoxelProbe => "voxel-probe",
            ObjectiveKind::SelfSupervised => "ssl",
            ObjectiveKind::Adversarial => "adv",
            ObjectiveKind::Generator => "generator",
        }
    }
}

impl FromStr for ObjectiveKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| invalid(format!("unknown objective id '{s}'")))
    }
}

/// A scalar objective over the relative pose parameters of a sequence.
#[derive(Debug, Clone)]
pub enum Objective<'a> {
    /// Sum of valid voxel grays of the full-sequence reconstruction.
    VoxelSum,
    /// Gray of one voxel of the full-sequence reconstruction.
    VoxelProbe { index: usize },
    /// Mean absolute error between the `minus` frames and slices of the
    /// volume reconstructed from the `reco` frames.
    SelfSupervised { reco: Vec<usize>, minus: Vec<usize> },
    /// `−C(V_f)` with `V_f` reconstructed from every frame.
    Adversarial { disc: &'a DiscriminatorParams },
    /// `adv_weight · (−C(V_f)) + ssl_weight · ssl`.
    Generator {
        reco: Vec<usize>,
        minus: Vec<usize>,
        disc: &'a DiscriminatorParams,
        adv_weight: f64,
        ssl_weight: f64,
    },
}

impl Objective<'_> {
    pub fn kind(&self) -> ObjectiveKind {
        match self {
            Objective::VoxelSum => ObjectiveKind::VoxelSum,
            Objective::VoxelProbe { .. } => ObjectiveKind::VoxelProbe,
            Objective::SelfSupervised { .. } => ObjectiveKind::SelfSupervised,
            Objective::Adversarial { .. } => ObjectiveKind::Adversarial,
            Objective::Generator { .. } => ObjectiveKind::Generator,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub loss: f64,
    /// One 6-vector per relative entry, in `Pose::to_array` order. Empty when
    /// only the forward value was requested.
    pub grad: Vec<[f64; 6]>,
    /// Unweighted self-supervised term, when the pipeline has one.
    pub ssl: Option<f64>,
    /// Unweighted adversarial term `−C(V_f)`, when the pipeline has one.
    pub adv: Option<f64>,
}

pub fn objective_value(
    frames: &[Frame],
    rel: &RelativeParams,
    params: &ReconParams,
    objective: &Objective,
) -> Result<ObjectiveValue> {
    run(frames, rel, params, objective, false)
}

pub fn objective_gradient(
    frames: &[Frame],
    rel: &RelativeParams,
    params: &ReconParams,
    objective: &Objective,
) -> Result<ObjectiveValue> {
    run(frames, rel, params, objective, true)
}

fn check_split(reco: &[usize], minus: &[usize], n: usize) -> Result<()> {
    if reco.is_empty() {
        return Err(invalid(
            "self-supervised split has no reconstruction frames",
        ));
    }
    if reco.iter().chain(minus).any(|&i| i >= n) {
        return Err(invalid("split index outside the sequence"));
    }
    Ok(())
}

fn run(
    frames: &[Frame],
    rel: &RelativeParams,
    params: &ReconParams,
    objective: &Objective,
    want_grad: bool,
) -> Result<ObjectiveValue> {
    params.validate()?;
    if frames.len() != rel.len() + 1 {
        return Err(invalid(format!(
            "{} frames need {} relative entries, got {}",
            frames.len(),
            frames.len().saturating_sub(1),
            rel.len()
        )));
    }
    let abs = chain_transforms(rel)?;
    let all: Vec<usize> = (0..frames.len()).collect();
    let mut frame_grads = vec![PoseGradient::default(); frames.len()];
    let mut loss = 0.0;
    let mut ssl = None;
    let mut adv = None;

    let (ssl_part, adv_part) = match objective {
        Objective::VoxelSum | Objective::VoxelProbe { .. } => (None, None),
        Objective::SelfSupervised { reco, minus } => (Some((reco, minus, 1.0)), None),
        Objective::Adversarial { disc } => (None, Some((*disc, 1.0))),
        Objective::Generator {
            reco,
            minus,
            disc,
            adv_weight,
            ssl_weight,
        } => (Some((reco, minus, *ssl_weight)), Some((*disc, *adv_weight))),
    };

    if let Objective::VoxelSum | Objective::VoxelProbe { .. } = objective {
        let vol = reconstruct_subset(frames, &abs, &all, params)?;
        let mut up = vec![0.0; params.grid.len()];
        match objective {
            Objective::VoxelProbe { index } => {
                let &g = vol
                    .values()
                    .get(*index)
                    .ok_or_else(|| invalid("probe voxel index outside the grid"))?;
                loss = g;
                up[*index] = 1.0;
            }
            _ => {
                for (i, (&g, &m)) in vol.values().iter().zip(vol.mask()).enumerate() {
                    if m {
                        loss += g;
                        up[i] = 1.0;
                    }
                }
            }
        }
        if want_grad {
            backward_subset(frames, &abs, &all, params, &up, &mut frame_grads)?;
        }
    }

    if let Some((reco, minus, weight)) = ssl_part {
        check_split(reco, minus, frames.len())?;
        let vol = reconstruct_subset(frames, &abs, reco, params)?;
        let term = slice_consistency(
            frames,
            &abs,
            minus,
            &vol,
            params,
            want_grad.then_some(&mut frame_grads),
            weight,
        )?;
        loss += weight * term.value;
        ssl = Some(term.value);
        if let Some(up) = term.volume_grad {
            backward_subset(frames, &abs, reco, params, &up, &mut frame_grads)?;
        }
    }

    if let Some((disc, weight)) = adv_part {
        disc.validate()?;
        let vol = reconstruct_subset(frames, &abs, &all, params)?;
        let score = crate::losses::disc_score(&vol, disc)?;
        loss += weight * -score;
        adv = Some(-score);
        if want_grad && weight != 0.0 {
            let up: Vec<f64> = disc
                .score_gradient(&vol)?
                .into_iter()
                .map(|g| -weight * g)
                .collect();
            backward_subset(frames, &abs, &all, params, &up, &mut frame_grads)?;
        }
    }

    let grad = if want_grad {
        chain_backward(rel, &abs, &frame_grads)
    } else {
        Vec::new()
    };
    Ok(ObjectiveValue {
        loss,
        grad,
        ssl,
        adv,
    })
}

fn reconstruct_subset(
    frames: &[Frame],
    abs: &[RigidTransform],
    idx: &[usize],
    params: &ReconParams,
) -> Result<Volume> {
    let f: Vec<&Frame> = idx.iter().map(|&i| &frames[i]).collect();
    let t: Vec<RigidTransform> = idx.iter().map(|&i| abs[i]).collect();
    reconstruct_transforms(&f, &t, params)
}

fn backward_subset(
    frames: &[Frame],
    abs: &[RigidTransform],
    idx: &[usize],
    params: &ReconParams,
    upstream: &[f64],
    out: &mut [PoseGradient],
) -> Result<()> {
    let f: Vec<&Frame> = idx.iter().map(|&i| &frames[i]).collect();
    let t: Vec<RigidTransform> = idx.iter().map(|&i| abs[i]).collect();
    let grads = reconstruct_backward(&f, &t, params, upstream)?;
    for (&i, g) in idx.iter().zip(&grads) {
        out[i] += g;
    }
    Ok(())
}

struct SliceTerm {
    value: f64,
    volume_grad: Option<Vec<f64>>,
}

/// One generated pixel: trilinear stencil, sampled gray and local position.
struct PixelSample {
    corners: [(usize, f64); 8],
    dweights: [[f64; 3]; 8],
    gray: f64,
}

/// Mean absolute error between each `minus` frame and the slice of `vol` at
/// its current pose, over pixels whose trilinear stencil is fully valid.
/// With `grads` present, pose gradients of `weight · value` are accumulated
/// and the gradient with respect to the volume is returned.
fn slice_consistency(
    frames: &[Frame],
    abs: &[RigidTransform],
    minus: &[usize],
    vol: &Volume,
    params: &ReconParams,
    grads: Option<&mut Vec<PoseGradient>>,
    weight: f64,
) -> Result<SliceTerm> {
    let grid = vol.grid();
    let mut per_frame = Vec::with_capacity(minus.len());
    for &m in minus {
        let g = *frames[m].geometry();
        let t = abs[m];
        let samples = par::map_range(params.exec, g.pixels(), |p| {
            let local = g.local_point(p / g.width, p % g.width);
            let world = t.rotation() * local + t.translation();
            let st = TrilinearStencil::locate(grid, &world)?;
            let corners = st.corners(grid);
            if corners.iter().any(|(i, _)| !vol.mask()[*i]) {
                return None;
            }
            let gray = corners.iter().map(|(i, w)| w * vol.values()[*i]).sum();
            Some(PixelSample {
                corners,
                dweights: st.weight_derivatives(),
                gray,
            })
        });
        per_frame.push(samples);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&m, samples) in minus.iter().zip(&per_frame) {
        for (s, r) in samples.iter().zip(frames[m].values()) {
            if let Some(s) = s {
                sum += (s.gray - r).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(SliceTerm {
            value: 0.0,
            volume_grad: grads.map(|_| vec![0.0; grid.len()]),
        });
    }
    let value = sum / count as f64;
    let Some(grads) = grads else {
        return Ok(SliceTerm {
            value,
            volume_grad: None,
        });
    };
    let mut vgrad = vec![0.0; grid.len()];
    let scale = weight / count as f64;
    for (&m, samples) in minus.iter().zip(&per_frame) {
        let g = *frames[m].geometry();
        for (p, (s, r)) in samples.iter().zip(frames[m].values()).enumerate() {
            let Some(s) = s else { continue };
            let diff = s.gray - r;
            let up = if diff > 0.0 {
                scale
            } else if diff < 0.0 {
                -scale
            } else {
                0.0
            };
            if up == 0.0 {
                continue;
            }
            let mut d_vox = Vector3::<f64>::zeros();
            for ((idx, w), dw) in s.corners.iter().zip(&s.dweights) {
                vgrad[*idx] += up * w;
                let val = vol.values()[*idx];
                for a in 0..3 {
                    d_vox[a] += dw[a] * val;
                }
            }
            let d_world = Vector3::from([0, 1, 2].map(|a| up * d_vox[a] / grid.spacing[a]));
            let local = g.local_point(p / g.width, p % g.width);
            grads[m].add_world_point(&local, &d_world);
        }
    }
    Ok(SliceTerm {
        value,
        volume_grad: Some(vgrad),
    })
}

fn pose_grad_matrix(g: &PoseGradient) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&g.rot);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&g.trans);
    m
}

/// Back-propagates per-frame absolute-transform gradients through
/// `A[k] = A[k−1] · T(rel[k−1])` to the relative parameters.
fn chain_backward(
    rel: &RelativeParams,
    abs: &[RigidTransform],
    frame_grads: &[PoseGradient],
) -> Vec<[f64; 6]> {
    let mut carry = Matrix4::zeros();
    let mut out = vec![[0.0; 6]; rel.len()];
    for k in (1..abs.len()).rev() {
        carry += pose_grad_matrix(&frame_grads[k]);
        let step = transform_unchecked(&rel.poses()[k - 1]);
        let step_bar = abs[k - 1].matrix().transpose() * carry;
        for (c, jac) in transform_jacobian(&rel.poses()[k - 1]).iter().enumerate() {
            out[k - 1][c] = step_bar.component_mul(jac).sum();
        }
        carry *= step.matrix().transpose();
    }
    out
}
