//! Rigid 6-DOF poses, homogeneous transforms and relative-motion chaining.
//!
//! Euler convention: `T = Trans(tx, ty, tz) · Rz(rz) · Ry(ry) · Rx(rx)`, angles
//! in radians. A relative motion is expressed in the local coordinates of the
//! earlier frame, so absolute transforms chain as `A[i+1] = A[i] · T(rel[i])`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{invalid, parse_err, Result};

const ORTHO_TOL: f64 = 1e-9;
const GIMBAL_TOL: f64 = 1e-9;

/// Translation in millimetres, rotation as Euler angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        tx: 0.0,
        ty: 0.0,
        tz: 0.0,
        rx: 0.0,
        ry: 0.0,
        rz: 0.0,
    };

    pub fn new(tx: f64, ty: f64, tz: f64, rx: f64, ry: f64, rz: f64) -> Self {
        Pose {
            tx,
            ty,
            tz,
            rx,
            ry,
            rz,
        }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Pose::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.tx, self.ty, self.tz, self.rx, self.ry, self.rz]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.tx, self.ty, self.tz)
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Homogeneous 4×4 rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform(Matrix4<f64>);

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform(Matrix4::identity())
    }

    /// Builds a transform from a rotation block and translation without
    /// validation. Callers are expected to pass an orthonormal rotation.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        RigidTransform(m)
    }

    /// Validates a row-major homogeneous matrix.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        let t = RigidTransform(m);
        t.validate()?;
        Ok(t)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform(self.0 * other.0)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation().transpose();
        RigidTransform::from_parts(rt, -(rt * self.translation()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.0;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("transform has non-finite entries"));
        }
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(invalid("transform bottom row is not (0,0,0,1)"));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL || (r.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(invalid(format!(
                "rotation block is not orthonormal (deviation {err:e})"
            )));
        }
        Ok(())
    }
}

/// `T = Trans · Rz · Ry · Rx`.
pub fn pose_to_transform(p: &Pose) -> Result<RigidTransform> {
    if !p.is_finite() {
        return Err(invalid(format!("pose has non-finite fields: {p:?}")));
    }
    Ok(transform_unchecked(p))
}

pub(crate) fn transform_unchecked(p: &Pose) -> RigidTransform {
    let r = rot_z(p.rz) * rot_y(p.ry) * rot_x(p.rx);
    RigidTransform::from_parts(r, p.translation())
}

/// Inverse of [`pose_to_transform`]. At gimbal lock (`|ry| = π/2`) the
/// decomposition fixes `rx = 0`.
pub fn transform_to_pose(t: &RigidTransform) -> Result<Pose> {
    t.validate()?;
    let r = t.rotation();
    let tr = t.translation();
    let ry = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let cos_ry = r[(0, 0)].hypot(r[(1, 0)]);
    let (rx, rz) = if cos_ry > GIMBAL_TOL {
        (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
    } else {
        (0.0, (-r[(0, 1)]).atan2(r[(1, 1)]))
    };
    Ok(Pose::new(tr.x, tr.y, tr.z, rx, ry, rz))
}

/// Partial derivatives of `pose_to_transform(p)` with respect to the six pose
/// components, in `Pose::to_array` order.
pub fn transform_jacobian(p: &Pose) -> [Matrix4<f64>; 6] {
    let (rx, ry, rz) = (rot_x(p.rx), rot_y(p.ry), rot_z(p.rz));
    let rots = [
        rz * ry * d_rot_x(p.rx),
        rz * d_rot_y(p.ry) * rx,
        d_rot_z(p.rz) * ry * rx,
    ];
    let mut out = [Matrix4::zeros(); 6];
    for (k, m) in out.iter_mut().take(3).enumerate() {
        m[(k, 3)] = 1.0;
    }
    for (k, r) in rots.iter().enumerate() {
        out[3 + k].fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    }
    out
}

pub fn apply_transform(t: &RigidTransform, pt: &Vector3<f64>) -> Vector3<f64> {
    t.rotation() * pt + t.translation()
}

/// Per-step motions between consecutive frames; entry `i` moves frame `i+1`
/// relative to frame `i` in frame `i`'s local coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelativeParams(pub Vec<Pose>);

impl RelativeParams {
    pub fn new(poses: Vec<Pose>) -> Self {
        RelativeParams(poses)
    }

    pub fn zeros(n: usize) -> Self {
        RelativeParams(vec![Pose::IDENTITY; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.0
    }

    /// Components flattened entry-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|p| p.to_array()).collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(6) {
            return Err(invalid("flattened parameter length is not a multiple of 6"));
        }
        Ok(RelativeParams(
            values
                .chunks_exact(6)
                .map(|c| Pose::from_array([c[0], c[1], c[2], c[3], c[4], c[5]]))
                .collect(),
        ))
    }

    /// Recovers relative motions from an absolute chain.
    pub fn from_absolute(abs: &[RigidTransform]) -> Result<Self> {
        abs.windows(2)
            .map(|w| transform_to_pose(&w[0].inverse().compose(&w[1])))
            .collect::<Result<Vec<_>>>()
            .map(RelativeParams)
    }
}

/// Absolute transforms of every frame relative to the first (identity).
pub fn chain_transforms(rel: &RelativeParams) -> Result<Vec<RigidTransform>> {
    if rel.is_empty() {
        return Err(invalid("relative parameter list is empty"));
    }
    let mut out = Vec::with_capacity(rel.len() + 1);
    let mut acc = RigidTransform::identity();
    out.push(acc);
    for p in rel.poses() {
        acc = acc.compose(&pose_to_transform(p)?);
        out.push(acc);
    }
    Ok(out)
}

/// Absolute poses of every frame relative to the first frame.
pub fn chain_relative(rel: &RelativeParams) -> Result<Vec<Pose>> {
    chain_transforms(rel)?
        .iter()
        .map(transform_to_pose)
        .collect()
}

/// Formats a pose as a CSV row with 17 significant digits per field.
pub fn format_pose_row(p: &Pose) -> String {
    let mut s = String::new();
    for (i, v) in p.to_array().iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v:.16e}").unwrap();
    }
    s
}

pub const POSE_CSV_HEADER: &str = "tx,ty,tz,rx,ry,rz";

pub fn write_poses_csv<W: Write>(mut w: W, poses: &[Pose]) -> Result<()> {
    writeln!(w, "{POSE_CSV_HEADER}")?;
    for p in poses {
        writeln!(w, "{}", format_pose_row(p))?;
    }
    Ok(())
}

/// Reads pose rows; a leading header line and blank lines are skipped.
pub fn read_poses_csv<R: BufRead>(r: R) -> Result<Vec<Pose>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("tx")) {
            continue;
        }
        let vals = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(format!("pose row {}", lineno + 1), e.to_string()))?;
        if vals.len() != 6 {
            return Err(parse_err(
                format!("pose row {}", lineno + 1),
                format!("expected 6 fields, found {}", vals.len()),
            ));
        }
        out.push(Pose::from_array([
            vals[0], vals[1], vals[2], vals[3], vals[4], vals[5],
        ]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use proptest::prelude::*;

    use super::*;

    fn close(a: &Vector3<f64>, b: [f64; 3], tol: f64) -> bool {
        (a - Vector3::from(b)).abs().max() < tol
    }

    #[test]
    fn zero_pose_is_identity() {
        let t = pose_to_transform(&Pose::IDENTITY).unwrap();
        assert_eq!(*t.matrix(), Matrix4::identity());
        assert_eq!(transform_to_pose(&t).unwrap(), Pose::IDENTITY);
    }

    #[test]
    fn pure_translation() {
        let t = pose_to_transform(&Pose::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(t.rotation(), Matrix3::identity());
        assert_eq!(t.translation(), Vector3::new(0.0, 0.0, 1.0));
        let t2 = RigidTransform::from_parts(Matrix3::identity(), Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(
            transform_to_pose(&t2).unwrap(),
            Pose::new(0.0, 0.0, 2.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn quarter_turn_about_x() {
        let t = pose_to_transform(&Pose::new(0.0, 0.0, 0.0, FRAC_PI_2, 0.0, 0.0)).unwrap();
        assert!(close(
            &apply_transform(&t, &Vector3::new(0.0, 0.0, 1.0)),
            [0.0, -1.0, 0.0],
            1e-15
        ));
        assert!(close(
            &apply_transform(&t, &Vector3::new(0.0, 1.0, 0.0)),
            [0.0, 0.0, 1.0],
            1e-15
        ));
    }

    #[test]
    fn apply_identity_and_translation() {
        let id = RigidTransform::identity();
        assert_eq!(
            apply_transform(&id, &Vector3::new(1.0, 2.0, 3.0)),
            Vector3::new(1.0, 2.0, 3.0)
        );
        let t = pose_to_transform(&Pose::new(0.0, 0.0, 5.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(
            apply_transform(&t, &Vector3::zeros()),
            Vector3::new(0.0, 0.0, 5.0)
        );
    }

    #[test]
    fn non_finite_pose_rejected() {
        assert!(pose_to_transform(&Pose::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0)).is_err());
        assert!(pose_to_transform(&Pose::new(0.0, 0.0, 0.0, f64::INFINITY, 0.0, 0.0)).is_err());
    }

    #[test]
    fn non_orthonormal_rejected() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 1.1;
        assert!(RigidTransform::from_matrix(m).is_err());
        assert!(transform_to_pose(&RigidTransform(m)).is_err());
    }

    #[test]
    fn gimbal_lock_fixes_rx() {
        for ry in [FRAC_PI_2, -FRAC_PI_2] {
            let p = Pose::new(1.0, 2.0, 3.0, 0.4, ry, -0.3);
            let t = pose_to_transform(&p).unwrap();
            let q = transform_to_pose(&t).unwrap();
            assert_eq!(q.rx, 0.0);
            let t2 = pose_to_transform(&q).unwrap();
            assert!((t.matrix() - t2.matrix()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn chain_examples() {
        let step = Pose::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        let abs = chain_relative(&RelativeParams::new(vec![step, step])).unwrap();
        let z: Vec<f64> = abs.iter().map(|p| p.tz).collect();
        assert_eq!(z, vec![0.0, 1.0, 2.0]);

        assert!(chain_relative(&RelativeParams::default()).is_err());
        assert_eq!(
            chain_relative(&RelativeParams::new(vec![step]))
                .unwrap()
                .len(),
            2
        );

        let rel = RelativeParams::new(vec![Pose::new(0.0, 0.0, 0.0, FRAC_PI_2, 0.0, 0.0), step]);
        let abs = chain_transforms(&rel).unwrap();
        assert!(close(&abs[2].translation(), [0.0, -1.0, 0.0], 1e-15));
    }

    #[test]
    fn zero_relatives_chain_to_identity() {
        for p in chain_relative(&RelativeParams::zeros(7)).unwrap() {
            assert_eq!(p, Pose::IDENTITY);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = Pose::new(0.3, -1.2, 0.7, 0.2, -0.4, 0.9);
        let jac = transform_jacobian(&p);
        let h = 1e-6;
        for k in 0..6 {
            let mut a = p.to_array();
            let mut b = p.to_array();
            a[k] += h;
            b[k] -= h;
            let fd = (transform_unchecked(&Pose::from_array(a)).0
                - transform_unchecked(&Pose::from_array(b)).0)
                / (2.0 * h);
            assert!((fd - jac[k]).abs().max() < 1e-8, "component {k}");
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let poses = vec![
            Pose::new(0.1, -2.0 / 3.0, 1e-17, 0.5, -0.25, std::f64::consts::PI),
            Pose::IDENTITY,
        ];
        let mut buf = Vec::new();
        write_poses_csv(&mut buf, &poses).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .all(|f| f.contains('e')));
        assert_eq!(read_poses_csv(&buf[..]).unwrap(), poses);
        assert!(read_poses_csv("1,2,3\n".as_bytes()).is_err());
    }

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        let t = -50.0..50.0f64;
        let a = -1.5..1.5f64;
        (t.clone(), t.clone(), t, a.clone(), a.clone(), a)
            .prop_map(|(tx, ty, tz, rx, ry, rz)| Pose::new(tx, ty, tz, rx, ry, rz))
    }

    proptest! {
        #[test]
        fn pose_round_trip(p in pose_strategy()) {
            let q = transform_to_pose(&pose_to_transform(&p).unwrap()).unwrap();
            for (a, b) in p.to_array().iter().zip(q.to_array()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn composition_is_associative(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let (ta, tb, tc) = (transform_unchecked(&a), transform_unchecked(&b), transform_unchecked(&c));
            let left = ta.compose(&tb).compose(&tc);
            let right = ta.compose(&tb.compose(&tc));
            prop_assert!((left.matrix() - right.matrix()).abs().max() < 1e-9);
        }

        #[test]
        fn relative_recovery(rel in proptest::collection::vec(pose_strategy(), 1..8)) {
            let rel = RelativeParams::new(rel);
            let abs = chain_transforms(&rel).unwrap();
            let back = RelativeParams::from_absolute(&abs).unwrap();
            for (p, q) in rel.poses().iter().zip(back.poses()) {
                for (a, b) in p.to_array().iter().zip(q.to_array()) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}
