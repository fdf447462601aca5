//! Parametric scan trajectories, scan simulation from a volume, and a noisy
//! pose estimator standing in for a learned motion model.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::geometry::{chain_transforms, pose_to_transform, Pose, RelativeParams};
use crate::imaging::{extract_slice_masked, FrameGeometry, Sequence, Volume};
use crate::par::Exec;

/// Minimum fraction of in-bounds pixels before a simulated frame is flagged.
pub const MIN_COVERAGE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryKind {
    Linear,
    /// Steps forward until `turn_back` entries have been emitted, then backward.
    Loop {
        turn_back: usize,
    },
    /// Step length modulated by `1 + amplitude · sin(2π i / period)`.
    FastSlow {
        amplitude: f64,
        period: f64,
    },
    /// Each step also tilts the frame by `tilt` radians about its x axis.
    Sector {
        tilt: f64,
    },
    Hybrid(Vec<TrajectorySpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Ignored for hybrids, whose length follows from their segments.
    pub n_frames: usize,
    /// Base step in mm per frame. Ignored for hybrids.
    pub step: f64,
}

impl TrajectorySpec {
    pub fn new(kind: TrajectoryKind, n_frames: usize, step: f64) -> Self {
        TrajectorySpec {
            kind,
            n_frames,
            step,
        }
    }

    pub fn hybrid(segments: Vec<TrajectorySpec>) -> Self {
        let n = 1 + segments.iter().map(|s| s.frame_count() - 1).sum::<usize>();
        TrajectorySpec {
            kind: TrajectoryKind::Hybrid(segments),
            n_frames: n,
            step: 0.0,
        }
    }

    /// Number of frames the trajectory spans.
    pub fn frame_count(&self) -> usize {
        match &self.kind {
            TrajectoryKind::Hybrid(segs) => {
                1 + segs
                    .iter()
                    .map(|s| s.frame_count().saturating_sub(1))
                    .sum::<usize>()
            }
            _ => self.n_frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let TrajectoryKind::Hybrid(segs) = &self.kind {
            if segs.is_empty() {
                return Err(invalid("hybrid trajectory has no segments"));
            }
            return segs.iter().try_for_each(|s| {
                if matches!(s.kind, TrajectoryKind::Hybrid(_)) {
                    Err(invalid("hybrid segments cannot be hybrids"))
                } else {
                    s.validate()
                }
            });
        }
        if self.n_frames < 2 {
            return Err(invalid("trajectory needs at least 2 frames"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(invalid("trajectory step must be > 0"));
        }
        match self.kind {
            TrajectoryKind::FastSlow { amplitude, period } => {
                if !(0.0..1.0).contains(&amplitude) {
                    return Err(invalid("fast-slow amplitude must be in [0,1)"));
                }
                if !(period > 0.0) {
                    return Err(invalid("fast-slow period must be > 0"));
                }
            }
            TrajectoryKind::Sector { tilt } if !tilt.is_finite() => {
                return Err(invalid("sector tilt must be finite"));
            }
            _ => {}
        }
        Ok(())
    }
}

pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<RelativeParams> {
    spec.validate()?;
    let steps = spec.n_frames - 1;
    let s = spec.step;
    let fwd = |z: f64| Pose::new(0.0, 0.0, z, 0.0, 0.0, 0.0);
    let poses = match &spec.kind {
        TrajectoryKind::Linear => vec![fwd(s); steps],
        TrajectoryKind::Loop { turn_back } => (1..=steps)
            .map(|i| fwd(if i <= *turn_back { s } else { -s }))
            .collect(),
        TrajectoryKind::FastSlow { amplitude, period } => (1..=steps)
            .map(|i| fwd(s * (1.0 + amplitude * (2.0 * PI * i as f64 / period).sin())))
            .collect(),
        TrajectoryKind::Sector { tilt } => vec![Pose::new(0.0, 0.0, s, *tilt, 0.0, 0.0); steps],
        TrajectoryKind::Hybrid(segs) => {
            let mut out = Vec::new();
            for seg in segs {
                out.extend(generate_trajectory(seg)?.0);
            }
            out
        }
    };
    Ok(RelativeParams::new(poses))
}

/// Slices the volume along the chained trajectory, starting at `start`.
/// Frames with less than [`MIN_COVERAGE`] valid pixels are logged, not rejected.
pub fn simulate_scan(
    v: &Volume,
    rel: &RelativeParams,
    g: &FrameGeometry,
    start: &Pose,
) -> Result<Sequence> {
    g.validate()?;
    let start_t = pose_to_transform(start)?;
    let mut frames = Vec::with_capacity(rel.len() + 1);
    for (i, a) in chain_transforms(rel)?.iter().enumerate() {
        let slice = extract_slice_masked(v, &start_t.compose(a), g, Exec::default());
        let coverage = slice.valid_count() as f64 / g.pixels() as f64;
        if coverage < MIN_COVERAGE {
            log::warn!(
                "frame {i}: only {:.0}% of pixels inside the volume",
                100.0 * coverage
            );
        }
        frames.push(slice.frame);
    }
    Sequence::new(frames, *g, Some(rel.clone()))
}

/// Per-component bias and standard deviation added to every relative entry.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub bias: [f64; 6],
    pub sigma: [f64; 6],
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel {
            bias: [0.0; 6],
            sigma: [0.0; 6],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.iter().any(|s| !(*s >= 0.0)) || self.bias.iter().any(|b| !b.is_finite()) {
            return Err(invalid("noise sigma must be >= 0 and bias finite"));
        }
        Ok(())
    }
}

/// `est = gt + bias + σ·N(0,1)` per component, drawn entry-major from a
/// seeded generator.
pub fn perturb_estimates(gt: &RelativeParams, nm: &NoiseModel) -> Result<RelativeParams> {
    nm.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(nm.seed);
    let poses = gt
        .poses()
        .iter()
        .map(|p| {
            let mut a = p.to_array();
            for (c, v) in a.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += nm.bias[c] + nm.sigma[c] * z;
            }
            Pose::from_array(a)
        })
        .collect();
    Ok(RelativeParams::new(poses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{generate_phantom, GridSpec, PhantomSpec, Shape};

    fn zs(r: &RelativeParams) -> Vec<f64> {
        r.poses().iter().map(|p| p.tz).collect()
    }

    #[test]
    fn linear_and_loop() {
        let lin =
            generate_trajectory(&TrajectorySpec::new(TrajectoryKind::Linear, 4, 0.5)).unwrap();
        assert_eq!(lin.poses(), &[Pose::new(0.0, 0.0, 0.5, 0.0, 0.0, 0.0); 3]);
        let lp = generate_trajectory(&TrajectorySpec::new(
            TrajectoryKind::Loop { turn_back: 2 },
            5,
            0.5,
        ))
        .unwrap();
        assert_eq!(zs(&lp), vec![0.5, 0.5, -0.5, -0.5]);
    }

    #[test]
    fn fast_slow_schedule() {
        let spec = TrajectorySpec::new(
            TrajectoryKind::FastSlow {
                amplitude: 0.5,
                period: 4.0,
            },
            3,
            0.5,
        );
        let z = zs(&generate_trajectory(&spec).unwrap());
        assert!((z[0] - 0.75).abs() < 1e-15);
        assert!((z[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sector_tilts() {
        let r = generate_trajectory(&TrajectorySpec::new(
            TrajectoryKind::Sector { tilt: 0.05 },
            3,
            0.4,
        ))
        .unwrap();
        assert_eq!(r.poses()[1], Pose::new(0.0, 0.0, 0.4, 0.05, 0.0, 0.0));
    }

    #[test]
    fn loop_with_symmetric_halves_returns_home() {
        let r = generate_trajectory(&TrajectorySpec::new(
            TrajectoryKind::Loop { turn_back: 6 },
            13,
            0.7,
        ))
        .unwrap();
        let abs = chain_transforms(&r).unwrap();
        assert!(abs.last().unwrap().translation().norm() < 1e-9);
    }

    #[test]
    fn hybrid_concatenates() {
        let segs = vec![
            TrajectorySpec::new(TrajectoryKind::Loop { turn_back: 3 }, 7, 0.5),
            TrajectorySpec::new(
                TrajectoryKind::FastSlow {
                    amplitude: 0.4,
                    period: 5.0,
                },
                6,
                0.5,
            ),
            TrajectorySpec::new(TrajectoryKind::Sector { tilt: 0.02 }, 4, 0.5),
        ];
        let h = TrajectorySpec::hybrid(segs.clone());
        assert_eq!(h.frame_count(), 1 + 6 + 5 + 3);
        let r = generate_trajectory(&h).unwrap();
        assert_eq!(r.len(), 14);
        let mut expect = Vec::new();
        for s in &segs {
            expect.extend(generate_trajectory(s).unwrap().0);
        }
        assert_eq!(r.0, expect);
        assert_eq!(r, generate_trajectory(&h).unwrap());
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_trajectory(&TrajectorySpec::new(TrajectoryKind::Linear, 1, 0.5)).is_err());
        assert!(generate_trajectory(&TrajectorySpec::new(TrajectoryKind::Linear, 3, 0.0)).is_err());
        let fs = TrajectoryKind::FastSlow {
            amplitude: 1.0,
            period: 4.0,
        };
        assert!(generate_trajectory(&TrajectorySpec::new(fs, 3, 0.5)).is_err());
        assert!(generate_trajectory(&TrajectorySpec::hybrid(vec![])).is_err());
    }

    #[test]
    fn noise_model() {
        let gt =
            generate_trajectory(&TrajectorySpec::new(TrajectoryKind::Linear, 11, 0.5)).unwrap();
        assert_eq!(perturb_estimates(&gt, &NoiseModel::none()).unwrap(), gt);
        let nm = NoiseModel {
            bias: [0.0; 6],
            sigma: [0.1; 6],
            seed: 5,
        };
        assert_eq!(
            perturb_estimates(&gt, &nm).unwrap(),
            perturb_estimates(&gt, &nm).unwrap()
        );

        let biased = NoiseModel {
            bias: [0.0, 0.0, 0.1, 0.0, 0.0, 0.0],
            sigma: [0.0; 6],
            seed: 0,
        };
        let est = perturb_estimates(&gt, &biased).unwrap();
        let a = chain_transforms(&gt).unwrap();
        let b = chain_transforms(&est).unwrap();
        let drift = b[10].translation() - a[10].translation();
        assert!((drift.z - 1.0).abs() < 1e-12 && drift.x == 0.0 && drift.y == 0.0);
    }

    fn sphere_volume() -> Volume {
        let spec = PhantomSpec {
            grid: GridSpec::centered([24, 24, 24], [0.5; 3]).unwrap(),
            background: 0.0,
            smoothness: 0.0,
            texture: 0.0,
            shapes: vec![Shape::Ellipsoid {
                center: [0.0; 3],
                radii: [3.0; 3],
                gray: 1.0,
            }],
        };
        generate_phantom(&spec, 0).unwrap()
    }

    #[test]
    fn constant_volume_gives_constant_frames() {
        let v = Volume::filled(GridSpec::centered([10; 3], [1.0; 3]).unwrap(), 0.3).unwrap();
        let g = FrameGeometry::new(4, 4, 0.5).unwrap();
        let rel = generate_trajectory(&TrajectorySpec::new(
            TrajectoryKind::Sector { tilt: 0.1 },
            5,
            0.5,
        ))
        .unwrap();
        let seq = simulate_scan(&v, &rel, &g, &Pose::new(0.0, 0.0, -1.0, 0.0, 0.0, 0.0)).unwrap();
        for f in seq.frames() {
            assert!(f.values().iter().all(|x| (x - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn reslicing_reproduces_frames() {
        let v = sphere_volume();
        let g = FrameGeometry::new(12, 12, 0.5).unwrap();
        let rel = generate_trajectory(&TrajectorySpec::new(
            TrajectoryKind::Sector { tilt: 0.05 },
            6,
            0.6,
        ))
        .unwrap();
        let start = Pose::new(0.1, -0.2, -2.0, 0.0, 0.0, 0.3);
        let seq = simulate_scan(&v, &rel, &g, &start).unwrap();
        let st = pose_to_transform(&start).unwrap();
        for (f, a) in seq.frames().iter().zip(chain_transforms(&rel).unwrap()) {
            let again = extract_slice_masked(&v, &st.compose(&a), &g, Exec::Sequential).frame;
            assert_eq!(&again, f);
        }
        assert_eq!(seq.ground_truth(), Some(&rel));
    }

    #[test]
    fn linear_scan_through_sphere_rises_then_falls() {
        let v = sphere_volume();
        let g = FrameGeometry::new(20, 20, 0.5).unwrap();
        let rel =
            generate_trajectory(&TrajectorySpec::new(TrajectoryKind::Linear, 21, 0.5)).unwrap();
        let seq = simulate_scan(&v, &rel, &g, &Pose::new(0.0, 0.0, -5.0, 0.0, 0.0, 0.0)).unwrap();
        let means: Vec<f64> = seq.frames().iter().map(|f| f.mean()).collect();
        // Analytic profile: disc area π(r² − z²) over the frame area, peak at z = 0.
        let peak = 10;
        let max = means.iter().copied().fold(f64::MIN, f64::max);
        assert!(means[peak] >= max - 1e-12);
        let tol = 0.01;
        assert!(means[..=peak].windows(2).all(|w| w[1] + tol >= w[0]));
        assert!(means[peak..].windows(2).all(|w| w[1] <= w[0] + tol));
        let frame_area = 20.0 * 20.0 * 0.25;
        let disc = PI * 9.0 / frame_area;
        assert!((means[10] - disc).abs() < 0.05);
    }
}
