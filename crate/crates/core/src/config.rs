//! Experiment configuration in a line-based `section.key = value` format.
//!
//! Lists are comma-separated, `#` starts a comment, and keys absent from a
//! file keep their defaults. `phantom.shape` and `scan.segment` may repeat;
//! their first occurrence replaces the default list.
//!
//! ```text
//! seed = 7
//! phantom.shape = ellipsoid, 0,0,0, 5,5,5, 0.9     # center, radii, gray
//! phantom.shape = tube, -15,0,2, 15,0,2, 2, 0.6    # start, end, radius, gray
//! scan.segment = loop, 13, 0.5, 6                  # frames, step, turn_back
//! scan.segment = fastslow, 6, 0.5, 0.5, 4          # frames, step, amplitude, period
//! scan.segment = sector, 7, 0.5, 0.03              # frames, step, tilt
//! recon.origin = auto
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{invalid, parse_err, Result};
use crate::geometry::Pose;
use crate::imaging::{FrameGeometry, GridSpec, PhantomSpec, Shape};
use crate::par::Exec;
use crate::recon::{ReconParams, Support, WeightMode};
use crate::refine::RefineConfig;
use crate::scansim::{NoiseModel, TrajectoryKind, TrajectorySpec};

/// Training phantoms scanned to build the real and fake volume pools.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolSpec {
    pub size: usize,
    /// Maximum shift in mm applied to every training phantom's shapes.
    pub jitter: f64,
}

/// Size caps and instance count of the gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckSpec {
    pub instances: usize,
    pub max_frames: usize,
    pub max_grid: usize,
    /// Central-difference step for translation components, mm.
    pub step_translation: f64,
    /// Central-difference step for rotation components, rad.
    pub step_rotation: f64,
}

pub const GRADCHECK_MAX_FRAMES: usize = 8;
pub const GRADCHECK_MAX_GRID: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub phantom: PhantomSpec,
    pub trajectory: TrajectorySpec,
    /// Pose of the first frame in phantom coordinates.
    pub start: Pose,
    pub geometry: FrameGeometry,
    /// Noise applied to the ground truth; its seed is derived from `seed`.
    pub noise: NoiseModel,
    /// Refinement settings including the reconstruction parameters. The
    /// refinement seed is derived from `seed`.
    pub refine: RefineConfig,
    /// Place the reconstruction grid over the initial estimate instead of at
    /// `refine.recon.grid.origin`.
    pub auto_origin: bool,
    pub pool: PoolSpec,
    pub bench_seeds: usize,
    pub gradcheck: GradcheckSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let phantom = PhantomSpec {
            grid: GridSpec::centered([80, 80, 64], [0.5; 3]).unwrap(),
            background: 0.1,
            smoothness: 1.5,
            texture: 0.2,
            shapes: vec![
                Shape::Ellipsoid {
                    center: [0.0, 0.0, 0.0],
                    radii: [6.0, 6.0, 6.0],
                    gray: 0.9,
                },
                Shape::Tube {
                    start: [-15.0, -3.0, -4.0],
                    end: [15.0, 4.0, 5.0],
                    radius: 2.0,
                    gray: 0.5,
                },
            ],
        };
        let trajectory = TrajectorySpec::hybrid(vec![
            TrajectorySpec::new(TrajectoryKind::Loop { turn_back: 6 }, 13, 0.5),
            TrajectorySpec::new(
                TrajectoryKind::FastSlow {
                    amplitude: 0.5,
                    period: 4.0,
                },
                6,
                0.5,
            ),
            TrajectorySpec::new(TrajectoryKind::Sector { tilt: 0.03 }, 7, 0.5),
        ]);
        let mut recon = ReconParams::new(GridSpec::centered([32, 32, 24], [1.0; 3]).unwrap());
        recon.mode = WeightMode::NearestEmphasis;
        recon.support = Support::KNearest(2);
        let mut refine = RefineConfig::new(recon);
        refine.lr_translation = 1.0;
        refine.lr_rotation = 0.01;
        refine.adv_weight = 0.003;
        let mut cfg = ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            phantom,
            trajectory,
            start: Pose::new(0.0, 0.0, -5.0, 0.0, 0.0, 0.0),
            geometry: FrameGeometry::new(64, 64, 0.5).unwrap(),
            noise: NoiseModel {
                bias: [0.05, 0.05, 0.05, 0.0, 0.0, 0.0],
                sigma: [0.02, 0.02, 0.02, 0.0, 0.0, 0.0],
                seed: 0,
            },
            refine,
            auto_origin: true,
            pool: PoolSpec {
                size: 6,
                jitter: 2.0,
            },
            bench_seeds: 10,
            gradcheck: GradcheckSpec {
                instances: 20,
                max_frames: GRADCHECK_MAX_FRAMES,
                max_grid: GRADCHECK_MAX_GRID,
                step_translation: 1e-6,
                step_rotation: 1e-7,
            },
        };
        cfg.set_seed(0);
        cfg
    }
}

impl ExperimentConfig {
    /// Sets the master seed and every seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.noise.seed = seed.wrapping_mul(2).wrapping_add(1);
        self.refine.seed = seed.wrapping_mul(2).wrapping_add(2);
    }

    /// Seed of the phantom texture.
    pub fn phantom_seed(&self) -> u64 {
        self.seed
    }

    /// Seed of the training pools and discriminator pretraining.
    pub fn pool_seed(&self) -> u64 {
        self.seed.wrapping_mul(2).wrapping_add(3)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.trajectory.validate()?;
        self.geometry.validate()?;
        self.noise.validate()?;
        self.refine.validate()?;
        if !self.start.is_finite() {
            return Err(invalid("start pose must be finite"));
        }
        if self.trajectory.frame_count() < 4 {
            return Err(invalid(
                "refinement needs a trajectory of at least 4 frames",
            ));
        }
        if !(self.pool.jitter >= 0.0) {
            return Err(invalid("pool jitter must be >= 0"));
        }
        if self.bench_seeds == 0 {
            return Err(invalid("bench needs at least one seed"));
        }
        let gc = &self.gradcheck;
        if gc.instances == 0 || !(5..=GRADCHECK_MAX_FRAMES).contains(&gc.max_frames) {
            return Err(invalid(format!(
                "gradcheck needs instances >= 1 and max_frames in 5..={GRADCHECK_MAX_FRAMES}"
            )));
        }
        if !(16..=GRADCHECK_MAX_GRID).contains(&gc.max_grid) {
            return Err(invalid(format!(
                "gradcheck max_grid must be in 16..={GRADCHECK_MAX_GRID}"
            )));
        }
        if !(gc.step_translation > 0.0 && gc.step_rotation > 0.0) {
            return Err(invalid("gradcheck steps must be > 0"));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seed = cfg.seed;
        let mut shapes_seen = false;
        let mut segments: Option<Vec<TrajectorySpec>> = None;
        for (n, raw) in text.lines().enumerate() {
            let loc = format!("line {}", n + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(&loc, "expected 'key = value'"))?;
            let (key, value) = (key.trim(), value.trim());
            let err = |m: String| parse_err(&loc, format!("{key}: {m}"));
            let f = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| err(format!("'{v}': {e}")))
            };
            let u = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|e| err(format!("'{v}': {e}")))
            };
            let list = |n: usize| -> Result<Vec<f64>> {
                let v: Vec<f64> = value.split(',').map(f).collect::<Result<_>>()?;
                if v.len() != n {
                    return Err(err(format!("expected {n} values, got {}", v.len())));
                }
                Ok(v)
            };
            let dims = || -> Result<[usize; 3]> {
                let v: Vec<usize> = value.split(',').map(u).collect::<Result<_>>()?;
                v.try_into().map_err(|_| err("expected 3 values".into()))
            };
            let arr3 = |v: Vec<f64>| [v[0], v[1], v[2]];
            let arr6 = |v: Vec<f64>| [v[0], v[1], v[2], v[3], v[4], v[5]];
            let r = &mut cfg.refine;
            match key {
                "seed" => seed = value.parse().map_err(|e| err(format!("{e}")))?,
                "out" => cfg.out_dir = PathBuf::from(value),
                "phantom.dims" => cfg.phantom.grid.dims = dims()?,
                "phantom.spacing" => cfg.phantom.grid.spacing = arr3(list(3)?),
                "phantom.origin" => cfg.phantom.grid.origin = arr3(list(3)?),
                "phantom.background" => cfg.phantom.background = f(value)?,
                "phantom.smoothness" => cfg.phantom.smoothness = f(value)?,
                "phantom.texture" => cfg.phantom.texture = f(value)?,
                "phantom.shape" => {
                    if !shapes_seen {
                        cfg.phantom.shapes.clear();
                        shapes_seen = true;
                    }
                    cfg.phantom.shapes.push(parse_shape(value).map_err(err)?);
                }
                "scan.start" => cfg.start = Pose::from_array(arr6(list(6)?)),
                "scan.segment" => segments
                    .get_or_insert_with(Vec::new)
                    .push(parse_segment(value).map_err(err)?),
                "frame.height" => cfg.geometry.height = u(value)?,
                "frame.width" => cfg.geometry.width = u(value)?,
                "frame.spacing" => cfg.geometry.spacing = f(value)?,
                "noise.bias" => cfg.noise.bias = arr6(list(6)?),
                "noise.sigma" => cfg.noise.sigma = arr6(list(6)?),
                "recon.epsilon" => r.recon.epsilon = f(value)?,
                "recon.mode" => {
                    r.recon.mode = match value {
                        "softmax" => WeightMode::Softmax,
                        "nearest" => WeightMode::NearestEmphasis,
                        _ => return Err(err(format!("unknown mode '{value}'"))),
                    }
                }
                "recon.support" => {
                    r.recon.support = match value {
                        "all" => Support::AllSlices,
                        k => Support::KNearest(u(k)?),
                    }
                }
                "recon.exec" => {
                    r.recon.exec = match value {
                        "sequential" => Exec::Sequential,
                        "parallel" => Exec::Parallel,
                        _ => return Err(err(format!("unknown exec '{value}'"))),
                    }
                }
                "recon.dims" => r.recon.grid.dims = dims()?,
                "recon.spacing" => r.recon.grid.spacing = arr3(list(3)?),
                "recon.origin" => {
                    if value == "auto" {
                        cfg.auto_origin = true;
                    } else {
                        cfg.auto_origin = false;
                        r.recon.grid.origin = arr3(list(3)?);
                    }
                }
                "refine.proportion" => r.proportion = f(value)?,
                "refine.iterations" => r.iterations = u(value)?,
                "refine.lr_translation" => r.lr_translation = f(value)?,
                "refine.lr_rotation" => r.lr_rotation = f(value)?,
                "refine.lr_discriminator" => r.lr_discriminator = f(value)?,
                "refine.adv_weight" => r.adv_weight = f(value)?,
                "refine.ssl_weight" => r.ssl_weight = f(value)?,
                "pool.size" => cfg.pool.size = u(value)?,
                "pool.jitter" => cfg.pool.jitter = f(value)?,
                "bench.seeds" => cfg.bench_seeds = u(value)?,
                "gradcheck.instances" => cfg.gradcheck.instances = u(value)?,
                "gradcheck.max_frames" => cfg.gradcheck.max_frames = u(value)?,
                "gradcheck.max_grid" => cfg.gradcheck.max_grid = u(value)?,
                "gradcheck.step_translation" => cfg.gradcheck.step_translation = f(value)?,
                "gradcheck.step_rotation" => cfg.gradcheck.step_rotation = f(value)?,
                _ => return Err(parse_err(&loc, format!("unknown key '{key}'"))),
            }
        }
        if let Some(mut segs) = segments {
            cfg.trajectory = if segs.len() == 1 {
                segs.pop().unwrap()
            } else {
                TrajectorySpec::hybrid(segs)
            };
        }
        cfg.set_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let joinu = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let r = &self.refine;
        let p = &self.phantom;
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        line("seed", self.seed.to_string());
        line("out", self.out_dir.display().to_string());
        line("phantom.dims", joinu(&p.grid.dims));
        line("phantom.spacing", join(&p.grid.spacing));
        line("phantom.origin", join(&p.grid.origin));
        line("phantom.background", p.background.to_string());
        line("phantom.smoothness", p.smoothness.to_string());
        line("phantom.texture", p.texture.to_string());
        for shape in &p.shapes {
            line("phantom.shape", format_shape(shape));
        }
        line("scan.start", join(&self.start.to_array()));
        match &self.trajectory.kind {
            TrajectoryKind::Hybrid(segs) => {
                for seg in segs {
                    line("scan.segment", format_segment(seg));
                }
            }
            _ => line("scan.segment", format_segment(&self.trajectory)),
        }
        line("frame.height", self.geometry.height.to_string());
        line("frame.width", self.geometry.width.to_string());
        line("frame.spacing", self.geometry.spacing.to_string());
        line("noise.bias", join(&self.noise.bias));
        line("noise.sigma", join(&self.noise.sigma));
        line("recon.epsilon", r.recon.epsilon.to_string());
        let mode = match r.recon.mode {
            WeightMode::Softmax => "softmax",
            WeightMode::NearestEmphasis => "nearest",
        };
        line("recon.mode", mode.into());
        let support = match r.recon.support {
            Support::AllSlices => "all".to_string(),
            Support::KNearest(k) => k.to_string(),
        };
        line("recon.support", support);
        let exec = match r.recon.exec {
            Exec::Sequential => "sequential",
            Exec::Parallel => "parallel",
        };
        line("recon.exec", exec.into());
        line("recon.dims", joinu(&r.recon.grid.dims));
        line("recon.spacing", join(&r.recon.grid.spacing));
        let origin = if self.auto_origin {
            "auto".to_string()
        } else {
            join(&r.recon.grid.origin)
        };
        line("recon.origin", origin);
        line("refine.proportion", r.proportion.to_string());
        line("refine.iterations", r.iterations.to_string());
        line("refine.lr_translation", r.lr_translation.to_string());
        line("refine.lr_rotation", r.lr_rotation.to_string());
        line("refine.lr_discriminator", r.lr_discriminator.to_string());
        line("refine.adv_weight", r.adv_weight.to_string());
        line("refine.ssl_weight", r.ssl_weight.to_string());
        line("pool.size", self.pool.size.to_string());
        line("pool.jitter", self.pool.jitter.to_string());
        line("bench.seeds", self.bench_seeds.to_string());
        line("gradcheck.instances", self.gradcheck.instances.to_string());
        line(
            "gradcheck.max_frames",
            self.gradcheck.max_frames.to_string(),
        );
        line("gradcheck.max_grid", self.gradcheck.max_grid.to_string());
        line(
            "gradcheck.step_translation",
            self.gradcheck.step_translation.to_string(),
        );
        line(
            "gradcheck.step_rotation",
            self.gradcheck.step_rotation.to_string(),
        );
        s
    }
}

fn numbers(fields: &[&str]) -> std::result::Result<Vec<f64>, String> {
    fields
        .iter()
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| format!("'{}': {e}", v.trim()))
        })
        .collect()
}

fn parse_shape(value: &str) -> std::result::Result<Shape, String> {
    let fields: Vec<&str> = value.split(',').collect();
    let v = numbers(&fields[1..])?;
    match (fields[0].trim(), v.len()) {
        ("ellipsoid", 7) => Ok(Shape::Ellipsoid {
            center: [v[0], v[1], v[2]],
            radii: [v[3], v[4], v[5]],
            gray: v[6],
        }),
        ("tube", 8) => Ok(Shape::Tube {
            start: [v[0], v[1], v[2]],
            end: [v[3], v[4], v[5]],
            radius: v[6],
            gray: v[7],
        }),
        (kind, n) => Err(format!("cannot read shape '{kind}' with {n} values")),
    }
}

fn format_shape(shape: &Shape) -> String {
    let (kind, v): (&str, Vec<f64>) = match shape {
        Shape::Ellipsoid {
            center,
            radii,
            gray,
        } => (
            "ellipsoid",
            center.iter().chain(radii).chain([gray]).copied().collect(),
        ),
        Shape::Tube {
            start,
            end,
            radius,
            gray,
        } => (
            "tube",
            start
                .iter()
                .chain(end)
                .chain([radius, gray])
                .copied()
                .collect(),
        ),
    };
    let v: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("{kind},{}", v.join(","))
}

fn parse_segment(value: &str) -> std::result::Result<TrajectorySpec, String> {
    let fields: Vec<&str> = value.split(',').collect();
    if fields.len() < 3 {
        return Err("segment needs kind, frames and step".into());
    }
    let n = fields[1]
        .trim()
        .parse::<usize>()
        .map_err(|e| format!("'{}': {e}", fields[1].trim()))?;
    let step = numbers(&fields[2..3])?[0];
    let extra = numbers(&fields[3..])?;
    let kind = match (fields[0].trim(), extra.as_slice()) {
        ("linear", []) => TrajectoryKind::Linear,
        ("loop", [t]) if *t >= 0.0 && t.fract() == 0.0 => TrajectoryKind::Loop {
            turn_back: *t as usize,
        },
        ("fastslow", [a, p]) => TrajectoryKind::FastSlow {
            amplitude: *a,
            period: *p,
        },
        ("sector", [t]) => TrajectoryKind::Sector { tilt: *t },
        (kind, _) => {
            return Err(format!(
                "cannot read segment '{kind}' with {} extra values",
                extra.len()
            ))
        }
    };
    Ok(TrajectorySpec::new(kind, n, step))
}

fn format_segment(seg: &TrajectorySpec) -> String {
    let extra = match &seg.kind {
        TrajectoryKind::Linear | TrajectoryKind::Hybrid(_) => String::new(),
        TrajectoryKind::Loop { turn_back } => format!(",{turn_back}"),
        TrajectoryKind::FastSlow { amplitude, period } => format!(",{amplitude},{period}"),
        TrajectoryKind::Sector { tilt } => format!(",{tilt}"),
    };
    let kind = match &seg.kind {
        TrajectoryKind::Linear | TrajectoryKind::Hybrid(_) => "linear",
        TrajectoryKind::Loop { .. } => "loop",
        TrajectoryKind::FastSlow { .. } => "fastslow",
        TrajectoryKind::Sector { .. } => "sector",
    };
    format!("{kind},{},{}{extra}", seg.n_frames, seg.step)
}
