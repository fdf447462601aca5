//! Reproducible experiment pipelines: scene simulation, training pools,
//! refinement runs with artifact output, the multi-seed benchmark and the
//! finite-difference gradient check.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ExperimentConfig;
use crate::error::{invalid, Result};
use crate::geometry::{chain_transforms, write_poses_csv, Pose, RelativeParams, RigidTransform};
use crate::imaging::{
    generate_phantom, write_sequence, write_volume, Frame, FrameGeometry, GridSpec, PhantomSpec,
    Sequence, Shape, Volume,
};
use crate::losses::{disc_pretrain, DiscriminatorParams, FeatureSpec};
use crate::metrics::{evaluate, MetricsReport};
use crate::recon::{
    objective_gradient, objective_value, reconstruct_transforms, Objective, ObjectiveKind,
    ReconParams, WeightMode,
};
use crate::refine::{online_refine, split_sequence, RefineOutcome};
use crate::scansim::{generate_trajectory, perturb_estimates, simulate_scan, NoiseModel};

/// Grid of the given dims and spacing centred on the bounding box of the
/// frame corners under `abs`.
pub fn grid_covering(
    abs: &[RigidTransform],
    g: &FrameGeometry,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<GridSpec> {
    if abs.is_empty() {
        return Err(invalid("cannot cover an empty trajectory"));
    }
    let corners = [
        g.local_point(0, 0),
        g.local_point(0, g.width - 1),
        g.local_point(g.height - 1, 0),
        g.local_point(g.height - 1, g.width - 1),
    ];
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for t in abs {
        for c in &corners {
            let w = t.rotation() * c + t.translation();
            lo = lo.inf(&w);
            hi = hi.sup(&w);
        }
    }
    let mid = (lo + hi) / 2.0;
    let origin = [0, 1, 2].map(|a| mid[a] - spacing[a] * (dims[a] - 1) as f64 / 2.0);
    GridSpec::new(dims, spacing, origin)
}

/// Simulated acquisition with its noisy initial estimate.
#[derive(Debug, Clone)]
pub struct Scene {
    pub phantom: Volume,
    pub sequence: Sequence,
    pub initial: RelativeParams,
    /// Reconstruction parameters with the grid placed for this scene.
    pub recon: ReconParams,
}

impl Scene {
    pub fn ground_truth(&self) -> &RelativeParams {
        self.sequence
            .ground_truth()
            .expect("simulated scenes carry ground truth")
    }
}

/// Reconstruction parameters of `cfg`, with the grid placed over `est` when
/// the origin is automatic.
pub fn recon_params_for(cfg: &ExperimentConfig, est: &RelativeParams) -> Result<ReconParams> {
    let mut recon = cfg.refine.recon;
    if cfg.auto_origin {
        let g = &recon.grid;
        recon.grid = grid_covering(&chain_transforms(est)?, &cfg.geometry, g.dims, g.spacing)?;
    }
    Ok(recon)
}

pub fn build_scene(cfg: &ExperimentConfig) -> Result<Scene> {
    cfg.validate()?;
    let phantom = generate_phantom(&cfg.phantom, cfg.phantom_seed())?;
    let gt = generate_trajectory(&cfg.trajectory)?;
    let sequence = simulate_scan(&phantom, &gt, &cfg.geometry, &cfg.start)?;
    let initial = perturb_estimates(&gt, &cfg.noise)?;
    let recon = recon_params_for(cfg, &initial)?;
    Ok(Scene {
        phantom,
        sequence,
        initial,
        recon,
    })
}

fn jitter_shapes(spec: &PhantomSpec, jitter: f64, rng: &mut ChaCha8Rng) -> PhantomSpec {
    let mut out = spec.clone();
    for shape in &mut out.shapes {
        let d: [f64; 3] = [0; 3].map(|_| rng.random_range(-1.0..=1.0) * jitter);
        match shape {
            Shape::Ellipsoid { center, .. } => (0..3).for_each(|a| center[a] += d[a]),
            Shape::Tube { start, end, .. } => (0..3).for_each(|a| {
                start[a] += d[a];
                end[a] += d[a];
            }),
        }
    }
    out
}

pub fn reconstruct_sequence(
    seq: &Sequence,
    rel: &RelativeParams,
    recon: &ReconParams,
) -> Result<Volume> {
    let frames: Vec<&Frame> = seq.frames().iter().collect();
    reconstruct_transforms(&frames, &chain_transforms(rel)?, recon)
}

/// Real and fake volume pools from jittered training phantoms scanned along
/// the configured trajectory: real volumes are reconstructed at ground-truth
/// poses, fake ones at noisy estimates.
pub fn training_pools(cfg: &ExperimentConfig) -> Result<(Vec<Volume>, Vec<Volume>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pool_seed());
    let gt = generate_trajectory(&cfg.trajectory)?;
    let mut real = Vec::with_capacity(cfg.pool.size);
    let mut fake = Vec::with_capacity(cfg.pool.size);
    for _ in 0..cfg.pool.size {
        let spec = jitter_shapes(&cfg.phantom, cfg.pool.jitter, &mut rng);
        let vol = generate_phantom(&spec, rng.random())?;
        let seq = simulate_scan(&vol, &gt, &cfg.geometry, &cfg.start)?;
        real.push(reconstruct_sequence(
            &seq,
            &gt,
            &recon_params_for(cfg, &gt)?,
        )?);
        let noise = NoiseModel {
            seed: rng.random(),
            ..cfg.noise
        };
        let noisy = perturb_estimates(&gt, &noise)?;
        fake.push(reconstruct_sequence(
            &seq,
            &noisy,
            &recon_params_for(cfg, &noisy)?,
        )?);
    }
    Ok((real, fake))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub scene: Scene,
    pub pretrained: DiscriminatorParams,
    pub refined: RefineOutcome,
    pub before: MetricsReport,
    pub after: MetricsReport,
}

/// Simulates, pretrains the discriminator, refines and evaluates, without
/// touching the filesystem.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let scene = build_scene(cfg)?;
    let (real, fake) = if cfg.pool.size > 0 {
        training_pools(cfg)?
    } else {
        (Vec::new(), Vec::new())
    };
    let pretrained = if real.is_empty() {
        DiscriminatorParams::zeros(FeatureSpec::default())
    } else {
        disc_pretrain(&real, &fake, cfg.pool_seed())?
    };
    let mut refine = cfg.refine.clone();
    refine.recon = scene.recon;
    let refined = online_refine(&scene.sequence, &scene.initial, &pretrained, &refine, &real)?;
    let gt = scene.ground_truth();
    let before = evaluate(gt, &scene.initial, &cfg.geometry)?;
    let after = evaluate(gt, &refined.refined, &cfg.geometry)?;
    Ok(RunOutcome {
        scene,
        pretrained,
        refined,
        before,
        after,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Runs the pipeline and writes every artifact into `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let run = run_pipeline(cfg)?;
    let scene = &run.scene;
    fs::write(out.join("config.txt"), cfg.serialize())?;
    write_volume(create(&out.join("phantom.vol"))?, &scene.phantom)?;
    write_sequence(&out.join("sequence"), &scene.sequence)?;
    write_poses_csv(create(&out.join("initial.csv"))?, scene.initial.poses())?;
    write_poses_csv(
        create(&out.join("refined.csv"))?,
        run.refined.refined.poses(),
    )?;
    run.before
        .write_csv(create(&out.join("metrics_before.csv"))?)?;
    run.after
        .write_csv(create(&out.join("metrics_after.csv"))?)?;
    run.refined
        .history
        .write_csv(create(&out.join("history.csv"))?)?;
    let before = reconstruct_sequence(&scene.sequence, &scene.initial, &scene.recon)?;
    let after = reconstruct_sequence(&scene.sequence, &run.refined.refined, &scene.recon)?;
    write_volume(create(&out.join("recon_before.vol"))?, &before)?;
    write_volume(create(&out.join("recon_after.vol"))?, &after)?;
    run.refined
        .discriminator
        .write_csv(create(&out.join("discriminator.csv"))?)?;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub seed: u64,
    pub before: MetricsReport,
    pub after: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

pub const BENCH_CSV_HEADER: &str =
    "seed,fdr_before,fdr_after,adr_before,adr_after,md_before,md_after,sd_before,sd_after,hd_before,hd_after";

fn columns(r: &BenchRow) -> [f64; 10] {
    let (b, a) = (&r.before, &r.after);
    [
        b.fdr, a.fdr, b.adr, a.adr, b.md, a.md, b.sd, a.sd, b.hd, a.hd,
    ]
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl BenchReport {
    /// Column medians in [`BENCH_CSV_HEADER`] order, without the seed.
    pub fn medians(&self) -> [f64; 10] {
        let cols: Vec<[f64; 10]> = self.rows.iter().map(columns).collect();
        std::array::from_fn(|c| median(&cols.iter().map(|r| r[c]).collect::<Vec<_>>()))
    }

    pub fn median_before(&self) -> MetricsReport {
        self.median_report(0)
    }

    pub fn median_after(&self) -> MetricsReport {
        self.median_report(1)
    }

    fn median_report(&self, side: usize) -> MetricsReport {
        let m = self.medians();
        let fin = median(
            &self
                .rows
                .iter()
                .map(|r| {
                    if side == 0 {
                        r.before.final_drift
                    } else {
                        r.after.final_drift
                    }
                })
                .collect::<Vec<_>>(),
        );
        MetricsReport {
            final_drift: fin,
            fdr: m[side],
            adr: m[2 + side],
            md: m[4 + side],
            sd: m[6 + side],
            hd: m[8 + side],
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.16e}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(w, "{BENCH_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{},{}", r.seed, fmt(&columns(r)))?;
        }
        writeln!(w, "median,{}", fmt(&self.medians()))?;
        Ok(())
    }
}

/// Runs the pipeline for `cfg.bench_seeds` consecutive seeds starting at
/// `cfg.seed` and writes `bench_summary.csv` plus one history per seed.
pub fn bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(cfg.bench_seeds);
    for k in 0..cfg.bench_seeds as u64 {
        let mut run_cfg = cfg.clone();
        run_cfg.set_seed(cfg.seed.wrapping_add(k));
        let run = run_pipeline(&run_cfg)?;
        log::info!(
            "seed {}: fdr {:.3} -> {:.3}, hd {:.4} -> {:.4}",
            run_cfg.seed,
            run.before.fdr,
            run.after.fdr,
            run.before.hd,
            run.after.hd
        );
        run.refined.history.write_csv(create(
            &out.join(format!("history_seed{}.csv", run_cfg.seed)),
        )?)?;
        rows.push(BenchRow {
            seed: run_cfg.seed,
            before: run.before,
            after: run.after,
        });
    }
    let report = BenchReport { rows };
    report.write_csv(create(&out.join("bench_summary.csv"))?)?;
    Ok(report)
}

pub const GRADCHECK_TOL: f64 = 1e-3;
/// Components with smaller analytic magnitude are not compared.
pub const GRADCHECK_FLOOR: f64 = 1e-8;

/// A small seeded instance for finite-difference checks. Every voxel of the
/// grid projects inside every frame, and the held-out frames used by the
/// self-supervised objective are central crops that stay inside the grid, so
/// neither objective changes its discrete support under small perturbations.
#[derive(Debug, Clone)]
pub struct ToyInstance {
    /// Full-size frames, used by the adversarial objective.
    pub frames: Vec<Frame>,
    /// Same frames with the held-out ones cropped, used by the
    /// self-supervised objective.
    pub ssl_frames: Vec<Frame>,
    pub rel: RelativeParams,
    pub recon: ReconParams,
    pub reco: Vec<usize>,
    pub minus: Vec<usize>,
    pub disc: DiscriminatorParams,
}

const TOY_FRAME: usize = 40;
const TOY_CROP: usize = 16;
const TOY_EXTENT: f64 = 12.0;
const TOY_SMOOTH: f64 = 4.0;
const TOY_NOISE_T: f64 = 0.1;
const TOY_NOISE_R: f64 = 0.01;

fn crop_center(f: &Frame, size: usize) -> Result<Frame> {
    let g = f.geometry();
    let (r0, c0) = ((g.height - size) / 2, (g.width - size) / 2);
    let values = (0..size * size)
        .map(|p| f.get(r0 + p / size, c0 + p % size))
        .collect();
    Frame::new(FrameGeometry::new(size, size, g.spacing)?, values)
}

pub fn toy_instance(seed: u64, n_frames: usize, grid_n: usize) -> Result<ToyInstance> {
    if !(5..=crate::config::GRADCHECK_MAX_FRAMES).contains(&n_frames) {
        return Err(invalid(format!(
            "toy instances need 5..=8 frames, got {n_frames}"
        )));
    }
    if !(2..=crate::config::GRADCHECK_MAX_GRID).contains(&grid_n) {
        return Err(invalid(format!("toy grids are capped at 24, got {grid_n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let spec = PhantomSpec {
        grid: GridSpec::centered([48; 3], [0.5; 3])?,
        background: 0.1,
        smoothness: TOY_SMOOTH,
        texture: 0.0,
        shapes: vec![
            Shape::Ellipsoid {
                center: [u(-2.0, 2.0), u(-2.0, 2.0), u(-1.0, 1.0)],
                radii: [u(3.0, 5.0), u(3.0, 5.0), u(3.0, 5.0)],
                gray: u(0.6, 0.9),
            },
            Shape::Tube {
                start: [-10.0, u(-4.0, 4.0), u(-3.0, 3.0)],
                end: [10.0, u(-4.0, 4.0), u(-3.0, 3.0)],
                radius: u(1.0, 2.0),
                gray: u(0.3, 0.6),
            },
        ],
    };
    let steps: Vec<Pose> = (1..n_frames)
        .map(|_| {
            Pose::new(
                u(-0.1, 0.1),
                u(-0.1, 0.1),
                u(0.5, 0.8),
                u(-0.03, 0.03),
                u(-0.03, 0.03),
                u(-0.03, 0.03),
            )
        })
        .collect();
    let texture_seed = u(0.0, 1e9) as u64;
    let noise = NoiseModel {
        bias: [0.0; 6],
        sigma: [
            TOY_NOISE_T,
            TOY_NOISE_T,
            TOY_NOISE_T,
            TOY_NOISE_R,
            TOY_NOISE_R,
            TOY_NOISE_R,
        ],
        seed: u(0.0, 1e9) as u64,
    };
    let phantom = generate_phantom(&spec, texture_seed)?;
    let gt = RelativeParams::new(steps);
    let span: f64 = gt.poses().iter().map(|p| p.tz).sum();
    let g = FrameGeometry::new(TOY_FRAME, TOY_FRAME, 0.5)?;
    let seq = simulate_scan(
        &phantom,
        &gt,
        &g,
        &Pose::new(0.0, 0.0, -span / 2.0, 0.0, 0.0, 0.0),
    )?;
    let rel = perturb_estimates(&gt, &noise)?;
    let spacing = TOY_EXTENT / (grid_n - 1) as f64;
    let grid = grid_covering(&chain_transforms(&rel)?, &g, [grid_n; 3], [spacing; 3])?;
    let mut recon = ReconParams::new(grid);
    if seed % 2 == 1 {
        recon.mode = WeightMode::NearestEmphasis;
    }
    let (reco, minus) = split_sequence(n_frames, 0.5)?;
    let frames = seq.frames().to_vec();
    let mut ssl_frames = frames.clone();
    for &m in &minus {
        ssl_frames[m] = crop_center(&frames[m], TOY_CROP)?;
    }
    let spec = FeatureSpec::default();
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let disc = DiscriminatorParams {
        spec,
        weights: (0..spec.len()).map(|_| normal.sample(&mut wrng)).collect(),
        bias: 0.0,
    };
    Ok(ToyInstance {
        frames,
        ssl_frames,
        rel,
        recon,
        reco,
        minus,
        disc,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub instance: usize,
    pub objective: ObjectiveKind,
    pub frames: usize,
    pub grid: usize,
    /// Components with `|analytic| > GRADCHECK_FLOOR`.
    pub checked: usize,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOL
    }
}

/// Largest relative error `|a − f| / max(|a|, |f|)` between `analytic` and
/// central finite differences of the objective, over components whose
/// analytic magnitude exceeds [`GRADCHECK_FLOOR`]. `steps` holds the
/// translation (mm) and rotation (rad) steps. Returns the number of compared
/// components and the error.
pub fn check_gradient(
    frames: &[Frame],
    rel: &RelativeParams,
    params: &ReconParams,
    objective: &Objective,
    analytic: &[[f64; 6]],
    steps: (f64, f64),
) -> Result<(usize, f64)> {
    if analytic.len() != rel.len() {
        return Err(invalid(
            "analytic gradient length differs from the parameters",
        ));
    }
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        for (c, &a) in a.iter().enumerate() {
            if a.abs() <= GRADCHECK_FLOOR {
                continue;
            }
            let h = if c < 3 { steps.0 } else { steps.1 };
            let eval = |delta: f64| -> Result<f64> {
                let mut p = rel.clone();
                let mut arr = p.0[i].to_array();
                arr[c] += delta;
                p.0[i] = Pose::from_array(arr);
                Ok(objective_value(frames, &p, params, objective)?.loss)
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            let err = (a - fd).abs() / a.abs().max(fd.abs());
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok((checked, worst))
}

/// Gradient check of the self-supervised and adversarial objectives on
/// `cfg.gradcheck.instances` seeded toy instances.
pub fn gradcheck(cfg: &ExperimentConfig) -> Result<Vec<GradcheckReport>> {
    let gc = &cfg.gradcheck;
    if gc.max_frames > crate::config::GRADCHECK_MAX_FRAMES
        || gc.max_grid > crate::config::GRADCHECK_MAX_GRID
    {
        return Err(invalid(
            "gradcheck instance exceeds the size caps (8 frames, 24^3 grid)",
        ));
    }
    if !(gc.step_translation > 0.0 && gc.step_rotation > 0.0) {
        return Err(invalid("gradcheck steps must be > 0"));
    }
    let steps = (gc.step_translation, gc.step_rotation);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for instance in 0..gc.instances {
        let n = rng.random_range(5..=gc.max_frames.max(5));
        let grid = rng.random_range(16..=gc.max_grid.max(16));
        let toy = toy_instance(rng.random(), n, grid)?;
        let ssl = Objective::SelfSupervised {
            reco: toy.reco.clone(),
            minus: toy.minus.clone(),
        };
        let adv = Objective::Adversarial { disc: &toy.disc };
        for (frames, objective) in [(&toy.ssl_frames, ssl), (&toy.frames, adv)] {
            let value = objective_gradient(frames, &toy.rel, &toy.recon, &objective)?;
            let (checked, max_rel_error) =
                check_gradient(frames, &toy.rel, &toy.recon, &objective, &value.grad, steps)?;
            out.push(GradcheckReport {
                instance,
                objective: objective.kind(),
                frames: n,
                grid,
                checked,
                max_rel_error,
            });
        }
    }
    Ok(out)
}
