//! Online test-time refinement of relative pose estimates.
//!
//! Each iteration takes one discriminator step on the quadratic-potential
//! loss against a randomly drawn real volume, then one backtracking gradient
//! step on the generator objective `adv_weight·(−C(V_f)) + ssl_weight·ssl`
//! with respect to every relative pose component.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::geometry::{Pose, RelativeParams};
use crate::imaging::{Sequence, Volume};
use crate::losses::{loss_discriminator_grad, DiscriminatorParams, RefineLossReport};
use crate::metrics::{evaluate, MetricsReport};
use crate::recon::{
    objective_gradient, objective_value, reconstruct_transforms, Objective, ReconParams,
};

/// Halvings tried before a generator step is rejected.
pub const BACKTRACK_HALVINGS: usize = 5;

/// Splits `0..n` into reconstruction and held-out frames by a uniform
/// interleave: frame 0 always reconstructs, frame `i` does iff
/// `⌊i·p⌋ > ⌊(i−1)·p⌋`.
pub fn split_sequence(n: usize, proportion: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 4 {
        return Err(invalid(format!("split needs at least 4 frames, got {n}")));
    }
    if !(proportion > 0.0 && proportion < 1.0) {
        return Err(invalid(format!("proportion {proportion} outside (0,1)")));
    }
    let (mut reco, mut minus) = (vec![0], Vec::new());
    for i in 1..n {
        if (i as f64 * proportion).floor() > ((i - 1) as f64 * proportion).floor() {
            reco.push(i);
        } else {
            minus.push(i);
        }
    }
    Ok((reco, minus))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub proportion: f64,
    pub iterations: usize,
    /// Step size for translation components (mm per unit gradient).
    pub lr_translation: f64,
    /// Step size for rotation components (rad per unit gradient).
    pub lr_rotation: f64,
    pub lr_discriminator: f64,
    pub adv_weight: f64,
    pub ssl_weight: f64,
    pub recon: ReconParams,
    pub seed: u64,
}

impl RefineConfig {
    pub fn new(recon: ReconParams) -> Self {
        RefineConfig {
            proportion: 0.5,
            iterations: 30,
            lr_translation: 1e-2,
            lr_rotation: 1e-3,
            lr_discriminator: 1e-3,
            adv_weight: 1.0,
            ssl_weight: 1.0,
            recon,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.proportion > 0.0 && self.proportion < 1.0) {
            return Err(invalid(format!(
                "proportion {} outside (0,1)",
                self.proportion
            )));
        }
        if self.iterations == 0 {
            return Err(invalid("refinement needs at least one iteration"));
        }
        let rates = [self.lr_translation, self.lr_rotation, self.lr_discriminator];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(invalid("learning rates must be > 0"));
        }
        if !(self.adv_weight >= 0.0 && self.ssl_weight >= 0.0) {
            return Err(invalid("loss weights must be >= 0"));
        }
        self.recon.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Losses evaluated at the parameters entering the iteration.
    pub losses: RefineLossReport,
    /// Metrics of the parameters leaving the iteration.
    pub metrics: Option<MetricsReport>,
    /// FNV-1a hash of the parameter bits leaving the iteration.
    pub params_hash: u64,
    /// Step scale accepted by backtracking; 0 when every trial was rejected.
    pub step_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefineHistory {
    pub records: Vec<IterationRecord>,
}

pub const HISTORY_CSV_HEADER: &str = "iteration,L_d,L_g,ssl,adv,fdr,adr,md,sd,hd";

impl RefineHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{HISTORY_CSV_HEADER}")?;
        for (i, r) in self.records.iter().enumerate() {
            let l = &r.losses;
            let mut fields = vec![l.l_d, l.l_g, l.ssl_term, l.adv_term];
            match &r.metrics {
                Some(m) => fields.extend([m.fdr, m.adr, m.md, m.sd, m.hd]),
                None => fields.extend([f64::NAN; 5]),
            }
            let row: Vec<String> = fields.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{},{}", i + 1, row.join(","))?;
        }
        Ok(())
    }
}

pub fn params_hash(rel: &RelativeParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in rel.flatten() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn apply_step(
    rel: &RelativeParams,
    grad: &[[f64; 6]],
    cfg: &RefineConfig,
    scale: f64,
) -> RelativeParams {
    RelativeParams::new(
        rel.poses()
            .iter()
            .zip(grad)
            .map(|(p, g)| {
                let mut a = p.to_array();
                for c in 0..6 {
                    let lr = if c < 3 {
                        cfg.lr_translation
                    } else {
                        cfg.lr_rotation
                    };
                    a[c] -= scale * lr * g[c];
                }
                Pose::from_array(a)
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub refined: RelativeParams,
    pub discriminator: DiscriminatorParams,
    pub history: RefineHistory,
}

/// Runs the refinement loop. `real_pool` supplies the volumes drawn as real
/// samples; it may be empty only when `adv_weight` is 0, in which case the
/// discriminator is left untouched.
pub fn online_refine(
    seq: &Sequence,
    init: &RelativeParams,
    disc: &DiscriminatorParams,
    cfg: &RefineConfig,
    real_pool: &[Volume],
) -> Result<RefineOutcome> {
    cfg.validate()?;
    disc.validate()?;
    if init.len() + 1 != seq.len() {
        return Err(invalid(format!(
            "initial estimate has {} entries for {} frames",
            init.len(),
            seq.len()
        )));
    }
    if real_pool.is_empty() && cfg.adv_weight > 0.0 {
        return Err(invalid(
            "adversarial refinement needs a non-empty real pool",
        ));
    }
    if real_pool
        .iter()
        .any(|v| v.grid().dims != cfg.recon.grid.dims)
    {
        return Err(invalid(
            "real pool volumes must share the reconstruction grid",
        ));
    }
    let (reco, minus) = split_sequence(seq.len(), cfg.proportion)?;
    let frames = seq.frames();
    let all_frames: Vec<_> = frames.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init.clone();
    let mut disc = disc.clone();
    let mut history = RefineHistory::default();

    for _ in 0..cfg.iterations {
        let mut l_d = 0.0;
        if !real_pool.is_empty() {
            let abs = crate::geometry::chain_transforms(&params)?;
            let vf = reconstruct_transforms(&all_frames, &abs, &cfg.recon)?;
            let vr = &real_pool[rng.random_range(0..real_pool.len())];
            let dl = loss_discriminator_grad(&vf, vr, &disc)?;
            l_d = dl.value;
            for (w, g) in disc.weights.iter_mut().zip(&dl.weight_grad) {
                *w -= cfg.lr_discriminator * g;
            }
        }

        let objective = Objective::Generator {
            reco: reco.clone(),
            minus: minus.clone(),
            disc: &disc,
            adv_weight: cfg.adv_weight,
            ssl_weight: cfg.ssl_weight,
        };
        let value = objective_gradient(frames, &params, &cfg.recon, &objective)?;
        let ssl = value.ssl.unwrap_or(0.0);
        let adv = value.adv.unwrap_or(0.0);
        let losses = RefineLossReport {
            l_d,
            l_g: adv + ssl,
            ssl_term: ssl,
            adv_term: adv,
        };
        if !value.loss.is_finite() {
            return Err(invalid("generator loss is not finite"));
        }

        let mut scale = 1.0;
        let mut accepted = 0.0;
        for _ in 0..=BACKTRACK_HALVINGS {
            let candidate = apply_step(&params, &value.grad, cfg, scale);
            let trial = objective_value(frames, &candidate, &cfg.recon, &objective)?;
            if trial.loss < value.loss {
                params = candidate;
                accepted = scale;
                break;
            }
            scale *= 0.5;
        }

        let metrics = match seq.ground_truth() {
            Some(gt) => Some(evaluate(gt, &params, seq.geometry())?),
            None => None,
        };
        history.records.push(IterationRecord {
            losses,
            metrics,
            params_hash: params_hash(&params),
            step_scale: accepted,
        });
    }
    Ok(RefineOutcome {
        refined: params,
        discriminator: disc,
        history,
    })
}
