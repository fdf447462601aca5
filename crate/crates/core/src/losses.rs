//! Pose regression loss, the affine shape-prior discriminator, and the
//! adversarial and self-supervised losses used during refinement.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, parse_err, Result};
use crate::geometry::RelativeParams;
use crate::imaging::{Frame, SampledSlice, Volume};

/// Case-wise regression loss: mean absolute error over all components plus
/// `1 − corr` of the flattened component vectors. A zero-variance input
/// gets the maximal correlation penalty of 1.
pub fn loss_train(est: &RelativeParams, gt: &RelativeParams) -> Result<f64> {
    if est.len() != gt.len() {
        return Err(invalid(format!(
            "estimate has {} entries, ground truth {}",
            est.len(),
            gt.len()
        )));
    }
    if est.is_empty() {
        return Err(invalid("loss_train needs at least one entry"));
    }
    let a = est.flatten();
    let b = gt.flatten();
    let n = a.len() as f64;
    let mae = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    let corr_term = if va == 0.0 || vb == 0.0 {
        1.0
    } else {
        1.0 - cov / (va.sqrt() * vb.sqrt())
    };
    Ok(mae + corr_term)
}

/// Pooled-grid and histogram feature layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSpec {
    pub pool: usize,
    pub bins: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec { pool: 8, bins: 16 }
    }
}

impl FeatureSpec {
    pub fn len(&self) -> usize {
        self.pool.pow(3) + self.bins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if self.pool == 0 || self.bins < 2 {
            return Err(invalid("feature spec needs pool >= 1 and bins >= 2"));
        }
        Ok(())
    }

    fn pool_cell(&self, v: &Volume, idx: usize) -> usize {
        let g = v.grid();
        let c = g.coords(idx);
        let cell = [0, 1, 2].map(|a| c[a] * self.pool / g.dims[a]);
        cell[0] + self.pool * (cell[1] + self.pool * cell[2])
    }

    /// Linear (hat-function) binning on knots `k / (bins − 1)`: the lower
    /// bin index and the mass going to the upper bin.
    fn hist_split(&self, gray: f64) -> (usize, f64) {
        let t = gray.clamp(0.0, 1.0) * (self.bins - 1) as f64;
        let k = (t.floor() as usize).min(self.bins - 2);
        (k, t - k as f64)
    }
}

/// Average-pooled gray grid (invalid voxels excluded, empty pools 0) followed
/// by an L1-normalized gray histogram over valid voxels. Histogram mass is
/// split linearly between the two nearest knots, which keeps the features
/// continuous in the voxel grays.
pub fn disc_features_with(v: &Volume, spec: &FeatureSpec) -> Vec<f64> {
    let cells = spec.pool.pow(3);
    let mut feats = vec![0.0; spec.len()];
    let mut counts = vec![0usize; cells];
    let mut valid = 0usize;
    for (idx, (&g, &m)) in v.values().iter().zip(v.mask()).enumerate() {
        if !m {
            continue;
        }
        let cell = spec.pool_cell(v, idx);
        feats[cell] += g;
        counts[cell] += 1;
        let (k, f) = spec.hist_split(g);
        feats[cells + k] += 1.0 - f;
        feats[cells + k + 1] += f;
        valid += 1;
    }
    for (f, &c) in feats.iter_mut().zip(&counts) {
        if c > 0 {
            *f /= c as f64;
        }
    }
    if valid > 0 {
        feats[cells..].iter_mut().for_each(|h| *h /= valid as f64);
    }
    feats
}

pub fn disc_features(v: &Volume) -> Vec<f64> {
    disc_features_with(v, &FeatureSpec::default())
}

/// Affine discriminator `C(V) = w · features(V) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub spec: FeatureSpec,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl DiscriminatorParams {
    pub fn zeros(spec: FeatureSpec) -> Self {
        DiscriminatorParams {
            spec,
            weights: vec![0.0; spec.len()],
            bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.weights.len() != self.spec.len() {
            return Err(invalid(format!(
                "discriminator has {} weights, feature spec needs {}",
                self.weights.len(),
                self.spec.len()
            )));
        }
        Ok(())
    }

    pub fn features(&self, v: &Volume) -> Vec<f64> {
        disc_features_with(v, &self.spec)
    }

    fn score_features(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    /// `dC/dV` for every voxel of `v`; zero on invalid voxels.
    pub fn score_gradient(&self, v: &Volume) -> Result<Vec<f64>> {
        self.validate()?;
        let spec = &self.spec;
        let cells = spec.pool.pow(3);
        let mut counts = vec![0usize; cells];
        for (idx, _) in v.mask().iter().enumerate().filter(|(_, &m)| m) {
            counts[spec.pool_cell(v, idx)] += 1;
        }
        let valid: usize = counts.iter().sum();
        let slope = (spec.bins - 1) as f64 / valid.max(1) as f64;
        let hist_w = &self.weights[cells..];
        Ok(v.values()
            .iter()
            .zip(v.mask())
            .enumerate()
            .map(|(idx, (&g, &m))| {
                if !m {
                    return 0.0;
                }
                let cell = spec.pool_cell(v, idx);
                let (k, _) = spec.hist_split(g);
                self.weights[cell] / counts[cell] as f64 + slope * (hist_w[k + 1] - hist_w[k])
            })
            .collect())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "pool={},bins={}", self.spec.pool, self.spec.bins)?;
        let row: Vec<String> = self.weights.iter().map(|x| format!("{x:.16e}")).collect();
        writeln!(w, "{}", row.join(","))?;
        writeln!(w, "{:.16e}", self.bias)?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let lines: Vec<String> = r
            .lines()
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|l| !l.trim().is_empty())
            .collect();
        if lines.len() != 3 {
            return Err(parse_err(
                "discriminator csv",
                "expected header, weights and bias lines",
            ));
        }
        let mut pool = None;
        let mut bins = None;
        for field in lines[0].split(',') {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| parse_err("discriminator header", field.to_string()))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|e| parse_err("discriminator header", format!("{k}: {e}")))?;
            match k.trim() {
                "pool" => pool = Some(v),
                "bins" => bins = Some(v),
                other => {
                    return Err(parse_err(
                        "discriminator header",
                        format!("unknown key {other}"),
                    ))
                }
            }
        }
        let (Some(pool), Some(bins)) = (pool, bins) else {
            return Err(parse_err("discriminator header", "needs pool and bins"));
        };
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| parse_err("discriminator csv", e.to_string()))
        };
        let weights = lines[1].split(',').map(num).collect::<Result<Vec<_>>>()?;
        let d = DiscriminatorParams {
            spec: FeatureSpec { pool, bins },
            weights,
            bias: num(&lines[2])?,
        };
        d.validate()?;
        Ok(d)
    }
}

/// Raw affine score, no squashing.
pub fn disc_score(v: &Volume, c: &DiscriminatorParams) -> Result<f64> {
    c.validate()?;
    Ok(c.score_features(&c.features(v)))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub const PRETRAIN_STEPS: usize = 200;
pub const PRETRAIN_LR: f64 = 0.1;

/// Logistic regression of real (label 1) versus fake (label 0) volumes:
/// full-batch gradient descent on mean cross-entropy from a seeded init.
pub fn disc_pretrain(real: &[Volume], fake: &[Volume], seed: u64) -> Result<DiscriminatorParams> {
    disc_pretrain_with(real, fake, seed, FeatureSpec::default())
}

pub fn disc_pretrain_with(
    real: &[Volume],
    fake: &[Volume],
    seed: u64,
    spec: FeatureSpec,
) -> Result<DiscriminatorParams> {
    spec.validate()?;
    if real.is_empty() || fake.is_empty() {
        return Err(invalid(
            "discriminator pretraining needs non-empty real and fake pools",
        ));
    }
    let samples: Vec<(Vec<f64>, f64)> = real
        .iter()
        .map(|v| (disc_features_with(v, &spec), 1.0))
        .chain(fake.iter().map(|v| (disc_features_with(v, &spec), 0.0)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut c = DiscriminatorParams {
        spec,
        weights: (0..spec.len()).map(|_| init.sample(&mut rng)).collect(),
        bias: 0.0,
    };
    let n = samples.len() as f64;
    for _ in 0..PRETRAIN_STEPS {
        let mut gw = vec![0.0; spec.len()];
        let mut gb = 0.0;
        for (f, y) in &samples {
            let e = sigmoid(c.score_features(f)) - y;
            gw.iter_mut().zip(f).for_each(|(g, x)| *g += e * x);
            gb += e;
        }
        c.weights
            .iter_mut()
            .zip(&gw)
            .for_each(|(w, g)| *w -= PRETRAIN_LR * g / n);
        c.bias -= PRETRAIN_LR * gb / n;
    }
    Ok(c)
}

/// Fraction of volumes classified correctly (`score > 0` means real).
pub fn disc_accuracy(c: &DiscriminatorParams, real: &[Volume], fake: &[Volume]) -> Result<f64> {
    let mut correct = 0usize;
    for v in real {
        correct += (disc_score(v, c)? > 0.0) as usize;
    }
    for v in fake {
        correct += (disc_score(v, c)? <= 0.0) as usize;
    }
    Ok(correct as f64 / (real.len() + fake.len()) as f64)
}

/// Sum of absolute voxel differences over voxels valid in both volumes.
pub fn volume_l1(a: &Volume, b: &Volume) -> Result<f64> {
    if a.grid().dims != b.grid().dims {
        return Err(invalid("volumes have different dims"));
    }
    Ok(a.values()
        .iter()
        .zip(b.values())
        .zip(a.mask().iter().zip(b.mask()))
        .filter(|(_, (&ma, &mb))| ma && mb)
        .map(|((x, y), _)| (x - y).abs())
        .sum())
}

const L1_FLOOR: f64 = 1e-12;

/// Discriminator loss value with its gradient with respect to the weights
/// (the bias cancels in the score difference).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorLoss {
    pub value: f64,
    pub weight_grad: Vec<f64>,
}

/// `L_d = C(V_f) − C(V_r) + (C(V_f) − C(V_r))² / (2‖V_f − V_r‖₁)`; the
/// quadratic term is 0 when the L1 distance is below 1e-12.
pub fn loss_discriminator(vf: &Volume, vr: &Volume, c: &DiscriminatorParams) -> Result<f64> {
    Ok(loss_discriminator_grad(vf, vr, c)?.value)
}

pub fn loss_discriminator_grad(
    vf: &Volume,
    vr: &Volume,
    c: &DiscriminatorParams,
) -> Result<DiscriminatorLoss> {
    c.validate()?;
    let l1 = volume_l1(vf, vr)?;
    let ff = c.features(vf);
    let fr = c.features(vr);
    Ok(quadratic_potential(
        c.score_features(&ff) - c.score_features(&fr),
        l1,
        &ff,
        &fr,
    ))
}

/// Quadratic-potential loss from a score difference and an L1 distance.
pub fn quadratic_potential_value(delta: f64, l1: f64) -> f64 {
    if l1 < L1_FLOOR {
        delta
    } else {
        delta + delta * delta / (2.0 * l1)
    }
}

fn quadratic_potential(delta: f64, l1: f64, ff: &[f64], fr: &[f64]) -> DiscriminatorLoss {
    let scale = if l1 < L1_FLOOR { 1.0 } else { 1.0 + delta / l1 };
    DiscriminatorLoss {
        value: quadratic_potential_value(delta, l1),
        weight_grad: ff.iter().zip(fr).map(|(a, b)| scale * (a - b)).collect(),
    }
}

/// Per-iteration loss values of the refinement loop.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RefineLossReport {
    pub l_d: f64,
    pub l_g: f64,
    pub ssl_term: f64,
    pub adv_term: f64,
}

/// Mean absolute difference over pixels valid in the generated slices;
/// 0 when no pixel is valid.
pub fn ssl_term(generated: &[SampledSlice], reference: &[Frame]) -> Result<f64> {
    if generated.len() != reference.len() {
        return Err(invalid("generated and reference slice counts differ"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (g, r) in generated.iter().zip(reference) {
        if g.frame.geometry() != r.geometry() || g.valid.len() != r.values().len() {
            return Err(invalid("generated and reference slice geometries differ"));
        }
        for ((a, b), &ok) in g.frame.values().iter().zip(r.values()).zip(&g.valid) {
            if ok {
                sum += (a - b).abs();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Generator loss `−C(V_f) + ssl`. The `l_d` field is left at 0; the
/// refinement loop fills it in.
pub fn loss_generator(
    vf: &Volume,
    c: &DiscriminatorParams,
    generated: &[SampledSlice],
    reference: &[Frame],
) -> Result<RefineLossReport> {
    let adv_term = -disc_score(vf, c)?;
    let ssl = ssl_term(generated, reference)?;
    Ok(RefineLossReport {
        l_d: 0.0,
        l_g: adv_term + ssl,
        ssl_term: ssl,
        adv_term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{FrameGeometry, GridSpec};

    fn rel(vals: &[f64]) -> RelativeParams {
        RelativeParams::from_flat(vals).unwrap()
    }

    fn fixed_gt() -> Vec<f64> {
        vec![
            0.3, -1.2, 0.8, 0.05, -0.02, 0.1, -0.4, 0.9, 0.5, -0.07, 0.03, -0.01,
        ]
    }

    #[test]
    fn loss_train_examples() {
        let gt = rel(&fixed_gt());
        assert!(loss_train(&gt, &gt).unwrap().abs() < 1e-15);
        let shifted = rel(&fixed_gt().iter().map(|x| x + 0.3).collect::<Vec<_>>());
        assert!((loss_train(&shifted, &gt).unwrap() - 0.3).abs() < 1e-12);

        let mut centered = fixed_gt();
        let mean = centered.iter().sum::<f64>() / centered.len() as f64;
        centered.iter_mut().for_each(|x| *x -= mean);
        let neg = rel(&centered.iter().map(|x| -x).collect::<Vec<_>>());
        let expect = centered.iter().map(|x| (2.0 * x).abs()).sum::<f64>() / 12.0 + 2.0;
        assert!((loss_train(&neg, &rel(&centered)).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_train_zero_variance_and_mismatch() {
        let flat = RelativeParams::zeros(2);
        assert_eq!(loss_train(&flat, &flat).unwrap(), 1.0);
        assert!(loss_train(&flat, &RelativeParams::zeros(3)).is_err());
    }

    fn grid(n: usize) -> GridSpec {
        GridSpec::centered([n; 3], [1.0; 3]).unwrap()
    }

    #[test]
    fn features_of_constant_volume() {
        let g = 4.0 / 15.0;
        let f = disc_features(&Volume::filled(grid(16), g).unwrap());
        assert_eq!(f.len(), 528);
        assert!(f[..512].iter().all(|x| (x - g).abs() < 1e-15));
        assert!((f[512 + 4] - 1.0).abs() < 1e-12);
        assert!((f[512..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn features_of_invalid_and_split_volumes() {
        let gr = grid(8);
        let empty = Volume::new(gr, vec![0.0; gr.len()], vec![false; gr.len()]).unwrap();
        assert!(disc_features(&empty).iter().all(|&x| x == 0.0));
        let half: Vec<f64> = (0..gr.len())
            .map(|i| (gr.coords(i)[2] >= 4) as u8 as f64)
            .collect();
        let v = Volume::new(gr, half, vec![true; gr.len()]).unwrap();
        let f = disc_features(&v);
        assert!((f[512] - 0.5).abs() < 1e-15 && (f[527] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn score_examples() {
        let v = Volume::filled(grid(8), 0.3).unwrap();
        let mut c = DiscriminatorParams::zeros(FeatureSpec::default());
        c.bias = 0.7;
        assert_eq!(disc_score(&v, &c).unwrap(), 0.7);

        c.weights = (0..528).map(|i| (i as f64 * 0.37).sin()).collect();
        let s1 = disc_score(&v, &c).unwrap();
        let mut c2 = c.clone();
        c2.weights.iter_mut().for_each(|w| *w *= 2.0);
        c2.bias *= 2.0;
        assert!((disc_score(&v, &c2).unwrap() - 2.0 * s1).abs() < 1e-12);

        let small = FeatureSpec { pool: 1, bins: 2 };
        let gr = GridSpec::centered([2, 1, 1], [1.0; 3]).unwrap();
        let v = Volume::new(gr, vec![0.2, 0.6], vec![true; 2]).unwrap();
        let c = DiscriminatorParams {
            spec: small,
            weights: vec![2.0, -1.0, 3.0],
            bias: 0.5,
        };
        // pool mean 0.4; histogram knots 0 and 1 receive 0.6 and 0.4.
        let expect = 2.0 * 0.4 - 1.0 * 0.6 + 3.0 * 0.4 + 0.5;
        assert!((disc_score(&v, &c).unwrap() - expect).abs() < 1e-15);

        c2.weights.pop();
        assert!(disc_score(&v, &c2).is_err());
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let gr = GridSpec::centered([5, 6, 7], [1.0; 3]).unwrap();
        let vals: Vec<f64> = (0..gr.len())
            .map(|i| 0.5 + 0.45 * (i as f64 * 0.7).sin())
            .collect();
        let mut mask = vec![true; gr.len()];
        mask[3] = false;
        let mut vals_masked = vals.clone();
        vals_masked[3] = 0.0;
        let v = Volume::new(gr, vals_masked, mask.clone()).unwrap();
        let spec = FeatureSpec { pool: 3, bins: 6 };
        let c = DiscriminatorParams {
            spec,
            weights: (0..spec.len()).map(|i| (i as f64 * 1.3).cos()).collect(),
            bias: 0.1,
        };
        let grad = c.score_gradient(&v).unwrap();
        for idx in [0, 3, 10, 77, 200] {
            let mut hi = v.values().to_vec();
            let mut lo = v.values().to_vec();
            if !mask[idx] {
                assert_eq!(grad[idx], 0.0);
                continue;
            }
            hi[idx] += 1e-7;
            lo[idx] -= 1e-7;
            let s =
                |x: Vec<f64>| disc_score(&Volume::new(gr, x, mask.clone()).unwrap(), &c).unwrap();
            let fd = (s(hi) - s(lo)) / 2e-7;
            assert!(
                (fd - grad[idx]).abs() < 1e-6,
                "voxel {idx}: fd {fd} an {}",
                grad[idx]
            );
        }
    }

    #[test]
    fn pretrain_separable_and_identical_pools() {
        let real: Vec<Volume> = (0..4)
            .map(|i| Volume::filled(grid(8), 0.7 + 0.05 * i as f64).unwrap())
            .collect();
        let fake: Vec<Volume> = (0..4)
            .map(|i| Volume::filled(grid(8), 0.1 + 0.05 * i as f64).unwrap())
            .collect();
        let c = disc_pretrain(&real, &fake, 3).unwrap();
        assert!(disc_accuracy(&c, &real, &fake).unwrap() >= 0.95);
        assert_eq!(c, disc_pretrain(&real, &fake, 3).unwrap());
        let acc = disc_accuracy(&disc_pretrain(&real, &real, 3).unwrap(), &real, &real).unwrap();
        assert!((acc - 0.5).abs() <= 0.1);
        assert!(disc_pretrain(&[], &fake, 0).is_err());
    }

    #[test]
    fn discriminator_loss_examples() {
        let gr = GridSpec::centered([10, 1, 1], [1.0; 3]).unwrap();
        let vf = Volume::filled(gr, 0.0).unwrap();
        let vr = Volume::filled(gr, 1.0).unwrap();
        // Only the bias and the histogram knot at gray 1 carry weight, so
        // C(V_f) = 0 and C(V_r) = 1 with ‖V_f − V_r‖₁ = 10.
        let mut c = DiscriminatorParams::zeros(FeatureSpec::default());
        *c.weights.last_mut().unwrap() = 1.0;
        assert_eq!(disc_score(&vf, &c).unwrap(), 0.0);
        assert_eq!(disc_score(&vr, &c).unwrap(), 1.0);
        assert!((loss_discriminator(&vf, &vr, &c).unwrap() + 0.95).abs() < 1e-12);

        let swapped = loss_discriminator(&vr, &vf, &c).unwrap();
        assert!((swapped - (1.0 + 0.05)).abs() < 1e-12);

        *c.weights.last_mut().unwrap() = 0.0;
        c.bias = 3.0;
        assert_eq!(loss_discriminator(&vf, &vr, &c).unwrap(), 0.0);
        assert_eq!(loss_discriminator(&vf, &vf, &c).unwrap(), 0.0);

        let other = Volume::filled(GridSpec::centered([9, 1, 1], [1.0; 3]).unwrap(), 0.0).unwrap();
        assert!(loss_discriminator(&vf, &other, &c).is_err());
    }

    fn slice_pair(diff: f64) -> (SampledSlice, Frame) {
        let g = FrameGeometry::new(3, 3, 1.0).unwrap();
        let reference = Frame::filled(g, 0.4).unwrap();
        let generated = SampledSlice {
            frame: Frame::filled(g, 0.4 + diff).unwrap(),
            valid: vec![true; 9],
        };
        (generated, reference)
    }

    #[test]
    fn generator_loss_examples() {
        let v = Volume::filled(grid(4), 0.5).unwrap();
        let mut c = DiscriminatorParams::zeros(FeatureSpec::default());
        c.bias = 0.5;
        let (g, r) = slice_pair(0.0);
        let rep = loss_generator(&v, &c, &[g], std::slice::from_ref(&r)).unwrap();
        assert_eq!(rep.l_g, -0.5);

        c.bias = 0.25;
        let (g, r) = slice_pair(0.1);
        let rep =
            loss_generator(&v, &c, std::slice::from_ref(&g), std::slice::from_ref(&r)).unwrap();
        assert!((rep.l_g - (0.1 - 0.25)).abs() < 1e-12);
        assert_eq!(rep.l_g, rep.adv_term + rep.ssl_term);

        let mut masked = g;
        masked.valid = vec![false; 9];
        masked.valid[4] = true;
        assert!((ssl_term(&[masked], std::slice::from_ref(&r)).unwrap() - 0.1).abs() < 1e-12);
        assert!(loss_generator(&v, &c, &[], &[r]).is_err());
    }

    #[test]
    fn discriminator_csv_round_trip() {
        let spec = FeatureSpec { pool: 2, bins: 3 };
        let c = DiscriminatorParams {
            spec,
            weights: (0..spec.len())
                .map(|i| (i as f64).sqrt() - 1.0 / 3.0)
                .collect(),
            bias: -0.125,
        };
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"pool=2,bins=3\n"));
        assert_eq!(DiscriminatorParams::read_csv(&buf[..]).unwrap(), c);
    }
}
