//! Drift-based trajectory metrics.
//!
//! Frame centres are the origins of the chained absolute transforms. The
//! sequence length used by the rate metrics is the arc length of the
//! ground-truth centre path.

use std::io::Write;

use nalgebra::Vector3;

use crate::error::{invalid, Error, Result};
use crate::geometry::{chain_transforms, RelativeParams};
use crate::imaging::FrameGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub final_drift: f64,
    /// Final drift rate, percent.
    pub fdr: f64,
    /// Average drift rate, percent.
    pub adr: f64,
    pub md: f64,
    pub sd: f64,
    pub hd: f64,
}

pub const METRICS_CSV_HEADER: &str = "fdr,adr,md,sd,hd,final_drift";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        [
            self.fdr,
            self.adr,
            self.md,
            self.sd,
            self.hd,
            self.final_drift,
        ]
        .iter()
        .map(|v| format!("{v:.16e}"))
        .collect::<Vec<_>>()
        .join(",")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{METRICS_CSV_HEADER}")?;
        writeln!(w, "{}", self.csv_row())?;
        Ok(())
    }
}

fn centers(rel: &RelativeParams) -> Result<Vec<Vector3<f64>>> {
    Ok(chain_transforms(rel)?
        .iter()
        .map(|t| t.translation())
        .collect())
}

fn check_pair(gt: &RelativeParams, est: &RelativeParams) -> Result<()> {
    if gt.len() != est.len() {
        return Err(invalid(format!(
            "ground truth has {} entries, estimate {}",
            gt.len(),
            est.len()
        )));
    }
    Ok(())
}

/// Distance between ground-truth and estimated frame centres, per frame.
/// Frame centres sit at the local origin, so the geometry only documents the
/// frame layout.
pub fn drift_per_frame(
    gt: &RelativeParams,
    est: &RelativeParams,
    _g: &FrameGeometry,
) -> Result<Vec<f64>> {
    check_pair(gt, est)?;
    let a = centers(gt)?;
    let b = centers(est)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).norm()).collect())
}

/// Bidirectional Hausdorff distance between two point sets.
pub fn hausdorff(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let directed = |from: &[Vector3<f64>], to: &[Vector3<f64>]| {
        from.iter()
            .map(|x| {
                to.iter()
                    .map(|y| (x - y).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

pub fn evaluate(
    gt: &RelativeParams,
    est: &RelativeParams,
    g: &FrameGeometry,
) -> Result<MetricsReport> {
    check_pair(gt, est)?;
    let drift = drift_per_frame(gt, est, g)?;
    let gc = centers(gt)?;
    let ec = centers(est)?;
    let mut arc = Vec::with_capacity(gc.len());
    let mut acc = 0.0;
    arc.push(0.0);
    for w in gc.windows(2) {
        acc += (w[1] - w[0]).norm();
        arc.push(acc);
    }
    if arc[1..].iter().any(|&l| l <= 0.0) {
        return Err(Error::UndefinedMetric(
            "ground-truth path has zero arc length".into(),
        ));
    }
    let total = *arc.last().unwrap();
    let final_drift = *drift.last().unwrap();
    let adr = drift[1..]
        .iter()
        .zip(&arc[1..])
        .map(|(d, l)| d / l)
        .sum::<f64>()
        / (drift.len() - 1) as f64;
    Ok(MetricsReport {
        final_drift,
        fdr: 100.0 * final_drift / total,
        adr: 100.0 * adr,
        md: drift.iter().copied().fold(0.0, f64::max),
        sd: drift.iter().sum(),
        hd: hausdorff(&gc, &ec),
    })
}
