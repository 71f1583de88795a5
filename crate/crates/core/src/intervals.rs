//! Prediction intervals.
//!
//! Three kinds are offered: the naive interval formed by quantiles of the EBP
//! draws, a calibrated version of it whose level is re-tuned on the bootstrap
//! replicates, and the usual normal-theory interval around the predictor.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ebp::EbpDraws;
use crate::error::{Error, Result};
use crate::mse::{BootstrapReplicate, MseVariant};
use crate::params::sorted_quantile;

/// Resolution of the calibrated level search.
pub const ALPHA_GRID: f64 = 1e-4;
const GRID_STEPS: u32 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IntervalKind {
    Naive,
    Calibrated,
    Normal(MseVariant),
}

impl IntervalKind {
    pub fn label(&self) -> String {
        match self {
            Self::Naive => "Naive".into(),
            Self::Calibrated => "Cal".into(),
            Self::Normal(v) => format!("Normal:{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub area_id: i64,
    pub parameter: String,
    pub kind: IntervalKind,
    pub lower: f64,
    pub upper: f64,
    /// Nominal coverage `1 - alpha`.
    pub nominal: f64,
    pub alpha_prime: Option<f64>,
    /// Calibration could not reach the nominal level; the widest grid
    /// interval is returned.
    pub unattained: bool,
}

impl IntervalReport {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Validation(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    s
}

fn quantile_pair(sorted: &[f64], alpha: f64) -> (f64, f64) {
    (sorted_quantile(sorted, alpha / 2.0), sorted_quantile(sorted, 1.0 - alpha / 2.0))
}

/// Quantile interval of the EBP draws at level `1 - alpha`.
pub fn naive_ci(draws: &EbpDraws, alpha: f64) -> Result<IntervalReport> {
    check_alpha(alpha)?;
    if draws.draws.is_empty() {
        return Err(Error::Validation("no draws".into()));
    }
    let (lower, upper) = quantile_pair(&sorted(&draws.draws), alpha);
    Ok(IntervalReport {
        area_id: draws.area_id,
        parameter: draws.parameter.clone(),
        kind: IntervalKind::Naive,
        lower,
        upper,
        nominal: 1.0 - alpha,
        alpha_prime: None,
        unattained: false,
    })
}

/// Bootstrap-averaged coverage of the original draws by the replicate
/// quantile intervals at level `1 - alpha_prime`.
///
/// Both inputs must be sorted ascending.
pub fn calibration_coverage(base_sorted: &[f64], replicates_sorted: &[Vec<f64>], alpha_prime: f64) -> f64 {
    if replicates_sorted.is_empty() || base_sorted.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for rep in replicates_sorted {
        let (lo, hi) = quantile_pair(rep, alpha_prime);
        let first = base_sorted.partition_point(|&v| v < lo);
        let past = base_sorted.partition_point(|&v| v <= hi);
        hits += past.saturating_sub(first);
    }
    hits as f64 / (base_sorted.len() * replicates_sorted.len()) as f64
}

/// Calibrated interval: the naive interval at the largest grid level `alpha'`
/// whose bootstrap-averaged coverage is at least `1 - alpha`.
pub fn calibrated_ci(draws: &EbpDraws, replicates: &[BootstrapReplicate], alpha: f64) -> Result<IntervalReport> {
    check_alpha(alpha)?;
    if draws.draws.is_empty() {
        return Err(Error::Validation("no draws".into()));
    }
    let reps: Vec<Vec<f64>> = replicates.iter().filter(|r| !r.draws.is_empty()).map(|r| sorted(&r.draws)).collect();
    if reps.is_empty() {
        return Err(Error::Validation("calibration needs bootstrap replicates that carry their draws".into()));
    }
    let base = sorted(&draws.draws);
    let target = 1.0 - alpha;
    let ok = |k: u32| calibration_coverage(&base, &reps, k as f64 * ALPHA_GRID) >= target;

    // coverage is nonincreasing in alpha'; find the last grid step that still meets the target
    let (alpha_prime, unattained) = if !ok(1) {
        (ALPHA_GRID, true)
    } else {
        let (mut lo, mut hi) = (1u32, GRID_STEPS - 1);
        if ok(hi) {
            lo = hi;
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo as f64 * ALPHA_GRID, false)
    };
    let (lower, upper) = quantile_pair(&base, alpha_prime);
    Ok(IntervalReport {
        area_id: draws.area_id,
        parameter: draws.parameter.clone(),
        kind: IntervalKind::Calibrated,
        lower,
        upper,
        nominal: target,
        alpha_prime: Some(alpha_prime),
        unattained,
    })
}

/// Normal-theory interval `theta_hat -/+ z sqrt(mse)`.
pub fn normal_ci(
    area_id: i64,
    parameter: &str,
    variant: MseVariant,
    theta_hat: f64,
    mse: f64,
    alpha: f64,
) -> Result<IntervalReport> {
    check_alpha(alpha)?;
    if !mse.is_finite() || mse < 0.0 {
        return Err(Error::InvalidMse(mse));
    }
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let half = z * mse.sqrt();
    Ok(IntervalReport {
        area_id,
        parameter: parameter.to_string(),
        kind: IntervalKind::Normal(variant),
        lower: theta_hat - half,
        upper: theta_hat + half,
        nominal: 1.0 - alpha,
        alpha_prime: None,
        unattained: false,
    })
}
