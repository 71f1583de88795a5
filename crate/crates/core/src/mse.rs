//! MSE estimation for EBP predictors.
//!
//! The MSE is split into a leading term (conditional variance of the area
//! parameter at the true model parameters) and a parameter-estimation term.
//! The leading term is estimated from the EBP draws themselves; the second
//! term comes from a parametric bootstrap that regenerates only the sampled
//! units, refits the model, and re-runs the EBP with the bootstrap parameters
//! on the original sample. The same bootstrap draws give `M1^(b)`, from
//! which the plug-in bias of the leading-term estimator is corrected in four
//! ways (additive, multiplicative, compromise, exponential).
//!
//! Bootstrap replicate `b` reuses the draw generators of the base EBP
//! (common random numbers), so `theta^(b) - theta` reflects the change in
//! parameters rather than fresh Monte Carlo noise.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleDataset;
use crate::ebp::{self, EbpDraws, GaussianAreaSampler};
use crate::error::{Error, Result};
use crate::informative::ModelParams;
use crate::model::{fit_ml, FittedNer};
use crate::params::{AreaParameter, EvalCache};
use crate::rng::{self, stream};

/// Default number of bootstrap replicates.
pub const DEFAULT_B: usize = 200;

/// Largest tolerated fraction of failed bootstrap refits.
pub const MAX_DROP_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReplicate {
    pub b: usize,
    pub psi_hat_b: ModelParams,
    pub theta_hat_b: f64,
    pub m1_b: f64,
    /// The replicate's own draws, kept for interval calibration.
    pub draws: Vec<f64>,
}

/// Bias-corrected leading-term estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasCorrected {
    pub add: f64,
    pub mult: f64,
    pub comp: f64,
    pub hm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub area_id: i64,
    pub parameter: String,
    pub theta_hat: f64,
    pub m1: f64,
    pub m2: f64,
    pub m1_bar_star: f64,
    /// Additive bias estimate `mean_b M1^(b) - M1`.
    pub bias_add: f64,
    pub mse_nobc: f64,
    pub mse_add: f64,
    pub mse_mult: f64,
    pub mse_comp: f64,
    pub mse_hm: f64,
    pub mse_standard: Option<f64>,
    /// Surviving bootstrap replicates.
    pub b_effective: usize,
    pub negative_add: bool,
    pub infinite_mult: bool,
}

/// The MSE estimators carried by an [`MseReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MseVariant {
    NoBc,
    Add,
    Mult,
    Comp,
    Hm,
    Standard,
}

impl MseVariant {
    pub const ALL: [MseVariant; 6] = [Self::NoBc, Self::Add, Self::Mult, Self::Comp, Self::Hm, Self::Standard];

    pub fn label(self) -> &'static str {
        match self {
            Self::NoBc => "noBC",
            Self::Add => "Add",
            Self::Mult => "Mult",
            Self::Comp => "Comp",
            Self::Hm => "HM",
            Self::Standard => "S",
        }
    }
}

impl std::fmt::Display for MseVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for MseVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Validation(format!("unknown MSE variant {s:?}")))
    }
}

impl MseReport {
    /// Value of one estimator; `None` for the standard bootstrap when it was
    /// not computed.
    pub fn value(&self, v: MseVariant) -> Option<f64> {
        match v {
            MseVariant::NoBc => Some(self.mse_nobc),
            MseVariant::Add => Some(self.mse_add),
            MseVariant::Mult => Some(self.mse_mult),
            MseVariant::Comp => Some(self.mse_comp),
            MseVariant::Hm => Some(self.mse_hm),
            MseVariant::Standard => self.mse_standard,
        }
    }
}

/// Leading-term estimate: the sample variance of the EBP draws.
pub fn m1_hat(draws: &[f64]) -> f64 {
    // Welford; the test oracle is the two-pass formula.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &x) in draws.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    if draws.len() < 2 { 0.0 } else { (m2 / (draws.len() - 1) as f64).max(0.0) }
}

/// Parameter-estimation term: mean squared deviation of the bootstrap
/// predictors from the original predictor.
pub fn m2_hat(replicates: &[BootstrapReplicate], theta_hat: f64) -> f64 {
    if replicates.is_empty() {
        return 0.0;
    }
    replicates.iter().map(|r| (r.theta_hat_b - theta_hat).powi(2)).sum::<f64>() / replicates.len() as f64
}

pub fn bias_corrected_m1(m1: f64, m1_bar_star: f64) -> BiasCorrected {
    if m1 == 0.0 && m1_bar_star == 0.0 {
        return BiasCorrected { add: 0.0, mult: 0.0, comp: 0.0, hm: 0.0 };
    }
    let add = 2.0 * m1 - m1_bar_star;
    let mult = if m1_bar_star == 0.0 { f64::INFINITY } else { m1 * m1 / m1_bar_star };
    let (comp, hm) = if m1 >= m1_bar_star {
        (add, add)
    } else {
        (mult, m1 * (-(m1_bar_star - m1) / m1_bar_star).exp())
    };
    BiasCorrected { add, mult, comp, hm }
}

/// Assembles all MSE variants for one area and functional.
pub fn mse_report(draws: &EbpDraws, replicates: &[BootstrapReplicate], standard: Option<f64>) -> MseReport {
    let theta_hat = draws.theta_hat();
    let m1 = m1_hat(&draws.draws);
    let m2 = m2_hat(replicates, theta_hat);
    let m1_bar_star = if replicates.is_empty() {
        m1
    } else {
        replicates.iter().map(|r| r.m1_b).sum::<f64>() / replicates.len() as f64
    };
    let bc = bias_corrected_m1(m1, m1_bar_star);
    MseReport {
        area_id: draws.area_id,
        parameter: draws.parameter.clone(),
        theta_hat,
        m1,
        m2,
        m1_bar_star,
        bias_add: m1_bar_star - m1,
        mse_nobc: m1 + m2,
        mse_add: bc.add + m2,
        mse_mult: bc.mult + m2,
        mse_comp: bc.comp + m2,
        mse_hm: bc.hm + m2,
        mse_standard: standard,
        b_effective: replicates.len(),
        negative_add: bc.add + m2 < 0.0,
        infinite_mult: bc.mult.is_infinite(),
    }
}

/// Bootstrap sample: new responses for the sampled units only, generated
/// from the fitted model with fresh area effects.
pub fn bootstrap_sample(fit: &FittedNer, data: &SampleDataset, b: usize, seed: u64) -> SampleDataset {
    let p = &fit.params;
    let su = p.sigma2_u.sqrt();
    let se = p.sigma2_e.sqrt();
    let mut effects = BTreeMap::new();
    for area in data.sampled_areas() {
        let mut r = rng::rng_for(seed, &[stream::BOOT_SAMPLE, b as u64, rng::area_key(area.area_id)]);
        let z: f64 = StandardNormal.sample(&mut r);
        effects.insert(area.area_id, (su * z, r));
    }
    data.with_responses(|rec| {
        let (u, r) = effects.get_mut(&rec.area_id).expect("sampled area");
        let e: f64 = StandardNormal.sample(r);
        p.mean(&rec.x) + *u + se / rec.variance_scale.sqrt() * e
    })
}

/// Surviving bootstrap replicates: refitted parameters, each evaluated on the
/// original data (conditional area effects given the original sample).
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapFits {
    pub fits: Vec<(usize, FittedNer)>,
    pub dropped: usize,
}

pub fn bootstrap_refits(fit: &FittedNer, data: &SampleDataset, b_count: usize, seed: u64) -> Result<BootstrapFits> {
    if b_count < 2 {
        return Err(Error::Validation(format!("need at least 2 bootstrap replicates, got {b_count}")));
    }
    let results: Vec<(usize, Result<FittedNer>)> = (0..b_count)
        .into_par_iter()
        .map(|b| (b, fit_ml(&bootstrap_sample(fit, data, b, seed))))
        .collect();
    let mut fits = Vec::with_capacity(b_count);
    let mut dropped = 0;
    for (b, r) in results {
        match r {
            Ok(f) => fits.push((b, FittedNer::from_params(f.params, data))),
            Err(e) => {
                log::warn!("bootstrap replicate {b} dropped: {e}");
                dropped += 1;
            }
        }
    }
    if dropped as f64 > MAX_DROP_FRACTION * b_count as f64 || fits.len() < 2 {
        return Err(Error::BootstrapFailure { dropped, requested: b_count });
    }
    Ok(BootstrapFits { fits, dropped })
}

/// Bootstrap replicates for one area: EBP rerun with each bootstrap
/// parameter vector on the original data. Returns one replicate list per
/// functional.
pub fn bootstrap_area(
    fits: &BootstrapFits,
    data: &SampleDataset,
    area_id: i64,
    params: &[AreaParameter],
    l: usize,
    seed: u64,
) -> Result<Vec<Vec<BootstrapReplicate>>> {
    let mut out: Vec<Vec<BootstrapReplicate>> = params.iter().map(|_| Vec::with_capacity(fits.fits.len())).collect();
    for (b, view) in &fits.fits {
        let sampler = GaussianAreaSampler::new(view, data, area_id)?;
        let sets = ebp::simulate_draws(&sampler, area_id, params, l, seed)?;
        for (k, draws) in sets.into_iter().enumerate() {
            let theta = ebp::mc_mean(&draws);
            out[k].push(BootstrapReplicate {
                b: *b,
                psi_hat_b: ModelParams::noninformative(view.params.clone()),
                theta_hat_b: theta,
                m1_b: m1_hat(&draws),
                draws,
            });
        }
    }
    Ok(out)
}

/// Sample-only parametric bootstrap for every area with a population frame.
pub fn bootstrap_noninf(
    fit: &FittedNer,
    data: &SampleDataset,
    params: &[AreaParameter],
    l: usize,
    b_count: usize,
    seed: u64,
) -> Result<BTreeMap<i64, Vec<Vec<BootstrapReplicate>>>> {
    let fits = bootstrap_refits(fit, data, b_count, seed)?;
    let ids: Vec<i64> = data.areas().filter(|a| a.population.is_some()).map(|a| a.area_id).collect();
    ids.par_iter()
        .map(|&id| Ok((id, bootstrap_area(&fits, data, id, params, l, seed)?)))
        .collect()
}

/// Full-population parametric bootstrap MSE (single bootstrap, no leading-term
/// bias correction). Returns one value per functional for each area with a
/// population frame.
pub fn standard_mr_mse(
    fit: &FittedNer,
    data: &SampleDataset,
    params: &[AreaParameter],
    l: usize,
    b_count: usize,
    seed: u64,
) -> Result<BTreeMap<i64, Vec<f64>>> {
    if b_count < 2 {
        return Err(Error::Validation(format!("need at least 2 bootstrap replicates, got {b_count}")));
    }
    ebp_check_l(l)?;
    for a in data.sampled_areas() {
        a.population()?;
    }
    let ids: Vec<i64> = data.areas().filter(|a| a.population.is_some()).map(|a| a.area_id).collect();
    let p = &fit.params;
    let su = p.sigma2_u.sqrt();
    let se = p.sigma2_e.sqrt();

    // (truths per area, per functional) and the bootstrap dataset
    type Replicate = (BTreeMap<i64, Vec<f64>>, SampleDataset);
    let one_replicate = |b: usize| -> Result<Replicate> {
        let mut pops: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for &id in &ids {
            let area = data.area(id)?;
            let mut r = rng::rng_for(seed, &[stream::STANDARD_POP, b as u64, rng::area_key(id)]);
            let z: f64 = StandardNormal.sample(&mut r);
            let u = su * z;
            let ys = area
                .population()?
                .iter()
                .map(|unit| {
                    let e: f64 = StandardNormal.sample(&mut r);
                    p.mean(&unit.x) + u + se / unit.variance_scale.sqrt() * e
                })
                .collect();
            pops.insert(id, ys);
        }
        let mut truths = BTreeMap::new();
        let mut cache = EvalCache::default();
        for (&id, ys) in &pops {
            cache.clear();
            let t = params.iter().map(|h| cache.eval(h, ys)).collect::<Result<Vec<_>>>()?;
            truths.insert(id, t);
        }
        let boot = data.with_responses(|rec| {
            let area = data.area(rec.area_id).expect("record area");
            let pos = area
                .population
                .as_ref()
                .expect("checked above")
                .iter()
                .position(|u| u.unit_id == rec.unit_id)
                .expect("validated");
            pops[&rec.area_id][pos]
        });
        Ok((truths, boot))
    };

    let results: Vec<Result<Vec<(i64, Vec<f64>)>>> = (0..b_count)
        .into_par_iter()
        .map(|b| {
            let (truths, boot) = one_replicate(b)?;
            let refit = fit_ml(&boot)?;
            let draw_seed = rng::derive(seed, &[stream::STANDARD_DRAW, b as u64]);
            ids.iter()
                .map(|&id| {
                    let sampler = GaussianAreaSampler::new(&refit, &boot, id)?;
                    let sets = ebp::simulate_draws(&sampler, id, params, l, draw_seed)?;
                    let errs = sets
                        .iter()
                        .zip(&truths[&id])
                        .map(|(d, t)| (ebp::mc_mean(d) - t).powi(2))
                        .collect();
                    Ok((id, errs))
                })
                .collect()
        })
        .collect();

    let mut sums: BTreeMap<i64, Vec<f64>> = ids.iter().map(|&id| (id, vec![0.0; params.len()])).collect();
    let mut used = 0usize;
    let mut dropped = 0usize;
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok(rows) => {
                used += 1;
                for (id, errs) in rows {
                    for (s, e) in sums.get_mut(&id).expect("known area").iter_mut().zip(errs) {
                        *s += e;
                    }
                }
            }
            Err(e) if e.is_numerical() => {
                log::warn!("standard bootstrap replicate {b} dropped: {e}");
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if dropped as f64 > MAX_DROP_FRACTION * b_count as f64 || used < 2 {
        return Err(Error::BootstrapFailure { dropped, requested: b_count });
    }
    for v in sums.values_mut() {
        for s in v.iter_mut() {
            *s /= used as f64;
        }
    }
    Ok(sums)
}

fn ebp_check_l(l: usize) -> Result<()> {
    if l < 2 {
        return Err(Error::Validation(format!("need at least 2 Monte Carlo draws, got {l}")));
    }
    Ok(())
}
