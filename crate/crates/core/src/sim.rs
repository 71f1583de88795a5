//! Monte Carlo studies.
//!
//! Each replicate generates a finite population from the nested error model,
//! draws a sample (simple random sampling in every area, or a two-stage
//! informative systematic PPS design), runs the full prediction, MSE and
//! interval pipeline, and records truths, predictors, MSE estimates and
//! interval hits. Summaries (relative bias, coverage, T statistics) are pure
//! functions of those records.
//!
//! Informative design: 150 areas in three strata of 50; 30 areas per stratum
//! are drawn with sizes `round(1000 exp(-u_i / (8 sigma_u)))` and, within a
//! selected area, `n_i` in `{5, 10, 15}` by stratum units with sizes
//! `exp{[-(y - x'beta)/sigma_e + delta/5] / 3}`. Weights are inverse
//! inclusion probabilities, so larger responses carry larger weights.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AreaData, PopulationUnit, SampleDataset, UnitRecord};
use crate::ebp::{predict_area, EbpDraws};
use crate::error::{Error, Result};
use crate::informative::{fit_informative, informative_bootstrap_area, jackknife_cov, param_bootstrap_draws, InformativeModel, Tilt};
use crate::intervals::{calibrated_ci, naive_ci, normal_ci, IntervalKind};
use crate::model::{fit_ml, simulate_covariates, simulate_population, PopulationDesign, SyntheticArea};
use crate::mse::{bootstrap_area, bootstrap_refits, mse_report, standard_mr_mse, BootstrapReplicate, MseReport, MseVariant};
use crate::params::{sorted_quantile, AreaParameter};
use crate::rng::{self, stream, Rng};

pub const SIGMA_E: f64 = 0.3;
pub const BETA: [f64; 2] = [5.0, 0.1];
/// Within-area sample sizes, cycled over areas (noninformative) or assigned
/// by stratum (informative).
pub const SAMPLE_SIZES: [usize; 3] = [5, 10, 15];
pub const INFORMATIVE_AREAS: usize = 150;
pub const AREAS_PER_STRATUM: usize = 50;
pub const SELECTED_PER_STRATUM: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Design {
    /// Simple random sampling in each of `areas` areas.
    Noninformative { areas: usize, r_sigma: f64 },
    /// Two-stage systematic PPS over 150 areas.
    Informative { r_sigma: f64 },
}

impl Design {
    /// Ratio `sigma_u / sigma_e`.
    pub fn r_sigma(&self) -> f64 {
        match *self {
            Self::Noninformative { r_sigma, .. } | Self::Informative { r_sigma } => r_sigma,
        }
    }

    pub fn sigma_u(&self) -> f64 {
        self.r_sigma() * SIGMA_E
    }

    pub fn n_areas(&self) -> usize {
        match *self {
            Self::Noninformative { areas, .. } => areas,
            Self::Informative { .. } => INFORMATIVE_AREAS,
        }
    }

    pub fn is_informative(&self) -> bool {
        matches!(self, Self::Informative { .. })
    }

    /// Stratum (1-based) of the area with 0-based index `i`.
    pub fn stratum(&self, i: usize) -> usize {
        match self {
            Self::Noninformative { .. } => i % SAMPLE_SIZES.len() + 1,
            Self::Informative { .. } => i / AREAS_PER_STRATUM + 1,
        }
    }
}

fn default_replicates() -> usize {
    500
}
fn default_l() -> usize {
    200
}
fn default_b() -> usize {
    100
}
fn default_population_size() -> usize {
    200
}
fn default_true() -> bool {
    true
}
fn default_parameters() -> Vec<String> {
    AreaParameter::standard_set().iter().map(AreaParameter::label).collect()
}
fn default_levels() -> Vec<f64> {
    vec![0.90, 0.95, 0.99]
}
fn default_truncation() -> f64 {
    2.5
}

/// Study configuration. Missing fields take the defaults of [`SimConfig::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub design: Design,
    /// Monte Carlo replicates `M`.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// EBP draws per area.
    #[serde(default = "default_l")]
    pub l: usize,
    /// Bootstrap replicates.
    #[serde(default = "default_b")]
    pub b: usize,
    #[serde(default)]
    pub seed: u64,
    /// Population size `N_i` of every area.
    #[serde(default = "default_population_size")]
    pub population_size: usize,
    #[serde(default)]
    pub tilt: Tilt,
    /// Also compute the full-population bootstrap MSE (noninformative only).
    #[serde(default = "default_true")]
    pub standard: bool,
    /// Include the `x y` interaction in the unit weight model.
    #[serde(default)]
    pub interaction: bool,
    #[serde(default = "default_parameters")]
    pub parameters: Vec<String>,
    /// Nominal interval levels `1 - alpha`.
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    /// Errors and area effects are truncated at this many standard
    /// deviations; `inf` disables truncation.
    #[serde(default = "default_truncation")]
    pub truncation: f64,
}

/// One interval method at one nominal level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalColumn {
    pub level: f64,
    pub kind: IntervalKind,
}

impl IntervalColumn {
    pub fn label(&self) -> String {
        format!("{}@{}", self.kind.label(), self.level)
    }
}

impl SimConfig {
    pub fn new(design: Design) -> Self {
        Self {
            design,
            replicates: default_replicates(),
            l: default_l(),
            b: default_b(),
            seed: 0,
            population_size: default_population_size(),
            tilt: Tilt::default(),
            standard: true,
            interaction: false,
            parameters: default_parameters(),
            levels: default_levels(),
            truncation: default_truncation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.replicates < 1 {
            return bad("need at least one replicate".into());
        }
        if self.l < 2 || self.b < 2 {
            return bad(format!("L and B must be at least 2 (got L={}, B={})", self.l, self.b));
        }
        let max_n = *SAMPLE_SIZES.iter().max().expect("nonempty");
        if self.population_size < max_n {
            return bad(format!("population size must be at least {max_n}"));
        }
        if !(self.design.r_sigma() >= 0.0 && self.design.r_sigma().is_finite()) {
            return bad(format!("invalid variance ratio {}", self.design.r_sigma()));
        }
        if let Design::Noninformative { areas, .. } = self.design {
            if areas < 3 {
                return bad(format!("need at least 3 areas, got {areas}"));
            }
        }
        if let Tilt::Sir { pool_size } = self.tilt {
            if pool_size < 1 {
                return bad("SIR pool size must be positive".into());
            }
        }
        if self.levels.is_empty() || self.levels.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return bad(format!("levels must lie in (0, 1): {:?}", self.levels));
        }
        if !(self.truncation > 0.0) {
            return bad(format!("truncation must be positive, got {}", self.truncation));
        }
        self.functionals()?;
        Ok(())
    }

    pub fn functionals(&self) -> Result<Vec<AreaParameter>> {
        if self.parameters.is_empty() {
            return Err(Error::Validation("no area parameters requested".into()));
        }
        self.parameters.iter().map(|s| s.parse()).collect()
    }

    /// The full-population bootstrap is only defined for the
    /// noninformative pipeline.
    pub fn uses_standard(&self) -> bool {
        self.standard && !self.design.is_informative()
    }

    /// Interval columns in record order: per level, naive, calibrated and
    /// the normal-theory intervals.
    pub fn interval_columns(&self) -> Vec<IntervalColumn> {
        let mut kinds = vec![
            IntervalKind::Naive,
            IntervalKind::Calibrated,
            IntervalKind::Normal(MseVariant::NoBc),
            IntervalKind::Normal(MseVariant::Comp),
            IntervalKind::Normal(MseVariant::Hm),
        ];
        if self.uses_standard() {
            kinds.push(IntervalKind::Normal(MseVariant::Standard));
        }
        self.levels
            .iter()
            .flat_map(|&level| kinds.iter().map(move |&kind| IntervalColumn { level, kind }))
            .collect()
    }

    fn population_design(&self) -> PopulationDesign {
        PopulationDesign {
            sizes: vec![self.population_size; self.design.n_areas()],
            beta: BETA.to_vec(),
            sigma_u: self.design.sigma_u(),
            sigma_e: SIGMA_E,
            truncation: self.truncation.is_finite().then_some(self.truncation),
        }
    }
}

/// Inclusion probabilities of a PPS design of size `k`. Units whose
/// probability would reach 1 are taken with certainty and the rest are
/// rescaled, repeatedly.
pub fn pps_inclusion(sizes: &[f64], k: usize) -> Result<Vec<f64>> {
    if sizes.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Validation("PPS sizes must be finite and nonnegative".into()));
    }
    let positive = sizes.iter().filter(|&&s| s > 0.0).count();
    if k > positive {
        return Err(Error::Validation(format!("cannot select {k} units from {positive} with positive size")));
    }
    let mut certain = vec![false; sizes.len()];
    let mut k_rem = k;
    while k_rem > 0 {
        let total: f64 = sizes.iter().zip(&certain).filter(|(_, c)| !**c).map(|(s, _)| s).sum();
        let new: Vec<usize> = (0..sizes.len())
            .filter(|&j| !certain[j] && sizes[j] > 0.0 && k_rem as f64 * sizes[j] >= total)
            .collect();
        if new.is_empty() {
            break;
        }
        for j in new {
            certain[j] = true;
            k_rem -= 1;
        }
    }
    let total: f64 = sizes.iter().zip(&certain).filter(|(_, c)| !**c).map(|(s, _)| s).sum();
    Ok(sizes
        .iter()
        .zip(&certain)
        .map(|(&s, &c)| if c { 1.0 } else if k_rem == 0 { 0.0 } else { k_rem as f64 * s / total })
        .collect())
}

/// A systematic PPS sample: selected indices in frame order plus the
/// inclusion probability of every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PpsSample {
    pub selected: Vec<usize>,
    pub inclusion: Vec<f64>,
}

/// Systematic PPS selection of `k` units in frame order: cumulate the
/// inclusion probabilities and take the units whose interval contains
/// `U + j`, `j = 0..k-1`, `U ~ U(0,1)`. Certainty units are taken first.
pub fn systematic_pps(sizes: &[f64], k: usize, rng: &mut Rng) -> Result<PpsSample> {
    let inclusion = pps_inclusion(sizes, k)?;
    let mut selected: Vec<usize> = (0..sizes.len()).filter(|&j| inclusion[j] >= 1.0).collect();
    let k_rem = k - selected.len();
    if k_rem > 0 {
        let rest: Vec<usize> = (0..sizes.len()).filter(|&j| inclusion[j] < 1.0).collect();
        let total: f64 = rest.iter().map(|&j| inclusion[j]).sum();
        let start: f64 = rng.random();
        let mut prefix = 0.0;
        let mut point = start;
        let mut taken = 0;
        for (pos, &j) in rest.iter().enumerate() {
            prefix += inclusion[j];
            let cum = if pos + 1 == rest.len() { k_rem as f64 } else { prefix / total * k_rem as f64 };
            if taken < k_rem && point < cum {
                selected.push(j);
                taken += 1;
                point += 1.0;
            }
        }
        debug_assert_eq!(taken, k_rem);
    }
    selected.sort_unstable();
    Ok(PpsSample { selected, inclusion })
}

/// Area-stage sizes `round(1000 exp(-u / (8 sigma_u)))`, rounding half to
/// even; every size is 1000 when `sigma_u = 0`.
pub fn area_sizes(u: &[f64], sigma_u: f64) -> Vec<f64> {
    u.iter()
        .map(|&ui| if sigma_u == 0.0 { 1000.0 } else { (1000.0 * (-ui / 8.0 / sigma_u).exp()).round_ties_even() })
        .collect()
}

/// Unit-stage sizes `exp{[-r / sigma_e + delta / 5] / 3}` for residuals
/// `r = y - x'beta` and noise `delta`.
pub fn unit_sizes(residuals: &[f64], sigma_e: f64, delta: &[f64]) -> Vec<f64> {
    assert_eq!(residuals.len(), delta.len());
    residuals.iter().zip(delta).map(|(r, d)| ((-r / sigma_e + d / 5.0) / 3.0).exp()).collect()
}

/// One simulated population and the sample drawn from it.
#[derive(Debug, Clone)]
pub struct SimReplicate {
    pub population: Vec<SyntheticArea>,
    pub data: SampleDataset,
}

fn sample_key(m: usize, stage: u64, index: usize) -> [u64; 4] {
    [stream::SIM_SAMPLE, m as u64, stage, index as u64]
}

/// Generates replicate `m`: population from its own seed, then the sample.
/// `x` holds the fixed covariates of every area.
pub fn generate_replicate(config: &SimConfig, x: &[Vec<Vec<f64>>], m: usize) -> Result<SimReplicate> {
    let design = config.population_design();
    let population = simulate_population(&design, x, rng::derive(config.seed, &[stream::SIM_REPLICATE, m as u64]));
    let n_areas = population.len();

    // (area index -> (selected units, unit weights, area weight))
    let mut chosen: BTreeMap<usize, (Vec<usize>, Option<Vec<f64>>, Option<f64>)> = BTreeMap::new();
    match config.design {
        Design::Noninformative { .. } => {
            for (i, area) in population.iter().enumerate() {
                let n = SAMPLE_SIZES[i % SAMPLE_SIZES.len()];
                let mut r = rng::rng_for(config.seed, &sample_key(m, 1, i));
                let mut idx = rand::seq::index::sample(&mut r, area.y.len(), n).into_vec();
                idx.sort_unstable();
                chosen.insert(i, (idx, None, None));
            }
        }
        Design::Informative { .. } => {
            let u: Vec<f64> = population.iter().map(|a| a.u).collect();
            let z = area_sizes(&u, design.sigma_u);
            for (h, lo) in (0..n_areas).step_by(AREAS_PER_STRATUM).enumerate() {
                let hi = (lo + AREAS_PER_STRATUM).min(n_areas);
                let mut r = rng::rng_for(config.seed, &sample_key(m, 0, h));
                let pick = systematic_pps(&z[lo..hi], SELECTED_PER_STRATUM.min(hi - lo), &mut r)?;
                for &k in &pick.selected {
                    chosen.insert(lo + k, (Vec::new(), None, Some(1.0 / pick.inclusion[k])));
                }
            }
            for (&i, entry) in chosen.iter_mut() {
                let area = &population[i];
                let n = SAMPLE_SIZES[(i / AREAS_PER_STRATUM).min(SAMPLE_SIZES.len() - 1)];
                let mut r = rng::rng_for(config.seed, &sample_key(m, 1, i));
                let delta: Vec<f64> = (0..area.y.len()).map(|_| StandardNormal.sample(&mut r)).collect();
                let resid: Vec<f64> = area
                    .y
                    .iter()
                    .zip(&area.x)
                    .map(|(y, xv)| y - xv.iter().zip(&design.beta).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
                let pick = systematic_pps(&unit_sizes(&resid, SIGMA_E, &delta), n, &mut r)?;
                entry.1 = Some(pick.selected.iter().map(|&j| 1.0 / pick.inclusion[j]).collect());
                entry.0 = pick.selected;
            }
        }
    }

    let areas = population.iter().enumerate().map(|(i, area)| {
        let mut ad = AreaData::new(area.area_id);
        let mut sampled = vec![false; area.y.len()];
        if let Some((idx, weights, area_weight)) = chosen.get(&i) {
            for (k, &j) in idx.iter().enumerate() {
                sampled[j] = true;
                ad.sample.push(UnitRecord {
                    area_id: area.area_id,
                    unit_id: j as i64,
                    y: area.y[j],
                    x: area.x[j].clone(),
                    unit_weight: weights.as_ref().map(|w| w[k]),
                    variance_scale: 1.0,
                });
            }
            ad.area_weight = *area_weight;
        }
        ad.population = Some(
            area.x
                .iter()
                .enumerate()
                .map(|(j, xv)| PopulationUnit { unit_id: j as i64, x: xv.clone(), variance_scale: 1.0, sampled: sampled[j] })
                .collect(),
        );
        ad
    });
    Ok(SimReplicate { data: SampleDataset::new(areas)?, population })
}

/// Outcome of one area, functional and replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub replicate: usize,
    pub stratum: usize,
    /// Sampling indicator `A_im`.
    pub sampled: bool,
    pub truth: f64,
    pub report: MseReport,
    /// Interval hits aligned with [`SimConfig::interval_columns`]; `None`
    /// when the interval is undefined (e.g. infinite MSE).
    pub hits: Vec<Option<bool>>,
}

impl SimRecord {
    pub fn area_id(&self) -> i64 {
        self.report.area_id
    }

    pub fn parameter(&self) -> &str {
        &self.report.parameter
    }

    /// `(theta_hat - theta) / sqrt(MSE_HM)`; `None` for a zero MSE.
    pub fn t_statistic(&self) -> Option<f64> {
        let s = self.report.mse_hm.sqrt();
        (s > 0.0 && s.is_finite()).then(|| (self.report.theta_hat - self.truth) / s)
    }
}

#[allow(clippy::too_many_arguments)]
fn area_records(
    m: usize,
    stratum: usize,
    sampled: bool,
    truths: &[f64],
    base: Vec<EbpDraws>,
    reps: Vec<Vec<BootstrapReplicate>>,
    standard: Option<&[f64]>,
    columns: &[IntervalColumn],
) -> Result<Vec<SimRecord>> {
    base.into_iter()
        .zip(reps)
        .enumerate()
        .map(|(k, (draws, reps))| {
            let truth = truths[k];
            let report = mse_report(&draws, &reps, standard.map(|s| s[k]));
            let hits = columns
                .iter()
                .map(|c| {
                    let alpha = 1.0 - c.level;
                    Ok(match c.kind {
                        IntervalKind::Naive => Some(naive_ci(&draws, alpha)?.contains(truth)),
                        IntervalKind::Calibrated => Some(calibrated_ci(&draws, &reps, alpha)?.contains(truth)),
                        IntervalKind::Normal(v) => match report.value(v) {
                            Some(mse) if mse.is_finite() && mse >= 0.0 => Some(
                                normal_ci(report.area_id, &report.parameter, v, report.theta_hat, mse, alpha)?
                                    .contains(truth),
                            ),
                            _ => None,
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SimRecord { replicate: m, stratum, sampled, truth, report, hits })
        })
        .collect()
}

/// Runs the full pipeline on replicate `m` and returns its records, area by
/// area and functional by functional.
pub fn run_replicate(config: &SimConfig, x: &[Vec<Vec<f64>>], m: usize) -> Result<Vec<SimRecord>> {
    let fns = config.functionals()?;
    let columns = config.interval_columns();
    let rep = generate_replicate(config, x, m)?;
    let data = &rep.data;
    let truths = rep
        .population
        .iter()
        .map(|a| fns.iter().map(|f| f.eval(&a.y)).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;
    let seed = rng::derive(config.seed, &[stream::SIM_PIPELINE, m as u64]);
    let (l, b) = (config.l, config.b);
    let stratum = |i: usize| config.design.stratum(i);

    let per_area: Vec<Vec<SimRecord>> = if config.design.is_informative() {
        let fitted = fit_informative(data, config.interaction)?;
        let cov = jackknife_cov(data, &fitted.params)?;
        let base = InformativeModel::new(fitted.params.clone(), data)?;
        let models = param_bootstrap_draws(&fitted.params, &cov, b, seed)
            .into_iter()
            .map(|p| InformativeModel::new(p, data))
            .collect::<Result<Vec<_>>>()?;
        rep.population
            .par_iter()
            .enumerate()
            .map(|(i, a)| {
                let id = a.area_id;
                let draws = base.draws(id, &fns, l, seed, config.tilt)?;
                let reps = informative_bootstrap_area(&models, id, &fns, l, seed, config.tilt)?;
                let sampled = data.area(id)?.is_sampled();
                area_records(m, stratum(i), sampled, &truths[i], draws, reps, None, &columns)
            })
            .collect::<Result<_>>()?
    } else {
        let fit = fit_ml(data)?;
        let fits = bootstrap_refits(&fit, data, b, seed)?;
        let standard = if config.uses_standard() { Some(standard_mr_mse(&fit, data, &fns, l, b, seed)?) } else { None };
        rep.population
            .par_iter()
            .enumerate()
            .map(|(i, a)| {
                let id = a.area_id;
                let draws = predict_area(&fit, data, id, &fns, l, seed)?;
                let reps = bootstrap_area(&fits, data, id, &fns, l, seed)?;
                let s = standard.as_ref().map(|s| s[&id].as_slice());
                area_records(m, stratum(i), true, &truths[i], draws, reps, s, &columns)
            })
            .collect::<Result<_>>()?
    };
    Ok(per_area.into_iter().flatten().collect())
}

/// All records of a study plus the replicates that failed.
#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub config: SimConfig,
    pub records: Vec<SimRecord>,
    /// Failed replicates with their error message.
    pub dropped: Vec<(usize, String)>,
}

/// Runs `M` replicates in parallel. A failing replicate is logged and
/// dropped; the study fails only if every replicate does. Results do not
/// depend on the number of threads.
pub fn run_study(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    let x = simulate_covariates(&vec![config.population_size; config.design.n_areas()], config.seed);
    let outcomes: Vec<(usize, Result<Vec<SimRecord>>)> = (0..config.replicates)
        .into_par_iter()
        .map(|m| {
            let r = run_replicate(config, &x, m);
            log::debug!("replicate {m} done");
            (m, r)
        })
        .collect();
    let mut records = Vec::new();
    let mut dropped = Vec::new();
    for (m, r) in outcomes {
        match r {
            Ok(mut recs) => records.append(&mut recs),
            Err(e) => {
                log::warn!("replicate {m} dropped: {e}");
                dropped.push((m, e.to_string()));
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Estimation(format!(
            "every replicate failed; first error: {}",
            dropped.first().map(|d| d.1.as_str()).unwrap_or("none")
        )));
    }
    Ok(SimResult { config: config.clone(), records, dropped })
}

/// Which area-replicate cells enter a summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    /// Every cell, pooled over areas and replicates.
    Pooled,
    /// Per area over replicates with `A_im = 1`, then averaged over areas.
    Sampled,
    /// Per area over replicates with `A_im = 0`, then averaged over areas.
    Nonsampled,
}

impl Scenario {
    pub fn label(self) -> &'static str {
        match self {
            Self::Pooled => "all",
            Self::Sampled => "sampled",
            Self::Nonsampled => "nonsampled",
        }
    }

    fn weight(self, a: bool) -> bool {
        match self {
            Self::Pooled => true,
            Self::Sampled => a,
            Self::Nonsampled => !a,
        }
    }
}

/// Relative bias (percent) of an MSE estimator. Matrices are indexed
/// `[area][replicate]`; `a` is the sampling ledger.
///
/// Pooled: `100 (sum est - sum (pred - truth)^2) / sum (pred - truth)^2`
/// over all cells. Sampled / nonsampled: per-area averages over the selected
/// replicates, then means over the areas that have any; the reference is the
/// mean of the per-area empirical MSEs. An infinite estimate gives `+inf`.
pub fn aggregate_rb(
    truths: &[Vec<f64>],
    predictors: &[Vec<f64>],
    estimates: &[Vec<f64>],
    a: &[Vec<bool>],
    scenario: Scenario,
) -> Result<f64> {
    let dims_ok = [predictors.len(), estimates.len(), a.len()].iter().all(|&n| n == truths.len())
        && (0..truths.len()).all(|i| {
            let m = truths[i].len();
            predictors[i].len() == m && estimates[i].len() == m && a[i].len() == m
        });
    if !dims_ok {
        return Err(Error::Validation("inconsistent dimensions in relative bias inputs".into()));
    }
    let (mut est_sum, mut ref_sum, mut count) = (0.0, 0.0, 0usize);
    for i in 0..truths.len() {
        let cells: Vec<usize> = (0..truths[i].len()).filter(|&m| scenario.weight(a[i][m])).collect();
        if cells.is_empty() {
            continue;
        }
        let est: f64 = cells.iter().map(|&m| estimates[i][m]).sum();
        let sq: f64 = cells.iter().map(|&m| (predictors[i][m] - truths[i][m]).powi(2)).sum();
        match scenario {
            Scenario::Pooled => {
                est_sum += est;
                ref_sum += sq;
                count += cells.len();
            }
            _ => {
                est_sum += est / cells.len() as f64;
                ref_sum += sq / cells.len() as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Validation(format!("no cells in the {} scenario", scenario.label())));
    }
    let (est, reference) = (est_sum / count as f64, ref_sum / count as f64);
    if reference == 0.0 {
        return Err(Error::ZeroReferenceMse);
    }
    Ok(100.0 * (est - reference) / reference)
}

/// Empirical coverage. Returns the aggregate and, for the per-area
/// scenarios, each area's coverage (`None` for areas without cells).
/// Pooled: hit rate over all defined cells; otherwise the mean of the
/// per-area hit rates.
pub fn aggregate_ecp(hits: &[Vec<Option<bool>>], a: &[Vec<bool>], scenario: Scenario) -> (Option<f64>, Vec<Option<f64>>) {
    let per_area: Vec<(usize, usize)> = hits
        .iter()
        .zip(a)
        .map(|(h, ai)| {
            h.iter().zip(ai).filter(|(_, &s)| scenario.weight(s)).filter_map(|(h, _)| *h).fold((0, 0), |(k, n), hit| {
                (k + hit as usize, n + 1)
            })
        })
        .collect();
    let rates: Vec<Option<f64>> = per_area.iter().map(|&(k, n)| (n > 0).then(|| k as f64 / n as f64)).collect();
    let agg = match scenario {
        Scenario::Pooled => {
            let (k, n) = per_area.iter().fold((0, 0), |acc, &(k, n)| (acc.0 + k, acc.1 + n));
            (n > 0).then(|| k as f64 / n as f64)
        }
        _ => {
            let defined: Vec<f64> = rates.iter().flatten().copied().collect();
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
        }
    };
    (agg, rates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbRow {
    pub parameter: String,
    pub scenario: Scenario,
    pub method: MseVariant,
    pub rb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcpRow {
    pub parameter: String,
    pub scenario: Scenario,
    pub interval: String,
    pub level: f64,
    pub ecp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaEcp {
    pub parameter: String,
    pub scenario: Scenario,
    pub column: IntervalColumn,
    /// `(area id, coverage)` for areas with at least one cell.
    pub values: Vec<(i64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TRow {
    pub replicate: usize,
    pub area_id: i64,
    pub parameter: String,
    pub sampled: bool,
    pub t: f64,
}

/// Records of one functional arranged as `[area][replicate]`.
struct Grid<'a> {
    areas: Vec<i64>,
    cells: Vec<Vec<&'a SimRecord>>,
}

impl<'a> Grid<'a> {
    fn matrix<T>(&self, f: impl Fn(&SimRecord) -> T) -> Vec<Vec<T>> {
        self.cells.iter().map(|row| row.iter().map(|r| f(r)).collect()).collect()
    }
}

impl SimResult {
    /// Functional labels in record order.
    pub fn parameters(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.iter().any(|p| p == r.parameter()) {
                out.push(r.parameter().to_string());
            }
        }
        out
    }

    /// Replicates that produced records, ascending.
    pub fn replicates(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.records.iter().map(|r| r.replicate).collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        if self.config.design.is_informative() {
            vec![Scenario::Sampled, Scenario::Nonsampled]
        } else {
            vec![Scenario::Pooled]
        }
    }

    fn grid(&self, parameter: &str) -> Result<Grid<'_>> {
        let reps = self.replicates();
        let rep_pos: BTreeMap<usize, usize> = reps.iter().enumerate().map(|(k, &m)| (m, k)).collect();
        let mut by_area: BTreeMap<i64, Vec<Option<&SimRecord>>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.parameter() == parameter) {
            let row = by_area.entry(r.area_id()).or_insert_with(|| vec![None; reps.len()]);
            row[rep_pos[&r.replicate]] = Some(r);
        }
        let mut areas = Vec::with_capacity(by_area.len());
        let mut cells = Vec::with_capacity(by_area.len());
        for (id, row) in by_area {
            let row: Option<Vec<&SimRecord>> = row.into_iter().collect();
            let row = row.ok_or_else(|| {
                Error::Validation(format!("records for {parameter} in area {id} do not cover every replicate"))
            })?;
            areas.push(id);
            cells.push(row);
        }
        Ok(Grid { areas, cells })
    }

    /// Sampling ledger `A_im` per area over [`SimResult::replicates`].
    pub fn a_ledger(&self) -> Result<BTreeMap<i64, Vec<bool>>> {
        let Some(p) = self.parameters().into_iter().next() else {
            return Ok(BTreeMap::new());
        };
        let g = self.grid(&p)?;
        Ok(g.areas.iter().copied().zip(g.matrix(|r| r.sampled)).collect())
    }

    /// Relative bias of every MSE estimator, per functional and scenario.
    /// The standard bootstrap appears only when it was computed.
    pub fn rb_table(&self) -> Result<Vec<RbRow>> {
        let mut out = Vec::new();
        for p in self.parameters() {
            let g = self.grid(&p)?;
            let truth = g.matrix(|r| r.truth);
            let pred = g.matrix(|r| r.report.theta_hat);
            let a = g.matrix(|r| r.sampled);
            for scenario in self.scenarios() {
                for v in MseVariant::ALL {
                    let est: Option<Vec<Vec<f64>>> =
                        g.cells.iter().map(|row| row.iter().map(|r| r.report.value(v)).collect()).collect();
                    let Some(est) = est else { continue };
                    let rb = aggregate_rb(&truth, &pred, &est, &a, scenario)?;
                    out.push(RbRow { parameter: p.clone(), scenario, method: v, rb });
                }
            }
        }
        Ok(out)
    }

    /// Per-area coverage of every interval column.
    pub fn per_area_ecp(&self) -> Result<Vec<AreaEcp>> {
        let columns = self.config.interval_columns();
        let mut out = Vec::new();
        for p in self.parameters() {
            let g = self.grid(&p)?;
            let a = g.matrix(|r| r.sampled);
            for scenario in self.scenarios() {
                for (c, column) in columns.iter().enumerate() {
                    let hits = g.matrix(|r| r.hits.get(c).copied().flatten());
                    let (_, rates) = aggregate_ecp(&hits, &a, scenario);
                    let values = g.areas.iter().zip(rates).filter_map(|(&id, r)| r.map(|r| (id, r))).collect();
                    out.push(AreaEcp { parameter: p.clone(), scenario, column: *column, values });
                }
            }
        }
        Ok(out)
    }

    /// Aggregate coverage of every interval column.
    pub fn ecp_table(&self) -> Result<Vec<EcpRow>> {
        let columns = self.config.interval_columns();
        let mut out = Vec::new();
        for p in self.parameters() {
            let g = self.grid(&p)?;
            let a = g.matrix(|r| r.sampled);
            for scenario in self.scenarios() {
                for (c, column) in columns.iter().enumerate() {
                    let hits = g.matrix(|r| r.hits.get(c).copied().flatten());
                    let (ecp, _) = aggregate_ecp(&hits, &a, scenario);
                    out.push(EcpRow {
                        parameter: p.clone(),
                        scenario,
                        interval: column.kind.label(),
                        level: column.level,
                        ecp,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Looks up one aggregate coverage.
    pub fn ecp(&self, parameter: &str, scenario: Scenario, kind: IntervalKind, level: f64) -> Result<Option<f64>> {
        Ok(self
            .ecp_table()?
            .into_iter()
            .find(|r| r.parameter == parameter && r.scenario == scenario && r.interval == kind.label() && r.level == level)
            .and_then(|r| r.ecp))
    }

    /// Looks up one relative bias.
    pub fn rb(&self, parameter: &str, scenario: Scenario, method: MseVariant) -> Result<Option<f64>> {
        Ok(self
            .rb_table()?
            .into_iter()
            .find(|r| r.parameter == parameter && r.scenario == scenario && r.method == method)
            .map(|r| r.rb))
    }

    /// T statistics `(theta_hat - theta) / sqrt(MSE_HM)` of every cell with a
    /// positive MSE.
    pub fn t_statistics(&self) -> Vec<TRow> {
        self.records
            .iter()
            .filter_map(|r| {
                r.t_statistic().map(|t| TRow {
                    replicate: r.replicate,
                    area_id: r.area_id(),
                    parameter: r.parameter().to_string(),
                    sampled: r.sampled,
                    t,
                })
            })
            .collect()
    }

    /// One SVG boxplot of per-area coverage per functional, scenario and
    /// level, with one box per interval method. Returns `(file stem, svg)`.
    pub fn ecp_boxplots(&self) -> Result<Vec<(String, String)>> {
        let per_area = self.per_area_ecp()?;
        let mut groups: BTreeMap<(String, Scenario, String), Vec<(String, Vec<f64>)>> = BTreeMap::new();
        for e in per_area {
            let key = (e.parameter.clone(), e.scenario, e.column.level.to_string());
            let values = e.values.iter().map(|v| v.1).collect();
            groups.entry(key).or_default().push((e.column.kind.label(), values));
        }
        Ok(groups
            .into_iter()
            .map(|((p, s, level), g)| {
                let stem: String = format!("ecp_{p}_{}_{level}", s.label())
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '.' { c } else { '-' })
                    .collect();
                let nominal: f64 = level.parse().expect("level formatted from f64");
                let title = format!("{p}, {} areas, nominal {level}", s.label());
                (stem, ecp_boxplot_svg(&title, &g, nominal))
            })
            .collect())
    }
}

/// Static SVG boxplot: quartile boxes, whiskers at the most extreme values
/// within 1.5 IQR, remaining points drawn individually, and a dashed line at
/// the nominal level.
pub fn ecp_boxplot_svg(title: &str, groups: &[(String, Vec<f64>)], nominal: f64) -> String {
    let (left, top, plot_h, slot) = (56.0, 36.0, 260.0, 80.0);
    let plot_w = slot * groups.len().max(1) as f64;
    let (width, height) = (left + plot_w + 20.0, top + plot_h + 56.0);
    let lowest = groups.iter().flat_map(|g| g.1.iter().copied()).fold(nominal, f64::min);
    let y_lo = (((lowest - 0.02) * 20.0).floor() / 20.0).clamp(0.0, 0.95);
    let y_hi = 1.0;
    let ypos = |v: f64| top + plot_h * (y_hi - v) / (y_hi - y_lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, width / 2.0, escape(title));
    let step = if y_hi - y_lo > 0.5 { 0.1 } else { 0.05 };
    let mut tick = y_hi;
    while tick >= y_lo - 1e-9 {
        let y = ypos(tick);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{}" y="{:.2}" text-anchor="end">{tick:.2}</text>"##,
            left + plot_w,
            left - 6.0,
            y + 4.0
        );
        tick -= step;
    }
    let _ = writeln!(
        s,
        r##"<line x1="{left}" x2="{left}" y1="{top}" y2="{}" stroke="black"/>"##,
        top + plot_h
    );
    let yn = ypos(nominal);
    let _ = writeln!(
        s,
        r##"<line x1="{left}" x2="{}" y1="{yn:.2}" y2="{yn:.2}" stroke="#c0392b" stroke-dasharray="6,4"/>"##,
        left + plot_w
    );
    for (k, (label, values)) in groups.iter().enumerate() {
        let cx = left + slot * (k as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            top + plot_h + 18.0,
            escape(label)
        );
        if values.is_empty() {
            continue;
        }
        let mut v = values.clone();
        v.sort_unstable_by(f64::total_cmp);
        let (q1, med, q3) = (sorted_quantile(&v, 0.25), sorted_quantile(&v, 0.5), sorted_quantile(&v, 0.75));
        let iqr = q3 - q1;
        let lo = v.iter().copied().find(|&x| x >= q1 - 1.5 * iqr).unwrap_or(q1);
        let hi = v.iter().rev().copied().find(|&x| x <= q3 + 1.5 * iqr).unwrap_or(q3);
        let half = slot * 0.3;
        let _ = writeln!(
            s,
            r##"<line x1="{cx:.2}" x2="{cx:.2}" y1="{:.2}" y2="{:.2}" stroke="black"/>"##,
            ypos(hi),
            ypos(lo)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#aed6f1" stroke="black"/>"##,
            cx - half,
            ypos(q3),
            2.0 * half,
            (ypos(q1) - ypos(q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"##,
            cx - half,
            cx + half,
            ypos(med),
            ypos(med)
        );
        for &x in v.iter().filter(|&&x| x < lo || x > hi) {
            let _ = writeln!(s, r##"<circle cx="{cx:.2}" cy="{:.2}" r="2" fill="none" stroke="black"/>"##, ypos(x));
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::informative::fit_informative;
    use proptest::prelude::*;

    fn inclusion_mc(sizes: &[f64], k: usize, runs: usize) -> Vec<f64> {
        let mut r = rng::rng_for(5, &[]);
        let mut counts = vec![0usize; sizes.len()];
        for _ in 0..runs {
            let s = systematic_pps(sizes, k, &mut r).unwrap();
            assert_eq!(s.selected.len(), k);
            for j in s.selected {
                counts[j] += 1;
            }
        }
        counts.iter().map(|&c| c as f64 / runs as f64).collect()
    }

    #[test]
    fn equal_sizes_give_equal_inclusion() {
        let freq = inclusion_mc(&[2.0; 10], 3, 100_000);
        for f in freq {
            assert!((f - 0.3).abs() < 0.01, "{f}");
        }
    }

    #[test]
    fn inclusion_follows_sizes() {
        let sizes = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 2.5, 1.5];
        let total: f64 = sizes.iter().sum();
        let freq = inclusion_mc(&sizes, 3, 100_000);
        for (s, f) in sizes.iter().zip(freq) {
            let pi = 3.0 * s / total;
            assert!((f - pi).abs() / pi < 0.02, "size {s}: {f} vs {pi}");
        }
    }

    #[test]
    fn certainty_unit_always_selected() {
        let sizes = [10.0, 1.0, 1.0, 1.0, 1.0];
        let pi = pps_inclusion(&sizes, 2).unwrap();
        assert_eq!(pi[0], 1.0);
        assert!((pi[1] - 0.25).abs() < 1e-15);
        let mut r = rng::rng_for(1, &[]);
        for _ in 0..1000 {
            assert!(systematic_pps(&sizes, 2, &mut r).unwrap().selected.contains(&0));
        }
        let freq = inclusion_mc(&sizes, 2, 40_000);
        assert!((freq[3] - 0.25).abs() < 0.01);
    }

    #[test]
    fn invalid_sizes_rejected() {
        let mut r = rng::rng_for(1, &[]);
        assert!(systematic_pps(&[1.0, -1.0], 1, &mut r).is_err());
        assert!(systematic_pps(&[1.0, f64::NAN], 1, &mut r).is_err());
        assert!(systematic_pps(&[1.0, 0.0, 0.0], 2, &mut r).is_err());
    }

    proptest! {
        #[test]
        fn pps_selects_exactly_k_distinct(sizes in prop::collection::vec(0.01f64..100.0, 1..40), frac in 0.0f64..1.0, seed in any::<u64>()) {
            let k = ((sizes.len() as f64 * frac) as usize).min(sizes.len());
            let mut r = rng::rng_for(seed, &[]);
            let s = systematic_pps(&sizes, k, &mut r).unwrap();
            prop_assert_eq!(s.selected.len(), k);
            prop_assert!(s.selected.windows(2).all(|w| w[0] < w[1]));
            let total: f64 = s.inclusion.iter().sum();
            prop_assert!((total - k as f64).abs() < 1e-9);
            prop_assert!(s.inclusion.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn area_size_formula() {
        let su = 0.6;
        assert_eq!(area_sizes(&[0.0, 8.0 * su], su), vec![1000.0, 368.0]);
        assert_eq!(area_sizes(&[1.3], 0.0), vec![1000.0]);
        // ties go to even: 1000 exp(-v) = 500.5 exactly is not representable, so
        // check the rounding mode directly
        assert_eq!(500.5f64.round_ties_even(), 500.0);
    }

    #[test]
    fn unit_sizes_decrease_with_residual() {
        let mut r = rng::rng_for(3, &[]);
        let n = 10_000;
        let resid: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                SIGMA_E * z
            })
            .collect();
        let delta: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let z = unit_sizes(&resid, SIGMA_E, &delta);
        let (mr, mz) = (resid.iter().sum::<f64>() / n as f64, z.iter().sum::<f64>() / n as f64);
        let cov: f64 = resid.iter().zip(&z).map(|(a, b)| (a - mr) * (b - mz)).sum();
        assert!(cov < 0.0);
        assert_eq!(unit_sizes(&[0.0], SIGMA_E, &[0.0]), vec![1.0]);
    }

    fn tiny(design: Design) -> SimConfig {
        let mut c = SimConfig::new(design);
        c.replicates = 2;
        c.l = 12;
        c.b = 10;
        c.population_size = 20;
        c.tilt = Tilt::Exact;
        c.seed = 17;
        c
    }

    #[test]
    fn informative_sample_structure() {
        let c = tiny(Design::Informative { r_sigma: 1.0 });
        let x = simulate_covariates(&vec![c.population_size; 150], c.seed);
        for m in 0..3 {
            let rep = generate_replicate(&c, &x, m).unwrap();
            for h in 0..3 {
                let sampled: Vec<&AreaData> = rep
                    .data
                    .areas()
                    .filter(|a| (a.area_id as usize - 1) / 50 == h && a.is_sampled())
                    .collect();
                assert_eq!(sampled.len(), 30);
                for a in sampled {
                    assert_eq!(a.n(), SAMPLE_SIZES[h]);
                    assert!(a.area_weight.unwrap() >= 1.0);
                    assert!(a.sample.iter().all(|u| u.unit_weight.unwrap() >= 1.0));
                    let flagged = a.population.as_ref().unwrap().iter().filter(|u| u.sampled).count();
                    assert_eq!(flagged, a.n());
                }
            }
        }
    }

    #[test]
    fn noninformative_sizes_cycle() {
        let c = tiny(Design::Noninformative { areas: 7, r_sigma: 1.0 });
        let x = simulate_covariates(&vec![c.population_size; 7], c.seed);
        let rep = generate_replicate(&c, &x, 0).unwrap();
        let n: Vec<usize> = rep.data.areas().map(AreaData::n).collect();
        assert_eq!(n, vec![5, 10, 15, 5, 10, 15, 5]);
    }

    #[test]
    fn weights_increase_with_response_and_effect() {
        let mut c = tiny(Design::Informative { r_sigma: 1.0 });
        c.population_size = 200;
        let x = simulate_covariates(&vec![c.population_size; 150], c.seed);
        for m in 0..3 {
            let rep = generate_replicate(&c, &x, m).unwrap();
            let fit = fit_informative(&rep.data, false).unwrap();
            let g2 = fit.params.weight.as_ref().unwrap().gamma2;
            let lambda1 = fit.params.area_weight.as_ref().unwrap().lambda1;
            assert!(g2 > 0.0, "gamma2 {g2}");
            assert!(lambda1 > 0.0, "lambda1 {lambda1}");
        }
    }

    #[test]
    fn rb_simple_cases() {
        let truth = vec![vec![1.0, 2.0], vec![0.0, 1.0]];
        let pred = vec![vec![1.5, 1.0], vec![0.5, 1.0]];
        let sq: Vec<Vec<f64>> = truth
            .iter()
            .zip(&pred)
            .map(|(t, p)| t.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).collect())
            .collect();
        let all = vec![vec![true; 2]; 2];
        let rb = aggregate_rb(&truth, &pred, &sq, &all, Scenario::Pooled).unwrap();
        assert_eq!(rb, 0.0);
        let scaled: Vec<Vec<f64>> = sq.iter().map(|r| r.iter().map(|v| 1.1 * v).collect()).collect();
        let rb = aggregate_rb(&truth, &pred, &scaled, &all, Scenario::Sampled).unwrap();
        assert!((rb - 10.0).abs() < 1e-12);
        let mut inf = sq.clone();
        inf[1][0] = f64::INFINITY;
        assert_eq!(aggregate_rb(&truth, &pred, &inf, &all, Scenario::Pooled).unwrap(), f64::INFINITY);
        assert!(matches!(aggregate_rb(&truth, &truth, &sq, &all, Scenario::Pooled), Err(Error::ZeroReferenceMse)));
    }

    #[test]
    fn rb_weighting_by_ledger() {
        // area 0: sampled in replicate 0 only; area 1: sampled in replicate 1 only
        let truth = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let pred = vec![vec![1.0, 2.0], vec![3.0, 1.0]];
        let est = vec![vec![2.0, 8.0], vec![100.0, 1.0]];
        let a = vec![vec![true, false], vec![false, true]];
        // sampled cells: (0,0) sq 1 est 2; (1,1) sq 1 est 1 -> ref 1, est 1.5
        assert!((aggregate_rb(&truth, &pred, &est, &a, Scenario::Sampled).unwrap() - 50.0).abs() < 1e-12);
        // nonsampled cells: (0,1) sq 4 est 8; (1,0) sq 9 est 100 -> ref 6.5, est 54
        let want = 100.0 * (54.0 - 6.5) / 6.5;
        assert!((aggregate_rb(&truth, &pred, &est, &a, Scenario::Nonsampled).unwrap() - want).abs() < 1e-9);
        // an infinite estimate in an excluded cell does not leak
        let mut e2 = est.clone();
        e2[0][1] = f64::INFINITY;
        assert!(aggregate_rb(&truth, &pred, &e2, &a, Scenario::Sampled).unwrap().is_finite());
    }

    #[test]
    fn ecp_modes() {
        let hits = vec![vec![Some(true), Some(false), None], vec![Some(true), Some(true), Some(true)]];
        let a = vec![vec![true, true, true], vec![true, false, false]];
        let (pooled, _) = aggregate_ecp(&hits, &a, Scenario::Pooled);
        assert!((pooled.unwrap() - 4.0 / 5.0).abs() < 1e-15);
        let (s, per) = aggregate_ecp(&hits, &a, Scenario::Sampled);
        assert_eq!(per, vec![Some(0.5), Some(1.0)]);
        assert!((s.unwrap() - 0.75).abs() < 1e-15);
        let (ns, per) = aggregate_ecp(&hits, &a, Scenario::Nonsampled);
        assert_eq!(per, vec![None, Some(1.0)]);
        assert_eq!(ns, Some(1.0));
    }

    fn check_study(res: &SimResult) {
        let c = &res.config;
        let d = c.design.n_areas();
        let m = res.replicates().len();
        assert_eq!(res.records.len(), m * d * c.parameters.len());
        let cols = c.interval_columns();
        // nesting of every interval across nominal levels, record by record
        for r in &res.records {
            assert_eq!(r.hits.len(), cols.len());
            for (i, ci) in cols.iter().enumerate() {
                for (j, cj) in cols.iter().enumerate() {
                    if ci.kind == cj.kind && ci.level < cj.level {
                        if let (Some(lo), Some(hi)) = (r.hits[i], r.hits[j]) {
                            assert!(!lo || hi, "{} vs {}: {:?}", ci.label(), cj.label(), r);
                        }
                    }
                }
            }
        }
        for s in res.scenarios() {
            for p in res.parameters() {
                for kind in [IntervalKind::Naive, IntervalKind::Calibrated] {
                    let e: Vec<f64> = c.levels.iter().map(|&l| res.ecp(&p, s, kind, l).unwrap().unwrap_or(0.0)).collect();
                    assert!(e.windows(2).all(|w| w[0] <= w[1]), "{p} {e:?}");
                    assert!(e.iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
        let ledger = res.a_ledger().unwrap();
        assert_eq!(ledger.len(), d);
        assert!(ledger.values().all(|v| v.len() == m));
        let rb = res.rb_table().unwrap();
        assert!(!rb.is_empty());
        assert!(!res.t_statistics().is_empty());
        let plots = res.ecp_boxplots().unwrap();
        assert!(plots.iter().all(|(_, svg)| svg.starts_with("<svg") && svg.ends_with("</svg>\n")));
    }

    #[test]
    fn noninformative_smoke() {
        let c = tiny(Design::Noninformative { areas: 9, r_sigma: 1.0 });
        let res = run_study(&c).unwrap();
        assert!(res.dropped.is_empty());
        check_study(&res);
        assert!(res.rb_table().unwrap().iter().any(|r| r.method == MseVariant::Standard));
        assert!(res.a_ledger().unwrap().values().all(|v| v.iter().all(|&a| a)));
    }

    #[test]
    fn informative_smoke_and_ledger() {
        let mut c = tiny(Design::Informative { r_sigma: 2.0 });
        c.replicates = 1;
        let res = run_study(&c).unwrap();
        check_study(&res);
        let ledger = res.a_ledger().unwrap();
        let sampled: usize = ledger.values().map(|v| v.iter().filter(|&&a| a).count()).sum();
        let nonsampled: usize = ledger.values().map(|v| v.iter().filter(|&&a| !a).count()).sum();
        assert_eq!(sampled, 90);
        assert_eq!(sampled + nonsampled, 150);
        let scen: Vec<Scenario> = res.rb_table().unwrap().iter().map(|r| r.scenario).collect();
        assert!(scen.contains(&Scenario::Sampled) && scen.contains(&Scenario::Nonsampled));
        assert!(res.rb_table().unwrap().iter().all(|r| r.method != MseVariant::Standard));
    }

    #[test]
    fn study_is_thread_count_invariant() {
        let c = tiny(Design::Noninformative { areas: 6, r_sigma: 2.0 });
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run_study(&c).unwrap());
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| run_study(&c).unwrap());
        assert_eq!(one, four);
    }

    #[test]
    fn config_validation() {
        let mut c = SimConfig::new(Design::Noninformative { areas: 20, r_sigma: 1.0 });
        assert!(c.validate().is_ok());
        c.replicates = 0;
        assert!(c.validate().is_err());
        c.replicates = 1;
        c.parameters = vec!["median".into()];
        assert!(c.validate().is_err());
        c.parameters = vec!["mean".into()];
        c.levels = vec![1.0];
        assert!(c.validate().is_err());
    }
}
