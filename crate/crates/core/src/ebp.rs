//! Monte Carlo empirical best prediction.
//!
//! For each area, `L` complete populations are drawn from the conditional
//! distribution of the non-sampled responses given the sample (sampled units
//! keep their observed values), the area parameter is evaluated on each, and
//! the draws are averaged. The draws themselves are kept: they also give the
//! leading MSE term and the naive interval.
//!
//! Draw `l` of area `i` always uses the generator keyed by `(seed, i, l)`, so
//! predictions are reproducible under any scheduling, doubling `L` extends
//! rather than replaces the draw set, and re-running with different model
//! parameters reuses the same random numbers.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleDataset;
use crate::error::{Error, Result};
use crate::informative::ModelParams;
use crate::model::FittedNer;
use crate::params::{AreaParameter, EvalCache};
use crate::rng::{self, stream, Rng};

/// Default number of Monte Carlo populations per area.
pub const DEFAULT_L: usize = 500;

/// Simulated parameter values for one area and one functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbpDraws {
    pub area_id: i64,
    pub parameter: String,
    pub draws: Vec<f64>,
    pub params_used: ModelParams,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EbpPrediction {
    pub area_id: i64,
    pub theta_hat: f64,
    pub l: usize,
    /// Standard error of the Monte Carlo mean.
    pub mc_se: f64,
}

impl EbpDraws {
    pub fn theta_hat(&self) -> f64 {
        mc_mean(&self.draws)
    }

    pub fn prediction(&self) -> EbpPrediction {
        let l = self.draws.len();
        let sd = crate::mse::m1_hat(&self.draws).sqrt();
        EbpPrediction { area_id: self.area_id, theta_hat: self.theta_hat(), l, mc_se: sd / (l as f64).sqrt() }
    }
}

/// Average of Monte Carlo draws, taken around the first draw so that equal
/// draws average to exactly that value.
pub fn mc_mean(draws: &[f64]) -> f64 {
    let Some(&first) = draws.first() else { return f64::NAN };
    first + draws.iter().map(|d| d - first).sum::<f64>() / draws.len() as f64
}

/// Draws complete area populations from some conditional distribution.
pub trait AreaSampler: Sync {
    fn population_size(&self) -> usize;

    /// Overwrites `out` (length `population_size`) with one population draw.
    fn fill(&self, rng: &mut Rng, out: &mut [f64]);
}

/// Gaussian conditional draws under the nested error model.
#[derive(Debug, Clone)]
pub struct GaussianAreaSampler {
    size: usize,
    observed: Vec<(usize, f64)>,
    /// (position, x'beta, error sd)
    missing: Vec<(usize, f64, f64)>,
    effect_mean: f64,
    effect_sd: f64,
}

impl GaussianAreaSampler {
    pub fn new(fit: &FittedNer, data: &SampleDataset, area_id: i64) -> Result<Self> {
        let area = data.area(area_id)?;
        let pop = area.population()?;
        let mut observed = Vec::with_capacity(area.n());
        let mut missing = Vec::with_capacity(pop.len() - area.n());
        let se = fit.params.sigma2_e.sqrt();
        let mut records = area.sample.iter();
        for (pos, unit) in pop.iter().enumerate() {
            if unit.sampled {
                // both are sorted by unit id and the flags were validated
                let r = records.find(|r| r.unit_id == unit.unit_id).expect("validated sample flag");
                observed.push((pos, r.y));
            } else {
                missing.push((pos, fit.params.mean(&unit.x), se / unit.variance_scale.sqrt()));
            }
        }
        let ce = fit.conditional_effect(area_id);
        Ok(Self {
            size: pop.len(),
            observed,
            missing,
            effect_mean: ce.mean,
            effect_sd: ce.variance.max(0.0).sqrt(),
        })
    }

    /// Conditional mean of each unit's response, in frame order.
    pub fn conditional_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.size];
        for &(pos, y) in &self.observed {
            out[pos] = y;
        }
        for &(pos, m, _) in &self.missing {
            out[pos] = m + self.effect_mean;
        }
        out
    }
}

impl AreaSampler for GaussianAreaSampler {
    fn population_size(&self) -> usize {
        self.size
    }

    fn fill(&self, rng: &mut Rng, out: &mut [f64]) {
        let z: f64 = StandardNormal.sample(rng);
        let b = self.effect_mean + self.effect_sd * z;
        for &(pos, y) in &self.observed {
            out[pos] = y;
        }
        for &(pos, m, sd) in &self.missing {
            let e: f64 = StandardNormal.sample(rng);
            out[pos] = m + b + sd * e;
        }
    }
}

/// One draw of the full response vector of an area (frame order).
pub fn draw_conditional_population(
    fit: &FittedNer,
    data: &SampleDataset,
    area_id: i64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let s = GaussianAreaSampler::new(fit, data, area_id)?;
    let mut out = vec![0.0; s.population_size()];
    s.fill(rng, &mut out);
    Ok(out)
}

/// Generator for draw `l` of area `area_id`.
pub fn draw_rng(seed: u64, area_id: i64, l: usize) -> Rng {
    rng::rng_for(seed, &[stream::EBP_DRAW, rng::area_key(area_id), l as u64])
}

/// Evaluates every functional on `l` population draws. Returns one draw
/// vector per functional.
pub fn simulate_draws(
    sampler: &dyn AreaSampler,
    area_id: i64,
    params: &[AreaParameter],
    l: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut pop = vec![0.0; sampler.population_size()];
    let mut cache = EvalCache::default();
    let mut out: Vec<Vec<f64>> = params.iter().map(|_| Vec::with_capacity(l)).collect();
    for ell in 0..l {
        let mut r = draw_rng(seed, area_id, ell);
        sampler.fill(&mut r, &mut pop);
        cache.clear();
        for (k, p) in params.iter().enumerate() {
            let v = cache.eval(p, &pop)?;
            if !v.is_finite() {
                return Err(Error::UndefinedValue(format!("{} produced a non-finite draw in area {area_id}", p.label())));
            }
            out[k].push(v);
        }
    }
    Ok(out)
}

fn check_l(l: usize) -> Result<()> {
    if l < 2 {
        return Err(Error::Validation(format!("need at least 2 Monte Carlo draws, got {l}")));
    }
    Ok(())
}

/// EBP draws of several functionals for one area, sharing the same
/// simulated populations.
pub fn predict_area(
    fit: &FittedNer,
    data: &SampleDataset,
    area_id: i64,
    params: &[AreaParameter],
    l: usize,
    seed: u64,
) -> Result<Vec<EbpDraws>> {
    check_l(l)?;
    let sampler = GaussianAreaSampler::new(fit, data, area_id)?;
    let sets = simulate_draws(&sampler, area_id, params, l, seed)?;
    let used = ModelParams::noninformative(fit.params.clone());
    Ok(params
        .iter()
        .zip(sets)
        .map(|(p, draws)| EbpDraws { area_id, parameter: p.label(), draws, params_used: used.clone(), seed })
        .collect())
}

/// EBP of one functional for every area that has a population frame.
pub fn predict(
    fit: &FittedNer,
    data: &SampleDataset,
    param: &AreaParameter,
    l: usize,
    seed: u64,
) -> Result<Vec<(EbpPrediction, EbpDraws)>> {
    let ids: Vec<i64> = data.areas().filter(|a| a.population.is_some()).map(|a| a.area_id).collect();
    ids.par_iter()
        .map(|&id| {
            let mut d = predict_area(fit, data, id, std::slice::from_ref(param), l, seed)?;
            let d = d.pop().expect("one functional");
            Ok((d.prediction(), d))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AreaData, PopulationUnit, UnitRecord};
    use crate::model::NerParams;

    fn small_dataset() -> SampleDataset {
        let mut areas = Vec::new();
        for a in 1..=3i64 {
            let mut ad = AreaData::new(a);
            let n_pop = 8;
            let n_s = if a == 3 { 8 } else { 3 };
            let mut pop = Vec::new();
            for j in 0..n_pop {
                let x = vec![1.0, j as f64 / 8.0];
                let sampled = j < n_s;
                if sampled {
                    ad.sample.push(UnitRecord {
                        area_id: a,
                        unit_id: j,
                        y: 1.0 + 0.5 * j as f64 / 8.0 + 0.1 * a as f64 + 0.05 * (j % 3) as f64,
                        x: x.clone(),
                        unit_weight: None,
                        variance_scale: 1.0,
                    });
                }
                pop.push(PopulationUnit { unit_id: j, x, variance_scale: 1.0, sampled });
            }
            ad.population = Some(pop);
            areas.push(ad);
        }
        SampleDataset::new(areas).unwrap()
    }

    #[test]
    fn zero_variances_give_regression_mean() {
        let d = small_dataset();
        let fit = FittedNer::from_params(NerParams { beta: vec![1.0, 0.5], sigma2_u: 0.0, sigma2_e: 0.0 }, &d);
        let y = draw_conditional_population(&fit, &d, 1, &mut draw_rng(1, 1, 0)).unwrap();
        for (j, v) in y.iter().enumerate().skip(3) {
            assert_eq!(*v, 1.0 + 0.5 * j as f64 / 8.0);
        }
    }

    #[test]
    fn fully_sampled_area_is_fixed() {
        let d = small_dataset();
        let fit = FittedNer::from_params(NerParams::new(vec![1.0, 0.5], 0.2, 0.1).unwrap(), &d);
        let observed: Vec<f64> = d.area(3).unwrap().sample.iter().map(|r| r.y).collect();
        let y = draw_conditional_population(&fit, &d, 3, &mut draw_rng(1, 3, 0)).unwrap();
        assert_eq!(y, observed);
        let draws = predict_area(&fit, &d, 3, &[AreaParameter::Gini, AreaParameter::Mean], 20, 4).unwrap();
        let truth = AreaParameter::Gini.eval(&observed).unwrap();
        assert!(draws[0].draws.iter().all(|&v| v == truth));
        assert!((draws[0].theta_hat() - truth).abs() < 1e-15);
        assert_eq!(draws[1].prediction().mc_se, 0.0);
    }

    #[test]
    fn reproducible_and_prefix_stable() {
        let d = small_dataset();
        let fit = FittedNer::from_params(NerParams::new(vec![1.0, 0.5], 0.2, 0.1).unwrap(), &d);
        let a = predict(&fit, &d, &AreaParameter::Gini, 50, 9).unwrap();
        let b = predict(&fit, &d, &AreaParameter::Gini, 50, 9).unwrap();
        assert_eq!(a, b);
        let c = predict(&fit, &d, &AreaParameter::Gini, 100, 9).unwrap();
        assert_eq!(&c[0].1.draws[..50], &a[0].1.draws[..]);
    }

    #[test]
    fn l_must_be_at_least_two() {
        let d = small_dataset();
        let fit = FittedNer::from_params(NerParams::new(vec![1.0, 0.5], 0.2, 0.1).unwrap(), &d);
        assert!(predict_area(&fit, &d, 1, &[AreaParameter::Mean], 1, 0).is_err());
    }

    #[test]
    fn missing_population_is_named() {
        let mut a = AreaData::new(1);
        a.sample = vec![UnitRecord { area_id: 1, unit_id: 0, y: 1.0, x: vec![1.0], unit_weight: None, variance_scale: 1.0 }];
        let mut b = a.clone();
        b.area_id = 2;
        b.sample[0].area_id = 2;
        let d = SampleDataset::new([a, b]).unwrap();
        let fit = FittedNer::from_params(NerParams::new(vec![1.0], 0.2, 0.1).unwrap(), &d);
        assert!(matches!(predict_area(&fit, &d, 1, &[AreaParameter::Mean], 5, 0), Err(Error::MissingPopulation(1))));
    }
}
