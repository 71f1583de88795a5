//! End-to-end runs on one dataset: fit, EBP, MSE and intervals for either
//! pipeline. Work is done area by area so replicate draws of one area are
//! dropped before the next is needed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleDataset;
use crate::ebp::{predict_area, EbpDraws};
use crate::error::{Error, Result};
use crate::informative::{
    fit_informative, informative_bootstrap_area, jackknife_cov, param_bootstrap_draws, AreaWeightParams,
    InformativeModel, Tilt, WeightModelParams,
};
use crate::intervals::{calibrated_ci, naive_ci, normal_ci, IntervalReport};
use crate::model::{fit_ml, ConditionalEffect, FitDiagnostics, NerParams};
use crate::mse::{bootstrap_area, bootstrap_refits, mse_report, standard_mr_mse, BootstrapReplicate, MseReport, MseVariant};
use crate::params::AreaParameter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    #[default]
    Noninformative,
    Informative,
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Noninformative => "noninformative",
            Self::Informative => "informative",
        })
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "noninformative" | "noninf" => Ok(Self::Noninformative),
            "informative" | "inf" => Ok(Self::Informative),
            _ => Err(Error::Validation(format!("unknown pipeline '{s}'"))),
        }
    }
}

/// Settings shared by every command.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub pipeline: Pipeline,
    pub parameters: Vec<AreaParameter>,
    pub l: usize,
    pub b: usize,
    pub seed: u64,
    pub tilt: Tilt,
    /// `x y` interaction in the unit weight model.
    pub interaction: bool,
    /// Full-population bootstrap MSE (noninformative pipeline only).
    pub standard: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::Noninformative,
            parameters: vec![AreaParameter::Mean],
            l: crate::ebp::DEFAULT_L,
            b: crate::mse::DEFAULT_B,
            seed: 0,
            tilt: Tilt::default(),
            interaction: false,
            standard: false,
        }
    }
}

impl RunOptions {
    fn check(&self) -> Result<()> {
        if self.parameters.is_empty() {
            return Err(Error::Validation("no area parameters requested".into()));
        }
        if self.l < 2 || self.b < 2 {
            return Err(Error::Validation(format!("L and B must be at least 2 (got L={}, B={})", self.l, self.b)));
        }
        if self.standard && self.pipeline == Pipeline::Informative {
            return Err(Error::Validation(
                "the full-population bootstrap needs a model for the weights; use the noninformative pipeline".into(),
            ));
        }
        Ok(())
    }
}

/// Estimated parameters and area-effect posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub pipeline: Pipeline,
    pub ner: NerParams,
    pub loglik: f64,
    pub diagnostics: FitDiagnostics,
    pub weight: Option<WeightModelParams>,
    pub area_weight: Option<AreaWeightParams>,
    pub effects: BTreeMap<i64, ConditionalEffect>,
}

pub fn fit(data: &SampleDataset, opts: &RunOptions) -> Result<FitSummary> {
    match opts.pipeline {
        Pipeline::Noninformative => {
            let f = fit_ml(data)?;
            Ok(FitSummary {
                pipeline: opts.pipeline,
                ner: f.params,
                loglik: f.loglik,
                diagnostics: f.diagnostics,
                weight: None,
                area_weight: None,
                effects: f.effects,
            })
        }
        Pipeline::Informative => {
            let f = fit_informative(data, opts.interaction)?;
            let model = InformativeModel::new(f.params.clone(), data)?;
            let effects = data.area_ids().into_iter().map(|id| (id, model.conditional_effect(id))).collect();
            Ok(FitSummary {
                pipeline: opts.pipeline,
                ner: f.params.ner,
                loglik: f.ner.loglik,
                diagnostics: f.ner.diagnostics,
                weight: f.params.weight,
                area_weight: f.params.area_weight,
                effects,
            })
        }
    }
}

fn predicted_areas(data: &SampleDataset) -> Vec<i64> {
    data.areas().filter(|a| a.population.is_some()).map(|a| a.area_id).collect()
}

fn require_areas(data: &SampleDataset) -> Result<Vec<i64>> {
    let ids = predicted_areas(data);
    if ids.is_empty() {
        let first = data.area_ids().first().copied().unwrap_or_default();
        return Err(Error::MissingPopulation(first));
    }
    Ok(ids)
}

/// EBP draws of every requested functional for every area with a frame,
/// ordered by area then functional.
pub fn predict(data: &SampleDataset, opts: &RunOptions) -> Result<Vec<EbpDraws>> {
    if opts.parameters.is_empty() || opts.l < 2 {
        return Err(Error::Validation("need at least one parameter and L >= 2".into()));
    }
    let ids = require_areas(data)?;
    let per_area: Vec<Vec<EbpDraws>> = match opts.pipeline {
        Pipeline::Noninformative => {
            let f = fit_ml(data)?;
            ids.par_iter().map(|&id| predict_area(&f, data, id, &opts.parameters, opts.l, opts.seed)).collect::<Result<_>>()?
        }
        Pipeline::Informative => {
            let f = fit_informative(data, opts.interaction)?;
            let model = InformativeModel::new(f.params, data)?;
            ids.par_iter()
                .map(|&id| model.draws(id, &opts.parameters, opts.l, opts.seed, opts.tilt))
                .collect::<Result<_>>()?
        }
    };
    Ok(per_area.into_iter().flatten().collect())
}

/// Base draws, bootstrap replicates and the optional standard MSE of one
/// area and functional.
pub struct AreaRun {
    pub draws: EbpDraws,
    pub replicates: Vec<BootstrapReplicate>,
    pub standard: Option<f64>,
}

/// Runs the bootstrap for every area with a frame and maps each
/// area/functional with `f`, in area then functional order.
pub fn map_area_runs<T: Send>(
    data: &SampleDataset,
    opts: &RunOptions,
    f: impl Fn(AreaRun) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    opts.check()?;
    let ids = require_areas(data)?;
    let fns = &opts.parameters;
    let (l, seed) = (opts.l, opts.seed);
    let per_area: Vec<Vec<T>> = match opts.pipeline {
        Pipeline::Noninformative => {
            let fit = fit_ml(data)?;
            let fits = bootstrap_refits(&fit, data, opts.b, seed)?;
            let standard = if opts.standard { Some(standard_mr_mse(&fit, data, fns, l, opts.b, seed)?) } else { None };
            ids.par_iter()
                .map(|&id| {
                    let draws = predict_area(&fit, data, id, fns, l, seed)?;
                    let reps = bootstrap_area(&fits, data, id, fns, l, seed)?;
                    draws
                        .into_iter()
                        .zip(reps)
                        .enumerate()
                        .map(|(k, (draws, replicates))| {
                            f(AreaRun { draws, replicates, standard: standard.as_ref().map(|s| s[&id][k]) })
                        })
                        .collect()
                })
                .collect::<Result<_>>()?
        }
        Pipeline::Informative => {
            let fitted = fit_informative(data, opts.interaction)?;
            let cov = jackknife_cov(data, &fitted.params)?;
            let base = InformativeModel::new(fitted.params.clone(), data)?;
            let models = param_bootstrap_draws(&fitted.params, &cov, opts.b, seed)
                .into_iter()
                .map(|p| InformativeModel::new(p, data))
                .collect::<Result<Vec<_>>>()?;
            ids.par_iter()
                .map(|&id| {
                    let draws = base.draws(id, fns, l, seed, opts.tilt)?;
                    let reps = informative_bootstrap_area(&models, id, fns, l, seed, opts.tilt)?;
                    draws
                        .into_iter()
                        .zip(reps)
                        .map(|(draws, replicates)| f(AreaRun { draws, replicates, standard: None }))
                        .collect()
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(per_area.into_iter().flatten().collect())
}

/// MSE report of every area and functional.
pub fn mse(data: &SampleDataset, opts: &RunOptions) -> Result<Vec<MseReport>> {
    map_area_runs(data, opts, |r| Ok(mse_report(&r.draws, &r.replicates, r.standard)))
}

/// Normal-theory variants reported by [`intervals`].
pub const NORMAL_VARIANTS: [MseVariant; 4] = [MseVariant::NoBc, MseVariant::Comp, MseVariant::Hm, MseVariant::Standard];

/// MSE reports plus, per level, the naive, calibrated and normal-theory
/// intervals. Normal intervals whose MSE is unavailable, infinite or
/// negative are omitted.
pub fn intervals(data: &SampleDataset, opts: &RunOptions, levels: &[f64]) -> Result<(Vec<MseReport>, Vec<IntervalReport>)> {
    if levels.is_empty() || levels.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Validation(format!("levels must lie in (0, 1): {levels:?}")));
    }
    let out = map_area_runs(data, opts, |r| {
        let report = mse_report(&r.draws, &r.replicates, r.standard);
        let mut cis = Vec::new();
        for &level in levels {
            let alpha = 1.0 - level;
            cis.push(naive_ci(&r.draws, alpha)?);
            cis.push(calibrated_ci(&r.draws, &r.replicates, alpha)?);
            for v in NORMAL_VARIANTS {
                match report.value(v) {
                    Some(m) if m.is_finite() && m >= 0.0 => {
                        cis.push(normal_ci(report.area_id, &report.parameter, v, report.theta_hat, m, alpha)?)
                    }
                    _ => {}
                }
            }
        }
        Ok((report, cis))
    })?;
    let (reports, cis): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok((reports, cis.into_iter().flatten().collect()))
}
