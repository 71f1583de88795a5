//! Informative sampling.
//!
//! Under an informative design the sample follows the nested error model
//! (the *sample* distribution), while the non-sampled part of the population
//! follows a tilted version of it. The tilt is expressed through two weight
//! models:
//!
//! * unit level: `E[w_ij | x, y, area] = kappa_i exp(x'g1 + g2 y + (x'g3) y)`,
//!   with `x` the covariates without the intercept;
//! * area level: `log w_i ~ N(lambda0 + lambda1 u_i, tau2)`.
//!
//! For a sampled area, a non-sampled unit has density proportional to
//! `(w(y) - 1) f_s(y | x, b)` with `b` drawn from its Gaussian posterior. For
//! a non-sampled area, the area effect has density proportional to
//! `(E[w_i | u] - 1) phi(u / sigma_u)` and each unit then has density
//! proportional to `w(y) f_s(y | x, u)`.
//!
//! Both tilts are available by sampling importance resampling ([`Tilt::Sir`])
//! and by an exact sampler ([`Tilt::Exact`]). The exact sampler uses that an
//! exponential tilt of a Gaussian is a shifted Gaussian: `w(y) f_s(y)` is
//! proportional to a normal density with mean moved by `c sigma^2`, and the
//! complement `(w - 1) f_s` is reached by rejection from that shifted normal
//! with acceptance probability `1 - 1/w(y)`.
//!
//! Parameter uncertainty is propagated by drawing parameter vectors from a
//! normal approximation (jackknife covariance, variances on the log scale)
//! rather than by regenerating samples, since no full model for the weights
//! is assumed.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleDataset;
use crate::ebp::{self, AreaSampler, EbpDraws};
use crate::error::{Error, Result};
use crate::model::{fit_ml, ConditionalEffect, FittedNer, NerParams};
use crate::mse::{m1_hat, BootstrapReplicate};
use crate::optim::NelderMead;
use crate::params::AreaParameter;
use crate::rng::{self, stream, Rng};

/// Default SIR candidate pool per target draw.
pub const DEFAULT_POOL_SIZE: usize = 100;

/// Rejection attempts before the exact sampler falls back to an untilted draw.
const MAX_REJECTIONS: usize = 10_000;

/// Unit-level weight model
/// `w_ij = kappa_i exp(x'g1 + g2 y + (x'g3) y)` with `x` excluding the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightModelParams {
    pub gamma1: Vec<f64>,
    pub gamma2: f64,
    pub gamma3: Vec<f64>,
    pub log_kappa: BTreeMap<i64, f64>,
}

impl WeightModelParams {
    /// `(x'g1, g2 + x'g3)` for covariates `x` that include the intercept.
    fn tilt_terms(&self, x: &[f64]) -> (f64, f64) {
        let rest = &x[1..];
        let a = rest.iter().zip(&self.gamma1).map(|(v, g)| v * g).sum();
        let c = self.gamma2 + rest.iter().zip(&self.gamma3).map(|(v, g)| v * g).sum::<f64>();
        (a, c)
    }

    /// Modelled expected weight of a unit with covariates `x` and response `y`.
    pub fn omega(&self, area_id: i64, x: &[f64], y: f64) -> f64 {
        let (a, c) = self.tilt_terms(x);
        (self.log_kappa.get(&area_id).copied().unwrap_or(0.0) + a + c * y).exp()
    }

    pub fn has_interaction(&self) -> bool {
        !self.gamma3.is_empty()
    }
}

/// Area-level weight model `log w_i ~ N(lambda0 + lambda1 u_i, tau2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaWeightParams {
    pub lambda0: f64,
    pub lambda1: f64,
    pub tau2: f64,
}

impl AreaWeightParams {
    /// `E[w_i | u]`.
    pub fn expected_weight(&self, u: f64) -> f64 {
        (self.lambda0 + self.lambda1 * u + self.tau2 / 2.0).exp()
    }
}

/// Every model parameter an EBP run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub ner: NerParams,
    pub weight: Option<WeightModelParams>,
    pub area_weight: Option<AreaWeightParams>,
}

impl ModelParams {
    pub fn noninformative(ner: NerParams) -> Self {
        Self { ner, weight: None, area_weight: None }
    }
}

/// How tilted densities are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Tilt {
    /// Sampling importance resampling from `pool_size` candidates per draw.
    Sir { pool_size: usize },
    /// Closed-form shift plus rejection.
    Exact,
}

impl Default for Tilt {
    fn default() -> Self {
        Tilt::Sir { pool_size: DEFAULT_POOL_SIZE }
    }
}

fn unit_weight(r: &crate::data::UnitRecord) -> Result<f64> {
    match r.unit_weight {
        Some(w) if w > 0.0 && w.is_finite() => Ok(w),
        Some(w) => Err(Error::Validation(format!("unit weight must be positive, got {w} (area {}, unit {})", r.area_id, r.unit_id))),
        None => Err(Error::Validation(format!("unit weight missing (area {}, unit {})", r.area_id, r.unit_id))),
    }
}

/// Least-squares fit of `log w = log kappa_i + x'g1 + g2 y [+ (x'g3) y]` with
/// area fixed effects. `log kappa_i` is the fixed effect plus a pooled
/// smearing term, so that `kappa_i exp(...)` targets `E[w]` rather than
/// `exp(E[log w])`.
pub fn fit_weight_model(data: &SampleDataset, interaction: bool) -> Result<WeightModelParams> {
    let q = data.n_covariates() - 1;
    let k = q + 1 + if interaction { q } else { 0 };
    let row = |r: &crate::data::UnitRecord| -> Vec<f64> {
        let mut v = Vec::with_capacity(k);
        v.extend_from_slice(&r.x[1..]);
        v.push(r.y);
        if interaction {
            v.extend(r.x[1..].iter().map(|xv| xv * r.y));
        }
        v
    };

    // within-area demeaning absorbs the fixed effects
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut means = BTreeMap::new();
    for area in data.sampled_areas() {
        let mut zs = Vec::with_capacity(area.n());
        let mut ls = Vec::with_capacity(area.n());
        for r in &area.sample {
            zs.push(row(r));
            ls.push(unit_weight(r)?.ln());
        }
        let n = area.n() as f64;
        let zbar: Vec<f64> = (0..k).map(|c| zs.iter().map(|z| z[c]).sum::<f64>() / n).collect();
        // centred on the first value so that constant weights demean to exact zeros
        let lbar = ls[0] + ls.iter().map(|l| l - ls[0]).sum::<f64>() / n;
        for (z, l) in zs.iter().zip(&ls) {
            rows.push(z.iter().zip(&zbar).map(|(a, b)| a - b).collect::<Vec<_>>());
            targets.push(l - lbar);
        }
        means.insert(area.area_id, (zbar, lbar));
    }
    if rows.len() <= k {
        return Err(Error::Estimation("too few sampled units for the weight model".into()));
    }
    let z = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
    let t = DVector::from_vec(targets);
    let g = solve_least_squares(&z, &t)?;

    let resid = &t - &z * &g;
    let smear = (resid.iter().map(|e| e.exp()).sum::<f64>() / resid.len() as f64).ln();
    let log_kappa = means
        .into_iter()
        .map(|(id, (zbar, lbar))| {
            let fitted: f64 = zbar.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            (id, lbar - fitted + smear)
        })
        .collect();
    Ok(WeightModelParams {
        gamma1: g.rows(0, q).iter().copied().collect(),
        gamma2: g[q],
        gamma3: if interaction { g.rows(q + 1, q).iter().copied().collect() } else { Vec::new() },
        log_kappa,
    })
}

fn solve_least_squares(z: &DMatrix<f64>, t: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = z.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-10 {
        return Err(Error::Estimation("collinear regressors in the weight model".into()));
    }
    svd.solve(t, 0.0).map_err(|e| Error::Estimation(e.to_string()))
}

/// `(log w_i, u_hat_i, v_hat_i^2)` for every sampled area.
fn area_weight_inputs(data: &SampleDataset, fit: &FittedNer) -> Result<Vec<(f64, f64, f64)>> {
    data.sampled_areas()
        .map(|a| match a.area_weight {
            Some(w) if w > 0.0 && w.is_finite() => {
                let ce = fit.conditional_effect(a.area_id);
                Ok((w.ln(), ce.mean, ce.variance))
            }
            Some(w) => Err(Error::Validation(format!("area weight must be positive, got {w} (area {})", a.area_id))),
            None => Err(Error::Validation(format!("area weight missing for sampled area {}", a.area_id))),
        })
        .collect()
}

/// Smallest `log tau2` the area-weight fit explores.
const LOG_TAU2_MIN: f64 = -40.0;

fn area_weight_negloglik(obs: &[(f64, f64, f64)], lambda1: f64, tau2: f64) -> (f64, f64) {
    // profile lambda0 by weighted least squares
    let mut sw = 0.0;
    let mut swr = 0.0;
    for &(lw, u, v2) in obs {
        let w = 1.0 / (lambda1 * lambda1 * v2 + tau2);
        sw += w;
        swr += w * (lw - lambda1 * u);
    }
    let lambda0 = swr / sw;
    let mut nll = 0.0;
    for &(lw, u, v2) in obs {
        let var = lambda1 * lambda1 * v2 + tau2;
        let r = lw - lambda0 - lambda1 * u;
        nll += 0.5 * (var.ln() + r * r / var);
    }
    (nll, lambda0)
}

fn fit_area_weight_inputs(obs: &[(f64, f64, f64)]) -> Result<AreaWeightParams> {
    if obs.len() < 3 {
        return Err(Error::Estimation(format!("area weight model needs at least 3 sampled areas, got {}", obs.len())));
    }
    // start from ordinary least squares of log w on u_hat
    let n = obs.len() as f64;
    let mu = obs.iter().map(|o| o.1).sum::<f64>() / n;
    let ml = obs.iter().map(|o| o.0).sum::<f64>() / n;
    let suu: f64 = obs.iter().map(|o| (o.1 - mu).powi(2)).sum();
    let sul: f64 = obs.iter().map(|o| (o.1 - mu) * (o.0 - ml)).sum();
    let l1 = if suu > 0.0 { sul / suu } else { 0.0 };
    let rss: f64 = obs.iter().map(|o| (o.0 - ml - l1 * (o.1 - mu)).powi(2)).sum();
    let t0 = (rss / n).max(1e-8).ln().max(LOG_TAU2_MIN);

    let objective = |p: &[f64]| area_weight_negloglik(obs, p[0], p[1].max(LOG_TAU2_MIN).exp()).0;
    let nm = NelderMead { max_iter: 2000, rel_tol: 1e-12, initial_step: 0.5 };
    let mut best = nm.minimize(&[l1, t0], objective);
    // restart once from the optimum to escape early simplex collapse
    let again = nm.minimize(&best.x, objective);
    if again.value <= best.value {
        best = again;
    }
    if !best.value.is_finite() {
        return Err(Error::Estimation("area weight likelihood is not finite".into()));
    }
    let lambda1 = best.x[0];
    let tau2 = best.x[1].max(LOG_TAU2_MIN).exp();
    let (_, lambda0) = area_weight_negloglik(obs, lambda1, tau2);
    Ok(AreaWeightParams { lambda0, lambda1, tau2 })
}

/// Maximizes the marginal likelihood of the area weights,
/// `log w_i ~ N(lambda0 + lambda1 u_hat_i, lambda1^2 v_hat_i^2 + tau2)`, with
/// the area-effect posteriors of `fit` held fixed.
pub fn fit_area_weight_model(data: &SampleDataset, fit: &FittedNer) -> Result<AreaWeightParams> {
    fit_area_weight_inputs(&area_weight_inputs(data, fit)?)
}

/// Fitted components of the informative model.
#[derive(Debug, Clone, PartialEq)]
pub struct InformativeFit {
    pub params: ModelParams,
    pub ner: FittedNer,
}

/// Fits the sample model, the unit weight model and, when every sampled area
/// carries an area weight, the area weight model.
pub fn fit_informative(data: &SampleDataset, interaction: bool) -> Result<InformativeFit> {
    let ner = fit_ml(data)?;
    let weight = fit_weight_model(data, interaction)?;
    let area_weight = if data.sampled_areas().all(|a| a.area_weight.is_some()) {
        Some(fit_area_weight_model(data, &ner)?)
    } else {
        None
    };
    Ok(InformativeFit { params: ModelParams { ner: ner.params.clone(), weight: Some(weight), area_weight }, ner })
}

/// Resampling index proportional to `weights`; `None` if they sum to zero.
fn resample_index(rng: &mut Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return Some(k);
        }
    }
    weights.iter().rposition(|&w| w > 0.0)
}

/// Exponent cap keeping tilted weights finite.
const MAX_LOG_WEIGHT: f64 = 700.0;

/// One draw from the density proportional to `g(y) N(y; mu, sd^2)` where
/// `log w(y) = lo + c y` and `g = max(w - 1, 0)` (`complement`) or `g = w`.
/// Returns the draw and whether the sampler had to fall back to an untilted draw.
#[allow(clippy::too_many_arguments)]
pub(crate) fn draw_tilted(
    rng: &mut Rng,
    tilt: Tilt,
    mu: f64,
    sd: f64,
    lo: f64,
    c: f64,
    complement: bool,
    scratch: &mut Vec<(f64, f64)>,
) -> (f64, bool) {
    match tilt {
        Tilt::Exact => {
            let shifted = mu + c * sd * sd;
            if !complement {
                let z: f64 = StandardNormal.sample(rng);
                return (shifted + sd * z, false);
            }
            for _ in 0..MAX_REJECTIONS {
                let z: f64 = StandardNormal.sample(rng);
                let y = shifted + sd * z;
                let accept = 1.0 - (-(lo + c * y)).exp();
                if accept > 0.0 && rng.random::<f64>() < accept {
                    return (y, false);
                }
            }
            let z: f64 = StandardNormal.sample(rng);
            (mu + sd * z, true)
        }
        Tilt::Sir { pool_size } => {
            scratch.clear();
            let mut max_log = f64::NEG_INFINITY;
            for _ in 0..pool_size.max(1) {
                let z: f64 = StandardNormal.sample(rng);
                let y = mu + sd * z;
                let lw = (lo + c * y).min(MAX_LOG_WEIGHT);
                max_log = max_log.max(lw);
                scratch.push((y, lw));
            }
            let weights: Vec<f64> = if complement {
                scratch.iter().map(|&(_, lw)| (lw.exp() - 1.0).max(0.0)).collect()
            } else {
                // only ratios matter here, so rescale by the largest weight
                scratch.iter().map(|&(_, lw)| (lw - max_log).exp()).collect()
            };
            match resample_index(rng, &weights) {
                Some(k) => (scratch[k].0, false),
                None => (scratch[0].0, true),
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct TiltedUnit {
    pos: usize,
    /// `x'beta`
    mean: f64,
    sd: f64,
    /// `log kappa_i + x'g1` (sampled areas) or `x'g1` (non-sampled areas)
    lo: f64,
    c: f64,
}

#[derive(Debug, Clone, Copy)]
enum AreaEffect {
    /// Gaussian posterior of a sampled area.
    Posterior { mean: f64, sd: f64 },
    /// Prior tilted by the area weight model.
    Tilted { sd: f64, weight: AreaWeightParams },
}

/// Population draws for one area under the informative model.
#[derive(Debug)]
pub struct InformativeAreaSampler {
    size: usize,
    observed: Vec<(usize, f64)>,
    units: Vec<TiltedUnit>,
    effect: AreaEffect,
    tilt: Tilt,
    fallbacks: AtomicUsize,
}

impl InformativeAreaSampler {
    /// Number of draws (units or area effects) that fell back to an untilted
    /// sample because every resampling weight was zero.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    fn draw_effect(&self, rng: &mut Rng, scratch: &mut Vec<(f64, f64)>) -> f64 {
        match self.effect {
            AreaEffect::Posterior { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            AreaEffect::Tilted { sd, weight } => {
                if sd == 0.0 {
                    return 0.0;
                }
                let lo = weight.lambda0 + weight.tau2 / 2.0;
                let (u, fell_back) = draw_tilted(rng, self.tilt, 0.0, sd, lo, weight.lambda1, true, scratch);
                if fell_back {
                    self.fallbacks.fetch_add(1, Ordering::Relaxed);
                }
                u
            }
        }
    }
}

impl AreaSampler for InformativeAreaSampler {
    fn population_size(&self) -> usize {
        self.size
    }

    fn fill(&self, rng: &mut Rng, out: &mut [f64]) {
        let mut scratch = Vec::new();
        let b = self.draw_effect(rng, &mut scratch);
        for &(pos, y) in &self.observed {
            out[pos] = y;
        }
        let complement = matches!(self.effect, AreaEffect::Posterior { .. });
        for u in &self.units {
            let (y, fell_back) = draw_tilted(rng, self.tilt, u.mean + b, u.sd, u.lo, u.c, complement, &mut scratch);
            if fell_back {
                self.fallbacks.fetch_add(1, Ordering::Relaxed);
            }
            out[u.pos] = y;
        }
    }
}

/// Informative model evaluated at one parameter vector.
#[derive(Debug, Clone)]
pub struct InformativeModel<'a> {
    pub params: ModelParams,
    view: FittedNer,
    data: &'a SampleDataset,
}

impl<'a> InformativeModel<'a> {
    pub fn new(params: ModelParams, data: &'a SampleDataset) -> Result<Self> {
        if params.weight.is_none() {
            return Err(Error::Validation("informative model needs a unit weight model".into()));
        }
        let view = FittedNer::from_params(params.ner.clone(), data);
        Ok(Self { params, view, data })
    }

    pub fn conditional_effect(&self, area_id: i64) -> ConditionalEffect {
        self.view.conditional_effect(area_id)
    }

    pub fn sampler(&self, area_id: i64, tilt: Tilt) -> Result<InformativeAreaSampler> {
        let area = self.data.area(area_id)?;
        let pop = area.population()?;
        let weight = self.params.weight.as_ref().expect("checked in new");
        let ner = &self.params.ner;
        let se = ner.sigma2_e.sqrt();
        let sampled = area.is_sampled();
        let log_kappa = if sampled {
            *weight
                .log_kappa
                .get(&area_id)
                .ok_or_else(|| Error::Validation(format!("no kappa estimate for sampled area {area_id}")))?
        } else {
            0.0
        };
        let mut observed = Vec::with_capacity(area.n());
        let mut units = Vec::with_capacity(pop.len() - area.n());
        let mut records = area.sample.iter();
        for (pos, unit) in pop.iter().enumerate() {
            if unit.sampled {
                let r = records.find(|r| r.unit_id == unit.unit_id).expect("validated sample flag");
                observed.push((pos, r.y));
            } else {
                let (a, c) = weight.tilt_terms(&unit.x);
                units.push(TiltedUnit {
                    pos,
                    mean: ner.mean(&unit.x),
                    sd: se / unit.variance_scale.sqrt(),
                    lo: log_kappa + a,
                    c,
                });
            }
        }
        let effect = if sampled {
            let ce = self.view.conditional_effect(area_id);
            AreaEffect::Posterior { mean: ce.mean, sd: ce.variance.max(0.0).sqrt() }
        } else {
            let w = self.params.area_weight.ok_or_else(|| {
                Error::Validation(format!("non-sampled area {area_id} needs the area weight model"))
            })?;
            AreaEffect::Tilted { sd: ner.sigma2_u.sqrt(), weight: w }
        };
        Ok(InformativeAreaSampler { size: pop.len(), observed, units, effect, tilt, fallbacks: AtomicUsize::new(0) })
    }

    /// EBP draws of several functionals for one area.
    pub fn draws(&self, area_id: i64, params: &[AreaParameter], l: usize, seed: u64, tilt: Tilt) -> Result<Vec<EbpDraws>> {
        if l < 2 {
            return Err(Error::Validation(format!("need at least 2 Monte Carlo draws, got {l}")));
        }
        let sampler = self.sampler(area_id, tilt)?;
        let sets = ebp::simulate_draws(&sampler, area_id, params, l, seed)?;
        if sampler.fallbacks() > 0 {
            log::warn!("area {area_id}: {} tilted draws fell back to untilted sampling", sampler.fallbacks());
        }
        Ok(params
            .iter()
            .zip(sets)
            .map(|(p, draws)| EbpDraws {
                area_id,
                parameter: p.label(),
                draws,
                params_used: self.params.clone(),
                seed,
            })
            .collect())
    }
}

/// Informative EBP draws for every area with a population frame.
pub fn predict_informative(
    params: &ModelParams,
    data: &SampleDataset,
    fns: &[AreaParameter],
    l: usize,
    seed: u64,
    tilt: Tilt,
) -> Result<BTreeMap<i64, Vec<EbpDraws>>> {
    let model = InformativeModel::new(params.clone(), data)?;
    let ids: Vec<i64> = data.areas().filter(|a| a.population.is_some()).map(|a| a.area_id).collect();
    ids.par_iter().map(|&id| Ok((id, model.draws(id, fns, l, seed, tilt)?))).collect()
}

/// Jackknife covariance of the parameter estimators, block-diagonal in the
/// sample-model block `(beta, sigma2_u, sigma2_e, g2, g3)` and the area
/// weight block `(lambda0, lambda1, tau2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JackknifeCov {
    pub v_s: DMatrix<f64>,
    pub v_ns: Option<DMatrix<f64>>,
    /// Derivatives of the log-scale transform at the estimate, in the order
    /// of [`transform`].
    pub jacobian_diag: Vec<f64>,
}

impl JackknifeCov {
    /// Covariance of the transformed parameter vector, `J V J'`.
    pub fn transformed(&self) -> DMatrix<f64> {
        let q = self.jacobian_diag.len();
        let mut v = DMatrix::zeros(q, q);
        let s = self.v_s.nrows();
        v.view_mut((0, 0), (s, s)).copy_from(&self.v_s);
        if let Some(ns) = &self.v_ns {
            v.view_mut((s, s), (3, 3)).copy_from(ns);
        }
        let j = DVector::from_column_slice(&self.jacobian_diag);
        DMatrix::from_fn(q, q, |a, b| j[a] * v[(a, b)] * j[b])
    }

    /// Zero covariance of matching shape.
    pub fn zeros(psi: &ModelParams) -> Self {
        let s = psi_s(psi).len();
        Self {
            v_s: DMatrix::zeros(s, s),
            v_ns: psi.area_weight.map(|_| DMatrix::zeros(3, 3)),
            jacobian_diag: jacobian(psi),
        }
    }
}

fn psi_s(p: &ModelParams) -> Vec<f64> {
    let w = p.weight.as_ref().expect("informative parameters");
    let mut v = p.ner.beta.clone();
    v.push(p.ner.sigma2_u);
    v.push(p.ner.sigma2_e);
    v.push(w.gamma2);
    v.extend_from_slice(&w.gamma3);
    v
}

fn psi_ns(a: &AreaWeightParams) -> Vec<f64> {
    vec![a.lambda0, a.lambda1, a.tau2]
}

fn jacobian(p: &ModelParams) -> Vec<f64> {
    let w = p.weight.as_ref().expect("informative parameters");
    let inv = |v: f64| if v > 0.0 { 1.0 / v } else { 0.0 };
    let mut j = vec![1.0; p.ner.beta.len()];
    j.push(inv(p.ner.sigma2_u));
    j.push(inv(p.ner.sigma2_e));
    j.push(1.0);
    j.extend(std::iter::repeat_n(1.0, w.gamma3.len()));
    if let Some(a) = &p.area_weight {
        j.extend([1.0, 1.0, inv(a.tau2)]);
    }
    j
}

/// Log-scale transform `g(psi)`: identity except `log` on `sigma2_u`,
/// `sigma2_e` and `tau2`. The order is `(beta, log sigma2_u, log sigma2_e,
/// g2, g3, lambda0, lambda1, log tau2)`; the area block is present only
/// when `psi` has an area weight model.
pub fn transform(psi: &ModelParams) -> Vec<f64> {
    let p = psi.ner.beta.len();
    let mut v = psi_s(psi);
    v[p] = v[p].ln();
    v[p + 1] = v[p + 1].ln();
    if let Some(a) = &psi.area_weight {
        v.extend([a.lambda0, a.lambda1, a.tau2.ln()]);
    }
    v
}

/// Inverse of [`transform`]; components not in the transformed vector
/// (`g1`, `kappa`) are taken from `template`.
pub fn inverse_transform(t: &[f64], template: &ModelParams) -> ModelParams {
    let p = template.ner.beta.len();
    let w = template.weight.as_ref().expect("informative parameters");
    let r = w.gamma3.len();
    let ner = NerParams { beta: t[..p].to_vec(), sigma2_u: t[p].exp(), sigma2_e: t[p + 1].exp() };
    let weight = WeightModelParams {
        gamma1: w.gamma1.clone(),
        gamma2: t[p + 2],
        gamma3: t[p + 3..p + 3 + r].to_vec(),
        log_kappa: w.log_kappa.clone(),
    };
    let area_weight = template
        .area_weight
        .map(|_| AreaWeightParams { lambda0: t[p + 3 + r], lambda1: t[p + 4 + r], tau2: t[p + 5 + r].exp() });
    ModelParams { ner, weight: Some(weight), area_weight }
}

fn centered_cov(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    let q = rows[0].len();
    // shifted by the first row so identical rows centre to exactly zero
    let mean: Vec<f64> =
        (0..q).map(|k| rows[0][k] + rows.iter().map(|r| r[k] - rows[0][k]).sum::<f64>() / d as f64).collect();
    let mut v = DMatrix::zeros(q, q);
    for r in rows {
        let c = DVector::from_iterator(q, r.iter().zip(&mean).map(|(a, m)| a - m));
        v += &c * c.transpose();
    }
    v * ((d as f64 - 1.0) / d as f64)
}

/// Delete-one-area jackknife covariance of the informative estimators.
///
/// The sample block refits the sample model and the weight model without
/// each sampled area. The area-weight block refits the area weight model
/// without each area while keeping the area-effect posteriors of the full
/// fit fixed.
pub fn jackknife_cov(data: &SampleDataset, psi_hat: &ModelParams) -> Result<JackknifeCov> {
    let ids: Vec<i64> = data.sampled_areas().map(|a| a.area_id).collect();
    if ids.len() < 3 {
        return Err(Error::Estimation(format!("jackknife needs at least 3 sampled areas, got {}", ids.len())));
    }
    let weight = psi_hat
        .weight
        .as_ref()
        .ok_or_else(|| Error::Validation("jackknife needs a unit weight model".into()))?;
    let interaction = weight.has_interaction();
    let full_view = FittedNer::from_params(psi_hat.ner.clone(), data);
    let ns_inputs = match psi_hat.area_weight {
        Some(_) => Some(area_weight_inputs(data, &full_view)?),
        None => None,
    };

    let results: Vec<(i64, Result<(Vec<f64>, Option<Vec<f64>>)>)> = ids
        .par_iter()
        .enumerate()
        .map(|(k, &id)| {
            let r = (|| {
                let sub = data.filter_areas(|a| a.area_id != id);
                let ner = fit_ml(&sub)?;
                let w = fit_weight_model(&sub, interaction)?;
                let s = psi_s(&ModelParams { ner: ner.params, weight: Some(w), area_weight: None });
                let ns = match &ns_inputs {
                    Some(inputs) => {
                        let rest: Vec<_> =
                            inputs.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| *v).collect();
                        Some(psi_ns(&fit_area_weight_inputs(&rest)?))
                    }
                    None => None,
                };
                Ok((s, ns))
            })();
            (id, r)
        })
        .collect();

    let mut failed = Vec::new();
    let mut s_rows = Vec::new();
    let mut ns_rows = Vec::new();
    for (id, r) in results {
        match r {
            Ok((s, ns)) => {
                s_rows.push(s);
                ns_rows.extend(ns);
            }
            Err(e) => {
                log::warn!("jackknife refit without area {id} failed: {e}");
                failed.push(id);
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::Jackknife(failed));
    }
    Ok(JackknifeCov {
        v_s: centered_cov(&s_rows),
        v_ns: if ns_rows.is_empty() { None } else { Some(centered_cov(&ns_rows)) },
        jacobian_diag: jacobian(psi_hat),
    })
}

/// `B` parameter vectors drawn from the normal approximation on the log
/// scale and transformed back. A zero `sigma2_u` estimate stays at zero.
pub fn param_bootstrap_draws(psi_hat: &ModelParams, cov: &JackknifeCov, b_count: usize, seed: u64) -> Vec<ModelParams> {
    let p = psi_hat.ner.beta.len();
    let boundary = psi_hat.ner.sigma2_u <= 0.0;
    let mut center = transform(psi_hat);
    let mut c = cov.transformed();
    assert_eq!(center.len(), c.nrows(), "covariance does not match the parameter vector");
    if boundary {
        center[p] = 0.0;
        c.row_mut(p).fill(0.0);
        c.column_mut(p).fill(0.0);
    }
    let q = center.len();
    let eig = SymmetricEigen::new(c);
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    (0..b_count)
        .map(|b| {
            let mut r = rng::rng_for(seed, &[stream::PARAM_BOOT, b as u64]);
            let z = DVector::from_fn(q, |_, _| StandardNormal.sample(&mut r));
            let shift = &root * z;
            let t: Vec<f64> = center.iter().zip(shift.iter()).map(|(a, s)| a + s).collect();
            let mut out = inverse_transform(&t, psi_hat);
            if boundary {
                out.ner.sigma2_u = 0.0;
            }
            out
        })
        .collect()
}

/// Bootstrap replicates for one area of the informative pipeline: each
/// bootstrap parameter vector re-runs the EBP on the original data with the
/// base draw generators.
pub fn informative_bootstrap_area(
    models: &[InformativeModel<'_>],
    area_id: i64,
    fns: &[AreaParameter],
    l: usize,
    seed: u64,
    tilt: Tilt,
) -> Result<Vec<Vec<BootstrapReplicate>>> {
    let mut out: Vec<Vec<BootstrapReplicate>> = fns.iter().map(|_| Vec::with_capacity(models.len())).collect();
    for (b, m) in models.iter().enumerate() {
        let sampler = m.sampler(area_id, tilt)?;
        let sets = ebp::simulate_draws(&sampler, area_id, fns, l, seed)?;
        for (k, draws) in sets.into_iter().enumerate() {
            out[k].push(BootstrapReplicate {
                b,
                psi_hat_b: m.params.clone(),
                theta_hat_b: ebp::mc_mean(&draws),
                m1_b: m1_hat(&draws),
                draws,
            });
        }
    }
    Ok(out)
}

/// Base draws and bootstrap replicates of every functional for every area
/// with a population frame.
pub type AreaRuns = BTreeMap<i64, Vec<(EbpDraws, Vec<BootstrapReplicate>)>>;

/// Informative-design MSE ingredients: base EBP draws plus replicate draws
/// under bootstrap parameters. Combine with [`crate::mse::mse_report`].
#[allow(clippy::too_many_arguments)]
pub fn mse_informative(
    params: &ModelParams,
    cov: &JackknifeCov,
    data: &SampleDataset,
    fns: &[AreaParameter],
    l: usize,
    b_count: usize,
    seed: u64,
    tilt: Tilt,
) -> Result<AreaRuns> {
    if b_count < 2 {
        return Err(Error::Validation(format!("need at least 2 bootstrap replicates, got {b_count}")));
    }
    let base = InformativeModel::new(params.clone(), data)?;
    let models = param_bootstrap_draws(params, cov, b_count, seed)
        .into_iter()
        .map(|p| InformativeModel::new(p, data))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<i64> = data.areas().filter(|a| a.population.is_some()).map(|a| a.area_id).collect();
    ids.par_iter()
        .map(|&id| {
            let draws = base.draws(id, fns, l, seed, tilt)?;
            let reps = informative_bootstrap_area(&models, id, fns, l, seed, tilt)?;
            Ok((id, draws.into_iter().zip(reps).collect()))
        })
        .collect()
}
