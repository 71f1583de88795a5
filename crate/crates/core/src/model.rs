//! Nested error linear regression model
//!
//! ```text
//! y_ij = x_ij' beta + u_i + e_ij,   u_i ~ N(0, sigma2_u),   e_ij ~ N(0, sigma2_e / v_ij)
//! ```
//!
//! Fitting profiles out `beta` by generalised least squares and searches the
//! two variance components on the log scale. Each area enters the likelihood
//! only through a handful of weighted sums, so one likelihood evaluation costs
//! `O(D p^2)` regardless of the within-area sample sizes.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{AreaData, SampleDataset};
use crate::error::{Error, Result};
use crate::optim::NelderMead;
use crate::rng::{self, stream, Rng};

/// Smallest unit-level variance the fit will report.
pub const SIGMA2_E_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerParams {
    pub beta: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_e: f64,
}

impl NerParams {
    pub fn new(beta: Vec<f64>, sigma2_u: f64, sigma2_e: f64) -> Result<Self> {
        if !(sigma2_u >= 0.0) || !(sigma2_e > 0.0) {
            return Err(Error::Validation(format!(
                "variance components must satisfy sigma2_u >= 0 and sigma2_e > 0 (got {sigma2_u}, {sigma2_e})"
            )));
        }
        Ok(Self { beta, sigma2_u, sigma2_e })
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.beta).map(|(a, b)| a * b).sum()
    }
}

/// Posterior of the area effect given the area's sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalEffect {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    /// Norm of the profile log-likelihood gradient in (log sigma2_u, log sigma2_e).
    pub gradient_norm: f64,
    /// `sigma2_u` was set to zero on the boundary of the parameter space.
    pub boundary: bool,
    /// Residual variance collapsed onto [`SIGMA2_E_FLOOR`].
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedNer {
    pub params: NerParams,
    pub loglik: f64,
    pub effects: BTreeMap<i64, ConditionalEffect>,
    pub diagnostics: FitDiagnostics,
}

/// Weighted sufficient statistics of one area's sample.
#[derive(Debug, Clone)]
pub(crate) struct AreaStats {
    n: usize,
    /// sum v
    sv: f64,
    sum_log_v: f64,
    sx: DVector<f64>,
    sxx: DMatrix<f64>,
    sy: f64,
    sxy: DVector<f64>,
    syy: f64,
}

impl AreaStats {
    pub(crate) fn from_area(area: &AreaData, p: usize) -> Self {
        let mut s = Self {
            n: area.n(),
            sv: 0.0,
            sum_log_v: 0.0,
            sx: DVector::zeros(p),
            sxx: DMatrix::zeros(p, p),
            sy: 0.0,
            sxy: DVector::zeros(p),
            syy: 0.0,
        };
        for r in &area.sample {
            let v = r.variance_scale;
            s.sv += v;
            s.sum_log_v += v.ln();
            s.sy += v * r.y;
            s.syy += v * r.y * r.y;
            for a in 0..p {
                s.sx[a] += v * r.x[a];
                s.sxy[a] += v * r.x[a] * r.y;
                for b in 0..p {
                    s.sxx[(a, b)] += v * r.x[a] * r.x[b];
                }
            }
        }
        s
    }

    fn effect(&self, params: &NerParams) -> ConditionalEffect {
        if self.n == 0 || params.sigma2_u == 0.0 {
            return ConditionalEffect { mean: 0.0, variance: params.sigma2_u };
        }
        let gamma = params.sigma2_u / (params.sigma2_u + params.sigma2_e / self.sv);
        let resid_mean = (self.sy - self.sx.iter().zip(&params.beta).map(|(a, b)| a * b).sum::<f64>()) / self.sv;
        ConditionalEffect { mean: gamma * resid_mean, variance: params.sigma2_u * (1.0 - gamma) }
    }
}

pub(crate) struct Likelihood {
    stats: Vec<AreaStats>,
    p: usize,
    n_total: usize,
}

struct Profile {
    beta: DVector<f64>,
    loglik: f64,
}

impl Likelihood {
    pub(crate) fn new(data: &SampleDataset) -> Self {
        let p = data.n_covariates();
        let stats: Vec<AreaStats> = data.sampled_areas().map(|a| AreaStats::from_area(a, p)).collect();
        let n_total = stats.iter().map(|s| s.n).sum();
        Self { stats, p, n_total }
    }

    fn c(s: &AreaStats, s2u: f64, s2e: f64) -> f64 {
        s2u / (s2e + s2u * s.sv)
    }

    fn gls_beta(&self, s2u: f64, s2e: f64) -> Option<DVector<f64>> {
        let mut a = DMatrix::zeros(self.p, self.p);
        let mut b = DVector::zeros(self.p);
        for s in &self.stats {
            let c = Self::c(s, s2u, s2e);
            a += &s.sxx - &s.sx * s.sx.transpose() * c;
            b += &s.sxy - &s.sx * (c * s.sy);
        }
        a.cholesky().map(|ch| ch.solve(&b))
    }

    fn loglik_at(&self, beta: &DVector<f64>, s2u: f64, s2e: f64) -> f64 {
        let mut total = 0.0;
        for s in &self.stats {
            let c = Self::c(s, s2u, s2e);
            let quad_w = s.syy - 2.0 * beta.dot(&s.sxy) + (beta.transpose() * &s.sxx * beta)[0];
            let r_sum = s.sy - beta.dot(&s.sx);
            let quad = (quad_w - c * r_sum * r_sum) / s2e;
            let logdet = s.n as f64 * s2e.ln() - s.sum_log_v + (1.0 + s2u * s.sv / s2e).ln();
            total += logdet + quad;
        }
        -0.5 * total - 0.5 * self.n_total as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    fn profile(&self, s2u: f64, s2e: f64) -> Option<Profile> {
        let beta = self.gls_beta(s2u, s2e)?;
        let loglik = self.loglik_at(&beta, s2u, s2e);
        Some(Profile { beta, loglik })
    }

    /// Full log-likelihood at arbitrary parameters.
    pub(crate) fn loglik(&self, params: &NerParams) -> f64 {
        let beta = DVector::from_column_slice(&params.beta);
        self.loglik_at(&beta, params.sigma2_u, params.sigma2_e)
    }

    fn profile_log(&self, theta: &[f64]) -> f64 {
        let s2u = theta[0].exp();
        let s2e = theta[1].exp().max(SIGMA2_E_FLOOR);
        self.profile(s2u, s2e).map_or(f64::NEG_INFINITY, |p| p.loglik)
    }
}

/// Maximum-likelihood fit of the nested error regression model to the
/// sampled areas of `data`.
pub fn fit_ml(data: &SampleDataset) -> Result<FittedNer> {
    let p = data.n_covariates();
    let d = data.n_sampled_areas();
    if d < 2 {
        return Err(Error::Validation(format!("need at least 2 sampled areas, got {d}")));
    }
    let n = data.total_n();
    if n < p + 2 {
        return Err(Error::Validation(format!("need at least {} sampled units, got {n}", p + 2)));
    }
    let lik = Likelihood::new(data);

    // Weighted OLS start; also detects a singular design.
    let ols = lik
        .gls_beta(0.0, 1.0)
        .ok_or_else(|| Error::Estimation("design matrix is singular".into()))?;
    let rss: f64 = lik
        .stats
        .iter()
        .map(|s| s.syy - 2.0 * ols.dot(&s.sxy) + (ols.transpose() * &s.sxx * &ols)[0])
        .sum::<f64>()
        .max(0.0);
    let s2 = (rss / n as f64).max(SIGMA2_E_FLOOR);

    let boundary_fit = |lik: &Likelihood| -> (f64, Profile) {
        // sigma2_u = 0: weighted OLS, sigma2_e = RSS / n.
        let s2e = s2;
        let prof = lik.profile(0.0, s2e).expect("OLS design already checked");
        (s2e, prof)
    };

    let nm = NelderMead { max_iter: 500, rel_tol: 1e-10, initial_step: 1.0 };
    let objective = |t: &[f64]| -lik.profile_log(t);
    let start = [(0.5 * s2).ln(), (0.5 * s2).ln()];
    let min = nm.minimize(&start, objective);
    let mut theta = min.x.clone();
    let mut best = -min.value;

    // Newton polish with a finite-difference Hessian; only accepted steps that
    // improve the likelihood are kept.
    for _ in 0..20 {
        let (g, h) = grad_hess(&|t: &[f64]| lik.profile_log(t), &theta, 1e-4);
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        if !(det > 0.0) || !(h[0][0] < 0.0) {
            break;
        }
        let step = [
            -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
            -(-h[1][0] * g[0] + h[0][0] * g[1]) / det,
        ];
        let cand = [theta[0] + step[0], theta[1] + step[1]];
        let val = lik.profile_log(&cand);
        if val > best {
            let done = (val - best).abs() <= 1e-14 * best.abs().max(1.0);
            theta = cand.to_vec();
            best = val;
            if done {
                break;
            }
        } else {
            break;
        }
    }

    let (b_s2e, b_prof) = boundary_fit(&lik);
    let interior_s2u = theta[0].exp();
    let interior_s2e = theta[1].exp().max(SIGMA2_E_FLOOR);
    let use_boundary = b_prof.loglik >= best || interior_s2u < 1e-10 * interior_s2e;

    if !min.converged && !use_boundary {
        return Err(Error::NonConvergence {
            iterations: min.iterations,
            last: NerParams {
                beta: lik
                    .gls_beta(interior_s2u, interior_s2e)
                    .map(|b| b.iter().copied().collect())
                    .unwrap_or_default(),
                sigma2_u: interior_s2u,
                sigma2_e: interior_s2e,
            },
        });
    }

    let (s2u, s2e, prof) = if use_boundary {
        (0.0, b_s2e, b_prof)
    } else {
        let prof = lik
            .profile(interior_s2u, interior_s2e)
            .ok_or_else(|| Error::Estimation("GLS system became singular".into()))?;
        (interior_s2u, interior_s2e, prof)
    };

    let gradient_norm = if use_boundary {
        0.0
    } else {
        let (g, _) = grad_hess(&|t: &[f64]| lik.profile_log(t), &theta, 1e-5);
        g[0].hypot(g[1])
    };
    let params = NerParams { beta: prof.beta.iter().copied().collect(), sigma2_u: s2u, sigma2_e: s2e };
    let effects = effects_for(&params, data);
    Ok(FittedNer {
        params,
        loglik: prof.loglik,
        effects,
        diagnostics: FitDiagnostics {
            iterations: min.iterations,
            gradient_norm,
            boundary: use_boundary,
            degenerate: s2e <= SIGMA2_E_FLOOR * (1.0 + 1e-9),
        },
    })
}

fn grad_hess(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let at = |dx: f64, dy: f64| f(&[x[0] + dx, x[1] + dy]);
    let f0 = at(0.0, 0.0);
    let fpx = at(h, 0.0);
    let fmx = at(-h, 0.0);
    let fpy = at(0.0, h);
    let fmy = at(0.0, -h);
    let fpp = at(h, h);
    let fpm = at(h, -h);
    let fmp = at(-h, h);
    let fmm = at(-h, -h);
    let g = [(fpx - fmx) / (2.0 * h), (fpy - fmy) / (2.0 * h)];
    let hxx = (fpx - 2.0 * f0 + fmx) / (h * h);
    let hyy = (fpy - 2.0 * f0 + fmy) / (h * h);
    let hxy = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
    (g, [[hxx, hxy], [hxy, hyy]])
}

fn effects_for(params: &NerParams, data: &SampleDataset) -> BTreeMap<i64, ConditionalEffect> {
    let p = data.n_covariates();
    data.areas()
        .map(|a| (a.area_id, AreaStats::from_area(a, p).effect(params)))
        .collect()
}

impl FittedNer {
    /// Evaluates a fitted-model view at arbitrary parameters, with the
    /// conditional effects computed from `data`.
    pub fn from_params(params: NerParams, data: &SampleDataset) -> Self {
        let loglik = Likelihood::new(data).loglik(&params);
        let effects = effects_for(&params, data);
        Self {
            params,
            loglik,
            effects,
            diagnostics: FitDiagnostics { iterations: 0, gradient_norm: f64::NAN, boundary: false, degenerate: false },
        }
    }

    /// Conditional mean and variance of the area effect. Areas without
    /// sampled units get the prior `(0, sigma2_u)`.
    pub fn conditional_effect(&self, area_id: i64) -> ConditionalEffect {
        self.effects
            .get(&area_id)
            .copied()
            .unwrap_or(ConditionalEffect { mean: 0.0, variance: self.params.sigma2_u })
    }
}

/// Log-likelihood of the model at `params` for the sampled areas of `data`.
pub fn loglik(data: &SampleDataset, params: &NerParams) -> f64 {
    Likelihood::new(data).loglik(params)
}

/// Probability-integral-transform residuals, one per sampled unit in dataset
/// order. Approximately uniform under the model.
pub fn generalized_residuals(fit: &FittedNer, data: &SampleDataset) -> Vec<f64> {
    let std_normal = Normal::standard();
    let se = fit.params.sigma2_e.sqrt();
    data.sampled_areas()
        .flat_map(|a| {
            let u = fit.conditional_effect(a.area_id).mean;
            a.sample.iter().map(move |r| (r, u))
        })
        .map(|(r, u)| {
            let z = (r.y - fit.params.mean(&r.x) - u) / se * r.variance_scale.sqrt();
            std_normal.cdf(z)
        })
        .collect()
}

/// Generating model for synthetic finite populations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationDesign {
    /// Population size of each area.
    pub sizes: Vec<usize>,
    pub beta: Vec<f64>,
    pub sigma_u: f64,
    pub sigma_e: f64,
    /// Truncation point in standard deviations; `None` for plain normals.
    pub truncation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticArea {
    pub area_id: i64,
    /// Covariates including the intercept.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub u: f64,
    pub e: Vec<f64>,
}

/// Draws a standard normal, rejecting values outside `[-c, c]`.
pub fn truncated_standard_normal(rng: &mut Rng, bound: Option<f64>) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        match bound {
            Some(c) if z.abs() > c => continue,
            _ => return z,
        }
    }
}

/// Covariates `x ~ U(0,1)` (one non-intercept column), generated once from
/// `seed` and held fixed over Monte Carlo replicates.
pub fn simulate_covariates(sizes: &[usize], seed: u64) -> Vec<Vec<Vec<f64>>> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut r = rng::rng_for(seed, &[stream::SIM_COVARIATES, i as u64]);
            (0..n).map(|_| vec![1.0, r.random::<f64>()]).collect()
        })
        .collect()
}

/// Generates one finite population from the design with the given covariates.
/// Area ids are `1..=D`.
pub fn simulate_population(design: &PopulationDesign, x: &[Vec<Vec<f64>>], seed: u64) -> Vec<SyntheticArea> {
    assert_eq!(design.sizes.len(), x.len(), "covariates must match the design");
    x.iter()
        .enumerate()
        .map(|(i, xs)| {
            let mut r = rng::rng_for(seed, &[stream::SIM_POPULATION, i as u64]);
            let u = if design.sigma_u == 0.0 {
                0.0
            } else {
                design.sigma_u * truncated_standard_normal(&mut r, design.truncation)
            };
            let e: Vec<f64> = xs
                .iter()
                .map(|_| design.sigma_e * truncated_standard_normal(&mut r, design.truncation))
                .collect();
            let y = xs
                .iter()
                .zip(&e)
                .map(|(xv, ev)| xv.iter().zip(&design.beta).map(|(a, b)| a * b).sum::<f64>() + u + ev)
                .collect();
            SyntheticArea { area_id: i as i64 + 1, x: xs.clone(), y, u, e }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AreaData, PopulationUnit, UnitRecord};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    pub(crate) fn dataset_from(groups: &[Vec<(f64, f64)>]) -> SampleDataset {
        let areas = groups.iter().enumerate().map(|(i, g)| {
            let mut a = AreaData::new(i as i64 + 1);
            a.sample = g
                .iter()
                .enumerate()
                .map(|(j, &(x, y))| UnitRecord {
                    area_id: i as i64 + 1,
                    unit_id: j as i64,
                    y,
                    x: vec![1.0, x],
                    unit_weight: None,
                    variance_scale: 1.0,
                })
                .collect();
            a
        });
        SampleDataset::new(areas).unwrap()
    }

    fn intercept_only(groups: &[Vec<f64>]) -> SampleDataset {
        let areas = groups.iter().enumerate().map(|(i, g)| {
            let mut a = AreaData::new(i as i64 + 1);
            a.sample = g
                .iter()
                .enumerate()
                .map(|(j, &y)| UnitRecord {
                    area_id: i as i64 + 1,
                    unit_id: j as i64,
                    y,
                    x: vec![1.0],
                    unit_weight: None,
                    variance_scale: 1.0,
                })
                .collect();
            a
        });
        SampleDataset::new(areas).unwrap()
    }

    /// Balanced one-way random effects ML, closed form:
    /// mu = grand mean, sigma2_e = SSW / (D (n-1)), sigma2_u = SSB / (D n) - sigma2_e / n.
    fn balanced_ml_oracle(groups: &[Vec<f64>]) -> (f64, f64, f64) {
        let d = groups.len() as f64;
        let n = groups[0].len() as f64;
        let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / n).collect();
        let grand = means.iter().sum::<f64>() / d;
        let ssw: f64 = groups
            .iter()
            .zip(&means)
            .map(|(g, m)| g.iter().map(|y| (y - m).powi(2)).sum::<f64>())
            .sum();
        let ssb: f64 = means.iter().map(|m| n * (m - grand).powi(2)).sum();
        let s2e = ssw / (d * (n - 1.0));
        let s2u = ssb / (d * n) - s2e / n;
        (grand, s2u, s2e)
    }

    fn random_balanced(seed: u64, d: usize, n: usize, su: f64, se: f64) -> Vec<Vec<f64>> {
        let mut r = Rng::seed_from_u64(seed);
        (0..d)
            .map(|_| {
                let u = su * truncated_standard_normal(&mut r, None);
                (0..n).map(|_| 2.0 + u + se * truncated_standard_normal(&mut r, None)).collect()
            })
            .collect()
    }

    #[test]
    fn balanced_case_matches_closed_form() {
        for seed in 0..5 {
            let g = random_balanced(seed, 12, 6, 1.0, 0.7);
            let (mu, s2u, s2e) = balanced_ml_oracle(&g);
            assert!(s2u > 0.0, "oracle interior");
            let fit = fit_ml(&intercept_only(&g)).unwrap();
            assert_relative_eq!(fit.params.beta[0], mu, max_relative = 1e-7);
            assert_relative_eq!(fit.params.sigma2_u, s2u, max_relative = 1e-6);
            assert_relative_eq!(fit.params.sigma2_e, s2e, max_relative = 1e-6);
            assert!(!fit.diagnostics.boundary);
        }
    }

    #[test]
    fn constant_response_is_degenerate() {
        let g = vec![vec![3.0; 4]; 5];
        let fit = fit_ml(&intercept_only(&g)).unwrap();
        assert_relative_eq!(fit.params.beta[0], 3.0, epsilon = 1e-9);
        assert_eq!(fit.params.sigma2_u, 0.0);
        assert!(fit.diagnostics.degenerate);
        assert!(fit.diagnostics.boundary);
    }

    #[test]
    fn negative_between_variance_hits_boundary() {
        // area means identical, within spread only
        let g = vec![vec![0.0, 1.0, 2.0], vec![2.0, 1.0, 0.0], vec![1.0, 0.0, 2.0]];
        let fit = fit_ml(&intercept_only(&g)).unwrap();
        assert_eq!(fit.params.sigma2_u, 0.0);
        assert!(fit.diagnostics.boundary);
        assert_relative_eq!(fit.params.sigma2_e, 2.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn singular_design_is_an_error() {
        let d = dataset_from(&[vec![(0.5, 1.0), (0.5, 2.0)], vec![(0.5, 0.0), (0.5, 3.0)]]);
        assert!(matches!(fit_ml(&d), Err(Error::Estimation(_))));
    }

    #[test]
    fn too_few_areas() {
        let d = dataset_from(&[vec![(0.1, 1.0), (0.5, 2.0), (0.7, 1.0)]]);
        assert!(matches!(fit_ml(&d), Err(Error::Validation(_))));
    }

    #[test]
    fn local_maximum_and_permutation_invariance() {
        let mut r = Rng::seed_from_u64(11);
        let groups: Vec<Vec<(f64, f64)>> = (0..15)
            .map(|i| {
                let u = 0.4 * truncated_standard_normal(&mut r, None);
                (0..(3 + i % 4))
                    .map(|_| {
                        let x: f64 = r.random();
                        (x, 1.0 + 2.0 * x + u + 0.5 * truncated_standard_normal(&mut r, None))
                    })
                    .collect()
            })
            .collect();
        let data = dataset_from(&groups);
        let fit = fit_ml(&data).unwrap();
        for k in 0..50 {
            let mut pr = Rng::seed_from_u64(100 + k);
            let mut p = fit.params.clone();
            for b in &mut p.beta {
                *b += 0.01 * truncated_standard_normal(&mut pr, None);
            }
            p.sigma2_u *= (0.05 * truncated_standard_normal(&mut pr, None)).exp();
            p.sigma2_e *= (0.05 * truncated_standard_normal(&mut pr, None)).exp();
            assert!(loglik(&data, &p) <= fit.loglik + 1e-12);
        }
        // reversed areas and units, relabelled
        let rev: Vec<Vec<(f64, f64)>> = groups.iter().rev().map(|g| g.iter().rev().copied().collect()).collect();
        let fit2 = fit_ml(&dataset_from(&rev)).unwrap();
        for (a, b) in fit.params.beta.iter().zip(&fit2.params.beta) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((fit.params.sigma2_u - fit2.params.sigma2_u).abs() < 1e-8);
        assert!((fit.params.sigma2_e - fit2.params.sigma2_e).abs() < 1e-8);
    }

    #[test]
    fn conditional_effect_cases() {
        let data = dataset_from(&[vec![(0.0, 1.5)], vec![(0.0, 0.0), (1.0, 1.0)]]);
        // sigma2_u = 0
        let f = FittedNer::from_params(NerParams::new(vec![0.0, 1.0], 0.0, 1.0).unwrap(), &data);
        assert_eq!(f.conditional_effect(1), ConditionalEffect { mean: 0.0, variance: 0.0 });

        // one unit: bivariate normal conditioning of u on y = m + u + e
        let (s2u, s2e, beta0) = (0.7, 0.4, 0.2);
        let f = FittedNer::from_params(NerParams::new(vec![beta0, 1.0], s2u, s2e).unwrap(), &data);
        let ce = f.conditional_effect(1);
        let cov_uy = s2u;
        let var_y = s2u + s2e;
        assert_relative_eq!(ce.mean, cov_uy / var_y * (1.5 - beta0), max_relative = 1e-14);
        assert_relative_eq!(ce.variance, s2u - cov_uy * cov_uy / var_y, max_relative = 1e-14);

        // unsampled area falls back to the prior
        assert_eq!(f.conditional_effect(99), ConditionalEffect { mean: 0.0, variance: s2u });
    }

    #[test]
    fn conditional_effect_large_sample_limit() {
        let mut r = Rng::seed_from_u64(5);
        let n = 1_000_000;
        let ys: Vec<(f64, f64)> = (0..n).map(|_| (0.0, 0.3 + truncated_standard_normal(&mut r, None))).collect();
        let ybar = ys.iter().map(|p| p.1).sum::<f64>() / n as f64;
        let data = dataset_from(&[ys, vec![(0.0, 0.0)]]);
        let f = FittedNer::from_params(NerParams::new(vec![0.0, 0.0], 0.5, 1.0).unwrap(), &data);
        assert!((f.conditional_effect(1).mean - ybar).abs() < 1e-3);
    }

    #[test]
    fn variance_scale_weighting() {
        // with v, one unit behaves like sigma2_e / v
        let mut a = AreaData::new(1);
        a.sample = vec![UnitRecord { area_id: 1, unit_id: 1, y: 2.0, x: vec![1.0], unit_weight: None, variance_scale: 4.0 }];
        let mut b = AreaData::new(2);
        b.sample = vec![UnitRecord { area_id: 2, unit_id: 1, y: 0.0, x: vec![1.0], unit_weight: None, variance_scale: 1.0 }];
        let d = SampleDataset::new([a, b]).unwrap();
        let f = FittedNer::from_params(NerParams::new(vec![0.0], 1.0, 2.0).unwrap(), &d);
        let ce = f.conditional_effect(1);
        assert_relative_eq!(ce.mean, 1.0 / (1.0 + 0.5) * 2.0, max_relative = 1e-14);
        assert!(ce.variance >= 0.0 && ce.variance <= 1.0);
    }

    #[test]
    fn residual_cases() {
        let data = dataset_from(&[vec![(0.0, 0.0)], vec![(0.0, 1.96)]]);
        let f = FittedNer::from_params(NerParams::new(vec![0.0, 0.0], 0.0, 1.0).unwrap(), &data);
        let r = generalized_residuals(&f, &data);
        assert_relative_eq!(r[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(r[1], 0.975, epsilon = 1e-4);
    }

    #[test]
    fn truncated_population() {
        let design = PopulationDesign { sizes: vec![50; 40], beta: vec![5.0, 0.1], sigma_u: 0.3, sigma_e: 0.3, truncation: Some(2.5) };
        let x = simulate_covariates(&design.sizes, 1);
        let pop = simulate_population(&design, &x, 2);
        for a in &pop {
            assert!(a.u.abs() <= 2.5 * 0.3);
            assert!(a.e.iter().all(|e| e.abs() <= 2.5 * 0.3));
        }
        let zero = PopulationDesign { sigma_u: 0.0, ..design };
        assert!(simulate_population(&zero, &x, 3).iter().all(|a| a.u == 0.0));
        // covariates fixed across replicates
        assert_eq!(simulate_covariates(&[5, 5], 1), simulate_covariates(&[5, 5], 1));
    }

    #[test]
    fn truncated_normal_variance() {
        let std = Normal::standard();
        let c = 2.5;
        let phi = (-c * c / 2.0_f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let analytic = 1.0 - 2.0 * c * phi / (2.0 * std.cdf(c) - 1.0);
        let mut r = Rng::seed_from_u64(9);
        let k = 100_000;
        let z: Vec<f64> = (0..k).map(|_| truncated_standard_normal(&mut r, Some(c))).collect();
        let m = z.iter().sum::<f64>() / k as f64;
        let v = z.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (k - 1) as f64;
        assert!((v / analytic - 1.0).abs() < 0.02, "{v} vs {analytic}");
    }

    #[test]
    fn population_units_unused_by_fit() {
        let mut d = dataset_from(&[vec![(0.1, 1.0), (0.4, 1.3)], vec![(0.2, 0.5), (0.9, 2.0)], vec![(0.3, 0.1), (0.6, 0.9)]]);
        let base = fit_ml(&d).unwrap();
        let mut areas: Vec<AreaData> = d.areas().cloned().collect();
        areas[0].population = Some(
            areas[0]
                .sample
                .iter()
                .map(|r| PopulationUnit { unit_id: r.unit_id, x: r.x.clone(), variance_scale: 1.0, sampled: true })
                .chain(std::iter::once(PopulationUnit { unit_id: 99, x: vec![1.0, 0.5], variance_scale: 1.0, sampled: false }))
                .collect(),
        );
        d = SampleDataset::new(areas).unwrap();
        assert_eq!(fit_ml(&d).unwrap().params, base.params);
    }
}
