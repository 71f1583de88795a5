mod common;

use common::{mc_se, mean, var, Gaussian};
use ebpmse::ebp::{predict_area, EbpDraws};
use ebpmse::informative::ModelParams;
use ebpmse::intervals::naive_ci;
use ebpmse::model::{fit_ml, FittedNer, NerParams};
use ebpmse::mse::{bias_corrected_m1, bootstrap_refits, bootstrap_sample, mse_report, BootstrapReplicate};
use ebpmse::pipeline::{self, RunOptions};
use ebpmse::{AreaParameter, SampleDataset};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;

/// Analytic conditional mean and variance of the area mean under known
/// parameters.
fn mean_posterior(fit: &FittedNer, data: &SampleDataset, id: i64) -> (f64, f64) {
    let area = data.area(id).unwrap();
    let pop = area.population.as_ref().unwrap();
    let c = fit.conditional_effect(id);
    let big_n = pop.len() as f64;
    let ns: Vec<_> = pop.iter().filter(|u| !u.sampled).collect();
    let sum_s: f64 = area.sample.iter().map(|r| r.y).sum();
    let sum_ns: f64 = ns.iter().map(|u| fit.params.mean(&u.x) + c.mean).sum();
    let k = ns.len() as f64;
    let v_e: f64 = ns.iter().map(|u| fit.params.sigma2_e / u.variance_scale).sum();
    ((sum_s + sum_ns) / big_n, (k * k * c.variance + v_e) / (big_n * big_n))
}

fn one(fit: &FittedNer, data: &SampleDataset, id: i64, l: usize, seed: u64) -> EbpDraws {
    predict_area(fit, data, id, &[AreaParameter::Mean], l, seed).unwrap().pop().unwrap()
}

#[test]
fn mean_draws_match_analytic_moments() {
    let (data, _) = Gaussian::new(30, 5, 40).draw(3);
    let fit = fit_ml(&data).unwrap();
    // pooled over ten areas: sum of errors against the root sum of squared se
    let (mut err, mut se2) = (0.0, 0.0);
    for id in 1..=10 {
        let d = one(&fit, &data, id, 100_000, 11);
        let (m, v) = mean_posterior(&fit, &data, id);
        err += d.theta_hat() - m;
        se2 += mc_se(&d.draws).powi(2);
        let rel = var(&d.draws) / v - 1.0;
        assert!(rel.abs() < 0.03, "area {id}: variance off by {rel}");
    }
    let z = err / se2.sqrt();
    assert!(z.abs() < 3.0, "z = {z}");
}

#[test]
fn doubling_l_keeps_the_prediction() {
    let (data, _) = Gaussian::new(30, 5, 40).draw(4);
    let fit = fit_ml(&data).unwrap();
    for (id, s) in [(1, 1), (10, 2), (20, 3)] {
        for p in AreaParameter::standard_set() {
            let a = predict_area(&fit, &data, id, std::slice::from_ref(&p), 500, s).unwrap().pop().unwrap();
            let b = predict_area(&fit, &data, id, std::slice::from_ref(&p), 1000, s).unwrap().pop().unwrap();
            let pa = a.prediction();
            assert!((pa.theta_hat - b.theta_hat()).abs() <= 2.0 * pa.mc_se, "{p} area {id}");
        }
    }
}

#[test]
fn predictor_mse_at_true_parameters_matches_leading_term() {
    let g = Gaussian::new(5, 5, 50);
    let x = g.covariates(77);
    let truth = NerParams::new(g.beta.to_vec(), g.sigma_u.powi(2), g.sigma_e.powi(2)).unwrap();
    let l = 200;
    let pairs: Vec<(f64, f64)> = (0..2000u64)
        .into_par_iter()
        .flat_map_iter(|s| {
            let pop = g.population(&x, 9000 + s);
            let data = common::sample_first(&pop, g.n, true);
            let fit = FittedNer::from_params(truth.clone(), &data);
            pop.iter()
                .map(|a| {
                    let d = one(&fit, &data, a.area_id, l, s);
                    let err = d.theta_hat() - mean(&a.y);
                    (err * err, mean_posterior(&fit, &data, a.area_id).1)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mse = mean(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let lead = mean(&pairs.iter().map(|p| p.1).collect::<Vec<_>>()) * (1.0 + 1.0 / l as f64);
    assert!((mse / lead - 1.0).abs() < 0.05, "mse {mse} leading {lead}");
}

#[test]
fn bootstrap_regenerates_sampled_units_only() {
    let (data, _) = Gaussian::new(20, 5, 30).draw(5);
    let fit = fit_ml(&data).unwrap();
    let boot = bootstrap_sample(&fit, &data, 3, 1);
    assert_eq!(boot.records().count(), data.total_n());
    for (a, b) in data.areas().zip(boot.areas()) {
        assert_eq!(a.population, b.population);
        assert_eq!(a.n(), b.n());
        assert!(a.sample.iter().zip(&b.sample).all(|(r, s)| r.x == s.x && r.y != s.y));
    }
}

#[test]
fn bootstrap_intercepts_center_on_the_estimate() {
    let (data, _) = Gaussian::new(40, 5, 5).draw(6);
    let fit = fit_ml(&data).unwrap();
    let fits = bootstrap_refits(&fit, &data, 500, 12).unwrap();
    let b0: Vec<f64> = fits.fits.iter().map(|(_, f)| f.params.beta[0]).collect();
    let z = (mean(&b0) - fit.params.beta[0]) / mc_se(&b0);
    assert!(z.abs() < 3.0, "z = {z}");
}

#[test]
fn standard_bootstrap_agrees_with_no_correction() {
    let (data, _) = Gaussian::new(100, 5, 20).draw(8);
    let opts = RunOptions { l: 100, b: 500, seed: 3, standard: true, ..RunOptions::default() };
    let reports = pipeline::mse(&data, &opts).unwrap();
    let s = mean(&reports.iter().map(|r| r.mse_standard.unwrap()).collect::<Vec<_>>());
    let nobc = mean(&reports.iter().map(|r| r.mse_nobc).collect::<Vec<_>>());
    assert!((s / nobc - 1.0).abs() < 0.20, "S {s} noBC {nobc}");
}

fn report_inputs(draws: Vec<f64>, reps: Vec<(f64, Vec<f64>)>) -> (EbpDraws, Vec<BootstrapReplicate>) {
    let psi = ModelParams::noninformative(NerParams::new(vec![0.0], 1.0, 1.0).unwrap());
    let base = EbpDraws { area_id: 1, parameter: "mean".into(), draws, params_used: psi.clone(), seed: 0 };
    let reps = reps
        .into_iter()
        .enumerate()
        .map(|(b, (m, d))| BootstrapReplicate {
            b,
            psi_hat_b: psi.clone(),
            theta_hat_b: m,
            m1_b: ebpmse::mse::m1_hat(&d),
            draws: d,
        })
        .collect();
    (base, reps)
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

proptest! {
    #[test]
    fn comp_and_hm_branch_together(m1 in 0.0..10.0f64, bar in 0.0..10.0f64) {
        prop_assume!(m1 > 0.0 || bar > 0.0);
        let c = bias_corrected_m1(m1, bar);
        prop_assert_eq!(c.comp == c.add, m1 >= bar);
        prop_assert_eq!(c.hm == c.add, m1 >= bar);
    }

    #[test]
    fn report_ignores_draw_and_replicate_order(
        draws in prop::collection::vec(-5.0..5.0f64, 2..40),
        reps in prop::collection::vec((-5.0..5.0f64, prop::collection::vec(-5.0..5.0f64, 2..10)), 2..12),
        seed in any::<u64>(),
    ) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (base, r) = report_inputs(draws.clone(), reps.clone());
        let (mut d2, mut reps2) = (draws, reps);
        d2.shuffle(&mut rng);
        reps2.shuffle(&mut rng);
        let (base2, r2) = report_inputs(d2, reps2);
        let (a, b) = (mse_report(&base, &r, None), mse_report(&base2, &r2, None));
        for (x, y) in [
            (a.theta_hat, b.theta_hat), (a.m1, b.m1), (a.m2, b.m2), (a.mse_nobc, b.mse_nobc),
            (a.mse_add, b.mse_add), (a.mse_mult, b.mse_mult), (a.mse_comp, b.mse_comp), (a.mse_hm, b.mse_hm),
        ] {
            prop_assert!(close(x, y), "{} vs {}", x, y);
        }
        let (ca, cb) = (naive_ci(&base, 0.1).unwrap(), naive_ci(&base2, 0.1).unwrap());
        prop_assert_eq!((ca.lower, ca.upper), (cb.lower, cb.upper));
    }
}
