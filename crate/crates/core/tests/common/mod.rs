#![allow(dead_code)]

use ebpmse::data::{AreaData, PopulationUnit, SampleDataset, UnitRecord};
use ebpmse::model::{simulate_covariates, simulate_population, PopulationDesign, SyntheticArea};

/// Gaussian nested-error population (no truncation) with `x ~ U(0,1)`; the
/// first `n` units of every area are sampled.
pub struct Gaussian {
    pub areas: usize,
    pub n: usize,
    pub big_n: usize,
    pub beta: [f64; 2],
    pub sigma_u: f64,
    pub sigma_e: f64,
}

impl Gaussian {
    pub fn new(areas: usize, n: usize, big_n: usize) -> Self {
        Self { areas, n, big_n, beta: [5.0, 0.1], sigma_u: 0.3, sigma_e: 0.3 }
    }

    pub fn covariates(&self, seed: u64) -> Vec<Vec<Vec<f64>>> {
        simulate_covariates(&vec![self.big_n; self.areas], seed)
    }

    pub fn population(&self, x: &[Vec<Vec<f64>>], seed: u64) -> Vec<SyntheticArea> {
        let design = PopulationDesign {
            sizes: vec![self.big_n; self.areas],
            beta: self.beta.to_vec(),
            sigma_u: self.sigma_u,
            sigma_e: self.sigma_e,
            truncation: None,
        };
        simulate_population(&design, x, seed)
    }

    pub fn draw(&self, seed: u64) -> (SampleDataset, Vec<SyntheticArea>) {
        let x = self.covariates(seed ^ 0x5eed);
        let pop = self.population(&x, seed);
        (sample_first(&pop, self.n, true), pop)
    }
}

/// Dataset sampling the first `n` units of every area, optionally with the
/// full population frame.
pub fn sample_first(pop: &[SyntheticArea], n: usize, frame: bool) -> SampleDataset {
    let areas = pop.iter().map(|a| {
        let mut ad = AreaData::new(a.area_id);
        for j in 0..n.min(a.y.len()) {
            ad.sample.push(UnitRecord {
                area_id: a.area_id,
                unit_id: j as i64,
                y: a.y[j],
                x: a.x[j].clone(),
                unit_weight: None,
                variance_scale: 1.0,
            });
        }
        if frame {
            ad.population = Some(
                a.x.iter()
                    .enumerate()
                    .map(|(j, x)| PopulationUnit { unit_id: j as i64, x: x.clone(), variance_scale: 1.0, sampled: j < n })
                    .collect(),
            );
        }
        ad
    });
    SampleDataset::new(areas).expect("valid synthetic dataset")
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-pass sample variance.
pub fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

pub fn mc_se(v: &[f64]) -> f64 {
    (var(v) / v.len() as f64).sqrt()
}

/// Replicate `m` of the informative design with `N_i = big_n`.
pub fn informative(r_sigma: f64, big_n: usize, seed: u64, m: usize) -> ebpmse::sim::SimReplicate {
    use ebpmse::sim::{Design, SimConfig, INFORMATIVE_AREAS};
    let mut c = SimConfig::new(Design::Informative { r_sigma });
    c.population_size = big_n;
    c.seed = seed;
    let x = simulate_covariates(&vec![big_n; INFORMATIVE_AREAS], seed);
    ebpmse::sim::generate_replicate(&c, &x, m).expect("replicate")
}
