//! Unit-level survey data: sampled records plus the population covariate frame.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sampled unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub area_id: i64,
    pub unit_id: i64,
    /// Response on the model scale.
    pub y: f64,
    /// Covariates, intercept first.
    pub x: Vec<f64>,
    pub unit_weight: Option<f64>,
    /// Divisor `v` of the unit error variance, `e ~ N(0, sigma2_e / v)`.
    pub variance_scale: f64,
}

/// One unit of the population frame. Sampled units carry `sampled = true`
/// and must have a matching [`UnitRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationUnit {
    pub unit_id: i64,
    pub x: Vec<f64>,
    pub variance_scale: f64,
    pub sampled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaData {
    pub area_id: i64,
    pub sample: Vec<UnitRecord>,
    pub population: Option<Vec<PopulationUnit>>,
    pub area_weight: Option<f64>,
}

impl AreaData {
    pub fn new(area_id: i64) -> Self {
        Self { area_id, sample: Vec::new(), population: None, area_weight: None }
    }

    pub fn is_sampled(&self) -> bool {
        !self.sample.is_empty()
    }

    pub fn n(&self) -> usize {
        self.sample.len()
    }

    pub fn population_size(&self) -> Option<usize> {
        self.population.as_ref().map(Vec::len)
    }

    pub fn population(&self) -> Result<&[PopulationUnit]> {
        self.population.as_deref().ok_or(Error::MissingPopulation(self.area_id))
    }

    /// Population units that were not sampled, in frame order.
    pub fn nonsampled(&self) -> Result<impl Iterator<Item = &PopulationUnit>> {
        Ok(self.population()?.iter().filter(|u| !u.sampled))
    }
}

/// A validated dataset. Areas are kept ordered by id and units by unit id,
/// so every downstream computation is independent of input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDataset {
    areas: BTreeMap<i64, AreaData>,
    n_covariates: usize,
}

impl SampleDataset {
    pub fn new(areas: impl IntoIterator<Item = AreaData>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut p: Option<usize> = None;
        for mut area in areas {
            let id = area.area_id;
            area.sample.sort_by_key(|r| r.unit_id);
            if let Some(pop) = area.population.as_mut() {
                pop.sort_by_key(|u| u.unit_id);
            }
            let mut check_x = |len: usize| -> Result<()> {
                match p {
                    None => {
                        p = Some(len);
                        Ok(())
                    }
                    Some(q) if q == len => Ok(()),
                    Some(q) => Err(Error::Validation(format!(
                        "area {id}: covariate vector of length {len}, expected {q}"
                    ))),
                }
            };
            let mut seen = BTreeSet::new();
            for r in &area.sample {
                if r.area_id != id {
                    return Err(Error::Validation(format!(
                        "unit {} filed under area {id} but tagged area {}",
                        r.unit_id, r.area_id
                    )));
                }
                if !seen.insert(r.unit_id) {
                    return Err(Error::Validation(format!("duplicate unit ({id}, {})", r.unit_id)));
                }
                check_x(r.x.len())?;
                if !(r.variance_scale > 0.0) || !r.variance_scale.is_finite() {
                    return Err(Error::Validation(format!(
                        "unit ({id}, {}): variance scale must be positive",
                        r.unit_id
                    )));
                }
                if let Some(w) = r.unit_weight {
                    if !(w > 0.0) {
                        return Err(Error::Validation(format!(
                            "unit ({id}, {}): weight must be positive",
                            r.unit_id
                        )));
                    }
                }
                if !r.y.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "unit ({id}, {}): non-finite value",
                        r.unit_id
                    )));
                }
            }
            if let Some(w) = area.area_weight {
                if !(w > 0.0) {
                    return Err(Error::Validation(format!("area {id}: area weight must be positive")));
                }
            }
            if let Some(pop) = &area.population {
                let mut pop_ids = BTreeSet::new();
                for u in pop {
                    if !pop_ids.insert(u.unit_id) {
                        return Err(Error::Validation(format!(
                            "duplicate population unit ({id}, {})",
                            u.unit_id
                        )));
                    }
                    check_x(u.x.len())?;
                    if !(u.variance_scale > 0.0) {
                        return Err(Error::Validation(format!(
                            "unit ({id}, {}): variance scale must be positive",
                            u.unit_id
                        )));
                    }
                    if u.sampled != seen.contains(&u.unit_id) {
                        return Err(Error::Validation(format!(
                            "unit ({id}, {}): sampling flag disagrees with the sample records",
                            u.unit_id
                        )));
                    }
                    if u.sampled {
                        let k = area.sample.binary_search_by_key(&u.unit_id, |r| r.unit_id).expect("flag checked");
                        let r = &area.sample[k];
                        if r.x != u.x || r.variance_scale != u.variance_scale {
                            return Err(Error::Validation(format!(
                                "unit ({id}, {}): frame covariates differ from the sample record",
                                u.unit_id
                            )));
                        }
                    }
                }
                if seen.iter().any(|uid| !pop_ids.contains(uid)) {
                    return Err(Error::Validation(format!(
                        "area {id}: sampled unit missing from the population frame"
                    )));
                }
            }
            if area.sample.is_empty() && area.population.is_none() {
                return Err(Error::Validation(format!("area {id} has neither sample nor population")));
            }
            if map.insert(id, area).is_some() {
                return Err(Error::Validation(format!("duplicate area {id}")));
            }
        }
        let n_covariates =
            p.ok_or_else(|| Error::Validation("dataset contains no units".into()))?;
        Ok(Self { areas: map, n_covariates })
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn areas(&self) -> impl Iterator<Item = &AreaData> {
        self.areas.values()
    }

    pub fn area(&self, id: i64) -> Result<&AreaData> {
        self.areas.get(&id).ok_or(Error::UnknownArea(id))
    }

    pub fn area_ids(&self) -> Vec<i64> {
        self.areas.keys().copied().collect()
    }

    pub fn sampled_areas(&self) -> impl Iterator<Item = &AreaData> {
        self.areas.values().filter(|a| a.is_sampled())
    }

    pub fn n_sampled_areas(&self) -> usize {
        self.sampled_areas().count()
    }

    pub fn total_n(&self) -> usize {
        self.areas.values().map(AreaData::n).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &UnitRecord> {
        self.areas.values().flat_map(|a| a.sample.iter())
    }

    /// Same design and frame, new responses for the sampled units, visited in
    /// dataset order.
    pub fn with_responses(&self, mut y: impl FnMut(&UnitRecord) -> f64) -> Self {
        let mut out = self.clone();
        for area in out.areas.values_mut() {
            for r in &mut area.sample {
                r.y = y(r);
            }
        }
        out
    }

    /// Keeps only the areas for which `keep` holds.
    pub fn filter_areas(&self, keep: impl Fn(&AreaData) -> bool) -> Self {
        Self {
            areas: self.areas.iter().filter(|(_, a)| keep(a)).map(|(k, a)| (*k, a.clone())).collect(),
            n_covariates: self.n_covariates,
        }
    }
}
