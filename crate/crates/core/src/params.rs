//! Area parameters: functionals `h(y_1, ..., y_N)` of a full area population.
//!
//! `Mean` works on the model scale; `ExpMean`, `PovertyGap` and `Gini` work on
//! `exp(y)` (the model being fitted to log incomes or similar).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

/// User-supplied functional.
#[derive(Clone)]
pub struct CustomFn {
    pub name: String,
    pub f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl fmt::Debug for CustomFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomFn({})", self.name)
    }
}

#[derive(Debug, Clone)]
pub enum AreaParameter {
    Mean,
    ExpMean,
    Quantile(f64),
    PovertyGap(f64),
    Gini,
    Custom(CustomFn),
}

impl AreaParameter {
    pub fn quantile(p: f64) -> Result<Self> {
        if p > 0.0 && p < 1.0 {
            Ok(Self::Quantile(p))
        } else {
            Err(Error::Validation(format!("quantile level must lie in (0,1), got {p}")))
        }
    }

    pub fn poverty_gap(z: f64) -> Result<Self> {
        if z > 0.0 && z.is_finite() {
            Ok(Self::PovertyGap(z))
        } else {
            Err(Error::Validation(format!("poverty line must be positive, got {z}")))
        }
    }

    pub fn custom(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::Custom(CustomFn { name: name.into(), f: Arc::new(f) })
    }

    /// The six functionals of the simulation studies, poverty line 155.
    pub fn standard_set() -> Vec<Self> {
        vec![
            Self::Mean,
            Self::ExpMean,
            Self::Quantile(0.25),
            Self::Quantile(0.75),
            Self::PovertyGap(155.0),
            Self::Gini,
        ]
    }

    /// Evaluates the functional on a complete area population.
    pub fn eval(&self, values: &[f64]) -> Result<f64> {
        if values.is_empty() {
            return Err(Error::Validation("area parameter needs at least one value".into()));
        }
        match self {
            Self::Mean => Ok(mean(values)),
            Self::ExpMean => Ok(values.iter().map(|y| y.exp()).sum::<f64>() / values.len() as f64),
            Self::Quantile(p) => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                Ok(sorted_quantile(&v, *p))
            }
            Self::PovertyGap(z) => Ok(poverty_gap(values, *z)),
            Self::Gini => {
                let mut v: Vec<f64> = values.iter().map(|y| y.exp()).collect();
                v.sort_by(f64::total_cmp);
                gini_sorted(&v)
            }
            Self::Custom(c) => Ok((c.f)(values)),
        }
    }

    /// Short stable label used in reports.
    pub fn label(&self) -> String {
        match self {
            Self::Mean => "mean".into(),
            Self::ExpMean => "expmean".into(),
            Self::Quantile(p) => format!("quantile:{p}"),
            Self::PovertyGap(z) => format!("pg:{z}"),
            Self::Gini => "gini".into(),
            Self::Custom(c) => format!("custom:{}", c.name),
        }
    }
}

impl fmt::Display for AreaParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for AreaParameter {
    type Err = Error;

    /// Parses `mean`, `expmean`, `quantile:<p>`, `pg:<z>` or `gini`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h.trim(), Some(a.trim())),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<f64> {
            a.ok_or_else(|| Error::Validation(format!("parameter '{s}' needs a numeric argument")))?
                .parse::<f64>()
                .map_err(|_| Error::Validation(format!("bad numeric argument in '{s}'")))
        };
        match head.to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "expmean" | "exp" => Ok(Self::ExpMean),
            "quantile" | "q" => Self::quantile(num(arg)?),
            "pg" | "poverty_gap" => Self::poverty_gap(num(arg)?),
            "gini" => Ok(Self::Gini),
            _ => Err(Error::Validation(format!("unknown area parameter '{s}'"))),
        }
    }
}

/// Sorted values and sorted incomes of one population, computed at most once
/// and shared by every functional evaluated on it.
#[derive(Debug, Default)]
pub(crate) struct EvalCache {
    sorted: Vec<f64>,
    incomes: Vec<f64>,
    have_sorted: bool,
    have_incomes: bool,
}

impl EvalCache {
    /// Forgets the previous population.
    pub(crate) fn clear(&mut self) {
        self.have_sorted = false;
        self.have_incomes = false;
    }

    fn sorted(&mut self, values: &[f64]) -> &[f64] {
        if !self.have_sorted {
            self.sorted.clear();
            self.sorted.extend_from_slice(values);
            self.sorted.sort_unstable_by(f64::total_cmp);
            self.have_sorted = true;
        }
        &self.sorted
    }

    fn incomes(&mut self, values: &[f64]) -> &[f64] {
        if !self.have_incomes {
            self.sorted(values);
            self.incomes.clear();
            self.incomes.extend(self.sorted.iter().map(|y| y.exp()));
            self.have_incomes = true;
        }
        &self.incomes
    }

    /// Evaluates `p` on `values`, which must be the population seen since the
    /// last [`EvalCache::clear`].
    pub(crate) fn eval(&mut self, p: &AreaParameter, values: &[f64]) -> Result<f64> {
        if values.is_empty() {
            return Err(Error::Validation("area parameter needs at least one value".into()));
        }
        match p {
            AreaParameter::Quantile(q) => Ok(sorted_quantile(self.sorted(values), *q)),
            AreaParameter::ExpMean => {
                let inc = self.incomes(values);
                Ok(inc.iter().sum::<f64>() / inc.len() as f64)
            }
            AreaParameter::PovertyGap(z) => {
                let inc = self.incomes(values);
                Ok(inc.iter().map(|&a| if a < *z { (z - a) / z } else { 0.0 }).sum::<f64>() / inc.len() as f64)
            }
            AreaParameter::Gini => gini_sorted(self.incomes(values)),
            _ => p.eval(values),
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Quantile of sorted data with `j = floor(N p + 1 - p)` and
/// `w = N p + 1 - p - j`, i.e. `(1 - w) y_[j] + w y_[j+1]` (1-based order
/// statistics). Accepts `p` in `[0, 1]`.
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = n as f64 * p + 1.0 - p;
    let j = h.floor();
    let w = h - j;
    let j = (j as usize).clamp(1, n);
    let lo = sorted[j - 1];
    if j >= n || w == 0.0 {
        lo
    } else {
        let hi = sorted[j];
        (lo + w * (hi - lo)).clamp(lo, hi)
    }
}

fn poverty_gap(values: &[f64], z: f64) -> f64 {
    values
        .iter()
        .map(|y| {
            let inc = y.exp();
            if inc < z { (z - inc) / z } else { 0.0 }
        })
        .sum::<f64>()
        / values.len() as f64
}

/// Gini coefficient of sorted nonnegative incomes through the rank identity
/// `sum_k sum_l |a_k - a_l| = 2 sum_i (2i - N - 1) a_(i)`. The rank weights sum
/// to zero, so incomes are shifted by the minimum first; equal incomes then
/// give exactly zero.
fn gini_sorted(incomes: &[f64]) -> Result<f64> {
    let n = incomes.len() as f64;
    let total: f64 = incomes.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedValue("Gini coefficient of an all-zero income vector".into()));
    }
    let weighted: f64 = incomes
        .iter()
        .enumerate()
        .map(|(i, a)| (2.0 * (i as f64 + 1.0) - n - 1.0) * (a - incomes[0]))
        .sum();
    // double sum / (2 N^2 mean) = 2 * weighted / (2 N total)
    Ok((weighted / (n * total)).max(0.0))
}
