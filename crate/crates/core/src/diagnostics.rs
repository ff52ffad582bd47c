//! Covariate balance (standardized mean differences), balance tables,
//! propensity score distribution summaries and quantile stratification.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Dataset, Region, ZipRecord, COVARIATE_NAMES, N_COVARIATES};
use crate::exposure::Classification;
use crate::matching::{MatchedSet, PsUnit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("each group needs at least 2 values (got {treated} and {control})")]
    InsufficientData { treated: usize, control: usize },
    #[error("pooled SD is zero but group means differ ({0} vs {1})")]
    ZeroPooledSd(f64, f64),
    #[error("need at least k = {k} units, got {n}")]
    InsufficientUnits { n: usize, k: usize },
    #[error("propensity score quantiles are degenerate; stratum {0} would be empty")]
    DegenerateQuantiles(usize),
    #[error("no exposure label for zip `{0}`")]
    MissingAssignment(String),
    #[error("zip `{0}` in matched set is not in the dataset")]
    UnknownZip(String),
    #[error("io: {0}")]
    Io(String),
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smd {
    pub value: f64,
    /// Both groups had zero variance and equal means; `value` is 0.
    pub zero_pooled_sd: bool,
}

/// `(mean_t - mean_c) / sqrt((s_t^2 + s_c^2) / 2)`, n-1 sample variances.
pub fn smd(treated: &[f64], control: &[f64]) -> Result<Smd, DiagnosticsError> {
    if treated.len() < 2 || control.len() < 2 {
        return Err(DiagnosticsError::InsufficientData {
            treated: treated.len(),
            control: control.len(),
        });
    }
    let (mt, vt) = mean_var(treated);
    let (mc, vc) = mean_var(control);
    let pooled = ((vt + vc) / 2.0).sqrt();
    if pooled == 0.0 {
        if mt == mc {
            return Ok(Smd { value: 0.0, zero_pooled_sd: true });
        }
        return Err(DiagnosticsError::ZeroPooledSd(mt, mc));
    }
    Ok(Smd {
        value: (mt - mc) / pooled,
        zero_pooled_sd: false,
    })
}

/// A per-record quantity whose balance is tabulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variable {
    Covariate(usize),
    Pm25,
    CoalInfluence,
    Latitude,
    Longitude,
}

impl Variable {
    pub fn name(self) -> &'static str {
        match self {
            Variable::Covariate(i) => COVARIATE_NAMES[i],
            Variable::Pm25 => "pm25",
            Variable::CoalInfluence => "coal_influence",
            Variable::Latitude => "latitude",
            Variable::Longitude => "longitude",
        }
    }

    pub fn value(self, r: &ZipRecord) -> f64 {
        match self {
            Variable::Covariate(i) => r.covariates[i],
            Variable::Pm25 => r.pm25,
            Variable::CoalInfluence => r.coal_influence,
            Variable::Latitude => r.latitude,
            Variable::Longitude => r.longitude,
        }
    }

    pub fn is_covariate(self) -> bool {
        matches!(self, Variable::Covariate(_))
    }
}

/// The propensity score covariates, in model order.
pub fn covariate_variables() -> Vec<Variable> {
    (0..N_COVARIATES).map(Variable::Covariate).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub mean_treated: f64,
    pub sd_treated: f64,
    pub mean_control: f64,
    pub sd_control: f64,
    pub smd: f64,
}

fn summarize(t: &[f64], c: &[f64]) -> Result<GroupSummary, DiagnosticsError> {
    let s = smd(t, c)?;
    let (mt, vt) = mean_var(t);
    let (mc, vc) = mean_var(c);
    Ok(GroupSummary {
        mean_treated: mt,
        sd_treated: vt.sqrt(),
        mean_control: mc,
        sd_control: vc.sqrt(),
        smd: s.value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub variable: String,
    pub is_covariate: bool,
    pub raw: GroupSummary,
    pub matched: Option<GroupSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceTable {
    pub region: Option<Region>,
    pub n_treated: usize,
    pub n_control: usize,
    pub matched_n_treated: Option<usize>,
    pub matched_n_control: Option<usize>,
    pub rows: Vec<BalanceRow>,
}

impl BalanceTable {
    pub fn row(&self, variable: &str) -> Option<&BalanceRow> {
        self.rows.iter().find(|r| r.variable == variable)
    }

    pub fn max_abs_raw_smd(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.is_covariate)
            .map(|r| r.raw.smd.abs())
            .fold(0.0, f64::max)
    }

    /// Largest matched |SMD| over covariate rows, `None` without a matched set.
    pub fn max_abs_matched_smd(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.is_covariate)
            .map(|r| r.matched.map(|m| m.smd.abs()))
            .try_fold(0.0, |acc, v| v.map(|v| f64::max(acc, v)))
    }

    /// Group means, SDs and SMDs, raw then matched.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), DiagnosticsError> {
        let mut w = csv::Writer::from_writer(sink);
        let io = |e: csv::Error| DiagnosticsError::Io(e.to_string());
        w.write_record([
            "variable",
            "raw_mean_treated",
            "raw_sd_treated",
            "raw_mean_control",
            "raw_sd_control",
            "raw_smd",
            "matched_mean_treated",
            "matched_sd_treated",
            "matched_mean_control",
            "matched_sd_control",
            "matched_smd",
        ])
        .map_err(io)?;
        for r in &self.rows {
            let mut rec = vec![
                r.variable.clone(),
                r.raw.mean_treated.to_string(),
                r.raw.sd_treated.to_string(),
                r.raw.mean_control.to_string(),
                r.raw.sd_control.to_string(),
                r.raw.smd.to_string(),
            ];
            match &r.matched {
                Some(m) => rec.extend([m.mean_treated, m.sd_treated, m.mean_control, m.sd_control, m.smd].map(|v| v.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), 5)),
            }
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| DiagnosticsError::Io(e.to_string()))
    }

    /// Love-plot data: `covariate, raw_smd, matched_smd`.
    pub fn write_love_plot<W: Write>(&self, sink: W) -> Result<(), DiagnosticsError> {
        let mut w = csv::Writer::from_writer(sink);
        let io = |e: csv::Error| DiagnosticsError::Io(e.to_string());
        w.write_record(["covariate", "raw_smd", "matched_smd"]).map_err(io)?;
        for r in self.rows.iter().filter(|r| r.is_covariate) {
            let matched = r.matched.map(|m| m.smd.to_string()).unwrap_or_default();
            w.write_record([r.variable.clone(), r.raw.smd.to_string(), matched])
                .map_err(io)?;
        }
        w.flush().map_err(|e| DiagnosticsError::Io(e.to_string()))
    }
}

/// Raw (and, given a matched set, matched) balance for `variables`.
pub fn balance_table(
    ds: &Dataset,
    assignment: &Classification,
    matched: Option<&MatchedSet>,
    variables: &[Variable],
) -> Result<BalanceTable, DiagnosticsError> {
    let mut treated = Vec::new();
    let mut control = Vec::new();
    for r in ds.records() {
        let label = assignment
            .label_of(&r.zip_id)
            .ok_or_else(|| DiagnosticsError::MissingAssignment(r.zip_id.clone()))?;
        if label.is_treated() {
            treated.push(r);
        } else {
            control.push(r);
        }
    }
    let matched_groups = match matched {
        Some(m) => {
            let lookup = |id: &str| ds.get(id).ok_or_else(|| DiagnosticsError::UnknownZip(id.to_string()));
            let t: Vec<&ZipRecord> = m.treated_ids().map(lookup).collect::<Result<_, _>>()?;
            let c: Vec<&ZipRecord> = m.control_ids().map(lookup).collect::<Result<_, _>>()?;
            Some((t, c))
        }
        None => None,
    };
    let values = |group: &[&ZipRecord], v: Variable| group.iter().map(|r| v.value(r)).collect::<Vec<f64>>();
    let rows = variables
        .iter()
        .map(|&v| {
            let raw = summarize(&values(&treated, v), &values(&control, v))?;
            let matched = match &matched_groups {
                Some((t, c)) => Some(summarize(&values(t, v), &values(c, v))?),
                None => None,
            };
            Ok(BalanceRow {
                variable: v.name().to_string(),
                is_covariate: v.is_covariate(),
                raw,
                matched,
            })
        })
        .collect::<Result<Vec<_>, DiagnosticsError>>()?;
    let regions: HashSet<Region> = ds.records().iter().map(|r| r.region).collect();
    Ok(BalanceTable {
        region: if regions.len() == 1 { regions.into_iter().next() } else { None },
        n_treated: treated.len(),
        n_control: control.len(),
        matched_n_treated: matched_groups.as_ref().map(|(t, _)| t.len()),
        matched_n_control: matched_groups.as_ref().map(|(_, c)| c.len()),
        rows,
    })
}

/// Per-zip covariate vectors, for repeated balance checks on candidate matchings.
#[derive(Debug, Clone, Default)]
pub struct CovariateTable {
    pub names: Vec<String>,
    rows: HashMap<String, Vec<f64>>,
}

impl CovariateTable {
    pub fn from_dataset(ds: &Dataset, variables: &[Variable]) -> Self {
        CovariateTable {
            names: variables.iter().map(|v| v.name().to_string()).collect(),
            rows: ds
                .records()
                .iter()
                .map(|r| (r.zip_id.clone(), variables.iter().map(|v| v.value(r)).collect()))
                .collect(),
        }
    }

    pub fn insert(&mut self, zip_id: impl Into<String>, values: Vec<f64>) {
        self.rows.insert(zip_id.into(), values);
    }

    /// Matched-sample SMD per variable.
    pub fn matched_smds(&self, set: &MatchedSet) -> Result<Vec<f64>, DiagnosticsError> {
        let get = |id: &str| self.rows.get(id).ok_or_else(|| DiagnosticsError::UnknownZip(id.to_string()));
        let t: Vec<&Vec<f64>> = set.treated_ids().map(get).collect::<Result<_, _>>()?;
        let c: Vec<&Vec<f64>> = set.control_ids().map(get).collect::<Result<_, _>>()?;
        (0..self.names.len())
            .map(|j| {
                let tv: Vec<f64> = t.iter().map(|r| r[j]).collect();
                let cv: Vec<f64> = c.iter().map(|r| r[j]).collect();
                smd(&tv, &cv).map(|s| s.value)
            })
            .collect()
    }

    /// Largest matched |SMD|; infinite when balance cannot be computed.
    pub fn max_abs_matched_smd(&self, set: &MatchedSet) -> f64 {
        match self.matched_smds(set) {
            Ok(v) => v.iter().fold(0.0, |a, s| a.max(s.abs())),
            Err(_) => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub k: usize,
    /// Upper PS boundary of each stratum except the last.
    pub boundaries: Vec<f64>,
    pub assignment: BTreeMap<String, usize>,
}

impl Strata {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &s in self.assignment.values() {
            sizes[s] += 1;
        }
        sizes
    }
}

/// Cuts pooled propensity scores into `k` strata at the order statistics
/// `ceil(j n / k)`, j = 1..k-1; a unit equal to a cut point stays below it.
pub fn quintile_strata(units: &[PsUnit], k: usize) -> Result<Strata, DiagnosticsError> {
    let n = units.len();
    if k == 0 || n < k {
        return Err(DiagnosticsError::InsufficientUnits { n, k });
    }
    let mut sorted: Vec<&PsUnit> = units.iter().collect();
    sorted.sort_by(|a, b| a.ps.total_cmp(&b.ps).then_with(|| a.zip_id.cmp(&b.zip_id)));
    let boundaries: Vec<f64> = (1..k)
        .map(|j| {
            // 1-based order statistic ceil(j n / k), in integer arithmetic.
            let idx = (j * n).div_ceil(k);
            sorted[idx - 1].ps
        })
        .collect();
    let assignment: BTreeMap<String, usize> = units
        .iter()
        .map(|u| (u.zip_id.clone(), boundaries.partition_point(|&b| b < u.ps)))
        .collect();
    let strata = Strata { k, boundaries, assignment };
    if let Some(empty) = strata.sizes().iter().position(|&s| s == 0) {
        return Err(DiagnosticsError::DegenerateQuantiles(empty));
    }
    Ok(strata)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsHistogramRow {
    pub sample: String,
    pub group: String,
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

/// Propensity score histogram by group, for the full and (optionally) matched samples.
pub fn ps_histogram(units: &[PsUnit], matched: Option<&MatchedSet>, bins: usize) -> Vec<PsHistogramRow> {
    let bins = bins.max(1);
    let in_pairs: Option<HashSet<&str>> =
        matched.map(|m| m.treated_ids().chain(m.control_ids()).collect());
    let mut samples = vec![("all", None)];
    if let Some(ids) = &in_pairs {
        samples.push(("matched", Some(ids)));
    }
    let mut rows = Vec::new();
    for (sample, filter) in samples {
        for (group, treated) in [("high_exposed", true), ("control", false)] {
            let mut counts = vec![0usize; bins];
            for u in units.iter().filter(|u| u.treated == treated) {
                if filter.is_some_and(|ids| !ids.contains(u.zip_id.as_str())) {
                    continue;
                }
                let b = ((u.ps * bins as f64) as usize).min(bins - 1);
                counts[b] += 1;
            }
            for (b, count) in counts.into_iter().enumerate() {
                rows.push(PsHistogramRow {
                    sample: sample.to_string(),
                    group: group.to_string(),
                    bin_low: b as f64 / bins as f64,
                    bin_high: (b + 1) as f64 / bins as f64,
                    count,
                });
            }
        }
    }
    rows
}
