//! Distance-adjusted propensity score matching.
//!
//! Pairs are scored by `w * |logit_t - logit_c| + (1 - w) * d_std(t, c)`,
//! where `d_std` is the great-circle distance scaled by the largest
//! treated–control distance among the units. `w = 1` reduces to plain
//! propensity score matching; the caliper on the logit PS difference is
//! enforced at every weight.

use std::collections::HashMap;
use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::CovariateTable;
use crate::matching::{compute_caliper, greedy_match_by, trim_support, MatchError, MatchedSet, PsUnit};

pub const EARTH_RADIUS_KM: f64 = 6371.0088;
pub const DEFAULT_WEIGHT_STEP: f64 = 0.0025;
pub const DEFAULT_SMD_THRESHOLD: f64 = 0.15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DapsError {
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("invalid DAPS configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least one treated and one control unit")]
    EmptyGroup,
    #[error("io: {0}")]
    Io(String),
}

/// Great-circle distance in km on a spherical Earth.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Treated × control distances, raw (km) and scaled to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    /// Positions in the unit slice of the treated rows and control columns.
    pub treated: Vec<usize>,
    pub controls: Vec<usize>,
    pub raw_km: Vec<f64>,
    pub max_km: f64,
    /// True when every treated–control distance is zero; `standardized` is then all zeros.
    pub degenerate: bool,
    slot: Vec<usize>,
}

impl DistanceMatrix {
    fn index(&self, t: usize, c: usize) -> usize {
        self.slot[t] * self.controls.len() + self.slot[c]
    }

    /// Raw distance for unit positions `t` (treated) and `c` (control).
    pub fn km(&self, t: usize, c: usize) -> f64 {
        self.raw_km[self.index(t, c)]
    }

    pub fn standardized(&self, t: usize, c: usize) -> f64 {
        if self.degenerate {
            0.0
        } else {
            self.km(t, c) / self.max_km
        }
    }
}

pub fn standardized_distance(units: &[PsUnit]) -> Result<DistanceMatrix, DapsError> {
    let treated: Vec<usize> = (0..units.len()).filter(|&i| units[i].treated).collect();
    let controls: Vec<usize> = (0..units.len()).filter(|&i| !units[i].treated).collect();
    if treated.is_empty() || controls.is_empty() {
        return Err(DapsError::EmptyGroup);
    }
    let mut slot = vec![0; units.len()];
    for (k, &i) in treated.iter().enumerate() {
        slot[i] = k;
    }
    for (k, &i) in controls.iter().enumerate() {
        slot[i] = k;
    }
    let raw_km: Vec<f64> = treated
        .iter()
        .flat_map(|&t| {
            controls.iter().map(move |&c| {
                let (a, b) = (&units[t], &units[c]);
                haversine_km(a.latitude, a.longitude, b.latitude, b.longitude)
            })
        })
        .collect();
    let max_km = raw_km.iter().copied().fold(0.0, f64::max);
    let degenerate = max_km == 0.0;
    if degenerate {
        warn!("all treated and control units share one location; geographic distance is ignored");
    }
    Ok(DistanceMatrix {
        treated,
        controls,
        raw_km,
        max_km,
        degenerate,
        slot,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DapsConfig {
    /// Strictly descending weights in [0, 1].
    pub weight_grid: Vec<f64>,
    pub smd_threshold: f64,
}

impl Default for DapsConfig {
    fn default() -> Self {
        DapsConfig::with_step(DEFAULT_WEIGHT_STEP, DEFAULT_SMD_THRESHOLD)
    }
}

impl DapsConfig {
    /// Grid from 1 down to 0 in `step` increments (0 always included).
    pub fn with_step(step: f64, smd_threshold: f64) -> Self {
        let n = (1.0 / step).round() as usize;
        // Steps that divide 1 evenly give weights k/n, the nearest doubles to
        // the decimal grid points (0.9975 rather than 1 - 0.0025).
        let exact = n > 0 && (n as f64 * step - 1.0).abs() < 1e-9;
        let weight = |i: usize| if exact { (n - i) as f64 / n as f64 } else { 1.0 - i as f64 * step };
        let mut weight_grid: Vec<f64> = (0..=n).map(weight).filter(|&w| w > 1e-12).collect();
        weight_grid.push(0.0);
        DapsConfig {
            weight_grid,
            smd_threshold,
        }
    }

    pub fn validate(&self) -> Result<(), DapsError> {
        if self.weight_grid.is_empty() {
            return Err(DapsError::InvalidConfig("weight grid is empty".into()));
        }
        if self.weight_grid.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(DapsError::InvalidConfig("weights must lie in [0, 1]".into()));
        }
        if self.weight_grid.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(DapsError::InvalidConfig("weight grid must be strictly descending".into()));
        }
        if !(self.smd_threshold > 0.0) {
            return Err(DapsError::InvalidConfig("SMD threshold must be positive".into()));
        }
        Ok(())
    }
}

fn match_with(units: &[PsUnit], dist: &DistanceMatrix, weight: f64, caliper: f64) -> Result<MatchedSet, DapsError> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(MatchError::InvalidWeight(weight).into());
    }
    let ps_weight = weight;
    let geo_weight = 1.0 - weight;
    Ok(greedy_match_by(units, caliper, |t, c| {
        ps_weight * (units[t].logit_ps - units[c].logit_ps).abs() + geo_weight * dist.standardized(t, c)
    })?)
}

/// Greedy 1:1 matching on the DAPS score at weight `weight`.
pub fn daps_match(units: &[PsUnit], weight: f64, caliper: f64) -> Result<MatchedSet, DapsError> {
    let dist = standardized_distance(units)?;
    match_with(units, &dist, weight, caliper)
}

/// Mean great-circle distance within matched pairs, km.
pub fn mean_pair_distance_km(units: &[PsUnit], set: &MatchedSet) -> Option<f64> {
    if set.pairs.is_empty() {
        return None;
    }
    let find = |id: &str| units.iter().find(|u| u.zip_id == id);
    let total: f64 = set
        .pairs
        .iter()
        .filter_map(|p| {
            let (t, c) = (find(&p.treated)?, find(&p.control)?);
            Some(haversine_km(t.latitude, t.longitude, c.latitude, c.longitude))
        })
        .sum();
    Some(total / set.pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostic {
    pub weight: f64,
    pub max_abs_smd: f64,
    pub n_pairs: usize,
    pub mean_pair_distance_km: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DapsSelection {
    pub weight: f64,
    pub matched: MatchedSet,
    pub max_abs_smd: f64,
    /// False when no grid weight met the threshold and the best-balanced weight was used.
    pub balanced: bool,
    /// One entry per grid weight, in grid order.
    pub diagnostics: Vec<WeightDiagnostic>,
}

/// Matches at every grid weight and keeps the largest weight whose matched
/// sample has max |SMD| below the threshold, falling back to the weight with
/// the smallest max |SMD|.
pub fn select_weight(
    units: &[PsUnit],
    caliper: f64,
    config: &DapsConfig,
    covariates: &CovariateTable,
) -> Result<DapsSelection, DapsError> {
    config.validate()?;
    let dist = standardized_distance(units)?;
    let position: HashMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.zip_id.as_str(), i)).collect();
    let evaluated: Vec<(MatchedSet, WeightDiagnostic)> = config
        .weight_grid
        .par_iter()
        .map(|&w| {
            let set = match_with(units, &dist, w, caliper)?;
            let mean_km = if set.pairs.is_empty() {
                None
            } else {
                let sum: f64 = set
                    .pairs
                    .iter()
                    .map(|p| dist.km(position[p.treated.as_str()], position[p.control.as_str()]))
                    .sum();
                Some(sum / set.pairs.len() as f64)
            };
            let diag = WeightDiagnostic {
                weight: w,
                max_abs_smd: covariates.max_abs_matched_smd(&set),
                n_pairs: set.n_pairs(),
                mean_pair_distance_km: mean_km,
            };
            Ok((set, diag))
        })
        .collect::<Result<_, DapsError>>()?;

    let passing = evaluated
        .iter()
        .position(|(_, d)| d.max_abs_smd < config.smd_threshold);
    let (chosen, balanced) = match passing {
        Some(i) => (i, true),
        None => {
            let best = evaluated
                .iter()
                .enumerate()
                .min_by(|a, b| a.1 .1.max_abs_smd.total_cmp(&b.1 .1.max_abs_smd).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .expect("grid is nonempty");
            (best, false)
        }
    };
    let diagnostics: Vec<WeightDiagnostic> = evaluated.iter().map(|(_, d)| d.clone()).collect();
    let (matched, diag) = evaluated.into_iter().nth(chosen).expect("chosen index in range");
    Ok(DapsSelection {
        weight: diag.weight,
        matched,
        max_abs_smd: diag.max_abs_smd,
        balanced,
        diagnostics,
    })
}

/// Trim support, compute the caliper on retained units, then select a weight.
pub fn daps_region(
    units: &[PsUnit],
    caliper_factor: f64,
    config: &DapsConfig,
    covariates: &CovariateTable,
) -> Result<DapsSelection, DapsError> {
    let (kept, discarded) = trim_support(units)?;
    let caliper = compute_caliper(&kept, caliper_factor)?;
    let mut sel = select_weight(&kept, caliper, config, covariates)?;
    sel.matched.discarded = discarded.into_iter().map(|u| u.zip_id).collect();
    sel.matched.discarded.sort();
    Ok(sel)
}

/// Per-weight diagnostics CSV: `weight, max_abs_smd, n_pairs, mean_pair_distance_km`.
pub fn write_weight_diagnostics<W: Write>(diags: &[WeightDiagnostic], sink: W) -> Result<(), DapsError> {
    let io = |e: csv::Error| DapsError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["weight", "max_abs_smd", "n_pairs", "mean_pair_distance_km"])
        .map_err(io)?;
    for d in diags {
        w.write_record([
            d.weight.to_string(),
            d.max_abs_smd.to_string(),
            d.n_pairs.to_string(),
            d.mean_pair_distance_km.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| DapsError::Io(e.to_string()))
}
