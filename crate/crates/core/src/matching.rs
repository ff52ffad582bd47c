//! 1:1 greedy nearest-neighbor propensity score matching with a caliper on
//! the logit scale, without replacement, after mutual-support trimming.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::Region;

/// Caliper as a fraction of the pooled SD of the logit propensity score.
pub const DEFAULT_CALIPER_FACTOR: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("need at least 2 treated and 2 control units, got {treated} and {control}")]
    InsufficientUnits { treated: usize, control: usize },
    #[error("treated and control propensity score ranges do not overlap")]
    EmptyOverlap,
    #[error("one exposure group is empty")]
    EmptyGroup,
    #[error("units span more than one region")]
    MixedRegions,
    #[error("invalid caliper {0}")]
    InvalidCaliper(f64),
    #[error("invalid weight {0}")]
    InvalidWeight(f64),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsUnit {
    pub zip_id: String,
    pub treated: bool,
    pub ps: f64,
    pub logit_ps: f64,
    pub region: Region,
    pub latitude: f64,
    pub longitude: f64,
}

impl PsUnit {
    pub fn new(zip_id: impl Into<String>, treated: bool, ps: f64, region: Region, latitude: f64, longitude: f64) -> Self {
        PsUnit {
            zip_id: zip_id.into(),
            treated,
            ps,
            logit_ps: (ps / (1.0 - ps)).ln(),
            region,
            latitude,
            longitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub treated: String,
    pub control: String,
    pub treated_ps: f64,
    pub control_ps: f64,
    pub abs_logit_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchedSet {
    pub region: Option<Region>,
    /// Logit scale.
    pub caliper: f64,
    /// In matching order.
    pub pairs: Vec<MatchedPair>,
    pub unmatched_treated: Vec<String>,
    pub unmatched_control: Vec<String>,
    pub discarded: Vec<String>,
}

impl MatchedSet {
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn treated_ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.treated.as_str())
    }

    pub fn control_ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.control.as_str())
    }

    /// Audit CSV: `treated_zip, control_zip, treated_ps, control_ps, abs_logit_diff`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), MatchError> {
        let io = |e: csv::Error| MatchError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["treated_zip", "control_zip", "treated_ps", "control_ps", "abs_logit_diff"])
            .map_err(io)?;
        for p in &self.pairs {
            w.write_record([
                p.treated.clone(),
                p.control.clone(),
                p.treated_ps.to_string(),
                p.control_ps.to_string(),
                p.abs_logit_diff.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| MatchError::Io(e.to_string()))
    }
}

fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// `factor` times the pooled SD of the logit propensity score,
/// `sqrt((s_t^2 + s_c^2) / 2)` with n-1 sample variances.
pub fn compute_caliper(units: &[PsUnit], factor: f64) -> Result<f64, MatchError> {
    let (t, c): (Vec<&PsUnit>, Vec<&PsUnit>) = units.iter().partition(|u| u.treated);
    if t.len() < 2 || c.len() < 2 {
        return Err(MatchError::InsufficientUnits {
            treated: t.len(),
            control: c.len(),
        });
    }
    let logits = |g: &[&PsUnit]| g.iter().map(|u| u.logit_ps).collect::<Vec<_>>();
    let vt = sample_variance(&logits(&t));
    let vc = sample_variance(&logits(&c));
    Ok(factor * ((vt + vc) / 2.0).sqrt())
}

/// Splits units into those inside the mutual support of the two groups'
/// propensity scores and those strictly outside it.
pub fn trim_support(units: &[PsUnit]) -> Result<(Vec<PsUnit>, Vec<PsUnit>), MatchError> {
    let range = |treated: bool| {
        units
            .iter()
            .filter(|u| u.treated == treated)
            .fold(None, |acc: Option<(f64, f64)>, u| match acc {
                None => Some((u.ps, u.ps)),
                Some((lo, hi)) => Some((lo.min(u.ps), hi.max(u.ps))),
            })
    };
    let (Some((t_lo, t_hi)), Some((c_lo, c_hi))) = (range(true), range(false)) else {
        return Err(MatchError::EmptyGroup);
    };
    let lo = t_lo.max(c_lo);
    let hi = t_hi.min(c_hi);
    if lo > hi {
        return Err(MatchError::EmptyOverlap);
    }
    Ok(units.iter().cloned().partition(|u| u.ps >= lo && u.ps <= hi))
}

fn common_region(units: &[PsUnit]) -> Result<Option<Region>, MatchError> {
    let region = units.first().map(|u| u.region);
    if units.iter().any(|u| Some(u.region) != region) {
        return Err(MatchError::MixedRegions);
    }
    Ok(region)
}

/// Treated units in processing order: decreasing logit PS, ties by ascending id.
pub(crate) fn treated_order(units: &[PsUnit]) -> Vec<&PsUnit> {
    let mut treated: Vec<&PsUnit> = units.iter().filter(|u| u.treated).collect();
    treated.sort_by(|a, b| {
        b.logit_ps
            .total_cmp(&a.logit_ps)
            .then_with(|| a.zip_id.cmp(&b.zip_id))
    });
    treated
}

pub(crate) fn pair(t: &PsUnit, c: &PsUnit) -> MatchedPair {
    MatchedPair {
        treated: t.zip_id.clone(),
        control: c.zip_id.clone(),
        treated_ps: t.ps,
        control_ps: c.ps,
        abs_logit_diff: (t.logit_ps - c.logit_ps).abs(),
    }
}

fn finish(region: Option<Region>, caliper: f64, pairs: Vec<MatchedPair>, unmatched_treated: Vec<String>, controls: &[&PsUnit], used: &[bool]) -> MatchedSet {
    let mut unmatched_control: Vec<String> = controls
        .iter()
        .zip(used)
        .filter(|(_, &u)| !u)
        .map(|(c, _)| c.zip_id.clone())
        .collect();
    unmatched_control.sort();
    let mut unmatched_treated = unmatched_treated;
    unmatched_treated.sort();
    MatchedSet {
        region,
        caliper,
        pairs,
        unmatched_treated,
        unmatched_control,
        discarded: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy)]
struct ControlKey {
    logit: f64,
    rank: usize,
}

impl PartialEq for ControlKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for ControlKey {}
impl PartialOrd for ControlKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for ControlKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.logit.total_cmp(&other.logit).then(self.rank.cmp(&other.rank))
    }
}

/// Greedy 1:1 nearest-neighbor matching on the logit propensity score.
///
/// Treated units are taken in decreasing logit PS (ties by id); each takes the
/// closest unused control if it lies within `caliper`, ties going to the
/// smallest control id.
pub fn nn_match(units: &[PsUnit], caliper: f64) -> Result<MatchedSet, MatchError> {
    if !(caliper >= 0.0) {
        return Err(MatchError::InvalidCaliper(caliper));
    }
    let region = common_region(units)?;
    // Controls indexed by id rank so key order breaks ties on id.
    let mut controls: Vec<&PsUnit> = units.iter().filter(|u| !u.treated).collect();
    controls.sort_by(|a, b| a.zip_id.cmp(&b.zip_id));
    let mut available: BTreeSet<ControlKey> = controls
        .iter()
        .enumerate()
        .map(|(rank, c)| ControlKey { logit: c.logit_ps, rank })
        .collect();
    let mut used = vec![false; controls.len()];
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();

    for t in treated_order(units) {
        let probe = ControlKey { logit: t.logit_ps, rank: 0 };
        let above = available.range(probe..).next().copied();
        let below = available
            .range(..probe)
            .next_back()
            .and_then(|k| available.range(ControlKey { logit: k.logit, rank: 0 }..).next())
            .copied();
        let dist = |k: ControlKey| (t.logit_ps - k.logit).abs();
        let best = match (below, above) {
            (Some(b), Some(a)) => {
                let (db, da) = (dist(b), dist(a));
                if db < da || (db == da && b.rank < a.rank) {
                    Some(b)
                } else {
                    Some(a)
                }
            }
            (b, a) => b.or(a),
        };
        match best {
            Some(k) if dist(k) <= caliper => {
                available.remove(&k);
                used[k.rank] = true;
                pairs.push(pair(t, controls[k.rank]));
            }
            _ => unmatched.push(t.zip_id.clone()),
        }
    }
    Ok(finish(region, caliper, pairs, unmatched, &controls, &used))
}

/// Greedy matching under an arbitrary pair score, called with the positions
/// of the treated and control unit in `units`. Among unused controls within
/// the logit caliper, each treated unit takes the lowest score, ties to the
/// smallest control id.
pub(crate) fn greedy_match_by<F>(units: &[PsUnit], caliper: f64, score: F) -> Result<MatchedSet, MatchError>
where
    F: Fn(usize, usize) -> f64,
{
    if !(caliper >= 0.0) {
        return Err(MatchError::InvalidCaliper(caliper));
    }
    let region = common_region(units)?;
    let mut controls: Vec<usize> = (0..units.len()).filter(|&i| !units[i].treated).collect();
    controls.sort_by(|&a, &b| units[a].zip_id.cmp(&units[b].zip_id));
    let mut treated: Vec<usize> = (0..units.len()).filter(|&i| units[i].treated).collect();
    treated.sort_by(|&a, &b| {
        units[b]
            .logit_ps
            .total_cmp(&units[a].logit_ps)
            .then_with(|| units[a].zip_id.cmp(&units[b].zip_id))
    });
    let mut used = vec![false; controls.len()];
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for ti in treated {
        let t = &units[ti];
        let mut best: Option<(f64, usize)> = None;
        for (j, &ci) in controls.iter().enumerate() {
            if used[j] || (t.logit_ps - units[ci].logit_ps).abs() > caliper {
                continue;
            }
            let s = score(ti, ci);
            // Controls are visited in id order, so strict < keeps the smallest id on ties.
            if best.is_none_or(|(b, _)| s < b) {
                best = Some((s, j));
            }
        }
        match best {
            Some((_, j)) => {
                used[j] = true;
                pairs.push(pair(t, &units[controls[j]]));
            }
            None => unmatched.push(t.zip_id.clone()),
        }
    }
    let control_units: Vec<&PsUnit> = controls.iter().map(|&i| &units[i]).collect();
    Ok(finish(region, caliper, pairs, unmatched, &control_units, &used))
}

/// Trim to mutual support, compute the caliper on the retained units and match.
pub fn match_region(units: &[PsUnit], caliper_factor: f64) -> Result<MatchedSet, MatchError> {
    let (kept, discarded) = trim_support(units)?;
    let caliper = compute_caliper(&kept, caliper_factor)?;
    let mut set = nn_match(&kept, caliper)?;
    set.discarded = discarded.into_iter().map(|u| u.zip_id).collect();
    set.discarded.sort();
    Ok(set)
}
