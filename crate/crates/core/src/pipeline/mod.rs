//! End-to-end analyses: primary and PM2.5-adjusted matching, quintile
//! stratification, DAPS matching and the cutoff sweep.
//!
//! Every analysis runs independently per region. A region's result depends
//! only on that region's rows.

mod config;
mod report;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{AnalysisMode, DapsSettings, RunConfig, SweepRange};
pub use report::{emit_match_report, emit_report, format_irr_human, read_irr_table, render_human_table, IrrRow, RunSummary};

use crate::dapsm::{daps_region, DapsError, DapsSelection};
use crate::datamodel::{read_zip_table, split_by_region, DataError, Dataset, Region, ZipRecord};
use crate::diagnostics::{
    balance_table, covariate_variables, ps_histogram, quintile_strata, BalanceTable, CovariateTable, PsHistogramRow, Strata, Variable,
};
use crate::exposure::{aggregate_grid, classify, group_mean_influence, parse_grid_csv, Classification, ExposureError, GridCell};
use crate::glm::{fit_logistic, fit_poisson, irr_with_ci, predict_proba, DesignMatrix, FittedGlm, GlmError, IrrEstimate};
use crate::matching::{match_region, trim_support, MatchError, MatchedSet, PsUnit};

/// Name of the exposure indicator in outcome models.
pub const EXPOSURE_COLUMN: &str = "exposed";
/// Linear predictors are clamped so propensity scores stay strictly inside (0, 1).
const MAX_ABS_LOGIT: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Daps(#[from] DapsError),
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error("{0}")]
    Data(String),
}

impl AnalysisError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, AnalysisError::Glm(_))
    }
}

impl From<crate::diagnostics::DiagnosticsError> for AnalysisError {
    fn from(e: crate::diagnostics::DiagnosticsError) -> Self {
        AnalysisError::Data(e.to_string())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("region {region}: {source}")]
    Region { region: Region, source: AnalysisError },
    #[error("io error: {0}")]
    Io(String),
}

impl PipelineError {
    /// Process exit code: 2 configuration, 3 data or I/O, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Region { source, .. } if source.is_numerical() => 4,
            PipelineError::Data(_) | PipelineError::Region { .. } | PipelineError::Io(_) => 3,
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

/// Unit counts by exposure group, as in a matching flow table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupCounts {
    pub total: usize,
    pub matched: usize,
    pub unmatched: usize,
    pub discarded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub high_exposed: GroupCounts,
    pub control: GroupCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DapsSummary {
    pub weight: f64,
    pub balanced: bool,
    pub max_abs_smd: f64,
    pub mean_pair_distance_km: Option<f64>,
    pub diagnostics: Vec<crate::dapsm::WeightDiagnostic>,
}

/// Propensity score stage shared by every analysis.
#[derive(Debug, Clone)]
pub struct PsStage {
    pub region: Region,
    pub classification: Classification,
    pub ps_model: FittedGlm,
    pub units: Vec<PsUnit>,
}

#[derive(Debug, Clone)]
pub struct RegionResult {
    pub region: Region,
    pub mode: AnalysisMode,
    pub cutoff: f64,
    pub irr: IrrEstimate,
    /// Matched pairs; `None` for stratified analyses.
    pub n_pairs: Option<usize>,
    /// Rows entering the outcome model.
    pub n_units: usize,
    pub outcome_model: FittedGlm,
    pub ps_model: FittedGlm,
    pub counts: MatchCounts,
    pub caliper: Option<f64>,
    pub matched: Option<MatchedSet>,
    pub balance: BalanceTable,
    pub mean_influence_high: Option<f64>,
    pub mean_influence_control: Option<f64>,
    /// SMD of PM2.5 between groups in the matched data.
    pub pm25_smd_matched: Option<f64>,
    pub daps: Option<DapsSummary>,
    pub strata: Option<Strata>,
    pub ps_histogram: Vec<PsHistogramRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub cutoff: f64,
    pub region: Region,
    pub n_high: usize,
    pub n_control: usize,
    pub mean_influence_high: Option<f64>,
    pub mean_influence_control: Option<f64>,
    pub irr: Option<IrrEstimate>,
    pub n_pairs: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub config_hash: String,
    pub crate_version: String,
    pub input_source: String,
    pub input_sha256: String,
    pub input_rows: usize,
    pub dropped_rows: usize,
    pub invalid_rows: usize,
}

#[derive(Debug, Clone)]
pub struct AnalysisReport {
    pub mode: AnalysisMode,
    pub config: RunConfig,
    pub regions: Vec<RegionResult>,
    pub sweep: Vec<SweepEntry>,
    pub provenance: RunProvenance,
}

impl AnalysisReport {
    pub fn region(&self, region: Region) -> Option<&RegionResult> {
        self.regions.iter().find(|r| r.region == region)
    }

    /// Warnings worth surfacing next to the numbers.
    pub fn flags(&self) -> Vec<String> {
        let mut flags = Vec::new();
        for r in &self.regions {
            if let Some(d) = &r.daps {
                if !d.balanced {
                    flags.push(format!("{}: NotBalanced (no DAPS weight reached the SMD threshold)", r.region));
                }
            }
            if r.n_pairs == Some(0) {
                flags.push(format!("{}: no matched pairs", r.region));
            }
        }
        for s in &self.sweep {
            if let Some(e) = &s.error {
                flags.push(format!("sweep cutoff {} {}: {e}", s.cutoff, s.region));
            }
        }
        flags
    }
}

fn provenance(ds: &Dataset, config: &RunConfig) -> RunProvenance {
    RunProvenance {
        config_hash: config.hash(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        input_source: ds.provenance.source.clone(),
        input_sha256: ds.provenance.sha256.clone(),
        input_rows: ds.len(),
        dropped_rows: ds.provenance.dropped,
        invalid_rows: ds.provenance.invalid,
    }
}

/// Reads the configured input, replaces coal influence with the grid
/// aggregation when a grid file is configured, and drops invalid rows.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset, PipelineError> {
    let path = config
        .input
        .as_deref()
        .ok_or_else(|| PipelineError::Config("no input file given".into()))?;
    let ds = read_zip_table(path, &config.columns).map_err(|e| match e {
        DataError::Io(m) => PipelineError::Data(format!("{}: {m}", path.display())),
        other => PipelineError::Data(other.to_string()),
    })?;
    let ds = match &config.grid {
        Some(grid) => {
            let file = std::fs::File::open(grid).map_err(|e| PipelineError::Data(format!("{}: {e}", grid.display())))?;
            let cells = parse_grid_csv(std::io::BufReader::new(file)).map_err(|e| PipelineError::Data(e.to_string()))?;
            apply_grid(&ds, &cells)?
        }
        None => ds,
    };
    Ok(ds.drop_invalid())
}

/// Replaces each ZIP's coal influence with its area-weighted grid value.
/// Every ZIP in the dataset must be covered by the grid.
pub fn apply_grid(ds: &Dataset, cells: &[GridCell]) -> Result<Dataset, PipelineError> {
    let influence = aggregate_grid(cells).map_err(|e| PipelineError::Data(e.to_string()))?;
    let records = ds
        .records()
        .iter()
        .map(|r| match influence.get(&r.zip_id) {
            Some(&v) => Ok(ZipRecord { coal_influence: v, ..r.clone() }),
            None => Err(PipelineError::Data(format!("zip `{}` has no grid cells", r.zip_id))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Dataset::from_records(records).map_err(|e| PipelineError::Data(e.to_string()))?;
    out.provenance = ds.provenance.clone();
    Ok(out)
}

/// Covariates in the propensity and outcome models for `mode`.
pub fn model_variables(mode: AnalysisMode) -> Vec<Variable> {
    let mut vars = covariate_variables();
    if mode.adjusts_pm25() {
        vars.push(Variable::Pm25);
    }
    vars
}

fn variable_column(v: Variable) -> String {
    v.name().to_string()
}

fn design(records: &[&ZipRecord], vars: &[Variable], leading: Vec<(String, Vec<f64>)>) -> Result<DesignMatrix, GlmError> {
    let mut cols = leading;
    cols.extend(
        vars.iter()
            .map(|&v| (variable_column(v), records.iter().map(|r| v.value(r)).collect())),
    );
    DesignMatrix::with_rows(records.len(), cols)
}

/// Classify at `cutoff`, fit the propensity model and score every unit.
pub fn propensity_stage(region_ds: &Dataset, region: Region, cutoff: f64, mode: AnalysisMode) -> Result<PsStage, AnalysisError> {
    let classification = classify(region_ds, cutoff)?;
    if classification.n_high < 2 || classification.n_control < 2 {
        return Err(MatchError::InsufficientUnits {
            treated: classification.n_high,
            control: classification.n_control,
        }
        .into());
    }
    let records: Vec<&ZipRecord> = region_ds.records().iter().collect();
    let x = design(&records, &model_variables(mode), Vec::new())?;
    let treated: Vec<bool> = classification.assignments.iter().map(|a| a.label.is_treated()).collect();
    let ps_model = fit_logistic(&x, &treated)?;
    let eta = ps_model.linear_predictor(&x)?;
    let units = records
        .iter()
        .zip(&treated)
        .zip(eta.iter())
        .map(|((r, &t), &e)| {
            let e = e.clamp(-MAX_ABS_LOGIT, MAX_ABS_LOGIT);
            let mut u = PsUnit::new(r.zip_id.clone(), t, 1.0 / (1.0 + (-e).exp()), region, r.latitude, r.longitude);
            u.logit_ps = e;
            u
        })
        .collect();
    debug_assert!(predict_proba(&ps_model, &x).is_ok());
    Ok(PsStage {
        region,
        classification,
        ps_model,
        units,
    })
}

fn counts_for(stage: &PsStage, matched: Option<&MatchedSet>, discarded: &[String], used: Option<&[String]>) -> MatchCounts {
    let mut counts = MatchCounts::default();
    let is_treated = |id: &str| stage.classification.label_of(id).is_some_and(|l| l.is_treated());
    counts.high_exposed.total = stage.classification.n_high;
    counts.control.total = stage.classification.n_control;
    for id in discarded {
        if is_treated(id) {
            counts.high_exposed.discarded += 1;
        } else {
            counts.control.discarded += 1;
        }
    }
    if let Some(m) = matched {
        counts.high_exposed.matched = m.n_pairs();
        counts.control.matched = m.n_pairs();
    } else if let Some(ids) = used {
        for id in ids {
            if is_treated(id) {
                counts.high_exposed.matched += 1;
            } else {
                counts.control.matched += 1;
            }
        }
    }
    counts.high_exposed.unmatched = counts.high_exposed.total - counts.high_exposed.matched - counts.high_exposed.discarded;
    counts.control.unmatched = counts.control.total - counts.control.matched - counts.control.discarded;
    counts
}

fn outcome_fit(
    region_ds: &Dataset,
    stage: &PsStage,
    ids: &[String],
    mode: AnalysisMode,
    extra: Vec<(String, Vec<f64>)>,
    level: f64,
) -> Result<(FittedGlm, IrrEstimate), AnalysisError> {
    let records: Vec<&ZipRecord> = ids
        .iter()
        .map(|id| region_ds.get(id).ok_or_else(|| AnalysisError::Data(format!("unknown zip `{id}`"))))
        .collect::<Result<_, _>>()?;
    let exposed: Vec<f64> = ids
        .iter()
        .map(|id| if stage.classification.label_of(id).is_some_and(|l| l.is_treated()) { 1.0 } else { 0.0 })
        .collect();
    let mut leading = vec![(EXPOSURE_COLUMN.to_string(), exposed)];
    leading.extend(extra);
    let x = design(&records, &model_variables(mode), leading)?;
    let counts: Vec<u64> = records.iter().map(|r| r.ihd_count).collect();
    let offset: Vec<f64> = records.iter().map(|r| r.person_years.ln()).collect();
    let model = fit_poisson(&x, &counts, &offset)?;
    let irr = irr_with_ci(&model, EXPOSURE_COLUMN, level)?;
    Ok((model, irr))
}

/// Variables whose matched balance decides the DAPS weight: the propensity
/// covariates plus the coordinates, which stand in for unmeasured spatial
/// confounders that the propensity model cannot see.
pub fn daps_balance_variables(mode: AnalysisMode) -> Vec<Variable> {
    let mut v = model_variables(mode);
    v.extend([Variable::Latitude, Variable::Longitude]);
    v
}

fn balance_variables(mode: AnalysisMode) -> Vec<Variable> {
    let mut v = covariate_variables();
    v.push(Variable::Pm25);
    if mode == AnalysisMode::Daps {
        v.extend([Variable::Latitude, Variable::Longitude]);
    }
    v
}

/// Runs one region's analysis in `mode` (anything but `Sweep`).
pub fn analyze_region(region_ds: &Dataset, region: Region, mode: AnalysisMode, cutoff: f64, config: &RunConfig) -> Result<RegionResult, AnalysisError> {
    let stage = propensity_stage(region_ds, region, cutoff, mode)?;
    let (mean_high, mean_control) = group_mean_influence(&stage.classification);

    let (matched, ids, extra, caliper, daps, strata, discarded) = match mode {
        AnalysisMode::Primary | AnalysisMode::SecondaryPm25 | AnalysisMode::Sweep => {
            let m = match_region(&stage.units, config.caliper_factor)?;
            let ids = matched_ids(&m);
            let discarded = m.discarded.clone();
            (Some(m.clone()), ids, Vec::new(), Some(m.caliper), None, None, discarded)
        }
        AnalysisMode::Daps => {
            let covs = CovariateTable::from_dataset(region_ds, &daps_balance_variables(mode));
            let sel: DapsSelection = daps_region(&stage.units, config.caliper_factor, &config.daps.to_config(), &covs)?;
            let summary = DapsSummary {
                weight: sel.weight,
                balanced: sel.balanced,
                max_abs_smd: sel.max_abs_smd,
                mean_pair_distance_km: crate::dapsm::mean_pair_distance_km(&stage.units, &sel.matched),
                diagnostics: sel.diagnostics,
            };
            let ids = matched_ids(&sel.matched);
            let discarded = sel.matched.discarded.clone();
            let caliper = sel.matched.caliper;
            (Some(sel.matched), ids, Vec::new(), Some(caliper), Some(summary), None, discarded)
        }
        AnalysisMode::Stratified => {
            let (kept, dropped) = trim_support(&stage.units)?;
            let strata = quintile_strata(&kept, config.strata)?;
            let ids: Vec<String> = kept.iter().map(|u| u.zip_id.clone()).collect();
            let extra: Vec<(String, Vec<f64>)> = (1..strata.k)
                .map(|s| {
                    let col = ids.iter().map(|id| if strata.assignment[id] == s { 1.0 } else { 0.0 }).collect();
                    (format!("stratum_{}", s + 1), col)
                })
                .collect();
            let discarded: Vec<String> = dropped.into_iter().map(|u| u.zip_id).collect();
            (None, ids, extra, None, None, Some(strata), discarded)
        }
    };

    let (outcome_model, irr) = outcome_fit(region_ds, &stage, &ids, mode, extra, config.ci_level)?;
    let balance = balance_table(region_ds, &stage.classification, matched.as_ref(), &balance_variables(mode))?;
    let pm25_smd_matched = balance.row("pm25").and_then(|r| r.matched).map(|m| m.smd);
    let counts = counts_for(&stage, matched.as_ref(), &discarded, Some(&ids));
    let ps_histogram = ps_histogram(&stage.units, matched.as_ref(), 20);
    Ok(RegionResult {
        region,
        mode,
        cutoff,
        irr,
        n_pairs: matched.as_ref().map(MatchedSet::n_pairs),
        n_units: ids.len(),
        outcome_model,
        ps_model: stage.ps_model,
        counts,
        caliper,
        matched,
        balance,
        mean_influence_high: mean_high,
        mean_influence_control: mean_control,
        pm25_smd_matched,
        daps,
        strata,
        ps_histogram,
    })
}

/// Ids of the matched units in pair order, treated first within each pair.
fn matched_ids(m: &MatchedSet) -> Vec<String> {
    m.pairs.iter().flat_map(|p| [p.treated.clone(), p.control.clone()]).collect()
}

fn nonempty_regions(ds: &Dataset) -> Vec<(Region, Dataset)> {
    split_by_region(ds).into_iter().filter(|(_, d)| !d.is_empty()).collect()
}

/// Runs `mode` on every region with data; any region failure aborts the run.
pub fn analyze(ds: &Dataset, config: &RunConfig, mode: AnalysisMode) -> Result<AnalysisReport, PipelineError> {
    if mode == AnalysisMode::Sweep {
        return run_sweep(ds, config);
    }
    if ds.is_empty() {
        return Err(PipelineError::Data("dataset is empty".into()));
    }
    let regions = nonempty_regions(ds)
        .par_iter()
        .map(|(region, rds)| {
            analyze_region(rds, *region, mode, config.cutoff, config)
                .map_err(|source| PipelineError::Region { region: *region, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AnalysisReport {
        mode,
        config: RunConfig { mode, ..config.clone() },
        regions,
        sweep: Vec::new(),
        provenance: provenance(ds, &RunConfig { mode, ..config.clone() }),
    })
}

pub fn run_primary(ds: &Dataset, config: &RunConfig) -> Result<AnalysisReport, PipelineError> {
    analyze(ds, config, AnalysisMode::Primary)
}

pub fn run_secondary(ds: &Dataset, config: &RunConfig) -> Result<AnalysisReport, PipelineError> {
    analyze(ds, config, AnalysisMode::SecondaryPm25)
}

pub fn run_stratified(ds: &Dataset, config: &RunConfig) -> Result<AnalysisReport, PipelineError> {
    analyze(ds, config, AnalysisMode::Stratified)
}

pub fn run_daps(ds: &Dataset, config: &RunConfig) -> Result<AnalysisReport, PipelineError> {
    analyze(ds, config, AnalysisMode::Daps)
}

/// The primary analysis at each cutoff of the configured range.
pub fn run_sweep(ds: &Dataset, config: &RunConfig) -> Result<AnalysisReport, PipelineError> {
    run_sweep_at(ds, config, &config.sweep.cutoffs())
}

/// The primary analysis at each of `cutoffs`; failures are recorded per
/// (cutoff, region) and do not stop the sweep.
pub fn run_sweep_at(ds: &Dataset, config: &RunConfig, cutoffs: &[f64]) -> Result<AnalysisReport, PipelineError> {
    let regions = nonempty_regions(ds);
    let jobs: Vec<(f64, usize)> = cutoffs
        .iter()
        .flat_map(|&c| (0..regions.len()).map(move |i| (c, i)))
        .collect();
    let sweep: Vec<SweepEntry> = jobs
        .par_iter()
        .map(|&(cutoff, i)| {
            let (region, rds) = &regions[i];
            sweep_entry(rds, *region, cutoff, config)
        })
        .collect::<Result<_, _>>()?;
    let cfg = RunConfig { mode: AnalysisMode::Sweep, ..config.clone() };
    Ok(AnalysisReport {
        mode: AnalysisMode::Sweep,
        provenance: provenance(ds, &cfg),
        config: cfg,
        regions: Vec::new(),
        sweep,
    })
}

fn sweep_entry(rds: &Dataset, region: Region, cutoff: f64, config: &RunConfig) -> Result<SweepEntry, PipelineError> {
    let classification = classify(rds, cutoff).map_err(|e| PipelineError::Config(e.to_string()))?;
    let (mean_high, mean_control) = group_mean_influence(&classification);
    let mut entry = SweepEntry {
        cutoff,
        region,
        n_high: classification.n_high,
        n_control: classification.n_control,
        mean_influence_high: mean_high,
        mean_influence_control: mean_control,
        irr: None,
        n_pairs: None,
        error: None,
    };
    match analyze_region(rds, region, AnalysisMode::Primary, cutoff, config) {
        Ok(r) => {
            entry.irr = Some(r.irr);
            entry.n_pairs = r.n_pairs;
        }
        Err(e) => entry.error = Some(e.to_string()),
    }
    Ok(entry)
}

/// Unadjusted rate ratio: exposure indicator only, all units, per region.
pub fn crude_irr(region_ds: &Dataset, cutoff: f64, level: f64) -> Result<IrrEstimate, AnalysisError> {
    let c = classify(region_ds, cutoff)?;
    let exposed: Vec<f64> = c.assignments.iter().map(|a| if a.label.is_treated() { 1.0 } else { 0.0 }).collect();
    let x = DesignMatrix::from_columns(vec![(EXPOSURE_COLUMN.to_string(), exposed)])?;
    let counts: Vec<u64> = region_ds.records().iter().map(|r| r.ihd_count).collect();
    let offset: Vec<f64> = region_ds.records().iter().map(|r| r.person_years.ln()).collect();
    let model = fit_poisson(&x, &counts, &offset)?;
    Ok(irr_with_ci(&model, EXPOSURE_COLUMN, level)?)
}

/// Stage used by the `match` subcommand: propensity scores and matched sets only.
#[derive(Debug, Clone)]
pub struct RegionMatch {
    pub region: Region,
    pub counts: MatchCounts,
    pub matched: MatchedSet,
    pub balance: BalanceTable,
}

pub fn match_only(ds: &Dataset, config: &RunConfig, mode: AnalysisMode) -> Result<Vec<RegionMatch>, PipelineError> {
    nonempty_regions(ds)
        .par_iter()
        .map(|(region, rds)| {
            let wrap = |source: AnalysisError| PipelineError::Region { region: *region, source };
            let stage = propensity_stage(rds, *region, config.cutoff, mode).map_err(wrap)?;
            let m = match_region(&stage.units, config.caliper_factor).map_err(|e| wrap(e.into()))?;
            let balance = balance_table(rds, &stage.classification, Some(&m), &balance_variables(mode)).map_err(|e| wrap(e.into()))?;
            Ok(RegionMatch {
                region: *region,
                counts: counts_for(&stage, Some(&m), &m.discarded, None),
                matched: m,
                balance,
            })
        })
        .collect()
}

/// Per-region classification counts, keyed by region.
pub fn classification_summary(ds: &Dataset, cutoff: f64) -> Result<BTreeMap<Region, (usize, usize)>, PipelineError> {
    split_by_region(ds)
        .into_iter()
        .map(|(r, d)| {
            let c = classify(&d, cutoff).map_err(|e| PipelineError::Config(e.to_string()))?;
            Ok((r, (c.n_high, c.n_control)))
        })
        .collect()
}
