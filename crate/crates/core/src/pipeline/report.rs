use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dapsm::write_weight_diagnostics;
use crate::datamodel::Region;
use crate::diagnostics::BalanceTable;

use super::{AnalysisMode, AnalysisReport, MatchCounts, PipelineError, RegionMatch, RegionResult, RunProvenance, EXPOSURE_COLUMN};

/// One row of `irr_table.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrrRow {
    pub region: Region,
    pub mode: String,
    pub irr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_pairs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CountsRow {
    region: Region,
    group: &'static str,
    total: usize,
    matched: usize,
    unmatched: usize,
    discarded: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: Region,
    pub cutoff: f64,
    pub irr: f64,
    pub log_irr: f64,
    pub log_se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_pairs: Option<usize>,
    pub n_units: usize,
    pub caliper: Option<f64>,
    pub counts: MatchCounts,
    pub mean_influence_high: Option<f64>,
    pub mean_influence_control: Option<f64>,
    pub max_abs_raw_smd: f64,
    pub max_abs_matched_smd: Option<f64>,
    pub pm25_smd_matched: Option<f64>,
    pub daps_weight: Option<f64>,
    pub daps_balanced: Option<bool>,
    pub mean_pair_distance_km: Option<f64>,
    pub stratum_sizes: Option<Vec<usize>>,
    pub ps_converged: bool,
    pub outcome_converged: bool,
}

/// Contents of `run_summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: AnalysisMode,
    pub config: serde_json::Value,
    pub provenance: RunProvenance,
    pub regions: Vec<RegionSummary>,
    pub flags: Vec<String>,
    pub files: Vec<String>,
}

/// IRR with its interval at two decimals, e.g. `1.08 (1.06, 1.09)`.
pub fn format_irr_human(irr: f64, ci_low: f64, ci_high: f64) -> String {
    format!("{irr:.2} ({ci_low:.2}, {ci_high:.2})")
}

pub fn render_human_table(rows: &[IrrRow]) -> String {
    let mut out = format!("{:<6} {:<16} {:<22} {:>8}\n", "region", "mode", "IRR (95% CI)", "pairs");
    for r in rows {
        let pairs = r.n_pairs.map(|n| n.to_string()).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<6} {:<16} {:<22} {:>8}\n",
            r.region.code(),
            r.mode,
            format_irr_human(r.irr, r.ci_low, r.ci_high),
            pairs
        ));
    }
    out
}

pub fn read_irr_table<R: Read>(source: R) -> Result<Vec<IrrRow>, PipelineError> {
    csv::Reader::from_reader(source)
        .deserialize()
        .collect::<Result<Vec<IrrRow>, _>>()
        .map_err(|e| PipelineError::Data(e.to_string()))
}

fn irr_rows(report: &AnalysisReport) -> Vec<IrrRow> {
    report
        .regions
        .iter()
        .map(|r| IrrRow {
            region: r.region,
            mode: r.mode.as_str().to_string(),
            irr: r.irr.irr,
            ci_low: r.irr.ci_low,
            ci_high: r.irr.ci_high,
            n_pairs: r.n_pairs,
        })
        .collect()
}

struct Out {
    dir: PathBuf,
    files: Vec<String>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir)?;
        Ok(Out { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn open(&mut self, name: &str) -> Result<BufWriter<File>, PipelineError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(path)?))
    }

    fn csv_rows<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
        let mut w = csv::Writer::from_writer(self.open(name)?);
        for row in rows {
            w.serialize(row).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), PipelineError> {
        let mut f = self.open(name)?;
        serde_json::to_writer_pretty(&mut f, value).map_err(io)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), PipelineError> {
        let mut f = self.open(name)?;
        f.write_all(text.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

fn io(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io(e.to_string())
}

fn count_rows(region: Region, c: &MatchCounts) -> [CountsRow; 2] {
    let row = |group, g: &super::GroupCounts| CountsRow {
        region,
        group,
        total: g.total,
        matched: g.matched,
        unmatched: g.unmatched,
        discarded: g.discarded,
    };
    [row("high_exposed", &c.high_exposed), row("control", &c.control)]
}

fn write_balance(out: &mut Out, region: Region, balance: &BalanceTable) -> Result<(), PipelineError> {
    let code = region.code();
    balance.write_csv(out.open(&format!("balance_{code}.csv"))?).map_err(io)?;
    balance.write_love_plot(out.open(&format!("love_plot_{code}.csv"))?).map_err(io)
}

fn region_summary(r: &RegionResult) -> RegionSummary {
    RegionSummary {
        region: r.region,
        cutoff: r.cutoff,
        irr: r.irr.irr,
        log_irr: r.irr.log_irr,
        log_se: r.irr.log_se,
        ci_low: r.irr.ci_low,
        ci_high: r.irr.ci_high,
        n_pairs: r.n_pairs,
        n_units: r.n_units,
        caliper: r.caliper,
        counts: r.counts,
        mean_influence_high: r.mean_influence_high,
        mean_influence_control: r.mean_influence_control,
        max_abs_raw_smd: r.balance.max_abs_raw_smd(),
        max_abs_matched_smd: r.balance.max_abs_matched_smd(),
        pm25_smd_matched: r.pm25_smd_matched,
        daps_weight: r.daps.as_ref().map(|d| d.weight),
        daps_balanced: r.daps.as_ref().map(|d| d.balanced),
        mean_pair_distance_km: r.daps.as_ref().and_then(|d| d.mean_pair_distance_km),
        stratum_sizes: r.strata.as_ref().map(|s| s.sizes()),
        ps_converged: r.ps_model.converged,
        outcome_converged: r.outcome_model.converged,
    }
}

#[derive(Serialize)]
struct StratumRow<'a> {
    zip: &'a str,
    stratum: usize,
}

#[derive(Serialize)]
struct SweepRow {
    cutoff: f64,
    region: Region,
    n_high: usize,
    n_control: usize,
    mean_influence_high: Option<f64>,
    mean_influence_control: Option<f64>,
    irr: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    n_pairs: Option<usize>,
    error: Option<String>,
}

/// Writes every artifact of `report` into `outdir`. Output bytes depend only
/// on the report contents.
pub fn emit_report(report: &AnalysisReport, outdir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Out::new(outdir)?;

    if report.mode != AnalysisMode::Sweep {
        let rows = irr_rows(report);
        out.csv_rows("irr_table.csv", &rows)?;
        out.text("irr_table.txt", &render_human_table(&rows))?;
        out.csv_rows("counts.csv", report.regions.iter().flat_map(|r| count_rows(r.region, &r.counts)))?;
    }

    for r in &report.regions {
        let code = r.region.code();
        write_balance(&mut out, r.region, &r.balance)?;
        out.csv_rows(&format!("ps_distribution_{code}.csv"), &r.ps_histogram)?;
        if let Some(m) = &r.matched {
            m.write_csv(out.open(&format!("matched_{code}.csv"))?).map_err(io)?;
        }
        if let Some(d) = &r.daps {
            write_weight_diagnostics(&d.diagnostics, out.open(&format!("daps_weights_{code}.csv"))?).map_err(io)?;
        }
        if let Some(s) = &r.strata {
            out.csv_rows(
                &format!("strata_{code}.csv"),
                s.assignment.iter().map(|(zip, k)| StratumRow { zip, stratum: k + 1 }),
            )?;
        }
        out.json(&format!("models/{code}_propensity.json"), &r.ps_model.record())?;
        out.json(&format!("models/{code}_outcome.json"), &r.outcome_model.record())?;
    }

    if report.mode == AnalysisMode::Sweep {
        out.csv_rows(
            "sweep.csv",
            report.sweep.iter().map(|s| SweepRow {
                cutoff: s.cutoff,
                region: s.region,
                n_high: s.n_high,
                n_control: s.n_control,
                mean_influence_high: s.mean_influence_high,
                mean_influence_control: s.mean_influence_control,
                irr: s.irr.as_ref().map(|e| e.irr),
                ci_low: s.irr.as_ref().map(|e| e.ci_low),
                ci_high: s.irr.as_ref().map(|e| e.ci_high),
                n_pairs: s.n_pairs,
                error: s.error.clone(),
            }),
        )?;
    }

    let mut files = out.files.clone();
    files.push("run_summary.json".into());
    let summary = RunSummary {
        mode: report.mode,
        config: report.config.canonical(),
        provenance: report.provenance.clone(),
        regions: report.regions.iter().map(region_summary).collect(),
        flags: report.flags(),
        files: files.clone(),
    };
    out.json("run_summary.json", &summary)?;
    debug_assert!(report.regions.iter().all(|r| r.outcome_model.names.iter().any(|n| n == EXPOSURE_COLUMN)));
    Ok(files.into_iter().map(|f| outdir.join(f)).collect())
}

/// Matched sets, counts and balance only (the `match` subcommand).
pub fn emit_match_report(matches: &[RegionMatch], outdir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Out::new(outdir)?;
    out.csv_rows("counts.csv", matches.iter().flat_map(|m| count_rows(m.region, &m.counts)))?;
    for m in matches {
        let code = m.region.code();
        m.matched.write_csv(out.open(&format!("matched_{code}.csv"))?).map_err(io)?;
        write_balance(&mut out, m.region, &m.balance)?;
    }
    Ok(out.files.iter().map(|f| outdir.join(f)).collect())
}
