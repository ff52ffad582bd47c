use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dapsm::{DapsConfig, DEFAULT_SMD_THRESHOLD, DEFAULT_WEIGHT_STEP};
use crate::datamodel::Schema;
use crate::diagnostics::DiagnosticsError;
use crate::exposure::DEFAULT_CUTOFF;
use crate::matching::DEFAULT_CALIPER_FACTOR;
use crate::synth::SynthParams;

use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    Primary,
    #[serde(alias = "secondary")]
    SecondaryPm25,
    Stratified,
    Daps,
    Sweep,
}

impl AnalysisMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AnalysisMode::Primary => "primary",
            AnalysisMode::SecondaryPm25 => "secondary_pm25",
            AnalysisMode::Stratified => "stratified",
            AnalysisMode::Daps => "daps",
            AnalysisMode::Sweep => "sweep",
        }
    }

    /// PM2.5 enters the propensity and outcome models.
    pub fn adjusts_pm25(self) -> bool {
        self == AnalysisMode::SecondaryPm25
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRange {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for SweepRange {
    fn default() -> Self {
        SweepRange { lo: 3.0, hi: 5.0, step: 0.25 }
    }
}

impl SweepRange {
    /// Parses `LO:HI:STEP`.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = || PipelineError::Config(format!("sweep must be LO:HI:STEP, got `{text}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        Ok(SweepRange {
            lo: num(parts[0])?,
            hi: num(parts[1])?,
            step: num(parts[2])?,
        })
    }

    /// Cutoffs `lo + i * step` up to and including `hi`.
    pub fn cutoffs(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.lo + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DapsSettings {
    pub weight_step: f64,
    pub smd_threshold: f64,
}

impl Default for DapsSettings {
    fn default() -> Self {
        DapsSettings {
            weight_step: DEFAULT_WEIGHT_STEP,
            smd_threshold: DEFAULT_SMD_THRESHOLD,
        }
    }
}

impl DapsSettings {
    pub fn to_config(self) -> DapsConfig {
        DapsConfig::with_step(self.weight_step, self.smd_threshold)
    }
}

/// Run configuration, read from TOML. Every key is optional.
///
/// ```toml
/// input = "data/zips.csv"
/// output_dir = "out"
/// mode = "primary"        # primary | secondary_pm25 | stratified | daps | sweep
/// cutoff = 4.0
/// caliper_factor = 0.2
/// strata = 5
///
/// [sweep]
/// lo = 3.0
/// hi = 5.0
/// step = 0.25
///
/// [daps]
/// weight_step = 0.0025
/// smd_threshold = 0.15
///
/// [columns]
/// person_years = "py"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub mode: AnalysisMode,
    pub cutoff: f64,
    pub sweep: SweepRange,
    pub caliper_factor: f64,
    pub strata: usize,
    pub ci_level: f64,
    pub daps: DapsSettings,
    pub seed: Option<u64>,
    pub columns: Schema,
    pub synth: SynthParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            grid: None,
            output_dir: PathBuf::from("out"),
            mode: AnalysisMode::Primary,
            cutoff: DEFAULT_CUTOFF,
            sweep: SweepRange::default(),
            caliper_factor: DEFAULT_CALIPER_FACTOR,
            strata: 5,
            ci_level: 0.95,
            daps: DapsSettings::default(),
            seed: None,
            columns: Schema::default(),
            synth: SynthParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return fail("cutoff must be positive");
        }
        if !(self.sweep.lo < self.sweep.hi) || !(self.sweep.step > 0.0) || !(self.sweep.lo > 0.0) {
            return fail("sweep needs 0 < lo < hi and step > 0");
        }
        if !(self.caliper_factor > 0.0) {
            return fail("caliper_factor must be positive");
        }
        if self.strata == 0 {
            return fail("strata must be at least 1");
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return fail("ci_level must lie in (0, 1)");
        }
        if !(self.daps.weight_step > 0.0 && self.daps.weight_step <= 1.0) {
            return fail("daps.weight_step must lie in (0, 1]");
        }
        self.daps
            .to_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.synth.validate().map_err(PipelineError::Config)
    }

    /// The configuration as echoed into reports: everything except where the
    /// report itself is written.
    pub fn canonical(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        v
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.canonical()).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

impl From<DiagnosticsError> for PipelineError {
    fn from(e: DiagnosticsError) -> Self {
        PipelineError::Data(e.to_string())
    }
}
