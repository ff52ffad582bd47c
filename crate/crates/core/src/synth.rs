//! Seeded synthetic ZIP datasets with known propensity scores and a known
//! rate ratio.
//!
//! Per region: covariates are drawn independently, treatment from a logistic
//! model that is linear in the covariates (plus an optional latitude-driven
//! confounder that the analysis never sees), coal influence from one of two
//! modes on either side of the default cutoff, and IHD counts from a Poisson
//! log-linear model with a person-year offset. Each region draws from its own
//! ChaCha20 stream of the seed, so regions can be generated independently.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{covariate_index, DataError, Dataset, Region, ZipRecord, COVARIATE_NAMES, N_COVARIATES};
use crate::exposure::DEFAULT_CUTOFF;

/// How PM2.5 relates to exposure and outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pm25Mode {
    /// Drawn independently of exposure; no outcome effect.
    Independent,
    /// High-exposed locations are shifted up by `shift` µg/m³ and the whole
    /// exposure effect on the outcome runs through PM2.5.
    FullMediation { shift: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_per_region: usize,
    pub true_log_irr: f64,
    /// Scales covariate loadings in both the exposure and outcome models.
    pub confounding_strength: f64,
    /// Strength of the unmeasured latitude-driven confounder.
    pub spatial_confounder_scale: f64,
    /// Events per person-year at average covariates.
    pub baseline_rate: f64,
    pub person_year_range: (f64, f64),
    pub seed: u64,
    pub pm25: Pm25Mode,
    /// Marginal share of high-exposed locations before confounding shifts it.
    pub treated_share: f64,
    pub regions: Vec<Region>,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_per_region: 2000,
            true_log_irr: 1.08f64.ln(),
            confounding_strength: 1.0,
            spatial_confounder_scale: 0.0,
            baseline_rate: 0.03,
            person_year_range: (300.0, 1500.0),
            seed: 1,
            pm25: Pm25Mode::Independent,
            treated_share: 0.4,
            regions: Region::ALL.to_vec(),
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), String> {
        let (lo, hi) = self.person_year_range;
        if !(self.baseline_rate > 0.0) {
            return Err("baseline_rate must be positive".into());
        }
        if !(lo > 0.0 && hi >= lo) {
            return Err("person_year_range must satisfy 0 < lo <= hi".into());
        }
        if !(self.confounding_strength >= 0.0 && self.spatial_confounder_scale >= 0.0) {
            return Err("confounding strengths must be nonnegative".into());
        }
        if !(self.treated_share > 0.0 && self.treated_share < 1.0) {
            return Err("treated_share must lie in (0, 1)".into());
        }
        if let Pm25Mode::FullMediation { shift } = self.pm25 {
            if !(shift > 0.0) {
                return Err("mediation shift must be positive".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub zip: String,
    pub region: Region,
    pub true_ps: f64,
    pub treated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: SynthParams,
    pub true_log_irr: f64,
    pub rows: Vec<TruthRow>,
}

pub fn true_effect(truth: &GroundTruth) -> f64 {
    truth.true_log_irr
}

/// Marginal distribution of one covariate: normal, clamped to `[lo, hi]`.
struct CovariateDraw {
    mean: f64,
    sd: f64,
    lo: f64,
    hi: f64,
    /// Loading on the exposure log-odds, per SD.
    exposure: f64,
    /// Loading on the outcome log-rate, per SD.
    outcome: f64,
}

const fn draw(mean: f64, sd: f64, lo: f64, hi: f64, exposure: f64, outcome: f64) -> CovariateDraw {
    CovariateDraw { mean, sd, lo, hi, exposure, outcome }
}

// Order follows COVARIATE_NAMES.
const DRAWS: [CovariateDraw; N_COVARIATES] = [
    draw(0.88, 0.08, 0.0, 1.0, 0.0, 0.0),      // PctOccupied
    draw(0.42, 0.25, 0.0, 1.0, 0.45, 0.08),    // PctUrban
    draw(8.3, 1.5, 3.0, 12.0, 0.0, 0.0),       // logPop
    draw(40.0, 14.0, 8.0, 120.0, -0.4, -0.10), // MedianHHInc
    draw(0.35, 0.10, 0.0, 1.0, 0.0, 0.0),      // PctHighSchool
    draw(0.51, 0.035, 0.0, 1.0, 0.0, 0.0),     // PctFemale
    draw(0.10, 0.10, 0.0, 1.0, 0.35, 0.06),    // PctBlack
    draw(0.13, 0.08, 0.0, 1.0, 0.3, 0.08),     // PctPoor
    draw(0.42, 0.11, 0.0, 1.0, 0.0, 0.0),      // PctMovedIn5
    draw(100.0, 45.0, 15.0, 400.0, 0.0, 0.0),  // MedianHValue
    draw(74.9, 1.3, 65.0, 85.0, 0.0, 0.05),    // mean_age
    draw(0.56, 0.05, 0.0, 1.0, 0.0, 0.0),      // Female_rate
    draw(0.88, 0.10, 0.0, 1.0, 0.0, 0.0),      // White_rate
    draw(0.0095, 0.001, 0.004, 0.016, 0.0, 0.0), // avrelh
    draw(285.0, 2.5, 270.0, 300.0, 0.3, 0.05), // avtmpf
    draw(0.27, 0.03, 0.0, 1.0, 0.5, 0.12),     // smokerate2000
    draw(0.04, 0.05, 0.0, 1.0, 0.0, 0.0),      // PctHisp
];

const PM25_SD: f64 = 1.8;
/// Exposure log-odds per unit of the spatial confounder, times the scale.
const SPATIAL_EXPOSURE_LOADING: f64 = 1.0;
/// Outcome log-rate per unit of the spatial confounder, times the scale.
const SPATIAL_OUTCOME_LOADING: f64 = 0.25;

struct RegionGeometry {
    lat: (f64, f64),
    lon: (f64, f64),
    pm25_mean: f64,
}

fn geometry(region: Region) -> RegionGeometry {
    match region {
        Region::IndustrialMidwest => RegionGeometry { lat: (37.0, 45.0), lon: (-92.0, -80.5), pm25_mean: 14.0 },
        Region::Northeast => RegionGeometry { lat: (39.0, 45.5), lon: (-80.5, -69.0), pm25_mean: 11.5 },
        Region::Southeast => RegionGeometry { lat: (30.0, 37.0), lon: (-92.0, -76.0), pm25_mean: 13.0 },
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn generate_region(params: &SynthParams, region: Region) -> (Vec<ZipRecord>, Vec<TruthRow>) {
    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
    rng.set_stream(region.index() as u64 + 1);
    let geo = geometry(region);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let control_influence = Beta::new(4.0, 4.0).expect("beta params");
    let high_influence = Gamma::new(2.0, 0.6).expect("gamma params");
    let (py_lo, py_hi) = params.person_year_range;
    let intercept = (params.treated_share / (1.0 - params.treated_share)).ln();
    let (pm25_shift, pm25_slope, direct_effect) = match params.pm25 {
        Pm25Mode::Independent => (0.0, 0.0, params.true_log_irr),
        Pm25Mode::FullMediation { shift } => (shift, params.true_log_irr / shift, 0.0),
    };
    let s = params.confounding_strength;
    let temp_idx = covariate_index("avtmpf").expect("known covariate");

    let mut records = Vec::with_capacity(params.n_per_region);
    let mut truth = Vec::with_capacity(params.n_per_region);
    for i in 0..params.n_per_region {
        let latitude = rng.gen_range(geo.lat.0..geo.lat.1);
        let longitude = rng.gen_range(geo.lon.0..geo.lon.1);
        // Position along the region's north-south axis, in [-1, 1].
        let north = 2.0 * (latitude - geo.lat.0) / (geo.lat.1 - geo.lat.0) - 1.0;

        let mut covariates = [0.0; N_COVARIATES];
        let mut exposure_index = intercept;
        let mut outcome_index = params.baseline_rate.ln();
        for (j, d) in DRAWS.iter().enumerate() {
            let mut noise = std_normal.sample(&mut rng);
            if j == temp_idx && params.spatial_confounder_scale > 0.0 {
                // Temperature falls with latitude when the spatial confounder is on.
                noise = 0.6 * noise - 1.6 * north;
            }
            let x = (d.mean + d.sd * noise).clamp(d.lo, d.hi);
            covariates[j] = x;
            let z = (x - d.mean) / d.sd;
            exposure_index += s * d.exposure * z;
            outcome_index += s * d.outcome * z;
        }
        let spatial = params.spatial_confounder_scale * north;
        exposure_index += SPATIAL_EXPOSURE_LOADING * spatial;
        outcome_index += SPATIAL_OUTCOME_LOADING * spatial;

        let true_ps = logistic(exposure_index);
        let treated = rng.gen::<f64>() < true_ps;
        let coal_influence = if treated {
            DEFAULT_CUTOFF + high_influence.sample(&mut rng)
        } else {
            DEFAULT_CUTOFF * control_influence.sample(&mut rng)
        };
        let t = if treated { 1.0 } else { 0.0 };
        let pm25_noise = std_normal.sample(&mut rng);
        let pm25 = (geo.pm25_mean + pm25_shift * t + PM25_SD * pm25_noise).max(0.5);
        let person_years = rng.gen_range(py_lo..=py_hi);
        let log_mean = outcome_index + direct_effect * t + pm25_slope * (pm25 - geo.pm25_mean) + person_years.ln();
        let ihd_count = Poisson::new(log_mean.exp()).expect("positive mean").sample(&mut rng) as u64;

        let zip_id = format!("{}{:06}", region.code(), i);
        truth.push(TruthRow {
            zip: zip_id.clone(),
            region,
            true_ps,
            treated,
        });
        records.push(ZipRecord {
            zip_id,
            region,
            coal_influence,
            pm25,
            ihd_count,
            person_years,
            latitude,
            longitude,
            covariates,
        });
    }
    (records, truth)
}

/// Generates a dataset and its ground truth; identical params give identical output.
pub fn generate(params: &SynthParams) -> Result<(Dataset, GroundTruth), String> {
    params.validate()?;
    let parts: Vec<(Vec<ZipRecord>, Vec<TruthRow>)> = params
        .regions
        .par_iter()
        .map(|&r| generate_region(params, r))
        .collect();
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for (rec, tr) in parts {
        records.extend(rec);
        rows.extend(tr);
    }
    rows.sort_by(|a, b| a.zip.cmp(&b.zip));
    let ds = Dataset::from_records(records).map_err(|e| e.to_string())?;
    Ok((
        ds,
        GroundTruth {
            params: params.clone(),
            true_log_irr: params.true_log_irr,
            rows,
        },
    ))
}

/// Ground-truth sidecar CSV, one row per ZIP.
pub fn write_truth_csv<W: Write>(truth: &GroundTruth, sink: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "zip",
        "region",
        "true_ps",
        "treated",
        "true_log_irr",
        "seed",
        "confounding_strength",
        "spatial_confounder_scale",
    ])?;
    let p = &truth.params;
    for r in &truth.rows {
        w.write_record([
            r.zip.clone(),
            r.region.code().to_string(),
            r.true_ps.to_string(),
            u8::from(r.treated).to_string(),
            truth.true_log_irr.to_string(),
            p.seed.to_string(),
            p.confounding_strength.to_string(),
            p.spatial_confounder_scale.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Names of covariates that carry exposure confounding in the generator.
pub fn confounded_covariates() -> Vec<&'static str> {
    COVARIATE_NAMES
        .iter()
        .zip(DRAWS.iter())
        .filter(|(_, d)| d.exposure != 0.0)
        .map(|(n, _)| *n)
        .collect()
}
