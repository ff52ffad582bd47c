//! Binary exposure classification from the coal-influence surface, grid to
//! ZIP aggregation and percentile summaries.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::Dataset;

/// Default classification cutoff, µg/m³.
pub const DEFAULT_CUTOFF: f64 = 4.0;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExposureError {
    #[error("cutoff must be positive and finite, got {0}")]
    InvalidCutoff(f64),
    #[error("weights for zip `{zip}` sum to {sum}, expected 1")]
    WeightSumViolation { zip: String, sum: f64 },
    #[error("negative or non-finite weight {weight} for zip `{zip}` in cell `{cell}`")]
    InvalidWeight { cell: String, zip: String, weight: f64 },
    #[error("reference distribution is empty")]
    EmptyReference,
    #[error("grid csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExposureLabel {
    HighExposed,
    Control,
}

impl ExposureLabel {
    pub fn is_treated(self) -> bool {
        self == ExposureLabel::HighExposed
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExposureLabel::HighExposed => "high_exposed",
            ExposureLabel::Control => "control",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureAssignment {
    pub zip_id: String,
    pub label: ExposureLabel,
    pub cutoff: f64,
    pub influence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub cutoff: f64,
    /// Same order as the dataset records.
    pub assignments: Vec<ExposureAssignment>,
    pub n_high: usize,
    pub n_control: usize,
}

impl Classification {
    pub fn label_of(&self, zip_id: &str) -> Option<ExposureLabel> {
        self.assignments
            .binary_search_by(|a| a.zip_id.as_str().cmp(zip_id))
            .ok()
            .map(|i| self.assignments[i].label)
    }
}

/// Labels a location high-exposed when its influence is at or above `cutoff`.
pub fn classify(ds: &Dataset, cutoff: f64) -> Result<Classification, ExposureError> {
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(ExposureError::InvalidCutoff(cutoff));
    }
    let assignments: Vec<ExposureAssignment> = ds
        .records()
        .iter()
        .map(|r| ExposureAssignment {
            zip_id: r.zip_id.clone(),
            label: if r.coal_influence >= cutoff {
                ExposureLabel::HighExposed
            } else {
                ExposureLabel::Control
            },
            cutoff,
            influence: r.coal_influence,
        })
        .collect();
    let n_high = assignments.iter().filter(|a| a.label.is_treated()).count();
    Ok(Classification {
        cutoff,
        n_control: assignments.len() - n_high,
        n_high,
        assignments,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub cell_id: String,
    pub influence: f64,
    pub area_weight_per_zip: BTreeMap<String, f64>,
}

/// Weighted-mean ZIP influence from gridded influence and cell–ZIP weights.
pub fn aggregate_grid(cells: &[GridCell]) -> Result<BTreeMap<String, f64>, ExposureError> {
    let mut acc: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for cell in cells {
        for (zip, &w) in &cell.area_weight_per_zip {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(ExposureError::InvalidWeight {
                    cell: cell.cell_id.clone(),
                    zip: zip.clone(),
                    weight: w,
                });
            }
            let e = acc.entry(zip.clone()).or_insert((0.0, 0.0));
            e.0 += w * cell.influence;
            e.1 += w;
        }
    }
    acc.into_iter()
        .map(|(zip, (value, weight_sum))| {
            if (weight_sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                Err(ExposureError::WeightSumViolation { zip, sum: weight_sum })
            } else {
                Ok((zip, value))
            }
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct GridRow {
    cell_id: String,
    influence: f64,
    zip: String,
    weight: f64,
}

/// Reads the long-format grid CSV (`cell_id, influence, zip, weight`).
pub fn parse_grid_csv<R: Read>(source: R) -> Result<Vec<GridCell>, ExposureError> {
    let mut reader = csv::Reader::from_reader(source);
    let mut cells: BTreeMap<String, GridCell> = BTreeMap::new();
    for row in reader.deserialize::<GridRow>() {
        let row = row.map_err(|e| ExposureError::Csv(e.to_string()))?;
        let cell = cells.entry(row.cell_id.clone()).or_insert_with(|| GridCell {
            cell_id: row.cell_id.clone(),
            influence: row.influence,
            area_weight_per_zip: BTreeMap::new(),
        });
        if cell.influence != row.influence {
            return Err(ExposureError::Csv(format!(
                "cell `{}` listed with conflicting influence values",
                row.cell_id
            )));
        }
        *cell.area_weight_per_zip.entry(row.zip).or_insert(0.0) += row.weight;
    }
    Ok(cells.into_values().collect())
}

/// Percent of `reference` values less than or equal to `value`.
pub fn influence_percentile(value: f64, reference: &[f64]) -> Result<f64, ExposureError> {
    if reference.is_empty() {
        return Err(ExposureError::EmptyReference);
    }
    let at_or_below = reference.iter().filter(|&&r| r <= value).count();
    Ok(100.0 * at_or_below as f64 / reference.len() as f64)
}

/// Mean influence of each group, `(high_exposed, control)`; `None` for an empty group.
pub fn group_mean_influence(c: &Classification) -> (Option<f64>, Option<f64>) {
    let mean = |label: ExposureLabel| {
        let vals: Vec<f64> = c
            .assignments
            .iter()
            .filter(|a| a.label == label)
            .map(|a| a.influence)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    (mean(ExposureLabel::HighExposed), mean(ExposureLabel::Control))
}
