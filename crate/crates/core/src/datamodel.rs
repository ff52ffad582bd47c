//! ZIP-code analysis table: record schema, CSV ingestion, validation and
//! regional partitioning.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Covariates entering the propensity score and outcome models, in model order.
pub const COVARIATE_NAMES: [&str; 17] = [
    "PctOccupied",
    "PctUrban",
    "logPop",
    "MedianHHInc",
    "PctHighSchool",
    "PctFemale",
    "PctBlack",
    "PctPoor",
    "PctMovedIn5",
    "MedianHValue",
    "mean_age",
    "Female_rate",
    "White_rate",
    "avrelh",
    "avtmpf",
    "smokerate2000",
    "PctHisp",
];

pub const N_COVARIATES: usize = COVARIATE_NAMES.len();

/// Covariates that are proportions and must lie in [0, 1].
pub const PROPORTION_COVARIATES: [&str; 11] = [
    "PctOccupied",
    "PctUrban",
    "PctHighSchool",
    "PctFemale",
    "PctBlack",
    "PctPoor",
    "PctMovedIn5",
    "PctHisp",
    "Female_rate",
    "White_rate",
    "smokerate2000",
];

pub fn covariate_index(name: &str) -> Option<usize> {
    COVARIATE_NAMES.iter().position(|n| *n == name)
}

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("required column `{0}` is missing from the header")]
    MissingColumn(String),
    #[error("no valid rows in input")]
    EmptyDataset,
    #[error("duplicate zip id `{0}`")]
    DuplicateKey(String),
    #[error("unknown region `{0}` (expected IMW, NE or SE)")]
    UnknownRegion(String),
    #[error("csv error: {0}")]
    Csv(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        DataError::Csv(e.to_string())
    }
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "IMW")]
    IndustrialMidwest,
    #[serde(rename = "NE")]
    Northeast,
    #[serde(rename = "SE")]
    Southeast,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::IndustrialMidwest, Region::Northeast, Region::Southeast];

    pub fn code(self) -> &'static str {
        match self {
            Region::IndustrialMidwest => "IMW",
            Region::Northeast => "NE",
            Region::Southeast => "SE",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Region::IndustrialMidwest => 0,
            Region::Northeast => 1,
            Region::Southeast => 2,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Region {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "IMW" => Ok(Region::IndustrialMidwest),
            "NE" => Ok(Region::Northeast),
            "SE" => Ok(Region::Southeast),
            other => Err(DataError::UnknownRegion(other.to_string())),
        }
    }
}

/// One ZIP code's row in the analysis table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZipRecord {
    pub zip_id: String,
    pub region: Region,
    /// Modeled coal-emissions influence, µg/m³.
    pub coal_influence: f64,
    /// Annual mean PM2.5, µg/m³.
    pub pm25: f64,
    pub ihd_count: u64,
    pub person_years: f64,
    pub latitude: f64,
    pub longitude: f64,
    /// Values in [`COVARIATE_NAMES`] order.
    pub covariates: [f64; N_COVARIATES],
}

impl ZipRecord {
    pub fn covariate(&self, name: &str) -> Option<f64> {
        covariate_index(name).map(|i| self.covariates[i])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// Seconds since the Unix epoch at ingestion. Not part of any emitted report.
    pub ingested_at: u64,
    pub accepted: usize,
    pub dropped: usize,
    /// Rows removed after parsing because they violated a record invariant.
    pub invalid: usize,
    /// SHA-256 of the input bytes, hex; empty for in-memory datasets.
    pub sha256: String,
}

/// Immutable analysis table, sorted by `zip_id`.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    records: Vec<ZipRecord>,
    pub provenance: Provenance,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl Dataset {
    /// Builds a dataset from records, sorting by id and rejecting duplicates.
    pub fn from_records(mut records: Vec<ZipRecord>) -> Result<Self, DataError> {
        records.sort_by(|a, b| a.zip_id.cmp(&b.zip_id));
        if let Some(w) = records.windows(2).find(|w| w[0].zip_id == w[1].zip_id) {
            return Err(DataError::DuplicateKey(w[0].zip_id.clone()));
        }
        let provenance = Provenance {
            accepted: records.len(),
            ..Provenance::default()
        };
        Ok(Dataset { records, provenance })
    }

    pub fn records(&self) -> &[ZipRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, zip_id: &str) -> Option<&ZipRecord> {
        self.records
            .binary_search_by(|r| r.zip_id.as_str().cmp(zip_id))
            .ok()
            .map(|i| &self.records[i])
    }

    /// Keeps records satisfying `keep`, preserving order.
    pub fn filter<F: Fn(&ZipRecord) -> bool>(&self, keep: F) -> Dataset {
        Dataset {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Drops every record with at least one invariant violation, logging each.
    pub fn drop_invalid(self) -> Dataset {
        let violations = validate(&self);
        if violations.is_empty() {
            return self;
        }
        let bad: HashSet<&str> = violations.iter().map(|v| v.zip_id.as_str()).collect();
        for v in &violations {
            warn!("dropping {}: {}", v.zip_id, v.rule);
        }
        let records: Vec<ZipRecord> = self
            .records
            .iter()
            .filter(|r| !bad.contains(r.zip_id.as_str()))
            .cloned()
            .collect();
        let mut provenance = self.provenance.clone();
        provenance.invalid += bad.len();
        provenance.accepted = records.len();
        Dataset { records, provenance }
    }
}

/// Maps logical fields to CSV header names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub zip: String,
    pub region: String,
    pub coal_influence: String,
    pub pm25: String,
    pub ihd: String,
    pub person_years: String,
    pub lat: String,
    pub lon: String,
    /// Header renames for covariates, keyed by canonical covariate name.
    pub covariates: BTreeMap<String, String>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            zip: "zip".into(),
            region: "region".into(),
            coal_influence: "coal_influence".into(),
            pm25: "pm25".into(),
            ihd: "ihd".into(),
            person_years: "person_years".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            covariates: BTreeMap::new(),
        }
    }
}

impl Schema {
    fn covariate_column(&self, name: &str) -> String {
        self.covariates
            .get(name)
            .cloned()
            .unwrap_or_else(|| name.to_string())
    }

    fn header_names(&self) -> Vec<String> {
        let mut names = vec![
            self.zip.clone(),
            self.region.clone(),
            self.coal_influence.clone(),
            self.pm25.clone(),
            self.ihd.clone(),
            self.person_years.clone(),
            self.lat.clone(),
            self.lon.clone(),
        ];
        names.extend(COVARIATE_NAMES.iter().map(|c| self.covariate_column(c)));
        names
    }
}

struct ColumnIndex {
    fixed: [usize; 8],
    covariates: [usize; N_COVARIATES],
}

fn resolve_columns(headers: &csv::StringRecord, schema: &Schema) -> Result<ColumnIndex, DataError> {
    let lookup: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let find = |name: &str| {
        lookup
            .get(name)
            .copied()
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let names = schema.header_names();
    let mut fixed = [0usize; 8];
    for (slot, name) in fixed.iter_mut().zip(&names[..8]) {
        *slot = find(name)?;
    }
    let mut covariates = [0usize; N_COVARIATES];
    for (slot, name) in covariates.iter_mut().zip(&names[8..]) {
        *slot = find(name)?;
    }
    Ok(ColumnIndex { fixed, covariates })
}

fn parse_row(row: &csv::StringRecord, cols: &ColumnIndex) -> Option<ZipRecord> {
    let field = |i: usize| row.get(i).map(str::trim).filter(|s| !s.is_empty());
    let real = |i: usize| field(i)?.parse::<f64>().ok().filter(|v| v.is_finite());
    let [zip, region, influence, pm25, ihd, py, lat, lon] = cols.fixed;
    let ihd_count = match field(ihd)?.parse::<u64>() {
        Ok(v) => v,
        // Accept integral reals such as "12.0".
        Err(_) => {
            let v = real(ihd)?;
            if v < 0.0 || v.fract() != 0.0 {
                return None;
            }
            v as u64
        }
    };
    let mut covariates = [0.0; N_COVARIATES];
    for (slot, &i) in covariates.iter_mut().zip(cols.covariates.iter()) {
        *slot = real(i)?;
    }
    Some(ZipRecord {
        zip_id: field(zip)?.to_string(),
        region: field(region)?.parse().ok()?,
        coal_influence: real(influence)?,
        pm25: real(pm25)?,
        ihd_count,
        person_years: real(py)?,
        latitude: real(lat)?,
        longitude: real(lon)?,
        covariates,
    })
}

/// Reads the analysis table. Rows with missing or unparseable required fields
/// are dropped and counted; a missing column or repeated zip id is an error.
pub fn parse_zip_table<R: Read>(source: R, schema: &Schema) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let cols = resolve_columns(&headers, schema)?;
    let mut records = Vec::new();
    let mut dropped = 0;
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        match parse_row(&row, &cols) {
            Some(rec) => records.push(rec),
            None => {
                warn!("dropping data row {}: missing or unparseable field", line + 1);
                dropped += 1;
            }
        }
    }
    if records.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut ds = Dataset::from_records(records)?;
    ds.provenance.dropped = dropped;
    Ok(ds)
}

pub fn read_zip_table(path: &std::path::Path, schema: &Schema) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path)?;
    let mut ds = parse_zip_table(bytes.as_slice(), schema)?;
    ds.provenance.source = path.display().to_string();
    ds.provenance.sha256 = hex::encode(Sha256::digest(&bytes));
    ds.provenance.ingested_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(ds)
}

/// Writes the dataset in the input CSV layout using the default column names.
pub fn write_zip_table<W: Write>(ds: &Dataset, sink: W) -> Result<(), DataError> {
    let schema = Schema::default();
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(schema.header_names())?;
    for r in ds.records() {
        let mut row = vec![
            r.zip_id.clone(),
            r.region.code().to_string(),
            r.coal_influence.to_string(),
            r.pm25.to_string(),
            r.ihd_count.to_string(),
            r.person_years.to_string(),
            r.latitude.to_string(),
            r.longitude.to_string(),
        ];
        row.extend(r.covariates.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub zip_id: String,
    pub rule: String,
}

/// Lists every record-level invariant violation, in record order.
pub fn validate(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    for r in ds.records() {
        let mut flag = |rule: String| {
            out.push(Violation {
                zip_id: r.zip_id.clone(),
                rule,
            })
        };
        if !(r.person_years > 0.0) {
            flag("person_years > 0".into());
        }
        if !(r.coal_influence >= 0.0) {
            flag("coal_influence >= 0".into());
        }
        if !(r.pm25 >= 0.0) {
            flag("pm25 >= 0".into());
        }
        if !(-90.0..=90.0).contains(&r.latitude) {
            flag("latitude in [-90, 90]".into());
        }
        if !(-180.0..=180.0).contains(&r.longitude) {
            flag("longitude in [-180, 180]".into());
        }
        for name in PROPORTION_COVARIATES {
            let v = r.covariate(name).expect("proportion covariate is a known name");
            if !(0.0..=1.0).contains(&v) {
                flag(format!("{name} in [0, 1]"));
            }
        }
    }
    out
}

/// Partitions by region; every region gets an entry, possibly empty.
pub fn split_by_region(ds: &Dataset) -> BTreeMap<Region, Dataset> {
    Region::ALL
        .iter()
        .map(|&region| (region, ds.filter(|r| r.region == region)))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample_record(id: &str, region: Region) -> ZipRecord {
        let mut covariates = [0.5; N_COVARIATES];
        covariates[covariate_index("logPop").unwrap()] = 8.0;
        covariates[covariate_index("MedianHHInc").unwrap()] = 40.0;
        covariates[covariate_index("MedianHValue").unwrap()] = 90.0;
        covariates[covariate_index("mean_age").unwrap()] = 75.0;
        covariates[covariate_index("avtmpf").unwrap()] = 284.0;
        covariates[covariate_index("avrelh").unwrap()] = 0.01;
        ZipRecord {
            zip_id: id.to_string(),
            region,
            coal_influence: 3.0,
            pm25: 12.0,
            ihd_count: 20,
            person_years: 800.0,
            latitude: 40.0,
            longitude: -80.0,
            covariates,
        }
    }

    fn csv_of(records: &[ZipRecord]) -> Vec<u8> {
        let ds = Dataset {
            records: records.to_vec(),
            provenance: Provenance::default(),
        };
        let mut buf = Vec::new();
        write_zip_table(&ds, &mut buf).unwrap();
        buf
    }

    #[test]
    fn three_valid_rows() {
        let recs = vec![
            sample_record("00003", Region::Northeast),
            sample_record("00001", Region::Southeast),
            sample_record("00002", Region::IndustrialMidwest),
        ];
        let ds = parse_zip_table(&csv_of(&recs)[..], &Schema::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.provenance.dropped, 0);
        let ids: Vec<_> = ds.records().iter().map(|r| r.zip_id.as_str()).collect();
        assert_eq!(ids, ["00001", "00002", "00003"]);
    }

    #[test]
    fn blank_person_years_is_dropped() {
        let recs = vec![
            sample_record("00001", Region::Northeast),
            sample_record("00002", Region::Northeast),
        ];
        let text = String::from_utf8(csv_of(&recs)).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<&str> = lines[2].split(',').collect();
        fields[5] = "";
        lines[2] = fields.join(",");
        let ds = parse_zip_table(lines.join("\n").as_bytes(), &Schema::default()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.provenance.dropped, 1);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let recs = vec![
            sample_record("00001", Region::Northeast),
            sample_record("00001", Region::Southeast),
        ];
        let err = parse_zip_table(&csv_of(&recs)[..], &Schema::default()).unwrap_err();
        assert_eq!(err, DataError::DuplicateKey("00001".into()));
    }

    #[test]
    fn missing_column_and_empty() {
        let err = parse_zip_table("zip,region\n1,NE\n".as_bytes(), &Schema::default()).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(_)));
        let header = String::from_utf8(csv_of(&[])).unwrap();
        let err = parse_zip_table(header.as_bytes(), &Schema::default()).unwrap_err();
        assert_eq!(err, DataError::EmptyDataset);
    }

    #[test]
    fn schema_remaps_columns() {
        let recs = vec![sample_record("00001", Region::Northeast)];
        let text = String::from_utf8(csv_of(&recs)).unwrap();
        let text = text.replacen("person_years", "py", 1).replacen("PctUrban", "urban", 1);
        let mut schema = Schema {
            person_years: "py".into(),
            ..Schema::default()
        };
        schema.covariates.insert("PctUrban".into(), "urban".into());
        let ds = parse_zip_table(text.as_bytes(), &schema).unwrap();
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn validation_rules() {
        let ok = Dataset::from_records(vec![sample_record("a", Region::Northeast)]).unwrap();
        assert!(validate(&ok).is_empty());

        let mut urban = sample_record("b", Region::Northeast);
        urban.covariates[covariate_index("PctUrban").unwrap()] = 1.5;
        let v = validate(&Dataset::from_records(vec![urban]).unwrap());
        assert_eq!(v, vec![Violation { zip_id: "b".into(), rule: "PctUrban in [0, 1]".into() }]);

        let mut lat = sample_record("c", Region::Northeast);
        lat.latitude = 95.0;
        let v = validate(&Dataset::from_records(vec![lat]).unwrap());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].zip_id, "c");
    }

    #[test]
    fn drop_invalid_counts() {
        let mut bad = sample_record("b", Region::Northeast);
        bad.person_years = 0.0;
        let ds = Dataset::from_records(vec![sample_record("a", Region::Northeast), bad])
            .unwrap()
            .drop_invalid();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.provenance.invalid, 1);
    }

    #[test]
    fn region_split() {
        let ds = Dataset::from_records(vec![
            sample_record("1", Region::Northeast),
            sample_record("2", Region::Northeast),
            sample_record("3", Region::Southeast),
        ])
        .unwrap();
        let parts = split_by_region(&ds);
        assert_eq!(parts[&Region::Northeast].len(), 2);
        assert_eq!(parts[&Region::Southeast].len(), 1);
        assert_eq!(parts[&Region::IndustrialMidwest].len(), 0);

        let empty = split_by_region(&Dataset::default());
        assert_eq!(empty.len(), 3);
        assert!(empty.values().all(Dataset::is_empty));
    }
}
