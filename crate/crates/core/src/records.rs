//! Audit data model: prediction records, the factor schema with control
//! levels, and the comma-separated record format.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token used for a missing value in record files.
pub const MISSING: &str = "NA";

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub const HEADER: [&str; 13] = [
    "patch_id",
    "patient_id",
    "truth",
    "score",
    "predicted",
    "race",
    "age_group",
    "density",
    "pathology",
    "mass",
    "asymmetry",
    "ad",
    "calcification",
];

/// Categorical attributes a record can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Race,
    AgeGroup,
    Density,
    Pathology,
    Mass,
    Asymmetry,
    #[serde(rename = "ad")]
    ArchDistortion,
    Calcification,
}

impl Variable {
    pub const ALL: [Variable; 8] = [
        Variable::Race,
        Variable::AgeGroup,
        Variable::Density,
        Variable::Pathology,
        Variable::Mass,
        Variable::Asymmetry,
        Variable::ArchDistortion,
        Variable::Calcification,
    ];

    pub const FINDINGS: [Variable; 4] = [
        Variable::Mass,
        Variable::Asymmetry,
        Variable::ArchDistortion,
        Variable::Calcification,
    ];

    /// Column name in the record file; also the key used in config files.
    pub fn column(self) -> &'static str {
        match self {
            Variable::Race => "race",
            Variable::AgeGroup => "age_group",
            Variable::Density => "density",
            Variable::Pathology => "pathology",
            Variable::Mass => "mass",
            Variable::Asymmetry => "asymmetry",
            Variable::ArchDistortion => "ad",
            Variable::Calcification => "calcification",
        }
    }

    pub fn from_column(name: &str) -> Option<Variable> {
        Variable::ALL.into_iter().find(|v| v.column() == name)
    }

    pub fn is_finding(self) -> bool {
        Variable::FINDINGS.contains(&self)
    }

    /// Lesion-level attributes exist only on abnormal (truth = 1) patches.
    pub fn is_lesion_level(self) -> bool {
        self == Variable::Pathology || self.is_finding()
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

/// Binary image-finding flags. Each may be missing independently.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Findings {
    pub mass: Option<bool>,
    pub asymmetry: Option<bool>,
    pub ad: Option<bool>,
    pub calcification: Option<bool>,
}

impl Findings {
    pub fn get(&self, v: Variable) -> Option<bool> {
        match v {
            Variable::Mass => self.mass,
            Variable::Asymmetry => self.asymmetry,
            Variable::ArchDistortion => self.ad,
            Variable::Calcification => self.calcification,
            _ => None,
        }
    }

    fn slot(&mut self, v: Variable) -> Option<&mut Option<bool>> {
        match v {
            Variable::Mass => Some(&mut self.mass),
            Variable::Asymmetry => Some(&mut self.asymmetry),
            Variable::ArchDistortion => Some(&mut self.ad),
            Variable::Calcification => Some(&mut self.calcification),
            _ => None,
        }
    }

    pub fn any_present(&self) -> bool {
        Variable::FINDINGS.iter().any(|&v| self.get(v).is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub patch_id: String,
    pub patient_id: String,
    /// true = abnormal (positive) patch.
    pub truth: bool,
    pub score: Option<f64>,
    pub predicted: Option<bool>,
    pub race: Option<String>,
    pub age_group: Option<String>,
    pub density: Option<String>,
    pub pathology: Option<String>,
    pub findings: Findings,
}

impl PredictionRecord {
    pub fn new(patch_id: impl Into<String>, patient_id: impl Into<String>, truth: bool) -> Self {
        Self {
            patch_id: patch_id.into(),
            patient_id: patient_id.into(),
            truth,
            score: None,
            predicted: None,
            race: None,
            age_group: None,
            density: None,
            pathology: None,
            findings: Findings::default(),
        }
    }

    /// Level of `v` as it appears in the record file. Findings map to "0"/"1".
    pub fn level(&self, v: Variable) -> Option<&str> {
        match v {
            Variable::Race => self.race.as_deref(),
            Variable::AgeGroup => self.age_group.as_deref(),
            Variable::Density => self.density.as_deref(),
            Variable::Pathology => self.pathology.as_deref(),
            _ => self
                .findings
                .get(v)
                .map(|flag| if flag { "1" } else { "0" }),
        }
    }

    pub fn set_level(&mut self, v: Variable, value: Option<&str>) {
        let owned = value.map(str::to_string);
        match v {
            Variable::Race => self.race = owned,
            Variable::AgeGroup => self.age_group = owned,
            Variable::Density => self.density = owned,
            Variable::Pathology => self.pathology = owned,
            _ => {
                if let Some(slot) = self.findings.slot(v) {
                    *slot = value.map(|s| s == "1");
                }
            }
        }
    }

    pub fn has_prediction(&self) -> bool {
        self.score.is_some() || self.predicted.is_some()
    }
}

/// Predicted label for `record`: the explicit label when present, otherwise
/// `score >= threshold`.
pub fn derive_predicted(record: &PredictionRecord, threshold: f64) -> Result<bool> {
    match (record.predicted, record.score) {
        (Some(p), _) => Ok(p),
        (None, Some(s)) => Ok(s >= threshold),
        (None, None) => Err(Error::NoPrediction {
            patch_id: record.patch_id.clone(),
        }),
    }
}

/// One categorical variable with its ordered levels and control level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub variable: Variable,
    pub levels: Vec<String>,
    pub control: String,
    /// Display label per level, parallel to `levels`.
    pub labels: Vec<String>,
}

impl VariableSpec {
    pub fn new(variable: Variable, levels: &[&str], control: &str) -> Result<Self> {
        let levels: Vec<String> = levels.iter().map(|s| s.to_string()).collect();
        let labels = levels.clone();
        let spec = Self {
            variable,
            levels,
            control: control.to_string(),
            labels,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_labels(mut self, labels: &[&str]) -> Result<Self> {
        if labels.len() != self.levels.len() {
            return Err(Error::Schema(format!(
                "{}: {} labels for {} levels",
                self.variable,
                labels.len(),
                self.levels.len()
            )));
        }
        self.labels = labels.iter().map(|s| s.to_string()).collect();
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::Schema(format!(
                "{}: needs at least two levels",
                self.variable
            )));
        }
        let unique: HashSet<&String> = self.levels.iter().collect();
        if unique.len() != self.levels.len() {
            return Err(Error::Schema(format!("{}: duplicate levels", self.variable)));
        }
        if self.levels.iter().any(|l| l == MISSING || l.is_empty()) {
            return Err(Error::Schema(format!(
                "{}: `{MISSING}` and empty strings are reserved for missing values",
                self.variable
            )));
        }
        if !self.levels.contains(&self.control) {
            return Err(Error::Schema(format!(
                "{}: control level `{}` is not one of its levels",
                self.variable, self.control
            )));
        }
        if self.variable.is_finding() {
            let mut sorted = self.levels.clone();
            sorted.sort();
            if sorted != ["0", "1"] {
                return Err(Error::Schema(format!(
                    "{}: finding flags must have levels 0 and 1",
                    self.variable
                )));
            }
        }
        if self.labels.len() != self.levels.len() {
            return Err(Error::Schema(format!("{}: label count mismatch", self.variable)));
        }
        Ok(())
    }

    pub fn contains(&self, level: &str) -> bool {
        self.levels.iter().any(|l| l == level)
    }

    pub fn label<'a>(&'a self, level: &'a str) -> &'a str {
        self.levels
            .iter()
            .position(|l| l == level)
            .map(|i| self.labels[i].as_str())
            .unwrap_or(level)
    }

    pub fn control_label(&self) -> &str {
        self.label(&self.control)
    }

    /// Levels other than the control, in schema order.
    pub fn non_control_levels(&self) -> impl Iterator<Item = &str> {
        self.levels
            .iter()
            .filter(move |l| **l != self.control)
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSchema {
    pub variables: Vec<VariableSpec>,
}

impl FactorSchema {
    pub fn new(variables: Vec<VariableSpec>) -> Result<Self> {
        let schema = Self { variables };
        schema.validate()?;
        Ok(schema)
    }

    /// Levels, controls and display labels of the mammography audit:
    /// White, <50, density A, never biopsied, and finding absent.
    pub fn mammography() -> Self {
        let finding = |v: Variable, name: &str| {
            VariableSpec::new(v, &["0", "1"], "0")
                .and_then(|s| s.with_labels(&[&format!("No {name}"), name]))
                .expect("static schema")
        };
        let variables = vec![
            VariableSpec::new(Variable::Race, &["White", "Black", "Other"], "White")
                .expect("static schema"),
            VariableSpec::new(Variable::AgeGroup, &["<50", "50-60", "60-70", ">70"], "<50")
                .and_then(|s| s.with_labels(&["<50y/o", "50-60y/o", "60-70y/o", ">70y/o"]))
                .expect("static schema"),
            VariableSpec::new(Variable::Density, &["A", "B", "C", "D"], "A")
                .and_then(|s| {
                    s.with_labels(&[
                        "BI-RADS density A",
                        "BI-RADS density B",
                        "BI-RADS density C",
                        "BI-RADS density D",
                    ])
                })
                .expect("static schema"),
            VariableSpec::new(
                Variable::Pathology,
                &["NeverBiopsied", "Benign", "Cancer"],
                "NeverBiopsied",
            )
            .and_then(|s| s.with_labels(&["Never Biopsied", "Benign", "Cancer"]))
            .expect("static schema"),
            finding(Variable::Mass, "Mass"),
            finding(Variable::Asymmetry, "Asymmetry"),
            finding(Variable::ArchDistortion, "AD"),
            finding(Variable::Calcification, "Calcification"),
        ];
        Self { variables }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for spec in &self.variables {
            spec.validate()?;
            if !seen.insert(spec.variable) {
                return Err(Error::Schema(format!("variable {} declared twice", spec.variable)));
            }
        }
        Ok(())
    }

    pub fn get(&self, v: Variable) -> Option<&VariableSpec> {
        self.variables.iter().find(|s| s.variable == v)
    }

    pub fn get_mut(&mut self, v: Variable) -> Option<&mut VariableSpec> {
        self.variables.iter_mut().find(|s| s.variable == v)
    }

    pub fn require(&self, v: Variable) -> Result<&VariableSpec> {
        self.get(v)
            .ok_or_else(|| Error::Schema(format!("variable {v} is not declared in the schema")))
    }
}

impl Default for FactorSchema {
    fn default() -> Self {
        Self::mammography()
    }
}

/// A row that was skipped in lenient parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Option<PathBuf>,
    /// Data rows seen in the source, before any exclusion.
    pub raw_rows: usize,
    pub rejected: Vec<RejectedRow>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<PredictionRecord>,
    pub provenance: Provenance,
}

impl Dataset {
    /// Wraps in-memory records; every record counts as a raw row.
    pub fn from_records(records: Vec<PredictionRecord>) -> Self {
        let raw_rows = records.len();
        Self {
            records,
            provenance: Provenance {
                source: None,
                raw_rows,
                rejected: Vec::new(),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn excluded_rows(&self) -> usize {
        self.provenance.raw_rows - self.records.len()
    }

    /// Keeps records matching `keep`; excluded rows accumulate in provenance.
    pub fn filter(&self, mut keep: impl FnMut(&PredictionRecord) -> bool) -> Dataset {
        Dataset {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn positives(&self) -> impl Iterator<Item = &PredictionRecord> {
        self.records.iter().filter(|r| r.truth)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &PredictionRecord> {
        self.records.iter().filter(|r| !r.truth)
    }

    /// Records with a known level for `v`.
    pub fn with_variable(&self, v: Variable) -> impl Iterator<Item = &PredictionRecord> {
        self.records.iter().filter(move |r| r.level(v).is_some())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Skip malformed rows (recording them) instead of failing.
    pub lenient: bool,
}

pub fn parse_records(path: &Path, schema: &FactorSchema) -> Result<Dataset> {
    parse_records_with(path, schema, ParseOptions::default())
}

pub fn parse_records_with(
    path: &Path,
    schema: &FactorSchema,
    options: ParseOptions,
) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dataset = read_records(file, schema, options)?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    dataset.provenance.source = Some(path.to_path_buf());
    Ok(dataset)
}

fn is_missing(field: &str) -> bool {
    field.is_empty() || field == MISSING
}

fn parse_binary(row: usize, column: &str, field: &str) -> Result<bool> {
    match field {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::Malformed {
            row,
            message: format!("`{column}` must be 0 or 1, got `{field}`"),
        }),
    }
}

pub fn read_records<R: Read>(
    reader: R,
    schema: &FactorSchema,
    options: ParseOptions,
) -> Result<Dataset> {
    schema.validate()?;
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);

    let headers = csv
        .headers()
        .map_err(|e| Error::Malformed {
            row: 1,
            message: format!("unreadable header: {e}"),
        })?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Malformed {
            row: 1,
            message: "missing header row".into(),
        });
    }
    let mut index = [0usize; 13];
    for (slot, name) in index.iter_mut().zip(HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Malformed {
                row: 1,
                message: format!("header is missing column `{name}`"),
            })?;
    }

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    let mut ids = HashSet::new();
    let mut raw_rows = 0;

    for (i, result) in csv.records().enumerate() {
        let row = result
            .as_ref()
            .ok()
            .and_then(|r| r.position())
            .map(|p| p.line() as usize)
            .unwrap_or(i + 2);
        raw_rows += 1;
        let outcome = result
            .map_err(|e| Error::Malformed {
                row,
                message: e.to_string(),
            })
            .and_then(|fields| parse_row(row, &fields, &index, schema));
        let outcome = outcome.and_then(|record| {
            if ids.contains(&record.patch_id) {
                Err(Error::DuplicatePatchId {
                    row,
                    patch_id: record.patch_id,
                })
            } else {
                Ok(record)
            }
        });
        match outcome {
            Ok(record) => {
                ids.insert(record.patch_id.clone());
                records.push(record);
            }
            Err(e) if options.lenient => rejected.push(RejectedRow {
                row,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }

    Ok(Dataset {
        records,
        provenance: Provenance {
            source: None,
            raw_rows,
            rejected,
        },
    })
}

fn parse_row(
    row: usize,
    fields: &csv::StringRecord,
    index: &[usize; 13],
    schema: &FactorSchema,
) -> Result<PredictionRecord> {
    let field = |i: usize| -> Result<&str> {
        fields.get(index[i]).ok_or_else(|| Error::Malformed {
            row,
            message: format!("missing field `{}`", HEADER[i]),
        })
    };

    let patch_id = field(0)?;
    if is_missing(patch_id) {
        return Err(Error::Malformed {
            row,
            message: "empty patch_id".into(),
        });
    }
    let mut record = PredictionRecord::new(patch_id, field(1)?, parse_binary(row, "truth", field(2)?)?);

    let score = field(3)?;
    if !is_missing(score) {
        let value: f64 = score.parse().map_err(|_| Error::Malformed {
            row,
            message: format!("score `{score}` is not a number"),
        })?;
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Malformed {
                row,
                message: format!("score {value} outside [0, 1]"),
            });
        }
        record.score = Some(value);
    }
    let predicted = field(4)?;
    if !is_missing(predicted) {
        record.predicted = Some(parse_binary(row, "predicted", predicted)?);
    }
    if !record.has_prediction() {
        return Err(Error::MissingPrediction { row });
    }

    for (offset, v) in Variable::ALL.into_iter().enumerate() {
        let value = field(5 + offset)?;
        if is_missing(value) {
            continue;
        }
        if v.is_lesion_level() && !record.truth {
            return Err(Error::Malformed {
                row,
                message: format!("`{v}` must be {MISSING} on negative (truth = 0) records"),
            });
        }
        match schema.get(v) {
            Some(spec) if spec.contains(value) => record.set_level(v, Some(value)),
            Some(_) => {
                return Err(Error::UnknownLevel {
                    row,
                    variable: v.column().to_string(),
                    value: value.to_string(),
                })
            }
            None if v.is_finding() => {
                parse_binary(row, v.column(), value)?;
                record.set_level(v, Some(value));
            }
            None => record.set_level(v, Some(value)),
        }
    }
    Ok(record)
}

fn opt_field(value: Option<&str>) -> &str {
    value.unwrap_or(MISSING)
}

/// Writes records in the same format `read_records` accepts.
pub fn write_records<W: Write>(records: &[PredictionRecord], writer: W) -> Result<()> {
    let io_err = |e: csv::Error| Error::Malformed {
        row: 0,
        message: format!("write failed: {e}"),
    };
    let mut csv = csv::WriterBuilder::new().from_writer(writer);
    csv.write_record(HEADER).map_err(io_err)?;
    for r in records {
        let score = r.score.map(|s| s.to_string());
        let predicted = r.predicted.map(|p| if p { "1" } else { "0" });
        let mut row: Vec<&str> = vec![
            &r.patch_id,
            &r.patient_id,
            if r.truth { "1" } else { "0" },
            opt_field(score.as_deref()),
            opt_field(predicted),
        ];
        row.extend(Variable::ALL.iter().map(|&v| opt_field(r.level(v))));
        csv.write_record(&row).map_err(io_err)?;
    }
    csv.flush().map_err(|e| Error::io("<records output>", e))?;
    Ok(())
}

pub fn write_records_file(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(records, std::io::BufWriter::new(file))
}
