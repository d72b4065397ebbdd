//! In-memory longitudinal and survival data, delimited-text ingestion and
//! subject-level splitting.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::MarkerSpec;
use crate::error::{Error, Result};

pub type SubjectId = String;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalObservation {
    pub subject: SubjectId,
    pub marker: u32,
    pub time: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub subject: SubjectId,
    /// Observed time `min(T*, C)`.
    pub time: f64,
    /// 0 = censored, otherwise the cause of the event.
    pub cause: u32,
    pub covariates: Vec<f64>,
}

impl SurvivalRecord {
    /// Event indicator for a cause-specific analysis: other causes count as
    /// censoring.
    pub fn is_event(&self, event_of_interest: u32) -> bool {
        self.cause != 0 && self.cause == event_of_interest
    }
}

/// Validated, immutable dataset. Subjects are ordered as in the survival part.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    longitudinal: Vec<LongitudinalObservation>,
    survival: Vec<SurvivalRecord>,
    marker_specs: Vec<MarkerSpec>,
    covariate_names: Vec<String>,
    index: HashMap<SubjectId, usize>,
}

impl Dataset {
    /// Validates and builds a dataset. When `marker_specs` is empty, a
    /// random intercept and slope spec is created for every marker id found.
    pub fn new(
        longitudinal: Vec<LongitudinalObservation>,
        survival: Vec<SurvivalRecord>,
        marker_specs: Vec<MarkerSpec>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(survival.len());
        for (i, rec) in survival.iter().enumerate() {
            if !(rec.time > 0.0) || !rec.time.is_finite() {
                return Err(Error::Validation(format!(
                    "subject {}: survival time must be positive, got {}",
                    rec.subject, rec.time
                )));
            }
            if rec.covariates.len() != covariate_names.len() {
                return Err(Error::Validation(format!(
                    "subject {}: {} covariates for {} covariate names",
                    rec.subject,
                    rec.covariates.len(),
                    covariate_names.len()
                )));
            }
            if rec.covariates.iter().any(|c| !c.is_finite()) {
                return Err(Error::Validation(format!(
                    "subject {}: non-finite covariate",
                    rec.subject
                )));
            }
            if index.insert(rec.subject.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate survival record for subject {}",
                    rec.subject
                )));
            }
        }

        let mut markers = BTreeSet::new();
        for obs in &longitudinal {
            let Some(&i) = index.get(&obs.subject) else {
                return Err(Error::Validation(format!(
                    "subject {} has longitudinal rows but no survival record",
                    obs.subject
                )));
            };
            if !(obs.time >= 0.0) || !obs.time.is_finite() {
                return Err(Error::Validation(format!(
                    "subject {}: negative or non-finite measurement time {}",
                    obs.subject, obs.time
                )));
            }
            if !obs.value.is_finite() {
                return Err(Error::Validation(format!(
                    "subject {}: non-finite marker value",
                    obs.subject
                )));
            }
            if obs.time > survival[i].time {
                return Err(Error::Validation(format!(
                    "subject {}: marker {} measured at {} after survival time {}",
                    obs.subject, obs.marker, obs.time, survival[i].time
                )));
            }
            markers.insert(obs.marker);
        }

        let marker_specs = if marker_specs.is_empty() {
            markers
                .iter()
                .map(|&m| MarkerSpec::linear(m, format!("marker{m}"), &[]))
                .collect()
        } else {
            marker_specs
        };
        for (i, spec) in marker_specs.iter().enumerate() {
            spec.validate()?;
            if marker_specs[..i].iter().any(|s| s.marker == spec.marker) {
                return Err(Error::Validation(format!(
                    "duplicate spec for marker {}",
                    spec.marker
                )));
            }
            for name in spec.covariate_names() {
                if !covariate_names.iter().any(|c| c == name) {
                    return Err(Error::Validation(format!(
                        "marker {} uses unknown covariate '{name}'",
                        spec.marker
                    )));
                }
            }
        }
        if let Some(m) = markers
            .iter()
            .find(|m| !marker_specs.iter().any(|s| s.marker == **m))
        {
            return Err(Error::Validation(format!("no spec for observed marker {m}")));
        }

        Ok(Dataset {
            longitudinal,
            survival,
            marker_specs,
            covariate_names,
            index,
        })
    }

    pub fn longitudinal(&self) -> &[LongitudinalObservation] {
        &self.longitudinal
    }

    pub fn survival(&self) -> &[SurvivalRecord] {
        &self.survival
    }

    pub fn marker_specs(&self) -> &[MarkerSpec] {
        &self.marker_specs
    }

    pub fn marker_spec(&self, marker: u32) -> Option<&MarkerSpec> {
        self.marker_specs.iter().find(|s| s.marker == marker)
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_subjects(&self) -> usize {
        self.survival.len()
    }

    pub fn n_markers(&self) -> usize {
        self.marker_specs.len()
    }

    pub fn subject_index(&self, subject: &str) -> Option<usize> {
        self.index.get(subject).copied()
    }

    pub fn max_cause(&self) -> u32 {
        self.survival.iter().map(|r| r.cause).max().unwrap_or(0)
    }

    /// Replaces the marker specs (re-validated).
    pub fn with_marker_specs(self, specs: Vec<MarkerSpec>) -> Result<Self> {
        Dataset::new(self.longitudinal, self.survival, specs, self.covariate_names)
    }

    /// Per-subject `(time, value)` histories of one marker, sorted by time and
    /// indexed like [`Dataset::survival`].
    pub fn marker_histories(&self, marker: u32) -> Vec<Vec<(f64, f64)>> {
        let mut out = vec![Vec::new(); self.survival.len()];
        for obs in self.longitudinal.iter().filter(|o| o.marker == marker) {
            out[self.index[&obs.subject]].push((obs.time, obs.value));
        }
        for h in &mut out {
            h.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        out
    }

    /// Dataset restricted to the given subjects (kept in original order).
    pub fn subset(&self, subjects: &[usize]) -> Result<Dataset> {
        let mut keep: Vec<usize> = subjects.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let survival: Vec<SurvivalRecord> = keep.iter().map(|&i| self.survival[i].clone()).collect();
        let ids: std::collections::HashSet<&str> = survival.iter().map(|r| r.subject.as_str()).collect();
        let longitudinal = self
            .longitudinal
            .iter()
            .filter(|o| ids.contains(o.subject.as_str()))
            .cloned()
            .collect();
        Dataset::new(
            longitudinal,
            survival,
            self.marker_specs.clone(),
            self.covariate_names.clone(),
        )
    }
}

/// How longitudinal values are laid out in the input file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum LongitudinalLayout {
    /// One row per observation with an integer marker column.
    Long { marker_column: String, value_column: String },
    /// One column per marker; marker ids are 1..K in column order.
    Wide { value_columns: Vec<String> },
}

/// Column-name mapping for [`load_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub delimiter: char,
    pub subject_column: String,
    pub time_column: String,
    pub layout: LongitudinalLayout,
    pub survival_time_column: String,
    pub cause_column: String,
    pub covariate_columns: Vec<String>,
    /// Accept repeated identical survival rows per subject (e.g. when the
    /// survival columns are read from the longitudinal file itself).
    pub collapse_repeated_survival: bool,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            delimiter: ',',
            subject_column: "id".into(),
            time_column: "time".into(),
            layout: LongitudinalLayout::Long {
                marker_column: "marker".into(),
                value_column: "value".into(),
            },
            survival_time_column: "time".into(),
            cause_column: "cause".into(),
            covariate_columns: Vec::new(),
            collapse_repeated_survival: false,
        }
    }
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "NaN" | "nan" | "." | "null")
}

fn column(headers: &csv::StringRecord, name: &str, file: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Validation(format!("{file} file has no column '{name}'")))
}

fn parse_f64(field: &str, what: &str, line: u64) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Validation(format!("line {line}: {what} '{field}' is not numeric")))?;
    if !v.is_finite() {
        return Err(Error::Validation(format!("line {line}: {what} is not finite")));
    }
    Ok(v)
}

fn reader<R: Read>(input: R, delimiter: char) -> Result<csv::Reader<R>> {
    if !delimiter.is_ascii() {
        return Err(Error::InvalidArgument(format!("delimiter {delimiter:?} is not ASCII")));
    }
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(input))
}

/// Parses the longitudinal part. Missing marker values are dropped.
pub fn read_longitudinal<R: Read>(input: R, schema: &Schema) -> Result<(Vec<LongitudinalObservation>, Vec<String>)> {
    let mut rdr = reader(input, schema.delimiter)?;
    let headers = rdr.headers()?.clone();
    let id_col = column(&headers, &schema.subject_column, "longitudinal")?;
    let time_col = column(&headers, &schema.time_column, "longitudinal")?;
    let mut out = Vec::new();
    let names;
    match &schema.layout {
        LongitudinalLayout::Long {
            marker_column,
            value_column,
        } => {
            let m_col = column(&headers, marker_column, "longitudinal")?;
            let v_col = column(&headers, value_column, "longitudinal")?;
            for rec in rdr.records() {
                let rec = rec?;
                let line = rec.position().map_or(0, |p| p.line());
                let field = |c: usize| rec.get(c).unwrap_or("");
                if is_missing(field(v_col)) {
                    continue;
                }
                let marker: u32 = field(m_col).trim().parse().map_err(|_| {
                    Error::Validation(format!("line {line}: marker '{}' is not an integer", field(m_col)))
                })?;
                out.push(LongitudinalObservation {
                    subject: field(id_col).to_string(),
                    marker,
                    time: parse_f64(field(time_col), "time", line)?,
                    value: parse_f64(field(v_col), "value", line)?,
                });
            }
            names = Vec::new();
        }
        LongitudinalLayout::Wide { value_columns } => {
            let cols = value_columns
                .iter()
                .map(|c| column(&headers, c, "longitudinal"))
                .collect::<Result<Vec<_>>>()?;
            for rec in rdr.records() {
                let rec = rec?;
                let line = rec.position().map_or(0, |p| p.line());
                let field = |c: usize| rec.get(c).unwrap_or("");
                let time = parse_f64(field(time_col), "time", line)?;
                for (k, &c) in cols.iter().enumerate() {
                    if is_missing(field(c)) {
                        continue;
                    }
                    out.push(LongitudinalObservation {
                        subject: field(id_col).to_string(),
                        marker: k as u32 + 1,
                        time,
                        value: parse_f64(field(c), "value", line)?,
                    });
                }
            }
            names = value_columns.clone();
        }
    }
    Ok((out, names))
}

/// Parses the survival part.
pub fn read_survival<R: Read>(input: R, schema: &Schema) -> Result<Vec<SurvivalRecord>> {
    let mut rdr = reader(input, schema.delimiter)?;
    let headers = rdr.headers()?.clone();
    let id_col = column(&headers, &schema.subject_column, "survival")?;
    let time_col = column(&headers, &schema.survival_time_column, "survival")?;
    let cause_col = column(&headers, &schema.cause_column, "survival")?;
    let cov_cols = schema
        .covariate_columns
        .iter()
        .map(|c| column(&headers, c, "survival"))
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<SurvivalRecord> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: usize| rec.get(c).unwrap_or("");
        let cause_str = field(cause_col).trim();
        let cause: u32 = cause_str
            .parse()
            .or_else(|_| cause_str.parse::<f64>().ok().filter(|v| v.fract() == 0.0 && *v >= 0.0).map(|v| v as u32).ok_or(()))
            .map_err(|_| Error::Validation(format!("line {line}: cause '{cause_str}' is not a non-negative integer")))?;
        let covariates = cov_cols
            .iter()
            .zip(&schema.covariate_columns)
            .map(|(&c, name)| parse_f64(field(c), name, line))
            .collect::<Result<Vec<_>>>()?;
        let r = SurvivalRecord {
            subject: field(id_col).to_string(),
            time: parse_f64(field(time_col), "survival time", line)?,
            cause,
            covariates,
        };
        if let Some(&prev) = seen.get(&r.subject) {
            if schema.collapse_repeated_survival && out[prev] == r {
                continue;
            }
            return Err(Error::Validation(format!(
                "line {line}: duplicate survival record for subject {}",
                r.subject
            )));
        }
        seen.insert(r.subject.clone(), out.len());
        out.push(r);
    }
    Ok(out)
}

/// Reads a dataset from two delimited streams.
pub fn read_dataset<L: Read, S: Read>(longitudinal: L, survival: S, schema: &Schema) -> Result<Dataset> {
    let (obs, names) = read_longitudinal(longitudinal, schema)?;
    let surv = read_survival(survival, schema)?;
    let specs = if names.is_empty() {
        Vec::new()
    } else {
        names
            .iter()
            .enumerate()
            .map(|(k, n)| MarkerSpec::linear(k as u32 + 1, n.clone(), &[]))
            .collect()
    };
    Dataset::new(obs, surv, specs, schema.covariate_columns.clone())
}

pub fn load_dataset(longitudinal_path: &Path, survival_path: &Path, schema: &Schema) -> Result<Dataset> {
    read_dataset(File::open(longitudinal_path)?, File::open(survival_path)?, schema)
}

/// Writes the dataset in the default long layout (`id,marker,time,value`
/// and `id,time,cause,<covariates...>`).
pub fn write_dataset<L: Write, S: Write>(data: &Dataset, longitudinal: L, survival: S, delimiter: char) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter as u8)
        .from_writer(longitudinal);
    w.write_record(["id", "marker", "time", "value"])?;
    for o in &data.longitudinal {
        w.write_record([
            o.subject.clone(),
            o.marker.to_string(),
            o.time.to_string(),
            o.value.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter as u8)
        .from_writer(survival);
    let mut header = vec!["id".to_string(), "time".into(), "cause".into()];
    header.extend(data.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for r in &data.survival {
        let mut row = vec![r.subject.clone(), r.time.to_string(), r.cause.to_string()];
        row.extend(r.covariates.iter().map(|c| c.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(data: &Dataset, longitudinal_path: &Path, survival_path: &Path) -> Result<()> {
    write_dataset(
        data,
        File::create(longitudinal_path)?,
        File::create(survival_path)?,
        ',',
    )
}

/// Schema matching [`write_dataset`]'s output for the given covariates.
pub fn default_schema(covariates: &[String]) -> Schema {
    Schema {
        covariate_columns: covariates.to_vec(),
        ..Schema::default()
    }
}

/// Subject-level random split; the first part receives
/// `round(fraction * n)` subjects.
pub fn split_train_validation(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction must be in (0,1), got {fraction}")));
    }
    let n = data.n_subjects();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 subjects to split".into()));
    }
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, valid) = order.split_at(n_train);
    Ok((data.subset(train)?, data.subset(valid)?))
}
