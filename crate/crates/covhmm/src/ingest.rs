//! Raw-data ingestion: 4-hour max-binning of timestamped temperatures,
//! single-gap imputation, random oversampling, and the CSV / JSON-lines
//! file formats.
//!
//! Bin `t` covers hours `[4t, 4(t+1))` counted from the end of surgery;
//! everything past the 240-hour (10-day) study horizon is dropped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::ClassLabel;
use crate::error::{Error, Result};
use crate::hmm::{ObservedSequence, BIN_HOURS, MAX_BINS};
use crate::link::CovariateVector;

/// Plausibility window for temperature inputs, °F. Values outside are
/// rejected with a data-quality warning (Celsius-scale inputs land far
/// below the lower bound and fail loudly).
pub const TEMP_MIN_F: f64 = 90.0;
pub const TEMP_MAX_F: f64 = 110.0;

/// Hours covered by the study horizon.
pub const HORIZON_HOURS: f64 = BIN_HOURS * MAX_BINS as f64;

/// One raw temperature reading.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMeasurement {
    pub patient_id: String,
    pub hours_since_surgery: f64,
    pub temperature: f64,
}

/// A binned, labeled (or unlabeled) patient record: the unit the trainer,
/// classifier, and evaluator all consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSequence {
    pub patient_id: String,
    pub bins: ObservedSequence,
    pub covariates: CovariateVector,
    pub label: Option<ClassLabel>,
}

impl PatientSequence {
    pub fn new(
        patient_id: String,
        bins: ObservedSequence,
        covariates: CovariateVector,
        label: Option<ClassLabel>,
    ) -> Result<Self> {
        if bins.n_observed() == 0 {
            return Err(Error::AllMissing.for_patient(&patient_id));
        }
        covariates
            .validate()
            .map_err(|e| e.for_patient(&patient_id))?;
        Ok(Self {
            patient_id,
            bins,
            covariates,
            label,
        })
    }
}

/// Max-bin one patient's measurements into 4-hour intervals.
///
/// The sequence ends at the last bin containing a measurement; interior
/// empty bins are marked missing; measurements at or past the 10-day
/// horizon are dropped.
pub fn bin_measurements(measurements: &[RawMeasurement]) -> Result<ObservedSequence> {
    if measurements.is_empty() {
        return Err(Error::NoMeasurements);
    }
    let mut bins: Vec<Option<f64>> = Vec::new();
    let mut any_in_horizon = false;
    for m in measurements {
        if !m.hours_since_surgery.is_finite() || m.hours_since_surgery < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "hours_since_surgery {}",
                m.hours_since_surgery
            )));
        }
        if m.hours_since_surgery >= HORIZON_HOURS {
            continue;
        }
        any_in_horizon = true;
        let t = (m.hours_since_surgery / BIN_HOURS) as usize;
        if t >= bins.len() {
            bins.resize(t + 1, None);
        }
        bins[t] = Some(match bins[t] {
            Some(current) => current.max(m.temperature),
            None => m.temperature,
        });
    }
    if !any_in_horizon {
        return Err(Error::BeyondHorizon);
    }
    // The last bin holds a measurement by construction.
    while bins.last() == Some(&None) {
        bins.pop();
    }
    ObservedSequence::new(bins)
}

/// Fill every missing bin whose two immediate neighbors are observed with
/// their arithmetic mean. Runs of two or more missing bins, and leading or
/// trailing missing bins, are untouched. Idempotent.
pub fn impute_single_gaps(seq: &ObservedSequence) -> ObservedSequence {
    let n = seq.len();
    let mut bins: Vec<Option<f64>> = seq.iter().collect();
    for t in 1..n.saturating_sub(1) {
        if seq.get(t).is_none() {
            if let (Some(left), Some(right)) = (seq.get(t - 1), seq.get(t + 1)) {
                bins[t] = Some(0.5 * (left + right));
            }
        }
    }
    ObservedSequence::new(bins).expect("imputation preserves sequence validity")
}

/// Random oversampling: duplicate minority-class sequences (sampled with
/// replacement, seeded) until class counts are equal. Duplicates are
/// appended after the originals. Training folds only — never the test fold.
pub fn oversample(train_set: &[PatientSequence], seed: u64) -> Result<Vec<PatientSequence>> {
    let mut c_idx = Vec::new();
    let mut nc_idx = Vec::new();
    for (i, ps) in train_set.iter().enumerate() {
        match ps.label {
            Some(ClassLabel::Complication) => c_idx.push(i),
            Some(ClassLabel::NonComplication) => nc_idx.push(i),
            None => return Err(Error::Unlabeled(ps.patient_id.clone())),
        }
    }
    if c_idx.is_empty() {
        return Err(Error::SingleClass("NC".into()));
    }
    if nc_idx.is_empty() {
        return Err(Error::SingleClass("C".into()));
    }
    let mut out = train_set.to_vec();
    let (minority, deficit) = if c_idx.len() < nc_idx.len() {
        (&c_idx, nc_idx.len() - c_idx.len())
    } else {
        (&nc_idx, c_idx.len() - nc_idx.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..deficit {
        let pick = minority[rng.random_range(0..minority.len())];
        out.push(train_set[pick].clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

const MEASUREMENTS_HEADER: [&str; 3] = ["patient_id", "hours_since_surgery", "temp_f"];
const COVARIATES_HEADER: [&str; 13] = [
    "patient_id",
    "age",
    "gender",
    "surgery_hours",
    "tumor",
    "htn",
    "arrhythmia",
    "fluid_electrolyte",
    "valvular",
    "liver",
    "pulmonary",
    "diabetes",
    "label",
];

fn check_header(path: &Path, got: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got_fields: Vec<&str> = got.iter().map(str::trim).collect();
    if got_fields != expected {
        return Err(Error::CsvFormat {
            path: path.display().to_string(),
            message: format!("header {:?}, expected {:?}", got_fields, expected),
        });
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    name: &str,
    raw: &str,
) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::CsvFormat {
        path: path.display().to_string(),
        message: format!("line {line}: bad {name} value {raw:?}"),
    })
}

/// Read `measurements.csv` (`patient_id,hours_since_surgery,temp_f`).
///
/// Rows with temperatures outside the plausibility window or negative hours
/// are skipped and reported as warnings; malformed rows are hard errors.
pub fn read_measurements_csv(path: &Path) -> Result<(Vec<RawMeasurement>, Vec<String>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::CsvFormat {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    check_header(
        path,
        reader.headers().map_err(|e| Error::CsvFormat {
            path: path.display().to_string(),
            message: e.to_string(),
        })?,
        &MEASUREMENTS_HEADER,
    )?;
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| Error::CsvFormat {
            path: path.display().to_string(),
            message: format!("line {line}: {e}"),
        })?;
        let patient_id = record.get(0).unwrap_or("").trim().to_string();
        let hours: f64 = parse_field(path, line, "hours_since_surgery", record.get(1).unwrap_or(""))?;
        let temp: f64 = parse_field(path, line, "temp_f", record.get(2).unwrap_or(""))?;
        if patient_id.is_empty() {
            return Err(Error::CsvFormat {
                path: path.display().to_string(),
                message: format!("line {line}: empty patient_id"),
            });
        }
        if !(TEMP_MIN_F..=TEMP_MAX_F).contains(&temp) {
            warnings.push(format!(
                "patient {patient_id} line {line}: temperature {temp} °F outside [{TEMP_MIN_F}, {TEMP_MAX_F}], row dropped"
            ));
            continue;
        }
        if hours < 0.0 || !hours.is_finite() {
            warnings.push(format!(
                "patient {patient_id} line {line}: hours_since_surgery {hours} invalid, row dropped"
            ));
            continue;
        }
        out.push(RawMeasurement {
            patient_id,
            hours_since_surgery: hours,
            temperature: temp,
        });
    }
    Ok((out, warnings))
}

/// Read `covariates.csv`; the `label` column may be `C`, `NC`, or empty.
pub fn read_covariates_csv(
    path: &Path,
) -> Result<BTreeMap<String, (CovariateVector, Option<ClassLabel>)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::CsvFormat {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    check_header(
        path,
        reader.headers().map_err(|e| Error::CsvFormat {
            path: path.display().to_string(),
            message: e.to_string(),
        })?,
        &COVARIATES_HEADER,
    )?;
    let mut out = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| Error::CsvFormat {
            path: path.display().to_string(),
            message: format!("line {line}: {e}"),
        })?;
        let patient_id = record.get(0).unwrap_or("").trim().to_string();
        let age: f64 = parse_field(path, line, "age", record.get(1).unwrap_or(""))?;
        let gender: u8 = parse_field(path, line, "gender", record.get(2).unwrap_or(""))?;
        let surgery_hours: f64 =
            parse_field(path, line, "surgery_hours", record.get(3).unwrap_or(""))?;
        let mut flags = [0u8; 8];
        for (f, flag) in flags.iter_mut().enumerate() {
            *flag = parse_field(
                path,
                line,
                COVARIATES_HEADER[4 + f],
                record.get(4 + f).unwrap_or(""),
            )?;
        }
        let label = match record.get(12).unwrap_or("").trim() {
            "" => None,
            "C" => Some(ClassLabel::Complication),
            "NC" => Some(ClassLabel::NonComplication),
            other => {
                return Err(Error::CsvFormat {
                    path: path.display().to_string(),
                    message: format!("line {line}: label {other:?} not in {{C, NC, empty}}"),
                })
            }
        };
        let cv = CovariateVector::new(age, gender, surgery_hours, flags)
            .map_err(|e| e.for_patient(&patient_id))?;
        if out.insert(patient_id.clone(), (cv, label)).is_some() {
            return Err(Error::CsvFormat {
                path: path.display().to_string(),
                message: format!("line {line}: duplicate patient_id {patient_id}"),
            });
        }
    }
    Ok(out)
}

/// Assemble the binned dataset: group measurements per patient, bin, impute
/// single gaps, and attach covariates. Patients missing either side of the
/// join are skipped with a warning. Output is sorted by patient id.
pub fn build_dataset(
    measurements: &[RawMeasurement],
    covariates: &BTreeMap<String, (CovariateVector, Option<ClassLabel>)>,
) -> Result<(Vec<PatientSequence>, Vec<String>)> {
    let mut grouped: BTreeMap<&str, Vec<&RawMeasurement>> = BTreeMap::new();
    for m in measurements {
        grouped.entry(&m.patient_id).or_default().push(m);
    }
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (pid, group) in &grouped {
        let Some((cv, label)) = covariates.get(*pid) else {
            warnings.push(format!("patient {pid}: measurements but no covariate row, skipped"));
            continue;
        };
        let owned: Vec<RawMeasurement> = group.iter().map(|&m| m.clone()).collect();
        match bin_measurements(&owned) {
            Ok(seq) => {
                let seq = impute_single_gaps(&seq);
                out.push(PatientSequence::new(
                    pid.to_string(),
                    seq,
                    cv.clone(),
                    *label,
                )?);
            }
            Err(Error::BeyondHorizon) => {
                warnings.push(format!(
                    "patient {pid}: all measurements beyond the {HORIZON_HOURS} h horizon, skipped"
                ));
            }
            Err(e) => return Err(e.for_patient(pid)),
        }
    }
    for pid in covariates.keys() {
        if !grouped.contains_key(pid.as_str()) {
            warnings.push(format!("patient {pid}: covariates but no measurements, skipped"));
        }
    }
    Ok((out, warnings))
}

/// Write one `PatientSequence` JSON object per line.
pub fn write_dataset_jsonl<W: Write>(writer: W, dataset: &[PatientSequence]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for ps in dataset {
        serde_json::to_writer(&mut w, ps)?;
        w.write_all(b"\n").map_err(|e| Error::Io {
            path: "<writer>".into(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<writer>".into(),
        source: e,
    })?;
    Ok(())
}

pub fn write_dataset_jsonl_path(path: &Path, dataset: &[PatientSequence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset_jsonl(file, dataset)
}

pub fn read_dataset_jsonl(path: &Path) -> Result<Vec<PatientSequence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ps: PatientSequence = serde_json::from_str(&line).map_err(|e| Error::CsvFormat {
            path: path.display().to_string(),
            message: format!("line {}: {e}", i + 1),
        })?;
        if ps.bins.n_observed() == 0 {
            return Err(Error::AllMissing.for_patient(&ps.patient_id));
        }
        out.push(ps);
    }
    Ok(out)
}
