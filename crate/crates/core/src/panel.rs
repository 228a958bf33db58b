//! Patient-clustered longitudinal datasets.
//!
//! A [`PanelDataset`] holds every sample of every patient, grouped by patient
//! and period, together with the patient-level split assignment. All
//! resampling downstream treats a patient as the unit of exchangeability, so
//! the grouping here is the source of truth for cluster membership.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Ordered feature names. Models store coefficients by index into this list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.names
    }
}

impl Vocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate feature name {n} in vocabulary"
                )));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, idx: u32) -> &str {
        &self.names[idx as usize]
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    /// Order-sensitive fingerprint stored with serialized models.
    pub fn fingerprint(&self) -> u64 {
        let mut h = rng::stable_hash("vocabulary");
        for n in &self.names {
            h = rng::mix(h ^ rng::stable_hash(n));
        }
        h
    }
}

/// One prediction point: features observed at (period, month) and the binary
/// outcome that followed. Features are sparse; an absent index means 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub period: i32,
    pub month: u8,
    /// Sorted by feature index, no zero values.
    pub features: Vec<(u32, f64)>,
    pub outcome: u8,
}

impl Sample {
    pub fn new(period: i32, month: u8, mut features: Vec<(u32, f64)>, outcome: u8) -> Self {
        features.retain(|&(_, v)| v != 0.0);
        features.sort_by_key(|&(i, _)| i);
        Self {
            period,
            month,
            features,
            outcome,
        }
    }

    pub fn value(&self, feature: u32) -> f64 {
        match self.features.binary_search_by_key(&feature, |&(i, _)| i) {
            Ok(pos) => self.features[pos].1,
            Err(_) => 0.0,
        }
    }

    pub fn has_outcome(&self) -> bool {
        self.outcome == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSplit {
    Train,
    Validation,
    Test,
}

impl DataSplit {
    pub const ALL: [DataSplit; 3] = [DataSplit::Train, DataSplit::Validation, DataSplit::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            DataSplit::Train => "train",
            DataSplit::Validation => "validation",
            DataSplit::Test => "test",
        }
    }
}

impl fmt::Display for DataSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DataSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(DataSplit::Train),
            "validation" => Ok(DataSplit::Validation),
            "test" => Ok(DataSplit::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientPanel {
    pub patient_id: String,
    pub split: Option<DataSplit>,
    /// Samples per period, each list sorted by month.
    pub periods: BTreeMap<i32, Vec<Sample>>,
}

impl PatientPanel {
    pub fn samples_at(&self, period: i32) -> &[Sample] {
        self.periods.get(&period).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn sample_count(&self) -> usize {
        self.periods.values().map(Vec::len).sum()
    }

    /// Earliest (period, month) with a positive outcome.
    pub fn first_outcome(&self) -> Option<(i32, u8)> {
        self.periods
            .iter()
            .flat_map(|(&p, s)| s.iter().map(move |s| (p, s)))
            .find(|(_, s)| s.has_outcome())
            .map(|(p, s)| (p, s.month))
    }
}

/// All samples of one period restricted to a subset of patients, grouped by
/// patient. `patient` is an index into [`PanelDataset::panels`].
#[derive(Debug, Clone, Copy)]
pub struct PatientSlice<'a> {
    pub patient: usize,
    pub samples: &'a [Sample],
}

#[derive(Debug, Clone)]
pub struct PeriodView<'a> {
    pub period: i32,
    pub patients: Vec<PatientSlice<'a>>,
}

impl<'a> PeriodView<'a> {
    pub fn sample_count(&self) -> usize {
        self.patients.iter().map(|p| p.samples.len()).sum()
    }

    pub fn samples(&self) -> impl Iterator<Item = &'a Sample> + '_ {
        self.patients.iter().flat_map(|p| p.samples.iter())
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub vocabulary: Vocabulary,
    /// Sorted by patient id.
    pub panels: Vec<PatientPanel>,
}

/// Optional ingestion settings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestionSchema {
    /// Fixed vocabulary; features outside it are rejected.
    #[serde(default)]
    pub vocabulary: Option<Vec<String>>,
    /// Informational tag describing how features were windowed.
    #[serde(default)]
    pub feature_window: Option<String>,
}

#[derive(Deserialize)]
struct RawRecord {
    patient_id: String,
    period: i64,
    month: i64,
    y: serde_json::Value,
    #[serde(default)]
    features: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    patient_id: &'a str,
    period: i32,
    month: u8,
    y: u8,
    features: BTreeMap<&'a str, f64>,
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    patient_id: String,
    split: String,
}

impl PanelDataset {
    /// Group `(patient_id, sample)` pairs into panels.
    pub fn from_records(
        vocabulary: Vocabulary,
        records: impl IntoIterator<Item = (String, Sample)>,
    ) -> Result<Self> {
        let mut by_patient: BTreeMap<String, BTreeMap<i32, Vec<Sample>>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (line0, (pid, s)) in records.into_iter().enumerate() {
            if !seen.insert((pid.clone(), s.period, s.month)) {
                return Err(Error::DuplicateRecord {
                    line: line0 + 1,
                    patient_id: pid,
                    period: s.period,
                    month: s.month,
                });
            }
            by_patient
                .entry(pid)
                .or_default()
                .entry(s.period)
                .or_default()
                .push(s);
        }
        let panels = by_patient
            .into_iter()
            .map(|(patient_id, mut periods)| {
                for v in periods.values_mut() {
                    v.sort_by_key(|s| s.month);
                }
                PatientPanel {
                    patient_id,
                    split: None,
                    periods,
                }
            })
            .collect();
        Ok(Self { vocabulary, panels })
    }

    pub fn patient_count(&self) -> usize {
        self.panels.len()
    }

    pub fn sample_count(&self) -> usize {
        self.panels.iter().map(PatientPanel::sample_count).sum()
    }

    pub fn periods(&self) -> Vec<i32> {
        let set: BTreeSet<i32> = self
            .panels
            .iter()
            .flat_map(|p| p.periods.keys().copied())
            .collect();
        set.into_iter().collect()
    }

    pub fn patient_index(&self, patient_id: &str) -> Option<usize> {
        self.panels
            .binary_search_by(|p| p.patient_id.as_str().cmp(patient_id))
            .ok()
    }

    /// Samples of `period` belonging to patients assigned to any of `splits`.
    pub fn view(&self, period: i32, splits: &[DataSplit]) -> PeriodView<'_> {
        let patients = self
            .panels
            .iter()
            .enumerate()
            .filter(|(_, p)| p.split.is_some_and(|s| splits.contains(&s)))
            .filter_map(|(i, p)| {
                let samples = p.samples_at(period);
                (!samples.is_empty()).then_some(PatientSlice {
                    patient: i,
                    samples,
                })
            })
            .collect();
        PeriodView { period, patients }
    }

    /// Samples of `period` for every patient, ignoring splits.
    pub fn view_all(&self, period: i32) -> PeriodView<'_> {
        let patients = self
            .panels
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let samples = p.samples_at(period);
                (!samples.is_empty()).then_some(PatientSlice {
                    patient: i,
                    samples,
                })
            })
            .collect();
        PeriodView { period, patients }
    }

    pub fn split_of(&self, patient_id: &str) -> Option<DataSplit> {
        self.patient_index(patient_id)
            .and_then(|i| self.panels[i].split)
    }

    pub fn has_splits(&self) -> bool {
        !self.panels.is_empty() && self.panels.iter().all(|p| p.split.is_some())
    }

    pub fn patients_in(&self, split: DataSplit) -> BTreeSet<&str> {
        self.panels
            .iter()
            .filter(|p| p.split == Some(split))
            .map(|p| p.patient_id.as_str())
            .collect()
    }

    /// Read the line-oriented JSON format.
    pub fn load(path: impl AsRef<Path>, schema: &IngestionSchema) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file), schema)
    }

    pub fn read(reader: impl BufRead, schema: &IngestionSchema) -> Result<Self> {
        let declared = schema
            .vocabulary
            .as_ref()
            .map(|v| Vocabulary::new(v.clone()))
            .transpose()?;
        let mut raw: Vec<(usize, String, i32, u8, u8, BTreeMap<String, f64>)> = Vec::new();
        let mut seen_features = BTreeSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let y = match rec.y.as_i64() {
                Some(0) => 0u8,
                Some(1) => 1u8,
                _ => {
                    return Err(Error::InvalidOutcome {
                        line: line_no,
                        value: rec.y.to_string(),
                    })
                }
            };
            if !(1..=12).contains(&rec.month) {
                return Err(Error::InvalidMonth {
                    line: line_no,
                    value: rec.month,
                });
            }
            let period = i32::try_from(rec.period).map_err(|_| Error::Parse {
                line: line_no,
                message: format!("period {} out of range", rec.period),
            })?;
            for (name, v) in &rec.features {
                if !v.is_finite() {
                    return Err(Error::NonFiniteFeature {
                        line: line_no,
                        feature: name.clone(),
                    });
                }
                match &declared {
                    Some(voc) if voc.get(name).is_none() => {
                        return Err(Error::UnknownFeature {
                            line: line_no,
                            feature: name.clone(),
                        })
                    }
                    Some(_) => {}
                    None => {
                        seen_features.insert(name.clone());
                    }
                }
            }
            raw.push((line_no, rec.patient_id, period, rec.month as u8, y, rec.features));
        }
        let vocabulary = match declared {
            Some(v) => v,
            None => Vocabulary::new(seen_features.into_iter().collect())?,
        };
        let mut by_patient: BTreeMap<String, BTreeMap<i32, Vec<Sample>>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (line, pid, period, month, y, feats) in raw {
            if !seen.insert((pid.clone(), period, month)) {
                return Err(Error::DuplicateRecord {
                    line,
                    patient_id: pid,
                    period,
                    month,
                });
            }
            let features = feats
                .into_iter()
                .map(|(n, v)| (vocabulary.get(&n).expect("validated above"), v))
                .collect();
            by_patient
                .entry(pid)
                .or_default()
                .entry(period)
                .or_default()
                .push(Sample::new(period, month, features, y));
        }
        let panels = by_patient
            .into_iter()
            .map(|(patient_id, mut periods)| {
                for v in periods.values_mut() {
                    v.sort_by_key(|s| s.month);
                }
                PatientPanel {
                    patient_id,
                    split: None,
                    periods,
                }
            })
            .collect();
        Ok(Self { vocabulary, panels })
    }

    pub fn write(&self, writer: impl Write) -> Result<()> {
        let mut w = BufWriter::new(writer);
        for p in &self.panels {
            for samples in p.periods.values() {
                for s in samples {
                    let rec = OutRecord {
                        patient_id: &p.patient_id,
                        period: s.period,
                        month: s.month,
                        y: s.outcome,
                        features: s
                            .features
                            .iter()
                            .map(|&(i, v)| (self.vocabulary.name(i), v))
                            .collect(),
                    };
                    serde_json::to_writer(&mut w, &rec)?;
                    w.write_all(b"\n")?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn store(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(std::fs::File::create(path)?)
    }

    /// Schema that reproduces this dataset's vocabulary on reload.
    pub fn schema(&self) -> IngestionSchema {
        IngestionSchema {
            vocabulary: Some(self.vocabulary.names().to_vec()),
            feature_window: None,
        }
    }

    pub fn write_splits(&self, writer: impl Write) -> Result<()> {
        let mut w = BufWriter::new(writer);
        for p in &self.panels {
            if let Some(s) = p.split {
                serde_json::to_writer(
                    &mut w,
                    &SplitRecord {
                        patient_id: p.patient_id.clone(),
                        split: s.as_str().to_string(),
                    },
                )?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Apply a split sidecar. Every patient must receive an assignment.
    pub fn read_splits(&mut self, reader: impl BufRead) -> Result<()> {
        let mut assigned = vec![None; self.panels.len()];
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SplitRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let split: DataSplit = rec.split.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("unknown split {}", rec.split),
            })?;
            if let Some(idx) = self.patient_index(&rec.patient_id) {
                assigned[idx] = Some(split);
            }
        }
        if let Some(missing) = assigned.iter().position(Option::is_none) {
            return Err(Error::InvalidArgument(format!(
                "patient {} has no split assignment",
                self.panels[missing].patient_id
            )));
        }
        for (p, s) in self.panels.iter_mut().zip(assigned) {
            p.split = s;
        }
        Ok(())
    }
}

/// Proportions for train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.validation, self.test];
        if all.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(Error::InvalidArgument(
                "split fractions must be positive".into(),
            ));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

/// Number of validation and test members for a stratum of size `n`.
/// Nearest rounding with halves rounded down; train takes the remainder.
pub(crate) fn allocate(n: usize, validation: f64, test: f64) -> (usize, usize) {
    let round = |x: f64| {
        let f = x.floor();
        if x - f > 0.5 {
            f as usize + 1
        } else {
            f as usize
        }
    };
    let mut v = round(validation * n as f64);
    let mut t = round(test * n as f64);
    while v + t > n {
        if t >= v {
            t -= 1;
        } else {
            v -= 1;
        }
    }
    (v, t)
}

/// Assign whole patients to splits, stratified by the (period, month) of
/// their first positive outcome; never-positive patients form one stratum.
pub fn split_patients_stratified(
    dataset: &PanelDataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<PanelDataset> {
    fractions.validate()?;
    if dataset.panels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut strata: BTreeMap<Option<(i32, u8)>, Vec<usize>> = BTreeMap::new();
    for (i, p) in dataset.panels.iter().enumerate() {
        strata.entry(p.first_outcome()).or_default().push(i);
    }
    let mut out = dataset.clone();
    for (key, members) in strata {
        let label = match key {
            Some((p, m)) => format!("stratum:{p}:{m}"),
            None => "stratum:none".to_string(),
        };
        assign_stratum(&mut out, members, fractions, rng::derive(seed, &label));
    }
    Ok(out)
}

pub(crate) fn assign_stratum(
    dataset: &mut PanelDataset,
    mut members: Vec<usize>,
    fractions: SplitFractions,
    seed: u64,
) {
    let mut r = rng::rng(seed);
    members.shuffle(&mut r);
    let (n_val, n_test) = allocate(members.len(), fractions.validation, fractions.test);
    for (pos, idx) in members.into_iter().enumerate() {
        let split = if pos < n_test {
            DataSplit::Test
        } else if pos < n_test + n_val {
            DataSplit::Validation
        } else {
            DataSplit::Train
        };
        dataset.panels[idx].split = Some(split);
    }
}

/// Patient sets never/ever positive within `periods`, as sorted panel indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomePartition {
    pub never: Vec<usize>,
    pub ever: Vec<usize>,
}

pub fn partition_by_outcome(dataset: &PanelDataset, periods: &[i32]) -> Result<OutcomePartition> {
    if periods.is_empty() {
        return Err(Error::InvalidArgument("periods must be nonempty".into()));
    }
    let mut never = Vec::new();
    let mut ever = Vec::new();
    for (i, p) in dataset.panels.iter().enumerate() {
        let mut any_sample = false;
        let mut positive = false;
        for t in periods {
            let s = p.samples_at(*t);
            any_sample |= !s.is_empty();
            positive |= s.iter().any(Sample::has_outcome);
        }
        if !any_sample {
            continue;
        }
        if positive {
            ever.push(i);
        } else {
            never.push(i);
        }
    }
    Ok(OutcomePartition { never, ever })
}
