//! Canonical data model for longitudinal trial datasets: treatment arms,
//! visit schedules, intercurrent events, per-subject outcome vectors and
//! missingness masks.
//!
//! All values are immutable after construction; every transformation
//! (`analysis_view`, imputation, ...) builds a new `Dataset`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ice::Category;

/// Treatment arm index. Arm 0 is the control/reference arm; experimental
/// arms are numbered 1..K.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct Arm(pub u32);

impl Arm {
    pub const CONTROL: Arm = Arm(0);

    pub fn is_control(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One scheduled post-baseline visit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    /// 1-based visit index.
    pub index: u32,
    pub week: f64,
}

/// Ordered post-baseline visit schedule plus the primary analysis visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitSchedule {
    pub visits: Vec<Visit>,
    /// 1-based index of the primary time point; defaults to the last visit.
    pub analysis_visit: u32,
}

impl VisitSchedule {
    /// Schedule with visits indexed 1..=T at the given weeks; the analysis
    /// visit defaults to the last one.
    pub fn from_weeks(weeks: &[f64]) -> Result<Self> {
        if weeks.is_empty() {
            return Err(Error::Validation("schedule has no visits".into()));
        }
        let visits = weeks
            .iter()
            .enumerate()
            .map(|(i, &w)| Visit {
                index: i as u32 + 1,
                week: w,
            })
            .collect();
        let schedule = VisitSchedule {
            visits,
            analysis_visit: weeks.len() as u32,
        };
        schedule.check()?;
        Ok(schedule)
    }

    pub fn with_analysis_visit(mut self, visit: u32) -> Result<Self> {
        self.analysis_visit = visit;
        self.check()?;
        Ok(self)
    }

    pub fn n_visits(&self) -> usize {
        self.visits.len()
    }

    /// Position (0-based) of a 1-based visit index.
    pub fn position(&self, visit: u32) -> Option<usize> {
        if visit >= 1 && (visit as usize) <= self.visits.len() {
            Some(visit as usize - 1)
        } else {
            None
        }
    }

    pub fn analysis_position(&self) -> usize {
        self.analysis_visit as usize - 1
    }

    fn check(&self) -> Result<()> {
        if self.visits.is_empty() {
            return Err(Error::Validation("schedule has no visits".into()));
        }
        for (i, v) in self.visits.iter().enumerate() {
            if v.index != i as u32 + 1 {
                return Err(Error::Validation(format!(
                    "visit indices must be contiguous from 1; found {} at position {}",
                    v.index, i
                )));
            }
            if v.week < 0.0 || !v.week.is_finite() {
                return Err(Error::Validation(format!(
                    "visit {} has invalid week {}",
                    v.index, v.week
                )));
            }
            if i > 0 && v.week <= self.visits[i - 1].week {
                return Err(Error::Validation(format!(
                    "weeks must be strictly increasing; visit {} week {} follows week {}",
                    v.index,
                    v.week,
                    self.visits[i - 1].week
                )));
            }
        }
        if self.position(self.analysis_visit).is_none() {
            return Err(Error::Validation(format!(
                "analysis visit {} outside schedule",
                self.analysis_visit
            )));
        }
        Ok(())
    }
}

/// Recorded reason for an intercurrent event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IceReason {
    Ae,
    LackOfEfficacy,
    RescueMedication,
    InvestigatorDecision,
    SubjectDecision,
    LostToFollowup,
    ProtocolAdmin,
    Death,
    Other,
}

impl IceReason {
    pub fn as_str(self) -> &'static str {
        match self {
            IceReason::Ae => "AE",
            IceReason::LackOfEfficacy => "LoE",
            IceReason::RescueMedication => "rescue_medication",
            IceReason::InvestigatorDecision => "investigator_decision",
            IceReason::SubjectDecision => "subject_decision",
            IceReason::LostToFollowup => "lost_to_followup",
            IceReason::ProtocolAdmin => "protocol_admin",
            IceReason::Death => "death",
            IceReason::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<IceReason> {
        match s {
            "AE" | "ae" => Some(IceReason::Ae),
            "LoE" | "loe" => Some(IceReason::LackOfEfficacy),
            "rescue_medication" => Some(IceReason::RescueMedication),
            "investigator_decision" => Some(IceReason::InvestigatorDecision),
            "subject_decision" => Some(IceReason::SubjectDecision),
            "lost_to_followup" => Some(IceReason::LostToFollowup),
            "protocol_admin" => Some(IceReason::ProtocolAdmin),
            "death" => Some(IceReason::Death),
            "other" => Some(IceReason::Other),
            _ => None,
        }
    }
}

/// The governing intercurrent event of a subject (earliest onset wins; at most
/// one per subject).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IceEvent {
    /// First visit index whose data are affected by the event.
    pub visit_of_onset: u32,
    pub reason: IceReason,
    /// At least one persistent adverse event was reported before
    /// discontinuation.
    pub persistent_ae_before_dc: bool,
    /// Efficacy had deteriorated before discontinuation.
    pub efficacy_deteriorated_before_dc: bool,
}

/// One randomized patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub arm: Arm,
    /// Baseline value of the endpoint (endpoint units).
    pub baseline: f64,
    /// Per-visit outcomes; `None` = missing. Length equals the schedule.
    pub outcomes: Vec<Option<f64>>,
    /// Per-visit flags marking values collected after ICE onset.
    pub post_ice_flags: Vec<bool>,
    pub ice: Option<IceEvent>,
    /// Derived classification of `ice`; filled by `ice::classify_dataset`.
    pub ice_category: Option<Category>,
}

impl SubjectRecord {
    /// Number of unaffected post-baseline visits (the deviation index `k`):
    /// visits 1..=k are on treatment, visits k+1..=T are affected by the ICE.
    /// Subjects without an ICE have k = T.
    pub fn deviation_index(&self, n_visits: usize) -> usize {
        match &self.ice {
            Some(ice) => (ice.visit_of_onset as usize).saturating_sub(1).min(n_visits),
            None => n_visits,
        }
    }

    pub fn observed_positions(&self) -> Vec<usize> {
        self.outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|_| i))
            .collect()
    }

    pub fn missing_positions(&self) -> Vec<usize> {
        self.outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, v)| if v.is_none() { Some(i) } else { None })
            .collect()
    }
}

/// How post-ICE data enter an analysis dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataInclusionPolicy {
    /// Only data collected on treatment before ICEs; every value flagged as
    /// post-ICE is set to missing.
    OnTreatmentOnly,
    /// All available data, regardless of ICEs.
    AllAvailable,
}

/// A complete longitudinal dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schedule: VisitSchedule,
    pub subjects: Vec<SubjectRecord>,
    pub endpoint_name: String,
    /// Smaller outcome means better efficacy (e.g. change in HbA1c).
    pub smaller_is_better: bool,
    /// Outcomes are stored as change from baseline (`true`) or raw values.
    pub values_are_change: bool,
}

/// One invariant violation found by `validate`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// Subject id when the violation is subject-scoped.
    pub subject: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    DuplicateId,
    BadSchedule,
    LengthMismatch,
    FlagsWithoutIce,
    NonMonotoneFlags,
    FlagBeforeOnset,
    OnsetOutOfRange,
    MissingControlArm,
    EmptyArm,
    NonFiniteValue,
}

/// Result of dataset validation. An empty report means the dataset is
/// analyzable.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, code: ViolationCode, subject: Option<&str>, message: String) {
        self.violations.push(Violation {
            code,
            subject: subject.map(str::to_string),
            message,
        });
    }
}

impl Dataset {
    /// Arms present in the dataset, sorted, control first.
    pub fn arms(&self) -> Vec<Arm> {
        let set: BTreeSet<Arm> = self.subjects.iter().map(|s| s.arm).collect();
        set.into_iter().collect()
    }

    pub fn n_in_arm(&self, arm: Arm) -> usize {
        self.subjects.iter().filter(|s| s.arm == arm).count()
    }

    pub fn n_visits(&self) -> usize {
        self.schedule.n_visits()
    }

    /// Mean baseline over all subjects (the covariate value at which
    /// least-squares means are evaluated).
    pub fn mean_baseline(&self) -> f64 {
        let n = self.subjects.len();
        if n == 0 {
            return f64::NAN;
        }
        self.subjects.iter().map(|s| s.baseline).sum::<f64>() / n as f64
    }

    /// Check every structural invariant and report violations.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let t = self.schedule.n_visits();

        if let Err(Error::Validation(msg)) = self.schedule.check() {
            report.push(ViolationCode::BadSchedule, None, msg);
        }

        let mut seen = BTreeSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id.clone()) {
                report.push(
                    ViolationCode::DuplicateId,
                    Some(&s.id),
                    format!("duplicate subject id `{}`", s.id),
                );
            }
        }

        for s in &self.subjects {
            if s.outcomes.len() != t || s.post_ice_flags.len() != t {
                report.push(
                    ViolationCode::LengthMismatch,
                    Some(&s.id),
                    format!(
                        "subject `{}` has {} outcomes / {} flags for {} scheduled visits",
                        s.id,
                        s.outcomes.len(),
                        s.post_ice_flags.len(),
                        t
                    ),
                );
                continue;
            }
            if !s.baseline.is_finite() {
                report.push(
                    ViolationCode::NonFiniteValue,
                    Some(&s.id),
                    format!("subject `{}` has non-finite baseline", s.id),
                );
            }
            for (i, v) in s.outcomes.iter().enumerate() {
                if let Some(x) = v {
                    if !x.is_finite() {
                        report.push(
                            ViolationCode::NonFiniteValue,
                            Some(&s.id),
                            format!("subject `{}` has non-finite value at visit {}", s.id, i + 1),
                        );
                    }
                }
            }
            // flags monotone non-decreasing
            for i in 1..t {
                if s.post_ice_flags[i - 1] && !s.post_ice_flags[i] {
                    report.push(
                        ViolationCode::NonMonotoneFlags,
                        Some(&s.id),
                        format!(
                            "subject `{}` post-ICE flags drop from visit {} to {}",
                            s.id,
                            i,
                            i + 1
                        ),
                    );
                    break;
                }
            }
            match &s.ice {
                None => {
                    if s.post_ice_flags.iter().any(|&f| f) {
                        report.push(
                            ViolationCode::FlagsWithoutIce,
                            Some(&s.id),
                            format!("subject `{}` has post-ICE flags but no ICE", s.id),
                        );
                    }
                }
                Some(ice) => {
                    if self.schedule.position(ice.visit_of_onset).is_none() {
                        report.push(
                            ViolationCode::OnsetOutOfRange,
                            Some(&s.id),
                            format!(
                                "subject `{}` ICE onset visit {} outside schedule",
                                s.id, ice.visit_of_onset
                            ),
                        );
                    } else {
                        let onset_pos = ice.visit_of_onset as usize - 1;
                        for (i, &flag) in s.post_ice_flags.iter().enumerate() {
                            if flag && i < onset_pos {
                                report.push(
                                    ViolationCode::FlagBeforeOnset,
                                    Some(&s.id),
                                    format!(
                                        "subject `{}` flagged post-ICE at visit {} before onset {}",
                                        s.id,
                                        i + 1,
                                        ice.visit_of_onset
                                    ),
                                );
                                break;
                            }
                        }
                    }
                }
            }
        }

        let arms = self.arms();
        if !arms.contains(&Arm::CONTROL) {
            report.push(
                ViolationCode::MissingControlArm,
                None,
                "no control arm (arm 0) present".into(),
            );
        }
        for arm in &arms {
            if self.n_in_arm(*arm) == 0 {
                report.push(
                    ViolationCode::EmptyArm,
                    None,
                    format!("arm {} is empty", arm),
                );
            }
        }

        report
    }

    /// Project the dataset through a data-inclusion policy.
    ///
    /// `OnTreatmentOnly` sets every outcome flagged as post-ICE to missing;
    /// `AllAvailable` returns outcomes unchanged. Both are idempotent.
    pub fn analysis_view(&self, policy: DataInclusionPolicy) -> Result<Dataset> {
        let report = self.validate();
        if !report.is_clean() {
            return Err(Error::Validation(format!(
                "dataset has {} violation(s); first: {}",
                report.violations.len(),
                report.violations[0].message
            )));
        }
        match policy {
            DataInclusionPolicy::AllAvailable => Ok(self.clone()),
            DataInclusionPolicy::OnTreatmentOnly => {
                let mut out = self.clone();
                for s in &mut out.subjects {
                    for (v, &flag) in s.outcomes.iter_mut().zip(&s.post_ice_flags) {
                        if flag {
                            *v = None;
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// CSV schema (one row per subject-visit)
//
// subject_id, arm, visit, week, baseline, value, post_ice, ice_visit,
// ice_reason, persistent_ae, efficacy_deteriorated
//
// Header row required; UTF-8; '.' decimal separator; empty value = missing;
// empty ice_visit = no ICE. ICE columns repeat identically on every row of a
// subject.
// ---------------------------------------------------------------------------

pub const CSV_HEADER: [&str; 11] = [
    "subject_id",
    "arm",
    "visit",
    "week",
    "baseline",
    "value",
    "post_ice",
    "ice_visit",
    "ice_reason",
    "persistent_ae",
    "efficacy_deteriorated",
];

/// Dataset-level metadata that the row schema does not carry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub endpoint_name: String,
    pub smaller_is_better: bool,
    pub values_are_change: bool,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        DatasetMeta {
            endpoint_name: "change".into(),
            smaller_is_better: true,
            values_are_change: true,
        }
    }
}

struct RowAccumulator {
    id: String,
    arm: Arm,
    baseline: f64,
    // (position, value, post_ice)
    rows: Vec<(usize, Option<f64>, bool)>,
    ice: Option<IceEvent>,
    first_line: u64,
}

fn parse_field<T: std::str::FromStr>(s: &str, line: u64, what: &str) -> Result<T> {
    s.trim()
        .parse::<T>()
        .map_err(|_| Error::Csv {
            line,
            msg: format!("cannot parse {what} from `{s}`"),
        })
}

fn parse_bool01(s: &str, line: u64, what: &str) -> Result<bool> {
    match s.trim() {
        "0" | "" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Csv {
            line,
            msg: format!("{what} must be 0 or 1, got `{other}`"),
        }),
    }
}

/// Read a dataset from the subject-visit CSV schema.
pub fn read_dataset_csv<R: Read>(reader: R, meta: &DatasetMeta) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    {
        let headers = rdr.headers().map_err(|e| Error::Csv {
            line: 1,
            msg: e.to_string(),
        })?;
        let got: Vec<&str> = headers.iter().collect();
        if got != CSV_HEADER {
            return Err(Error::Csv {
                line: 1,
                msg: format!("unexpected header {:?}; expected {:?}", got, CSV_HEADER),
            });
        }
    }

    let mut visit_weeks: Vec<(u32, f64)> = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut acc: std::collections::BTreeMap<String, RowAccumulator> =
        std::collections::BTreeMap::new();

    for (i, record) in rdr.records().enumerate() {
        let line = i as u64 + 2; // header is line 1
        let record = record.map_err(|e| Error::Csv {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != CSV_HEADER.len() {
            return Err(Error::Csv {
                line,
                msg: format!("expected {} fields, got {}", CSV_HEADER.len(), record.len()),
            });
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(Error::Csv {
                line,
                msg: "empty subject_id".into(),
            });
        }
        let arm = Arm(parse_field::<u32>(&record[1], line, "arm")?);
        let visit: u32 = parse_field(&record[2], line, "visit")?;
        if visit < 1 {
            return Err(Error::Csv {
                line,
                msg: "visit index must be >= 1".into(),
            });
        }
        let week: f64 = parse_field(&record[3], line, "week")?;
        let baseline: f64 = parse_field(&record[4], line, "baseline")?;
        let value: Option<f64> = if record[5].is_empty() {
            None
        } else {
            Some(parse_field(&record[5], line, "value")?)
        };
        let post_ice = parse_bool01(&record[6], line, "post_ice")?;
        let ice_visit: Option<u32> = if record[7].is_empty() {
            None
        } else {
            Some(parse_field(&record[7], line, "ice_visit")?)
        };
        let ice = match ice_visit {
            None => None,
            Some(v) => {
                let reason = IceReason::parse(&record[8]).ok_or_else(|| Error::Csv {
                    line,
                    msg: format!("unknown ice_reason `{}`", &record[8]),
                })?;
                Some(IceEvent {
                    visit_of_onset: v,
                    reason,
                    persistent_ae_before_dc: parse_bool01(&record[9], line, "persistent_ae")?,
                    efficacy_deteriorated_before_dc: parse_bool01(
                        &record[10],
                        line,
                        "efficacy_deteriorated",
                    )?,
                })
            }
        };

        match visit_weeks.iter().find(|(v, _)| *v == visit) {
            None => visit_weeks.push((visit, week)),
            Some((_, w)) if *w != week => {
                return Err(Error::Csv {
                    line,
                    msg: format!("visit {} week {} conflicts with earlier week {}", visit, week, w),
                })
            }
            _ => {}
        }

        let entry = acc.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            RowAccumulator {
                id,
                arm,
                baseline,
                rows: Vec::new(),
                ice,
                first_line: line,
            }
        });
        if entry.arm != arm {
            return Err(Error::Csv {
                line,
                msg: format!("subject `{}` changes arm (first seen line {})", entry.id, entry.first_line),
            });
        }
        if entry.baseline != baseline {
            return Err(Error::Csv {
                line,
                msg: format!("subject `{}` changes baseline", entry.id),
            });
        }
        if entry.ice != ice {
            return Err(Error::Csv {
                line,
                msg: format!("subject `{}` has inconsistent ICE columns", entry.id),
            });
        }
        entry.rows.push((visit as usize - 1, value, post_ice));
    }

    visit_weeks.sort_by(|a, b| a.0.cmp(&b.0));
    let weeks: Vec<f64> = visit_weeks.iter().map(|(_, w)| *w).collect();
    for (i, (v, _)) in visit_weeks.iter().enumerate() {
        if *v != i as u32 + 1 {
            return Err(Error::Validation(format!(
                "visit indices must cover 1..=T contiguously; missing visit {}",
                i + 1
            )));
        }
    }
    let schedule = VisitSchedule::from_weeks(&weeks)?;
    let t = schedule.n_visits();

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let a = acc.remove(&id).expect("accumulated");
        let mut outcomes = vec![None; t];
        let mut flags = vec![false; t];
        let mut seen = vec![false; t];
        for (pos, value, post) in a.rows {
            if pos >= t {
                return Err(Error::Validation(format!(
                    "subject `{}` has row for visit {} beyond schedule",
                    a.id,
                    pos + 1
                )));
            }
            if seen[pos] {
                return Err(Error::Validation(format!(
                    "subject `{}` has duplicate row for visit {}",
                    a.id,
                    pos + 1
                )));
            }
            seen[pos] = true;
            outcomes[pos] = value;
            flags[pos] = post;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Validation(format!(
                "subject `{}` is missing rows for some visits (one row per scheduled visit required)",
                a.id
            )));
        }
        subjects.push(SubjectRecord {
            id: a.id,
            arm: a.arm,
            baseline: a.baseline,
            outcomes,
            post_ice_flags: flags,
            ice: a.ice,
            ice_category: None,
        });
    }

    Ok(Dataset {
        schedule,
        subjects,
        endpoint_name: meta.endpoint_name.clone(),
        smaller_is_better: meta.smaller_is_better,
        values_are_change: meta.values_are_change,
    })
}

pub fn read_dataset_csv_path(path: &Path, meta: &DatasetMeta) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset_csv(std::io::BufReader::new(file), meta)
}

fn fmt_value(v: f64) -> String {
    // Shortest round-trip representation keeps files byte-stable.
    format!("{}", v)
}

/// Write a dataset in the subject-visit CSV schema.
pub fn write_dataset_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(CSV_HEADER)
        .map_err(|e| Error::numerical("csv", e.to_string()))?;
    for s in &dataset.subjects {
        for (pos, visit) in dataset.schedule.visits.iter().enumerate() {
            let (ice_visit, reason, pae, edet) = match &s.ice {
                Some(ice) => (
                    ice.visit_of_onset.to_string(),
                    ice.reason.as_str().to_string(),
                    if ice.persistent_ae_before_dc { "1" } else { "0" }.to_string(),
                    if ice.efficacy_deteriorated_before_dc { "1" } else { "0" }.to_string(),
                ),
                None => (String::new(), String::new(), "0".into(), "0".into()),
            };
            wtr.write_record([
                s.id.as_str(),
                &s.arm.to_string(),
                &visit.index.to_string(),
                &fmt_value(visit.week),
                &fmt_value(s.baseline),
                &s.outcomes[pos].map(fmt_value).unwrap_or_default(),
                if s.post_ice_flags[pos] { "1" } else { "0" },
                &ice_visit,
                &reason,
                &pae,
                &edet,
            ])
            .map_err(|e| Error::numerical("csv", e.to_string()))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_dataset_csv_path(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset_csv(dataset, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: &str, arm: u32, outcomes: Vec<Option<f64>>) -> SubjectRecord {
        let t = outcomes.len();
        SubjectRecord {
            id: id.into(),
            arm: Arm(arm),
            baseline: 8.0,
            outcomes,
            post_ice_flags: vec![false; t],
            ice: None,
            ice_category: None,
        }
    }

    fn small_dataset() -> Dataset {
        Dataset {
            schedule: VisitSchedule::from_weeks(&[4.0, 8.0, 12.0, 16.0]).unwrap(),
            subjects: vec![
                subject("S01", 0, vec![Some(0.1), Some(0.2), Some(0.3), Some(0.4)]),
                subject("S02", 1, vec![Some(-0.1), Some(-0.2), Some(-0.3), Some(-0.4)]),
            ],
            endpoint_name: "change".into(),
            smaller_is_better: true,
            values_are_change: true,
        }
    }

    #[test]
    fn duplicate_id_reported() {
        let mut ds = small_dataset();
        ds.subjects.push(subject("S01", 0, vec![None; 4]));
        let report = ds.validate();
        let dups: Vec<_> = report
            .violations
            .iter()
            .filter(|v| v.code == ViolationCode::DuplicateId)
            .collect();
        assert_eq!(dups.len(), 1);
    }

    #[test]
    fn non_monotone_flags_reported() {
        let mut ds = small_dataset();
        ds.subjects[0].ice = Some(IceEvent {
            visit_of_onset: 2,
            reason: IceReason::Ae,
            persistent_ae_before_dc: false,
            efficacy_deteriorated_before_dc: false,
        });
        ds.subjects[0].post_ice_flags = vec![false, true, false, true];
        let report = ds.validate();
        assert!(report
            .violations
            .iter()
            .any(|v| v.code == ViolationCode::NonMonotoneFlags));
    }

    #[test]
    fn well_formed_dataset_is_clean() {
        assert!(small_dataset().validate().is_clean());
    }

    #[test]
    fn on_treatment_view_masks_post_ice_values() {
        let mut ds = small_dataset();
        ds.subjects[0].ice = Some(IceEvent {
            visit_of_onset: 3,
            reason: IceReason::RescueMedication,
            persistent_ae_before_dc: false,
            efficacy_deteriorated_before_dc: false,
        });
        ds.subjects[0].post_ice_flags = vec![false, false, true, true];

        let on_treatment = ds.analysis_view(DataInclusionPolicy::OnTreatmentOnly).unwrap();
        assert_eq!(on_treatment.subjects[0].outcomes[..2], ds.subjects[0].outcomes[..2]);
        assert_eq!(on_treatment.subjects[0].outcomes[2], None);
        assert_eq!(on_treatment.subjects[0].outcomes[3], None);

        let all = ds.analysis_view(DataInclusionPolicy::AllAvailable).unwrap();
        assert_eq!(all.subjects[0].outcomes, ds.subjects[0].outcomes);

        // subject without ICE identical under both
        assert_eq!(on_treatment.subjects[1], ds.subjects[1]);

        // idempotence
        let twice = on_treatment
            .analysis_view(DataInclusionPolicy::OnTreatmentOnly)
            .unwrap();
        assert_eq!(twice, on_treatment);
    }

    #[test]
    fn missing_counts_order_between_policies() {
        let mut ds = small_dataset();
        ds.subjects[0].ice = Some(IceEvent {
            visit_of_onset: 2,
            reason: IceReason::Ae,
            persistent_ae_before_dc: false,
            efficacy_deteriorated_before_dc: false,
        });
        ds.subjects[0].post_ice_flags = vec![false, true, true, true];
        ds.subjects[0].outcomes[3] = None;

        let on = ds.analysis_view(DataInclusionPolicy::OnTreatmentOnly).unwrap();
        let all = ds.analysis_view(DataInclusionPolicy::AllAvailable).unwrap();
        for (a, b) in on.subjects.iter().zip(&all.subjects) {
            let miss_on = a.missing_positions().len();
            let miss_all = b.missing_positions().len();
            assert!(miss_on >= miss_all);
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut ds = small_dataset();
        ds.subjects[1].ice = Some(IceEvent {
            visit_of_onset: 4,
            reason: IceReason::SubjectDecision,
            persistent_ae_before_dc: true,
            efficacy_deteriorated_before_dc: false,
        });
        ds.subjects[1].post_ice_flags = vec![false, false, false, true];
        ds.subjects[1].outcomes[3] = None;

        let mut buf = Vec::new();
        write_dataset_csv(&ds, &mut buf).unwrap();
        let back = read_dataset_csv(&buf[..], &DatasetMeta::default()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_bad_arm_names_line() {
        let text = "subject_id,arm,visit,week,baseline,value,post_ice,ice_visit,ice_reason,persistent_ae,efficacy_deteriorated\n\
                    S01,zzz,1,4,8.0,0.1,0,,,0,0\n";
        let err = read_dataset_csv(text.as_bytes(), &DatasetMeta::default()).unwrap_err();
        match err {
            Error::Csv { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("arm"));
            }
            other => panic!("expected csv error, got {other:?}"),
        }
    }
}
