//! Cohort construction: code matching, exclusions, and case/control labels.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{self, Section};
use crate::synth::{Note, PatientRecord, Race, Sex, EPOCH_YEAR};

/// Fixed windows for the x-month settings.
pub const SIX_MONTHS: u32 = 182;
pub const ONE_YEAR: u32 = 365;
pub const TWO_YEARS: u32 = 730;

/// Exact code strings, or a prefix when the pattern ends in `*`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSet {
    patterns: Vec<String>,
}

impl CodeSet {
    pub fn new<S: Into<String>>(patterns: impl IntoIterator<Item = S>) -> Self {
        Self {
            patterns: patterns.into_iter().map(Into::into).collect(),
        }
    }

    pub fn matches(&self, code: &str) -> bool {
        self.patterns.iter().any(|p| match p.strip_suffix('*') {
            Some(prefix) => code.starts_with(prefix),
            None => code == p,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSets {
    pub mci: CodeSet,
    pub ad: CodeSet,
}

impl Default for CodeSets {
    fn default() -> Self {
        Self {
            mci: CodeSet::new(["331.83", "G31.84"]),
            ad: CodeSet::new(["331.0", "G30.*"]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    NoMci,
    AdOnOrBeforeMci,
    SingleEncounter,
    NoPriorNotes,
    InsufficientFollowUp,
    LateConverter,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::NoMci => "no-mci",
            ExclusionReason::AdOnOrBeforeMci => "ad-on-or-before-mci",
            ExclusionReason::SingleEncounter => "single-encounter",
            ExclusionReason::NoPriorNotes => "no-prior-notes",
            ExclusionReason::InsufficientFollowUp => "insufficient-follow-up",
            ExclusionReason::LateConverter => "late-converter",
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Case,
    Control,
    Excluded(ExclusionReason),
}

impl Label {
    pub fn is_case(self) -> bool {
        self == Label::Case
    }

    /// Binary target, `None` when excluded.
    pub fn target(self) -> Option<bool> {
        match self {
            Label::Case => Some(true),
            Label::Control => Some(false),
            Label::Excluded(_) => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Case => f.write_str("CASE"),
            Label::Control => f.write_str("CONTROL"),
            Label::Excluded(r) => write!(f, "EXCLUDED:{r}"),
        }
    }
}

/// A prediction setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    NoRestrict,
    Window(u32),
}

impl Setting {
    pub fn name(self) -> String {
        match self {
            Setting::NoRestrict => "no-restrict".into(),
            Setting::Window(SIX_MONTHS) => "6-month".into(),
            Setting::Window(ONE_YEAR) => "1-year".into(),
            Setting::Window(TWO_YEARS) => "2-year".into(),
            Setting::Window(d) => format!("{d}-day"),
        }
    }

    /// Parse `no-restrict`, the fixed window names, or `<n>-day`.
    pub fn parse(s: &str) -> Option<Setting> {
        match s {
            "no-restrict" => Some(Setting::NoRestrict),
            "6-month" => Some(Setting::Window(SIX_MONTHS)),
            "1-year" => Some(Setting::Window(ONE_YEAR)),
            "2-year" => Some(Setting::Window(TWO_YEARS)),
            other => other
                .strip_suffix("-day")
                .and_then(|d| d.parse().ok())
                .filter(|&d: &u32| d > 0)
                .map(Setting::Window),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// How to label patients who convert to AD after the window closes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LateConverterPolicy {
    #[default]
    Control,
    Exclude,
}

pub fn first_diagnosis_date(patient: &PatientRecord, codes: &CodeSet) -> Option<i64> {
    patient
        .encounters
        .iter()
        .filter(|e| e.icd_codes.iter().any(|c| codes.matches(c)))
        .map(|e| e.date)
        .min()
}

/// Key dates of one patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeline {
    pub first_mci: i64,
    pub first_ad: Option<i64>,
    pub last_encounter: i64,
}

impl Timeline {
    pub fn of(patient: &PatientRecord, codes: &CodeSets) -> Option<Timeline> {
        Some(Timeline {
            first_mci: first_diagnosis_date(patient, &codes.mci)?,
            first_ad: first_diagnosis_date(patient, &codes.ad),
            last_encounter: patient.encounters.iter().map(|e| e.date).max()?,
        })
    }
}

/// Notes at or before the first MCI date, in chronological order.
pub fn collect_notes<'a>(patient: &'a PatientRecord, codes: &CodeSets) -> Vec<&'a Note> {
    let Some(mci) = first_diagnosis_date(patient, &codes.mci) else {
        return Vec::new();
    };
    let mut notes: Vec<&Note> = patient
        .encounters
        .iter()
        .flat_map(|e| e.notes.iter())
        .filter(|n| n.time <= mci)
        .collect();
    notes.sort_by_key(|n| n.time);
    notes
}

/// Preprocessed sections of the collected notes.
pub fn collect_sections(patient: &PatientRecord, codes: &CodeSets) -> Vec<Section> {
    preprocess::preprocess_notes(
        collect_notes(patient, codes)
            .iter()
            .map(|n| n.text.as_str()),
    )
}

/// The first exclusion rule a patient fails, if any.
pub fn exclusion_reason(patient: &PatientRecord, codes: &CodeSets) -> Option<ExclusionReason> {
    let Some(mci) = first_diagnosis_date(patient, &codes.mci) else {
        return Some(ExclusionReason::NoMci);
    };
    if first_diagnosis_date(patient, &codes.ad).is_some_and(|ad| ad <= mci) {
        return Some(ExclusionReason::AdOnOrBeforeMci);
    }
    if patient.encounters.len() == 1 {
        return Some(ExclusionReason::SingleEncounter);
    }
    let has_note = collect_notes(patient, codes)
        .iter()
        .any(|n| !preprocess::preprocess_note(&n.text).is_empty());
    if !has_note {
        return Some(ExclusionReason::NoPriorNotes);
    }
    None
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExclusionReport {
    pub excluded: Vec<(String, ExclusionReason)>,
    pub counts: BTreeMap<ExclusionReason, usize>,
}

/// Indices of eligible patients, plus the reasons the rest were dropped.
pub fn apply_exclusions(
    roster: &[PatientRecord],
    codes: &CodeSets,
) -> Result<(Vec<usize>, ExclusionReport)> {
    if roster.is_empty() {
        return Err(Error::input("cannot apply exclusions to an empty roster"));
    }
    let mut eligible = Vec::new();
    let mut report = ExclusionReport::default();
    for (i, p) in roster.iter().enumerate() {
        match exclusion_reason(p, codes) {
            None => eligible.push(i),
            Some(r) => {
                report.excluded.push((p.patient_id.clone(), r));
                *report.counts.entry(r).or_default() += 1;
            }
        }
    }
    Ok((eligible, report))
}

/// CASE iff an AD code follows the first MCI date.
pub fn label_no_restrict(patient: &PatientRecord, codes: &CodeSets) -> Label {
    match Timeline::of(patient, codes) {
        None => Label::Excluded(ExclusionReason::NoMci),
        Some(t) => match t.first_ad {
            Some(ad) if ad > t.first_mci => Label::Case,
            Some(_) => Label::Excluded(ExclusionReason::AdOnOrBeforeMci),
            None => Label::Control,
        },
    }
}

pub fn label_window(
    patient: &PatientRecord,
    window_days: u32,
    codes: &CodeSets,
    policy: LateConverterPolicy,
) -> Label {
    let Some(t) = Timeline::of(patient, codes) else {
        return Label::Excluded(ExclusionReason::NoMci);
    };
    let w = i64::from(window_days);
    let m = t.first_mci;
    match t.first_ad {
        Some(a) if a <= m => Label::Excluded(ExclusionReason::AdOnOrBeforeMci),
        Some(a) if a - m <= w => Label::Case,
        Some(_) if policy == LateConverterPolicy::Exclude => {
            Label::Excluded(ExclusionReason::LateConverter)
        }
        _ if t.last_encounter - m > w => Label::Control,
        _ => Label::Excluded(ExclusionReason::InsufficientFollowUp),
    }
}

pub fn label(
    patient: &PatientRecord,
    setting: Setting,
    codes: &CodeSets,
    policy: LateConverterPolicy,
) -> Label {
    match setting {
        Setting::NoRestrict => label_no_restrict(patient, codes),
        Setting::Window(w) => label_window(patient, w, codes, policy),
    }
}

/// Days from first MCI to first AD (cases) or to the last encounter (others).
pub fn conversion_days(patient: &PatientRecord, codes: &CodeSets) -> Result<i64> {
    let t = Timeline::of(patient, codes).ok_or_else(|| {
        Error::contract(format!(
            "conversion_days on patient {} without an MCI diagnosis",
            patient.patient_id
        ))
    })?;
    Ok(match t.first_ad {
        Some(a) if a > t.first_mci => a - t.first_mci,
        _ => t.last_encounter - t.first_mci,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub patient_id: String,
    pub label: Label,
    pub conversion_days: Option<i64>,
    pub sections: Vec<Section>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCohort {
    pub setting: Setting,
    pub entries: Vec<CohortEntry>,
}

impl LabeledCohort {
    pub fn count(&self, pred: impl Fn(Label) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(e.label)).count()
    }

    pub fn n_cases(&self) -> usize {
        self.count(|l| l == Label::Case)
    }

    pub fn n_controls(&self) -> usize {
        self.count(|l| l == Label::Control)
    }

    /// Entries that are CASE or CONTROL.
    pub fn labeled(&self) -> impl Iterator<Item = (&CohortEntry, bool)> {
        self.entries
            .iter()
            .filter_map(|e| e.label.target().map(|t| (e, t)))
    }
}

/// Label every eligible patient of `roster` for one setting.
pub fn build_cohort(
    roster: &[PatientRecord],
    eligible: &[usize],
    setting: Setting,
    codes: &CodeSets,
    policy: LateConverterPolicy,
) -> LabeledCohort {
    let entries = eligible
        .iter()
        .map(|&i| {
            let p = &roster[i];
            let label = label(p, setting, codes, policy);
            let conversion_days = if label == Label::Case {
                conversion_days(p, codes).ok()
            } else {
                None
            };
            CohortEntry {
                patient_id: p.patient_id.clone(),
                label,
                conversion_days,
                sections: collect_sections(p, codes),
            }
        })
        .collect();
    LabeledCohort { setting, entries }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub n: usize,
    pub age_mean: Option<f64>,
    pub age_sd: Option<f64>,
    pub sex: BTreeMap<Sex, f64>,
    pub race: BTreeMap<Race, f64>,
    /// Mean days to AD for cases, mean days of MCI follow-up for controls.
    pub mean_conversion_days: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortSummary {
    pub setting: Setting,
    pub n_case: usize,
    pub n_control: usize,
    pub n_excluded: usize,
    pub case: GroupSummary,
    pub control: GroupSummary,
}

fn age_at_first_mci(p: &PatientRecord, codes: &CodeSets) -> Option<f64> {
    let mci = first_diagnosis_date(p, &codes.mci)?;
    Some(EPOCH_YEAR as f64 + mci as f64 / 365.25 - p.birth_year as f64)
}

fn group_summary(members: &[&PatientRecord], codes: &CodeSets) -> GroupSummary {
    let n = members.len();
    let ages: Vec<f64> = members
        .iter()
        .filter_map(|p| age_at_first_mci(p, codes))
        .collect();
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let age_mean = mean(&ages);
    let age_sd = age_mean.map(|m| {
        if ages.len() < 2 {
            0.0
        } else {
            (ages.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (ages.len() - 1) as f64).sqrt()
        }
    });
    let mut sex = BTreeMap::new();
    let mut race = BTreeMap::new();
    if n > 0 {
        for s in [Sex::Female, Sex::Male] {
            let k = members.iter().filter(|p| p.sex == s).count();
            sex.insert(s, k as f64 / n as f64);
        }
        for r in Race::ALL {
            let k = members.iter().filter(|p| p.race == r).count();
            race.insert(r, k as f64 / n as f64);
        }
    }
    let days: Vec<f64> = members
        .iter()
        .filter_map(|p| conversion_days(p, codes).ok())
        .map(|d| d as f64)
        .collect();
    GroupSummary {
        n,
        age_mean,
        age_sd,
        sex,
        race,
        mean_conversion_days: mean(&days),
    }
}

/// Table-1 style summary. Patients absent from `labeled` count as excluded.
pub fn cohort_summary(
    labeled: &LabeledCohort,
    roster: &[PatientRecord],
    codes: &CodeSets,
) -> CohortSummary {
    let by_id: BTreeMap<&str, &PatientRecord> =
        roster.iter().map(|p| (p.patient_id.as_str(), p)).collect();
    let members = |want: Label| -> Vec<&PatientRecord> {
        labeled
            .entries
            .iter()
            .filter(|e| e.label == want)
            .filter_map(|e| by_id.get(e.patient_id.as_str()).copied())
            .collect()
    };
    let cases = members(Label::Case);
    let controls = members(Label::Control);
    CohortSummary {
        setting: labeled.setting,
        n_case: cases.len(),
        n_control: controls.len(),
        n_excluded: roster.len() - cases.len() - controls.len(),
        case: group_summary(&cases, codes),
        control: group_summary(&controls, codes),
    }
}

/// Tab-separated labeled-cohort file with a trailing per-setting counts block.
pub fn render_cohort_file(cohorts: &[LabeledCohort]) -> String {
    let mut out = String::from("patient_id\tsetting\tlabel\tconversion_days\n");
    for c in cohorts {
        for e in &c.entries {
            let days = e.conversion_days.map(|d| d.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.patient_id, c.setting, e.label, days
            ));
        }
    }
    out.push_str("#counts\nsetting\tcase\tcontrol\ttotal\n");
    for c in cohorts {
        let (k, n) = (c.n_cases(), c.n_controls());
        out.push_str(&format!("{}\t{}\t{}\t{}\n", c.setting, k, n, k + n));
    }
    out
}

/// Parse the label lines of [`render_cohort_file`]:
/// `(patient_id, setting, label, conversion_days)`.
pub fn parse_cohort_file(text: &str) -> Result<Vec<(String, Setting, Label, Option<i64>)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.starts_with("#counts") {
            break;
        }
        let bad = |why: &str| Error::format("cohort file", format!("line {}: {why}", i + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        let [id, setting, label, days] = cols[..] else {
            return Err(bad("expected 4 columns"));
        };
        let setting = Setting::parse(setting).ok_or_else(|| bad("unknown setting"))?;
        let label = match label {
            "CASE" => Label::Case,
            "CONTROL" => Label::Control,
            other => {
                let reason = other
                    .strip_prefix("EXCLUDED:")
                    .ok_or_else(|| bad("unknown label"))?;
                let r = [
                    ExclusionReason::InsufficientFollowUp,
                    ExclusionReason::LateConverter,
                    ExclusionReason::NoMci,
                    ExclusionReason::AdOnOrBeforeMci,
                    ExclusionReason::SingleEncounter,
                    ExclusionReason::NoPriorNotes,
                ]
                .into_iter()
                .find(|r| r.as_str() == reason)
                .ok_or_else(|| bad("unknown exclusion reason"))?;
                Label::Excluded(r)
            }
        };
        let days = if days.is_empty() {
            None
        } else {
            Some(days.parse().map_err(|_| bad("bad conversion_days"))?)
        };
        rows.push((id.to_string(), setting, label, days));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Encounter;

    fn patient(encs: &[(i64, &[&str], &[&str])]) -> PatientRecord {
        PatientRecord {
            patient_id: "T".into(),
            birth_year: 1940,
            sex: Sex::Female,
            race: Race::White,
            encounters: encs
                .iter()
                .map(|(d, codes, notes)| Encounter {
                    date: *d,
                    icd_codes: codes.iter().map(|c| c.to_string()).collect(),
                    notes: notes
                        .iter()
                        .map(|t| Note {
                            time: *d,
                            text: t.to_string(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn code_patterns() {
        let c = CodeSets::default();
        assert!(c.ad.matches("G30.9"));
        assert!(c.ad.matches("331.0"));
        assert!(!c.ad.matches("G30"));
        assert!(!c.ad.matches("331.01"));
        assert!(c.mci.matches("G31.84"));
        assert!(!c.mci.matches("G31.8"));
    }

    #[test]
    fn first_diagnosis_examples() {
        let c = CodeSets::default();
        let p = patient(&[(10, &["G31.84"], &[]), (50, &["G30.9"], &[])]);
        assert_eq!(first_diagnosis_date(&p, &c.ad), Some(50));
        assert_eq!(first_diagnosis_date(&p, &c.mci), Some(10));
        let none = patient(&[(10, &["I10"], &[])]);
        assert_eq!(first_diagnosis_date(&none, &c.ad), None);
        let unsorted = patient(&[(10, &["G30.1"], &[]), (5, &["G30.9"], &[])]);
        assert_eq!(first_diagnosis_date(&unsorted, &c.ad), Some(5));
    }

    #[test]
    fn exclusion_rules_in_order() {
        let c = CodeSets::default();
        let cases = [
            (
                patient(&[(0, &["I10"], &["x"]), (5, &[], &["y"])]),
                Some(ExclusionReason::NoMci),
            ),
            (
                patient(&[(0, &["G30.9"], &["x"]), (5, &["G31.84"], &["y"])]),
                Some(ExclusionReason::AdOnOrBeforeMci),
            ),
            (
                patient(&[(0, &["G31.84", "G30.1"], &["x"]), (5, &[], &["y"])]),
                Some(ExclusionReason::AdOnOrBeforeMci),
            ),
            (
                patient(&[(10, &["G31.84"], &["note"])]),
                Some(ExclusionReason::SingleEncounter),
            ),
            (
                patient(&[(10, &["G31.84"], &[" \n "]), (20, &[], &["later note"])]),
                Some(ExclusionReason::NoPriorNotes),
            ),
            (
                patient(&[
                    (1, &[], &["prior"]),
                    (10, &["G31.84"], &[]),
                    (30, &["I10"], &[]),
                ]),
                None,
            ),
        ];
        for (p, want) in cases {
            assert_eq!(exclusion_reason(&p, &c), want, "{:?}", p.encounters);
        }
        assert!(apply_exclusions(&[], &c).is_err());
    }

    #[test]
    fn no_restrict_and_window_examples() {
        let c = CodeSets::default();
        let pol = LateConverterPolicy::Control;
        let conv = patient(&[(0, &["G31.84"], &["n"]), (700, &["G30.9"], &[])]);
        assert_eq!(label_no_restrict(&conv, &c), Label::Case);
        let ctrl = patient(&[(0, &["G31.84"], &["n"]), (400, &["I10"], &[])]);
        assert_eq!(label_no_restrict(&ctrl, &c), Label::Control);

        let early = patient(&[(0, &["G31.84"], &["n"]), (120, &["G30.1"], &[])]);
        assert_eq!(label_window(&early, 180, &c, pol), Label::Case);
        let short = patient(&[(0, &["G31.84"], &["n"]), (100, &[], &[])]);
        assert_eq!(
            label_window(&short, 180, &c, pol),
            Label::Excluded(ExclusionReason::InsufficientFollowUp)
        );
        let late = patient(&[(0, &["G31.84"], &["n"]), (400, &["G30.1"], &[])]);
        assert_eq!(label_window(&late, 180, &c, pol), Label::Control);
        assert_eq!(
            label_window(&late, 180, &c, LateConverterPolicy::Exclude),
            Label::Excluded(ExclusionReason::LateConverter)
        );
        // Boundary: a - m == window counts as converting within the window.
        let edge = patient(&[(0, &["G31.84"], &["n"]), (180, &["G30.1"], &[])]);
        assert_eq!(label_window(&edge, 180, &c, pol), Label::Case);
    }

    #[test]
    fn conversion_days_examples() {
        let c = CodeSets::default();
        let p = patient(&[(0, &["G31.84"], &["n"]), (723, &["G30.1"], &[])]);
        assert_eq!(conversion_days(&p, &c).unwrap(), 723);
        let ctrl = patient(&[(0, &["G31.84"], &["n"]), (521, &["I10"], &[])]);
        assert_eq!(conversion_days(&ctrl, &c).unwrap(), 521);
        let no_mci = patient(&[(0, &["I10"], &["n"])]);
        assert!(matches!(
            conversion_days(&no_mci, &c),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn collect_notes_is_inclusive() {
        let c = CodeSets::default();
        let p = patient(&[
            (5, &[], &["a"]),
            (10, &["G31.84"], &["b"]),
            (20, &[], &["c"]),
        ]);
        let got: Vec<_> = collect_notes(&p, &c).iter().map(|n| n.time).collect();
        assert_eq!(got, [5, 10]);
    }

    #[test]
    fn summary_with_empty_control_group() {
        let c = CodeSets::default();
        let mut p = patient(&[(0, &["G31.84"], &["n"]), (700, &["G30.9"], &[])]);
        p.patient_id = "A".into();
        let roster = vec![p];
        let cohort = build_cohort(
            &roster,
            &[0],
            Setting::NoRestrict,
            &c,
            LateConverterPolicy::Control,
        );
        let s = cohort_summary(&cohort, &roster, &c);
        assert_eq!(s.n_case, 1);
        assert_eq!(s.control.n, 0);
        assert_eq!(s.control.age_mean, None);
        assert_eq!(s.control.mean_conversion_days, None);
        assert_eq!(s.case.mean_conversion_days, Some(700.0));
        let sex_total: f64 = s.case.sex.values().sum();
        assert!((sex_total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn setting_names_round_trip() {
        for s in [
            Setting::NoRestrict,
            Setting::Window(SIX_MONTHS),
            Setting::Window(ONE_YEAR),
            Setting::Window(TWO_YEARS),
            Setting::Window(90),
        ] {
            assert_eq!(Setting::parse(&s.name()), Some(s));
        }
        assert_eq!(Setting::parse("0-day"), None);
    }

    #[test]
    fn cohort_file_round_trip() {
        let c = CodeSets::default();
        let mut a = patient(&[(0, &["G31.84"], &["n"]), (100, &["G30.9"], &[])]);
        a.patient_id = "A".into();
        let mut b = patient(&[(0, &["G31.84"], &["n"]), (50, &[], &[])]);
        b.patient_id = "B".into();
        let roster = vec![a, b];
        let pol = LateConverterPolicy::Control;
        let cohorts = vec![
            build_cohort(&roster, &[0, 1], Setting::NoRestrict, &c, pol),
            build_cohort(&roster, &[0, 1], Setting::Window(SIX_MONTHS), &c, pol),
        ];
        let text = render_cohort_file(&cohorts);
        assert!(text.contains(
            "#counts\nsetting\tcase\tcontrol\ttotal\nno-restrict\t1\t1\t2\n6-month\t1\t0\t1\n"
        ));
        let rows = parse_cohort_file(&text).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(
            rows[0],
            ("A".into(), Setting::NoRestrict, Label::Case, Some(100))
        );
        assert_eq!(
            rows[3].2,
            Label::Excluded(ExclusionReason::InsufficientFollowUp)
        );
    }
}
