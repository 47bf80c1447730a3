//! Synthetic EHR rosters with a planted textual signal.
//!
//! Each pre-MCI note carries one "symptom slot" and one "neutral slot" line
//! built from the same template pair with opposite polarity, e.g.
//! `patient reports memory loss.` next to `patient denies headache.`. A case
//! note affirms its symptom phrase with probability `signal_strength`, a
//! control note with probability `(1 - signal_strength) / 4`; otherwise the symptom
//! is the negated one. Every note therefore has the same bag of words in
//! distribution regardless of label, and the label is only recoverable from
//! which phrase the affirmative template governs.

use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Minimum `date_range` width so every case delay and control follow-up fits.
pub const MIN_DATE_SPAN: i64 = 3200;
/// Case AD diagnoses follow the first MCI diagnosis by a delay in this range.
pub const AD_DELAY_DAYS: (i64, i64) = (30, 1500);
/// Control follow-up after first MCI, in days.
pub const CONTROL_FOLLOW_UP_DAYS: (i64, i64) = (30, 1800);
/// Dates are day offsets from 1 January of this year.
pub const EPOCH_YEAR: i64 = 2000;

pub const MCI_CODES: [&str; 2] = ["G31.84", "331.83"];
pub const AD_CODES: [&str; 5] = ["G30.0", "G30.1", "G30.8", "G30.9", "331.0"];
const OTHER_CODES: [&str; 10] = [
    "I10", "E78.5", "E11.9", "401.9", "272.4", "M54.5", "F32.9", "R51", "J45.909", "Z00.00",
];

pub const DEFAULT_SYMPTOM_PHRASES: [&str; 8] = [
    "memory loss",
    "difficulty recalling dates",
    "conversational repetitiveness",
    "short term memory loss",
    "memory difficulties",
    "forgetting recent events",
    "word finding difficulty",
    "getting lost while driving",
];
pub const DEFAULT_NEUTRAL_PHRASES: [&str; 10] = [
    "chest pain",
    "shortness of breath",
    "joint pain",
    "headache",
    "nausea",
    "back pain",
    "fatigue",
    "dizziness",
    "cough",
    "poor appetite",
];
pub const DEFAULT_FILLER_LINES: [&str; 6] = [
    "vitals stable.",
    "continue current medications.",
    "follow up in clinic as scheduled.",
    "labs reviewed with patient.",
    "blood pressure controlled on current regimen.",
    "discussed diet and exercise.",
];

/// Affirmative / negated templates. A note uses one pair for both slots.
const TEMPLATE_PAIRS: [(&str, &str); 3] = [
    ("patient reports {}.", "patient denies {}."),
    ("family notes {}.", "family denies {}."),
    ("{} is present.", "{} is absent."),
];

const FIRST_NAMES: [&str; 10] = [
    "Alan", "Maria", "James", "Linda", "Robert", "Susan", "David", "Karen", "Thomas", "Nancy",
];
const LAST_NAMES: [&str; 10] = [
    "Smith", "Johnson", "Brown", "Garcia", "Miller", "Davis", "Wilson", "Moore", "Taylor", "Clark",
];
const MONTH_NAMES: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];
const NON_ASCII_FRAGMENTS: [&str; 5] = [
    " temp 98.6\u{b0}F",
    " seen at caf\u{e9} clinic",
    " na\u{ef}ve to treatment",
    " bp 120\u{2013}130",
    " \u{201c}doing fine\u{201d}",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabThemes {
    pub symptom: Vec<String>,
    pub neutral: Vec<String>,
    pub filler: Vec<String>,
}

impl Default for VocabThemes {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            symptom: own(&DEFAULT_SYMPTOM_PHRASES),
            neutral: own(&DEFAULT_NEUTRAL_PHRASES),
            filler: own(&DEFAULT_FILLER_LINES),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub case_fraction: f64,
    pub seed: u64,
    pub date_range: (i64, i64),
    pub signal_strength: f64,
    pub vocab_themes: VocabThemes,
    /// Inclusive range of notes collected at or before first MCI.
    pub pre_mci_notes: (usize, usize),
    /// Fraction of controls deliberately generated to fail an exclusion rule.
    pub flagged_fraction: f64,
    pub phi_rate: f64,
    pub non_ascii_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 400,
            case_fraction: 0.1,
            seed: 7,
            date_range: (0, 7300),
            signal_strength: 0.8,
            vocab_themes: VocabThemes::default(),
            pre_mci_notes: (4, 6),
            flagged_fraction: 0.02,
            phi_rate: 0.6,
            non_ascii_rate: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_patients < 2 {
            errs.push(format!(
                "synth.n_patients must be >= 2, got {}",
                self.n_patients
            ));
        }
        if !(self.case_fraction > 0.0 && self.case_fraction < 1.0) {
            errs.push(format!(
                "synth.case_fraction must be in (0, 1), got {}",
                self.case_fraction
            ));
        }
        let (start, end) = self.date_range;
        if start >= end {
            errs.push(format!(
                "synth.date_range start {start} must precede end {end}"
            ));
        } else if end - start < MIN_DATE_SPAN {
            errs.push(format!(
                "synth.date_range must span at least {MIN_DATE_SPAN} days, got {}",
                end - start
            ));
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("flagged_fraction", self.flagged_fraction),
            ("phi_rate", self.phi_rate),
            ("non_ascii_rate", self.non_ascii_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("synth.{name} must be in [0, 1], got {v}"));
            }
        }
        let (lo, hi) = self.pre_mci_notes;
        if lo == 0 || lo > hi {
            errs.push(format!(
                "synth.pre_mci_notes must satisfy 1 <= min <= max, got ({lo}, {hi})"
            ));
        }
        for (name, pool) in [
            ("symptom", &self.vocab_themes.symptom),
            ("neutral", &self.vocab_themes.neutral),
            ("filler", &self.vocab_themes.filler),
        ] {
            if pool.is_empty() {
                errs.push(format!("synth.vocab_themes.{name} must not be empty"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn n_cases(&self) -> usize {
        (self.n_patients as f64 * self.case_fraction).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Race {
    White,
    Black,
    Asian,
    Other,
}

impl Race {
    pub const ALL: [Race; 4] = [Race::White, Race::Black, Race::Asian, Race::Other];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Note {
    pub time: i64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Encounter {
    pub date: i64,
    pub icd_codes: Vec<String>,
    pub notes: Vec<Note>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub patient_id: String,
    pub birth_year: i64,
    pub sex: Sex,
    pub race: Race,
    pub encounters: Vec<Encounter>,
}

/// Why the generator deliberately made a patient ineligible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantedExclusion {
    SingleEncounter,
    NoPriorNotes,
}

/// One injected PHI string, located by encounter, note and byte range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhiFact {
    pub encounter: usize,
    pub note: usize,
    pub range: Range<usize>,
    pub kind: String,
}

/// What the generator intended for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub patient_id: String,
    pub is_case: bool,
    pub first_mci: i64,
    pub first_ad: Option<i64>,
    pub last_encounter: i64,
    pub exclusion: Option<PlantedExclusion>,
    /// Number of collected notes whose symptom slot is affirmative.
    pub affirmed_notes: usize,
    pub phi: Vec<PhiFact>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roster {
    pub patients: Vec<PatientRecord>,
    pub truth: Vec<PlantedTruth>,
}

impl Roster {
    /// Line-delimited JSON, one patient per line.
    pub fn to_jsonl(&self) -> String {
        roster_to_jsonl(&self.patients)
    }
}

pub fn roster_to_jsonl(patients: &[PatientRecord]) -> String {
    let mut out = String::new();
    for p in patients {
        out.push_str(&serde_json::to_string(p).expect("patient serializes"));
        out.push('\n');
    }
    out
}

pub fn roster_from_jsonl(text: &str) -> Result<Vec<PatientRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format("roster", format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Generate a roster. Deterministic in `config` (including its seed).
pub fn generate_roster(config: &SynthConfig) -> Result<Roster> {
    config.validate()?;
    let mut rng = rng::from_seed(config.seed);
    let n = config.n_patients;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut is_case = vec![false; n];
    for &i in &order[..config.n_cases()] {
        is_case[i] = true;
    }

    let mut patients = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for (i, &case) in is_case.iter().enumerate() {
        let exclusion = if !case && rng.random_bool(config.flagged_fraction) {
            Some(if rng.random_bool(0.5) {
                PlantedExclusion::SingleEncounter
            } else {
                PlantedExclusion::NoPriorNotes
            })
        } else {
            None
        };
        let (p, t) = PatientBuilder {
            config,
            rng: &mut rng,
        }
        .build(format!("P{i:05}"), case, exclusion);
        patients.push(p);
        truth.push(t);
    }
    Ok(Roster { patients, truth })
}

struct PatientBuilder<'a> {
    config: &'a SynthConfig,
    rng: &'a mut Rng,
}

/// Note text under construction, tracking injected PHI byte ranges.
struct NoteText {
    text: String,
    phi: Vec<(Range<usize>, &'static str)>,
}

impl NoteText {
    fn new() -> Self {
        Self {
            text: String::new(),
            phi: Vec::new(),
        }
    }

    fn push(&mut self, s: &str) {
        self.text.push_str(s);
    }

    fn push_phi(&mut self, s: &str, kind: &'static str) {
        let start = self.text.len();
        self.text.push_str(s);
        self.phi.push((start..self.text.len(), kind));
    }
}

impl PatientBuilder<'_> {
    fn build(
        mut self,
        patient_id: String,
        case: bool,
        exclusion: Option<PlantedExclusion>,
    ) -> (PatientRecord, PlantedTruth) {
        let cfg = self.config;
        let (start, end) = cfg.date_range;
        let birth_year = self.rng.random_range(1925..=1955);
        let sex = if self.rng.random_bool(0.5) {
            Sex::Female
        } else {
            Sex::Male
        };
        let race = *Race::ALL.choose(self.rng).unwrap();

        let mci = self.rng.random_range(start + 400..=end - 1700);
        let (lo, hi) = cfg.pre_mci_notes;
        let n_pre = match exclusion {
            Some(PlantedExclusion::SingleEncounter) => 1,
            _ => self.rng.random_range(lo..=hi),
        };

        // Pre-MCI encounter dates (the MCI visit is the last of them).
        let mut pre_dates = self.distinct_days(start, mci - 1, n_pre - 1);
        pre_dates.push(mci);

        let mut symptom_pool: Vec<usize> = (0..cfg.vocab_themes.symptom.len()).collect();
        symptom_pool.shuffle(self.rng);
        let affirm_p = if case {
            cfg.signal_strength
        } else {
            (1.0 - cfg.signal_strength) / 4.0
        };

        let mut encounters = Vec::new();
        let mut phi = Vec::new();
        let mut affirmed_notes = 0;
        for (k, &date) in pre_dates.iter().enumerate() {
            let mut codes = if date == mci {
                vec![MCI_CODES.choose(self.rng).unwrap().to_string()]
            } else {
                self.other_codes()
            };
            if date == mci && self.rng.random_bool(0.3) {
                codes.extend(self.other_codes());
            }
            let note = if exclusion == Some(PlantedExclusion::NoPriorNotes) {
                let blank = if self.rng.random_bool(0.5) {
                    ""
                } else {
                    " \n\t\n"
                };
                NoteText {
                    text: blank.to_string(),
                    phi: Vec::new(),
                }
            } else {
                let phrase = symptom_pool[k % symptom_pool.len()];
                let affirmed = self.rng.random_bool(affirm_p);
                affirmed_notes += usize::from(affirmed);
                self.signal_note(date, phrase, affirmed)
            };
            phi.extend(note.phi.iter().map(|(range, kind)| PhiFact {
                encounter: encounters.len(),
                note: 0,
                range: range.clone(),
                kind: kind.to_string(),
            }));
            encounters.push(Encounter {
                date,
                icd_codes: codes,
                notes: vec![Note {
                    time: date,
                    text: note.text,
                }],
            });
        }

        let mut first_ad = None;
        if exclusion != Some(PlantedExclusion::SingleEncounter) {
            let post: Vec<(i64, Vec<String>)> = if case {
                let delay = self.rng.random_range(AD_DELAY_DAYS.0..=AD_DELAY_DAYS.1);
                let ad = mci + delay;
                first_ad = Some(ad);
                let mut post = Vec::new();
                let n_between = self.rng.random_range(0..=2).min((delay - 1) as usize);
                for d in self.distinct_days(mci + 1, ad - 1, n_between) {
                    let codes = self.follow_up_codes();
                    post.push((d, codes));
                }
                post.push((ad, vec![AD_CODES.choose(self.rng).unwrap().to_string()]));
                let n_after = self.rng.random_range(0..=2);
                for d in self.distinct_days(ad + 1, (ad + 400).min(end), n_after) {
                    let mut codes = self.follow_up_codes();
                    codes.push(AD_CODES.choose(self.rng).unwrap().to_string());
                    post.push((d, codes));
                }
                post
            } else {
                let follow = self
                    .rng
                    .random_range(CONTROL_FOLLOW_UP_DAYS.0..=CONTROL_FOLLOW_UP_DAYS.1);
                let last = (mci + follow).min(end);
                let n_between = self.rng.random_range(0..=2).min((last - mci - 1) as usize);
                let mut post: Vec<_> = self
                    .distinct_days(mci + 1, last - 1, n_between)
                    .into_iter()
                    .map(|d| (d, self.follow_up_codes()))
                    .collect();
                post.push((last, self.follow_up_codes()));
                post
            };
            for (date, codes) in post {
                let note = self.follow_up_note(date);
                phi.extend(note.phi.iter().map(|(range, kind)| PhiFact {
                    encounter: encounters.len(),
                    note: 0,
                    range: range.clone(),
                    kind: kind.to_string(),
                }));
                encounters.push(Encounter {
                    date,
                    icd_codes: codes,
                    notes: vec![Note {
                        time: date,
                        text: note.text,
                    }],
                });
            }
        }

        let last_encounter = encounters.last().map(|e| e.date).unwrap_or(mci);
        let record = PatientRecord {
            patient_id: patient_id.clone(),
            birth_year,
            sex,
            race,
            encounters,
        };
        let truth = PlantedTruth {
            patient_id,
            is_case: case,
            first_mci: mci,
            first_ad,
            last_encounter,
            exclusion,
            affirmed_notes,
            phi,
        };
        (record, truth)
    }

    /// `count` distinct sorted days in `[lo, hi]` (fewer if the range is smaller).
    fn distinct_days(&mut self, lo: i64, hi: i64, count: usize) -> Vec<i64> {
        if hi < lo || count == 0 {
            return Vec::new();
        }
        let width = (hi - lo + 1) as usize;
        let mut days: Vec<i64> = rand::seq::index::sample(self.rng, width, count.min(width))
            .into_iter()
            .map(|o| lo + o as i64)
            .collect();
        days.sort_unstable();
        days
    }

    fn other_codes(&mut self) -> Vec<String> {
        // Some encounters arrive with no codes at all.
        if self.rng.random_bool(0.1) {
            return Vec::new();
        }
        let n = self.rng.random_range(1..=2);
        OTHER_CODES
            .choose_multiple(self.rng, n)
            .map(|c| c.to_string())
            .collect()
    }

    fn follow_up_codes(&mut self) -> Vec<String> {
        let mut codes = self.other_codes();
        if self.rng.random_bool(0.5) {
            codes.push(MCI_CODES.choose(self.rng).unwrap().to_string());
        }
        codes
    }

    fn calendar(&self, day: i64) -> (i64, usize, i64) {
        // Coarse day-offset to (year, month index, day-of-month); only used to
        // print plausible dates inside note text.
        let year = EPOCH_YEAR + day.div_euclid(365);
        let doy = day.rem_euclid(365);
        let month = ((doy / 31) as usize).min(11);
        let dom = (doy % 28) + 1;
        (year, month, dom)
    }

    fn header_line(&mut self, date: i64, note: &mut NoteText) {
        if !self.rng.random_bool(self.config.phi_rate) {
            note.push("progress note.");
            return;
        }
        let first = *FIRST_NAMES.choose(self.rng).unwrap();
        let last = *LAST_NAMES.choose(self.rng).unwrap();
        let (year, month, dom) = self.calendar(date);
        match self.rng.random_range(0..4) {
            0 => {
                note.push("progress notes by Dr. ");
                note.push_phi(&format!("{first} {last}"), "name");
                note.push(" at ");
                note.push_phi(&format!("{:02}/{:02}/{year}", month + 1, dom), "date");
                note.push(".");
            }
            1 => {
                note.push("progress notes by ");
                note.push_phi(&format!("{first} {last}"), "name");
                note.push(", MD. note time: ");
                note.push_phi(&format!("{} {dom}, {year}", MONTH_NAMES[month]), "date");
                note.push(".");
            }
            2 => {
                note.push("callback ");
                let a = self.rng.random_range(200..=989);
                let b = self.rng.random_range(0..=9999);
                note.push_phi(&format!("{a}-555-{b:04}"), "phone");
                note.push(", mrn ");
                let mrn = self.rng.random_range(10_000_000u64..=99_999_999);
                note.push_phi(&mrn.to_string(), "identifier");
                note.push(".");
            }
            _ => {
                note.push("seen with Mrs. ");
                note.push_phi(last, "name");
                note.push(" from zip ");
                let zip = self.rng.random_range(10_000..=99_999);
                note.push_phi(&zip.to_string(), "zip");
                note.push(", contact ");
                note.push_phi(
                    &format!(
                        "{}.{}@clinic.org",
                        first.to_lowercase(),
                        last.to_lowercase()
                    ),
                    "email",
                );
                note.push(".");
            }
        }
    }

    fn messy_suffix(&mut self, note: &mut NoteText) {
        if self.rng.random_bool(self.config.non_ascii_rate) {
            note.push(NON_ASCII_FRAGMENTS.choose(self.rng).unwrap());
        }
        if self.rng.random_bool(0.1) {
            note.push(" \t ");
        }
    }

    fn signal_note(&mut self, date: i64, symptom: usize, affirmed: bool) -> NoteText {
        let cfg = self.config;
        let themes = &cfg.vocab_themes;
        let (affirm, negate) = *TEMPLATE_PAIRS.choose(self.rng).unwrap();
        let symptom = &themes.symptom[symptom];
        let neutral = themes.neutral.choose(self.rng).unwrap();
        let (sym_t, neu_t) = if affirmed {
            (affirm, negate)
        } else {
            (negate, affirm)
        };
        let symptom_line = sym_t.replace("{}", symptom);
        let neutral_line = neu_t.replace("{}", neutral);

        let mut note = NoteText::new();
        self.header_line(date, &mut note);
        self.messy_suffix(&mut note);
        note.push("\n");
        let (a, b) = if self.rng.random_bool(0.5) {
            (symptom_line, neutral_line)
        } else {
            (neutral_line, symptom_line)
        };
        note.push(&a);
        note.push("\n");
        if self.rng.random_bool(0.1) {
            note.push("\n");
        }
        note.push(&b);
        if self.rng.random_bool(0.3) {
            note.push("\n");
            let filler = themes.filler.choose(self.rng).unwrap().clone();
            note.push(&filler);
            self.messy_suffix(&mut note);
        }
        note.push("\n");
        note
    }

    fn follow_up_note(&mut self, date: i64) -> NoteText {
        let mut note = NoteText::new();
        if self.rng.random_bool(self.config.phi_rate / 2.0) {
            self.header_line(date, &mut note);
            note.push("\n");
        }
        note.push("follow up visit.\n");
        let filler = self
            .config
            .vocab_themes
            .filler
            .choose(self.rng)
            .unwrap()
            .clone();
        note.push(&filler);
        self.messy_suffix(&mut note);
        note
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, cf: f64) -> SynthConfig {
        SynthConfig {
            n_patients: n,
            case_fraction: cf,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rounds_case_count() {
        let r = generate_roster(&small(10, 0.3)).unwrap();
        assert_eq!(r.truth.iter().filter(|t| t.is_case).count(), 3);
    }

    #[test]
    fn deterministic_bytes() {
        let cfg = small(50, 0.2);
        let a = generate_roster(&cfg).unwrap().to_jsonl();
        let b = generate_roster(&cfg).unwrap().to_jsonl();
        assert_eq!(a, b);
        let other = generate_roster(&SynthConfig { seed: 8, ..cfg })
            .unwrap()
            .to_jsonl();
        assert_ne!(a, other);
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            small(1, 0.5),
            small(10, 0.0),
            small(10, 1.0),
            SynthConfig {
                date_range: (10, 10),
                ..SynthConfig::default()
            },
        ] {
            assert!(matches!(generate_roster(&cfg), Err(Error::Config(_))));
        }
        let many = SynthConfig {
            n_patients: 0,
            case_fraction: 2.0,
            ..SynthConfig::default()
        };
        match many.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("expected two errors, got {other:?}"),
        }
    }

    #[test]
    fn encounters_ordered_and_notes_timed() {
        let r = generate_roster(&small(200, 0.2)).unwrap();
        for p in &r.patients {
            for w in p.encounters.windows(2) {
                assert!(w[0].date < w[1].date, "{}", p.patient_id);
            }
            for e in &p.encounters {
                for n in &e.notes {
                    assert_eq!(n.time, e.date);
                }
            }
        }
        for t in &r.truth {
            if let Some(ad) = t.first_ad {
                assert!(ad > t.first_mci);
            }
        }
    }

    #[test]
    fn phi_and_non_ascii_rates() {
        let r = generate_roster(&small(300, 0.1)).unwrap();
        let notes: Vec<&str> = r
            .patients
            .iter()
            .flat_map(|p| p.encounters.iter().flat_map(|e| e.notes.iter()))
            .map(|n| n.text.as_str())
            .collect();
        let total = notes.len() as f64;
        let mut with_phi = std::collections::HashSet::new();
        for (t, p) in r.truth.iter().zip(&r.patients) {
            for f in &t.phi {
                with_phi.insert((p.patient_id.clone(), f.encounter));
            }
        }
        let non_ascii = notes.iter().filter(|t| !t.is_ascii()).count() as f64;
        assert!(with_phi.len() as f64 / total >= 0.10);
        assert!(non_ascii / total >= 0.05);
    }

    #[test]
    fn ledger_ranges_point_at_phi_text() {
        let r = generate_roster(&small(40, 0.2)).unwrap();
        for (t, p) in r.truth.iter().zip(&r.patients) {
            for f in &t.phi {
                let text = &p.encounters[f.encounter].notes[f.note].text;
                let span = &text[f.range.clone()];
                assert!(!span.is_empty() && !span.contains('\n'));
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let r = generate_roster(&small(20, 0.2)).unwrap();
        let text = r.to_jsonl();
        assert_eq!(text.lines().count(), 20);
        let back = roster_from_jsonl(&text).unwrap();
        assert_eq!(back, r.patients);
    }
}
