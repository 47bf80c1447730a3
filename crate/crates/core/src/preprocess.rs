//! Note preprocessing: deidentification, cleaning, and section splitting.
//!
//! `preprocess_note` is the composition `split_sections(clean(deidentify(raw)))`.
//! Cleaning keeps `'\n'` intact and only collapses horizontal whitespace, so
//! the newline split still sees the original line structure.

use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Replacement token for every PHI span.
pub const PHI_TOKEN: &str = "<phi>";

/// A newline-delimited fragment of a cleaned note.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub text: String,
    pub note_index: usize,
    pub section_index: usize,
}

/// One deidentification rule. Only capture group `group` of `pattern` is
/// replaced (group 0 is the whole match).
pub struct PhiRule {
    pub name: &'static str,
    pub pattern: Regex,
    group: usize,
}

const MONTHS: &str = "jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?|aug(?:ust)?|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?";
const NAME: &str = r"\p{Lu}[\p{Ll}'\-]+(?:[ \t]+\p{Lu}\.)?(?:[ \t]+\p{Lu}[\p{Ll}'\-]+)*";

/// The fixed, ordered rule set.
pub fn phi_rules() -> &'static [PhiRule] {
    static RULES: OnceLock<Vec<PhiRule>> = OnceLock::new();
    RULES.get_or_init(|| {
        let rule = |name, pattern: &str, group| PhiRule {
            name,
            pattern: Regex::new(pattern).expect("PHI rule pattern"),
            group,
        };
        vec![
            rule(
                "email",
                r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9.\-]+\.[A-Za-z]{2,}",
                0,
            ),
            rule(
                "date-numeric",
                r"\b(?:\d{1,2}[/\-.]\d{1,2}[/\-.](?:\d{4}|\d{2})|\d{4}[/\-]\d{1,2}[/\-]\d{1,2})\b",
                0,
            ),
            rule(
                "date-month-name",
                &format!(
                    r"(?i)\b(?:(?:{MONTHS})\.?[ \t]+\d{{1,2}}(?:st|nd|rd|th)?(?:,?[ \t]+\d{{4}})?|\d{{1,2}}(?:st|nd|rd|th)?[ \t]+(?:{MONTHS})\.?(?:,?[ \t]+\d{{4}})?|(?:{MONTHS})\.?,?[ \t]+\d{{4}})\b"
                ),
                0,
            ),
            rule(
                "phone",
                r"(?:\+?1[ \t.\-])?(?:\(\d{3}\)[ \t]?|\b\d{3}[ \t.\-])?\b\d{3}[.\-]\d{4}\b",
                0,
            ),
            rule("identifier", r"\b\d{6,}\b", 0),
            rule("zip", r"\b\d{5}(?:-\d{4})?\b", 0),
            rule(
                "name-after-title",
                &format!(r"\b(?:Dr|Mr|Mrs|Ms)\.[ \t]+({NAME})|\b(?:MD|RN)[ \t]+({NAME})"),
                1,
            ),
            rule("name-before-credential", &format!(r"({NAME}),?[ \t]+(?:MD|RN)\b"), 1),
        ]
    })
}

/// Byte ranges of `text` covered by any PHI rule, sorted and merged.
pub fn phi_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    for rule in phi_rules() {
        for caps in rule.pattern.captures_iter(text) {
            // Name rules carry alternative capture groups; take whichever matched.
            let m = if rule.group == 0 {
                caps.get(0)
            } else {
                (rule.group..caps.len()).find_map(|g| caps.get(g))
            };
            if let Some(m) = m {
                if !m.is_empty() {
                    spans.push(m.range());
                }
            }
        }
    }
    merge_spans(spans)
}

fn merge_spans(mut spans: Vec<Range<usize>>) -> Vec<Range<usize>> {
    spans.sort_by_key(|r| (r.start, r.end));
    let mut merged: Vec<Range<usize>> = Vec::with_capacity(spans.len());
    for s in spans {
        match merged.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => merged.push(s),
        }
    }
    merged
}

/// Replace every PHI span with [`PHI_TOKEN`].
pub fn deidentify(text: &str) -> String {
    let spans = phi_spans(text);
    if spans.is_empty() {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for span in spans {
        out.push_str(&text[cursor..span.start]);
        out.push_str(PHI_TOKEN);
        cursor = span.end;
    }
    out.push_str(&text[cursor..]);
    out
}

/// Delete non-ASCII characters and ASCII control characters other than
/// whitespace, and collapse each run of horizontal whitespace to one space.
pub fn clean(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\n' => out.push('\n'),
            ' ' | '\t' | '\r' | '\x0b' | '\x0c' => {
                if !out.ends_with(' ') {
                    out.push(' ');
                }
            }
            c if c.is_ascii() && !c.is_ascii_control() => out.push(c),
            _ => {}
        }
    }
    out
}

/// Split on `'\n'`, dropping empty and whitespace-only fragments.
pub fn split_sections(text: &str) -> Vec<Section> {
    text.split('\n')
        .filter(|frag| !frag.trim().is_empty())
        .enumerate()
        .map(|(section_index, frag)| Section {
            text: frag.to_string(),
            note_index: 0,
            section_index,
        })
        .collect()
}

pub fn preprocess_note(raw: &str) -> Vec<Section> {
    split_sections(&clean(&deidentify(raw)))
}

/// Preprocess a patient's notes in order, numbering sections by note.
pub fn preprocess_notes<'a>(notes: impl IntoIterator<Item = &'a str>) -> Vec<Section> {
    notes
        .into_iter()
        .enumerate()
        .flat_map(|(note_index, raw)| {
            preprocess_note(raw).into_iter().map(move |mut s| {
                s.note_index = note_index;
                s
            })
        })
        .collect()
}
