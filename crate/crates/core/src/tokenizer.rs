//! WordPiece vocabulary and fixed-length section encoding.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::PHI_TOKEN;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// Ids below this are reserved special tokens.
pub const N_SPECIAL: u32 = 5;

pub const DEFAULT_VOCAB_SIZE: usize = 2048;
pub const DEFAULT_MAX_LEN: usize = 32;

pub const CONTINUATION: &str = "##";
const MAX_CHARS_PER_WORD: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format("vocab", format!("duplicate token {t:?}")));
            }
        }
        for (id, tok) in [PAD, UNK, CLS, SEP, MASK].iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*tok) {
                return Err(Error::format("vocab", format!("id {id} must be {tok}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        id < N_SPECIAL
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Lowercase, split on whitespace, then split every ASCII punctuation
/// character into its own pre-token. The literal `<phi>` stays whole.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let mut rest = lower.as_str();
        let mut current = String::new();
        while let Some(c) = rest.chars().next() {
            if rest.starts_with(PHI_TOKEN) {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(PHI_TOKEN.to_string());
                rest = &rest[PHI_TOKEN.len()..];
                continue;
            }
            if c.is_ascii_punctuation() {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(c.to_string());
            } else {
                current.push(c);
            }
            rest = &rest[c.len_utf8()..];
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// The text form that survives an encode/decode round trip.
pub fn normalize(text: &str) -> String {
    pre_tokenize(text).join(" ")
}

/// Build a vocabulary: reserved tokens, every corpus character both as a
/// word-initial piece and as a `##` continuation, then whole words by
/// descending frequency (ties lexicographic) while `max_size` allows.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize, min_freq: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::input(
            "cannot build a vocabulary from an empty corpus",
        ));
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for section in corpus {
        for w in pre_tokenize(section.as_ref()) {
            *freq.entry(w).or_default() += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::input("corpus contains no tokens"));
    }
    let mut alphabet: Vec<char> = freq.keys().flat_map(|w| w.chars()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();

    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK].map(String::from).to_vec();
    tokens.extend(alphabet.iter().map(|c| c.to_string()));
    tokens.extend(alphabet.iter().map(|c| format!("{CONTINUATION}{c}")));
    if tokens.len() > max_size {
        return Err(Error::input(format!(
            "max_size {max_size} cannot hold the {} reserved and character tokens",
            tokens.len()
        )));
    }

    let mut words: Vec<(&String, usize)> = freq
        .iter()
        .filter(|(w, &n)| n >= min_freq.max(1) && w.chars().count() > 1)
        .map(|(w, &n)| (w, n))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let room = max_size - tokens.len();
    tokens.extend(words.into_iter().take(room).map(|(w, _)| w.clone()));
    Vocab::from_tokens(tokens)
}

/// Greedy longest-match-first WordPiece for one pre-token.
pub fn wordpiece(word: &str, vocab: &Vocab) -> Vec<u32> {
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    if chars.len() > MAX_CHARS_PER_WORD {
        return vec![UNK_ID];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::new();
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let lo = chars[start].0;
            let hi = chars.get(end).map_or(word.len(), |c| c.0);
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION);
            }
            candidate.push_str(&word[lo..hi]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => {
                pieces.push(id);
                start = end;
            }
            None => {
                // A character never seen in the corpus: the single char
                // becomes [UNK] and matching resumes after it.
                pieces.push(UNK_ID);
                start += 1;
            }
        }
    }
    pieces
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    pre_tokenize(text)
        .iter()
        .flat_map(|w| wordpiece(w, vocab))
        .collect()
}

/// A fixed-length encoded input.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub mask: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-pad positions (pads only ever form a suffix).
    pub fn n_valid(&self) -> usize {
        self.mask.iter().map(|&m| usize::from(m)).sum()
    }

    fn from_parts(mut ids: Vec<u32>, mut segment_ids: Vec<u8>, max_len: usize) -> Self {
        let n = ids.len();
        ids.resize(max_len, PAD_ID);
        segment_ids.resize(max_len, 0);
        let mut mask = vec![1u8; n];
        mask.resize(max_len, 0);
        Self {
            ids,
            segment_ids,
            mask,
        }
    }
}

pub fn encode_section(section: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    encode_section_ids(tokenize(section, vocab), max_len)
}

/// [`encode_section`] over already-tokenized ids.
pub fn encode_section_ids(mut body: Vec<u32>, max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
    body.truncate(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(body);
    ids.push(SEP_ID);
    let segs = vec![0u8; ids.len()];
    TokenSequence::from_parts(ids, segs, max_len)
}

/// `[CLS] A [SEP] B [SEP]`, trimming the longer side first until it fits.
pub fn encode_pair(a: &str, b: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    encode_pair_ids(&tokenize(a, vocab), &tokenize(b, vocab), max_len)
}

/// [`encode_pair`] over already-tokenized ids.
pub fn encode_pair_ids(a: &[u32], b: &[u32], max_len: usize) -> TokenSequence {
    assert!(
        max_len >= 3,
        "max_len must leave room for [CLS] and two [SEP]"
    );
    let (mut na, mut nb) = (a.len(), b.len());
    while na + nb > max_len - 3 {
        if na > nb {
            na -= 1;
        } else {
            nb -= 1;
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(&a[..na]);
    ids.push(SEP_ID);
    let first = ids.len();
    ids.extend(&b[..nb]);
    ids.push(SEP_ID);
    let mut segs = vec![0u8; first];
    segs.resize(ids.len(), 1);
    TokenSequence::from_parts(ids, segs, max_len)
}

/// Drop special tokens (except `[UNK]`, kept as a marker) and merge `##` pieces.
pub fn decode(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut words: Vec<String> = Vec::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or_else(|| {
            Error::input(format!(
                "token id {id} out of range for vocab of {}",
                vocab.len()
            ))
        })?;
        if Vocab::is_special(id) && id != UNK_ID {
            continue;
        }
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) if !words.is_empty() => words.last_mut().unwrap().push_str(rest),
            _ => words.push(tok.to_string()),
        }
    }
    Ok(words.join(" "))
}
