//! Token attention summaries and their XHTML rendering.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{forward_seq, EncoderParams};
use crate::error::{Error, Result};
use crate::tokenizer::{encode_section, TokenSequence, Vocab, CONTINUATION, UNK_ID};

/// Whether a position carries text: real pieces and `[UNK]`, never
/// `[CLS]`, `[SEP]`, `[MASK]` or padding.
fn is_content(id: u32) -> bool {
    !Vocab::is_special(id) || id == UNK_ID
}

/// Last-layer attention from the `[CLS]` query, averaged over heads and
/// renormalized over content tokens. Returns `(position, weight)` pairs in
/// position order; empty when the section has no content token.
pub fn attention_weights(params: &EncoderParams, seq: &TokenSequence) -> Result<Vec<(usize, f64)>> {
    let cache = forward_seq(params, seq, None)?;
    let heads = cache.attention(cache.n_layers() - 1);
    let n = cache.n_valid();
    let mut weights: Vec<(usize, f64)> = (0..n)
        .filter(|&j| is_content(seq.ids[j]))
        .map(|j| {
            (
                j,
                heads.iter().map(|a| a[[0, j]]).sum::<f64>() / heads.len() as f64,
            )
        })
        .collect();
    let total: f64 = weights.iter().map(|w| w.1).sum();
    if total > 0.0 {
        for w in &mut weights {
            w.1 /= total;
        }
    }
    Ok(weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub token: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionAttention {
    pub text: String,
    pub tokens: Vec<TokenWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub patient_id: String,
    pub sections: Vec<SectionAttention>,
}

/// Attention summary for each of a patient's (deidentified) sections.
pub fn attention_report<S: AsRef<str>>(
    params: &EncoderParams,
    vocab: &Vocab,
    patient_id: &str,
    sections: &[S],
    max_len: usize,
) -> Result<AttentionReport> {
    let mut out = Vec::with_capacity(sections.len());
    for s in sections {
        let text = s.as_ref();
        let seq = encode_section(text, vocab, max_len);
        let tokens = attention_weights(params, &seq)?
            .into_iter()
            .map(|(j, weight)| TokenWeight {
                token: vocab.token(seq.ids[j]).unwrap_or("[UNK]").to_string(),
                weight,
            })
            .collect();
        out.push(SectionAttention {
            text: text.to_string(),
            tokens,
        });
    }
    Ok(AttentionReport {
        patient_id: patient_id.to_string(),
        sections: out,
    })
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Self-contained XHTML 1.0 Strict document. Each token is a `span` whose
/// background opacity is its weight relative to the section maximum.
pub fn render_xhtml(report: &AttentionReport) -> String {
    let mut h = String::new();
    let id = escape(&report.patient_id);
    h.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    h.push_str("<!DOCTYPE html PUBLIC \"-//W3C//DTD XHTML 1.0 Strict//EN\" \"http://www.w3.org/TR/xhtml1/DTD/xhtml1-strict.dtd\">\n");
    h.push_str("<html xmlns=\"http://www.w3.org/1999/xhtml\" xml:lang=\"en\" lang=\"en\">\n");
    let _ = writeln!(h, "<head><title>Attention for {id}</title></head>");
    h.push_str("<body>\n");
    let _ = writeln!(h, "<h1>Attention for {id}</h1>");
    for (i, s) in report.sections.iter().enumerate() {
        let max = s.tokens.iter().map(|t| t.weight).fold(0.0, f64::max);
        let _ = write!(h, "<p class=\"section\" id=\"s{i}\">");
        for (k, t) in s.tokens.iter().enumerate() {
            let (text, joined) = match t.token.strip_prefix(CONTINUATION) {
                Some(rest) => (rest, true),
                None => (t.token.as_str(), false),
            };
            if k > 0 && !joined {
                h.push(' ');
            }
            let alpha = if max > 0.0 { t.weight / max } else { 0.0 };
            let _ = write!(
                h,
                "<span title=\"{:.4}\" style=\"background-color: rgba(255, 80, 0, {alpha:.3})\">{}</span>",
                t.weight,
                escape(text)
            );
        }
        h.push_str("</p>\n");
    }
    h.push_str("</body>\n</html>\n");
    h
}

pub fn export_attention_report(report: &AttentionReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, render_xhtml(report)).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};
    use crate::tokenizer::build_vocab;

    fn setup() -> (EncoderParams, Vocab) {
        let vocab = build_vocab(
            &["patient reports memory loss .", "<phi> denies headache"],
            200,
            1,
        )
        .unwrap();
        let cfg = EncoderConfig::tiny(vocab.len());
        (init_params(&cfg, 5).unwrap(), vocab)
    }

    #[test]
    fn weights_normalized_over_content() {
        let (p, v) = setup();
        let seq = encode_section("patient reports memory loss.", &v, 8);
        let w = attention_weights(&p, &seq).unwrap();
        assert_eq!(w.len(), 5);
        assert!(w.iter().all(|&(j, x)| j > 0 && x > 0.0));
        assert!((w.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_token_gets_everything() {
        let (p, v) = setup();
        let w = attention_weights(&p, &encode_section("memory", &v, 8)).unwrap();
        assert_eq!(w, vec![(1, 1.0)]);
        assert!(attention_weights(&p, &encode_section("", &v, 8))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn phi_is_escaped_and_rendering_deterministic() {
        let (p, v) = setup();
        let r = attention_report(&p, &v, "P<1>", &["<phi> denies headache"], 8).unwrap();
        assert_eq!(r.sections[0].tokens[0].token, "<phi>");
        let x = render_xhtml(&r);
        assert!(x.contains("&lt;phi&gt;"));
        assert!(!x.contains("<phi>"));
        assert!(x.contains("P&lt;1&gt;"));
        assert_eq!(
            x,
            render_xhtml(&attention_report(&p, &v, "P<1>", &["<phi> denies headache"], 8).unwrap())
        );
    }
}
