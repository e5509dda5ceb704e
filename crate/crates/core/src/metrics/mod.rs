//! Scoring: WER, BLEU, TER and CharacTER with case-insensitive variants,
//! and a report table in the usual results layout.

mod bleu;
mod character;
mod ter;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bleu::{bleu, bleu_signature, score_from_stats, sentence_stats, tokenize_13a, BleuScore, NgramStats, MAX_ORDER};
pub use character::{char_distance, character_edits};
pub use ter::{edit_distance, ter_stats, TerStats};

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Word edit distance divided by the reference length.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Metric("WER needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hyp) as f64 / reference.len() as f64)
}

/// Translation edit rate on whitespace tokens.
pub fn ter(reference: &str, hyp: &str, case_sensitive: bool) -> Result<f64> {
    let (r, h) = case_pair(reference, hyp, case_sensitive);
    let st = ter_stats(&words(&r), &words(&h));
    if st.ref_len == 0 {
        return Err(Error::Metric("TER needs a non-empty reference".into()));
    }
    Ok(st.total() as f64 / st.ref_len as f64)
}

/// CharacTER of one sentence pair.
pub fn character_metric(reference: &str, hyp: &str) -> Result<f64> {
    let h = words(hyp);
    if h.is_empty() {
        return Err(Error::Metric("CharacTER needs a non-empty hypothesis".into()));
    }
    Ok(character::character_rate(&words(reference), &h))
}

fn case_pair(reference: &str, hyp: &str, case_sensitive: bool) -> (String, String) {
    if case_sensitive {
        (reference.to_string(), hyp.to_string())
    } else {
        (bleu::fold_case(reference), bleu::fold_case(hyp))
    }
}

fn check_aligned<R, H>(refs: &[R], hyps: &[H]) -> Result<()> {
    if refs.len() != hyps.len() {
        return Err(Error::Misaligned {
            hyp: hyps.len(),
            reference: refs.len(),
        });
    }
    if refs.is_empty() {
        return Err(Error::Metric("no lines to score".into()));
    }
    Ok(())
}

/// Corpus WER: summed word edits over summed reference words.
pub fn corpus_wer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    check_aligned(refs, hyps)?;
    let (mut edits, mut len) = (0, 0);
    for (r, h) in refs.iter().zip(hyps) {
        let r = words(r.as_ref());
        edits += edit_distance(&r, &words(h.as_ref()));
        len += r.len();
    }
    if len == 0 {
        return Err(Error::Metric("WER needs a non-empty reference".into()));
    }
    Ok(edits as f64 / len as f64)
}

/// Corpus TER: summed shifts and edits over summed reference words.
pub fn corpus_ter<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H], case_sensitive: bool) -> Result<f64> {
    check_aligned(refs, hyps)?;
    let (mut edits, mut len) = (0, 0);
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = case_pair(r.as_ref(), h.as_ref(), case_sensitive);
        let st = ter_stats(&words(&r), &words(&h));
        edits += st.total();
        len += st.ref_len;
    }
    if len == 0 {
        return Err(Error::Metric("TER needs a non-empty reference".into()));
    }
    Ok(edits as f64 / len as f64)
}

/// Mean sentence CharacTER; an empty hypothesis line scores 1.
pub fn corpus_character<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    check_aligned(refs, hyps)?;
    let total: f64 = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| character_metric(r.as_ref(), h.as_ref()).unwrap_or(1.0))
        .sum();
    Ok(total / refs.len() as f64)
}

/// One row of the results table. BLEU is 0 to 100; the rates are fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetScores {
    pub set: String,
    pub bleu: f64,
    pub ter: f64,
    pub character: f64,
    pub bleu_ci: f64,
    pub ter_ci: f64,
    pub wer: Option<f64>,
    pub lines: usize,
}

impl SetScores {
    pub fn compute<R: AsRef<str>, H: AsRef<str>>(set: &str, refs: &[R], hyps: &[H], with_wer: bool) -> Result<Self> {
        check_aligned(refs, hyps)?;
        Ok(Self {
            set: set.to_string(),
            bleu: bleu(refs, hyps, true)?.score,
            ter: corpus_ter(refs, hyps, true)?,
            character: corpus_character(refs, hyps)?,
            bleu_ci: bleu(refs, hyps, false)?.score,
            ter_ci: corpus_ter(refs, hyps, false)?,
            wer: if with_wer { Some(corpus_wer(refs, hyps)?) } else { None },
            lines: refs.len(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<SetScores>,
}

impl EvalReport {
    /// Plain-text table; TER, CharacTER and WER are shown as percentages and
    /// BEER as `n/a`.
    pub fn table(&self) -> String {
        let with_wer = self.rows.iter().any(|r| r.wer.is_some());
        let mut out = format!(
            "{:<12} {:>7} {:>7} {:>7} {:>9} {:>8} {:>7}",
            "SET", "BLEU", "TER", "BEER", "CharacTER", "BLEU(ci)", "TER(ci)"
        );
        if with_wer {
            out.push_str(&format!(" {:>7}", "WER"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>7.2} {:>7.2} {:>7} {:>9.2} {:>8.2} {:>7.2}",
                r.set,
                r.bleu,
                100.0 * r.ter,
                "n/a",
                100.0 * r.character,
                r.bleu_ci,
                100.0 * r.ter_ci
            ));
            if with_wer {
                match r.wer {
                    Some(w) => out.push_str(&format!(" {:>7.2}", 100.0 * w)),
                    None => out.push_str(&format!(" {:>7}", "-")),
                }
            }
            out.push('\n');
        }
        out.push_str(&format!("BLEU {}\n", bleu_signature(true)));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
