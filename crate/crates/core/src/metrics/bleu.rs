use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Signature printed under reports, in the usual `key:value|…` style.
pub fn bleu_signature(case_sensitive: bool) -> String {
    let case = if case_sensitive { "mixed" } else { "lc" };
    format!("nrefs:1|case:{case}|eff:auto|tok:13a|smooth:none")
}

struct Rules {
    punct: Regex,
    period_comma_after: Regex,
    period_comma_before: Regex,
    dash: Regex,
}

fn rules() -> &'static Rules {
    static R: OnceLock<Rules> = OnceLock::new();
    R.get_or_init(|| Rules {
        punct: Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").unwrap(),
        period_comma_after: Regex::new(r"([^0-9])([\.,])").unwrap(),
        period_comma_before: Regex::new(r"([\.,])([^0-9])").unwrap(),
        dash: Regex::new(r"([0-9])(-)").unwrap(),
    })
}

/// The `13a` tokenizer: unescapes a few entities, splits ASCII punctuation
/// from words, and splits periods and commas except inside numbers.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let s = format!(" {s} ");
    let r = rules();
    let s = r.punct.replace_all(&s, " $1 ");
    let s = r.period_comma_after.replace_all(&s, "$1 $2 ");
    let s = r.period_comma_before.replace_all(&s, " $1 $2");
    let s = r.dash.replace_all(&s, "$1 $2 ");
    s.split_whitespace().map(str::to_string).collect()
}

pub(crate) fn fold_case(s: &str) -> String {
    s.to_lowercase()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// 0 to 100.
    pub score: f64,
    /// Clipped n-gram precisions in percent, orders 1 to 4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub sys_len: usize,
    pub ref_len: usize,
    /// Highest order with at least one hypothesis n-gram.
    pub effective_order: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NgramStats {
    pub correct: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
    pub sys_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in toks.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

pub fn sentence_stats(reference: &[String], hyp: &[String]) -> NgramStats {
    let mut st = NgramStats {
        sys_len: hyp.len(),
        ref_len: reference.len(),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let r = ngram_counts(reference, n);
        for (g, c) in ngram_counts(hyp, n) {
            st.correct[n - 1] += c.min(r.get(g).copied().unwrap_or(0));
            st.total[n - 1] += c;
        }
    }
    st
}

/// Score from accumulated statistics. Orders for which the hypotheses hold
/// no n-grams at all are left out of the geometric mean; any order with
/// n-grams but no matches gives 0.
pub fn score_from_stats(st: &NgramStats) -> BleuScore {
    let mut precisions = [0.0; MAX_ORDER];
    let mut effective_order = 0;
    for n in 0..MAX_ORDER {
        if st.total[n] == 0 {
            break;
        }
        effective_order = n + 1;
        precisions[n] = 100.0 * st.correct[n] as f64 / st.total[n] as f64;
    }
    let brevity_penalty = if st.sys_len == 0 {
        0.0
    } else if st.sys_len < st.ref_len {
        (1.0 - st.ref_len as f64 / st.sys_len as f64).exp()
    } else {
        1.0
    };
    let score = if effective_order == 0 || precisions[..effective_order].contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions[..effective_order].iter().map(|p| (p / 100.0).ln()).sum::<f64>() / effective_order as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    BleuScore {
        score: score.clamp(0.0, 100.0),
        precisions,
        brevity_penalty,
        sys_len: st.sys_len,
        ref_len: st.ref_len,
        effective_order,
    }
}

/// Corpus BLEU over line-aligned references and hypotheses.
pub fn bleu<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H], case_sensitive: bool) -> Result<BleuScore> {
    if refs.len() != hyps.len() {
        return Err(Error::Misaligned {
            hyp: hyps.len(),
            reference: refs.len(),
        });
    }
    let prep = |s: &str| {
        if case_sensitive {
            tokenize_13a(s)
        } else {
            tokenize_13a(&fold_case(s))
        }
    };
    let mut total = NgramStats::default();
    for (r, h) in refs.iter().zip(hyps) {
        let st = sentence_stats(&prep(r.as_ref()), &prep(h.as_ref()));
        for n in 0..MAX_ORDER {
            total.correct[n] += st.correct[n];
            total.total[n] += st.total[n];
        }
        total.sys_len += st.sys_len;
        total.ref_len += st.ref_len;
    }
    Ok(score_from_stats(&total))
}
