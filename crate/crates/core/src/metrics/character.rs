//! CharacTER: word-level shifts, character-level edits, normalised by the
//! hypothesis length in characters (spaces included) and capped at 1.

use super::ter::edit_distance;

const MAX_PHRASE: usize = 10;
const MAX_MOVE: usize = 50;

fn chars_of(words: &[&str]) -> Vec<char> {
    words.join(" ").chars().collect()
}

/// Character edit distance between the space-joined word sequences.
pub fn char_distance(reference: &[&str], hyp: &[&str]) -> usize {
    edit_distance(&chars_of(reference), &chars_of(hyp))
}

/// Best single word-phrase shift: `(gain, shifted)`. Phrases of up to ten
/// words may move up to fifty positions; ties go to the leftmost, then
/// shortest, phrase and then the leftmost destination.
fn best_shift<'a>(hyp: &[&'a str], reference: &[&str], current: usize) -> Option<(usize, Vec<&'a str>)> {
    let mut best: Option<(usize, Vec<&'a str>)> = None;
    for start in 0..hyp.len() {
        for len in 1..=(hyp.len() - start).min(MAX_PHRASE) {
            let phrase = &hyp[start..start + len];
            let rest: Vec<&str> = hyp[..start].iter().chain(&hyp[start + len..]).copied().collect();
            for at in start.saturating_sub(MAX_MOVE)..=(start + MAX_MOVE).min(rest.len()) {
                if at == start {
                    continue;
                }
                let shifted: Vec<&str> = rest[..at].iter().chain(phrase).chain(&rest[at..]).copied().collect();
                let d = char_distance(reference, &shifted);
                if d < current && best.as_ref().is_none_or(|(g, _)| current - d > *g) {
                    best = Some((current - d, shifted));
                }
            }
        }
    }
    best
}

/// `(shifts, character edits)` after greedy shifting.
pub fn character_edits(reference: &[&str], hyp: &[&str]) -> (usize, usize) {
    let mut words = hyp.to_vec();
    let mut dist = char_distance(reference, &words);
    let mut shifts = 0;
    while dist > 0 {
        match best_shift(&words, reference, dist) {
            Some((gain, shifted)) => {
                words = shifted;
                dist -= gain;
                shifts += 1;
            }
            None => break,
        }
    }
    (shifts, dist)
}

pub(crate) fn character_rate(reference: &[&str], hyp: &[&str]) -> f64 {
    let (shifts, edits) = character_edits(reference, hyp);
    let hyp_len = chars_of(hyp).len();
    ((shifts + edits) as f64 / hyp_len as f64).min(1.0)
}
