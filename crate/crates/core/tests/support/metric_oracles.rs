//! Brute-force references for the edit-based metrics.

use std::collections::{HashMap, VecDeque};

use cascade_core::metrics::{character_metric, ter, wer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Full Levenshtein table, written independently of the library.
pub fn lev<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j - 1] + c).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Every sequence reachable from `start` by moving contiguous phrases, with
/// the fewest moves needed to reach it.
pub fn shift_closure(start: &[String]) -> HashMap<Vec<String>, usize> {
    let mut seen = HashMap::from([(start.to_vec(), 0)]);
    let mut queue = VecDeque::from([start.to_vec()]);
    while let Some(cur) = queue.pop_front() {
        let k = seen[&cur];
        let n = cur.len();
        for s in 0..n {
            for l in 1..=n - s {
                let phrase = &cur[s..s + l];
                let rest: Vec<String> = cur[..s].iter().chain(&cur[s + l..]).cloned().collect();
                for at in 0..=rest.len() {
                    let mut next = rest[..at].to_vec();
                    next.extend_from_slice(phrase);
                    next.extend_from_slice(&rest[at..]);
                    if !seen.contains_key(&next) {
                        seen.insert(next.clone(), k + 1);
                        queue.push_back(next);
                    }
                }
            }
        }
    }
    seen
}

pub fn oracle_ter(r: &[String], h: &[String]) -> f64 {
    let best = shift_closure(h).iter().map(|(s, k)| k + lev(s, r)).min().unwrap();
    best as f64 / r.len() as f64
}

pub fn oracle_character(r: &[String], h: &[String]) -> f64 {
    let rc: Vec<char> = r.join(" ").chars().collect();
    let best = shift_closure(h)
        .iter()
        .map(|(s, k)| k + lev(&s.join(" ").chars().collect::<Vec<_>>(), &rc))
        .min()
        .unwrap();
    (best as f64 / h.join(" ").chars().count() as f64).min(1.0)
}

pub fn random_words(rng: &mut ChaCha8Rng, vocab: &[&str], max: usize, min: usize) -> Vec<String> {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())].to_string()).collect()
}

/// Agreement between a library metric and its oracle on random pairs.
#[derive(Clone, Copy, Debug, Default)]
pub struct Agreement {
    pub pairs: usize,
    pub equal: usize,
    /// Pairs where the library scored below the exact minimum.
    pub below_oracle: usize,
}

impl Agreement {
    pub fn rate(&self) -> f64 {
        self.equal as f64 / self.pairs as f64
    }

    fn record(&mut self, got: f64, oracle: f64) {
        self.pairs += 1;
        if (got - oracle).abs() < 1e-12 {
            self.equal += 1;
        } else if got < oracle {
            self.below_oracle += 1;
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct OracleSummary {
    /// Pairs where `wer` differs from the full DP table.
    pub wer_mismatches: usize,
    /// Pairs where TER exceeds WER.
    pub ter_above_wer: usize,
    pub ter: Agreement,
    pub character: Agreement,
}

const WORDS: [&str; 4] = ["a", "b", "c", "d"];
const CHAR_WORDS: [&str; 5] = ["aa", "b", "cd", "abc", "d"];

/// Compares wer, ter and character_metric with the oracles on `pairs`
/// random sentence pairs of at most six words.
pub fn compare(pairs: usize, seed: u64) -> OracleSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = OracleSummary::default();
    for _ in 0..pairs {
        let r = random_words(&mut rng, &WORDS, 6, 1);
        let h = random_words(&mut rng, &WORDS, 6, 0);
        let w = wer(&r, &h).unwrap();
        if (w - lev(&r, &h) as f64 / r.len() as f64).abs() > 1e-12 {
            s.wer_mismatches += 1;
        }
        let t = ter(&r.join(" "), &h.join(" "), true).unwrap();
        if t > w + 1e-12 {
            s.ter_above_wer += 1;
        }
        s.ter.record(t, oracle_ter(&r, &h));

        let r = random_words(&mut rng, &CHAR_WORDS, 6, 1);
        let h = random_words(&mut rng, &CHAR_WORDS, 6, 1);
        let c = character_metric(&r.join(" "), &h.join(" ")).unwrap();
        s.character.record(c, oracle_character(&r, &h));
    }
    s
}
