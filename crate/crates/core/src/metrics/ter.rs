//! Translation edit rate with greedy phrase shifts.
//!
//! Each round tries every hypothesis phrase (up to ten words) that equals a
//! reference phrase, skipping phrases that are already aligned correctly or
//! whose target is already matched, and applies the shift that lowers the
//! word edit distance the most. Ties go to the leftmost, then shortest,
//! phrase. Rounds stop when no shift lowers the distance.

const MAX_SHIFT_SIZE: usize = 10;
const MAX_SHIFT_DIST: usize = 50;
const MAX_SHIFT_CANDIDATES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EditOp {
    Match,
    Sub,
    Ins,
    Del,
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    let mut cur = vec![0; hyp.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hyp.len()]
}

/// Distance plus an operation trace in left-to-right order.
fn edit_trace<T: PartialEq>(reference: &[T], hyp: &[T]) -> (usize, Vec<EditOp>) {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[at(i, 0)] = i;
    }
    for j in 0..=m {
        d[at(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[at(i - 1, j - 1)] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[at(i, j)] = sub.min(d[at(i - 1, j)] + 1).min(d[at(i, j - 1)] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[at(i, j)];
        if i > 0 && j > 0 && here == d[at(i - 1, j - 1)] + usize::from(reference[i - 1] != hyp[j - 1]) {
            ops.push(if reference[i - 1] == hyp[j - 1] { EditOp::Match } else { EditOp::Sub });
            i -= 1;
            j -= 1;
        } else if i > 0 && here == d[at(i - 1, j)] + 1 {
            ops.push(EditOp::Del);
            i -= 1;
        } else {
            ops.push(EditOp::Ins);
            j -= 1;
        }
    }
    ops.reverse();
    (d[at(n, m)], ops)
}

struct Alignment {
    hyp_err: Vec<bool>,
    ref_err: Vec<bool>,
    /// Hypothesis position aligned to each reference position (`None` before
    /// any hypothesis word).
    ref_to_hyp: Vec<Option<usize>>,
}

fn align(ops: &[EditOp], ref_len: usize) -> Alignment {
    let mut a = Alignment {
        hyp_err: Vec::new(),
        ref_err: Vec::new(),
        ref_to_hyp: vec![None; ref_len],
    };
    let (mut h, mut r): (Option<usize>, usize) = (None, 0);
    let next = |h: Option<usize>| Some(h.map_or(0, |x| x + 1));
    for op in ops {
        match op {
            EditOp::Match | EditOp::Sub => {
                h = next(h);
                a.ref_to_hyp[r] = h;
                r += 1;
                let err = *op == EditOp::Sub;
                a.hyp_err.push(err);
                a.ref_err.push(err);
            }
            EditOp::Ins => {
                h = next(h);
                a.hyp_err.push(true);
            }
            EditOp::Del => {
                a.ref_to_hyp[r] = h;
                r += 1;
                a.ref_err.push(true);
            }
        }
    }
    a
}

/// Moves `words[start..start+len]` so that it begins before original index `target`.
pub(crate) fn perform_shift<T: Clone>(words: &[T], start: usize, len: usize, target: usize) -> Vec<T> {
    let phrase = &words[start..start + len];
    let mut out = Vec::with_capacity(words.len());
    if target < start {
        out.extend_from_slice(&words[..target]);
        out.extend_from_slice(phrase);
        out.extend_from_slice(&words[target..start]);
        out.extend_from_slice(&words[start + len..]);
    } else if target > start + len {
        out.extend_from_slice(&words[..start]);
        out.extend_from_slice(&words[start + len..target]);
        out.extend_from_slice(phrase);
        out.extend_from_slice(&words[target..]);
    } else {
        let cut = (len + target).min(words.len());
        out.extend_from_slice(&words[..start]);
        out.extend_from_slice(&words[start + len..cut]);
        out.extend_from_slice(phrase);
        out.extend_from_slice(&words[cut..]);
    }
    out
}

fn best_shift<T: PartialEq + Clone>(hyp: &[T], reference: &[T]) -> Option<(usize, Vec<T>)> {
    let (dist, ops) = edit_trace(reference, hyp);
    let a = align(&ops, reference.len());
    // (gain, start, len, target) with the leftmost-shortest tie-break
    let mut best: Option<(usize, usize, usize, usize, Vec<T>)> = None;
    let mut checked = 0;
    'outer: for start_h in 0..hyp.len() {
        for start_r in 0..reference.len() {
            if start_h.abs_diff(start_r) > MAX_SHIFT_DIST {
                continue;
            }
            let mut len = 0;
            while len < MAX_SHIFT_SIZE
                && start_h + len < hyp.len()
                && start_r + len < reference.len()
                && hyp[start_h + len] == reference[start_r + len]
            {
                len += 1;
                if !a.hyp_err[start_h..start_h + len].iter().any(|&e| e) {
                    continue;
                }
                if !a.ref_err[start_r..start_r + len].iter().any(|&e| e) {
                    continue;
                }
                if let Some(h) = a.ref_to_hyp[start_r] {
                    if (start_h..start_h + len).contains(&h) {
                        continue;
                    }
                }
                let mut prev_target = None;
                for offset in -1isize..len as isize {
                    let pos = start_r as isize + offset;
                    let target = if pos < 0 {
                        0
                    } else {
                        match a.ref_to_hyp[pos as usize] {
                            Some(h) => h + 1,
                            None => 0,
                        }
                    };
                    if prev_target == Some(target) {
                        continue;
                    }
                    prev_target = Some(target);
                    let shifted = perform_shift(hyp, start_h, len, target);
                    let new_dist = edit_distance(reference, &shifted);
                    checked += 1;
                    if new_dist < dist {
                        let gain = dist - new_dist;
                        let better = match &best {
                            None => true,
                            Some((g, s, l, t, _)) => (gain, std::cmp::Reverse((start_h, len, target))) > (*g, std::cmp::Reverse((*s, *l, *t))),
                        };
                        if better {
                            best = Some((gain, start_h, len, target, shifted));
                        }
                    }
                }
                if checked >= MAX_SHIFT_CANDIDATES {
                    break 'outer;
                }
            }
        }
    }
    best.map(|(gain, _, _, _, words)| (gain, words))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TerStats {
    pub shifts: usize,
    pub edits: usize,
    pub ref_len: usize,
}

impl TerStats {
    pub fn total(&self) -> usize {
        self.shifts + self.edits
    }
}

/// Greedy shift search followed by the final edit distance.
pub fn ter_stats<T: PartialEq + Clone>(reference: &[T], hyp: &[T]) -> TerStats {
    let mut words = hyp.to_vec();
    let mut shifts = 0;
    while let Some((_, shifted)) = best_shift(&words, reference) {
        words = shifted;
        shifts += 1;
    }
    TerStats {
        shifts,
        edits: edit_distance(reference, &words),
        ref_len: reference.len(),
    }
}
