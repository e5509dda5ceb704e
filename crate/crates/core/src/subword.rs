//! Merge-based BPE with an explicit end-of-word marker.
//!
//! Ids are laid out as `specials ++ alphabet ++ merges`: the special tokens
//! (`[PAD]`, `[BOS]`, `[EOS]`, `[UNK]` and the source tags) take the lowest
//! ids, then every base symbol in sorted order (including the marker),
//! then one id per learned merge in learning order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const END_OF_WORD: char = '\u{2581}';
pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const UNK: &str = "[UNK]";
pub const DEFAULT_TAGS: [&str; 3] = ["[LS]", "[MC]", "[CV]"];
pub const VOCAB_FORMAT_VERSION: u32 = 1;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        Self { ids }
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: Vec<String>,
    alphabet: Vec<String>,
    merges: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    specials: Vec<String>,
    alphabet: Vec<String>,
    merges: Vec<(String, String)>,
    token_of: Vec<String>,
    id_of: HashMap<String, u32>,
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
}

fn specials_with(tags: &[&str]) -> Vec<String> {
    [PAD, BOS, EOS, UNK]
        .iter()
        .chain(tags)
        .map(|s| s.to_string())
        .collect()
}

fn split_word(word: &str) -> Vec<String> {
    word.chars()
        .map(String::from)
        .chain(std::iter::once(END_OF_WORD.to_string()))
        .collect()
}

impl Vocabulary {
    fn assemble(specials: Vec<String>, alphabet: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut token_of = specials.clone();
        token_of.extend(alphabet.iter().cloned());
        token_of.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        let mut id_of = HashMap::with_capacity(token_of.len());
        for (i, tok) in token_of.iter().enumerate() {
            if id_of.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token `{tok}`")));
            }
        }
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            let lookup = |s: &String| {
                id_of
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Vocabulary(format!("merge refers to unknown symbol `{s}`")))
            };
            let pair = (lookup(a)?, lookup(b)?);
            let merged = (specials.len() + alphabet.len() + rank) as u32;
            if merge_rank.insert(pair, (rank, merged)).is_some() {
                return Err(Error::Vocabulary(format!("duplicate merge ({a}, {b})")));
            }
        }
        Ok(Self {
            specials,
            alphabet,
            merges,
            token_of,
            id_of,
            merge_rank,
        })
    }

    /// Learns merges greedily by pair frequency (ties broken by the
    /// lexicographically smallest pair) until the vocabulary holds
    /// `target_size` entries or no pair occurs at least twice.
    pub fn learn<S: AsRef<str>>(corpus: &[S], target_size: usize, tags: &[&str]) -> Result<Self> {
        let mut words: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for line in corpus {
            for w in line.as_ref().split_whitespace() {
                *words.entry(split_word(w)).or_default() += 1;
            }
        }
        if words.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let specials = specials_with(tags);
        let alphabet: Vec<String> = words
            .keys()
            .flatten()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let base = specials.len() + alphabet.len();
        if target_size <= base {
            return Err(Error::Vocabulary(format!(
                "target size {target_size} must exceed {base} specials and base symbols"
            )));
        }
        let mut known: BTreeSet<String> = specials.iter().chain(&alphabet).cloned().collect();
        let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();
        let mut merges = Vec::new();
        while base + merges.len() < target_size {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (symbols, freq) in &words {
                for pair in symbols.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += freq;
                }
            }
            // BTreeMap iterates pairs in lexicographic order, so the first
            // maximum wins ties. Pairs whose concatenation already exists are
            // skipped to keep token strings unique.
            let mut best: Option<((&str, &str), usize)> = None;
            for (pair, count) in counts {
                if count < 2 || known.contains(&format!("{}{}", pair.0, pair.1)) {
                    continue;
                }
                if best.is_none_or(|(_, c)| count > c) {
                    best = Some((pair, count));
                }
            }
            let Some(((a, b), _)) = best else { break };
            let (a, b) = (a.to_string(), b.to_string());
            let merged = format!("{a}{b}");
            for (symbols, _) in &mut words {
                *symbols = apply_merge(symbols, &a, &b, &merged);
            }
            known.insert(merged);
            merges.push((a, b));
        }
        Self::assemble(specials, alphabet, merges)
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.token_of.get(id as usize).map(String::as_str)
    }

    /// Source tags in id order.
    pub fn tags(&self) -> &[String] {
        &self.specials[4..]
    }

    pub fn tag_id(&self, tag: &str) -> Result<u32> {
        self.tags()
            .iter()
            .position(|t| t == tag)
            .map(|i| (4 + i) as u32)
            .ok_or_else(|| Error::UnknownTag(tag.to_string()))
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.specials.len()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = word
            .chars()
            .chain(std::iter::once(END_OF_WORD))
            .map(|c| {
                let mut buf = [0u8; 4];
                self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK_ID)
            })
            .collect();
        // repeatedly apply the earliest-learned merge present in the word
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.merge_rank.get(&(p[0], p[1])).map(|&(rank, id)| (rank, i, id)))
                .min();
            let Some((rank, _, merged)) = best else { break };
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && self.merge_rank.get(&(symbols[i], symbols[i + 1])).map(|r| r.0) == Some(rank) {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend(symbols);
    }

    /// Unknown characters map to `[UNK]`; special tokens are never produced.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            self.encode_word(word, &mut ids);
        }
        TokenSequence { ids }
    }

    /// Joins tokens, turning end-of-word markers into spaces. Special tokens
    /// are rendered literally as separate words.
    pub fn decode(&self, toks: &TokenSequence) -> Result<String> {
        let mut out = String::new();
        for &id in &toks.ids {
            let tok = self.token(id).ok_or(Error::InvalidTokenId { id, size: self.len() })?;
            if self.is_special(id) {
                if !out.is_empty() && !out.ends_with(' ') {
                    out.push(' ');
                }
                out.push_str(tok);
                out.push(' ');
            } else {
                out.extend(tok.chars().map(|c| if c == END_OF_WORD { ' ' } else { c }));
            }
        }
        Ok(out.trim_end().to_string())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            version: VOCAB_FORMAT_VERSION,
            specials: self.specials.clone(),
            alphabet: self.alphabet.clone(),
            merges: self.merges.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(Error::Vocabulary(format!("unsupported vocabulary version {}", file.version)));
        }
        if file.specials.len() < 4 || file.specials[..4] != [PAD, BOS, EOS, UNK] {
            return Err(Error::Vocabulary("specials must start with [PAD] [BOS] [EOS] [UNK]".into()));
        }
        Self::assemble(file.specials, file.alphabet, file.merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the serialised vocabulary, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let json = self.to_json().expect("vocabulary serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn apply_merge(symbols: &[String], a: &str, b: &str, merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}
