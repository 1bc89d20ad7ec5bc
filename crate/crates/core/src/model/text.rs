//! Frequency-built word-piece vocabulary for the text encoder.

use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CONTINUATION: &str = "##";

#[derive(Debug, Clone, PartialEq)]
pub struct TextVocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
}

/// Lowercased alphanumeric words (apostrophes kept inside words).
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl TextVocab {
    pub fn from_pieces(pieces: Vec<String>) -> Self {
        let index = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        Self { pieces, index }
    }

    /// Specials, then every observed character in both word-initial and
    /// continuation form, then the most frequent whole words until `size`.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut chars = BTreeSet::new();
        for t in texts {
            for w in words(t) {
                chars.extend(w.chars());
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut pieces = vec![PAD.to_string(), UNK.to_string()];
        for c in &chars {
            pieces.push(c.to_string());
            pieces.push(format!("{CONTINUATION}{c}"));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(w, _)| w.chars().count() > 1).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (w, _) in ranked {
            if pieces.len() >= size {
                break;
            }
            pieces.push(w);
        }
        Self::from_pieces(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn unk_id(&self) -> u32 {
        self.id(UNK).unwrap_or(1)
    }

    /// Greedy longest-match segmentation of each word.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in words(text) {
            let chars: Vec<char> = w.chars().collect();
            let mut start = 0;
            while start < chars.len() {
                let mut found = None;
                for end in (start + 1..=chars.len()).rev() {
                    let s: String = chars[start..end].iter().collect();
                    let key = if start == 0 { s } else { format!("{CONTINUATION}{s}") };
                    if let Some(id) = self.id(&key) {
                        found = Some((id, end));
                        break;
                    }
                }
                match found {
                    Some((id, end)) => {
                        out.push(id);
                        start = end;
                    }
                    None => {
                        out.push(self.unk_id());
                        start += 1;
                    }
                }
            }
        }
        out
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.pieces {
            h.update(p.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
