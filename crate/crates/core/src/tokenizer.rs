//! Byte-level BPE tokenizer compatible with the reference contrastive
//! text tower.
//!
//! Text is whitespace-collapsed and lowercased, split with the reference
//! pre-tokenization pattern, mapped byte-by-byte onto printable code points,
//! and merged pairwise in merge-rank order. The last symbol of every word
//! carries the `</w>` end-of-word marker.

use std::collections::HashMap;

use regex::Regex;

use crate::bundle::TokenizerData;
use crate::error::{Error, Result};

const SOT_NAMES: [&str; 2] = ["<|startoftext|>", "<start_of_text>"];
const EOT_NAMES: [&str; 2] = ["<|endoftext|>", "<end_of_text>"];
pub const PAD_ID: u32 = 0;

/// Token ids beginning with start-of-text, ending with end-of-text, padded
/// with [`PAD_ID`] up to the context length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub eot_id: u32,
}

impl TokenSequence {
    /// Index of the end-of-text token.
    pub fn eot_position(&self) -> Option<usize> {
        self.ids.iter().position(|&i| i == self.eot_id)
    }

    /// Same sequence with the padding after end-of-text removed.
    pub fn trimmed(&self) -> Self {
        let end = self.eot_position().map_or(self.ids.len(), |p| p + 1);
        Self {
            ids: self.ids[..end].to_vec(),
            eot_id: self.eot_id,
        }
    }
}

/// Printable code point for each byte value, as in the reference tokenizer.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (u32::from('!')..=u32::from('~')).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b)
    };
    let mut n = 0;
    for b in 0..256u32 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).unwrap()
        } else {
            n += 1;
            char::from_u32(255 + n).unwrap()
        };
    }
    table
}

/// Build the `(vocab, merges)` text blocks the reference construction
/// derives from a merges list: byte symbols, their end-of-word variants,
/// one entry per merge, then the two special tokens.
pub fn vocab_from_merges(merges: &[(String, String)]) -> TokenizerData {
    // printable bytes map to themselves and precede the remapped ones
    let mut bytes = bytes_to_unicode();
    bytes.sort_unstable();
    let mut vocab: Vec<String> = bytes.iter().map(|c| c.to_string()).collect();
    vocab.extend(bytes.iter().map(|c| format!("{c}</w>")));
    vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
    vocab.push(SOT_NAMES[0].into());
    vocab.push(EOT_NAMES[0].into());
    TokenizerData {
        vocab: vocab.join("\n"),
        merges: merges
            .iter()
            .map(|(a, b)| format!("{a} {b}"))
            .collect::<Vec<_>>()
            .join("\n"),
        context_length: 77,
    }
}

#[derive(Debug)]
pub struct Tokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    pattern: Regex,
    sot: u32,
    eot: u32,
    context_length: usize,
}

impl Tokenizer {
    pub fn from_data(data: &TokenizerData) -> Result<Self> {
        let mut encoder = HashMap::new();
        for (id, tok) in data.vocab.lines().enumerate() {
            let id = u32::try_from(id)
                .map_err(|_| Error::Tokenizer("vocabulary larger than u32 ids".into()))?;
            encoder.insert(tok.to_string(), id);
        }
        let mut ranks = HashMap::new();
        for (rank, line) in data.merges.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    ranks.insert((a.to_string(), b.to_string()), rank);
                }
                _ => {
                    return Err(Error::Tokenizer(format!(
                        "merge line {} is not a pair: {line:?}",
                        rank + 1
                    )))
                }
            }
        }
        let find = |names: &[&'static str]| {
            names
                .iter()
                .find_map(|n| encoder.get(*n).map(|&id| (id, *n)))
                .ok_or_else(|| Error::Tokenizer(format!("vocabulary lacks {}", names[0])))
        };
        let (sot, sot_name) = find(&SOT_NAMES)?;
        let (eot, eot_name) = find(&EOT_NAMES)?;
        let pattern = Regex::new(&format!(
            r"(?i){}|{}|'s|'t|'re|'ve|'m|'ll|'d|[\p{{L}}]+|[\p{{N}}]|[^\s\p{{L}}\p{{N}}]+",
            regex::escape(sot_name),
            regex::escape(eot_name)
        ))
        .expect("static pattern");
        if data.context_length < 2 {
            return Err(Error::Tokenizer("context length must hold SOT and EOT".into()));
        }
        Ok(Self {
            encoder,
            ranks,
            byte_encoder: bytes_to_unicode(),
            pattern,
            sot,
            eot,
            context_length: data.context_length,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    pub fn sot_id(&self) -> u32 {
        self.sot
    }

    pub fn eot_id(&self) -> u32 {
        self.eot
    }

    /// BPE ids for `text` without special tokens or padding.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m
                .as_str()
                .bytes()
                .map(|b| self.byte_encoder[b as usize])
                .collect();
            for piece in self.bpe(&mapped) {
                let id = self.encoder.get(&piece).copied().ok_or_else(|| {
                    Error::Tokenizer(format!("BPE piece {piece:?} is not in the vocabulary"))
                })?;
                ids.push(id);
            }
        }
        Ok(ids)
    }

    /// Full context-length sequence, truncated with a trailing end-of-text
    /// when the phrase is too long.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::with_capacity(self.context_length);
        ids.push(self.sot);
        ids.extend(self.encode(text)?);
        ids.push(self.eot);
        if ids.len() > self.context_length {
            ids.truncate(self.context_length);
            *ids.last_mut().unwrap() = self.eot;
        }
        ids.resize(self.context_length, PAD_ID);
        Ok(TokenSequence {
            ids,
            eot_id: self.eot,
        })
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        if SOT_NAMES.contains(&token) || EOT_NAMES.contains(&token) {
            return vec![token.to_string()];
        }
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        match word.last_mut() {
            Some(last) => last.push_str("</w>"),
            None => return Vec::new(),
        }
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p)))
                .min_by_key(|(r, _)| *r);
            let Some((_, pair)) = best else { break };
            let (first, second) = (pair[0].clone(), pair[1].clone());
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut word[i]));
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }
}

/// Tokenize `text` with the tables in `data`.
pub fn bpe_tokenize(text: &str, data: &TokenizerData) -> Result<TokenSequence> {
    Tokenizer::from_data(data)?.tokenize(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::toy_tokenizer;

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let mut seen: Vec<char> = t.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(t[b'a' as usize], 'a');
        assert_eq!(t[b' ' as usize], 'Ġ');
    }

    #[test]
    fn empty_text_is_sot_eot_then_padding() {
        let data = toy_tokenizer(16);
        let seq = bpe_tokenize("", &data).unwrap();
        let tok = Tokenizer::from_data(&data).unwrap();
        assert_eq!(seq.ids.len(), 16);
        assert_eq!(seq.ids[0], tok.sot_id());
        assert_eq!(seq.ids[1], tok.eot_id());
        assert!(seq.ids[2..].iter().all(|&i| i == PAD_ID));
        assert_eq!(bpe_tokenize("   \t ", &data).unwrap(), seq);
    }

    #[test]
    fn deterministic_and_case_folded() {
        let data = toy_tokenizer(16);
        let a = bpe_tokenize("A Photo of a CAT", &data).unwrap();
        let b = bpe_tokenize("a photo of a cat", &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, bpe_tokenize("A Photo of a CAT", &data).unwrap());
    }

    #[test]
    fn merges_apply_in_rank_order() {
        let data = toy_tokenizer(16);
        let tok = Tokenizer::from_data(&data).unwrap();
        // "cat" merges fully into the single `cat</w>` symbol
        let ids = tok.encode("cat").unwrap();
        assert_eq!(ids.len(), 1);
        let vocab: Vec<&str> = data.vocab.lines().collect();
        assert_eq!(vocab[ids[0] as usize], "cat</w>");
    }

    #[test]
    fn long_text_truncates_with_eot() {
        let data = toy_tokenizer(6);
        let seq = bpe_tokenize("zzzz zzzz zzzz", &data).unwrap();
        assert_eq!(seq.ids.len(), 6);
        assert_eq!(*seq.ids.last().unwrap(), seq.eot_id);
    }

    #[test]
    fn missing_piece_is_a_tokenizer_error() {
        let mut data = toy_tokenizer(16);
        let mut lines: Vec<&str> = data.vocab.lines().collect();
        lines.retain(|l| *l != "q</w>");
        data.vocab = lines.join("\n");
        let tok = Tokenizer::from_data(&data).unwrap();
        assert!(matches!(tok.encode("q"), Err(Error::Tokenizer(_))));
    }
}
