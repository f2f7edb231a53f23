//! Lowercased byte-level BPE tokenizer with start/end tokens.
//!
//! Bytes are mapped to printable characters, words carry a `</w>` suffix on
//! their last symbol, and merges are applied greedily by rank. The merge table
//! bundled in `assets/bpe_merges.txt` is trained from `assets/bpe_corpus.txt`
//! with [`train_merges`] (see `examples/train_bpe.rs`).

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";
const WORD_END: &str = "</w>";
const BUNDLED_MERGES: &str = include_str!("../assets/bpe_merges.txt");
const PRETOKENIZE: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+";

#[derive(Debug, Error, PartialEq)]
pub enum TokenizationError {
    #[error("text needs {needed} tokens but the context holds {limit}")]
    Overflow { needed: usize, limit: usize },
    #[error("malformed merges file at line {0}")]
    BadMerges(usize),
    #[error("token sequence must end with exactly one end token")]
    MissingEnd,
}

/// What to do when a text does not fit the context window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Overflow {
    Strict,
    Truncate,
}

/// Encoded text: `[start, ..., end]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenIds {
    pub ids: Vec<u32>,
    pub truncated: bool,
}

impl TokenIds {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// GPT-2 style reversible byte to printable-char table.
fn byte_table() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).collect();
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        table[b as usize] = if printable.contains(&b) {
            char::from_u32(b).expect("latin-1")
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("bmp")
        };
    }
    table
}

fn pretokenizer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(PRETOKENIZE).expect("static pattern"))
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Initial symbols of a word: one per byte, the last one suffixed with `</w>`.
fn word_symbols(word: &str, bytes: &[char; 256]) -> Vec<String> {
    let mut syms: Vec<String> = word.bytes().map(|b| bytes[b as usize].to_string()).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(WORD_END);
    }
    syms
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    bytes: [char; 256],
    vocab_size: usize,
    context_len: usize,
    identifier: String,
}

impl Tokenizer {
    /// The bundled merge table with a 77-token context.
    pub fn bundled() -> &'static Tokenizer {
        static TOK: OnceLock<Tokenizer> = OnceLock::new();
        TOK.get_or_init(|| Tokenizer::from_merges(BUNDLED_MERGES, 77).expect("bundled merges parse"))
    }

    pub fn from_merges(merges: &str, context_len: usize) -> Result<Self, TokenizationError> {
        let bytes = byte_table();
        let mut vocab: Vec<String> = bytes.iter().map(|c| c.to_string()).collect();
        vocab.extend(bytes.iter().map(|c| format!("{c}{WORD_END}")));
        let mut ranks = HashMap::new();
        for (lineno, line) in merges.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with("#version") {
                continue;
            }
            let mut it = line.split(' ');
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(TokenizationError::BadMerges(lineno + 1));
            };
            ranks.insert((a.to_string(), b.to_string()), ranks.len());
            vocab.push(format!("{a}{b}"));
        }
        vocab.push(START_TOKEN.to_string());
        vocab.push(END_TOKEN.to_string());
        let vocab_size = vocab.len();
        let encoder = vocab.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        let digest = Sha256::digest(merges.as_bytes());
        let identifier = format!("bpe-{}m-{}", ranks.len(), &hex::encode(digest)[..12]);
        Ok(Self { encoder, ranks, bytes, vocab_size, context_len, identifier })
    }

    /// Stable identifier of the merge table, recorded in checkpoints.
    pub fn identifier(&self) -> &str {
        &self.identifier
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn start_id(&self) -> u32 {
        self.encoder[START_TOKEN]
    }

    pub fn end_id(&self) -> u32 {
        self.encoder[END_TOKEN]
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word, &self.bytes);
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && self.ranks.get(&(syms[i].clone(), syms[i + 1].clone())) == Some(&rank) {
                    merged.push(format!("{}{}", syms[i], syms[i + 1]));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = merged;
        }
        syms
    }

    /// Body tokens without start/end markers.
    pub fn encode_body(&self, text: &str) -> Vec<u32> {
        let text = normalize(text);
        let mut ids = Vec::new();
        for m in pretokenizer().find_iter(&text) {
            ids.extend(self.bpe(m.as_str()).iter().map(|s| self.encoder[s.as_str()]));
        }
        ids
    }

    /// `[start] + body + [end]`, checked against the context length.
    pub fn encode(&self, text: &str, mode: Overflow) -> Result<TokenIds, TokenizationError> {
        let body = self.encode_body(text);
        let needed = body.len() + 2;
        let mut truncated = false;
        let body = if needed > self.context_len {
            match mode {
                Overflow::Strict => {
                    return Err(TokenizationError::Overflow { needed, limit: self.context_len })
                }
                Overflow::Truncate => {
                    truncated = true;
                    &body[..self.context_len - 2]
                }
            }
        } else {
            &body[..]
        };
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(self.start_id());
        ids.extend_from_slice(body);
        ids.push(self.end_id());
        Ok(TokenIds { ids, truncated })
    }

    /// Inverse of [`encode_body`](Self::encode_body) up to whitespace normalization.
    pub fn decode(&self, ids: &[u32]) -> String {
        let decoder: HashMap<u32, &str> = self.encoder.iter().map(|(s, &i)| (i, s.as_str())).collect();
        let inverse: HashMap<char, u8> = self.bytes.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let mut out = Vec::new();
        for id in ids {
            let Some(sym) = decoder.get(id) else { continue };
            if *sym == START_TOKEN || *sym == END_TOKEN {
                continue;
            }
            let (body, end) = match sym.strip_suffix(WORD_END) {
                Some(b) => (b, true),
                None => (*sym, false),
            };
            out.extend(body.chars().filter_map(|c| inverse.get(&c)));
            if end {
                out.push(b' ');
            }
        }
        String::from_utf8_lossy(&out).trim_end().to_string()
    }
}

/// Learns up to `n_merges` merges from `corpus` by repeatedly joining the most
/// frequent adjacent symbol pair. Ties go to the lexicographically smallest pair.
pub fn train_merges(corpus: &str, n_merges: usize) -> Vec<(String, String)> {
    let bytes = byte_table();
    let text = normalize(corpus);
    let mut freq: HashMap<String, usize> = HashMap::new();
    for m in pretokenizer().find_iter(&text) {
        *freq.entry(m.as_str().to_string()).or_default() += 1;
    }
    let mut words: Vec<(Vec<String>, usize)> = freq.into_iter().map(|(w, c)| (word_symbols(&w, &bytes), c)).collect();
    words.sort();
    let mut merges = Vec::new();
    while merges.len() < n_merges {
        let mut pairs: HashMap<(String, String), usize> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].clone(), w[1].clone())).or_default() += c;
            }
        }
        let best = pairs
            .into_iter()
            .filter(|(_, c)| *c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((a, b), _)) = best else { break };
        for (syms, _) in &mut words {
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = merged;
        }
        merges.push((a, b));
    }
    merges
}

/// Serializes merges in the `#version` + one-pair-per-line format.
pub fn format_merges(merges: &[(String, String)]) -> String {
    let mut s = String::from("#version: grain-bpe 1\n");
    for (a, b) in merges {
        s.push_str(a);
        s.push(' ');
        s.push_str(b);
        s.push('\n');
    }
    s
}
