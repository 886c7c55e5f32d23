//! Word-level tokenizer over the template lexicon with byte fallback.
//!
//! Layout of the id space: `PAD, BOS, EOS, BYTES`, then 256 byte ids, then
//! lexicon words in sorted order. An out-of-lexicon word is emitted as the
//! `BYTES` marker followed by its UTF-8 bytes.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::template::lexicon_sentences;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const BYTES: u32 = 3;
const BYTE_BASE: u32 = 4;
const WORD_BASE: u32 = BYTE_BASE + 256;

/// Maximum sequence length including `BOS` and `EOS`.
pub const MAX_LEN: usize = 77;

const PUNCT: &[char] = &[',', '.', ';', ':', '!', '?', '(', ')', '"', '\''];

pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

fn split_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for chunk in lower.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if PUNCT.contains(&c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn join_words(words: &[String]) -> String {
    let mut s = String::new();
    for w in words {
        let attach = w.len() == 1 && matches!(w.as_bytes()[0], b',' | b'.' | b';' | b':' | b'!' | b'?' | b')');
        if !s.is_empty() && !attach && !s.ends_with('(') {
            s.push(' ');
        }
        s.push_str(w);
    }
    s
}

/// Lowercase, one space between words, punctuation attached to the word
/// before it.
pub fn normalize(text: &str) -> String {
    join_words(&split_words(text))
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut words: Vec<String> = lexicon_sentences().iter().flat_map(|s| split_words(s)).collect();
        words.extend(PUNCT.iter().map(|c| c.to_string()));
        words.sort();
        words.dedup();
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), WORD_BASE + i as u32))
            .collect();
        Self { words, ids }
    }

    /// Process-wide instance; the vocabulary is fixed.
    pub fn shared() -> &'static Tokenizer {
        static TOK: OnceLock<Tokenizer> = OnceLock::new();
        TOK.get_or_init(Tokenizer::new)
    }

    pub fn vocab_size(&self) -> usize {
        WORD_BASE as usize + self.words.len()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        for w in split_words(text) {
            match self.ids.get(&w) {
                Some(&id) => ids.push(id),
                None => {
                    ids.push(BYTES);
                    ids.extend(w.bytes().map(|b| BYTE_BASE + b as u32));
                }
            }
        }
        ids.truncate(MAX_LEN - 1);
        ids.push(EOS);
        ids
    }

    /// Display form of one id, for attention-map row labels.
    pub fn token_text(&self, id: u32) -> String {
        match id {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            BYTES => "<bytes>".into(),
            id if id < WORD_BASE => {
                let b = (id - BYTE_BASE) as u8;
                if b.is_ascii_graphic() {
                    (b as char).to_string()
                } else {
                    format!("<0x{b:02x}>")
                }
            }
            id => self
                .words
                .get((id - WORD_BASE) as usize)
                .cloned()
                .unwrap_or_else(|| format!("<unk {id}>")),
        }
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut words = Vec::new();
        let mut bytes: Option<Vec<u8>> = None;
        let flush = |bytes: &mut Option<Vec<u8>>, words: &mut Vec<String>| {
            if let Some(b) = bytes.take() {
                words.push(String::from_utf8_lossy(&b).into_owned());
            }
        };
        for &id in ids {
            match id {
                PAD | BOS | EOS => flush(&mut bytes, &mut words),
                BYTES => {
                    flush(&mut bytes, &mut words);
                    bytes = Some(Vec::new());
                }
                id if id < WORD_BASE => {
                    bytes.get_or_insert_with(Vec::new).push((id - BYTE_BASE) as u8);
                }
                id => {
                    flush(&mut bytes, &mut words);
                    if let Some(w) = self.words.get((id - WORD_BASE) as usize) {
                        words.push(w.clone());
                    }
                }
            }
        }
        flush(&mut bytes, &mut words);
        join_words(&words)
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

pub fn tokenize(text: &str) -> Vec<u32> {
    Tokenizer::shared().tokenize(text)
}

pub fn detokenize(ids: &[u32]) -> String {
    Tokenizer::shared().detokenize(ids)
}
