//! Text tokenizers for the backbone: GPT-2 byte-level BPE (read from
//! `vocab.json` + `merges.txt`) and a byte tokenizer for stub backbones.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";
const END_OF_TEXT: &str = "<|endoftext|>";

#[derive(Debug, Clone)]
pub enum Tokenizer {
    /// One token per UTF-8 byte; id 256 is end-of-text.
    Bytes,
    Bpe(Box<BpeTokenizer>),
}

impl Tokenizer {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self {
            Tokenizer::Bytes => text.bytes().map(u32::from).collect(),
            Tokenizer::Bpe(bpe) => bpe.encode(text),
        }
    }

    pub fn end_of_text(&self) -> u32 {
        match self {
            Tokenizer::Bytes => 256,
            Tokenizer::Bpe(bpe) => bpe.eot,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bytes => 257,
            Tokenizer::Bpe(bpe) => bpe.encoder.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: Vec<char>,
    pattern: fancy_regex::Regex,
    eot: u32,
}

/// GPT-2's reversible byte → printable-char table.
fn bytes_to_unicode() -> Vec<char> {
    let mut bs: Vec<u32> = ('!' as u32..='~' as u32)
        .chain('¡' as u32..='¬' as u32)
        .chain('®' as u32..='ÿ' as u32)
        .collect();
    let mut cs = bs.clone();
    let mut n = 0;
    for b in 0..256u32 {
        if !bs.contains(&b) {
            bs.push(b);
            cs.push(256 + n);
            n += 1;
        }
    }
    let mut table = vec!['\0'; 256];
    for (b, c) in bs.into_iter().zip(cs) {
        table[b as usize] = char::from_u32(c).unwrap();
    }
    table
}

impl BpeTokenizer {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.json");
        let merges_path = dir.join("merges.txt");
        let vocab = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let merges = std::fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        Self::from_strings(&vocab, &merges)
    }

    pub fn from_strings(vocab_json: &str, merges: &str) -> Result<Self> {
        let encoder: HashMap<String, u32> = serde_json::from_str(vocab_json)?;
        let ranks = merges
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .enumerate()
            .map(|(rank, line)| {
                let mut it = line.split(' ');
                match (it.next(), it.next()) {
                    (Some(a), Some(b)) => Ok(((a.to_string(), b.to_string()), rank)),
                    _ => Err(Error::Load {
                        what: "merges.txt".into(),
                        message: format!("bad merge line {line:?}"),
                    }),
                }
            })
            .collect::<Result<HashMap<_, _>>>()?;
        let eot = *encoder.get(END_OF_TEXT).ok_or_else(|| Error::Load {
            what: "vocab.json".into(),
            message: format!("missing {END_OF_TEXT}"),
        })?;
        let pattern = fancy_regex::Regex::new(GPT2_PATTERN).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            encoder,
            ranks,
            byte_encoder: bytes_to_unicode(),
            pattern,
            eot,
        })
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let mut word: Vec<String> = token.chars().map(String::from).collect();
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|r| (*r, p)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, p)| (p[0].clone(), p[1].clone()));
            let Some((a, b)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(text).flatten() {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for piece in self.bpe(&mapped) {
                match self.encoder.get(&piece) {
                    Some(id) => ids.push(*id),
                    None => log::warn!("token {piece:?} not in vocabulary; dropped"),
                }
            }
        }
        ids
    }
}
