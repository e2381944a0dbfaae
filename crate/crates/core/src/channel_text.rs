//! Per-channel text descriptions: an offline-authored semantic paragraph plus a
//! generated statistics sentence, tokenized and looked up in the backbone's
//! token-embedding table.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::dataset::RawSeries;
use crate::error::{Error, Result};
use crate::nn::{tensor_from, DEVICE};
use crate::tokenizer::Tokenizer;

pub const DEFAULT_TEXT_LEN: usize = 64;

/// Per-channel statistics of the training split (population variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub max: Vec<f64>,
    pub min: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn compute_channel_stats(train: &RawSeries) -> ChannelStats {
    let n = train.rows() as f64;
    let mut stats = ChannelStats {
        max: vec![],
        min: vec![],
        mean: vec![],
        variance: vec![],
    };
    for c in 0..train.channels() {
        let col = train.column(c);
        let mean = col.iter().sum::<f64>() / n;
        stats.max.push(col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        stats.min.push(col.iter().copied().fold(f64::INFINITY, f64::min));
        stats.variance.push(col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n);
        stats.mean.push(mean);
    }
    stats
}

/// Prompt to hand to an LLM for the semantic descriptions.
pub fn build_prompt(dataset_name: &str, domain: &str, channel_names: &[String]) -> Result<String> {
    if channel_names.is_empty() {
        return Err(Error::Description("prompt needs at least one channel name".into()));
    }
    Ok(format!(
        "This is {dataset_name} from {domain}, including {}, please describe these channels and their correlations.",
        channel_names.join(", ")
    ))
}

/// `%.4g`-style formatting: four significant digits, trailing zeros trimmed.
pub fn format_sig4(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { format!("{v}") };
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..4).contains(&exp) {
        let decimals = (3 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        // Rounding can carry into a new digit (9999.5 -> 10000); fall through to scientific.
        if s.trim_start_matches('-').split('.').next().unwrap().len() > 4 {
            return format_sig4_sci(v);
        }
        trim_zeros(s)
    } else {
        format_sig4_sci(v)
    }
}

fn format_sig4_sci(v: f64) -> String {
    let s = format!("{v:.3e}");
    let (mantissa, exp) = s.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn stats_sentence(stats: &ChannelStats, channel: usize) -> String {
    format!(
        "Statistics: max={}, min={}, mean={}, variance={}.",
        format_sig4(stats.max[channel]),
        format_sig4(stats.min[channel]),
        format_sig4(stats.mean[channel]),
        format_sig4(stats.variance[channel])
    )
}

/// Parses `<channel_name>: <description>` records, one per line. Blank lines are skipped.
pub fn parse_semantic(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split_once(": ")
                .map(|(name, desc)| (name.trim().to_string(), desc.trim().to_string()))
                .ok_or_else(|| Error::Description(format!("line {}: expected `<channel>: <description>`", i + 1)))
        })
        .collect()
}

pub fn read_semantic_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_semantic(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDescriptions {
    pub channel_names: Vec<String>,
    pub semantic: Vec<String>,
    pub stats_text: Vec<String>,
    pub combined: Vec<String>,
    /// Filled by [`ChannelDescriptions::tokenize`]; each exactly `text_len` long.
    pub token_ids: Vec<Vec<u32>>,
    /// Count of real (non-pad) tokens per channel.
    pub token_lengths: Vec<usize>,
    pub text_len: usize,
}

const SEPARATOR: &str = " ";

fn join(semantic: &str, stats: &str) -> String {
    if semantic.is_empty() {
        stats.to_string()
    } else {
        format!("{semantic}{SEPARATOR}{stats}")
    }
}

/// Combines semantic records with statistics sentences. Channels without a record
/// get an empty semantic part (with a warning); records naming unknown channels
/// are rejected.
pub fn compose_descriptions(
    records: &[(String, String)],
    channel_names: &[String],
    stats: &ChannelStats,
) -> Result<ChannelDescriptions> {
    let known: HashSet<&str> = channel_names.iter().map(String::as_str).collect();
    let mut by_name: HashMap<&str, &str> = HashMap::new();
    for (name, desc) in records {
        if !known.contains(name.as_str()) {
            return Err(Error::Description(format!("channel {name:?} is not in the dataset")));
        }
        by_name.insert(name, desc);
    }
    let semantic: Vec<String> = channel_names
        .iter()
        .map(|n| match by_name.get(n.as_str()) {
            Some(d) => d.to_string(),
            None => {
                log::warn!("no semantic description for channel {n:?}; using statistics only");
                String::new()
            }
        })
        .collect();
    let stats_text: Vec<String> = (0..channel_names.len()).map(|c| stats_sentence(stats, c)).collect();
    let combined = semantic.iter().zip(&stats_text).map(|(s, t)| join(s, t)).collect();
    Ok(ChannelDescriptions {
        channel_names: channel_names.to_vec(),
        semantic,
        stats_text,
        combined,
        token_ids: vec![],
        token_lengths: vec![],
        text_len: 0,
    })
}

/// Text-quality interventions used by the robustness ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TextQuality {
    #[default]
    Clean,
    /// Semantic part replaced by seeded random words.
    RandomText,
    /// A fraction of characters of the combined text substituted.
    AddNoise { rate: f64 },
}

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

impl ChannelDescriptions {
    pub fn apply_quality(&mut self, quality: TextQuality, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match quality {
            TextQuality::Clean => {}
            TextQuality::RandomText => {
                for sem in self.semantic.iter_mut() {
                    let target = sem.chars().count().max(64);
                    let mut s = String::new();
                    while s.len() < target {
                        if !s.is_empty() {
                            s.push(' ');
                        }
                        let word_len = rng.random_range(2..9);
                        s.extend((0..word_len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char));
                    }
                    *sem = s;
                }
                self.combined = self.semantic.iter().zip(&self.stats_text).map(|(s, t)| join(s, t)).collect();
            }
            TextQuality::AddNoise { rate } => {
                for text in &mut self.combined {
                    *text = text
                        .chars()
                        .map(|ch| {
                            if rng.random::<f64>() < rate {
                                ALPHABET[rng.random_range(0..ALPHABET.len())] as char
                            } else {
                                ch
                            }
                        })
                        .collect();
                }
            }
        }
        if !self.token_ids.is_empty() {
            log::warn!("text quality applied after tokenization; call tokenize again");
        }
    }

    /// Tokenizes to exactly `text_len` ids, padding with end-of-text. When the text
    /// is too long the semantic part is truncated first so the statistics survive.
    pub fn tokenize(&mut self, tokenizer: &Tokenizer, text_len: usize) -> Result<()> {
        if text_len == 0 {
            return Err(Error::Config("text length must be >= 1".into()));
        }
        let pad = tokenizer.end_of_text();
        self.token_ids.clear();
        self.token_lengths.clear();
        for (c, text) in self.combined.iter().enumerate() {
            let stats = &self.stats_text[c];
            let mut ids = tokenizer.encode(text);
            if ids.len() > text_len {
                let stats_ids = tokenizer.encode(stats);
                // Noise may have altered the stats sentence; fall back to a plain cut.
                let suffix_ok = text.ends_with(stats.as_str()) && stats_ids.len() < ids.len();
                if suffix_ok && stats_ids.len() <= text_len {
                    let head = text[..text.len() - stats.len()].to_string();
                    let mut head_ids = tokenizer.encode(&head);
                    head_ids.truncate(text_len - stats_ids.len());
                    head_ids.extend(stats_ids);
                    ids = head_ids;
                    log::warn!("channel {c}: semantic description truncated to fit {text_len} tokens");
                } else {
                    ids.truncate(text_len);
                    log::warn!("channel {c}: description truncated to {text_len} tokens, statistics cut");
                }
            }
            self.token_lengths.push(ids.len());
            ids.resize(text_len, pad);
            self.token_ids.push(ids);
        }
        self.text_len = text_len;
        Ok(())
    }
}

/// `E_text` (`[C, L, D]`) looked up in the backbone table; pad positions are zero rows.
pub fn encode_text(desc: &ChannelDescriptions, backbone: &Backbone) -> Result<Tensor> {
    if desc.token_ids.len() != desc.combined.len() || desc.text_len == 0 {
        return Err(Error::Description("descriptions must be tokenized before encoding".into()));
    }
    let table = backbone.token_embedding().t();
    let vocab = table.dims()[0];
    let c = desc.token_ids.len();
    let l = desc.text_len;
    let flat: Vec<u32> = desc.token_ids.iter().flatten().copied().collect();
    if let Some(bad) = flat.iter().find(|&&id| id as usize >= vocab) {
        return Err(Error::Shape(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let ids = Tensor::from_vec(flat, c * l, &DEVICE)?;
    let rows = table.index_select(&ids, 0)?.reshape((c, l, table.dims()[1]))?;
    let mask: Vec<f64> = desc
        .token_lengths
        .iter()
        .flat_map(|&n| (0..l).map(move |i| if i < n { 1.0 } else { 0.0 }))
        .collect();
    let mask = tensor_from(mask, &[c, l, 1], table.dtype())?;
    Ok(rows.broadcast_mul(&mask)?.detach())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn simple_stats() -> ChannelStats {
        ChannelStats {
            max: vec![3.0, 4.0],
            min: vec![1.0, 4.0],
            mean: vec![2.0, 4.0],
            variance: vec![2.0 / 3.0, 0.0],
        }
    }

    #[test]
    fn stats_use_population_variance() {
        let s = RawSeries::new(
            vec![1.0, 4.0, 2.0, 4.0, 3.0, 4.0],
            names(2),
            vec!["a".into(), "b".into(), "c".into()],
            "",
        )
        .unwrap();
        let st = compute_channel_stats(&s);
        assert_eq!((st.max[0], st.min[0], st.mean[0]), (3.0, 1.0, 2.0));
        assert!((st.variance[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(st.variance[1], 0.0);
    }

    #[test]
    fn prompt_template() {
        let p = build_prompt("Weather", "environment", &["T (degC)".into(), "rh (%)".into()]).unwrap();
        assert_eq!(
            p,
            "This is Weather from environment, including T (degC), rh (%), please describe these channels and their correlations."
        );
        let one = build_prompt("X", "Y", &["a".into()]).unwrap();
        assert!(one.contains("including a, please"));
        assert!(build_prompt("X", "Y", &[]).is_err());
    }

    #[test]
    fn sig4_formatting() {
        assert_eq!(format_sig4(2.0 / 3.0), "0.6667");
        assert_eq!(format_sig4(12345.0), "1.234e+04");
        assert_eq!(format_sig4(-1.23456), "-1.235");
        assert_eq!(format_sig4(0.0), "0");
        assert_eq!(format_sig4(9999.7), "1e+04");
        assert_eq!(format_sig4(0.00012345), "0.0001234");
        assert_eq!(format_sig4(100.0), "100");
    }

    #[test]
    fn compose_and_validate() {
        let rec = parse_semantic("c0: Temperature is a key parameter.\n\n").unwrap();
        let d = compose_descriptions(&rec, &names(2), &simple_stats()).unwrap();
        assert_eq!(
            d.combined[0],
            "Temperature is a key parameter. Statistics: max=3, min=1, mean=2, variance=0.6667."
        );
        assert_eq!(d.combined[1], "Statistics: max=4, min=4, mean=4, variance=0.");
        assert_eq!(d.semantic[1], "");

        let bad = parse_semantic("nope: x").unwrap();
        assert!(compose_descriptions(&bad, &names(2), &simple_stats()).is_err());
        assert!(parse_semantic("no delimiter").is_err());
    }

    #[test]
    fn tokenize_pads_and_protects_stats() {
        let rec = parse_semantic(&format!("c0: {}", "word ".repeat(40))).unwrap();
        let mut d = compose_descriptions(&rec, &names(2), &simple_stats()).unwrap();
        d.tokenize(&Tokenizer::Bytes, 64).unwrap();
        assert!(d.token_ids.iter().all(|t| t.len() == 64));
        let stats_bytes: Vec<u32> = d.stats_text[0].bytes().map(u32::from).collect();
        assert!(d.token_ids[0].ends_with(&stats_bytes));
        assert_eq!(d.token_lengths[0], 64);
        // Channel 1 is short: padded with end-of-text.
        assert_eq!(*d.token_ids[1].last().unwrap(), 256);
        assert_eq!(d.token_lengths[1], d.stats_text[1].len());
    }

    #[test]
    fn stats_only_and_full_text_tokenize_differently() {
        let rec = parse_semantic("c0: hot").unwrap();
        let mut full = compose_descriptions(&rec, &names(2), &simple_stats()).unwrap();
        let mut bare = compose_descriptions(&[], &names(2), &simple_stats()).unwrap();
        full.tokenize(&Tokenizer::Bytes, 64).unwrap();
        bare.tokenize(&Tokenizer::Bytes, 64).unwrap();
        assert_ne!(full.token_ids[0], bare.token_ids[0]);
    }

    #[test]
    fn quality_interventions_are_seeded() {
        let rec = parse_semantic("c0: a fairly long semantic description of a channel").unwrap();
        let base = compose_descriptions(&rec, &names(2), &simple_stats()).unwrap();
        for q in [TextQuality::RandomText, TextQuality::AddNoise { rate: 0.1 }] {
            let mut a = base.clone();
            let mut b = base.clone();
            a.apply_quality(q, 3);
            b.apply_quality(q, 3);
            assert_eq!(a, b);
            assert_ne!(a.combined, base.combined);
        }
        let mut r = base.clone();
        r.apply_quality(TextQuality::RandomText, 3);
        assert!(r.combined[0].ends_with(&base.stats_text[0]));
    }
}
