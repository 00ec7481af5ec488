//! Byte-pair-encoding trainer and tokenizer, plus ingestion of external
//! segmentations. Both feed the probing tasks with per-sentence target token
//! sets.
//!
//! Merges are word-internal only: words are whitespace-delimited and each
//! gets an end-of-word marker symbol before merging. Applying the merge list
//! in creation order reproduces the training segmentation exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const END_OF_WORD: &str = "</w>";
const MERGE_FILE_HEADER: &str = "#version 1";

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("config error: {0}")]
    Config(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("segment file line {line}: {msg}")]
    SegmentFormat { line: usize, msg: String },
    #[error("segment file has {got} lines but the corpus has {expected}; first offending line {line}")]
    SegmentAlignment { got: usize, expected: usize, line: usize },
    #[error("merge file line {line}: {msg}")]
    MergeFormat { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered merge list. Applying merges in order is deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTable {
    pub merges: Vec<(String, String)>,
    /// Symbol count at the end of training (base symbols + merges).
    pub symbol_count: usize,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    syms.push(END_OF_WORD.to_string());
    syms
}

/// Merge all non-overlapping occurrences of `pair` left to right.
fn apply_merge(syms: &mut Vec<String>, pair: &(String, String)) {
    let mut out: Vec<String> = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    *syms = out;
}

fn count_pairs(words: &[(Vec<String>, u64)]) -> HashMap<(String, String), u64> {
    let mut counts: HashMap<(String, String), u64> = HashMap::new();
    for (syms, freq) in words {
        for w in syms.windows(2) {
            *counts
                .entry((w[0].clone(), w[1].clone()))
                .or_insert(0) += freq;
        }
    }
    counts
}

fn best_pair(counts: &HashMap<(String, String), u64>) -> Option<(String, String)> {
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(p, _)| p.clone())
}

/// Train a merge table until `vocab_size` symbols exist (base characters
/// inclusive) or no adjacent pair remains.
pub fn train_bpe<I, T>(lines: I, vocab_size: usize) -> Result<MergeTable, BpeError>
where
    I: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    let mut word_freq: HashMap<String, u64> = HashMap::new();
    for line in lines {
        for word in line.as_ref().split_whitespace() {
            *word_freq.entry(word.to_string()).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    // deterministic word order
    let mut word_list: Vec<(String, u64)> = word_freq.into_iter().collect();
    word_list.sort_by(|a, b| a.0.cmp(&b.0));
    let mut words: Vec<(Vec<String>, u64)> = word_list
        .into_iter()
        .map(|(w, f)| (word_symbols(&w), f))
        .collect();

    let mut symbols: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    for (syms, _) in &words {
        for s in syms {
            symbols.insert(s.clone());
        }
    }
    if vocab_size < symbols.len() {
        return Err(BpeError::Config(format!(
            "vocab_size {} is below the base symbol count {}",
            vocab_size,
            symbols.len()
        )));
    }

    let mut merges = Vec::new();
    while symbols.len() < vocab_size {
        let counts = count_pairs(&words);
        let Some(pair) = best_pair(&counts) else { break };
        for (syms, _) in words.iter_mut() {
            apply_merge(syms, &pair);
        }
        symbols.insert(format!("{}{}", pair.0, pair.1));
        merges.push(pair);
    }
    Ok(MergeTable { merges, symbol_count: symbols.len() })
}

pub fn train_bpe_file<P: AsRef<Path>>(path: P, vocab_size: usize) -> Result<MergeTable, BpeError> {
    let lines: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .collect::<Result<_, _>>()?;
    train_bpe(lines.iter(), vocab_size)
}

impl MergeTable {
    /// Tokenize one sentence. Word boundaries come from whitespace; merges
    /// apply in training order within each word. The end-of-word marker stays
    /// attached to the final token of each word (strip it for reporting with
    /// [`strip_marker`]).
    pub fn tokenize(&self, sentence: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in sentence.split_whitespace() {
            let mut syms = word_symbols(word);
            for pair in &self.merges {
                if syms.len() < 2 {
                    break;
                }
                apply_merge(&mut syms, pair);
            }
            out.extend(syms);
        }
        out
    }

    /// Tokens with the end-of-word marker removed; bare markers (a word that
    /// merged entirely except the marker) are kept as the literal marker.
    pub fn tokenize_stripped(&self, sentence: &str) -> Vec<String> {
        self.tokenize(sentence).iter().map(|t| strip_marker(t)).collect()
    }

    /// One "left right" pair per line, after a version header.
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), BpeError> {
        writeln!(w, "{}", MERGE_FILE_HEADER)?;
        for (l, r) in &self.merges {
            writeln!(w, "{} {}", l, r)?;
        }
        Ok(())
    }

    pub fn save_to_file<P: AsRef<Path>>(&self, path: P) -> Result<(), BpeError> {
        self.save(File::create(path)?)
    }

    pub fn load<R: Read>(r: R) -> Result<MergeTable, BpeError> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or(BpeError::MergeFormat { line: 1, msg: "missing header".into() })?;
        if header != MERGE_FILE_HEADER {
            return Err(BpeError::MergeFormat {
                line: 1,
                msg: format!("expected {:?}, got {:?}", MERGE_FILE_HEADER, header),
            });
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (l, r) = line.split_once(' ').ok_or(BpeError::MergeFormat {
                line: i + 2,
                msg: "expected 'left right'".into(),
            })?;
            merges.push((l.to_string(), r.to_string()));
        }
        let n = merges.len();
        Ok(MergeTable { merges, symbol_count: n })
    }

    pub fn load_from_file<P: AsRef<Path>>(path: P) -> Result<MergeTable, BpeError> {
        MergeTable::load(File::open(path)?)
    }

    /// Restore the (whitespace-normalized) sentence from its tokens.
    pub fn detokenize(tokens: &[String]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut cur = String::new();
        for t in tokens {
            if let Some(stripped) = t.strip_suffix(END_OF_WORD) {
                cur.push_str(stripped);
                words.push(std::mem::take(&mut cur));
            } else {
                cur.push_str(t);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        words.join(" ")
    }
}

pub fn strip_marker(token: &str) -> String {
    match token.strip_suffix(END_OF_WORD) {
        Some("") => END_OF_WORD.to_string(),
        Some(rest) => rest.to_string(),
        None => token.to_string(),
    }
}

/// Per-sentence probing targets: unordered token multisets, aligned 1:1 with
/// the corpus sentences.
#[derive(Debug, Clone, Default)]
pub struct ProbeTargets {
    pub per_sentence: Vec<Vec<String>>,
}

impl ProbeTargets {
    pub fn from_bpe<I, T>(lines: I, merges: &MergeTable) -> ProbeTargets
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        ProbeTargets {
            per_sentence: lines
                .into_iter()
                .map(|l| merges.tokenize_stripped(l.as_ref()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.per_sentence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sentence.is_empty()
    }
}

/// Parse external segmentations (e.g. a morphological analyzer's output).
///
/// Each corpus line has one record per word: `word|seg1 seg2 ...`, records
/// separated by spaces. A token containing '|' starts a new record; plain
/// tokens extend the current record's segment list.
pub fn load_external_segments<I, T>(
    lines: I,
    corpus_line_count: usize,
) -> Result<ProbeTargets, BpeError>
where
    I: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    let mut per_sentence = Vec::new();
    for (lineno, line) in lines.into_iter().enumerate() {
        let mut segments: Vec<String> = Vec::new();
        let mut in_record = false;
        for tok in line.as_ref().split_whitespace() {
            if let Some((word, first_seg)) = tok.split_once('|') {
                if word.is_empty() {
                    return Err(BpeError::SegmentFormat {
                        line: lineno + 1,
                        msg: format!("record {:?} has an empty word", tok),
                    });
                }
                in_record = true;
                if !first_seg.is_empty() {
                    segments.push(first_seg.to_string());
                }
            } else {
                if !in_record {
                    return Err(BpeError::SegmentFormat {
                        line: lineno + 1,
                        msg: format!("segment {:?} appears before any word record", tok),
                    });
                }
                segments.push(tok.to_string());
            }
        }
        per_sentence.push(segments);
    }
    if per_sentence.len() != corpus_line_count {
        let line = per_sentence.len().min(corpus_line_count) + 1;
        return Err(BpeError::SegmentAlignment {
            got: per_sentence.len(),
            expected: corpus_line_count,
            line,
        });
    }
    Ok(ProbeTargets { per_sentence })
}

pub fn load_external_segments_file<P: AsRef<Path>>(
    path: P,
    corpus_line_count: usize,
) -> Result<ProbeTargets, BpeError> {
    let lines: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .collect::<Result<_, _>>()?;
    load_external_segments(lines.iter(), corpus_line_count)
}

/// Mean token count per sentence, used to calibrate the gate penalty cap.
pub fn mean_tokens_per_sentence<I, T>(lines: I, merges: &MergeTable) -> f64
where
    I: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    let mut total = 0usize;
    let mut count = 0usize;
    for l in lines {
        total += merges.tokenize(l.as_ref()).len();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    }
}
