//! Corpus ingestion: character vocabulary, line encoding and batching.
//!
//! Input is UTF-8 plain text, one sentence per line. Text is lowercased and
//! characters below the frequency threshold map to UNK; lines at or above the
//! length bound are skipped, not truncated.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::seeds;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Glyph used when decoding an UNK id back to text.
pub const UNK_GLYPH: char = '\u{FFFD}';

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus: no usable lines")]
    EmptyCorpus,
    #[error("config error: {0}")]
    Config(String),
    #[error("vocab file format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Character vocabulary with dense ids. Ids 0..4 are the specials; corpus
/// characters follow, ordered by descending frequency then codepoint.
#[derive(Debug, Clone)]
pub struct CharVocab {
    by_char: HashMap<char, u32>,
    chars: Vec<char>,
    /// Build-time frequency of each retained character, parallel to `chars`.
    freqs: Vec<u64>,
}

impl CharVocab {
    /// Count characters over lowercased lines and retain those occurring
    /// strictly more than `min_count` times.
    pub fn build<I, T>(lines: I, min_count: u64) -> Result<CharVocab, CorpusError>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let mut counts: HashMap<char, u64> = HashMap::new();
        let mut saw_any = false;
        for line in lines {
            for ch in line.as_ref().to_lowercase().chars() {
                saw_any = true;
                *counts.entry(ch).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut kept: Vec<(char, u64)> = counts
            .into_iter()
            .filter(|&(_, n)| n > min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut by_char = HashMap::new();
        let mut chars = Vec::new();
        let mut freqs = Vec::new();
        for (i, (ch, n)) in kept.into_iter().enumerate() {
            by_char.insert(ch, SPECIALS.len() as u32 + i as u32);
            chars.push(ch);
            freqs.push(n);
        }
        Ok(CharVocab { by_char, chars, freqs })
    }

    pub fn build_from_reader<R: Read>(reader: R, min_count: u64) -> Result<CharVocab, CorpusError> {
        let lines: Vec<String> = BufReader::new(reader).lines().collect::<Result<_, _>>()?;
        CharVocab::build(lines.iter(), min_count)
    }

    pub fn build_from_file<P: AsRef<Path>>(path: P, min_count: u64) -> Result<CharVocab, CorpusError> {
        CharVocab::build_from_reader(File::open(path)?, min_count)
    }

    /// Total id count, specials included.
    pub fn len(&self) -> usize {
        SPECIALS.len() + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, ch: char) -> u32 {
        self.by_char.get(&ch).copied().unwrap_or(UNK_ID)
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        let i = id as usize;
        if i < SPECIALS.len() {
            None
        } else {
            self.chars.get(i - SPECIALS.len()).copied()
        }
    }

    pub fn frequency_of(&self, ch: char) -> Option<u64> {
        self.by_char
            .get(&ch)
            .map(|&id| self.freqs[id as usize - SPECIALS.len()])
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                PAD_ID | BOS_ID | EOS_ID => None,
                UNK_ID => Some(UNK_GLYPH),
                other => self.char_of(other),
            })
            .collect()
    }

    /// One `codepoint<TAB>id` per line, specials (by name) first.
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        for (i, name) in SPECIALS.iter().enumerate() {
            writeln!(w, "{}\t{}", name, i)?;
        }
        for (i, ch) in self.chars.iter().enumerate() {
            writeln!(w, "{}\t{}", *ch as u32, SPECIALS.len() + i)?;
        }
        Ok(())
    }

    pub fn save_to_file<P: AsRef<Path>>(&self, path: P) -> Result<(), CorpusError> {
        self.save(File::create(path)?)
    }

    pub fn load<R: Read>(r: R) -> Result<CharVocab, CorpusError> {
        let mut by_char = HashMap::new();
        let mut chars = Vec::new();
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let key = parts.next().unwrap_or("");
            let id: u32 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or(CorpusError::Format { line: lineno + 1, msg: "missing id".into() })?;
            if let Some(pos) = SPECIALS.iter().position(|s| *s == key) {
                if pos as u32 != id {
                    return Err(CorpusError::Format {
                        line: lineno + 1,
                        msg: format!("special {} must have id {}", key, pos),
                    });
                }
                continue;
            }
            let cp: u32 = key.parse().map_err(|_| CorpusError::Format {
                line: lineno + 1,
                msg: format!("bad codepoint {:?}", key),
            })?;
            let ch = char::from_u32(cp).ok_or(CorpusError::Format {
                line: lineno + 1,
                msg: format!("invalid codepoint {}", cp),
            })?;
            let expect = SPECIALS.len() as u32 + chars.len() as u32;
            if id != expect {
                return Err(CorpusError::Format {
                    line: lineno + 1,
                    msg: format!("non-dense id {} (expected {})", id, expect),
                });
            }
            by_char.insert(ch, id);
            chars.push(ch);
        }
        let freqs = vec![0; chars.len()];
        Ok(CharVocab { by_char, chars, freqs })
    }

    pub fn load_from_file<P: AsRef<Path>>(path: P) -> Result<CharVocab, CorpusError> {
        CharVocab::load(File::open(path)?)
    }
}

/// One encoded sentence. `ids` hold raw characters only (no BOS/EOS); every
/// position is valid, so the mask is all-true.
#[derive(Debug, Clone, PartialEq)]
pub struct CharSequence {
    pub ids: Vec<u32>,
    pub raw: String,
    pub mask: Vec<bool>,
}

impl CharSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Why a line was not encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Skip {
    Empty,
    TooLong { chars: usize },
}

/// Encode one line, or report why it is skipped. Lines with `max_len` or
/// more characters (after lowercasing) are skipped.
pub fn encode_line(text: &str, vocab: &CharVocab, max_len: usize) -> Result<CharSequence, Skip> {
    let lower = text.to_lowercase();
    let n = lower.chars().count();
    if n == 0 {
        return Err(Skip::Empty);
    }
    if n >= max_len {
        return Err(Skip::TooLong { chars: n });
    }
    let ids: Vec<u32> = lower.chars().map(|ch| vocab.id_of(ch)).collect();
    Ok(CharSequence { ids, raw: lower, mask: vec![true; n] })
}

/// Corpus loaded through the filter, with skip accounting.
#[derive(Debug, Default)]
pub struct LoadedCorpus {
    pub sequences: Vec<CharSequence>,
    pub skipped_empty: usize,
    pub skipped_long: usize,
    pub line_count: usize,
}

pub fn load_corpus<I, T>(lines: I, vocab: &CharVocab, max_len: usize) -> LoadedCorpus
where
    I: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    let mut out = LoadedCorpus::default();
    for line in lines {
        out.line_count += 1;
        match encode_line(line.as_ref(), vocab, max_len) {
            Ok(seq) => out.sequences.push(seq),
            Err(Skip::Empty) => out.skipped_empty += 1,
            Err(Skip::TooLong { .. }) => out.skipped_long += 1,
        }
    }
    out
}

pub fn load_corpus_file<P: AsRef<Path>>(
    path: P,
    vocab: &CharVocab,
    max_len: usize,
) -> Result<LoadedCorpus, CorpusError> {
    let lines: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .collect::<Result<_, _>>()?;
    Ok(load_corpus(lines.iter(), vocab, max_len))
}

/// Padded batch. `inputs` are raw character ids; `targets` are the inputs
/// shifted conceptually by one step with an EOS terminal, both padded to
/// (longest sentence + 1) columns. Masks are true exactly on non-PAD cells.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub width: usize,
    pub inputs: Vec<u32>,
    pub input_mask: Vec<bool>,
    pub targets: Vec<u32>,
    pub target_mask: Vec<bool>,
    pub lens: Vec<usize>,
    /// Indices into the source sequence slice, for diagnostics.
    pub source_idx: Vec<usize>,
}

impl Batch {
    fn build(seqs: &[&CharSequence], source_idx: Vec<usize>) -> Batch {
        let maxn = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let width = maxn + 1;
        let size = seqs.len();
        let mut inputs = vec![PAD_ID; size * width];
        let mut input_mask = vec![false; size * width];
        let mut targets = vec![PAD_ID; size * width];
        let mut target_mask = vec![false; size * width];
        let mut lens = Vec::with_capacity(size);
        for (r, seq) in seqs.iter().enumerate() {
            let n = seq.len();
            lens.push(n);
            for (c, &id) in seq.ids.iter().enumerate() {
                inputs[r * width + c] = id;
                input_mask[r * width + c] = true;
                targets[r * width + c] = id;
                target_mask[r * width + c] = true;
            }
            targets[r * width + n] = EOS_ID;
            target_mask[r * width + n] = true;
        }
        Batch { size, width, inputs, input_mask, targets, target_mask, lens, source_idx }
    }

    pub fn input_row(&self, r: usize) -> &[u32] {
        &self.inputs[r * self.width..(r + 1) * self.width]
    }

    pub fn target_row(&self, r: usize) -> &[u32] {
        &self.targets[r * self.width..(r + 1) * self.width]
    }

    /// Raw character ids of row `r` without padding.
    pub fn sentence(&self, r: usize) -> &[u32] {
        &self.input_row(r)[..self.lens[r]]
    }
}

/// Deterministically shuffle and chunk sequences into padded batches.
pub fn make_batches(
    sequences: &[CharSequence],
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>, CorpusError> {
    if batch_size == 0 {
        return Err(CorpusError::Config("batch_size must be positive".into()));
    }
    if sequences.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut rng = seeds::stream(shuffle_seed, seeds::TAG_SHUFFLE, 0);
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let seqs: Vec<&CharSequence> = chunk.iter().map(|&i| &sequences[i]).collect();
        batches.push(Batch::build(&seqs, chunk.to_vec()));
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seqs(texts: &[&str], vocab: &CharVocab) -> Vec<CharSequence> {
        texts
            .iter()
            .map(|t| encode_line(t, vocab, 128).unwrap())
            .collect()
    }

    // A character occurring exactly min_count times is NOT retained; the
    // threshold is strict.
    #[test]
    fn threshold_is_strict() {
        let line = "q".repeat(25) + &"a".repeat(26);
        let vocab = CharVocab::build([line.as_str()], 25).unwrap();
        assert_eq!(vocab.id_of('q'), UNK_ID);
        assert!(vocab.id_of('a') >= 4);
    }

    #[test]
    fn min_count_zero_keeps_everything() {
        let vocab = CharVocab::build(["aaa"], 0).unwrap();
        assert_eq!(vocab.len(), 4 + 1);
        assert_eq!(vocab.id_of('a'), 4);
    }

    #[test]
    fn text_is_lowercased() {
        let vocab = CharVocab::build(["ABC abc"], 0).unwrap();
        // {a, b, c, space}: ids by descending frequency then codepoint
        assert_eq!(vocab.len(), 4 + 4);
        assert_eq!(vocab.id_of('a'), 4);
        assert_eq!(vocab.id_of('b'), 5);
        assert_eq!(vocab.id_of('c'), 6);
        assert_eq!(vocab.id_of(' '), 7);
        assert_eq!(vocab.id_of('A'), UNK_ID);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            CharVocab::build(Vec::<&str>::new(), 0),
            Err(CorpusError::EmptyCorpus)
        ));
        assert!(matches!(CharVocab::build([""], 0), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn length_bound_is_strict() {
        let vocab = CharVocab::build(["abcdefghij"], 0).unwrap();
        let l127 = "a".repeat(127);
        let l128 = "a".repeat(128);
        assert!(encode_line(&l127, &vocab, 128).is_ok());
        assert_eq!(
            encode_line(&l128, &vocab, 128),
            Err(Skip::TooLong { chars: 128 })
        );
        assert_eq!(encode_line("", &vocab, 128), Err(Skip::Empty));
    }

    #[test]
    fn skip_accounting_totals() {
        let vocab = CharVocab::build(["abc"], 0).unwrap();
        let long = "a".repeat(10);
        let lines = vec!["abc", "", &long, "ab"];
        let loaded = load_corpus(lines.iter(), &vocab, 10);
        assert_eq!(loaded.line_count, 4);
        assert_eq!(loaded.sequences.len(), 2);
        assert_eq!(loaded.skipped_empty, 1);
        assert_eq!(loaded.skipped_long, 1);
        assert_eq!(
            loaded.sequences.len() + loaded.skipped_empty + loaded.skipped_long,
            loaded.line_count
        );
    }

    #[test]
    fn unknown_chars_decode_to_glyph() {
        let vocab = CharVocab::build(["aaa bbb"], 2).unwrap();
        let seq = encode_line("axb", &vocab, 128).unwrap();
        assert_eq!(vocab.decode(&seq.ids), format!("a{}b", UNK_GLYPH));
    }

    #[test]
    fn batch_width_is_longest_plus_eos() {
        let vocab = CharVocab::build(["abcdefg"], 0).unwrap();
        let ss = seqs(&["abc", "abcdefg"], &vocab);
        let batches = make_batches(&ss, 2, 1).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.width, 8);
        for r in 0..2 {
            let n = b.lens[r];
            // mask true exactly on non-PAD input cells
            for c in 0..b.width {
                assert_eq!(b.input_mask[r * b.width + c], c < n);
                assert_eq!(b.target_mask[r * b.width + c], c < n + 1);
                assert_eq!(b.input_row(r)[c] != PAD_ID, c < n);
                assert_eq!(b.target_row(r)[c] != PAD_ID, c < n + 1);
            }
            assert_eq!(b.target_row(r)[n], EOS_ID);
        }
    }

    #[test]
    fn batch_sizes_chunk() {
        let vocab = CharVocab::build(["abcde"], 0).unwrap();
        let ss = seqs(&["a", "ab", "abc", "abcd", "abcde"], &vocab);
        let batches = make_batches(&ss, 2, 9).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.size).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn same_seed_same_order() {
        let vocab = CharVocab::build(["abcde"], 0).unwrap();
        let ss = seqs(&["a", "ab", "abc", "abcd", "abcde"], &vocab);
        let a = make_batches(&ss, 2, 42).unwrap();
        let b = make_batches(&ss, 2, 42).unwrap();
        let order = |bs: &[Batch]| bs.iter().flat_map(|b| b.source_idx.clone()).collect::<Vec<_>>();
        assert_eq!(order(&a), order(&b));
    }

    #[test]
    fn zero_batch_size_rejected() {
        let vocab = CharVocab::build(["ab"], 0).unwrap();
        let ss = seqs(&["ab"], &vocab);
        assert!(matches!(make_batches(&ss, 0, 1), Err(CorpusError::Config(_))));
    }

    #[test]
    fn vocab_save_load_round_trip() {
        let vocab = CharVocab::build(["hello world", "hello"], 0).unwrap();
        let mut buf = Vec::new();
        vocab.save(&mut buf).unwrap();
        let loaded = CharVocab::load(buf.as_slice()).unwrap();
        assert_eq!(loaded.len(), vocab.len());
        for ch in "helo wrd".chars() {
            assert_eq!(loaded.id_of(ch), vocab.id_of(ch), "char {ch:?}");
        }
    }

    proptest! {
        // decode(encode(s)) reproduces the lowercased line with out-of-vocab
        // characters replaced by the UNK glyph.
        #[test]
        fn encode_decode_round_trip(s in "[a-z0-9 ?!\\p{Greek}]{1,60}") {
            let vocab = CharVocab::build(["abcdefghijklmnopqrstuvwxyz 0123"], 0).unwrap();
            if let Ok(seq) = encode_line(&s, &vocab, 128) {
                let decoded = vocab.decode(&seq.ids);
                let expect: String = s
                    .to_lowercase()
                    .chars()
                    .map(|c| if vocab.id_of(c) == UNK_ID { UNK_GLYPH } else { c })
                    .collect();
                prop_assert_eq!(decoded, expect);
            }
        }

        // masks match non-PAD cells for arbitrary batches
        #[test]
        fn batch_masks_match_non_pad(lens in proptest::collection::vec(1usize..12, 1..8), seed in 0u64..500) {
            let vocab = CharVocab::build(["abcdefghijkl"], 0).unwrap();
            let ss: Vec<CharSequence> = lens
                .iter()
                .map(|&n| encode_line(&"a".repeat(n), &vocab, 64).unwrap())
                .collect();
            let batches = make_batches(&ss, 3, seed).unwrap();
            for b in batches {
                for r in 0..b.size {
                    for c in 0..b.width {
                        prop_assert_eq!(b.input_mask[r * b.width + c], b.inputs[r * b.width + c] != PAD_ID);
                        prop_assert_eq!(b.target_mask[r * b.width + c], b.targets[r * b.width + c] != PAD_ID);
                    }
                }
            }
        }
    }
}
