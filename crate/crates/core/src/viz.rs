//! Decoder-over-slot attention maps: per-sentence capture, dataset
//! averaging, and TSV/SVG export.
//!
//! Maps are captured teacher-forced (gold characters as decoder input) so
//! each row aligns with a reference output character.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::{CharSequence, CharVocab, EOS_ID, UNK_GLYPH, UNK_ID};
use crate::diff::Tensor;
use crate::model::{ModelError, SlotAutoencoder};

#[derive(Debug, Error)]
pub enum VizError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("attention map parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One attention map: rows are output positions (characters), columns are
/// slots, every row sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMap {
    pub row_labels: Vec<String>,
    pub k: usize,
    /// Row-major, len = row_labels.len() * k.
    pub values: Vec<f64>,
}

impl AttnMap {
    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.k + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.k..(r + 1) * self.k]
    }
}

pub const EOS_LABEL: &str = "<eos>";

fn label_for(id: u32, vocab: &CharVocab) -> String {
    if id == EOS_ID {
        EOS_LABEL.to_string()
    } else if id == UNK_ID {
        UNK_GLYPH.to_string()
    } else {
        vocab.char_of(id).map(|c| c.to_string()).unwrap_or_else(|| format!("#{id}"))
    }
}

/// Capture the decoder's cross-attention over slots for one sentence,
/// teacher-forced on the gold characters. Rows cover the N characters plus
/// the EOS step.
pub fn capture_map(
    model: &SlotAutoencoder,
    seq: &CharSequence,
    vocab: &CharVocab,
    noise_key: u64,
) -> Result<AttnMap, VizError> {
    let analysis = model.analyze(&seq.ids, noise_key)?;
    let t: &Tensor<f32> = &analysis.cross_attn;
    let mut row_labels: Vec<String> = seq.ids.iter().map(|&id| label_for(id, vocab)).collect();
    row_labels.push(EOS_LABEL.to_string());
    let k = t.cols();
    let values = t.data().iter().map(|&v| v as f64).collect();
    Ok(AttnMap { row_labels, k, values })
}

/// Position-aligned mean over all maps: row t averages only the maps that
/// reach position t, so every row of the result still sums to 1. Row labels
/// become position indices.
pub fn average_maps(maps: &[AttnMap]) -> Result<AttnMap, VizError> {
    if maps.is_empty() {
        return Err(VizError::EmptyDataset);
    }
    let k = maps[0].k;
    let max_rows = maps.iter().map(|m| m.rows()).max().unwrap_or(0);
    let mut values = vec![0.0f64; max_rows * k];
    let mut counts = vec![0usize; max_rows];
    for m in maps {
        for r in 0..m.rows() {
            counts[r] += 1;
            for c in 0..k {
                values[r * k + c] += m.at(r, c);
            }
        }
    }
    for r in 0..max_rows {
        for c in 0..k {
            values[r * k + c] /= counts[r] as f64;
        }
    }
    Ok(AttnMap {
        row_labels: (0..max_rows).map(|r| r.to_string()).collect(),
        k,
        values,
    })
}

/// Mean Shannon entropy (nats) of the attention rows; lower means sparser.
pub fn mean_row_entropy(map: &AttnMap) -> f64 {
    let mut total = 0.0;
    for r in 0..map.rows() {
        let mut h = 0.0;
        for &p in map.row(r) {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        total += h;
    }
    total / map.rows() as f64
}

/// Fraction of adjacent row pairs whose argmax slot agrees; higher means the
/// characters a slot generates are contiguous.
pub fn contiguity_score(map: &AttnMap) -> f64 {
    if map.rows() < 2 {
        return 1.0;
    }
    let argmax = |r: usize| {
        let row = map.row(r);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    };
    let mut same = 0usize;
    for r in 0..map.rows() - 1 {
        if argmax(r) == argmax(r + 1) {
            same += 1;
        }
    }
    same as f64 / (map.rows() - 1) as f64
}

fn escape_label(label: &str) -> String {
    let mut out = String::new();
    for ch in label.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            ' ' => out.push_str("\\s"),
            '\n' => out.push_str("\\n"),
            other => out.push(other),
        }
    }
    out
}

fn unescape_label(s: &str) -> String {
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('s') => out.push(' '),
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                Some(other) => out.push(other),
                None => {}
            }
        } else {
            out.push(ch);
        }
    }
    out
}

/// TSV export: header row of slot indices, first column the row label,
/// values with 9 significant digits.
pub fn write_tsv<W: Write>(map: &AttnMap, mut w: W) -> Result<(), VizError> {
    let header: Vec<String> = (0..map.k).map(|c| c.to_string()).collect();
    writeln!(w, "\t{}", header.join("\t"))?;
    for r in 0..map.rows() {
        let cells: Vec<String> = map.row(r).iter().map(|v| format!("{:.8e}", v)).collect();
        writeln!(w, "{}\t{}", escape_label(&map.row_labels[r]), cells.join("\t"))?;
    }
    Ok(())
}

pub fn write_tsv_file<P: AsRef<Path>>(map: &AttnMap, path: P) -> Result<(), VizError> {
    write_tsv(map, File::create(path)?)
}

pub fn read_tsv<R: Read>(r: R) -> Result<AttnMap, VizError> {
    let mut lines = BufReader::new(r).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or(VizError::Parse { line: 1, msg: "missing header".into() })?;
    let k = header.split('\t').skip(1).count();
    let mut row_labels = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let label = parts.next().unwrap_or("");
        row_labels.push(unescape_label(label));
        let mut n = 0;
        for cell in parts {
            let v: f64 = cell.parse().map_err(|_| VizError::Parse {
                line: i + 2,
                msg: format!("bad value {cell:?}"),
            })?;
            values.push(v);
            n += 1;
        }
        if n != k {
            return Err(VizError::Parse {
                line: i + 2,
                msg: format!("{n} cells, expected {k}"),
            });
        }
    }
    Ok(AttnMap { row_labels, k, values })
}

pub fn read_tsv_file<P: AsRef<Path>>(path: P) -> Result<AttnMap, VizError> {
    read_tsv(File::open(path)?)
}

/// Grayscale SVG heatmap, darker = higher weight. Exactly one rect per cell.
pub fn write_svg<W: Write>(map: &AttnMap, mut w: W) -> Result<(), VizError> {
    const CELL: usize = 12;
    const LABEL_W: usize = 64;
    const HEADER_H: usize = 14;
    let width = LABEL_W + map.k * CELL;
    let height = HEADER_H + map.rows() * CELL;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )?;
    for (c, x) in (0..map.k).map(|c| (c, LABEL_W + c * CELL)) {
        writeln!(
            w,
            r#"<text x="{}" y="{}" font-size="7" text-anchor="middle">{}</text>"#,
            x + CELL / 2,
            HEADER_H - 4,
            c
        )?;
    }
    for r in 0..map.rows() {
        let y = HEADER_H + r * CELL;
        let label = map.row_labels[r]
            .replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;");
        writeln!(
            w,
            r#"<text x="{}" y="{}" font-size="9" text-anchor="end">{}</text>"#,
            LABEL_W - 4,
            y + CELL - 3,
            label
        )?;
        for c in 0..map.k {
            let v = map.at(r, c).clamp(0.0, 1.0);
            let level = (255.0 * (1.0 - v)).round() as u8;
            writeln!(
                w,
                r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="#{level:02x}{level:02x}{level:02x}"/>"##,
                LABEL_W + c * CELL,
                y
            )?;
        }
    }
    writeln!(w, "</svg>")?;
    Ok(())
}

pub fn write_svg_file<P: AsRef<Path>>(map: &AttnMap, path: P) -> Result<(), VizError> {
    write_svg(map, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(labels: &[&str], k: usize, v: Vec<f64>) -> AttnMap {
        AttnMap {
            row_labels: labels.iter().map(|s| s.to_string()).collect(),
            k,
            values: v,
        }
    }

    #[test]
    fn averaging_identical_maps_is_identity() {
        let m = map(&["a", "b"], 2, vec![0.25, 0.75, 0.5, 0.5]);
        let avg = average_maps(&[m.clone(), m.clone()]).unwrap();
        assert_eq!(avg.values, m.values);
    }

    // Rows past a short map's end average over the longer maps only.
    #[test]
    fn averaging_counts_reaching_rows() {
        let short = map(&["a", "b", "c"], 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let long = map(
            &["a", "b", "c", "d", "e"],
            2,
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.2, 0.8],
        );
        let avg = average_maps(&[short, long]).unwrap();
        assert_eq!(avg.rows(), 5);
        assert_eq!(avg.row(0), &[0.5, 0.5]);
        assert_eq!(avg.row(3), &[0.0, 1.0]);
        assert_eq!(avg.row(4), &[0.2, 0.8]);
        // convexity keeps rows stochastic
        for r in 0..avg.rows() {
            let s: f64 = avg.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_dataset_is_error() {
        assert!(matches!(average_maps(&[]), Err(VizError::EmptyDataset)));
    }

    #[test]
    fn tsv_round_trip_preserves_values_and_labels() {
        let m = map(
            &["a", " ", "\t", "ü", "<eos>"],
            3,
            (0..15).map(|i| (i as f64 + 0.123456789) / 20.0).collect(),
        );
        let mut buf = Vec::new();
        write_tsv(&m, &mut buf).unwrap();
        let back = read_tsv(buf.as_slice()).unwrap();
        assert_eq!(back.row_labels, m.row_labels);
        assert_eq!(back.k, m.k);
        for (a, b) in back.values.iter().zip(&m.values) {
            let rel = (a - b).abs() / b.abs().max(1e-30);
            assert!(rel < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn svg_has_one_rect_per_cell() {
        let m = map(&["a", "b"], 2, vec![0.1, 0.9, 0.6, 0.4]);
        let mut buf = Vec::new();
        write_svg(&m, &mut buf).unwrap();
        let svg = String::from_utf8(buf).unwrap();
        assert_eq!(svg.matches("<rect").count(), 4);
        // darker fill for the higher weight
        assert!(svg.contains("#191919") || svg.contains("#1a1a1a"), "{svg}");
    }

    #[test]
    fn entropy_and_contiguity_metrics() {
        let peaked = map(&["a", "b"], 4, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let uniform = map(&["a", "b"], 4, vec![0.25; 8]);
        assert!(mean_row_entropy(&peaked) < 1e-12);
        assert!((mean_row_entropy(&uniform) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(contiguity_score(&peaked), 1.0);
        let alternating = map(
            &["a", "b", "c"],
            2,
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0],
        );
        assert_eq!(contiguity_score(&alternating), 0.0);
    }
}
