//! Sinusoidal positional encodings.

use crate::diff::Tensor;

/// Table of sinusoidal encodings for positions `0..n_pos`:
/// `pe[pos, 2i] = sin(pos / 10000^(2i/dim))`, `pe[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_table(n_pos: usize, dim: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; n_pos * dim];
    for pos in 0..n_pos {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    Tensor::matrix(n_pos, dim, data).expect("table dims consistent")
}

/// Evenly spread positions for `k` slots over an input of length `max_len`:
/// position of slot i is round(i * max_len / k).
pub fn slot_positions(k: usize, max_len: usize) -> Vec<usize> {
    (0..k)
        .map(|i| ((i as f64) * (max_len as f64) / (k as f64)).round() as usize)
        .collect()
}

/// Encoding rows at the slot positions, as a K x dim matrix.
pub fn slot_position_table(k: usize, max_len: usize, dim: usize) -> Tensor<f32> {
    let table = sinusoidal_table(max_len + 1, dim);
    let mut data = vec![0.0f32; k * dim];
    for (i, &pos) in slot_positions(k, max_len).iter().enumerate() {
        for j in 0..dim {
            data[i * dim + j] = table.at(pos, j);
        }
    }
    Tensor::matrix(k, dim, data).expect("table dims consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_alternates_zero_one() {
        let t = sinusoidal_table(4, 6);
        for i in 0..6 {
            let expect = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert!((t.at(0, i) - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn values_bounded() {
        let t = sinusoidal_table(64, 32);
        assert!(t.data().iter().all(|v| v.abs() <= 1.0 + 1e-6));
    }

    #[test]
    fn slot_positions_spread_evenly() {
        assert_eq!(slot_positions(4, 16), vec![0, 4, 8, 12]);
        assert_eq!(slot_positions(3, 10), vec![0, 3, 7]);
    }
}
