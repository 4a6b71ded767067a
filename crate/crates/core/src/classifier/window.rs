//! Binary feature windows around one access of a per-table trace sequence.

use serde::{Deserialize, Serialize};

use crate::cache::TRACE_SETS;

/// Accesses on each side of the centre.
pub const RADIUS: usize = 8;
pub const ROWS: usize = 2 * RADIUS + 1;
pub const FEATURES: usize = ROWS * TRACE_SETS;

/// Rows `index-8 ..= index+8` of a sequence of hot-set masks; rows outside
/// the sequence or lost accesses are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AccessWindow {
    pub rows: [u16; ROWS],
    /// True set, training data only.
    pub label: Option<u8>,
}

impl AccessWindow {
    pub fn centre(&self) -> u16 {
        self.rows[RADIUS]
    }

    /// Writes the 272 features (row-major, bit `s` of row `r` at `16r + s`).
    pub fn write_features(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), FEATURES);
        for (r, &mask) in self.rows.iter().enumerate() {
            for s in 0..TRACE_SETS {
                out[r * TRACE_SETS + s] = f64::from(mask >> s & 1);
            }
        }
    }

    pub fn features(&self) -> Vec<f64> {
        let mut v = vec![0.0; FEATURES];
        self.write_features(&mut v);
        v
    }

    /// Number of zero rows before the centre.
    pub fn leading_padding(&self, index: usize) -> usize {
        RADIUS.saturating_sub(index)
    }
}

pub fn encode_window(sequence: &[Option<u16>], index: usize) -> AccessWindow {
    assert!(index < sequence.len(), "window index {index} outside a sequence of {}", sequence.len());
    let mut rows = [0u16; ROWS];
    for (r, row) in rows.iter_mut().enumerate() {
        let pos = index as isize + r as isize - RADIUS as isize;
        if pos >= 0 {
            if let Some(Some(mask)) = sequence.get(pos as usize) {
                *row = *mask;
            }
        }
    }
    AccessWindow { rows, label: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lone_access_is_padded_both_sides() {
        let w = encode_window(&[Some(0b100)], 0);
        assert_eq!(w.rows.iter().filter(|&&r| r == 0).count(), 16);
        assert_eq!(w.centre(), 0b100);
        let f = w.features();
        assert_eq!(f.len(), 272);
        assert_eq!(f.iter().sum::<f64>(), 1.0);
        assert_eq!(f[RADIUS * 16 + 2], 1.0);
    }

    #[test]
    fn mid_sequence_copies_rows() {
        let seq: Vec<Option<u16>> = (0..40).map(|i| Some(1u16 << (i % 16) | 1)).collect();
        let w = encode_window(&seq, 20);
        for r in 0..ROWS {
            assert_eq!(Some(w.rows[r]), seq[12 + r]);
        }
    }

    #[test]
    fn index_three_has_five_leading_zero_blocks() {
        let seq = vec![Some(0xffffu16); 30];
        let w = encode_window(&seq, 3);
        let leading = w.rows.iter().take_while(|&&r| r == 0).count();
        assert_eq!(leading, 5);
        assert_eq!(w.leading_padding(3), 5);
    }

    #[test]
    fn lost_accesses_are_zero_rows() {
        let seq = vec![Some(1), None, Some(4)];
        let w = encode_window(&seq, 1);
        assert_eq!(&w.rows[RADIUS - 1..=RADIUS + 1], &[1, 0, 4]);
    }

    proptest! {
        #[test]
        fn features_are_binary(seq in proptest::collection::vec(proptest::option::of(any::<u16>()), 1..60), pick in any::<proptest::sample::Index>()) {
            let i = pick.index(seq.len());
            let w = encode_window(&seq, i);
            let f = w.features();
            prop_assert!(f.iter().all(|&x| x == 0.0 || x == 1.0));
            let ones: u32 = w.rows.iter().map(|r| r.count_ones()).sum();
            prop_assert_eq!(f.iter().sum::<f64>() as u32, ones);
            prop_assert_eq!(w.centre(), seq[i].unwrap_or(0));
        }
    }
}
