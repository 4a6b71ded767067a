//! Rule-based trail removal: a set that is hot at access `i` and also at one
//! of the next `window` accesses is attributed to the later access.

/// Candidate-set masks, one per access. Lost accesses (`None`) contribute
/// nothing to the subtraction and get every set as candidates.
pub fn rule_denoise(sequence: &[Option<u16>], window: usize) -> Vec<u16> {
    (0..sequence.len())
        .map(|i| {
            let Some(hot) = sequence[i] else {
                return 0xffff;
            };
            if hot == 0 {
                return 0xffff;
            }
            let later = sequence[i + 1..(i + 1 + window).min(sequence.len())]
                .iter()
                .fold(0u16, |acc, m| acc | m.unwrap_or(0));
            match hot & !later {
                0 => hot,
                rest => rest,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Trail-only traces: access k sees its own line and the next `window`.
    fn trail(lines: &[u8], window: usize) -> Vec<Option<u16>> {
        (0..lines.len())
            .map(|k| Some(lines[k..(k + 1 + window).min(lines.len())].iter().fold(0u16, |m, &l| m | 1 << l)))
            .collect()
    }

    #[test]
    fn fenced_traces_give_singletons() {
        let lines = [3u8, 3, 7, 0, 15, 7];
        let seq: Vec<Option<u16>> = lines.iter().map(|&l| Some(1u16 << l)).collect();
        let c = rule_denoise(&seq, 4);
        for (m, &l) in c.iter().zip(&lines) {
            assert_eq!(*m, 1 << l);
        }
    }

    #[test]
    fn all_cold_falls_back_to_everything() {
        assert_eq!(rule_denoise(&[Some(0)], 4), vec![0xffff]);
        assert_eq!(rule_denoise(&[None], 4), vec![0xffff]);
    }

    #[test]
    fn trail_is_stripped() {
        let lines = [1u8, 2, 3, 4, 5, 6];
        let c = rule_denoise(&trail(&lines, 4), 4);
        for (m, &l) in c.iter().zip(&lines) {
            assert_eq!(*m, 1 << l);
        }
    }

    proptest! {
        #[test]
        fn trail_only_noise_never_loses_truth(lines in proptest::collection::vec(0u8..16, 1..80)) {
            let c = rule_denoise(&trail(&lines, 4), 4);
            for (m, &l) in c.iter().zip(&lines) {
                prop_assert!(m & 1 << l != 0);
                prop_assert!(*m != 0);
            }
        }
    }
}
