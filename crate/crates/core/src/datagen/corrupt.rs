//! Clean-sequence generators for the sorting task and every corruption
//! process: sorting swaps, grammar edits, and the pretraining noiser.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};

/// `max(0, round(N(mean, sd)))`.
pub fn rounded_gaussian<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> usize {
    let draw = Normal::new(mean, sd)
        .map(|n| n.sample(rng))
        .unwrap_or(mean);
    draw.round().max(0.0) as usize
}

/// `len` distinct values from `0..=max_value`, ascending, uniform over subsets.
pub fn gen_sorted_sequence<R: Rng + ?Sized>(rng: &mut R, len: usize, max_value: u32) -> Result<Vec<u32>> {
    let domain = max_value as usize + 1;
    ensure!(
        len <= domain,
        Config,
        "cannot draw {len} distinct values from a domain of {domain}"
    );
    let mut picked: Vec<u32> = index::sample(rng, domain, len)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Swaps `i` and `i + 1`.
pub fn adjacent_swap(seq: &mut [u32], i: usize) {
    seq.swap(i, i + 1);
}

/// `n ~ round(N(mean, sd))` clamped to `[0, |seq| − 1]` swaps of uniformly
/// chosen adjacent pairs.
pub fn inject_sort_errors<R: Rng + ?Sized>(seq: &[u32], rng: &mut R, mean: f64, sd: f64) -> Vec<u32> {
    let mut out = seq.to_vec();
    if out.len() < 2 {
        return out;
    }
    let n = rounded_gaussian(rng, mean, sd).min(out.len() - 1);
    for _ in 0..n {
        let i = rng.random_range(0..out.len() - 1);
        adjacent_swap(&mut out, i);
    }
    out
}

/// One grammar-task corruption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edit {
    Delete(usize),
    Insert(usize, u32),
    Swap(usize, usize),
}

/// Applies `edit`; deleting from a single-token sequence is skipped.
pub fn apply_edit(seq: &mut Vec<u32>, edit: Edit) {
    match edit {
        Edit::Delete(i) => {
            if seq.len() > 1 {
                seq.remove(i);
            }
        }
        Edit::Insert(i, s) => seq.insert(i, s),
        Edit::Swap(i, j) => seq.swap(i, j),
    }
}

/// Grammar-task corruption: `round(N(mean, sd))` (zero-thresholded) edits,
/// each uniformly a deletion, an insertion of a uniform `terminals` symbol,
/// or a swap of two distinct uniformly chosen positions.
pub fn inject_cfg_errors<R: Rng + ?Sized>(
    seq: &[u32],
    rng: &mut R,
    terminals: &[u32],
    mean: f64,
    sd: f64,
) -> Vec<u32> {
    let mut out = seq.to_vec();
    let n = rounded_gaussian(rng, mean, sd);
    for _ in 0..n {
        let edit = match rng.random_range(0..3) {
            0 => Edit::Delete(rng.random_range(0..out.len().max(1))),
            1 => Edit::Insert(
                rng.random_range(0..=out.len()),
                terminals[rng.random_range(0..terminals.len())],
            ),
            _ => {
                if out.len() < 2 {
                    continue;
                }
                let i = rng.random_range(0..out.len());
                let mut j = rng.random_range(0..out.len() - 1);
                if j >= i {
                    j += 1;
                }
                Edit::Swap(i, j)
            }
        };
        if !out.is_empty() {
            apply_edit(&mut out, edit);
        } else if let Edit::Insert(_, s) = edit {
            out.push(s);
        }
    }
    out
}

/// Denoising-pretraining corruption: drop each token with probability
/// `p_drop`, then `round(rate·|y|)` random insertions and as many random
/// deletions. Never returns an empty sequence when `y` is nonempty.
pub fn noise_sequence<R: Rng + ?Sized>(
    y: &[u32],
    rng: &mut R,
    symbols: &[u32],
    p_drop: f64,
    rate: f64,
) -> Vec<u32> {
    if y.is_empty() {
        return Vec::new();
    }
    let mut out: Vec<u32> = y.iter().copied().filter(|_| !rng.random_bool(p_drop)).collect();
    if out.is_empty() {
        out.push(y[rng.random_range(0..y.len())]);
    }
    let n = (rate * y.len() as f64).round() as usize;
    for _ in 0..n {
        let at = rng.random_range(0..=out.len());
        out.insert(at, symbols[rng.random_range(0..symbols.len())]);
    }
    for _ in 0..n {
        if out.len() <= 1 {
            break;
        }
        let at = rng.random_range(0..out.len());
        out.remove(at);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SeededRng;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

    #[test]
    fn forced_subset() {
        let mut rng = SeededRng::new(0);
        assert_eq!(gen_sorted_sequence(&mut rng, 3, 2).unwrap(), vec![0, 1, 2]);
        assert!(gen_sorted_sequence(&mut rng, 4, 2).is_err());
    }

    #[test]
    fn sorted_marginals_match_subset_frequency() {
        // Each of 51 values lands in a uniform 20-subset with probability 20/51.
        let mut rng = SeededRng::new(42);
        let draws = 100_000;
        let mut counts = [0u32; 51];
        for _ in 0..draws {
            for v in gen_sorted_sequence(&mut rng, 20, 50).unwrap() {
                counts[v as usize] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 20.0 / 51.0).abs() < 0.01, "{f}");
        }
    }

    #[test]
    fn single_adjacent_swap() {
        let mut s = vec![1, 2, 3];
        adjacent_swap(&mut s, 0);
        assert_eq!(s, vec![2, 1, 3]);
    }

    #[test]
    fn zero_errors_is_identity() {
        let mut rng = SeededRng::new(1);
        let y = vec![4, 9, 13];
        assert_eq!(inject_sort_errors(&y, &mut rng, 0.0, 1e-9), y);
        assert_eq!(inject_cfg_errors(&y, &mut rng, &[1, 2], 0.0, 1e-9), y);
        assert_eq!(noise_sequence(&y, &mut rng, &[1, 2], 0.0, 0.0), y);
    }

    #[test]
    fn deletion_example() {
        let mut s = vec![10, 11, 12];
        apply_edit(&mut s, Edit::Delete(1));
        assert_eq!(s, vec![10, 12]);
        let mut one = vec![5];
        apply_edit(&mut one, Edit::Delete(0));
        assert_eq!(one, vec![5]);
    }

    #[test]
    fn drop_stage_keeps_eighty_percent() {
        let mut rng = SeededRng::new(9);
        let y: Vec<u32> = (0..1000).collect();
        let mut kept = 0usize;
        for _ in 0..100 {
            kept += noise_sequence(&y, &mut rng, &[0], 0.2, 0.0).len();
        }
        let frac = kept as f64 / 100_000.0;
        assert!((frac - 0.8).abs() < 0.01, "{frac}");
    }

    #[test]
    fn sort_repair_oracle_holds() {
        let mut rng = SeededRng::new(5);
        for _ in 0..10_000 {
            let y = gen_sorted_sequence(&mut rng, 20, 50).unwrap();
            let mut x = inject_sort_errors(&y, &mut rng, 8.0, 4.0);
            x.sort_unstable();
            assert_eq!(x, y);
        }
    }

    proptest! {
        #[test]
        fn sort_errors_preserve_multiset(seed in any::<u64>(), len in 2usize..30) {
            let mut rng = SeededRng::new(seed);
            let y = gen_sorted_sequence(&mut rng, len, 50).unwrap();
            let x = inject_sort_errors(&y, &mut rng, 8.0, 4.0);
            let mut a = x.clone();
            a.sort_unstable();
            prop_assert_eq!(a, y);
        }

        #[test]
        fn cfg_edit_length_accounting(seed in any::<u64>(), len in 1usize..15, edits in prop::collection::vec(0u8..3, 0..8)) {
            let mut rng = SeededRng::new(seed);
            let mut s: Vec<u32> = (0..len as u32).collect();
            let mut expected = s.len() as i64;
            for kind in edits {
                let edit = match kind {
                    0 => Edit::Delete(rng.random_range(0..s.len())),
                    1 => Edit::Insert(rng.random_range(0..=s.len()), 99),
                    _ => Edit::Swap(0, s.len() - 1),
                };
                match edit {
                    Edit::Delete(_) if s.len() > 1 => expected -= 1,
                    Edit::Insert(..) => expected += 1,
                    _ => {}
                }
                apply_edit(&mut s, edit);
                prop_assert_eq!(s.len() as i64, expected);
            }
        }

        #[test]
        fn noise_never_empties(seed in any::<u64>(), len in 1usize..40) {
            let mut rng = SeededRng::new(seed);
            let y: Vec<u32> = (0..len as u32).collect();
            let out = noise_sequence(&y, &mut rng, &[7, 8], 0.9, 0.5);
            prop_assert!(!out.is_empty());
        }
    }
}
