//! Edit-distance recognition metrics and paired model comparison.
//!
//! Text is compared as Unicode scalar sequences with no case folding or
//! punctuation stripping; whitespace counts as characters. Words are runs
//! separated by whitespace, and a word with any character wrong counts as
//! one word error.

mod wilcoxon;

pub use wilcoxon::{wilcoxon_signed_rank, PairedErrorSample, WilcoxonResult};

use crate::error::{Error, Result};

/// Substitution/deletion/insertion counts from one optimal alignment.
///
/// `substitutions + deletions + insertions` always equals the Levenshtein
/// distance; `reference_length` is the length of the reference side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
}

impl EditCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Unit-cost Levenshtein distance from `reference` to `hypothesis`.
///
/// Counts come from the optimal alignment with the most match/substitution
/// (diagonal) moves; every optimal alignment with that many diagonals has
/// the same (S, D, I) decomposition, which makes the counts deterministic
/// and exactly mirror-symmetric: swapping the arguments swaps D and I.
pub fn levenshtein<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (usize, EditCounts) {
    let m = reference.len();
    let n = hypothesis.len();
    let w = n + 1;
    let mut d = vec![0usize; (m + 1) * w];
    // nd[i][j]: most diagonal moves on any optimal path to (i, j)
    let mut nd = vec![0usize; (m + 1) * w];
    for j in 0..=n {
        d[j] = j;
    }
    for i in 1..=m {
        d[i * w] = i;
        for j in 1..=n {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let diag = d[(i - 1) * w + j - 1] + cost;
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            let best = diag.min(del).min(ins);
            d[i * w + j] = best;
            let mut most = 0;
            if diag == best {
                most = nd[(i - 1) * w + j - 1] + 1;
            }
            if del == best {
                most = most.max(nd[(i - 1) * w + j]);
            }
            if ins == best {
                most = most.max(nd[i * w + j - 1]);
            }
            nd[i * w + j] = most;
        }
    }
    let distance = d[m * w + n];
    let diagonals = nd[m * w + n];
    let counts = EditCounts {
        substitutions: distance + 2 * diagonals - m - n,
        deletions: m - diagonals,
        insertions: n - diagonals,
        reference_length: m,
    };
    debug_assert_eq!(counts.distance(), distance);
    (distance, counts)
}

fn chars(text: &str) -> Vec<char> {
    text.chars().collect()
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Character error rate: character-level edit distance over reference
/// length. Empty reference against a non-empty hypothesis is reported as
/// positive infinity; empty against empty is zero.
pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    let r = chars(reference);
    let h = chars(hypothesis);
    let (dist, _) = levenshtein(&r, &h);
    ratio(dist, r.len())
}

/// Word error rate over whitespace-separated tokens.
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    let r = words(reference);
    let h = words(hypothesis);
    let (dist, _) = levenshtein(&r, &h);
    ratio(dist, r.len())
}

fn ratio(dist: usize, n: usize) -> f64 {
    if n == 0 {
        if dist == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        dist as f64 / n as f64
    }
}

/// Per-item error rates plus the raw counts behind them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemRates {
    pub cer: f64,
    pub wer: f64,
    pub char_distance: usize,
    pub char_reference_length: usize,
    pub word_distance: usize,
    pub word_reference_length: usize,
}

/// Micro-averaged corpus rates: summed edit distances over summed
/// reference lengths, with per-item rates retained for statistical tests.
pub fn corpus_error_rates(pairs: &[(String, String)]) -> Result<(f64, f64, Vec<ItemRates>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("corpus_error_rates needs at least one pair"));
    }
    let mut per_item = Vec::with_capacity(pairs.len());
    let (mut cd, mut cn, mut wd, mut wn) = (0usize, 0usize, 0usize, 0usize);
    for (reference, hypothesis) in pairs {
        let r = chars(reference);
        let h = chars(hypothesis);
        let (char_dist, _) = levenshtein(&r, &h);
        let rw = words(reference);
        let hw = words(hypothesis);
        let (word_dist, _) = levenshtein(&rw, &hw);
        per_item.push(ItemRates {
            cer: ratio(char_dist, r.len()),
            wer: ratio(word_dist, rw.len()),
            char_distance: char_dist,
            char_reference_length: r.len(),
            word_distance: word_dist,
            word_reference_length: rw.len(),
        });
        cd += char_dist;
        cn += r.len();
        wd += word_dist;
        wn += rw.len();
    }
    Ok((ratio(cd, cn), ratio(wd, wn), per_item))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_and_degenerate_cases() {
        let abc: Vec<char> = "abc".chars().collect();
        assert_eq!(levenshtein(&abc, &abc).0, 0);

        let empty: Vec<char> = vec![];
        let (d, c) = levenshtein(&empty, &abc);
        assert_eq!(d, 3);
        assert_eq!(c.insertions, 3);
        assert_eq!(c.deletions, 0);
        assert_eq!(c.substitutions, 0);
    }

    #[test]
    fn kitten_sitting_is_three() {
        let a: Vec<char> = "kitten".chars().collect();
        let b: Vec<char> = "sitting".chars().collect();
        let (d, c) = levenshtein(&a, &b);
        assert_eq!(d, 3);
        assert_eq!(c.distance(), 3);
        // canonical alignment: two substitutions plus one insertion
        assert_eq!(c.substitutions, 2);
        assert_eq!(c.insertions, 1);
    }

    #[test]
    fn cer_basics() {
        assert_eq!(cer("abcd", "abcd"), 0.0);
        assert_eq!(cer("abcd", "abed"), 0.25);
        assert_eq!(cer("", ""), 0.0);
        assert_eq!(cer("", "x"), f64::INFINITY);
    }

    #[test]
    fn wer_basics() {
        assert_eq!(wer("a b", "a b"), 0.0);
        assert_eq!(wer("a b", "a"), 0.5);
        // one wrong character makes the whole word wrong
        assert_eq!(wer("hello world", "hellx world"), 0.5);
    }

    #[test]
    fn english_sample_pair_counts() {
        let reference = "if one walked slowly, between road and";
        let hypothesis = "if are walked slanely, between Noad and";
        let r: Vec<char> = reference.chars().collect();
        let h: Vec<char> = hypothesis.chars().collect();
        assert_eq!(levenshtein(&r, &h).0, 6);
        let rw: Vec<&str> = reference.split_whitespace().collect();
        let hw: Vec<&str> = hypothesis.split_whitespace().collect();
        assert_eq!(levenshtein(&rw, &hw).0, 3);
        assert_eq!(rw.len(), 7);
        assert!((wer(reference, hypothesis) - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn corpus_micro_average() {
        let pairs = vec![
            ("abcdefghij".to_string(), "abcdefghix".to_string()), // 1/10
            ("abcdefghij".to_string(), "abcdefgxyz".to_string()), // 3/10
        ];
        let (c, _w, items) = corpus_error_rates(&pairs).unwrap();
        assert!((c - 0.2).abs() < 1e-15);
        assert_eq!(items.len(), 2);
        assert!((items[0].cer - 0.1).abs() < 1e-15);

        assert!(corpus_error_rates(&[]).is_err());
        let single = vec![("ab".to_string(), "ax".to_string())];
        let (c1, w1, _) = corpus_error_rates(&single).unwrap();
        assert_eq!(c1, cer("ab", "ax"));
        assert_eq!(w1, wer("ab", "ax"));
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_and_counts_swap(
            a in proptest::collection::vec(0u8..3, 0..8),
            b in proptest::collection::vec(0u8..3, 0..8),
        ) {
            let (dab, cab) = levenshtein(&a, &b);
            let (dba, cba) = levenshtein(&b, &a);
            prop_assert_eq!(dab, dba);
            prop_assert_eq!(cab.deletions, cba.insertions);
            prop_assert_eq!(cab.insertions, cba.deletions);
            prop_assert_eq!(cab.distance(), dab);
        }

        #[test]
        fn triangle_inequality(
            a in proptest::collection::vec(0u8..3, 0..7),
            b in proptest::collection::vec(0u8..3, 0..7),
            c in proptest::collection::vec(0u8..3, 0..7),
        ) {
            let (dac, _) = levenshtein(&a, &c);
            let (dab, _) = levenshtein(&a, &b);
            let (dbc, _) = levenshtein(&b, &c);
            prop_assert!(dac <= dab + dbc);
        }
    }
}
