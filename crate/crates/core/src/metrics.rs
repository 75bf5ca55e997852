//! Levenshtein alignment counts and word/character error rates.

use crate::error::{CoreError, Result};

/// Unit-cost edit distance decomposition between a hypothesis and a
/// reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Levenshtein distance from `hyp` to `ref_`, with the minimal edit script
/// broken down into operation counts. Ambiguities resolve deterministically
/// (substitution over deletion over insertion on the backtrace).
pub fn edit_distance<T: PartialEq>(hyp: &[T], ref_: &[T]) -> EditCounts {
    let n = ref_.len();
    let m = hyp.len();
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(ref_[i - 1] != hyp[j - 1]);
            dp[idx(i, j)] = (dp[idx(i - 1, j - 1)] + cost)
                .min(dp[idx(i - 1, j)] + 1)
                .min(dp[idx(i, j - 1)] + 1);
        }
    }
    // backtrace for the operation breakdown
    let (mut i, mut j) = (n, m);
    let (mut subs, mut ins, mut dels) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0
            && j > 0
            && dp[idx(i, j)] == dp[idx(i - 1, j - 1)] + usize::from(ref_[i - 1] != hyp[j - 1])
        {
            if ref_[i - 1] != hyp[j - 1] {
                subs += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && dp[idx(i, j)] == dp[idx(i - 1, j)] + 1 {
            dels += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    EditCounts {
        distance: dp[idx(n, m)],
        substitutions: subs,
        insertions: ins,
        deletions: dels,
    }
}

/// Word error rate in percent: edit distance over the reference length.
pub fn wer(hyp: &[String], ref_: &[String]) -> Result<f64> {
    if ref_.is_empty() {
        return Err(CoreError::data("empty reference in WER computation"));
    }
    let d = edit_distance(hyp, ref_).distance;
    Ok(d as f64 / ref_.len() as f64 * 100.0)
}

/// Character error rate in percent; words are joined with single spaces so
/// word boundaries count as characters.
pub fn cer(hyp: &[String], ref_: &[String]) -> Result<f64> {
    if ref_.is_empty() {
        return Err(CoreError::data("empty reference in CER computation"));
    }
    let h: Vec<char> = hyp.join(" ").chars().collect();
    let r: Vec<char> = ref_.join(" ").chars().collect();
    let d = edit_distance(&h, &r).distance;
    Ok(d as f64 / r.len() as f64 * 100.0)
}

/// Corpus-level rates: summed distances over summed reference lengths.
pub struct ErrorRateAccumulator {
    word_dist: usize,
    word_len: usize,
    char_dist: usize,
    char_len: usize,
}

impl ErrorRateAccumulator {
    pub fn new() -> Self {
        ErrorRateAccumulator {
            word_dist: 0,
            word_len: 0,
            char_dist: 0,
            char_len: 0,
        }
    }

    pub fn push(&mut self, hyp: &[String], ref_: &[String]) {
        self.word_dist += edit_distance(hyp, ref_).distance;
        self.word_len += ref_.len();
        let h: Vec<char> = hyp.join(" ").chars().collect();
        let r: Vec<char> = ref_.join(" ").chars().collect();
        self.char_dist += edit_distance(&h, &r).distance;
        self.char_len += r.len();
    }

    pub fn wer(&self) -> f64 {
        if self.word_len == 0 {
            return 0.0;
        }
        self.word_dist as f64 / self.word_len as f64 * 100.0
    }

    pub fn cer(&self) -> f64 {
        if self.char_len == 0 {
            return 0.0;
        }
        self.char_dist as f64 / self.char_len as f64 * 100.0
    }
}

impl Default for ErrorRateAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_sequences_have_zero_error() {
        assert_eq!(wer(&words("a cat"), &words("a cat")).unwrap(), 0.0);
        assert_eq!(cer(&words("a cat"), &words("a cat")).unwrap(), 0.0);
    }

    #[test]
    fn one_substitution_over_two_words_is_fifty_percent() {
        assert_eq!(wer(&words("the cat"), &words("a cat")).unwrap(), 50.0);
    }

    #[test]
    fn empty_reference_is_an_error() {
        assert!(wer(&words("a"), &[]).is_err());
        assert!(cer(&words("a"), &[]).is_err());
    }

    #[test]
    fn counts_decompose_the_distance() {
        let hyp = [1, 2, 9, 4, 5];
        let r = [1, 3, 4, 5, 6];
        let c = edit_distance(&hyp, &r);
        assert_eq!(c.distance, c.substitutions + c.insertions + c.deletions);
    }

    /// Plain quadratic distance-only DP, kept independent of the
    /// production implementation.
    fn reference_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for i in 1..=a.len() {
            let mut row = vec![i];
            for j in 1..=b.len() {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                row.push((prev[j - 1] + cost).min(prev[j] + 1).min(row[j - 1] + 1));
            }
            prev = row;
        }
        prev[b.len()]
    }

    proptest! {
        #[test]
        fn matches_reference_dp(
            a in proptest::collection::vec(0u8..4, 0..12),
            b in proptest::collection::vec(0u8..4, 1..12),
        ) {
            let c = edit_distance(&a, &b);
            prop_assert_eq!(c.distance, reference_distance(&b, &a));
            prop_assert_eq!(c.distance, c.substitutions + c.insertions + c.deletions);
        }
    }
}
