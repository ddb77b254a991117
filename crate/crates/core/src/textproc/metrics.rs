//! BLEU and ROUGE-L over token sequences.

use std::collections::HashMap;

/// Added in place of a zero clipped count for n-gram orders ≥ 2.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Recall weight used by the ROUGE-L F-measure (the coco-caption convention).
pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Per-order clipped matches and totals plus length statistics, additive over
/// a corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn new<T: AsRef<str>, R: AsRef<[T]>>(candidate: &[T], references: &[R], max_n: usize) -> Self {
        let mut matches = vec![0; max_n];
        let mut totals = vec![0; max_n];
        for n in 1..=max_n {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in references {
                for (g, c) in ngram_counts(r.as_ref(), n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cand {
                totals[n - 1] += c;
                matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
        let c = candidate.len();
        // closest reference length, ties resolved toward the shorter one
        let ref_len = references
            .iter()
            .map(|r| r.as_ref().len())
            .min_by_key(|&r| ((r as isize - c as isize).unsigned_abs(), r))
            .unwrap_or(0);
        Self {
            matches,
            totals,
            cand_len: c,
            ref_len,
        }
    }

    pub fn merge(&mut self, other: &Self) {
        if self.matches.is_empty() {
            *self = other.clone();
            return;
        }
        for i in 0..self.matches.len() {
            self.matches[i] += other.matches[i];
            self.totals[i] += other.totals[i];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    pub fn score(&self) -> f64 {
        if self.cand_len == 0 || self.matches.is_empty() || self.matches[0] == 0 {
            return 0.0;
        }
        // orders longer than the candidate have no n-grams and are left out
        let orders: Vec<(usize, usize)> = self
            .matches
            .iter()
            .zip(&self.totals)
            .filter(|(_, &t)| t > 0)
            .map(|(&m, &t)| (m, t))
            .collect();
        let n = orders.len() as f64;
        let mut log_sum = 0.0;
        for (m, t) in orders {
            let p = if m == 0 {
                BLEU_EPSILON / t as f64
            } else {
                m as f64 / t as f64
            };
            log_sum += p.ln() / n;
        }
        let bp = if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        bp * log_sum.exp()
    }
}

/// Sentence BLEU-`max_n` with clipped precision, closest-length brevity
/// penalty and epsilon smoothing of zero-match higher orders. Orders longer
/// than the candidate are dropped from the geometric mean.
///
/// Returns 0 for an empty candidate or no unigram overlap.
pub fn bleu<T: AsRef<str>, R: AsRef<[T]>>(candidate: &[T], references: &[R], max_n: usize) -> f64 {
    assert!((1..=4).contains(&max_n), "max_n must be in 1..=4");
    assert!(!references.is_empty(), "at least one reference required");
    BleuStats::new(candidate, references, max_n).score()
}

/// Corpus BLEU: statistics summed over every pair before scoring.
pub fn corpus_bleu<T: AsRef<str>, R: AsRef<[T]>>(pairs: &[(&[T], &[R])], max_n: usize) -> f64 {
    let mut acc = BleuStats::default();
    for (c, r) in pairs {
        acc.merge(&BleuStats::new(c, r, max_n));
    }
    acc.score()
}

pub fn lcs_len<T: AsRef<str>, U: AsRef<str>>(a: &[T], b: &[U]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure, maximized over references.
pub fn rouge_l<T: AsRef<str>, R: AsRef<[T]>>(candidate: &[T], references: &[R]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    references
        .iter()
        .map(|r| {
            let r = r.as_ref();
            let l = lcs_len(candidate, r);
            if l == 0 || r.is_empty() {
                return 0.0;
            }
            let p = l as f64 / candidate.len() as f64;
            let rec = l as f64 / r.len() as f64;
            let b2 = ROUGE_BETA * ROUGE_BETA;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// True when `candidate` shares an n-gram of length ≥ `n` with `source`.
pub fn shares_ngram<T: AsRef<str>, U: AsRef<str>>(candidate: &[T], source: &[U], n: usize) -> bool {
    if candidate.len() < n || source.len() < n {
        return false;
    }
    let src: std::collections::HashSet<Vec<&str>> = source
        .windows(n)
        .map(|w| w.iter().map(AsRef::as_ref).collect())
        .collect();
    candidate
        .windows(n)
        .any(|w| src.contains(&w.iter().map(AsRef::as_ref).collect::<Vec<_>>()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::tokenize;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn bleu_fixtures() {
        let r = t("the cat sat on the mat");
        assert_eq!(bleu(&r, &[r.clone()], 4), 1.0);
        assert_eq!(bleu(&t("dogs run fast"), &[r.clone()], 1), 0.0);
        assert_eq!(bleu::<String, Vec<String>>(&[], &[r.clone()], 4), 0.0);
        let short = t("yes");
        assert_eq!(bleu(&short, &[short.clone()], 4), 1.0);
        // one bigram, no match: p2 is smoothed to 1e-9
        let b2 = bleu(&t("a b"), &[t("a c")], 4);
        assert!((b2 - (0.5f64 * BLEU_EPSILON).sqrt()).abs() < 1e-15);
        // p1 = 3/3, BP = exp(1 - 4/3)
        let b1 = bleu(&t("the cat sat"), &[t("the cat sat down")], 1);
        assert!((b1 - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert!((b1 - 0.7165).abs() < 1e-4);
    }

    #[test]
    fn rouge_fixtures() {
        let a = t("a b c d");
        assert_eq!(rouge_l(&a, &[a.clone()]), 1.0);
        assert_eq!(rouge_l(&a, &[t("x y")]), 0.0);
        // LCS 3, P = 3/4, R = 1
        let (p, r) = (0.75, 1.0);
        let b2 = ROUGE_BETA * ROUGE_BETA;
        let want = (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l(&a, &[t("a c d")]) - want).abs() < 1e-12);
        assert_eq!(lcs_len(&a, &t("a c d")), 3);
    }

    #[test]
    fn closest_length_penalty_can_lower_multi_reference_score() {
        // candidate length 5; alone, the 3-token reference gives BP = 1, but a
        // disjoint 6-token reference is closer in length and triggers BP < 1.
        let cand = t("a b c x y");
        let short = t("a b c");
        let long = t("p q r s u v");
        let single = bleu(&cand, &[short.clone()], 1);
        let multi = bleu(&cand, &[short, long], 1);
        assert!(multi < single);
    }

    #[test]
    fn ngram_sharing() {
        assert!(shares_ngram(&t("the cup is red"), &t("i think the cup is red ."), 3));
        assert!(!shares_ngram(&t("the cup is red"), &t("the cup was red"), 3));
    }

    fn sent() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..8)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn scores_are_bounded(c in sent(), r in sent(), n in 1usize..=4) {
            let b = bleu(&c, &[r.clone()], n);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            let l = rouge_l(&c, &[r]);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&l));
        }

        /// With equal-length references the brevity penalty is shared, so
        /// per-reference clipping maxima can only raise the score.
        #[test]
        fn extra_reference_never_hurts_at_equal_lengths(
            c in sent(),
            (r1, r2) in (1usize..8).prop_flat_map(|len| {
                let s = prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), len);
                (s.clone(), s)
            }),
            n in 1usize..=4,
        ) {
            let r1: Vec<String> = r1.into_iter().map(String::from).collect();
            let r2: Vec<String> = r2.into_iter().map(String::from).collect();
            let single = bleu(&c, &[r1.clone()], n);
            let multi = bleu(&c, &[r1, r2], n);
            prop_assert!(multi + 1e-12 >= single);
        }

        #[test]
        fn bleu_order_monotone_without_smoothing(r in sent()) {
            // candidate drawn from the reference itself: every order has matches
            let c = r.clone();
            let mut prev = f64::INFINITY;
            for n in 1..=r.len().min(4) {
                let b = bleu(&c, &[r.clone()], n);
                prop_assert!(b <= prev + 1e-12);
                prev = b;
            }
        }
    }
}
