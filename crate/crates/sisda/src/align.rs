//! Edit distance and token-level alignment.
//!
//! Alignment drives two things: the token error rate of a decoded sequence
//! against its reference, and the split of hypothesis positions into
//! "correct" (aligned as matches) and "error" (substitutions and
//! insertions). Reference tokens that were deleted have no hypothesis
//! position and are ignored by the split.

use std::collections::BTreeSet;

use crate::model::TokenId;

/// Unit-cost Levenshtein distance.
pub fn edit_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    let n = b.len();
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for (i, &ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Token error rate of one hypothesis: edit distance over reference
/// length. Can exceed 1 when the hypothesis runs long. `None` for an
/// empty reference, where the rate is undefined.
pub fn token_error_rate(hypothesis: &[TokenId], reference: &[TokenId]) -> Option<f64> {
    (!reference.is_empty())
        .then(|| edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Corpus-level token error rate: total edit distance over total reference
/// length. `None` when the references hold no tokens at all.
pub fn corpus_error_rate<'a, I>(pairs: I) -> Option<f64>
where
    I: IntoIterator<Item = (&'a [TokenId], &'a [TokenId])>,
{
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in pairs {
        edits += edit_distance(hyp, reference);
        ref_len += reference.len();
    }
    (ref_len > 0).then(|| edits as f64 / ref_len as f64)
}

/// Edit operations an alignment is made of, in tie-break preference order:
/// when several alignments share the minimal cost, the one preferring
/// matches, then substitutions, then insertions, then deletions (leftmost
/// decision first) is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    /// Hypothesis token equals the aligned reference token.
    Match,
    /// Hypothesis token replaces a reference token.
    Substitution,
    /// Hypothesis token with no reference counterpart.
    Insertion,
    /// Reference token with no hypothesis counterpart.
    Deletion,
}

/// Hypothesis positions split by alignment outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenOutcomeSets {
    /// Positions aligned as matches. Disjoint from `error`; the union covers
    /// every hypothesis position.
    pub correct: BTreeSet<usize>,
    /// Positions aligned as substitutions or insertions.
    pub error: BTreeSet<usize>,
}

/// Aligns `hypothesis` to `reference` with unit costs and classifies every
/// hypothesis position. Deterministic: among minimal-cost alignments the
/// operation sequence is chosen greedily from the front, preferring
/// match > substitution > insertion > deletion.
pub fn classify_tokens(hypothesis: &[TokenId], reference: &[TokenId]) -> TokenOutcomeSets {
    let ops = align_ops(hypothesis, reference);
    let mut outcome = TokenOutcomeSets {
        correct: BTreeSet::new(),
        error: BTreeSet::new(),
    };
    let mut pos = 0usize;
    for op in ops {
        match op {
            EditOp::Match => {
                outcome.correct.insert(pos);
                pos += 1;
            }
            EditOp::Substitution | EditOp::Insertion => {
                outcome.error.insert(pos);
                pos += 1;
            }
            EditOp::Deletion => {}
        }
    }
    outcome
}

/// The canonical minimal-cost alignment as an operation sequence.
pub fn align_ops(hypothesis: &[TokenId], reference: &[TokenId]) -> Vec<EditOp> {
    // cost[i][j] = distance between hypothesis[i..] and reference[j..],
    // so the walk below can pick operations from the front.
    let m = hypothesis.len();
    let n = reference.len();
    let mut cost = vec![vec![0usize; n + 1]; m + 1];
    for j in 0..=n {
        cost[m][j] = n - j;
    }
    for i in (0..m).rev() {
        cost[i][n] = m - i;
        for j in (0..n).rev() {
            let sub = cost[i + 1][j + 1] + usize::from(hypothesis[i] != reference[j]);
            cost[i][j] = sub.min(cost[i + 1][j] + 1).min(cost[i][j + 1] + 1);
        }
    }

    let mut ops = Vec::with_capacity(m.max(n));
    let (mut i, mut j) = (0usize, 0usize);
    while i < m || j < n {
        let here = cost[i][j];
        if i < m && j < n && hypothesis[i] == reference[j] && cost[i + 1][j + 1] == here {
            ops.push(EditOp::Match);
            i += 1;
            j += 1;
        } else if i < m && j < n && cost[i + 1][j + 1] + 1 == here {
            ops.push(EditOp::Substitution);
            i += 1;
            j += 1;
        } else if i < m && cost[i + 1][j] + 1 == here {
            ops.push(EditOp::Insertion);
            i += 1;
        } else {
            debug_assert!(j < n && cost[i][j + 1] + 1 == here);
            ops.push(EditOp::Deletion);
            j += 1;
        }
    }
    ops
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;

    #[test]
    fn identical_sequences_are_all_correct() {
        let s = vec![5, 6, 7];
        let out = classify_tokens(&s, &s);
        assert_eq!(out.correct, BTreeSet::from([0, 1, 2]));
        assert!(out.error.is_empty());
    }

    #[test]
    fn single_substitution_is_isolated() {
        let hyp = vec![5, 9, 7];
        let reference = vec![5, 6, 7];
        let out = classify_tokens(&hyp, &reference);
        assert_eq!(out.correct, BTreeSet::from([0, 2]));
        assert_eq!(out.error, BTreeSet::from([1]));
    }

    #[test]
    fn insertion_between_matches() {
        // hyp (a, z, b) vs ref (a, b): middle token is an insertion.
        let hyp = vec![10, 25, 11];
        let reference = vec![10, 11];
        let out = classify_tokens(&hyp, &reference);
        assert_eq!(out.correct, BTreeSet::from([0, 2]));
        assert_eq!(out.error, BTreeSet::from([1]));
    }

    #[test]
    fn deletion_leaves_no_hypothesis_position() {
        let hyp = vec![10, 11];
        let reference = vec![10, 25, 11];
        let out = classify_tokens(&hyp, &reference);
        assert_eq!(out.correct, BTreeSet::from([0, 1]));
        assert!(out.error.is_empty());
        assert_eq!(edit_distance(&hyp, &reference), 1);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let out = classify_tokens(&[], &[1, 2, 3]);
        assert!(out.correct.is_empty());
        assert!(out.error.is_empty());
        assert_eq!(edit_distance(&[], &[1, 2, 3]), 3);
    }

    #[test]
    fn distance_matches_recursive_oracle_on_short_pairs() {
        // Exhaustive over a 3-symbol alphabet up to length 4 here; the
        // acceptance suite extends the sweep to length 6.
        let seqs = oracles::all_sequences(3, 4);
        for a in &seqs {
            for b in &seqs {
                assert_eq!(
                    edit_distance(a, b),
                    oracles::edit_distance_recursive(a, b),
                    "a={a:?} b={b:?}"
                );
            }
        }
    }

    #[test]
    fn classification_matches_enumeration_oracle() {
        let seqs = oracles::all_sequences(3, 4);
        for hyp in &seqs {
            for reference in seqs.iter().filter(|r| !r.is_empty()) {
                let fast = classify_tokens(hyp, reference);
                let slow = oracles::classify_by_enumeration(hyp, reference);
                assert_eq!(fast, slow, "hyp={hyp:?} ref={reference:?}");
            }
        }
    }

    #[test]
    fn error_rate_pools_edits_over_pooled_length() {
        let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = vec![
            (vec![5, 6, 7], vec![5, 6, 7]),    // 0 edits, 3 ref tokens
            (vec![5, 9], vec![5, 6, 7]),       // 2 edits, 3 ref tokens
            (vec![5, 6, 7, 8], vec![5, 6, 7]), // 1 edit, 3 ref tokens
        ];
        let rate = corpus_error_rate(
            pairs
                .iter()
                .map(|(h, r)| (h.as_slice(), r.as_slice())),
        )
        .unwrap();
        assert!((rate - 3.0 / 9.0).abs() < 1e-12);
        assert_eq!(corpus_error_rate(std::iter::empty()), None);
        assert_eq!(token_error_rate(&[5, 9], &[5, 6, 7]), Some(2.0 / 3.0));
        assert_eq!(token_error_rate(&[5], &[]), None);
    }

    #[test]
    fn classification_is_stable_under_relabeling() {
        // Renaming symbols consistently must not change the outcome sets.
        let hyp = vec![5, 6, 6, 8];
        let reference = vec![5, 6, 8];
        let relabel = |t: TokenId| t + 100;
        let orig = classify_tokens(&hyp, &reference);
        let mapped = classify_tokens(
            &hyp.iter().copied().map(relabel).collect::<Vec<_>>(),
            &reference.iter().copied().map(relabel).collect::<Vec<_>>(),
        );
        assert_eq!(orig, mapped);
    }
}
