//! Sequence-level scores: exact match, token accuracy and normalised edit
//! distance.

use serde::{Deserialize, Serialize};

/// Token-level Levenshtein distance.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length; an empty reference scores
/// 0 when matched and 1 otherwise.
pub fn normalized_edit_distance(hyp: &[usize], reference: &[usize]) -> f64 {
    if reference.is_empty() {
        return if hyp.is_empty() { 0.0 } else { 1.0 };
    }
    edit_distance(hyp, reference) as f64 / reference.len() as f64
}

/// `max(0, 1 − normalised edit distance)`.
pub fn token_accuracy(hyp: &[usize], reference: &[usize]) -> f64 {
    (1.0 - normalized_edit_distance(hyp, reference)).max(0.0)
}

/// Averages over a set of (hypothesis, reference) pairs, in percent except
/// the edit distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub count: usize,
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub edit_distance: f64,
}

impl Scores {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> Self {
        let (mut n, mut em, mut acc, mut ned) = (0usize, 0.0, 0.0, 0.0);
        for (h, r) in pairs {
            n += 1;
            em += f64::from(u8::from(h == r));
            acc += token_accuracy(h, r);
            ned += normalized_edit_distance(h, r);
        }
        if n == 0 {
            return Self::default();
        }
        let k = n as f64;
        Self { count: n, exact_match: 100.0 * em / k, token_accuracy: 100.0 * acc / k, edit_distance: ned / k }
    }
}
