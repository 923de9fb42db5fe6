use crate::error::{Error, Result};

/// Minimum substitutions, insertions and deletions turning `a` into `b`.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
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

/// Word error rate of one hypothesis. May exceed 1 when the hypothesis has
/// many insertions.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Total edits over total reference length.
pub fn corpus_wer<T: PartialEq>(pairs: &[(&[T], &[T])]) -> Result<f64> {
    let mut edits = 0;
    let mut words = 0;
    for (r, h) in pairs {
        if r.is_empty() {
            return Err(Error::EmptyReference);
        }
        edits += edit_distance(r, h);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(edits as f64 / words as f64)
}
