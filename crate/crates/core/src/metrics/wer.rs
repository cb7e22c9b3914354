use crate::error::{Error, Result};

/// Edit operations of a minimum-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Alignment {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub hits: usize,
    pub ref_len: usize,
}

impl Alignment {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
///
/// Among minimum-cost paths the backtrace prefers a match, then a
/// substitution, then a deletion, then an insertion.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<Alignment> {
    if reference.is_empty() {
        return Err(Error::Domain("empty reference has no WER denominator".into()));
    }
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut dist = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dist[i * w] = i;
    }
    for j in 0..=m {
        dist[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dist[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = dist[(i - 1) * w + j] + 1;
            let ins = dist[i * w + j - 1] + 1;
            dist[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut a = Alignment { ref_len: n, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i * w + j];
        if i > 0 && j > 0 {
            let diag = dist[(i - 1) * w + j - 1];
            if reference[i - 1] == hyp[j - 1] && here == diag {
                a.hits += 1;
                i -= 1;
                j -= 1;
                continue;
            }
            if here == diag + 1 {
                a.substitutions += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == dist[(i - 1) * w + j] + 1 {
            a.deletions += 1;
            i -= 1;
        } else {
            a.insertions += 1;
            j -= 1;
        }
    }
    Ok(a)
}

/// Pooled WER in percent: `100 · Σ errors / Σ reference length`.
pub fn wer<T: PartialEq>(pairs: &[(&[T], &[T])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Domain("WER over zero utterances".into()));
    }
    let (mut errors, mut words) = (0usize, 0usize);
    for (r, h) in pairs {
        let a = align(r, h)?;
        errors += a.errors();
        words += a.ref_len;
    }
    Ok(100.0 * errors as f64 / words as f64)
}
