use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with uniform weights over orders `1..=n`, clipped
/// counts and a brevity penalty. Orders 2 and up use add-one smoothing,
/// `(matches + 1) / (total + 1)`; order 1 is unsmoothed.
pub fn bleu_n<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if n == 0 {
        return Err(Error::invalid("BLEU order must be at least 1"));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("no candidates".into()));
    }
    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refr) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refr.len();
        for order in 1..=n {
            let ref_counts = ngram_counts(refr, order);
            for (g, c) in ngram_counts(cand, order) {
                matches[order - 1] += c.min(ref_counts.get(g).copied().unwrap_or(0));
                totals[order - 1] += c;
            }
        }
    }
    let mut log_sum = 0.0;
    for i in 0..n {
        let p = if i == 0 {
            if totals[0] == 0 {
                0.0
            } else {
                matches[0] as f64 / totals[0] as f64
            }
        } else {
            (matches[i] as f64 + 1.0) / (totals[i] as f64 + 1.0)
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Distinct n-grams over all n-grams, pooled across `candidates`.
pub fn distinct_n<T: Eq + Hash>(candidates: &[Vec<T>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for c in candidates {
        if c.len() >= n {
            for w in c.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty(format!("no {n}-grams in the candidates")));
    }
    Ok(unique.len() as f64 / total as f64)
}
