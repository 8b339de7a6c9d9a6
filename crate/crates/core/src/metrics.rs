//! Character/word error rates and substitution confusion tables.
//!
//! Rates are pooled over the corpus: total edit distance divided by total
//! reference length. WER is not clamped and can exceed 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::charset::normalize;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("reference corpus has no {0}")]
    EmptyReference(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditOp {
    Match,
    Substitute,
    Delete,
    Insert,
}

/// Levenshtein distance with one optimal alignment.
///
/// The alignment is recovered by backtracking from the end, preferring
/// match, then substitution, then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (usize, Vec<EditOp>) {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && here == d[(i - 1) * w + j - 1] {
            ops.push(EditOp::Match);
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && here == d[(i - 1) * w + j - 1] + 1 {
            ops.push(EditOp::Substitute);
            i -= 1;
            j -= 1;
        } else if i > 0 && here == d[(i - 1) * w + j] + 1 {
            ops.push(EditOp::Delete);
            i -= 1;
        } else {
            ops.push(EditOp::Insert);
            j -= 1;
        }
    }
    ops.reverse();
    (d[n * w + m], ops)
}

fn check_lengths<A, B>(refs: &[A], hyps: &[B]) -> Result<(), MetricsError> {
    if refs.len() != hyps.len() {
        return Err(MetricsError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    Ok(())
}

fn chars(s: &str) -> Vec<char> {
    normalize(s).chars().collect()
}

fn tokens(s: &str) -> Vec<String> {
    normalize(s).split_whitespace().map(str::to_owned).collect()
}

/// Pooled character edit distance and reference character count.
pub fn char_errors<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<(usize, usize), MetricsError> {
    check_lengths(refs, hyps)?;
    let mut dist = 0;
    let mut total = 0;
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (chars(r.as_ref()), chars(h.as_ref()));
        dist += edit_distance(&r, &h).0;
        total += r.len();
    }
    Ok((dist, total))
}

pub fn word_errors<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<(usize, usize), MetricsError> {
    check_lengths(refs, hyps)?;
    let mut dist = 0;
    let mut total = 0;
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (tokens(r.as_ref()), tokens(h.as_ref()));
        dist += edit_distance(&r, &h).0;
        total += r.len();
    }
    Ok((dist, total))
}

pub fn cer<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<f64, MetricsError> {
    let (dist, total) = char_errors(refs, hyps)?;
    if total == 0 {
        return Err(MetricsError::EmptyReference("characters"));
    }
    Ok(dist as f64 / total as f64)
}

pub fn wer<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<f64, MetricsError> {
    let (dist, total) = word_errors(refs, hyps)?;
    if total == 0 {
        return Err(MetricsError::EmptyReference("words"));
    }
    Ok(dist as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub reference: char,
    pub hypothesis: char,
    pub count: usize,
}

/// Substitution pairs from the alignments, by count descending then
/// lexicographically by (reference, hypothesis); truncated to `top_k`.
pub fn confusion_pairs<S: AsRef<str>>(
    refs: &[S],
    hyps: &[S],
    top_k: usize,
) -> Result<Vec<ConfusionPair>, MetricsError> {
    check_lengths(refs, hyps)?;
    let mut counts: BTreeMap<(char, char), usize> = BTreeMap::new();
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (chars(r.as_ref()), chars(h.as_ref()));
        let (_, ops) = edit_distance(&r, &h);
        let (mut i, mut j) = (0, 0);
        for op in ops {
            match op {
                EditOp::Match => {
                    i += 1;
                    j += 1;
                }
                EditOp::Substitute => {
                    *counts.entry((r[i], h[j])).or_default() += 1;
                    i += 1;
                    j += 1;
                }
                EditOp::Delete => i += 1,
                EditOp::Insert => j += 1,
            }
        }
    }
    let mut pairs: Vec<ConfusionPair> = counts
        .into_iter()
        .map(|((reference, hypothesis), count)| ConfusionPair {
            reference,
            hypothesis,
            count,
        })
        .collect();
    // BTreeMap order is already lexicographic; stable sort keeps it within equal counts
    pairs.sort_by_key(|p| std::cmp::Reverse(p.count));
    pairs.truncate(top_k);
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cer: f64,
    pub wer: f64,
    pub n_lines: usize,
    pub n_chars: usize,
    pub n_words: usize,
    pub confusion: Vec<ConfusionPair>,
}

impl EvalReport {
    pub fn compute<S: AsRef<str>>(refs: &[S], hyps: &[S], top_k: usize) -> Result<Self, MetricsError> {
        let (cd, n_chars) = char_errors(refs, hyps)?;
        if n_chars == 0 {
            return Err(MetricsError::EmptyReference("characters"));
        }
        let (wd, n_words) = word_errors(refs, hyps)?;
        Ok(EvalReport {
            cer: cd as f64 / n_chars as f64,
            wer: if n_words == 0 { 0.0 } else { wd as f64 / n_words as f64 },
            n_lines: refs.len(),
            n_chars,
            n_words,
            confusion: confusion_pairs(refs, hyps, top_k)?,
        })
    }

    /// Three-column `Pair 1 / Pair 2 / Count` table, tab separated.
    pub fn confusion_table(&self) -> String {
        let mut s = String::from("Pair 1\tPair 2\tCount\n");
        for p in &self.confusion {
            let _ = writeln!(s, "{}\t{}\t{}", p.reference, p.hypothesis, p.count);
        }
        s
    }

    pub fn to_text(&self) -> String {
        format!(
            "lines: {}\ncharacters: {}\nwords: {}\nCER: {:.2}%\nWER: {:.2}%\n\n{}",
            self.n_lines,
            self.n_chars,
            self.n_words,
            self.cer * 100.0,
            self.wer * 100.0,
            self.confusion_table()
        )
    }
}
