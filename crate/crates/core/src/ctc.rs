//! Connectionist Temporal Classification.
//!
//! Loss and gradient use the log-space forward-backward recursion over the
//! blank-extended label `[-, l1, -, l2, ..., lL, -]`. Decoding is greedy by
//! default; a prefix beam search is available for experiments.

use std::cmp::Ordering;
use std::collections::HashMap;

use thiserror::Error;

use crate::charset::{Charset, LabelSeq, BLANK};
use crate::nn::{Real, Tensor};

/// Per-row tolerance on `sum(exp(row)) == 1`.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("target of length {len} ({repeats} adjacent repeats) cannot align to {timesteps} timesteps")]
    Infeasible {
        timesteps: usize,
        len: usize,
        repeats: usize,
    },
    #[error("row {row} is not a log-probability distribution (sum of exp = {sum})")]
    NotNormalized { row: usize, sum: f64 },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("logit sequence shape: {0}")]
    Shape(String),
}

/// Row-major `[T, C]` log-probabilities; class 0 is blank.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitSeq {
    t: usize,
    c: usize,
    values: Vec<f64>,
}

impl LogitSeq {
    pub fn new(t: usize, c: usize, values: Vec<f64>) -> Result<Self, CtcError> {
        if t == 0 || c == 0 || values.len() != t * c {
            return Err(CtcError::Shape(format!(
                "{} values for T={t}, C={c}",
                values.len()
            )));
        }
        Ok(LogitSeq { t, c, values })
    }

    /// Log-softmax of arbitrary scores, row by row.
    pub fn from_scores(t: usize, c: usize, scores: &[f64]) -> Result<Self, CtcError> {
        let mut v = scores.to_vec();
        for row in v.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Self::new(t, c, v)
    }

    /// Extracts sample `n` of a `[T, N, C]` model output.
    pub fn from_batch<R: Real>(output: &Tensor<R>, n: usize) -> Result<Self, CtcError> {
        let &[t, batch, c] = output.shape() else {
            return Err(CtcError::Shape(format!("expected [T,N,C], got {:?}", output.shape())));
        };
        if n >= batch {
            return Err(CtcError::Shape(format!("sample {n} of {batch}")));
        }
        let mut values = Vec::with_capacity(t * c);
        for step in 0..t {
            let row = &output.data()[(step * batch + n) * c..(step * batch + n + 1) * c];
            values.extend(row.iter().map(|v| v.f64()));
        }
        Self::new(t, c, values)
    }

    pub fn timesteps(&self) -> usize {
        self.t
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.c..(t + 1) * self.c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn check_normalized(&self) -> Result<(), CtcError> {
        for t in 0..self.t {
            let sum: f64 = self.row(t).iter().map(|v| v.exp()).sum();
            if !((sum - 1.0).abs() <= NORMALIZATION_TOLERANCE) {
                return Err(CtcError::NotNormalized { row: t, sum });
            }
        }
        Ok(())
    }

    /// Per-timestep argmax (lowest class index wins ties).
    pub fn argmax_path(&self) -> Vec<usize> {
        (0..self.t)
            .map(|t| {
                let row = self.row(t);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct CtcResult {
    /// Negative log-likelihood in nats.
    pub loss: f64,
    /// `dloss/dz` for pre-softmax scores `z` whose log-softmax is the input; `[T, C]`.
    pub grad: Vec<f64>,
}

fn adjacent_repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Whether `target` has at least one alignment onto `timesteps` frames.
pub fn ctc_feasible(timesteps: usize, target: &LabelSeq) -> bool {
    timesteps >= target.len() + adjacent_repeats(target.as_slice())
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// CTC negative log-likelihood and its gradient with respect to the pre-softmax scores.
pub fn ctc_loss(logits: &LogitSeq, target: &LabelSeq) -> Result<CtcResult, CtcError> {
    let (t_len, c) = (logits.t, logits.c);
    for &l in target.as_slice() {
        if l == BLANK || l >= c {
            return Err(CtcError::BadLabel { label: l, classes: c });
        }
    }
    if !ctc_feasible(t_len, target) {
        return Err(CtcError::Infeasible {
            timesteps: t_len,
            len: target.len(),
            repeats: adjacent_repeats(target.as_slice()),
        });
    }
    logits.check_normalized()?;

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target.as_slice() {
        ext.push(l);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let neg = f64::NEG_INFINITY;
    let lp = |t: usize, s: usize| logits.values[t * c + ext[s]];
    // skip transition s-2 -> s allowed for non-blank labels differing from s-2
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == neg { neg } else { a + lp(t, s) };
        }
    }

    let mut beta = vec![neg; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == neg { neg } else { b + lp(t, s) };
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    let loss = -log_p;

    // grad_z = softmax(z) - posterior occupancy per class
    let mut grad = vec![0.0; t_len * c];
    let mut occupancy = vec![neg; c];
    for t in 0..t_len {
        occupancy.iter_mut().for_each(|v| *v = neg);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == neg {
                continue;
            }
            let k = ext[s];
            occupancy[k] = log_add(occupancy[k], ab - lp(t, s));
        }
        let row = logits.row(t);
        for k in 0..c {
            let post = if occupancy[k] == neg { 0.0 } else { (occupancy[k] - log_p).exp() };
            grad[t * c + k] = row[k].exp() - post;
        }
    }
    Ok(CtcResult { loss, grad })
}

/// Merges adjacent repeats then drops blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last = None;
    for &k in path {
        if Some(k) != last && k != BLANK {
            out.push(k);
        }
        last = Some(k);
    }
    out
}

/// Greedy decode: argmax path, collapsed. Confidence is `exp(mean selected log-prob)`.
pub fn greedy_decode(logits: &LogitSeq, cs: &Charset) -> (String, f64) {
    let path = logits.argmax_path();
    let mean = path
        .iter()
        .enumerate()
        .map(|(t, &k)| logits.row(t)[k])
        .sum::<f64>()
        / logits.t as f64;
    let labels = collapse(&path);
    let text = labels.iter().map(|&k| cs.char_at(k).unwrap_or('\u{FFFD}')).collect();
    (text, mean.exp())
}

#[derive(Clone, Copy)]
struct BeamProb {
    blank: f64,
    non_blank: f64,
}

impl BeamProb {
    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

const EMPTY: BeamProb = BeamProb {
    blank: f64::NEG_INFINITY,
    non_blank: f64::NEG_INFINITY,
};

fn decode_or_marker(cs: &Charset, prefix: &[usize]) -> String {
    prefix.iter().map(|&k| cs.char_at(k).unwrap_or('\u{FFFD}')).collect()
}

/// Orders hypotheses by descending log-probability, ties by decoded text.
fn rank(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// Prefix beam search. Returns up to `beam_width` hypotheses, best first;
/// ties are broken lexicographically by decoded text.
pub fn beam_decode(logits: &LogitSeq, cs: &Charset, beam_width: usize) -> Vec<(String, f64)> {
    let width = beam_width.max(1);
    let mut beams: Vec<(Vec<usize>, BeamProb)> = vec![(
        Vec::new(),
        BeamProb {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];
    for t in 0..logits.t {
        let row = logits.row(t);
        let mut next: HashMap<Vec<usize>, BeamProb> = HashMap::new();
        for (prefix, p) in &beams {
            let total = p.total();
            // blank keeps the prefix
            let e = next.entry(prefix.clone()).or_insert(EMPTY);
            e.blank = log_add(e.blank, total + row[BLANK]);
            for (k, &lk) in row.iter().enumerate().skip(1) {
                let last = prefix.last().copied();
                if last == Some(k) {
                    // repeat without separating blank collapses into the same prefix
                    let e = next.entry(prefix.clone()).or_insert(EMPTY);
                    e.non_blank = log_add(e.non_blank, p.non_blank + lk);
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let e = next.entry(ext).or_insert(EMPTY);
                    e.non_blank = log_add(e.non_blank, p.blank + lk);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let e = next.entry(ext).or_insert(EMPTY);
                    e.non_blank = log_add(e.non_blank, total + lk);
                }
            }
        }
        // Doubled labels need a separating blank; without one they carry no mass.
        let mut ranked: Vec<(Vec<usize>, BeamProb, String)> = next
            .into_iter()
            .filter(|(_, b)| b.total() > f64::NEG_INFINITY)
            .map(|(p, b)| {
                let s = decode_or_marker(cs, &p);
                (p, b, s)
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.1.total()
                .partial_cmp(&a.1.total())
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.2.cmp(&b.2))
        });
        ranked.truncate(width);
        beams = ranked.into_iter().map(|(p, b, _)| (p, b)).collect();
    }
    let mut out: Vec<(String, f64)> = beams
        .into_iter()
        .map(|(p, b)| (decode_or_marker(cs, &p), b.total()))
        .collect();
    out.sort_by(rank);
    out
}
