//! Evaluation metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 1e-3;

/// Fraction of elements with `|pred − label| ≤ tau`.
pub fn threshold_accuracy(pred: &Tensor, label: &Tensor, tau: f64) -> Result<f64> {
    let (hits, total) = threshold_hits(pred, label, tau)?;
    Ok(hits as f64 / total as f64)
}

/// `(elements within tau, element count)`.
pub fn threshold_hits(pred: &Tensor, label: &Tensor, tau: f64) -> Result<(usize, usize)> {
    if pred.shape() != label.shape() {
        return Err(Error::shape("threshold_accuracy", pred.shape(), label.shape()));
    }
    if !(tau >= 0.0) {
        return Err(Error::invalid("threshold_accuracy", "tau must be non-negative"));
    }
    let hits = pred
        .data()
        .iter()
        .zip(label.data())
        .filter(|(p, l)| (*p - *l).abs() <= tau)
        .count();
    Ok((hits, pred.len()))
}

/// Accuracy and 95% normal-approximation half-width `1.96·√(p(1−p)/n)`.
pub fn accuracy_ci(correct: usize, total: usize) -> Result<(f64, f64)> {
    if total == 0 {
        return Err(Error::invalid("accuracy_ci", "no samples"));
    }
    if correct > total {
        return Err(Error::invalid("accuracy_ci", "more correct than total"));
    }
    let p = correct as f64 / total as f64;
    Ok((p, 1.96 * (p * (1.0 - p) / total as f64).sqrt()))
}

/// Row-wise argmax of a 2-D tensor; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    if logits.rank() != 2 {
        return Err(Error::invalid("argmax", format!("expected 2-D logits, got {:?}", logits.shape())));
    }
    let d = logits.shape()[1];
    Ok(logits
        .data()
        .chunks(d)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

fn rows<'a>(t: &'a Tensor, op: &'static str) -> Result<Vec<&'a [f64]>> {
    if t.rank() != 2 {
        return Err(Error::invalid(op, format!("expected 2-D embeddings, got {:?}", t.shape())));
    }
    let d = t.shape()[1];
    let out: Vec<&[f64]> = t.data().chunks(d).collect();
    if out.iter().any(|r| r.iter().all(|v| *v == 0.0)) {
        return Err(Error::invalid(op, "zero-norm embedding"));
    }
    Ok(out)
}

/// Labels each query with the label of the support embedding of highest
/// cosine similarity (ties go to the lowest support index); returns the
/// number of correct queries.
pub fn nil_correct(support: &Tensor, support_labels: &[usize], query: &Tensor, query_labels: &[usize]) -> Result<usize> {
    let s = rows(support, "nil")?;
    let q = rows(query, "nil")?;
    if s.len() != support_labels.len() || q.len() != query_labels.len() || support.shape()[1] != query.shape()[1] {
        return Err(Error::invalid("nil", "embedding and label counts disagree"));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s_norm: Vec<f64> = s.iter().map(|r| norm(r)).collect();
    let mut correct = 0;
    for (qi, qr) in q.iter().enumerate() {
        let qn = norm(qr);
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (si, sr) in s.iter().enumerate() {
            let dot: f64 = qr.iter().zip(sr.iter()).map(|(a, b)| a * b).sum();
            let sim = dot / (qn * s_norm[si]);
            if sim > best_sim {
                best_sim = sim;
                best = si;
            }
        }
        if support_labels[best] == query_labels[qi] {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Fraction of queries labeled correctly by [`nil_correct`].
pub fn nil_accuracy(support: &Tensor, support_labels: &[usize], query: &Tensor, query_labels: &[usize]) -> Result<f64> {
    let c = nil_correct(support, support_labels, query, query_labels)?;
    Ok(c as f64 / query_labels.len() as f64)
}
